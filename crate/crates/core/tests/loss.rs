//! Objective checks: target assignment against an exhaustive oracle, the
//! documented loss values, the report identities, and weight homogeneity.

mod common;

use common::assert_close;
use meafdet_core::loss::{
    assign_targets, detection_loss, loss_report, sr_loss, total_loss, GroundTruthBox, LossWeights,
};
use meafdet_core::scalar::Scalar;
use meafdet_core::tape::{Tape, Var};
use meafdet_core::tensor::Tensor;
use meafdet_core::init::{random_tensor, SeedRng};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

const STRIDES: [usize; 3] = [8, 16, 32];

fn anchors() -> Vec<Vec<f64>> {
    vec![vec![12.0], vec![32.0], vec![80.0]]
}

fn gt(cx: f64, cy: f64, w: f64, h: f64) -> GroundTruthBox {
    GroundTruthBox {
        class_id: 0,
        cx,
        cy,
        w,
        h,
    }
}

// --- assignment -------------------------------------------------------------

#[test]
fn exact_anchor_match_lands_on_fine_scale() {
    // a 12x12 box on a 96px image
    let boxes = vec![vec![gt(0.5, 0.5, 0.125, 0.125)]];
    let a = assign_targets::<f32>(&boxes, &anchors(), &STRIDES, 1, 1, 96, 96).unwrap();
    assert_eq!(a.positives.len(), 1);
    assert_eq!(a.positives[0].scale, 0);
    assert_eq!((a.positives[0].gy, a.positives[0].gx), (6, 6));
    assert_eq!(a.rejected, 0);
}

#[test]
fn empty_ground_truth_gives_empty_assignment() {
    let boxes: Vec<Vec<GroundTruthBox>> = vec![vec![], vec![]];
    let a = assign_targets::<f32>(&boxes, &anchors(), &STRIDES, 1, 1, 96, 96).unwrap();
    assert!(a.positives.is_empty());
    for t in &a.objectness {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn degenerate_boxes_rejected_with_count() {
    let boxes = vec![vec![gt(0.5, 0.5, 0.0, 0.1), gt(0.5, 0.5, 0.06, 0.06)]];
    let a = assign_targets::<f32>(&boxes, &anchors(), &STRIDES, 1, 1, 96, 96).unwrap();
    assert_eq!(a.rejected, 1);
    assert_eq!(a.positives.len(), 1);
}

#[test]
fn assignment_matches_exhaustive_size_iou_oracle() {
    let mut rng = SeedRng::seed_from_u64(3);
    let img = 128usize;
    for _case in 0..20 {
        let boxes: Vec<GroundTruthBox> = (0..10)
            .map(|_| {
                let w = rng.gen_range(0.03..0.9);
                let h = rng.gen_range(0.03..0.9);
                gt(
                    rng.gen_range(w / 2.0..1.0 - w / 2.0),
                    rng.gen_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                )
            })
            .collect();
        let a =
            assign_targets::<f32>(&[boxes.clone()], &anchors(), &STRIDES, 1, 1, img, img).unwrap();
        assert_eq!(a.positives.len(), boxes.len());
        for (b, p) in boxes.iter().zip(&a.positives) {
            // oracle: brute-force the best (scale, anchor) by size IoU
            let (wpx, hpx) = (b.w * img as f64, b.h * img as f64);
            let iou = |aw: f64| {
                let inter = wpx.min(aw) * hpx.min(aw);
                inter / (wpx * hpx + aw * aw - inter)
            };
            let mut best = 0usize;
            let mut best_v = -1.0;
            for (s, &aw) in [12.0, 32.0, 80.0].iter().enumerate() {
                let v = iou(aw);
                if v > best_v {
                    best_v = v;
                    best = s;
                }
            }
            assert_eq!(p.scale, best, "box {b:?}");
            let stride = STRIDES[best] as f64;
            assert_eq!(p.gx, ((b.cx * img as f64) / stride) as usize);
            assert_eq!(p.gy, ((b.cy * img as f64) / stride) as usize);
        }
    }
}

// --- detection loss ------------------------------------------------------------

/// Builds raw logits that decode exactly to the assignment's targets.
fn perfect_raw<T: Scalar>(
    tape: &mut Tape<T>,
    assignment: &meafdet_core::loss::TargetAssignment<T>,
    img: usize,
) -> Vec<Var> {
    let mut raws = Vec::new();
    for (a, &stride) in STRIDES.iter().enumerate() {
        let g = img / stride;
        let mut t = Tensor::<T>::full(&[1, 6, g, g], T::of(-20.0));
        // tx=ty=tw=th default 0 is wrong for negatives but irrelevant; only
        // obj channel matters there
        for c in 0..4 {
            for p in 0..g * g {
                t.data_mut()[(c * g * g) + p] = T::zero();
            }
        }
        for pos in assignment.positives.iter().filter(|p| p.scale == a) {
            let (x1, y1, x2, y2) = pos.corners;
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            let (w, h) = (x2 - x1, y2 - y1);
            let sd = stride as f64;
            // sigmoid(t) = cx/stride - gx  =>  t = logit of the fraction
            let fx = cx / sd - pos.gx as f64;
            let fy = cy / sd - pos.gy as f64;
            let logit = |f: f64| (f / (1.0 - f)).ln();
            let anchor = anchors()[a][0];
            let vals = [
                logit(fx),
                logit(fy),
                (w / anchor).ln(),
                (h / anchor).ln(),
                20.0,
                20.0,
            ];
            for (ch, v) in vals.into_iter().enumerate() {
                let o = t.offset4(pos.image, ch, pos.gy, pos.gx);
                t.data_mut()[o] = T::of(v);
            }
        }
        raws.push(tape.leaf(t));
    }
    raws
}

#[test]
fn perfect_predictions_have_tiny_loss() {
    let img = 96usize;
    let boxes = vec![vec![gt(0.3125, 0.3125, 0.125, 0.125), gt(0.75, 0.75, 0.0625, 0.0625)]];
    let assignment = assign_targets::<f64>(&boxes, &anchors(), &STRIDES, 1, 1, img, img).unwrap();
    let mut tape = Tape::<f64>::new();
    let raw = perfect_raw(&mut tape, &assignment, img);
    let weights = LossWeights::default();
    let det = detection_loss(&mut tape, &raw, &assignment, &weights, &anchors(), &STRIDES, 1)
        .unwrap();
    let v = tape.value(det.total).unwrap().item().unwrap();
    assert!(v < 1e-6, "perfect-prediction loss {v}");
}

#[test]
fn objectness_at_zero_logits_is_ln2() {
    let img = 64usize;
    let boxes: Vec<Vec<GroundTruthBox>> = vec![vec![]];
    let assignment = assign_targets::<f64>(&boxes, &anchors(), &STRIDES, 1, 1, img, img).unwrap();
    let mut tape = Tape::<f64>::new();
    let raw: Vec<Var> = STRIDES
        .iter()
        .map(|&s| tape.leaf(Tensor::<f64>::zeros(&[1, 6, img / s, img / s])))
        .collect();
    let det = detection_loss(
        &mut tape,
        &raw,
        &assignment,
        &LossWeights::default(),
        &anchors(),
        &STRIDES,
        1,
    )
    .unwrap();
    for a in 0..3 {
        let obj = tape.value(det.obj[a]).unwrap().item().unwrap();
        assert_close(obj, std::f64::consts::LN_2, 1e-9, "BCE at 0.5");
        // no positives: loc and cls are defined zeros
        assert_eq!(tape.value(det.loc[a]).unwrap().item().unwrap(), 0.0);
        assert_eq!(tape.value(det.cls[a]).unwrap().item().unwrap(), 0.0);
    }
}

fn random_loss_setup(
    seed: u64,
) -> (
    Vec<Vec<GroundTruthBox>>,
    usize,
) {
    let mut rng = SeedRng::seed_from_u64(seed);
    let img = 64usize;
    let boxes: Vec<Vec<GroundTruthBox>> = (0..2)
        .map(|_| {
            (0..rng.gen_range(1..4))
                .map(|_| {
                    let w = rng.gen_range(0.05..0.5);
                    let h = rng.gen_range(0.05..0.5);
                    gt(
                        rng.gen_range(w / 2.0..1.0 - w / 2.0),
                        rng.gen_range(h / 2.0..1.0 - h / 2.0),
                        w,
                        h,
                    )
                })
                .collect()
        })
        .collect();
    (boxes, img)
}

fn eval_detection(weights: &LossWeights, seed: u64) -> (f64, [f64; 9]) {
    let (boxes, img) = random_loss_setup(seed);
    let assignment = assign_targets::<f64>(&boxes, &anchors(), &STRIDES, 1, 1, img, img).unwrap();
    let mut tape = Tape::<f64>::new();
    let mut rng = SeedRng::seed_from_u64(seed + 1000);
    let raw: Vec<Var> = STRIDES
        .iter()
        .map(|&s| {
            let t = random_tensor::<f64>(&mut rng, &[2, 6, img / s, img / s], -2.0, 2.0);
            tape.leaf(t)
        })
        .collect();
    let det =
        detection_loss(&mut tape, &raw, &assignment, weights, &anchors(), &STRIDES, 1).unwrap();
    let mut comps = [0.0; 9];
    for a in 0..3 {
        comps[a] = tape.value(det.obj[a]).unwrap().item().unwrap();
        comps[3 + a] = tape.value(det.loc[a]).unwrap().item().unwrap();
        comps[6 + a] = tape.value(det.cls[a]).unwrap().item().unwrap();
    }
    (tape.value(det.total).unwrap().item().unwrap(), comps)
}

#[test]
fn doubling_one_alpha_doubles_exactly_that_contribution() {
    let base_w = LossWeights::default();
    let (base, comps) = eval_detection(&base_w, 7);
    let mut w2 = base_w.clone();
    w2.alpha_l[1] *= 2.0;
    let (scaled, comps2) = eval_detection(&w2, 7);
    assert_eq!(comps, comps2, "raw components must not move");
    let delta = scaled - base;
    let expected = base_w.lambda_l * base_w.alpha_l[1] * comps[4];
    assert_close(delta, expected, 1e-9, "stride-16 localization contribution");
}

#[test]
fn detection_loss_homogeneous_in_weights() {
    for k in [2.0f64, 3.0, 0.25] {
        let base_w = LossWeights::default();
        let (base, _) = eval_detection(&base_w, 11);
        let mut wk = base_w.clone();
        for a in 0..3 {
            wk.alpha_o[a] *= k;
            wk.alpha_l[a] *= k;
            wk.alpha_c[a] *= k;
        }
        let (scaled, _) = eval_detection(&wk, 11);
        let rel = (scaled - k * base).abs() / (k * base).abs();
        assert!(rel <= 1e-7, "homogeneity k={k}: {scaled} vs {}", k * base);
    }
}

#[test]
fn report_identities_hold() {
    let (boxes, img) = random_loss_setup(23);
    let weights = LossWeights {
        c1: 0.7,
        c2: 1.3,
        ..LossWeights::default()
    };
    let assignment = assign_targets::<f64>(&boxes, &anchors(), &STRIDES, 1, 1, img, img).unwrap();
    let mut tape = Tape::<f64>::new();
    let mut rng = SeedRng::seed_from_u64(24);
    let raw: Vec<Var> = STRIDES
        .iter()
        .map(|&s| {
            let t = random_tensor::<f64>(&mut rng, &[2, 6, img / s, img / s], -2.0, 2.0);
            tape.leaf(t)
        })
        .collect();
    let det =
        detection_loss(&mut tape, &raw, &assignment, &weights, &anchors(), &STRIDES, 1).unwrap();
    let s = random_tensor::<f64>(&mut rng, &[2, 4, 32, 32], 0.0, 1.0);
    let x = random_tensor::<f64>(&mut rng, &[2, 4, 64, 64], 0.0, 1.0);
    let sv = tape.leaf(s);
    let xv = tape.constant(x);
    let sr = sr_loss(&mut tape, sv, xv).unwrap();
    let total = total_loss(&mut tape, det.total, sr, &weights).unwrap();
    let report = loss_report(&tape, total, &det, det.total, Some(sr)).unwrap();
    assert!(report.consistency_error(&weights) <= 1e-6);
    assert!(report.total > 0.0 && report.detection > 0.0 && report.sr > 0.0);
}

// --- reconstruction loss ----------------------------------------------------

#[test]
fn sr_loss_examples() {
    let mut tape = Tape::<f32>::new();
    let mut rng = SeedRng::seed_from_u64(31);
    let x = random_tensor::<f32>(&mut rng, &[1, 4, 8, 8], 0.0, 1.0);
    let xv = tape.constant(x.clone());
    // s == D(x) -> 0 exactly
    let d = tape
        .resize_spatial(xv, 2, meafdet_core::ResizeDir::DownAvg)
        .unwrap();
    let s_eq = tape.value(d).unwrap().clone();
    let sv = tape.leaf(s_eq.clone());
    let l = sr_loss(&mut tape, sv, xv).unwrap();
    assert_eq!(tape.value(l).unwrap().item().unwrap(), 0.0);

    // s = D(x) + 1 -> exactly 1 (mean reduction)
    let plus: Vec<f32> = s_eq.data().iter().map(|v| v + 1.0).collect();
    let sv = tape.leaf(Tensor::new(s_eq.shape(), plus).unwrap());
    let l = sr_loss(&mut tape, sv, xv).unwrap();
    assert_close(
        tape.value(l).unwrap().item().unwrap() as f64,
        1.0,
        1e-6,
        "offset sr loss",
    );

    // random pair vs loop oracle
    let s = random_tensor::<f32>(&mut rng, &[1, 4, 4, 4], 0.0, 1.0);
    let sv = tape.leaf(s.clone());
    let l = sr_loss(&mut tape, sv, xv).unwrap();
    let mut acc = 0.0f64;
    for c in 0..4 {
        for y in 0..4 {
            for xx in 0..4 {
                let mut block = 0.0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        block += x.at4(0, c, y * 2 + dy, xx * 2 + dx) as f64;
                    }
                }
                acc += (s.at4(0, c, y, xx) as f64 - block / 4.0).abs();
            }
        }
    }
    assert_close(
        tape.value(l).unwrap().item().unwrap() as f64,
        acc / 64.0,
        1e-6,
        "sr loop oracle",
    );

    // shape mismatch and non-integer ratios are errors
    let bad = tape.leaf(Tensor::zeros(&[1, 4, 3, 3]));
    assert!(sr_loss(&mut tape, bad, xv).is_err());
}

#[test]
fn sr_loss_symmetric_at_ratio_one() {
    let mut tape = Tape::<f32>::new();
    let mut rng = SeedRng::seed_from_u64(33);
    let a = random_tensor::<f32>(&mut rng, &[1, 4, 4, 4], 0.0, 1.0);
    let b = random_tensor::<f32>(&mut rng, &[1, 4, 4, 4], 0.0, 1.0);
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let l1 = sr_loss(&mut tape, av, bv).unwrap();
    let l2 = sr_loss(&mut tape, bv, av).unwrap();
    assert_eq!(
        tape.value(l1).unwrap().item().unwrap(),
        tape.value(l2).unwrap().item().unwrap()
    );
}

// --- total ---------------------------------------------------------------------

#[test]
fn total_loss_weighted_sum() {
    let mut tape = Tape::<f64>::new();
    let det = tape.leaf(Tensor::scalar(0.5f64));
    let sr = tape.leaf(Tensor::scalar(0.25f64));
    let cases = [
        (1.0, 0.0, 0.5),
        (0.0, 1.0, 0.25),
        (1.0, 1.0, 0.75),
    ];
    for (c1, c2, want) in cases {
        let w = LossWeights {
            c1,
            c2,
            ..LossWeights::default()
        };
        let t = total_loss(&mut tape, det, sr, &w).unwrap();
        assert_eq!(tape.value(t).unwrap().item().unwrap(), want);
    }
}

#[test]
fn weights_validation_rejects_negative() {
    let w = LossWeights {
        lambda_o: -1.0,
        ..LossWeights::default()
    };
    assert!(w.validate().is_err());
}
