//! Detector behaviour: shape contracts, decode arithmetic, NMS against a
//! quadratic reference, the reconstruction decoder, and the strip lifecycle.

mod common;

use meafdet_core::fusion::FusionConfig;
use meafdet_core::init::{random_tensor, SeedRng};
use meafdet_core::model::{
    box_iou, decode_predictions, nms, BackboneConfig, DetectModel, Detection, Modality,
    SrBranchConfig,
};
use meafdet_core::param::Parameters;
use meafdet_core::tape::Tape;
use meafdet_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

fn model(seed: u64, modality: Modality, with_sr: bool) -> DetectModel<f32> {
    let mut rng = SeedRng::seed_from_u64(seed);
    DetectModel::new(
        &mut rng,
        modality,
        FusionConfig::default(),
        BackboneConfig::default(),
        SrBranchConfig::default(),
        with_sr,
    )
    .unwrap()
}

fn inputs(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = SeedRng::seed_from_u64(seed);
    (
        random_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0),
        random_tensor(&mut rng, &[1, 1, h, w], 0.0, 1.0),
    )
}

fn raw_tensors(m: &DetectModel<f32>, seed: u64, with_sr: bool) -> (Vec<Tensor<f32>>, Option<Tensor<f32>>) {
    let (rgb, ir) = inputs(seed, 64, 64);
    let mut t = Tape::<f32>::new();
    let b = m.bind(&mut t);
    let (rv, iv) = (t.constant(rgb), t.constant(ir));
    let out = m.forward(&mut t, &b, rv, iv, with_sr, false).unwrap();
    let raw = out
        .raw
        .iter()
        .map(|&v| t.value(v).unwrap().clone())
        .collect();
    let sr = out.sr_out.map(|v| t.value(v).unwrap().clone());
    (raw, sr)
}

#[test]
fn backbone_stride_arithmetic_and_widths() {
    let m = model(1, Modality::Fused, true);
    let (raw, sr) = raw_tensors(&m, 2, true);
    assert_eq!(raw[0].shape(), &[1, 6, 8, 8]); // stride 8 on 64, B*(5+K)=6
    assert_eq!(raw[1].shape(), &[1, 6, 4, 4]);
    assert_eq!(raw[2].shape(), &[1, 6, 2, 2]);
    // tap stage 1 (stride 4, 16x16) with one upsample stage -> stride 2
    assert_eq!(sr.unwrap().shape(), &[1, 4, 32, 32]);
}

#[test]
fn forward_is_deterministic() {
    let m = model(3, Modality::Fused, true);
    let (a, _) = raw_tensors(&m, 4, true);
    let (b, _) = raw_tensors(&m, 4, true);
    assert_eq!(a, b);
}

#[test]
fn forward_rejects_indivisible_input() {
    let m = model(5, Modality::Fused, false);
    let mut rng = SeedRng::seed_from_u64(6);
    let rgb = random_tensor::<f32>(&mut rng, &[1, 3, 60, 64], 0.0, 1.0);
    let ir = random_tensor::<f32>(&mut rng, &[1, 1, 60, 64], 0.0, 1.0);
    let mut t = Tape::<f32>::new();
    let b = m.bind(&mut t);
    let (rv, iv) = (t.constant(rgb), t.constant(ir));
    assert!(m.forward(&mut t, &b, rv, iv, false, false).is_err());
}

#[test]
fn unimodal_models_use_single_modality() {
    let m = model(7, Modality::Rgb, false);
    assert!(m.fusion.is_none() && m.stem.is_some());
    let (rgb, _) = inputs(8, 64, 64);
    let mut rng = SeedRng::seed_from_u64(9);
    let ir_a = random_tensor::<f32>(&mut rng, &[1, 1, 64, 64], 0.0, 1.0);
    let ir_b = random_tensor::<f32>(&mut rng, &[1, 1, 64, 64], 0.0, 1.0);
    let run = |ir: &Tensor<f32>| {
        let mut t = Tape::<f32>::new();
        let b = m.bind(&mut t);
        let (rv, iv) = (t.constant(rgb.clone()), t.constant(ir.clone()));
        let out = m.forward(&mut t, &b, rv, iv, false, false).unwrap();
        t.value(out.raw[0]).unwrap().clone()
    };
    assert_eq!(run(&ir_a), run(&ir_b), "rgb model must ignore ir");
}

#[test]
fn sr_params_never_influence_detections() {
    let m = model(10, Modality::Fused, true);
    let mut m2 = m.clone();
    // scramble only the reconstruction branch
    m2.sr.as_mut().unwrap().visit_mut(&mut |p| {
        for v in p.value.data_mut() {
            *v += 7.5;
        }
    });
    let (a, _) = raw_tensors(&m, 11, true);
    let (b, _) = raw_tensors(&m2, 11, true);
    assert_eq!(a, b);
}

#[test]
fn strip_sr_preserves_detections_and_shrinks() {
    let m = model(12, Modality::Fused, true);
    let (before, _) = raw_tensors(&m, 13, false);
    let count_before = m.param_count();
    let stripped = m.strip_sr();
    let (after, sr) = raw_tensors(&stripped, 13, true);
    assert_eq!(before, after);
    assert!(sr.is_none());
    assert!(stripped.param_count() < count_before);
    let again = stripped.clone().strip_sr();
    assert_eq!(again.param_count(), stripped.param_count());
}

#[test]
fn sr_gradient_reaches_backbone() {
    let mut m = model(14, Modality::Fused, true);
    let (rgb, ir) = inputs(15, 64, 64);
    let mut t = Tape::<f32>::new();
    let b = m.bind(&mut t);
    let (rv, iv) = (t.constant(rgb), t.constant(ir));
    let out = m.forward(&mut t, &b, rv, iv, true, false).unwrap();
    let sr = out.sr_out.unwrap();
    let loss = t.mean(sr).unwrap();
    t.backward(loss).unwrap();
    // only the layers on the reconstruction path carry gradient here
    m.stages[0].accumulate(&t, &b.stages[0]).unwrap();
    m.stages[1].accumulate(&t, &b.stages[1]).unwrap();
    for (i, g) in [&m.stages[0], &m.stages[1]].iter().enumerate() {
        let g = g.weight.grad.as_ref().unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "stage {i} got no gradient");
    }
    // layers past the tap are off the path
    assert!(t.grad(b.stages[4].weight).unwrap().is_none());
}

#[test]
fn sr_decoder_stage_counts() {
    // zero upsample stages: output spatial dims equal tap dims
    let mut rng = SeedRng::seed_from_u64(16);
    let m0 = DetectModel::<f32>::new(
        &mut rng,
        Modality::Fused,
        FusionConfig::default(),
        BackboneConfig::default(),
        SrBranchConfig {
            tap_stage: 1,
            upsample_stages: 0,
            widths: vec![],
            out_channels: 4,
        },
        true,
    )
    .unwrap();
    let (_, sr) = raw_tensors(&m0, 17, true);
    assert_eq!(sr.unwrap().shape(), &[1, 4, 16, 16]);

    // two upsample stages from a [1,32,16,16] tap -> [1,4,64,64]
    let mut rng = SeedRng::seed_from_u64(18);
    let m2 = DetectModel::<f32>::new(
        &mut rng,
        Modality::Fused,
        FusionConfig::default(),
        BackboneConfig {
            widths: vec![32, 64, 96, 128, 160],
            ..BackboneConfig::default()
        },
        SrBranchConfig {
            tap_stage: 1,
            upsample_stages: 2,
            widths: vec![32, 16],
            out_channels: 4,
        },
        true,
    )
    .unwrap();
    let (_, sr) = raw_tensors(&m2, 19, true);
    assert_eq!(sr.unwrap().shape(), &[1, 4, 64, 64]);
}

#[test]
fn sr_config_validation() {
    let bb = BackboneConfig::default();
    // 3 upsample stages from stride 4 would overshoot
    let bad = SrBranchConfig {
        tap_stage: 1,
        upsample_stages: 3,
        widths: vec![16, 16, 16],
        out_channels: 4,
    };
    assert!(bad.validate(&bb).is_err());
    assert!(SrBranchConfig::default().validate(&bb).is_ok());
    assert_eq!(SrBranchConfig::default().target_stride(&bb).unwrap(), 2);
}

// --- decoding ---------------------------------------------------------------

fn zero_raw(k: usize) -> Vec<Tensor<f32>> {
    vec![
        Tensor::zeros(&[1, 5 + k, 8, 8]),
        Tensor::zeros(&[1, 5 + k, 4, 4]),
        Tensor::zeros(&[1, 5 + k, 2, 2]),
    ]
}

const ANCHORS: [f64; 3] = [12.0, 32.0, 80.0];

fn anchors() -> Vec<Vec<f64>> {
    ANCHORS.iter().map(|&a| vec![a]).collect()
}

#[test]
fn decode_center_offset_and_anchor_size() {
    let raw = zero_raw(1);
    let dets = decode_predictions(&raw, &anchors(), &[8, 16, 32], 1, 1, 0.0, 64, 64).unwrap();
    // zero logits: center of cell (0,0) at stride 8 is (4,4); the 12px anchor
    // around it clips to [0, 10]
    let d = dets[0]
        .iter()
        .find(|d| d.x1 == 0.0 && d.y1 == 0.0 && d.x2 == 10.0 && d.y2 == 10.0)
        .expect("cell (0,0) detection");
    assert_eq!(d.class_id, 0);
    let d = dets[0]
        .iter()
        .find(|d| (d.x1 + d.x2) / 2.0 == 12.0 && (d.y1 + d.y2) / 2.0 == 12.0)
        .expect("cell (1,1) detection");
    assert_eq!(d.x2 - d.x1, 12.0);
    assert_eq!(d.y2 - d.y1, 12.0);
    // zero logits score = 0.25 everywhere
    assert!(dets[0].iter().all(|d| (d.score - 0.25).abs() < 1e-9));
}

#[test]
fn decode_extreme_threshold_is_safe() {
    let raw = zero_raw(1);
    let dets = decode_predictions(&raw, &anchors(), &[8, 16, 32], 1, 1, 0.999999, 64, 64).unwrap();
    assert!(dets[0].is_empty());
}

#[test]
fn decode_clips_to_image_and_scores_in_unit_interval() {
    let mut rng = SeedRng::seed_from_u64(20);
    let raw: Vec<Tensor<f32>> = vec![
        random_tensor(&mut rng, &[1, 6, 8, 8], -10.0, 10.0),
        random_tensor(&mut rng, &[1, 6, 4, 4], -10.0, 10.0),
        random_tensor(&mut rng, &[1, 6, 2, 2], -10.0, 10.0),
    ];
    let dets = decode_predictions(&raw, &anchors(), &[8, 16, 32], 1, 1, 0.0, 64, 64).unwrap();
    for d in &dets[0] {
        assert!(d.x1 >= 0.0 && d.y1 >= 0.0 && d.x2 <= 64.0 && d.y2 <= 64.0);
        assert!(d.x1 <= d.x2 && d.y1 <= d.y2);
        assert!(d.score > 0.0 && d.score < 1.0);
    }
}

// --- NMS ----------------------------------------------------------------------

fn det(class_id: usize, score: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
    Detection {
        class_id,
        score,
        x1,
        y1,
        x2,
        y2,
    }
}

#[test]
fn nms_identical_boxes_keep_one() {
    let boxes = vec![
        det(0, 0.9, 0.0, 0.0, 10.0, 10.0),
        det(0, 0.8, 0.0, 0.0, 10.0, 10.0),
    ];
    let kept = nms(&boxes, 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
}

#[test]
fn nms_disjoint_boxes_all_kept() {
    let boxes = vec![
        det(0, 0.9, 0.0, 0.0, 10.0, 10.0),
        det(0, 0.8, 20.0, 20.0, 30.0, 30.0),
        det(1, 0.7, 0.0, 0.0, 10.0, 10.0), // other class overlaps but survives
    ];
    assert_eq!(nms(&boxes, 0.5).len(), 3);
}

/// Reference NMS: repeatedly pick the global best remaining candidate and
/// drop same-class overlaps. O(n^2), written independently of the impl.
fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            let better = dets[i].score > dets[best].score
                || (dets[i].score == dets[best].score && dets[i].area() > dets[best].area());
            if better {
                best = i;
            }
        }
        kept.push(dets[best].clone());
        alive.retain(|&i| {
            i != best
                && !(dets[i].class_id == dets[best].class_id
                    && box_iou(&dets[i], &dets[best]) > thr)
        });
    }
    kept
}

#[test]
fn nms_matches_reference_on_random_instances() {
    let mut rng = SeedRng::seed_from_u64(21);
    for _case in 0..20 {
        let boxes: Vec<Detection> = (0..50)
            .map(|_| {
                let x1 = rng.gen_range(0.0..80.0);
                let y1 = rng.gen_range(0.0..80.0);
                det(
                    rng.gen_range(0..3),
                    rng.gen_range(0.05..1.0),
                    x1,
                    y1,
                    x1 + rng.gen_range(2.0..20.0),
                    y1 + rng.gen_range(2.0..20.0),
                )
            })
            .collect();
        let got = nms(&boxes, 0.5);
        let want = nms_reference(&boxes, 0.5);
        assert_eq!(got, want);
    }
}

proptest! {
    #[test]
    fn nms_output_subset_and_separated(seed in 0u64..40) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let boxes: Vec<Detection> = (0..25)
            .map(|_| {
                let x1 = rng.gen_range(0.0..40.0);
                let y1 = rng.gen_range(0.0..40.0);
                det(rng.gen_range(0..2), rng.gen_range(0.0..1.0), x1, y1,
                    x1 + rng.gen_range(1.0..15.0), y1 + rng.gen_range(1.0..15.0))
            })
            .collect();
        let kept = nms(&boxes, 0.45);
        prop_assert!(kept.len() <= boxes.len());
        for k in &kept {
            prop_assert!(boxes.contains(k));
        }
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].class_id == kept[j].class_id {
                    prop_assert!(box_iou(&kept[i], &kept[j]) <= 0.45);
                }
            }
        }
    }
}

#[test]
fn backbone_config_validation() {
    let mut cfg = BackboneConfig::default();
    cfg.strides = vec![2, 2, 2, 2, 4];
    assert!(cfg.validate().is_err());
    assert!(BackboneConfig::default().validate().is_ok());
    assert_eq!(BackboneConfig::default().head_taps().unwrap(), [2, 3, 4]);
    assert_eq!(BackboneConfig::default().head_channels(), 6);
}
