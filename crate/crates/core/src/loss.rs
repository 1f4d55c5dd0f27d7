//! Training objective: per-scale detection loss (objectness + localization +
//! classification), the reconstruction loss of the auxiliary branch, and the
//! weighted total.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::SIZE_LOGIT_CLAMP;
use crate::scalar::Scalar;
use crate::tape::{ResizeDir, Tape, Var};
use crate::tensor::Tensor;

/// A ground-truth box in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    /// Pixel-space corners for an `img_w` x `img_h` image.
    pub fn to_corners(&self, img_w: usize, img_h: usize) -> (f64, f64, f64, f64) {
        let (w, h) = (self.w * img_w as f64, self.h * img_h as f64);
        let (cx, cy) = (self.cx * img_w as f64, self.cy * img_h as f64);
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }
}

/// Every scalar coefficient of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha_o: [f64; 3],
    pub alpha_l: [f64; 3],
    pub alpha_c: [f64; 3],
    pub lambda_o: f64,
    pub lambda_l: f64,
    pub lambda_c: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_o: [1.0; 3],
            alpha_l: [0.05; 3],
            alpha_c: [0.5; 3],
            lambda_o: 1.0,
            lambda_l: 1.0,
            lambda_c: 1.0,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .alpha_o
            .iter()
            .chain(&self.alpha_l)
            .chain(&self.alpha_c)
            .chain([&self.lambda_o, &self.lambda_l, &self.lambda_c, &self.c1, &self.c2]);
        for &v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "loss weights must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A ground-truth box assigned to one cell on one scale.
#[derive(Debug, Clone)]
pub struct PositiveCell {
    pub scale: usize,
    pub image: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    /// Target corners in pixels.
    pub corners: (f64, f64, f64, f64),
    pub class_id: usize,
}

/// Dense objectness targets plus the sparse positive-cell list.
#[derive(Debug, Clone)]
pub struct TargetAssignment<T> {
    /// Per scale: `[N, B, H_a, W_a]` with 1.0 at assigned cells.
    pub objectness: Vec<Tensor<T>>,
    pub positives: Vec<PositiveCell>,
    /// Ground-truth boxes with degenerate size, rejected with a warning
    /// count rather than an error.
    pub rejected: usize,
    pub grids: Vec<(usize, usize)>,
}

/// IoU of two co-centered width/height pairs; used for anchor matching.
fn size_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    let union = w * h + aw * ah - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Assigns each ground-truth box to the cell containing its center on the
/// scale whose anchor best matches its size (ties prefer the finer scale).
#[allow(clippy::too_many_arguments)]
pub fn assign_targets<T: Scalar>(
    ground_truth: &[Vec<GroundTruthBox>],
    anchors: &[Vec<f64>],
    strides: &[usize],
    num_classes: usize,
    boxes_per_cell: usize,
    img_h: usize,
    img_w: usize,
) -> Result<TargetAssignment<T>> {
    let grids: Vec<(usize, usize)> = strides
        .iter()
        .map(|&s| (img_h / s, img_w / s))
        .collect();
    if grids.iter().any(|&(gh, gw)| gh == 0 || gw == 0) {
        return Err(CoreError::InvalidArgument(format!(
            "image {img_h}x{img_w} too small for strides {strides:?}"
        )));
    }
    let n = ground_truth.len();
    let mut objectness: Vec<Tensor<T>> = grids
        .iter()
        .map(|&(gh, gw)| Tensor::zeros(&[n, boxes_per_cell, gh, gw]))
        .collect();
    let mut positives = Vec::new();
    let mut rejected = 0usize;

    for (image, boxes) in ground_truth.iter().enumerate() {
        for gt in boxes {
            if gt.w <= 0.0 || gt.h <= 0.0 {
                rejected += 1;
                continue;
            }
            if gt.class_id >= num_classes {
                return Err(CoreError::InvalidArgument(format!(
                    "class id {} out of {num_classes} classes",
                    gt.class_id
                )));
            }
            let (w_px, h_px) = (gt.w * img_w as f64, gt.h * img_h as f64);
            // best (scale, anchor) by size-only IoU; strict improvement keeps
            // the finer scale on ties
            let (mut best_scale, mut best_anchor, mut best) = (0usize, 0usize, -1.0f64);
            for (scale, scale_anchors) in anchors.iter().enumerate() {
                for (ai, &a) in scale_anchors.iter().enumerate() {
                    let iou = size_iou(w_px, h_px, a, a);
                    if iou > best {
                        best = iou;
                        best_scale = scale;
                        best_anchor = ai;
                    }
                }
            }
            let (gh, gw) = grids[best_scale];
            let stride = strides[best_scale] as f64;
            let gx = ((gt.cx * img_w as f64 / stride) as usize).min(gw - 1);
            let gy = ((gt.cy * img_h as f64 / stride) as usize).min(gh - 1);
            let obj = &mut objectness[best_scale];
            let off = obj.offset4(image, best_anchor, gy, gx);
            obj.data_mut()[off] = T::one();
            positives.push(PositiveCell {
                scale: best_scale,
                image,
                anchor: best_anchor,
                gy,
                gx,
                corners: gt.to_corners(img_w, img_h),
                class_id: gt.class_id,
            });
        }
    }
    Ok(TargetAssignment {
        objectness,
        positives,
        rejected,
        grids,
    })
}

/// Tape handles for the assembled detection loss.
#[derive(Debug, Clone)]
pub struct DetectionLossVars {
    /// Weighted sum over scales and components.
    pub total: Var,
    /// Unweighted per-scale components.
    pub obj: [Var; 3],
    pub loc: [Var; 3],
    pub cls: [Var; 3],
}

/// Scalar snapshot of one loss evaluation, for logging and the CSV trail.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub detection: f64,
    pub sr: f64,
    pub obj: [f64; 3],
    pub loc: [f64; 3],
    pub cls: [f64; 3],
}

impl LossReport {
    /// Recomputes the two defining identities; returns the worst relative
    /// deviation.
    pub fn consistency_error(&self, weights: &LossWeights) -> f64 {
        let mut det = 0.0;
        for a in 0..3 {
            det += weights.lambda_o * weights.alpha_o[a] * self.obj[a]
                + weights.lambda_l * weights.alpha_l[a] * self.loc[a]
                + weights.lambda_c * weights.alpha_c[a] * self.cls[a];
        }
        let total = weights.c1 * self.detection + weights.c2 * self.sr;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        rel(det, self.detection).max(rel(total, self.total))
    }
}

fn scalar_const<T: Scalar>(tape: &mut Tape<T>, v: f64) -> Var {
    tape.constant(Tensor::scalar(T::of(v)))
}

fn vec_const<T: Scalar>(tape: &mut Tape<T>, values: &[f64]) -> Result<Var> {
    let t = Tensor::from_f64(&[values.len()], values)?;
    Ok(tape.constant(t))
}

/// Differentiable IoU between decoded positive-cell boxes and their targets.
/// All vectors have one entry per positive cell of the scale.
struct DecodedBoxes {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
    area: Var,
}

fn decode_positive_boxes<T: Scalar>(
    tape: &mut Tape<T>,
    raw: Var,
    cells: &[&PositiveCell],
    anchors: &[Vec<f64>],
    stride: f64,
    per_box: usize,
) -> Result<DecodedBoxes> {
    let t = tape.value(raw)?;
    let (_, _, gh, gw) = t.dims4()?;
    let flat = |c: &PositiveCell, ch: usize| {
        ((c.image * (per_box * anchors[c.scale].len()) + (c.anchor * per_box + ch)) * gh + c.gy)
            * gw
            + c.gx
    };
    let idx = |ch: usize| cells.iter().map(|c| flat(c, ch)).collect::<Vec<_>>();

    let tx = tape.gather(raw, idx(0))?;
    let ty = tape.gather(raw, idx(1))?;
    let tw = tape.gather(raw, idx(2))?;
    let th = tape.gather(raw, idx(3))?;

    let gx = vec_const(tape, &cells.iter().map(|c| c.gx as f64).collect::<Vec<_>>())?;
    let gy = vec_const(tape, &cells.iter().map(|c| c.gy as f64).collect::<Vec<_>>())?;
    let anchor = vec_const(
        tape,
        &cells
            .iter()
            .map(|c| anchors[c.scale][c.anchor])
            .collect::<Vec<_>>(),
    )?;

    let sx = tape.sigmoid(tx)?;
    let sy = tape.sigmoid(ty)?;
    let cx = tape.add(sx, gx)?;
    let cx = tape.mul_const(cx, T::of(stride))?;
    let cy = tape.add(sy, gy)?;
    let cy = tape.mul_const(cy, T::of(stride))?;

    let clamp = T::of(SIZE_LOGIT_CLAMP);
    let tw = tape.clamp(tw, -clamp, clamp)?;
    let th = tape.clamp(th, -clamp, clamp)?;
    let ew = tape.exp(tw)?;
    let eh = tape.exp(th)?;
    let bw = tape.mul(ew, anchor)?;
    let bh = tape.mul(eh, anchor)?;

    let half = T::of(0.5);
    let hw = tape.mul_const(bw, half)?;
    let hh = tape.mul_const(bh, half)?;
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;
    let area = tape.mul(bw, bh)?;
    Ok(DecodedBoxes { x1, y1, x2, y2, area })
}

fn iou_loss_vec<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &DecodedBoxes,
    cells: &[&PositiveCell],
) -> Result<Var> {
    let gx1 = vec_const(tape, &cells.iter().map(|c| c.corners.0).collect::<Vec<_>>())?;
    let gy1 = vec_const(tape, &cells.iter().map(|c| c.corners.1).collect::<Vec<_>>())?;
    let gx2 = vec_const(tape, &cells.iter().map(|c| c.corners.2).collect::<Vec<_>>())?;
    let gy2 = vec_const(tape, &cells.iter().map(|c| c.corners.3).collect::<Vec<_>>())?;
    let gt_area = vec_const(
        tape,
        &cells
            .iter()
            .map(|c| (c.corners.2 - c.corners.0) * (c.corners.3 - c.corners.1))
            .collect::<Vec<_>>(),
    )?;

    let ix1 = tape.max2(pred.x1, gx1)?;
    let iy1 = tape.max2(pred.y1, gy1)?;
    let ix2 = tape.min2(pred.x2, gx2)?;
    let iy2 = tape.min2(pred.y2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;

    let areas = tape.add(pred.area, gt_area)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;
    let neg = tape.neg(iou)?;
    let one_minus = tape.add_const(neg, T::one())?;
    tape.mean(one_minus)
}

/// Assembles the detection loss from the three raw head tensors.
///
/// Per scale: objectness BCE over all cells (mean), `1 - IoU` over positive
/// cells (mean), and class BCE at positive cells (mean). Scales without
/// positives contribute zero localization/classification loss.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    raw: &[Var],
    targets: &TargetAssignment<T>,
    weights: &LossWeights,
    anchors: &[Vec<f64>],
    strides: &[usize],
    num_classes: usize,
) -> Result<DetectionLossVars> {
    weights.validate()?;
    if raw.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "expected 3 head scales, got {}",
            raw.len()
        )));
    }
    let per_box = 5 + num_classes;
    let zero = scalar_const(tape, 0.0);
    let mut obj = [zero; 3];
    let mut loc = [zero; 3];
    let mut cls = [zero; 3];
    let mut total: Option<Var> = None;

    for a in 0..3 {
        let b = anchors[a].len();
        let tgt = &targets.objectness[a];
        let (_, _, gh, gw) = tgt.dims4()?;
        let t_raw = tape.value(raw[a])?;
        let (_, c_raw, rh, rw) = t_raw.dims4()?;
        if (rh, rw) != (gh, gw) || c_raw != b * per_box {
            return Err(CoreError::ShapeMismatch(format!(
                "scale {a}: raw {:?} vs grid {gh}x{gw} with {} channels",
                t_raw.shape(),
                b * per_box
            )));
        }

        // objectness over every cell and anchor
        let mut obj_terms = Vec::with_capacity(b);
        for bi in 0..b {
            let logits = tape.slice_channels(raw[a], bi * per_box + 4, 1)?;
            let tgt_b = {
                let (n, _, _, _) = tgt.dims4()?;
                let plane = gh * gw;
                let mut data = Vec::with_capacity(n * plane);
                for img in 0..n {
                    let base = (img * b + bi) * plane;
                    data.extend_from_slice(&tgt.data()[base..base + plane]);
                }
                Tensor::new(&[n, 1, gh, gw], data)?
            };
            let bce = tape.bce_with_logits(logits, tgt_b)?;
            obj_terms.push(tape.mean(bce)?);
        }
        let mut obj_a = obj_terms[0];
        for &t in &obj_terms[1..] {
            obj_a = tape.add(obj_a, t)?;
        }
        if b > 1 {
            obj_a = tape.mul_const(obj_a, T::of(1.0 / b as f64))?;
        }
        obj[a] = obj_a;

        // localization and classification over positive cells
        let cells: Vec<&PositiveCell> = targets
            .positives
            .iter()
            .filter(|c| c.scale == a)
            .collect();
        if !cells.is_empty() {
            let decoded =
                decode_positive_boxes(tape, raw[a], &cells, anchors, strides[a] as f64, per_box)?;
            loc[a] = iou_loss_vec(tape, &decoded, &cells)?;

            let mut idx = Vec::with_capacity(cells.len() * num_classes);
            let mut tgt_cls = Vec::with_capacity(cells.len() * num_classes);
            for c in &cells {
                for k in 0..num_classes {
                    idx.push(
                        ((c.image * (per_box * b) + (c.anchor * per_box + 5 + k)) * gh + c.gy)
                            * gw
                            + c.gx,
                    );
                    tgt_cls.push(if k == c.class_id { 1.0 } else { 0.0 });
                }
            }
            let logits = tape.gather(raw[a], idx)?;
            let tgt_t = Tensor::from_f64(&[tgt_cls.len()], &tgt_cls)?;
            let bce = tape.bce_with_logits(logits, tgt_t)?;
            cls[a] = tape.mean(bce)?;
        }

        // weighted accumulation
        let wo = tape.mul_const(obj[a], T::of(weights.lambda_o * weights.alpha_o[a]))?;
        let wl = tape.mul_const(loc[a], T::of(weights.lambda_l * weights.alpha_l[a]))?;
        let wc = tape.mul_const(cls[a], T::of(weights.lambda_c * weights.alpha_c[a]))?;
        let s = tape.add(wo, wl)?;
        let s = tape.add(s, wc)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }

    Ok(DetectionLossVars {
        total: total.expect("three scales processed"),
        obj,
        loc,
        cls,
    })
}

/// L1 between the reconstruction and the block-averaged input, mean-reduced.
///
/// The downsampling factor is `input spatial dim / reconstruction dim` and
/// must be an exact integer ratio on both axes.
pub fn sr_loss<T: Scalar>(tape: &mut Tape<T>, s: Var, x: Var) -> Result<Var> {
    let (sn, sc, sh, sw) = tape.value(s)?.dims4()?;
    let (xn, xc, xh, xw) = tape.value(x)?.dims4()?;
    if (sn, sc) != (xn, xc) {
        return Err(CoreError::ShapeMismatch(format!(
            "sr_loss: reconstruction [{sn},{sc},..] vs input [{xn},{xc},..]"
        )));
    }
    if sh == 0 || sw == 0 || xh % sh != 0 || xw % sw != 0 || xh / sh != xw / sw {
        return Err(CoreError::InvalidArgument(format!(
            "sr_loss: input {xh}x{xw} is not an integer multiple of reconstruction {sh}x{sw}"
        )));
    }
    let ratio = xh / sh;
    let down = tape.resize_spatial(x, ratio, ResizeDir::DownAvg)?;
    let diff = tape.sub(s, down)?;
    let l1 = tape.abs(diff)?;
    tape.mean(l1)
}

/// Weighted sum of the detection and reconstruction objectives.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    detection: Var,
    sr: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let d = tape.mul_const(detection, T::of(weights.c1))?;
    let s = tape.mul_const(sr, T::of(weights.c2))?;
    tape.add(d, s)
}

/// Reads the scalar loss values off the tape into a report.
pub fn loss_report<T: Scalar>(
    tape: &Tape<T>,
    total: Var,
    det: &DetectionLossVars,
    detection: Var,
    sr: Option<Var>,
) -> Result<LossReport> {
    let get = |v: Var| -> Result<f64> { Ok(tape.value(v)?.item()?.as_f64()) };
    Ok(LossReport {
        total: get(total)?,
        detection: get(detection)?,
        sr: match sr {
            Some(v) => get(v)?,
            None => 0.0,
        },
        obj: [get(det.obj[0])?, get(det.obj[1])?, get(det.obj[2])?],
        loc: [get(det.loc[0])?, get(det.loc[1])?, get(det.loc[2])?],
        cls: [get(det.cls[0])?, get(det.cls[1])?, get(det.cls[2])?],
    })
}
