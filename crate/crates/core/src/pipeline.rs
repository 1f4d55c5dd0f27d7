//! One training forward pass: model forward, target assignment, the full
//! objective, and a scalar report. Shared by the trainer, the gradient
//! checks, and inference.

use alloc::vec::Vec;

use crate::error::Result;
use crate::loss::{
    assign_targets, detection_loss, loss_report, sr_loss, total_loss, DetectionLossVars,
    GroundTruthBox, LossReport, LossWeights,
};
use crate::model::{decode_predictions, nms, BackboneConfig, BoundModel, DetectModel, Detection, Modality};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Everything produced by one loss-bearing forward pass. The tape stays
/// alive so the caller can run backward and accumulate.
pub struct StepOutput<T> {
    pub tape: Tape<T>,
    pub bound: BoundModel,
    pub total: Var,
    pub detection: Var,
    pub sr: Option<Var>,
    pub det_vars: DetectionLossVars,
    pub report: LossReport,
}

/// Forward + objective over one batch. `rgb` is `[N,3,H,W]`, `ir` is
/// `[N,1,H,W]`, and `ground_truth` holds one box list per batch image.
pub fn forward_loss<T: Scalar>(
    model: &DetectModel<T>,
    rgb: &Tensor<T>,
    ir: &Tensor<T>,
    ground_truth: &[Vec<GroundTruthBox>],
    weights: &LossWeights,
    with_sr: bool,
) -> Result<StepOutput<T>> {
    let (_, _, h, w) = rgb.dims4()?;
    let cfg = &model.backbone_config;
    let mut tape = Tape::new();
    let rgb_v = tape.constant(rgb.clone());
    let ir_v = tape.constant(ir.clone());
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, rgb_v, ir_v, with_sr, false)?;

    let targets = assign_targets::<T>(
        ground_truth,
        &cfg.anchors,
        &BackboneConfig::HEAD_STRIDES,
        cfg.num_classes,
        cfg.boxes_per_cell,
        h,
        w,
    )?;
    let det_vars = detection_loss(
        &mut tape,
        &out.raw,
        &targets,
        weights,
        &cfg.anchors,
        &BackboneConfig::HEAD_STRIDES,
        cfg.num_classes,
    )?;

    let sr = match out.sr_out {
        Some(s) => {
            let x = match model.modality {
                Modality::Fused => tape.concat_channels(rgb_v, ir_v)?,
                Modality::Rgb => rgb_v,
                Modality::Ir => ir_v,
            };
            Some(sr_loss(&mut tape, s, x)?)
        }
        None => None,
    };
    let sr_term = match sr {
        Some(s) => s,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let total = total_loss(&mut tape, det_vars.total, sr_term, weights)?;
    let report = loss_report(&tape, total, &det_vars, det_vars.total, sr)?;
    Ok(StepOutput {
        tape,
        bound,
        total,
        detection: det_vars.total,
        sr,
        det_vars,
        report,
    })
}

/// Runs backward over a [`StepOutput`] and accumulates parameter gradients.
pub fn backward_and_accumulate<T: Scalar>(
    model: &mut DetectModel<T>,
    step: &mut StepOutput<T>,
) -> Result<()> {
    step.tape.backward(step.total)?;
    model.accumulate(&step.tape, &step.bound)
}

/// Inference over one image pair: forward, decode, per-class NMS.
pub fn detect<T: Scalar>(
    model: &DetectModel<T>,
    rgb: &Tensor<T>,
    ir: &Tensor<T>,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let (_, _, h, w) = rgb.dims4()?;
    let cfg = &model.backbone_config;
    let mut tape = Tape::new();
    let rgb_v = tape.constant(rgb.clone());
    let ir_v = tape.constant(ir.clone());
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, rgb_v, ir_v, false, false)?;
    let raw: Vec<Tensor<T>> = out
        .raw
        .iter()
        .map(|&v| Ok(tape.value(v)?.clone()))
        .collect::<Result<_>>()?;
    let per_image = decode_predictions(
        &raw,
        &cfg.anchors,
        &BackboneConfig::HEAD_STRIDES,
        cfg.num_classes,
        cfg.boxes_per_cell,
        conf_threshold,
        h,
        w,
    )?;
    Ok(nms(&per_image[0], nms_iou))
}
