//! Surrogate detection backbone, multi-scale head, training-only
//! reconstruction branch, and single-stage box decoding with greedy NMS.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::fusion::{BoundFusion, FusionConfig, FusionParams, FusionTrace};
use crate::init::{conv_param, SeedRng};
use crate::param::{BoundConv, ConvParam, Param, Parameters};
use crate::scalar::Scalar;
use crate::tape::{stable_sigmoid, ActivationKind, ResizeDir, Tape, Var};
use crate::tensor::Tensor;

/// Which input modality feeds the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Ir,
    Fused,
}

impl Modality {
    pub fn input_channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Ir => 1,
            Modality::Fused => 4,
        }
    }
}

/// Backbone and head layout. Five stride-2 stages; the last three feed the
/// head at cumulative strides 8/16/32.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub activation: ActivationKind,
    pub num_classes: usize,
    pub boxes_per_cell: usize,
    /// Per-scale square box priors (pixels); `boxes_per_cell` entries per
    /// head scale.
    pub anchors: Vec<Vec<f64>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 96, 128, 160],
            strides: vec![2, 2, 2, 2, 2],
            activation: ActivationKind::SiLU,
            num_classes: 1,
            boxes_per_cell: 1,
            anchors: vec![vec![12.0], vec![32.0], vec![80.0]],
        }
    }
}

impl BackboneConfig {
    /// Channels emitted per head scale: `B * (5 + K)`.
    pub fn head_channels(&self) -> usize {
        self.boxes_per_cell * (5 + self.num_classes)
    }

    /// Cumulative stride after each stage.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        let mut acc = 1;
        self.strides
            .iter()
            .map(|s| {
                acc *= s;
                acc
            })
            .collect()
    }

    /// Strides of the three head scales.
    pub const HEAD_STRIDES: [usize; 3] = [8, 16, 32];

    /// Indices of the three stages tapped by the head (strides 8/16/32).
    pub fn head_taps(&self) -> Result<[usize; 3]> {
        let cum = self.cumulative_strides();
        let mut taps = [0usize; 3];
        for (slot, want) in [8usize, 16, 32].iter().enumerate() {
            taps[slot] = cum
                .iter()
                .position(|s| s == want)
                .ok_or_else(|| {
                    CoreError::InvalidConfig(format!(
                        "backbone strides {:?} never reach cumulative stride {want}",
                        self.strides
                    ))
                })?;
        }
        Ok(taps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() || self.widths.is_empty() {
            return Err(CoreError::InvalidConfig(format!(
                "backbone widths ({}) and strides ({}) must be non-empty and equal length",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig("backbone widths must be positive".into()));
        }
        if self.num_classes == 0 || self.boxes_per_cell == 0 {
            return Err(CoreError::InvalidConfig(
                "num_classes and boxes_per_cell must be >= 1".into(),
            ));
        }
        if self.anchors.len() != 3
            || self.anchors.iter().any(|a| a.len() != self.boxes_per_cell)
            || self
                .anchors
                .iter()
                .flatten()
                .any(|&a| !(a.is_finite() && a > 0.0))
        {
            return Err(CoreError::InvalidConfig(format!(
                "anchors must hold {} positive priors for each of 3 scales",
                self.boxes_per_cell
            )));
        }
        self.head_taps().map(|_| ())
    }
}

/// Configuration of the training-only reconstruction branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrBranchConfig {
    /// Backbone stage (0-based) whose output feeds the decoder.
    pub tap_stage: usize,
    /// Number of (upsample x2, conv, activation) blocks.
    pub upsample_stages: usize,
    /// Conv width after each upsample block; length == `upsample_stages`.
    pub widths: Vec<usize>,
    /// Reconstruction channels: the raw RGB+IR concatenation (4) for the
    /// fused pipeline. Unimodal models reconstruct their own input, so
    /// construction forces this to the input channel count.
    pub out_channels: usize,
}

impl Default for SrBranchConfig {
    fn default() -> Self {
        Self {
            tap_stage: 1,
            upsample_stages: 1,
            widths: vec![16],
            out_channels: 4,
        }
    }
}

impl SrBranchConfig {
    /// Spatial stride of the reconstruction relative to the input image.
    pub fn target_stride(&self, backbone: &BackboneConfig) -> Result<usize> {
        let cum = backbone.cumulative_strides();
        let tap_stride = *cum.get(self.tap_stage).ok_or_else(|| {
            CoreError::InvalidConfig(format!(
                "sr tap stage {} out of {} backbone stages",
                self.tap_stage,
                cum.len()
            ))
        })?;
        let up = 1usize << self.upsample_stages;
        if tap_stride % up != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "sr: {} upsample stages overshoot the tap stride {tap_stride}",
                self.upsample_stages
            )));
        }
        Ok(tap_stride / up)
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.widths.len() != self.upsample_stages {
            return Err(CoreError::InvalidConfig(format!(
                "sr decoder widths ({}) must match upsample stage count ({})",
                self.widths.len(),
                self.upsample_stages
            )));
        }
        if self.out_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig("sr widths must be positive".into()));
        }
        self.target_stride(backbone).map(|_| ())
    }
}

/// Parameters of the reconstruction decoder.
#[derive(Debug, Clone)]
pub struct SrDecoderParams<T> {
    pub convs: Vec<ConvParam<T>>,
    pub final_conv: ConvParam<T>,
}

#[derive(Debug, Clone)]
pub struct BoundSrDecoder {
    pub convs: Vec<BoundConv>,
    pub final_conv: BoundConv,
}

impl<T: Scalar> SrDecoderParams<T> {
    fn new(rng: &mut SeedRng, config: &SrBranchConfig, tap_channels: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = tap_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(conv_param(rng, &format!("sr.stage{i}"), w, cin, 3, 1, 1));
            cin = w;
        }
        let final_conv = conv_param(rng, "sr.final", config.out_channels, cin, 3, 1, 1);
        Self { convs, final_conv }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundSrDecoder {
        BoundSrDecoder {
            convs: self.convs.iter().map(|c| c.bind(tape)).collect(),
            final_conv: self.final_conv.bind(tape),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>, b: &BoundSrDecoder) -> Result<()> {
        for (c, bc) in self.convs.iter_mut().zip(&b.convs) {
            c.accumulate(tape, bc)?;
        }
        self.final_conv.accumulate(tape, &b.final_conv)
    }
}

impl<T: Scalar> Parameters<T> for SrDecoderParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for c in &self.convs {
            c.visit(f);
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
        self.final_conv.visit_mut(f);
    }
}

/// The complete detector: optional fusion (or a unimodal stem), the conv
/// pyramid, three 1x1 head convs, and the optional reconstruction branch.
#[derive(Debug, Clone)]
pub struct DetectModel<T> {
    pub modality: Modality,
    pub fusion_config: FusionConfig,
    pub backbone_config: BackboneConfig,
    pub sr_config: SrBranchConfig,
    pub fusion: Option<FusionParams<T>>,
    pub stem: Option<ConvParam<T>>,
    pub stages: Vec<ConvParam<T>>,
    pub heads: Vec<ConvParam<T>>,
    pub sr: Option<SrDecoderParams<T>>,
}

/// Tape-bound model parameters for one forward pass.
pub struct BoundModel {
    pub fusion: Option<BoundFusion>,
    pub stem: Option<BoundConv>,
    pub stages: Vec<BoundConv>,
    pub heads: Vec<BoundConv>,
    pub sr: Option<BoundSrDecoder>,
}

/// Raw per-scale predictions plus the optional reconstruction output.
pub struct ModelOutput<T> {
    /// One `[N, B*(5+K), H_a, W_a]` tensor per scale (strides 8/16/32).
    pub raw: Vec<Var>,
    pub sr_out: Option<Var>,
    pub trace: Option<FusionTrace<T>>,
}

impl<T: Scalar> DetectModel<T> {
    pub fn new(
        rng: &mut SeedRng,
        modality: Modality,
        fusion_config: FusionConfig,
        backbone_config: BackboneConfig,
        sr_config: SrBranchConfig,
        with_sr: bool,
    ) -> Result<Self> {
        backbone_config.validate()?;
        let mut sr_config = sr_config;
        sr_config.out_channels = modality.input_channels();
        sr_config.validate(&backbone_config)?;
        let backbone_in = match modality {
            Modality::Fused => {
                fusion_config.validate()?;
                fusion_config.fused_channels()
            }
            // unimodal stems map the single modality to the same width
            _ => fusion_config.fused_channels(),
        };
        let fusion = match modality {
            Modality::Fused => Some(FusionParams::new(rng, fusion_config)?),
            _ => None,
        };
        let stem = match modality {
            Modality::Fused => None,
            m => Some(conv_param(
                rng,
                "stem",
                backbone_in,
                m.input_channels(),
                3,
                1,
                1,
            )),
        };
        let mut stages = Vec::new();
        let mut cin = backbone_in;
        for (i, (&w, &s)) in backbone_config
            .widths
            .iter()
            .zip(&backbone_config.strides)
            .enumerate()
        {
            stages.push(conv_param(rng, &format!("backbone.stage{i}"), w, cin, 3, s, 1));
            cin = w;
        }
        let taps = backbone_config.head_taps()?;
        let heads = taps
            .iter()
            .enumerate()
            .map(|(a, &t)| {
                conv_param(
                    rng,
                    &format!("head.scale{a}"),
                    backbone_config.head_channels(),
                    backbone_config.widths[t],
                    1,
                    1,
                    0,
                )
            })
            .collect();
        let sr = with_sr.then(|| {
            SrDecoderParams::new(rng, &sr_config, backbone_config.widths[sr_config.tap_stage])
        });
        Ok(Self {
            modality,
            fusion_config,
            backbone_config,
            sr_config,
            fusion,
            stem,
            stages,
            heads,
            sr,
        })
    }

    /// Drops the reconstruction branch; the detection path is untouched.
    /// Idempotent.
    pub fn strip_sr(mut self) -> Self {
        self.sr = None;
        self
    }

    pub fn has_sr(&self) -> bool {
        self.sr.is_some()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            fusion: self.fusion.as_ref().map(|p| p.bind(tape)),
            stem: self.stem.as_ref().map(|p| p.bind(tape)),
            stages: self.stages.iter().map(|p| p.bind(tape)).collect(),
            heads: self.heads.iter().map(|p| p.bind(tape)).collect(),
            sr: self.sr.as_ref().map(|p| p.bind(tape)),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>, b: &BoundModel) -> Result<()> {
        if let (Some(p), Some(bp)) = (self.fusion.as_mut(), b.fusion.as_ref()) {
            p.accumulate(tape, bp)?;
        }
        if let (Some(p), Some(bp)) = (self.stem.as_mut(), b.stem.as_ref()) {
            p.accumulate(tape, bp)?;
        }
        for (p, bp) in self.stages.iter_mut().zip(&b.stages) {
            p.accumulate(tape, bp)?;
        }
        for (p, bp) in self.heads.iter_mut().zip(&b.heads) {
            p.accumulate(tape, bp)?;
        }
        if let (Some(p), Some(bp)) = (self.sr.as_mut(), b.sr.as_ref()) {
            p.accumulate(tape, bp)?;
        }
        Ok(())
    }

    /// Full forward pass. `rgb` is `[N,3,H,W]`, `ir` is `[N,1,H,W]`, both
    /// with H and W divisible by 32. The reconstruction branch runs only when
    /// present and `with_sr` is set; it never feeds the detection path.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        rgb: Var,
        ir: Var,
        with_sr: bool,
        record_trace: bool,
    ) -> Result<ModelOutput<T>> {
        let (_, _, h, w) = tape.value(rgb)?.dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "input {h}x{w} must be divisible by 32"
            )));
        }
        let (mut x, trace) = match self.modality {
            Modality::Fused => {
                let f = bound.fusion.as_ref().ok_or_else(|| {
                    CoreError::InvalidConfig("fused model missing fusion parameters".into())
                })?;
                f.forward(tape, rgb, ir, record_trace)?
            }
            Modality::Rgb | Modality::Ir => {
                let stem = bound.stem.as_ref().ok_or_else(|| {
                    CoreError::InvalidConfig("unimodal model missing stem".into())
                })?;
                let input = if self.modality == Modality::Rgb { rgb } else { ir };
                let s = stem.forward(tape, input)?;
                (tape.activation(s, self.backbone_config.activation)?, None)
            }
        };

        let taps = self.backbone_config.head_taps()?;
        let mut features = vec![None; 3];
        let mut sr_tap = None;
        for (i, stage) in bound.stages.iter().enumerate() {
            let y = stage.forward(tape, x)?;
            x = tape.activation(y, self.backbone_config.activation)?;
            if let Some(slot) = taps.iter().position(|&t| t == i) {
                features[slot] = Some(x);
            }
            if i == self.sr_config.tap_stage {
                sr_tap = Some(x);
            }
        }

        let mut raw = Vec::with_capacity(3);
        for (a, head) in bound.heads.iter().enumerate() {
            let f = features[a].ok_or_else(|| {
                CoreError::InvalidConfig("head tap missing from backbone".into())
            })?;
            raw.push(head.forward(tape, f)?);
        }

        let sr_out = if with_sr {
            match (bound.sr.as_ref(), sr_tap) {
                (Some(dec), Some(tap)) => Some(self.sr_decoder_forward(tape, dec, tap)?),
                _ => None,
            }
        } else {
            None
        };

        Ok(ModelOutput { raw, sr_out, trace })
    }

    /// Progressive-upsampling decoder over the tapped backbone feature.
    pub fn sr_decoder_forward(
        &self,
        tape: &mut Tape<T>,
        dec: &BoundSrDecoder,
        tap: Var,
    ) -> Result<Var> {
        let mut x = tap;
        for conv in &dec.convs {
            x = tape.resize_spatial(x, 2, ResizeDir::UpNearest)?;
            let y = conv.forward(tape, x)?;
            x = tape.activation(y, self.backbone_config.activation)?;
        }
        dec.final_conv.forward(tape, x)
    }
}

impl<T: Scalar> Parameters<T> for DetectModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(p) = &self.fusion {
            p.visit(f);
        }
        if let Some(p) = &self.stem {
            p.visit(f);
        }
        for p in &self.stages {
            p.visit(f);
        }
        for p in &self.heads {
            p.visit(f);
        }
        if let Some(p) = &self.sr {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(p) = &mut self.fusion {
            p.visit_mut(f);
        }
        if let Some(p) = &mut self.stem {
            p.visit_mut(f);
        }
        for p in &mut self.stages {
            p.visit_mut(f);
        }
        for p in &mut self.heads {
            p.visit_mut(f);
        }
        if let Some(p) = &mut self.sr {
            p.visit_mut(f);
        }
    }
}

/// An axis-aligned scored detection in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Detection {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// IoU of two corner-form boxes.
pub fn box_iou(a: &Detection, b: &Detection) -> f64 {
    corners_iou((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2))
}

pub fn corners_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Magnitude bound on width/height logits before `exp` in decoding.
pub const SIZE_LOGIT_CLAMP: f64 = 4.0;


/// Decodes raw head tensors into per-image detections.
///
/// Box center is `(cell + sigmoid(txy)) * stride`; size is
/// `anchor * exp(clamp(twh))`; score is `sigmoid(obj) * max_k sigmoid(cls_k)`.
/// Boxes are clipped to the image; detections below `conf_threshold` drop.
#[allow(clippy::too_many_arguments)]
pub fn decode_predictions<T: Scalar>(
    raw: &[Tensor<T>],
    anchors: &[Vec<f64>],
    strides: &[usize],
    num_classes: usize,
    boxes_per_cell: usize,
    conf_threshold: f64,
    img_h: usize,
    img_w: usize,
) -> Result<Vec<Vec<Detection>>> {
    let per_box = 5 + num_classes;
    let mut out: Vec<Vec<Detection>> = Vec::new();
    for (a, t) in raw.iter().enumerate() {
        let (nb, c, gh, gw) = t.dims4()?;
        if c != boxes_per_cell * per_box {
            return Err(CoreError::ShapeMismatch(format!(
                "decode: scale {a} has {c} channels, expected {}",
                boxes_per_cell * per_box
            )));
        }
        if out.is_empty() {
            out = vec![Vec::new(); nb];
        }
        let stride = strides[a] as f64;
        for n in 0..nb {
            for b in 0..boxes_per_cell {
                let anchor = anchors[a][b];
                let ch0 = b * per_box;
                for gy in 0..gh {
                    for gx in 0..gw {
                        let at = |ch: usize| t.at4(n, ch0 + ch, gy, gx).as_f64();
                        let obj = stable_sigmoid(at(4));
                        let (mut best_cls, mut best_p) = (0usize, f64::MIN);
                        for k in 0..num_classes {
                            let p = stable_sigmoid(at(5 + k));
                            if p > best_p {
                                best_p = p;
                                best_cls = k;
                            }
                        }
                        let score = obj * best_p;
                        if score < conf_threshold {
                            continue;
                        }
                        let cx = (gx as f64 + stable_sigmoid(at(0))) * stride;
                        let cy = (gy as f64 + stable_sigmoid(at(1))) * stride;
                        let bw = anchor * at(2).clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp();
                        let bh = anchor * at(3).clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp();
                        let det = Detection {
                            class_id: best_cls,
                            score,
                            x1: (cx - bw / 2.0).clamp(0.0, img_w as f64),
                            y1: (cy - bh / 2.0).clamp(0.0, img_h as f64),
                            x2: (cx + bw / 2.0).clamp(0.0, img_w as f64),
                            y2: (cy + bh / 2.0).clamp(0.0, img_h as f64),
                        };
                        out[n].push(det);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class non-maximum suppression. Candidates are visited in
/// (score desc, area desc, input order); survivors suppress same-class boxes
/// with IoU above the threshold.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .score
            .partial_cmp(&detections[i].score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(
                detections[j]
                    .area()
                    .partial_cmp(&detections[i].area())
                    .unwrap_or(core::cmp::Ordering::Equal),
            )
    });
    let mut keep: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; detections.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        keep.push(detections[i].clone());
        for (pos2, &j) in order.iter().enumerate().skip(pos + 1) {
            if suppressed[pos2] || detections[j].class_id != detections[i].class_id {
                continue;
            }
            if box_iou(&detections[i], &detections[j]) > iou_threshold {
                suppressed[pos2] = true;
            }
        }
    }
    keep
}
