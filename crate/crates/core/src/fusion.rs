//! Mask-enhanced attention fusion of an RGB/IR pair at pixel level.
//!
//! The stage chain per modality: learnable modal scaling, a convolutional
//! spatial mask multiplied back onto the scaled input, residual refinement
//! against the raw input, and a sigmoid spatial-attention map. The two
//! attended feature stacks are concatenated and reweighted per channel by a
//! squeeze/excite gate.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::init::{conv_param, linear_param, scalar_param, SeedRng};
use crate::param::{BoundConv, BoundLinear, ConvParam, LinearParam, Param, Parameters};
use crate::scalar::Scalar;
use crate::tape::{BroadcastOp, Tape, Var};
use crate::tensor::Tensor;

/// Channel widths of the fusion module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    /// Output channels of each modality's refine conv; the fused tensor has
    /// `2 * c_mid` channels.
    pub c_mid: usize,
    /// Squeeze/excite bottleneck ratio.
    pub reduction: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            c_mid: 16,
            reduction: 4,
        }
    }
}

impl FusionConfig {
    pub fn fused_channels(&self) -> usize {
        2 * self.c_mid
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_mid == 0 {
            return Err(CoreError::InvalidConfig("fusion c_mid must be >= 1".into()));
        }
        if self.reduction == 0 || self.fused_channels() % self.reduction != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "fusion reduction {} must divide fused channel count {}",
                self.reduction,
                self.fused_channels()
            )));
        }
        Ok(())
    }
}

/// Per-modality convolution stack: mask pair, refine, spatial attention.
#[derive(Debug, Clone)]
pub struct ModalityParams<T> {
    pub mask3: ConvParam<T>,
    pub mask1: ConvParam<T>,
    pub refine: ConvParam<T>,
    pub sa: ConvParam<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModality {
    pub mask3: BoundConv,
    pub mask1: BoundConv,
    pub refine: BoundConv,
    pub sa: BoundConv,
}

impl<T: Scalar> ModalityParams<T> {
    fn new(rng: &mut SeedRng, prefix: &str, channels: usize, c_mid: usize) -> Self {
        Self {
            mask3: conv_param(rng, &format!("{prefix}.mask3"), channels, channels, 3, 1, 1),
            mask1: conv_param(rng, &format!("{prefix}.mask1"), channels, channels, 1, 1, 0),
            refine: conv_param(rng, &format!("{prefix}.refine"), c_mid, channels, 3, 1, 1),
            sa: conv_param(rng, &format!("{prefix}.sa"), 1, 2, 1, 1, 0),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModality {
        BoundModality {
            mask3: self.mask3.bind(tape),
            mask1: self.mask1.bind(tape),
            refine: self.refine.bind(tape),
            sa: self.sa.bind(tape),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>, b: &BoundModality) -> Result<()> {
        self.mask3.accumulate(tape, &b.mask3)?;
        self.mask1.accumulate(tape, &b.mask1)?;
        self.refine.accumulate(tape, &b.refine)?;
        self.sa.accumulate(tape, &b.sa)
    }
}

impl<T: Scalar> Parameters<T> for ModalityParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.mask3.visit(f);
        self.mask1.visit(f);
        self.refine.visit(f);
        self.sa.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mask3.visit_mut(f);
        self.mask1.visit_mut(f);
        self.refine.visit_mut(f);
        self.sa.visit_mut(f);
    }
}

/// All learnable parameters of the fusion module.
#[derive(Debug, Clone)]
pub struct FusionParams<T> {
    pub config: FusionConfig,
    /// Learnable modal scalars, initialized to 0.5 each (equal weighting).
    pub p_rgb: Param<T>,
    pub p_ir: Param<T>,
    pub rgb: ModalityParams<T>,
    pub ir: ModalityParams<T>,
    pub fc1: LinearParam<T>,
    pub fc2: LinearParam<T>,
}

/// Tape-bound fusion parameters; the stage methods live here so the full
/// forward and a stage-by-stage recomposition share one code path.
#[derive(Debug, Clone, Copy)]
pub struct BoundFusion {
    pub p_rgb: Var,
    pub p_ir: Var,
    pub rgb: BoundModality,
    pub ir: BoundModality,
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

/// Intermediate tensors of one fusion forward, cloned off the tape.
#[derive(Debug, Clone)]
pub struct FusionTrace<T> {
    pub scaled_rgb: Tensor<T>,
    pub scaled_ir: Tensor<T>,
    pub mask_rgb: Tensor<T>,
    pub mask_ir: Tensor<T>,
    pub refined_rgb: Tensor<T>,
    pub refined_ir: Tensor<T>,
    pub attention_rgb: Tensor<T>,
    pub attention_ir: Tensor<T>,
    pub attended_rgb: Tensor<T>,
    pub attended_ir: Tensor<T>,
    pub excitation: Tensor<T>,
    pub fused: Tensor<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn new(rng: &mut SeedRng, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let cf = config.fused_channels();
        Ok(Self {
            config,
            p_rgb: scalar_param("fusion.p_rgb", 0.5),
            p_ir: scalar_param("fusion.p_ir", 0.5),
            rgb: ModalityParams::new(rng, "fusion.rgb", 3, config.c_mid),
            ir: ModalityParams::new(rng, "fusion.ir", 1, config.c_mid),
            fc1: linear_param(rng, "fusion.fc1", cf / config.reduction, cf),
            fc2: linear_param(rng, "fusion.fc2", cf, cf / config.reduction),
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundFusion {
        BoundFusion {
            p_rgb: self.p_rgb.bind(tape),
            p_ir: self.p_ir.bind(tape),
            rgb: self.rgb.bind(tape),
            ir: self.ir.bind(tape),
            fc1: self.fc1.bind(tape),
            fc2: self.fc2.bind(tape),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>, b: &BoundFusion) -> Result<()> {
        self.p_rgb.accumulate(tape, b.p_rgb)?;
        self.p_ir.accumulate(tape, b.p_ir)?;
        self.rgb.accumulate(tape, &b.rgb)?;
        self.ir.accumulate(tape, &b.ir)?;
        self.fc1.accumulate(tape, &b.fc1)?;
        self.fc2.accumulate(tape, &b.fc2)
    }
}

impl<T: Scalar> Parameters<T> for FusionParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.p_rgb);
        f(&self.p_ir);
        self.rgb.visit(f);
        self.ir.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.p_rgb);
        f(&mut self.p_ir);
        self.rgb.visit_mut(f);
        self.ir.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

impl BoundFusion {
    /// Multiplies each modality by its learnable scalar.
    pub fn scale_modalities<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        rgb: Var,
        ir: Var,
    ) -> Result<(Var, Var)> {
        let (rn, _, rh, rw) = tape.value(rgb)?.dims4()?;
        let (inn, _, ih, iw) = tape.value(ir)?.dims4()?;
        if (rn, rh, rw) != (inn, ih, iw) {
            return Err(CoreError::ShapeMismatch(format!(
                "modalities not aligned: rgb {:?}, ir {:?}",
                tape.value(rgb)?.shape(),
                tape.value(ir)?.shape()
            )));
        }
        let r = tape.broadcast_scalar(rgb, self.p_rgb, BroadcastOp::Mul)?;
        let i = tape.broadcast_scalar(ir, self.p_ir, BroadcastOp::Mul)?;
        Ok((r, i))
    }

    /// Spatial mask: `x * conv1x1(relu(conv3x3(x)))` on the scaled input.
    pub fn generate_mask<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        scaled: Var,
        modality: &BoundModality,
    ) -> Result<Var> {
        let h = modality.mask3.forward(tape, scaled)?;
        let h = tape.relu(h)?;
        let m = modality.mask1.forward(tape, h)?;
        tape.mul(scaled, m)
    }

    /// Residual refinement: conv3x3 of `mask + raw`. The residual adds the
    /// raw modality input, not the scaled one.
    pub fn refine_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        mask: Var,
        raw: Var,
        modality: &BoundModality,
    ) -> Result<Var> {
        let s = tape.add(mask, raw)?;
        modality.refine.forward(tape, s)
    }

    /// Single-channel sigmoid attention from channel mean/max statistics.
    pub fn spatial_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        refined: Var,
        modality: &BoundModality,
    ) -> Result<Var> {
        let stats = tape.channel_stats(refined)?;
        let logits = modality.sa.forward(tape, stats)?;
        tape.sigmoid(logits)
    }

    /// Modulates every channel of `refined` by the shared attention map.
    pub fn apply_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        refined: Var,
        attention: Var,
    ) -> Result<Var> {
        tape.broadcast_spatial(refined, attention, BroadcastOp::Mul)
    }

    /// Concatenates the attended modalities and reweights channels by the
    /// excitation gate. Returns `(fused, excitation)`.
    pub fn channel_excitation_fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        rgb_out: Var,
        ir_out: Var,
    ) -> Result<(Var, Var)> {
        let cat = tape.concat_channels(rgb_out, ir_out)?;
        let pooled = tape.global_avg_pool(cat)?;
        let h = self.fc1.forward(tape, pooled)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, h)?;
        let gate = tape.sigmoid(h)?;
        let fused = tape.broadcast_channel(cat, gate, BroadcastOp::Mul)?;
        Ok((fused, gate))
    }

    /// Full fusion pass; optionally records every intermediate.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        rgb: Var,
        ir: Var,
        record_trace: bool,
    ) -> Result<(Var, Option<FusionTrace<T>>)> {
        let (s_rgb, s_ir) = self.scale_modalities(tape, rgb, ir)?;
        let m_rgb = self.generate_mask(tape, s_rgb, &self.rgb)?;
        let m_ir = self.generate_mask(tape, s_ir, &self.ir)?;
        let r_rgb = self.refine_features(tape, m_rgb, rgb, &self.rgb)?;
        let r_ir = self.refine_features(tape, m_ir, ir, &self.ir)?;
        let a_rgb = self.spatial_attention(tape, r_rgb, &self.rgb)?;
        let a_ir = self.spatial_attention(tape, r_ir, &self.ir)?;
        let o_rgb = self.apply_attention(tape, r_rgb, a_rgb)?;
        let o_ir = self.apply_attention(tape, r_ir, a_ir)?;
        let (fused, gate) = self.channel_excitation_fuse(tape, o_rgb, o_ir)?;
        let trace = if record_trace {
            Some(FusionTrace {
                scaled_rgb: tape.value(s_rgb)?.clone(),
                scaled_ir: tape.value(s_ir)?.clone(),
                mask_rgb: tape.value(m_rgb)?.clone(),
                mask_ir: tape.value(m_ir)?.clone(),
                refined_rgb: tape.value(r_rgb)?.clone(),
                refined_ir: tape.value(r_ir)?.clone(),
                attention_rgb: tape.value(a_rgb)?.clone(),
                attention_ir: tape.value(a_ir)?.clone(),
                attended_rgb: tape.value(o_rgb)?.clone(),
                attended_ir: tape.value(o_ir)?.clone(),
                excitation: tape.value(gate)?.clone(),
                fused: tape.value(fused)?.clone(),
            })
        } else {
            None
        };
        Ok((fused, trace))
    }
}

impl<T: Scalar> FusionTrace<T> {
    /// Named views over the trace, for export.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor<T>)> {
        alloc::vec![
            ("scaled_rgb", &self.scaled_rgb),
            ("scaled_ir", &self.scaled_ir),
            ("mask_rgb", &self.mask_rgb),
            ("mask_ir", &self.mask_ir),
            ("refined_rgb", &self.refined_rgb),
            ("refined_ir", &self.refined_ir),
            ("attention_rgb", &self.attention_rgb),
            ("attention_ir", &self.attention_ir),
            ("attended_rgb", &self.attended_rgb),
            ("attended_ir", &self.attended_ir),
            ("fused", &self.fused),
        ]
    }
}
