//! Deterministic synthetic RGB/IR pair generator: low-frequency clutter
//! backgrounds, Gaussian pixel noise, and small bright-square targets whose
//! per-target visibility (RGB-only, IR-only, or both) exercises the value of
//! fusing the two modalities.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::init::SeedRng;
use crate::loss::GroundTruthBox;
use crate::tensor::Tensor;

/// Intensity added on top of the local background inside a target square.
pub const TARGET_AMPLITUDE: f64 = 0.6;

/// One aligned RGB/IR sample with annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub ir: Tensor<f32>,
    pub boxes: Vec<GroundTruthBox>,
    pub id: String,
}

impl ImagePair {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }
}

/// Which modality renders a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    RgbOnly,
    IrOnly,
    Both,
}

/// Generator settings. Targets stay below a tenth of the image side, the
/// small-target regime.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Target side lengths in pixels, inclusive range.
    pub min_size: usize,
    pub max_size: usize,
    /// Relative weights of the three visibility categories.
    pub w_rgb_only: f64,
    pub w_ir_only: f64,
    pub w_both: f64,
    /// Peak amplitude of the low-frequency background pattern.
    pub clutter_amp: f64,
    /// Standard deviation of the Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            min_targets: 1,
            max_targets: 3,
            min_size: 5,
            max_size: 9,
            w_rgb_only: 0.0,
            w_ir_only: 0.0,
            w_both: 1.0,
            clutter_amp: 0.1,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 3 {
            return Err(CoreError::InvalidConfig(
                "synthetic targets must be at least 3 px".into(),
            ));
        }
        if self.max_size < self.min_size || self.min_targets > self.max_targets {
            return Err(CoreError::InvalidConfig(
                "synthetic ranges must satisfy min <= max".into(),
            ));
        }
        if self.max_size as f64 / self.image_size as f64 >= 0.1 {
            return Err(CoreError::InvalidConfig(format!(
                "target size {} breaks the small-target ratio (< 0.1 of image {})",
                self.max_size, self.image_size
            )));
        }
        if self.image_size < self.max_size + 4 {
            return Err(CoreError::InvalidConfig("image too small for targets".into()));
        }
        let wsum = self.w_rgb_only + self.w_ir_only + self.w_both;
        if !(wsum > 0.0 && wsum.is_finite())
            || [self.w_rgb_only, self.w_ir_only, self.w_both]
                .iter()
                .any(|&w| w < 0.0)
        {
            return Err(CoreError::InvalidConfig(
                "visibility weights must be non-negative with a positive sum".into(),
            ));
        }
        if self.clutter_amp < 0.0 || self.noise_sigma < 0.0 {
            return Err(CoreError::InvalidConfig(
                "clutter amplitude and noise sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Bilinearly upsampled coarse random grid, values in `[-1, 1]`.
fn clutter_field(rng: &mut SeedRng, size: usize) -> Vec<f64> {
    let cell = 8usize;
    let nodes = size / cell + 2;
    let mut grid = vec![0.0f64; nodes * nodes];
    for v in grid.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut field = vec![0.0f64; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let y0 = fy as usize;
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let x0 = fx as usize;
            let tx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * nodes + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            field[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    field
}

fn pick_visibility(rng: &mut SeedRng, spec: &SynthSpec) -> Visibility {
    let total = spec.w_rgb_only + spec.w_ir_only + spec.w_both;
    let u = rng.gen_range(0.0..total);
    if u < spec.w_rgb_only {
        Visibility::RgbOnly
    } else if u < spec.w_rgb_only + spec.w_ir_only {
        Visibility::IrOnly
    } else {
        Visibility::Both
    }
}

/// Generates the sample at `index`. Fully determined by `(spec.seed, index)`
/// so datasets of different sizes share a prefix.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<ImagePair> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = SeedRng::seed_from_u64(
        spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    // background: 0.2 + amp * smooth field, clamped away from the target band
    let rgb_field = clutter_field(&mut rng, size);
    let ir_field = clutter_field(&mut rng, size);
    let bg = |f: f64, amp: f64| (0.2 + amp * f).clamp(0.02, 0.4);
    let mut rgb = vec![0.0f64; 3 * size * size];
    let mut ir = vec![0.0f64; size * size];
    for p in 0..size * size {
        let v = bg(rgb_field[p], spec.clutter_amp);
        rgb[p] = v;
        rgb[size * size + p] = v;
        rgb[2 * size * size + p] = v;
        ir[p] = bg(ir_field[p], spec.clutter_amp);
    }

    // non-overlapping bright squares
    let count = rng.gen_range(spec.min_targets..=spec.max_targets);
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    let mut placed: Vec<(usize, usize, usize)> = Vec::new(); // (y0, x0, side)
    for _ in 0..count {
        let side = rng.gen_range(spec.min_size..=spec.max_size);
        let mut pos = None;
        for _try in 0..32 {
            let y0 = rng.gen_range(1..size - side - 1);
            let x0 = rng.gen_range(1..size - side - 1);
            // centers stay separable at the detector's finest stride (8):
            // > 8*sqrt(2) px apart guarantees distinct grid cells
            let (cy, cx) = (y0 as f64 + side as f64 / 2.0, x0 as f64 + side as f64 / 2.0);
            let clear = placed.iter().all(|&(py, px, ps)| {
                let (oy, ox) = (py as f64 + ps as f64 / 2.0, px as f64 + ps as f64 / 2.0);
                (cy - oy).hypot(cx - ox) > 12.0
            });
            if clear {
                pos = Some((y0, x0));
                break;
            }
        }
        let Some((y0, x0)) = pos else { continue };
        placed.push((y0, x0, side));
        let visibility = pick_visibility(&mut rng, spec);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let p = y * size + x;
                if visibility != Visibility::IrOnly {
                    for c in 0..3 {
                        let v = (rgb[c * size * size + p] + TARGET_AMPLITUDE).min(1.0);
                        rgb[c * size * size + p] = v;
                    }
                }
                if visibility != Visibility::RgbOnly {
                    ir[p] = (ir[p] + TARGET_AMPLITUDE).min(1.0);
                }
            }
        }
        boxes.push(GroundTruthBox {
            class_id: 0,
            cx: (x0 as f64 + side as f64 / 2.0) / size as f64,
            cy: (y0 as f64 + side as f64 / 2.0) / size as f64,
            w: side as f64 / size as f64,
            h: side as f64 / size as f64,
        });
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma)
            .map_err(|_| CoreError::InvalidConfig("bad noise sigma".into()))?;
        for v in rgb.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
        for v in ir.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    Ok(ImagePair {
        rgb: Tensor::new(&[3, size, size], rgb.iter().map(|&v| v as f32).collect())?,
        ir: Tensor::new(&[1, size, size], ir.iter().map(|&v| v as f32).collect())?,
        boxes,
        id: format!("synth_{index:05}"),
    })
}

/// Generates `count` samples.
pub fn generate(spec: &SynthSpec, count: usize) -> Result<Vec<ImagePair>> {
    if count == 0 {
        return Err(CoreError::InvalidArgument("empty dataset requested".into()));
    }
    (0..count).map(|i| generate_sample(spec, i)).collect()
}

/// Ground truth of a pair as pixel-space evaluation boxes.
pub fn eval_boxes(pair: &ImagePair) -> Vec<crate::metrics::EvalBox> {
    pair.boxes
        .iter()
        .map(|b| {
            let (x1, y1, x2, y2) = b.to_corners(pair.width(), pair.height());
            crate::metrics::EvalBox {
                class_id: b.class_id,
                x1,
                y1,
                x2,
                y2,
            }
        })
        .collect()
}
