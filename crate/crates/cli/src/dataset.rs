//! On-disk dataset layout and batched iteration.
//!
//! Layout: `<root>/rgb/<id>.ppm`, `<root>/ir/<id>.pgm`,
//! `<root>/labels/<id>.txt`, and `<root>/manifest.txt` with one id per line.
//! Label lines are `class cx cy w h` in normalized center form.

use std::fs;
use std::path::{Path, PathBuf};

use meafdet_core::loss::GroundTruthBox;
use meafdet_core::synth::ImagePair;
use meafdet_core::tensor::stack_batch;
use meafdet_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_ctx, CliError, CliResult};
use crate::image_io::{read_pgm, read_ppm, write_pgm, write_ppm};

/// Parses one label file; errors carry the 1-based line number.
pub fn parse_labels(text: &str, path: &Path) -> CliResult<Vec<GroundTruthBox>> {
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |what: &str| {
            CliError::data(format!(
                "{} line {}: {what}",
                path.display(),
                lineno + 1
            ))
        };
        if fields.len() != 5 {
            return Err(err("expected `class cx cy w h`"));
        }
        let class_id: usize = fields[0].parse().map_err(|_| err("bad class id"))?;
        let mut nums = [0.0f64; 4];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f.parse().map_err(|_| err("bad coordinate"))?;
        }
        let [cx, cy, w, h] = nums;
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(err("center out of [0,1]"));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(err("size out of (0,1]"));
        }
        boxes.push(GroundTruthBox {
            class_id,
            cx,
            cy,
            w,
            h,
        });
    }
    Ok(boxes)
}

/// Loads one aligned sample from its three files.
pub fn load_pair(rgb_path: &Path, ir_path: &Path, label_path: &Path) -> CliResult<ImagePair> {
    let rgb = read_ppm(rgb_path)?;
    let ir = read_pgm(ir_path)?;
    if rgb.shape()[1..] != ir.shape()[1..] {
        return Err(CliError::data(format!(
            "dimension mismatch: {} is {}x{}, {} is {}x{}",
            rgb_path.display(),
            rgb.shape()[2],
            rgb.shape()[1],
            ir_path.display(),
            ir.shape()[2],
            ir.shape()[1],
        )));
    }
    let text = io_ctx(fs::read_to_string(label_path), &label_path.display().to_string())?;
    let boxes = parse_labels(&text, label_path)?;
    let id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ImagePair { rgb, ir, boxes, id })
}

/// Writes one sample into the dataset layout.
pub fn write_pair(root: &Path, pair: &ImagePair) -> CliResult<()> {
    write_ppm(&root.join("rgb").join(format!("{}.ppm", pair.id)), &pair.rgb)?;
    write_pgm(&root.join("ir").join(format!("{}.pgm", pair.id)), &pair.ir)?;
    let mut text = String::new();
    for b in &pair.boxes {
        text.push_str(&format!("{} {} {} {} {}\n", b.class_id, b.cx, b.cy, b.w, b.h));
    }
    let label_path = root.join("labels").join(format!("{}.txt", pair.id));
    io_ctx(fs::write(&label_path, text), &label_path.display().to_string())
}

/// Writes a full dataset (images, labels, manifest).
pub fn write_dataset(root: &Path, pairs: &[ImagePair]) -> CliResult<()> {
    for sub in ["rgb", "ir", "labels"] {
        io_ctx(fs::create_dir_all(root.join(sub)), &root.display().to_string())?;
    }
    let mut manifest = String::new();
    for pair in pairs {
        write_pair(root, pair)?;
        manifest.push_str(&pair.id);
        manifest.push('\n');
    }
    io_ctx(
        fs::write(root.join("manifest.txt"), manifest),
        &root.join("manifest.txt").display().to_string(),
    )
}

/// An eagerly loaded dataset; all images share one size.
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub root: PathBuf,
}

/// One stacked mini-batch.
pub struct Batch {
    pub rgb: Tensor<f32>,
    pub ir: Tensor<f32>,
    pub boxes: Vec<Vec<GroundTruthBox>>,
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let manifest_path = root.join("manifest.txt");
        let manifest = io_ctx(
            fs::read_to_string(&manifest_path),
            &manifest_path.display().to_string(),
        )?;
        let ids: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
        if ids.is_empty() {
            return Err(CliError::data(format!(
                "{}: empty dataset",
                root.display()
            )));
        }
        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let pair = load_pair(
                &root.join("rgb").join(format!("{id}.ppm")),
                &root.join("ir").join(format!("{id}.pgm")),
                &root.join("labels").join(format!("{id}.txt")),
            )?;
            if let Some(first) = pairs.first() {
                let f: &ImagePair = first;
                if f.rgb.shape() != pair.rgb.shape() {
                    return Err(CliError::data(format!(
                        "{id}: image size differs from the rest of the dataset"
                    )));
                }
            }
            pairs.push(pair);
        }
        Ok(Self {
            pairs,
            root: root.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        let s = self.pairs[0].rgb.shape();
        (s[1], s[2])
    }

    /// Largest class id present plus one.
    pub fn max_class_plus_one(&self) -> usize {
        self.pairs
            .iter()
            .flat_map(|p| &p.boxes)
            .map(|b| b.class_id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Deterministically shuffled index batches for one epoch; the final
    /// partial batch is included.
    pub fn epoch_batches(&self, epoch: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut indices: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        indices.shuffle(&mut rng);
        indices.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    /// Stacks the samples at `indices` into batch tensors.
    pub fn batch(&self, indices: &[usize]) -> CliResult<Batch> {
        let rgbs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.pairs[i].rgb).collect();
        let irs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.pairs[i].ir).collect();
        Ok(Batch {
            rgb: stack_batch(&rgbs).map_err(|e| CliError::data(e.to_string()))?,
            ir: stack_batch(&irs).map_err(|e| CliError::data(e.to_string()))?,
            boxes: indices.iter().map(|&i| self.pairs[i].boxes.clone()).collect(),
        })
    }
}
