//! Checkpoint binary format.
//!
//! Layout (all integers little-endian):
//! 8-byte magic `MEAFCKPT`, u32 version, u32 record count, then
//! per-record: u16 name length, name bytes, u8 rank, u32 dims...,
//! raw little-endian f32 data; then an optimizer block with the identical
//! record structure; then u64 step, u64 seed.
//!
//! Architecture metadata rides in reserved `meta.*` records inside the
//! parameter table so a checkpoint alone rebuilds the model; real model
//! parameters appear exactly once each.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use meafdet_core::fusion::FusionConfig;
use meafdet_core::init::SeedRng;
use meafdet_core::model::{BackboneConfig, DetectModel, Modality, SrBranchConfig};
use meafdet_core::optim::{OptimizerState, SgdConfig};
use meafdet_core::param::Parameters;
use meafdet_core::ActivationKind;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{io_ctx, CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"MEAFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn push_record(out: &mut Vec<u8>, r: &Record) {
    let name = r.name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(r.shape.len() as u8);
    for &d in &r.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::data(format!(
                "corrupt checkpoint: truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> CliResult<Record> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| CliError::data("corrupt checkpoint: non-utf8 record name"))?;
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Record { name, shape, data })
    }
}

fn meta(name: &str, values: Vec<f32>) -> Record {
    Record {
        shape: vec![values.len()],
        name: format!("meta.{name}"),
        data: values,
    }
}

fn activation_code(a: ActivationKind) -> f32 {
    match a {
        ActivationKind::ReLU => 0.0,
        ActivationKind::Sigmoid => 1.0,
        ActivationKind::SiLU => 2.0,
        ActivationKind::Identity => 3.0,
    }
}

fn activation_from(code: f32) -> CliResult<ActivationKind> {
    Ok(match code as u32 {
        0 => ActivationKind::ReLU,
        1 => ActivationKind::Sigmoid,
        2 => ActivationKind::SiLU,
        3 => ActivationKind::Identity,
        _ => return Err(CliError::data("corrupt checkpoint: bad activation code")),
    })
}

fn modality_code(m: Modality) -> f32 {
    match m {
        Modality::Rgb => 0.0,
        Modality::Ir => 1.0,
        Modality::Fused => 2.0,
    }
}

fn meta_records(model: &DetectModel<f32>) -> Vec<Record> {
    let bb = &model.backbone_config;
    let mut out = vec![
        meta("modality", vec![modality_code(model.modality)]),
        meta("num_classes", vec![bb.num_classes as f32]),
        meta("boxes_per_cell", vec![bb.boxes_per_cell as f32]),
        meta(
            "anchors",
            bb.anchors.iter().flatten().map(|&a| a as f32).collect(),
        ),
        meta("widths", bb.widths.iter().map(|&w| w as f32).collect()),
        meta("strides", bb.strides.iter().map(|&s| s as f32).collect()),
        meta("activation", vec![activation_code(bb.activation)]),
        meta("c_mid", vec![model.fusion_config.c_mid as f32]),
        meta("reduction", vec![model.fusion_config.reduction as f32]),
    ];
    if model.has_sr() {
        out.push(meta("sr_tap", vec![model.sr_config.tap_stage as f32]));
        out.push(meta(
            "sr_widths",
            model.sr_config.widths.iter().map(|&w| w as f32).collect(),
        ));
    }
    out
}

/// Serializes model + optimizer state + counters.
pub fn save_checkpoint(
    path: &Path,
    model: &DetectModel<f32>,
    opt: &OptimizerState<f32>,
    step: u64,
    seed: u64,
) -> CliResult<()> {
    let mut params: Vec<Record> = Vec::new();
    model.visit(&mut |p| {
        params.push(Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
    });
    params.extend(meta_records(model));

    let mut opt_records: Vec<Record> = Vec::new();
    model.visit(&mut |p| {
        let data = opt
            .velocity
            .get(&p.name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        opt_records.push(Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data,
        })
    });
    opt_records.push(meta("lr", vec![opt.config.learning_rate as f32]));
    opt_records.push(meta("momentum", vec![opt.config.momentum as f32]));
    opt_records.push(meta("weight_decay", vec![opt.config.weight_decay as f32]));
    opt_records.push(meta(
        "nesterov",
        vec![if opt.config.nesterov { 1.0 } else { 0.0 }],
    ));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for r in &params {
        push_record(&mut out, r);
    }
    out.extend_from_slice(&(opt_records.len() as u32).to_le_bytes());
    for r in &opt_records {
        push_record(&mut out, r);
    }
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    io_ctx(fs::write(path, out), &path.display().to_string())
}

/// A deserialized checkpoint.
pub struct Checkpoint {
    pub model: DetectModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub step: u64,
    pub seed: u64,
}

fn req<'a>(map: &'a BTreeMap<String, Record>, name: &str) -> CliResult<&'a Record> {
    map.get(name)
        .ok_or_else(|| CliError::data(format!("corrupt checkpoint: missing `{name}`")))
}

fn usize_list(r: &Record) -> Vec<usize> {
    r.data.iter().map(|&v| v as usize).collect()
}

/// Loads and validates a checkpoint, rebuilding the model architecture from
/// the `meta.*` records.
pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes = io_ctx(fs::read(path), &path.display().to_string())?;
    if bytes.len() < 16 {
        return Err(CliError::data(format!(
            "{}: corrupt checkpoint (only {} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(CliError::data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::data(format!(
            "{}: incompatible checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let n_params = r.u32()? as usize;
    let mut params: BTreeMap<String, Record> = BTreeMap::new();
    for _ in 0..n_params {
        let rec = r.record()?;
        if params.insert(rec.name.clone(), rec).is_some() {
            return Err(CliError::data("corrupt checkpoint: duplicate record"));
        }
    }
    let n_opt = r.u32()? as usize;
    let mut opt_records: BTreeMap<String, Record> = BTreeMap::new();
    for _ in 0..n_opt {
        let rec = r.record()?;
        opt_records.insert(rec.name.clone(), rec);
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(CliError::data(format!(
            "{}: corrupt checkpoint ({} trailing bytes)",
            path.display(),
            bytes.len() - r.pos
        )));
    }

    // architecture from meta records
    let modality = match req(&params, "meta.modality")?.data[0] as u32 {
        0 => Modality::Rgb,
        1 => Modality::Ir,
        2 => Modality::Fused,
        _ => return Err(CliError::data("corrupt checkpoint: bad modality code")),
    };
    let num_classes = req(&params, "meta.num_classes")?.data[0] as usize;
    let boxes_per_cell = req(&params, "meta.boxes_per_cell")?.data[0] as usize;
    let anchors_flat = &req(&params, "meta.anchors")?.data;
    let backbone = BackboneConfig {
        widths: usize_list(req(&params, "meta.widths")?),
        strides: usize_list(req(&params, "meta.strides")?),
        activation: activation_from(req(&params, "meta.activation")?.data[0])?,
        num_classes,
        boxes_per_cell,
        anchors: anchors_flat
            .chunks(boxes_per_cell.max(1))
            .map(|c| c.iter().map(|&a| a as f64).collect())
            .collect(),
    };
    let fusion = FusionConfig {
        c_mid: req(&params, "meta.c_mid")?.data[0] as usize,
        reduction: req(&params, "meta.reduction")?.data[0] as usize,
    };
    let with_sr = params.contains_key("meta.sr_tap");
    let sr = if with_sr {
        let widths = usize_list(req(&params, "meta.sr_widths")?);
        SrBranchConfig {
            tap_stage: req(&params, "meta.sr_tap")?.data[0] as usize,
            upsample_stages: widths.len(),
            widths,
            out_channels: modality.input_channels(),
        }
    } else {
        SrBranchConfig {
            out_channels: modality.input_channels(),
            ..SrBranchConfig::default()
        }
    };

    let mut rng = SeedRng::seed_from_u64(0);
    let mut model = DetectModel::<f32>::new(&mut rng, modality, fusion, backbone, sr, with_sr)
        .map_err(CliError::from)?;

    // fill parameters by name; every non-meta record must be consumed
    let mut used = 0usize;
    let mut fill_err: Option<CliError> = None;
    model.visit_mut(&mut |p| {
        if fill_err.is_some() {
            return;
        }
        match params.get(&p.name) {
            Some(rec) if rec.shape == p.value.shape() => {
                p.value.data_mut().copy_from_slice(&rec.data);
                used += 1;
            }
            Some(rec) => {
                fill_err = Some(CliError::data(format!(
                    "checkpoint `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            None => {
                fill_err = Some(CliError::data(format!(
                    "checkpoint is missing parameter `{}`",
                    p.name
                )));
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    let non_meta = params.keys().filter(|k| !k.starts_with("meta.")).count();
    if used != non_meta {
        return Err(CliError::data(format!(
            "checkpoint holds {non_meta} parameters, model consumed {used}"
        )));
    }

    let meta_f64 = |name: &str| -> CliResult<f64> {
        Ok(req(&opt_records, name)?.data[0] as f64)
    };
    let mut optimizer = OptimizerState::new(SgdConfig {
        learning_rate: meta_f64("meta.lr")?,
        momentum: meta_f64("meta.momentum")?,
        weight_decay: meta_f64("meta.weight_decay")?,
        nesterov: req(&opt_records, "meta.nesterov")?.data[0] != 0.0,
    })
    .map_err(CliError::from)?;
    for (name, rec) in &opt_records {
        if !name.starts_with("meta.") {
            optimizer.velocity.insert(name.clone(), rec.data.clone());
        }
    }

    Ok(Checkpoint {
        model,
        optimizer,
        step,
        seed,
    })
}
