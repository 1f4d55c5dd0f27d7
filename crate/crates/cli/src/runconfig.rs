//! Flat `key=value` run configuration. Unknown keys are errors; missing keys
//! take the documented defaults; `parse(serialize(c)) == c`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use meafdet_core::fusion::FusionConfig;
use meafdet_core::loss::LossWeights;
use meafdet_core::model::{BackboneConfig, Modality, SrBranchConfig};
use meafdet_core::optim::SgdConfig;
use meafdet_core::synth::SynthSpec;
use meafdet_core::ActivationKind;

use crate::error::{CliError, CliResult};

/// Every tunable of the tool, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub modality: Modality,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer-step cap; 0 means epochs alone bound the run.
    pub max_steps: usize,
    pub seed: u64,
    pub image_size: usize,
    pub sr_enabled: bool,
    pub log_interval: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub alpha_o: [f64; 3],
    pub alpha_l: [f64; 3],
    pub alpha_c: [f64; 3],
    pub lambda_o: f64,
    pub lambda_l: f64,
    pub lambda_c: f64,
    pub c1: f64,
    pub c2: f64,
    pub num_classes: usize,
    pub boxes_per_cell: usize,
    /// Scale-major anchor sizes: `boxes_per_cell` entries per head scale.
    pub anchors: Vec<f64>,
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub backbone_activation: ActivationKind,
    pub fusion_c_mid: usize,
    pub fusion_reduction: usize,
    pub sr_tap_stage: usize,
    pub sr_widths: Vec<usize>,
    pub synth_image_size: usize,
    pub synth_min_targets: usize,
    pub synth_max_targets: usize,
    pub synth_min_size: usize,
    pub synth_max_size: usize,
    pub synth_rgb_only: f64,
    pub synth_ir_only: f64,
    pub synth_both: f64,
    pub synth_clutter: f64,
    pub synth_noise: f64,
    pub synth_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            modality: Modality::Fused,
            epochs: 300,
            batch_size: 2,
            max_steps: 0,
            seed: 0,
            image_size: 96,
            sr_enabled: true,
            log_interval: 10,
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            nesterov: true,
            alpha_o: [1.0; 3],
            alpha_l: [0.05; 3],
            alpha_c: [0.5; 3],
            lambda_o: 1.0,
            lambda_l: 1.0,
            lambda_c: 1.0,
            c1: 1.0,
            c2: 1.0,
            num_classes: 1,
            boxes_per_cell: 1,
            anchors: vec![12.0, 32.0, 80.0],
            backbone_widths: vec![32, 64, 96, 128, 160],
            backbone_strides: vec![2, 2, 2, 2, 2],
            backbone_activation: ActivationKind::SiLU,
            fusion_c_mid: 16,
            fusion_reduction: 4,
            sr_tap_stage: 1,
            sr_widths: vec![16],
            synth_image_size: 96,
            synth_min_targets: 1,
            synth_max_targets: 3,
            synth_min_size: 5,
            synth_max_size: 9,
            synth_rgb_only: 0.0,
            synth_ir_only: 0.0,
            synth_both: 1.0,
            synth_clutter: 0.1,
            synth_noise: 0.02,
            synth_seed: 0,
        }
    }
}

fn modality_str(m: Modality) -> &'static str {
    match m {
        Modality::Rgb => "rgb",
        Modality::Ir => "ir",
        Modality::Fused => "fused",
    }
}

fn activation_str(a: ActivationKind) -> &'static str {
    match a {
        ActivationKind::ReLU => "relu",
        ActivationKind::Sigmoid => "sigmoid",
        ActivationKind::SiLU => "silu",
        ActivationKind::Identity => "identity",
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn parse_str(text: &str) -> CliResult<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |what: &str| CliError::usage(format!("config line {}: {what}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`"))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if seen.insert(key.clone(), value).is_some() {
                return Err(err(&format!("duplicate key `{key}`")));
            }
        }
        let mut cfg = RunConfig::default();
        for (key, value) in seen {
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> CliResult<()> {
        let err = |what: String| CliError::usage(format!("config key `{key}`: {what}"));
        let parse_f64 =
            |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad float `{v}`")));
        let parse_usize =
            |v: &str| v.parse::<usize>().map_err(|_| err(format!("bad integer `{v}`")));
        let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| err(format!("bad integer `{v}`")));
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(err(format!("bad bool `{v}` (true|false)"))),
        };
        let parse_f64_list = |v: &str| -> CliResult<Vec<f64>> {
            v.split(',').map(|x| parse_f64(x.trim())).collect()
        };
        let parse_usize_list = |v: &str| -> CliResult<Vec<usize>> {
            v.split(',').map(|x| parse_usize(x.trim())).collect()
        };
        let triple = |v: &str| -> CliResult<[f64; 3]> {
            let list = parse_f64_list(v)?;
            list.try_into()
                .map_err(|_| err("expected exactly 3 comma-separated values".into()))
        };

        match key {
            "modality" => {
                self.modality = match value {
                    "rgb" => Modality::Rgb,
                    "ir" => Modality::Ir,
                    "fused" => Modality::Fused,
                    _ => return Err(err(format!("bad modality `{value}` (rgb|ir|fused)"))),
                }
            }
            "epochs" => self.epochs = parse_usize(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "max_steps" => self.max_steps = parse_usize(value)?,
            "seed" => self.seed = parse_u64(value)?,
            "image_size" => self.image_size = parse_usize(value)?,
            "sr_enabled" => self.sr_enabled = parse_bool(value)?,
            "log_interval" => self.log_interval = parse_usize(value)?,
            "lr" => self.lr = parse_f64(value)?,
            "momentum" => self.momentum = parse_f64(value)?,
            "weight_decay" => self.weight_decay = parse_f64(value)?,
            "nesterov" => self.nesterov = parse_bool(value)?,
            "alpha_o" => self.alpha_o = triple(value)?,
            "alpha_l" => self.alpha_l = triple(value)?,
            "alpha_c" => self.alpha_c = triple(value)?,
            "lambda_o" => self.lambda_o = parse_f64(value)?,
            "lambda_l" => self.lambda_l = parse_f64(value)?,
            "lambda_c" => self.lambda_c = parse_f64(value)?,
            "c1" => self.c1 = parse_f64(value)?,
            "c2" => self.c2 = parse_f64(value)?,
            "num_classes" => self.num_classes = parse_usize(value)?,
            "boxes_per_cell" => self.boxes_per_cell = parse_usize(value)?,
            "anchors" => self.anchors = parse_f64_list(value)?,
            "backbone_widths" => self.backbone_widths = parse_usize_list(value)?,
            "backbone_strides" => self.backbone_strides = parse_usize_list(value)?,
            "backbone_activation" => {
                self.backbone_activation = match value {
                    "relu" => ActivationKind::ReLU,
                    "sigmoid" => ActivationKind::Sigmoid,
                    "silu" => ActivationKind::SiLU,
                    "identity" => ActivationKind::Identity,
                    _ => return Err(err(format!("bad activation `{value}`"))),
                }
            }
            "fusion_c_mid" => self.fusion_c_mid = parse_usize(value)?,
            "fusion_reduction" => self.fusion_reduction = parse_usize(value)?,
            "sr_tap_stage" => self.sr_tap_stage = parse_usize(value)?,
            "sr_widths" => self.sr_widths = parse_usize_list(value)?,
            "synth_image_size" => self.synth_image_size = parse_usize(value)?,
            "synth_min_targets" => self.synth_min_targets = parse_usize(value)?,
            "synth_max_targets" => self.synth_max_targets = parse_usize(value)?,
            "synth_min_size" => self.synth_min_size = parse_usize(value)?,
            "synth_max_size" => self.synth_max_size = parse_usize(value)?,
            "synth_rgb_only" => self.synth_rgb_only = parse_f64(value)?,
            "synth_ir_only" => self.synth_ir_only = parse_f64(value)?,
            "synth_both" => self.synth_both = parse_f64(value)?,
            "synth_clutter" => self.synth_clutter = parse_f64(value)?,
            "synth_noise" => self.synth_noise = parse_f64(value)?,
            "synth_seed" => self.synth_seed = parse_u64(value)?,
            _ => return Err(CliError::usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("modality", modality_str(self.modality).into());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("sr_enabled", self.sr_enabled.to_string());
        kv("log_interval", self.log_interval.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("nesterov", self.nesterov.to_string());
        kv("alpha_o", join(&self.alpha_o));
        kv("alpha_l", join(&self.alpha_l));
        kv("alpha_c", join(&self.alpha_c));
        kv("lambda_o", self.lambda_o.to_string());
        kv("lambda_l", self.lambda_l.to_string());
        kv("lambda_c", self.lambda_c.to_string());
        kv("c1", self.c1.to_string());
        kv("c2", self.c2.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("boxes_per_cell", self.boxes_per_cell.to_string());
        kv("anchors", join(&self.anchors));
        kv("backbone_widths", join(&self.backbone_widths));
        kv("backbone_strides", join(&self.backbone_strides));
        kv("backbone_activation", activation_str(self.backbone_activation).into());
        kv("fusion_c_mid", self.fusion_c_mid.to_string());
        kv("fusion_reduction", self.fusion_reduction.to_string());
        kv("sr_tap_stage", self.sr_tap_stage.to_string());
        kv("sr_widths", join(&self.sr_widths));
        kv("synth_image_size", self.synth_image_size.to_string());
        kv("synth_min_targets", self.synth_min_targets.to_string());
        kv("synth_max_targets", self.synth_max_targets.to_string());
        kv("synth_min_size", self.synth_min_size.to_string());
        kv("synth_max_size", self.synth_max_size.to_string());
        kv("synth_rgb_only", self.synth_rgb_only.to_string());
        kv("synth_ir_only", self.synth_ir_only.to_string());
        kv("synth_both", self.synth_both.to_string());
        kv("synth_clutter", self.synth_clutter.to_string());
        kv("synth_noise", self.synth_noise.to_string());
        kv("synth_seed", self.synth_seed.to_string());
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CliError::usage("epochs and batch_size must be >= 1"));
        }
        if self.image_size % 32 != 0 || self.image_size == 0 {
            return Err(CliError::usage("image_size must be a positive multiple of 32"));
        }
        if self.anchors.len() != 3 * self.boxes_per_cell {
            return Err(CliError::usage(format!(
                "anchors must hold boxes_per_cell ({}) entries per scale, scale-major ({} expected, {} given)",
                self.boxes_per_cell,
                3 * self.boxes_per_cell,
                self.anchors.len()
            )));
        }
        self.backbone_config().validate()?;
        self.fusion_config().validate()?;
        self.sr_config().validate(&self.backbone_config())?;
        self.loss_weights().validate()?;
        self.sgd_config().validate()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.backbone_widths.clone(),
            strides: self.backbone_strides.clone(),
            activation: self.backbone_activation,
            num_classes: self.num_classes,
            boxes_per_cell: self.boxes_per_cell,
            anchors: self
                .anchors
                .chunks(self.boxes_per_cell.max(1))
                .map(|c| c.to_vec())
                .collect(),
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            c_mid: self.fusion_c_mid,
            reduction: self.fusion_reduction,
        }
    }

    pub fn sr_config(&self) -> SrBranchConfig {
        SrBranchConfig {
            tap_stage: self.sr_tap_stage,
            upsample_stages: self.sr_widths.len(),
            widths: self.sr_widths.clone(),
            out_channels: self.modality.input_channels(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_o: self.alpha_o,
            alpha_l: self.alpha_l,
            alpha_c: self.alpha_c,
            lambda_o: self.lambda_o,
            lambda_l: self.lambda_l,
            lambda_c: self.lambda_c,
            c1: self.c1,
            c2: self.c2,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.synth_image_size,
            min_targets: self.synth_min_targets,
            max_targets: self.synth_max_targets,
            min_size: self.synth_min_size,
            max_size: self.synth_max_size,
            w_rgb_only: self.synth_rgb_only,
            w_ir_only: self.synth_ir_only,
            w_both: self.synth_both,
            clutter_amp: self.synth_clutter,
            noise_sigma: self.synth_noise,
            seed: self.synth_seed,
        }
    }
}
