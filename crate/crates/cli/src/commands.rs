//! Subcommand implementations shared by the binary and the test suites.

use std::path::{Path, PathBuf};

use meafdet_core::model::Modality;
use meafdet_core::synth::generate;
use meafdet_core::Tape;

use crate::checkpoint::load_checkpoint;
use crate::dataset::{write_dataset, Dataset};
use crate::error::{io_ctx, CliError, CliResult};
use crate::evaluator::{evaluate_dataset, export_report, format_report};
use crate::image_io::{read_pgm, read_ppm, write_normalized_pgm};
use crate::runconfig::RunConfig;
use crate::trainer::{train, TrainOutcome};

/// Generates a synthetic dataset and prints a target-size histogram.
pub fn cmd_synth(spec_path: &Path, count: usize, out_dir: &Path) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::usage("empty dataset requested (count must be >= 1)"));
    }
    let cfg = RunConfig::load(spec_path)?;
    let spec = cfg.synth_spec();
    spec.validate().map_err(CliError::from)?;
    let pairs = generate(&spec, count).map_err(CliError::from)?;
    write_dataset(out_dir, &pairs)?;

    // size distribution summary
    let mut hist = [0usize; 10];
    let mut total = 0usize;
    for p in &pairs {
        for b in &p.boxes {
            let ratio = b.w.max(b.h);
            hist[((ratio * 100.0) as usize).min(9)] += 1;
            total += 1;
        }
    }
    println!(
        "wrote {count} pairs ({total} targets) to {}",
        out_dir.display()
    );
    println!("target size ratio distribution (fraction of image side):");
    for (i, n) in hist.iter().enumerate() {
        if *n > 0 {
            println!("  {:.2}-{:.2}: {n}", i as f64 / 100.0, (i + 1) as f64 / 100.0);
        }
    }
    Ok(())
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub no_sr: bool,
    pub modality: Option<Modality>,
}

/// Default loss-CSV path for a checkpoint path: `<stem>.loss.csv` alongside.
pub fn default_csv_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".into());
    ckpt.with_file_name(format!("{stem}.loss.csv"))
}

pub fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out_ckpt: &Path,
    csv_path: Option<&Path>,
    overrides: &TrainOverrides,
    quiet: bool,
) -> CliResult<TrainOutcome> {
    let mut cfg = RunConfig::load(config_path)?;
    if overrides.no_sr {
        cfg.sr_enabled = false;
    }
    if let Some(m) = overrides.modality {
        cfg.modality = m;
    }
    let dataset = Dataset::open(data_dir)?;
    let csv = csv_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_csv_path(out_ckpt));
    let outcome = train(&cfg, &dataset, out_ckpt, &csv, quiet)?;
    if !quiet {
        println!(
            "trained {} steps; final total loss {:.5}; checkpoint {}",
            outcome.steps,
            outcome.last.total,
            out_ckpt.display()
        );
    }
    Ok(outcome)
}

/// Strips the reconstruction branch, evaluates, writes report + curve CSVs,
/// and prints the per-class table.
pub fn cmd_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    conf: f64,
    iou: f64,
    quiet: bool,
) -> CliResult<f64> {
    if !(0.0..=1.0).contains(&conf) || !(0.0..=1.0).contains(&iou) {
        return Err(CliError::usage("--conf and --iou must lie in [0,1]"));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.model.strip_sr();
    let dataset = Dataset::open(data_dir)?;
    let max_class = dataset.max_class_plus_one();
    if max_class > model.backbone_config.num_classes {
        return Err(CliError::data(format!(
            "checkpoint was trained with num_classes = {} but the dataset uses {max_class} classes",
            model.backbone_config.num_classes
        )));
    }
    let report = evaluate_dataset(&model, &dataset, conf, iou)?;
    export_report(&report, out_dir)?;
    if !quiet {
        print!("{}", format_report(&report));
    }
    Ok(report.map50)
}

/// Runs the fusion module with trace recording on one pair and exports
/// normalized grayscale images of the masks, attention maps, and fused
/// channels.
pub fn cmd_fuse(ckpt_path: &Path, rgb_path: &Path, ir_path: &Path, out_dir: &Path) -> CliResult<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let fusion = ckpt.model.fusion.as_ref().ok_or_else(|| {
        CliError::data("checkpoint holds a unimodal model; fuse needs a fused-modality checkpoint")
    })?;
    let rgb = read_ppm(rgb_path)?;
    let ir = read_pgm(ir_path)?;
    if rgb.shape()[1..] != ir.shape()[1..] {
        return Err(CliError::data(format!(
            "pair not aligned: rgb {}x{}, ir {}x{}",
            rgb.shape()[2],
            rgb.shape()[1],
            ir.shape()[2],
            ir.shape()[1]
        )));
    }
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let mut tape = Tape::<f32>::new();
    let rgb_v = tape.constant(
        meafdet_core::Tensor::new(&[1, 3, h, w], rgb.data().to_vec()).map_err(CliError::from)?,
    );
    let ir_v = tape.constant(
        meafdet_core::Tensor::new(&[1, 1, h, w], ir.data().to_vec()).map_err(CliError::from)?,
    );
    let bound = fusion.bind(&mut tape);
    let (_, trace) = bound
        .forward(&mut tape, rgb_v, ir_v, true)
        .map_err(CliError::from)?;
    let trace = trace.expect("trace recorded");

    io_ctx(std::fs::create_dir_all(out_dir), &out_dir.display().to_string())?;
    let plane = h * w;
    let channel_mean = |t: &meafdet_core::Tensor<f32>| -> Vec<f32> {
        let c = t.shape()[1];
        let mut out = vec![0.0f32; plane];
        for ch in 0..c {
            for p in 0..plane {
                out[p] += t.data()[ch * plane + p] / c as f32;
            }
        }
        out
    };

    write_normalized_pgm(&out_dir.join("attention_rgb.pgm"), &trace.attention_rgb.data()[..plane], h, w)?;
    write_normalized_pgm(&out_dir.join("attention_ir.pgm"), &trace.attention_ir.data()[..plane], h, w)?;
    write_normalized_pgm(&out_dir.join("mask_rgb.pgm"), &channel_mean(&trace.mask_rgb), h, w)?;
    write_normalized_pgm(&out_dir.join("mask_ir.pgm"), &channel_mean(&trace.mask_ir), h, w)?;
    write_normalized_pgm(&out_dir.join("fused_mean.pgm"), &channel_mean(&trace.fused), h, w)?;
    let fused_channels = trace.fused.shape()[1];
    for ch in 0..fused_channels {
        write_normalized_pgm(
            &out_dir.join(format!("fused_c{ch:02}.pgm")),
            &trace.fused.data()[ch * plane..(ch + 1) * plane],
            h,
            w,
        )?;
    }
    println!(
        "wrote {} fusion images to {}",
        5 + fused_channels,
        out_dir.display()
    );
    Ok(())
}
