//! The training loop: shuffled mini-batches, forward + objective, backward,
//! SGD step, a CSV row per step, and a checkpoint at the end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use meafdet_core::init::SeedRng;
use meafdet_core::loss::LossReport;
use meafdet_core::model::DetectModel;
use meafdet_core::optim::OptimizerState;
use meafdet_core::pipeline::{backward_and_accumulate, forward_loss};
use rand_chacha::rand_core::SeedableRng;

use crate::checkpoint::save_checkpoint;
use crate::dataset::Dataset;
use crate::error::{io_ctx, CliError, CliResult};
use crate::runconfig::RunConfig;

pub const CSV_HEADER: &str = "step,total,det,sr,obj0,loc0,cls0,obj1,loc1,cls1,obj2,loc2,cls2";

/// Summary of a finished run.
pub struct TrainOutcome {
    pub steps: usize,
    pub first: LossReport,
    pub last: LossReport,
}

fn csv_row(step: usize, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.total,
        r.detection,
        r.sr,
        r.obj[0],
        r.loc[0],
        r.cls[0],
        r.obj[1],
        r.loc[1],
        r.cls[1],
        r.obj[2],
        r.loc[2],
        r.cls[2]
    )
}

/// Trains a fresh model per the config over `dataset`, writing the loss CSV
/// as it goes and the checkpoint at the end. Deterministic given the seed.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    ckpt_path: &Path,
    csv_path: &Path,
    quiet: bool,
) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let (h, w) = dataset.image_hw();
    if h % 32 != 0 || w % 32 != 0 {
        return Err(CliError::data(format!(
            "dataset images are {w}x{h}; training needs multiples of 32"
        )));
    }
    let max_class = dataset.max_class_plus_one();
    if max_class > cfg.num_classes {
        return Err(CliError::data(format!(
            "dataset uses {max_class} classes but num_classes = {}",
            cfg.num_classes
        )));
    }

    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut model = DetectModel::<f32>::new(
        &mut rng,
        cfg.modality,
        cfg.fusion_config(),
        cfg.backbone_config(),
        cfg.sr_config(),
        cfg.sr_enabled,
    )
    .map_err(CliError::from)?;
    let mut opt = OptimizerState::new(cfg.sgd_config()).map_err(CliError::from)?;
    let weights = cfg.loss_weights();

    let mut csv = BufWriter::new(io_ctx(File::create(csv_path), &csv_path.display().to_string())?);
    io_ctx(writeln!(csv, "{CSV_HEADER}"), "loss csv")?;

    let mut step = 0usize;
    let mut first: Option<LossReport> = None;
    let mut last: Option<LossReport> = None;
    'epochs: for epoch in 0..cfg.epochs {
        for indices in dataset.epoch_batches(epoch, cfg.batch_size, cfg.seed) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let batch = dataset.batch(&indices)?;
            let mut out = forward_loss(
                &model,
                &batch.rgb,
                &batch.ir,
                &batch.boxes,
                &weights,
                cfg.sr_enabled,
            )
            .map_err(CliError::from)?;
            if !out.report.total.is_finite() {
                let culprit = out
                    .tape
                    .first_nonfinite()
                    .map(|(i, op)| format!("node #{i} ({op})"))
                    .unwrap_or_else(|| "loss assembly".into());
                return Err(CliError::Numeric(format!(
                    "non-finite loss at step {}: first non-finite tensor is {culprit}",
                    step + 1
                )));
            }
            backward_and_accumulate(&mut model, &mut out).map_err(CliError::from)?;
            opt.step(&mut model).map_err(CliError::from)?;
            step += 1;
            io_ctx(writeln!(csv, "{}", csv_row(step, &out.report)), "loss csv")?;
            if first.is_none() {
                first = Some(out.report.clone());
            }
            if !quiet && cfg.log_interval > 0 && step % cfg.log_interval == 0 {
                eprintln!(
                    "step {step}: total {:.5} det {:.5} sr {:.5}",
                    out.report.total, out.report.detection, out.report.sr
                );
            }
            last = Some(out.report);
        }
    }
    io_ctx(csv.flush(), "loss csv")?;

    let first = first.ok_or_else(|| CliError::data("no training steps executed"))?;
    let last = last.expect("at least one step ran");
    save_checkpoint(ckpt_path, &model, &opt, step as u64, cfg.seed)?;
    Ok(TrainOutcome {
        steps: step,
        first,
        last,
    })
}
