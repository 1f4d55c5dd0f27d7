//! Dataset evaluation: per-image inference (parallel across images, capped
//! by `MEAF_THREADS`), metric computation, and the report/CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use meafdet_core::metrics::{evaluate, EvalBox, EvalReport};
use meafdet_core::model::{DetectModel, Detection};
use meafdet_core::pipeline::detect;

use crate::dataset::Dataset;
use crate::error::{io_ctx, CliError, CliResult};

/// Worker cap from `MEAF_THREADS` (0 or unset = auto).
pub fn worker_threads() -> usize {
    let configured = std::env::var("MEAF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if configured > 0 {
        configured
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Runs inference over every dataset image. Results are written into
/// per-index slots, so the output is identical for any thread count.
pub fn run_inference(
    model: &DetectModel<f32>,
    dataset: &Dataset,
    conf: f64,
    nms_iou: f64,
) -> CliResult<Vec<Vec<Detection>>> {
    let n = dataset.len();
    let threads = worker_threads().clamp(1, n.max(1));
    let mut slots: Vec<Option<Vec<Detection>>> = vec![None; n];
    if threads == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            let pair = &dataset.pairs[i];
            let rgb = batch1(&pair.rgb);
            let ir = batch1(&pair.ir);
            *slot = Some(detect(model, &rgb, &ir, conf, nms_iou).map_err(CliError::from)?);
        }
    } else {
        let chunk = n.div_ceil(threads);
        let results: Vec<CliResult<Vec<(usize, Vec<Detection>)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    s.spawn(move || {
                        let lo = t * chunk;
                        let hi = ((t + 1) * chunk).min(n);
                        let mut out = Vec::with_capacity(hi.saturating_sub(lo));
                        for i in lo..hi {
                            let pair = &dataset.pairs[i];
                            let rgb = batch1(&pair.rgb);
                            let ir = batch1(&pair.ir);
                            let dets = detect(model, &rgb, &ir, conf, nms_iou)
                                .map_err(CliError::from)?;
                            out.push((i, dets));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker")).collect()
        });
        for r in results {
            for (i, dets) in r? {
                slots[i] = Some(dets);
            }
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("slot filled")).collect())
}

fn batch1(t: &meafdet_core::Tensor<f32>) -> meafdet_core::Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    meafdet_core::Tensor::new(&shape, t.data().to_vec()).expect("batch reshape")
}

/// Ground truth of every dataset image in pixel corner form.
pub fn dataset_eval_boxes(dataset: &Dataset) -> Vec<Vec<EvalBox>> {
    dataset
        .pairs
        .iter()
        .map(|pair| {
            pair.boxes
                .iter()
                .map(|b| {
                    let (x1, y1, x2, y2) = b.to_corners(pair.width(), pair.height());
                    EvalBox {
                        class_id: b.class_id,
                        x1,
                        y1,
                        x2,
                        y2,
                    }
                })
                .collect()
        })
        .collect()
}

/// Inference + metrics over a dataset.
pub fn evaluate_dataset(
    model: &DetectModel<f32>,
    dataset: &Dataset,
    conf: f64,
    iou: f64,
) -> CliResult<EvalReport> {
    let dets = run_inference(model, dataset, conf, iou)?;
    let gts = dataset_eval_boxes(dataset);
    evaluate(
        &dets,
        &gts,
        model.backbone_config.num_classes,
        iou,
        conf,
    )
    .map_err(CliError::from)
}

/// Aligned per-class table mirroring the usual per-class + mAP summary.
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
        "class", "gt", "tp", "fp", "fn", "prec", "recall", "ap50"
    );
    for c in &report.classes {
        let ap = c
            .ap
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8}",
            format!("class{}", c.class_id),
            c.num_gt,
            c.counts.tp,
            c.counts.fp,
            c.counts.fn_,
            c.precision,
            c.recall,
            ap
        );
    }
    let _ = writeln!(s, "mAP50 {:.4}", report.map50);
    let _ = writeln!(
        s,
        "operating point: conf {:.4} iou {:.4} precision {:.4} recall {:.4}",
        report.conf_threshold, report.iou_threshold, report.precision, report.recall
    );
    s
}

/// Writes `report.txt`, per-class `pr_<class>.csv`, and `f1.csv`.
pub fn export_report(report: &EvalReport, out_dir: &Path) -> CliResult<()> {
    io_ctx(fs::create_dir_all(out_dir), &out_dir.display().to_string())?;
    io_ctx(
        fs::write(out_dir.join("report.txt"), format_report(report)),
        "report.txt",
    )?;
    for c in &report.classes {
        let mut csv = String::from("threshold,recall,precision\n");
        for p in &c.curve.points {
            let _ = writeln!(csv, "{},{},{}", p.threshold, p.recall, p.precision);
        }
        io_ctx(
            fs::write(out_dir.join(format!("pr_class{}.csv", c.class_id)), csv),
            "pr csv",
        )?;
    }
    let mut f1 = String::from("threshold");
    for c in &report.classes {
        let _ = write!(f1, ",f1_class{}", c.class_id);
    }
    f1.push_str(",f1_mean\n");
    for (ti, &t) in report.f1.thresholds.iter().enumerate() {
        let _ = write!(f1, "{t}");
        for c in 0..report.classes.len() {
            let _ = write!(f1, ",{}", report.f1.per_class[c][ti]);
        }
        let _ = writeln!(f1, ",{}", report.f1.mean[ti]);
    }
    io_ctx(fs::write(out_dir.join("f1.csv"), f1), "f1 csv")
}
