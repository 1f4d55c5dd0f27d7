//! Central finite-difference verification of analytic gradients.
//!
//! The oracle here is the difference quotient itself: it never touches the
//! backward pass it is checking. Finite differences are evaluated on the
//! 64-bit graph (the 64-bit mode exists for exactly this purpose); where the
//! base step is roundoff-limited, the check retries with adjacent steps and
//! requires two neighbouring quotients to agree before accepting one.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::init::SeedRng;
use crate::param::Parameters;
use crate::scalar::Scalar;

/// One element whose analytic/finite-difference gradients disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Elements compared (after the small-gradient exclusion).
    pub compared: usize,
    /// Elements skipped because both gradients were below the floor.
    pub skipped: usize,
    pub failures: Vec<GradMismatch>,
    pub worst_rel: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.compared == 0 {
            return 1.0;
        }
        (self.compared - self.failures.len()) as f64 / self.compared as f64
    }

    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Settings for a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckCfg {
    /// Base central-difference step.
    pub eps: f64,
    /// Maximum accepted `|a - n| / max(|a|, |n|)`.
    pub rel_tol: f64,
    /// Elements with both gradients below this are excluded.
    pub floor: f64,
    /// Total elements sampled, spread over the parameter pool
    /// proportionally to tensor size.
    pub samples: usize,
    pub seed: u64,
}

impl GradCheckCfg {
    /// Tolerances for checking a 32-bit model.
    pub fn for_f32() -> Self {
        Self {
            eps: 1e-3,
            rel_tol: 1e-2,
            floor: 1e-8,
            samples: 1200,
            seed: 7,
        }
    }

    /// Tolerances for checking a 64-bit model.
    pub fn for_f64() -> Self {
        Self {
            eps: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-8,
            samples: 1200,
            seed: 7,
        }
    }
}

/// Analytic gradients snapshotted off a model, in visit order.
#[derive(Debug, Clone)]
pub struct GradSnapshot {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub grads: Vec<Vec<f64>>,
}

pub fn snapshot_grads<T: Scalar, M: Parameters<T>>(model: &M) -> GradSnapshot {
    let mut snap = GradSnapshot {
        names: Vec::new(),
        sizes: Vec::new(),
        grads: Vec::new(),
    };
    model.visit(&mut |p| {
        snap.names.push(p.name.clone());
        snap.sizes.push(p.value.numel());
        snap.grads.push(
            p.grad
                .as_deref()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_default(),
        );
    });
    snap
}

/// Compares snapshotted analytic gradients against central finite
/// differences. `loss_at(param, elem, delta)` must return the loss with that
/// single element offset by `delta`, leaving no lasting change.
pub fn check_grads_eval(
    snapshot: &GradSnapshot,
    loss_at: &mut dyn FnMut(usize, usize, f64) -> f64,
    cfg: GradCheckCfg,
) -> GradCheckReport {
    let total: usize = snapshot
        .sizes
        .iter()
        .zip(&snapshot.grads)
        .filter(|(_, g)| !g.is_empty())
        .map(|(s, _)| *s)
        .sum();
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut flat = rng.gen_range(0..total);
        for (pi, size) in snapshot.sizes.iter().enumerate() {
            if snapshot.grads[pi].is_empty() {
                continue;
            }
            if flat < *size {
                picks.push((pi, flat));
                break;
            }
            flat -= size;
        }
    }
    picks.sort_unstable();
    picks.dedup();

    let central = |loss_at: &mut dyn FnMut(usize, usize, f64) -> f64,
                   pi: usize,
                   ei: usize,
                   eps: f64| {
        (loss_at(pi, ei, eps) - loss_at(pi, ei, -eps)) / (2.0 * eps)
    };
    let rel = |a: f64, b: f64| {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    };

    let mut report = GradCheckReport::default();
    for (pi, ei) in picks {
        let analytic = snapshot.grads[pi][ei];
        let base = central(loss_at, pi, ei, cfg.eps);
        if analytic.abs().max(base.abs()) < cfg.floor {
            report.skipped += 1;
            continue;
        }
        report.compared += 1;
        let mut rel_err = rel(analytic, base);
        if rel_err > cfg.rel_tol {
            // the base step can be roundoff-limited (tiny gradients) or
            // truncation/kink-limited (a ReLU boundary within the step) for
            // this element; accept a neighbouring pair of steps that agree
            // with each other and with the analytic value
            let ladder = [
                cfg.eps / 256.0,
                cfg.eps / 64.0,
                cfg.eps / 16.0,
                cfg.eps / 4.0,
                cfg.eps,
                cfg.eps * 4.0,
                cfg.eps * 16.0,
            ];
            let quotients: Vec<f64> = ladder
                .iter()
                .map(|&e| {
                    if e == cfg.eps {
                        base
                    } else {
                        central(loss_at, pi, ei, e)
                    }
                })
                .collect();
            for w in quotients.windows(2) {
                if rel(w[0], w[1]) <= cfg.rel_tol {
                    rel_err = rel_err.min(rel(analytic, w[0])).min(rel(analytic, w[1]));
                }
            }
        }
        if rel_err > report.worst_rel {
            report.worst_rel = rel_err;
        }
        if rel_err > cfg.rel_tol {
            report.failures.push(GradMismatch {
                param: snapshot.names[pi].clone(),
                index: ei,
                analytic,
                numeric: base,
                rel_err,
            });
        }
    }
    report
}

/// Same-precision convenience wrapper: perturbs the model in place and
/// re-evaluates `loss_fn`.
pub fn check_grads<T, M, F>(model: &mut M, mut loss_fn: F, cfg: GradCheckCfg) -> GradCheckReport
where
    T: Scalar,
    M: Parameters<T>,
    F: FnMut(&M) -> f64,
{
    let snapshot = snapshot_grads(model);
    let mut eval = |pi: usize, ei: usize, delta: f64| {
        let mut orig = T::zero();
        let mut i = 0;
        model.visit_mut(&mut |p| {
            if i == pi {
                orig = p.value.data()[ei];
                p.value.data_mut()[ei] = T::of(orig.as_f64() + delta);
            }
            i += 1;
        });
        let loss = loss_fn(model);
        let mut i = 0;
        model.visit_mut(&mut |p| {
            if i == pi {
                p.value.data_mut()[ei] = orig;
            }
            i += 1;
        });
        loss
    };
    check_grads_eval(&snapshot, &mut eval, cfg)
}
