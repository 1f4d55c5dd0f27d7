//! Finite-difference check of the full composed graph: fusion -> backbone ->
//! head -> objective (detection + reconstruction), for both precisions. The
//! difference quotients are evaluated on the 64-bit graph in both cases; the
//! 32-bit check compares the 32-bit backward's gradients against them.

mod common;

use meafdet_core::fusion::FusionConfig;
use meafdet_core::gradcheck::{check_grads, check_grads_eval, snapshot_grads, GradCheckCfg};
use meafdet_core::init::{random_tensor, SeedRng};
use meafdet_core::loss::{GroundTruthBox, LossWeights};
use meafdet_core::model::{BackboneConfig, DetectModel, Modality, SrBranchConfig};
use meafdet_core::param::{copy_params, Parameters};
use meafdet_core::pipeline::{backward_and_accumulate, forward_loss};
use meafdet_core::scalar::Scalar;
use meafdet_core::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;

fn setup<T: Scalar>(seed: u64) -> (DetectModel<T>, Tensor<T>, Tensor<T>, Vec<Vec<GroundTruthBox>>) {
    let mut rng = SeedRng::seed_from_u64(seed);
    let model = DetectModel::new(
        &mut rng,
        Modality::Fused,
        FusionConfig::default(),
        BackboneConfig::default(),
        SrBranchConfig::default(),
        true,
    )
    .unwrap();
    let rgb = random_tensor(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let ir = random_tensor(&mut rng, &[1, 1, 32, 32], 0.0, 1.0);
    let gts = vec![vec![
        GroundTruthBox {
            class_id: 0,
            cx: 0.4,
            cy: 0.35,
            w: 0.3,
            h: 0.25,
        },
        GroundTruthBox {
            class_id: 0,
            cx: 0.75,
            cy: 0.7,
            w: 0.12,
            h: 0.12,
        },
    ]];
    (model, rgb, ir, gts)
}

fn cast_up(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| v as f64).collect()).unwrap()
}

#[test]
fn composed_graph_fd_f64() {
    let (mut model, rgb, ir, gts) = setup::<f64>(99);
    let weights = LossWeights::default();
    let mut step = forward_loss(&model, &rgb, &ir, &gts, &weights, true).unwrap();
    backward_and_accumulate(&mut model, &mut step).unwrap();
    drop(step);

    let loss_fn = |m: &DetectModel<f64>| {
        forward_loss(m, &rgb, &ir, &gts, &weights, true)
            .unwrap()
            .report
            .total
    };
    let report = check_grads(&mut model, loss_fn, GradCheckCfg::for_f64());
    assert!(report.compared > 400, "too few comparisons: {}", report.compared);
    let frac = report.pass_fraction();
    assert!(
        frac >= 0.999,
        "f64 pass fraction {frac} (worst rel {}, failures: {:?})",
        report.worst_rel,
        &report.failures[..report.failures.len().min(5)]
    );
}

#[test]
fn composed_graph_fd_f32() {
    let weights = LossWeights::default();

    // 32-bit model and its backward
    let (mut m32, rgb32, ir32, gts) = setup::<f32>(99);
    let mut step = forward_loss(&m32, &rgb32, &ir32, &gts, &weights, true).unwrap();
    backward_and_accumulate(&mut m32, &mut step).unwrap();
    drop(step);
    let snapshot = snapshot_grads(&m32);

    // 64-bit twin holding bit-identical parameter values, for the quotients
    let (mut twin, _, _, _) = setup::<f64>(99);
    copy_params(&m32, &mut twin).unwrap();
    let rgb64 = cast_up(&rgb32);
    let ir64 = cast_up(&ir32);

    let mut eval = |pi: usize, ei: usize, delta: f64| {
        let mut orig = 0.0f64;
        let mut i = 0;
        twin.visit_mut(&mut |p| {
            if i == pi {
                orig = p.value.data()[ei];
                p.value.data_mut()[ei] = orig + delta;
            }
            i += 1;
        });
        let loss = forward_loss(&twin, &rgb64, &ir64, &gts, &weights, true)
            .unwrap()
            .report
            .total;
        let mut i = 0;
        twin.visit_mut(&mut |p| {
            if i == pi {
                p.value.data_mut()[ei] = orig;
            }
            i += 1;
        });
        loss
    };
    let report = check_grads_eval(&snapshot, &mut eval, GradCheckCfg::for_f32());
    assert!(report.compared > 400, "too few comparisons: {}", report.compared);
    let frac = report.pass_fraction();
    assert!(
        frac >= 0.999,
        "f32 pass fraction {frac} (worst rel {}, failures: {:?})",
        report.worst_rel,
        &report.failures[..report.failures.len().min(5)]
    );
}
