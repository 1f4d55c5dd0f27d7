//! Fusion-module behaviour: the documented stage edge cases, the
//! stage-recomposition oracle, structural invariants, and gradient flow to
//! the modal scalars.

mod common;

use common::{assert_close, pattern};
use meafdet_core::fusion::{FusionConfig, FusionParams};
use meafdet_core::init::{random_tensor, SeedRng};
use meafdet_core::param::Parameters;
use meafdet_core::tape::Tape;
use meafdet_core::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;

fn fusion(seed: u64) -> FusionParams<f32> {
    let mut rng = SeedRng::seed_from_u64(seed);
    FusionParams::new(&mut rng, FusionConfig::default()).unwrap()
}

fn pair(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = SeedRng::seed_from_u64(seed);
    (
        random_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0),
        random_tensor(&mut rng, &[1, 1, h, w], 0.0, 1.0),
    )
}

fn set_all(params: &mut impl Parameters<f32>, name_contains: &str, value: f32) {
    params.visit_mut(&mut |p| {
        if p.name.contains(name_contains) {
            p.value.data_mut().fill(value);
        }
    });
}

#[test]
fn modal_scaling_examples() {
    let f = fusion(1);
    let (rgb, ir) = pair(2, 8, 8);
    // default 0.5 halves an all-ones input
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let ones = t.constant(Tensor::full(&[1, 3, 8, 8], 1.0f32));
    let ir_v = t.constant(ir.clone());
    let (sr, _) = b.scale_modalities(&mut t, ones, ir_v).unwrap();
    assert!(t.value(sr).unwrap().data().iter().all(|&v| v == 0.5));

    // p = 1 is the identity, p = 0 annihilates
    for (p, expect_identity) in [(1.0f32, true), (0.0, false)] {
        let mut f = fusion(1);
        f.p_rgb.value.data_mut()[0] = p;
        let mut t = Tape::<f32>::new();
        let b = f.bind(&mut t);
        let rv = t.constant(rgb.clone());
        let iv = t.constant(ir.clone());
        let (sr, _) = b.scale_modalities(&mut t, rv, iv).unwrap();
        if expect_identity {
            assert_eq!(t.value(sr).unwrap().data(), rgb.data());
        } else {
            assert!(t.value(sr).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn scale_rejects_misaligned_pair() {
    let f = fusion(1);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let rgb = t.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let ir = t.constant(Tensor::zeros(&[1, 1, 8, 10]));
    assert!(b.scale_modalities(&mut t, rgb, ir).is_err());
}

#[test]
fn zero_mask_convs_zero_the_mask() {
    let mut f = fusion(3);
    set_all(&mut f, ".mask", 0.0);
    let (rgb, ir) = pair(4, 8, 8);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let (rv, iv) = (t.constant(rgb), t.constant(ir));
    let (sr, _si) = b.scale_modalities(&mut t, rv, iv).unwrap();
    let m = b.generate_mask(&mut t, sr, &b.rgb).unwrap();
    assert!(t.value(m).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_mask_convs_square_nonnegative_input() {
    // 3x3 identity + 1x1 identity with ReLU inert on x >= 0 gives x*x
    let mut f = fusion(5);
    f.rgb.mask3.weight.value = {
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            let off = ((c * 3 + c) * 3 + 1) * 3 + 1; // center tap of channel c
            w.data_mut()[off] = 1.0;
        }
        w
    };
    f.rgb.mask1.weight.value = {
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        w
    };
    set_all(&mut f, "mask3.bias", 0.0);
    set_all(&mut f, "mask1.bias", 0.0);
    let x = pattern::<f32>(&[1, 3, 6, 6], 0.2); // pattern() stays positive
    assert!(x.data().iter().all(|&v| v >= 0.0));
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let xv = t.constant(x.clone());
    let m = b.generate_mask(&mut t, xv, &b.rgb).unwrap();
    let v = t.value(m).unwrap();
    for (got, want) in v.data().iter().zip(x.data()) {
        assert_close(*got as f64, (*want * *want) as f64, 1e-6, "x*x mask");
    }
}

#[test]
fn refine_residual_passes_original_through() {
    // zero mask + identity-center refine kernel returns the raw input per
    // channel sum; with a single-channel IR path this is exact pass-through
    let mut f = fusion(6);
    f.ir.refine.weight.value = {
        let mut w = Tensor::zeros(&[16, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // first output channel = center tap
        w
    };
    set_all(&mut f, "ir.refine.bias", 0.0);
    let (_, ir) = pair(7, 8, 8);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let raw = t.constant(ir.clone());
    let zero_mask = t.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let r = b.refine_features(&mut t, zero_mask, raw, &b.ir).unwrap();
    let v = t.value(r).unwrap();
    assert_eq!(v.shape(), &[1, 16, 8, 8]);
    for p in 0..64 {
        assert_eq!(v.data()[p], ir.data()[p]);
    }
    // remaining channels carry only the (zero) bias
    assert!(v.data()[64..].iter().all(|&x| x == 0.0));
}

#[test]
fn refine_zero_inputs_yield_bias_field() {
    let mut f = fusion(8);
    set_all(&mut f, "rgb.refine.bias", 0.25);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let zero = t.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let r = b.refine_features(&mut t, zero, zero, &b.rgb).unwrap();
    assert!(t.value(r).unwrap().data().iter().all(|&v| v == 0.25));
}

#[test]
fn attention_zero_conv_gives_half_map() {
    let mut f = fusion(9);
    set_all(&mut f, "rgb.sa", 0.0);
    let x = pattern::<f32>(&[1, 16, 8, 8], 0.0);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let xv = t.constant(x);
    let a = b.spatial_attention(&mut t, xv, &b.rgb).unwrap();
    let v = t.value(a).unwrap();
    assert_eq!(v.shape(), &[1, 1, 8, 8]);
    assert!(v.data().iter().all(|&p| p == 0.5));
}

#[test]
fn attention_saturates_toward_one_with_large_bias() {
    let mut f = fusion(10);
    set_all(&mut f, "rgb.sa.weight", 0.0);
    set_all(&mut f, "rgb.sa.bias", 50.0);
    let x = pattern::<f32>(&[1, 16, 8, 8], 0.3);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let xv = t.constant(x);
    let a = b.spatial_attention(&mut t, xv, &b.rgb).unwrap();
    for &p in t.value(a).unwrap().data() {
        assert!((1.0 - p as f64).abs() <= 1e-9);
    }
}

#[test]
fn apply_attention_identity_and_annihilator() {
    let f = fusion(11);
    let x = pattern::<f32>(&[1, 16, 4, 4], 0.0);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let xv = t.constant(x.clone());
    let ones = t.constant(Tensor::full(&[1, 1, 4, 4], 1.0f32));
    let zeros = t.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let y = b.apply_attention(&mut t, xv, ones).unwrap();
    assert_eq!(t.value(y).unwrap().data(), x.data());
    let z = b.apply_attention(&mut t, xv, zeros).unwrap();
    assert!(t.value(z).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn excitation_saturated_gate_is_identity() {
    let mut f = fusion(12);
    set_all(&mut f, "fc2.weight", 0.0);
    set_all(&mut f, "fc2.bias", 50.0); // gate sigmoid(50) ~ 1
    let a = pattern::<f32>(&[1, 16, 4, 4], 0.1);
    let b_in = pattern::<f32>(&[1, 16, 4, 4], 2.0);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let (av, bv) = (t.constant(a.clone()), t.constant(b_in.clone()));
    let (fused, gate) = b.channel_excitation_fuse(&mut t, av, bv).unwrap();
    let fv = t.value(fused).unwrap();
    for (i, &v) in fv.data().iter().enumerate() {
        let want = if i < 256 { a.data()[i] } else { b_in.data()[i - 256] };
        assert_close(v as f64, want as f64, 1e-6, "saturated excitation");
    }
    assert!(t.value(gate).unwrap().data().iter().all(|&g| g > 0.999));
}

#[test]
fn excitation_zero_input_stays_zero() {
    let f = fusion(13);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let z1 = t.constant(Tensor::zeros(&[1, 16, 4, 4]));
    let z2 = t.constant(Tensor::zeros(&[1, 16, 4, 4]));
    let (fused, _) = b.channel_excitation_fuse(&mut t, z1, z2).unwrap();
    assert!(t.value(fused).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_preserves_spatial_dims_and_is_pure() {
    let f = fusion(14);
    for (h, w) in [(3usize, 3usize), (5, 7), (8, 8), (32, 32)] {
        let (rgb, ir) = pair(20 + h as u64, h, w);
        let run = || {
            let mut t = Tape::<f32>::new();
            let b = f.bind(&mut t);
            let (rv, iv) = (t.constant(rgb.clone()), t.constant(ir.clone()));
            let (fused, _) = b.forward(&mut t, rv, iv, false).unwrap();
            t.value(fused).unwrap().clone()
        };
        let out1 = run();
        let out2 = run();
        assert_eq!(out1.shape(), &[1, 32, h, w]);
        assert_eq!(out1, out2, "fusion forward must be deterministic");
    }
}

#[test]
fn forward_equals_stage_recomposition_bitexact() {
    let f = fusion(15);
    let (rgb, ir) = pair(30, 8, 8);

    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let (rv, iv) = (t.constant(rgb.clone()), t.constant(ir.clone()));
    let (fused, trace) = b.forward(&mut t, rv, iv, true).unwrap();
    let full = t.value(fused).unwrap().clone();
    let trace = trace.unwrap();

    // manual chain of the six stage ops on a fresh tape
    let mut t2 = Tape::<f32>::new();
    let b2 = f.bind(&mut t2);
    let (rv2, iv2) = (t2.constant(rgb), t2.constant(ir));
    let (s_rgb, s_ir) = b2.scale_modalities(&mut t2, rv2, iv2).unwrap();
    let m_rgb = b2.generate_mask(&mut t2, s_rgb, &b2.rgb).unwrap();
    let m_ir = b2.generate_mask(&mut t2, s_ir, &b2.ir).unwrap();
    let r_rgb = b2.refine_features(&mut t2, m_rgb, rv2, &b2.rgb).unwrap();
    let r_ir = b2.refine_features(&mut t2, m_ir, iv2, &b2.ir).unwrap();
    let a_rgb = b2.spatial_attention(&mut t2, r_rgb, &b2.rgb).unwrap();
    let a_ir = b2.spatial_attention(&mut t2, r_ir, &b2.ir).unwrap();
    let o_rgb = b2.apply_attention(&mut t2, r_rgb, a_rgb).unwrap();
    let o_ir = b2.apply_attention(&mut t2, r_ir, a_ir).unwrap();
    let (fused2, _) = b2.channel_excitation_fuse(&mut t2, o_rgb, o_ir).unwrap();

    assert_eq!(&full, t2.value(fused2).unwrap());
    // the recorded trace matches each stage bit-exactly
    assert_eq!(&trace.scaled_rgb, t2.value(s_rgb).unwrap());
    assert_eq!(&trace.mask_rgb, t2.value(m_rgb).unwrap());
    assert_eq!(&trace.mask_ir, t2.value(m_ir).unwrap());
    assert_eq!(&trace.refined_rgb, t2.value(r_rgb).unwrap());
    assert_eq!(&trace.attention_rgb, t2.value(a_rgb).unwrap());
    assert_eq!(&trace.attention_ir, t2.value(a_ir).unwrap());
    assert_eq!(&trace.attended_ir, t2.value(o_ir).unwrap());
    assert_eq!(&trace.fused, t2.value(fused2).unwrap());
}

#[test]
fn attention_and_gate_strictly_in_unit_interval() {
    for seed in 0..8u64 {
        let f = fusion(40 + seed);
        let (rgb, ir) = pair(60 + seed, 8, 8);
        let mut t = Tape::<f32>::new();
        let b = f.bind(&mut t);
        let (rv, iv) = (t.constant(rgb), t.constant(ir));
        let (_, trace) = b.forward(&mut t, rv, iv, true).unwrap();
        let trace = trace.unwrap();
        for &v in trace
            .attention_rgb
            .data()
            .iter()
            .chain(trace.attention_ir.data())
            .chain(trace.excitation.data())
        {
            assert!(v > 0.0 && v < 1.0, "value {v} escapes (0,1)");
        }
    }
}

#[test]
fn gradient_reaches_modal_scalars() {
    let mut f = fusion(16);
    let (rgb, ir) = pair(70, 8, 8);
    let mut t = Tape::<f32>::new();
    let b = f.bind(&mut t);
    let (rv, iv) = (t.constant(rgb), t.constant(ir));
    let (fused, _) = b.forward(&mut t, rv, iv, false).unwrap();
    let loss = t.sum(fused).unwrap();
    t.backward(loss).unwrap();
    f.accumulate(&t, &b).unwrap();
    let g_rgb = f.p_rgb.grad.as_ref().unwrap()[0];
    let g_ir = f.p_ir.grad.as_ref().unwrap()[0];
    assert!(g_rgb != 0.0 && g_ir != 0.0, "p grads: {g_rgb}, {g_ir}");

    // finite-difference cross-check on p_rgb
    let eval = |f: &FusionParams<f32>| {
        let mut t = Tape::<f32>::new();
        let b = f.bind(&mut t);
        let (rgb, ir) = pair(70, 8, 8);
        let (rv, iv) = (t.constant(rgb), t.constant(ir));
        let (fused, _) = b.forward(&mut t, rv, iv, false).unwrap();
        let loss = t.sum(fused).unwrap();
        t.value(loss).unwrap().item().unwrap() as f64
    };
    let eps = 1e-3;
    let mut fp = f.clone();
    fp.p_rgb.value.data_mut()[0] += eps as f32;
    let mut fm = f.clone();
    fm.p_rgb.value.data_mut()[0] -= eps as f32;
    let num = (eval(&fp) - eval(&fm)) / (2.0 * eps);
    let rel = (g_rgb as f64 - num).abs() / num.abs().max(1e-8);
    assert!(rel < 1e-2, "p_rgb grad {g_rgb} vs fd {num}");
}

#[test]
fn dead_ir_path_ignores_ir_values() {
    // p_ir = 0 kills the mask path; zeroing the refine weights and every
    // IR-path bias removes the residual route, so ir values cannot matter
    let mut f = fusion(17);
    f.p_ir.value.data_mut()[0] = 0.0;
    set_all(&mut f, "ir.refine.weight", 0.0);
    set_all(&mut f, "ir.", 0.0); // all IR-path weights+biases; mask path is dead anyway
    let (rgb, ir_a) = pair(80, 8, 8);
    let mut rng = SeedRng::seed_from_u64(81);
    let ir_b = random_tensor::<f32>(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);

    let run = |ir: &Tensor<f32>| {
        let mut t = Tape::<f32>::new();
        let b = f.bind(&mut t);
        let (rv, iv) = (t.constant(rgb.clone()), t.constant(ir.clone()));
        let (fused, _) = b.forward(&mut t, rv, iv, false).unwrap();
        t.value(fused).unwrap().clone()
    };
    assert_eq!(run(&ir_a), run(&ir_b), "ir input still influences the output");
}

#[test]
fn config_validation() {
    assert!(FusionConfig { c_mid: 0, reduction: 4 }.validate().is_err());
    assert!(FusionConfig { c_mid: 16, reduction: 3 }.validate().is_err());
    assert!(FusionConfig::default().validate().is_ok());
}
