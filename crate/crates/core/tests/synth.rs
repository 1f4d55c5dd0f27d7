//! Synthetic generator: determinism, target visibility probes, and the
//! small-target size invariant.

use meafdet_core::synth::{generate, generate_sample, SynthSpec, TARGET_AMPLITUDE};

fn spec() -> SynthSpec {
    SynthSpec {
        seed: 42,
        ..SynthSpec::default()
    }
}

#[test]
fn identical_seeds_identical_samples() {
    let a = generate(&spec(), 4).unwrap();
    let b = generate(&spec(), 4).unwrap();
    assert_eq!(a, b);
    // a different seed changes the data
    let c = generate(
        &SynthSpec {
            seed: 43,
            ..spec()
        },
        4,
    )
    .unwrap();
    assert_ne!(a[0].rgb, c[0].rgb);
}

#[test]
fn sample_prefix_independent_of_count() {
    let four = generate(&spec(), 4).unwrap();
    let eight = generate(&spec(), 8).unwrap();
    assert_eq!(&four[..], &eight[..4]);
}

#[test]
fn zero_count_is_an_error() {
    assert!(generate(&spec(), 0).is_err());
}

#[test]
fn both_visible_targets_stand_out_in_both_modalities() {
    let s = SynthSpec {
        noise_sigma: 0.0,
        w_rgb_only: 0.0,
        w_ir_only: 0.0,
        w_both: 1.0,
        ..spec()
    };
    for idx in 0..6 {
        let pair = generate_sample(&s, idx).unwrap();
        let size = pair.width();
        for b in &pair.boxes {
            // probe the target center against a ring just outside the box
            let cx = (b.cx * size as f64) as usize;
            let cy = (b.cy * size as f64) as usize;
            let half = (b.w * size as f64 / 2.0).ceil() as usize + 2;
            let ring_y = cy.saturating_sub(half).max(0);
            for (tensor, c) in [(&pair.rgb, 0usize), (&pair.ir, 0usize)] {
                let plane = size * size;
                let center = tensor.data()[c * plane + cy * size + cx] as f64;
                let outside = tensor.data()[c * plane + ring_y * size + cx] as f64;
                assert!(
                    center - outside >= 0.5,
                    "target at ({cx},{cy}) amplitude {} (need >= 0.5, built with {})",
                    center - outside,
                    TARGET_AMPLITUDE
                );
            }
        }
    }
}

#[test]
fn visibility_split_respects_modalities() {
    let rgb_only = SynthSpec {
        noise_sigma: 0.0,
        w_rgb_only: 1.0,
        w_ir_only: 0.0,
        w_both: 0.0,
        ..spec()
    };
    for idx in 0..4 {
        let pair = generate_sample(&rgb_only, idx).unwrap();
        let size = pair.width();
        for b in &pair.boxes {
            let cx = (b.cx * size as f64) as usize;
            let cy = (b.cy * size as f64) as usize;
            let p = cy * size + cx;
            // bright in rgb, background-level in ir
            assert!(pair.rgb.data()[p] > 0.55);
            assert!(pair.ir.data()[p] <= 0.4 + 1e-6);
        }
    }
}

#[test]
fn all_boxes_satisfy_small_target_ratio() {
    for pair in generate(&spec(), 8).unwrap() {
        for b in &pair.boxes {
            assert!(b.w < 0.1 && b.h < 0.1);
            assert!(b.cx > 0.0 && b.cx < 1.0 && b.cy > 0.0 && b.cy < 1.0);
        }
        assert!(!pair.boxes.is_empty());
        // pixel range respected
        assert!(pair.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(pair.ir.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn spec_validation() {
    assert!(SynthSpec {
        min_size: 2,
        ..spec()
    }
    .validate()
    .is_err());
    assert!(SynthSpec {
        max_size: 12,
        image_size: 96,
        ..spec()
    }
    .validate()
    .is_err()); // 12/96 = 0.125 breaks the ratio
    assert!(SynthSpec {
        w_rgb_only: 0.0,
        w_ir_only: 0.0,
        w_both: 0.0,
        ..spec()
    }
    .validate()
    .is_err());
    assert!(spec().validate().is_ok());
}
