//! Shared helpers for the core test suites. The finite-difference check here
//! is the oracle for backward passes: it only ever evaluates forward.

#![allow(dead_code)]

use meafdet_core::scalar::Scalar;
use meafdet_core::tape::{Tape, Var};
use meafdet_core::tensor::Tensor;

/// Deterministic pseudo-random weights so the test functional is sensitive to
/// every output element.
pub fn weighted_loss<T: Scalar>(tape: &mut Tape<T>, out: Var) -> Var {
    let shape = tape.value(out).unwrap().shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as u64).wrapping_mul(2654435761) % 1997) as f64 / 1997.0 - 0.5)
        .collect();
    let wt = tape.constant(Tensor::from_f64(&shape, &w).unwrap());
    let prod = tape.mul(out, wt).unwrap();
    tape.sum(prod).unwrap()
}

/// Central finite differences over every element of every input, compared to
/// the tape's analytic gradients of a random linear functional of the output.
pub fn fd_check<T: Scalar>(
    inputs: &[Tensor<T>],
    build: &dyn Fn(&mut Tape<T>, &[Var]) -> Var,
    eps: f64,
    tol: f64,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_loss(&mut tape, out);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap()
                .expect("leaf gradient populated")
                .iter()
                .map(|g| g.as_f64())
                .collect()
        })
        .collect();

    let eval = |ins: &[Tensor<T>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = weighted_loss(&mut tape, out);
        tape.value(loss).unwrap().item().unwrap().as_f64()
    };

    for (ii, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let base = t.data()[j].as_f64();
            let mut ins = inputs.to_vec();
            ins[ii].data_mut()[j] = T::of(base + eps);
            let plus = eval(&ins);
            ins[ii].data_mut()[j] = T::of(base - eps);
            let minus = eval(&ins);
            let num = (plus - minus) / (2.0 * eps);
            let ana = grads[ii][j];
            let scale = ana.abs().max(num.abs());
            if scale < 1e-8 {
                continue;
            }
            let rel = (ana - num).abs() / scale;
            assert!(
                rel <= tol,
                "input {ii} elem {j}: analytic {ana} vs finite-diff {num} (rel {rel})"
            );
        }
    }
}

/// Small deterministic value pattern, away from kinks of relu/min/max.
pub fn pattern<T: Scalar>(shape: &[usize], phase: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| 0.5 + 0.45 * ((i as f64 * 0.7311 + phase).sin()))
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Like [`pattern`] but spanning negative values too.
pub fn pattern_signed<T: Scalar>(shape: &[usize], phase: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| 1.3 * ((i as f64 * 1.177 + phase).sin()) + 0.11)
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (diff {})",
        (a - b).abs()
    );
}
