use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A named learnable tensor with an accumulated gradient buffer.
///
/// Gradients accumulate across backward passes until the optimizer consumes
/// and clears them.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    /// Weight decay applies to conv/FC weights only, not biases or modal
    /// scalars.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: &str, value: Tensor<T>, decay: bool) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            decay,
        }
    }

    /// Registers this parameter's current value on a tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.leaf(self.value.clone())
    }

    /// Adds the tape gradient of the bound leaf into this parameter.
    pub fn accumulate(&mut self, tape: &Tape<T>, bound: Var) -> Result<()> {
        let g = tape
            .grad(bound)?
            .ok_or_else(|| CoreError::MissingGrad(self.name.clone()))?;
        match self.grad.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Consumes the accumulated gradient; errors if none is present.
    pub fn take_grad(&mut self) -> Result<Vec<T>> {
        self.grad
            .take()
            .ok_or_else(|| CoreError::MissingGrad(self.name.clone()))
    }
}

/// Uniform traversal over a component's parameters, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}

/// A 2-D convolution layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvParam<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Tape-bound handles for a [`ConvParam`].
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParam<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundConv {
        BoundConv {
            weight: self.weight.bind(tape),
            bias: self.bias.bind(tape),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>, b: &BoundConv) -> Result<()> {
        self.weight.accumulate(tape, b.weight)?;
        self.bias.accumulate(tape, b.bias)
    }
}

impl<T: Scalar> Parameters<T> for ConvParam<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl BoundConv {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.stride, self.padding)
    }
}

/// A fully connected layer's parameters.
#[derive(Debug, Clone)]
pub struct LinearParam<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> LinearParam<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLinear {
        BoundLinear {
            weight: self.weight.bind(tape),
            bias: self.bias.bind(tape),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>, b: &BoundLinear) -> Result<()> {
        self.weight.accumulate(tape, b.weight)?;
        self.bias.accumulate(tape, b.bias)
    }
}

impl<T: Scalar> Parameters<T> for LinearParam<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl BoundLinear {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Copies parameter values between two structurally identical models of
/// different precisions, by visit order. Names and shapes must line up.
pub fn copy_params<S, D, PS, PD>(src: &PS, dst: &mut PD) -> Result<()>
where
    S: Scalar,
    D: Scalar,
    PS: Parameters<S>,
    PD: Parameters<D>,
{
    let mut values: Vec<(String, Vec<f64>)> = Vec::new();
    src.visit(&mut |p| {
        values.push((
            p.name.clone(),
            p.value.data().iter().map(|v| v.as_f64()).collect(),
        ))
    });
    let mut i = 0;
    let mut result = Ok(());
    dst.visit_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        match values.get(i) {
            Some((name, data)) if *name == p.name && data.len() == p.value.numel() => {
                for (d, s) in p.value.data_mut().iter_mut().zip(data) {
                    *d = D::of(*s);
                }
            }
            _ => {
                result = Err(CoreError::ShapeMismatch(alloc::format!(
                    "copy_params: destination `{}` does not match source layout",
                    p.name
                )));
            }
        }
        i += 1;
    });
    result?;
    if i != values.len() {
        return Err(CoreError::ShapeMismatch(
            "copy_params: parameter counts differ".into(),
        ));
    }
    Ok(())
}

/// Collects (name, shape) pairs in visit order; test and checkpoint helper.
pub fn param_table<T: Scalar, P: Parameters<T>>(p: &P) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.visit(&mut |param| out.push((param.name.clone(), param.value.shape().to_vec())));
    out
}

pub fn zeros_like_param<T: Scalar>(p: &Param<T>) -> Vec<T> {
    vec![T::zero(); p.value.numel()]
}
