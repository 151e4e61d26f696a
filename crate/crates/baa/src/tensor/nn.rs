//! Layers: convolution, transposed convolution, dense, batch norm.
//!
//! A layer owns its parameters as plain tensors. `bind` clones them onto a
//! tape, either as trainable leaves (collected into `vars` in call order,
//! which fixes the optimiser's parameter order) or as constants for frozen
//! forward passes.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dense::{Tensor, TensorError};
use super::ops::{batch_norm_eval, batch_norm_train};
use super::scalar::Scalar;
use super::tape::{Tape, Var};

/// How batch norm sources its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with the current batch; optionally fold the batch stats
    /// into the running estimates.
    Batch { update_running: bool },
    /// Normalise with the stored running estimates (inference).
    Running,
}

fn he_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

// ---- conv ----

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut impl Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            w: he_tensor(rng, &[cout, cin, k, k], cin * k * k),
            b: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn bind<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundConv2d<'t, T> {
        let w = bind_param(tape, &self.w, trainable, vars);
        let b = self.b.as_ref().map(|b| bind_param(tape, b, trainable, vars));
        BoundConv2d {
            w,
            b,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

pub struct BoundConv2d<'t, T: Scalar = f32> {
    pub w: Var<'t, T>,
    pub b: Option<Var<'t, T>>,
    stride: usize,
    pad: usize,
}

impl<'t, T: Scalar> BoundConv2d<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let y = x.conv2d(self.w, self.stride, self.pad)?;
        match self.b {
            Some(b) => y.add_chan_bias(b),
            None => Ok(y),
        }
    }
}

// ---- transposed conv ----

#[derive(Clone, Debug)]
pub struct TConv2<T: Scalar = f32> {
    /// (Cin, Cout, 2, 2)
    pub w: Tensor<T>,
}

impl<T: Scalar> TConv2<T> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize) -> Self {
        TConv2 {
            w: he_tensor(rng, &[cin, cout, 2, 2], cin),
        }
    }

    pub fn bind<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundTConv2<'t, T> {
        BoundTConv2 {
            w: bind_param(tape, &self.w, trainable, vars),
        }
    }
}

pub struct BoundTConv2<'t, T: Scalar = f32> {
    pub w: Var<'t, T>,
}

impl<'t, T: Scalar> BoundTConv2<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.tconv2x2(self.w)
    }
}

// ---- dense ----

#[derive(Clone, Debug)]
pub struct Dense<T: Scalar = f32> {
    /// (In, Out)
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Dense {
            w: he_tensor(rng, &[input, output], input),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn bind<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundDense<'t, T> {
        BoundDense {
            w: bind_param(tape, &self.w, trainable, vars),
            b: bind_param(tape, &self.b, trainable, vars),
        }
    }
}

pub struct BoundDense<'t, T: Scalar = f32> {
    pub w: Var<'t, T>,
    pub b: Var<'t, T>,
}

impl<'t, T: Scalar> BoundDense<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.matmul(self.w)?.add_row_bias(self.b)
    }
}

// ---- batch norm ----

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Running estimates, updated on training forwards. Interior mutability
    /// because the forward pass borrows the layer immutably.
    pub running_mean: RefCell<Tensor<T>>,
    pub running_var: RefCell<Tensor<T>>,
    /// Fraction of the old running estimate kept per update.
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: RefCell::new(Tensor::zeros(&[channels])),
            running_var: RefCell::new(Tensor::full(&[channels], T::one())),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn bind<'t>(
        &'t self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundBatchNorm2d<'t, T> {
        BoundBatchNorm2d {
            gamma: bind_param(tape, &self.gamma, trainable, vars),
            beta: bind_param(tape, &self.beta, trainable, vars),
            layer: self,
        }
    }
}

pub struct BoundBatchNorm2d<'t, T: Scalar = f32> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
    layer: &'t BatchNorm2d<T>,
}

impl<'t, T: Scalar> BoundBatchNorm2d<'t, T> {
    pub fn forward(&self, x: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>, TensorError> {
        match mode {
            BnMode::Batch { update_running } => {
                let bn = batch_norm_train(x, self.gamma, self.beta, self.layer.eps)?;
                if update_running {
                    let mut rm = self.layer.running_mean.borrow_mut();
                    let mut rv = self.layer.running_var.borrow_mut();
                    let keep = self.layer.momentum;
                    for (r, &m) in rm.data_mut().iter_mut().zip(&bn.batch_mean) {
                        *r = T::from_f64(r.to_f64() * keep + m * (1.0 - keep));
                    }
                    for (r, &v) in rv.data_mut().iter_mut().zip(&bn.batch_var) {
                        *r = T::from_f64(r.to_f64() * keep + v * (1.0 - keep));
                    }
                }
                Ok(bn.out)
            }
            BnMode::Running => {
                let rm = self.layer.running_mean.borrow();
                let rv = self.layer.running_var.borrow();
                batch_norm_eval(x, self.gamma, self.beta, rm.data(), rv.data(), self.layer.eps)
            }
        }
    }
}

fn bind_param<'t, T: Scalar>(
    tape: &'t Tape<T>,
    param: &Tensor<T>,
    trainable: bool,
    vars: &mut Vec<Var<'t, T>>,
) -> Var<'t, T> {
    if trainable {
        let v = tape.leaf(param.clone());
        vars.push(v);
        v
    } else {
        tape.constant(param.clone())
    }
}
