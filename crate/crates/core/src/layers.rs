//! Parameterized layers: thin owners of [`Param`]s with a tape-recording
//! forward and a naming scheme for checkpointing.

use std::cell::RefCell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::KernelDims;
use crate::rng;
use crate::shape::Shape4;
use crate::tape::{Param, ParamRef, Tape, Value};
use crate::tensor::Tensor4;

/// Non-trainable named state (batch-norm running statistics).
pub type BufferRef = Rc<RefCell<Vec<f64>>>;

/// Ordered collection of named parameters and buffers. Order is the
/// construction order of the model and fixes both optimizer traversal and
/// checkpoint layout.
#[derive(Default)]
pub struct ParamSink {
    pub params: Vec<(String, ParamRef)>,
    pub buffers: Vec<(String, BufferRef)>,
}

impl ParamSink {
    pub fn param(&mut self, name: impl Into<String>, p: &ParamRef) {
        self.params.push((name.into(), Rc::clone(p)));
    }

    pub fn buffer(&mut self, name: impl Into<String>, b: &BufferRef) {
        self.buffers.push((name.into(), Rc::clone(b)));
    }

    pub fn param_refs(&self) -> Vec<ParamRef> {
        self.params.iter().map(|(_, p)| Rc::clone(p)).collect()
    }
}

/// He-style normal init: `std = sqrt(2 / fan_in)`, drawn from the given
/// stream. Used for every weight in the crate; biases start at zero.
pub fn init_normal(shape: Shape4, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel()).map(|_| rng::normal(rng) * std).collect();
    Tensor4::from_vec(shape, data).expect("init shape")
}

// ---------------------------------------------------------------------------
// Convolution (1x1 and 3x3, also used as a dense layer on (n, c, 1, 1)).
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Conv2d {
    pub fn new(k: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = KernelDims::new(k, k, c_in, c_out);
        Conv2d {
            weight: Param::new(init_normal(dims.shape(), k * k * c_in, rng)),
            bias: Param::new(Tensor4::zeros(Shape4::new(1, 1, 1, c_out))),
        }
    }

    pub fn dims(&self) -> KernelDims {
        KernelDims::from_shape(self.weight.borrow().value.shape)
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, Some(b))
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        sink.param(format!("{prefix}.weight"), &self.weight);
        sink.param(format!("{prefix}.bias"), &self.bias);
    }
}

// ---------------------------------------------------------------------------
// Batch normalization.
// ---------------------------------------------------------------------------

pub struct BatchNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub running_mean: BufferRef,
    pub running_var: BufferRef,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor4::full(Shape4::new(1, 1, 1, channels), 1.0)),
            beta: Param::new(Tensor4::zeros(Shape4::new(1, 1, 1, channels))),
            running_mean: Rc::new(RefCell::new(vec![0.0; channels])),
            running_var: Rc::new(RefCell::new(vec![1.0; channels])),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.borrow().value.numel()
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running estimates (`running = (1 - momentum) * running +
    /// momentum * batch`, variance unbiased); eval mode applies the frozen
    /// running statistics.
    pub fn forward(&self, tape: &mut Tape, x: Value, training: bool) -> Result<Value> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        if training {
            let xs = tape.shape(x);
            let m = (xs.n * xs.h * xs.w) as f64;
            let (out, mean, var) = tape.bn_train(x, g, b, self.eps)?;
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..mean.len() {
                rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                let unbiased = var[c] * m / (m - 1.0);
                rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * unbiased;
            }
            Ok(out)
        } else {
            let mean = self.running_mean.borrow().clone();
            let var = self.running_var.borrow().clone();
            tape.bn_eval(x, g, b, &mean, &var, self.eps)
        }
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        sink.param(format!("{prefix}.gamma"), &self.gamma);
        sink.param(format!("{prefix}.beta"), &self.beta);
        sink.buffer(format!("{prefix}.running_mean"), &self.running_mean);
        sink.buffer(format!("{prefix}.running_var"), &self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Learned spatial collapse (h*w -> 1), fixed to its construction size.
// ---------------------------------------------------------------------------

pub struct SpatialLinear {
    pub weight: ParamRef,
}

impl SpatialLinear {
    pub fn new(hw: usize, rng: &mut ChaCha8Rng) -> Self {
        SpatialLinear { weight: Param::new(init_normal(Shape4::new(1, 1, hw, 1), hw, rng)) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let w = tape.param(&self.weight);
        tape.spatial_linear(x, w)
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        sink.param(format!("{prefix}.weight"), &self.weight);
    }
}

// ---------------------------------------------------------------------------
// Patch embedding (stride-p non-overlapping projection).
// ---------------------------------------------------------------------------

pub struct PatchEmbed {
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(patch: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = KernelDims::new(patch, patch, c_in, c_out);
        PatchEmbed {
            weight: Param::new(init_normal(dims.shape(), patch * patch * c_in, rng)),
            bias: Param::new(Tensor4::zeros(Shape4::new(1, 1, 1, c_out))),
            patch,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.patch_embed(x, w, b, self.patch)
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        sink.param(format!("{prefix}.weight"), &self.weight);
        sink.param(format!("{prefix}.bias"), &self.bias);
    }
}
