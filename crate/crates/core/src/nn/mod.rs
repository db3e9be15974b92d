//! Layers of a pre-norm transformer encoder, built on [`Graph`] ops.

mod attention;
mod layers;
mod loss;

pub use attention::{AttentionRecord, EncoderBlock, FeedForward, MultiHeadSelfAttention};
pub use layers::{dropout, LayerNorm, Linear, Mlp};
pub use loss::softmax_cross_entropy;

use crate::scalar::Scalar;
use crate::tensor::{Graph, SeededRng, Tensor, Var};

/// A named, optionally frozen tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }

    /// Registers this parameter on `g`; frozen parameters enter as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Var {
        g.param(&self.name, &self.tensor, self.trainable)
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |p| p.trainable = on);
    }
}

/// Per-forward state: train/eval mode, the dropout stream and optional
/// attention capture.
#[derive(Debug)]
pub struct ForwardCtx {
    pub train: bool,
    pub trace_attention: bool,
    pub attention: Vec<AttentionRecord>,
    rng: SeededRng,
}

impl ForwardCtx {
    pub fn train(rng: SeededRng) -> Self {
        Self {
            train: true,
            trace_attention: false,
            attention: Vec::new(),
            rng,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            trace_attention: false,
            attention: Vec::new(),
            rng: SeededRng::new(0, 0),
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace_attention = true;
        self
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }
}

/// Fan-in scaled normal initialisation, `N(0, 1/fan_in)`.
pub(crate) fn fan_in_normal<T: Scalar>(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| T::lit(rng.normal(0.0, std))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub(crate) fn truncated_normal<T: Scalar>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| T::lit(rng.truncated_normal(std))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
