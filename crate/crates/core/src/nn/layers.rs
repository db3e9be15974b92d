use super::{fan_in_normal, ForwardCtx, Module, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, SeededRng, Tensor, Var};

/// `y = x Wᵀ + b` with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: Parameter::new(format!("{prefix}.weight"), fan_in_normal(rng, &[d_out, d_in], d_in)),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn from_tensors(prefix: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("linear", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight: Parameter::new(format!("{prefix}.weight"), weight),
            bias: Parameter::new(format!("{prefix}.bias"), bias),
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let last = g.shape(x).last().copied();
        if last != Some(self.d_in()) {
            return Err(Error::shape("linear", g.shape(x), self.weight.tensor.shape()));
        }
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        let wt = g.transpose(w, 0, 1)?;
        if g.shape(x).len() == 1 {
            let row = g.reshape(x, &[1, self.d_in()])?;
            let y = g.matmul(row, wt)?;
            let y = g.reshape(y, &[self.d_out()])?;
            return g.add(y, b);
        }
        let y = g.matmul(x, wt)?;
        g.add(y, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Normalisation over the last axis with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::ones(&[dim])),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let dim = self.gamma.tensor.numel();
        if g.shape(x).last() != Some(&dim) {
            return Err(Error::shape("layernorm", g.shape(x), &[dim]));
        }
        let xhat = g.normalize(x, T::lit(self.eps))?;
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        let scaled = g.mul(xhat, gamma)?;
        g.add(scaled, beta)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Inverted dropout: in training, zero each element with probability `p`
/// and scale survivors by `1/(1-p)`; identity in eval mode.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, p: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability {p} not in [0, 1)")));
    }
    if !ctx.train || p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let n = g.value(x).len();
    let rng = ctx.rng();
    let mask = (0..n)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect();
    let m = g.constant(&shape, mask)?;
    g.mul(x, m)
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(prefix: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let id = Linear::from_tensors("l", Tensor::eye(2), Tensor::zeros(&[2])).unwrap();
        let x = g.leaf(&t(&[1, 2], &[0.7, -3.0]));
        let y = id.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[0.7, -3.0]);

        let lin = Linear::from_tensors("m", t(&[2, 2], &[1., 2., 3., 4.]), t(&[2], &[1., 1.])).unwrap();
        let x = g.leaf(&t(&[2], &[1., 1.]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[4., 8.]);
    }

    #[test]
    fn linear_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let lin = Linear::<f64>::new("l", 3, 2, &mut SeededRng::new(0, 0));
        let x = g.leaf(&Tensor::zeros(&[4, 2]));
        assert!(lin.forward(&mut g, x).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let mut g = Graph::<f64>::new();
        let mut ln = LayerNorm::<f64>::new("ln", 2);
        let c = g.leaf(&t(&[2], &[5., 5.]));
        let y = ln.forward(&mut g, c).unwrap();
        assert!(g.value(y).iter().all(|v| v.abs() < 1e-9));

        ln.eps = 1e-12;
        let x = g.leaf(&t(&[2], &[1., 3.]));
        let y = ln.forward(&mut g, x).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-9 && (g.value(y)[1] - 1.0).abs() < 1e-9);

        ln.gamma.tensor = Tensor::zeros(&[2]);
        ln.beta.tensor = Tensor::full(&[2], 0.25);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[-4., 9.]));
        let y = ln.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[0.25, 0.25]);
    }

    #[test]
    fn gelu_reference_points() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3], &[0.0, 10.0, -10.0]));
        let y = g.gelu(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-4);
        assert!(v[2].abs() < 1e-4);
    }

    #[test]
    fn gelu_monotone_on_tested_range() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..400).map(|i| -0.7 + i as f64 * 0.05).collect();
        let x = g.leaf(&t(&[xs.len()], &xs));
        let y = g.gelu(x).unwrap();
        assert!(g.value(y).windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&Tensor::ones(&[100_000]));
        let mut ctx = ForwardCtx::train(SeededRng::new(3, 0));
        assert_eq!(dropout(&mut g, x, 0.0, &mut ctx).unwrap(), x);
        let mut eval = ForwardCtx::eval();
        assert_eq!(dropout(&mut g, x, 0.1, &mut eval).unwrap(), x);
        let y = dropout(&mut g, x, 0.5, &mut ctx).unwrap();
        let mean = g.value(y).iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(dropout(&mut g, x, 1.0, &mut ctx).is_err());
    }
}
