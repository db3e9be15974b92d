use super::{dropout, ForwardCtx, LayerNorm, Linear, Module, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, SeededRng, Var};

/// Attention weights of one encoder block, `batch × heads × tokens × tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// Row `query` of head `head` for batch item `b`.
    pub fn row(&self, b: usize, head: usize, query: usize) -> &[f64] {
        let t = self.tokens;
        let off = ((b * self.heads + head) * t + query) * t;
        &self.weights[off..off + t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadSelfAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub n_heads: usize,
    pub dropout: f64,
}

impl<T: Scalar> MultiHeadSelfAttention<T> {
    pub fn new(prefix: &str, dim: usize, n_heads: usize, dropout: f64, rng: &mut SeededRng) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::arg(format!("embedding size {dim} not divisible by {n_heads} heads")));
        }
        Ok(Self {
            query: Linear::new(&format!("{prefix}.query"), dim, dim, rng),
            key: Linear::new(&format!("{prefix}.key"), dim, dim, rng),
            value: Linear::new(&format!("{prefix}.value"), dim, dim, rng),
            out: Linear::new(&format!("{prefix}.out"), dim, dim, rng),
            n_heads,
            dropout,
        })
    }

    /// `x: B×L×h → B×L×h`. Records attention weights when the context traces.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx, block: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [b, l, h] = shape[..] else {
            return Err(Error::InvalidShape {
                op: "mhsa",
                detail: format!("expects B×L×h, got {shape:?}"),
            });
        };
        let heads = self.n_heads;
        if h % heads != 0 {
            return Err(Error::arg(format!("embedding size {h} not divisible by {heads} heads")));
        }
        let dh = h / heads;
        let q = self.query.forward(g, x)?;
        let q = g.reshape(q, &[b, l, heads, dh])?;
        let q = g.transpose(q, 1, 2)?;
        let k = self.key.forward(g, x)?;
        let k = g.reshape(k, &[b, l, heads, dh])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.value.forward(g, x)?;
        let v = g.reshape(v, &[b, l, heads, dh])?;
        let v = g.transpose(v, 1, 2)?;

        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt())?;
        let att = g.softmax(scores)?;
        if ctx.trace_attention {
            ctx.attention.push(AttentionRecord {
                block,
                batch: b,
                heads,
                tokens: l,
                weights: g.value(att).iter().map(|v| v.to_f64().unwrap()).collect(),
            });
        }
        let att = dropout(g, att, self.dropout, ctx)?;
        let y = g.matmul(att, v)?;
        let y = g.transpose(y, 1, 2)?;
        let y = g.reshape(y, &[b, l, h])?;
        self.out.forward(g, y)
    }
}

impl<T: Scalar> Module<T> for MultiHeadSelfAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Position-wise expansion block with dropout after each linear.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dropout: f64,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(prefix: &str, dim: usize, expansion: usize, dropout: f64, rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), dim, expansion, rng),
            fc2: Linear::new(&format!("{prefix}.fc2"), expansion, dim, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = dropout(g, h, self.dropout, ctx)?;
        let y = self.fc2.forward(g, h)?;
        dropout(g, y, self.dropout, ctx)
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Pre-norm encoder block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub index: usize,
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadSelfAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(
        prefix: &str,
        index: usize,
        dim: usize,
        n_heads: usize,
        expansion: usize,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            index,
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), dim),
            attn: MultiHeadSelfAttention::new(&format!("{prefix}.attn"), dim, n_heads, dropout, rng)?,
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, expansion, dropout, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attn.forward(g, h, ctx, self.index)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ffn.forward(g, h, ctx)?;
        g.add(x, h)
    }
}

impl<T: Scalar> Module<T> for EncoderBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}
