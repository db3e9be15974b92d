//! ViT-Lite: patch embedding, class token, learned positional embeddings,
//! pre-norm encoder stack, classification head `M0` and the per-patch
//! rotation heads used only while pretraining.

mod freeze;
mod geometry;

pub use freeze::{apply_freeze, FreezeSpec, ParamGroup};
pub use geometry::{interpolate_pos_embed, tokenize, tokenize_batch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, fan_in_normal, truncated_normal, EncoderBlock, ForwardCtx, LayerNorm, Linear, Mlp, Module, Parameter};
use crate::scalar::Scalar;
use crate::tensor::{Graph, SeededRng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_c: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub expansion: usize,
    pub dropout: f64,
    pub n_rotation_classes: usize,
    pub n_downstream_classes: usize,
    /// Hidden width of the two-layer heads; `None` uses `embed_dim`.
    pub head_hidden: Option<usize>,
    /// One rotation MLP shared by every patch position.
    pub share_patch_heads: bool,
    /// Predict patch rotations with the classification head `M0`.
    pub reuse_m0_head: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_c: 3,
            image_h: 32,
            image_w: 32,
            patch_size: 4,
            embed_dim: 256,
            n_blocks: 7,
            n_heads: 4,
            expansion: 512,
            dropout: 0.1,
            n_rotation_classes: 4,
            n_downstream_classes: 10,
            head_hidden: None,
            share_patch_heads: false,
            reuse_m0_head: false,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_h % p != 0 || self.image_w % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_h, self.image_w
            )));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.n_downstream_classes == 0 || self.n_rotation_classes == 0 {
            return Err(Error::Config("blocks and class counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.share_patch_heads && self.reuse_m0_head {
            return Err(Error::Config("share_patch_heads and reuse_m0_head are exclusive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.embed_dim)
    }

    pub fn patch_dim(&self) -> usize {
        self.image_c * self.patch_size * self.patch_size
    }

    /// Patch grid at the downstream image size.
    pub fn full_grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }
}

/// Which outputs a forward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Downstream,
}

/// N distinct two-layer rotation MLPs stored as stacked tensors, one slice
/// per patch position.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedMlp<T> {
    pub fc1_weight: Parameter<T>,
    pub fc1_bias: Parameter<T>,
    pub fc2_weight: Parameter<T>,
    pub fc2_bias: Parameter<T>,
}

impl<T: Scalar> StackedMlp<T> {
    fn new(prefix: &str, n: usize, d_in: usize, hidden: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            fc1_weight: Parameter::new(format!("{prefix}.fc1.weight"), fan_in_normal(rng, &[n, hidden, d_in], d_in)),
            fc1_bias: Parameter::new(format!("{prefix}.fc1.bias"), Tensor::zeros(&[n, 1, hidden])),
            fc2_weight: Parameter::new(format!("{prefix}.fc2.weight"), fan_in_normal(rng, &[n, d_out, hidden], hidden)),
            fc2_bias: Parameter::new(format!("{prefix}.fc2.bias"), Tensor::zeros(&[n, 1, d_out])),
        }
    }

    fn positions(&self) -> usize {
        self.fc1_weight.tensor.shape()[0]
    }

    /// `x: B×N×h → B×N×d_out`, position `i` through MLP `i`.
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xt = g.transpose(x, 0, 1)?;
        let w1 = self.fc1_weight.bind(g);
        let w1 = g.transpose(w1, 1, 2)?;
        let b1 = self.fc1_bias.bind(g);
        let h = g.matmul(xt, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h)?;
        let w2 = self.fc2_weight.bind(g);
        let w2 = g.transpose(w2, 1, 2)?;
        let b2 = self.fc2_bias.bind(g);
        let y = g.matmul(h, w2)?;
        let y = g.add(y, b2)?;
        g.transpose(y, 0, 1)
    }
}

impl<T: Scalar> Module<T> for StackedMlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.fc1_weight);
        f(&self.fc1_bias);
        f(&self.fc2_weight);
        f(&self.fc2_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.fc1_weight);
        f(&mut self.fc1_bias);
        f(&mut self.fc2_weight);
        f(&mut self.fc2_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchHeads<T> {
    /// Downstream model: patch encodings are ignored.
    Absent,
    /// `M1..MN`, one MLP per patch position.
    Distinct(StackedMlp<T>),
    /// One MLP applied at every position.
    Shared(Mlp<T>),
    /// Patch encodings go through `M0`; no extra parameters.
    ReuseClassifier,
}

/// Logits of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `B×K` from `M0` on the class-token encoding.
    pub cls_logits: Var,
    /// `B×N×4` from the patch heads (pretrain mode only).
    pub patch_logits: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel<T> {
    pub config: ViTConfig,
    grid: (usize, usize),
    pub patch_embed: Linear<T>,
    pub cls_token: Parameter<T>,
    pub pos_embed: Parameter<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub norm: LayerNorm<T>,
    pub head: Mlp<T>,
    pub patch_heads: PatchHeads<T>,
}

impl<T: Scalar> ViTModel<T> {
    /// Model with positional grid `grid` and `head_classes` outputs on `M0`.
    pub fn new(config: &ViTConfig, grid: (usize, usize), head_classes: usize, with_patch_heads: bool, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let h = config.embed_dim;
        let n = grid.0 * grid.1;
        if n == 0 {
            return Err(Error::Config("positional grid must be non-empty".into()));
        }
        if head_classes == 0 {
            return Err(Error::arg("head needs at least one class"));
        }
        let patch_embed = Linear::new("patch_embed.proj", config.patch_dim(), h, rng);
        let cls_token = Parameter::new("patch_embed.cls_token", truncated_normal(rng, &[1, 1, h], 0.02));
        let pos_embed = Parameter::new("patch_embed.pos_embed", truncated_normal(rng, &[1, n + 1, h], 0.02));
        let blocks = (0..config.n_blocks)
            .map(|i| {
                EncoderBlock::new(
                    &format!("blocks.{}", i + 1),
                    i + 1,
                    h,
                    config.n_heads,
                    config.expansion,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Mlp::new("head", h, config.hidden(), head_classes, rng);
        let patch_heads = if !with_patch_heads {
            PatchHeads::Absent
        } else if config.reuse_m0_head {
            if head_classes != config.n_rotation_classes {
                return Err(Error::Config("reusing M0 for patches needs a rotation-sized head".into()));
            }
            PatchHeads::ReuseClassifier
        } else if config.share_patch_heads {
            PatchHeads::Shared(Mlp::new("patch_heads.shared", h, config.hidden(), config.n_rotation_classes, rng))
        } else {
            PatchHeads::Distinct(StackedMlp::new(
                "patch_heads",
                n,
                h,
                config.hidden(),
                config.n_rotation_classes,
                rng,
            ))
        };
        let mut model = Self {
            config: config.clone(),
            grid,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new("norm", h),
            head,
            patch_heads,
        };
        model.zero_output_layers();
        Ok(model)
    }

    /// Classifier output layers start at zero so an untrained model
    /// predicts the uniform distribution (the usual ViT head convention).
    fn zero_output_layers(&mut self) {
        self.head.fc2.weight.tensor.data_mut().fill(T::zero());
        match &mut self.patch_heads {
            PatchHeads::Distinct(s) => s.fc2_weight.tensor.data_mut().fill(T::zero()),
            PatchHeads::Shared(m) => m.fc2.weight.tensor.data_mut().fill(T::zero()),
            PatchHeads::Absent | PatchHeads::ReuseClassifier => {}
        }
    }

    /// Pretext model on the reduced grid with a rotation-classifying `M0`.
    pub fn for_pretraining(config: &ViTConfig, grid: (usize, usize), rng: &mut SeededRng) -> Result<Self> {
        Self::new(config, grid, config.n_rotation_classes, true, rng)
    }

    /// Downstream classifier at the full image size.
    pub fn for_classification(config: &ViTConfig, rng: &mut SeededRng) -> Result<Self> {
        Self::new(config, config.full_grid(), config.n_downstream_classes, false, rng)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn head_classes(&self) -> usize {
        self.head.fc2.d_out()
    }

    pub fn has_patch_heads(&self) -> bool {
        !matches!(self.patch_heads, PatchHeads::Absent)
    }

    /// Resamples the positional embedding onto a new patch grid.
    pub fn set_grid(&mut self, grid: (usize, usize)) -> Result<()> {
        if grid == self.grid {
            return Ok(());
        }
        if let PatchHeads::Distinct(_) = self.patch_heads {
            return Err(Error::arg("per-position patch heads are tied to the pretraining grid; drop them first"));
        }
        let h = self.config.embed_dim;
        let rows = self.pos_embed.tensor.reshape(&[self.num_patches() + 1, h])?;
        let resized = interpolate_pos_embed(&rows, self.grid, grid)?;
        self.pos_embed.tensor = resized.reshape(&[1, grid.0 * grid.1 + 1, h])?;
        self.grid = grid;
        Ok(())
    }

    /// Removes `M1..MN` and swaps the last layer of `M0` for a fresh,
    /// zero-initialised `hidden → n_classes` layer.
    pub fn replace_head(&mut self, n_classes: usize, rng: &mut SeededRng) -> Result<()> {
        if n_classes < 1 {
            return Err(Error::arg("replacement head needs at least one class"));
        }
        let hidden = self.head.fc2.d_in();
        self.head.fc2 = Linear::new("head.fc2", hidden, n_classes, rng);
        self.patch_heads = PatchHeads::Absent;
        self.zero_output_layers();
        Ok(())
    }

    /// Encoder output `E`: `B×(N+1)×h`.
    pub fn encode(&self, g: &mut Graph<T>, images: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Var> {
        let shape = images.shape();
        let [b, c, ih, iw] = shape[..] else {
            return Err(Error::InvalidShape {
                op: "vit forward",
                detail: format!("expects B×C×H×W, got {shape:?}"),
            });
        };
        let p = self.config.patch_size;
        if c != self.config.image_c || ih % p != 0 || iw % p != 0 || (ih / p, iw / p) != self.grid {
            return Err(Error::InvalidShape {
                op: "vit forward",
                detail: format!(
                    "images {c}x{ih}x{iw} do not match {} channels on a {:?} grid of {p}-pixel patches",
                    self.config.image_c, self.grid
                ),
            });
        }
        let n = self.num_patches();
        let h = self.config.embed_dim;
        let tokens = tokenize_batch(images, p)?;
        let x = g.leaf(&tokens);
        let x = self.patch_embed.forward(g, x)?;
        let cls = self.cls_token.bind(g);
        let cls = g.broadcast_to(cls, &[b, 1, h])?;
        let x = g.concat(&[cls, x], 1)?;
        let pos = self.pos_embed.bind(g);
        let x = g.add(x, pos)?;
        let mut x = dropout(g, x, self.config.dropout, ctx)?;
        for block in &self.blocks {
            x = block.forward(g, x, ctx)?;
        }
        let e = self.norm.forward(g, x)?;
        debug_assert_eq!(g.shape(e), &[b, n + 1, h]);
        Ok(e)
    }

    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>, mode: Mode, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        if mode == Mode::Pretrain && !self.has_patch_heads() {
            return Err(Error::arg("pretrain forward needs patch heads, which were removed"));
        }
        let e = self.encode(g, images, ctx)?;
        let b = images.shape()[0];
        let (n, h) = (self.num_patches(), self.config.embed_dim);
        let cls = g.slice(e, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, h])?;
        let cls_logits = self.head.forward(g, cls)?;
        let patch_logits = match (mode, &self.patch_heads) {
            (Mode::Downstream, _) | (_, PatchHeads::Absent) => None,
            (Mode::Pretrain, heads) => {
                let patches = g.slice(e, 1, 1, n)?;
                Some(match heads {
                    PatchHeads::Distinct(stack) => {
                        if stack.positions() != n {
                            return Err(Error::shape("patch heads", &[stack.positions()], &[n]));
                        }
                        stack.forward(g, patches)?
                    }
                    PatchHeads::Shared(mlp) => mlp.forward(g, patches)?,
                    PatchHeads::ReuseClassifier => self.head.forward(g, patches)?,
                    PatchHeads::Absent => unreachable!(),
                })
            }
        };
        Ok(ForwardOutput { cls_logits, patch_logits })
    }

    /// Eval-mode logits as plain tensors.
    pub fn predict(&self, images: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, mode, &mut ForwardCtx::eval())?;
        Ok((g.tensor(out.cls_logits), out.patch_logits.map(|v| g.tensor(v))))
    }

    /// Name → parameter lookup.
    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.parameters().into_iter().find(|p| p.name == name)
    }
}

impl<T: Scalar> Module<T> for ViTModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.patch_embed.visit(f);
        f(&self.cls_token);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        self.norm.visit(f);
        self.head.visit(f);
        match &self.patch_heads {
            PatchHeads::Distinct(s) => s.visit(f),
            PatchHeads::Shared(m) => m.visit(f),
            PatchHeads::Absent | PatchHeads::ReuseClassifier => {}
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.cls_token);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.norm.visit_mut(f);
        self.head.visit_mut(f);
        match &mut self.patch_heads {
            PatchHeads::Distinct(s) => s.visit_mut(f),
            PatchHeads::Shared(m) => m.visit_mut(f),
            PatchHeads::Absent | PatchHeads::ReuseClassifier => {}
        }
    }
}

#[cfg(test)]
mod tests;
