//! Built-in correctness checks: finite-difference gradient checks of every
//! graph op and layer, rotation and geometry oracles, and the loss value of
//! an untrained model. Used by the `selftest` command and the test suites.

use crate::error::Result;
use crate::nn::{dropout, softmax_cross_entropy, EncoderBlock, FeedForward, ForwardCtx, LayerNorm, Linear, Mlp, Module, MultiHeadSelfAttention};
use crate::optim::PretextConfig;
use crate::pretext::{assemble_pretext_batch, compute_reduced_geometry, patchrot_loss, rotate_quarter, LossReduction, PretextFlags};
use crate::tensor::{finite_diff_grad, max_relative_error, Distribution, Graph, SeededRng, Tensor, Var, OP_NAMES};
use crate::vit::{tokenize, Mode, ViTConfig, ViTModel};

/// Acceptance threshold on the relative gradient error (f64).
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Random instances per gradient check.
pub const GRAD_INSTANCES: usize = 5;
const FD_STEP: f64 = 1e-6;
/// Below this magnitude a gradient counts as identically zero (e.g. the key
/// bias, which softmax is invariant to) and the absolute gap is reported.
const ZERO_GRAD: f64 = 1e-6;

fn grad_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = analytic.data().iter().chain(numeric.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < ZERO_GRAD {
        analytic.data().iter().zip(numeric.data()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    } else {
        max_relative_error(analytic, numeric)
    }
}

/// Outcome of one gradient check over several random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let u: Tensor<f64> = rng.draw(Distribution::UniformReal, shape).expect("valid shape");
    u.map(|v| lo + (hi - lo) * v)
}

/// Analytic gradients of `sum(f(inputs) ⊙ R)` with respect to every input,
/// against central differences. `R` is a fixed random weighting so outputs
/// with constant sums (softmax, normalisation) still give informative
/// gradients.
fn check_fn(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, fault: Option<&str>, seed: u64) -> Result<f64> {
    let weights = |g: &mut Graph<f64>, out: Var| -> Result<Var> {
        let shape = g.shape(out).to_vec();
        let r = uniform(&mut SeededRng::derive(seed, "gradcheck-weights", 0, 0), &shape, -1.0, 1.0);
        let r = g.leaf(&r);
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_gradient_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad(true))).collect();
    let out = f(&mut g, &vars)?;
    let loss = weights(&mut g, out)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i])?;
        let numeric = finite_diff_grad(
            |probe| {
                let mut h = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| h.leaf(if j == i { probe } else { t }))
                    .collect();
                let out = f(&mut h, &vs)?;
                let l = weights(&mut h, out)?;
                Ok(h.item(l))
            },
            x,
            FD_STEP,
        )?;
        worst = worst.max(grad_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Same as [`check_fn`] for a module: gradients with respect to the input
/// and every parameter.
fn check_module<M: Module<f64> + Clone>(
    module: &M,
    input: &Tensor<f64>,
    forward: &dyn Fn(&M, &mut Graph<f64>, Var) -> Result<Var>,
    fault: Option<&str>,
    seed: u64,
) -> Result<f64> {
    let weights = |g: &mut Graph<f64>, out: Var| -> Result<Var> {
        let shape = g.shape(out).to_vec();
        if shape.is_empty() {
            return Ok(out);
        }
        let r = uniform(&mut SeededRng::derive(seed, "gradcheck-weights", 0, 0), &shape, -1.0, 1.0);
        let r = g.leaf(&r);
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    let eval = |m: &M, x: &Tensor<f64>| -> Result<f64> {
        let mut h = Graph::new();
        let xv = h.leaf(x);
        let out = forward(m, &mut h, xv)?;
        let l = weights(&mut h, out)?;
        Ok(h.item(l))
    };
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_gradient_fault(op);
    }
    let xv = g.leaf(&input.clone().with_grad(true));
    let out = forward(module, &mut g, xv)?;
    let loss = weights(&mut g, out)?;
    g.backward(loss)?;
    let mut worst = grad_error(&g.grad(xv)?, &finite_diff_grad(|p| eval(module, p), input, FD_STEP)?);
    let params: Vec<(usize, String, Tensor<f64>)> = module
        .parameters()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, p)| (i, p.name.clone(), p.tensor.clone()))
        .collect();
    for (index, name, value) in params {
        let analytic = g
            .param_grad(&name)
            .ok_or_else(|| crate::Error::Graph(format!("parameter `{name}` never reached the graph")))?;
        let numeric = finite_diff_grad(
            |probe| {
                let mut m = module.clone();
                let mut k = 0;
                m.visit_mut(&mut |p| {
                    if k == index {
                        p.tensor = probe.clone();
                    }
                    k += 1;
                });
                eval(&m, input)
            },
            &value,
            FD_STEP,
        )?;
        worst = worst.max(grad_error(&analytic, &numeric));
    }
    Ok(worst)
}

type PrimitiveCase = (&'static str, fn(&mut SeededRng) -> Vec<Tensor<f64>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn pair(rng: &mut SeededRng) -> Vec<Tensor<f64>> {
    vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)]
}

fn single(rng: &mut SeededRng) -> Vec<Tensor<f64>> {
    vec![uniform(rng, &[2, 3, 4], -2.0, 2.0)]
}

fn positive(rng: &mut SeededRng) -> Vec<Tensor<f64>> {
    vec![uniform(rng, &[3, 4], 0.5, 3.0)]
}

fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        ("add (broadcast)", |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)], |g, v| g.add(v[0], v[1])),
        ("sub", pair, |g, v| g.sub(v[0], v[1])),
        ("mul", pair, |g, v| g.mul(v[0], v[1])),
        ("div", |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 1], 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
        ("neg", single, |g, v| g.neg(v[0])),
        ("scale", single, |g, v| g.scale(v[0], -1.7)),
        ("add_scalar", single, |g, v| g.add_scalar(v[0], 0.3)),
        ("exp", single, |g, v| g.exp(v[0])),
        ("log", positive, |g, v| g.log(v[0])),
        ("sqrt", positive, |g, v| g.sqrt(v[0])),
        ("pow", positive, |g, v| g.powf(v[0], 2.5)),
        ("gelu", single, |g, v| g.gelu(v[0])),
        ("sum", single, |g, v| g.sum(v[0])),
        ("mean", single, |g, v| g.mean(v[0])),
        ("sum_axis", single, |g, v| g.sum_axis(v[0], 1)),
        ("mean_axis", single, |g, v| g.mean_axis(v[0], 2)),
        ("max_axis", single, |g, v| g.max_axis(v[0], 2)),
        ("reshape", single, |g, v| g.reshape(v[0], &[6, 4])),
        ("permute", single, |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose", single, |g, v| g.transpose(v[0], 1, 2)),
        ("slice", single, |g, v| g.slice(v[0], 2, 1, 2)),
        ("concat", |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("broadcast_to", |r| vec![uniform(r, &[1, 4], -1.0, 1.0)], |g, v| g.broadcast_to(v[0], &[3, 4])),
        ("gather", pair, |g, v| g.gather(v[0], &[3, 0, 2])),
        ("select", single, |g, v| g.select(v[0], 2, &[3, 1, 1])),
        (
            "matmul (batched)",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        ("softmax", single, |g, v| g.softmax(v[0])),
        ("log_softmax", single, |g, v| g.log_softmax(v[0])),
        ("normalize", single, |g, v| g.normalize(v[0], 1e-5)),
    ]
}

fn tiny_vit(seed: u64) -> Result<(ViTModel<f64>, Vec<Tensor<f64>>)> {
    let cfg = ViTConfig {
        image_c: 3,
        image_h: 16,
        image_w: 16,
        patch_size: 4,
        embed_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        expansion: 12,
        dropout: 0.1,
        ..ViTConfig::default()
    };
    let pretext = PretextConfig::default();
    let grid = pretext.grid(16, 16, 4)?;
    let mut rng = SeededRng::derive(seed, "gradcheck-vit", 0, 0);
    let mut model = ViTModel::for_pretraining(&cfg, grid.patch_grid(), &mut rng)?;
    // Output layers start at zero, which would hide every upstream
    // gradient; check at a generic point instead.
    model.visit_mut(&mut |p| {
        if p.name.contains("fc2.weight") {
            p.tensor = uniform(&mut rng, p.tensor.shape(), -0.3, 0.3);
        }
    });
    let images = vec![uniform(&mut rng, &[3, 16, 16], -1.0, 1.0)];
    Ok((model, images))
}

/// Every gradient check, each over [`GRAD_INSTANCES`] random instances.
/// With `fault` set, that op's backward is deliberately perturbed.
pub fn gradient_suite(fault: Option<&str>) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut record = |name: &str, errors: Vec<f64>| {
        out.push(GradCheck {
            name: name.to_string(),
            instances: errors.len(),
            max_rel_error: errors.into_iter().fold(0.0, f64::max),
        });
    };
    for (ci, (name, make, f)) in primitive_cases().into_iter().enumerate() {
        let errors = (0..GRAD_INSTANCES as u64)
            .map(|s| {
                let mut rng = SeededRng::derive(s, "gradcheck", ci as u64, 0);
                check_fn(&make(&mut rng), &f, fault, s)
            })
            .collect::<Result<Vec<_>>>()?;
        record(name, errors);
    }

    let seeds = 0..GRAD_INSTANCES as u64;
    let input = |s: u64, shape: &[usize]| uniform(&mut SeededRng::derive(s, "gradcheck-input", 0, 0), shape, -1.5, 1.5);
    let init = |s: u64| SeededRng::derive(s, "gradcheck-init", 0, 0);

    let errs = seeds
        .clone()
        .map(|s| check_module(&Linear::new("lin", 5, 3, &mut init(s)), &input(s, &[2, 4, 5]), &|m, g, x| m.forward(g, x), fault, s))
        .collect::<Result<Vec<_>>>()?;
    record("linear", errs);

    let errs = seeds
        .clone()
        .map(|s| {
            let mut ln = LayerNorm::new("ln", 6);
            let mut rng = init(s);
            ln.visit_mut(&mut |p| p.tensor = uniform(&mut rng, p.tensor.shape(), 0.5, 1.5));
            check_module(&ln, &input(s, &[3, 6]), &|m, g, x| m.forward(g, x), fault, s)
        })
        .collect::<Result<Vec<_>>>()?;
    record("layernorm", errs);

    let errs = seeds
        .clone()
        .map(|s| check_module(&Mlp::new("mlp", 4, 6, 3, &mut init(s)), &input(s, &[5, 4]), &|m, g, x| m.forward(g, x), fault, s))
        .collect::<Result<Vec<_>>>()?;
    record("gelu mlp", errs);

    let errs = seeds
        .clone()
        .map(|s| {
            let ff = FeedForward::new("ff", 4, 8, 0.3, &mut init(s));
            check_module(&ff, &input(s, &[2, 3, 4]), &|m, g, x| m.forward(g, x, &mut ForwardCtx::eval()), fault, s)
        })
        .collect::<Result<Vec<_>>>()?;
    record("dropout off (feed-forward, eval)", errs);

    let errs = seeds
        .clone()
        .map(|s| {
            // Fixed mask: a fresh context with the same stream every call.
            let x = input(s, &[4, 6]);
            check_fn(
                &[x],
                &|g, v| dropout(g, v[0], 0.5, &mut ForwardCtx::train(SeededRng::new(s, 7))),
                fault,
                s,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    record("dropout (fixed mask)", errs);

    let errs = seeds
        .clone()
        .map(|s| {
            let attn = MultiHeadSelfAttention::new("attn", 8, 2, 0.0, &mut init(s))?;
            check_module(&attn, &input(s, &[2, 5, 8]), &|m, g, x| m.forward(g, x, &mut ForwardCtx::eval(), 1), fault, s)
        })
        .collect::<Result<Vec<_>>>()?;
    record("multi-head self-attention", errs);

    let errs = seeds
        .clone()
        .map(|s| {
            let block = EncoderBlock::new("blk", 1, 8, 2, 12, 0.1, &mut init(s))?;
            check_module(&block, &input(s, &[2, 4, 8]), &|m, g, x| m.forward(g, x, &mut ForwardCtx::eval()), fault, s)
        })
        .collect::<Result<Vec<_>>>()?;
    record("encoder block", errs);

    let errs = seeds
        .clone()
        .map(|s| {
            let labels: Vec<usize> = (0..4).map(|i| (i + s as usize) % 5).collect();
            check_fn(&[input(s, &[4, 5])], &|g, v| softmax_cross_entropy(g, v[0], &labels), fault, s)
        })
        .collect::<Result<Vec<_>>>()?;
    record("softmax cross-entropy", errs);

    let errs = seeds
        .map(|s| {
            let (model, images) = tiny_vit(s)?;
            let batch = assemble_pretext_batch(&images, &PretextConfig::default().grid(16, 16, 4)?, &SeededRng::new(s, 1), &PretextFlags::default())?;
            // Pixels are data, not parameters: a dummy input keeps the
            // check on the weights only.
            check_module(
                &model,
                &Tensor::zeros(&[1]),
                &|m, g, _x| {
                    let out = m.forward(g, &batch.images, Mode::Pretrain, &mut ForwardCtx::eval())?;
                    Ok(patchrot_loss(g, out.cls_logits, out.patch_logits, &batch, LossReduction::Mean)?.total)
                },
                fault,
                s,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    record("full ViT + pretext loss", errs);
    Ok(out)
}

/// One line of the self-test report.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn line(name: &str, passed: bool, detail: String) -> SelfTestLine {
    SelfTestLine {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Quarter-turn oracles on random images: the group law of Z₄ and the
/// hand-computed 2×2 case.
pub fn rotation_oracles(n_images: usize, seed: u64) -> Result<bool> {
    let m = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])?;
    let expected: [[f64; 4]; 4] = [[1., 2., 3., 4.], [2., 4., 1., 3.], [4., 3., 2., 1.], [3., 1., 4., 2.]];
    for (k, e) in expected.iter().enumerate() {
        if rotate_quarter(&m, k)?.data() != e {
            return Ok(false);
        }
    }
    let mut rng = SeededRng::derive(seed, "rotation-oracle", 0, 0);
    for _ in 0..n_images {
        let h = 1 + rng.below(6);
        let w = 1 + rng.below(6);
        let x: Tensor<f64> = rng.draw(Distribution::UniformReal, &[2, h, w])?;
        if rotate_quarter(&x, 0)? != x {
            return Ok(false);
        }
        let (a, b) = (rng.below(4), rng.below(4));
        if rotate_quarter(&rotate_quarter(&x, a)?, b)? != rotate_quarter(&x, (a + b) % 4)? {
            return Ok(false);
        }
        let mut y = x.clone();
        for _ in 0..4 {
            y = rotate_quarter(&y, 1)?;
        }
        if y != x {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Reduced-geometry table and tokenisation counts.
pub fn geometry_oracles() -> Result<bool> {
    let a = compute_reduced_geometry(32, 32, 4, 1)?;
    let b = compute_reduced_geometry(64, 64, 8, 2)?;
    let tokens = tokenize(&Tensor::<f64>::zeros(&[3, 32, 32]), 4)?;
    Ok((a.h_pr, a.w_pr, a.n_pr) == (24, 24, 36) && (b.h_pr, b.w_pr, b.n_pr) == (48, 48, 36) && tokens.shape() == [64, 48])
}

/// Pretext loss of an untrained default-sized model on random images:
/// `(total, image term, patch term)`.
pub fn loss_at_init(seed: u64) -> Result<(f64, f64, f64)> {
    let cfg = ViTConfig::default();
    let pretext = PretextConfig::default();
    let grid = pretext.grid(32, 32, 4)?;
    let mut rng = SeededRng::derive(seed, "loss-at-init", 0, 0);
    let model = ViTModel::<f32>::for_pretraining(&cfg, grid.patch_grid(), &mut rng)?;
    let images: Vec<Tensor<f32>> = (0..4)
        .map(|_| {
            let x: Tensor<f64> = rng.draw(Distribution::Normal { mean: 0.0, std: 1.0 }, &[3, 32, 32]).expect("shape");
            x.cast()
        })
        .collect();
    let batch = assemble_pretext_batch(&images, &grid, &SeededRng::new(seed, 3), &pretext.flags)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.images, Mode::Pretrain, &mut ForwardCtx::eval())?;
    let loss = patchrot_loss(&mut g, out.cls_logits, out.patch_logits, &batch, LossReduction::Mean)?;
    let get = |v: Option<Var>| v.map_or(f64::NAN, |v| f64::from(g.item(v)));
    Ok((f64::from(g.item(loss.total)), get(loss.image_term), get(loss.patch_term)))
}

/// The full self-test: gradient checks (plus a deliberately faulty backward
/// that must be caught), rotation and geometry oracles, loss at init. With
/// `fault` set, that op's backward is perturbed throughout, so the checks
/// that depend on it fail by name. Output is deterministic.
pub fn run_selftest(fault: Option<&str>) -> Result<Vec<SelfTestLine>> {
    if let Some(op) = fault {
        if !OP_NAMES.contains(&op) {
            return Err(crate::Error::Config(format!("unknown op `{op}`; expected one of {}", OP_NAMES.join(", "))));
        }
    }
    let mut lines = Vec::new();
    for c in gradient_suite(fault)? {
        lines.push(line(
            &format!("grad {}", c.name),
            c.passed(),
            format!("max rel err {:.2e} over {} instances", c.max_rel_error, c.instances),
        ));
    }
    let faulty = gradient_suite(Some("matmul"))?;
    let caught = faulty.iter().filter(|c| c.name == "linear" || c.name == "matmul (batched)").all(|c| !c.passed());
    lines.push(line("fault injection detected", caught, "matmul backward scaled by 1.01".into()));
    lines.push(line("rotation oracles", rotation_oracles(200, 0)?, "Z4 action on 200 random images".into()));
    lines.push(line("reduced geometry", geometry_oracles()?, "(32,32,4,1) and (64,64,8,2)".into()));
    let (total, img, patch) = loss_at_init(0)?;
    let ln4 = 4f64.ln();
    lines.push(line(
        "loss at init",
        (total - 2.0 * ln4).abs() <= 0.1 && (img - ln4).abs() <= 0.05 && (patch - ln4).abs() <= 0.05,
        format!("total {total:.4}, image {img:.4}, patch {patch:.4}"),
    ));
    Ok(lines)
}
