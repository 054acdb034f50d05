//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for every input.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Per input: `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`
    /// with L2 norms over the whole tensor.
    pub rel_err: Vec<f64>,
    pub evaluations: usize,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds the function under test on a fresh graph from the given inputs
/// and returns the scalar output.
pub trait Builder: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> Builder for F {}

fn eval(inputs: &[Tensor<f64>], f: &impl Builder) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return invalid("gradcheck", "builder must return a scalar");
    }
    Ok(g.scalar(out))
}

/// Compares reverse-mode gradients to central differences with step `h`.
pub fn check(inputs: &[Tensor<f64>], f: impl Builder, h: f64) -> Result<CheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut evaluations = 0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = eval(&probe, &f)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = eval(&probe, &f)?;
            probe[k].data_mut()[i] = x0;
            evaluations += 2;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        rel_err.push(if denom == 0.0 { 0.0 } else { diff.sqrt() / denom });
    }
    Ok(CheckReport { rel_err, evaluations })
}

/// Reduces a tensor-valued node to a scalar through a fixed weighting so
/// that every output element contributes a distinct gradient direction.
/// The weights must be drawn once, outside the builder.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if g.shape(out) != weights.shape() {
        return invalid("gradcheck", format!("weights {:?} for output {:?}", weights.shape(), g.shape(out)));
    }
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

/// Random values bounded away from zero in magnitude, for ops with a kink
/// at the origin.
pub fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type BoxBuilder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: BoxBuilder,
}

fn case(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

/// Output weights drawn for a tensor-valued op, applied via [`weighted_sum`].
fn proj<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Result of one primitive over several random shapes.
#[derive(Clone, Debug)]
pub struct PrimitiveResult {
    pub name: &'static str,
    pub shapes_checked: usize,
    pub max_rel_err: f64,
}

const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "scale", "add_scalar", "matmul", "matmul_t", "bmm", "bmm_t", "conv2d",
    "conv_transpose2d", "layernorm", "softmax", "gelu", "relu", "leaky_relu", "embedding",
    "index_select", "attention", "attention_masked", "mean_pool_masked", "cross_entropy",
    "bce_with_logits", "l1", "l2", "reshape", "permute", "concat", "sum_all", "mean_all",
    "mean_axis", "l2_normalize", "stop_gradient",
];

/// Names of every primitive covered by [`primitive_suite`].
pub fn primitive_names() -> &'static [&'static str] {
    PRIMITIVES
}

fn make_case<R: Rng + ?Sized>(name: &str, variant: usize, rng: &mut R) -> Case {
    let v = variant;
    match name {
        "add" | "sub" | "mul" => {
            let (sa, sb): (Vec<usize>, Vec<usize>) = match v {
                0 => (vec![3, 4], vec![3, 4]),
                1 => (vec![2, 3, 4], vec![4]),
                _ => (vec![2, 1, 3], vec![2, 4, 1]),
            };
            let out = crate::kernels::broadcast_shape(&sa, &sb).unwrap();
            let w = proj(&out, rng);
            let op = name.to_string();
            case(vec![randn(&sa, rng), randn(&sb, rng)], move |g, x| {
                let y = match op.as_str() {
                    "add" => g.add(x[0], x[1])?,
                    "sub" => g.sub(x[0], x[1])?,
                    _ => g.mul(x[0], x[1])?,
                };
                weighted_sum(g, y, &w)
            })
        }
        "scale" | "add_scalar" => {
            let s = [vec![5], vec![2, 3], vec![2, 2, 3]][v].clone();
            let w = proj(&s, rng);
            let c = rng.random_range(-2.0..2.0);
            let scale = name == "scale";
            case(vec![randn(&s, rng)], move |g, x| {
                let y = if scale { g.scale(x[0], c) } else { g.add_scalar(x[0], c) };
                let y = g.mul(y, y)?;
                weighted_sum(g, y, &w)
            })
        }
        "matmul" | "matmul_t" => {
            let (a, k, n) = [(vec![3, 4], 4, 5), (vec![2, 3, 2], 2, 3), (vec![1, 6], 6, 1)][v].clone();
            let t = name == "matmul_t";
            let bs = if t { vec![n, k] } else { vec![k, n] };
            let mut os = a.clone();
            *os.last_mut().unwrap() = n;
            let w = proj(&os, rng);
            case(vec![randn(&a, rng), randn(&bs, rng)], move |g, x| {
                let y = if t { g.matmul_t(x[0], x[1])? } else { g.matmul(x[0], x[1])? };
                weighted_sum(g, y, &w)
            })
        }
        "bmm" | "bmm_t" => {
            let (b, m, k, n) = [(2, 3, 4, 2), (3, 1, 2, 4), (1, 4, 3, 3)][v];
            let t = name == "bmm_t";
            let bs = if t { vec![b, n, k] } else { vec![b, k, n] };
            let w = proj(&[b, m, n], rng);
            case(vec![randn(&[b, m, k], rng), randn(&bs, rng)], move |g, x| {
                let y = g.bmm(x[0], x[1], t)?;
                weighted_sum(g, y, &w)
            })
        }
        "conv2d" => {
            let (xs, ws, stride, pad, bias) = [
                (vec![2, 3, 6, 5], vec![4, 3, 3, 3], (1, 1), (1, 1), true),
                (vec![1, 2, 8, 8], vec![3, 2, 4, 4], (2, 2), (1, 1), false),
                (vec![2, 2, 5, 7], vec![2, 2, 3, 2], (2, 1), (0, 1), true),
            ][v]
            .clone();
            let geom = crate::kernels::ConvGeom::new(xs[1], (xs[2], xs[3]), (ws[2], ws[3]), stride, pad).unwrap();
            let w = proj(&[xs[0], ws[0], geom.out_h, geom.out_w], rng);
            let mut inputs = vec![randn(&xs, rng), randn(&ws, rng)];
            if bias {
                inputs.push(randn(&[ws[0]], rng));
            }
            case(inputs, move |g, x| {
                let y = g.conv2d(x[0], x[1], x.get(2).copied(), stride, pad)?;
                weighted_sum(g, y, &w)
            })
        }
        "conv_transpose2d" => {
            let (xs, ws, stride, pad, bias) = [
                (vec![2, 3, 3, 4], vec![3, 2, 4, 4], (2, 2), (1, 1), true),
                (vec![1, 2, 4, 3], vec![2, 3, 3, 3], (1, 1), (1, 1), false),
                (vec![2, 2, 3, 5], vec![2, 2, 4, 3], (2, 1), (1, 1), true),
            ][v]
            .clone();
            let oh = (xs[2] - 1) * stride.0 + ws[2] - 2 * pad.0;
            let ow = (xs[3] - 1) * stride.1 + ws[3] - 2 * pad.1;
            let w = proj(&[xs[0], ws[1], oh, ow], rng);
            let mut inputs = vec![randn(&xs, rng), randn(&ws, rng)];
            if bias {
                inputs.push(randn(&[ws[1]], rng));
            }
            case(inputs, move |g, x| {
                let y = g.conv_transpose2d(x[0], x[1], x.get(2).copied(), stride, pad)?;
                weighted_sum(g, y, &w)
            })
        }
        "layernorm" => {
            let s = [vec![3, 5], vec![2, 2, 4], vec![1, 7]][v].clone();
            let d = *s.last().unwrap();
            let w = proj(&s, rng);
            case(vec![randn(&s, rng), randn(&[d], rng), randn(&[d], rng)], move |g, x| {
                let y = g.layernorm(x[0], x[1], x[2], 1e-5)?;
                weighted_sum(g, y, &w)
            })
        }
        "softmax" | "gelu" | "l2_normalize" => {
            let s = [vec![3, 5], vec![2, 2, 4], vec![1, 7]][v].clone();
            let w = proj(&s, rng);
            let op = name.to_string();
            case(vec![randn(&s, rng)], move |g, x| {
                let y = match op.as_str() {
                    "softmax" => g.softmax(x[0]),
                    "gelu" => g.gelu(x[0]),
                    _ => g.l2_normalize(x[0], 1e-12),
                };
                weighted_sum(g, y, &w)
            })
        }
        "relu" | "leaky_relu" => {
            let s = [vec![3, 5], vec![2, 2, 4], vec![9]][v].clone();
            let w = proj(&s, rng);
            let leaky = name == "leaky_relu";
            case(vec![away_from_zero(&s, 0.05, 2.0, rng)], move |g, x| {
                let y = if leaky { g.leaky_relu(x[0], 0.2) } else { g.relu(x[0]) };
                weighted_sum(g, y, &w)
            })
        }
        "embedding" | "index_select" => {
            let (rows, d, ids, prefix) = [
                (6, 4, vec![0, 3, 3, 5], vec![2, 2]),
                (3, 5, vec![2, 1, 0, 1, 2, 2], vec![6]),
                (8, 2, vec![7, 0, 4], vec![1, 3]),
            ][v]
            .clone();
            let emb = name == "embedding";
            let mut os = if emb { prefix.clone() } else { vec![ids.len()] };
            os.push(d);
            let w = proj(&os, rng);
            case(vec![randn(&[rows, d], rng)], move |g, x| {
                let y = if emb { g.embedding(x[0], &ids, &prefix)? } else { g.index_select(x[0], &ids)? };
                weighted_sum(g, y, &w)
            })
        }
        "attention" | "attention_masked" => {
            let (b, heads, nq, nk, dh, dv) = [(1, 2, 3, 3, 4, 4), (2, 1, 2, 5, 3, 2), (2, 2, 4, 4, 2, 3)][v];
            let gcount = b * heads;
            let masked = name == "attention_masked";
            let mask: Option<Vec<bool>> = masked.then(|| {
                (0..b * nk).map(|i| i % nk == 0 || rng.random_bool(0.6)).collect()
            });
            let w = proj(&[gcount, nq, dv], rng);
            let inputs = vec![randn(&[gcount, nq, dh], rng), randn(&[gcount, nk, dh], rng), randn(&[gcount, nk, dv], rng)];
            case(inputs, move |g, x| {
                let y = g.attention(x[0], x[1], x[2], heads, mask.as_deref())?;
                weighted_sum(g, y, &w)
            })
        }
        "mean_pool_masked" => {
            let (b, n, d) = [(2, 3, 4), (3, 5, 2), (1, 4, 3)][v];
            let mut mask: Vec<bool> = (0..b * n).map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            if v == 1 {
                // One row with no valid positions.
                mask[n..2 * n].iter_mut().for_each(|m| *m = false);
            }
            let w = proj(&[b, d], rng);
            case(vec![randn(&[b, n, d], rng)], move |g, x| {
                let y = g.mean_pool_masked(x[0], &mask)?;
                weighted_sum(g, y, &w)
            })
        }
        "cross_entropy" => {
            let (n, k, eps) = [(4, 5, 0.1), (2, 3, 0.0), (6, 8, 0.1)][v];
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            case(vec![randn(&[n, k], rng)], move |g, x| g.cross_entropy(x[0], &targets, eps))
        }
        "bce_with_logits" => {
            let s = [vec![5], vec![2, 3], vec![4, 1]][v].clone();
            let n: usize = s.iter().product();
            let t: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            case(vec![randn(&s, rng)], move |g, x| g.bce_with_logits(x[0], &t))
        }
        "l1" | "l2" => {
            let s = [vec![5], vec![2, 3], vec![2, 2, 2]][v].clone();
            let a = randn(&s, rng);
            let off = away_from_zero(&s, 0.05, 1.0, rng);
            let b = Tensor::from_fn(&s, |i| a.data()[i] + off.data()[i]);
            let l1 = name == "l1";
            case(vec![a, b], move |g, x| if l1 { g.l1_loss(x[0], x[1]) } else { g.l2_loss(x[0], x[1]) })
        }
        "reshape" => {
            let (s, t) = [(vec![2, 6], vec![3, 4]), (vec![2, 3, 2], vec![12]), (vec![4], vec![2, 1, 2])][v].clone();
            let w = proj(&t, rng);
            case(vec![randn(&s, rng)], move |g, x| {
                let y = g.reshape(x[0], &t)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, &w)
            })
        }
        "permute" => {
            let (s, p) = [(vec![2, 3], vec![1, 0]), (vec![2, 3, 4], vec![2, 0, 1]), (vec![2, 1, 3, 2], vec![0, 2, 1, 3])][v].clone();
            let os: Vec<usize> = p.iter().map(|&i| s[i]).collect();
            let w = proj(&os, rng);
            case(vec![randn(&s, rng)], move |g, x| {
                let y = g.permute(x[0], &p)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, &w)
            })
        }
        "concat" => {
            let (shapes, axis): (Vec<Vec<usize>>, usize) = [
                (vec![vec![2, 3], vec![2, 1]], 1),
                (vec![vec![1, 3], vec![2, 3], vec![1, 3]], 0),
                (vec![vec![2, 2, 2], vec![2, 3, 2]], 1),
            ][v]
            .clone();
            let mut os = shapes[0].clone();
            os[axis] = shapes.iter().map(|s| s[axis]).sum();
            let w = proj(&os, rng);
            let inputs = shapes.iter().map(|s| randn(s, rng)).collect();
            case(inputs, move |g, x| {
                let y = g.concat(x, axis)?;
                weighted_sum(g, y, &w)
            })
        }
        "sum_all" | "mean_all" => {
            let s = [vec![5], vec![2, 3], vec![2, 2, 2]][v].clone();
            let w = proj(&s, rng);
            let sum = name == "sum_all";
            case(vec![randn(&s, rng)], move |g, x| {
                let c = g.constant(w.clone());
                let y = g.mul(x[0], c)?;
                let y = g.mul(y, x[0])?;
                Ok(if sum { g.sum_all(y) } else { g.mean_all(y) })
            })
        }
        "mean_axis" => {
            let (s, axis, keep) = [(vec![3, 4], 0, false), (vec![2, 3, 4], 1, true), (vec![2, 5], 1, false)][v].clone();
            let mut os = s.clone();
            if keep {
                os[axis] = 1;
            } else {
                os.remove(axis);
            }
            let w = proj(&os, rng);
            case(vec![randn(&s, rng)], move |g, x| {
                let y = g.mul(x[0], x[0])?;
                let y = g.mean_axis(y, axis, keep)?;
                weighted_sum(g, y, &w)
            })
        }
        "stop_gradient" => {
            // f(x, y) = sum(sg(x) * y) + sum(y^2): d/dx must be exactly zero,
            // which central differences cannot see, so the check also
            // asserts the analytic zero separately.
            let s = [vec![4], vec![2, 3], vec![3, 1, 2]][v].clone();
            case(vec![randn(&s, rng), randn(&s, rng)], move |g, x| {
                let a = g.stop_gradient(x[0]);
                let p = g.mul(a, x[1])?;
                let q = g.mul(x[1], x[1])?;
                let s = g.add(p, q)?;
                Ok(g.sum_all(s))
            })
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Finite-difference comparison of every primitive on three shapes each,
/// with step 1e-4 in double precision.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveResult>> {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for &name in PRIMITIVES {
        let mut worst: f64 = 0.0;
        for variant in 0..3 {
            let c = make_case(name, variant, &mut rng);
            let mut rep = check(&c.inputs, &c.build, 1e-4)?;
            if name == "stop_gradient" {
                // The numeric derivative w.r.t. x is nonzero (x enters the
                // value); the analytic one must be exactly zero instead.
                let mut g = Graph::new();
                let vars: Vec<Var> = c.inputs.iter().map(|t| g.input(t.clone())).collect();
                let loss = (c.build)(&mut g, &vars)?;
                let grads = g.backward(loss)?;
                let leak = grads.get(vars[0]).map_or(0.0, |t| t.sq_norm());
                rep.rel_err[0] = if leak == 0.0 { 0.0 } else { f64::INFINITY };
            }
            worst = worst.max(rep.max_rel_err());
        }
        out.push(PrimitiveResult {
            name,
            shapes_checked: 3,
            max_rel_err: worst,
        });
    }
    Ok(out)
}
