//! Central finite-difference validation of analytic gradients, and a
//! suite covering every graph primitive and the composed training losses.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::csa::{CsaConfig, CsaModel};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::recommender::{RecommenderConfig, RecommenderModel};
use crate::rng::{self, CoreRng};
use crate::sid::{CodebookSpec, SidSequence};
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::{kl_regularizer_node, TokenizerConfig, TokenizerModel};

/// Loss value and analytic gradient (one buffer per parameter of `set`).
pub fn analytic_gradients<F>(set: &ParamSet, mut build: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnMut(&ParamSet, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(set, &mut g)?;
    g.backward(loss)?;
    let value = g.scalar(loss);
    let grads = (0..set.len())
        .map(|i| match g.param_grad(set.tag(), i) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; set.get(i).value.len()],
        })
        .collect();
    Ok((value, grads))
}

/// Compares `analytic` against central differences on up to `samples`
/// randomly chosen coordinates (all coordinates when the set is smaller).
///
/// Returns the maximum relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    set: &mut ParamSet,
    analytic: &[Vec<f64>],
    eps: f64,
    samples: usize,
    seed: u64,
    loss: F,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    finite_diff_check_masked(set, analytic, eps, samples, seed, |_, _| true, loss)
}

/// [`finite_diff_check`] restricted to coordinates `(param, entry)` for
/// which `include` holds, e.g. to leave out entries that also reach the
/// loss through a stop-gradient path.
pub fn finite_diff_check_masked<I, F>(
    set: &mut ParamSet,
    analytic: &[Vec<f64>],
    eps: f64,
    samples: usize,
    seed: u64,
    include: I,
    mut loss: F,
) -> Result<f64>
where
    I: Fn(usize, usize) -> bool,
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            if include(p, i) {
                coords.push((p, i));
            }
        }
    }
    if coords.len() > samples {
        let mut r = rng::seeded(seed);
        let mut picked = Vec::with_capacity(samples);
        for _ in 0..samples {
            let j = r.gen_range(0..coords.len());
            picked.push(coords.swap_remove(j));
        }
        coords = picked;
    }
    let mut worst: f64 = 0.0;
    for (p, i) in coords {
        let orig = set.get(p).value.data()[i];
        set.get_mut(p).value.data_mut()[i] = orig + eps;
        let plus = loss(set)?;
        set.get_mut(p).value.data_mut()[i] = orig - eps;
        let minus = loss(set)?;
        set.get_mut(p).value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[p][i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Analytic-vs-numeric check for a graph builder in one call.
pub fn check_graph<F>(set: &mut ParamSet, eps: f64, samples: usize, seed: u64, mut build: F) -> Result<f64>
where
    F: FnMut(&ParamSet, &mut Graph) -> Result<NodeId>,
{
    let (_, analytic) = analytic_gradients(set, &mut build)?;
    finite_diff_check(set, &analytic, eps, samples, seed, |s| {
        let mut g = Graph::new();
        let l = build(s, &mut g)?;
        Ok(g.scalar(l))
    })
}

/// Outcome of one entry of [`suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Step size and coordinate budget used by [`suite`].
pub const SUITE_EPS: f64 = 1e-4;
const SUITE_SAMPLES: usize = 60;
/// Largest acceptable relative error of an analytic gradient.
pub const TOLERANCE: f64 = 1e-3;

fn random_set(r: &mut CoreRng, shapes: &[(usize, usize)], std: f64) -> ParamSet {
    let mut set = ParamSet::new(0);
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        set.add(alloc::format!("p{i}"), Tensor::randn(vec![rows, cols], std, r));
    }
    set
}

fn random_input(g: &mut Graph, r: &mut CoreRng, rows: usize, cols: usize) -> Result<NodeId> {
    let data = (0..rows * cols).map(|_| rng::normal(r)).collect();
    g.input(rows, cols, data)
}

/// Reduces any node to a scalar through a fixed random projection and a
/// curvature, so every output entry contributes with a distinct weight.
fn scalarise(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let (_, cols) = g.dims(x);
    let mut r = rng::seeded(seed);
    let proj = random_input(g, &mut r, cols, 3)?;
    let y = g.matmul(x, proj)?;
    let y = g.gelu(y);
    Ok(g.sum(y))
}

fn jitter(set: &mut ParamSet, std: f64, r: &mut CoreRng) {
    for p in set.iter_mut() {
        for v in p.value.data_mut() {
            *v += std * rng::normal(r);
        }
    }
}

/// Analytic-vs-numeric check for a model whose parameters live inside it.
fn check_model<M, B>(model: &M, params: fn(&M) -> &ParamSet, params_mut: fn(&mut M) -> &mut ParamSet, seed: u64, build: B) -> Result<f64>
where
    M: Clone,
    B: Fn(&M, &mut Graph) -> Result<NodeId>,
{
    check_model_masked(model, params, params_mut, seed, |_, _| true, build)
}

fn check_model_masked<M, I, B>(
    model: &M,
    params: fn(&M) -> &ParamSet,
    params_mut: fn(&mut M) -> &mut ParamSet,
    seed: u64,
    include: I,
    build: B,
) -> Result<f64>
where
    M: Clone,
    I: Fn(usize, usize) -> bool,
    B: Fn(&M, &mut Graph) -> Result<NodeId>,
{
    let set = params(model);
    let mut g = Graph::new();
    let loss = build(model, &mut g)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = (0..set.len())
        .map(|i| match g.param_grad(set.tag(), i) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; set.get(i).value.len()],
        })
        .collect();
    let mut probe = set.clone();
    let mut scratch = model.clone();
    finite_diff_check_masked(&mut probe, &analytic, SUITE_EPS, SUITE_SAMPLES, seed, include, |s| {
        params_mut(&mut scratch).copy_values_from(s)?;
        let mut g = Graph::new();
        let l = build(&scratch, &mut g)?;
        Ok(g.scalar(l))
    })
}

type Primitive = fn(&ParamSet, &mut Graph, &mut CoreRng) -> Result<NodeId>;

/// Every primitive and the four composed training losses, on inputs drawn
/// from `seed`. Returns the maximum relative error of each.
pub fn suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let mut r = rng::seeded(seed);
    // (name, parameter shapes, graph)
    let primitives: [(&'static str, &[(usize, usize)], Primitive); 17] = [
        ("embed_lookup", &[(5, 4)], |s, g, _| {
            let t = g.param(s, 0);
            g.embed_lookup(t, &[3, 0, 3, 4])
        }),
        ("matmul", &[(3, 4), (4, 2)], |s, g, _| {
            let (a, b) = (g.param(s, 0), g.param(s, 1));
            g.matmul(a, b)
        }),
        ("add", &[(3, 4), (3, 4)], |s, g, _| {
            let (a, b) = (g.param(s, 0), g.param(s, 1));
            g.add(a, b)
        }),
        ("add_row", &[(3, 4), (1, 4)], |s, g, _| {
            let (a, b) = (g.param(s, 0), g.param(s, 1));
            g.add_row(a, b)
        }),
        ("scale", &[(3, 4)], |s, g, _| {
            let a = g.param(s, 0);
            Ok(g.scale(a, -1.7))
        }),
        ("linear", &[(3, 4), (4, 5), (1, 5)], |s, g, _| {
            let (x, w, b) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
            g.linear(x, w, b)
        }),
        ("gelu", &[(3, 4)], |s, g, _| {
            let a = g.param(s, 0);
            Ok(g.gelu(a))
        }),
        ("rms_norm", &[(3, 4), (1, 4)], |s, g, _| {
            let (x, gain) = (g.param(s, 0), g.param(s, 1));
            g.rms_norm(x, gain)
        }),
        ("concat_cols", &[(3, 2), (3, 3)], |s, g, _| {
            let (a, b) = (g.param(s, 0), g.param(s, 1));
            g.concat_cols(&[a, b])
        }),
        ("concat_rows", &[(2, 4), (3, 4)], |s, g, _| {
            let (a, b) = (g.param(s, 0), g.param(s, 1));
            g.concat_rows(&[a, b])
        }),
        ("rows", &[(5, 4)], |s, g, _| {
            let a = g.param(s, 0);
            g.rows(a, 1, 3)
        }),
        ("mean", &[(3, 4)], |s, g, _| {
            let a = g.param(s, 0);
            let m = g.mean(a);
            Ok(g.scale(m, 3.0))
        }),
        ("weighted_sum", &[(1, 1), (1, 1), (1, 1)], |s, g, _| {
            let (a, b, c) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
            Ok(g.weighted_sum(&[(a, 0.3), (b, -2.0), (c, 0.0)])?.expect("nonzero weights"))
        }),
        ("attention_causal", &[(4, 6), (5, 6), (5, 6)], |s, g, _| {
            let (q, k, v) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
            g.attention(q, k, v, 2, Some(1))
        }),
        ("attention_pool", &[(1, 4), (5, 4), (5, 4)], |s, g, _| {
            let (q, k, v) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
            g.attention_pool(q, k, v)
        }),
        ("cross_entropy", &[(3, 5)], |s, g, r| {
            let a = g.param(s, 0);
            let t: Vec<usize> = (0..3).map(|_| r.gen_range(0..5)).collect();
            g.cross_entropy(a, &t)
        }),
        ("sigmoid_bce", &[(2, 3)], |s, g, r| {
            let a = g.param(s, 0);
            let labels: Vec<f64> = (0..6).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            g.sigmoid_bce(a, &labels)
        }),
    ];
    for (i, (name, shapes, op)) in primitives.iter().enumerate() {
        let mut set = random_set(&mut r, shapes, 1.0);
        let op_seed = r.gen::<u64>();
        let proj_seed = rng::split(seed, 100 + i as u64);
        let err = check_graph(&mut set, SUITE_EPS, SUITE_SAMPLES, seed, |s, g| {
            let mut local = rng::seeded(op_seed);
            let y = op(s, g, &mut local)?;
            if g.dims(y) == (1, 1) {
                Ok(y)
            } else {
                scalarise(g, y, proj_seed)
            }
        })?;
        out.push(GradReport { name, max_rel_err: err });
    }
    // kl_ratio: gradient flows through the live cross-entropies.
    {
        let mut set = random_set(&mut r, &[(3, 4)], 1.0);
        let targets = [1usize, 3, 0];
        let ref_logp: Vec<f64> = (0..3).map(|_| -0.2 - r.gen::<f64>() * 2.0).collect();
        let err = check_graph(&mut set, SUITE_EPS, SUITE_SAMPLES, seed, |s, g| {
            let a = g.param(s, 0);
            let ce = g.cross_entropy(a, &targets)?;
            g.kl_ratio(ce, &ref_logp)
        })?;
        out.push(GradReport { name: "kl_ratio", max_rel_err: err });
    }

    let spec = CodebookSpec::new(3, 5, 4)?;
    let sid = |r: &mut CoreRng| SidSequence::new((0..3).map(|_| r.gen_range(0..5u16)).collect());
    let target = sid(&mut r);
    let history: Vec<SidSequence> = (0..3).map(|_| sid(&mut r)).collect();

    let rcfg = RecommenderConfig { dim: 8, heads: 2, ff: 12, blocks: 1, n_max: 4, zero_output: false };
    let mut rec = RecommenderModel::new(spec, rcfg, 0, r.gen())?;
    jitter(rec.params_mut(), 0.1, &mut r);
    let err = check_model(&rec, RecommenderModel::params, RecommenderModel::params_mut, seed, |m, g| {
        m.loss_node(g, &history, &target)
    })?;
    out.push(GradReport { name: "user_loss", max_rel_err: err });

    let tcfg = TokenizerConfig { input_dim: 6, dim: 8, heads: 2, ff: 12, blocks: 1, zero_output: false };
    let x: Vec<f64> = (0..6).map(|_| rng::normal(&mut r)).collect();
    let mut tok = TokenizerModel::new(spec, tcfg, 1, r.gen())?;
    jitter(tok.params_mut(), 0.1, &mut r);
    let err = check_model(&tok, TokenizerModel::params, TokenizerModel::params_mut, seed, |m, g| {
        let xn = g.input(1, x.len(), x.clone())?;
        m.loss_node(g, xn, &target)
    })?;
    out.push(GradReport { name: "item_loss", max_rel_err: err });

    let mut reference = TokenizerModel::new(spec, tcfg, 2, r.gen())?;
    jitter(reference.params_mut(), 0.1, &mut r);
    let err = check_model(&tok, TokenizerModel::params, TokenizerModel::params_mut, seed, |m, g| {
        let xn = g.input(1, x.len(), x.clone())?;
        kl_regularizer_node(g, m, &reference, xn, &target)
    })?;
    out.push(GradReport { name: "kl_regularizer", max_rel_err: err });

    let ccfg = CsaConfig { content_dim: 4, collab_dim: 3, hidden: 5, behaviors: 3, collab_init_std: 0.5, zero_output: false };
    let content: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng::normal(&mut r)).collect()).collect();
    let mut csa = CsaModel::new(ccfg, &content, 3, r.gen())?;
    jitter(csa.params_mut(), 0.1, &mut r);
    let labels = [true, false, true];
    // History representations are detached, so the history items'
    // collaborative rows are constants to the analytic gradient.
    let history = [0u32, 4, 2];
    let collab = csa.collab_param();
    let width = ccfg.collab_dim;
    let err = check_model_masked(
        &csa,
        CsaModel::params,
        CsaModel::params_mut,
        seed,
        |p, i| p != collab || !history.contains(&((i / width) as u32)),
        |m, g| m.loss_node(g, &history, 5, &labels),
    )?;
    let cold = check_model(&csa, CsaModel::params, CsaModel::params_mut, seed, |m, g| m.loss_node(g, &[], 1, &labels))?;
    out.push(GradReport { name: "xtr_loss", max_rel_err: err.max(cold) });
    Ok(out)
}
