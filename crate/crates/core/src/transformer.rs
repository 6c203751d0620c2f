//! Pre-norm causal transformer block shared by the tokenizer and the
//! recommender.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::rng::CoreRng;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Keys and values of already-encoded rows for one block.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerKv {
    pub rows: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

pub(crate) fn add_block(
    set: &mut ParamSet,
    prefix: &str,
    shape: BlockShape,
    depth: usize,
    rng: &mut CoreRng,
) -> BlockLayout {
    let d = shape.dim;
    let proj_std = 1.0 / math::sqrt(d as f64);
    let out_std = proj_std / math::sqrt(2.0 * depth as f64);
    let mut p = |name: &str, t: Tensor| set.add(format!("{prefix}.{name}"), t);
    BlockLayout {
        norm1: p("norm1", Tensor::filled(alloc::vec![1, d], 1.0)),
        wq: p("wq", Tensor::randn(alloc::vec![d, d], proj_std, rng)),
        wk: p("wk", Tensor::randn(alloc::vec![d, d], proj_std, rng)),
        wv: p("wv", Tensor::randn(alloc::vec![d, d], proj_std, rng)),
        wo: p("wo", Tensor::randn(alloc::vec![d, d], out_std, rng)),
        norm2: p("norm2", Tensor::filled(alloc::vec![1, d], 1.0)),
        w1: p("w1", Tensor::randn(alloc::vec![d, shape.ff], proj_std, rng)),
        b1: p("b1", Tensor::zeros(alloc::vec![1, shape.ff])),
        w2: p("w2", Tensor::randn(alloc::vec![shape.ff, d], out_std / math::sqrt(shape.ff as f64 / d as f64), rng)),
        b2: p("b2", Tensor::zeros(alloc::vec![1, d])),
    }
}

/// Runs one block over rows `x`. With `past`, the rows are a continuation
/// of previously encoded rows and attend to them as well.
///
/// Returns the block output plus this call's key and value nodes.
pub(crate) fn block_forward(
    g: &mut Graph,
    set: &ParamSet,
    layout: &BlockLayout,
    heads: usize,
    x: NodeId,
    past: Option<&LayerKv>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let n1 = g.param(set, layout.norm1);
    let h = g.rms_norm(x, n1)?;
    let wq = g.param(set, layout.wq);
    let wk = g.param(set, layout.wk);
    let wv = g.param(set, layout.wv);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let (keys, values, offset) = match past {
        None => (k, v, 0),
        Some(kv) => {
            let d = g.dims(k).1;
            let pk = g.input(kv.rows, d, kv.keys.clone())?;
            let pv = g.input(kv.rows, d, kv.values.clone())?;
            (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?, kv.rows)
        }
    };
    let att = g.attention(q, keys, values, heads, Some(offset))?;
    let wo = g.param(set, layout.wo);
    let proj = g.matmul(att, wo)?;
    let x = g.add(x, proj)?;
    let n2 = g.param(set, layout.norm2);
    let h = g.rms_norm(x, n2)?;
    let w1 = g.param(set, layout.w1);
    let b1 = g.param(set, layout.b1);
    let w2 = g.param(set, layout.w2);
    let b2 = g.param(set, layout.b2);
    let f = g.linear(h, w1, b1)?;
    let f = g.gelu(f);
    let f = g.linear(f, w2, b2)?;
    let out = g.add(x, f)?;
    Ok((out, k, v))
}
