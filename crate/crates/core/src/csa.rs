//! Collaborative signal alignment: a DIN-style multi-behaviour head that
//! trains per-item collaborative embeddings next to frozen content
//! features. History-side inputs are always detached.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::rng;
use crate::tensor::{ParamSet, SetTag, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsaConfig {
    pub content_dim: usize,
    pub collab_dim: usize,
    pub hidden: usize,
    pub behaviors: usize,
    /// Std of the initial collaborative embeddings (0 = all zero).
    pub collab_init_std: f64,
    /// Start with an all-zero output layer (probability 0.5 everywhere).
    pub zero_output: bool,
}

impl Default for CsaConfig {
    fn default() -> Self {
        Self { content_dim: 16, collab_dim: 16, hidden: 32, behaviors: 3, collab_init_std: 0.0, zero_output: true }
    }
}

impl CsaConfig {
    /// Width of `X_i = concat(content, collab)`.
    pub fn item_dim(&self) -> usize {
        self.content_dim + self.collab_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    collab: usize,
    no_history: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// One training sample for the head.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaSample {
    pub history: Vec<u32>,
    pub target: u32,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsaModel {
    config: CsaConfig,
    content: Vec<f64>,
    n_items: usize,
    params: ParamSet,
    layout: Layout,
}

impl CsaModel {
    /// `content` holds one frozen feature row per item, indexed by item id.
    pub fn new(config: CsaConfig, content: &[Vec<f64>], tag: SetTag, seed: u64) -> Result<Self> {
        if content.is_empty() {
            return Err(Error::Invalid("collaborative head needs at least one item".into()));
        }
        if config.behaviors == 0 || config.hidden == 0 || config.collab_dim == 0 {
            return Err(Error::Invalid("collaborative head sizes must be positive".into()));
        }
        let mut flat = Vec::with_capacity(content.len() * config.content_dim);
        for (i, row) in content.iter().enumerate() {
            if row.len() != config.content_dim {
                return Err(Error::Shape(alloc::format!(
                    "item {i} has {} content features, expected {}",
                    row.len(),
                    config.content_dim
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("content features of item {i}")));
            }
            flat.extend_from_slice(row);
        }
        let mut r = rng::seeded(seed);
        let mut set = ParamSet::new(tag);
        let n = content.len();
        let dx = config.item_dim();
        let collab = if config.collab_init_std > 0.0 {
            Tensor::randn(vec![n, config.collab_dim], config.collab_init_std, &mut r)
        } else {
            Tensor::zeros(vec![n, config.collab_dim])
        };
        let collab = set.add("collab", collab);
        let no_history = set.add("no_history", Tensor::randn(vec![1, dx], 0.1, &mut r));
        let w1 = set.add("w1", Tensor::randn(vec![2 * dx, config.hidden], 1.0 / math::sqrt(2.0 * dx as f64), &mut r));
        let b1 = set.add("b1", Tensor::zeros(vec![1, config.hidden]));
        let w2 = if config.zero_output {
            Tensor::zeros(vec![config.hidden, config.behaviors])
        } else {
            Tensor::randn(vec![config.hidden, config.behaviors], 1.0 / math::sqrt(config.hidden as f64), &mut r)
        };
        let w2 = set.add("w2", w2);
        let b2 = set.add("b2", Tensor::zeros(vec![1, config.behaviors]));
        let layout = Layout { collab, no_history, w1, b1, w2, b2 };
        Ok(Self { config, content: flat, n_items: n, params: set, layout })
    }

    pub fn config(&self) -> &CsaConfig {
        &self.config
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Index of the collaborative-embedding table within [`Self::params`].
    pub fn collab_param(&self) -> usize {
        self.layout.collab
    }

    fn check(&self, item: u32) -> Result<usize> {
        let i = item as usize;
        if i >= self.n_items {
            return Err(Error::UnknownItem(item));
        }
        Ok(i)
    }

    pub fn content(&self, item: u32) -> Result<&[f64]> {
        let i = self.check(item)?;
        let d = self.config.content_dim;
        Ok(&self.content[i * d..(i + 1) * d])
    }

    pub fn collab(&self, item: u32) -> Result<&[f64]> {
        let i = self.check(item)?;
        Ok(self.params.get(self.layout.collab).value.row(i))
    }

    /// Current `X_i = concat(content, collab)`.
    pub fn item_representation(&self, item: u32) -> Result<Vec<f64>> {
        let mut x = self.content(item)?.to_vec();
        x.extend_from_slice(self.collab(item)?);
        Ok(x)
    }

    /// `X_i` as a 1 x (d_c + d_x) node; the collaborative half is trainable.
    pub fn item_node(&self, g: &mut Graph, item: u32) -> Result<NodeId> {
        self.items_node(g, &[item])
    }

    /// Stacked `X_i` rows for several items.
    pub fn items_node(&self, g: &mut Graph, items: &[u32]) -> Result<NodeId> {
        let dc = self.config.content_dim;
        let mut content = Vec::with_capacity(items.len() * dc);
        let mut idx = Vec::with_capacity(items.len());
        for &it in items {
            content.extend_from_slice(self.content(it)?);
            idx.push(it as usize);
        }
        let c = g.input(items.len(), dc, content)?;
        let table = g.param(&self.params, self.layout.collab);
        let e = g.embed_lookup(table, &idx)?;
        g.concat_cols(&[c, e])
    }

    /// Behaviour logits (1 x |B|) for `target` given `history`.
    pub fn logits_node(&self, g: &mut Graph, history: &[u32], target: u32) -> Result<NodeId> {
        let xt = self.item_node(g, target)?;
        let pooled = if history.is_empty() {
            g.param(&self.params, self.layout.no_history)
        } else {
            let h = self.items_node(g, history)?;
            let h = g.stop_grad(h);
            g.attention_pool(xt, h, h)?
        };
        let z = g.concat_cols(&[pooled, xt])?;
        let w1 = g.param(&self.params, self.layout.w1);
        let b1 = g.param(&self.params, self.layout.b1);
        let w2 = g.param(&self.params, self.layout.w2);
        let b2 = g.param(&self.params, self.layout.b2);
        let hdn = g.linear(z, w1, b1)?;
        let hdn = g.gelu(hdn);
        g.linear(hdn, w2, b2)
    }

    /// Summed sigmoid BCE over behaviours for one sample.
    pub fn loss_node(&self, g: &mut Graph, history: &[u32], target: u32, labels: &[bool]) -> Result<NodeId> {
        if labels.len() != self.config.behaviors {
            return Err(Error::Shape(alloc::format!(
                "{} behaviour labels, expected {}",
                labels.len(),
                self.config.behaviors
            )));
        }
        let logits = self.logits_node(g, history, target)?;
        let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        g.sigmoid_bce(logits, &y)
    }

    /// Per-behaviour probabilities.
    pub fn predict_behaviors(&self, history: &[u32], target: u32) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let logits = self.logits_node(&mut g, history, target)?;
        Ok(g.value(logits).iter().map(|&z| math::sigmoid(z)).collect())
    }

    /// `L_xtr` summed over behaviours and samples.
    pub fn collaborative_loss(&self, batch: &[CsaSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty collaborative batch".into()));
        }
        let mut g = Graph::new();
        let mut total = 0.0;
        for s in batch {
            let l = self.loss_node(&mut g, &s.history, s.target, &s.labels)?;
            total += g.scalar(l);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamW;

    fn content(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| (0..4).map(|_| rng::normal(&mut r)).collect()).collect()
    }

    fn cfg() -> CsaConfig {
        CsaConfig { content_dim: 4, collab_dim: 4, hidden: 8, behaviors: 3, collab_init_std: 0.0, zero_output: true }
    }

    #[test]
    fn untrained_head_predicts_half() {
        let m = CsaModel::new(cfg(), &content(5, 1), 0, 2).unwrap();
        assert_eq!(m.predict_behaviors(&[1, 2], 0).unwrap(), vec![0.5; 3]);
        let p = m.predict_behaviors(&[], 3).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_logit_loss_is_ln2_per_label() {
        let c = CsaConfig { behaviors: 1, ..cfg() };
        let m = CsaModel::new(c, &content(2, 1), 0, 2).unwrap();
        let s = CsaSample { history: vec![], target: 1, labels: vec![true] };
        assert!((m.collaborative_loss(&[s]).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn representation_is_content_then_collab() {
        let cont = content(3, 4);
        let m = CsaModel::new(cfg(), &cont, 0, 2).unwrap();
        let x = m.item_representation(2).unwrap();
        assert_eq!(&x[..4], &cont[2][..]);
        assert_eq!(&x[4..], &[0.0; 4]);
        assert!(matches!(m.item_representation(3), Err(Error::UnknownItem(3))));
        assert!(m.predict_behaviors(&[7], 0).is_err());
    }

    #[test]
    fn history_receives_no_gradient() {
        let c = CsaConfig { collab_init_std: 0.3, zero_output: false, ..cfg() };
        let m = CsaModel::new(c, &content(5, 3), 0, 9).unwrap();
        let mut g = Graph::new();
        let l = m.loss_node(&mut g, &[1, 2, 3], 0, &[true, false, true]).unwrap();
        g.backward(l).unwrap();
        let grad = g.param_grad(0, m.collab_param()).unwrap();
        let d = c.collab_dim;
        assert!(grad[..d].iter().any(|v| *v != 0.0));
        assert!(grad[d..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn memorises_a_single_pair() {
        let c = CsaConfig { collab_init_std: 0.1, ..cfg() };
        let mut m = CsaModel::new(c, &content(4, 5), 0, 1).unwrap();
        let labels = vec![true, false, true];
        let opt = AdamW::new(0.01, 0.0);
        let before = m.content(2).unwrap().to_vec();
        for _ in 0..500 {
            let mut g = Graph::new();
            let l = m.loss_node(&mut g, &[0, 1], 2, &labels).unwrap();
            g.backward(l).unwrap();
            g.accumulate_into(m.params_mut());
            opt.step(m.params_mut()).unwrap();
        }
        let p = m.predict_behaviors(&[0, 1], 2).unwrap();
        for (pv, y) in p.iter().zip(&labels) {
            assert!((pv - if *y { 1.0 } else { 0.0 }).abs() < 0.05, "{p:?}");
        }
        assert_eq!(m.content(2).unwrap(), &before[..]);
    }
}
