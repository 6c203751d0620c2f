//! User-to-Token model: a decoder-only transformer that reads a user's
//! history (each item encoded by its SID tokens) and predicts the next
//! item's SID autoregressively.
//!
//! Row layout: `[START, h_1 .. h_n, c_1 .. c_{L-1}]`. The output at the last
//! history row (or START when the history is empty) predicts level 1; the
//! output at target row `c_l` predicts level `l + 1`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::index::{BeamIndex, ItemId};
use crate::math;
use crate::rng;
use crate::sid::{CodebookSpec, SidSequence};
use crate::tensor::{ParamSet, SetTag, Tensor};
use crate::tokenizer::rank_order;
use crate::transformer::{self, BlockLayout, BlockShape, LayerKv};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecommenderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub blocks: usize,
    /// Longest history fed to the model; older items are dropped.
    pub n_max: usize,
    /// Start with all-zero output heads (uniform predictions).
    pub zero_output: bool,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 2, ff: 128, blocks: 2, n_max: 50, zero_output: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    start: usize,
    token_emb: Vec<usize>,
    hist_pos: usize,
    tgt_pos: usize,
    blocks: Vec<BlockLayout>,
    final_norm: usize,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
}

/// Encoded history prefix: per-block keys/values plus the level-1
/// distribution. Reused across every candidate scored for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCache {
    layers: Vec<LayerKv>,
    first_logprobs: Vec<f64>,
}

impl PrefixCache {
    pub fn first_logprobs(&self) -> &[f64] {
        &self.first_logprobs
    }
}

/// Outcome of minimum-loss selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub sid: SidSequence,
    pub mean_loss: f64,
    pub token_losses: Vec<f64>,
}

/// Prefix trie over a set of SIDs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SidTrie {
    children: BTreeMap<Vec<u16>, Vec<u16>>,
    levels: usize,
}

impl SidTrie {
    pub fn new<'a>(sids: impl IntoIterator<Item = &'a SidSequence>) -> Self {
        let mut children: BTreeMap<Vec<u16>, Vec<u16>> = BTreeMap::new();
        let mut levels = 0;
        for sid in sids {
            let t = sid.tokens();
            levels = t.len();
            for l in 0..t.len() {
                let kids = children.entry(t[..l].to_vec()).or_default();
                if let Err(pos) = kids.binary_search(&t[l]) {
                    kids.insert(pos, t[l]);
                }
            }
        }
        Self { children, levels }
    }

    pub fn from_index(index: &BeamIndex) -> Self {
        Self::new(index.sids())
    }

    /// Allowed next tokens after `prefix`, ascending.
    pub fn children(&self, prefix: &[u16]) -> &[u16] {
        self.children.get(prefix).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

/// One decoded item.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub item: ItemId,
    pub sid: SidSequence,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommenderModel {
    spec: CodebookSpec,
    config: RecommenderConfig,
    params: ParamSet,
    layout: Layout,
}

impl RecommenderModel {
    pub fn new(spec: CodebookSpec, config: RecommenderConfig, tag: SetTag, seed: u64) -> Result<Self> {
        if config.dim % config.heads != 0 {
            return Err(Error::Invalid("recommender heads must divide dim".into()));
        }
        if config.n_max == 0 {
            return Err(Error::Invalid("recommender n_max must be >= 1".into()));
        }
        let mut r = rng::seeded(seed);
        let mut set = ParamSet::new(tag);
        let d = config.dim;
        let k = spec.codes_per_level;
        let l = spec.levels;
        let emb_std = 1.0 / math::sqrt(d as f64);
        let start = set.add("start", Tensor::randn(vec![1, d], emb_std, &mut r));
        let token_emb = (0..l)
            .map(|lvl| set.add(alloc::format!("tok{lvl}"), Tensor::randn(vec![k, d], emb_std, &mut r)))
            .collect();
        let hist_pos = set.add("hist_pos", Tensor::randn(vec![config.n_max, d], emb_std, &mut r));
        let tgt_pos = set.add("tgt_pos", Tensor::randn(vec![l.max(2) - 1, d], emb_std, &mut r));
        let shape = BlockShape { dim: d, heads: config.heads, ff: config.ff };
        let blocks = (0..config.blocks)
            .map(|b| transformer::add_block(&mut set, &alloc::format!("block{b}"), shape, config.blocks, &mut r))
            .collect();
        let final_norm = set.add("final_norm", Tensor::filled(vec![1, d], 1.0));
        let mut head_w = Vec::with_capacity(l);
        let mut head_b = Vec::with_capacity(l);
        for lvl in 0..l {
            let w = if config.zero_output {
                Tensor::zeros(vec![d, k])
            } else {
                Tensor::randn(vec![d, k], emb_std, &mut r)
            };
            head_w.push(set.add(alloc::format!("head{lvl}.w"), w));
            head_b.push(set.add(alloc::format!("head{lvl}.b"), Tensor::zeros(vec![1, k])));
        }
        let layout = Layout { start, token_emb, hist_pos, tgt_pos, blocks, final_norm, head_w, head_b };
        Ok(Self { spec, config, params: set, layout })
    }

    pub fn spec(&self) -> CodebookSpec {
        self.spec
    }

    pub fn config(&self) -> &RecommenderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Keeps the `n_max` most recent entries.
    pub fn truncate<'a, T>(&self, history: &'a [T]) -> &'a [T] {
        &history[history.len().saturating_sub(self.config.n_max)..]
    }

    /// Maps history items to their top-weight SIDs (most recent `n_max`).
    pub fn encode_history(&self, history: &[ItemId], index: &BeamIndex) -> Result<Vec<SidSequence>> {
        self.truncate(history)
            .iter()
            .map(|&it| index.top_sid(it).cloned().ok_or(Error::MissingSid(it)))
            .collect()
    }

    /// START plus history rows, as an `(n + 1) x d` node.
    fn prefix_rows(&self, g: &mut Graph, history: &[SidSequence]) -> Result<NodeId> {
        let history = self.truncate(history);
        let set = &self.params;
        let start = g.param(set, self.layout.start);
        if history.is_empty() {
            return Ok(start);
        }
        let mut acc: Option<NodeId> = None;
        for lvl in 0..self.spec.levels {
            let mut toks = Vec::with_capacity(history.len());
            for sid in history {
                self.spec.validate(sid)?;
                toks.push(sid.tokens()[lvl] as usize);
            }
            let table = g.param(set, self.layout.token_emb[lvl]);
            let e = g.embed_lookup(table, &toks)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        let n = history.len();
        let recency: Vec<usize> = (0..n).map(|i| n - 1 - i).collect();
        let pos_table = g.param(set, self.layout.hist_pos);
        let pos = g.embed_lookup(pos_table, &recency)?;
        let hist = g.add(acc.unwrap(), pos)?;
        g.concat_rows(&[start, hist])
    }

    /// Target rows for tokens `c_1 .. c_m` (`m <= L - 1`).
    fn target_rows(&self, g: &mut Graph, tokens: &[u16]) -> Result<NodeId> {
        let set = &self.params;
        let mut rows = Vec::with_capacity(tokens.len());
        for (lvl, &t) in tokens.iter().enumerate() {
            if t as usize >= self.spec.codes_per_level {
                return Err(Error::OutOfRange { what: "SID token", index: t as usize, bound: self.spec.codes_per_level });
            }
            let table = g.param(set, self.layout.token_emb[lvl]);
            rows.push(g.embed_lookup(table, &[t as usize])?);
        }
        let seq = g.concat_rows(&rows)?;
        let pos_table = g.param(set, self.layout.tgt_pos);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.embed_lookup(pos_table, &positions)?;
        g.add(seq, pos)
    }

    fn head(&self, g: &mut Graph, h: NodeId, row: usize, level: usize) -> Result<NodeId> {
        let r = g.rows(h, row, 1)?;
        let w = g.param(&self.params, self.layout.head_w[level]);
        let b = g.param(&self.params, self.layout.head_b[level]);
        g.linear(r, w, b)
    }

    /// Teacher-forced per-level cross-entropies (L x 1 node).
    pub fn token_losses_node(&self, g: &mut Graph, history: &[SidSequence], sid: &SidSequence) -> Result<NodeId> {
        self.spec.validate(sid)?;
        let toks = sid.tokens();
        let l = self.spec.levels;
        let prefix = self.prefix_rows(g, history)?;
        let n_prefix = g.dims(prefix).0;
        let mut h = if l > 1 {
            let tgt = self.target_rows(g, &toks[..l - 1])?;
            g.concat_rows(&[prefix, tgt])?
        } else {
            prefix
        };
        for block in &self.layout.blocks {
            h = transformer::block_forward(g, &self.params, block, self.config.heads, h, None)?.0;
        }
        let fnorm = g.param(&self.params, self.layout.final_norm);
        let h = g.rms_norm(h, fnorm)?;
        let mut logits = Vec::with_capacity(l);
        for lvl in 0..l {
            logits.push(self.head(g, h, n_prefix - 1 + lvl, lvl)?);
        }
        let all = g.concat_rows(&logits)?;
        let targets: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
        g.cross_entropy(all, &targets)
    }

    /// `L_user` as a scalar node; gradient reaches this model only.
    pub fn loss_node(&self, g: &mut Graph, history: &[SidSequence], sid: &SidSequence) -> Result<NodeId> {
        let ce = self.token_losses_node(g, history, sid)?;
        Ok(g.sum(ce))
    }

    /// Teacher-forced `log P(c_l | c_<l, H_u)` per level.
    pub fn next_sid_logprob(&self, history: &[SidSequence], sid: &SidSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ce = self.token_losses_node(&mut g, history, sid)?;
        Ok(g.value(ce).iter().map(|v| -v).collect())
    }

    pub fn recommender_loss(&self, history: &[SidSequence], sid: &SidSequence) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss_node(&mut g, history, sid)?;
        Ok(g.scalar(l))
    }

    /// Encodes the history once for repeated scoring.
    pub fn prefix_cache(&self, history: &[SidSequence]) -> Result<PrefixCache> {
        let mut g = Graph::new();
        let mut h = self.prefix_rows(&mut g, history)?;
        let n = g.dims(h).0;
        let mut layers = Vec::with_capacity(self.layout.blocks.len());
        for block in &self.layout.blocks {
            let (out, k, v) = transformer::block_forward(&mut g, &self.params, block, self.config.heads, h, None)?;
            layers.push(LayerKv { rows: n, keys: g.value(k).to_vec(), values: g.value(v).to_vec() });
            h = out;
        }
        let fnorm = g.param(&self.params, self.layout.final_norm);
        let h = g.rms_norm(h, fnorm)?;
        let logits = self.head(&mut g, h, n - 1, 0)?;
        let mut first_logprobs = g.value(logits).to_vec();
        math::log_softmax_in_place(&mut first_logprobs);
        Ok(PrefixCache { layers, first_logprobs })
    }

    /// Log-probability rows for levels `1 ..= tokens.len()` given the cached
    /// history and the leading target tokens.
    pub fn continuation_logprobs(&self, cache: &PrefixCache, tokens: &[u16]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if tokens.len() >= self.spec.levels {
            return Err(Error::Invalid(alloc::format!("{} leading tokens for {} levels", tokens.len(), self.spec.levels)));
        }
        let mut g = Graph::new();
        let mut h = self.target_rows(&mut g, tokens)?;
        for (block, past) in self.layout.blocks.iter().zip(&cache.layers) {
            h = transformer::block_forward(&mut g, &self.params, block, self.config.heads, h, Some(past))?.0;
        }
        let fnorm = g.param(&self.params, self.layout.final_norm);
        let h = g.rms_norm(h, fnorm)?;
        let mut out = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            let logits = self.head(&mut g, h, i, i + 1)?;
            let mut row = g.value(logits).to_vec();
            math::log_softmax_in_place(&mut row);
            out.push(row);
        }
        Ok(out)
    }

    /// Per-level log-probabilities of `sid` from a cached prefix.
    pub fn cached_sid_logprob(&self, cache: &PrefixCache, sid: &SidSequence) -> Result<Vec<f64>> {
        self.spec.validate(sid)?;
        let toks = sid.tokens();
        let mut out = Vec::with_capacity(toks.len());
        out.push(cache.first_logprobs[toks[0] as usize]);
        let rows = self.continuation_logprobs(cache, &toks[..toks.len() - 1])?;
        for (row, &t) in rows.iter().zip(&toks[1..]) {
            out.push(row[t as usize]);
        }
        Ok(out)
    }

    /// Picks the candidate with the smallest length-normalised CE under
    /// this model; ties go to the lexicographically smaller SID.
    pub fn min_loss_select<'a>(
        &self,
        history: &[SidSequence],
        candidates: impl IntoIterator<Item = &'a SidSequence>,
    ) -> Result<Selection> {
        let cache = self.prefix_cache(history)?;
        let mut best: Option<Selection> = None;
        for sid in candidates {
            let token_losses: Vec<f64> = self.cached_sid_logprob(&cache, sid)?.iter().map(|v| -v).collect();
            let mean_loss = token_losses.iter().sum::<f64>() / token_losses.len() as f64;
            let better = match &best {
                None => true,
                Some(b) => mean_loss < b.mean_loss || (mean_loss == b.mean_loss && sid < &b.sid),
            };
            if better {
                best = Some(Selection { sid: sid.clone(), mean_loss, token_losses });
            }
        }
        best.ok_or_else(|| Error::Invalid("minimum-loss selection over an empty candidate set".into()))
    }

    /// Length-synchronous beam search over the SIDs present in `trie`.
    /// Returns up to `beam` complete SIDs with total log-probabilities,
    /// best first (ties: smaller SID).
    pub fn constrained_beam(
        &self,
        history: &[SidSequence],
        trie: &SidTrie,
        beam: usize,
    ) -> Result<Vec<(SidSequence, f64)>> {
        if beam == 0 {
            return Err(Error::Invalid("beam width must be >= 1".into()));
        }
        let cache = self.prefix_cache(history)?;
        let mut frontier: Vec<(Vec<u16>, f64)> = vec![(Vec::new(), 0.0)];
        for level in 0..self.spec.levels {
            let mut next = Vec::new();
            for (prefix, score) in &frontier {
                let kids = trie.children(prefix);
                if kids.is_empty() {
                    continue;
                }
                let row = if level == 0 {
                    cache.first_logprobs.clone()
                } else {
                    self.continuation_logprobs(&cache, prefix)?.pop().unwrap()
                };
                for &t in kids {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push((p, score + row[t as usize]));
                }
            }
            next.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
            next.truncate(beam);
            frontier = next;
        }
        Ok(frontier.into_iter().map(|(t, s)| (SidSequence::new(t), s)).collect())
    }

    /// Top-`k` distinct items: constrained beam search, reverse lookup,
    /// and de-duplication keeping each item's best alias.
    pub fn decode_topk(
        &self,
        history: &[SidSequence],
        trie: &SidTrie,
        index: &BeamIndex,
        beam: usize,
        k: usize,
    ) -> Result<Vec<Ranked>> {
        if index.is_empty() {
            return Err(Error::Invalid("decoding against an empty index".into()));
        }
        let hits = self.constrained_beam(history, trie, beam)?;
        let mut out: Vec<Ranked> = Vec::new();
        for (sid, logprob) in hits {
            let Some((item, _)) = index.reverse_lookup(&sid) else { continue };
            if out.iter().any(|r| r.item == item) {
                continue;
            }
            out.push(Ranked { item, sid, logprob });
            if out.len() == k {
                break;
            }
        }
        Ok(out)
    }
}

/// Orders `(score, sid)` pairs best first.
pub fn score_order(a: &(SidSequence, f64), b: &(SidSequence, f64)) -> Ordering {
    rank_order(a.1, a.0.tokens(), b.1, b.0.tokens())
}
