//! Item-to-Token model: an autoregressive decoder over SID tokens seeded by
//! the detached item representation, plus the reference twin and the KL
//! penalty that anchors the live model to it.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::rng;
use crate::sid::{CodebookSpec, SidSequence};
use crate::tensor::{ParamSet, SetTag, Tensor};
use crate::transformer::{self, BlockLayout, BlockShape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerConfig {
    /// Width of the item representation fed in as the BOS input.
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub blocks: usize,
    /// Start with all-zero output heads (uniform predictions).
    pub zero_output: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { input_dim: 32, dim: 32, heads: 2, ff: 64, blocks: 1, zero_output: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    bos_w: usize,
    bos_b: usize,
    token_emb: Vec<usize>,
    pos: usize,
    blocks: Vec<BlockLayout>,
    final_norm: usize,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
}

/// How [`TokenizerModel::beam_candidates`] explores the SID tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchStrategy {
    /// Best-first search; returns exactly the `B` highest-probability SIDs.
    #[default]
    Exact,
    /// Classic length-synchronous beam search keeping `B` prefixes per level.
    LengthSynchronous,
}

/// One beam result.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sid: SidSequence,
    pub total_logprob: f64,
    /// Per-level log-probabilities; their sum is `total_logprob`.
    pub token_logprobs: Vec<f64>,
}

impl Candidate {
    /// Per-level cross-entropies (`-log p`).
    pub fn token_losses(&self) -> Vec<f64> {
        self.token_logprobs.iter().map(|l| -l).collect()
    }
}

/// Candidates in strictly descending total log-probability, ties broken by
/// lexicographically smaller SID first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn sids(&self) -> impl Iterator<Item = &SidSequence> {
        self.candidates.iter().map(|c| &c.sid)
    }
}

/// Order used for ranked SID lists: higher score first, then smaller SID.
pub fn rank_order(a_score: f64, a: &[u16], b_score: f64, b: &[u16]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// The Item-to-Token model. Also used, with its own tag, as the frozen-
/// mapping reference twin.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    spec: CodebookSpec,
    config: TokenizerConfig,
    params: ParamSet,
    layout: Layout,
}

impl TokenizerModel {
    pub fn new(spec: CodebookSpec, config: TokenizerConfig, tag: SetTag, seed: u64) -> Result<Self> {
        if config.dim % config.heads != 0 {
            return Err(Error::Invalid("tokenizer heads must divide dim".into()));
        }
        let mut r = rng::seeded(seed);
        let mut set = ParamSet::new(tag);
        let d = config.dim;
        let k = spec.codes_per_level;
        let l = spec.levels;
        let in_std = 1.0 / math::sqrt(config.input_dim as f64);
        let emb_std = 1.0 / math::sqrt(d as f64);
        let bos_w = set.add("bos.w", Tensor::randn(vec![config.input_dim, d], in_std, &mut r));
        let bos_b = set.add("bos.b", Tensor::zeros(vec![1, d]));
        let token_emb = (0..l.saturating_sub(1))
            .map(|lvl| set.add(alloc::format!("tok{lvl}"), Tensor::randn(vec![k, d], emb_std, &mut r)))
            .collect();
        let pos = set.add("pos", Tensor::randn(vec![l, d], emb_std, &mut r));
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
        let layout = Layout { bos_w, bos_b, token_emb, pos, blocks, final_norm, head_w, head_b };
        Ok(Self { spec, config, params: set, layout })
    }

    pub fn spec(&self) -> CodebookSpec {
        self.spec
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Copy of this model's weights under another parameter tag.
    pub fn twin(&self, tag: SetTag) -> Self {
        let mut m = self.clone();
        m.params = m.params.with_tag(tag);
        m
    }

    /// Per-position logits (1 x K nodes) for positions `0 ..= prefix.len()`.
    /// Position `p` predicts the level-`p` token. `x` is detached here.
    pub fn forward(&self, g: &mut Graph, x: NodeId, prefix: &[u16]) -> Result<Vec<NodeId>> {
        let l = self.spec.levels;
        if prefix.len() >= l {
            return Err(Error::Invalid(alloc::format!("prefix of {} tokens for {l} levels", prefix.len())));
        }
        if g.dims(x) != (1, self.config.input_dim) {
            return Err(Error::Shape(alloc::format!(
                "item representation {:?}, expected 1x{}",
                g.dims(x),
                self.config.input_dim
            )));
        }
        let set = &self.params;
        let x = g.stop_grad(x);
        let bw = g.param(set, self.layout.bos_w);
        let bb = g.param(set, self.layout.bos_b);
        let mut rows = vec![g.linear(x, bw, bb)?];
        for (lvl, &t) in prefix.iter().enumerate() {
            let table = g.param(set, self.layout.token_emb[lvl]);
            rows.push(g.embed_lookup(table, &[t as usize])?);
        }
        let seq = g.concat_rows(&rows)?;
        let pos_table = g.param(set, self.layout.pos);
        let positions: Vec<usize> = (0..rows.len()).collect();
        let pos = g.embed_lookup(pos_table, &positions)?;
        let mut h = g.add(seq, pos)?;
        for block in &self.layout.blocks {
            h = transformer::block_forward(g, set, block, self.config.heads, h, None)?.0;
        }
        let fnorm = g.param(set, self.layout.final_norm);
        let h = g.rms_norm(h, fnorm)?;
        let mut logits = Vec::with_capacity(rows.len());
        for p in 0..rows.len() {
            let row = g.rows(h, p, 1)?;
            let w = g.param(set, self.layout.head_w[p]);
            let b = g.param(set, self.layout.head_b[p]);
            logits.push(g.linear(row, w, b)?);
        }
        Ok(logits)
    }

    /// Teacher-forced per-level cross-entropies as an L x 1 column node.
    pub fn token_losses_node(&self, g: &mut Graph, x: NodeId, sid: &SidSequence) -> Result<NodeId> {
        self.spec.validate(sid)?;
        let toks = sid.tokens();
        let logits = self.forward(g, x, &toks[..toks.len() - 1])?;
        let all = g.concat_rows(&logits)?;
        let targets: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
        g.cross_entropy(all, &targets)
    }

    /// `-Σ_l log P(c_l | c_<l, sg(x))` as a scalar node. Gradient reaches
    /// this model's parameters only.
    pub fn loss_node(&self, g: &mut Graph, x: NodeId, sid: &SidSequence) -> Result<NodeId> {
        let ce = self.token_losses_node(g, x, sid)?;
        Ok(g.sum(ce))
    }

    fn input_node(&self, g: &mut Graph, x: &[f64]) -> Result<NodeId> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(alloc::format!(
                "item representation of width {}, expected {}",
                x.len(),
                self.config.input_dim
            )));
        }
        g.input(1, x.len(), x.to_vec())
    }

    /// Teacher-forced `log P(c_l | c_<l, sg(x))` for each level.
    pub fn sid_logprob(&self, x: &[f64], sid: &SidSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xn = self.input_node(&mut g, x)?;
        let ce = self.token_losses_node(&mut g, xn, sid)?;
        Ok(g.value(ce).iter().map(|v| -v).collect())
    }

    pub fn tokenizer_loss(&self, x: &[f64], sid: &SidSequence) -> Result<f64> {
        let mut g = Graph::new();
        let xn = self.input_node(&mut g, x)?;
        let l = self.loss_node(&mut g, xn, sid)?;
        Ok(g.scalar(l))
    }

    /// Log-probabilities of every level-`prefix.len()` token.
    pub fn next_logprobs(&self, x: &[f64], prefix: &[u16]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xn = self.input_node(&mut g, x)?;
        let logits = self.forward(&mut g, xn, prefix)?;
        let mut row = g.value(*logits.last().unwrap()).to_vec();
        math::log_softmax_in_place(&mut row);
        Ok(row)
    }

    /// The `B` most likely SIDs for item representation `x`.
    ///
    /// `B` is clamped to `K^L`. Results are ordered by descending total
    /// log-probability, ties by lexicographically smaller SID.
    pub fn beam_candidates(&self, x: &[f64], beam: usize, strategy: SearchStrategy) -> Result<CandidateSet> {
        if beam == 0 {
            return Err(Error::Invalid("beam width must be >= 1".into()));
        }
        let beam = beam.min(self.spec.capacity());
        match strategy {
            SearchStrategy::Exact => self.best_first(x, beam),
            SearchStrategy::LengthSynchronous => self.synchronous(x, beam),
        }
    }

    fn synchronous(&self, x: &[f64], beam: usize) -> Result<CandidateSet> {
        let mut beams: Vec<(Vec<u16>, f64, Vec<f64>)> = vec![(Vec::new(), 0.0, Vec::new())];
        for _ in 0..self.spec.levels {
            let mut next = Vec::with_capacity(beams.len() * self.spec.codes_per_level);
            for (prefix, score, lps) in &beams {
                let logp = self.next_logprobs(x, prefix)?;
                for (t, &lp) in logp.iter().enumerate() {
                    let mut p = prefix.clone();
                    p.push(t as u16);
                    let mut l = lps.clone();
                    l.push(lp);
                    next.push((p, score + lp, l));
                }
            }
            next.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
            next.truncate(beam);
            beams = next;
        }
        Ok(CandidateSet {
            candidates: beams
                .into_iter()
                .map(|(t, s, l)| Candidate { sid: SidSequence::new(t), total_logprob: s, token_logprobs: l })
                .collect(),
        })
    }

    fn best_first(&self, x: &[f64], beam: usize) -> Result<CandidateSet> {
        // Extending a prefix never raises its score, so complete sequences
        // leave the heap in exact rank order.
        let levels = self.spec.levels;
        let mut heap = BinaryHeap::new();
        heap.push(Frontier { score: 0.0, tokens: Vec::new(), logprobs: Vec::new() });
        let mut out = Vec::with_capacity(beam);
        while let Some(node) = heap.pop() {
            if node.tokens.len() == levels {
                out.push(Candidate {
                    sid: SidSequence::new(node.tokens),
                    total_logprob: node.score,
                    token_logprobs: node.logprobs,
                });
                if out.len() == beam {
                    break;
                }
                continue;
            }
            let logp = self.next_logprobs(x, &node.tokens)?;
            for (t, &lp) in logp.iter().enumerate() {
                let mut tokens = node.tokens.clone();
                tokens.push(t as u16);
                let mut logprobs = node.logprobs.clone();
                logprobs.push(lp);
                heap.push(Frontier { score: node.score + lp, tokens, logprobs });
            }
        }
        Ok(CandidateSet { candidates: out })
    }
}

#[derive(Debug)]
struct Frontier {
    score: f64,
    tokens: Vec<u16>,
    logprobs: Vec<f64>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // Max-heap: greater = popped first = higher score, then smaller tokens.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(other.score, &other.tokens, self.score, &self.tokens)
    }
}

/// Mean over levels of `r - ln r - 1` with `r = P_ref / P_live`, at the
/// tokens of `sid`, as a scalar node. Only `live` receives gradient; the
/// reference log-probabilities enter as constants.
pub fn kl_regularizer_node(
    g: &mut Graph,
    live: &TokenizerModel,
    reference: &TokenizerModel,
    x: NodeId,
    sid: &SidSequence,
) -> Result<NodeId> {
    if live.spec != reference.spec {
        return Err(Error::Invalid("live and reference tokenizers use different codebook specs".into()));
    }
    let ref_ce = reference.token_losses_node(g, x, sid)?;
    let ref_logp: Vec<f64> = g.value(ref_ce).iter().map(|v| -v).collect();
    let ce = live.token_losses_node(g, x, sid)?;
    g.kl_ratio(ce, &ref_logp)
}

/// Scalar D_KL value for inference.
pub fn kl_regularizer(live: &TokenizerModel, reference: &TokenizerModel, x: &[f64], sid: &SidSequence) -> Result<f64> {
    let mut g = Graph::new();
    let xn = live.input_node(&mut g, x)?;
    let kl = kl_regularizer_node(&mut g, live, reference, xn, sid)?;
    Ok(g.scalar(kl))
}
