//! The two-phase curriculum: a warm-up against fixed quantizer SIDs, then
//! the generation-selection loop where the tokenizer proposes SIDs, the
//! recommender picks the one it finds easiest, and the beam index evolves.

use alloc::vec::Vec;

use crate::csa::{CsaConfig, CsaModel};
use crate::error::{Error, Result};
use crate::eval::RankingResult;
use crate::graph::{Graph, NodeId};
use crate::index::{relevance_weight, BeamIndex, IndexConfig, ItemId, UpdateDelta};
use crate::math;
use crate::optim::AdamW;
use crate::recommender::{RecommenderConfig, RecommenderModel, SidTrie};
use crate::rng;
use crate::rqkmeans::{self, Codebook};
use crate::sid::{CodebookSpec, SidSequence};
use crate::tensor::{ParamSet, SetTag};
use crate::tokenizer::{kl_regularizer_node, CandidateSet, SearchStrategy, TokenizerConfig, TokenizerModel};

pub const TAG_RECOMMENDER: SetTag = 0;
pub const TAG_TOKENIZER: SetTag = 1;
pub const TAG_REFERENCE: SetTag = 2;
pub const TAG_CSA: SetTag = 3;

/// Loss weights. `lambda1`/`lambda2` weight the warm-up objective;
/// `w_item`/`w_xtr` the dynamic one; `w_ref` and `eta` the reference
/// regulariser `w_ref · (L_ref + η · D_KL)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub w_item: f64,
    pub w_xtr: f64,
    pub w_ref: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, w_item: 0.5, w_xtr: 0.5, w_ref: 0.5, eta: 1.0 }
    }
}

/// Plateau rule for leaving the warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    /// Relative improvement of validation L_user that counts as progress.
    pub rel_tol: f64,
    /// Evaluations without progress before switching phase.
    pub patience: usize,
    /// Hard cap on warm-up steps.
    pub max_warmup_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { rel_tol: 0.005, patience: 3, max_warmup_steps: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub recommender: f64,
    pub tokenizer: f64,
    pub reference: f64,
    pub csa: f64,
    pub weight_decay: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self::uniform(2e-3)
    }
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self { recommender: lr, tokenizer: lr, reference: lr, csa: lr, weight_decay: 0.01 }
    }
}

/// Which candidates minimum-loss selection may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionPool {
    /// Only candidates the target item owns after its index refresh.
    #[default]
    Owned,
    /// Every generated candidate, owned or not.
    AllCandidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub index: IndexConfig,
    /// Candidates generated per item in the dynamic phase.
    pub beam_width: usize,
    pub search: SearchStrategy,
    pub selection: SelectionPool,
    /// A sample's item-side losses apply only if the summed recommender CE
    /// of its selected SID is below this.
    pub filter_threshold: f64,
    /// Warm-up phase rates.
    pub rates: LearningRates,
    /// Dynamic phase rates; lower, since its batches are small and its
    /// targets move.
    pub dynamic_rates: LearningRates,
    pub schedule: ScheduleConfig,
    /// Freeze the tokenizer during the dynamic phase.
    pub offline: bool,
    pub recommender: RecommenderConfig,
    pub tokenizer: TokenizerConfig,
    pub csa: CsaConfig,
    pub seed: u64,
}

impl TrainingConfig {
    /// Defaults for a codebook; the filter threshold is half the uniform
    /// per-SID loss `L · ln K`.
    pub fn for_spec(spec: &CodebookSpec) -> Self {
        let csa = CsaConfig { content_dim: spec.dim, ..CsaConfig::default() };
        Self {
            weights: LossWeights::default(),
            index: IndexConfig::default(),
            beam_width: 8,
            search: SearchStrategy::Exact,
            selection: SelectionPool::Owned,
            filter_threshold: 0.5 * spec.levels as f64 * math::ln(spec.codes_per_level as f64),
            rates: LearningRates::default(),
            dynamic_rates: LearningRates::uniform(5e-4),
            schedule: ScheduleConfig::default(),
            offline: false,
            recommender: RecommenderConfig::default(),
            tokenizer: TokenizerConfig { input_dim: csa.item_dim(), ..TokenizerConfig::default() },
            csa,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("lambda1", w.lambda1),
            ("lambda2", w.lambda2),
            ("w_item", w.w_item),
            ("w_xtr", w.w_xtr),
            ("w_ref", w.w_ref),
            ("eta", w.eta),
            ("filter_threshold", self.filter_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(alloc::format!("{name} must be finite and >= 0")));
            }
        }
        for r in [&self.rates, &self.dynamic_rates] {
            for v in [r.recommender, r.tokenizer, r.reference, r.csa, r.weight_decay] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Invalid("learning rates and weight decay must be finite and >= 0".into()));
                }
            }
        }
        if self.beam_width == 0 {
            return Err(Error::Invalid("beam_width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.index.gamma) {
            return Err(Error::Invalid("gamma must lie in [0, 1]".into()));
        }
        if self.index.capacity == 0 {
            return Err(Error::Invalid("index capacity must be >= 1".into()));
        }
        if self.tokenizer.input_dim != self.csa.item_dim() {
            return Err(Error::Invalid("tokenizer input width must equal the item representation width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Warmup,
    Dynamic,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub phase: Phase,
    pub steps_in_phase: u64,
    /// Validation losses seen during the warm-up, in order.
    pub validation: Vec<f64>,
    pub best: Option<f64>,
    pub stale_evals: usize,
    /// Global step at which the dynamic phase began.
    pub transition_step: Option<u64>,
}

impl Default for PhaseState {
    fn default() -> Self {
        Self { phase: Phase::Warmup, steps_in_phase: 0, validation: Vec::new(), best: None, stale_evals: 0, transition_step: None }
    }
}

/// Records a validation loss and switches to the dynamic phase after
/// `patience` evaluations without relative improvement above `rel_tol`,
/// or once the warm-up step cap is reached. Never switches back.
pub fn phase_scheduler(state: &PhaseState, validation_loss: f64, schedule: &ScheduleConfig, global_step: u64) -> PhaseState {
    let mut next = state.clone();
    if next.phase == Phase::Dynamic {
        return next;
    }
    next.validation.push(validation_loss);
    match next.best {
        Some(best) if !(validation_loss < best - schedule.rel_tol * libm::fabs(best)) => next.stale_evals += 1,
        _ => {
            next.best = Some(validation_loss);
            next.stale_evals = 0;
        }
    }
    if next.stale_evals >= schedule.patience || next.steps_in_phase >= schedule.max_warmup_steps {
        next.phase = Phase::Dynamic;
        next.steps_in_phase = 0;
        next.transition_step = Some(global_step);
    }
    next
}

/// True iff the relevance weight of the selected SID's losses clears
/// `A - threshold` (strictly).
pub fn gradient_filter(user_losses: &[f64], offset: f64, threshold: f64) -> bool {
    relevance_weight(user_losses, offset) > offset - threshold
}

/// Warm-up SIDs for a catalogue.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupAssignment {
    pub sids: Vec<SidSequence>,
    pub distinct_greedy: usize,
    pub collisions: usize,
}

/// Tokenises every item's content, resolves collisions so the map is
/// injective, and inserts the links (weight `A`, time 0) into `index`.
pub fn assign_warmup_sids(
    codebook: &Codebook,
    content: &[Vec<f64>],
    index: &mut BeamIndex,
    offset: f64,
) -> Result<WarmupAssignment> {
    let a = rqkmeans::assign_unique(codebook, content)?;
    for (item, sid) in a.sids.iter().enumerate() {
        index.insert_link(item as ItemId, sid.clone(), offset, 0)?;
    }
    Ok(WarmupAssignment { sids: a.sids, distinct_greedy: a.distinct_greedy, collisions: a.collisions })
}

/// One training example: the user's history before the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user: u32,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub labels: Vec<bool>,
}

/// Batch-mean loss components. Filtered samples contribute zero to
/// `item` and `kl`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub user: f64,
    pub item: f64,
    pub xtr: f64,
    pub reference: f64,
    pub kl: f64,
    pub total: f64,
}

/// Everything logged for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub filter_pass_rate: f64,
    pub links_added: usize,
    pub links_removed: usize,
}

/// Which parameter sets received gradient in a step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Touched {
    tokenizer: bool,
    reference: bool,
    csa: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub spec: CodebookSpec,
    pub recommender: RecommenderModel,
    pub tokenizer: TokenizerModel,
    pub reference: TokenizerModel,
    pub csa: CsaModel,
    pub index: BeamIndex,
    pub warmup_sids: Vec<SidSequence>,
    pub phase: PhaseState,
    /// Optimisation steps taken.
    pub step: u64,
    /// Logical index time: samples consumed since the index began evolving
    /// (the warm-up leaves the index static, so it does not advance).
    pub clock: u64,
}

impl Trainer {
    /// Builds all models and seeds the index with the warm-up SIDs.
    pub fn new(config: TrainingConfig, codebook: &Codebook, content: &[Vec<f64>]) -> Result<(Self, WarmupAssignment)> {
        config.validate()?;
        let spec = *codebook.spec();
        let seed = config.seed;
        let recommender = RecommenderModel::new(spec, config.recommender, TAG_RECOMMENDER, rng::split(seed, 11))?;
        let tokenizer = TokenizerModel::new(spec, config.tokenizer, TAG_TOKENIZER, rng::split(seed, 12))?;
        let reference = tokenizer.twin(TAG_REFERENCE);
        let csa = CsaModel::new(config.csa, content, TAG_CSA, rng::split(seed, 13))?;
        let mut index = BeamIndex::new(config.index.capacity)?;
        let assignment = assign_warmup_sids(codebook, content, &mut index, config.index.offset)?;
        let trainer = Self {
            config,
            spec,
            recommender,
            tokenizer,
            reference,
            csa,
            index,
            warmup_sids: assignment.sids.clone(),
            phase: PhaseState::default(),
            step: 0,
            clock: 0,
        };
        Ok((trainer, assignment))
    }

    pub fn n_items(&self) -> usize {
        self.warmup_sids.len()
    }

    fn warmup_sid(&self, item: ItemId) -> Result<&SidSequence> {
        self.warmup_sids.get(item as usize).ok_or(Error::UnknownItem(item))
    }

    /// History encoded by top-weight SIDs. Items that currently hold no
    /// link are skipped.
    pub fn encode_history(&self, history: &[ItemId]) -> Result<Vec<SidSequence>> {
        let mut out = Vec::with_capacity(history.len());
        for &it in history {
            if it as usize >= self.n_items() {
                return Err(Error::UnknownItem(it));
            }
            if let Some(sid) = self.index.top_sid(it) {
                out.push(sid.clone());
            }
        }
        let keep = out.len().saturating_sub(self.config.recommender.n_max);
        Ok(out.split_off(keep))
    }

    fn check_batch(&self, batch: &[Sample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        for s in batch {
            if s.target as usize >= self.n_items() {
                return Err(Error::UnknownItem(s.target));
            }
        }
        Ok(())
    }

    /// One step in whatever phase is current.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepMetrics> {
        match self.phase.phase {
            Phase::Warmup => self.warmup_step(batch),
            Phase::Dynamic => self.dynamic_step(batch),
        }
    }

    /// Warm-up step: `L_user + λ1·L_item + λ2·L_xtr` against the fixed
    /// SIDs, plus `L_ref` on the reference twin.
    pub fn warmup_step(&mut self, batch: &[Sample]) -> Result<StepMetrics> {
        if self.phase.phase != Phase::Warmup {
            return Err(Error::Invalid("warm-up step outside the warm-up phase".into()));
        }
        self.check_batch(batch)?;
        let w = self.config.weights;
        let inv = 1.0 / batch.len() as f64;
        let mut g = Graph::new();
        let mut terms: Vec<(NodeId, f64)> = Vec::new();
        let mut sums = LossBreakdown::default();
        for s in batch {
            let target_sid = self.warmup_sid(s.target)?.clone();
            let hist = self.encode_history(&s.history)?;
            let lu = self.recommender.loss_node(&mut g, &hist, &target_sid)?;
            let x = self.csa.item_node(&mut g, s.target)?;
            let li = self.tokenizer.loss_node(&mut g, x, &target_sid)?;
            let lr = self.reference.loss_node(&mut g, x, &target_sid)?;
            let lx = self.csa.loss_node(&mut g, &s.history, s.target, &s.labels)?;
            sums.user += g.scalar(lu);
            sums.item += g.scalar(li);
            sums.reference += g.scalar(lr);
            sums.xtr += g.scalar(lx);
            terms.extend([(lu, inv), (li, w.lambda1 * inv), (lx, w.lambda2 * inv), (lr, inv)]);
        }
        let losses = LossBreakdown {
            user: sums.user * inv,
            item: sums.item * inv,
            xtr: sums.xtr * inv,
            reference: sums.reference * inv,
            kl: 0.0,
            total: sums.user * inv + w.lambda1 * sums.item * inv + w.lambda2 * sums.xtr * inv,
        };
        let touched = Touched { tokenizer: w.lambda1 > 0.0, reference: true, csa: w.lambda2 > 0.0 };
        self.apply(&mut g, &terms, touched)?;
        self.step += 1;
        self.phase.steps_in_phase += 1;
        Ok(StepMetrics { step: self.step, phase: Phase::Warmup, losses, filter_pass_rate: 1.0, links_added: 0, links_removed: 0 })
    }

    /// Dynamic step: per sample, generate candidates and refresh the
    /// target's index entry with all of them, select `c*` under the
    /// recommender, and train on `c*`; one optimiser step per batch.
    pub fn dynamic_step(&mut self, batch: &[Sample]) -> Result<StepMetrics> {
        if self.phase.phase != Phase::Dynamic {
            return Err(Error::Invalid("dynamic step outside the dynamic phase".into()));
        }
        self.check_batch(batch)?;
        let w = self.config.weights;
        let inv = 1.0 / batch.len() as f64;
        let mut g = Graph::new();
        let mut terms: Vec<(NodeId, f64)> = Vec::new();
        let mut sums = LossBreakdown::default();
        let mut passed = 0usize;
        let mut delta = UpdateDelta::default();
        // Histories are encoded against the index as it stood at step start.
        let histories: Vec<Vec<SidSequence>> =
            batch.iter().map(|s| self.encode_history(&s.history)).collect::<Result<_>>()?;
        for (s, hist) in batch.iter().zip(&histories) {
            let xv = self.csa.item_representation(s.target)?;
            let candidates = self.tokenizer.beam_candidates(&xv, self.config.beam_width, self.config.search)?;
            // Each generation refreshes the index for its item.
            self.clock += 1;
            let predicted: Vec<(SidSequence, Vec<f64>)> =
                candidates.candidates.iter().map(|c| (c.sid.clone(), c.token_losses())).collect();
            delta.extend(self.index.update(s.target, &predicted, self.clock, &self.config.index)?);

            let pool = self.selection_pool(s.target, &candidates)?;
            let sel = self.recommender.min_loss_select(hist, pool.iter())?;
            let lu = self.recommender.loss_node(&mut g, hist, &sel.sid)?;
            sums.user += g.scalar(lu);
            terms.push((lu, inv));

            let x = self.csa.item_node(&mut g, s.target)?;
            if !self.config.offline && gradient_filter(&sel.token_losses, self.config.index.offset, self.config.filter_threshold) {
                passed += 1;
                let li = self.tokenizer.loss_node(&mut g, x, &sel.sid)?;
                let kl = kl_regularizer_node(&mut g, &self.tokenizer, &self.reference, x, &sel.sid)?;
                sums.item += g.scalar(li);
                sums.kl += g.scalar(kl);
                terms.extend([(li, w.w_item * inv), (kl, w.w_ref * w.eta * inv)]);
            }
            let lx = self.csa.loss_node(&mut g, &s.history, s.target, &s.labels)?;
            let target_sid = self.warmup_sid(s.target)?.clone();
            let lr = self.reference.loss_node(&mut g, x, &target_sid)?;
            sums.xtr += g.scalar(lx);
            sums.reference += g.scalar(lr);
            terms.extend([(lx, w.w_xtr * inv), (lr, w.w_ref * inv)]);
        }
        let losses = LossBreakdown {
            user: sums.user * inv,
            item: sums.item * inv,
            xtr: sums.xtr * inv,
            reference: sums.reference * inv,
            kl: sums.kl * inv,
            total: (sums.user + w.w_item * sums.item + w.w_xtr * sums.xtr + w.w_ref * (sums.reference + w.eta * sums.kl))
                * inv,
        };
        let touched = Touched {
            tokenizer: passed > 0 && (w.w_item > 0.0 || w.w_ref * w.eta > 0.0),
            reference: w.w_ref > 0.0,
            csa: w.w_xtr > 0.0,
        };
        self.apply(&mut g, &terms, touched)?;
        self.step += 1;
        self.phase.steps_in_phase += 1;
        Ok(StepMetrics {
            step: self.step,
            phase: Phase::Dynamic,
            losses,
            filter_pass_rate: passed as f64 / batch.len() as f64,
            links_added: delta.added.len(),
            links_removed: delta.removed.len(),
        })
    }

    /// SIDs eligible as the pseudo-label for `item`. With
    /// [`SelectionPool::Owned`], only candidates the item holds after the
    /// refresh qualify, falling back to its current aliases and finally to
    /// its warm-up SID.
    fn selection_pool(&self, item: ItemId, candidates: &CandidateSet) -> Result<Vec<SidSequence>> {
        if self.config.selection == SelectionPool::AllCandidates {
            return Ok(candidates.sids().cloned().collect());
        }
        let owned: Vec<SidSequence> = candidates
            .sids()
            .filter(|sid| self.index.reverse_lookup(sid).map(|o| o.0) == Some(item))
            .cloned()
            .collect();
        if !owned.is_empty() {
            return Ok(owned);
        }
        let aliases: Vec<SidSequence> = self.index.forward_lookup(item).into_iter().map(|e| e.sid).collect();
        if !aliases.is_empty() {
            return Ok(aliases);
        }
        Ok(alloc::vec![self.warmup_sid(item)?.clone()])
    }

    /// Backpropagates the weighted objective and steps every optimiser
    /// whose parameters took part.
    fn apply(&mut self, g: &mut Graph, terms: &[(NodeId, f64)], touched: Touched) -> Result<()> {
        let Some(loss) = g.weighted_sum(terms)? else { return Ok(()) };
        g.backward(loss)?;
        let r = match self.phase.phase {
            Phase::Warmup => self.config.rates,
            Phase::Dynamic => self.config.dynamic_rates,
        };
        let step = |g: &Graph, set: &mut ParamSet, lr: f64| -> Result<()> {
            g.accumulate_into(set);
            AdamW::new(lr, r.weight_decay).step(set)
        };
        step(g, self.recommender.params_mut(), r.recommender)?;
        if touched.tokenizer {
            step(g, self.tokenizer.params_mut(), r.tokenizer)?;
        }
        if touched.reference {
            step(g, self.reference.params_mut(), r.reference)?;
        }
        if touched.csa {
            step(g, self.csa.params_mut(), r.csa)?;
        }
        Ok(())
    }

    /// Mean recommender loss of `samples` against the current targets
    /// (warm-up SIDs in the warm-up, top-weight SIDs afterwards).
    pub fn validation_loss(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty validation set".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let hist = self.encode_history(&s.history)?;
            let sid = match self.phase.phase {
                Phase::Warmup => self.warmup_sid(s.target)?.clone(),
                Phase::Dynamic => match self.index.top_sid(s.target) {
                    Some(sid) => sid.clone(),
                    None => self.warmup_sid(s.target)?.clone(),
                },
            };
            total += self.recommender.recommender_loss(&hist, &sid)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Feeds a validation loss to the scheduler; returns true on the
    /// transition into the dynamic phase.
    pub fn observe_validation(&mut self, loss: f64) -> bool {
        let before = self.phase.phase;
        self.phase = phase_scheduler(&self.phase, loss, &self.config.schedule, self.step);
        before == Phase::Warmup && self.phase.phase == Phase::Dynamic
    }

    /// Forces the dynamic phase (e.g. when resuming from a warm-up run).
    pub fn enter_dynamic(&mut self) {
        if self.phase.phase == Phase::Warmup {
            self.phase.phase = Phase::Dynamic;
            self.phase.steps_in_phase = 0;
            self.phase.transition_step = Some(self.step);
        }
    }

    /// Top-`k` items for each `(user, history, target)` case, decoded with
    /// a trie over the current index.
    pub fn evaluate(&self, cases: &[(u32, Vec<ItemId>, ItemId)], beam: usize, k: usize) -> Result<Vec<RankingResult>> {
        let trie = SidTrie::from_index(&self.index);
        let mut out = Vec::with_capacity(cases.len());
        for (user, history, target) in cases {
            let hist = self.encode_history(history)?;
            let ranked = self.recommender.decode_topk(&hist, &trie, &self.index, beam, k)?;
            out.push(RankingResult { user: *user, ranked: ranked.into_iter().map(|r| r.item).collect(), target: *target });
        }
        Ok(out)
    }
}
