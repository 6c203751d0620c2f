//! Independent reference implementations used as test oracles. Each one is
//! written for clarity rather than speed and shares no code with the
//! implementation it checks beyond the public types.
#![allow(dead_code)]

use std::cmp::Ordering;

use coevo_core::index::{BeamIndex, IndexEntry, ItemId};
use coevo_core::recommender::RecommenderModel;
use coevo_core::rng::{self, CoreRng};
use coevo_core::tokenizer::TokenizerModel;
use coevo_core::SidSequence;
use rand::Rng;

/// One link of the reference index.
#[derive(Debug, Clone, PartialEq)]
pub struct RefLink {
    pub item: ItemId,
    pub sid: Vec<u16>,
    pub weight: f64,
    pub timestamp: u64,
}

/// Algorithm 1 over a flat list of links.
#[derive(Debug, Clone, Default)]
pub struct ReferenceIndex {
    pub links: Vec<RefLink>,
    pub gamma: f64,
    pub delta_t: u64,
    pub capacity: usize,
    pub offset: f64,
    pub stale_conflicts: usize,
    pub fresh_conflicts: usize,
}

impl ReferenceIndex {
    pub fn new(gamma: f64, delta_t: u64, capacity: usize, offset: f64) -> Self {
        Self { gamma, delta_t, capacity, offset, ..Self::default() }
    }

    fn owner(&self, sid: &[u16]) -> Option<&RefLink> {
        self.links.iter().find(|l| l.sid == sid)
    }

    pub fn update(&mut self, item: ItemId, predicted: &[(Vec<u16>, Vec<f64>)], now: u64) {
        // Current weights: A minus the summed losses.
        let current: Vec<(Vec<u16>, f64)> = predicted
            .iter()
            .map(|(sid, losses)| {
                let mut total = 0.0;
                for l in losses {
                    total += l;
                }
                (sid.clone(), self.offset - total)
            })
            .collect();
        let current_of = |sid: &[u16]| current.iter().find(|(s, _)| s == sid).map(|(_, w)| *w);

        // Merge fetched and predicted.
        let fetched: Vec<RefLink> = self.links.iter().filter(|l| l.item == item).cloned().collect();
        let mut merged: Vec<RefLink> = Vec::new();
        for f in &fetched {
            match current_of(&f.sid) {
                Some(c) => merged.push(RefLink {
                    item,
                    sid: f.sid.clone(),
                    weight: self.gamma * f.weight + (1.0 - self.gamma) * c,
                    timestamp: now,
                }),
                None => merged.push(f.clone()),
            }
        }
        for (sid, c) in &current {
            if !fetched.iter().any(|f| &f.sid == sid) {
                merged.push(RefLink { item, sid: sid.clone(), weight: *c, timestamp: now });
            }
        }

        // Conflicts with other owners: steal when stale, else give way.
        let mut kept = Vec::new();
        for m in merged {
            let conflict = self.owner(&m.sid).filter(|o| o.item != item).cloned();
            match conflict {
                None => kept.push(m),
                Some(o) if o.timestamp + self.delta_t < now => {
                    self.stale_conflicts += 1;
                    self.links.retain(|l| l.sid != o.sid);
                    kept.push(m);
                }
                Some(_) => self.fresh_conflicts += 1,
            }
        }

        // Top-B by weight, ties by smaller SID.
        kept.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.sid.cmp(&b.sid)));
        kept.truncate(self.capacity);
        self.links.retain(|l| l.item != item);
        self.links.extend(kept);
    }

    /// Links ordered by item, then descending weight, then SID.
    pub fn sorted(&self) -> Vec<RefLink> {
        let mut out = self.links.clone();
        out.sort_by(|a, b| {
            a.item
                .cmp(&b.item)
                .then_with(|| b.weight.total_cmp(&a.weight))
                .then_with(|| a.sid.cmp(&b.sid))
        });
        out
    }
}

/// True iff the index and the reference hold exactly the same links with
/// bit-identical weights and timestamps.
pub fn same_state(index: &BeamIndex, reference: &ReferenceIndex) -> Result<(), String> {
    let got: Vec<IndexEntry> = index.entries().collect();
    let want = reference.sorted();
    if got.len() != want.len() {
        return Err(format!("{} links vs reference {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(&want) {
        if g.item != w.item || g.sid.tokens() != &w.sid[..] || g.weight.to_bits() != w.weight.to_bits() || g.timestamp != w.timestamp
        {
            return Err(format!("{g:?} vs reference {w:?}"));
        }
        if index.reverse_lookup(&g.sid) != Some((g.item, g.timestamp)) {
            return Err(format!("reverse map disagrees for {}", g.sid));
        }
    }
    Ok(())
}

/// Random SID pool of distinct `levels`-token sequences over `codes`.
pub fn sid_pool(r: &mut CoreRng, n: usize, levels: usize, codes: u16) -> Vec<Vec<u16>> {
    let mut pool: Vec<Vec<u16>> = Vec::with_capacity(n);
    while pool.len() < n {
        let s: Vec<u16> = (0..levels).map(|_| r.gen_range(0..codes)).collect();
        if !pool.contains(&s) {
            pool.push(s);
        }
    }
    pool
}

/// A random prediction: `1..=max_len` distinct SIDs from `pool` with
/// per-level losses in [0, 4).
pub fn random_prediction(r: &mut CoreRng, pool: &[Vec<u16>], max_len: usize) -> Vec<(Vec<u16>, Vec<f64>)> {
    let n = r.gen_range(1..=max_len);
    let mut picks: Vec<usize> = Vec::with_capacity(n);
    while picks.len() < n {
        let j = r.gen_range(0..pool.len());
        if !picks.contains(&j) {
            picks.push(j);
        }
    }
    picks
        .into_iter()
        .map(|j| {
            let losses = (0..pool[j].len()).map(|_| r.gen::<f64>() * 4.0).collect();
            (pool[j].clone(), losses)
        })
        .collect()
}

pub fn to_core(pred: &[(Vec<u16>, Vec<f64>)]) -> Vec<(SidSequence, Vec<f64>)> {
    pred.iter().map(|(s, l)| (SidSequence::new(s.clone()), l.clone())).collect()
}

/// Every SID of `levels` tokens over `codes` codes, lexicographic.
pub fn all_sids(levels: usize, codes: usize) -> Vec<Vec<u16>> {
    let mut out = vec![Vec::new()];
    for _ in 0..levels {
        out = out
            .into_iter()
            .flat_map(|p: Vec<u16>| {
                (0..codes as u16).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

/// Orders (score, sid) best first: higher score, then smaller SID.
pub fn best_first(a: &(f64, Vec<u16>), b: &(f64, Vec<u16>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Exhaustive scoring of every SID under the tokenizer, best first.
pub fn exhaustive_tokenizer_ranking(model: &TokenizerModel, x: &[f64]) -> Vec<(f64, Vec<u16>)> {
    let spec = model.spec();
    let mut scored: Vec<(f64, Vec<u16>)> = all_sids(spec.levels, spec.codes_per_level)
        .into_iter()
        .map(|s| {
            let lp = model.sid_logprob(x, &SidSequence::new(s.clone())).unwrap();
            (lp.iter().sum(), s)
        })
        .collect();
    scored.sort_by(best_first);
    scored
}

/// Argmin of the mean per-token CE under full (uncached) passes; ties to
/// the smaller SID.
pub fn exhaustive_min_loss(model: &RecommenderModel, history: &[SidSequence], candidates: &[SidSequence]) -> (SidSequence, f64) {
    let mut best: Option<(SidSequence, f64)> = None;
    for c in candidates {
        let lp = model.next_sid_logprob(history, c).unwrap();
        let mean = -lp.iter().sum::<f64>() / lp.len() as f64;
        best = match best {
            Some((s, m)) if m < mean || (m == mean && s <= *c) => Some((s, m)),
            _ => Some((c.clone(), mean)),
        };
    }
    best.unwrap()
}

pub fn seeded(seed: u64) -> CoreRng {
    rng::seeded(seed)
}
