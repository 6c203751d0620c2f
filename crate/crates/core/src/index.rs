//! The beam index: a bi-directional, one-to-many item/SID store.
//!
//! Each item holds up to `B` weighted SID aliases; each SID is owned by at
//! most one item. [`BeamIndex::update`] applies one round of weight
//! evolution and pruning for an item given freshly predicted SIDs:
//!
//! 1. relevance weight `W = A - Σ_l CE_l` for every predicted SID;
//! 2. momentum merge of stored and current weights over fetched ∪ predicted;
//! 3. forward-consistency (drop fetched SIDs the reverse map no longer
//!    assigns to this item) and temporal ownership (steal a predicted SID
//!    from another item only if that link is older than `Δt`);
//! 4. keep the top-`B` survivors by weight.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sid::SidSequence;

pub type ItemId = u32;

/// Knobs of the index evolution rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexConfig {
    /// Momentum on the stored weight when a SID is re-predicted.
    pub gamma: f64,
    /// Links younger than this (in logical time) are never stolen.
    pub delta_t: u64,
    /// Per-item alias capacity `B`.
    pub capacity: usize,
    /// Weight offset `A`.
    pub offset: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { gamma: 0.9, delta_t: 1000, capacity: 8, offset: 100.0 }
    }
}

/// Relevance weight of a SID: `A - Σ_l CE_l` (unnormalised sum).
pub fn relevance_weight(ce_losses: &[f64], offset: f64) -> f64 {
    let mut total = 0.0;
    for l in ce_losses {
        total += l;
    }
    offset - total
}

/// Piecewise momentum merge of a stored and a current weight.
pub fn momentum_merge(old: Option<f64>, cur: Option<f64>, gamma: f64) -> Result<f64> {
    match (old, cur) {
        (Some(o), Some(c)) => Ok(gamma * o + (1.0 - gamma) * c),
        (None, Some(c)) => Ok(c),
        (Some(o), None) => Ok(o),
        (None, None) => Err(Error::Invalid("momentum merge needs a stored or a current weight".into())),
    }
}

/// One item-to-SID link.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub item: ItemId,
    pub sid: SidSequence,
    pub weight: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Link {
    sid: SidSequence,
    weight: f64,
    timestamp: u64,
}

/// Links created and severed by one update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateDelta {
    pub added: Vec<(ItemId, SidSequence)>,
    pub removed: Vec<(ItemId, SidSequence)>,
}

impl UpdateDelta {
    pub fn churn(&self) -> usize {
        self.added.len() + self.removed.len()
    }

    pub fn extend(&mut self, other: UpdateDelta) {
        self.added.extend(other.added);
        self.removed.extend(other.removed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamIndex {
    capacity: usize,
    clock: u64,
    forward: BTreeMap<ItemId, Vec<Link>>,
    reverse: BTreeMap<SidSequence, (ItemId, u64)>,
}

fn link_order(a: &Link, b: &Link) -> core::cmp::Ordering {
    b.weight.total_cmp(&a.weight).then_with(|| a.sid.cmp(&b.sid))
}

impl BeamIndex {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("index capacity must be >= 1".into()));
        }
        Ok(Self { capacity, clock: 0, forward: BTreeMap::new(), reverse: BTreeMap::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn item_count(&self) -> usize {
        self.forward.len()
    }

    pub fn link_count(&self) -> usize {
        self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reverse.is_empty()
    }

    /// Point-in-time copy; later updates do not affect it.
    pub fn snapshot(&self) -> BeamIndex {
        self.clone()
    }

    /// Entries of `item`, highest weight first (ties: smaller SID).
    pub fn forward_lookup(&self, item: ItemId) -> Vec<IndexEntry> {
        self.forward
            .get(&item)
            .map(|links| {
                links
                    .iter()
                    .map(|l| IndexEntry { item, sid: l.sid.clone(), weight: l.weight, timestamp: l.timestamp })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Highest-weight SID of `item`.
    pub fn top_sid(&self, item: ItemId) -> Option<&SidSequence> {
        self.forward.get(&item).and_then(|l| l.first()).map(|l| &l.sid)
    }

    pub fn reverse_lookup(&self, sid: &SidSequence) -> Option<(ItemId, u64)> {
        self.reverse.get(sid).copied()
    }

    /// Items with at least one link, ascending.
    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.forward.keys().copied()
    }

    /// All owned SIDs, ascending.
    pub fn sids(&self) -> impl Iterator<Item = &SidSequence> {
        self.reverse.keys()
    }

    /// Every link, by item then descending weight.
    pub fn entries(&self) -> impl Iterator<Item = IndexEntry> + '_ {
        self.forward.iter().flat_map(|(&item, links)| {
            links
                .iter()
                .map(move |l| IndexEntry { item, sid: l.sid.clone(), weight: l.weight, timestamp: l.timestamp })
        })
    }

    /// Inserts one link directly (warm-up one-to-one mappings, file import).
    /// The SID must be unowned and the item below capacity.
    pub fn insert_link(&mut self, item: ItemId, sid: SidSequence, weight: f64, timestamp: u64) -> Result<()> {
        if !weight.is_finite() {
            return Err(Error::NonFinite(alloc::format!("weight of item {item}")));
        }
        if timestamp > self.clock {
            self.clock = timestamp;
        }
        if let Some((owner, _)) = self.reverse.get(&sid) {
            return Err(Error::Invalid(alloc::format!("SID {sid} already owned by item {owner}")));
        }
        let links = self.forward.entry(item).or_default();
        if links.len() >= self.capacity {
            return Err(Error::Invalid(alloc::format!("item {item} already holds {} links", links.len())));
        }
        links.push(Link { sid: sid.clone(), weight, timestamp });
        links.sort_by(link_order);
        self.reverse.insert(sid, (item, timestamp));
        Ok(())
    }

    /// Sets the logical clock (import only); must not go backwards.
    pub fn set_clock(&mut self, clock: u64) -> Result<()> {
        if clock < self.clock {
            return Err(Error::TimeRegression { now: clock, clock: self.clock });
        }
        self.clock = clock;
        Ok(())
    }

    fn remove_forward(&mut self, item: ItemId, sid: &SidSequence) {
        if let Some(links) = self.forward.get_mut(&item) {
            links.retain(|l| &l.sid != sid);
            if links.is_empty() {
                self.forward.remove(&item);
            }
        }
    }

    /// One evolution round for `item` given predicted SIDs and their
    /// per-level cross-entropies. Returns the links added and removed.
    pub fn update(
        &mut self,
        item: ItemId,
        predicted: &[(SidSequence, Vec<f64>)],
        now: u64,
        config: &IndexConfig,
    ) -> Result<UpdateDelta> {
        if now < self.clock {
            return Err(Error::TimeRegression { now, clock: self.clock });
        }
        if predicted.is_empty() {
            return Err(Error::Invalid("update needs at least one predicted SID".into()));
        }
        if config.capacity != self.capacity {
            return Err(Error::Invalid(alloc::format!(
                "config capacity {} differs from index capacity {}",
                config.capacity,
                self.capacity
            )));
        }
        let mut seen = BTreeSet::new();
        for (sid, losses) in predicted {
            if !seen.insert(sid) {
                return Err(Error::Invalid(alloc::format!("SID {sid} predicted twice")));
            }
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("loss of predicted SID {sid}")));
            }
        }

        // Step 1: current weights.
        let current: BTreeMap<&SidSequence, f64> =
            predicted.iter().map(|(sid, l)| (sid, relevance_weight(l, config.offset))).collect();

        // Step 2: momentum merge over fetched ∪ predicted.
        let fetched: Vec<Link> = self.forward.get(&item).cloned().unwrap_or_default();
        let fetched_by_sid: BTreeMap<&SidSequence, &Link> = fetched.iter().map(|l| (&l.sid, l)).collect();
        let mut merged: BTreeMap<SidSequence, Link> = BTreeMap::new();
        for link in &fetched {
            let cur = current.get(&link.sid).copied();
            let weight = momentum_merge(Some(link.weight), cur, config.gamma)?;
            let timestamp = if cur.is_some() { now } else { link.timestamp };
            merged.insert(link.sid.clone(), Link { sid: link.sid.clone(), weight, timestamp });
        }
        for (sid, &cur) in &current {
            if !fetched_by_sid.contains_key(sid) {
                let weight = momentum_merge(None, Some(cur), config.gamma)?;
                merged.insert((*sid).clone(), Link { sid: (*sid).clone(), weight, timestamp: now });
            }
        }

        // Step 3: graph integrity pruning.
        let mut delta = UpdateDelta::default();
        let stale_before = now.checked_sub(config.delta_t);
        let sids: Vec<SidSequence> = merged.keys().cloned().collect();
        for sid in sids {
            let owner = self.reverse.get(&sid).copied();
            if fetched_by_sid.contains_key(&sid) {
                if owner.map(|(o, _)| o) == Some(item) {
                    continue;
                }
                // Forward consistency: the reverse map moved on.
                merged.remove(&sid);
                let Some(&cur) = current.get(&sid) else { continue };
                // Re-entry through the predicted set.
                match owner {
                    None => {
                        merged.insert(sid.clone(), Link { sid, weight: cur, timestamp: now });
                    }
                    Some((j, ts)) => {
                        if stale_before.is_some_and(|limit| ts < limit) {
                            self.steal(j, &sid, &mut delta);
                            merged.insert(sid.clone(), Link { sid, weight: cur, timestamp: now });
                        }
                    }
                }
            } else if let Some((j, ts)) = owner {
                if j == item {
                    continue;
                }
                // Temporal ownership resolution.
                if stale_before.is_some_and(|limit| ts < limit) {
                    self.steal(j, &sid, &mut delta);
                } else {
                    merged.remove(&sid);
                }
            }
        }

        // Step 4: top-B consolidation.
        let mut survivors: Vec<Link> = merged.into_values().collect();
        survivors.sort_by(link_order);
        survivors.truncate(self.capacity);

        let kept: BTreeSet<&SidSequence> = survivors.iter().map(|l| &l.sid).collect();
        for link in &fetched {
            if !kept.contains(&link.sid) && self.reverse.get(&link.sid).map(|o| o.0) == Some(item) {
                self.reverse.remove(&link.sid);
                delta.removed.push((item, link.sid.clone()));
            }
        }
        for link in &survivors {
            if !fetched_by_sid.contains_key(&link.sid) || self.reverse.get(&link.sid).map(|o| o.0) != Some(item) {
                delta.added.push((item, link.sid.clone()));
            }
            self.reverse.insert(link.sid.clone(), (item, link.timestamp));
        }
        if survivors.is_empty() {
            self.forward.remove(&item);
        } else {
            self.forward.insert(item, survivors);
        }
        self.clock = now;
        Ok(delta)
    }

    fn steal(&mut self, owner: ItemId, sid: &SidSequence, delta: &mut UpdateDelta) {
        self.remove_forward(owner, sid);
        self.reverse.remove(sid);
        delta.removed.push((owner, sid.clone()));
    }

    /// Applies several updates in order, accumulating the deltas.
    pub fn update_many(
        &mut self,
        updates: &[(ItemId, Vec<(SidSequence, Vec<f64>)>, u64)],
        config: &IndexConfig,
    ) -> Result<UpdateDelta> {
        let mut total = UpdateDelta::default();
        for (item, predicted, now) in updates {
            total.extend(self.update(*item, predicted, *now, config)?);
        }
        Ok(total)
    }

    /// Verifies capacity, reverse functionality and forward/reverse
    /// consistency.
    pub fn check_invariants(&self) -> Result<()> {
        let mut forward_links = 0;
        for (&item, links) in &self.forward {
            if links.is_empty() {
                return Err(Error::Invalid(alloc::format!("item {item} has an empty link list")));
            }
            if links.len() > self.capacity {
                return Err(Error::Invalid(alloc::format!("item {item} holds {} > B links", links.len())));
            }
            for w in links.windows(2) {
                if link_order(&w[0], &w[1]) != core::cmp::Ordering::Less {
                    return Err(Error::Invalid(alloc::format!("item {item} links out of order")));
                }
            }
            for l in links {
                if !l.weight.is_finite() || l.timestamp > self.clock {
                    return Err(Error::Invalid(alloc::format!("item {item} link {} has bad weight/time", l.sid)));
                }
                match self.reverse.get(&l.sid) {
                    Some(&(owner, ts)) if owner == item && ts == l.timestamp => {}
                    other => {
                        return Err(Error::Invalid(alloc::format!(
                            "item {item} lists {} but reverse says {other:?}",
                            l.sid
                        )))
                    }
                }
            }
            forward_links += links.len();
        }
        if forward_links != self.reverse.len() {
            return Err(Error::Invalid("reverse map holds links absent from the forward map".into()));
        }
        Ok(())
    }
}
