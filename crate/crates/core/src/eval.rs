//! Ranking metrics and codebook-utilisation diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::index::{BeamIndex, ItemId};
use crate::math;
use crate::sid::CodebookSpec;

/// A user's ranked recommendations and held-out target.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub user: u32,
    pub ranked: Vec<ItemId>,
    pub target: ItemId,
}

impl RankingResult {
    /// 1-based rank of the target within the first `k`, if present.
    pub fn rank(&self, k: usize) -> Option<usize> {
        self.ranked.iter().take(k).position(|&i| i == self.target).map(|p| p + 1)
    }
}

fn check(results: &[RankingResult], k: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Invalid("no ranking results".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    Ok(())
}

/// Fraction of users whose target appears in the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let hits = results.iter().filter(|r| r.rank(k).is_some()).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over users (0 when outside the top `k`).
pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let total: f64 = results
        .iter()
        .filter_map(|r| r.rank(k))
        .map(|rank| 1.0 / math::log2(rank as f64 + 1.0))
        .sum();
    Ok(total / results.len() as f64)
}

/// Per-level code counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookUsage {
    pub counts: Vec<Vec<u64>>,
}

impl CodebookUsage {
    /// Counts from each indexed item's top-weight SID, or from every alias.
    pub fn from_index(index: &BeamIndex, spec: &CodebookSpec, all_aliases: bool) -> Self {
        let mut counts = vec![vec![0u64; spec.codes_per_level]; spec.levels];
        let mut add = |tokens: &[u16]| {
            for (lvl, &t) in tokens.iter().enumerate().take(spec.levels) {
                if (t as usize) < spec.codes_per_level {
                    counts[lvl][t as usize] += 1;
                }
            }
        };
        if all_aliases {
            for sid in index.sids() {
                add(sid.tokens());
            }
        } else {
            for item in index.items() {
                if let Some(sid) = index.top_sid(item) {
                    add(sid.tokens());
                }
            }
        }
        Self { counts }
    }

    pub fn levels(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self, level: usize) -> u64 {
        self.counts[level].iter().sum()
    }
}

/// Shannon entropy in bits of one count vector.
pub fn entropy_bits(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("entropy of an empty count vector".into()));
    }
    let n = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * math::log2(p);
        }
    }
    Ok(h)
}

/// Per-level entropy (bits) and its mean over levels.
pub fn codebook_entropy(usage: &CodebookUsage) -> Result<(Vec<f64>, f64)> {
    let per: Vec<f64> = usage.counts.iter().map(|c| entropy_bits(c)).collect::<Result<_>>()?;
    let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
    Ok((per, mean))
}

/// Per-level fraction of codes in use.
pub fn codebook_density(usage: &CodebookUsage) -> Result<Vec<f64>> {
    usage
        .counts
        .iter()
        .map(|c| {
            if c.iter().all(|&v| v == 0) {
                return Err(Error::Invalid("density of an empty count vector".into()));
            }
            Ok(c.iter().filter(|&&v| v > 0).count() as f64 / c.len() as f64)
        })
        .collect()
}

/// The `k` most frequent items (ties: smaller id).
pub fn most_popular(items: impl IntoIterator<Item = ItemId>, k: usize) -> Vec<ItemId> {
    let mut counts: alloc::collections::BTreeMap<ItemId, u64> = alloc::collections::BTreeMap::new();
    for i in items {
        *counts.entry(i).or_default() += 1;
    }
    let mut ranked: Vec<(ItemId, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sid::SidSequence;

    fn res(ranked: &[u32], target: u32) -> RankingResult {
        RankingResult { user: 0, ranked: ranked.to_vec(), target }
    }

    #[test]
    fn recall_and_ndcg_closed_forms() {
        let all_first = [res(&[1, 2], 1), res(&[3, 1], 3)];
        assert_eq!(recall_at_k(&all_first, 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&all_first, 10).unwrap(), 1.0);
        let none = [res(&[1, 2], 9)];
        assert_eq!(recall_at_k(&none, 10).unwrap(), 0.0);
        let second = [res(&[1, 2], 2)];
        assert!((ndcg_at_k(&second, 5).unwrap() - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(recall_at_k(&second, 1).unwrap(), 0.0);
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&second, 0).is_err());
    }

    #[test]
    fn entropy_and_density() {
        assert!((entropy_bits(&[1; 256]).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(entropy_bits(&[0, 7, 0]).unwrap(), 0.0);
        let usage = CodebookUsage { counts: vec![[vec![1u64; 128], vec![0; 128]].concat()] };
        assert_eq!(codebook_density(&usage).unwrap(), vec![0.5]);
        assert!(entropy_bits(&[0, 0]).is_err());
    }

    #[test]
    fn usage_from_index() {
        let spec = CodebookSpec::new(2, 4, 1).unwrap();
        let mut idx = BeamIndex::new(2).unwrap();
        idx.insert_link(0, SidSequence::new(vec![1, 2]), 5.0, 0).unwrap();
        idx.insert_link(0, SidSequence::new(vec![3, 3]), 1.0, 0).unwrap();
        idx.insert_link(1, SidSequence::new(vec![1, 0]), 5.0, 0).unwrap();
        let top = CodebookUsage::from_index(&idx, &spec, false);
        assert_eq!(top.counts, vec![vec![0, 2, 0, 0], vec![1, 0, 1, 0]]);
        let all = CodebookUsage::from_index(&idx, &spec, true);
        assert_eq!(all.total(0), 3);
    }

    #[test]
    fn popularity_ties_by_id() {
        assert_eq!(most_popular([5, 3, 5, 3, 1], 2), vec![3, 5]);
    }
}
