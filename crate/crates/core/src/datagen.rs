//! Synthetic interaction worlds: clustered item latents, user preferences,
//! Zipf popularity, and multi-behaviour labels from thresholded noisy
//! affinity. Also the leave-one-out split.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, CoreRng};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Width of latents and content features.
    pub dim: usize,
    /// Zipf exponent of item popularity (0 = none).
    pub zipf: f64,
    /// Multiplier on user·item affinity inside the sampling softmax.
    pub sharpness: f64,
    pub item_noise: f64,
    pub user_noise: f64,
    /// Noise between an item's latent and its observable content features.
    pub content_noise: f64,
    /// Use unit basis vectors as cluster centres (needs `n_clusters <= dim`).
    pub orthogonal_clusters: bool,
    /// Target positive rate per behaviour.
    pub behavior_rates: Vec<f64>,
    /// Std of the per-label noise added to affinity before thresholding.
    pub label_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            n_clusters: 8,
            dim: 16,
            zipf: 1.2,
            sharpness: 12.0,
            item_noise: 1.0,
            user_noise: 1.5,
            content_noise: 0.1,
            orthogonal_clusters: false,
            behavior_rates: vec![0.5, 0.2, 0.1],
            label_noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub item_cluster: Vec<usize>,
    pub item_latent: Vec<Vec<f64>>,
    pub content: Vec<Vec<f64>>,
    pub user_cluster: Vec<usize>,
    pub user_pref: Vec<Vec<f64>>,
    /// Unnormalised popularity weight per item.
    pub popularity: Vec<f64>,
    /// Affinity threshold per behaviour.
    pub thresholds: Vec<f64>,
}

/// One interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub timestamp: u64,
    pub labels: Vec<bool>,
}

const STREAM_WORLD: u64 = 1;
const STREAM_CALIBRATE: u64 = 2;
const STREAM_EVENTS: u64 = 3;
const CALIBRATION_SAMPLES: usize = 8192;

fn scaled_normal(r: &mut CoreRng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / math::sqrt(dim as f64);
    (0..dim).map(|_| s * rng::normal(r)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticWorld {
    /// Item-sampling distribution of `user`.
    pub fn item_probs(&self, user: usize) -> Vec<f64> {
        let mut logits: Vec<f64> = self
            .item_latent
            .iter()
            .zip(&self.popularity)
            .map(|(lat, &p)| self.config.sharpness * dot(&self.user_pref[user], lat) + math::ln(p))
            .collect();
        math::log_softmax_in_place(&mut logits);
        logits.iter().map(|v| math::exp(*v)).collect()
    }

    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        dot(&self.user_pref[user], &self.item_latent[item])
    }

    fn labels(&self, affinity: f64, r: &mut CoreRng) -> Vec<bool> {
        self.thresholds
            .iter()
            .map(|&t| affinity + self.config.label_noise * rng::normal(r) > t)
            .collect()
    }
}

/// Builds a world; fully determined by `(config, seed)`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    let c = config;
    if c.n_users == 0 || c.n_items == 0 || c.n_clusters == 0 || c.dim == 0 {
        return Err(Error::Invalid("world sizes must be positive".into()));
    }
    if c.n_clusters > c.n_items {
        return Err(Error::Invalid(alloc::format!("{} clusters for {} items", c.n_clusters, c.n_items)));
    }
    if c.orthogonal_clusters && c.n_clusters > c.dim {
        return Err(Error::Invalid("orthogonal clusters need n_clusters <= dim".into()));
    }
    if c.behavior_rates.is_empty() || c.behavior_rates.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(Error::Invalid("behaviour rates must lie in (0, 1)".into()));
    }
    for (name, v) in [
        ("zipf", c.zipf),
        ("sharpness", c.sharpness),
        ("item_noise", c.item_noise),
        ("user_noise", c.user_noise),
        ("content_noise", c.content_noise),
        ("label_noise", c.label_noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Invalid(alloc::format!("{name} must be finite and >= 0")));
        }
    }
    let mut r = rng::seeded(rng::split(seed, STREAM_WORLD));
    let centres: Vec<Vec<f64>> = (0..c.n_clusters)
        .map(|k| {
            if c.orthogonal_clusters {
                let mut e = vec![0.0; c.dim];
                e[k] = 1.0;
                e
            } else {
                let v: Vec<f64> = (0..c.dim).map(|_| rng::normal(&mut r)).collect();
                let n = math::sqrt(dot(&v, &v)).max(1e-12);
                v.iter().map(|x| x / n).collect()
            }
        })
        .collect();
    let item_cluster: Vec<usize> = (0..c.n_items).map(|i| i % c.n_clusters).collect();
    let item_latent: Vec<Vec<f64>> = item_cluster
        .iter()
        .map(|&k| {
            let noise = scaled_normal(&mut r, c.dim, c.item_noise);
            centres[k].iter().zip(noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    let user_cluster: Vec<usize> = (0..c.n_users).map(|_| r.gen_range(0..c.n_clusters)).collect();
    let user_pref: Vec<Vec<f64>> = user_cluster
        .iter()
        .map(|&k| {
            let noise = scaled_normal(&mut r, c.dim, c.user_noise);
            centres[k].iter().zip(noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut ranks: Vec<usize> = (1..=c.n_items).collect();
    rng::shuffle(&mut r, &mut ranks);
    let popularity: Vec<f64> = ranks.iter().map(|&k| libm::pow(k as f64, -c.zipf)).collect();
    let content: Vec<Vec<f64>> = item_latent
        .iter()
        .map(|lat| {
            let noise = scaled_normal(&mut r, c.dim, c.content_noise);
            lat.iter().zip(noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut world = SyntheticWorld {
        config: c.clone(),
        seed,
        item_cluster,
        item_latent,
        content,
        user_cluster,
        user_pref,
        popularity,
        thresholds: vec![0.0; c.behavior_rates.len()],
    };
    world.thresholds = calibrate_thresholds(&world, seed);
    Ok(world)
}

/// Thresholds placing each behaviour's positive rate at its target on a
/// calibration sample drawn from the world's own event distribution.
fn calibrate_thresholds(world: &SyntheticWorld, seed: u64) -> Vec<f64> {
    let c = &world.config;
    let mut r = rng::seeded(rng::split(seed, STREAM_CALIBRATE));
    let probs: Vec<Vec<f64>> = (0..c.n_users).map(|u| world.item_probs(u)).collect();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(CALIBRATION_SAMPLES); c.behavior_rates.len()];
    for _ in 0..CALIBRATION_SAMPLES {
        let u = r.gen_range(0..c.n_users);
        let i = rng::weighted_index(&mut r, &probs[u]).unwrap_or(0);
        let a = world.affinity(u, i);
        for s in scores.iter_mut() {
            s.push(a + c.label_noise * rng::normal(&mut r));
        }
    }
    scores
        .iter_mut()
        .zip(&c.behavior_rates)
        .map(|(s, &rate)| {
            s.sort_by(f64::total_cmp);
            let pos = libm::round((1.0 - rate) * (s.len() - 1) as f64) as usize;
            s[pos]
        })
        .collect()
}

/// Draws `n_events` interactions. Users receive near-equal event counts,
/// interleaved along one shuffled global timeline; timestamps are
/// positions on that timeline.
pub fn generate_stream(world: &SyntheticWorld, n_events: usize) -> Result<Vec<Event>> {
    let n_users = world.config.n_users;
    if n_events < n_users {
        return Err(Error::Invalid(alloc::format!("{n_events} events for {n_users} users")));
    }
    let mut r = rng::seeded(rng::split(world.seed, STREAM_EVENTS));
    let mut slots: Vec<u32> = (0..n_events).map(|e| (e % n_users) as u32).collect();
    rng::shuffle(&mut r, &mut slots);
    let probs: Vec<Vec<f64>> = (0..n_users).map(|u| world.item_probs(u)).collect();
    let mut events = Vec::with_capacity(n_events);
    for (t, &u) in slots.iter().enumerate() {
        let item = rng::weighted_index(&mut r, &probs[u as usize]).unwrap_or(0);
        let labels = world.labels(world.affinity(u as usize, item), &mut r);
        events.push(Event { user: u, item: item as u32, timestamp: t as u64, labels });
    }
    Ok(events)
}

/// One user's leave-one-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user: u32,
    pub train: Vec<Event>,
    pub valid: Option<Event>,
    pub test: Option<Event>,
}

impl UserSplit {
    /// Training items, oldest first, truncated to the `n_max` most recent.
    pub fn train_history(&self, n_max: usize) -> Vec<u32> {
        let items: Vec<u32> = self.train.iter().map(|e| e.item).collect();
        items[items.len().saturating_sub(n_max)..].to_vec()
    }

    /// History preceding the test target: training plus validation items.
    pub fn test_history(&self, n_max: usize) -> Vec<u32> {
        let mut items: Vec<u32> = self.train.iter().map(|e| e.item).collect();
        if let Some(v) = &self.valid {
            items.push(v.item);
        }
        items[items.len().saturating_sub(n_max)..].to_vec()
    }
}

/// Last event per user → test, second-to-last → validation, the rest →
/// train. Users with fewer than three events keep everything in train.
/// Fails if a user's timestamps are not strictly increasing.
pub fn leave_one_out_split(events: &[Event]) -> Result<Vec<UserSplit>> {
    let mut by_user: BTreeMap<u32, Vec<Event>> = BTreeMap::new();
    for e in events {
        let list = by_user.entry(e.user).or_default();
        if let Some(prev) = list.last() {
            if e.timestamp <= prev.timestamp {
                return Err(Error::Invalid(alloc::format!(
                    "user {} timestamps not increasing ({} after {})",
                    e.user,
                    e.timestamp,
                    prev.timestamp
                )));
            }
        }
        list.push(e.clone());
    }
    Ok(by_user
        .into_iter()
        .map(|(user, mut list)| {
            if list.len() < 3 {
                return UserSplit { user, train: list, valid: None, test: None };
            }
            let test = list.pop();
            let valid = list.pop();
            UserSplit { user, train: list, valid, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WorldConfig {
        WorldConfig { n_users: 40, n_items: 30, n_clusters: 3, dim: 6, ..WorldConfig::default() }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&tiny(), 3).unwrap();
        let b = generate_world(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_stream(&a, 200).unwrap(), generate_stream(&b, 200).unwrap());
        assert_ne!(a, generate_world(&tiny(), 4).unwrap());
    }

    #[test]
    fn zero_noise_clusters_share_content() {
        let cfg = WorldConfig { item_noise: 0.0, content_noise: 0.0, ..tiny() };
        let w = generate_world(&cfg, 1).unwrap();
        assert_eq!(w.content[0], w.content[3]);
        assert_ne!(w.content[0], w.content[1]);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(generate_world(&WorldConfig { n_clusters: 31, ..tiny() }, 0).is_err());
        assert!(generate_world(&WorldConfig { n_users: 0, ..tiny() }, 0).is_err());
        let w = generate_world(&tiny(), 0).unwrap();
        assert!(generate_stream(&w, 39).is_err());
    }

    #[test]
    fn timestamps_increase_per_user() {
        let w = generate_world(&tiny(), 2).unwrap();
        let ev = generate_stream(&w, 400).unwrap();
        assert_eq!(ev.len(), 400);
        let split = leave_one_out_split(&ev).unwrap();
        assert_eq!(split.len(), 40);
        assert!(split.iter().all(|s| s.train.len() == 8 && s.valid.is_some() && s.test.is_some()));
    }

    #[test]
    fn five_event_user_split() {
        let ev: Vec<Event> = (0..5)
            .map(|t| Event { user: 1, item: t as u32 + 10, timestamp: t, labels: vec![] })
            .chain((0..2).map(|t| Event { user: 2, item: 0, timestamp: t, labels: vec![] }))
            .collect();
        let s = leave_one_out_split(&ev).unwrap();
        assert_eq!(s[0].train.len(), 3);
        assert_eq!(s[0].valid.as_ref().unwrap().item, 13);
        assert_eq!(s[0].test.as_ref().unwrap().item, 14);
        assert_eq!(s[0].test_history(50), vec![10, 11, 12, 13]);
        assert_eq!(s[0].train_history(2), vec![11, 12]);
        assert_eq!(s[1].train.len(), 2);
        assert!(s[1].valid.is_none() && s[1].test.is_none());
    }

    #[test]
    fn rejects_non_monotone_user_time() {
        let ev = vec![
            Event { user: 0, item: 0, timestamp: 5, labels: vec![] },
            Event { user: 0, item: 1, timestamp: 5, labels: vec![] },
        ];
        assert!(leave_one_out_split(&ev).is_err());
    }
}
