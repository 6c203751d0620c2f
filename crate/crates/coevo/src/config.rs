//! Run configuration: a flat `key = value` namespace over every knob of a
//! run, loadable from a file and overridable from the command line.
//!
//! ```text
//! # comment
//! seed = 7
//! world.users = 500
//! train.filter_threshold = auto
//! ```
//!
//! Unknown keys are rejected by name. Keys under `manifest.` are ignored so
//! that a run's manifest can be fed back in as a config. The canonical form
//! (every key, sorted, shortest round-trip floats) is what gets hashed and
//! written to manifests.

use std::path::Path;

use coevo_core::coevolution::{SelectionPool, TrainingConfig};
use coevo_core::datagen::WorldConfig;
use coevo_core::tokenizer::SearchStrategy;
use coevo_core::CodebookSpec;
use sha2::{Digest, Sha256};

use crate::error::{read_file, HarnessError, Result};

/// Where interaction data comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Event file; empty means "synthesise from `world`".
    pub events: String,
    /// Catalog file; required exactly when `events` is set.
    pub catalog: String,
    /// Events drawn when synthesising.
    pub n_events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookConfig {
    pub levels: usize,
    pub codes: usize,
    pub kmeans_iters: usize,
}

/// Loop sizes and evaluation cadence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub warmup_batch: usize,
    pub dynamic_batch: usize,
    pub dynamic_steps: usize,
    /// Warm-up steps between validation passes (and scheduler checks).
    pub eval_every: usize,
    /// Dynamic steps between ranking evaluations (0 = only at the end).
    pub dynamic_eval_every: usize,
    /// Validation users for the scheduler (0 = all).
    pub validation_users: usize,
    /// Decode beam width for ranking evaluation.
    pub eval_beam: usize,
    /// Steps between progress lines on stderr (0 = silent).
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub codebook: CodebookConfig,
    /// Model, loss and optimiser settings. Widths that follow from the data
    /// (content width, behaviour count) and the seed are filled in by
    /// [`RunConfig::training_config`].
    pub train: TrainingConfig,
    /// `None` selects the default threshold for the codebook.
    pub filter_threshold: Option<f64>,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let codebook = CodebookConfig { levels: 3, codes: 64, kmeans_iters: 25 };
        let world = WorldConfig::default();
        let spec = CodebookSpec { levels: codebook.levels, codes_per_level: codebook.codes, dim: world.dim };
        Self {
            seed: 7,
            world,
            data: DataConfig { events: String::new(), catalog: String::new(), n_events: 40_000 },
            codebook,
            train: TrainingConfig::for_spec(&spec),
            filter_threshold: None,
            run: RunSettings {
                warmup_batch: 16,
                dynamic_batch: 4,
                dynamic_steps: 2000,
                eval_every: 50,
                dynamic_eval_every: 500,
                validation_users: 200,
                eval_beam: 64,
                log_every: 0,
            },
        }
    }
}

enum Slot<'a> {
    U64(&'a mut u64),
    Usize(&'a mut usize),
    F64(&'a mut f64),
    Bool(&'a mut bool),
    F64List(&'a mut Vec<f64>),
    Text(&'a mut String),
    Search(&'a mut SearchStrategy),
    Pool(&'a mut SelectionPool),
    Threshold(&'a mut Option<f64>),
}

fn parse<T: std::str::FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("cannot parse {raw:?}"))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Slot<'_> {
    fn set(self, raw: &str) -> std::result::Result<(), String> {
        match self {
            Slot::U64(v) => *v = parse(raw)?,
            Slot::Usize(v) => *v = parse(raw)?,
            Slot::F64(v) => *v = parse(raw)?,
            Slot::Bool(v) => *v = parse(raw)?,
            Slot::F64List(v) => {
                *v = if raw.is_empty() { Vec::new() } else { raw.split(',').map(|s| parse(s.trim())).collect::<std::result::Result<_, _>>()? }
            }
            Slot::Text(v) => *v = raw.to_string(),
            Slot::Search(v) => {
                *v = match raw {
                    "exact" => SearchStrategy::Exact,
                    "length-synchronous" => SearchStrategy::LengthSynchronous,
                    _ => return Err(format!("expected exact or length-synchronous, got {raw:?}")),
                }
            }
            Slot::Pool(v) => {
                *v = match raw {
                    "owned" => SelectionPool::Owned,
                    "all-candidates" => SelectionPool::AllCandidates,
                    _ => return Err(format!("expected owned or all-candidates, got {raw:?}")),
                }
            }
            Slot::Threshold(v) => *v = if raw == "auto" { None } else { Some(parse(raw)?) },
        }
        Ok(())
    }

    fn render(&self) -> String {
        match self {
            Slot::U64(v) => v.to_string(),
            Slot::Usize(v) => v.to_string(),
            Slot::F64(v) => fmt_f64(**v),
            Slot::Bool(v) => v.to_string(),
            Slot::F64List(v) => v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(","),
            Slot::Text(v) => v.to_string(),
            Slot::Search(v) => match v {
                SearchStrategy::Exact => "exact".into(),
                SearchStrategy::LengthSynchronous => "length-synchronous".into(),
            },
            Slot::Pool(v) => match v {
                SelectionPool::Owned => "owned".into(),
                SelectionPool::AllCandidates => "all-candidates".into(),
            },
            Slot::Threshold(v) => v.map_or_else(|| "auto".into(), fmt_f64),
        }
    }
}

impl RunConfig {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let w = &mut self.world;
        let t = &mut self.train;
        let r = &mut self.run;
        vec![
            ("seed", Slot::U64(&mut self.seed)),
            ("world.users", Slot::Usize(&mut w.n_users)),
            ("world.items", Slot::Usize(&mut w.n_items)),
            ("world.clusters", Slot::Usize(&mut w.n_clusters)),
            ("world.dim", Slot::Usize(&mut w.dim)),
            ("world.zipf", Slot::F64(&mut w.zipf)),
            ("world.sharpness", Slot::F64(&mut w.sharpness)),
            ("world.item_noise", Slot::F64(&mut w.item_noise)),
            ("world.user_noise", Slot::F64(&mut w.user_noise)),
            ("world.content_noise", Slot::F64(&mut w.content_noise)),
            ("world.orthogonal_clusters", Slot::Bool(&mut w.orthogonal_clusters)),
            ("world.behavior_rates", Slot::F64List(&mut w.behavior_rates)),
            ("world.label_noise", Slot::F64(&mut w.label_noise)),
            ("data.events", Slot::Text(&mut self.data.events)),
            ("data.catalog", Slot::Text(&mut self.data.catalog)),
            ("data.n_events", Slot::Usize(&mut self.data.n_events)),
            ("codebook.levels", Slot::Usize(&mut self.codebook.levels)),
            ("codebook.codes", Slot::Usize(&mut self.codebook.codes)),
            ("codebook.kmeans_iters", Slot::Usize(&mut self.codebook.kmeans_iters)),
            ("weights.lambda1", Slot::F64(&mut t.weights.lambda1)),
            ("weights.lambda2", Slot::F64(&mut t.weights.lambda2)),
            ("weights.w_item", Slot::F64(&mut t.weights.w_item)),
            ("weights.w_xtr", Slot::F64(&mut t.weights.w_xtr)),
            ("weights.w_ref", Slot::F64(&mut t.weights.w_ref)),
            ("weights.eta", Slot::F64(&mut t.weights.eta)),
            ("index.gamma", Slot::F64(&mut t.index.gamma)),
            ("index.delta_t", Slot::U64(&mut t.index.delta_t)),
            ("index.capacity", Slot::Usize(&mut t.index.capacity)),
            ("index.offset", Slot::F64(&mut t.index.offset)),
            ("train.beam_width", Slot::Usize(&mut t.beam_width)),
            ("train.search", Slot::Search(&mut t.search)),
            ("train.selection", Slot::Pool(&mut t.selection)),
            ("train.filter_threshold", Slot::Threshold(&mut self.filter_threshold)),
            ("train.offline", Slot::Bool(&mut t.offline)),
            ("lr.warmup.recommender", Slot::F64(&mut t.rates.recommender)),
            ("lr.warmup.tokenizer", Slot::F64(&mut t.rates.tokenizer)),
            ("lr.warmup.reference", Slot::F64(&mut t.rates.reference)),
            ("lr.warmup.csa", Slot::F64(&mut t.rates.csa)),
            ("lr.warmup.weight_decay", Slot::F64(&mut t.rates.weight_decay)),
            ("lr.dynamic.recommender", Slot::F64(&mut t.dynamic_rates.recommender)),
            ("lr.dynamic.tokenizer", Slot::F64(&mut t.dynamic_rates.tokenizer)),
            ("lr.dynamic.reference", Slot::F64(&mut t.dynamic_rates.reference)),
            ("lr.dynamic.csa", Slot::F64(&mut t.dynamic_rates.csa)),
            ("lr.dynamic.weight_decay", Slot::F64(&mut t.dynamic_rates.weight_decay)),
            ("schedule.rel_tol", Slot::F64(&mut t.schedule.rel_tol)),
            ("schedule.patience", Slot::Usize(&mut t.schedule.patience)),
            ("schedule.max_warmup_steps", Slot::U64(&mut t.schedule.max_warmup_steps)),
            ("recommender.dim", Slot::Usize(&mut t.recommender.dim)),
            ("recommender.heads", Slot::Usize(&mut t.recommender.heads)),
            ("recommender.ff", Slot::Usize(&mut t.recommender.ff)),
            ("recommender.blocks", Slot::Usize(&mut t.recommender.blocks)),
            ("recommender.history_len", Slot::Usize(&mut t.recommender.n_max)),
            ("recommender.zero_output", Slot::Bool(&mut t.recommender.zero_output)),
            ("tokenizer.dim", Slot::Usize(&mut t.tokenizer.dim)),
            ("tokenizer.heads", Slot::Usize(&mut t.tokenizer.heads)),
            ("tokenizer.ff", Slot::Usize(&mut t.tokenizer.ff)),
            ("tokenizer.blocks", Slot::Usize(&mut t.tokenizer.blocks)),
            ("tokenizer.zero_output", Slot::Bool(&mut t.tokenizer.zero_output)),
            ("csa.collab_dim", Slot::Usize(&mut t.csa.collab_dim)),
            ("csa.hidden", Slot::Usize(&mut t.csa.hidden)),
            ("csa.collab_init_std", Slot::F64(&mut t.csa.collab_init_std)),
            ("csa.zero_output", Slot::Bool(&mut t.csa.zero_output)),
            ("run.warmup_batch", Slot::Usize(&mut r.warmup_batch)),
            ("run.dynamic_batch", Slot::Usize(&mut r.dynamic_batch)),
            ("run.dynamic_steps", Slot::Usize(&mut r.dynamic_steps)),
            ("run.eval_every", Slot::Usize(&mut r.eval_every)),
            ("run.dynamic_eval_every", Slot::Usize(&mut r.dynamic_eval_every)),
            ("run.validation_users", Slot::Usize(&mut r.validation_users)),
            ("run.eval_beam", Slot::Usize(&mut r.eval_beam)),
            ("run.log_every", Slot::Usize(&mut r.log_every)),
        ]
    }

    /// Every recognised key, in canonical order.
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<_> = RunConfig::default().slots().into_iter().map(|(k, _)| k).collect();
        keys.sort_unstable();
        keys
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .slots()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| s)
            .ok_or_else(|| HarnessError::Config(format!("unknown key `{key}`")))?;
        slot.set(value.trim()).map_err(|e| HarnessError::Config(format!("`{key}`: {e}")))
    }

    /// Current value of one key, as it would be written.
    pub fn get(&self, key: &str) -> Option<String> {
        let mut copy = self.clone();
        let slots = copy.slots();
        slots.into_iter().find(|(k, _)| *k == key).map(|(_, s)| s.render())
    }

    /// Applies `key = value` lines. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if key.starts_with("manifest.") {
                continue;
            }
            self.set(key, value).map_err(|e| match e {
                HarnessError::Config(msg) => HarnessError::Config(format!("{origin}:{}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&read_file(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `--key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for raw in overrides {
            let body = raw
                .strip_prefix("--")
                .ok_or_else(|| HarnessError::Config(format!("expected --key=value, got `{raw}`")))?;
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("expected --key=value, got `{raw}`")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Every key with its value, one `key = value` line each, sorted.
    pub fn canonical(&self) -> String {
        let mut copy = self.clone();
        let mut lines: Vec<String> = copy.slots().into_iter().map(|(k, s)| format!("{k} = {}", s.render())).collect();
        lines.sort_unstable();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn spec(&self) -> Result<CodebookSpec> {
        CodebookSpec::new(self.codebook.levels, self.codebook.codes, self.world.dim)
            .map_err(|e| HarnessError::Config(format!("codebook: {e}")))
    }

    /// The trainer configuration for content of width `content_dim` and
    /// `behaviors` label channels.
    pub fn training_config(&self, content_dim: usize, behaviors: usize) -> Result<TrainingConfig> {
        let spec = CodebookSpec::new(self.codebook.levels, self.codebook.codes, content_dim)
            .map_err(|e| HarnessError::Config(format!("codebook: {e}")))?;
        let mut t = self.train.clone();
        t.csa.content_dim = content_dim;
        t.csa.behaviors = behaviors;
        t.tokenizer.input_dim = t.csa.item_dim();
        t.seed = self.seed;
        t.filter_threshold = self.filter_threshold.unwrap_or_else(|| TrainingConfig::for_spec(&spec).filter_threshold);
        t.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(t)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        self.spec()?;
        let w = &self.world;
        if w.n_users == 0 || w.n_items == 0 || w.n_clusters == 0 {
            return bad("world.users, world.items and world.clusters must be >= 1");
        }
        if w.behavior_rates.is_empty() {
            return bad("world.behavior_rates must list at least one rate");
        }
        if self.data.events.is_empty() != self.data.catalog.is_empty() {
            return bad("data.events and data.catalog must be given together");
        }
        let r = &self.run;
        if r.warmup_batch == 0 || r.dynamic_batch == 0 || r.eval_every == 0 || r.eval_beam == 0 {
            return bad("run.warmup_batch, run.dynamic_batch, run.eval_every and run.eval_beam must be >= 1");
        }
        if self.codebook.kmeans_iters == 0 {
            return bad("codebook.kmeans_iters must be >= 1");
        }
        self.training_config(self.world.dim, w.behavior_rates.len())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("weights.eta", "0.3").unwrap();
        cfg.set("world.behavior_rates", "0.4, 0.1").unwrap();
        cfg.set("train.filter_threshold", "2.5").unwrap();
        cfg.set("train.search", "length-synchronous").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.canonical(), "canonical").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn keys_are_unique_and_sorted() {
        let keys = RunConfig::keys();
        let mut dedup = keys.clone();
        dedup.dedup();
        assert_eq!(keys, dedup);
        assert_eq!(RunConfig::default().canonical().lines().count(), keys.len());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("seed = 1\nworld.usres = 4\n", "x.cfg").unwrap_err();
        assert!(err.to_string().contains("world.usres"), "{err}");
        assert!(err.to_string().contains("x.cfg:2"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn bad_values_and_overrides() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("index.capacity", "many").is_err());
        assert!(cfg.set("train.selection", "some").is_err());
        cfg.apply_overrides(&["--index.capacity=3".into(), "--train.filter_threshold=auto".into()]).unwrap();
        assert_eq!(cfg.train.index.capacity, 3);
        assert_eq!(cfg.filter_threshold, None);
        assert!(cfg.apply_overrides(&["index.capacity=3".into()]).is_err());
        assert!(cfg.apply_overrides(&["--index.capacity".into()]).is_err());
    }

    #[test]
    fn manifest_keys_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("manifest.version = v0\nseed = 3\n", "m").unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn derived_widths_follow_the_data() {
        let mut cfg = RunConfig::default();
        cfg.set("csa.collab_dim", "5").unwrap();
        let t = cfg.training_config(9, 2).unwrap();
        assert_eq!(t.tokenizer.input_dim, 14);
        assert_eq!(t.csa.behaviors, 2);
        assert!((t.filter_threshold - 1.5 * 64f64.ln()).abs() < 1e-12);
        cfg.validate().unwrap();
        cfg.set("run.eval_beam", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
