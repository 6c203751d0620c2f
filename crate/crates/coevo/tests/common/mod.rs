#![allow(dead_code)]

use coevo::RunConfig;

/// A world small enough for a full two-phase run in about a second.
pub const TINY: &str = "\
world.users = 60
world.items = 30
world.clusters = 3
world.dim = 6
data.n_events = 900
codebook.levels = 2
codebook.codes = 8
recommender.dim = 16
recommender.ff = 32
recommender.blocks = 1
recommender.history_len = 10
tokenizer.dim = 16
tokenizer.ff = 32
csa.collab_dim = 4
csa.hidden = 8
run.eval_every = 20
run.dynamic_steps = 60
run.dynamic_eval_every = 20
";

pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(TINY, "tiny").unwrap();
    cfg.seed = seed;
    cfg
}

pub fn read(path: &std::path::Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
