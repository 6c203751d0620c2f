use coevo_core::coevolution::{Sample, Trainer, TrainingConfig, TAG_CSA, TAG_RECOMMENDER, TAG_REFERENCE, TAG_TOKENIZER};
use coevo_core::csa::CsaConfig;
use coevo_core::graph::Graph;
use coevo_core::recommender::RecommenderConfig;
use coevo_core::rqkmeans::fit;
use coevo_core::tensor::{ParamSet, SetTag};
use coevo_core::tokenizer::{kl_regularizer_node, TokenizerConfig};
use coevo_core::{rng, CodebookSpec, SidSequence};

const ITEMS: usize = 12;

fn content() -> Vec<Vec<f64>> {
    let mut r = rng::seeded(4);
    (0..ITEMS).map(|_| (0..4).map(|_| rng::normal(&mut r)).collect()).collect()
}

fn trainer(tweak: impl FnOnce(&mut TrainingConfig)) -> Trainer {
    let spec = CodebookSpec::new(2, 4, 4).unwrap();
    let content = content();
    let cb = fit(&content, spec, 10, 1).unwrap();
    let mut cfg = TrainingConfig::for_spec(&spec);
    cfg.recommender = RecommenderConfig { dim: 8, heads: 2, ff: 12, blocks: 1, n_max: 6, zero_output: false };
    cfg.csa = CsaConfig { content_dim: 4, collab_dim: 3, hidden: 6, behaviors: 3, collab_init_std: 0.3, zero_output: false };
    cfg.tokenizer = TokenizerConfig { input_dim: 7, dim: 8, heads: 2, ff: 12, blocks: 1, zero_output: false };
    // every sample passes the filter unless a test says otherwise
    cfg.filter_threshold = 1e6;
    cfg.seed = 3;
    tweak(&mut cfg);
    Trainer::new(cfg, &cb, &content).unwrap().0
}

fn batch() -> Vec<Sample> {
    vec![
        Sample { user: 0, history: vec![1, 2, 3], target: 4, labels: vec![true, false, false] },
        Sample { user: 1, history: vec![], target: 7, labels: vec![false, true, true] },
        Sample { user: 2, history: vec![9, 0], target: 11, labels: vec![true, true, false] },
    ]
}

fn grad_abs(g: &Graph, set: &ParamSet) -> f64 {
    (0..set.len()).filter_map(|i| g.param_grad(set.tag(), i)).flatten().map(|v| v.abs()).sum()
}

fn only(g: &Graph, t: &Trainer, live: SetTag) {
    for (tag, set) in [
        (TAG_RECOMMENDER, t.recommender.params()),
        (TAG_TOKENIZER, t.tokenizer.params()),
        (TAG_REFERENCE, t.reference.params()),
        (TAG_CSA, t.csa.params()),
    ] {
        let mass = grad_abs(g, set);
        if tag == live {
            assert!(mass > 0.0, "set {tag} received no gradient");
        } else {
            assert_eq!(mass, 0.0, "set {tag} leaked gradient");
        }
    }
}

#[test]
fn each_loss_touches_exactly_its_parameter_set() {
    let t = trainer(|_| {});
    let sid = SidSequence::new(vec![1, 3]);
    let hist = t.encode_history(&[1, 2, 3]).unwrap();

    let mut g = Graph::new();
    let l = t.recommender.loss_node(&mut g, &hist, &sid).unwrap();
    g.backward(l).unwrap();
    only(&g, &t, TAG_RECOMMENDER);

    // the tokenizer sees X_i through a stop-gradient
    let mut g = Graph::new();
    let x = t.csa.item_node(&mut g, 4).unwrap();
    let l = t.tokenizer.loss_node(&mut g, x, &sid).unwrap();
    g.backward(l).unwrap();
    only(&g, &t, TAG_TOKENIZER);

    let mut g = Graph::new();
    let x = t.csa.item_node(&mut g, 4).unwrap();
    let l = t.reference.loss_node(&mut g, x, &sid).unwrap();
    g.backward(l).unwrap();
    only(&g, &t, TAG_REFERENCE);

    // D_KL moves the live tokenizer only
    let mut other = t.clone();
    other.reference.params_mut().get_mut(0).value.data_mut()[0] += 0.5;
    let mut g = Graph::new();
    let x = other.csa.item_node(&mut g, 4).unwrap();
    let l = kl_regularizer_node(&mut g, &other.tokenizer, &other.reference, x, &sid).unwrap();
    g.backward(l).unwrap();
    only(&g, &other, TAG_TOKENIZER);

    let mut g = Graph::new();
    let l = t.csa.loss_node(&mut g, &[1, 2, 3], 4, &[true, false, true]).unwrap();
    g.backward(l).unwrap();
    only(&g, &t, TAG_CSA);
}

#[test]
fn collaborative_loss_never_trains_history_rows() {
    let t = trainer(|_| {});
    let mut g = Graph::new();
    let l = t.csa.loss_node(&mut g, &[1, 2, 3], 4, &[true, false, true]).unwrap();
    g.backward(l).unwrap();
    let grad = g.param_grad(TAG_CSA, t.csa.collab_param()).unwrap();
    let width = 3;
    for item in 0..ITEMS {
        let row = &grad[item * width..(item + 1) * width];
        if item == 4 {
            assert!(row.iter().any(|v| *v != 0.0));
        } else {
            assert!(row.iter().all(|v| *v == 0.0), "item {item} row {row:?}");
        }
    }
}

fn dynamic(t: &mut Trainer) {
    t.enter_dynamic();
    t.dynamic_step(&batch()).unwrap();
}

#[test]
fn zero_side_weights_update_the_recommender_only() {
    let mut t = trainer(|c| {
        c.weights.w_item = 0.0;
        c.weights.w_xtr = 0.0;
        c.weights.w_ref = 0.0;
    });
    let before = t.clone();
    dynamic(&mut t);
    assert_ne!(t.recommender.params(), before.recommender.params());
    assert_eq!(t.tokenizer.params(), before.tokenizer.params());
    assert_eq!(t.reference.params(), before.reference.params());
    assert_eq!(t.csa.params(), before.csa.params());
}

#[test]
fn filtered_samples_give_the_tokenizer_no_gradient() {
    let mut t = trainer(|c| c.filter_threshold = 0.0);
    let before = t.clone();
    t.enter_dynamic();
    let m = t.dynamic_step(&batch()).unwrap();
    assert_eq!(m.filter_pass_rate, 0.0);
    assert_eq!(m.losses.item, 0.0);
    assert_eq!(m.losses.kl, 0.0);
    assert_eq!(t.tokenizer.params(), before.tokenizer.params());
    assert_ne!(t.reference.params(), before.reference.params());
    assert_ne!(t.csa.params(), before.csa.params());
}

#[test]
fn offline_mode_freezes_the_tokenizer() {
    let mut t = trainer(|c| c.offline = true);
    let before = t.clone();
    dynamic(&mut t);
    assert_eq!(t.tokenizer.params(), before.tokenizer.params());
    let mut online = trainer(|_| {});
    dynamic(&mut online);
    assert_ne!(online.tokenizer.params(), before.tokenizer.params());
}

#[test]
fn warmup_without_side_losses_trains_recommender_and_reference() {
    let mut t = trainer(|c| {
        c.weights.lambda1 = 0.0;
        c.weights.lambda2 = 0.0;
    });
    let before = t.clone();
    t.warmup_step(&batch()).unwrap();
    assert_ne!(t.recommender.params(), before.recommender.params());
    assert_ne!(t.reference.params(), before.reference.params());
    assert_eq!(t.tokenizer.params(), before.tokenizer.params());
    assert_eq!(t.csa.params(), before.csa.params());
    assert_eq!(t.index, before.index);
}

#[test]
fn loss_weights_scale_reported_components_linearly() {
    let base = trainer(|_| {});
    let mut a = base.clone();
    a.enter_dynamic();
    let ma = a.dynamic_step(&batch()).unwrap().losses;
    for (name, scale) in [("w_item", 3.0), ("w_xtr", 0.25)] {
        let mut b = base.clone();
        match name {
            "w_item" => b.config.weights.w_item *= scale,
            _ => b.config.weights.w_xtr *= scale,
        }
        b.enter_dynamic();
        let mb = b.dynamic_step(&batch()).unwrap().losses;
        let (wa, wb, comp) = match name {
            "w_item" => (base.config.weights.w_item, b.config.weights.w_item, ma.item),
            _ => (base.config.weights.w_xtr, b.config.weights.w_xtr, ma.xtr),
        };
        let delta = mb.total - ma.total;
        assert!((delta - (wb - wa) * comp).abs() < 1e-12, "{name}");
    }
    let w = base.config.weights;
    let recombined = ma.user + w.w_item * ma.item + w.w_xtr * ma.xtr + w.w_ref * (ma.reference + w.eta * ma.kl);
    assert!((recombined - ma.total).abs() < 1e-12);
}
