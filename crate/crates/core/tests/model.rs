use amoe::model::{AdapterMode, InjectionPoint, ModelConfig, Stage, TinyTransformer};
use amoe::params::ParamGroup;
use amoe::trainpipe::cross_entropy;
use amoe::{grad_check_entries, Error, Session, Tensor, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(12);
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.max_seq = 8;
    cfg.d_ff = 16;
    cfg.adapter.variant = variant;
    cfg.adapter.n_experts = if variant == Variant::LoraOnly { 1 } else { 3 };
    cfg.adapter.rank = 2;
    cfg
}

fn randomize_adapters(m: &mut TinyTransformer<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in m.adapter_params() {
        let (r, c) = m.store().value(id).shape();
        let t = Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        m.store_mut().set(id, t).unwrap();
    }
}

#[test]
fn fresh_adapters_leave_logits_bitwise_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in Variant::ALL {
        let mut cfg = ModelConfig::new(30);
        cfg.d_model = 16;
        cfg.adapter.variant = variant;
        if variant == Variant::LoraOnly {
            cfg.adapter.n_experts = 1;
        }
        cfg.injection_points = InjectionPoint::ALL.to_vec();
        let m = TinyTransformer::<f64>::new(cfg, 2).unwrap();
        for _ in 0..5 {
            let len = rng.gen_range(2..20);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..30)).collect();
            let cond = rng.gen_range(1..=len);
            let on = m.logits(&tokens, cond, AdapterMode::Enabled).unwrap();
            let off = m.logits(&tokens, cond, AdapterMode::Disabled).unwrap();
            assert_eq!(on.shape(), (len, 30));
            assert_eq!(on.data(), off.data(), "{variant:?}");
        }
    }
}

#[test]
fn tokens_are_validated() {
    let m = TinyTransformer::<f64>::new(small(Variant::Full), 0).unwrap();
    assert!(matches!(m.logits(&[1, 12], 1, AdapterMode::Enabled), Err(Error::Contract(_))));
    assert!(matches!(m.logits(&[1; 9], 1, AdapterMode::Enabled), Err(Error::Contract(_))));
    assert!(matches!(m.logits(&[], 1, AdapterMode::Enabled), Err(Error::Contract(_))));
    assert!(m.logits(&[1; 8], 8, AdapterMode::Enabled).is_ok());
}

#[test]
fn config_validation() {
    let mut cfg = small(Variant::Full);
    cfg.n_heads = 3;
    assert!(matches!(TinyTransformer::<f64>::new(cfg, 0), Err(Error::Config(_))));
    let mut cfg = small(Variant::LoraOnly);
    cfg.adapter.n_experts = 4;
    assert!(TinyTransformer::<f64>::new(cfg, 0).is_err());
    let mut cfg = small(Variant::Full);
    cfg.injection_points.clear();
    let m = TinyTransformer::<f64>::new(cfg, 0).unwrap();
    assert!(m.adapter_params().is_empty());
}

#[test]
fn stage_parameter_sets() {
    let m = TinyTransformer::<f64>::new(ModelConfig::new(100), 0).unwrap();
    let s1 = m.trainable_params(Stage::One);
    let s2 = m.trainable_params(Stage::Two);
    assert!(s1.iter().all(|id| !s2.contains(id)));
    assert!(s1.iter().all(|&id| m.store().get(id).group == ParamGroup::Base));
    assert!(s2.iter().all(|&id| m.store().get(id).group == ParamGroup::Adapter));
    assert_eq!(s1.len() + s2.len(), m.store().len());

    // per adapter at d=64, N=16, r=4, hidden 64, one generated row per factor:
    // experts 16·2·4·64, router 64·16, W_a + W_b 2·4·64, hypernetwork 2·(64·64 + 64 + 64·64 + 64)
    let per_adapter = 8192 + 1024 + 512 + 16640;
    assert_eq!(per_adapter, 26368);
    let injected = 2 * 2;
    assert_eq!(m.store().numel(&s2), injected * per_adapter);
    assert_eq!(m.config().adapter_param_count(), injected * per_adapter);
}

#[test]
fn ablation_variants_shrink_the_trainable_set() {
    let count = |variant: Variant, n: usize| {
        let mut cfg = ModelConfig::new(100);
        cfg.adapter.variant = variant;
        cfg.adapter.n_experts = n;
        let m = TinyTransformer::<f64>::new(cfg, 0).unwrap();
        m.store().numel(&m.trainable_params(Stage::Two))
    };
    // single expert without router or anomaly branch
    assert_eq!(count(Variant::LoraOnly, 1), 4 * 2 * 4 * 64);
    assert_eq!(count(Variant::MoeOnly, 16), 4 * (8192 + 1024));
}

#[test]
fn same_seed_same_weights() {
    let a = TinyTransformer::<f64>::new(small(Variant::Full), 5).unwrap();
    let b = TinyTransformer::<f64>::new(small(Variant::Full), 5).unwrap();
    let c = TinyTransformer::<f64>::new(small(Variant::Full), 6).unwrap();
    assert_eq!(a.base_digest(), b.base_digest());
    assert_eq!(a.adapter_digest(), b.adapter_digest());
    assert_ne!(a.base_digest(), c.base_digest());
}

#[test]
fn conditioning_rows_follow_adapter_order() {
    let mut cfg = small(Variant::Full);
    cfg.n_layers = 2;
    let m = TinyTransformer::<f64>::new(cfg, 0).unwrap();
    let rows = m.conditioning_rows(&[3, 4, 5, 6], 2).unwrap();
    assert_eq!(rows.len(), m.adapters().len());
    assert!(rows.iter().all(|r| r.shape() == (1, 8)));
}

#[test]
fn full_model_gradients_pass_grad_check() {
    let mut cfg = small(Variant::Full);
    cfg.injection_points = vec![InjectionPoint::AttnQ];
    let mut m = TinyTransformer::<f64>::new(cfg, 3).unwrap();
    randomize_adapters(&mut m, 4);
    let tokens = [1, 5, 7, 2, 9, 4];
    let targets = [5, 7, 2, 9, 4, 0];
    let mask = [true; 6];
    let ids: Vec<_> = m.store().ids().collect();
    let model = m.clone();
    let check = grad_check_entries(m.store_mut(), &ids, 1e-6, |s| {
        let logits = model.forward(s, &tokens, 3, AdapterMode::Enabled)?;
        cross_entropy(s, logits, &targets, &mask)
    })
    .unwrap();
    // entries whose gradient is comparable to the loss roundoff can only be
    // resolved to a few ulps, so allow that much on top of the relative bound
    let floor = 8.0 * check.roundoff();
    for e in &check.entries {
        let name = &m.store().get(e.param).name;
        let tol = 1e-5 * (e.analytic.abs() + e.numeric.abs()) + floor;
        assert!((e.analytic - e.numeric).abs() <= tol, "{name}[{}]: {e:?}", e.index);
    }
    let resolved: Vec<_> = check.entries.iter().filter(|e| e.analytic.abs() > 1e4 * floor).collect();
    assert!(resolved.len() > check.entries.len() / 4);
    assert!(resolved.iter().all(|e| e.rel_error() < 1e-5));
}

#[test]
fn forward_matches_manual_session() {
    let mut m = TinyTransformer::<f64>::new(small(Variant::Full), 7).unwrap();
    randomize_adapters(&mut m, 8);
    let tokens = [0, 3, 3, 11];
    let direct = m.logits(&tokens, 2, AdapterMode::Enabled).unwrap();
    let mut s = Session::inference(m.store());
    let out = m.forward(&mut s, &tokens, 2, AdapterMode::Enabled).unwrap();
    assert_eq!(s.value(out), &direct);
    let off = m.logits(&tokens, 2, AdapterMode::Disabled).unwrap();
    assert_ne!(direct, off);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_tokens_never_reach_earlier_logits(
        seed in any::<u64>(),
        len in 2usize..8,
        cond in 1usize..8,
        variant in prop::sample::select(Variant::ALL.to_vec()),
    ) {
        let cond = cond.min(len);
        let mut m = TinyTransformer::<f64>::new(small(variant), seed).unwrap();
        randomize_adapters(&mut m, seed ^ 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
        let base = m.logits(&tokens, cond, AdapterMode::Enabled).unwrap();
        // prompt positions feed the conditioning row, so only later ones are free to change
        for t in cond..len {
            let mut changed = tokens.clone();
            changed[t] = (changed[t] + 1 + rng.gen_range(0..11)) % 12;
            let out = m.logits(&changed, cond, AdapterMode::Enabled).unwrap();
            for i in 0..t {
                prop_assert_eq!(out.row(i), base.row(i));
            }
            prop_assert_ne!(out.row(t), base.row(t));
        }
        let plain = m.logits(&tokens, cond, AdapterMode::Disabled).unwrap();
        let mut changed = tokens.clone();
        changed[0] = (changed[0] + 1) % 12;
        let out = m.logits(&changed, cond, AdapterMode::Disabled).unwrap();
        prop_assert_ne!(out.row(0), plain.row(0));
        for t in 1..len {
            let mut changed = tokens.clone();
            changed[t] = (changed[t] + 1) % 12;
            let out = m.logits(&changed, cond, AdapterMode::Disabled).unwrap();
            for i in 0..t {
                prop_assert_eq!(out.row(i), plain.row(i));
            }
        }
    }
}
