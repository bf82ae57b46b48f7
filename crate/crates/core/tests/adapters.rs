use amoe::adapters::generated_factors;
use amoe::{grad_check, AdapterConfig, AmoeLoraAdapter, Error, NodeId, ParamId, ParamStore, Session, Tensor, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(cfg: AdapterConfig, seed: u64) -> (ParamStore<f64>, AmoeLoraAdapter) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = AmoeLoraAdapter::new(&mut store, "ad", cfg, &mut rng).unwrap();
    (store, a)
}

fn cfg(d: usize, n: usize, r: usize, variant: Variant) -> AdapterConfig {
    AdapterConfig {
        n_experts: n,
        rank: r,
        ..AdapterConfig::new(d, variant)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Gives every adapter parameter (including the zero-initialized ones) a random value.
fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in ids {
        let (r, c) = store.value(id).shape();
        store.set(id, rand_tensor(&mut rng, r, c, 1.0)).unwrap();
    }
}

fn zero_hyper(store: &mut ParamStore<f64>, a: &AmoeLoraAdapter) {
    let an = a.anomaly.as_ref().unwrap();
    for id in an.hyper.phi_u.ids().into_iter().chain(an.hyper.phi_v.ids()) {
        let (r, c) = store.value(id).shape();
        store.set(id, Tensor::zeros(r, c)).unwrap();
    }
}

fn eval(store: &ParamStore<f64>, f: impl FnOnce(&mut Session<'_, f64>) -> NodeId) -> Tensor {
    let mut s = Session::inference(store);
    let out = f(&mut s);
    s.value(out).clone()
}

fn forward(store: &ParamStore<f64>, a: &AmoeLoraAdapter, o0: &Tensor, x: &Tensor) -> Tensor {
    eval(store, |s| {
        let o0 = s.constant(o0.clone()).unwrap();
        let x = s.constant(x.clone()).unwrap();
        a.amoe_forward(s, o0, x).unwrap()
    })
}

#[test]
fn zero_router_is_uniform_and_singleton_is_one() {
    let (mut store, a) = build(cfg(6, 4, 2, Variant::MoeOnly), 1);
    let w_g = a.router.as_ref().unwrap().w_g;
    store.set(w_g, Tensor::zeros(6, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, 5, 6, 3.0);
    let w = eval(&store, |s| {
        let x = s.constant(x.clone()).unwrap();
        a.route(s, x).unwrap()
    });
    assert!(w.data().iter().all(|&p| p == 0.25));

    let (store, lora) = build(cfg(6, 1, 2, Variant::LoraOnly), 1);
    let w = eval(&store, |s| {
        let x = s.constant(x.clone()).unwrap();
        lora.route(s, x).unwrap()
    });
    assert_eq!(w, Tensor::filled(5, 1, 1.0));
}

#[test]
fn expert_forward_hand_example() {
    let (mut store, a) = build(cfg(2, 1, 1, Variant::LoraOnly), 0);
    let e = &a.experts[0];
    store.set(e.a, Tensor::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
    store.set(e.b, Tensor::from_rows(&[[1.0], [0.0]]).unwrap()).unwrap();
    let y = eval(&store, |s| {
        let x = s.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        a.expert_forward(s, e, x).unwrap()
    });
    assert_eq!(y, Tensor::from_rows(&[[3.0, 0.0]]).unwrap());
}

#[test]
fn identity_expert_reproduces_input() {
    let (mut store, a) = build(cfg(3, 1, 3, Variant::LoraOnly), 0);
    let e = &a.experts[0];
    store.set(e.a, Tensor::identity(3)).unwrap();
    store.set(e.b, Tensor::identity(3)).unwrap();
    let x = Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]]).unwrap();
    let y = eval(&store, |s| {
        let xn = s.constant(x.clone()).unwrap();
        a.expert_forward(s, e, xn).unwrap()
    });
    assert_eq!(y, x);
}

#[test]
fn identical_experts_collapse_to_one() {
    let d = 5;
    let (mut two_store, two) = build(cfg(d, 2, 2, Variant::MoeOnly), 3);
    let (mut one_store, one) = build(cfg(d, 1, 2, Variant::MoeOnly), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, 2, d, 1.0);
    let b = rand_tensor(&mut rng, d, 2, 1.0);
    for e in &two.experts {
        two_store.set(e.a, a.clone()).unwrap();
        two_store.set(e.b, b.clone()).unwrap();
    }
    one_store.set(one.experts[0].a, a).unwrap();
    one_store.set(one.experts[0].b, b).unwrap();
    let x = rand_tensor(&mut rng, 4, d, 1.0);
    let run = |store: &ParamStore<f64>, ad: &AmoeLoraAdapter| {
        eval(store, |s| {
            let xn = s.constant(x.clone()).unwrap();
            ad.generalist_forward(s, xn).unwrap()
        })
    };
    let (y2, y1) = (run(&two_store, &two), run(&one_store, &one));
    for (p, q) in y2.data().iter().zip(y1.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn hyper_core_constant_networks() {
    let (mut store, a) = build(cfg(4, 2, 2, Variant::Full), 7);
    zero_hyper(&mut store, &a);
    let c = Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.1]]).unwrap();
    let (u, v) = {
        let mut s = Session::inference(&store);
        let cn = s.constant(c.clone()).unwrap();
        let (u, v) = a.hyper_core(&mut s, cn).unwrap();
        (s.value(u).clone(), s.value(v).clone())
    };
    assert!(u.all_zero() && v.all_zero());

    let bias = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
    store.set(a.anomaly.as_ref().unwrap().hyper.phi_u.b2, bias.clone()).unwrap();
    for c in [c, Tensor::from_rows(&[[9.0, 9.0, -9.0, 0.0]]).unwrap()] {
        let mut s = Session::inference(&store);
        let cn = s.constant(c).unwrap();
        let (u, _) = a.hyper_core(&mut s, cn).unwrap();
        assert_eq!(s.value(u), &bias);
    }
}

#[test]
fn hyper_core_depends_on_condition() {
    let (store, a) = build(cfg(4, 2, 2, Variant::Full), 8);
    let run = |c: Tensor| {
        let mut s = Session::inference(&store);
        let cn = s.constant(c).unwrap();
        let (u, v) = a.hyper_core(&mut s, cn).unwrap();
        (s.value(u).clone(), s.value(v).clone())
    };
    let p = run(Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4]]).unwrap());
    let q = run(Tensor::from_rows(&[[-0.4, 0.0, 0.9, 0.2]]).unwrap());
    assert_ne!(p.0, q.0);
    assert_ne!(p.1, q.1);
}

/// `(α/r) x A0ᵀ B0ᵀ` with `H = uᵀv` written out as a dense matrix.
fn materialized_oracle(x: &Tensor, u: &Tensor, v: &Tensor, w_a: &Tensor, w_b: &Tensor, scaling: f64) -> Tensor {
    let h = u.matmul_tn(v).unwrap(); // d_out × d_in
    let a0 = w_a.matmul(&h).unwrap(); // r × d_in
    let b0 = h.matmul(w_b).unwrap(); // d_out × r
    let (t, dout) = (x.rows(), b0.rows());
    Tensor::from_fn(t, dout, |i, j| {
        let mut acc = 0.0;
        for k in 0..a0.rows() {
            let z: f64 = (0..x.cols()).map(|l| x.get(i, l) * a0.get(k, l)).sum();
            acc += z * b0.get(j, k);
        }
        scaling * acc
    })
}

#[test]
fn anomaly_forward_hand_example() {
    let mut c = cfg(2, 1, 1, Variant::Full);
    c.alpha = 1.0;
    let (mut store, a) = build(c, 0);
    let an = a.anomaly.as_ref().unwrap();
    store.set(an.w_a, Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
    store.set(an.w_b, Tensor::from_rows(&[[0.0], [1.0]]).unwrap()).unwrap();
    // constant hypernetwork emitting u = [1, 0], v = [0, 1]
    zero_hyper(&mut store, &a);
    store.set(an.hyper.phi_u.b2, Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
    store.set(an.hyper.phi_v.b2, Tensor::from_rows(&[[0.0, 1.0]]).unwrap()).unwrap();
    let x = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
    let (o2, gf) = {
        let mut s = Session::inference(&store);
        let xn = s.constant(x.clone()).unwrap();
        let cn = s.constant(x.clone()).unwrap();
        let (o, gf) = a.anomaly_forward(&mut s, xn, cn).unwrap();
        (s.value(o).clone(), gf)
    };
    // H = [[0,1],[0,0]], A0 = [[0,1]], B0 = [[1],[0]], so o2 = [[4, 0]]
    assert_eq!(gf.a0, Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
    assert_eq!(gf.b0, Tensor::from_rows(&[[1.0], [0.0]]).unwrap());
    assert_eq!(o2, Tensor::from_rows(&[[4.0, 0.0]]).unwrap());
    let oracle = materialized_oracle(&x, &gf.u, &gf.v, store.value(an.w_a), store.value(an.w_b), 1.0);
    assert_eq!(o2, oracle);
}

#[test]
fn collapsed_hyper_core_silences_anomaly_branch() {
    let (mut store, a) = build(cfg(4, 2, 2, Variant::Full), 9);
    randomize(&mut store, &a.param_ids(), 10);
    let an = a.anomaly.as_ref().unwrap();
    // zero the u-network's output layer: u = 0 whatever the input
    store.set(an.hyper.phi_u.w2, Tensor::zeros(4, 4)).unwrap();
    store.set(an.hyper.phi_u.b2, Tensor::zeros(1, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, 3, 4, 1.0);
    let o2 = eval(&store, |s| {
        let xn = s.constant(x.clone()).unwrap();
        let c = s.mean_rows(xn).unwrap();
        a.anomaly_forward(s, xn, c).unwrap().0
    });
    assert!(o2.all_zero());
}

#[test]
fn fresh_adapters_are_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in Variant::ALL {
        let n = if variant == Variant::LoraOnly { 1 } else { 3 };
        let (store, a) = build(cfg(6, n, 2, variant), 12);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, 5, 6, 10.0);
            let o0 = rand_tensor(&mut rng, 5, 6, 10.0);
            let o = forward(&store, &a, &o0, &x);
            assert_eq!(o.data(), o0.data(), "{variant:?}");
        }
    }
}

#[test]
fn full_with_zero_hypernetwork_equals_moe_only() {
    let d = 6;
    let (mut full_store, full) = build(cfg(d, 3, 2, Variant::Full), 13);
    randomize(&mut full_store, &full.param_ids(), 14);
    zero_hyper(&mut full_store, &full);
    let (mut moe_store, moe) = build(cfg(d, 3, 2, Variant::MoeOnly), 15);
    for id in moe.param_ids() {
        let name = moe_store.get(id).name.clone();
        let src = full_store.find(&name).unwrap();
        moe_store.set(id, full_store.value(src).clone()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, 4, d, 1.0);
    let o0 = rand_tensor(&mut rng, 4, d, 1.0);
    assert_eq!(forward(&full_store, &full, &o0, &x), forward(&moe_store, &moe, &o0, &x));
}

/// Plain LoRA written with explicit loops: o0 + (α/r)·x Aᵀ Bᵀ.
fn plain_lora(x: &Tensor, o0: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    let r = a.rows();
    Tensor::from_fn(x.rows(), b.rows(), |i, j| {
        let mut acc = 0.0;
        for k in 0..r {
            let mut z = 0.0;
            for l in 0..x.cols() {
                z += x.get(i, l) * a.get(k, l);
            }
            acc += z * b.get(j, k);
        }
        o0.get(i, j) + alpha / r as f64 * acc
    })
}

#[test]
fn single_expert_matches_plain_lora() {
    for seed in 0..10 {
        let d = 3 + seed as usize;
        let (mut store, a) = build(cfg(d, 1, 2, Variant::Full), seed);
        randomize(&mut store, &a.param_ids(), seed + 100);
        zero_hyper(&mut store, &a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let x = rand_tensor(&mut rng, 4, d, 1.0);
        let o0 = rand_tensor(&mut rng, 4, d, 1.0);
        let got = forward(&store, &a, &o0, &x);
        let e = &a.experts[0];
        let want = plain_lora(&x, &o0, store.value(e.a), store.value(e.b), a.config().alpha);
        for (p, q) in got.data().iter().zip(want.data()) {
            assert!((p - q).abs() <= 1e-12, "seed {seed}: {p} vs {q}");
        }
    }
}

#[test]
fn doubling_alpha_doubles_the_adapter_delta() {
    for variant in Variant::ALL {
        let n = if variant == Variant::LoraOnly { 1 } else { 3 };
        let mut c = cfg(5, n, 2, variant);
        c.alpha = 3.0;
        let (mut store, a) = build(c.clone(), 20);
        randomize(&mut store, &a.param_ids(), 21);
        c.alpha = 6.0;
        let mut store2 = ParamStore::new();
        let a2 = AmoeLoraAdapter::new(&mut store2, "ad", c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, j) in a.param_ids().into_iter().zip(a2.param_ids()) {
            store2.set(j, store.value(i).clone()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_tensor(&mut rng, 4, 5, 1.0);
        // with o0 = 0 the delta is the output itself, so doubling is exact
        let zero = Tensor::zeros(4, 5);
        let d1 = forward(&store, &a, &zero, &x);
        let d2 = forward(&store2, &a2, &zero, &x);
        assert!(!d1.all_zero());
        assert_eq!(d2, d1.map(|v| 2.0 * v), "{variant:?}");
    }
}

#[test]
fn extract_generated_params_contract() {
    let (mut store, a) = build(cfg(4, 2, 2, Variant::Full), 30);
    randomize(&mut store, &a.param_ids(), 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let c1 = rand_tensor(&mut rng, 1, 4, 1.0);
    let c2 = rand_tensor(&mut rng, 1, 4, 1.0);
    let rows = a.extract_generated_params(&store, &[c1.clone(), c2, c1]).unwrap();
    assert_eq!(rows.shape(), (3, 2 * 2 * 4));
    assert_eq!(rows.row(0), rows.row(2));
    assert_ne!(rows.row(0), rows.row(1));

    zero_hyper(&mut store, &a);
    let an = a.anomaly.as_ref().unwrap();
    store.set(an.hyper.phi_u.b2, Tensor::filled(1, 4, 0.5)).unwrap();
    store.set(an.hyper.phi_v.b2, Tensor::filled(1, 4, -0.5)).unwrap();
    let conds: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, 1, 4, 1.0)).collect();
    let rows = a.extract_generated_params(&store, &conds).unwrap();
    for i in 1..5 {
        assert_eq!(rows.row(i), rows.row(0));
    }

    for variant in [Variant::LoraOnly, Variant::MoeOnly] {
        let n = if variant == Variant::LoraOnly { 1 } else { 2 };
        let (store, a) = build(cfg(4, n, 2, variant), 33);
        assert!(matches!(
            a.extract_generated_params(&store, &conds),
            Err(Error::Variant(_))
        ));
    }
}

#[test]
fn shape_errors_are_reported() {
    let (store, a) = build(cfg(4, 2, 2, Variant::Full), 40);
    let mut s = Session::inference(&store);
    let x = s.constant(Tensor::zeros(3, 5)).unwrap();
    let o0 = s.constant(Tensor::zeros(3, 4)).unwrap();
    assert!(matches!(a.route(&mut s, x), Err(Error::Dimension { .. })));
    assert!(matches!(a.amoe_forward(&mut s, o0, x), Err(Error::Dimension { .. })));
}

#[test]
fn lora_variant_requires_a_single_expert() {
    assert!(cfg(4, 2, 2, Variant::LoraOnly).validate().is_err());
    assert!(cfg(4, 1, 5, Variant::Full).validate().is_err());
}

#[test]
fn adapter_gradients_pass_grad_check() {
    for variant in Variant::ALL {
        for seed in 0..3 {
            let n = if variant == Variant::LoraOnly { 1 } else { 3 };
            let (mut store, a) = build(cfg(5, n, 2, variant), seed);
            let ids = a.param_ids();
            randomize(&mut store, &ids, seed + 50);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 60);
            let x = rand_tensor(&mut rng, 4, 5, 1.0);
            let o0 = rand_tensor(&mut rng, 4, 5, 1.0);
            let target = rand_tensor(&mut rng, 4, 5, 1.0);
            let err = grad_check(&mut store, &ids, 1e-6, |s| {
                let xn = s.constant(x.clone())?;
                let o0n = s.constant(o0.clone())?;
                let o = a.amoe_forward(s, o0n, xn)?;
                let t = s.constant(target.clone())?;
                let diff = s.sub(o, t)?;
                let sq = s.hadamard(diff, diff)?;
                Ok(s.sum_all(sq))
            })
            .unwrap();
            assert!(err < 1e-5, "{variant:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn generated_factors_follow_their_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let (u, v) = (rand_tensor(&mut rng, 1, 3, 1.0), rand_tensor(&mut rng, 1, 4, 1.0));
    let (w_a, w_b) = (rand_tensor(&mut rng, 2, 3, 1.0), rand_tensor(&mut rng, 4, 2, 1.0));
    let gf = generated_factors(&w_a, &w_b, &u, &v).unwrap();
    let h = u.matmul_tn(&v).unwrap();
    let (a0, b0) = (w_a.matmul(&h).unwrap(), h.matmul(&w_b).unwrap());
    for (p, q) in gf.a0.data().iter().zip(a0.data()).chain(gf.b0.data().iter().zip(b0.data())) {
        assert!((p - q).abs() < 1e-14);
    }
    assert_eq!(gf.flatten().len(), 2 * 4 + 3 * 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn router_rows_are_distributions(seed in any::<u64>(), n in 1usize..8, t in 1usize..6, scale in 0.1f64..50.0) {
        let (mut store, a) = build(cfg(6, n, 2, Variant::MoeOnly), seed);
        let w_g = a.router.as_ref().unwrap().w_g;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        store.set(w_g, rand_tensor(&mut rng, 6, n, scale)).unwrap();
        let x = rand_tensor(&mut rng, t, 6, scale);
        let w = eval(&store, |s| {
            let xn = s.constant(x.clone()).unwrap();
            a.route(s, xn).unwrap()
        });
        prop_assert_eq!(w.shape(), (t, n));
        for i in 0..t {
            let row = w.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn factored_anomaly_branch_matches_materialized_h(
        seed in any::<u64>(),
        d_in in 1usize..=16,
        d_out in 1usize..=16,
        t in 1usize..5,
    ) {
        let r = 1 + (seed as usize % d_in.min(d_out).min(4));
        let c = AdapterConfig { d_in, d_out, hidden: d_in, ..cfg(d_in, 2, r, Variant::Full) };
        let (mut store, a) = build(c, seed);
        randomize(&mut store, &a.param_ids(), seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let x = rand_tensor(&mut rng, t, d_in, 1.0);
        let (o2, gf) = {
            let mut s = Session::inference(&store);
            let xn = s.constant(x.clone()).unwrap();
            let cn = s.mean_rows(xn).unwrap();
            let (o, gf) = a.anomaly_forward(&mut s, xn, cn).unwrap();
            (s.value(o).clone(), gf)
        };
        let an = a.anomaly.as_ref().unwrap();
        let want = materialized_oracle(&x, &gf.u, &gf.v, store.value(an.w_a), store.value(an.w_b), a.config().scaling());
        prop_assert_eq!(o2.shape(), (t, d_out));
        for (p, q) in o2.data().iter().zip(want.data()) {
            prop_assert!((p - q).abs() <= 1e-10, "{} vs {}", p, q);
        }
    }
}
