use amoe::model::{ModelConfig, Stage, TinyTransformer};
use amoe::synthdata::{gen_split, render_qa, SyntheticSample, TaskConfig, Vocab};
use amoe::trainpipe::{
    adam_step, cross_entropy, decode_checkpoint, encode_checkpoint, greedy_decode, held_out_discriminative,
    load_base_into, load_checkpoint, run_stage, save_checkpoint, AdamConfig, Example, OptimState, TrainConfig,
    TrainData, CHECKPOINT_VERSION,
};
use amoe::{Error, Graph, Model, ParamGroup, ParamStore, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Corpus {
    vocab: Vocab,
    train: Vec<SyntheticSample>,
    test: Vec<SyntheticSample>,
}

impl Corpus {
    fn new(n: usize) -> Self {
        let task = TaskConfig {
            n_samples: n,
            ..TaskConfig::default()
        };
        let (train, test) = gen_split(&task).unwrap();
        Self {
            vocab: task.vocab(),
            train,
            test,
        }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            vocab: &self.vocab,
            train: &self.train,
            eval: &self.test,
        }
    }
}

fn tiny(vocab: usize, d: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab);
    cfg.d_model = d;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq = 32;
    cfg.d_ff = 2 * d;
    cfg.adapter.n_experts = 2;
    cfg.adapter.rank = 2;
    cfg
}

fn train_cfg(stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        eval_every: 10,
        eval_samples: 64,
        ..TrainConfig::new(stage)
    }
}

fn pretrained(c: &Corpus, d: usize, steps: usize) -> Model {
    let mut m = Model::new(tiny(c.vocab.size(), d), 1).unwrap();
    run_stage(&mut m, &c.data(), &train_cfg(Stage::One, steps)).unwrap();
    m
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    // a margin of 800 puts e^-800 below the smallest subnormal
    let forced = Tensor::from_fn(3, 5, |i, j| if j == i + 1 { 800.0 } else { 0.0 });
    let l = g.constant(forced).unwrap();
    let loss = cross_entropy(&mut g, l, &[1, 2, 3], &[true; 3]).unwrap();
    assert_eq!(g.value(loss).get(0, 0), 0.0);

    let u = g.constant(Tensor::filled(4, 7, 0.3)).unwrap();
    let loss = cross_entropy(&mut g, u, &[0, 6, 2, 2], &[true, false, true, true]).unwrap();
    assert!((g.value(loss).get(0, 0) - 7f64.ln()).abs() < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = Tensor::from_fn(5, 6, |_, _| rng.gen_range(-3.0..3.0));
    let targets = [4, 0, 5, 1, 1];
    let mask = [true, false, true, true, false];
    let mut direct = 0.0;
    for t in [0, 2, 3] {
        let row = logits.row(t);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        direct -= (row[targets[t]].exp() / z).ln();
    }
    direct /= 3.0;
    let l = g.constant(logits).unwrap();
    let loss = cross_entropy(&mut g, l, &targets, &mask).unwrap();
    assert!((g.value(loss).get(0, 0) - direct).abs() < 1e-12);

    assert!(matches!(
        cross_entropy(&mut g, l, &targets, &[false; 5]),
        Err(Error::Contract(_))
    ));
    assert!(cross_entropy(&mut g, l, &targets[..4], &mask[..4]).is_err());
}

#[test]
fn answer_masking() {
    let c = Corpus::new(200);
    let s = &c.train[0];
    let r = render_qa(&c.vocab, s);
    let ex = Example::new(&r, Stage::Two);
    let full = r.full();
    assert_eq!(ex.tokens, full[..full.len() - 1]);
    assert_eq!(ex.targets, full[1..]);
    assert_eq!(ex.cond_len, r.input.len());
    let masked: Vec<usize> = ex.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| ex.targets[i]).collect();
    // the answer and its closing EOS, nothing from the prompt
    assert_eq!(masked, r.target);
    let ex1 = Example::new(&r, Stage::One);
    assert!(ex1.mask.iter().all(|&m| m));
}

#[test]
fn adam_fixed_point_and_determinism() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::Base, Tensor::from_rows(&[[1.0, -2.0]]).unwrap()).unwrap();
    let mut st = OptimState::new(&store, &[w], AdamConfig::with_lr(0.1));
    for _ in 0..5 {
        adam_step(&mut store, &[Tensor::zeros(1, 2)], &mut st).unwrap();
    }
    assert_eq!(store.value(w), &Tensor::from_rows(&[[1.0, -2.0]]).unwrap());
    assert_eq!(st.step, 5);
    assert!(adam_step(&mut store, &[Tensor::zeros(2, 2)], &mut st).is_err());

    let c = Corpus::new(300);
    let run = || {
        let mut m = Model::new(tiny(c.vocab.size(), 8), 4).unwrap();
        let (_, st) = run_stage(&mut m, &c.data(), &train_cfg(Stage::One, 6)).unwrap();
        encode_checkpoint(&m, Some(&st)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_two_needs_a_pretrained_base() {
    let c = Corpus::new(200);
    let mut m = Model::new(tiny(c.vocab.size(), 8), 0).unwrap();
    let err = run_stage(&mut m, &c.data(), &train_cfg(Stage::Two, 3)).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(_)));

    let mut cfg = tiny(c.vocab.size(), 8);
    cfg.injection_points.clear();
    let mut m = Model::new(cfg, 0).unwrap();
    m.mark_base_pretrained();
    assert!(matches!(
        run_stage(&mut m, &c.data(), &train_cfg(Stage::Two, 3)),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_step_stage_two_changes_nothing() {
    let c = Corpus::new(200);
    let mut m = Model::new(tiny(c.vocab.size(), 8), 0).unwrap();
    m.mark_base_pretrained();
    let before = (m.base_digest(), m.adapter_digest());
    let (report, st) = run_stage(&mut m, &c.data(), &train_cfg(Stage::Two, 0)).unwrap();
    assert!(report.is_empty());
    assert_eq!(st.step, 0);
    assert_eq!((m.base_digest(), m.adapter_digest()), before);
}

#[test]
fn stage_two_freezes_the_base_and_trains_adapters() {
    let c = Corpus::new(400);
    let mut m = pretrained(&c, 16, 20);
    let adapters = m.adapter_digest();
    let base = m.base_digest();
    let (report, st) = run_stage(&mut m, &c.data(), &train_cfg(Stage::Two, 25)).unwrap();
    assert_eq!(report.base_digest_before, base);
    assert_eq!(report.base_digest_after, base);
    assert_eq!(m.base_digest(), base);
    assert_ne!(m.adapter_digest(), adapters);
    assert_eq!(st.step, 25);
    assert_eq!(report.losses.len(), 25);
    let steps: Vec<usize> = report.evals.iter().map(|e| e.step).collect();
    assert_eq!(steps, [10, 20, 25]);
    assert!(report.evals.iter().all(|e| (0.0..=1.0).contains(&e.accuracy)));
    assert!(report.to_tsv().starts_with("step\tloss\taccuracy\teval_loss\n"));
}

#[test]
fn stage_one_lowers_the_loss() {
    let c = Corpus::new(600);
    let mut m = Model::new(tiny(c.vocab.size(), 16), 2).unwrap();
    let adapters = m.adapter_digest();
    let (report, _) = run_stage(&mut m, &c.data(), &train_cfg(Stage::One, 120)).unwrap();
    assert!(m.base_pretrained());
    assert_eq!(m.adapter_digest(), adapters);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (head, tail) = (mean(&report.losses[..20]), mean(&report.losses[100..]));
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn held_out_scoring_and_decoding() {
    let c = Corpus::new(300);
    let m = pretrained(&c, 8, 5);
    let (acc, loss) = held_out_discriminative(&m, &c.data(), 0).unwrap();
    assert!((0.0..=1.0).contains(&acc) && loss.is_finite() && loss > 0.0);
    let r = render_qa(&c.vocab, &c.test[0]);
    let out = greedy_decode(&m, &r.input, 3).unwrap();
    assert!(!out.is_empty() && out.len() <= 3);
    assert!(out.iter().all(|&t| t < c.vocab.size()));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let c = Corpus::new(300);
    let mut m = pretrained(&c, 8, 4);
    let (_, st) = run_stage(&mut m, &c.data(), &train_cfg(Stage::Two, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, Some(&st)).unwrap();
    let (back, back_st) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.store(), m.store());
    assert_eq!(back.config(), m.config());
    assert_eq!(back.base_digest(), m.base_digest());
    assert_eq!(back.adapter_digest(), m.adapter_digest());
    assert!(back.base_pretrained());
    assert_eq!(back_st.as_ref(), Some(&st));
    assert_eq!(encode_checkpoint(&back, back_st.as_ref()).unwrap(), std::fs::read(&path).unwrap());

    save_checkpoint(&path, &m, None).unwrap();
    let (_, none) = load_checkpoint::<f64>(&path).unwrap();
    assert!(none.is_none());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = Model::new(tiny(40, 8), 0).unwrap();
    let good = encode_checkpoint(&m, None).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    let err = decode_checkpoint::<f64>(&bad).unwrap_err();
    assert!(matches!(err, Error::Magic(_)));
    assert!(err.to_string().contains("magic"), "{err}");

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode_checkpoint::<f64>(&bad),
        Err(Error::Version { found: 2, expected: 1 })
    ));

    for cut in [3, 10, good.len() / 2, good.len() - 1] {
        assert!(matches!(decode_checkpoint::<f64>(&good[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::Corrupt(_))));

    let mut nan = good.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(decode_checkpoint::<f64>(&nan), Err(Error::Corrupt(_))));

    let missing = std::env::temp_dir().join("amoe-no-such-dir").join("x.ckpt");
    assert!(matches!(load_checkpoint::<f64>(&missing), Err(Error::Io { .. })));
}

#[test]
fn base_shape_mismatch_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d64.ckpt");
    let mut big = ModelConfig::new(40);
    big.n_layers = 1;
    let m = Model::new(big.clone(), 0).unwrap();
    save_checkpoint(&path, &m, None).unwrap();

    let mut small = big.clone();
    small.d_model = 32;
    let mut target = Model::new(small, 0).unwrap();
    assert!(matches!(load_base_into(&path, &mut target), Err(Error::Shape(_))));

    let mut other = big;
    other.adapter.variant = Variant::MoeOnly;
    let mut target = TinyTransformer::<f64>::new(other, 9).unwrap();
    let adapters = target.adapter_digest();
    load_base_into(&path, &mut target).unwrap();
    assert_eq!(target.base_digest(), m.base_digest());
    assert_eq!(target.adapter_digest(), adapters);
}
