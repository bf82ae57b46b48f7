use std::collections::BTreeMap;

use amoe::synthdata::{gen_sample, gen_split, read_dataset, write_dataset, QaStyle, SyntheticSample, TaskConfig};
use proptest::prelude::*;

fn histogram(s: &SyntheticSample, vocab_size: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab_size];
    for &t in &s.content {
        h[t] += 1.0;
    }
    h
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn nearest_centroid_separates_normal_from_abnormal() {
    let cfg = TaskConfig {
        n_samples: 6000,
        seed: 3,
        ..TaskConfig::default()
    };
    let v = cfg.vocab().size();
    let (train, test) = gen_split(&cfg).unwrap();
    // One centroid per (object, defect) cell; predict abnormal when the winner has a defect.
    let mut sums: BTreeMap<(usize, usize), (Vec<f64>, f64)> = BTreeMap::new();
    for s in &train {
        let e = sums
            .entry((s.object_key(cfg.objects_per_domain), s.defect_id))
            .or_insert_with(|| (vec![0.0; v], 0.0));
        for (a, b) in e.0.iter_mut().zip(histogram(s, v)) {
            *a += b;
        }
        e.1 += 1.0;
    }
    let centroids: Vec<((usize, usize), Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum.into_iter().map(|x| x / n).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|s| {
            let h = histogram(s, v);
            let best = centroids
                .iter()
                .min_by(|a, b| sq_dist(&h, &a.1).total_cmp(&sq_dist(&h, &b.1)))
                .unwrap();
            (best.0 .1 != 0) == s.is_abnormal()
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn splits_are_disjoint_by_draw() {
    let cfg = TaskConfig {
        n_samples: 1000,
        ..TaskConfig::default()
    };
    let (train, test) = gen_split(&cfg).unwrap();
    let all: Vec<SyntheticSample> = (0..1000).map(|i| gen_sample(&cfg, i)).collect();
    // Each split is a subsequence of the draw order; together they cover it.
    let (mut i, mut j) = (0, 0);
    for s in &all {
        if i < train.len() && &train[i] == s {
            i += 1;
        } else {
            assert_eq!(&test[j], s);
            j += 1;
        }
    }
    assert_eq!((i, j), (train.len(), test.len()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_roundtrips(seed in any::<u64>(), n in 0usize..60, ratio in 0.05f64..0.95) {
        let cfg = TaskConfig { seed, normal_ratio: ratio, ..TaskConfig::default() };
        let samples: Vec<_> = (0..n as u64).map(|i| gen_sample(&cfg, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        write_dataset(&path, &samples).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn sample_invariants(seed in any::<u64>(), index in any::<u64>()) {
        let cfg = TaskConfig { seed, ..TaskConfig::default() };
        let s = gen_sample(&cfg, index);
        prop_assert_eq!(s.defect_id == 0, s.defect_span.is_none());
        prop_assert_eq!(s.content.len(), cfg.seq_len);
        if s.qa_style == QaStyle::Discriminative {
            prop_assert_eq!(s.answer.len(), 1);
        }
        if let Some((start, len)) = s.defect_span {
            prop_assert!(start + len <= cfg.seq_len);
            prop_assert!((cfg.span_min..=cfg.span_max).contains(&len));
        }
    }
}
