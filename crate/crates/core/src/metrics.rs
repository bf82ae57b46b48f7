//! Text-overlap scores, discriminative accuracy and the clustering analysis
//! of generated adapter factors.
//!
//! ROUGE scores are F1. BLEU-4 uses clipped precisions with add-one
//! smoothing for n ≥ 2 whenever the raw match count is zero.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn clipped_matches<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("rouge_n needs n >= 1".into()));
    }
    let (overlap, cand_total) = clipped_matches(cand, reference, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 || ref_total == 0 {
        return Ok(0.0);
    }
    Ok(f1(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64))
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(cand, reference) as f64;
    f1(l / cand.len() as f64, l / reference.len() as f64)
}

pub fn bleu4<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matches, total) = clipped_matches(cand, reference, n);
        let p = if n >= 2 && matches == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matches as f64 / total as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

pub fn discriminative_accuracy<T: PartialEq>(preds: &[T], gold: &[T]) -> Result<f64> {
    if preds.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            gold.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITER: usize = 1000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration, or `None`
/// when the matrix is numerically zero.
fn power_iteration(c: &Tensor2<f64>, scale: f64) -> Option<Vec<f64>> {
    let d = c.rows();
    // start from the column with the largest norm; it has a component along
    // the top eigenvector unless that eigenvalue is zero
    let mut best = (0, 0.0);
    for j in 0..d {
        let norm: f64 = (0..d).map(|i| c.get(i, j).powi(2)).sum();
        if norm > best.1 {
            best = (j, norm);
        }
    }
    if best.1.sqrt() <= 1e-12 * scale {
        return None;
    }
    let mut v: Vec<f64> = (0..d).map(|i| c.get(i, best.0)).collect();
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITER {
        let mut w: Vec<f64> = (0..d).map(|i| dot(c.row(i), &v)).collect();
        if normalize(&mut w) == 0.0 {
            return None;
        }
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if diff < PCA_TOL {
            break;
        }
    }
    // fix the sign: largest-magnitude entry positive
    let k = (0..d).fold(0, |k, i| if v[i].abs() > v[k].abs() { i } else { k });
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some(v)
}

/// Projects mean-centred rows onto the top two principal directions.
pub fn pca2(points: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    let (s, d) = points.shape();
    if s < 3 || d < 2 {
        return Err(Error::Contract(format!("pca2 needs at least 3 points in 2+ dimensions, got {s}x{d}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..s {
        for (m, x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let x = Tensor2::from_fn(s, d, |i, j| points.get(i, j) - mean[j]);
    let mut cov = x.matmul_tn(&x)?;
    cov.scale_assign(1.0 / (s - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if !(trace > 0.0) {
        return Err(Error::Degenerate("pca2: all points are identical".into()));
    }
    let v1 = power_iteration(&cov, trace).expect("nonzero covariance");
    let l1 = dot(&(0..d).map(|i| dot(cov.row(i), &v1)).collect::<Vec<_>>(), &v1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated.set(i, j, cov.get(i, j) - l1 * v1[i] * v1[j]);
        }
    }
    let mut v2 = match power_iteration(&deflated, trace) {
        Some(v) => v,
        // rank one: any direction orthogonal to v1 carries zero variance
        None => {
            let k = (0..d).fold(0, |k, i| if v1[i].abs() < v1[k].abs() { i } else { k });
            (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
        }
    };
    // re-orthogonalize against v1 to remove residual drift
    let proj = dot(&v2, &v1);
    v2.iter_mut().zip(&v1).for_each(|(a, b)| *a -= proj * b);
    normalize(&mut v2);
    Ok(Tensor2::from_fn(s, 2, |i, c| dot(x.row(i), if c == 0 { &v1 } else { &v2 })))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance between differently labelled points over mean distance
/// between equally labelled points. Infinite when every group collapses to
/// a point but groups differ.
pub fn separation_ratio<L: Eq + Hash>(points: &Tensor2<f64>, labels: &[L]) -> Result<f64> {
    let s = points.rows();
    if labels.len() != s {
        return Err(Error::Contract(format!("{} labels for {s} points", labels.len())));
    }
    let mut sizes: HashMap<&L, usize> = HashMap::new();
    for l in labels {
        *sizes.entry(l).or_insert(0) += 1;
    }
    if sizes.len() < 2 || sizes.values().any(|&n| n < 2) {
        return Err(Error::Contract(
            "separation_ratio needs at least 2 labels with at least 2 points each".into(),
        ));
    }
    // dense label ids so the pair loop compares integers
    let mut ids: HashMap<&L, usize> = HashMap::new();
    let lab: Vec<usize> = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect();
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..s {
        for j in i + 1..s {
            let dist = euclid(points.row(i), points.row(j));
            if lab[i] == lab[j] {
                intra += dist;
                n_intra += 1;
            } else {
                inter += dist;
                n_inter += 1;
            }
        }
    }
    let (inter, intra) = (inter / n_inter as f64, intra / n_intra as f64);
    if intra == 0.0 {
        if inter == 0.0 {
            return Err(Error::Degenerate("separation_ratio: all points are identical".into()));
        }
        return Ok(f64::INFINITY);
    }
    Ok(inter / intra)
}

/// One scored answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub domain: usize,
    pub discriminative: bool,
    pub gold: Vec<usize>,
    pub pred: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainScores {
    pub n_discriminative: usize,
    pub n_open: usize,
    pub accuracy: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
}

/// Per-domain scores plus a macro average over domains.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub domains: Vec<DomainScores>,
    pub average: DomainScores,
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "rouge1", "rouge2", "rougeL", "bleu4"];

impl DomainScores {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "accuracy" => self.accuracy,
            "rouge1" => self.rouge1,
            "rouge2" => self.rouge2,
            "rougeL" => self.rouge_l,
            "bleu4" => self.bleu4,
            _ => return None,
        })
    }
}

impl EvalReport {
    /// Scores `rows` for `n_domains` domains. Discriminative rows count as
    /// correct when the first predicted token equals the gold answer; open
    /// rows get ROUGE and BLEU against the gold answer. A domain without rows
    /// of a kind scores 0 for it and is left out of that metric's average.
    pub fn compute(n_domains: usize, rows: &[Scored]) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::Contract("report needs at least one domain".into()));
        }
        let mut domains = vec![DomainScores::default(); n_domains];
        for r in rows {
            let d = domains.get_mut(r.domain).ok_or_else(|| {
                Error::Contract(format!("domain {} outside 0..{n_domains}", r.domain))
            })?;
            if r.discriminative {
                d.n_discriminative += 1;
                if r.pred.first() == r.gold.first() && !r.gold.is_empty() {
                    d.accuracy += 1.0;
                }
            } else {
                d.n_open += 1;
                d.rouge1 += rouge_n(&r.pred, &r.gold, 1)?;
                d.rouge2 += rouge_n(&r.pred, &r.gold, 2)?;
                d.rouge_l += rouge_l(&r.pred, &r.gold);
                d.bleu4 += bleu4(&r.pred, &r.gold);
            }
        }
        for d in &mut domains {
            if d.n_discriminative > 0 {
                d.accuracy /= d.n_discriminative as f64;
            }
            if d.n_open > 0 {
                let k = d.n_open as f64;
                d.rouge1 /= k;
                d.rouge2 /= k;
                d.rouge_l /= k;
                d.bleu4 /= k;
            }
        }
        let macro_avg = |f: fn(&DomainScores) -> f64, has: fn(&DomainScores) -> bool| {
            let vals: Vec<f64> = domains.iter().filter(|d| has(d)).map(f).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let disc = |d: &DomainScores| d.n_discriminative > 0;
        let open = |d: &DomainScores| d.n_open > 0;
        let average = DomainScores {
            n_discriminative: domains.iter().map(|d| d.n_discriminative).sum(),
            n_open: domains.iter().map(|d| d.n_open).sum(),
            accuracy: macro_avg(|d| d.accuracy, disc),
            rouge1: macro_avg(|d| d.rouge1, open),
            rouge2: macro_avg(|d| d.rouge2, open),
            rouge_l: macro_avg(|d| d.rouge_l, open),
            bleu4: macro_avg(|d| d.bleu4, open),
        };
        Ok(Self { domains, average })
    }

    /// One row per metric and per count, one column per domain, then `Avg.`
    /// (macro average; counts are totals).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric");
        for i in 0..self.domains.len() {
            out.push_str(&format!("\tdomain_{i}"));
        }
        out.push_str("\tAvg.\n");
        for name in METRIC_NAMES {
            out.push_str(name);
            for d in self.domains.iter().chain(std::iter::once(&self.average)) {
                out.push_str(&format!("\t{:.6}", d.metric(name).unwrap()));
            }
            out.push('\n');
        }
        for (name, f) in [
            ("n_discriminative", (|d: &DomainScores| d.n_discriminative) as fn(&DomainScores) -> usize),
            ("n_open", |d: &DomainScores| d.n_open),
        ] {
            out.push_str(name);
            for d in self.domains.iter().chain(std::iter::once(&self.average)) {
                out.push_str(&format!("\t{}", f(d)));
            }
            out.push('\n');
        }
        out
    }
}
