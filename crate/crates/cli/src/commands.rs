//! The subcommands as library functions so tests can drive them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use amoe::metrics::{pca2, separation_ratio, EvalReport, Scored, METRIC_NAMES};
use amoe::synthdata::{gen_split, read_dataset, render_qa, write_dataset, QaStyle, SyntheticSample, Vocab};
use amoe::trainpipe::{load_base_into, load_checkpoint, predict_answers, run_stage, save_checkpoint, TrainData, TrainReport};
use amoe::{Error, Model, Stage, Tensor, Variant};
use anyhow::{bail, Context, Result};
use log::info;

use crate::config::RunConfig;

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const ABLATION_FILE: &str = "ablation.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const FACTORS_FILE: &str = "factors.tsv";
pub const PCA_FILE: &str = "pca.tsv";
pub const SEPARATION_FILE: &str = "separation.tsv";

/// Expert count and rank pairs with a constant product of 64.
pub const SWEEP_GRID: [(usize, usize); 4] = [(4, 16), (8, 8), (16, 4), (32, 2)];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads `train.txt` and `test.txt` from `dir`, or generates the split from
/// the config when no directory is given.
pub fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let (train, test) = match dir {
        Some(dir) => (read_dataset(dir.join(TRAIN_FILE))?, read_dataset(dir.join(TEST_FILE))?),
        None => gen_split(&cfg.task)?,
    };
    let vocab = cfg.task.vocab();
    let check = |s: &SyntheticSample| -> Result<()> {
        let r = render_qa(&vocab, s);
        if s.domain_id >= cfg.task.n_domains || r.full().iter().any(|&t| t >= vocab.size()) {
            bail!("dataset does not fit the configured task (domain {}, vocab {})", s.domain_id, vocab.size());
        }
        Ok(())
    };
    train.iter().chain(&test).try_for_each(check)?;
    Ok(Dataset { train, test })
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    create_dir(out)?;
    let (train, test) = gen_split(&cfg.task)?;
    write_dataset(out.join(TRAIN_FILE), &train)?;
    write_dataset(out.join(TEST_FILE), &test)?;
    cfg.write_to(out)?;
    info!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok(Dataset { train, test })
}

/// Runs one stage and writes `model.ckpt`, `train_log.tsv` and the config
/// into `out`. Stage 2 starts from the base weights in `init`.
pub fn train(cfg: &RunConfig, stage: Stage, init: Option<&Path>, data: &Dataset, out: &Path) -> Result<(Model, TrainReport)> {
    let mut m = Model::new(cfg.model.clone(), cfg.train.seed)?;
    match (stage, init) {
        (Stage::Two, None) => bail!(Error::MissingPrerequisite("stage 2 needs --init pointing at a stage-1 checkpoint".into())),
        (Stage::Two, Some(path)) => load_base_into(path, &mut m)?,
        (Stage::One, Some(_)) => bail!("--init only applies to stage 2"),
        (Stage::One, None) => {}
    }
    let tc = cfg.train_config(stage);
    if tc.steps == 0 {
        bail!("steps_stage{} must be at least 1", stage.number());
    }
    create_dir(out)?;
    cfg.write_to(out)?;
    let vocab = cfg.task.vocab();
    let td = TrainData {
        vocab: &vocab,
        train: &data.train,
        eval: &data.test,
    };
    info!("stage {} on {} samples for {} steps", stage.number(), data.train.len(), tc.steps);
    let (report, st) = run_stage(&mut m, &td, &tc)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &m, Some(&st))?;
    write(&out.join(TRAIN_LOG_FILE), &report.to_tsv())?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        info!("loss {first:.4} -> {last:.4}");
    }
    if let Some(e) = report.evals.last() {
        info!("held-out accuracy {:.4} at step {}", e.accuracy, e.step);
    }
    if report.base_digest_before != report.base_digest_after {
        info!("base digest changed to {}", report.base_digest_after);
    }
    Ok((m, report))
}

/// One greedy answer next to its gold answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub domain: usize,
    pub style: QaStyle,
    pub gold: Vec<usize>,
    pub pred: Vec<usize>,
}

impl Prediction {
    fn scored(&self) -> Scored {
        Scored {
            domain: self.domain,
            discriminative: self.style == QaStyle::Discriminative,
            gold: self.gold.clone(),
            pred: self.pred.clone(),
        }
    }
}

fn ids(v: &[usize]) -> String {
    v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn predictions_tsv(preds: &[Prediction]) -> String {
    let mut out = String::from("index\tdomain\tstyle\tgold\tpred\n");
    for p in preds {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", p.index, p.domain, p.style.key(), ids(&p.gold), ids(&p.pred));
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            bail!("predictions line {}: expected 5 fields, found {}", i + 1, f.len());
        }
        let tokens = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().with_context(|| format!("predictions line {}: bad token {t:?}", i + 1)))
                .collect()
        };
        out.push(Prediction {
            index: f[0].parse().with_context(|| format!("predictions line {}: bad index", i + 1))?,
            domain: f[1].parse().with_context(|| format!("predictions line {}: bad domain", i + 1))?,
            style: QaStyle::parse(f[2]).with_context(|| format!("predictions line {}: bad style {:?}", i + 1, f[2]))?,
            gold: tokens(f[3])?,
            pred: tokens(f[4])?,
        });
    }
    Ok(out)
}

/// Scores predictions for `n_domains` domains.
pub fn report_from_predictions(n_domains: usize, preds: &[Prediction]) -> Result<EvalReport> {
    let rows: Vec<Scored> = preds.iter().map(Prediction::scored).collect();
    Ok(EvalReport::compute(n_domains, &rows)?)
}

/// Greedy answers for every held-out sample and the resulting report.
pub fn evaluate(m: &Model, cfg: &RunConfig, test: &[SyntheticSample]) -> Result<(EvalReport, Vec<Prediction>)> {
    let vocab = cfg.task.vocab();
    if m.config().vocab_size != vocab.size() {
        bail!(
            "checkpoint vocabulary has {} tokens but the task implies {}",
            m.config().vocab_size,
            vocab.size()
        );
    }
    let answers = predict_answers(m, &vocab, test)?;
    let preds: Vec<Prediction> = test
        .iter()
        .zip(answers)
        .enumerate()
        .map(|(index, (s, pred))| Prediction {
            index,
            domain: s.domain_id,
            style: s.qa_style,
            gold: s.answer.clone(),
            pred,
        })
        .collect();
    let report = report_from_predictions(cfg.task.n_domains, &preds)?;
    Ok((report, preds))
}

/// Evaluates `m` and writes `report.tsv`, `predictions.tsv` and the config.
pub fn eval_into(m: &Model, cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<EvalReport> {
    create_dir(out)?;
    cfg.write_to(out)?;
    let (report, preds) = evaluate(m, cfg, &data.test)?;
    write(&out.join(REPORT_FILE), &report.to_tsv())?;
    write(&out.join(PREDICTIONS_FILE), &predictions_tsv(&preds))?;
    info!("accuracy {:.4} over {} discriminative samples", report.average.accuracy, report.average.n_discriminative);
    Ok(report)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Dataset, out: &Path) -> Result<EvalReport> {
    let (m, _) = load_checkpoint::<f64>(checkpoint)?;
    eval_into(&m, cfg, data, out)
}

/// The stage-1 checkpoint to build on: `init` when given, otherwise a fresh
/// stage-1 run under `out/base`.
fn base_checkpoint(cfg: &RunConfig, init: Option<&Path>, data: &Dataset, out: &Path) -> Result<PathBuf> {
    match init {
        Some(p) => Ok(p.to_path_buf()),
        None => {
            let dir = out.join("base");
            train(cfg, Stage::One, None, data, &dir)?;
            Ok(dir.join(CHECKPOINT_FILE))
        }
    }
}

/// A stage-2 run followed by evaluation, in `dir`.
fn train_and_eval(cfg: &RunConfig, base: &Path, data: &Dataset, dir: &Path) -> Result<(TrainReport, EvalReport)> {
    let (m, report) = train(cfg, Stage::Two, Some(base), data, dir)?;
    let eval = eval_into(&m, cfg, data, dir)?;
    Ok((report, eval))
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub dir: PathBuf,
    pub train: TrainReport,
    pub eval: EvalReport,
}

fn metric_header(first: &str) -> String {
    let mut out = first.to_string();
    for name in METRIC_NAMES {
        out.push('\t');
        out.push_str(name);
    }
    out
}

fn metric_cells(r: &EvalReport) -> String {
    METRIC_NAMES
        .iter()
        .map(|n| format!("{:.6}", r.average.metric(n).unwrap()))
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn ablation_tsv(runs: &[VariantRun]) -> String {
    let mut out = metric_header("model");
    out.push('\n');
    for r in runs {
        let _ = writeln!(out, "{}\t{}", r.variant.label(), metric_cells(&r.eval));
    }
    out
}

/// Trains LoRA, LoRAMoE and AMoE-LoRA on the same base, seed and budget,
/// each in its own subdirectory of `out`, and writes `ablation.tsv`.
pub fn ablate(cfg: &RunConfig, init: Option<&Path>, data: &Dataset, out: &Path) -> Result<Vec<VariantRun>> {
    create_dir(out)?;
    cfg.write_to(out)?;
    let base = base_checkpoint(cfg, init, data, out)?;
    let mut runs = Vec::new();
    for variant in Variant::ALL {
        let vcfg = cfg.with_variant(variant);
        let dir = out.join(variant.key());
        info!("ablation: {}", variant.label());
        let (train, eval) = train_and_eval(&vcfg, &base, data, &dir)?;
        runs.push(VariantRun { variant, dir, train, eval });
    }
    write(&out.join(ABLATION_FILE), &ablation_tsv(&runs))?;
    Ok(runs)
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub n_experts: usize,
    pub rank: usize,
    pub dir: PathBuf,
    pub eval: EvalReport,
}

pub fn sweep_tsv(cells: &[SweepCell]) -> String {
    let mut out = metric_header("n_experts\trank\tproduct");
    out.push_str("\tnote\n");
    for c in cells {
        // the stock adapter shape, for orientation
        let note = if (c.n_experts, c.rank) == (16, 4) { "default" } else { "-" };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{note}",
            c.n_experts,
            c.rank,
            c.n_experts * c.rank,
            metric_cells(&c.eval)
        );
    }
    out
}

/// Trains one stage-2 model per [`SWEEP_GRID`] cell and writes `sweep.tsv`.
pub fn sweep(cfg: &RunConfig, init: Option<&Path>, data: &Dataset, out: &Path) -> Result<Vec<SweepCell>> {
    if cfg.model.adapter.variant == Variant::LoraOnly {
        bail!(Error::Variant("the expert sweep needs a routed variant, not lora".into()));
    }
    create_dir(out)?;
    cfg.write_to(out)?;
    let base = base_checkpoint(cfg, init, data, out)?;
    let mut cells = Vec::new();
    for (n, r) in SWEEP_GRID {
        let mut c = cfg.clone();
        c.model.adapter.n_experts = n;
        c.model.adapter.rank = r;
        c.resolve()?;
        let dir = out.join(format!("n{n}_r{r}"));
        info!("sweep: N = {n}, r = {r}");
        let (_, eval) = train_and_eval(&c, &base, data, &dir)?;
        cells.push(SweepCell { n_experts: n, rank: r, dir, eval });
    }
    write(&out.join(SWEEP_FILE), &sweep_tsv(&cells))?;
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct Inspection {
    /// One row per held-out sample: every adapter's flattened `A₀ ‖ B₀`, in adapter order.
    pub factors: Tensor,
    pub pca: Tensor,
    pub by_object: f64,
    pub by_defect: f64,
}

/// Per-sample generated factors of every adapter, one row per sample.
pub fn generated_factor_rows(m: &Model, vocab: &Vocab, samples: &[SyntheticSample]) -> Result<Tensor> {
    let adapters = m.adapters();
    if let Some((_, _, a)) = adapters.iter().find(|(_, _, a)| a.config().variant != Variant::Full) {
        bail!(Error::Variant(format!(
            "generated factors need the amoe variant, checkpoint has {}",
            a.config().variant.key()
        )));
    }
    if adapters.is_empty() {
        bail!(Error::Variant("checkpoint has no adapters".into()));
    }
    let mut conds: Vec<Vec<Tensor>> = vec![Vec::with_capacity(samples.len()); adapters.len()];
    for s in samples {
        let r = render_qa(vocab, s);
        for (k, row) in m.conditioning_rows(&r.input, r.input.len())?.into_iter().enumerate() {
            conds[k].push(row);
        }
    }
    let blocks: Vec<Tensor> = adapters
        .iter()
        .zip(&conds)
        .map(|((_, _, a), c)| a.extract_generated_params(m.store(), c))
        .collect::<amoe::Result<_>>()?;
    let width: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut data = Vec::with_capacity(samples.len() * width);
    for i in 0..samples.len() {
        for b in &blocks {
            data.extend_from_slice(b.row(i));
        }
    }
    Ok(Tensor::from_vec(samples.len(), width, data)?)
}

/// Separation ratio over the groups with at least two members; NaN when
/// fewer than two such groups exist.
fn grouped_separation(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut counts = std::collections::HashMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| counts[&labels[i]] >= 2).collect();
    if counts.values().filter(|&&n| n >= 2).count() < 2 {
        log::warn!("too few repeated labels for a separation ratio");
        return Ok(f64::NAN);
    }
    if keep.len() == labels.len() {
        return Ok(separation_ratio(points, labels)?);
    }
    let rows = Tensor::from_fn(keep.len(), points.cols(), |i, j| points.get(keep[i], j));
    let kept: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    Ok(separation_ratio(&rows, &kept)?)
}

/// Extracts the generated factors over the test split, projects them to 2-D
/// and measures how well they separate by object and by defect class.
/// Normal samples form their own defect group.
pub fn inspect_adapters(cfg: &RunConfig, checkpoint: &Path, data: &Dataset, out: &Path) -> Result<Inspection> {
    let (m, _) = load_checkpoint::<f64>(checkpoint)?;
    let vocab = cfg.task.vocab();
    let test = &data.test;
    let factors = generated_factor_rows(&m, &vocab, test)?;
    let objects: Vec<usize> = test.iter().map(|s| s.object_key(cfg.task.objects_per_domain)).collect();
    let defects: Vec<usize> = test.iter().map(|s| s.defect_id).collect();
    let pca = pca2(&factors)?;
    let by_object = grouped_separation(&factors, &objects)?;
    let by_defect = grouped_separation(&factors, &defects)?;
    info!("separation ratio by object {by_object:.4}, by defect {by_defect:.4}");

    create_dir(out)?;
    cfg.write_to(out)?;
    let mut f = String::from("index\tobject\tdefect");
    for j in 0..factors.cols() {
        let _ = write!(f, "\tf{j}");
    }
    f.push('\n');
    let mut p = String::from("index\tobject\tdefect\tpc1\tpc2\n");
    for i in 0..test.len() {
        let _ = write!(f, "{i}\t{}\t{}", objects[i], defects[i]);
        for x in factors.row(i) {
            let _ = write!(f, "\t{x:e}");
        }
        f.push('\n');
        let _ = writeln!(p, "{i}\t{}\t{}\t{:e}\t{:e}", objects[i], defects[i], pca.get(i, 0), pca.get(i, 1));
    }
    write(&out.join(FACTORS_FILE), &f)?;
    write(&out.join(PCA_FILE), &p)?;
    write(
        &out.join(SEPARATION_FILE),
        &format!("grouping\tseparation_ratio\nobject\t{by_object:.6}\ndefect\t{by_defect:.6}\n"),
    )?;
    Ok(Inspection {
        factors,
        pca,
        by_object,
        by_defect,
    })
}
