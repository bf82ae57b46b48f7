//! Two-stage training: base pretraining on normal sequences, then adapter
//! fine-tuning on a frozen base.

mod checkpoint;
mod optim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_base_into, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, OptimState};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{AdapterMode, Stage, TinyTransformer};
use crate::params::Session;
use crate::scalar::Scalar;
use crate::synthdata::{render_qa, QaStyle, Rendered, SyntheticSample, Vocab};
use crate::tensor::Tensor2;

/// Mean negative log-likelihood of `targets[t]` under row `t` of `logits`,
/// over the positions where `mask[t]` is set.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
    let rows = g.value(logits).rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Contract(format!(
            "cross_entropy: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(t, (&y, _))| (t, y))
        .collect();
    if picks.is_empty() {
        return Err(Error::Contract("cross_entropy: empty mask".into()));
    }
    g.cross_entropy(logits, &picks)
}

/// A teacher-forced training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Prompt length, used as the adapters' conditioning window.
    pub cond_len: usize,
}

impl Example {
    /// Stage 1 scores every next-token prediction; stage 2 only the answer
    /// tokens and the closing EOS.
    pub fn new(r: &Rendered, stage: Stage) -> Self {
        let full = r.full();
        let tokens = full[..full.len() - 1].to_vec();
        let targets = full[1..].to_vec();
        let prompt = r.input.len();
        let mask = (0..tokens.len())
            .map(|t| match stage {
                Stage::One => true,
                Stage::Two => t + 1 >= prompt,
            })
            .collect();
        let cond_len = match stage {
            Stage::One => tokens.len(),
            Stage::Two => prompt,
        };
        Self {
            tokens,
            targets,
            mask,
            cond_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the batch shuffle.
    pub seed: u64,
    /// Evaluate every this many steps (and after the last one); 0 disables.
    pub eval_every: usize,
    /// Discriminative held-out samples scored per evaluation; 0 means all.
    pub eval_samples: usize,
    /// Global gradient-norm ceiling applied before each update; 0 disables.
    pub clip_norm: f64,
    /// Written after the last step when set.
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for a stage. Both stages use lr 3e-3 with norm clipping at 1.
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig::with_lr(3e-3),
            seed: 0,
            eval_every: 250,
            eval_samples: 512,
            clip_norm: 1.0,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm must be finite and non-negative, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Training samples plus the held-out set scored during training.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [SyntheticSample],
    pub eval: &'a [SyntheticSample],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous point.
    pub loss: f64,
    /// Held-out discriminative accuracy of the first answer token.
    pub accuracy: f64,
    /// Held-out cross-entropy of the TRUE/FALSE choice, i.e. the first answer
    /// token's logits restricted to those two tokens.
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub base_digest_before: String,
    pub base_digest_after: String,
}

impl TrainReport {
    pub fn is_empty(&self) -> bool {
        self.losses.is_empty() && self.evals.is_empty()
    }

    /// The per-interval log as TSV.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\taccuracy\teval_loss\n");
        for e in &self.evals {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", e.step, e.loss, e.accuracy, e.eval_loss));
        }
        out
    }
}

/// Loss and parameter gradients of one example.
fn example_grads<S: Scalar>(
    m: &TinyTransformer<S>,
    ex: &Example,
    mode: AdapterMode,
    trainable: &[crate::params::ParamId],
) -> Result<(f64, Vec<Tensor2<S>>)> {
    let mut s = Session::new(m.store(), trainable);
    let logits = m.forward(&mut s, &ex.tokens, ex.cond_len, mode)?;
    let loss = cross_entropy(&mut s, logits, &ex.targets, &ex.mask)?;
    s.backward(loss)?;
    let value = s.value(loss).data()[0].as_f64();
    Ok((value, s.param_grads(trainable)))
}

/// Runs one training stage in place and returns its report together with the
/// final optimizer state.
///
/// Stage 1 trains every base parameter on full normal sequences with adapters
/// switched off. Stage 2 trains only adapter parameters on answer tokens and
/// requires base weights that came from a stage-1 run.
pub fn run_stage<S: Scalar>(
    m: &mut TinyTransformer<S>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(TrainReport, OptimState<S>)> {
    cfg.validate()?;
    let stage = cfg.stage;
    if stage == Stage::Two {
        if !m.base_pretrained() {
            return Err(Error::MissingPrerequisite(
                "stage 2 needs base weights from a stage-1 checkpoint".into(),
            ));
        }
        if m.adapter_params().is_empty() {
            return Err(Error::Config("stage 2 needs at least one injection point".into()));
        }
    }
    let mode = match stage {
        Stage::One => AdapterMode::Disabled,
        Stage::Two => AdapterMode::Enabled,
    };
    let examples: Vec<Example> = data
        .train
        .iter()
        .filter(|s| stage == Stage::Two || !s.is_abnormal())
        .map(|s| Example::new(&render_qa(data.vocab, s), stage))
        .collect();
    if cfg.steps > 0 && examples.is_empty() {
        return Err(Error::Contract(format!("no training examples for stage {}", stage.number())));
    }

    let trainable = m.trainable_params(stage);
    let mut st = OptimState::new(m.store(), &trainable, cfg.adam);
    st.shuffle_seed = cfg.seed;
    let base_digest_before = m.base_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut since_eval = 0.0;
    let mut since_count = 0usize;

    for step in 1..=cfg.steps {
        let mut grads: Option<Vec<Tensor2<S>>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let (l, g) = example_grads(m, ex, mode, &trainable)?;
            batch_loss += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch_size >= 1");
        let inv = S::one() / S::of(cfg.batch_size as f64);
        for g in &mut grads {
            g.scale_assign(inv);
        }
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm);
        }
        adam_step(m.store_mut(), &grads, &mut st)?;
        let batch_loss = batch_loss / cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(batch_loss);
        since_eval += batch_loss;
        since_count += 1;

        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let (accuracy, eval_loss) = held_out_discriminative(m, data, cfg.eval_samples)?;
            let point = EvalPoint {
                step,
                loss: since_eval / since_count as f64,
                accuracy,
                eval_loss,
            };
            log::info!(
                "stage {} step {step}: loss {:.4} acc {:.4} eval_loss {:.4}",
                stage.number(),
                point.loss,
                accuracy,
                eval_loss
            );
            evals.push(point);
            since_eval = 0.0;
            since_count = 0;
        }
    }

    if stage == Stage::One && cfg.steps > 0 {
        m.mark_base_pretrained();
    }
    let report = TrainReport {
        stage,
        losses,
        evals,
        base_digest_before,
        base_digest_after: m.base_digest(),
    };
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, m, Some(&st))?;
    }
    Ok((report, st))
}

/// Accuracy and two-way TRUE/FALSE loss on held-out discriminative samples.
/// Returns NaN for both when there are none.
pub fn held_out_discriminative<S: Scalar>(
    m: &TinyTransformer<S>,
    data: &TrainData<'_>,
    limit: usize,
) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in data.eval.iter().filter(|s| s.qa_style == QaStyle::Discriminative) {
        if limit > 0 && n == limit {
            break;
        }
        let r = render_qa(data.vocab, s);
        let logits = m.logits(&r.input, r.input.len(), AdapterMode::Enabled)?;
        let last = logits.row(logits.rows() - 1);
        let gold = r.target[0];
        if argmax(last) == gold {
            correct += 1;
        }
        let pair = log_softmax(&[last[Vocab::TRUE], last[Vocab::FALSE]]);
        loss -= if gold == Vocab::TRUE { pair[0] } else { pair[1] };
        n += 1;
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

fn log_softmax<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Index of the largest entry; the first one on ties.
fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` until EOS or `max_new` tokens.
/// EOS is not included in the result.
pub fn greedy_decode<S: Scalar>(m: &TinyTransformer<S>, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let room = m.config().max_seq.saturating_sub(prompt.len());
    for _ in 0..max_new.min(room) {
        let logits = m.logits(&seq, prompt.len(), AdapterMode::Enabled)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == Vocab::EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Longest answer the corpus produces, excluding EOS.
pub const MAX_ANSWER_TOKENS: usize = 2;

/// Greedy answers for every sample, in order.
pub fn predict_answers<S: Scalar>(m: &TinyTransformer<S>, vocab: &Vocab, samples: &[SyntheticSample]) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| {
            let r = render_qa(vocab, s);
            // one extra step so that a model which never emits EOS is visible
            greedy_decode(m, &r.input, MAX_ANSWER_TOKENS + 1)
        })
        .collect()
}
