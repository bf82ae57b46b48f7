//! Deterministic synthetic anomaly-QA corpus.
//!
//! Every `(domain, object)` pair owns a disjoint band of content tokens;
//! abnormal samples overwrite a contiguous span with tokens from a band owned
//! by the defect class. Each sample carries one of two question styles:
//! a binary normal/abnormal question, or an open question answered by the
//! defect class and the third of the sequence the defect sits in.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`): draw `i` of a corpus with
//! seed `s` uses the generator seeded by `s` on stream `i`, so every sample
//! is reproducible on its own and independent of generation order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{self, KeyValue};

pub const DATASET_HEADER: &str = "mauqa-synth v1";

/// Fraction of every `(domain, defect)` stratum sent to the test split.
pub const TEST_FRACTION: f64 = 0.2;

/// Stream reserved for the split shuffle; draw indices never reach it.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QaStyle {
    Discriminative,
    OpenEnded,
}

impl QaStyle {
    pub fn key(self) -> &'static str {
        match self {
            QaStyle::Discriminative => "discriminative",
            QaStyle::OpenEnded => "open_ended",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "discriminative" => Some(QaStyle::Discriminative),
            "open_ended" => Some(QaStyle::OpenEnded),
            _ => None,
        }
    }
}

/// Where in the content sequence a defect's centre falls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionBucket {
    Begin,
    Mid,
    End,
}

impl PositionBucket {
    /// Thirds of `seq_len`, judged by the span centre `start + len/2`.
    pub fn of_span(start: usize, len: usize, seq_len: usize) -> Self {
        // 3·(2·start + len) / (2·seq_len) is the centre's third, in integers.
        match (3 * (2 * start + len)) / (2 * seq_len) {
            0 => PositionBucket::Begin,
            1 => PositionBucket::Mid,
            _ => PositionBucket::End,
        }
    }

    fn offset(self) -> usize {
        match self {
            PositionBucket::Begin => 0,
            PositionBucket::Mid => 1,
            PositionBucket::End => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub n_domains: usize,
    pub objects_per_domain: usize,
    pub defect_classes: usize,
    pub seq_len: usize,
    /// Probability that a draw is normal; strictly inside (0, 1).
    pub normal_ratio: f64,
    /// Probability that a draw asks the binary question.
    pub discriminative_ratio: f64,
    pub n_samples: usize,
    /// Content tokens per `(domain, object)` band.
    pub band_width: usize,
    /// Content tokens per defect-class band.
    pub defect_band_width: usize,
    pub span_min: usize,
    pub span_max: usize,
    /// Question variants per style.
    pub templates_per_style: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_domains: 6,
            objects_per_domain: 3,
            defect_classes: 8,
            seq_len: 16,
            normal_ratio: 0.5,
            discriminative_ratio: 0.5,
            n_samples: 20_000,
            band_width: 8,
            defect_band_width: 2,
            span_min: 3,
            span_max: 5,
            templates_per_style: 3,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_domains", self.n_domains),
            ("objects_per_domain", self.objects_per_domain),
            ("defect_classes", self.defect_classes),
            ("seq_len", self.seq_len),
            ("band_width", self.band_width),
            ("defect_band_width", self.defect_band_width),
            ("span_min", self.span_min),
            ("templates_per_style", self.templates_per_style),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.normal_ratio > 0.0 && self.normal_ratio < 1.0) {
            return Err(Error::Config(format!(
                "normal_ratio must lie strictly between 0 and 1, got {}",
                self.normal_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.discriminative_ratio) {
            return Err(Error::Config(format!(
                "discriminative_ratio must lie in [0, 1], got {}",
                self.discriminative_ratio
            )));
        }
        if self.span_min > self.span_max || self.span_max > self.seq_len {
            return Err(Error::Config(format!(
                "need 1 <= span_min <= span_max <= seq_len, got {}..{} with seq_len {}",
                self.span_min, self.span_max, self.seq_len
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self)
    }

    pub fn n_objects(&self) -> usize {
        self.n_domains * self.objects_per_domain
    }

    /// Longest rendered sequence (prompt plus target).
    pub fn max_rendered_len(&self) -> usize {
        // BOS, domain, content, SEP, 2 question tokens, up to 2 answer tokens, EOS
        self.seq_len + 8
    }
}

impl KeyValue for TaskConfig {
    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_domains", self.n_domains.to_string()),
            ("objects_per_domain", self.objects_per_domain.to_string()),
            ("defect_classes", self.defect_classes.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("normal_ratio", self.normal_ratio.to_string()),
            ("discriminative_ratio", self.discriminative_ratio.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("band_width", self.band_width.to_string()),
            ("defect_band_width", self.defect_band_width.to_string()),
            ("span_min", self.span_min.to_string()),
            ("span_max", self.span_max.to_string()),
            ("templates_per_style", self.templates_per_style.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }

    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_domains" => self.n_domains = kv::parse(key, value)?,
            "objects_per_domain" => self.objects_per_domain = kv::parse(key, value)?,
            "defect_classes" => self.defect_classes = kv::parse(key, value)?,
            "seq_len" => self.seq_len = kv::parse(key, value)?,
            "normal_ratio" => self.normal_ratio = kv::parse(key, value)?,
            "discriminative_ratio" => self.discriminative_ratio = kv::parse(key, value)?,
            "n_samples" => self.n_samples = kv::parse(key, value)?,
            "band_width" => self.band_width = kv::parse(key, value)?,
            "defect_band_width" => self.defect_band_width = kv::parse(key, value)?,
            "span_min" => self.span_min = kv::parse(key, value)?,
            "span_max" => self.span_max = kv::parse(key, value)?,
            "templates_per_style" => self.templates_per_style = kv::parse(key, value)?,
            "data_seed" => self.seed = kv::parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Token id layout derived from a [`TaskConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    n_domains: usize,
    n_objects: usize,
    defect_classes: usize,
    band_width: usize,
    defect_band_width: usize,
    templates: usize,
    defect_answer_base: usize,
    question_base: usize,
    domain_base: usize,
    object_base: usize,
    defect_base: usize,
    size: usize,
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const SEP: usize = 2;
    pub const TRUE: usize = 3;
    pub const FALSE: usize = 4;
    /// Open-ended answer for a normal sample.
    pub const NONE: usize = 5;
    pub const POS_BEGIN: usize = 6;
    pub const POS_MID: usize = 7;
    pub const POS_END: usize = 8;
    pub const Q_DISCRIMINATIVE: usize = 9;
    pub const Q_OPEN: usize = 10;
    const RESERVED: usize = 11;

    fn new(cfg: &TaskConfig) -> Self {
        let defect_answer_base = Self::RESERVED;
        let question_base = defect_answer_base + cfg.defect_classes;
        let domain_base = question_base + 2 * cfg.templates_per_style;
        let object_base = domain_base + cfg.n_domains;
        let defect_base = object_base + cfg.n_objects() * cfg.band_width;
        let size = defect_base + cfg.defect_classes * cfg.defect_band_width;
        Self {
            n_domains: cfg.n_domains,
            n_objects: cfg.n_objects(),
            defect_classes: cfg.defect_classes,
            band_width: cfg.band_width,
            defect_band_width: cfg.defect_band_width,
            templates: cfg.templates_per_style,
            defect_answer_base,
            question_base,
            domain_base,
            object_base,
            defect_base,
            size,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Answer token naming defect class `defect` (1-based).
    pub fn defect_answer(&self, defect: usize) -> usize {
        debug_assert!((1..=self.defect_classes).contains(&defect));
        self.defect_answer_base + defect - 1
    }

    pub fn position(&self, bucket: PositionBucket) -> usize {
        Self::POS_BEGIN + bucket.offset()
    }

    pub fn question_template(&self, style: QaStyle, template: usize) -> usize {
        let style_off = match style {
            QaStyle::Discriminative => 0,
            QaStyle::OpenEnded => self.templates,
        };
        self.question_base + style_off + template
    }

    pub fn domain(&self, domain: usize) -> usize {
        debug_assert!(domain < self.n_domains);
        self.domain_base + domain
    }

    /// Token band `[start, end)` owned by a global object index.
    pub fn object_band(&self, object: usize) -> (usize, usize) {
        debug_assert!(object < self.n_objects);
        let start = self.object_base + object * self.band_width;
        (start, start + self.band_width)
    }

    /// Token band `[start, end)` owned by a defect class (1-based).
    pub fn defect_band(&self, defect: usize) -> (usize, usize) {
        debug_assert!((1..=self.defect_classes).contains(&defect));
        let start = self.defect_base + (defect - 1) * self.defect_band_width;
        (start, start + self.defect_band_width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSample {
    pub domain_id: usize,
    /// Object index within its domain.
    pub object_id: usize,
    /// `0` for normal samples, otherwise the 1-based defect class.
    pub defect_id: usize,
    pub content: Vec<usize>,
    /// `(start, len)` of the overwritten span, abnormal samples only.
    pub defect_span: Option<(usize, usize)>,
    pub qa_style: QaStyle,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl SyntheticSample {
    pub fn is_abnormal(&self) -> bool {
        self.defect_id != 0
    }

    /// Object index unique across domains.
    pub fn object_key(&self, objects_per_domain: usize) -> usize {
        self.domain_id * objects_per_domain + self.object_id
    }
}

/// Tokenized prompt and target for a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Rendered {
    /// `input ++ target`, the sequence a model is trained on.
    pub fn full(&self) -> Vec<usize> {
        let mut v = self.input.clone();
        v.extend_from_slice(&self.target);
        v
    }
}

fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw number `index` of the corpus defined by `cfg`.
pub fn gen_sample(cfg: &TaskConfig, index: u64) -> SyntheticSample {
    let vocab = cfg.vocab();
    let mut rng = draw_rng(cfg.seed, index);
    let domain_id = rng.gen_range(0..cfg.n_domains);
    let object_id = rng.gen_range(0..cfg.objects_per_domain);
    let abnormal = rng.gen::<f64>() >= cfg.normal_ratio;
    let defect_id = if abnormal {
        rng.gen_range(1..=cfg.defect_classes)
    } else {
        0
    };
    let qa_style = if rng.gen::<f64>() < cfg.discriminative_ratio {
        QaStyle::Discriminative
    } else {
        QaStyle::OpenEnded
    };
    let template = rng.gen_range(0..cfg.templates_per_style);

    // Triangular weights over the object's band: the first token is the most likely.
    let (band_start, _) = vocab.object_band(domain_id * cfg.objects_per_domain + object_id);
    let w = cfg.band_width;
    let total = w * (w + 1) / 2;
    let mut content: Vec<usize> = (0..cfg.seq_len)
        .map(|_| {
            let mut pick = rng.gen_range(0..total);
            let mut j = 0;
            while pick >= w - j {
                pick -= w - j;
                j += 1;
            }
            band_start + j
        })
        .collect();

    let defect_span = if abnormal {
        let len = rng.gen_range(cfg.span_min..=cfg.span_max);
        let start = rng.gen_range(0..=cfg.seq_len - len);
        let (lo, hi) = vocab.defect_band(defect_id);
        for tok in &mut content[start..start + len] {
            *tok = rng.gen_range(lo..hi);
        }
        Some((start, len))
    } else {
        None
    };

    let question = vec![
        match qa_style {
            QaStyle::Discriminative => Vocab::Q_DISCRIMINATIVE,
            QaStyle::OpenEnded => Vocab::Q_OPEN,
        },
        vocab.question_template(qa_style, template),
    ];
    let answer = match (qa_style, defect_span) {
        (QaStyle::Discriminative, Some(_)) => vec![Vocab::TRUE],
        (QaStyle::Discriminative, None) => vec![Vocab::FALSE],
        (QaStyle::OpenEnded, Some((start, len))) => vec![
            vocab.defect_answer(defect_id),
            vocab.position(PositionBucket::of_span(start, len, cfg.seq_len)),
        ],
        (QaStyle::OpenEnded, None) => vec![Vocab::NONE],
    };
    SyntheticSample {
        domain_id,
        object_id,
        defect_id,
        content,
        defect_span,
        qa_style,
        question,
        answer,
    }
}

/// `[BOS, domain, content.., SEP, question..]` → `answer.. EOS`.
pub fn render_qa(vocab: &Vocab, s: &SyntheticSample) -> Rendered {
    let mut input = Vec::with_capacity(s.content.len() + 3 + s.question.len());
    input.push(Vocab::BOS);
    input.push(vocab.domain(s.domain_id));
    input.extend_from_slice(&s.content);
    input.push(Vocab::SEP);
    input.extend_from_slice(&s.question);
    let mut target = s.answer.clone();
    target.push(Vocab::EOS);
    Rendered { input, target }
}

/// Generates `cfg.n_samples` draws and splits every `(domain, defect)` stratum
/// 80/20 after a seeded shuffle. Both splits keep draw order.
pub fn gen_split(cfg: &TaskConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    cfg.validate()?;
    let samples: Vec<SyntheticSample> = (0..cfg.n_samples as u64).map(|i| gen_sample(cfg, i)).collect();
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry((s.domain_id, s.defect_id)).or_default().push(i);
    }
    let mut rng = draw_rng(cfg.seed, SPLIT_STREAM);
    let mut is_test = vec![false; samples.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * TEST_FRACTION).round() as usize;
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, t) in samples.into_iter().zip(is_test) {
        if t {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, test))
}

fn join_ids(ids: &[usize]) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{id}");
    }
    out
}

/// Serializes samples in the line-oriented dataset format.
pub fn format_dataset(samples: &[SyntheticSample]) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for s in samples {
        let (start, len) = match s.defect_span {
            Some((a, b)) => (a as i64, b as i64),
            None => (-1, -1),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.domain_id,
            s.object_id,
            s.defect_id,
            start,
            len,
            s.qa_style.key(),
            join_ids(&s.content),
            join_ids(&s.question),
            join_ids(&s.answer)
        );
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[SyntheticSample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_dataset(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SyntheticSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(path, &text)
}

/// Parses the dataset format; `path` is only used in error messages.
pub fn parse_dataset(path: &Path, text: &str) -> Result<Vec<SyntheticSample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == DATASET_HEADER => {}
        Some(h) => return Err(err(1, format!("expected header {DATASET_HEADER:?}, found {h:?}"))),
        None => return Err(err(1, "missing header line".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(err(lineno, format!("expected 9 tab-separated fields, found {}", fields.len())));
        }
        let int = |k: usize, name: &str| -> Result<i64> {
            fields[k]
                .parse::<i64>()
                .map_err(|_| err(lineno, format!("field {name}: not an integer: {:?}", fields[k])))
        };
        let ids = |k: usize, name: &str| -> Result<Vec<usize>> {
            fields[k]
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| err(lineno, format!("field {name}: bad token id {t:?}"))))
                .collect()
        };
        let unsigned = |k: usize, name: &str| -> Result<usize> {
            let v = int(k, name)?;
            usize::try_from(v).map_err(|_| err(lineno, format!("field {name}: negative value {v}")))
        };
        let domain_id = unsigned(0, "domain_id")?;
        let object_id = unsigned(1, "object_id")?;
        let defect_id = unsigned(2, "defect_id")?;
        let (start, len) = (int(3, "span_start")?, int(4, "span_len")?);
        let defect_span = match (start, len) {
            (-1, -1) => None,
            (a, b) if a >= 0 && b > 0 => Some((a as usize, b as usize)),
            _ => return Err(err(lineno, format!("invalid span ({start}, {len})"))),
        };
        if (defect_id == 0) != defect_span.is_none() {
            return Err(err(lineno, "defect_id and span disagree".into()));
        }
        let qa_style = QaStyle::parse(fields[5]).ok_or_else(|| err(lineno, format!("unknown qa_style {:?}", fields[5])))?;
        out.push(SyntheticSample {
            domain_id,
            object_id,
            defect_id,
            defect_span,
            qa_style,
            content: ids(6, "content")?,
            question: ids(7, "question")?,
            answer: ids(8, "answer")?,
        });
    }
    Ok(out)
}
