//! Tiny pre-norm decoder-only transformer with adapters on selected projections.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterConfig, AmoeLoraAdapter, Variant};
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::kv::{self, KeyValue};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InjectionPoint {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl InjectionPoint {
    pub const ALL: [InjectionPoint; 6] = [
        InjectionPoint::AttnQ,
        InjectionPoint::AttnK,
        InjectionPoint::AttnV,
        InjectionPoint::AttnO,
        InjectionPoint::MlpUp,
        InjectionPoint::MlpDown,
    ];

    pub fn key(self) -> &'static str {
        match self {
            InjectionPoint::AttnQ => "attn_q",
            InjectionPoint::AttnK => "attn_k",
            InjectionPoint::AttnV => "attn_v",
            InjectionPoint::AttnO => "attn_o",
            InjectionPoint::MlpUp => "mlp_up",
            InjectionPoint::MlpDown => "mlp_down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key() == s.trim())
    }
}

impl fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Adapter hyperparameters shared by every injected projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSettings {
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Hypernetwork hidden width; `0` means "same as the projection input".
    pub hidden: usize,
    pub hyper_rank: usize,
    pub variant: Variant,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self {
            n_experts: 16,
            rank: 4,
            alpha: 16.0,
            hidden: 0,
            hyper_rank: 1,
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub d_ff: usize,
    /// Projections carrying an adapter, in every layer. Empty disables adapters.
    pub injection_points: Vec<InjectionPoint>,
    pub adapter: AdapterSettings,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 64,
            d_ff: 256,
            injection_points: vec![InjectionPoint::AttnQ, InjectionPoint::AttnV],
            adapter: AdapterSettings::default(),
        }
    }

    pub fn adapters_enabled(&self) -> bool {
        !self.injection_points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
            ("d_ff", self.d_ff),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapters_enabled() {
            for p in &self.injection_points {
                self.adapter_config(*p).validate()?;
            }
        }
        Ok(())
    }

    pub fn projection_dims(&self, point: InjectionPoint) -> (usize, usize) {
        match point {
            InjectionPoint::MlpUp => (self.d_model, self.d_ff),
            InjectionPoint::MlpDown => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    pub fn adapter_config(&self, point: InjectionPoint) -> AdapterConfig {
        let (d_in, d_out) = self.projection_dims(point);
        let a = &self.adapter;
        AdapterConfig {
            d_in,
            d_out,
            n_experts: a.n_experts,
            rank: a.rank,
            alpha: a.alpha,
            hidden: if a.hidden == 0 { d_in } else { a.hidden },
            hyper_rank: a.hyper_rank,
            variant: a.variant,
        }
    }

    /// Stage-2 trainable scalar count implied by the configuration.
    pub fn adapter_param_count(&self) -> usize {
        self.n_layers
            * self
                .injection_points
                .iter()
                .map(|&p| self.adapter_config(p).param_count())
                .sum::<usize>()
    }
}

impl KeyValue for ModelConfig {
    fn to_kv(&self) -> Vec<(&'static str, String)> {
        let points: Vec<&str> = self.injection_points.iter().map(|p| p.key()).collect();
        let a = &self.adapter;
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("max_seq", self.max_seq.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("injection_points", points.join(",")),
            ("variant", a.variant.key().to_string()),
            ("n_experts", a.n_experts.to_string()),
            ("rank", a.rank.to_string()),
            ("alpha", a.alpha.to_string()),
            ("hyper_hidden", a.hidden.to_string()),
            ("hyper_rank", a.hyper_rank.to_string()),
        ]
    }

    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.adapter;
        match key {
            "vocab_size" => self.vocab_size = kv::parse(key, value)?,
            "d_model" => self.d_model = kv::parse(key, value)?,
            "n_layers" => self.n_layers = kv::parse(key, value)?,
            "n_heads" => self.n_heads = kv::parse(key, value)?,
            "max_seq" => self.max_seq = kv::parse(key, value)?,
            "d_ff" => self.d_ff = kv::parse(key, value)?,
            "injection_points" => {
                self.injection_points = value
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| {
                        InjectionPoint::parse(p).ok_or_else(|| Error::Config(format!("{key}: unknown projection {p:?}")))
                    })
                    .collect::<Result<_>>()?;
            }
            "variant" => {
                a.variant = Variant::parse(value).ok_or_else(|| Error::Config(format!("{key}: unknown variant {value:?}")))?
            }
            "n_experts" => a.n_experts = kv::parse(key, value)?,
            "rank" => a.rank = kv::parse(key, value)?,
            "alpha" => a.alpha = kv::parse(key, value)?,
            "hyper_hidden" => a.hidden = kv::parse(key, value)?,
            "hyper_rank" => a.hyper_rank = kv::parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Base pretraining: every base parameter, no adapters.
    One,
    /// Adapter fine-tuning on a frozen base.
    Two,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1" | "stage1" => Some(Stage::One),
            "2" | "stage2" => Some(Stage::Two),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    adapter: Option<AmoeLoraAdapter>,
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

/// Whether injected adapters participate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterMode {
    Enabled,
    Disabled,
}

#[derive(Clone, Debug)]
pub struct TinyTransformer<S> {
    cfg: ModelConfig,
    store: ParamStore<S>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    base_pretrained: bool,
}

impl<S: Scalar> TinyTransformer<S> {
    /// Builds a model with weights drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let base = ParamGroup::Base;
        let emb_bound = 0.5;
        let tok_emb = store.add_uniform("tok_emb", base, cfg.vocab_size, d, emb_bound, &mut rng)?;
        let pos_emb = store.add_uniform("pos_emb", base, cfg.max_seq, d, emb_bound * 0.2, &mut rng)?;

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |name: &str| format!("layer.{l}.{name}");
            let ln1 = layer_norm(&mut store, &p("ln1"), d)?;
            let q = linear(&mut store, &p("attn_q"), d, d, true, &mut rng)?;
            // a key bias shifts every score in a row equally, so softmax ignores it
            let k = linear(&mut store, &p("attn_k"), d, d, false, &mut rng)?;
            let v = linear(&mut store, &p("attn_v"), d, d, true, &mut rng)?;
            let o = linear(&mut store, &p("attn_o"), d, d, true, &mut rng)?;
            let ln2 = layer_norm(&mut store, &p("ln2"), d)?;
            let up = linear(&mut store, &p("mlp_up"), d, cfg.d_ff, true, &mut rng)?;
            let down = linear(&mut store, &p("mlp_down"), cfg.d_ff, d, true, &mut rng)?;
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                up,
                down,
            });
        }
        let ln_f = layer_norm(&mut store, "ln_f", d)?;
        let head = linear(&mut store, "head", d, cfg.vocab_size, true, &mut rng)?;

        // Adapters draw from their own stream so that base weights depend only
        // on the seed, not on the adapter configuration.
        let mut arng = ChaCha8Rng::seed_from_u64(seed);
        arng.set_stream(1);
        for (l, block) in blocks.iter_mut().enumerate() {
            for &point in &cfg.injection_points {
                let prefix = format!("layer.{l}.{point}.adapter");
                let adapter = AmoeLoraAdapter::new(&mut store, &prefix, cfg.adapter_config(point), &mut arng)?;
                let lin = match point {
                    InjectionPoint::AttnQ => &mut block.q,
                    InjectionPoint::AttnK => &mut block.k,
                    InjectionPoint::AttnV => &mut block.v,
                    InjectionPoint::AttnO => &mut block.o,
                    InjectionPoint::MlpUp => &mut block.up,
                    InjectionPoint::MlpDown => &mut block.down,
                };
                lin.adapter = Some(adapter);
            }
        }
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
            base_pretrained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// True once base weights came from a stage-1 checkpoint.
    pub fn base_pretrained(&self) -> bool {
        self.base_pretrained
    }

    pub fn mark_base_pretrained(&mut self) {
        self.base_pretrained = true;
    }

    /// Every injected adapter, in layer order then injection order.
    pub fn adapters(&self) -> Vec<(usize, InjectionPoint, &AmoeLoraAdapter)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            let slots = [
                (InjectionPoint::AttnQ, &b.q),
                (InjectionPoint::AttnK, &b.k),
                (InjectionPoint::AttnV, &b.v),
                (InjectionPoint::AttnO, &b.o),
                (InjectionPoint::MlpUp, &b.up),
                (InjectionPoint::MlpDown, &b.down),
            ];
            for (p, lin) in slots {
                if let Some(a) = &lin.adapter {
                    out.push((l, p, a));
                }
            }
        }
        out
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        self.store.group_ids(ParamGroup::Base)
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.store.group_ids(ParamGroup::Adapter)
    }

    /// Parameters optimized in a stage: every base parameter in stage 1,
    /// exactly the adapter parameters in stage 2.
    pub fn trainable_params(&self, stage: Stage) -> Vec<ParamId> {
        match stage {
            Stage::One => self.base_params(),
            Stage::Two => self.adapter_params(),
        }
    }

    pub fn base_digest(&self) -> String {
        self.store.digest(ParamGroup::Base)
    }

    pub fn adapter_digest(&self) -> String {
        self.store.digest(ParamGroup::Adapter)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocab_size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Causal forward pass producing `T × vocab` logits.
    ///
    /// `cond_len` is the number of leading positions whose adapter inputs are
    /// pooled into the anomaly expert's conditioning row (the prompt). Positions
    /// at or after `cond_len` never influence earlier logits.
    pub fn forward(
        &self,
        s: &mut Session<'_, S>,
        tokens: &[usize],
        cond_len: usize,
        mode: AdapterMode,
    ) -> Result<NodeId> {
        self.forward_impl(s, tokens, Ctx { cond_len, mode }, None)
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, tokens: &[usize], cond_len: usize, mode: AdapterMode) -> Result<Tensor2<S>> {
        let mut s = Session::inference(&self.store);
        let out = self.forward(&mut s, tokens, cond_len, mode)?;
        Ok(s.value(out).clone())
    }

    /// Mean of the first `cond_len` rows of each adapter's input, ordered like
    /// [`Self::adapters`]. These are the anomaly experts' conditioning rows.
    pub fn conditioning_rows(&self, tokens: &[usize], cond_len: usize) -> Result<Vec<Tensor2<S>>> {
        let mut s = Session::inference(&self.store);
        let mut rows = Vec::new();
        let ctx = Ctx {
            cond_len,
            mode: AdapterMode::Enabled,
        };
        self.forward_impl(&mut s, tokens, ctx, Some(&mut rows))?;
        Ok(rows)
    }

    fn forward_impl(
        &self,
        s: &mut Session<'_, S>,
        tokens: &[usize],
        ctx: Ctx,
        mut capture: Option<&mut Vec<Tensor2<S>>>,
    ) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        if ctx.cond_len == 0 || ctx.cond_len > t {
            return Err(Error::Contract(format!("cond_len {} outside 1..={t}", ctx.cond_len)));
        }
        let mut proj = |s: &mut Session<'_, S>, lin: &Linear, x: NodeId| -> Result<NodeId> {
            if let (Some(rows), Some(_)) = (capture.as_deref_mut(), &lin.adapter) {
                let src = if ctx.cond_len == t { x } else { s.slice_rows(x, 0, ctx.cond_len)? };
                let c = s.mean_rows(src)?;
                rows.push(s.value(c).clone());
            }
            apply_linear(s, lin, x, ctx)
        };

        let tok = s.param(self.tok_emb);
        let pos = s.param(self.pos_emb);
        let te = s.gather_rows(tok, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = s.gather_rows(pos, &positions)?;
        let mut h = s.add(te, pe)?;

        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let inv_sqrt = S::one() / S::of(dh as f64).sqrt();
        for b in &self.blocks {
            let x = apply_ln(s, &b.ln1, h)?;
            let q = proj(s, &b.q, x)?;
            let k = proj(s, &b.k, x)?;
            let v = proj(s, &b.v, x)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        s.slice_cols(q, hd * dh, dh)?,
                        s.slice_cols(k, hd * dh, dh)?,
                        s.slice_cols(v, hd * dh, dh)?,
                    )
                };
                let scores = s.matmul_nt(qh, kh)?;
                let scores = s.scale(scores, inv_sqrt);
                let masked = s.causal_mask(scores);
                let p = s.softmax_rows(masked)?;
                outs.push(s.matmul(p, vh)?);
            }
            let attn = if heads == 1 { outs[0] } else { s.concat_cols(&outs)? };
            let attn = proj(s, &b.o, attn)?;
            h = s.add(h, attn)?;

            let x = apply_ln(s, &b.ln2, h)?;
            let up = proj(s, &b.up, x)?;
            let act = s.gelu(up);
            let down = proj(s, &b.down, act)?;
            h = s.add(h, down)?;
        }
        let x = apply_ln(s, &self.ln_f, h)?;
        proj(s, &self.head, x)
    }
}

#[derive(Clone, Copy)]
struct Ctx {
    cond_len: usize,
    mode: AdapterMode,
}

fn linear<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = store.add_uniform(format!("{name}.W"), ParamGroup::Base, d_in, d_out, bound, rng)?;
    let b = if bias {
        Some(store.add(format!("{name}.b"), ParamGroup::Base, Tensor2::zeros(1, d_out))?)
    } else {
        None
    };
    Ok(Linear {
        w,
        b,
        adapter: None,
    })
}

fn layer_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gain: store.add(format!("{name}.gain"), ParamGroup::Base, Tensor2::filled(1, d, S::one()))?,
        bias: store.add(format!("{name}.bias"), ParamGroup::Base, Tensor2::zeros(1, d))?,
    })
}

fn apply_ln<S: Scalar>(s: &mut Session<'_, S>, ln: &LayerNorm, x: NodeId) -> Result<NodeId> {
    let (g, b) = (s.param(ln.gain), s.param(ln.bias));
    s.layer_norm(x, g, b)
}

fn apply_linear<S: Scalar>(s: &mut Session<'_, S>, lin: &Linear, x: NodeId, ctx: Ctx) -> Result<NodeId> {
    let w = s.param(lin.w);
    let mut o0 = s.matmul(x, w)?;
    if let Some(b) = lin.b {
        let b = s.param(b);
        o0 = s.add_row(o0, b)?;
    }
    match (&lin.adapter, ctx.mode) {
        (Some(a), AdapterMode::Enabled) => a.amoe_forward_cond(s, o0, x, ctx.cond_len),
        _ => Ok(o0),
    }
}
