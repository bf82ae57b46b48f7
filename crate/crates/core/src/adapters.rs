//! Mixture-of-LoRA adapter with a hypernetwork-generated anomaly expert.
//!
//! All inputs use the row-vector convention: `x` is `T × d`, one token per
//! row, so the column form `B A x` of a low-rank update is computed as
//! `x · Aᵀ · Bᵀ`.
//!
//! The adapter sums three contributions onto a frozen projection output `o0`:
//!
//! * `o1 = (α/r) Σᵢ ωᵢ · x Aᵢᵀ Bᵢᵀ`, with `ω = softmax(x W_g)` per token;
//! * `o2 = (α/r) · x A₀ᵀ B₀ᵀ`, with `A₀ = W_a H` and `B₀ = H W_b`, where
//!   `H = Uᵀ V` is produced by a hypernetwork from a pooled conditioning row;
//! * `o = o0 + o1 + o2`.
//!
//! `H` is `d × d` but is never materialized: with `Hᵀ = Vᵀ U` the anomaly
//! output reduces to `(x Vᵀ) · (U W_aᵀ W_bᵀ Vᵀ) · U`, which only touches
//! `k × d` and `k × k` intermediates.

use rand::Rng;

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// A single LoRA expert, no router, no anomaly branch.
    LoraOnly,
    /// Routed generalist experts only.
    MoeOnly,
    /// Generalist experts plus the hypernetwork anomaly expert.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::LoraOnly, Variant::MoeOnly, Variant::Full];

    /// Config-file spelling.
    pub fn key(self) -> &'static str {
        match self {
            Variant::LoraOnly => "lora",
            Variant::MoeOnly => "loramoe",
            Variant::Full => "amoe",
        }
    }

    /// Table label.
    pub fn label(self) -> &'static str {
        match self {
            Variant::LoraOnly => "LoRA",
            Variant::MoeOnly => "LoRAMoE",
            Variant::Full => "AMoE-LoRA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lora" | "lora_only" => Some(Variant::LoraOnly),
            "loramoe" | "moe" | "moe_only" => Some(Variant::MoeOnly),
            "amoe" | "amoe-lora" | "amoe_lora" | "full" => Some(Variant::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Width of the adapted projection's input.
    pub d_in: usize,
    /// Width of the adapted projection's output.
    pub d_out: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Hidden width of each hypernetwork MLP.
    pub hidden: usize,
    /// Number of outer products summed into `H`.
    pub hyper_rank: usize,
    pub variant: Variant,
}

impl AdapterConfig {
    /// Square adapter (`d_in = d_out = d`) with the default hyperparameters.
    pub fn new(d: usize, variant: Variant) -> Self {
        Self {
            d_in: d,
            d_out: d,
            n_experts: if variant == Variant::LoraOnly { 1 } else { 16 },
            rank: 4,
            alpha: 16.0,
            hidden: d,
            hyper_rank: 1,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("adapter width must be positive".into()));
        }
        let d = self.d_in.min(self.d_out);
        if self.rank == 0 || self.rank > d {
            return Err(Error::Config(format!(
                "adapter rank must satisfy 1 <= r <= d, got r={} d={d}",
                self.rank
            )));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if self.variant == Variant::LoraOnly && self.n_experts != 1 {
            return Err(Error::Config(format!(
                "variant lora requires n_experts = 1, got {}",
                self.n_experts
            )));
        }
        if self.variant == Variant::Full && (self.hidden == 0 || self.hyper_rank == 0) {
            return Err(Error::Config("hypernetwork hidden width and rank must be positive".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    /// `α / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable scalars in one adapter of this configuration.
    pub fn param_count(&self) -> usize {
        let (di, dout, r, n, h, k) = (self.d_in, self.d_out, self.rank, self.n_experts, self.hidden, self.hyper_rank);
        let experts = n * r * (di + dout);
        match self.variant {
            Variant::LoraOnly => experts,
            Variant::MoeOnly => experts + di * n,
            Variant::Full => {
                let mlp = |out: usize| di * h + h + h * out + out;
                experts + di * n + r * (di + dout) + mlp(k * dout) + mlp(k * di)
            }
        }
    }
}

/// One generalist expert: `A` is `r × d_in`, `B` is `d_out × r`.
#[derive(Clone, Debug)]
pub struct LoraExpert {
    pub a: ParamId,
    pub b: ParamId,
}

/// `W_g`, `d_in × N`.
#[derive(Clone, Debug)]
pub struct Router {
    pub w_g: ParamId,
}

/// `d → h → k·d` with a tanh hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let g = ParamGroup::Adapter;
        Ok(Self {
            w1: store.add_uniform(format!("{prefix}.W1"), g, d_in, hidden, bound, rng)?,
            b1: store.add(format!("{prefix}.b1"), g, Tensor2::zeros(1, hidden))?,
            w2: store.add_uniform(format!("{prefix}.W2"), g, hidden, d_out, bound, rng)?,
            b2: store.add(format!("{prefix}.b2"), g, Tensor2::zeros(1, d_out))?,
        })
    }

    fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, c: NodeId) -> Result<NodeId> {
        let (w1, b1, w2, b2) = (s.param(self.w1), s.param(self.b1), s.param(self.w2), s.param(self.b2));
        let h = s.matmul(c, w1)?;
        let h = s.add_row(h, b1)?;
        let h = s.tanh(h);
        let o = s.matmul(h, w2)?;
        s.add_row(o, b2)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Two MLPs producing the factors of `H(c) = Uᵀ V` (`d_out × d_in`).
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    pub phi_u: Mlp,
    pub phi_v: Mlp,
    d_in: usize,
    d_out: usize,
    rank: usize,
}

impl HyperNetwork {
    /// `c` (`1 × d_in`) ↦ `(U, V)` with `U: k × d_out` and `V: k × d_in`.
    pub fn hyper_core<S: Scalar>(&self, s: &mut Session<'_, S>, c: NodeId) -> Result<(NodeId, NodeId)> {
        let sc = s.value(c).shape();
        if sc != (1, self.d_in) {
            return Err(Error::dim("hyper_core", sc, (1, self.d_in)));
        }
        let u = self.phi_u.forward(s, c)?;
        let v = self.phi_v.forward(s, c)?;
        if self.rank == 1 {
            return Ok((u, v));
        }
        let u = s.reshape(u, self.rank, self.d_out)?;
        let v = s.reshape(v, self.rank, self.d_in)?;
        Ok((u, v))
    }
}

/// The anomaly-aware expert: hypernetwork plus `W_a` (`r × d_out`) and `W_b` (`d_in × r`).
#[derive(Clone, Debug)]
pub struct AnomalyExpert {
    pub hyper: HyperNetwork,
    pub w_a: ParamId,
    pub w_b: ParamId,
}

/// Per-sample factors produced by the anomaly expert.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedFactors<S> {
    /// `r × d_in`
    pub a0: Tensor2<S>,
    /// `d_out × r`
    pub b0: Tensor2<S>,
    /// `k × d_out`
    pub u: Tensor2<S>,
    /// `k × d_in`
    pub v: Tensor2<S>,
}

impl<S: Scalar> GeneratedFactors<S> {
    /// `A₀ ‖ B₀`, row-major, length `r(d_in + d_out)`.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = self.a0.data().to_vec();
        out.extend_from_slice(self.b0.data());
        out
    }
}

#[derive(Clone, Debug)]
pub struct AmoeLoraAdapter {
    cfg: AdapterConfig,
    pub experts: Vec<LoraExpert>,
    pub router: Option<Router>,
    pub anomaly: Option<AnomalyExpert>,
}

impl AmoeLoraAdapter {
    /// Registers all adapter parameters under `prefix`. `A`-side factors, the
    /// router and the hypernetwork draw from uniform(±1/√d_in); every `B`-side
    /// factor and `W_b` start at zero.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (di, dout, r) = (cfg.d_in, cfg.d_out, cfg.rank);
        let bound = 1.0 / (di as f64).sqrt();
        let g = ParamGroup::Adapter;
        let mut experts = Vec::with_capacity(cfg.n_experts);
        for i in 0..cfg.n_experts {
            experts.push(LoraExpert {
                a: store.add_uniform(format!("{prefix}.expert.{i}.A"), g, r, di, bound, rng)?,
                b: store.add(format!("{prefix}.expert.{i}.B"), g, Tensor2::zeros(dout, r))?,
            });
        }
        let router = match cfg.variant {
            Variant::LoraOnly => None,
            _ => Some(Router {
                w_g: store.add_uniform(format!("{prefix}.router.W_g"), g, di, cfg.n_experts, bound, rng)?,
            }),
        };
        let anomaly = match cfg.variant {
            Variant::Full => {
                let k = cfg.hyper_rank;
                let hyper = HyperNetwork {
                    phi_u: Mlp::new(store, &format!("{prefix}.hyper.u"), di, cfg.hidden, k * dout, rng)?,
                    phi_v: Mlp::new(store, &format!("{prefix}.hyper.v"), di, cfg.hidden, k * di, rng)?,
                    d_in: di,
                    d_out: dout,
                    rank: k,
                };
                Some(AnomalyExpert {
                    hyper,
                    w_a: store.add_uniform(format!("{prefix}.W_a"), g, r, dout, bound, rng)?,
                    w_b: store.add(format!("{prefix}.W_b"), g, Tensor2::zeros(di, r))?,
                })
            }
            _ => None,
        };
        Ok(Self {
            cfg,
            experts,
            router,
            anomaly,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for e in &self.experts {
            ids.push(e.a);
            ids.push(e.b);
        }
        if let Some(r) = &self.router {
            ids.push(r.w_g);
        }
        if let Some(an) = &self.anomaly {
            ids.extend(an.hyper.phi_u.ids());
            ids.extend(an.hyper.phi_v.ids());
            ids.push(an.w_a);
            ids.push(an.w_b);
        }
        ids
    }

    fn check_input<S: Scalar>(&self, s: &Session<'_, S>, x: NodeId, op: &'static str) -> Result<()> {
        let sx = s.value(x).shape();
        if sx.1 != self.cfg.d_in {
            return Err(Error::dim(op, sx, (sx.0, self.cfg.d_in)));
        }
        Ok(())
    }

    /// Router weights `ω`, `T × N`; every row is a probability vector.
    pub fn route<S: Scalar>(&self, s: &mut Session<'_, S>, x: NodeId) -> Result<NodeId> {
        self.check_input(s, x, "route")?;
        match &self.router {
            Some(router) => {
                let w = s.param(router.w_g);
                let logits = s.matmul(x, w)?;
                s.softmax_rows(logits)
            }
            None => {
                let t = s.value(x).rows();
                s.constant(Tensor2::filled(t, 1, S::one()))
            }
        }
    }

    /// Unscaled `x Aᵀ Bᵀ` for one expert.
    pub fn expert_forward<S: Scalar>(&self, s: &mut Session<'_, S>, e: &LoraExpert, x: NodeId) -> Result<NodeId> {
        self.check_input(s, x, "expert_forward")?;
        let (a, b) = (s.param(e.a), s.param(e.b));
        let z = s.matmul_nt(x, a)?;
        s.matmul_nt(z, b)
    }

    /// `o1 = (α/r) Σᵢ ωᵢ ⊙ x Aᵢᵀ Bᵢᵀ`.
    ///
    /// The experts are stacked into `A_cat` (`N·r × d`) and `B_cat`
    /// (`d × N·r`) so the weighted sum is two matrix products with the router
    /// weights repeated `r` times across the middle dimension.
    pub fn generalist_forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: NodeId) -> Result<NodeId> {
        self.check_input(s, x, "generalist_forward")?;
        let scaling = S::of(self.cfg.scaling());
        if self.router.is_none() {
            let e = &self.experts[0];
            let o = self.expert_forward(s, e, x)?;
            return Ok(s.scale(o, scaling));
        }
        let omega = self.route(s, x)?;
        let a_parts: Vec<NodeId> = self.experts.iter().map(|e| s.param(e.a)).collect();
        let b_parts: Vec<NodeId> = self.experts.iter().map(|e| s.param(e.b)).collect();
        let a_cat = s.concat_rows(&a_parts)?;
        let b_cat = s.concat_cols(&b_parts)?;
        let z = s.matmul_nt(x, a_cat)?;
        let w = s.repeat_cols(omega, self.cfg.rank)?;
        let zw = s.hadamard(z, w)?;
        let o = s.matmul_nt(zw, b_cat)?;
        Ok(s.scale(o, scaling))
    }

    fn anomaly_expert(&self, op: &str) -> Result<&AnomalyExpert> {
        self.anomaly
            .as_ref()
            .ok_or_else(|| Error::Variant(format!("{op} requires the amoe variant, adapter is {}", self.cfg.variant.key())))
    }

    /// Hypernetwork factors for a conditioning row.
    pub fn hyper_core<S: Scalar>(&self, s: &mut Session<'_, S>, c: NodeId) -> Result<(NodeId, NodeId)> {
        self.anomaly_expert("hyper_core")?.hyper.hyper_core(s, c)
    }

    fn anomaly_output<S: Scalar>(&self, s: &mut Session<'_, S>, x: NodeId, c: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        self.check_input(s, x, "anomaly_forward")?;
        let an = self.anomaly_expert("anomaly_forward")?;
        let (u, v) = an.hyper.hyper_core(s, c)?;
        let (w_a, w_b) = (s.param(an.w_a), s.param(an.w_b));
        // x Hᵀ W_aᵀ W_bᵀ Hᵀ with Hᵀ = Vᵀ U
        let p = s.matmul_nt(x, v)?; // T × k
        let q = s.matmul_nt(u, w_a)?; // k × r
        let q = s.matmul_nt(q, w_b)?; // k × d_in
        let core = s.matmul_nt(q, v)?; // k × k
        let pc = s.matmul(p, core)?; // T × k
        let o = s.matmul(pc, u)?; // T × d_out
        Ok((s.scale(o, S::of(self.cfg.scaling())), u, v))
    }

    /// `o2 = (α/r) x A₀ᵀ B₀ᵀ`, plus the generated factors for inspection.
    pub fn anomaly_forward<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        x: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, GeneratedFactors<S>)> {
        let (o2, u, v) = self.anomaly_output(s, x, c)?;
        let an = self.anomaly_expert("anomaly_forward")?;
        let store = s.store();
        let gf = generated_factors(store.value(an.w_a), store.value(an.w_b), s.value(u), s.value(v))?;
        Ok((o2, gf))
    }

    /// `o = o0 + o1 + o2`, conditioning on the mean of all rows of `x`.
    pub fn amoe_forward<S: Scalar>(&self, s: &mut Session<'_, S>, o0: NodeId, x: NodeId) -> Result<NodeId> {
        let rows = s.value(x).rows();
        self.amoe_forward_cond(s, o0, x, rows)
    }

    /// As [`Self::amoe_forward`], conditioning on the mean of the first
    /// `cond_rows` rows of `x` only.
    pub fn amoe_forward_cond<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        o0: NodeId,
        x: NodeId,
        cond_rows: usize,
    ) -> Result<NodeId> {
        let (so, sx) = (s.value(o0).shape(), s.value(x).shape());
        if so != (sx.0, self.cfg.d_out) {
            return Err(Error::dim("amoe_forward", so, sx));
        }
        self.check_input(s, x, "amoe_forward")?;
        let o1 = self.generalist_forward(s, x)?;
        let mut out = s.add(o0, o1)?;
        if self.anomaly.is_some() {
            let c = self.conditioning(s, x, cond_rows)?;
            let (o2, _, _) = self.anomaly_output(s, x, c)?;
            out = s.add(out, o2)?;
        }
        Ok(out)
    }

    fn conditioning<S: Scalar>(&self, s: &mut Session<'_, S>, x: NodeId, cond_rows: usize) -> Result<NodeId> {
        let rows = s.value(x).rows();
        if cond_rows == 0 || cond_rows > rows {
            return Err(Error::Contract(format!(
                "conditioning span {cond_rows} outside 1..={rows}"
            )));
        }
        let src = if cond_rows == rows { x } else { s.slice_rows(x, 0, cond_rows)? };
        s.mean_rows(src)
    }

    /// Generated factors for a conditioning row, outside any training graph.
    pub fn factors_for<S: Scalar>(&self, store: &ParamStore<S>, c: &Tensor2<S>) -> Result<GeneratedFactors<S>> {
        let an = self.anomaly_expert("extract_generated_params")?;
        let mut s = Session::inference(store);
        let cn = s.constant(c.clone())?;
        let (u, v) = an.hyper.hyper_core(&mut s, cn)?;
        generated_factors(store.value(an.w_a), store.value(an.w_b), s.value(u), s.value(v))
    }

    /// One row `A₀ ‖ B₀` per conditioning row: `S × r(d_in + d_out)`, i.e. `2rd` when square.
    pub fn extract_generated_params<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        conds: &[Tensor2<S>],
    ) -> Result<Tensor2<S>> {
        self.anomaly_expert("extract_generated_params")?;
        let width = self.cfg.rank * (self.cfg.d_in + self.cfg.d_out);
        let mut data = Vec::with_capacity(conds.len() * width);
        for c in conds {
            data.extend(self.factors_for(store, c)?.flatten());
        }
        Tensor2::from_vec(conds.len(), width, data)
    }
}

/// `A₀ = W_a Uᵀ V` and `B₀ = Uᵀ V W_b`, associating so no `d × d` product is formed.
pub fn generated_factors<S: Scalar>(
    w_a: &Tensor2<S>,
    w_b: &Tensor2<S>,
    u: &Tensor2<S>,
    v: &Tensor2<S>,
) -> Result<GeneratedFactors<S>> {
    let a0 = w_a.matmul_nt(u)?.matmul(v)?;
    let b0 = u.matmul_tn(&v.matmul(w_b)?)?;
    Ok(GeneratedFactors {
        a0,
        b0,
        u: u.clone(),
        v: v.clone(),
    })
}
