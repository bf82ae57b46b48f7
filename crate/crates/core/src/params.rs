//! Named parameter storage and per-step graph sessions.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which training stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor2<S>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor2<S>) -> Result<ParamId> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, group, value });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform(-bound, bound) initialization.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let t = Tensor2::from_fn(rows, cols, |_, _| S::of(rng.gen_range(-bound..=bound)));
        self.add(name, group, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2<S> {
        &mut self.params[id.0].value
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor2<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {}", p.name)));
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.data().len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of a group.
    pub fn digest(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.iter().filter(|(_, p)| p.group == group) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for x in p.value.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One forward/backward pass: a fresh graph plus lazily bound parameter leaves.
///
/// Parameters listed as trainable become gradient-tracking leaves; all others
/// enter the graph as constants.
pub struct Session<'s, S> {
    graph: Graph<S>,
    store: &'s ParamStore<S>,
    bound: Vec<Option<NodeId>>,
    trainable: Vec<bool>,
}

impl<'s, S: Scalar> Session<'s, S> {
    pub fn new(store: &'s ParamStore<S>, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: mask,
        }
    }

    /// A session with nothing trainable, for evaluation.
    pub fn inference(store: &'s ParamStore<S>) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'s ParamStore<S> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = self
            .graph
            .leaf(self.store.value(id).clone(), self.trainable[id.0])
            .expect("stored parameters are finite");
        self.bound[id.0] = Some(n);
        n
    }

    /// Gradient of each trainable parameter after `backward`; parameters that
    /// were never touched by the forward pass get zeros.
    pub fn param_grads(&self, ids: &[ParamId]) -> Vec<Tensor2<S>> {
        ids.iter()
            .map(|&id| {
                self.bound[id.0]
                    .and_then(|n| self.graph.grad(n).cloned())
                    .unwrap_or_else(|| {
                        let (r, c) = self.store.value(id).shape();
                        Tensor2::zeros(r, c)
                    })
            })
            .collect()
    }

    pub fn into_graph(self) -> Graph<S> {
        self.graph
    }
}

impl<S> Deref for Session<'_, S> {
    type Target = Graph<S>;
    fn deref(&self) -> &Graph<S> {
        &self.graph
    }
}

impl<S> DerefMut for Session<'_, S> {
    fn deref_mut(&mut self) -> &mut Graph<S> {
        &mut self.graph
    }
}

/// One parameter entry compared by [`grad_check_entries`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    /// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs()).max(1e-8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub eps: f64,
    pub entries: Vec<GradEntry>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(GradEntry::rel_error).fold(0.0, f64::max)
    }

    /// Size of a one-ulp change in the loss seen through the central
    /// difference. Numeric derivatives are only resolved to a few of these.
    pub fn roundoff(&self) -> f64 {
        let ulp = f64::from_bits(self.loss.abs().to_bits() + 1) - self.loss.abs();
        ulp / (2.0 * self.eps)
    }
}

/// Central-difference gradient check over every entry of `params`.
///
/// `loss` builds a scalar loss inside the given session. Returns the maximum of
/// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` across all entries.
pub fn grad_check<S, F>(store: &mut ParamStore<S>, params: &[ParamId], eps: f64, loss: F) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Session<'_, S>) -> Result<NodeId>,
{
    Ok(grad_check_entries(store, params, eps, loss)?.max_rel_error())
}

/// Like [`grad_check`] but keeps every compared entry.
pub fn grad_check_entries<S, F>(store: &mut ParamStore<S>, params: &[ParamId], eps: f64, loss: F) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Session<'_, S>) -> Result<NodeId>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Contract(format!("grad_check eps must be positive, got {eps}")));
    }
    let (analytic, base) = {
        let mut s = Session::new(store, params);
        let root = loss(&mut s)?;
        s.backward(root)?;
        (s.param_grads(params), s.value(root).data()[0].as_f64())
    };
    let eval = |store: &ParamStore<S>| -> Result<f64> {
        let mut s = Session::inference(store);
        let root = loss(&mut s)?;
        Ok(s.value(root).data()[0].as_f64())
    };
    let mut entries = Vec::new();
    for (&id, ga) in params.iter().zip(&analytic) {
        for k in 0..ga.data().len() {
            let orig = store.value(id).data()[k];
            let up = S::of(orig.as_f64() + eps);
            let down = S::of(orig.as_f64() - eps);
            store.value_mut(id).data_mut()[k] = up;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = down;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            // divide by the step actually representable in S
            let numeric = (plus? - minus?) / (up - down).as_f64();
            entries.push(GradEntry {
                param: id,
                index: k,
                analytic: ga.data()[k].as_f64(),
                numeric,
            });
        }
    }
    Ok(GradCheck { loss: base, eps, entries })
}
