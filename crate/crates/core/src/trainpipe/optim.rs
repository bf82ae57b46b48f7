//! Bias-corrected adaptive-moment optimizer.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S> {
    pub cfg: AdamConfig,
    pub step: u64,
    /// Seed of the batch shuffle; with `step` it pins the data order.
    pub shuffle_seed: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor2<S>>,
    v: Vec<Tensor2<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(store: &ParamStore<S>, params: &[ParamId], cfg: AdamConfig) -> Self {
        let zeros = |&id: &ParamId| {
            let (r, c) = store.value(id).shape();
            Tensor2::zeros(r, c)
        };
        Self {
            cfg,
            step: 0,
            shuffle_seed: 0,
            params: params.to_vec(),
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Rebuilds a state from saved moments; shapes must match the parameters.
    pub fn from_parts(
        store: &ParamStore<S>,
        params: Vec<ParamId>,
        cfg: AdamConfig,
        step: u64,
        m: Vec<Tensor2<S>>,
        v: Vec<Tensor2<S>>,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state holds {}/{} moments for {} parameters",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for ((&id, mi), vi) in params.iter().zip(&m).zip(&v) {
            let want = store.value(id).shape();
            if mi.shape() != want || vi.shape() != want {
                return Err(Error::Shape(format!(
                    "moments for {} have shape {:?}/{:?}, parameter is {want:?}",
                    store.get(id).name,
                    mi.shape(),
                    vi.shape()
                )));
            }
        }
        Ok(Self {
            cfg,
            step,
            shuffle_seed: 0,
            params,
            m,
            v,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn first_moments(&self) -> &[Tensor2<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor2<S>] {
        &self.v
    }
}

/// One update of every parameter tracked by `st`; `grads` follows `st.params()`.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, grads: &[Tensor2<S>], st: &mut OptimState<S>) -> Result<()> {
    if grads.len() != st.params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            st.params.len()
        )));
    }
    for (&id, g) in st.params.iter().zip(grads) {
        let want = store.value(id).shape();
        if g.shape() != want {
            return Err(Error::dim("adam_step", want, g.shape()));
        }
    }
    st.step += 1;
    let c = st.cfg;
    let t = st.step as i32;
    let bc1 = S::of(1.0 - c.beta1.powi(t));
    let bc2 = S::of(1.0 - c.beta2.powi(t));
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let (lr, eps) = (S::of(c.lr), S::of(c.eps));
    let one = S::one();
    for (i, &id) in st.params.iter().enumerate() {
        let w = store.value_mut(id).data_mut();
        let m = st.m[i].data_mut();
        let v = st.v[i].data_mut();
        for (k, &gk) in grads[i].data().iter().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            w[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before rescaling.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor2<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", ParamGroup::Base, Tensor2::from_rows(&[[1.0, -2.0, 0.5]]).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let mut st = OptimState::new(&s, &[id], AdamConfig::with_lr(1e-2));
        for _ in 0..5 {
            adam_step(&mut s, &[Tensor2::zeros(1, 3)], &mut st).unwrap();
        }
        assert_eq!(s.value(id), &before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store();
        let g = Tensor2::from_rows(&[[0.3, -4.0, 1e-9]]).unwrap();
        let cfg = AdamConfig::with_lr(1e-3);
        let mut st = OptimState::new(&s, &[id], cfg);
        adam_step(&mut s, &[g.clone()], &mut st).unwrap();
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
        let start = [1.0, -2.0, 0.5];
        for k in 0..3 {
            let gk = g.data()[k];
            let want = start[k] - 1e-3 * gk / (gk.abs() + 1e-8);
            assert!((s.value(id).data()[k] - want).abs() < 1e-15, "entry {k}");
        }
    }

    #[test]
    fn identical_runs_match_bitwise() {
        let run = || {
            let (mut s, id) = store();
            let mut st = OptimState::new(&s, &[id], AdamConfig::with_lr(3e-3));
            for i in 0..10 {
                let g = Tensor2::from_fn(1, 3, |_, j| ((i * 3 + j) as f64).sin());
                adam_step(&mut s, &[g], &mut st).unwrap();
            }
            s.value(id).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, id) = store();
        let mut st = OptimState::new(&s, &[id], AdamConfig::with_lr(1e-3));
        assert!(adam_step(&mut s, &[Tensor2::zeros(3, 1)], &mut st).is_err());
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g: Vec<Tensor2<f64>> = vec![
            Tensor2::from_rows(&[[3.0, 0.0]]).unwrap(),
            Tensor2::from_rows(&[[0.0], [4.0]]).unwrap(),
        ];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g[1].get(1, 0) - 0.8).abs() < 1e-15);
    }
}
