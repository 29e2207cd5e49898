//! Named parameter storage and the Adam optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the tensor called `name`, requiring an identical shape.
    pub fn set(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                self.tensors[id.0].shape(),
                t.shape()
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Places every parameter on `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &Graph<S>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Binds all parameters as constants except `id`, which becomes `var`.
    pub fn bind_with(&self, g: &Graph<S>, id: ParamId, var: Var) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == id.0 { var } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Gradients of every parameter in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        bound.0.iter().map(|&v| grads.wrt(v)).collect()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Normal draws with standard deviation `std`, redrawn outside ±2·std.
pub fn trunc_normal<S: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break S::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<_> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<S: Real>(
    params: &mut ParamStore<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let (lr, eps) = (S::of(cfg.lr), S::of(cfg.eps));
    let (bc1, bc2) = (S::of(bc1), S::of(bc2));
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.tensors[i];
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter '{}' of shape {:?}",
                g.shape(),
                params.names[i],
                p.shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (S::one() - b1) * gv;
            *vv = b2 * *vv + (S::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[vals.len()], vals).unwrap());
        s
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        st.m[0] = Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap();
        st.v[0] = Tensor::from_f64(&[2], &[0.25, 0.25]).unwrap();
        let cfg = AdamConfig::with_lr(1e-3);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg).unwrap();
        // Nonzero carried-over momentum still moves params; check moments decay.
        assert!((st.m[0].data()[0] - 0.45).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.25 * 0.999).abs() < 1e-15);

        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg).unwrap();
        assert_eq!(p.get(ParamId(0)).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let g = [0.3, -4.0, 1e-3];
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut p, &[Tensor::from_f64(&[3], &g).unwrap()], &mut st, &cfg).unwrap();
        for (d, gi) in p.get(ParamId(0)).data().iter().zip(g) {
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = store(&[0.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::with_lr(1e-3);
        let g = Tensor::from_f64(&[1], &[-0.7]).unwrap();
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut p, std::slice::from_ref(&g), &mut st, &cfg).unwrap();
            let now = p.get(ParamId(0)).data()[0];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - 1e-3).abs() < 1e-9, "{last_step}");
    }

    #[test]
    fn set_checks_shape() {
        let mut p = store(&[1.0, 2.0]);
        assert!(p.set("w", Tensor::zeros(&[3])).is_err());
        assert!(p.set("nope", Tensor::zeros(&[2])).is_err());
        assert!(p.set("w", Tensor::zeros(&[2])).is_ok());
    }
}
