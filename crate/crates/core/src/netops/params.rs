use std::collections::HashMap;

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Array2<F>,
    pub grad: Array2<F>,
    m: Array2<F>,
    v: Array2<F>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let dim = value.dim();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Array2::zeros(dim),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn add_fan_in<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn(shape, |_| F::of(rng.gen_range(-bound..bound)));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Array2<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.dim() != grad.dim() {
            return Err(Error::shape(
                "accumulate",
                format!("{}: {:?} vs {:?}", p.name, p.grad.dim(), grad.dim()),
            ));
        }
        p.grad += grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Scales every accumulated gradient, e.g. to average over micro-batches.
    pub fn scale_grads(&mut self, c: F) {
        for p in &mut self.params {
            p.grad *= c;
        }
    }

    /// Bias-corrected Adam update of every parameter, then zeroes gradients.
    /// A non-finite gradient aborts before anything is modified.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::of(cfg.beta1);
        let b2 = F::of(cfg.beta2);
        let one = F::one();
        let c1 = one - F::of(cfg.beta1.powi(t));
        let c2 = one - F::of(cfg.beta2.powi(t));
        let lr = F::of(cfg.lr);
        let eps = F::of(cfg.eps);
        for p in &mut self.params {
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(&mut p.m)
                .and(&mut p.v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + (one - b1) * *g;
                    *v = b2 * *v + (one - b2) * *g * *g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    *g = F::zero();
                });
        }
        Ok(())
    }

    /// Copy with every tensor converted to another scalar type. Optimizer state is reset.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.mapv(|x| G::of(x.as_f64())))
                .expect("names are unique");
        }
        out
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {}", p.name)))?;
            if src.value.dim() != p.value.dim() {
                return Err(Error::shape("copy_values_from", p.name.clone()));
            }
            p.value.assign(&src.value);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", arr2(&[[1.0, -2.0], [3.0, 0.5]])).unwrap();
        let before = store.get(id).value.clone();
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).value, before);
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // t = 1, g = 1: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        // update = lr * 1 / (1 + eps).
        let cfg = AdamConfig::default();
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", arr2(&[[0.25]])).unwrap();
        store.get_mut(id).grad.fill(1.0);
        store.adam_step(&cfg).unwrap();
        let expected = 0.25 - 5e-4 / (1.0 + 1e-8);
        assert!((store.get(id).value[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(store.get(id).grad[[0, 0]], 0.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add("ok", arr2(&[[1.0]])).unwrap();
        let bad = store.add("mech.3.w", arr2(&[[1.0]])).unwrap();
        store.get_mut(bad).grad.fill(f32::NAN);
        let err = store.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("mech.3.w"), "{err}");
        assert_eq!(store.step_count(), 0);
    }

    #[test]
    fn identical_stores_update_identically() {
        let mut a = ParamStore::<f32>::new();
        let id = a.add("w", arr2(&[[0.3, 0.7]])).unwrap();
        let mut b = a.clone();
        for s in [&mut a, &mut b] {
            s.get_mut(id).grad.assign(&arr2(&[[0.5, -1.5]]));
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(a.get(id).value, b.get(id).value);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Array2::zeros((1, 1))).unwrap();
        assert!(s.add("a", Array2::zeros((1, 1))).is_err());
    }
}
