//! Named parameter storage with deterministic initialization and Adam.
//!
//! Initialization draws from an RNG seeded by `(store seed, parameter name)`,
//! so two stores with the same seed hold bitwise-identical values regardless
//! of registration order. Gradients accumulate into a buffer of the same
//! shape until an optimizer step consumes them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, DType, Tensor};
use crate::util::{derive_seed_named, rng_from_seed};

/// Initialization policy for a parameter.
#[derive(Clone, Debug)]
pub enum Init {
    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    UniformFanIn(usize),
    /// Uniform in `[-scale, scale]`.
    Uniform(f64),
    Zeros,
    Const(f64),
    Value(Tensor),
}

#[derive(Clone)]
struct Entry {
    value: Tensor,
    grad: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
}

#[derive(Clone)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    entries: BTreeMap<String, Entry>,
    adam_t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            seed,
            dtype: DType::F64,
            entries: BTreeMap::new(),
            adam_t: 0,
        }
    }

    pub fn with_dtype(seed: u64, dtype: DType) -> ParamStore {
        ParamStore {
            seed,
            dtype,
            entries: BTreeMap::new(),
            adam_t: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Registers a parameter. Names must be unique.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!(
                "parameter '{name}' registered twice"
            )));
        }
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::filled(shape, v),
            Init::Uniform(scale) => self.draw_uniform(name, shape, scale),
            Init::UniformFanIn(fan_in) => {
                if fan_in == 0 {
                    return Err(Error::config(format!(
                        "parameter '{name}': fan_in must be positive"
                    )));
                }
                let bound = (1.0 / fan_in as f64).sqrt();
                self.draw_uniform(name, shape, bound)
            }
            Init::Value(t) => {
                if t.shape() != shape {
                    return Err(Error::shape(format!(
                        "parameter '{name}': init value shape {} does not match {}",
                        shape_str(t.shape()),
                        shape_str(shape)
                    )));
                }
                t
            }
        };
        let value = value.with_dtype(self.dtype);
        self.entries.insert(
            name.to_string(),
            Entry {
                grad: Tensor::zeros(value.shape()),
                adam_m: Tensor::zeros(value.shape()),
                adam_v: Tensor::zeros(value.shape()),
                value,
            },
        );
        let _ = n;
        Ok(())
    }

    fn draw_uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut rng = rng_from_seed(derive_seed_named(self.seed, name));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
            .collect();
        Tensor::from_vec(shape, data).expect("internal: uniform draw size")
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        if value.shape() != entry.value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}': cannot set shape {} over {}",
                shape_str(value.shape()),
                shape_str(entry.value.shape())
            )));
        }
        entry.value = value.with_dtype(self.dtype);
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            for v in entry.grad.data_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        if delta.shape() != entry.grad.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}': gradient shape {} does not match {}",
                shape_str(delta.shape()),
                shape_str(entry.grad.shape())
            )));
        }
        entry.grad.add_assign(delta)
    }

    /// One Adam step with bias correction over every parameter.
    ///
    /// A non-finite gradient aborts with an error naming the parameter, and
    /// no parameter is modified in that case.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        for (name, entry) in &self.entries {
            if !entry.grad.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
        }
        self.adam_t += 1;
        let t = self.adam_t as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for entry in self.entries.values_mut() {
            let g = entry.grad.data();
            let m = entry.adam_m.data_mut();
            let v = entry.adam_v.data_mut();
            let w = entry.value.data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            entry.value.quantize();
        }
        Ok(())
    }

    /// Iterates `(name, value)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_identical_values_in_any_order() {
        let mut a = ParamStore::new(11);
        a.register("x.w", &[4, 3], Init::UniformFanIn(4)).unwrap();
        a.register("y.w", &[2, 2], Init::UniformFanIn(2)).unwrap();
        let mut b = ParamStore::new(11);
        b.register("y.w", &[2, 2], Init::UniformFanIn(2)).unwrap();
        b.register("x.w", &[4, 3], Init::UniformFanIn(4)).unwrap();
        assert_eq!(a.get("x.w").unwrap(), b.get("x.w").unwrap());
        assert_eq!(a.get("y.w").unwrap(), b.get("y.w").unwrap());
        let mut c = ParamStore::new(12);
        c.register("x.w", &[4, 3], Init::UniformFanIn(4)).unwrap();
        assert_ne!(a.get("x.w").unwrap(), c.get("x.w").unwrap());
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let mut s = ParamStore::new(3);
        s.register("w", &[100, 10], Init::UniformFanIn(100)).unwrap();
        let bound = (1.0f64 / 100.0).sqrt();
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(s.get("w").unwrap().max_abs() > bound * 0.5);
    }

    #[test]
    fn duplicate_and_unknown_names_error() {
        let mut s = ParamStore::new(0);
        s.register("a", &[1], Init::Zeros).unwrap();
        assert!(s.register("a", &[1], Init::Zeros).is_err());
        assert!(s.get("b").is_err());
        assert!(s.accumulate_grad("b", &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // minimize (w - 3)^2 from w = 0; lr 0.1, 500 steps.
        let mut s = ParamStore::new(0);
        s.register("w", &[1], Init::Zeros).unwrap();
        for _ in 0..500 {
            s.zero_grads();
            let w = s.get("w").unwrap().data()[0];
            s.accumulate_grad("w", &Tensor::from_vec(&[1], vec![2.0 * (w - 3.0)]).unwrap())
                .unwrap();
            s.adam_step(0.1).unwrap();
        }
        let w = s.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn adam_steps_are_deterministic() {
        let run = || {
            let mut s = ParamStore::new(5);
            s.register("w", &[8], Init::UniformFanIn(8)).unwrap();
            for i in 0..10 {
                s.zero_grads();
                let g: Vec<f64> = s
                    .get("w")
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * 0.3 + i as f64 * 0.01)
                    .collect();
                s.accumulate_grad("w", &Tensor::from_vec(&[8], g).unwrap())
                    .unwrap();
                s.adam_step(0.01).unwrap();
            }
            s.get("w").unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_naming_the_parameter() {
        let mut s = ParamStore::new(0);
        s.register("head.w", &[2], Init::Zeros).unwrap();
        s.accumulate_grad("head.w", &Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap())
            .unwrap();
        let err = s.adam_step(0.1).unwrap_err();
        assert!(err.to_string().contains("head.w"), "{err}");
        assert_eq!(s.get("head.w").unwrap().data(), &[0.0, 0.0]);
    }
}
