//! Central finite-difference gradient checking.
//!
//! The checkers only ever evaluate a forward scalar loss, so they are
//! independent of every backward implementation they verify. Comparisons use
//! a relative error with a floored denominator:
//! `|fd - g| / max(|fd|, |g|, floor)`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::Tensor;
use crate::util::rng_from_seed;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default denominator floor for relative errors; gradients below the floor
/// are effectively compared absolutely at `floor * tol`.
pub const FD_REL_FLOOR: f64 = 1e-3;

/// Central finite-difference gradient of `f` at `x0`, one component at a time.
pub fn fd_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Worst relative error between analytic and finite-difference gradients.
pub fn max_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Options for [`check_store_gradients`].
#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub rel_floor: f64,
    /// Components checked per parameter; 0 means all.
    pub max_components_per_param: usize,
    /// Seed for component subsampling.
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: FD_STEP,
            rel_floor: FD_REL_FLOOR,
            max_components_per_param: 0,
            seed: 0,
        }
    }
}

/// Per-parameter worst relative error report.
#[derive(Debug)]
pub struct FdReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub components_checked: usize,
}

impl FdReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Checks analytic parameter gradients against central finite differences.
///
/// `loss` must be a pure function of the store contents. `analytic` maps
/// parameter names to the gradients under test (typically collected from one
/// tape backward). Large parameters can be subsampled via
/// `max_components_per_param`; selection is seeded and deterministic.
pub fn check_store_gradients(
    store: &ParamStore,
    names: &[String],
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    analytic: &BTreeMap<String, Tensor>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let mut work = store.clone();
    let mut per_param = BTreeMap::new();
    let mut checked = 0usize;
    for name in names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::config(format!("no analytic gradient for '{name}'")))?;
        let n = grad.numel();
        let components: Vec<usize> = if opts.max_components_per_param == 0
            || n <= opts.max_components_per_param
        {
            (0..n).collect()
        } else {
            // Seeded sample without replacement via partial shuffle.
            let mut rng = rng_from_seed(crate::util::derive_seed_named(opts.seed, name));
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..opts.max_components_per_param {
                let j = i + rng.gen_range(0..idx.len() - i);
                idx.swap(i, j);
            }
            idx.truncate(opts.max_components_per_param);
            idx
        };
        let mut worst = 0.0f64;
        for &i in &components {
            let base = work.get(name)?.clone();
            let orig = base.data()[i];
            let mut plus = base.clone();
            plus.data_mut()[i] = orig + opts.step;
            work.set(name, plus)?;
            let fp = loss(&work)?;
            let mut minus = base.clone();
            minus.data_mut()[i] = orig - opts.step;
            work.set(name, minus)?;
            let fm = loss(&work)?;
            work.set(name, base)?;
            let fd = (fp - fm) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.rel_floor);
            worst = worst.max(rel);
            checked += 1;
        }
        per_param.insert(name.clone(), worst);
    }
    let max = per_param.values().cloned().fold(0.0, f64::max);
    Ok(FdReport {
        per_param,
        max_rel_err: max,
        components_checked: checked,
    })
}
