//! Central finite-difference checks of reverse-mode gradients.
//!
//! The scalar probed is `sum(out * R)` for a fixed random projection `R`.
//! The error of one tensor is `max_i |analytic_i - numeric_i| / max_i
//! |numeric_i|`, so coordinates with near-zero gradient are judged against
//! the scale of the whole gradient rather than against rounding noise.

use crate::array::Array;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Check gradients of `f` with respect to its input leaves and every
/// parameter in `store`. At most `per_tensor` coordinates of each tensor
/// are probed.
pub fn check<R, F>(
    store: &ParamStore,
    inputs: &[Array],
    f: F,
    per_tensor: usize,
    rng: &mut R,
) -> Result<(f64, usize)>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval_out = |store: &ParamStore, inputs: &[Array]| -> Result<Array> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        Ok(g.value(out).clone())
    };
    let shape = eval_out(store, inputs)?.dims();
    let proj: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let proj = Array::matrix(shape.0, shape.1, proj)?;
    let scalar = |store: &ParamStore, inputs: &[Array]| -> Result<f64> {
        let out = eval_out(store, inputs)?;
        Ok(out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let r = g.input(proj.clone());
    let prod = g.mul(out, r)?;
    let loss = g.sum_all(prod);
    g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut inputs_mut = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic_full = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[k].rows(), inputs[k].cols()));
        let idx = pick_indices(inputs[k].len(), per_tensor, rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &idx {
            let x0 = inputs_mut[k].data()[i];
            inputs_mut[k].data_mut()[i] = x0 + FD_STEP;
            let up = scalar(store, &inputs_mut)?;
            inputs_mut[k].data_mut()[i] = x0 - FD_STEP;
            let down = scalar(store, &inputs_mut)?;
            inputs_mut[k].data_mut()[i] = x0;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(analytic_full.data()[i]);
        }
        coords += idx.len();
        worst = worst.max(rel_err(&a, &n));
    }
    let grads: Vec<(crate::params::ParamId, Array)> = g
        .param_grads()
        .into_iter()
        .map(|(id, a)| (id, a.clone()))
        .collect();
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic_full = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, a)| a.clone())
            .unwrap_or_else(|| Array::zeros(store.get(id).rows(), store.get(id).cols()));
        let idx = pick_indices(store.get(id).len(), per_tensor, rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &idx {
            let x0 = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + FD_STEP;
            let up = scalar(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = x0 - FD_STEP;
            let down = scalar(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = x0;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(analytic_full.data()[i]);
        }
        coords += idx.len();
        worst = worst.max(rel_err(&a, &n));
    }
    Ok((worst, coords))
}

/// Finite-difference check of a scalar function of the parameters only,
/// given its analytic gradient.
pub fn check_scalar<R, F>(
    store: &ParamStore,
    grads: &[(crate::params::ParamId, Array)],
    f: F,
    per_tensor: usize,
    rng: &mut R,
) -> Result<(f64, usize)>
where
    R: Rng + ?Sized,
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (id, grad) in grads {
        for i in pick_indices(grad.len(), per_tensor, rng) {
            let x0 = probe.get(*id).data()[i];
            probe.get_mut(*id).data_mut()[i] = x0 + FD_STEP;
            let up = f(&probe)?;
            probe.get_mut(*id).data_mut()[i] = x0 - FD_STEP;
            let down = f(&probe)?;
            probe.get_mut(*id).data_mut()[i] = x0;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(grad.data()[i]);
        }
    }
    Ok((rel_err(&a, &n), a.len()))
}

fn pick_indices<R: Rng + ?Sized>(len: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}
