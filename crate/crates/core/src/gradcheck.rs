//! Finite-difference gradient verification.
//!
//! The checks here only ever call a loss closure forward; they never touch
//! the tape's backward rules, which is what makes them an independent
//! reference for the analytic gradients.

use serde::Serialize;

use crate::tensor::{ParamStore, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error with a small floor so that near-zero gradient pairs are
/// compared in absolute terms.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Worst relative error for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Result of a whole-store gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub worst_rel_err: f64,
}

impl GradcheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.worst_rel_err < threshold
    }

    /// Names of parameters at or above the threshold.
    pub fn failing(&self, threshold: f64) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err >= threshold)
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Compares every stored gradient against central finite differences of
/// `loss`. Expects the caller to have already populated the store's gradients
/// (forward + backward + harvest). The store is restored to its original
/// values before returning.
pub fn check_grads<E>(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> Result<f64, E>,
    h: f64,
) -> Result<GradcheckReport, E> {
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    let mut worst = 0.0f64;
    for id in ids {
        let name = store.name(id).to_string();
        let len = store.get(id).len();
        let analytic: Vec<f64> = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        let mut max_err = 0.0f64;
        for j in 0..len {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[j], fd));
        }
        worst = worst.max(max_err);
        params.push(ParamCheck {
            name,
            max_rel_err: max_err,
        });
    }
    Ok(GradcheckReport {
        params,
        worst_rel_err: worst,
    })
}

/// Central-difference check of a gradient with respect to a single input
/// tensor. Returns the worst relative error across coordinates.
pub fn check_input_grad(
    x: &Tensor,
    mut f: impl FnMut(&Tensor) -> f64,
    analytic: &[f64],
    h: f64,
) -> f64 {
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for j in 0..probe.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = f(&probe);
        probe.data_mut()[j] = orig - h;
        let down = f(&probe);
        probe.data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[j], fd));
    }
    worst
}
