//! Finite-difference gradient checking.
//!
//! Central differences (f(θ+ε) − f(θ−ε)) / 2ε per parameter element,
//! compared against the tape's reverse-mode gradient with relative error
//! |a−b| / max(|a|, |b|, 1e-8).

use super::{Tape, TensorId};
use crate::error::Result;
use crate::scalar::Scalar;

/// One named parameter tensor handed to the checker.
#[derive(Debug, Clone)]
pub struct ParamSpec<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

impl<S: Scalar> ParamSpec<S> {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<S>) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), values }
    }
}

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Set when the function produced a non-finite value while probing
    /// this parameter; the entry counts as failed rather than crashing.
    pub non_finite: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| !e.non_finite) && self.max_rel_err() < tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

/// Check d(f)/d(params) against central differences.
///
/// `f` must be a deterministic scalar function of the leaves it is given:
/// it is re-invoked on a fresh tape for every probe.
pub fn grad_check<S, F>(mut f: F, params: &[ParamSpec<S>], eps: f64) -> Result<GradReport>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(&p.shape, p.values.clone(), true))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).unwrap().iter().map(|g| g.f64()).collect())
        .collect();

    let eval = |f: &mut F, probe: &[ParamSpec<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = probe
            .iter()
            .map(|p| tape.leaf(&p.shape, p.values.clone(), false))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok(tape.values(loss)[0].f64())
    };

    let mut probe: Vec<ParamSpec<S>> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut max_rel_err = 0.0f64;
        let mut worst_index = 0;
        let mut non_finite = false;
        for ei in 0..param.values.len() {
            let original = param.values[ei];
            probe[pi].values[ei] = S::c(original.f64() + eps);
            let plus = eval(&mut f, &probe)?;
            probe[pi].values[ei] = S::c(original.f64() - eps);
            let minus = eval(&mut f, &probe)?;
            probe[pi].values[ei] = original;
            if !plus.is_finite() || !minus.is_finite() {
                non_finite = true;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[pi][ei], numeric);
            if err > max_rel_err {
                max_rel_err = err;
                worst_index = ei;
            }
        }
        entries.push(GradEntry { name: param.name.clone(), max_rel_err, worst_index, non_finite });
    }
    Ok(GradReport { entries })
}
