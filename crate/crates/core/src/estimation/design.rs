//! Per-node design assembly for the least-squares loss.
//!
//! For target `e` with features `X_0 = 1`, `X_k(t) = Σ_{t_i<t, type=k} ψ_{ke}(t-t_i)`,
//! the node-wise loss is `½ θᵀVθ - bᵀθ` up to a data constant, where
//!
//! ```text
//! V_{kk'} = (1/n) Σ_j ∫₀^{T_j} X_{j,k} X_{j,k'} dt
//! b_k     = (1/n) Σ_j Σ_{target events t_i on j} X_{j,k}(t_i)
//! ```
//!
//! With exponential kernels each `X_k` is a single decaying exponential on
//! every inter-event segment, so `V` integrates in closed form. Other kernel
//! shapes use composite trapezoid quadrature per segment.

use rayon::prelude::*;
use thiserror::Error;

use crate::catalog::{EventCatalog, Path};
use crate::kernels::Kernels;

/// Integration scheme for the design matrix `V`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Quadrature {
    /// Closed-form segment integration wherever every kernel into the target
    /// decays exponentially; otherwise composite trapezoid per segment with
    /// step `min(T0_min/50, segment/8)`.
    #[default]
    AnalyticExp,
    /// Force composite trapezoid everywhere with a fixed step.
    Trapezoid { step: f64 },
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("target {target} is not customer-initiated")]
    TargetNotCustomer { target: usize },
    #[error("design for target {target} is non-finite (quadrature failure)")]
    NonFiniteDesign { target: usize },
    #[error("degenerate design for target {target}: no observation time")]
    DegenerateDesign { target: usize },
    #[error("no paths supplied")]
    NoPaths,
    #[error("gamma grid is empty")]
    EmptyGammaGrid,
    #[error("cross-validation needs at least 2 folds, got {folds}")]
    BadFolds { folds: usize },
    #[error("per-node gamma list has length {got}, expected {expected}")]
    GammaDimension { got: usize, expected: usize },
}

/// Design matrix and response for one customer-initiated target node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDesign {
    target: usize,
    dim: usize,
    v: Vec<f64>,
    b: Vec<f64>,
    n_paths: usize,
}

impl NodeDesign {
    /// Wrap an externally assembled design. `v` must be `b.len()²` long and
    /// is symmetrized; non-finite entries are rejected.
    pub fn new(target: usize, v: Vec<f64>, b: Vec<f64>, n_paths: usize) -> Result<Self, FitError> {
        let dim = b.len();
        if v.len() != dim * dim || v.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(FitError::NonFiniteDesign { target });
        }
        let mut v = v;
        for i in 0..dim {
            for j in 0..i {
                let s = 0.5 * (v[i * dim + j] + v[j * dim + i]);
                v[i * dim + j] = s;
                v[j * dim + i] = s;
            }
        }
        Ok(Self {
            target,
            dim,
            v,
            b,
            n_paths,
        })
    }

    pub(crate) fn from_parts(
        target: usize,
        dim: usize,
        v: Vec<f64>,
        b: Vec<f64>,
        n_paths: usize,
    ) -> Self {
        Self {
            target,
            dim,
            v,
            b,
            n_paths,
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Matrix dimension `p + 1` (intercept plus one slot per event type).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn v_at(&self, row: usize, col: usize) -> f64 {
        self.v[row * self.dim + col]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Held-out / empirical least-squares loss `½θᵀVθ - bᵀθ`.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.dim);
        let mut quad = 0.0;
        for i in 0..self.dim {
            if theta[i] == 0.0 {
                continue;
            }
            for j in 0..self.dim {
                quad += theta[i] * self.v[i * self.dim + j] * theta[j];
            }
        }
        let lin: f64 = self.b.iter().zip(theta).map(|(b, t)| b * t).sum();
        0.5 * quad - lin
    }
}

/// Contribution of one path to `(V, b)`, un-averaged.
pub(crate) fn path_design(
    path: &Path,
    kernels: &Kernels,
    target: usize,
    quadrature: Quadrature,
    v: &mut [f64],
    b: &mut [f64],
) {
    let analytic = match quadrature {
        Quadrature::AnalyticExp => kernels.all_exp_for_target(target),
        Quadrature::Trapezoid { .. } => false,
    };
    if analytic {
        path_design_exp(path, kernels, target, v, b);
    } else {
        let step = match quadrature {
            Quadrature::Trapezoid { step } => Some(step),
            Quadrature::AnalyticExp => None,
        };
        path_design_trapezoid(path, kernels, target, step, v, b);
    }
}

fn path_design_exp(path: &Path, kernels: &Kernels, target: usize, v: &mut [f64], b: &mut [f64]) {
    let p = kernels.n_types();
    let dim = p + 1;
    // X_k just after the running boundary, and per-type decay rates.
    let mut state = vec![0.0f64; p];
    let rate: Vec<f64> = (0..p).map(|k| 1.0 / kernels.get(k, target).scale).collect();
    let mut decay = vec![0.0f64; p];

    let mut prev = 0.0f64;
    let horizon = path.horizon();
    let n_events = path.len();
    for step in 0..=n_events {
        let bound = if step < n_events {
            path.events()[step].t
        } else {
            horizon
        };
        let delta = bound - prev;
        if delta > 0.0 {
            for k in 0..p {
                decay[k] = (-delta * rate[k]).exp();
            }
            v[0] += delta;
            for k in 0..p {
                let s_k = state[k];
                if s_k == 0.0 {
                    continue;
                }
                // ∫₀^Δ s_k e^{-r_k t} dt
                let int_k = s_k * (1.0 - decay[k]) / rate[k];
                v[k + 1] += int_k;
                v[(k + 1) * dim] += int_k;
                for kp in k..p {
                    let s_kp = state[kp];
                    if s_kp == 0.0 {
                        continue;
                    }
                    let r = rate[k] + rate[kp];
                    let int_pair = s_k * s_kp * (1.0 - decay[k] * decay[kp]) / r;
                    v[(k + 1) * dim + (kp + 1)] += int_pair;
                    if kp != k {
                        v[(kp + 1) * dim + (k + 1)] += int_pair;
                    }
                }
                state[k] = s_k * decay[k];
            }
        }
        if step < n_events {
            let ev = path.events()[step];
            if ev.type_idx == target {
                // Response uses the strict history: state excludes this event.
                b[0] += 1.0;
                for k in 0..p {
                    b[k + 1] += state[k];
                }
            }
            state[ev.type_idx] += rate[ev.type_idx]; // ψ(0+) = 1/T0
        }
        prev = bound;
    }
}

/// Feature vector at the right limit `t⁺`, used for segment left endpoints
/// where kernels of events at exactly `t` have already switched on.
fn features_right_limit(path: &Path, kernels: &Kernels, target: usize, t: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for ev in path.events().iter().take_while(|ev| ev.t <= t) {
        out[ev.type_idx] += kernels.get(ev.type_idx, target).upper_bound_after(t - ev.t);
    }
}

fn features_strict(path: &Path, kernels: &Kernels, target: usize, t: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for ev in path.events().iter().take_while(|ev| ev.t < t) {
        out[ev.type_idx] += kernels.get(ev.type_idx, target).evaluate(t - ev.t);
    }
}

fn path_design_trapezoid(
    path: &Path,
    kernels: &Kernels,
    target: usize,
    fixed_step: Option<f64>,
    v: &mut [f64],
    b: &mut [f64],
) {
    let p = kernels.n_types();
    let dim = p + 1;
    let min_scale = kernels.min_scale();

    let mut x_lo = vec![0.0f64; p];
    let mut x_hi = vec![0.0f64; p];
    // The intercept-intercept cell is accumulated exactly as Δ per segment
    // below; quadrature weights cover only feature-bearing entries.
    let accumulate = |x: &[f64], w: f64, v: &mut [f64]| {
        for k in 0..p {
            if x[k] == 0.0 {
                continue;
            }
            let wk = w * x[k];
            v[k + 1] += wk;
            v[(k + 1) * dim] += wk;
            for kp in 0..p {
                v[(k + 1) * dim + (kp + 1)] += wk * x[kp];
            }
        }
    };

    let mut prev = 0.0f64;
    let n_events = path.len();
    for step in 0..=n_events {
        let bound = if step < n_events {
            path.events()[step].t
        } else {
            path.horizon()
        };
        let delta = bound - prev;
        if delta > 0.0 {
            v[0] += delta;
            let step_len = fixed_step
                .unwrap_or_else(|| (min_scale / 50.0).min(delta / 8.0))
                .min(delta);
            let cells = (delta / step_len).ceil().max(1.0) as usize;
            let h = delta / cells as f64;
            // Left endpoint at the right limit: events at `prev` already act.
            features_right_limit(path, kernels, target, prev, &mut x_lo);
            for cell in 0..cells {
                let hi = if cell + 1 == cells {
                    bound
                } else {
                    prev + (cell + 1) as f64 * h
                };
                features_strict(path, kernels, target, hi, &mut x_hi);
                accumulate(&x_lo, 0.5 * h, v);
                accumulate(&x_hi, 0.5 * h, v);
                std::mem::swap(&mut x_lo, &mut x_hi);
            }
        }
        if step < n_events {
            let ev = path.events()[step];
            if ev.type_idx == target {
                features_strict(path, kernels, target, ev.t, &mut x_hi);
                b[0] += 1.0;
                for k in 0..p {
                    b[k + 1] += x_hi[k];
                }
            }
        }
        prev = bound;
    }
}

/// Assemble the averaged design for one target over a path collection.
///
/// Per-path contributions are reduced in a canonical content order, so the
/// result is bitwise independent of the order paths are supplied in.
pub fn build_design(
    paths: &[Path],
    catalog: &EventCatalog,
    kernels: &Kernels,
    target: usize,
    quadrature: Quadrature,
) -> Result<NodeDesign, FitError> {
    if paths.is_empty() {
        return Err(FitError::NoPaths);
    }
    if !catalog.is_customer(target) {
        return Err(FitError::TargetNotCustomer { target });
    }
    let dim = catalog.n_types() + 1;
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = paths
        .par_iter()
        .map(|path| {
            let mut v = vec![0.0; dim * dim];
            let mut b = vec![0.0; dim];
            path_design(path, kernels, target, quadrature, &mut v, &mut b);
            (v, b)
        })
        .collect();
    average_design(target, dim, per_path)
}

pub(crate) fn average_design(
    target: usize,
    dim: usize,
    mut per_path: Vec<(Vec<f64>, Vec<f64>)>,
) -> Result<NodeDesign, FitError> {
    let n = per_path.len();
    per_path.sort_by(canonical_cmp);
    let mut v = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    for (pv, pb) in &per_path {
        for (acc, x) in v.iter_mut().zip(pv) {
            *acc += x;
        }
        for (acc, x) in b.iter_mut().zip(pb) {
            *acc += x;
        }
    }
    let inv_n = 1.0 / n as f64;
    v.iter_mut().for_each(|x| *x *= inv_n);
    b.iter_mut().for_each(|x| *x *= inv_n);
    // Symmetrize: quadrature fills both triangles identically, but enforce it.
    for i in 0..dim {
        for j in 0..i {
            let s = 0.5 * (v[i * dim + j] + v[j * dim + i]);
            v[i * dim + j] = s;
            v[j * dim + i] = s;
        }
    }
    if v.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(FitError::NonFiniteDesign { target });
    }
    Ok(NodeDesign::from_parts(target, dim, v, b, n))
}

fn canonical_cmp(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> std::cmp::Ordering {
    let key = |x: &(Vec<f64>, Vec<f64>)| -> Vec<u64> {
        x.0.iter().chain(x.1.iter()).map(|f| f.to_bits()).collect()
    };
    key(a).cmp(&key(b))
}
