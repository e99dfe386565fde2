//! Impact kernels, conditional intensities, and the Granger causality graph.
//!
//! Customer-initiated event types follow
//!
//! ```text
//! λ_e(t | H_t) = μ_e + Σ_{e'} α_{e'e} Σ_{t_i < t, type(i)=e'} ψ_{e'e}(t - t_i)
//! ```
//!
//! with nonnegative baselines `μ`, nonnegative coefficients `α`, and
//! normalized kernels `ψ` (unit mass on `(0, ∞)`). The directed graph with an
//! edge `e' → e` exactly when `α_{e'e} > 0` is the model's Granger causality
//! graph.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Event, EventCatalog, Path};

/// Supported kernel shapes. All are bounded, vanish on `t ≤ 0`, integrate
/// to one, and are non-increasing on `(0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    /// Constant impact `1/T0` on `(0, T0]`.
    Boxcar,
    /// Exponentially decaying impact `exp(-t/T0)/T0`.
    ExpDecay,
    /// Gaussian-tail impact `sqrt(2/(π T0²)) exp(-t²/(2T0²))`.
    HalfGaussian,
}

/// A normalized impact kernel with time scale `T0` (days).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub shape: KernelShape,
    #[serde(rename = "T0")]
    pub scale: f64,
}

impl Kernel {
    pub fn new(shape: KernelShape, scale: f64) -> Result<Self, ModelError> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(ModelError::InvalidKernelScale(scale));
        }
        Ok(Self { shape, scale })
    }

    /// ψ(dt); zero for `dt ≤ 0`.
    pub fn evaluate(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            return 0.0;
        }
        let t0 = self.scale;
        match self.shape {
            KernelShape::Boxcar => {
                if dt <= t0 {
                    1.0 / t0
                } else {
                    0.0
                }
            }
            KernelShape::ExpDecay => (-dt / t0).exp() / t0,
            KernelShape::HalfGaussian => {
                let z = dt / t0;
                (2.0 / (std::f64::consts::PI * t0 * t0)).sqrt() * (-0.5 * z * z).exp()
            }
        }
    }

    /// ∫₀^max(dt,0) ψ(u) du in closed form.
    pub fn integral(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            return 0.0;
        }
        let t0 = self.scale;
        match self.shape {
            KernelShape::Boxcar => (dt.min(t0)) / t0,
            KernelShape::ExpDecay => 1.0 - (-dt / t0).exp(),
            KernelShape::HalfGaussian => erf(dt / (std::f64::consts::SQRT_2 * t0)),
        }
    }

    /// Least upper bound of `ψ(gap + u)` over `u > 0`, for `gap ≥ 0`.
    ///
    /// Because every supported shape is non-increasing on `(0, ∞)`, this is
    /// the right limit at `gap`, which dominates the kernel's future
    /// contribution until a new event arrives. Used by the thinning
    /// simulator's local intensity bound.
    pub fn upper_bound_after(&self, gap: f64) -> f64 {
        debug_assert!(gap >= 0.0);
        let t0 = self.scale;
        match self.shape {
            KernelShape::Boxcar => {
                if gap < t0 {
                    1.0 / t0
                } else {
                    0.0
                }
            }
            KernelShape::ExpDecay => (-gap / t0).exp() / t0,
            KernelShape::HalfGaussian => {
                let z = gap / t0;
                (2.0 / (std::f64::consts::PI * t0 * t0)).sqrt() * (-0.5 * z * z).exp()
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("kernel scale must be positive and finite, got {0}")]
    InvalidKernelScale(f64),
    #[error("baseline vector has length {got}, expected {expected}")]
    MuDimension { got: usize, expected: usize },
    #[error("coefficient matrix has {got} entries, expected {expected}")]
    AlphaDimension { got: usize, expected: usize },
    #[error("negative parameter {value} at {what}")]
    NegativeParameter { what: String, value: f64 },
    #[error("kernel grid has {got} entries, expected {expected}")]
    KernelDimension { got: usize, expected: usize },
    #[error("model file requires a single shared kernel, but kernels differ per pair")]
    HeterogeneousKernels,
    #[error("invalid model json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-(source, target) kernel assignments, `p × q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels {
    n_types: usize,
    n_targets: usize,
    grid: Vec<Kernel>,
}

impl Kernels {
    /// One kernel shared by every (source, target) pair — the common case.
    pub fn shared(kernel: Kernel, n_types: usize, n_targets: usize) -> Self {
        Self {
            n_types,
            n_targets,
            grid: vec![kernel; n_types * n_targets],
        }
    }

    pub fn from_grid(
        grid: Vec<Kernel>,
        n_types: usize,
        n_targets: usize,
    ) -> Result<Self, ModelError> {
        if grid.len() != n_types * n_targets {
            return Err(ModelError::KernelDimension {
                got: grid.len(),
                expected: n_types * n_targets,
            });
        }
        Ok(Self {
            n_types,
            n_targets,
            grid,
        })
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn get(&self, source: usize, target: usize) -> Kernel {
        self.grid[source * self.n_targets + target]
    }

    /// The single kernel if all pairs share one, else `None`.
    pub fn shared_kernel(&self) -> Option<Kernel> {
        let first = *self.grid.first()?;
        self.grid.iter().all(|k| *k == first).then_some(first)
    }

    /// Whether every kernel feeding `target` decays exponentially, which
    /// makes design integrals available in closed form.
    pub fn all_exp_for_target(&self, target: usize) -> bool {
        (0..self.n_types).all(|s| self.get(s, target).shape == KernelShape::ExpDecay)
    }

    pub fn min_scale(&self) -> f64 {
        self.grid
            .iter()
            .map(|k| k.scale)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Fitted or ground-truth model parameters: baselines `μ` (length `q`),
/// coefficients `α` (`p × q`, source-major), and kernel assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    mu: Vec<f64>,
    alpha: Vec<f64>,
    kernels: Kernels,
}

impl ModelParams {
    pub fn new(mu: Vec<f64>, alpha: Vec<f64>, kernels: Kernels) -> Result<Self, ModelError> {
        let q = kernels.n_targets();
        let p = kernels.n_types();
        if mu.len() != q {
            return Err(ModelError::MuDimension {
                got: mu.len(),
                expected: q,
            });
        }
        if alpha.len() != p * q {
            return Err(ModelError::AlphaDimension {
                got: alpha.len(),
                expected: p * q,
            });
        }
        for (e, &m) in mu.iter().enumerate() {
            if m.is_nan() || m < 0.0 {
                return Err(ModelError::NegativeParameter {
                    what: format!("mu[{e}]"),
                    value: m,
                });
            }
        }
        for (i, &a) in alpha.iter().enumerate() {
            if a.is_nan() || a < 0.0 {
                return Err(ModelError::NegativeParameter {
                    what: format!("alpha[{}][{}]", i / q, i % q),
                    value: a,
                });
            }
        }
        Ok(Self { mu, alpha, kernels })
    }

    /// Number of event types `p`.
    pub fn n_types(&self) -> usize {
        self.kernels.n_types()
    }

    /// Number of customer-initiated types `q`.
    pub fn n_customer(&self) -> usize {
        self.kernels.n_targets()
    }

    pub fn mu(&self, target: usize) -> f64 {
        self.mu[target]
    }

    pub fn mu_vec(&self) -> &[f64] {
        &self.mu
    }

    /// Granger coefficient from `source` into customer `target`.
    pub fn alpha(&self, source: usize, target: usize) -> f64 {
        self.alpha[source * self.n_customer() + target]
    }

    pub fn kernels(&self) -> &Kernels {
        &self.kernels
    }

    pub fn kernel(&self, source: usize, target: usize) -> Kernel {
        self.kernels.get(source, target)
    }

    pub fn is_customer(&self, type_idx: usize) -> bool {
        type_idx < self.n_customer()
    }
}

/// Directed Granger causality graph over event types; edges point into
/// customer-initiated targets only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrangerGraph {
    n_types: usize,
    n_customer: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl GrangerGraph {
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn contains(&self, source: usize, target: usize) -> bool {
        self.edges.contains(&(source, target))
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Render edges by type name, one `src -> dst` pair per entry.
    pub fn describe(&self, catalog: &EventCatalog) -> Vec<String> {
        self.edges
            .iter()
            .map(|&(s, t)| format!("{} -> {}", catalog.type_name(s), catalog.type_name(t)))
            .collect()
    }
}

/// Edge set `{(e', e) : α_{e'e} > threshold}`.
///
/// The default threshold of zero is exact for coefficient estimates produced
/// by the soft-threshold update, which returns literal zeros.
pub fn extract_graph(params: &ModelParams, threshold: f64) -> GrangerGraph {
    let mut edges = BTreeSet::new();
    for source in 0..params.n_types() {
        for target in 0..params.n_customer() {
            if params.alpha(source, target) > threshold {
                edges.insert((source, target));
            }
        }
    }
    GrangerGraph {
        n_types: params.n_types(),
        n_customer: params.n_customer(),
        edges,
    }
}

/// Feature process `X_{k}(t)` for target `e`: the kernel-smoothed count of
/// strictly earlier `source`-type events.
pub fn feature(path: &Path, kernels: &Kernels, target: usize, source: usize, t: f64) -> f64 {
    let kernel = kernels.get(source, target);
    path.events()
        .iter()
        .take_while(|ev| ev.t < t)
        .filter(|ev| ev.type_idx == source)
        .map(|ev| kernel.evaluate(t - ev.t))
        .sum()
}

/// Conditional intensity `λ_e(t | H_t)` of a customer-initiated target.
///
/// Left-continuous: an event at exactly `t` does not contribute.
pub fn intensity(path: &Path, params: &ModelParams, target: usize, t: f64) -> f64 {
    intensity_events(path.events(), params, target, t)
}

pub(crate) fn intensity_events(
    events: &[Event],
    params: &ModelParams,
    target: usize,
    t: f64,
) -> f64 {
    let mut lambda = params.mu(target);
    for ev in events.iter().take_while(|ev| ev.t < t) {
        let a = params.alpha(ev.type_idx, target);
        if a > 0.0 {
            lambda += a * params.kernel(ev.type_idx, target).evaluate(t - ev.t);
        }
    }
    lambda
}

/// `‖θ_a - θ_b‖∞` over all baselines and coefficients of two same-shape
/// parameter sets.
pub fn params_linf_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    assert_eq!(a.n_types(), b.n_types());
    assert_eq!(a.n_customer(), b.n_customer());
    let mut worst = 0.0f64;
    for target in 0..a.n_customer() {
        worst = worst.max((a.mu(target) - b.mu(target)).abs());
        for source in 0..a.n_types() {
            worst = worst.max((a.alpha(source, target) - b.alpha(source, target)).abs());
        }
    }
    worst
}

/// Integrated intensity `∫_a^b λ_e(t | H_t) dt`, exact for all kernel shapes.
pub fn compensator(path: &Path, params: &ModelParams, target: usize, a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    let mut total = params.mu(target) * (b - a);
    for ev in path.events().iter().take_while(|ev| ev.t < b) {
        let coeff = params.alpha(ev.type_idx, target);
        if coeff > 0.0 {
            let kernel = params.kernel(ev.type_idx, target);
            total += coeff * (kernel.integral(b - ev.t) - kernel.integral(a - ev.t));
        }
    }
    total
}

// On-disk model schema: plain arrays in the catalog's canonical type order
// plus the single shared kernel.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    mu: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    kernel: Kernel,
}

/// Serialize parameters to the model JSON schema. Requires a shared kernel.
pub fn params_to_json(params: &ModelParams) -> Result<String, ModelError> {
    let kernel = params
        .kernels()
        .shared_kernel()
        .ok_or(ModelError::HeterogeneousKernels)?;
    let q = params.n_customer();
    let alpha = (0..params.n_types())
        .map(|s| (0..q).map(|t| params.alpha(s, t)).collect())
        .collect();
    let file = ModelFile {
        mu: params.mu_vec().to_vec(),
        alpha,
        kernel,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parse a model file, checking dimensions against the catalog.
pub fn params_from_json(json: &str, catalog: &EventCatalog) -> Result<ModelParams, ModelError> {
    let file: ModelFile = serde_json::from_str(json)?;
    let p = catalog.n_types();
    let q = catalog.n_customer();
    let kernel = Kernel::new(file.kernel.shape, file.kernel.scale)?;
    if file.mu.len() != q {
        return Err(ModelError::MuDimension {
            got: file.mu.len(),
            expected: q,
        });
    }
    if file.alpha.len() != p || file.alpha.iter().any(|row| row.len() != q) {
        return Err(ModelError::AlphaDimension {
            got: file.alpha.iter().map(|r| r.len()).sum(),
            expected: p * q,
        });
    }
    let alpha = file.alpha.into_iter().flatten().collect();
    ModelParams::new(file.mu, alpha, Kernels::shared(kernel, p, q))
}

/// Error function, accurate to ~1e-14, via the regularized incomplete gamma
/// function `erf(x) = P(1/2, x²)`.
pub(crate) fn erf(x: f64) -> f64 {
    if x < 0.0 {
        -erf(-x)
    } else {
        gamma_p(0.5, x * x)
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series representation.
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Continued fraction for Q(a, x).
        const FPMIN: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = b + an / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }
}
