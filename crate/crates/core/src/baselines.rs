//! Reference attribution methods for comparison: rule-based heuristics,
//! logistic regression incremental scores, and the Markov-chain removal
//! effect.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{EventCatalog, Path};
use crate::linalg::solve_general;

/// Baseline method selector with per-method parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum BaselineSpec {
    /// All credit to the touchpoint closest to the conversion.
    Last,
    /// All credit to the first touchpoint on the path.
    First,
    /// Equal credit to every touchpoint before the conversion.
    Linear,
    /// Credit ∝ 2^(-(t* - t_i)/half_life), normalized.
    Decay {
        half_life: f64,
    },
    /// 40% to each endpoint, remaining 20% split over the interior.
    UShaped,
    Logistic,
    Markov,
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("`{0:?}` is not a rule-based method")]
    NotRuleBased(BaselineSpec),
    #[error("decay half-life must be positive, got {0}")]
    BadHalfLife(f64),
    #[error("logistic regression needs at least one positive and one negative path")]
    DegenerateLabels,
    #[error("markov removal effect needs at least one positive path")]
    NoPositivePaths,
    #[error("position {0} is not a conversion on this path")]
    NotAConversion(usize),
}

fn touchpoints_before(path: &Path, catalog: &EventCatalog, target: usize) -> Vec<usize> {
    let conv = catalog.conversion();
    (0..target)
        .filter(|&i| path.events()[i].type_idx != conv)
        .collect()
}

/// Rule-based per-touchpoint scores for one conversion: a map from event
/// position to credit. Empty when no touchpoint precedes the conversion.
pub fn rule_score(
    path: &Path,
    catalog: &EventCatalog,
    target: usize,
    spec: &BaselineSpec,
) -> Result<BTreeMap<usize, f64>, BaselineError> {
    if path.events().get(target).map(|e| e.type_idx) != Some(catalog.conversion()) {
        return Err(BaselineError::NotAConversion(target));
    }
    let touch = touchpoints_before(path, catalog, target);
    let mut scores = BTreeMap::new();
    if touch.is_empty() {
        return Ok(scores);
    }
    let k = touch.len();
    match *spec {
        BaselineSpec::Last => {
            scores.insert(touch[k - 1], 1.0);
        }
        BaselineSpec::First => {
            scores.insert(touch[0], 1.0);
        }
        BaselineSpec::Linear => {
            for &pos in &touch {
                scores.insert(pos, 1.0 / k as f64);
            }
        }
        BaselineSpec::Decay { half_life } => {
            if half_life.is_nan() || half_life <= 0.0 {
                return Err(BaselineError::BadHalfLife(half_life));
            }
            let t_star = path.events()[target].t;
            let weights: Vec<f64> = touch
                .iter()
                .map(|&pos| {
                    (-(t_star - path.events()[pos].t) / half_life * std::f64::consts::LN_2).exp()
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for (&pos, w) in touch.iter().zip(&weights) {
                scores.insert(pos, w / total);
            }
        }
        BaselineSpec::UShaped => match k {
            1 => {
                scores.insert(touch[0], 1.0);
            }
            2 => {
                scores.insert(touch[0], 0.5);
                scores.insert(touch[1], 0.5);
            }
            _ => {
                scores.insert(touch[0], 0.4);
                scores.insert(touch[k - 1], 0.4);
                let interior = 0.2 / (k - 2) as f64;
                for &pos in &touch[1..k - 1] {
                    scores.insert(pos, interior);
                }
            }
        },
        BaselineSpec::Logistic | BaselineSpec::Markov => {
            return Err(BaselineError::NotRuleBased(*spec));
        }
    }
    Ok(scores)
}

/// Logistic model of the conversion indicator on per-type touch counts.
#[derive(Debug, Clone)]
pub struct LogisticAttribution {
    /// Intercept followed by one weight per non-conversion type, indexed by
    /// `type_idx - 1`.
    coefficients: Vec<f64>,
    /// Fell back to an L2-regularized fit after separation/non-convergence.
    pub ridged: bool,
}

impl LogisticAttribution {
    /// Maximum-likelihood fit by damped Newton iterations. Complete
    /// separation (or any failure to converge) triggers a ridge refit with
    /// L2 strength 1e-4, flagged via [`Self::ridged`].
    pub fn fit(paths: &[Path], catalog: &EventCatalog) -> Result<Self, BaselineError> {
        let n_pos = paths.iter().filter(|p| p.is_positive(catalog)).count();
        if n_pos == 0 || n_pos == paths.len() {
            return Err(BaselineError::DegenerateLabels);
        }
        let dim = catalog.n_types(); // intercept + (p - 1) touch types
        let rows: Vec<(Vec<f64>, f64)> = paths
            .iter()
            .map(|path| {
                let mut x = vec![0.0; dim];
                x[0] = 1.0;
                for ev in path.events() {
                    if ev.type_idx != catalog.conversion() {
                        x[ev.type_idx] += 1.0;
                    }
                }
                let y = if path.is_positive(catalog) { 1.0 } else { 0.0 };
                (x, y)
            })
            .collect();

        match newton_logistic(&rows, dim, 0.0) {
            Some(beta) if beta.iter().all(|b| b.abs() < 50.0) => Ok(Self {
                coefficients: beta,
                ridged: false,
            }),
            _ => {
                let beta = newton_logistic(&rows, dim, 1e-4)
                    .expect("ridge-regularized logistic Newton always converges");
                Ok(Self {
                    coefficients: beta,
                    ridged: true,
                })
            }
        }
    }

    /// Conversion probability for a vector of per-type touch counts
    /// (`counts[type_idx]`, conversion slot ignored).
    pub fn probability(&self, counts: &[f64]) -> f64 {
        let mut z = self.coefficients[0];
        for (idx, &c) in counts.iter().enumerate().skip(1) {
            z += self.coefficients[idx] * c;
        }
        1.0 / (1.0 + (-z).exp())
    }

    /// Incremental per-touchpoint scores on a positive path: the drop in
    /// fitted conversion probability when that single touch is removed,
    /// floored at zero and normalized over the path's touchpoints.
    pub fn score_path(&self, path: &Path, catalog: &EventCatalog) -> BTreeMap<usize, f64> {
        let conv = catalog.conversion();
        let mut counts = vec![0.0; catalog.n_types()];
        for ev in path.events() {
            if ev.type_idx != conv {
                counts[ev.type_idx] += 1.0;
            }
        }
        let full = self.probability(&counts);
        let mut raw = BTreeMap::new();
        for (pos, ev) in path.events().iter().enumerate() {
            if ev.type_idx == conv {
                continue;
            }
            counts[ev.type_idx] -= 1.0;
            let without = self.probability(&counts);
            counts[ev.type_idx] += 1.0;
            raw.insert(pos, (full - without).max(0.0));
        }
        let total: f64 = raw.values().sum();
        if total > 0.0 {
            for v in raw.values_mut() {
                *v /= total;
            }
        }
        raw
    }
}

fn log_likelihood(rows: &[(Vec<f64>, f64)], beta: &[f64], ridge: f64) -> f64 {
    let mut ll = 0.0;
    for (x, y) in rows {
        let z: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        // log σ(z) if y=1 else log(1-σ(z)), in a stable form.
        ll += y * z - z.max(0.0) - (-z.abs()).exp().ln_1p();
    }
    ll - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

fn newton_logistic(rows: &[(Vec<f64>, f64)], dim: usize, ridge: f64) -> Option<Vec<f64>> {
    let mut beta = vec![0.0; dim];
    let mut ll = log_likelihood(rows, &beta, ridge);
    for _ in 0..100 {
        let mut grad = vec![0.0; dim];
        let mut hess = vec![0.0; dim * dim];
        for (x, y) in rows {
            let z: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let w = (p * (1.0 - p)).max(1e-12);
            for i in 0..dim {
                grad[i] += (y - p) * x[i];
                for j in 0..dim {
                    hess[i * dim + j] += w * x[i] * x[j];
                }
            }
        }
        for i in 0..dim {
            grad[i] -= ridge * beta[i];
            hess[i * dim + i] += ridge;
        }
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        // Gradient entries are sums over rows; tolerance scales with n.
        if gnorm < 1e-9 * rows.len() as f64 {
            return Some(beta);
        }
        let step = solve_general(&hess, &grad, dim)?;
        // Damped update: halve until the penalized likelihood improves.
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let trial_ll = log_likelihood(rows, &trial, ridge);
            if trial_ll >= ll - 1e-12 {
                beta = trial;
                ll = trial_ll;
                break;
            }
            scale *= 0.5;
            if scale < 1e-8 {
                return Some(beta);
            }
        }
    }
    None
}

/// First-order Markov chain over `{START, channels, CONV, NULL}` with the
/// removal effect of each channel.
#[derive(Debug, Clone)]
pub struct MarkovRemoval {
    /// Removal effect per channel id.
    pub removal_effects: Vec<f64>,
    /// Baseline probability of reaching conversion from START.
    pub conversion_probability: f64,
    pub warning: Option<String>,
}

/// Fit the chain from channel-collapsed sequences and compute per-channel
/// removal effects `1 - P(CONV | channel redirected to NULL) / P(CONV)`.
///
/// A positive path ends at CONV (touches after the first conversion are
/// ignored); a negative path ends at NULL. Absorption probabilities come
/// from the transient linear system; if conversion is unreachable the
/// effects are all zero with a warning.
pub fn markov_removal(
    paths: &[Path],
    catalog: &EventCatalog,
) -> Result<MarkovRemoval, BaselineError> {
    if !paths.iter().any(|p| p.is_positive(catalog)) {
        return Err(BaselineError::NoPositivePaths);
    }
    let n_channels = catalog.n_channels();
    // Transient states: 0 = START, 1..=Z = channels. Absorbing: CONV, NULL.
    let n_transient = 1 + n_channels;
    let mut counts = vec![0.0f64; n_transient * (n_transient + 2)];
    let stride = n_transient + 2;
    let conv_col = n_transient;
    let null_col = n_transient + 1;

    for path in paths {
        let conv = catalog.conversion();
        let mut state = 0usize; // START
        let mut absorbed = false;
        for ev in path.events() {
            if ev.type_idx == conv {
                counts[state * stride + conv_col] += 1.0;
                absorbed = true;
                break;
            }
            let z = catalog
                .channel_of(ev.type_idx)
                .expect("non-conversion types always carry a channel");
            counts[state * stride + 1 + z] += 1.0;
            state = 1 + z;
        }
        if !absorbed {
            counts[state * stride + null_col] += 1.0;
        }
    }

    let absorb = |blocked: Option<usize>| -> Option<f64> {
        // Row-normalized transitions with channel `blocked` redirected to
        // NULL; solve (I - Q) a = r for P(absorb at CONV).
        let mut q = vec![0.0; n_transient * n_transient];
        let mut r = vec![0.0; n_transient];
        for s in 0..n_transient {
            let row = &counts[s * stride..(s + 1) * stride];
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                // Unvisited state: absorbs nowhere, row stays zero.
                continue;
            }
            for z in 0..n_channels {
                let p = row[1 + z] / total;
                if Some(z) == blocked {
                    continue; // redirected mass falls through to NULL
                }
                q[s * n_transient + (1 + z)] += p;
            }
            r[s] = row[conv_col] / total;
        }
        let mut system = vec![0.0; n_transient * n_transient];
        for i in 0..n_transient {
            for j in 0..n_transient {
                system[i * n_transient + j] =
                    if i == j { 1.0 } else { 0.0 } - q[i * n_transient + j];
            }
        }
        solve_general(&system, &r, n_transient).map(|a| a[0])
    };

    let Some(base) = absorb(None) else {
        return Ok(MarkovRemoval {
            removal_effects: vec![0.0; n_channels],
            conversion_probability: 0.0,
            warning: Some("absorption system is singular; scores set to zero".into()),
        });
    };
    if base <= 0.0 {
        return Ok(MarkovRemoval {
            removal_effects: vec![0.0; n_channels],
            conversion_probability: base,
            warning: Some("conversion unreachable from START; scores set to zero".into()),
        });
    }
    let mut removal_effects = Vec::with_capacity(n_channels);
    for z in 0..n_channels {
        let blocked = absorb(Some(z)).unwrap_or(0.0);
        removal_effects.push(1.0 - blocked / base);
    }
    Ok(MarkovRemoval {
        removal_effects,
        conversion_probability: base,
        warning: None,
    })
}

/// Synthetic helper for randomized baseline tests.
#[doc(hidden)]
pub fn bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}
