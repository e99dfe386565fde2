//! Path-level attribution scores: direct and total removal effects.
//!
//! The direct removal effect (DRE) of a removal set `R` against a
//! conversion at `t*` is the relative intensity drop
//!
//! ```text
//! att(R | D) = (λ₁(t*|D) - λ₁(t*|D\R)) / λ₁(t*|D)
//!            = Σ_{i ∈ R} α_{e_i,1} ψ_{e_i,1}(t* - t_i) / λ₁(t*|D)
//! ```
//!
//! holding the rest of the path fixed. The total removal effect (TRE)
//! additionally accounts for downstream customer events that would have
//! been excited by the removed ones: it is the expected DRE of the
//! enlarged removal set produced by sequentially thinning each later
//! customer event with probability `1 - λ(t_i|D\R◊)/λ(t_i|D)`. Because the
//! intensity is linear in history contributions, that expectation is exact
//! under a reverse sweep that pushes each event's score onto its Granger
//! parents; Monte-Carlo thinning is kept as an independent validator.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::catalog::{Path, RemovalSet};
use crate::kernels::{intensity, ModelParams};
use crate::rng::{stream_rng, Purpose};

/// Conversion type index under the canonical catalog ordering.
const CONVERSION: usize = 0;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("position {0} is not a conversion event")]
    TargetNotConversion(usize),
    #[error("conversion intensity at the target is zero; scores are undefined")]
    ZeroConversionIntensity,
    #[error("total removal effect requires a nonempty removal set")]
    EmptyRemoval,
    #[error("thinning needs at least one replicate")]
    NoReplicates,
    #[error("candidate set must satisfy R ⊆ R' ⊆ Ω; position {0} violates it")]
    CandidateNotSandwiched(usize),
    #[error("deletion probability {0} outside [0, 1]; invariant violation")]
    DeletionProbabilityOutOfRange(f64),
}

/// Scoring method tag carried on score breakdowns and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMethod {
    Dre,
    TreThinning { replicates: usize },
    TreBackprop,
}

/// Per-event scores for one conversion, plus the unexplained baseline share.
#[derive(Debug, Clone)]
pub struct ScoreBreakdown {
    /// Event position → score in `[0, 1]`.
    pub per_event: BTreeMap<usize, f64>,
    /// `μ₁ / λ₁(t*|D)`.
    pub baseline_effect: f64,
    /// Position of the scored conversion.
    pub target: usize,
    pub method: ScoreMethod,
}

// Precomputed per-conversion quantities shared by every scorer.
struct ConversionContext {
    target: usize,
    /// Singleton DRE per position `i < target`.
    scores: Vec<f64>,
    /// μ₁ / λ₁(t*|D), with λ₁ assembled from the same contribution terms
    /// as `scores`.
    baseline_effect: f64,
}

impl ConversionContext {
    fn new(path: &Path, params: &ModelParams, target: usize) -> Result<Self, ScoreError> {
        let events = path.events();
        if target >= events.len() || events[target].type_idx != CONVERSION {
            return Err(ScoreError::TargetNotConversion(target));
        }
        let t_star = events[target].t;
        let mut contributions = Vec::with_capacity(target);
        let mut lambda = params.mu(CONVERSION);
        for ev in &events[..target] {
            let a = params.alpha(ev.type_idx, CONVERSION);
            let c = if a > 0.0 {
                a * params
                    .kernel(ev.type_idx, CONVERSION)
                    .evaluate(t_star - ev.t)
            } else {
                0.0
            };
            lambda += c;
            contributions.push(c);
        }
        if lambda <= 0.0 {
            return Err(ScoreError::ZeroConversionIntensity);
        }
        let scores = contributions.iter().map(|c| c / lambda).collect();
        Ok(Self {
            target,
            scores,
            baseline_effect: params.mu(CONVERSION) / lambda,
        })
    }
}

/// Direct removal effect of a removal set: the sum of its singleton scores.
pub fn dre(path: &Path, params: &ModelParams, removal: &RemovalSet) -> Result<f64, ScoreError> {
    let ctx = ConversionContext::new(path, params, removal.target())?;
    Ok(removal.indices().iter().map(|&i| ctx.scores[i]).sum())
}

/// Singleton DRE of every event before the conversion plus the baseline
/// share; the parts sum to one by the intensity decomposition.
pub fn dre_breakdown(
    path: &Path,
    params: &ModelParams,
    target: usize,
) -> Result<ScoreBreakdown, ScoreError> {
    let ctx = ConversionContext::new(path, params, target)?;
    Ok(ScoreBreakdown {
        per_event: ctx.scores.iter().copied().enumerate().collect(),
        baseline_effect: ctx.baseline_effect,
        target,
        method: ScoreMethod::Dre,
    })
}

// The thinning window Ω \ R: customer-initiated events of D \ R strictly
// between the first removed position and the conversion.
fn window_positions(path: &Path, params: &ModelParams, removal: &RemovalSet) -> Vec<usize> {
    let i_min = removal.min_index().expect("validated nonempty");
    (i_min + 1..removal.target())
        .filter(|&i| {
            let e = path.events()[i].type_idx;
            params.is_customer(e) && !removal.contains(i)
        })
        .collect()
}

/// Largest possible enlarged removal set `Ω`: the removal set together with
/// every later customer-initiated event before the conversion.
pub fn omega(path: &Path, params: &ModelParams, removal: &RemovalSet) -> BTreeSet<usize> {
    let mut out = removal.indices().clone();
    out.extend(window_positions(path, params, removal));
    out
}

// Deletion-probability machinery: with intensities linear in history, the
// probability of deleting window event i given the accumulated removal set W
// is Σ_{j ∈ W, t_j < t_i} δ_{j,i} / λ_{e_i}(t_i|D), where δ is the removed
// event's additive contribution.
struct ThinningWeights {
    /// Window event positions, ascending.
    window: Vec<usize>,
    /// `weight[w][j]` = δ_{j, window[w]} / λ(t_w | D), indexed by source
    /// position `j < window[w]`.
    weight: Vec<Vec<f64>>,
}

impl ThinningWeights {
    fn new(path: &Path, params: &ModelParams, removal: &RemovalSet) -> Self {
        let events = path.events();
        let window = window_positions(path, params, removal);
        let weight = window
            .iter()
            .map(|&i| {
                let ev = events[i];
                let lambda = intensity(path, params, ev.type_idx, ev.t);
                (0..i)
                    .map(|j| {
                        if lambda <= 0.0 {
                            // A zero-intensity event is unexplained by the
                            // model; removal cannot lower it further.
                            return 0.0;
                        }
                        let a = params.alpha(events[j].type_idx, ev.type_idx);
                        if a > 0.0 {
                            a * params
                                .kernel(events[j].type_idx, ev.type_idx)
                                .evaluate(ev.t - events[j].t)
                                / lambda
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { window, weight }
    }

    fn deletion_probability(&self, w: usize, deleted: &BTreeSet<usize>) -> Result<f64, ScoreError> {
        let p: f64 = deleted
            .iter()
            .take_while(|&&j| j < self.window[w])
            .map(|&j| self.weight[w][j])
            .sum();
        if !(0.0..=1.0 + 1e-9).contains(&p) {
            return Err(ScoreError::DeletionProbabilityOutOfRange(p));
        }
        Ok(p.min(1.0))
    }
}

/// Monte-Carlo total removal effect by sequential thinning.
///
/// Each replicate grows `R◊` from `R` by walking the window in time order
/// and deleting each event with its current conditional probability, then
/// scores `dre(R◊)`. Returns the replicate mean and its standard error.
pub fn tre_thinning(
    path: &Path,
    params: &ModelParams,
    removal: &RemovalSet,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64), ScoreError> {
    if removal.is_empty() {
        return Err(ScoreError::EmptyRemoval);
    }
    if replicates == 0 {
        return Err(ScoreError::NoReplicates);
    }
    let ctx = ConversionContext::new(path, params, removal.target())?;
    let weights = ThinningWeights::new(path, params, removal);
    let base_dre: f64 = removal.indices().iter().map(|&i| ctx.scores[i]).sum();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for replicate in 0..replicates {
        let mut rng = stream_rng(seed, replicate as u64, 0, Purpose::ThinningReplicate);
        let mut deleted = removal.indices().clone();
        let mut extra = 0.0;
        for w in 0..weights.window.len() {
            let p = weights.deletion_probability(w, &deleted)?;
            if p > 0.0 && rng.gen::<f64>() < p {
                let pos = weights.window[w];
                deleted.insert(pos);
                extra += ctx.scores[pos];
            }
        }
        let x = base_dre + extra;
        sum += x;
        sum_sq += x * x;
    }
    let n = replicates as f64;
    let mean = sum / n;
    let variance = ((sum_sq - sum * sum / n) / (n - 1.0).max(1.0)).max(0.0);
    Ok((mean, (variance / n).sqrt()))
}

/// Exact total removal effect by reverse score propagation.
///
/// Initializes every event in `[i_min(R), t*)` with its singleton DRE, then
/// sweeps the window in descending time order, pushing each event's score
/// onto its Granger parents weighted by the parent's share of the event's
/// intensity. The returned value is the summed score over `R`; by linearity
/// of the intensity this equals the thinning expectation exactly.
pub fn tre_backprop(
    path: &Path,
    params: &ModelParams,
    removal: &RemovalSet,
) -> Result<f64, ScoreError> {
    let scores = backprop_scores(path, params, removal)?;
    Ok(removal.indices().iter().map(|&i| scores[i]).sum())
}

/// Propagated per-position scores `y` after the reverse sweep; positions
/// before `i_min(R)` stay zero (they never receive mass).
pub(crate) fn backprop_scores(
    path: &Path,
    params: &ModelParams,
    removal: &RemovalSet,
) -> Result<Vec<f64>, ScoreError> {
    if removal.is_empty() {
        return Err(ScoreError::EmptyRemoval);
    }
    let ctx = ConversionContext::new(path, params, removal.target())?;
    let i_min = removal.min_index().expect("validated nonempty");
    let weights = ThinningWeights::new(path, params, removal);

    let mut y = vec![0.0; ctx.target];
    y[i_min..ctx.target].copy_from_slice(&ctx.scores[i_min..ctx.target]);
    for (w, &i) in weights.window.iter().enumerate().rev() {
        if y[i] == 0.0 {
            continue;
        }
        for parent in i_min..i {
            let share = weights.weight[w][parent];
            if share > 0.0 {
                y[parent] += y[i] * share;
            }
        }
    }
    Ok(y)
}

/// Probability that sequential thinning of `removal` ends at exactly the
/// candidate set `R'`, with `R ⊆ R' ⊆ Ω`.
pub fn removal_pmf(
    path: &Path,
    params: &ModelParams,
    removal: &RemovalSet,
    candidate: &BTreeSet<usize>,
) -> Result<f64, ScoreError> {
    if removal.is_empty() {
        return Err(ScoreError::EmptyRemoval);
    }
    ConversionContext::new(path, params, removal.target())?;
    if let Some(&pos) = removal.indices().iter().find(|p| !candidate.contains(p)) {
        return Err(ScoreError::CandidateNotSandwiched(pos));
    }
    let big_omega = omega(path, params, removal);
    if let Some(&pos) = candidate.iter().find(|p| !big_omega.contains(p)) {
        return Err(ScoreError::CandidateNotSandwiched(pos));
    }
    let weights = ThinningWeights::new(path, params, removal);
    let mut accumulated = removal.indices().clone();
    let mut probability = 1.0;
    for (w, &i) in weights.window.iter().enumerate() {
        let p = weights.deletion_probability(w, &accumulated)?;
        if candidate.contains(&i) {
            probability *= p;
            accumulated.insert(i);
        } else {
            probability *= 1.0 - p;
        }
    }
    Ok(probability)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Event, EventCatalog, Initiator, TypeSpec};
    use crate::kernels::{Kernel, KernelShape, Kernels};
    use rand_pcg::Pcg64Mcg;

    fn two_channel_catalog() -> EventCatalog {
        EventCatalog::new(
            vec![
                TypeSpec {
                    name: "conv".into(),
                    initiator: Initiator::Customer,
                    channel: None,
                },
                TypeSpec {
                    name: "disp_click".into(),
                    initiator: Initiator::Customer,
                    channel: Some("display".into()),
                },
                TypeSpec {
                    name: "search_imp".into(),
                    initiator: Initiator::Customer,
                    channel: Some("search".into()),
                },
                TypeSpec {
                    name: "search_click".into(),
                    initiator: Initiator::Customer,
                    channel: Some("search".into()),
                },
                TypeSpec {
                    name: "disp_imp".into(),
                    initiator: Initiator::Firm,
                    channel: Some("display".into()),
                },
            ],
            "conv",
        )
        .unwrap()
    }

    fn figure_path(cat: &EventCatalog) -> Path {
        Path::new(
            "fig",
            7.0,
            vec![
                Event {
                    t: 1.0,
                    type_idx: 2,
                }, // search_imp
                Event {
                    t: 3.0,
                    type_idx: 4,
                }, // disp_imp
                Event {
                    t: 6.0,
                    type_idx: 2,
                }, // search_imp
                Event {
                    t: 7.0,
                    type_idx: 0,
                }, // conv
            ],
            cat,
        )
        .unwrap()
    }

    // mu_conv = 0.01; search_imp -> conv 0.02, disp_imp -> conv 0.01.
    fn figure_params(extra: &[(usize, usize, f64)]) -> ModelParams {
        let (p, q) = (5, 4);
        let mut alpha = vec![0.0; p * q];
        alpha[2 * q] = 0.02;
        alpha[4 * q] = 0.01;
        for &(s, t, v) in extra {
            alpha[s * q + t] = v;
        }
        ModelParams::new(
            vec![0.01, 0.0, 0.0, 0.0],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 10.0).unwrap(), p, q),
        )
        .unwrap()
    }

    fn removal(path: &Path, cat: &EventCatalog, positions: &[usize], target: usize) -> RemovalSet {
        RemovalSet::new(positions.iter().copied().collect(), target, path, cat).unwrap()
    }

    // Independent oracle for the DRE: the intensity-ratio route
    // (λ(D) - λ(D\R)) / λ(D) with λ(D\R) evaluated on a physically reduced
    // path, rather than the contribution-sum form used by the implementation.
    fn dre_intensity_ratio(
        path: &Path,
        cat: &EventCatalog,
        params: &ModelParams,
        positions: &[usize],
        target: usize,
    ) -> f64 {
        let t_star = path.events()[target].t;
        let kept: Vec<Event> = path
            .events()
            .iter()
            .enumerate()
            .filter(|(i, _)| !positions.contains(i))
            .map(|(_, e)| *e)
            .collect();
        let reduced = Path::new("reduced", path.horizon(), kept, cat).unwrap();
        let full = intensity(path, params, 0, t_star);
        let less = intensity(&reduced, params, 0, t_star);
        (full - less) / full
    }

    #[test]
    fn dre_empty_and_full_removal() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[]);

        let empty = removal(&path, &cat, &[], 3);
        assert_eq!(dre(&path, &params, &empty).unwrap(), 0.0);

        // With zero baseline, removing every touchpoint removes all intensity.
        let zero_mu = ModelParams::new(
            vec![0.0, 0.0, 0.0, 0.0],
            (0..20).map(|i| params.alpha(i / 4, i % 4)).collect(),
            params.kernels().clone(),
        )
        .unwrap();
        let all = removal(&path, &cat, &[0, 1, 2], 3);
        assert!((dre(&path, &zero_mu, &all).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dre_figure_value_matches_intensity_ratio_oracle() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[]);
        let r = removal(&path, &cat, &[1], 3); // display imp at t=3
        let got = dre(&path, &params, &r).unwrap();
        assert!((got - 0.04937).abs() < 5e-6, "{got}");
        let oracle = dre_intensity_ratio(&path, &cat, &params, &[1], 3);
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn dre_breakdown_figure_decomposition_sums_to_one() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[]);
        let bd = dre_breakdown(&path, &params, 3).unwrap();
        assert!((bd.per_event[&0] - 0.0808).abs() < 5e-5);
        assert!((bd.per_event[&1] - 0.0494).abs() < 5e-5);
        assert!((bd.per_event[&2] - 0.1333).abs() < 5e-5);
        assert!((bd.baseline_effect - 0.7365).abs() < 5e-5);
        let total: f64 = bd.per_event.values().sum::<f64>() + bd.baseline_effect;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_without_touchpoints_is_all_baseline() {
        let cat = two_channel_catalog();
        let path = Path::new(
            "solo",
            5.0,
            vec![Event {
                t: 4.0,
                type_idx: 0,
            }],
            &cat,
        )
        .unwrap();
        let bd = dre_breakdown(&path, &figure_params(&[]), 0).unwrap();
        assert_eq!(bd.baseline_effect, 1.0);
        assert!(bd.per_event.is_empty());
    }

    #[test]
    fn zero_intensity_is_an_error() {
        let cat = two_channel_catalog();
        let path = Path::new(
            "solo",
            5.0,
            vec![Event {
                t: 4.0,
                type_idx: 0,
            }],
            &cat,
        )
        .unwrap();
        let zero = ModelParams::new(
            vec![0.0; 4],
            vec![0.0; 20],
            figure_params(&[]).kernels().clone(),
        )
        .unwrap();
        assert!(matches!(
            dre_breakdown(&path, &zero, 0),
            Err(ScoreError::ZeroConversionIntensity)
        ));
    }

    // Line-shaped graph with zero customer baselines: the last touchpoint
    // carries the full direct score, every singleton total effect is 1.
    fn line_graph_case() -> (EventCatalog, Path, ModelParams) {
        let cat = EventCatalog::new(
            vec![
                TypeSpec {
                    name: "conv".into(),
                    initiator: Initiator::Customer,
                    channel: None,
                },
                TypeSpec {
                    name: "mid".into(),
                    initiator: Initiator::Customer,
                    channel: Some("email".into()),
                },
                TypeSpec {
                    name: "early".into(),
                    initiator: Initiator::Customer,
                    channel: Some("email".into()),
                },
                TypeSpec {
                    name: "root".into(),
                    initiator: Initiator::Firm,
                    channel: Some("email".into()),
                },
            ],
            "conv",
        )
        .unwrap();
        // Chain root(3) -> early(2) -> mid(1) -> conv(0).
        let (p, q) = (4, 3);
        let mut alpha = vec![0.0; p * q];
        alpha[3 * q + 2] = 0.9; // root -> early
        alpha[2 * q + 1] = 0.9; // early -> mid
        alpha[q] = 0.9; // mid -> conv
        let params = ModelParams::new(
            vec![0.0, 0.0, 0.0],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 4.0).unwrap(), p, q),
        )
        .unwrap();
        let path = Path::new(
            "line",
            20.0,
            vec![
                Event {
                    t: 1.0,
                    type_idx: 3,
                },
                Event {
                    t: 2.5,
                    type_idx: 2,
                },
                Event {
                    t: 5.0,
                    type_idx: 1,
                },
                Event {
                    t: 6.0,
                    type_idx: 0,
                },
            ],
            &cat,
        )
        .unwrap();
        (cat, path, params)
    }

    #[test]
    fn line_graph_dre_is_last_touch_only_and_tre_is_full() {
        let (cat, path, params) = line_graph_case();
        let bd = dre_breakdown(&path, &params, 3).unwrap();
        assert_eq!(bd.per_event[&0], 0.0);
        assert_eq!(bd.per_event[&1], 0.0);
        assert!((bd.per_event[&2] - 1.0).abs() < 1e-12);
        assert_eq!(bd.baseline_effect, 0.0);

        for pos in 0..3 {
            let r = removal(&path, &cat, &[pos], 3);
            let tre = tre_backprop(&path, &params, &r).unwrap();
            assert!((tre - 1.0).abs() < 1e-12, "pos {pos}: {tre}");
            let (mc, se) = tre_thinning(&path, &params, &r, 50, 11).unwrap();
            assert!((mc - 1.0).abs() < 1e-12);
            assert_eq!(se, 0.0);
        }
    }

    #[test]
    fn thinning_reduces_to_dre_without_inter_touchpoint_edges() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[]); // only edges into conversion
        let r = removal(&path, &cat, &[0], 3);
        let direct = dre(&path, &params, &r).unwrap();
        let (mc, se) = tre_thinning(&path, &params, &r, 200, 3).unwrap();
        assert_eq!(se, 0.0);
        assert!((mc - direct).abs() < 1e-15);
        let exact = tre_backprop(&path, &params, &r).unwrap();
        assert!((exact - direct).abs() < 1e-15);
    }

    #[test]
    fn backprop_singleton_with_no_descendants_is_its_dre() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[(4, 2, 0.08)]); // disp_imp -> search_imp
                                                     // Last touchpoint before conversion has nothing to excite.
        let r = removal(&path, &cat, &[2], 3);
        let exact = tre_backprop(&path, &params, &r).unwrap();
        let direct = dre(&path, &params, &r).unwrap();
        assert!((exact - direct).abs() < 1e-15);
    }

    #[test]
    fn backprop_two_part_decomposition_for_upstream_event() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[(4, 2, 0.08)]); // disp_imp -> search_imp
        let r = removal(&path, &cat, &[1], 3); // display imp at t=3
        let total = tre_backprop(&path, &params, &r).unwrap();

        // Two parts: its own direct score plus its share of the subsequent
        // search impression's direct score.
        let own = dre(&path, &params, &r).unwrap();
        let si_direct = dre_breakdown(&path, &params, 3).unwrap().per_event[&2];
        let lambda_si = intensity(&path, &params, 2, 6.0);
        let delta = 0.08 * params.kernel(4, 2).evaluate(6.0 - 3.0);
        let expected = own + (delta / lambda_si) * si_direct;
        assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
        assert!(total > own);
    }

    #[test]
    fn pmf_degenerate_and_normalized() {
        let cat = two_channel_catalog();
        let path = figure_path(&cat);
        let params = figure_params(&[(4, 2, 0.08)]);

        // Removal of the last touchpoint: Ω = R, single candidate.
        let last = removal(&path, &cat, &[2], 3);
        let p = removal_pmf(&path, &params, &last, last.indices()).unwrap();
        assert_eq!(p, 1.0);

        // Removal of the display impression: window = {search_imp at pos 2}.
        let r = removal(&path, &cat, &[1], 3);
        let om = omega(&path, &params, &r);
        assert_eq!(om.len(), 2);
        let mut total = 0.0;
        for candidate in [vec![1], vec![1, 2]] {
            total += removal_pmf(&path, &params, &r, &candidate.into_iter().collect()).unwrap();
        }
        assert!((total - 1.0).abs() < 1e-15);

        let err = removal_pmf(&path, &params, &r, &[2].into_iter().collect()).unwrap_err();
        assert!(matches!(err, ScoreError::CandidateNotSandwiched(1)));
    }

    fn rich_params() -> ModelParams {
        // Dense-ish customer interactions for randomized checks.
        let (p, q) = (5, 4);
        let mut alpha = vec![0.0; p * q];
        let mut set = |s: usize, t: usize, v: f64| alpha[s * q + t] = v;
        set(4, 1, 0.5);
        set(4, 2, 0.4);
        set(4, 0, 0.2);
        set(1, 0, 0.6);
        set(1, 3, 0.3);
        set(2, 3, 0.7);
        set(2, 0, 0.3);
        set(3, 0, 0.8);
        set(3, 2, 0.2);
        set(2, 1, 0.25);
        ModelParams::new(
            vec![0.05, 0.02, 0.03, 0.01],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 3.0).unwrap(), p, q),
        )
        .unwrap()
    }

    fn random_positive_path(rng: &mut Pcg64Mcg, cat: &EventCatalog, n_touch: usize) -> Path {
        let horizon = 30.0f64;
        let mut events = Vec::new();
        let mut t = 0.0;
        for _ in 0..n_touch {
            t += 0.3 + rng.gen::<f64>() * 2.0;
            let type_idx = 1 + (rng.gen::<u32>() as usize) % (cat.n_types() - 1);
            events.push(Event { t, type_idx });
        }
        t += 0.5 + rng.gen::<f64>();
        events.push(Event { t, type_idx: 0 });
        Path::new("rand", horizon.max(t + 1.0), events, cat).unwrap()
    }

    #[test]
    fn exhaustive_pmf_expectation_equals_backprop() {
        let cat = two_channel_catalog();
        let params = rich_params();
        let mut rng = Pcg64Mcg::new(0xFEED);
        for case in 0..40 {
            let path = random_positive_path(&mut rng, &cat, 3 + (case % 5));
            let target = path.len() - 1;
            let pick = rng.gen::<u32>() as usize % target;
            let r = removal(&path, &cat, &[pick], target);

            let window = {
                let om = omega(&path, &params, &r);
                om.into_iter()
                    .filter(|p| !r.contains(*p))
                    .collect::<Vec<_>>()
            };
            assert!(window.len() <= 12);
            let mut expectation = 0.0;
            let mut mass = 0.0;
            for bits in 0..(1u32 << window.len()) {
                let mut candidate: BTreeSet<usize> = r.indices().clone();
                for (k, &pos) in window.iter().enumerate() {
                    if bits & (1 << k) != 0 {
                        candidate.insert(pos);
                    }
                }
                let pr = removal_pmf(&path, &params, &r, &candidate).unwrap();
                mass += pr;
                let candidate_set = RemovalSet::new(candidate, target, &path, &cat).unwrap();
                expectation += pr * dre(&path, &params, &candidate_set).unwrap();
            }
            assert!((mass - 1.0).abs() < 1e-12, "pmf mass {mass}");
            let exact = tre_backprop(&path, &params, &r).unwrap();
            assert!(
                (expectation - exact).abs() < 1e-10,
                "case {case}: {expectation} vs {exact}"
            );
        }
    }

    #[test]
    fn thinning_agrees_with_backprop_within_monte_carlo_error() {
        let cat = two_channel_catalog();
        let params = rich_params();
        let mut rng = Pcg64Mcg::new(0xB0B);
        for case in 0..6 {
            let path = random_positive_path(&mut rng, &cat, 6);
            let target = path.len() - 1;
            let r = removal(&path, &cat, &[case % target], target);
            let exact = tre_backprop(&path, &params, &r).unwrap();
            let (mc, se) = tre_thinning(&path, &params, &r, 60_000, 17 + case as u64).unwrap();
            assert!(
                (mc - exact).abs() <= 3.0 * se.max(1e-12),
                "case {case}: {mc} vs {exact} (se {se})"
            );
        }
    }

    #[test]
    fn score_algebra_properties() {
        let cat = two_channel_catalog();
        let params = rich_params();
        let mut rng = Pcg64Mcg::new(0xA11CE);
        for _ in 0..60 {
            let path = random_positive_path(&mut rng, &cat, 6);
            let target = path.len() - 1;

            // Random disjoint nonempty pair.
            let mut first = BTreeSet::new();
            let mut second = BTreeSet::new();
            for pos in 0..target {
                match rng.gen::<u32>() % 3 {
                    0 => {
                        first.insert(pos);
                    }
                    1 => {
                        second.insert(pos);
                    }
                    _ => {}
                }
            }
            if first.is_empty() || second.is_empty() {
                continue;
            }
            let union: BTreeSet<usize> = first.union(&second).copied().collect();
            let r1 = RemovalSet::new(first, target, &path, &cat).unwrap();
            let r2 = RemovalSet::new(second, target, &path, &cat).unwrap();
            let ru = RemovalSet::new(union, target, &path, &cat).unwrap();

            // DRE additive up to last-ulp re-association.
            let d1 = dre(&path, &params, &r1).unwrap();
            let d2 = dre(&path, &params, &r2).unwrap();
            let du = dre(&path, &params, &ru).unwrap();
            assert!((du - d1 - d2).abs() < 4e-15);

            // TRE subadditive, dominates DRE, and everything stays in [0,1].
            let t1 = tre_backprop(&path, &params, &r1).unwrap();
            let t2 = tre_backprop(&path, &params, &r2).unwrap();
            let tu = tre_backprop(&path, &params, &ru).unwrap();
            assert!(tu <= t1 + t2 + 1e-9);
            for (t, d) in [(t1, d1), (t2, d2), (tu, du)] {
                assert!(t >= d - 1e-12);
                assert!((0.0..=1.0 + 1e-12).contains(&t));
                assert!((0.0..=1.0 + 1e-12).contains(&d));
            }

            // Propagated scores stay within [0, 1] when baselines are positive.
            let ys = backprop_scores(&path, &params, &r1).unwrap();
            assert!(ys.iter().all(|&y| (0.0..=1.0 + 1e-12).contains(&y)));
        }
    }
}
