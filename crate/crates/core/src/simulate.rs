//! Seeded path simulation by thinning, with coupled channel-off runs.
//!
//! Firm-initiated types arrive as homogeneous Poisson processes drawn from
//! per-(path, type) streams. Customer-initiated types are generated by
//! Ogata-style thinning: between excitations every supported kernel is
//! non-increasing, so the intensity evaluated just after the latest
//! exciting event is a valid local upper bound. A type's bound and pending
//! candidate are refreshed only on its own rejections and on events that
//! actually excite it (`α > 0`).
//!
//! Randomness is counter-based per `(master_seed, path, type, purpose)`,
//! and the excitation-only refresh rule means a type's draws depend solely
//! on the history that influences it. Disabling a type therefore never
//! perturbs the draws of types it does not excite, which is what makes a
//! same-seed channel-off rerun the coupled counterfactual for ground-truth
//! conversion counts.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogFile, Event, EventCatalog, Path, PathError};
use crate::kernels::{intensity_events, params_from_json, params_to_json, ModelParams};
use crate::rng::{exp_gap, stream_rng, Purpose};

/// A fully specified synthetic experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub catalog: EventCatalog,
    pub params: ModelParams,
    /// Poisson rate (events/day) per firm-initiated type, indexed `q..p`.
    pub firm_rates: Vec<f64>,
    /// Observation horizon `T` in days.
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("firm rate for `{name}` must be nonnegative and finite, got {rate}")]
    BadFirmRate { name: String, rate: f64 },
    #[error("missing firm rate for `{0}`")]
    MissingFirmRate(String),
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("n_paths must be at least 1")]
    NoPaths,
    #[error(
        "intensity {lambda} exceeded its thinning bound {bound} for type {type_idx} at t={t}; \
         this indicates a bug, not data"
    )]
    BoundViolation {
        type_idx: usize,
        t: f64,
        lambda: f64,
        bound: f64,
    },
    #[error("simulated path failed validation: {0}")]
    InvalidPath(#[from] PathError),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("invalid scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario model: {0}")]
    Model(#[from] crate::kernels::ModelError),
    #[error("scenario catalog: {0}")]
    Catalog(#[from] crate::catalog::CatalogError),
}

impl Scenario {
    pub fn new(
        catalog: EventCatalog,
        params: ModelParams,
        firm_rates: Vec<f64>,
        horizon: f64,
        n_paths: usize,
        master_seed: u64,
    ) -> Result<Self, SimError> {
        if horizon.is_nan() || horizon <= 0.0 {
            return Err(SimError::BadHorizon(horizon));
        }
        if n_paths == 0 {
            return Err(SimError::NoPaths);
        }
        let n_firm = catalog.n_types() - catalog.n_customer();
        if firm_rates.len() != n_firm {
            return Err(SimError::MissingFirmRate(format!(
                "expected {n_firm} rates, got {}",
                firm_rates.len()
            )));
        }
        for (i, &rate) in firm_rates.iter().enumerate() {
            if !rate.is_finite() || rate < 0.0 {
                return Err(SimError::BadFirmRate {
                    name: catalog.type_name(catalog.n_customer() + i).to_string(),
                    rate,
                });
            }
        }
        Ok(Self {
            catalog,
            params,
            firm_rates,
            horizon,
            n_paths,
            master_seed,
        })
    }

    pub fn firm_rate(&self, type_idx: usize) -> f64 {
        self.firm_rates[type_idx - self.catalog.n_customer()]
    }

    /// All type indices of a channel, the disable set for a z-off run.
    pub fn channel_types(&self, channel: usize) -> BTreeSet<usize> {
        self.catalog.types_in_channel(channel).into_iter().collect()
    }
}

/// Simulate one path. Events of `disabled_types` are suppressed at
/// generation: their processes are simply not simulated, so they contribute
/// nothing to downstream intensities, while all remaining per-type streams
/// consume exactly the same randomness as in the base run.
pub fn simulate_path(
    scenario: &Scenario,
    path_index: usize,
    disabled_types: &BTreeSet<usize>,
) -> Result<Path, SimError> {
    let catalog = &scenario.catalog;
    let params = &scenario.params;
    let q = catalog.n_customer();
    let p = catalog.n_types();
    let horizon = scenario.horizon;
    let seed = scenario.master_seed;

    // Firm-initiated arrivals, drawn fully up front per type.
    let mut firm_events: Vec<Event> = Vec::new();
    for type_idx in q..p {
        if disabled_types.contains(&type_idx) {
            continue;
        }
        let rate = scenario.firm_rate(type_idx);
        if rate == 0.0 {
            continue;
        }
        let mut rng = stream_rng(
            seed,
            path_index as u64,
            type_idx as u64,
            Purpose::FirmArrivals,
        );
        let mut t = 0.0;
        loop {
            t += exp_gap(&mut rng, rate);
            if t > horizon {
                break;
            }
            firm_events.push(Event { t, type_idx });
        }
    }
    firm_events.sort_by(|a, b| a.t.total_cmp(&b.t));

    // Customer-initiated generation by a thinning race across types.
    struct TypeState {
        gap_rng: rand_pcg::Pcg64Mcg,
        accept_rng: rand_pcg::Pcg64Mcg,
        bound: f64,
        candidate: f64,
    }
    let active: Vec<usize> = (0..q).filter(|e| !disabled_types.contains(e)).collect();
    let mut events: Vec<Event> = Vec::with_capacity(16);
    let mut states: Vec<TypeState> = active
        .iter()
        .map(|&e| TypeState {
            gap_rng: stream_rng(seed, path_index as u64, e as u64, Purpose::CandidateGaps),
            accept_rng: stream_rng(seed, path_index as u64, e as u64, Purpose::AcceptTests),
            bound: 0.0,
            candidate: f64::INFINITY,
        })
        .collect();

    // Local upper bound for type e on the event-free future after `t`.
    let bound_after = |events: &[Event], e: usize, t: f64| -> f64 {
        let mut bound = params.mu(e);
        for ev in events.iter() {
            if ev.t > t {
                break;
            }
            let a = params.alpha(ev.type_idx, e);
            if a > 0.0 {
                bound += a * params.kernel(ev.type_idx, e).upper_bound_after(t - ev.t);
            }
        }
        bound
    };
    let redraw = |state: &mut TypeState, events: &[Event], e: usize, from: f64| {
        state.bound = bound_after(events, e, from);
        state.candidate = if state.bound > 0.0 {
            from + exp_gap(&mut state.gap_rng, state.bound)
        } else {
            f64::INFINITY
        };
    };

    for (slot, &e) in active.iter().enumerate() {
        redraw(&mut states[slot], &events, e, 0.0);
    }

    let mut firm_cursor = 0usize;
    loop {
        let next_firm = firm_events
            .get(firm_cursor)
            .map(|ev| ev.t)
            .unwrap_or(f64::INFINITY);
        let (slot, candidate) = states
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.candidate))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, f64::INFINITY));

        if next_firm <= candidate {
            if next_firm > horizon {
                break;
            }
            let firm_type = firm_events[firm_cursor].type_idx;
            events.push(firm_events[firm_cursor]);
            firm_cursor += 1;
            // Only intensities the new event excites jump; every other
            // type's bound and pending candidate stay valid, and leaving
            // them untouched is what keeps unrelated streams identical when
            // a type is disabled in a coupled rerun.
            for (i, &e) in active.iter().enumerate() {
                if params.alpha(firm_type, e) > 0.0 {
                    redraw(&mut states[i], &events, e, next_firm);
                }
            }
            continue;
        }
        if candidate > horizon {
            break;
        }
        let e = active[slot];
        let lambda = intensity_events(&events, params, e, candidate);
        let bound = states[slot].bound;
        if lambda > bound * (1.0 + 1e-9) {
            return Err(SimError::BoundViolation {
                type_idx: e,
                t: candidate,
                lambda,
                bound,
            });
        }
        let accepted = states[slot].accept_rng.gen::<f64>() * bound < lambda;
        if accepted {
            events.push(Event {
                t: candidate,
                type_idx: e,
            });
            for (i, &ty) in active.iter().enumerate() {
                if ty == e || params.alpha(e, ty) > 0.0 {
                    redraw(&mut states[i], &events, ty, candidate);
                }
            }
        } else {
            // Rejection advances only this type's clock; other bounds are
            // still valid because no event occurred.
            redraw(&mut states[slot], &events, e, candidate);
        }
    }

    Ok(Path::new(
        format!("p{path_index}"),
        horizon,
        events,
        catalog,
    )?)
}

/// Simulate every path of the scenario, in parallel, deterministically.
pub fn simulate_all(
    scenario: &Scenario,
    disabled_types: &BTreeSet<usize>,
) -> Result<Vec<Path>, SimError> {
    (0..scenario.n_paths)
        .into_par_iter()
        .map(|i| simulate_path(scenario, i, disabled_types))
        .collect()
}

fn count_conversions(paths: &[Path], catalog: &EventCatalog) -> u64 {
    let conv = catalog.conversion();
    paths
        .iter()
        .map(|p| p.events().iter().filter(|e| e.type_idx == conv).count() as u64)
        .sum()
}

/// Ground-truth channel contribution from coupled counterfactual runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelCcc {
    pub channel: String,
    pub total_conversions: u64,
    pub conversions_with_channel_off: u64,
    /// `total - off`; may be marginally negative under sampling noise.
    pub ccc: i64,
}

/// Run the scenario twice with identical seeds — once as-is, once with every
/// type of channel `z` disabled — and report the conversion-count drop.
pub fn ground_truth_ccc(scenario: &Scenario, channel: usize) -> Result<ChannelCcc, SimError> {
    let base = simulate_all(scenario, &BTreeSet::new())?;
    let total = count_conversions(&base, &scenario.catalog);
    ccc_against_base(scenario, channel, total)
}

fn ccc_against_base(
    scenario: &Scenario,
    channel: usize,
    total: u64,
) -> Result<ChannelCcc, SimError> {
    let disabled = scenario.channel_types(channel);
    let off = simulate_all(scenario, &disabled)?;
    let off_total = count_conversions(&off, &scenario.catalog);
    Ok(ChannelCcc {
        channel: scenario.catalog.channel_name(channel).to_string(),
        total_conversions: total,
        conversions_with_channel_off: off_total,
        ccc: total as i64 - off_total as i64,
    })
}

/// Per-channel CCC sharing one base run, plus the base paths for reuse.
pub fn ccc_all_channels(scenario: &Scenario) -> Result<(Vec<Path>, Vec<ChannelCcc>), SimError> {
    let base = simulate_all(scenario, &BTreeSet::new())?;
    let total = count_conversions(&base, &scenario.catalog);
    let per_channel = (0..scenario.catalog.n_channels())
        .map(|z| ccc_against_base(scenario, z, total))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((base, per_channel))
}

// Scenario file schema. Firm rates are keyed by type name.
#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    catalog: CatalogFile,
    model: serde_json::Value,
    firm_rates: std::collections::BTreeMap<String, f64>,
    #[serde(rename = "T")]
    horizon: f64,
    n_paths: usize,
    master_seed: u64,
}

pub fn scenario_from_json(json: &str) -> Result<Scenario, SimError> {
    let file: ScenarioFile = serde_json::from_str(json)?;
    let catalog = EventCatalog::new(file.catalog.types, &file.catalog.conversion)?;
    let params = params_from_json(&file.model.to_string(), &catalog)?;
    let q = catalog.n_customer();
    let mut firm_rates = Vec::with_capacity(catalog.n_types() - q);
    for idx in q..catalog.n_types() {
        let name = catalog.type_name(idx);
        let rate = file
            .firm_rates
            .get(name)
            .copied()
            .ok_or_else(|| SimError::MissingFirmRate(name.to_string()))?;
        firm_rates.push(rate);
    }
    Scenario::new(
        catalog,
        params,
        firm_rates,
        file.horizon,
        file.n_paths,
        file.master_seed,
    )
}

pub fn scenario_to_json(scenario: &Scenario) -> Result<String, SimError> {
    let catalog_file: CatalogFile =
        serde_json::from_str(&scenario.catalog.to_json()).expect("catalog json round-trips");
    let model: serde_json::Value = serde_json::from_str(&params_to_json(&scenario.params)?)?;
    let firm_rates = (scenario.catalog.n_customer()..scenario.catalog.n_types())
        .map(|idx| {
            (
                scenario.catalog.type_name(idx).to_string(),
                scenario.firm_rate(idx),
            )
        })
        .collect();
    let file = ScenarioFile {
        catalog: catalog_file,
        model,
        firm_rates,
        horizon: scenario.horizon,
        n_paths: scenario.n_paths,
        master_seed: scenario.master_seed,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Initiator, TypeSpec};
    use crate::kernels::{Kernel, KernelShape, Kernels};
    use crate::stats;

    fn poisson_only_catalog() -> EventCatalog {
        EventCatalog::new(
            vec![
                TypeSpec {
                    name: "conv".into(),
                    initiator: Initiator::Customer,
                    channel: None,
                },
                TypeSpec {
                    name: "imp".into(),
                    initiator: Initiator::Firm,
                    channel: Some("display".into()),
                },
            ],
            "conv",
        )
        .unwrap()
    }

    fn poisson_only_scenario(mu_conv: f64, firm_rate: f64, n_paths: usize) -> Scenario {
        let catalog = poisson_only_catalog();
        let params = ModelParams::new(
            vec![mu_conv],
            vec![0.0, 0.0],
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 5.0).unwrap(), 2, 1),
        )
        .unwrap();
        Scenario::new(catalog, params, vec![firm_rate], 50.0, n_paths, 99).unwrap()
    }

    #[test]
    fn zero_alpha_conversions_match_poisson_mean() {
        let mu = 0.08;
        let n = 4000usize;
        let scenario = poisson_only_scenario(mu, 0.05, n);
        let paths = simulate_all(&scenario, &BTreeSet::new()).unwrap();
        let mean_count = count_conversions(&paths, &scenario.catalog) as f64 / n as f64;
        let expect = mu * scenario.horizon;
        let tol = 3.0 * (expect / n as f64).sqrt();
        assert!(
            (mean_count - expect).abs() < tol,
            "{mean_count} vs {expect} ± {tol}"
        );
    }

    #[test]
    fn disabling_everything_but_conversion_leaves_only_conversions() {
        let scenario = poisson_only_scenario(0.05, 0.2, 50);
        let disabled: BTreeSet<usize> = [1].into();
        for i in 0..50 {
            let path = simulate_path(&scenario, i, &disabled).unwrap();
            assert!(path.events().iter().all(|e| e.type_idx == 0));
        }
    }

    #[test]
    fn zero_intensity_types_never_fire() {
        // disp_click-style type: zero baseline, no incoming excitation.
        let catalog = EventCatalog::new(
            vec![
                TypeSpec {
                    name: "conv".into(),
                    initiator: Initiator::Customer,
                    channel: None,
                },
                TypeSpec {
                    name: "click".into(),
                    initiator: Initiator::Customer,
                    channel: Some("search".into()),
                },
                TypeSpec {
                    name: "imp".into(),
                    initiator: Initiator::Firm,
                    channel: Some("display".into()),
                },
            ],
            "conv",
        )
        .unwrap();
        let mut alpha = vec![0.0; 3 * 2];
        alpha[2 * 2] = 0.5; // imp -> conv only
        let params = ModelParams::new(
            vec![0.05, 0.0],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 2.0).unwrap(), 3, 2),
        )
        .unwrap();
        let scenario = Scenario::new(catalog, params, vec![0.2], 60.0, 100, 3).unwrap();
        let paths = simulate_all(&scenario, &BTreeSet::new()).unwrap();
        assert!(paths
            .iter()
            .all(|p| p.events().iter().all(|e| e.type_idx != 1)));
        assert!(paths.iter().any(|p| !p.is_empty()));
    }

    #[test]
    fn ccc_is_zero_for_a_channel_without_influence() {
        // Two firm channels; only one feeds the conversion. Disabling the
        // inert one changes nothing, while baseline conversions survive
        // disabling the influential one.
        let catalog = EventCatalog::new(
            vec![
                TypeSpec {
                    name: "conv".into(),
                    initiator: Initiator::Customer,
                    channel: None,
                },
                TypeSpec {
                    name: "imp".into(),
                    initiator: Initiator::Firm,
                    channel: Some("display".into()),
                },
                TypeSpec {
                    name: "billboard".into(),
                    initiator: Initiator::Firm,
                    channel: Some("outdoor".into()),
                },
            ],
            "conv",
        )
        .unwrap();
        let mut alpha = vec![0.0; 3];
        alpha[1] = 0.5; // imp -> conv; billboard influences nothing
        let params = ModelParams::new(
            vec![0.04],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 3.0).unwrap(), 3, 1),
        )
        .unwrap();
        let scenario = Scenario::new(catalog, params, vec![0.1, 0.2], 60.0, 300, 17).unwrap();

        let outdoor = scenario.catalog.channel_index("outdoor").unwrap();
        let inert = ground_truth_ccc(&scenario, outdoor).unwrap();
        assert_eq!(inert.ccc, 0);

        let display = scenario.catalog.channel_index("display").unwrap();
        let influential = ground_truth_ccc(&scenario, display).unwrap();
        assert!(influential.ccc > 0);
        // Baseline intensity keeps converting with the channel off.
        assert!(influential.conversions_with_channel_off > 0);
    }

    #[test]
    fn identical_seeds_reproduce_identical_paths() {
        let scenario = poisson_only_scenario(0.03, 0.1, 20);
        let a = simulate_all(&scenario, &BTreeSet::new()).unwrap();
        let b = simulate_all(&scenario, &BTreeSet::new()).unwrap();
        assert_eq!(a, b);
    }

    fn excited_scenario(n_paths: usize, seed: u64) -> Scenario {
        // conv is excited by the firm input and by itself.
        let catalog = poisson_only_catalog();
        let q = 1;
        let mut alpha = vec![0.0; 2 * q];
        alpha[0] = 0.4; // conv -> conv
        alpha[q] = 0.6; // imp -> conv
        let params = ModelParams::new(
            vec![0.05],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 2.0).unwrap(), 2, 1),
        )
        .unwrap();
        Scenario::new(catalog, params, vec![0.1], 80.0, n_paths, seed).unwrap()
    }

    #[test]
    fn time_rescaling_residuals_are_unit_exponential() {
        let scenario = excited_scenario(1200, 5);
        let paths = simulate_all(&scenario, &BTreeSet::new()).unwrap();
        let gaps = stats::time_rescaled_gaps(&paths, &scenario.params, 0);
        assert!(gaps.len() >= 5000, "only {} gaps", gaps.len());
        let (d, p) = stats::ks_test_exp1(&gaps);
        assert!(
            p > 0.01,
            "KS d={d}, p={p}, n={}, mean={}",
            gaps.len(),
            stats::mean(&gaps)
        );
    }

    #[test]
    fn coupled_off_run_keeps_other_firm_streams_bitwise_identical() {
        // Two firm types in different channels; disabling one channel must
        // leave the other channel's firm events bit-for-bit unchanged.
        let catalog = EventCatalog::new(
            vec![
                TypeSpec {
                    name: "conv".into(),
                    initiator: Initiator::Customer,
                    channel: None,
                },
                TypeSpec {
                    name: "disp_imp".into(),
                    initiator: Initiator::Firm,
                    channel: Some("display".into()),
                },
                TypeSpec {
                    name: "email".into(),
                    initiator: Initiator::Firm,
                    channel: Some("email".into()),
                },
            ],
            "conv",
        )
        .unwrap();
        let mut alpha = vec![0.0; 3];
        alpha[1] = 0.3; // disp_imp -> conv
        alpha[2] = 0.3; // email -> conv
        let params = ModelParams::new(
            vec![0.01],
            alpha,
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 3.0).unwrap(), 3, 1),
        )
        .unwrap();
        let scenario = Scenario::new(catalog, params, vec![0.15, 0.12], 60.0, 40, 7).unwrap();

        let base = simulate_all(&scenario, &BTreeSet::new()).unwrap();
        let display_off = simulate_all(&scenario, &scenario.channel_types(0)).unwrap();
        for (b, off) in base.iter().zip(&display_off) {
            let emails = |p: &Path| -> Vec<f64> {
                p.events()
                    .iter()
                    .filter(|e| e.type_idx == 2)
                    .map(|e| e.t)
                    .collect()
            };
            assert_eq!(emails(b), emails(off));
            assert!(off.events().iter().all(|e| e.type_idx != 1));
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let scenario = excited_scenario(10, 5);
        let json = scenario_to_json(&scenario).unwrap();
        let back = scenario_from_json(&json).unwrap();
        assert_eq!(back.catalog, scenario.catalog);
        assert_eq!(back.params, scenario.params);
        assert_eq!(back.firm_rates, scenario.firm_rates);
        assert_eq!(back.horizon, scenario.horizon);
        assert_eq!(back.n_paths, scenario.n_paths);
        assert_eq!(back.master_seed, scenario.master_seed);
    }

    #[test]
    fn bad_scenarios_are_rejected() {
        let catalog = poisson_only_catalog();
        let params = ModelParams::new(
            vec![0.1],
            vec![0.0, 0.0],
            Kernels::shared(Kernel::new(KernelShape::ExpDecay, 5.0).unwrap(), 2, 1),
        )
        .unwrap();
        assert!(matches!(
            Scenario::new(catalog.clone(), params.clone(), vec![-0.1], 10.0, 5, 1),
            Err(SimError::BadFirmRate { .. })
        ));
        assert!(matches!(
            Scenario::new(catalog.clone(), params.clone(), vec![0.1], 0.0, 5, 1),
            Err(SimError::BadHorizon(_))
        ));
        assert!(matches!(
            Scenario::new(catalog, params, vec![0.1], 10.0, 0, 1),
            Err(SimError::NoPaths)
        ));
    }
}
