//! Per-conversion attribution reports: the common JSONL output schema for
//! model scores and baseline scores, plus the builders that produce them.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{dre, dre_breakdown, tre_backprop, tre_thinning, ScoreError};
use crate::baselines::{
    markov_removal, rule_score, BaselineError, BaselineSpec, LogisticAttribution,
};
use crate::catalog::{EventCatalog, Path, RemovalSet};
use crate::kernels::ModelParams;

/// One scored touchpoint on a report line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TouchpointScore {
    pub position: usize,
    pub t: f64,
    pub event_type: String,
    pub channel: String,
    pub score: f64,
}

/// One conversion's attribution: per-touchpoint scores, the baseline share
/// (model methods only), and per-channel scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub path_id: String,
    pub conversion_time: f64,
    pub method: String,
    pub touchpoints: Vec<TouchpointScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_effect: Option<f64>,
    pub channel_scores: BTreeMap<String, f64>,
}

/// Model scoring method for report generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMethod {
    Dre,
    /// Exact total removal effect by backpropagation (the default engine).
    Tre,
    /// Monte-Carlo total removal effect, for validation and error bars.
    TreThinning {
        replicates: usize,
        seed: u64,
    },
}

impl ModelMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ModelMethod::Dre => "dre",
            ModelMethod::Tre => "tre",
            ModelMethod::TreThinning { .. } => "tre_thinning",
        }
    }
}

/// Which score sections to populate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Per-touchpoint scores and per-channel scores.
    Touchpoint,
    /// Per-channel scores only.
    Channel,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("line {line}: malformed report json: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Positions of channel-`z` touchpoints strictly before the conversion.
fn channel_positions(
    path: &Path,
    catalog: &EventCatalog,
    channel: usize,
    target: usize,
) -> Vec<usize> {
    (0..target)
        .filter(|&i| catalog.channel_of(path.events()[i].type_idx) == Some(channel))
        .collect()
}

/// Score one conversion of a path under the fitted model.
///
/// Channel scores use the whole-channel removal set: the total removal
/// effect is subadditive, so summing touchpoint scores would overstate a
/// channel's credit. For the direct effect either route gives the same
/// number by additivity.
pub fn score_conversion(
    path: &Path,
    params: &ModelParams,
    catalog: &EventCatalog,
    target: usize,
    method: ModelMethod,
    granularity: Granularity,
) -> Result<AttributionReport, ReportError> {
    let breakdown = dre_breakdown(path, params, target)?;
    let score_set = |positions: Vec<usize>| -> Result<f64, ScoreError> {
        if positions.is_empty() {
            return Ok(0.0);
        }
        let removal = RemovalSet::new(positions.into_iter().collect(), target, path, catalog)
            .expect("positions are validated touchpoints before the target");
        match method {
            ModelMethod::Dre => dre(path, params, &removal),
            ModelMethod::Tre => tre_backprop(path, params, &removal),
            ModelMethod::TreThinning { replicates, seed } => {
                tre_thinning(path, params, &removal, replicates, seed).map(|(mean, _)| mean)
            }
        }
    };

    let mut channel_scores = BTreeMap::new();
    for z in 0..catalog.n_channels() {
        let score = score_set(channel_positions(path, catalog, z, target))?;
        channel_scores.insert(catalog.channel_name(z).to_string(), score);
    }

    let touchpoints = match granularity {
        Granularity::Channel => Vec::new(),
        Granularity::Touchpoint => {
            let mut out = Vec::new();
            for pos in 0..target {
                let ev = path.events()[pos];
                let Some(z) = catalog.channel_of(ev.type_idx) else {
                    continue; // mid-path conversions are not touchpoints
                };
                let score = match method {
                    ModelMethod::Dre => breakdown.per_event[&pos],
                    _ => score_set(vec![pos])?,
                };
                out.push(TouchpointScore {
                    position: pos,
                    t: ev.t,
                    event_type: catalog.type_name(ev.type_idx).to_string(),
                    channel: catalog.channel_name(z).to_string(),
                    score,
                });
            }
            out
        }
    };

    Ok(AttributionReport {
        path_id: path.path_id().to_string(),
        conversion_time: path.events()[target].t,
        method: method.label().to_string(),
        touchpoints,
        baseline_effect: Some(breakdown.baseline_effect),
        channel_scores,
    })
}

/// Score every conversion of every path under the fitted model.
pub fn score_paths(
    paths: &[Path],
    params: &ModelParams,
    catalog: &EventCatalog,
    method: ModelMethod,
    granularity: Granularity,
) -> Result<Vec<AttributionReport>, ReportError> {
    let mut out = Vec::new();
    for path in paths {
        for target in path.conversions(catalog) {
            out.push(score_conversion(
                path,
                params,
                catalog,
                target,
                method,
                granularity,
            )?);
        }
    }
    Ok(out)
}

/// Score conversions with a baseline method, producing the same schema.
///
/// Rule-based methods score each conversion from its preceding touchpoints.
/// The logistic method scores each positive path from whole-path touch
/// counts and attaches the path's scores to each of its conversions. The
/// Markov method is corpus-level: it emits a single summary line carrying
/// the per-channel removal effects.
pub fn score_paths_baseline(
    paths: &[Path],
    catalog: &EventCatalog,
    spec: &BaselineSpec,
) -> Result<Vec<AttributionReport>, ReportError> {
    let method = match spec {
        BaselineSpec::Last => "last",
        BaselineSpec::First => "first",
        BaselineSpec::Linear => "linear",
        BaselineSpec::Decay { .. } => "decay",
        BaselineSpec::UShaped => "u_shaped",
        BaselineSpec::Logistic => "logistic",
        BaselineSpec::Markov => "markov",
    };

    if *spec == BaselineSpec::Markov {
        let result = markov_removal(paths, catalog)?;
        let channel_scores = (0..catalog.n_channels())
            .map(|z| {
                (
                    catalog.channel_name(z).to_string(),
                    result.removal_effects[z].max(0.0),
                )
            })
            .collect();
        return Ok(vec![AttributionReport {
            path_id: "(corpus)".into(),
            conversion_time: 0.0,
            method: method.into(),
            touchpoints: Vec::new(),
            baseline_effect: None,
            channel_scores,
        }]);
    }

    let logistic = if *spec == BaselineSpec::Logistic {
        Some(LogisticAttribution::fit(paths, catalog)?)
    } else {
        None
    };

    let mut out = Vec::new();
    for path in paths {
        let conversions = path.conversions(catalog);
        if conversions.is_empty() {
            continue;
        }
        for target in conversions {
            let scores = match &logistic {
                Some(model) => model.score_path(path, catalog),
                None => rule_score(path, catalog, target, spec)?,
            };
            let mut channel_scores: BTreeMap<String, f64> = (0..catalog.n_channels())
                .map(|z| (catalog.channel_name(z).to_string(), 0.0))
                .collect();
            let mut touchpoints = Vec::new();
            for (&pos, &score) in &scores {
                let ev = path.events()[pos];
                let Some(z) = catalog.channel_of(ev.type_idx) else {
                    continue;
                };
                *channel_scores
                    .get_mut(catalog.channel_name(z))
                    .expect("all channels preinserted") += score;
                touchpoints.push(TouchpointScore {
                    position: pos,
                    t: ev.t,
                    event_type: catalog.type_name(ev.type_idx).to_string(),
                    channel: catalog.channel_name(z).to_string(),
                    score,
                });
            }
            out.push(AttributionReport {
                path_id: path.path_id().to_string(),
                conversion_time: path.events()[target].t,
                method: method.into(),
                touchpoints,
                baseline_effect: None,
                channel_scores,
            });
        }
    }
    Ok(out)
}

/// Write reports as JSON Lines.
pub fn write_reports(
    out: &mut impl std::io::Write,
    reports: &[AttributionReport],
) -> std::io::Result<()> {
    for report in reports {
        writeln!(
            out,
            "{}",
            serde_json::to_string(report).expect("report serialization cannot fail")
        )?;
    }
    Ok(())
}

/// Read reports from a JSON Lines stream.
pub fn read_reports(source: impl BufRead) -> Result<Vec<AttributionReport>, ReportError> {
    let mut reports = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(
            serde_json::from_str(&line).map_err(|source| ReportError::Malformed {
                line: idx + 1,
                source,
            })?,
        );
    }
    Ok(reports)
}
