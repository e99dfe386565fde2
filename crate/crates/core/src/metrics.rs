//! Channel-level aggregation and divergence metrics.
//!
//! The channel-level aggregated score (CAS) of a method sums its per-channel
//! attribution over every conversion; its proportions estimate the
//! ground-truth proportions of channel-level conversion counts (CCC), and
//! the two are compared by KL divergence and Hellinger distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::EventCatalog;
use crate::report::AttributionReport;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("aggregate scores are all zero; proportions are undefined")]
    AllZero,
    #[error("negative aggregate score {value} for channel `{channel}`")]
    NegativeScore { channel: String, value: f64 },
    #[error("distributions have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown channel `{0}` in report")]
    UnknownChannel(String),
}

/// A normalized distribution over channels, with the raw aggregates kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDistribution {
    pub proportions: Vec<f64>,
    pub raw: Vec<f64>,
}

impl ChannelDistribution {
    /// Normalize raw nonnegative aggregates to proportions.
    pub fn from_raw(raw: Vec<f64>, catalog: &EventCatalog) -> Result<Self, MetricsError> {
        if let Some((z, &value)) = raw.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(MetricsError::NegativeScore {
                channel: catalog.channel_name(z).to_string(),
                value,
            });
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(MetricsError::AllZero);
        }
        let proportions = raw.iter().map(|v| v / total).collect();
        Ok(Self { proportions, raw })
    }

    pub fn n_channels(&self) -> usize {
        self.proportions.len()
    }
}

/// Sum per-channel scores over all report lines and normalize.
pub fn aggregate_cas(
    reports: &[AttributionReport],
    catalog: &EventCatalog,
) -> Result<ChannelDistribution, MetricsError> {
    let mut raw = vec![0.0; catalog.n_channels()];
    for report in reports {
        for (channel, score) in &report.channel_scores {
            let z = catalog
                .channel_index(channel)
                .ok_or_else(|| MetricsError::UnknownChannel(channel.clone()))?;
            raw[z] += score;
        }
    }
    ChannelDistribution::from_raw(raw, catalog)
}

/// `D_KL(p ‖ p̂) = Σ p_z ln(p_z / p̂_z)`, with `0·ln(0/·) = 0` and `+∞` when
/// `p̂` misses mass that `p` has.
pub fn kl_divergence(p: &[f64], p_hat: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != p_hat.len() {
        return Err(MetricsError::LengthMismatch(p.len(), p_hat.len()));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(p_hat) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += a * (a / b).ln();
    }
    Ok(kl)
}

/// `H(p, p̂) = sqrt(½ Σ (√p̂_z - √p_z)²)`, in `[0, 1]`.
pub fn hellinger(p: &[f64], p_hat: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != p_hat.len() {
        return Err(MetricsError::LengthMismatch(p.len(), p_hat.len()));
    }
    let sum: f64 = p
        .iter()
        .zip(p_hat)
        .map(|(&a, &b)| {
            let d = b.sqrt() - a.sqrt();
            d * d
        })
        .sum();
    Ok((0.5 * sum).sqrt())
}
