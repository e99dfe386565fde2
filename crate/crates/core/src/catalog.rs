//! Event catalogs, customer paths, and JSONL ingestion.
//!
//! An [`EventCatalog`] declares the `p` event types under study. Types are
//! canonically ordered: customer-initiated types first (with the conversion
//! type at index 0), firm-initiated types after them. A [`Path`] is one
//! customer's strictly time-ordered event stream on `[0, T]`.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Who triggers an event type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initiator {
    /// Generated by the customer; modeled by the conditional intensity.
    Customer,
    /// Controlled by the advertiser; treated as an exogenous input.
    Firm,
}

/// Declaration of one event type prior to catalog canonicalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeSpec {
    pub name: String,
    pub initiator: Initiator,
    /// Marketing channel; must be `None` for the conversion type and
    /// `Some` for every other type.
    pub channel: Option<String>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog must declare at least two event types, got {0}")]
    TooFewTypes(usize),
    #[error("duplicate event type name `{0}`")]
    DuplicateType(String),
    #[error("conversion type `{0}` is not declared")]
    UnknownConversion(String),
    #[error("conversion type `{0}` must be customer-initiated")]
    ConversionNotCustomer(String),
    #[error("conversion type `{0}` must not belong to a marketing channel")]
    ConversionHasChannel(String),
    #[error("type `{0}` must belong to a channel")]
    MissingChannel(String),
    #[error("catalog needs at least one firm-initiated type")]
    NoFirmTypes,
    #[error("invalid catalog json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The universe of event types: names, initiator partition, and channel map.
///
/// Internal indices are canonical: `0..q` are customer-initiated with the
/// conversion at index 0, and `q..p` are firm-initiated.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCatalog {
    type_names: Vec<String>,
    n_customer: usize,
    channel_of: Vec<Option<usize>>,
    channel_names: Vec<String>,
    by_name: HashMap<String, usize>,
}

impl EventCatalog {
    /// Build a catalog from type declarations, reordering them into
    /// canonical index order.
    pub fn new(types: Vec<TypeSpec>, conversion: &str) -> Result<Self, CatalogError> {
        if types.len() < 2 {
            return Err(CatalogError::TooFewTypes(types.len()));
        }
        let mut seen = BTreeSet::new();
        for t in &types {
            if !seen.insert(t.name.clone()) {
                return Err(CatalogError::DuplicateType(t.name.clone()));
            }
        }
        let conv = types
            .iter()
            .find(|t| t.name == conversion)
            .ok_or_else(|| CatalogError::UnknownConversion(conversion.to_string()))?;
        if conv.initiator != Initiator::Customer {
            return Err(CatalogError::ConversionNotCustomer(conversion.to_string()));
        }
        if conv.channel.is_some() {
            return Err(CatalogError::ConversionHasChannel(conversion.to_string()));
        }

        // Canonical order: conversion, other customer types, firm types.
        // Within each block the declaration order is preserved.
        let mut ordered: Vec<&TypeSpec> = Vec::with_capacity(types.len());
        ordered.push(conv);
        ordered.extend(
            types
                .iter()
                .filter(|t| t.initiator == Initiator::Customer && t.name != conversion),
        );
        let n_customer = ordered.len();
        ordered.extend(types.iter().filter(|t| t.initiator == Initiator::Firm));
        if n_customer == ordered.len() {
            return Err(CatalogError::NoFirmTypes);
        }

        let mut channel_names: Vec<String> = Vec::new();
        let mut channel_of = Vec::with_capacity(ordered.len());
        for t in &ordered {
            match (&t.channel, t.name == conversion) {
                (None, true) => channel_of.push(None),
                (None, false) => return Err(CatalogError::MissingChannel(t.name.clone())),
                (Some(ch), _) => {
                    let id = match channel_names.iter().position(|c| c == ch) {
                        Some(id) => id,
                        None => {
                            channel_names.push(ch.clone());
                            channel_names.len() - 1
                        }
                    };
                    channel_of.push(Some(id));
                }
            }
        }

        let type_names: Vec<String> = ordered.iter().map(|t| t.name.clone()).collect();
        let by_name = type_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            type_names,
            n_customer,
            channel_of,
            channel_names,
            by_name,
        })
    }

    /// Total number of event types `p`.
    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    /// Number of customer-initiated types `q` (indices `0..q`).
    pub fn n_customer(&self) -> usize {
        self.n_customer
    }

    /// Canonical index of the conversion type.
    pub fn conversion(&self) -> usize {
        0
    }

    pub fn is_customer(&self, type_idx: usize) -> bool {
        type_idx < self.n_customer
    }

    pub fn is_firm(&self, type_idx: usize) -> bool {
        type_idx >= self.n_customer && type_idx < self.n_types()
    }

    pub fn type_name(&self, type_idx: usize) -> &str {
        &self.type_names[type_idx]
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Channel id of a type; `None` only for the conversion type.
    pub fn channel_of(&self, type_idx: usize) -> Option<usize> {
        self.channel_of[type_idx]
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_name(&self, channel: usize) -> &str {
        &self.channel_names[channel]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == name)
    }

    /// All type indices assigned to a channel.
    pub fn types_in_channel(&self, channel: usize) -> Vec<usize> {
        (0..self.n_types())
            .filter(|&e| self.channel_of[e] == Some(channel))
            .collect()
    }

    pub fn from_json(json: &str) -> Result<Self, CatalogError> {
        let file: CatalogFile = serde_json::from_str(json)?;
        Self::new(file.types, &file.conversion)
    }

    pub fn to_json(&self) -> String {
        let types = (0..self.n_types())
            .map(|e| TypeSpec {
                name: self.type_names[e].clone(),
                initiator: if self.is_customer(e) {
                    Initiator::Customer
                } else {
                    Initiator::Firm
                },
                channel: self.channel_of[e].map(|z| self.channel_names[z].clone()),
            })
            .collect();
        let file = CatalogFile {
            types,
            conversion: self.type_names[0].clone(),
        };
        serde_json::to_string_pretty(&file).expect("catalog serialization cannot fail")
    }
}

/// On-disk catalog schema.
#[derive(Debug, Serialize, Deserialize)]
pub struct CatalogFile {
    pub types: Vec<TypeSpec>,
    pub conversion: String,
}

/// One timestamped occurrence of an event type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Timestamp in days from the path start.
    pub t: f64,
    /// Canonical type index into the owning catalog.
    pub type_idx: usize,
}

#[derive(Debug, Error)]
pub enum PathError {
    #[error("path `{path_id}`: horizon must be positive, got {horizon}")]
    NonPositiveHorizon { path_id: String, horizon: f64 },
    #[error("path `{path_id}`: event timestamp {t} outside [0, {horizon}]")]
    TimestampOutOfRange {
        path_id: String,
        t: f64,
        horizon: f64,
    },
    #[error(
        "path `{path_id}`: duplicate timestamp {t}; simultaneous events are not representable"
    )]
    DuplicateTimestamp { path_id: String, t: f64 },
    #[error("path `{path_id}`: unknown event type index {type_idx}")]
    UnknownTypeIndex { path_id: String, type_idx: usize },
    #[error("path `{path_id}`: non-finite timestamp")]
    NonFiniteTimestamp { path_id: String },
}

/// One customer's validated event stream on `[0, T]`.
///
/// Timestamps are strictly increasing; exact ties are rejected at
/// construction because intensity evaluation and thinning assume the
/// counting processes never jump simultaneously.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    path_id: String,
    horizon: f64,
    events: Vec<Event>,
}

impl Path {
    /// Validate and construct. Unsorted input is sorted first; a duplicate
    /// timestamp is fatal even after sorting.
    pub fn new(
        path_id: impl Into<String>,
        horizon: f64,
        mut events: Vec<Event>,
        catalog: &EventCatalog,
    ) -> Result<Self, PathError> {
        let path_id = path_id.into();
        if horizon.is_nan() || horizon <= 0.0 {
            return Err(PathError::NonPositiveHorizon { path_id, horizon });
        }
        for ev in &events {
            if !ev.t.is_finite() {
                return Err(PathError::NonFiniteTimestamp { path_id });
            }
            if ev.t < 0.0 || ev.t > horizon {
                return Err(PathError::TimestampOutOfRange {
                    path_id,
                    t: ev.t,
                    horizon,
                });
            }
            if ev.type_idx >= catalog.n_types() {
                return Err(PathError::UnknownTypeIndex {
                    path_id,
                    type_idx: ev.type_idx,
                });
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        for w in events.windows(2) {
            if w[0].t == w[1].t {
                return Err(PathError::DuplicateTimestamp { path_id, t: w[0].t });
            }
        }
        Ok(Self {
            path_id,
            horizon,
            events,
        })
    }

    pub fn path_id(&self) -> &str {
        &self.path_id
    }

    /// Observation length `T` in days.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Whether any conversion event occurs on the path.
    pub fn is_positive(&self, catalog: &EventCatalog) -> bool {
        let conv = catalog.conversion();
        self.events.iter().any(|e| e.type_idx == conv)
    }

    /// Positions of all conversion events, in time order.
    pub fn conversions(&self, catalog: &EventCatalog) -> Vec<usize> {
        let conv = catalog.conversion();
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.type_idx == conv)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Events strictly before `t` whose type belongs to `labels`, order preserved.
pub fn truncate_before(path: &Path, t: f64, labels: &BTreeSet<usize>) -> Vec<Event> {
    path.events()
        .iter()
        .take_while(|e| e.t < t)
        .filter(|e| labels.contains(&e.type_idx))
        .copied()
        .collect()
}

/// A set of event positions to delete, scored against one target conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovalSet {
    indices: BTreeSet<usize>,
    target: usize,
}

#[derive(Debug, Error)]
pub enum RemovalSetError {
    #[error("target position {target} is not a conversion event")]
    TargetNotConversion { target: usize },
    #[error("target position {target} out of bounds for path of length {len}")]
    TargetOutOfBounds { target: usize, len: usize },
    #[error("removal position {pos} does not precede the target conversion {target}")]
    PositionNotBeforeTarget { pos: usize, target: usize },
}

impl RemovalSet {
    /// Validate positions against a path: all members must strictly precede
    /// the target conversion. The set may be empty (the empty set has a
    /// direct removal effect of zero); total-effect scoring rejects it.
    pub fn new(
        indices: BTreeSet<usize>,
        target: usize,
        path: &Path,
        catalog: &EventCatalog,
    ) -> Result<Self, RemovalSetError> {
        if target >= path.len() {
            return Err(RemovalSetError::TargetOutOfBounds {
                target,
                len: path.len(),
            });
        }
        if path.events()[target].type_idx != catalog.conversion() {
            return Err(RemovalSetError::TargetNotConversion { target });
        }
        if let Some(&pos) = indices.iter().find(|&&pos| pos >= target) {
            return Err(RemovalSetError::PositionNotBeforeTarget { pos, target });
        }
        Ok(Self { indices, target })
    }

    pub fn indices(&self) -> &BTreeSet<usize> {
        &self.indices
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.indices.contains(&pos)
    }

    /// Smallest removed position, the thinning start marker.
    pub fn min_index(&self) -> Option<usize> {
        self.indices.iter().next().copied()
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed json: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: unknown event type `{name}`")]
    UnknownType { line: usize, name: String },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: PathError },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    t: f64,
    e: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathRecord {
    path_id: String,
    #[serde(rename = "T")]
    horizon: f64,
    events: Vec<EventRecord>,
}

/// Read paths from a JSON Lines stream, one path per line.
///
/// Blank lines are skipped. Event type names are resolved against the
/// catalog; events may arrive unsorted, but duplicate timestamps within a
/// path are fatal.
pub fn load_paths(source: impl BufRead, catalog: &EventCatalog) -> Result<Vec<Path>, IngestError> {
    let mut paths = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PathRecord =
            serde_json::from_str(&line).map_err(|source| IngestError::Malformed {
                line: line_no,
                source,
            })?;
        let mut events = Vec::with_capacity(record.events.len());
        for ev in &record.events {
            let type_idx = catalog
                .type_index(&ev.e)
                .ok_or_else(|| IngestError::UnknownType {
                    line: line_no,
                    name: ev.e.clone(),
                })?;
            events.push(Event { t: ev.t, type_idx });
        }
        let path =
            Path::new(record.path_id, record.horizon, events, catalog).map_err(|source| {
                IngestError::Invalid {
                    line: line_no,
                    source,
                }
            })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Serialize one path to its canonical JSONL form.
pub fn path_to_json(path: &Path, catalog: &EventCatalog) -> String {
    let record = PathRecord {
        path_id: path.path_id().to_string(),
        horizon: path.horizon(),
        events: path
            .events()
            .iter()
            .map(|e| EventRecord {
                t: e.t,
                e: catalog.type_name(e.type_idx).to_string(),
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("path serialization cannot fail")
}

/// Write paths as JSON Lines.
pub fn write_paths(
    out: &mut impl std::io::Write,
    paths: &[Path],
    catalog: &EventCatalog,
) -> std::io::Result<()> {
    for path in paths {
        writeln!(out, "{}", path_to_json(path, catalog))?;
    }
    Ok(())
}
