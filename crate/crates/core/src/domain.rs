//! Core value types shared by every other module.
//!
//! Everything here is an immutable value once constructed and validated, so
//! it can be cloned freely and sent across threads.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Real-time floor for a mode's throughput: the camera feed runs at 25 fps.
pub const REALTIME_MIN_FPS: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("mode {mode}: {reason}")]
    InvalidMode { mode: ModeId, reason: String },
    #[error("duplicate profile for mode {0}")]
    DuplicateMode(ModeId),
    #[error("policy `{0}` has no bands")]
    EmptyPolicy(String),
    #[error("policy `{policy}`: top band must end at 100%, found {found}")]
    TopNotFull { policy: String, found: f64 },
    #[error("policy `{policy}`: bottom band must start at 0%, found {found}")]
    BottomNotEmpty { policy: String, found: f64 },
    #[error("policy `{policy}`: band ({lower}, {upper}] is empty or inverted")]
    InvertedBand { policy: String, lower: f64, upper: f64 },
    #[error("policy `{policy}`: gap between {lower}% and {upper}%")]
    Gap { policy: String, lower: f64, upper: f64 },
    #[error("policy `{policy}`: bands overlap between {lower}% and {upper}%")]
    Overlap { policy: String, lower: f64, upper: f64 },
    #[error("policy `{policy}` references unknown mode {mode}")]
    UnknownMode { policy: String, mode: ModeId },
    #[error("battery is depleted (0%): no band applies")]
    BatteryDepleted,
    #[error("battery percentage {0} outside (0, 100]")]
    PercentOutOfRange(f64),
    #[error("invalid battery: {0}")]
    InvalidBattery(String),
    #[error("confusion matrix: {0}")]
    InvalidMatrix(String),
    #[error("prediction record: {0}")]
    InvalidRecord(String),
}

/// Index of an operating mode in the active configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeId(pub u8);

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cost and quality parameters of one deployable model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeProfile {
    pub mode_id: ModeId,
    pub model_name: String,
    pub model_size_mb: f64,
    pub gpu_power_w: f64,
    pub device_power_w: f64,
    pub throughput_fps: f64,
    pub accuracy_pct: f64,
    pub f1_pct: f64,
}

impl ModeProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |reason: String| DomainError::InvalidMode {
            mode: self.mode_id,
            reason,
        };
        for (name, v) in [
            ("model_size_mb", self.model_size_mb),
            ("gpu_power_w", self.gpu_power_w),
            ("device_power_w", self.device_power_w),
            ("throughput_fps", self.throughput_fps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(fail(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("accuracy_pct", self.accuracy_pct), ("f1_pct", self.f1_pct)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(fail(format!("{name} must be within [0, 100], got {v}")));
            }
        }
        if self.gpu_power_w > self.device_power_w {
            return Err(fail(format!(
                "gpu power {} W exceeds device power {} W",
                self.gpu_power_w, self.device_power_w
            )));
        }
        if self.throughput_fps < REALTIME_MIN_FPS {
            return Err(fail(format!(
                "throughput {} fps is below the real-time floor of {REALTIME_MIN_FPS} fps",
                self.throughput_fps
            )));
        }
        Ok(())
    }
}

/// Validated set of mode profiles, indexable by [`ModeId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTable {
    profiles: Vec<ModeProfile>,
}

impl ModeTable {
    pub fn new(mut profiles: Vec<ModeProfile>) -> Result<Self, DomainError> {
        profiles.sort_by_key(|p| p.mode_id);
        for w in profiles.windows(2) {
            if w[0].mode_id == w[1].mode_id {
                return Err(DomainError::DuplicateMode(w[0].mode_id));
            }
        }
        for p in &profiles {
            p.validate()?;
        }
        Ok(Self { profiles })
    }

    pub fn get(&self, mode: ModeId) -> Option<&ModeProfile> {
        self.profiles
            .binary_search_by_key(&mode, |p| p.mode_id)
            .ok()
            .map(|i| &self.profiles[i])
    }

    pub fn contains(&self, mode: ModeId) -> bool {
        self.get(mode).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModeProfile> {
        self.profiles.iter()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// One battery band `(lower_pct, upper_pct]` mapped to a mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub mode: ModeId,
}

impl Band {
    pub fn contains(&self, pct: f64) -> bool {
        self.lower_pct < pct && pct <= self.upper_pct
    }

    /// Fraction of the battery capacity this band spans.
    pub fn width_fraction(&self) -> f64 {
        (self.upper_pct - self.lower_pct) / 100.0
    }
}

/// Battery-percentage bands, highest band first, mapping charge to a mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub name: String,
    pub bands: Vec<Band>,
}

impl Policy {
    /// A policy that keeps one mode over the whole battery range.
    pub fn constant(name: impl Into<String>, mode: ModeId) -> Self {
        Self {
            name: name.into(),
            bands: vec![Band {
                lower_pct: 0.0,
                upper_pct: 100.0,
                mode,
            }],
        }
    }

    /// Index of the band containing `battery_pct`.
    pub fn band_index(&self, battery_pct: f64) -> Result<usize, DomainError> {
        if battery_pct == 0.0 {
            return Err(DomainError::BatteryDepleted);
        }
        if !(battery_pct > 0.0 && battery_pct <= 100.0) {
            return Err(DomainError::PercentOutOfRange(battery_pct));
        }
        self.bands
            .iter()
            .position(|b| b.contains(battery_pct))
            .ok_or(DomainError::PercentOutOfRange(battery_pct))
    }

    /// Mode selected at `battery_pct`. Bands are `(lower, upper]`, so 50% lands
    /// in a band written as `(25, 50]`.
    pub fn band_for(&self, battery_pct: f64) -> Result<ModeId, DomainError> {
        self.band_index(battery_pct).map(|i| self.bands[i].mode)
    }

    /// First band index in which `mode` is active, if the policy uses it at all.
    pub fn first_band_of(&self, mode: ModeId) -> Option<usize> {
        self.bands.iter().position(|b| b.mode == mode)
    }

    /// Mode the policy prescribes on a full battery.
    pub fn initial_mode(&self) -> Option<ModeId> {
        self.bands.first().map(|b| b.mode)
    }

    /// Number of adjacent band pairs whose modes differ.
    pub fn transition_count(&self) -> usize {
        self.bands.windows(2).filter(|w| w[0].mode != w[1].mode).count()
    }
}

/// Check coverage, ordering and mode references. Returns the policy unchanged
/// on success.
pub fn validate_policy(policy: Policy, modes: &ModeTable) -> Result<Policy, DomainError> {
    let name = || policy.name.clone();
    let first = policy.bands.first().ok_or_else(|| DomainError::EmptyPolicy(name()))?;
    if first.upper_pct != 100.0 {
        return Err(DomainError::TopNotFull {
            policy: name(),
            found: first.upper_pct,
        });
    }
    for band in &policy.bands {
        if !(band.lower_pct < band.upper_pct) {
            return Err(DomainError::InvertedBand {
                policy: name(),
                lower: band.lower_pct,
                upper: band.upper_pct,
            });
        }
        if !modes.contains(band.mode) {
            return Err(DomainError::UnknownMode {
                policy: name(),
                mode: band.mode,
            });
        }
    }
    for w in policy.bands.windows(2) {
        let (above, below) = (&w[0], &w[1]);
        if below.upper_pct < above.lower_pct {
            return Err(DomainError::Gap {
                policy: name(),
                lower: below.upper_pct,
                upper: above.lower_pct,
            });
        }
        if below.upper_pct > above.lower_pct {
            return Err(DomainError::Overlap {
                policy: name(),
                lower: above.lower_pct,
                upper: below.upper_pct,
            });
        }
    }
    let last = policy.bands.last().expect("non-empty");
    if last.lower_pct != 0.0 {
        return Err(DomainError::BottomNotEmpty {
            policy: name(),
            found: last.lower_pct,
        });
    }
    Ok(policy)
}

/// Capacity and remaining energy of one node's battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    capacity_wh: f64,
    remaining_wh: f64,
}

impl BatteryState {
    pub fn full(capacity_wh: f64) -> Result<Self, DomainError> {
        Self::new(capacity_wh, capacity_wh)
    }

    pub fn new(capacity_wh: f64, remaining_wh: f64) -> Result<Self, DomainError> {
        if !(capacity_wh.is_finite() && capacity_wh > 0.0) {
            return Err(DomainError::InvalidBattery(format!(
                "capacity must be > 0 Wh, got {capacity_wh}"
            )));
        }
        if !(0.0..=capacity_wh).contains(&remaining_wh) {
            return Err(DomainError::InvalidBattery(format!(
                "remaining {remaining_wh} Wh outside [0, {capacity_wh}]"
            )));
        }
        Ok(Self {
            capacity_wh,
            remaining_wh,
        })
    }

    pub fn capacity_wh(&self) -> f64 {
        self.capacity_wh
    }

    pub fn remaining_wh(&self) -> f64 {
        self.remaining_wh
    }

    pub fn percentage(&self) -> f64 {
        100.0 * self.remaining_wh / self.capacity_wh
    }

    pub fn is_empty(&self) -> bool {
        self.remaining_wh <= 0.0
    }

    pub(crate) fn with_remaining(self, remaining_wh: f64) -> Self {
        Self {
            remaining_wh: remaining_wh.clamp(0.0, self.capacity_wh),
            ..self
        }
    }
}

/// Per-class outcome tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

/// K x K count grid; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Result<Self, DomainError> {
        if labels.is_empty() {
            return Err(DomainError::InvalidMatrix("needs at least one class".into()));
        }
        let k = labels.len();
        Ok(Self {
            labels,
            counts: vec![0; k * k],
        })
    }

    /// Build from explicit rows; labels default to the class indices.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, DomainError> {
        let k = rows.len();
        let labels = (0..k).map(|i| i.to_string()).collect();
        let mut cm = Self::new(labels)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(DomainError::InvalidMatrix(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            cm.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(cm)
    }

    /// Tally records by argmax decision.
    pub fn from_records(
        labels: Vec<String>,
        records: &[PredictionRecord],
    ) -> Result<Self, DomainError> {
        let mut cm = Self::new(labels)?;
        let k = cm.num_classes();
        for r in records {
            r.validate(k)?;
            cm.record(r.true_class, r.predicted_class());
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.num_classes() + predicted]
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        let k = self.num_classes();
        self.counts[true_class * k + predicted] += 1;
    }

    pub fn row(&self, true_class: usize) -> &[u64] {
        let k = self.num_classes();
        &self.counts[true_class * k..(true_class + 1) * k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }
}

/// One classified sample: its true class and the per-class confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    #[serde(rename = "true")]
    pub true_class: usize,
    pub confidences: Vec<f64>,
}

impl PredictionRecord {
    pub fn validate(&self, num_classes: usize) -> Result<(), DomainError> {
        if self.confidences.len() != num_classes {
            return Err(DomainError::InvalidRecord(format!(
                "{} confidences for {num_classes} classes",
                self.confidences.len()
            )));
        }
        if self.true_class >= num_classes {
            return Err(DomainError::InvalidRecord(format!(
                "true class {} out of range 0..{num_classes}",
                self.true_class
            )));
        }
        if let Some(c) = self.confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(DomainError::InvalidRecord(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// Argmax of the confidences; ties go to the lowest class index.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.confidences.iter().enumerate() {
            if c > self.confidences[best] {
                best = i;
            }
        }
        best
    }
}

/// Periodic node report. Carries qualities and the latest recognized label,
/// never frame data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetrySample {
    pub node_id: String,
    pub timestamp_ms: u64,
    pub mode: ModeId,
    pub gpu_power_w: f64,
    pub device_power_w: f64,
    pub temperature_c: f64,
    pub fps: f64,
    pub battery_pct: f64,
    /// Most recent recognized action; empty until the first batch completes.
    pub label: String,
    pub confidence: f64,
}

/// Collector-to-node instruction to switch operating mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconfigCommand {
    pub command_id: u64,
    pub node_id: String,
    pub target_mode: ModeId,
    pub issued_at_ms: u64,
}
