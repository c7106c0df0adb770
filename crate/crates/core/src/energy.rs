//! Piecewise-linear battery discharge and the closed-form policy evaluator.
//!
//! Each mode draws its average device power for as long as it is active, so
//! a policy's working time is the sum over its bands of
//! `capacity * band_fraction / power`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BatteryState, ModeId, ModeProfile, ModeTable, Policy};
use crate::metrics::{self, MetricsError, TimedSegment};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("power must be > 0 W, got {0}")]
    NonPositivePower(f64),
    #[error("duration must be >= 0 s, got {0}")]
    NegativeDuration(f64),
    #[error("threshold {threshold}% is above the current charge {current}%")]
    ThresholdAboveCurrent { threshold: f64, current: f64 },
    #[error("target working time must be > 0 h, got {0}")]
    NonPositiveHours(f64),
    #[error("policy `{policy}` uses mode {mode} which has no profile")]
    MissingProfile { policy: String, mode: ModeId },
    #[error("baseline working time is zero")]
    ZeroBaseline,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Drain `power_w` for `duration_s`, clamping at empty.
pub fn discharge(
    battery: BatteryState,
    power_w: f64,
    duration_s: f64,
) -> Result<BatteryState, EnergyError> {
    if !(power_w > 0.0) {
        return Err(EnergyError::NonPositivePower(power_w));
    }
    if !(duration_s >= 0.0) {
        return Err(EnergyError::NegativeDuration(duration_s));
    }
    let used = power_w * duration_s / SECONDS_PER_HOUR;
    Ok(battery.with_remaining(battery.remaining_wh() - used))
}

/// Seconds until the battery falls to `threshold_pct` at constant power.
pub fn time_to_threshold(
    battery: BatteryState,
    power_w: f64,
    threshold_pct: f64,
) -> Result<f64, EnergyError> {
    if !(power_w > 0.0) {
        return Err(EnergyError::NonPositivePower(power_w));
    }
    let current = battery.percentage();
    if threshold_pct > current {
        return Err(EnergyError::ThresholdAboveCurrent {
            threshold: threshold_pct,
            current,
        });
    }
    let target_wh = threshold_pct / 100.0 * battery.capacity_wh();
    Ok((battery.remaining_wh() - target_wh) * SECONDS_PER_HOUR / power_w)
}

/// Capacity that keeps `profile` running for exactly `target_hours`.
pub fn calibrate_capacity(profile: &ModeProfile, target_hours: f64) -> Result<f64, EnergyError> {
    if !(target_hours > 0.0) {
        return Err(EnergyError::NonPositiveHours(target_hours));
    }
    Ok(profile.device_power_w * target_hours)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySegment {
    pub mode: ModeId,
    pub duration_s: f64,
    pub energy_wh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub policy: String,
    pub capacity_wh: f64,
    pub total_working_time_s: f64,
    pub segments: Vec<EnergySegment>,
    pub weighted_f1_pct: f64,
    pub reconfiguration_count: usize,
}

impl ScenarioReport {
    pub fn display_time(&self) -> String {
        format_duration(self.total_working_time_s)
    }

    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(self).expect("report is plain data")
    }
}

/// Render seconds as `Hh MM'` with minutes rounded half up.
pub fn format_duration(seconds: f64) -> String {
    let minutes = (seconds / 60.0 + 0.5).floor() as u64;
    format!("{}h {:02}'", minutes / 60, minutes % 60)
}

/// Closed-form working time and time-weighted F1 of `policy`.
pub fn evaluate_policy(
    policy: &Policy,
    modes: &ModeTable,
    capacity_wh: f64,
) -> Result<ScenarioReport, EnergyError> {
    let mut segments = Vec::with_capacity(policy.bands.len());
    let mut timed = Vec::with_capacity(policy.bands.len());
    for band in &policy.bands {
        let profile = modes.get(band.mode).ok_or_else(|| EnergyError::MissingProfile {
            policy: policy.name.clone(),
            mode: band.mode,
        })?;
        let energy_wh = capacity_wh * band.width_fraction();
        let duration_s = energy_wh * SECONDS_PER_HOUR / profile.device_power_w;
        segments.push(EnergySegment {
            mode: band.mode,
            duration_s,
            energy_wh,
        });
        timed.push(TimedSegment {
            duration_s,
            f1_pct: profile.f1_pct,
        });
    }
    Ok(ScenarioReport {
        policy: policy.name.clone(),
        capacity_wh,
        total_working_time_s: segments.iter().map(|s| s.duration_s).sum(),
        weighted_f1_pct: metrics::time_weighted_f1(&timed)?,
        reconfiguration_count: policy.transition_count(),
        segments,
    })
}

/// Percentage by which `report` outlasts `baseline`.
pub fn extension_ratio(report: &ScenarioReport, baseline: &ScenarioReport) -> Result<f64, EnergyError> {
    if !(baseline.total_working_time_s > 0.0) {
        return Err(EnergyError::ZeroBaseline);
    }
    Ok(100.0 * (report.total_working_time_s - baseline.total_working_time_s)
        / baseline.total_working_time_s)
}

/// CSV with one row per report. With a baseline, `extension_pct` and
/// `f1_delta` columns are appended.
pub fn write_report_csv<W: Write>(
    mut out: W,
    reports: &[ScenarioReport],
    baseline: Option<&ScenarioReport>,
) -> io::Result<()> {
    write!(out, "scenario,total_seconds,display_time,weighted_f1,reconfig_count")?;
    if baseline.is_some() {
        write!(out, ",extension_pct,f1_delta")?;
    }
    writeln!(out)?;
    for r in reports {
        write!(
            out,
            "{},{:.3},{},{:.2},{}",
            metrics::csv_field(&r.policy),
            r.total_working_time_s,
            metrics::csv_field(&r.display_time()),
            r.weighted_f1_pct,
            r.reconfiguration_count
        )?;
        if let Some(b) = baseline {
            let ext = extension_ratio(r, b).unwrap_or(f64::NAN);
            write!(out, ",{:.2},{:.2}", ext, r.weighted_f1_pct - b.weighted_f1_pct)?;
        }
        writeln!(out)?;
    }
    Ok(())
}
