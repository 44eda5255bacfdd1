//! Waveform signatures: one-period extraction, range normalization,
//! phase-sliding expansion and rational-rate decimation.

mod decimate;

pub use decimate::{apply_decimation, design_decimation, kaiser_beta, resample, DecimationPlan};

use crate::dataio::Measurement;
use crate::error::{Error, Result};

const RATIO_TOLERANCE: f64 = 1e-9;

/// Number of samples in one grid period, `fs / fg`. Only integral ratios are
/// accepted.
pub fn samples_per_period(sample_rate_hz: f64, grid_freq_hz: f64) -> Result<usize> {
    if !(sample_rate_hz.is_finite() && grid_freq_hz.is_finite())
        || sample_rate_hz <= 0.0
        || grid_freq_hz <= 0.0
    {
        return Err(Error::domain(format!(
            "sampling and grid frequency must be positive, got {sample_rate_hz} / {grid_freq_hz}"
        )));
    }
    let ratio = sample_rate_hz / grid_freq_hz;
    let d = ratio.round();
    if d < 1.0 || (ratio - d).abs() > RATIO_TOLERANCE * ratio {
        return Err(Error::domain(format!(
            "{sample_rate_hz} Hz / {grid_freq_hz} Hz = {ratio} samples per period is not an integer"
        )));
    }
    Ok(d as usize)
}

/// A segment mapped affinely onto [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSegment {
    pub values: Vec<f64>,
    /// Set when the input was constant; `values` are then all zero.
    pub degenerate: bool,
}

/// Maps `seg` onto [-1, 1] so that its maximum lands on +1 and its minimum on -1.
pub fn normalize_segment(seg: &[f64]) -> NormalizedSegment {
    let (min, max) = seg
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    if seg.is_empty() || span.is_nan() || span <= 0.0 {
        return NormalizedSegment {
            values: vec![0.0; seg.len()],
            degenerate: true,
        };
    }
    // (2s - (max + min)) / span, arranged so the extremes map to exactly +-1
    let values = seg
        .iter()
        .map(|&s| ((s - min) - (max - s)) / span)
        .collect();
    NormalizedSegment {
        values,
        degenerate: false,
    }
}

/// One period of both channels starting at sample `origin_tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub current_segment: Vec<f64>,
    pub voltage_segment: Vec<f64>,
    pub origin_tau: usize,
    pub period_len: usize,
}

pub fn extract_segment(m: &Measurement, tau: usize, d: usize) -> Result<SegmentPair> {
    let end = tau.checked_add(d).filter(|&e| e <= m.len() && d > 0);
    let Some(end) = end else {
        return Err(Error::Bounds {
            index: 0,
            start: tau,
            period: d,
            len: m.len(),
        });
    };
    Ok(SegmentPair {
        current_segment: m.current[tau..end].to_vec(),
        voltage_segment: m.voltage[tau..end].to_vec(),
        origin_tau: tau,
        period_len: d,
    })
}

/// Network input: normalized current period followed by normalized voltage
/// period, `2d` values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: String,
    pub house_id: i64,
    pub origin_tau: usize,
    /// Either channel was constant over the window.
    pub degenerate: bool,
}

pub fn build_feature(m: &Measurement, tau: usize, d: usize) -> Result<FeatureVector> {
    let seg = extract_segment(m, tau, d)?;
    let i_hat = normalize_segment(&seg.current_segment);
    let v_hat = normalize_segment(&seg.voltage_segment);
    let mut values = i_hat.values;
    values.extend_from_slice(&v_hat.values);
    Ok(FeatureVector {
        values,
        label: m.category.clone(),
        house_id: m.house_id,
        origin_tau: tau,
        degenerate: i_hat.degenerate || v_hat.degenerate,
    })
}

/// Features at phases `tau0 + i*epsilon` for `0 <= i < floor(d / epsilon)`.
pub fn expand_measurement(
    m: &Measurement,
    tau0: usize,
    epsilon: usize,
    d: usize,
) -> Result<Vec<FeatureVector>> {
    if epsilon == 0 || d == 0 {
        return Err(Error::domain("sliding step and period must be at least 1"));
    }
    (0..d / epsilon)
        .map(|i| {
            let tau = tau0 + i * epsilon;
            if tau + d > m.len() {
                return Err(Error::Bounds {
                    index: i,
                    start: tau,
                    period: d,
                    len: m.len(),
                });
            }
            build_feature(m, tau, d)
        })
        .collect()
}

/// Start of the final two-period window of a recording.
pub fn steady_state_window(m: &Measurement, d: usize) -> Result<usize> {
    m.len().checked_sub(2 * d).ok_or(Error::Length {
        len: m.len(),
        min: 2 * d,
    })
}
