use std::f64::consts::PI;

use num_integer::Integer;

use crate::dataio::Measurement;
use crate::error::{Error, Result};
use crate::signal::samples_per_period;

/// Stopband attenuation of the anti-aliasing filter, dB.
pub const STOPBAND_ATTENUATION_DB: f64 = 60.0;
/// Transition width as a fraction of the output Nyquist frequency.
pub const TRANSITION_FRACTION: f64 = 0.1;

const MAX_FACTOR: u64 = 10_000;

/// Rational resampling by `up / down` with a linear-phase low-pass FIR.
#[derive(Debug, Clone, PartialEq)]
pub struct DecimationPlan {
    pub up_factor: usize,
    pub down_factor: usize,
    /// Symmetric, odd-length taps at the upsampled rate, DC gain `up_factor`.
    pub fir_taps: Vec<f64>,
    pub input_rate_hz: f64,
}

impl DecimationPlan {
    pub fn output_rate_hz(&self) -> f64 {
        self.input_rate_hz * self.up_factor as f64 / self.down_factor as f64
    }

    pub fn group_delay(&self) -> usize {
        (self.fir_taps.len() - 1) / 2
    }
}

/// Kaiser window shape parameter for a given stopband attenuation.
pub fn kaiser_beta(attenuation_db: f64) -> f64 {
    if attenuation_db > 50.0 {
        0.1102 * (attenuation_db - 8.7)
    } else if attenuation_db >= 21.0 {
        0.5842 * (attenuation_db - 21.0).powf(0.4) + 0.07886 * (attenuation_db - 21.0)
    } else {
        0.0
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let norm = bessel_i0(beta);
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect()
}

/// Best rational approximation `p/q` of `x` with `q <= max_den`, by continued
/// fractions.
fn rational_approx(x: f64, max_den: u64) -> (u64, u64) {
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    let mut v = x;
    for _ in 0..64 {
        let a = v.floor();
        let a_int = a as u64;
        let p2 = a_int.saturating_mul(p1).saturating_add(p0);
        let q2 = a_int.saturating_mul(q1).saturating_add(q0);
        if q2 > max_den {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let frac = v - a;
        if frac.abs() < 1e-12 {
            break;
        }
        v = 1.0 / frac;
    }
    (p1, q1)
}

/// Designs an up/down resampler from `fs_in` to `fs_out < fs_in`.
///
/// The low-pass is a Kaiser-windowed sinc at the upsampled rate. Its stopband
/// begins at the output Nyquist frequency and the transition band is
/// `TRANSITION_FRACTION` of that Nyquist wide.
pub fn design_decimation(fs_in: f64, fs_out: f64) -> Result<DecimationPlan> {
    if !(fs_in.is_finite() && fs_out.is_finite()) || fs_out <= 0.0 || fs_out >= fs_in {
        return Err(Error::domain(format!(
            "decimation needs 0 < output rate < input rate, got {fs_in} Hz -> {fs_out} Hz"
        )));
    }
    let ratio = fs_out / fs_in;
    let (up, down) = rational_approx(ratio, MAX_FACTOR);
    if up == 0 || ((up as f64 / down as f64) - ratio).abs() > 1e-9 * ratio {
        return Err(Error::domain(format!(
            "{fs_out} / {fs_in} has no rational form with factors up to {MAX_FACTOR}"
        )));
    }
    let g = up.gcd(&down);
    let (up, down) = ((up / g) as usize, (down / g) as usize);

    let fs_up = fs_in * up as f64;
    let nyquist_out = fs_in.min(fs_out) / 2.0;
    let transition = TRANSITION_FRACTION * nyquist_out;
    let cutoff = (nyquist_out - transition / 2.0) / fs_up; // cycles per upsampled sample
    let delta_omega = 2.0 * PI * transition / fs_up;
    let mut len = ((STOPBAND_ATTENUATION_DB - 8.0) / (2.285 * delta_omega)).ceil() as usize + 1;
    if len.is_multiple_of(2) {
        len += 1;
    }
    let window = kaiser_window(len, kaiser_beta(STOPBAND_ATTENUATION_DB));
    let centre = (len - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = window
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let x = n as f64 - centre;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * x).sin() / (PI * x)
            };
            w * sinc
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    let gain = up as f64 / dc;
    taps.iter_mut().for_each(|t| *t *= gain);
    // exact symmetry regardless of rounding in the window
    for n in 0..len / 2 {
        let avg = 0.5 * (taps[n] + taps[len - 1 - n]);
        taps[n] = avg;
        taps[len - 1 - n] = avg;
    }

    Ok(DecimationPlan {
        up_factor: up,
        down_factor: down,
        fir_taps: taps,
        input_rate_hz: fs_in,
    })
}

/// Filters and resamples one channel. The output is aligned to the input by
/// compensating the filter's group delay; samples whose filter support reaches
/// past either end of the input are dropped.
pub fn resample(x: &[f64], plan: &DecimationPlan) -> Vec<f64> {
    let up = plan.up_factor;
    let down = plan.down_factor;
    let taps = &plan.fir_taps;
    let delay = plan.group_delay();
    let upsampled_len = x.len() * up;
    if upsampled_len < taps.len() {
        return Vec::new();
    }
    let first = delay.div_ceil(down);
    let last = (upsampled_len - 1 - delay) / down;
    if last < first {
        return Vec::new();
    }
    (first..=last)
        .map(|k| {
            // y[k] = sum_n h[n] * x_up[k*down + delay - n], x_up nonzero only at multiples of `up`
            let t = k * down + delay;
            let mut acc = 0.0;
            let mut n = t % up;
            while n < taps.len() {
                acc += taps[n] * x[(t - n) / up];
                n += up;
            }
            acc
        })
        .collect()
}

/// Decimates both channels of a recording with the same plan.
pub fn apply_decimation(m: &Measurement, plan: &DecimationPlan) -> Result<Measurement> {
    if (plan.input_rate_hz - m.sample_rate_hz).abs() > 1e-9 * m.sample_rate_hz {
        return Err(Error::domain(format!(
            "plan designed for {} Hz applied to a {} Hz recording",
            plan.input_rate_hz, m.sample_rate_hz
        )));
    }
    let fs_out = plan.output_rate_hz();
    samples_per_period(fs_out, m.grid_freq_hz)?;
    Measurement::new(
        resample(&m.current, plan),
        resample(&m.voltage, plan),
        fs_out,
        m.grid_freq_hz,
        m.meta(),
    )
}
