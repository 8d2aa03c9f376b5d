//! Gated integrated loudness of a mono signal (ITU-R BS.1770-4).
//!
//! The two K-weighting biquads are designed from their analog prototypes for
//! the clip's own sample rate, so no resampling to 48 kHz is needed.

use std::f64::consts::PI;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Loudness in LUFS; `f64::NEG_INFINITY` for a fully gated (silent) signal.
pub type Loudness = f64;

const BLOCK_SECONDS: f64 = 0.4;
const STEP_SECONDS: f64 = 0.1;
const ABSOLUTE_GATE: f64 = -70.0;
const RELATIVE_GATE: f64 = -10.0;
const OFFSET: f64 = -0.691;

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Stage 1: high shelf modelling the acoustic effect of the head.
    fn high_shelf(rate: f64) -> Self {
        let gain_db = 3.999_843_853_973_347;
        let q = 0.707_175_236_955_419_3;
        let fc = 1_681.974_450_955_531_9;
        let k = (PI * fc / rate).tan();
        let vh = 10f64.powf(gain_db / 20.0);
        let vb = vh.powf(0.499_666_774_154_541_6);
        let a0 = 1.0 + k / q + k * k;
        Self {
            b0: (vh + vb * k / q + k * k) / a0,
            b1: 2.0 * (k * k - vh) / a0,
            b2: (vh - vb * k / q + k * k) / a0,
            a1: 2.0 * (k * k - 1.0) / a0,
            a2: (1.0 - k / q + k * k) / a0,
        }
    }

    /// Stage 2: RLB high-pass.
    fn high_pass(rate: f64) -> Self {
        let q = 0.500_327_037_325_395_3;
        let fc = 38.135_470_876_139_82;
        let k = (PI * fc / rate).tan();
        let a0 = 1.0 + k / q + k * k;
        Self {
            b0: 1.0,
            b1: -2.0,
            b2: 1.0,
            a1: 2.0 * (k * k - 1.0) / a0,
            a2: (1.0 - k / q + k * k) / a0,
        }
    }

    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }

    #[cfg(test)]
    fn gain_at(&self, freq: f64, rate: f64) -> f64 {
        use rustfft::num_complex::Complex64;
        let z = Complex64::from_polar(1.0, -2.0 * PI * freq / rate);
        let num = self.b0 + self.b1 * z + self.b2 * z * z;
        let den = 1.0 + self.a1 * z + self.a2 * z * z;
        (num / den).norm()
    }
}

fn k_weighted(clip: &AudioClip) -> Vec<f64> {
    let rate = clip.sample_rate() as f64;
    let stage1 = Biquad::high_shelf(rate).filter(clip.samples());
    Biquad::high_pass(rate).filter(&stage1)
}

fn block_loudness(mean_square: f64) -> f64 {
    OFFSET + 10.0 * mean_square.log10()
}

/// Mean squares of the K-weighted 400 ms blocks with 75 % overlap.
fn block_powers(clip: &AudioClip) -> Result<Vec<f64>> {
    let rate = clip.sample_rate() as f64;
    let block = (BLOCK_SECONDS * rate).round() as usize;
    let step = (STEP_SECONDS * rate).round() as usize;
    if clip.len() < block || block == 0 || step == 0 {
        return Err(Error::TooShort {
            len: clip.len(),
            min: block.max(1),
        });
    }
    let z = k_weighted(clip);
    let count = (z.len() - block) / step + 1;
    Ok((0..count)
        .map(|j| {
            let s = &z[j * step..j * step + block];
            s.iter().map(|v| v * v).sum::<f64>() / block as f64
        })
        .collect())
}

pub fn integrated_loudness(clip: &AudioClip) -> Result<Loudness> {
    let powers = block_powers(clip)?;
    let above_abs: Vec<f64> = powers
        .into_iter()
        .filter(|&p| p > 0.0 && block_loudness(p) > ABSOLUTE_GATE)
        .collect();
    if above_abs.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let relative = block_loudness(mean(&above_abs)) + RELATIVE_GATE;
    let gated: Vec<f64> = above_abs
        .into_iter()
        .filter(|&p| block_loudness(p) > relative)
        .collect();
    if gated.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(block_loudness(mean(&gated)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Applies a single gain so the integrated loudness becomes `target`.
/// Returns the scaled clip and the gain.
pub fn normalize_to_loudness(clip: &AudioClip, target: Loudness) -> Result<(AudioClip, f64)> {
    let current = integrated_loudness(clip)?;
    if !current.is_finite() {
        return Err(Error::SilentSource);
    }
    let mut gain = 10f64.powf((target - current) / 20.0);
    // Block membership of the absolute gate can shift with the gain; refine.
    for _ in 0..3 {
        let measured = integrated_loudness(&clip.scaled(gain))?;
        let off = target - measured;
        if !measured.is_finite() || off.abs() < 1e-9 {
            break;
        }
        gain *= 10f64.powf(off / 20.0);
    }
    Ok((clip.scaled(gain), gain))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, rate: u32, secs: f64) -> AudioClip {
        let n = (rate as f64 * secs) as usize;
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn k_weighting_gain_at_997_hz() {
        // Independent check: evaluate both biquads' transfer functions on the unit circle.
        for rate in [32_000.0, 48_000.0] {
            let g = Biquad::high_shelf(rate).gain_at(997.0, rate) * Biquad::high_pass(rate).gain_at(997.0, rate);
            let db = 20.0 * g.log10();
            assert!((db - 0.691).abs() < 0.02, "{rate}: {db}");
        }
    }

    #[test]
    fn matches_published_48k_coefficients() {
        let s1 = Biquad::high_shelf(48_000.0);
        assert!((s1.b0 - 1.535_124_859_586_97).abs() < 1e-9);
        assert!((s1.a1 + 1.690_659_293_182_41).abs() < 1e-9);
        let s2 = Biquad::high_pass(48_000.0);
        assert!((s2.a1 + 1.990_047_454_833_85).abs() < 1e-9);
        assert!((s2.a2 - 0.990_072_250_366_21).abs() < 1e-9);
    }

    #[test]
    fn full_scale_sine_reads_minus_three() {
        // Mean square 0.5 with +0.691 dB of K-weighting gain at 997 Hz.
        let l = integrated_loudness(&sine(997.0, 1.0, 32_000, 5.0)).unwrap();
        assert!((l + 3.01).abs() < 0.05, "{l}");
    }

    #[test]
    fn half_amplitude_drops_six_db() {
        let a = integrated_loudness(&sine(997.0, 1.0, 32_000, 5.0)).unwrap();
        let b = integrated_loudness(&sine(997.0, 0.5, 32_000, 5.0)).unwrap();
        assert!((a - b - 20.0 * 2f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn silence_and_short_input() {
        assert_eq!(
            integrated_loudness(&AudioClip::zeros(16_000, 16_000)).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(matches!(
            integrated_loudness(&AudioClip::zeros(100, 16_000)),
            Err(Error::TooShort { .. })
        ));
        assert!(matches!(
            normalize_to_loudness(&AudioClip::zeros(16_000, 16_000), -30.0),
            Err(Error::SilentSource)
        ));
    }

    #[test]
    fn normalization_hits_target() {
        let clip = sine(440.0, 0.3, 16_000, 2.0);
        let current = integrated_loudness(&clip).unwrap();
        let (_, same) = normalize_to_loudness(&clip, current).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        let (at20, _) = normalize_to_loudness(&clip, -20.0).unwrap();
        let (at30, gain) = normalize_to_loudness(&at20, -30.0).unwrap();
        assert!((gain - 10f64.powf(-0.5)).abs() < 1e-6);
        for target in [-35.0, -25.0] {
            let (out, _) = normalize_to_loudness(&at30, target).unwrap();
            assert!((integrated_loudness(&out).unwrap() - target).abs() < 0.1);
        }
    }
}
