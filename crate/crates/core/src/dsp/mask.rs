use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::ComplexSpectrogram;
use crate::error::{Error, Result};

/// Floor applied to every magnitude used as a divisor.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Magnitude mask |M| and phase residual ∠M over a T×F grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    frames: usize,
    bins: usize,
    magnitude: Vec<f64>,
    phase_residual: Vec<f64>,
}

impl MaskPair {
    pub fn new(
        frames: usize,
        bins: usize,
        magnitude: Vec<f64>,
        phase_residual: Vec<f64>,
    ) -> Result<Self> {
        let n = frames * bins;
        if magnitude.len() != n || phase_residual.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask of {}/{} values for {frames}x{bins}",
                magnitude.len(),
                phase_residual.len()
            )));
        }
        if magnitude.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::NonFinite("mask magnitude".into()));
        }
        if phase_residual.iter().any(|p| !p.is_finite() || p.abs() > PI) {
            return Err(Error::NonFinite("mask phase".into()));
        }
        Ok(Self {
            frames,
            bins,
            magnitude,
            phase_residual,
        })
    }

    /// |M| = 1, ∠M = 0.
    pub fn unit(frames: usize, bins: usize) -> Self {
        Self::constant(frames, bins, 1.0, 0.0)
    }

    pub fn constant(frames: usize, bins: usize, magnitude: f64, phase: f64) -> Self {
        Self {
            frames,
            bins,
            magnitude: vec![magnitude; frames * bins],
            phase_residual: vec![phase; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn phase_residual(&self) -> &[f64] {
        &self.phase_residual
    }

    pub fn set(&mut self, frame: usize, bin: usize, magnitude: f64, phase: f64) {
        let i = frame * self.bins + bin;
        self.magnitude[i] = magnitude;
        self.phase_residual[i] = phase;
    }
}

/// Ŝ = |M| ⊙ |X| e^{j(∠X + ∠M)}.
pub fn apply_mask(spec: &ComplexSpectrogram, mask: &MaskPair) -> Result<ComplexSpectrogram> {
    if spec.frames() != mask.frames || spec.bins() != mask.bins {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {}x{} vs mask {}x{}",
            spec.frames(),
            spec.bins(),
            mask.frames,
            mask.bins
        )));
    }
    let mut out = spec.clone();
    for ((s, m), p) in out
        .data_mut()
        .iter_mut()
        .zip(&mask.magnitude)
        .zip(&mask.phase_residual)
    {
        // Rotating X itself is the same as |X| e^{j(∠X + ∠M)}.
        *s = *s * Complex64::from_polar(*m, *p);
    }
    Ok(out)
}

/// Wraps an angle into [-π, π].
pub(crate) fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w < -PI {
        -PI
    } else {
        w
    }
}

/// Oracle mask taking `mix` to `target`, magnitude clamped to `[0, ceiling]`.
pub fn ideal_mask(
    mix: &ComplexSpectrogram,
    target: &ComplexSpectrogram,
    ceiling: f64,
) -> Result<MaskPair> {
    if mix.frames() != target.frames() || mix.bins() != target.bins() {
        return Err(Error::ShapeMismatch(format!(
            "mixture {}x{} vs target {}x{}",
            mix.frames(),
            mix.bins(),
            target.frames(),
            target.bins()
        )));
    }
    let (magnitude, phase_residual) = mix
        .data()
        .iter()
        .zip(target.data())
        .map(|(x, s)| {
            let m = (s.norm() / x.norm().max(MAGNITUDE_FLOOR)).clamp(0.0, ceiling);
            let p = if s.norm() == 0.0 || x.norm() == 0.0 {
                0.0
            } else {
                wrap_phase(s.arg() - x.arg())
            };
            (m, p)
        })
        .unzip();
    Ok(MaskPair {
        frames: mix.frames(),
        bins: mix.bins(),
        magnitude,
        phase_residual,
    })
}
