use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};

/// Minimum squared-window sum accepted by the overlap-add normalization.
const COLA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
    pub center_pad: bool,
}

impl Default for StftConfig {
    /// 1024-sample Hann window, hop 320, reflect-padded frames.
    fn default() -> Self {
        Self::new(1024, 320)
    }
}

impl StftConfig {
    pub fn new(window_size: usize, hop_size: usize) -> Self {
        Self {
            window_size,
            hop_size,
            window: WindowKind::Hann,
            center_pad: true,
        }
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.window_size % 2 != 0 {
            return Err(Error::InvalidStftConfig(format!(
                "window size {} must be even and at least 2",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::InvalidStftConfig(format!(
                "hop size {} must lie in 1..={}",
                self.hop_size, self.window_size
            )));
        }
        let floor = self.min_overlap_sum();
        if floor < COLA_FLOOR {
            return Err(Error::InvalidStftConfig(format!(
                "window/hop pair violates overlap-add (min squared-window sum {floor:e})"
            )));
        }
        Ok(())
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        let n = self.window_size as f64;
        match self.window {
            WindowKind::Hann => (0..self.window_size)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                .collect(),
        }
    }

    /// Smallest steady-state value of the summed squared window over one hop period.
    pub fn min_overlap_sum(&self) -> f64 {
        let w = self.window_coefficients();
        (0..self.hop_size)
            .map(|phase| {
                w.iter()
                    .skip(phase)
                    .step_by(self.hop_size)
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn pad(&self) -> usize {
        if self.center_pad {
            self.window_size / 2
        } else {
            0
        }
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.pad();
        let min = if self.center_pad {
            self.window_size / 2 + 1
        } else {
            self.window_size
        };
        if len < min || padded < self.window_size {
            return Err(Error::TooShort { len, min });
        }
        Ok(1 + (padded - self.window_size) / self.hop_size)
    }
}

/// T×F complex matrix stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    frames: usize,
    config: StftConfig,
    source_len: usize,
}

impl ComplexSpectrogram {
    pub fn from_parts(
        data: Vec<Complex64>,
        frames: usize,
        config: StftConfig,
        source_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        if data.len() != frames * config.bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} frames x {} bins",
                data.len(),
                frames,
                config.bins()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(Self {
            data,
            frames,
            config,
            source_len,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); self.data.len()],
            ..self.clone()
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins() + bin]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Reusable window and FFT plans for one configuration.
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window_coefficients(),
            forward: planner.plan_fft_forward(config.window_size),
            inverse: planner.plan_fft_inverse(config.window_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn analyze(&self, clip: &AudioClip) -> Result<ComplexSpectrogram> {
        let x = clip.samples();
        if x.is_empty() {
            return Err(Error::EmptySignal);
        }
        if let Some(i) = x.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        let cfg = &self.config;
        let frames = cfg.frame_count(x.len())?;
        let padded = reflect_pad(x, cfg.pad());
        let n = cfg.window_size;
        let bins = cfg.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * cfg.hop_size;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(ComplexSpectrogram {
            data,
            frames,
            config: *cfg,
            source_len: x.len(),
        })
    }

    fn overlap_sums(&self, frames: usize) -> Vec<f64> {
        let cfg = &self.config;
        let total = (frames - 1) * cfg.hop_size + cfg.window_size;
        let mut wsum = vec![0.0; total];
        for t in 0..frames {
            let start = t * cfg.hop_size;
            for (i, w) in self.window.iter().enumerate() {
                wsum[start + i] += w * w;
            }
        }
        wsum
    }

    /// Output-sample denominators for `source_len` samples, checked against the floor.
    fn checked_denominators(&self, frames: usize, source_len: usize) -> Result<Vec<f64>> {
        let pad = self.config.pad();
        let wsum = self.overlap_sums(frames);
        (0..source_len)
            .map(|i| {
                let v = wsum.get(pad + i).copied().unwrap_or(0.0);
                if v < COLA_FLOOR {
                    Err(Error::ColaViolation { index: i, value: v })
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    /// Inverse of [`StftPlan::analyze`] over raw frame data (`frames × bins`).
    pub fn synthesize(
        &self,
        data: &[Complex64],
        frames: usize,
        source_len: usize,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let n = cfg.window_size;
        let bins = cfg.bins();
        if frames == 0 || data.len() != frames * bins {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} frames x {} bins",
                data.len(),
                frames,
                bins
            )));
        }
        let denom = self.checked_denominators(frames, source_len)?;
        let pad = cfg.pad();
        let mut acc = vec![0.0; (frames - 1) * cfg.hop_size + n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for t in 0..frames {
            hermitian_fill(&data[t * bins..(t + 1) * bins], &mut buf);
            self.inverse.process(&mut buf);
            let start = t * cfg.hop_size;
            for i in 0..n {
                acc[start + i] += buf[i].re * scale * self.window[i];
            }
        }
        Ok((0..source_len).map(|i| acc[pad + i] / denom[i]).collect())
    }

    /// Transpose of [`StftPlan::synthesize`] viewed as a real-linear map from
    /// (re, im) frame data to samples.
    pub fn synthesize_adjoint(
        &self,
        grad: &[f64],
        frames: usize,
    ) -> Result<Vec<Complex64>> {
        let cfg = &self.config;
        let n = cfg.window_size;
        let bins = cfg.bins();
        let source_len = grad.len();
        let denom = self.checked_denominators(frames, source_len)?;
        let pad = cfg.pad();
        let mut g = vec![0.0; (frames - 1) * cfg.hop_size + n];
        for i in 0..source_len {
            g[pad + i] = grad[i] / denom[i];
        }
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for t in 0..frames {
            let start = t * cfg.hop_size;
            for i in 0..n {
                buf[i] = Complex64::new(g[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (k, v) in buf[..bins].iter().enumerate() {
                if k == 0 || k == n / 2 {
                    out.push(Complex64::new(v.re * inv_n, 0.0));
                } else {
                    out.push(*v * (2.0 * inv_n));
                }
            }
        }
        Ok(out)
    }
}

/// Expands a half spectrum into a full Hermitian buffer. The imaginary parts
/// of the DC and Nyquist bins are ignored.
fn hermitian_fill(half: &[Complex64], full: &mut [Complex64]) {
    let n = full.len();
    full[0] = Complex64::new(half[0].re, 0.0);
    full[n / 2] = Complex64::new(half[n / 2].re, 0.0);
    for k in 1..n / 2 {
        full[k] = half[k];
        full[n - k] = half[k].conj();
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let len = x.len();
    let mut out = Vec::with_capacity(len + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[len - 2 - i]));
    out
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    StftPlan::new(*cfg)?.analyze(clip)
}

/// Returns exactly `spec.source_len()` samples at the given rate.
pub fn istft(spec: &ComplexSpectrogram, sample_rate: u32) -> Result<AudioClip> {
    let plan = StftPlan::new(spec.config)?;
    let samples = plan.synthesize(&spec.data, spec.frames, spec.source_len)?;
    AudioClip::new(samples, sample_rate)
}

/// Adjoint of [`istft`] for a waveform gradient of length `source_len`.
pub fn istft_adjoint(grad: &[f64], cfg: &StftConfig, frames: usize) -> Result<Vec<Complex64>> {
    StftPlan::new(*cfg)?.synthesize_adjoint(grad, frames)
}
