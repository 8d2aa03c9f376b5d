//! Synthetic two-class corpus: low tones versus band-limited high noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::corpus::LabeledClip;
use crate::dsp::wav::{write_wav, WavFormat};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const TONE_LABEL: &str = "tone";
pub const NOISE_LABEL: &str = "noise";
pub const TONE_RANGE_HZ: (f64, f64) = (200.0, 800.0);
pub const NOISE_BAND_HZ: (f64, f64) = (2000.0, 4000.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCorpusConfig {
    pub sample_rate: u32,
    pub clips_per_class: usize,
    pub clip_seconds: (f64, f64),
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            clips_per_class: 32,
            clip_seconds: (1.5, 3.0),
            seed: 0,
        }
    }
}

/// A sinusoid of random frequency in 200–800 Hz with random phase, a slow
/// amplitude drift and a 10 ms fade at both ends.
fn tone(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = rng.random_range(TONE_RANGE_HZ.0..TONE_RANGE_HZ.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.1..0.5);
    let drift = rng.random_range(0.2..1.5);
    let fade = (0.01 * rate) as usize;
    (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let env = 1.0 + 0.3 * (2.0 * PI * drift * t).sin();
            let edge = (i.min(len - 1 - i) as f64 / fade as f64).min(1.0);
            amp * env * edge * (2.0 * PI * f * t + phase).sin()
        })
        .collect()
}

/// White Gaussian noise restricted to the 2–4 kHz band in the frequency domain.
fn band_noise(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * rate / len as f64;
        if !(NOISE_BAND_HZ.0..=NOISE_BAND_HZ.1).contains(&f) {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let raw: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
    let amp = rng.random_range(0.05..0.3);
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())) * amp / rms;
    let gain = amp / rms * (0.9 / peak).min(1.0);
    raw.iter().map(|v| gain * v).collect()
}

/// Clips alternate tone/noise; each clip has its own derived seed.
pub fn synthesize_toy_clips(cfg: &ToyCorpusConfig) -> Result<Vec<LabeledClip>> {
    if cfg.clips_per_class == 0 {
        return Err(Error::InvalidConfig("clips_per_class must be positive".into()));
    }
    let rate = cfg.sample_rate as f64;
    if NOISE_BAND_HZ.1 > rate / 2.0 {
        return Err(Error::InvalidSampleRate(cfg.sample_rate));
    }
    let mut out = Vec::with_capacity(2 * cfg.clips_per_class);
    for i in 0..2 * cfg.clips_per_class {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
        let secs = rng.random_range(cfg.clip_seconds.0..=cfg.clip_seconds.1);
        let len = (secs * rate).round() as usize;
        let (label, samples) = if i % 2 == 0 {
            (TONE_LABEL, tone(len, rate, &mut rng))
        } else {
            (NOISE_LABEL, band_noise(len, rate, &mut rng))
        };
        out.push(LabeledClip {
            id: format!("{label}_{:04}", i / 2),
            audio: AudioClip::new(samples, cfg.sample_rate)?,
            labels: vec![label.to_string()],
            captions: Vec::new(),
        });
    }
    Ok(out)
}

/// Writes the clips as float WAVs under `dir/audio/` plus `dir/manifest.jsonl`.
/// Returns the manifest path.
pub fn write_corpus(dir: &Path, clips: &[LabeledClip]) -> Result<std::path::PathBuf> {
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let mut lines = String::new();
    for c in clips {
        let rel = format!("audio/{}.wav", c.id);
        write_wav(&dir.join(&rel), &c.audio, WavFormat::Float32)?;
        let item = serde_json::json!({
            "id": c.id,
            "path": rel,
            "labels": c.labels,
            "captions": c.captions,
            "duration_s": c.audio.duration_seconds(),
            "sample_rate": c.audio.sample_rate(),
        });
        lines.push_str(&item.to_string());
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
