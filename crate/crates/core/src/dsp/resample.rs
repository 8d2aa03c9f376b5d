use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

/// Half-width of the interpolation kernel in zero crossings of the cutoff sinc.
const ZERO_CROSSINGS: f64 = 24.0;

/// Blackman-windowed sinc resampling to `target_rate`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidSampleRate(target_rate));
    }
    let src_rate = clip.sample_rate();
    if src_rate == target_rate {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let ratio = src_rate as f64 / target_rate as f64;
    // Cutoff relative to the source Nyquist; lowered when decimating.
    let cutoff = (1.0 / ratio).min(1.0) * 0.97;
    let half_width = ZERO_CROSSINGS / cutoff;
    let out_len = ((x.len() as u64 * target_rate as u64).div_ceil(src_rate as u64)) as usize;
    let out = (0..out_len)
        .map(|m| {
            let t = m as f64 * ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                acc += v * cutoff * sinc(cutoff * d) * blackman(d / half_width);
            }
            acc
        })
        .collect();
    AudioClip::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on [-1, 1].
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (u + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}
