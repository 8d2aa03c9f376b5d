//! Energy, SNR-controlled mixing, loudness normalization and the clipping guard.
//!
//! The interferer gain is `alpha = sqrt((e1 / e2) * 10^(-snr_db / 10))`, which
//! makes `10 log10(e1 / (alpha^2 e2))` equal the requested SNR. Writing the
//! exponent with a positive sign would produce a mixture at `-snr_db`.

mod loudness;

pub use loudness::{integrated_loudness, normalize_to_loudness, Loudness};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Default peak after the clipping guard rescales.
pub const CLIP_GUARD_PEAK: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct MixResult {
    pub mixture: AudioClip,
    pub target: AudioClip,
    pub interferer_scaled: AudioClip,
    pub alpha: f64,
    pub snr_db: f64,
}

/// Squared L2 norm.
pub fn energy(clip: &AudioClip) -> f64 {
    energy_of(clip.samples())
}

pub(crate) fn energy_of(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn snr_scale_factor(e1: f64, e2: f64, snr_db: f64) -> Result<f64> {
    if !(e1 > 0.0 && e2 > 0.0) {
        return Err(Error::SilentSource);
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr".into()));
    }
    Ok((e1 / e2 * 10f64.powf(-snr_db / 10.0)).sqrt())
}

/// `10 log10(E(a) / E(b))`.
pub fn measured_snr_db(a: &AudioClip, b: &AudioClip) -> f64 {
    10.0 * (energy(a) / energy(b)).log10()
}

/// x = s1 + α·s2 with α chosen so that the target-to-interferer ratio is `snr_db`.
pub fn mix_at_snr(s1: &AudioClip, s2: &AudioClip, snr_db: f64) -> Result<MixResult> {
    s1.check_compatible(s2)?;
    let alpha = snr_scale_factor(energy(s1), energy(s2), snr_db)?;
    let interferer_scaled = s2.scaled(alpha);
    let mixture = s1.add(&interferer_scaled)?;
    Ok(MixResult {
        mixture,
        target: s1.clone(),
        interferer_scaled,
        alpha,
        snr_db,
    })
}

/// Rescales to `peak` when any sample exceeds full scale. Returns the applied scale.
pub fn clip_guard(clip: &AudioClip, peak: f64) -> (AudioClip, f64) {
    let scale = clip_guard_scale(clip.peak(), peak);
    if scale == 1.0 {
        (clip.clone(), 1.0)
    } else {
        (clip.scaled(scale), scale)
    }
}

pub(crate) fn clip_guard_scale(current_peak: f64, peak: f64) -> f64 {
    assert!(peak > 0.0, "clip guard peak must be positive");
    if current_peak > 1.0 {
        peak / current_peak
    } else {
        1.0
    }
}

/// Fits a clip to `len` samples: a random-offset crop when longer, a looped
/// repeat when shorter.
pub fn fit_to_length(clip: &AudioClip, len: usize, rng: &mut impl rand::Rng) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::EmptySignal);
    }
    if clip.len() >= len {
        let start = rng.random_range(0..=clip.len() - len);
        return clip.slice(start, len);
    }
    let s = clip.samples();
    AudioClip::new((0..len).map(|i| s[i % s.len()]).collect(), clip.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 8000).unwrap()
    }

    fn noise(n: usize, seed: u64, amp: f64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        clip((0..n).map(|_| amp * rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn fit_crop_and_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = clip((0..10).map(|i| i as f64).collect());
        let cropped = fit_to_length(&c, 4, &mut rng).unwrap();
        let start = cropped.samples()[0] as usize;
        assert_eq!(cropped.samples(), &[0.0, 1.0, 2.0, 3.0].map(|v| v + start as f64));
        let looped = fit_to_length(&c, 23, &mut rng).unwrap();
        assert_eq!(looped.len(), 23);
        assert_eq!(looped.samples()[12], 2.0);
        assert_eq!(fit_to_length(&c, 10, &mut rng).unwrap(), c);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy(&clip(vec![1.0; 100])), 100.0);
        assert_eq!(energy(&clip(vec![0.0; 100])), 0.0);
        // 25 whole periods of a unit sine over 1000 samples.
        let n = 1000;
        let s = clip(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * 25.0 * i as f64 / n as f64).sin())
                .collect(),
        );
        assert!((energy(&s) - n as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn scale_factor_examples() {
        assert!((snr_scale_factor(1.0, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((snr_scale_factor(4.0, 1.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        let a = snr_scale_factor(1.0, 1.0, 10.0).unwrap();
        assert!((a - 10f64.powf(-0.5)).abs() < 1e-15);
        assert!((a - 0.3162).abs() < 1e-4);
        // Re-measure: 10 log10(e1 / (a^2 e2)) = 0 for the 4:1 case.
        let a = snr_scale_factor(4.0, 1.0, 0.0).unwrap();
        assert!((10.0 * (4.0 / (a * a)).log10()).abs() < 1e-12);
        assert!(matches!(snr_scale_factor(0.0, 1.0, 0.0), Err(Error::SilentSource)));
        assert!(matches!(snr_scale_factor(1.0, 0.0, 0.0), Err(Error::SilentSource)));
    }

    #[test]
    fn equal_energy_at_zero_db() {
        let s1 = clip(vec![0.5, -0.5, 0.5, -0.5]);
        let s2 = clip(vec![0.5, 0.5, -0.5, -0.5]);
        let m = mix_at_snr(&s1, &s2, 0.0).unwrap();
        assert_eq!(m.alpha, 1.0);
        assert_eq!(m.mixture.samples(), &[1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn mixing_errors() {
        let s1 = noise(100, 1, 1.0);
        assert!(matches!(
            mix_at_snr(&s1, &clip(vec![0.0; 100]), 0.0),
            Err(Error::SilentSource)
        ));
        assert!(matches!(
            mix_at_snr(&s1, &noise(99, 2, 1.0), 0.0),
            Err(Error::LengthMismatch(..))
        ));
        let other_rate = AudioClip::new(vec![0.1; 100], 16_000).unwrap();
        assert!(matches!(mix_at_snr(&s1, &other_rate, 0.0), Err(Error::RateMismatch(..))));
    }

    #[test]
    fn training_range_endpoints() {
        let (s1, s2) = (noise(512, 3, 0.2), noise(512, 4, 0.9));
        for snr in [-15.0, 15.0] {
            let m = mix_at_snr(&s1, &s2, snr).unwrap();
            assert!((measured_snr_db(&m.target, &m.interferer_scaled) - snr).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_decreases_with_snr() {
        let mut prev = f64::INFINITY;
        for k in -30..=30 {
            let a = snr_scale_factor(2.0, 3.0, k as f64 * 0.5).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn clip_guard_examples() {
        let (g, s) = clip_guard(&clip(vec![1.5, -0.3]), CLIP_GUARD_PEAK);
        assert!((s - 0.6).abs() < 1e-15);
        assert!((g.peak() - 0.9).abs() < 1e-15);
        let (g, s) = clip_guard(&clip(vec![0.8, -0.3]), CLIP_GUARD_PEAK);
        assert_eq!(s, 1.0);
        assert_eq!(g.samples(), &[0.8, -0.3]);
    }

    proptest! {
        #[test]
        fn requested_snr_is_measured(seed in 0u64..1000, snr in -15.0f64..15.0, a1 in 0.01f64..2.0, a2 in 0.01f64..2.0) {
            let s1 = noise(256, seed, a1);
            let s2 = noise(256, seed + 10_000, a2);
            let m = mix_at_snr(&s1, &s2, snr).unwrap();
            prop_assert!((measured_snr_db(&m.target, &m.interferer_scaled) - snr).abs() < 1e-6);
            for ((x, t), i) in m.mixture.samples().iter().zip(m.target.samples()).zip(m.interferer_scaled.samples()) {
                prop_assert_eq!(*x, t + i);
            }
        }

        #[test]
        fn clip_guard_idempotent(seed in 0u64..1000, amp in 0.1f64..4.0) {
            let c = noise(64, seed, amp);
            let (once, _) = clip_guard(&c, CLIP_GUARD_PEAK);
            let (twice, s) = clip_guard(&once, CLIP_GUARD_PEAK);
            prop_assert_eq!(s, 1.0);
            prop_assert_eq!(once, twice);
        }
    }
}
