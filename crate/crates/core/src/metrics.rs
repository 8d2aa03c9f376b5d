//! Separation metrics: SDR, SI-SDR, SDR improvement and segmental SNR, plus
//! per-item reports with bootstrap confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Display cap for unbounded ratios (perfect or orthogonal estimates).
pub const DB_CAP: f64 = 100.0;
/// Report schema version.
pub const REPORT_VERSION: u32 = 1;

const SSNR_SILENCE: f64 = 1e-10;
const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Pairwise (cascade) summation: order-stable and accurate.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&p)
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else if num == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

/// Clamps to ±[`DB_CAP`].
pub fn cap(db: f64) -> f64 {
    db.clamp(-DB_CAP, DB_CAP)
}

fn check_pair(est: &AudioClip, reference: &AudioClip) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    if reference.samples().iter().all(|&v| v == 0.0) {
        return Err(Error::SilentSource);
    }
    Ok(())
}

/// 10·log10(‖ref‖² / ‖ref − est‖²), uncapped (+∞ when est == ref).
pub fn sdr_raw(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    check_pair(est, reference)?;
    let r = reference.samples();
    let err: Vec<f64> = r.iter().zip(est.samples()).map(|(a, b)| a - b).collect();
    Ok(ratio_db(dot(r, r), dot(&err, &err)))
}

/// SDR capped to ±100 dB.
pub fn sdr(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    sdr_raw(est, reference).map(cap)
}

/// Zero-mean scale-invariant SDR, uncapped.
pub fn si_sdr_raw(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    check_pair(est, reference)?;
    let centered = |x: &[f64]| {
        let m = pairwise_sum(x) / x.len() as f64;
        x.iter().map(|v| v - m).collect::<Vec<_>>()
    };
    let (e, r) = (centered(est.samples()), centered(reference.samples()));
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::SilentSource);
    }
    let a = dot(&e, &r) / rr;
    let target: Vec<f64> = r.iter().map(|v| a * v).collect();
    let resid: Vec<f64> = e.iter().zip(&target).map(|(x, t)| x - t).collect();
    Ok(ratio_db(dot(&target, &target), dot(&resid, &resid)))
}

pub fn si_sdr(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    si_sdr_raw(est, reference).map(cap)
}

/// SDR(est, ref) − SDR(mix, ref), both capped.
pub fn sdri(est: &AudioClip, mix: &AudioClip, reference: &AudioClip) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mix, reference)?)
}

/// Segmental SNR: 50 %-overlapping frames of `frame_ms`, frames whose
/// reference energy is below 1e-10 skipped, per-frame values clamped.
pub fn ssnr(est: &AudioClip, reference: &AudioClip, frame_ms: f64, clamp: (f64, f64)) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    let frame = ((frame_ms * reference.sample_rate() as f64 / 1000.0).round() as usize)
        .clamp(1, reference.len().max(1));
    let hop = (frame / 2).max(1);
    let (e, r) = (est.samples(), reference.samples());
    let mut vals = Vec::new();
    let mut start = 0;
    while start + frame <= r.len() {
        let rf = &r[start..start + frame];
        let energy = dot(rf, rf);
        if energy > SSNR_SILENCE {
            let err: Vec<f64> = rf.iter().zip(&e[start..start + frame]).map(|(a, b)| a - b).collect();
            vals.push(ratio_db(energy, dot(&err, &err)).clamp(clamp.0, clamp.1));
        }
        start += hop;
    }
    if vals.is_empty() {
        return Err(Error::SilentSource);
    }
    Ok(pairwise_sum(&vals) / vals.len() as f64)
}

/// Segmental SNR with 32 ms frames and a [−10, 35] dB clamp.
pub fn ssnr_default(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    ssnr(est, reference, 32.0, (-10.0, 35.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub sdr_db: f64,
    pub si_sdr_db: f64,
    pub sdri_db: f64,
    #[serde(default)]
    pub ssnr_db: Option<f64>,
    /// Some value hit the ±100 dB display cap.
    pub capped: bool,
}

impl ItemMetrics {
    /// All metrics of one estimate against its reference and mixture.
    pub fn compute(id: impl Into<String>, est: &AudioClip, mix: &AudioClip, reference: &AudioClip, with_ssnr: bool) -> Result<Self> {
        let s = sdr_raw(est, reference)?;
        let si = si_sdr_raw(est, reference)?;
        let m = sdr_raw(mix, reference)?;
        let capped = [s, si, m].iter().any(|v| v.abs() >= DB_CAP);
        Ok(Self {
            id: id.into(),
            sdr_db: cap(s),
            si_sdr_db: cap(si),
            sdri_db: cap(s) - cap(m),
            ssnr_db: if with_ssnr { Some(ssnr_default(est, reference)?) } else { None },
            capped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedItem {
    pub id: String,
    pub reason: String,
}

/// Mean and 95 % percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    pub fn of(values: &[f64], seed: u64) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = pairwise_sum(values) / values.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
            .map(|_| {
                let s: Vec<f64> = (0..values.len())
                    .map(|_| values[rng.random_range(0..values.len())])
                    .collect();
                pairwise_sum(&s) / s.len() as f64
            })
            .collect();
        means.sort_by(f64::total_cmp);
        let q = |p: f64| means[((p * (means.len() - 1) as f64).round()) as usize];
        Some(Self {
            mean,
            ci_low: q(0.025),
            ci_high: q(0.975),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub failed: usize,
    pub capped: usize,
    pub sdr: Option<Summary>,
    pub si_sdr: Option<Summary>,
    pub sdri: Option<Summary>,
    pub ssnr: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub dataset: String,
    pub records: Vec<ItemMetrics>,
    pub failed: Vec<FailedItem>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    /// Aggregates per-item records; failed items are counted, not averaged.
    pub fn new(dataset: impl Into<String>, records: Vec<ItemMetrics>, failed: Vec<FailedItem>, seed: u64) -> Self {
        let col = |f: fn(&ItemMetrics) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let ssnr: Vec<f64> = records.iter().filter_map(|r| r.ssnr_db).collect();
        let aggregates = Aggregates {
            count: records.len(),
            failed: failed.len(),
            capped: records.iter().filter(|r| r.capped).count(),
            sdr: Summary::of(&col(|r| r.sdr_db), seed),
            si_sdr: Summary::of(&col(|r| r.si_sdr_db), seed.wrapping_add(1)),
            sdri: Summary::of(&col(|r| r.sdri_db), seed.wrapping_add(2)),
            ssnr: Summary::of(&ssnr, seed.wrapping_add(3)),
        };
        Self {
            version: REPORT_VERSION,
            dataset: dataset.into(),
            records,
            failed,
            aggregates,
        }
    }

    pub fn mean_sdri(&self) -> Option<f64> {
        self.aggregates.sdri.map(|s| s.mean)
    }

    pub fn mean_si_sdr(&self) -> Option<f64> {
        self.aggregates.si_sdr.map(|s| s.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 8000).unwrap()
    }

    /// A reference and a noise signal orthogonal to it (and zero-mean).
    fn orthogonal_pair(n: usize) -> (Vec<f64>, Vec<f64>) {
        let r: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / n as f64).sin()).collect();
        let z: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 11.0 * i as f64 / n as f64).cos()).collect();
        (r, z)
    }

    fn energy(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn sdr_examples() {
        let (r, z) = orthogonal_pair(800);
        let rc = clip(r.clone());
        assert_eq!(sdr(&rc, &rc).unwrap(), DB_CAP);
        assert!(sdr(&clip(vec![0.0; 800]), &rc).unwrap().abs() < 1e-12);
        let g = (energy(&r) / 10.0 / energy(&z)).sqrt();
        let est: Vec<f64> = r.iter().zip(&z).map(|(a, b)| a + g * b).collect();
        assert!((sdr(&clip(est), &rc).unwrap() - 10.0).abs() < 1e-9);
        assert!(matches!(sdr(&rc, &clip(vec![0.0; 800])), Err(Error::SilentSource)));
        assert!(matches!(sdr(&rc, &clip(vec![1.0; 10])), Err(Error::LengthMismatch(..))));
    }

    #[test]
    fn si_sdr_examples() {
        let (r, z) = orthogonal_pair(800);
        let rc = clip(r.clone());
        for a in [0.3, -2.0, 7.5] {
            assert_eq!(si_sdr(&rc.scaled(a), &rc).unwrap(), DB_CAP);
        }
        let g = (energy(&r) / energy(&z)).sqrt();
        let est = clip(r.iter().zip(&z).map(|(a, b)| a + g * b).collect());
        assert!(si_sdr(&est, &rc).unwrap().abs() < 1e-9);
        let d = si_sdr(&est.scaled(2.0), &rc).unwrap() - si_sdr(&est, &rc).unwrap();
        assert!(d.abs() < 1e-9);
        assert_eq!(si_sdr(&clip(z.clone()), &rc).unwrap(), -DB_CAP);
    }

    #[test]
    fn sdri_examples() {
        let (r, z) = orthogonal_pair(800);
        let mix = clip(r.iter().zip(&z).map(|(a, b)| a + b).collect());
        let rc = clip(r);
        assert_eq!(sdri(&mix, &mix, &rc).unwrap(), 0.0);
        let m = sdr(&mix, &rc).unwrap();
        assert_eq!(sdri(&rc, &mix, &rc).unwrap(), DB_CAP - m);
    }

    #[test]
    fn ssnr_examples() {
        let (r, _) = orthogonal_pair(8000);
        let rc = clip(r.clone());
        assert_eq!(ssnr_default(&rc, &rc).unwrap(), 35.0);
        assert!(ssnr_default(&clip(vec![0.0; 8000]), &rc).unwrap().abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let white: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est = clip(white.iter().zip(&noise).map(|(a, b)| a + b).collect());
        let v = ssnr_default(&est, &clip(white)).unwrap();
        assert!(v.abs() < 1.0, "equal-power noise gave {v}");
        assert!(ssnr_default(&rc, &clip(vec![0.0; 8000])).is_err());
    }

    #[test]
    fn ssnr_skips_silent_frames() {
        let mut r = vec![0.0; 1024];
        r[600..].iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.3).sin());
        let rc = clip(r);
        assert_eq!(ssnr_default(&rc, &rc).unwrap(), 35.0);
    }

    #[test]
    fn report_aggregation() {
        let recs: Vec<ItemMetrics> = (0..5)
            .map(|i| ItemMetrics {
                id: format!("r{i}"),
                sdr_db: i as f64,
                si_sdr_db: 2.0 * i as f64,
                sdri_db: 0.5 * i as f64,
                ssnr_db: None,
                capped: false,
            })
            .collect();
        let failed = vec![FailedItem { id: "x".into(), reason: "unknown query".into() }];
        let r = MetricReport::new("toy", recs, failed, 3);
        let s = r.aggregates.sdr.unwrap();
        assert!((s.mean - 2.0).abs() < 1e-9);
        assert!(s.ci_low <= s.mean && s.mean <= s.ci_high);
        assert_eq!(r.aggregates.failed, 1);
        assert_eq!(r.aggregates.count, 5);
        assert!(r.aggregates.ssnr.is_none());
        assert_eq!(r, MetricReport::new("toy", r.records.clone(), r.failed.clone(), 3));
    }

    proptest! {
        #[test]
        fn global_scaling_invariance(seed in 0u64..500, g in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = || (0..512).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (r, e, m) = (clip(v()), clip(v()), clip(v()));
            let (rs, es, ms) = (r.scaled(g), e.scaled(g), m.scaled(g));
            prop_assert!((sdr(&e, &r).unwrap() - sdr(&es, &rs).unwrap()).abs() < 1e-9);
            prop_assert!((sdri(&e, &m, &r).unwrap() - sdri(&es, &ms, &rs).unwrap()).abs() < 1e-9);
            prop_assert!((ssnr_default(&e, &r).unwrap() - ssnr_default(&es, &rs).unwrap()).abs() < 1e-9);
            prop_assert!((si_sdr(&e, &r).unwrap() - si_sdr(&e.scaled(-g), &r).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn pairwise_matches_naive(v in proptest::collection::vec(-1e3f64..1e3, 0..200)) {
            let naive: f64 = v.iter().sum();
            prop_assert!((pairwise_sum(&v) - naive).abs() < 1e-9);
        }
    }
}
