//! Central-difference verification of full-model gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{stack, MixtureBatch};
use crate::autograd::{NormMode, Tape};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::model::{QueryInput, Separator};
use crate::tensor::Tensor;

/// Residuals closer than this to zero count as L1 tie points.
const TIE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub samples: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Scale the largest sampled analytic gradient by 1.1 (negative control).
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples: 200,
            threshold: 1e-4,
            seed: 0,
            corrupt: false,
        }
    }
}

/// A fixed training batch: mixtures, references and table rows.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub mixtures: Vec<AudioClip>,
    pub targets: Vec<AudioClip>,
    pub rows: Vec<usize>,
}

impl GradSample {
    pub fn from_batch(sep: &Separator, b: &MixtureBatch) -> Result<Self> {
        Ok(Self {
            mixtures: b.mixtures.clone(),
            targets: b.targets.clone(),
            rows: super::query_rows(sep, &b.queries)?,
        })
    }
}

/// Random mixtures and references of `len` samples, one per vocabulary row
/// cycled over `batch` items.
pub fn random_grad_sample(sep: &Separator, batch: usize, len: usize, seed: u64) -> Result<GradSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = sep.config().sample_rate;
    let mut clip = |amp: f64| AudioClip::new((0..len).map(|_| amp * rng.random_range(-1.0..1.0)).collect(), rate);
    let mut s = GradSample {
        mixtures: Vec::new(),
        targets: Vec::new(),
        rows: Vec::new(),
    };
    for i in 0..batch {
        s.mixtures.push(clip(0.5)?);
        s.targets.push(clip(0.3)?);
        s.rows.push(i % sep.vocab_keys().len());
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Sampled entries whose ±eps probes crossed an activation or L1 kink.
    pub skipped_kinks: usize,
    /// Residual entries within the tie tolerance at the base point.
    pub tie_points: usize,
    pub zero_loss: bool,
    pub worst: Option<WorstEntry>,
    pub corrupted: Option<String>,
    pub threshold: f64,
    pub passed: bool,
    pub parameter_count: usize,
}

fn loss_and_signature(sep: &Separator, s: &GradSample) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let out = sep.build_graph(&mut tape, &s.mixtures, QueryInput::Rows(&s.rows), NormMode::Batch, false)?;
    let l = tape.l1_loss(out.estimate, stack(&s.targets));
    Ok((tape.value(l).item(), tape.kink_signature()))
}

/// max |g_analytic − g_fd| / max(|g_fd|, 1e-8) over a random parameter subset.
pub fn grad_check(sep: &Separator, s: &GradSample, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.eps > 0.0) || cfg.samples == 0 {
        return Err(Error::InvalidConfig("grad check needs eps > 0 and samples > 0".into()));
    }
    let mut tape = Tape::new();
    let out = sep.build_graph(&mut tape, &s.mixtures, QueryInput::Rows(&s.rows), NormMode::Batch, true)?;
    let target = stack(&s.targets);
    let l = tape.l1_loss(out.estimate, target.clone());
    let base_sig = tape.kink_signature();
    let base_loss = tape.value(l).item();
    let tie_points = tape
        .value(out.estimate)
        .data()
        .iter()
        .zip(target.data())
        .filter(|(a, b)| (*a - *b).abs() < TIE_TOLERANCE)
        .count();
    let params = sep.params();
    let n_params = params.len();
    let total: usize = params.scalar_count();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        tie_points,
        zero_loss: base_loss == 0.0,
        worst: None,
        corrupted: None,
        threshold: cfg.threshold,
        passed: false,
        parameter_count: total,
    };
    if report.zero_loss {
        log::warn!("grad check skipped: zero loss at the base point");
        return Ok(report);
    }
    let grads = tape.backward(l);
    let analytic = tape.param_grads(&grads, n_params);

    // Flat index → (tensor, offset).
    let offsets: Vec<usize> = params
        .params()
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.value.len();
            Some(o)
        })
        .collect();
    let locate = |flat: usize| {
        let t = offsets.partition_point(|&o| o <= flat) - 1;
        (t, flat - offsets[t])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<(usize, usize)> = sample(&mut rng, total, cfg.samples.min(total))
        .into_iter()
        .map(locate)
        .collect();
    let grad_at = |t: usize, j: usize| analytic[t].as_ref().map_or(0.0, |g: &Tensor| g.data()[j]);

    let mut probe = sep.clone();
    let mut results = Vec::with_capacity(picks.len());
    for &(t, j) in &picks {
        let orig = params.params()[t].value.data()[j];
        probe.params_mut().param_mut(t).data_mut()[j] = orig + cfg.eps;
        let (lp, sp) = loss_and_signature(&probe, s)?;
        probe.params_mut().param_mut(t).data_mut()[j] = orig - cfg.eps;
        let (lm, sm) = loss_and_signature(&probe, s)?;
        probe.params_mut().param_mut(t).data_mut()[j] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        results.push((t, j, grad_at(t, j), (lp - lm) / (2.0 * cfg.eps)));
    }
    if cfg.corrupt {
        if let Some(r) = results.iter_mut().max_by(|a, b| a.2.abs().total_cmp(&b.2.abs())) {
            r.2 *= 1.1;
            report.corrupted = Some(format!("{}[{}]", params.params()[r.0].name, r.1));
        }
    }
    for (t, j, analytic, numeric) in results {
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(WorstEntry {
                param: params.params()[t].name.clone(),
                index: j,
                analytic,
                numeric,
            });
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < cfg.threshold;
    Ok(report)
}
