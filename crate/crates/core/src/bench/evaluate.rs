//! Running a model (or a baseline) over a benchmark set.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::set::{load_record_audio, BenchmarkSet, MixtureRecord};
use crate::dsp::{apply_mask, ideal_mask, istft, stft, AudioClip, StftConfig};
use crate::error::{Error, Result};
use crate::metrics::{FailedItem, ItemMetrics, MetricReport};
use crate::model::Separator;
use crate::query::QueryEmbedding;

/// What produces the estimate for each record.
#[derive(Debug, Clone, Copy)]
pub enum EvalModel<'a> {
    Separator {
        sep: &'a Separator,
        /// Consulted for queries outside the model's vocabulary.
        external: Option<&'a BTreeMap<String, QueryEmbedding>>,
    },
    /// Ideal complex mask from the reference, magnitude clamped to `ceiling`.
    Oracle { stft: StftConfig, ceiling: f64 },
    /// The mixture itself.
    PassThrough,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub dataset: String,
    pub jobs: usize,
    pub with_ssnr: bool,
    /// Bootstrap seed for the confidence intervals.
    pub seed: u64,
}

fn estimate(model: &EvalModel, mix: &AudioClip, reference: &AudioClip, query: &str) -> Result<AudioClip> {
    match model {
        EvalModel::PassThrough => Ok(mix.clone()),
        EvalModel::Oracle { stft: cfg, ceiling } => {
            let x = stft(mix, cfg)?;
            let s = stft(reference, cfg)?;
            let y = apply_mask(&x, &ideal_mask(&x, &s, *ceiling)?)?;
            istft(&y, mix.sample_rate())
        }
        EvalModel::Separator { sep, external } => {
            let e = sep.resolve_query(query, *external)?;
            Ok(sep.forward(mix, &e)?.0)
        }
    }
}

fn evaluate_record(dir: &Path, r: &MixtureRecord, model: &EvalModel, with_ssnr: bool) -> Result<ItemMetrics> {
    let (mix, reference, _) = load_record_audio(dir, r)?;
    let est = estimate(model, &mix, &reference, &r.query)?;
    ItemMetrics::compute(r.id.clone(), &est, &mix, &reference, with_ssnr)
}

/// Per-record metrics in record order. Records that fail (unknown query,
/// unreadable audio, rate mismatch) are listed and excluded from aggregates.
pub fn evaluate(dir: &Path, set: &BenchmarkSet, model: &EvalModel, opts: &EvalOptions) -> Result<MetricReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<Result<ItemMetrics>> = pool.install(|| {
        set.records
            .par_iter()
            .map(|r| evaluate_record(dir, r, model, opts.with_ssnr))
            .collect()
    });
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in set.records.iter().zip(results) {
        match res {
            Ok(m) => records.push(m),
            Err(e) => {
                log::warn!("record {} failed: {e}", r.id);
                failed.push(FailedItem {
                    id: r.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(MetricReport::new(opts.dataset.clone(), records, failed, opts.seed))
}
