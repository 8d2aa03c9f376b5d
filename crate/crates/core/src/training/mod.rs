//! Optimization: L1 waveform loss, Adam, the sampling loop, evaluation,
//! checkpoint/resume and finite-difference gradient checking.

mod corpus;
mod gradcheck;
pub mod toy;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NormMode, Tape};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::metrics::{pairwise_sum, sdri};
use crate::mixing::mix_at_snr;
use crate::model::{Checkpoint, ModelConfig, ModelParams, QueryInput, Separator, TensorKind};
use crate::query::build_vocab;
use crate::seed::{derive_seed, stream_seed};
use crate::tensor::Tensor;

pub use corpus::{sample_training_pair, LabeledClip, TrainingCorpus, TrainingPair};
pub use gradcheck::{grad_check, random_grad_sample, GradCheckConfig, GradCheckReport, GradSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossDomain {
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub snr_range_db: (f64, f64),
    pub max_steps: u64,
    pub seed: u64,
    /// Held-out evaluation period in steps (0 disables periodic evaluation).
    pub eval_every: u64,
    pub eval_items: usize,
    /// Checkpoint period in steps (0: only at the end).
    pub checkpoint_every: u64,
    pub loss_domain: LossDomain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            segment_seconds: 1.0,
            snr_range_db: (-15.0, 15.0),
            max_steps: 2000,
            seed: 0,
            eval_every: 250,
            eval_items: 64,
            checkpoint_every: 500,
            loss_domain: LossDomain::Waveform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("SNR range must satisfy lo <= hi");
        }
        let window_s = model.stft.window_size as f64 / model.sample_rate as f64;
        if !(self.segment_seconds > window_s) {
            return bad("segment must be longer than one STFT window");
        }
        Ok(())
    }

    pub fn segment_len(&self, sample_rate: u32) -> usize {
        (self.segment_seconds * sample_rate as f64).round() as usize
    }
}

/// Mean absolute difference.
pub fn l1_loss(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    let d: Vec<f64> = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(pairwise_sum(&d) / d.len().max(1) as f64)
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn quantize_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero.
pub fn adam_step(params: &mut ModelParams, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.params()[i].value.shape() {
                return Err(Error::ShapeMismatch(format!("gradient of {}", params.params()[i].name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let p = params.param_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(Tensor::data);
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
            p[j] -= update;
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after update")));
    }
    Ok(())
}

/// A batch of fixed mixtures with references and vocabulary queries.
#[derive(Debug, Clone)]
pub struct MixtureBatch {
    pub mixtures: Vec<AudioClip>,
    pub targets: Vec<AudioClip>,
    pub queries: Vec<String>,
}

/// Draws `n` pairs and mixes each at an SNR uniform in `snr_range`.
pub fn sample_batch(corpus: &TrainingCorpus, n: usize, segment_len: usize, snr_range: (f64, f64), rng: &mut ChaCha8Rng) -> Result<MixtureBatch> {
    let mut b = MixtureBatch {
        mixtures: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
        queries: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let pair = sample_training_pair(corpus, segment_len, rng)?;
        let snr = if snr_range.0 == snr_range.1 {
            snr_range.0
        } else {
            rng.random_range(snr_range.0..=snr_range.1)
        };
        let mix = mix_at_snr(&pair.target, &pair.interferer, snr)?;
        b.mixtures.push(mix.mixture);
        b.targets.push(mix.target);
        b.queries.push(pair.query);
    }
    Ok(b)
}

fn query_rows(sep: &Separator, queries: &[String]) -> Result<Vec<usize>> {
    let vocab = sep.vocabulary();
    queries
        .iter()
        .map(|q| vocab.index_of(q).ok_or_else(|| Error::UnknownQuery(q.clone())))
        .collect()
}

fn stack(clips: &[AudioClip]) -> Tensor {
    let len = clips[0].len();
    let data = clips.iter().flat_map(|c| c.samples().iter().copied()).collect();
    Tensor::from_vec(&[clips.len(), len], data)
}

/// Mean SDRi of the model over a batch, in inference mode.
pub fn evaluate_batch(sep: &Separator, batch: &MixtureBatch) -> Result<f64> {
    const CHUNK: usize = 8;
    let mut vals = Vec::with_capacity(batch.mixtures.len());
    for start in (0..batch.mixtures.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(batch.mixtures.len());
        let rows = query_rows(sep, &batch.queries[start..end])?;
        let mut tape = Tape::new();
        let out = sep.build_graph(&mut tape, &batch.mixtures[start..end], QueryInput::Rows(&rows), NormMode::Running, false)?;
        let est = tape.value(out.estimate);
        let len = batch.mixtures[start].len();
        for (k, i) in (start..end).enumerate() {
            let e = AudioClip::new(est.data()[k * len..(k + 1) * len].to_vec(), sep.config().sample_rate)?;
            vals.push(sdri(&e, &batch.mixtures[i], &batch.targets[i])?);
        }
    }
    Ok(pairwise_sum(&vals) / vals.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub eval_sdri: Option<f64>,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,loss,eval_sdri,wall_ms";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let eval = self.eval_sdri.map(|v| format!("{v:?}")).unwrap_or_default();
        format!("{},{:?},{},{}", self.step, self.loss, eval, self.wall_ms)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Report(format!("malformed log row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            eval_sdri: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad())?)
            },
            wall_ms: f[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LogRow::parse).collect()
}

/// Where a run writes its checkpoint and loss log.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    adam_step: u64,
    train_config: TrainConfig,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub separator: Separator,
    /// Rows written by this invocation.
    pub log: Vec<LogRow>,
    pub final_step: u64,
    pub last_eval_sdri: Option<f64>,
}

struct Run<'a> {
    sep: Separator,
    adam: AdamState,
    cfg: TrainConfig,
    corpus: &'a TrainingCorpus,
    eval: MixtureBatch,
    outputs: &'a TrainOutputs,
    log_file: fs::File,
    rows: Vec<LogRow>,
    started: Instant,
}

fn eval_set(corpus: &TrainingCorpus, cfg: &TrainConfig, segment_len: usize) -> Result<MixtureBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "eval"));
    sample_batch(corpus, cfg.eval_items, segment_len, cfg.snr_range_db, &mut rng)
}

fn adam_tensors(sep: &Separator, adam: &AdamState) -> Vec<(String, Tensor)> {
    let names = sep.params().params().iter().map(|p| p.name.clone());
    names
        .clone()
        .zip(&adam.m)
        .map(|(n, t)| (format!("adam.m.{n}"), t.clone()))
        .chain(names.zip(&adam.v).map(|(n, t)| (format!("adam.v.{n}"), t.clone())))
        .collect()
}

impl Run<'_> {
    fn save(&self, step: u64) -> Result<()> {
        let state = TrainState {
            step,
            adam_step: self.adam.step,
            train_config: self.cfg.clone(),
        };
        self.sep
            .to_checkpoint(self.cfg.seed, adam_tensors(&self.sep, &self.adam), Some(serde_json::to_value(state)?))
            .write(&self.outputs.checkpoint)
    }

    fn log(&mut self, row: LogRow) -> Result<()> {
        writeln!(self.log_file, "{}", row.to_csv()).map_err(|e| Error::io(&self.outputs.log, e))?;
        self.log_file.flush().map_err(|e| Error::io(&self.outputs.log, e))?;
        self.rows.push(row);
        Ok(())
    }

    /// One optimization step; returns the batch loss.
    fn step(&mut self, step: u64) -> Result<f64> {
        let seg = self.cfg.segment_len(self.corpus.sample_rate());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream_seed(self.cfg.seed, "train"), step));
        let batch = sample_batch(self.corpus, self.cfg.batch_size, seg, self.cfg.snr_range_db, &mut rng)?;
        let rows = query_rows(&self.sep, &batch.queries)?;
        let mut tape = Tape::new();
        let out = self.sep.build_graph(&mut tape, &batch.mixtures, QueryInput::Rows(&rows), NormMode::Batch, true)?;
        let loss_v = tape.l1_loss(out.estimate, stack(&batch.targets));
        let loss = tape.value(loss_v).item();
        if !loss.is_finite() {
            self.save(step - 1)?;
            return Err(Error::NonFinite(format!("loss at step {step}; last good checkpoint saved")));
        }
        let grads = tape.backward(loss_v);
        let grads = tape.param_grads(&grads, self.sep.params().len());
        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| !g.is_finite()) {
                self.save(step - 1)?;
                let name = &self.sep.params().params()[i].name;
                return Err(Error::NonFinite(format!("gradient of {name} at step {step}; last good checkpoint saved")));
            }
        }
        adam_step(self.sep.params_mut(), &grads, &mut self.adam, self.cfg.learning_rate)?;
        self.sep.update_running_stats(&out);
        self.sep.params_mut().quantize_f32();
        self.adam.quantize_f32();
        Ok(loss)
    }

    fn run(mut self, first: u64) -> Result<TrainOutcome> {
        let mut last_eval = None;
        for step in first..=self.cfg.max_steps {
            let loss = self.step(step)?;
            let do_eval = self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0;
            let eval_sdri = if do_eval && self.cfg.eval_items > 0 {
                let v = evaluate_batch(&self.sep, &self.eval)?;
                last_eval = Some(v);
                log::info!("step {step}: loss {loss:.5}, held-out SDRi {v:.2} dB");
                Some(v)
            } else {
                None
            };
            let wall_ms = self.started.elapsed().as_millis() as u64;
            self.log(LogRow {
                step,
                loss,
                eval_sdri,
                wall_ms,
            })?;
            if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 && step != self.cfg.max_steps {
                self.save(step)?;
            }
        }
        let final_step = self.cfg.max_steps.max(first.saturating_sub(1));
        self.save(final_step)?;
        // Not logged: a split run must write the same rows as an uninterrupted one.
        let evaluated_last = self.rows.last().is_some_and(|r| r.eval_sdri.is_some());
        if !evaluated_last && self.cfg.eval_items > 0 && final_step > 0 {
            last_eval = Some(evaluate_batch(&self.sep, &self.eval)?);
        }
        Ok(TrainOutcome {
            separator: self.sep,
            log: self.rows,
            final_step,
            last_eval_sdri: last_eval,
        })
    }
}

fn open_log(path: &Path, keep: &[String]) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for l in keep {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Trains from scratch. The vocabulary covers the corpus labels and captions.
/// `eval_corpus` supplies the held-out mixtures (the training corpus is used
/// when absent). `max_steps = 0` writes the initial checkpoint only.
pub fn train(
    corpus: &TrainingCorpus,
    eval_corpus: Option<&TrainingCorpus>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if corpus.sample_rate() != model_cfg.sample_rate {
        return Err(Error::RateMismatch(corpus.sample_rate(), model_cfg.sample_rate));
    }
    let vocab = build_vocab(&corpus.query_keys(), model_cfg.d_query, stream_seed(cfg.seed, "vocab"))?;
    let sep = Separator::new(model_cfg.clone(), &vocab, stream_seed(cfg.seed, "init"))?;
    let seg = cfg.segment_len(model_cfg.sample_rate);
    let eval = eval_set(eval_corpus.unwrap_or(corpus), cfg, seg)?;
    let run = Run {
        adam: AdamState::new(sep.params()),
        sep,
        cfg: cfg.clone(),
        corpus,
        eval,
        outputs,
        log_file: open_log(&outputs.log, &[])?,
        rows: Vec::new(),
        started: Instant::now(),
    };
    run.run(1)
}

/// Continues a run from its checkpoint up to `max_steps` (the stored target when
/// `None`). Log rows after the checkpoint step are discarded first, so a
/// resumed run reproduces the uninterrupted loss log.
pub fn resume(
    corpus: &TrainingCorpus,
    eval_corpus: Option<&TrainingCorpus>,
    max_steps: Option<u64>,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    let ck = Checkpoint::read(&outputs.checkpoint)?;
    let state: TrainState = ck
        .header
        .train_state
        .clone()
        .ok_or_else(|| Error::Checkpoint("no training state to resume from".into()))
        .and_then(|v| serde_json::from_value(v).map_err(Error::from))?;
    let sep = Separator::from_checkpoint(&ck)?;
    let mut adam = AdamState::new(sep.params());
    adam.step = state.adam_step;
    for (i, p) in sep.params().params().iter().enumerate() {
        let get = |prefix: &str| {
            ck.tensor(&format!("{prefix}.{}", p.name))
                .filter(|_| ck.header.manifest.iter().any(|m| m.kind == TensorKind::Optimizer))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {}", p.name)))
        };
        adam.m[i] = get("adam.m")?;
        adam.v[i] = get("adam.v")?;
    }
    let mut cfg = state.train_config;
    if let Some(m) = max_steps {
        cfg.max_steps = m;
    }
    let keep: Vec<String> = match fs::read_to_string(&outputs.log) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| LogRow::parse(l).is_ok_and(|r| r.step <= state.step))
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    let seg = cfg.segment_len(sep.config().sample_rate);
    let eval = eval_set(eval_corpus.unwrap_or(corpus), &cfg, seg)?;
    let run = Run {
        sep,
        adam,
        cfg,
        corpus,
        eval,
        outputs,
        log_file: open_log(&outputs.log, &keep)?,
        rows: Vec::new(),
        started: Instant::now(),
    };
    run.run(state.step + 1)
}
