use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use lasskit::bench::{
    build_set, emit_report, evaluate, load_manifest, read_set, write_set, Corpus, EvalModel, EvalOptions, Protocol,
    ProtocolParams, ReportFormat,
};
use lasskit::dsp::wav::{read_wav, write_wav, WavFormat};
use lasskit::dsp::{resample, AudioClip};
use lasskit::mixing::{clip_guard, fit_to_length, measured_snr_db, mix_at_snr, normalize_to_loudness, CLIP_GUARD_PEAK};
use lasskit::model::Separator;
use lasskit::query::{build_vocab, load_external_embeddings, QueryEmbedding, Vocabulary};
use lasskit::training::toy::{synthesize_toy_clips, write_corpus, ToyCorpusConfig};
use lasskit::training::{grad_check, random_grad_sample, resume, train, GradCheckConfig, TrainOutputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::{file_model_config, file_train_config, resolve_seed, write_run_manifest, FileConfig};
use crate::{Cli, CliError, Command};

type Res<T = ()> = Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const RUN_FILE: &str = "run.json";

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn write_json(path: &Path, v: &Value) -> Res {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Config(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Res {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `<file>.run.json` next to a single-file output.
fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

pub fn run(cli: Cli) -> Res {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    let seed = resolve_seed(cli.global.seed, &file)?;
    match cli.command {
        Command::Mix(a) => cmd_mix(a, seed),
        Command::ToyCorpus(a) => cmd_toy_corpus(a, seed),
        Command::BenchBuild(a) => cmd_bench_build(a, seed, &file),
        Command::Train(a) => cmd_train(a, seed, &file),
        Command::Separate(a) => cmd_separate(a, seed),
        Command::Evaluate(a) => cmd_evaluate(a, seed, &file),
        Command::GradCheck(a) => cmd_grad_check(a, seed, &file),
        Command::EmbedImport(a) => cmd_embed_import(a, seed),
    }
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Target source.
    pub target: PathBuf,
    /// Interfering source; cropped or looped to the target's length.
    pub interferer: PathBuf,
    /// Target-to-interferer ratio in dB.
    #[arg(long, allow_hyphen_values = true, conflicts_with_all = ["lufs_target", "lufs_interferer"])]
    pub snr: Option<f64>,
    /// Loudness of the target in LUFS (with --lufs-interferer).
    #[arg(long, allow_hyphen_values = true, requires = "lufs_interferer")]
    pub lufs_target: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "lufs_target")]
    pub lufs_interferer: Option<f64>,
    /// Output directory for mixture.wav, target.wav, interferer.wav and mix.json.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_mix(a: MixArgs, seed: u64) -> Res {
    let target = read_wav(&a.target)?;
    let interferer = resample(&read_wav(&a.interferer)?, target.sample_rate())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interferer = fit_to_length(&interferer, target.len(), &mut rng)?;
    let (t, i, alpha, requested) = match (a.snr, a.lufs_target, a.lufs_interferer) {
        (Some(snr), _, _) => {
            let m = mix_at_snr(&target, &interferer, snr)?;
            (m.target, m.interferer_scaled, m.alpha, Some(snr))
        }
        (None, Some(lt), Some(li)) => {
            let (t, _) = normalize_to_loudness(&target, lt)?;
            let (i, _) = normalize_to_loudness(&interferer, li)?;
            (t, i, 1.0, None)
        }
        _ => return Err(CliError::Usage("give --snr or both --lufs-target and --lufs-interferer".into())),
    };
    let (mixture, scale) = clip_guard(&t.add(&i)?, CLIP_GUARD_PEAK);
    let (t, i) = (t.scaled(scale), i.scaled(scale));
    create_dir(&a.out)?;
    write_wav(a.out.join("mixture.wav"), &mixture, WavFormat::Float32)?;
    write_wav(a.out.join("target.wav"), &t, WavFormat::Float32)?;
    write_wav(a.out.join("interferer.wav"), &i, WavFormat::Float32)?;
    let measured = measured_snr_db(&t, &i);
    let sidecar = json!({
        "alpha": alpha,
        "snr_db_requested": requested,
        "snr_db_measured": measured,
        "lufs_target": a.lufs_target,
        "lufs_interferer": a.lufs_interferer,
        "clip_guard_scale": scale,
        "seed": seed,
        "target": a.target,
        "interferer": a.interferer,
    });
    write_json(&a.out.join("mix.json"), &sidecar)?;
    write_run_manifest(&a.out.join(RUN_FILE), "mix", seed, object(sidecar))?;
    println!("mixture at {measured:.6} dB SNR written to {}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ToyCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub clips_per_class: usize,
    #[arg(long, default_value_t = 1.5)]
    pub min_seconds: f64,
    #[arg(long, default_value_t = 3.0)]
    pub max_seconds: f64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
}

fn cmd_toy_corpus(a: ToyCorpusArgs, seed: u64) -> Res {
    let cfg = ToyCorpusConfig {
        sample_rate: a.sample_rate,
        clips_per_class: a.clips_per_class,
        clip_seconds: (a.min_seconds, a.max_seconds),
        seed,
    };
    if !(a.min_seconds > 0.0 && a.min_seconds <= a.max_seconds) {
        return Err(CliError::Usage("need 0 < --min-seconds <= --max-seconds".into()));
    }
    let clips = synthesize_toy_clips(&cfg)?;
    let manifest = write_corpus(&a.out, &clips)?;
    let config = json!({
        "clips_per_class": a.clips_per_class,
        "clip_seconds": [a.min_seconds, a.max_seconds],
        "sample_rate": a.sample_rate,
    });
    write_run_manifest(&a.out.join(RUN_FILE), "toy-corpus", seed, object(config))?;
    println!("{} clips; manifest {}", clips.len(), manifest.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchBuildArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// One of: 0db, lufs, caption, concat, snr-range.
    #[arg(long)]
    pub protocol: String,
    /// Output set directory.
    #[arg(long)]
    pub out: PathBuf,
    /// 0db: mixtures per class.
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    /// 0db: anchor segment length in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub seg_seconds: f64,
    /// lufs: comma-separated clean target ids.
    #[arg(long, value_delimiter = ',')]
    pub clean_ids: Vec<String>,
    /// lufs: use the first N manifest items as clean targets.
    #[arg(long, conflicts_with = "clean_ids")]
    pub clean_count: Option<usize>,
    /// lufs/concat: mixtures per target.
    #[arg(long, default_value_t = 10)]
    pub n_per: usize,
    #[arg(long, default_value_t = -35.0, allow_hyphen_values = true)]
    pub lufs_min: f64,
    #[arg(long, default_value_t = -25.0, allow_hyphen_values = true)]
    pub lufs_max: f64,
    /// caption: backgrounds per target.
    #[arg(long, default_value_t = 5)]
    pub n_backgrounds: usize,
    /// snr-range: number of records.
    #[arg(long, default_value_t = 3000)]
    pub n_total: usize,
    #[arg(long, default_value_t = -15.0, allow_hyphen_values = true)]
    pub snr_min: f64,
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    pub snr_max: f64,
    /// Resample the corpus to this rate (default: the first item's rate).
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn jobs(flag: Option<usize>, file: &FileConfig) -> usize {
    flag.or(file.jobs).unwrap_or_else(rayon::current_num_threads).max(1)
}

fn cmd_bench_build(a: BenchBuildArgs, seed: u64, file: &FileConfig) -> Res {
    let protocol: Protocol = a.protocol.parse()?;
    let manifest = load_manifest(&a.manifest)?;
    let params = match protocol {
        Protocol::ZeroDb => ProtocolParams::ZeroDb {
            per_class: a.per_class,
            seg_seconds: a.seg_seconds,
        },
        Protocol::Lufs => {
            let clean_ids = match a.clean_count {
                Some(n) => manifest.items.iter().take(n).map(|i| i.id.clone()).collect(),
                None => a.clean_ids.clone(),
            };
            if clean_ids.is_empty() {
                return Err(CliError::Usage("the lufs protocol needs --clean-ids or --clean-count".into()));
            }
            ProtocolParams::Lufs {
                clean_ids,
                n_per: a.n_per,
                lufs_range: (a.lufs_min, a.lufs_max),
            }
        }
        Protocol::Caption => ProtocolParams::Caption {
            n_backgrounds: a.n_backgrounds,
        },
        Protocol::Concat => ProtocolParams::Concat { n_per: a.n_per },
        Protocol::SnrRange => ProtocolParams::SnrRange {
            n_total: a.n_total,
            snr_range: (a.snr_min, a.snr_max),
        },
    };
    let corpus = Corpus::load(&manifest, a.sample_rate)?;
    let jobs = jobs(a.jobs, file);
    let built = build_set(&corpus, &params, seed, jobs)?;
    write_set(&a.out, &built)?;
    let config = json!({
        "manifest": a.manifest,
        "params": to_value(&params),
        "corpus_hash": corpus.hash(),
        "sample_rate": corpus.sample_rate(),
        "jobs": jobs,
        "skipped_manifest_items": manifest.skipped.len(),
    });
    write_run_manifest(&a.out.join(RUN_FILE), "bench-build", seed, object(config))?;
    println!(
        "{} records ({} targets skipped) written to {}",
        built.set.records.len(),
        built.set.skipped.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out corpus for periodic evaluation (default: the training corpus).
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    /// Output directory for model.ckpt, train_log.csv and run.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Model preset: default, tiny or full-scale.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_max: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_items: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from <out>/model.ckpt.
    #[arg(long)]
    pub resume: bool,
}

fn cmd_train(a: TrainArgs, seed: u64, file: &FileConfig) -> Res {
    let model_cfg = file_model_config(file, a.preset.as_deref())?;
    let mut cfg = file_train_config(file)?;
    cfg.seed = seed;
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = a.segment_seconds {
        cfg.segment_seconds = v;
    }
    if let Some(v) = a.snr_min {
        cfg.snr_range_db.0 = v;
    }
    if let Some(v) = a.snr_max {
        cfg.snr_range_db.1 = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.eval_items {
        cfg.eval_items = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let outputs = TrainOutputs {
        checkpoint: a.out.join(CHECKPOINT_FILE),
        log: a.out.join(LOG_FILE),
    };
    let load = |p: &Path, rate: u32| -> Res<_> { Ok(Corpus::load(&load_manifest(p)?, Some(rate))?.to_training()?) };
    create_dir(&a.out)?;
    let outcome = if a.resume {
        let ck = lasskit::model::Checkpoint::read(&outputs.checkpoint)?;
        let rate = ck.header.config.sample_rate;
        let corpus = load(&a.manifest, rate)?;
        let eval = a.eval_manifest.as_deref().map(|p| load(p, rate)).transpose()?;
        resume(&corpus, eval.as_ref(), a.max_steps, &outputs)?
    } else {
        let corpus = load(&a.manifest, model_cfg.sample_rate)?;
        let eval = a.eval_manifest.as_deref().map(|p| load(p, model_cfg.sample_rate)).transpose()?;
        let config = json!({
            "manifest": a.manifest,
            "eval_manifest": a.eval_manifest,
            "model": to_value(&model_cfg),
            "train": to_value(&cfg),
        });
        write_run_manifest(&a.out.join(RUN_FILE), "train", seed, object(config))?;
        train(&corpus, eval.as_ref(), &model_cfg, &cfg, &outputs)?
    };
    if a.resume {
        let config = json!({ "resumed_from": outputs.checkpoint, "max_steps": a.max_steps });
        write_run_manifest(&a.out.join("run.resume.json"), "train --resume", seed, object(config))?;
    }
    match outcome.last_eval_sdri {
        Some(v) => println!("trained to step {}; held-out SDRi {v:.2} dB", outcome.final_step),
        None => println!("trained to step {}", outcome.final_step),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub out: PathBuf,
    /// External embedding JSONL for queries outside the model's vocabulary.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

fn external(path: Option<&Path>) -> Res<Option<BTreeMap<String, QueryEmbedding>>> {
    Ok(path.map(load_external_embeddings).transpose()?)
}

fn cmd_separate(a: SeparateArgs, seed: u64) -> Res {
    let sep = Separator::load(&a.checkpoint)?;
    let ext = external(a.embeddings.as_deref())?;
    let e = sep.resolve_query(&a.query, ext.as_ref())?;
    let input = read_wav(&a.input)?;
    let rate = sep.config().sample_rate;
    let (est, _) = sep.forward(&resample(&input, rate)?, &e)?;
    let mut out = resample(&est, input.sample_rate())?.into_samples();
    out.resize(input.len(), 0.0);
    write_wav(&a.out, &AudioClip::new(out, input.sample_rate())?, WavFormat::Float32)?;
    let config = json!({
        "checkpoint": a.checkpoint,
        "input": a.input,
        "query": a.query,
        "embedding_source": to_value(&format!("{:?}", e.source())),
        "embeddings": a.embeddings,
    });
    write_run_manifest(&sidecar_manifest(&a.out), "separate", seed, object(config))?;
    println!("separated {:?} into {}", a.query, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Set directory written by bench-build.
    #[arg(long)]
    pub set: PathBuf,
    #[arg(long, required_unless_present_any = ["oracle", "passthrough"])]
    pub checkpoint: Option<PathBuf>,
    /// Ideal-mask upper bound instead of a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "passthrough"])]
    pub oracle: bool,
    /// Use the mixture itself as the estimate.
    #[arg(long, conflicts_with = "checkpoint")]
    pub passthrough: bool,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory for report.{csv,json,md} (default: <set>/reports).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset name in the report (default: the set directory name).
    #[arg(long)]
    pub dataset: Option<String>,
    /// Also compute segmental SNR.
    #[arg(long)]
    pub ssnr: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn cmd_evaluate(a: EvaluateArgs, seed: u64, file: &FileConfig) -> Res {
    let set = read_set(&a.set)?;
    let sep = a.checkpoint.as_deref().map(Separator::load).transpose()?;
    let ext = external(a.embeddings.as_deref())?;
    let (model, label) = match (&sep, a.oracle, a.passthrough) {
        (Some(sep), _, _) => (
            EvalModel::Separator {
                sep,
                external: ext.as_ref(),
            },
            "model",
        ),
        (None, true, _) => {
            let d = file_model_config(file, None)?;
            (
                EvalModel::Oracle {
                    stft: d.stft,
                    ceiling: d.mask_ceiling,
                },
                "oracle",
            )
        }
        (None, false, true) => (EvalModel::PassThrough, "pass-through"),
        _ => return Err(CliError::Usage("give --checkpoint, --oracle or --passthrough".into())),
    };
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.set
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| set.params.protocol().name().to_string())
    });
    let jobs = jobs(a.jobs, file);
    let opts = EvalOptions {
        dataset,
        jobs,
        with_ssnr: a.ssnr,
        seed,
    };
    let report = evaluate(&a.set, &set, &model, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| a.set.join("reports"));
    if report.records.is_empty() {
        return Err(CliError::Partial(format!(
            "all {} records failed; first reason: {}",
            report.failed.len(),
            report.failed.first().map_or("none", |f| f.reason.as_str())
        )));
    }
    for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Markdown] {
        emit_report(&report, f, label, &out.join(format!("report.{}", f.extension())))?;
    }
    let config = json!({
        "set": a.set,
        "model": label,
        "checkpoint": a.checkpoint,
        "embeddings": a.embeddings,
        "jobs": jobs,
        "ssnr": a.ssnr,
    });
    write_run_manifest(&out.join(RUN_FILE), "evaluate", seed, object(config))?;
    if !report.failed.is_empty() {
        log::warn!("{} of {} records failed", report.failed.len(), set.records.len());
        eprintln!("warning: {} of {} records failed", report.failed.len(), set.records.len());
    }
    let mean = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.2}"));
    println!(
        "{}: {} records, SI-SDR {} dB, SDRi {} dB; reports in {}",
        report.dataset,
        report.aggregates.count,
        mean(report.mean_si_sdr()),
        mean(report.mean_sdri()),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Check this checkpoint's model (default: a freshly initialized model
    /// from the config file, or the tiny preset).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Mixtures in the probe batch.
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Samples per probe mixture.
    #[arg(long, default_value_t = 64)]
    pub len: usize,
    /// Negative control: scale one analytic gradient by 1.1.
    #[arg(long)]
    pub corrupt: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_grad_check(a: GradCheckArgs, seed: u64, file: &FileConfig) -> Res {
    let sep = match &a.checkpoint {
        Some(p) => Separator::load(p)?,
        None => {
            let preset = a.preset.as_deref().or(if file.model.is_empty() { Some("tiny") } else { None });
            let cfg = file_model_config(file, preset)?;
            let vocab = build_vocab(&["a", "b"], cfg.d_query, seed)?;
            Separator::new(cfg, &vocab, seed)?
        }
    };
    let sample = random_grad_sample(&sep, a.batch, a.len, seed)?;
    let cfg = GradCheckConfig {
        eps: a.eps,
        samples: a.samples,
        threshold: a.threshold,
        seed,
        corrupt: a.corrupt,
    };
    let report = grad_check(&sep, &sample, &cfg)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json(out, &to_value(&report))?;
        let config = json!({ "checkpoint": a.checkpoint, "check": format!("{cfg:?}") });
        write_run_manifest(&sidecar_manifest(out), "grad-check", seed, object(config))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Partial(format!(
            "gradient check failed: max relative error {:e} (threshold {:e})",
            report.max_rel_error, report.threshold
        )))
    }
}

#[derive(Debug, Args)]
pub struct EmbedImportArgs {
    /// JSONL lines of {"key": ..., "vec": [...]}.
    #[arg(long)]
    pub input: PathBuf,
    /// Table file (JSON) readable by the query module.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_embed_import(a: EmbedImportArgs, seed: u64) -> Res {
    let map = load_external_embeddings(&a.input)?;
    let vocab = Vocabulary::from_embeddings(&map)?;
    vocab.save(&a.out)?;
    let config = json!({ "input": a.input, "entries": vocab.len(), "dim": vocab.dim() });
    write_run_manifest(&sidecar_manifest(&a.out), "embed-import", seed, object(config))?;
    println!("{} embeddings of dimension {} written to {}", vocab.len(), vocab.dim(), a.out.display());
    Ok(())
}
