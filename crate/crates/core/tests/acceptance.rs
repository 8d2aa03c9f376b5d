//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use lasskit::bench::{
    build_set, evaluate, load_manifest, set_json, write_set, Corpus, CorpusEntry, EvalModel, EvalOptions,
    ProtocolParams,
};
use lasskit::dsp::wav::{write_wav, WavFormat};
use lasskit::dsp::{apply_mask, istft, stft, AudioClip, MaskPair, StftConfig};
use lasskit::metrics::{sdri, si_sdr};
use lasskit::mixing::{integrated_loudness, mix_at_snr};
use lasskit::model::{ModelConfig, Separator};
use lasskit::query::{build_vocab, EmbeddingSource, QueryEmbedding};
use lasskit::training::toy::{synthesize_toy_clips, ToyCorpusConfig};
use lasskit::training::{grad_check, random_grad_sample, train, GradCheckConfig, TrainConfig, TrainOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn noise(len: usize, rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new((0..len).map(|_| StandardNormal.sample(&mut rng)).collect(), rate).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn stft_round_trip() -> Outcome {
    let x = noise(5 * 32_000, 32_000, 1);
    let cfg = StftConfig::new(1024, 320);
    let t = Instant::now();
    let y = istft(&stft(&x, &cfg).unwrap(), 32_000).unwrap();
    let dt = t.elapsed();
    let err = max_abs_diff(x.samples(), y.samples());
    outcome(
        err < 1e-6 && dt < Duration::from_secs(1) && y.len() == x.len(),
        format!("max abs error {err:.2e}, {:.0} ms", dt.as_secs_f64() * 1e3),
    )
}

fn unit_mask_identity() -> Outcome {
    let x = noise(3 * 16_000, 16_000, 2);
    let cfg = StftConfig::new(1024, 320);
    let spec = stft(&x, &cfg).unwrap();
    let masked = apply_mask(&spec, &MaskPair::unit(spec.frames(), spec.bins())).unwrap();
    let y = istft(&masked, 16_000).unwrap();
    let err = max_abs_diff(x.samples(), y.samples());
    outcome(err < 1e-6, format!("max abs error {err:.2e} through stft, unit mask, istft"))
}

fn snr_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let len = rng.random_range(800..4000);
        let s1 = noise(len, 8000, 10 * i).scaled(rng.random_range(0.01..2.0));
        let s2 = noise(len, 8000, 10 * i + 1).scaled(rng.random_range(0.01..2.0));
        let snr = rng.random_range(-15.0..=15.0);
        let m = mix_at_snr(&s1, &s2, snr).unwrap();
        let measured = 10.0 * (energy(m.target.samples()) / energy(m.interferer_scaled.samples())).log10();
        worst = worst.max((measured - snr).abs());
    }
    let dt = t.elapsed();
    outcome(
        worst < 1e-6 && dt < Duration::from_secs(10),
        format!("worst |measured − requested| {worst:.2e} dB over 1000 triples, {:.2} s", dt.as_secs_f64()),
    )
}

fn loudness_oracle() -> Outcome {
    let rate = 48_000;
    let sine = AudioClip::new(
        (0..5 * rate).map(|i| (2.0 * PI * 997.0 * i as f64 / rate as f64).sin()).collect(),
        rate as u32,
    )
    .unwrap();
    let full = integrated_loudness(&sine).unwrap();
    let half = integrated_loudness(&sine.scaled(0.5)).unwrap();
    let shift = full - half;
    let abs_ok = (full - (-3.70)).abs() <= 0.15;
    let shift_ok = (shift - 6.02).abs() <= 0.05;
    let mut d = format!("full-scale 997 Hz sine {full:.3} LUFS (want −3.70 ± 0.15), ×0.5 shift {shift:.3} LU (want 6.02 ± 0.05)");
    if !abs_ok {
        d.push_str("; K-weighting gain at 997 Hz is not unity, BS.1770 gives −3.01");
    }
    outcome(abs_ok && shift_ok, d)
}

fn tiny_separator(seed: u64) -> Separator {
    let cfg = ModelConfig::tiny();
    let vocab = build_vocab(&["tone", "noise"], cfg.d_query, seed).unwrap();
    Separator::new(cfg, &vocab, seed).unwrap()
}

fn metric_identities() -> Outcome {
    let r = noise(8000, 8000, 4);
    let mix = r.add(&noise(8000, 8000, 5).scaled(0.7)).unwrap();
    let zero = sdri(&mix, &mix, &r).unwrap();
    let est = r.add(&noise(8000, 8000, 6).scaled(0.3)).unwrap();
    let base = si_sdr(&est, &r).unwrap();
    let drift = [1e-3, 0.5, 3.0, 1e3]
        .iter()
        .map(|&k| (si_sdr(&est.scaled(k), &r).unwrap() - base).abs())
        .fold(0.0, f64::max);
    let sep = tiny_separator(7);
    let sample = random_grad_sample(&sep, 2, 64, 7).unwrap();
    let corrupt = GradCheckConfig {
        corrupt: true,
        seed: 7,
        ..Default::default()
    };
    let control = grad_check(&sep, &sample, &corrupt).unwrap();
    outcome(
        zero == 0.0 && drift < 1e-9 && !control.passed,
        format!(
            "SDRi(mix, mix, ref) = {zero}, SI-SDR scale drift {drift:.1e} dB, corrupted check max rel error {:.3} ({})",
            control.max_rel_error,
            if control.passed { "not detected" } else { "detected" }
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let sep = tiny_separator(8);
    let sample = random_grad_sample(&sep, 2, 64, 8).unwrap();
    let t = Instant::now();
    let rep = grad_check(
        &sep,
        &sample,
        &GradCheckConfig {
            seed: 8,
            ..Default::default()
        },
    )
    .unwrap();
    let dt = t.elapsed();
    outcome(
        rep.passed && rep.max_rel_error < 1e-4 && dt < Duration::from_secs(120),
        format!(
            "max rel error {:.2e} over {} entries ({} kink-skipped) of {} parameters, {:.1} s",
            rep.max_rel_error,
            rep.checked,
            rep.skipped_kinks,
            rep.parameter_count,
            dt.as_secs_f64()
        ),
    )
}

fn toy_corpus(seed: u64, per_class: usize) -> Vec<lasskit::training::LabeledClip> {
    synthesize_toy_clips(&ToyCorpusConfig {
        clips_per_class: per_class,
        seed,
        ..Default::default()
    })
    .unwrap()
}

const TOY_STEPS: u64 = 500;

/// Trained toy model plus its held-out 0 dB set, shared by two criteria.
struct ToyRun {
    sep: Separator,
    set_dir: tempfile::TempDir,
    set: lasskit::bench::BenchmarkSet,
    minutes: f64,
}

fn toy_run() -> ToyRun {
    let started = Instant::now();
    let train_clips = toy_corpus(100, 32);
    let corpus = lasskit::training::TrainingCorpus::new(train_clips).unwrap();
    let held: Vec<CorpusEntry> = toy_corpus(200, 16).iter().map(CorpusEntry::from).collect();
    let held = Corpus::from_entries(held).unwrap();
    let eval_corpus = held.to_training().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_steps: TOY_STEPS,
        eval_every: 250,
        checkpoint_every: 0,
        seed: 5,
        ..Default::default()
    };
    let outputs = TrainOutputs {
        checkpoint: dir.path().join("model.ckpt"),
        log: dir.path().join("log.csv"),
    };
    let res = train(&corpus, Some(&eval_corpus), &ModelConfig::default(), &cfg, &outputs).unwrap();
    let set_dir = tempfile::tempdir().unwrap();
    let params = ProtocolParams::ZeroDb {
        per_class: 32,
        seg_seconds: 1.0,
    };
    let built = build_set(&held, &params, 6, 4).unwrap();
    write_set(set_dir.path(), &built).unwrap();
    ToyRun {
        sep: res.separator,
        set_dir,
        set: built.set,
        minutes: started.elapsed().as_secs_f64() / 60.0,
    }
}

fn eval_opts() -> EvalOptions {
    EvalOptions {
        dataset: "toy-0db".into(),
        jobs: 4,
        with_ssnr: false,
        seed: 0,
    }
}

fn toy_separation(run: &ToyRun) -> Outcome {
    let model = EvalModel::Separator {
        sep: &run.sep,
        external: None,
    };
    let rep = evaluate(run.set_dir.path(), &run.set, &model, &eval_opts()).unwrap();
    let cfg = run.sep.config();
    let oracle = EvalModel::Oracle {
        stft: cfg.stft,
        ceiling: cfg.mask_ceiling,
    };
    let orep = evaluate(run.set_dir.path(), &run.set, &oracle, &eval_opts()).unwrap();
    let (sdri_m, si_m) = (rep.mean_sdri().unwrap(), rep.mean_si_sdr().unwrap());
    let sdri_o = orep.mean_sdri().unwrap();
    outcome(
        sdri_m >= 5.0 && si_m >= 3.0 && sdri_o > sdri_m && rep.failed.is_empty() && run.minutes <= 60.0,
        format!(
            "{} held-out records after {TOY_STEPS} steps: SDRi {sdri_m:.2} dB, SI-SDR {si_m:.2} dB, oracle SDRi {sdri_o:.2} dB, {:.1} min",
            rep.aggregates.count, run.minutes
        ),
    )
}

fn invalid_query(run: &ToyRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = run.sep.config().d_query;
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut ext = BTreeMap::new();
    ext.insert(
        "dog bark".to_string(),
        QueryEmbedding::new(v, EmbeddingSource::External).unwrap().normalize().unwrap(),
    );
    let mut wrong = run.set.clone();
    for r in &mut wrong.records {
        r.query = "dog bark".into();
    }
    let model = EvalModel::Separator {
        sep: &run.sep,
        external: Some(&ext),
    };
    let right = evaluate(run.set_dir.path(), &run.set, &model, &eval_opts()).unwrap();
    let bad = evaluate(run.set_dir.path(), &wrong, &model, &eval_opts()).unwrap();
    let (a, b) = (right.mean_si_sdr().unwrap(), bad.mean_si_sdr().unwrap());
    outcome(
        b < a && bad.failed.is_empty(),
        format!("mean SI-SDR with the class label {a:.2} dB, with \"dog bark\" {b:.2} dB"),
    )
}

fn file_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir.join("audio")).unwrap() {
        let p = e.unwrap().path();
        let h = hex::encode(Sha256::digest(std::fs::read(&p).unwrap()));
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), h);
    }
    out
}

fn captioned_corpus(classes: usize, per: usize, captioned: usize, seconds: f64) -> Vec<CorpusEntry> {
    let mut out = Vec::new();
    for c in 0..classes {
        for k in 0..per {
            let i = c * per + k;
            let mut rng = ChaCha8Rng::seed_from_u64(900 + i as u64);
            let len = (seconds * 8000.0) as usize + rng.random_range(0..800);
            out.push(CorpusEntry {
                id: format!("class{c:02}_{k}"),
                labels: vec![format!("class {c}")],
                captions: if i < captioned { vec![format!("a recording of class {c}")] } else { vec![] },
                audio: noise(len, 8000, 5000 + i as u64).scaled(rng.random_range(0.05..0.25)),
            });
        }
    }
    out
}

fn benchmark_determinism() -> Outcome {
    let corpus = Corpus::from_entries(captioned_corpus(4, 4, 8, 1.2)).unwrap();
    let protocols = [
        ProtocolParams::ZeroDb {
            per_class: 3,
            seg_seconds: 1.0,
        },
        ProtocolParams::Lufs {
            clean_ids: corpus.entries().iter().take(3).map(|e| e.id.clone()).collect(),
            n_per: 3,
            lufs_range: (-35.0, -25.0),
        },
        ProtocolParams::Caption { n_backgrounds: 2 },
        ProtocolParams::Concat { n_per: 1 },
        ProtocolParams::SnrRange {
            n_total: 10,
            snr_range: (-15.0, 15.0),
        },
    ];
    let mut problems = Vec::new();
    let mut records = 0;
    for p in &protocols {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let built_a = build_set(&corpus, p, 21, 1).unwrap();
        write_set(a.path(), &built_a).unwrap();
        write_set(b.path(), &build_set(&corpus, p, 21, 8).unwrap()).unwrap();
        records += built_a.set.records.len();
        let name = p.protocol().name();
        if std::fs::read(a.path().join("set.json")).unwrap() != std::fs::read(b.path().join("set.json")).unwrap() {
            problems.push(format!("{name}: set.json differs"));
        }
        if file_hashes(a.path()) != file_hashes(b.path()) {
            problems.push(format!("{name}: audio hashes differ"));
        }
        let oracle = EvalModel::Oracle {
            stft: StftConfig::new(256, 128),
            ceiling: 2.0,
        };
        let o = |jobs| EvalOptions {
            dataset: name.into(),
            jobs,
            with_ssnr: true,
            seed: 1,
        };
        let r1 = evaluate(a.path(), &built_a.set, &oracle, &o(1)).unwrap();
        let r8 = evaluate(a.path(), &built_a.set, &oracle, &o(8)).unwrap();
        if lasskit::bench::report_json(&r1).unwrap() != lasskit::bench::report_json(&r8).unwrap() {
            problems.push(format!("{name}: reports differ between 1 and 8 jobs"));
        }
        // Guard against a trivially empty comparison.
        if set_json(&built_a.set).unwrap().is_empty() || built_a.set.records.is_empty() {
            problems.push(format!("{name}: empty set"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("5 protocols, {records} records: identical set.json, audio hashes and reports (jobs 1 vs 8)")
        } else {
            problems.join("; ")
        },
    )
}

fn protocol_counts() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let entries = captioned_corpus(50, 2, 20, 0.3);
    let mut lines = String::new();
    for e in &entries {
        let rel = format!("audio/{}.wav", e.id);
        write_wav(dir.path().join(&rel), &e.audio, WavFormat::Float32).unwrap();
        let item = serde_json::json!({
            "id": e.id, "path": rel, "labels": e.labels, "captions": e.captions,
            "duration_s": e.audio.duration_seconds(), "sample_rate": 8000,
        });
        lines.push_str(&format!("{item}\n"));
    }
    std::fs::write(dir.path().join("manifest.jsonl"), lines).unwrap();
    let manifest = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    let corpus = Corpus::load(&manifest, None).unwrap();
    let zero = build_set(
        &corpus,
        &ProtocolParams::ZeroDb {
            per_class: 40,
            seg_seconds: 0.25,
        },
        1,
        4,
    )
    .unwrap();
    let cap = build_set(&corpus, &ProtocolParams::Caption { n_backgrounds: 5 }, 1, 4).unwrap();
    let disjoint = cap.set.records.iter().all(|r| {
        let t = &corpus.entries()[corpus.index_of(&r.target_id).unwrap()];
        r.interferer_ids.iter().all(|b| {
            let b = &corpus.entries()[corpus.index_of(b).unwrap()];
            t.label_set().is_disjoint(&b.label_set())
        })
    });
    let (nz, nc) = (zero.set.records.len(), cap.set.records.len());
    outcome(
        nz == 2000 && nc == 100 && disjoint && corpus.classes().len() == 50,
        format!("0db 50 classes × 40 → {nz} records; caption 20 targets × 5 → {nc} records, label sets disjoint: {disjoint}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, o: Outcome, results: &mut Vec<(&str, Outcome)>| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("stft round trip", stft_round_trip(), &mut results);
    report("unit mask identity", unit_mask_identity(), &mut results);
    report("snr exactness", snr_exactness(), &mut results);
    report("loudness oracle", loudness_oracle(), &mut results);
    report("metric identities", metric_identities(), &mut results);
    report("gradient correctness", gradient_correctness(), &mut results);
    let run = toy_run();
    report("toy separation experiment", toy_separation(&run), &mut results);
    report("benchmark determinism", benchmark_determinism(), &mut results);
    report("protocol count conformance", protocol_counts(), &mut results);
    report("invalid query probe", invalid_query(&run), &mut results);
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
