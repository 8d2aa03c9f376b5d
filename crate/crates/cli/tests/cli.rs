use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::{tempdir, TempDir};

fn lasskit<S: AsRef<OsStr>>(args: &[S]) -> Output {
    lasskit_env(args, &[])
}

fn lasskit_env<S: AsRef<OsStr>>(args: &[S], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lasskit"));
    c.args(args).env_remove("LASSKIT_SEED");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a mono float WAV without going through the library.
fn write_wav(path: &Path, samples: &[f32], rate: u32) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &v in samples {
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
}

fn read_wav(path: &Path) -> Vec<f64> {
    hound::WavReader::open(path)
        .unwrap()
        .samples::<f32>()
        .map(|s| s.unwrap() as f64)
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn sources(dir: &Path) -> (PathBuf, PathBuf) {
    let a: Vec<f32> = (0..4000).map(|i| (i as f32 * 0.2).sin() * 0.4).collect();
    let b: Vec<f32> = (0..3000).map(|i| ((i * 7919 % 1000) as f32 / 1000.0 - 0.5) * 0.6).collect();
    let (pa, pb) = (dir.join("a.wav"), dir.join("b.wav"));
    write_wav(&pa, &a, 8000);
    write_wav(&pb, &b, 8000);
    (pa, pb)
}

#[test]
fn mix_hits_requested_snr() {
    let d = tempdir().unwrap();
    let (a, b) = sources(d.path());
    for snr in ["0", "15", "-15"] {
        let out = d.path().join(format!("m{snr}"));
        ok(&lasskit(&["mix", s(&a), s(&b), "--snr", snr, "--out", s(&out)]));
        let side = json(&out.join("mix.json"));
        let want: f64 = snr.parse().unwrap();
        assert!((side["snr_db_measured"].as_f64().unwrap() - want).abs() < 1e-6);
        let t = read_wav(&out.join("target.wav"));
        let i = read_wav(&out.join("interferer.wav"));
        assert_eq!(t.len(), 4000);
        assert_eq!(i.len(), 4000);
        let measured = 10.0 * (energy(&t) / energy(&i)).log10();
        assert!((measured - want).abs() < 1e-5, "{measured}");
        assert!(out.join("run.json").exists());
    }
}

#[test]
fn mix_loudness_mode() {
    let d = tempdir().unwrap();
    let (a, b) = sources(d.path());
    let out = d.path().join("m");
    ok(&lasskit(&[
        "mix",
        s(&a),
        s(&b),
        "--lufs-target",
        "-30",
        "--lufs-interferer",
        "-28",
        "--out",
        s(&out),
    ]));
    assert_eq!(json(&out.join("mix.json"))["clip_guard_scale"], 1.0);
}

#[test]
fn mix_silent_input_exits_2() {
    let d = tempdir().unwrap();
    let (a, _) = sources(d.path());
    let silent = d.path().join("silent.wav");
    write_wav(&silent, &[0.0; 2000], 8000);
    let out = lasskit(&["mix", s(&a), s(&silent), "--snr", "0", "--out", s(&d.path().join("m"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("SilentSource"), "{}", stderr(&out));
}

struct Toy {
    _dir: TempDir,
    root: PathBuf,
}

fn toy(per_class: &str, seconds: (&str, &str)) -> Toy {
    let dir = tempdir().unwrap();
    let root = dir.path().to_path_buf();
    ok(&lasskit(&[
        "toy-corpus",
        "--out",
        s(&root.join("corpus")),
        "--clips-per-class",
        per_class,
        "--min-seconds",
        seconds.0,
        "--max-seconds",
        seconds.1,
        "--seed",
        "4",
    ]));
    Toy { _dir: dir, root }
}

impl Toy {
    fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.jsonl")
    }

    fn build(&self, name: &str, extra: &[&str]) -> (Output, PathBuf) {
        let out = self.root.join(name);
        let m = self.manifest();
        let mut args = vec!["bench-build", "--manifest", s(&m), "--out", s(&out)];
        args.extend_from_slice(extra);
        (lasskit(&args), out)
    }
}

#[test]
fn bench_build_is_deterministic() {
    let t = toy("3", ("1.2", "1.5"));
    let args = ["--protocol", "0db", "--per-class", "4", "--seed", "9", "--jobs", "1"];
    let (o1, a) = t.build("a", &args);
    ok(&o1);
    let mut args8 = args.to_vec();
    args8[7] = "8";
    let (o2, b) = t.build("b", &args8);
    ok(&o2);
    let set_a = fs::read(a.join("set.json")).unwrap();
    assert_eq!(set_a, fs::read(b.join("set.json")).unwrap());
    assert_eq!(json(&a.join("set.json"))["records"].as_array().unwrap().len(), 8);
    let (o3, c) = t.build("c", &["--protocol", "0db", "--per-class", "4", "--seed", "10"]);
    ok(&o3);
    assert_ne!(set_a, fs::read(c.join("set.json")).unwrap());
}

#[test]
fn bench_build_unknown_protocol_lists_names() {
    let t = toy("1", ("1.2", "1.3"));
    let (o, _) = t.build("x", &["--protocol", "music"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    for p in ["0db", "lufs", "caption", "concat", "snr-range"] {
        assert!(e.contains(p), "{e}");
    }
}

#[test]
fn bench_build_every_protocol() {
    let t = toy("3", ("0.6", "1.2"));
    for (name, extra) in [
        ("lufs", vec!["--protocol", "lufs", "--clean-count", "2", "--n-per", "3"]),
        ("caption", vec!["--protocol", "caption", "--n-backgrounds", "2"]),
        ("concat", vec!["--protocol", "concat", "--n-per", "2"]),
        ("snr", vec!["--protocol", "snr-range", "--n-total", "7"]),
    ] {
        let (o, dir) = t.build(name, &extra);
        assert!(o.status.success() || name == "caption", "{name}: {}", stderr(&o));
        if name == "caption" {
            // Toy items carry no captions.
            assert_eq!(code(&o), 2);
            continue;
        }
        let n = json(&dir.join("set.json"))["records"].as_array().unwrap().len();
        assert_eq!(n, [("lufs", 6), ("concat", 12), ("snr", 7)].iter().find(|x| x.0 == name).unwrap().1);
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

const TINY: &str = "[model]\npreset = \"tiny\"\n[train]\nbatch_size = 2\nsegment_seconds = 0.05\neval_items = 4\n";

#[test]
fn train_zero_steps_writes_initial_checkpoint() {
    let t = toy("2", ("0.3", "0.4"));
    let cfg = write_config(&t.root, TINY);
    let out = t.root.join("run");
    ok(&lasskit(&[
        "train", "--config", s(&cfg), "--manifest", s(&t.manifest()), "--out", s(&out), "--max-steps", "0",
    ]));
    assert!(out.join("model.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap(), "step,loss,eval_sdri,wall_ms\n");
    let run = json(&out.join("run.json"));
    assert_eq!(run["config"]["train"]["learning_rate"], 1e-3);
    assert_eq!(run["config"]["model"]["channels"], serde_json::json!([2, 4]));
}

fn log_without_wall(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn resumed_training_reproduces_the_log() {
    let t = toy("2", ("0.3", "0.4"));
    let cfg = write_config(&t.root, TINY);
    let manifest = t.manifest();
    let train = |out: &Path, steps: &str, resume: bool| {
        let mut a = vec![
            "train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(out), "--max-steps", steps,
            "--eval-every", "2", "--checkpoint-every", "2",
        ];
        if resume {
            a.push("--resume");
        }
        ok(&lasskit(&a));
    };
    let full = t.root.join("full");
    train(&full, "6", false);
    let split = t.root.join("split");
    train(&split, "3", false);
    train(&split, "6", true);
    let a = log_without_wall(&full.join("train_log.csv"));
    assert_eq!(a.len(), 7);
    assert_eq!(a, log_without_wall(&split.join("train_log.csv")));
    assert_eq!(fs::read(full.join("model.ckpt")).unwrap(), fs::read(split.join("model.ckpt")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let t = toy("1", ("0.3", "0.4"));
    let cfg = write_config(&t.root, "[train]\nlearning_rat = 0.1\n");
    let o = lasskit(&["train", "--config", s(&cfg), "--manifest", s(&t.manifest()), "--out", s(&t.root.join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"));
    let o = lasskit(&["train", "--manifest", s(&t.manifest()), "--out", s(&t.root.join("r")), "--preset", "huge"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_precedence() {
    let t = toy("1", ("0.3", "0.4"));
    let run = |args: &[&str], env: &[(&str, &str)]| {
        let out = t.root.join("seeded");
        let mut a = vec!["toy-corpus", "--out", s(&out), "--clips-per-class", "1"];
        a.extend_from_slice(args);
        ok(&lasskit_env(&a, env));
        json(&out.join("run.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[], &[]), 0);
    assert_eq!(run(&[], &[("LASSKIT_SEED", "17")]), 17);
    let cfg = write_config(&t.root, "seed = 5\n");
    assert_eq!(run(&["--config", s(&cfg)], &[("LASSKIT_SEED", "17")]), 5);
    assert_eq!(run(&["--config", s(&cfg), "--seed", "3"], &[("LASSKIT_SEED", "17")]), 3);
}

#[test]
fn separate_and_query_handling() {
    let t = toy("2", ("0.3", "0.4"));
    let cfg = write_config(&t.root, TINY);
    let run = t.root.join("run");
    ok(&lasskit(&[
        "train", "--config", s(&cfg), "--manifest", s(&t.manifest()), "--out", s(&run), "--max-steps", "2",
    ]));
    let ckpt = run.join("model.ckpt");
    let input = t.root.join("corpus/audio/tone_0000.wav");
    let out = t.root.join("sep.wav");
    ok(&lasskit(&["separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--query", "tone", "--out", s(&out)]));
    assert_eq!(read_wav(&out).len(), read_wav(&input).len());
    assert!(t.root.join("sep.wav.run.json").exists());

    let o = lasskit(&["separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--query", "dog bark", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dog bark"));

    let emb = t.root.join("emb.jsonl");
    fs::write(&emb, "{\"key\": \"dog bark\", \"vec\": [0.5, -0.5, 0.5, 0.5]}\n").unwrap();
    ok(&lasskit(&[
        "separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--query", "Dog  Bark", "--out", s(&out),
        "--embeddings", s(&emb),
    ]));

    let o = lasskit(&["separate", "--checkpoint", s(&t.root.join("missing.ckpt")), "--input", s(&input), "--query", "tone", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_baselines_and_worker_independence() {
    let t = toy("2", ("1.2", "1.4"));
    let (o, set) = t.build("set", &["--protocol", "0db", "--per-class", "3"]);
    ok(&o);
    let rep = |extra: &[&str], name: &str| {
        let out = t.root.join(name);
        let mut a = vec!["evaluate", "--set", s(&set), "--out", s(&out)];
        a.extend_from_slice(extra);
        ok(&lasskit(&a));
        out
    };
    let pt = rep(&["--passthrough"], "pt");
    assert_eq!(json(&pt.join("report.json"))["aggregates"]["sdri"]["mean"], 0.0);
    let o1 = rep(&["--oracle", "--jobs", "1"], "o1");
    let o8 = rep(&["--oracle", "--jobs", "8"], "o8");
    let r = json(&o1.join("report.json"));
    assert!(r["aggregates"]["sdri"]["mean"].as_f64().unwrap() > 15.0);
    assert_eq!(fs::read(o1.join("report.json")).unwrap(), fs::read(o8.join("report.json")).unwrap());
    assert_eq!(fs::read(o1.join("report.csv")).unwrap(), fs::read(o8.join("report.csv")).unwrap());
    let md = fs::read_to_string(o1.join("report.md")).unwrap();
    assert!(md.contains("SI-SDR (dB)") && md.contains("SDRi (dB)") && md.contains("| oracle |"));
}

#[test]
fn evaluate_all_failed_exits_1() {
    let t = toy("2", ("1.2", "1.4"));
    let (o, set) = t.build("set", &["--protocol", "0db", "--per-class", "1"]);
    ok(&o);
    let cfg = write_config(&t.root, "[model]\npreset = \"tiny\"\nsample_rate = 16000\n");
    let run = t.root.join("run");
    let other = tempdir().unwrap();
    let m = other.path().join("c");
    ok(&lasskit(&["toy-corpus", "--out", s(&m), "--clips-per-class", "1", "--sample-rate", "16000", "--min-seconds", "0.3", "--max-seconds", "0.4"]));
    ok(&lasskit(&[
        "train", "--config", s(&cfg), "--manifest", s(&m.join("manifest.jsonl")), "--out", s(&run), "--max-steps", "0",
    ]));
    // Rate mismatch on every record.
    let o = lasskit(&["evaluate", "--set", s(&set), "--checkpoint", s(&run.join("model.ckpt"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("all 2 records failed"));
}

#[test]
fn grad_check_passes_and_control_fails() {
    let d = tempdir().unwrap();
    let out = d.path().join("gc.json");
    ok(&lasskit(&["grad-check", "--out", s(&out)]));
    let r = json(&out);
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    let o = lasskit(&["grad-check", "--corrupt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gradient check failed"));
}

#[test]
fn embed_import_writes_table() {
    let d = tempdir().unwrap();
    let input = d.path().join("e.jsonl");
    fs::write(&input, "{\"key\": \"Tone\", \"vec\": [3, 4]}\n{\"key\": \"noise\", \"vec\": [1, 0]}\n").unwrap();
    let out = d.path().join("table.json");
    ok(&lasskit(&["embed-import", "--input", s(&input), "--out", s(&out)]));
    let v = json(&out);
    assert!(v.to_string().contains("tone"));
    fs::write(&input, "{\"key\": \"x\", \"vec\": [1, 0]}\nnot json\n").unwrap();
    let o = lasskit(&["embed-import", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"));
}
