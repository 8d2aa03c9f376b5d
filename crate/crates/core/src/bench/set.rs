//! Evaluation mixture sets: protocol parameters, per-record synthesis and the
//! on-disk `set.json` + `audio/` layout.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{anchor_segment, Corpus, CorpusEntry, SkippedItem};
use crate::dsp::wav::{read_wav, wav_bytes, WavFormat};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::mixing::{clip_guard_scale, fit_to_length, measured_snr_db, mix_at_snr, normalize_to_loudness, CLIP_GUARD_PEAK};
use crate::seed::{derive_seed, stream_seed};

pub const SET_VERSION: u32 = 1;
pub const SET_FILE: &str = "set.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "0db")]
    ZeroDb,
    #[serde(rename = "lufs")]
    Lufs,
    #[serde(rename = "caption")]
    Caption,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "snr-range")]
    SnrRange,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::ZeroDb,
        Protocol::Lufs,
        Protocol::Caption,
        Protocol::Concat,
        Protocol::SnrRange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::ZeroDb => "0db",
            Protocol::Lufs => "lufs",
            Protocol::Caption => "caption",
            Protocol::Concat => "concat",
            Protocol::SnrRange => "snr-range",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Protocol::ALL.iter().map(|p| p.name()).collect();
            Error::Protocol(format!("unknown protocol {s:?}; valid protocols: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol")]
pub enum ProtocolParams {
    /// Anchor segments from two different classes mixed at 0 dB, `per_class` per class.
    #[serde(rename = "0db")]
    ZeroDb { per_class: usize, seg_seconds: f64 },
    /// Each clean target with `n_per` distinct interferers, both loudness-normalized.
    #[serde(rename = "lufs")]
    Lufs {
        clean_ids: Vec<String>,
        n_per: usize,
        lufs_range: (f64, f64),
    },
    /// Captioned targets with `n_backgrounds` label-disjoint backgrounds at 0 dB.
    #[serde(rename = "caption")]
    Caption { n_backgrounds: usize },
    /// Two concatenated clips truncated to the target, at 0 dB.
    #[serde(rename = "concat")]
    Concat { n_per: usize },
    /// `n_total` label-disjoint pairs at uniformly drawn SNRs.
    #[serde(rename = "snr-range")]
    SnrRange { n_total: usize, snr_range: (f64, f64) },
}

impl ProtocolParams {
    pub fn protocol(&self) -> Protocol {
        match self {
            ProtocolParams::ZeroDb { .. } => Protocol::ZeroDb,
            ProtocolParams::Lufs { .. } => Protocol::Lufs,
            ProtocolParams::Caption { .. } => Protocol::Caption,
            ProtocolParams::Concat { .. } => Protocol::Concat,
            ProtocolParams::SnrRange { .. } => Protocol::SnrRange,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub mixture_path: String,
    pub target_ref_path: String,
    pub interferer_path: String,
    pub query: String,
    pub protocol: Protocol,
    /// Target-to-interferer ratio of the stored stems.
    pub snr_db: f64,
    pub seed: u64,
    pub clip_guard_scale: f64,
    pub target_id: String,
    pub interferer_ids: Vec<String>,
    pub mixture_sha256: String,
    pub target_ref_sha256: String,
    pub interferer_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub version: u32,
    pub params: ProtocolParams,
    pub seed: u64,
    pub corpus_hash: String,
    pub sample_rate: u32,
    pub records: Vec<MixtureRecord>,
    /// Targets the protocol could not use, with reasons.
    pub skipped: Vec<SkippedItem>,
}

/// A set with its encoded WAV files, ready to write.
#[derive(Debug, Clone)]
pub struct BuiltSet {
    pub set: BenchmarkSet,
    /// (relative path, bytes) for every audio file.
    pub files: Vec<(String, Vec<u8>)>,
}

/// What a record is built from before its own RNG takes over.
#[derive(Debug, Clone, Copy)]
enum Job {
    Class(usize),
    Target(usize),
    Pair(usize, usize),
    Free,
}

struct Stems {
    target: AudioClip,
    interferer: AudioClip,
    target_id: String,
    interferer_ids: Vec<String>,
    query: String,
}

fn disjoint(a: &CorpusEntry, b: &CorpusEntry) -> bool {
    a.label_set().is_disjoint(&b.label_set())
}

/// A uniformly chosen caption, or the canonical first label when there are none.
fn caption_query(e: &CorpusEntry, rng: &mut ChaCha8Rng) -> String {
    if e.captions.is_empty() {
        e.class()
    } else {
        e.captions[rng.random_range(0..e.captions.len())].clone()
    }
}

fn pick<'a>(pool: &'a [usize], rng: &mut ChaCha8Rng) -> usize {
    pool[rng.random_range(0..pool.len())]
}

struct Planner<'a> {
    corpus: &'a Corpus,
    params: &'a ProtocolParams,
    seed: u64,
}

impl Planner<'_> {
    fn pool_rng(&self, t: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(stream_seed(self.seed, "pool"), t as u64))
    }

    /// Eligible 0 dB entries per class, in class order.
    fn zero_db_classes(&self, seg_seconds: f64) -> Result<Vec<(String, Vec<usize>)>> {
        let min = (seg_seconds * self.corpus.sample_rate() as f64).round() as usize;
        let classes: Vec<(String, Vec<usize>)> = self
            .corpus
            .classes()
            .into_iter()
            .map(|(c, v)| {
                let ok = v.into_iter().filter(|&i| self.corpus.entries()[i].audio.len() >= min).collect();
                (c, ok)
            })
            .collect();
        if classes.len() < 2 {
            return Err(Error::Protocol("the 0db protocol needs at least two classes".into()));
        }
        if let Some((c, _)) = classes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Protocol(format!("class {c:?} has no clip of at least {seg_seconds} s")));
        }
        Ok(classes)
    }

    fn disjoint_pool(&self, t: usize) -> Vec<usize> {
        let e = self.corpus.entries();
        (0..e.len()).filter(|&j| disjoint(&e[t], &e[j])).collect()
    }

    fn plan(&self) -> Result<(Vec<Job>, Vec<SkippedItem>)> {
        let entries = self.corpus.entries();
        let mut skipped = Vec::new();
        let jobs = match self.params {
            ProtocolParams::ZeroDb { per_class, seg_seconds } => {
                let classes = self.zero_db_classes(*seg_seconds)?;
                (0..classes.len())
                    .flat_map(|c| std::iter::repeat_n(Job::Class(c), *per_class))
                    .collect()
            }
            ProtocolParams::Lufs { clean_ids, n_per, .. } => {
                let clean: Vec<usize> = clean_ids
                    .iter()
                    .map(|id| {
                        self.corpus
                            .index_of(id)
                            .ok_or_else(|| Error::Protocol(format!("clean id {id:?} is not in the corpus")))
                    })
                    .collect::<Result<_>>()?;
                let rest: Vec<usize> = (0..entries.len()).filter(|i| !clean.contains(i)).collect();
                if rest.len() < *n_per {
                    return Err(Error::Protocol(format!(
                        "insufficient interferer pool: {} clips for {n_per} per target",
                        rest.len()
                    )));
                }
                let mut jobs = Vec::with_capacity(clean.len() * n_per);
                for (k, &t) in clean.iter().enumerate() {
                    let mut rng = self.pool_rng(k);
                    for j in sample(&mut rng, rest.len(), *n_per) {
                        jobs.push(Job::Pair(t, rest[j]));
                    }
                }
                jobs
            }
            ProtocolParams::Caption { n_backgrounds } => {
                let mut jobs = Vec::new();
                let mut any_captioned = false;
                for t in 0..entries.len() {
                    if entries[t].captions.is_empty() {
                        continue;
                    }
                    any_captioned = true;
                    let pool = self.disjoint_pool(t);
                    if pool.is_empty() {
                        skipped.push(SkippedItem {
                            id: entries[t].id.clone(),
                            reason: "no label-disjoint background".into(),
                        });
                        continue;
                    }
                    let mut rng = self.pool_rng(t);
                    if pool.len() >= *n_backgrounds {
                        for j in sample(&mut rng, pool.len(), *n_backgrounds) {
                            jobs.push(Job::Pair(t, pool[j]));
                        }
                    } else {
                        log::warn!("{}: only {} backgrounds available, drawing with repeats", entries[t].id, pool.len());
                        for _ in 0..*n_backgrounds {
                            jobs.push(Job::Pair(t, pick(&pool, &mut rng)));
                        }
                    }
                }
                if !any_captioned {
                    return Err(Error::Protocol("the caption protocol needs captioned items".into()));
                }
                jobs
            }
            ProtocolParams::Concat { n_per } => {
                if entries.len() < 3 {
                    return Err(Error::Protocol("the concat protocol needs at least three clips".into()));
                }
                (0..entries.len())
                    .flat_map(|t| std::iter::repeat_n(Job::Target(t), *n_per))
                    .collect()
            }
            ProtocolParams::SnrRange { n_total, snr_range } => {
                if !(snr_range.0 <= snr_range.1 && snr_range.0.is_finite() && snr_range.1.is_finite()) {
                    return Err(Error::Protocol(format!("invalid SNR range {snr_range:?}")));
                }
                if (0..entries.len()).all(|t| self.disjoint_pool(t).is_empty()) {
                    return Err(Error::Protocol("no label-disjoint pair exists in the corpus".into()));
                }
                vec![Job::Free; *n_total]
            }
        };
        if let ProtocolParams::Lufs { lufs_range, .. } = self.params {
            if !(lufs_range.0 <= lufs_range.1 && lufs_range.0.is_finite() && lufs_range.1.is_finite()) {
                return Err(Error::Protocol(format!("invalid loudness range {lufs_range:?}")));
            }
        }
        Ok((jobs, skipped))
    }

    fn stems(&self, job: Job, rng: &mut ChaCha8Rng) -> Result<(Stems, f64)> {
        let e = self.corpus.entries();
        let zero = |t: usize, i: &[usize], target: AudioClip, interferer: AudioClip, query: String| {
            (
                Stems {
                    target,
                    interferer,
                    target_id: e[t].id.clone(),
                    interferer_ids: i.iter().map(|&k| e[k].id.clone()).collect(),
                    query,
                },
                0.0,
            )
        };
        Ok(match (self.params, job) {
            (ProtocolParams::ZeroDb { seg_seconds, .. }, Job::Class(c)) => {
                let classes = self.zero_db_classes(*seg_seconds)?;
                let t = pick(&classes[c].1, rng);
                let mut other = rng.random_range(0..classes.len() - 1);
                if other >= c {
                    other += 1;
                }
                let i = pick(&classes[other].1, rng);
                let target = anchor_segment(&e[t].audio, *seg_seconds)?;
                let interferer = anchor_segment(&e[i].audio, *seg_seconds)?;
                zero(t, &[i], target, interferer, classes[c].0.clone())
            }
            (ProtocolParams::Lufs { lufs_range, .. }, Job::Pair(t, i)) => {
                let interferer = fit_to_length(&e[i].audio, e[t].audio.len(), rng)?;
                let lt = rng.random_range(lufs_range.0..=lufs_range.1);
                let li = rng.random_range(lufs_range.0..=lufs_range.1);
                let (target, _) = normalize_to_loudness(&e[t].audio, lt)?;
                let (interferer, _) = normalize_to_loudness(&interferer, li)?;
                let snr = measured_snr_db(&target, &interferer);
                let stems = Stems {
                    target,
                    interferer,
                    target_id: e[t].id.clone(),
                    interferer_ids: vec![e[i].id.clone()],
                    query: e[t].class(),
                };
                (stems, snr)
            }
            (ProtocolParams::Caption { .. }, Job::Pair(t, b)) => {
                let bg = fit_to_length(&e[b].audio, e[t].audio.len(), rng)?;
                let q = caption_query(&e[t], rng);
                zero(t, &[b], e[t].audio.clone(), bg, q)
            }
            (ProtocolParams::Concat { .. }, Job::Target(t)) => {
                let others: Vec<usize> = (0..e.len()).filter(|&k| k != t).collect();
                let two = sample(rng, others.len(), 2);
                let (a, b) = (others[two.index(0)], others[two.index(1)]);
                let joined: Vec<f64> = e[a].audio.samples().iter().chain(e[b].audio.samples()).copied().collect();
                let joined = AudioClip::new(joined, self.corpus.sample_rate())?;
                let len = e[t].audio.len();
                let bg = if joined.len() >= len {
                    joined.slice(0, len)?
                } else {
                    fit_to_length(&joined, len, rng)?
                };
                let q = caption_query(&e[t], rng);
                zero(t, &[a, b], e[t].audio.clone(), bg, q)
            }
            (ProtocolParams::SnrRange { snr_range, .. }, Job::Free) => {
                let (t, pool) = loop {
                    let t = rng.random_range(0..e.len());
                    let pool = self.disjoint_pool(t);
                    if !pool.is_empty() {
                        break (t, pool);
                    }
                };
                let b = pick(&pool, rng);
                let bg = fit_to_length(&e[b].audio, e[t].audio.len(), rng)?;
                let snr = if snr_range.0 == snr_range.1 {
                    snr_range.0
                } else {
                    rng.random_range(snr_range.0..=snr_range.1)
                };
                let q = caption_query(&e[t], rng);
                let (s, _) = zero(t, &[b], e[t].audio.clone(), bg, q);
                (s, snr)
            }
            _ => unreachable!("job kinds match their protocol"),
        })
    }
}

fn quantize(c: &AudioClip) -> Result<AudioClip> {
    AudioClip::new(c.samples().iter().map(|&v| v as f32 as f64).collect(), c.sample_rate())
}

fn sha256_hex(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

struct RecordOut {
    record: MixtureRecord,
    files: [(String, Vec<u8>); 3],
}

fn synthesize(planner: &Planner, index: usize, job: Job) -> Result<RecordOut> {
    let seed = derive_seed(planner.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stems, snr) = planner.stems(job, &mut rng)?;
    let protocol = planner.params.protocol();
    let (target, interferer, snr_db) = if protocol == Protocol::Lufs {
        (stems.target, stems.interferer, snr)
    } else {
        let m = mix_at_snr(&stems.target, &stems.interferer, snr)?;
        (m.target, m.interferer_scaled, snr)
    };
    let mixture = target.add(&interferer)?;
    let scale = clip_guard_scale(mixture.peak(), CLIP_GUARD_PEAK);
    let target = quantize(&target.scaled(scale))?;
    let interferer = quantize(&interferer.scaled(scale))?;
    let mixture = quantize(&mixture.scaled(scale))?;
    let id = format!("{}_{index:05}", protocol.name().replace('-', "_"));
    let enc = |c: &AudioClip| wav_bytes(c, WavFormat::Float32);
    let files = [
        (format!("audio/{id}_mix.wav"), enc(&mixture)?),
        (format!("audio/{id}_ref.wav"), enc(&target)?),
        (format!("audio/{id}_int.wav"), enc(&interferer)?),
    ];
    let record = MixtureRecord {
        id,
        mixture_path: files[0].0.clone(),
        target_ref_path: files[1].0.clone(),
        interferer_path: files[2].0.clone(),
        query: stems.query,
        protocol,
        snr_db,
        seed,
        clip_guard_scale: scale,
        target_id: stems.target_id,
        interferer_ids: stems.interferer_ids,
        mixture_sha256: sha256_hex(&files[0].1),
        target_ref_sha256: sha256_hex(&files[1].1),
        interferer_sha256: sha256_hex(&files[2].1),
    };
    Ok(RecordOut { record, files })
}

/// Synthesizes every record of a protocol. Each record draws from its own
/// RNG seeded by `(seed, index)`, so `jobs` never changes the output.
pub fn build_set(corpus: &Corpus, params: &ProtocolParams, seed: u64, jobs: usize) -> Result<BuiltSet> {
    let planner = Planner { corpus, params, seed };
    let (plan, skipped) = planner.plan()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let outs: Vec<RecordOut> = pool.install(|| {
        plan.par_iter()
            .enumerate()
            .map(|(i, &job)| synthesize(&planner, i, job))
            .collect::<Result<_>>()
    })?;
    let mut records = Vec::with_capacity(outs.len());
    let mut files = Vec::with_capacity(3 * outs.len());
    for o in outs {
        records.push(o.record);
        files.extend(o.files);
    }
    Ok(BuiltSet {
        set: BenchmarkSet {
            version: SET_VERSION,
            params: params.clone(),
            seed,
            corpus_hash: corpus.hash().to_string(),
            sample_rate: corpus.sample_rate(),
            records,
            skipped,
        },
        files,
    })
}

pub fn set_json(set: &BenchmarkSet) -> Result<String> {
    let mut s = serde_json::to_string_pretty(set)?;
    s.push('\n');
    Ok(s)
}

/// Writes `dir/set.json` and `dir/audio/*.wav`.
pub fn write_set(dir: &Path, built: &BuiltSet) -> Result<()> {
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    for (rel, bytes) in &built.files {
        let p = dir.join(rel);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(SET_FILE);
    fs::write(&p, set_json(&built.set)?).map_err(|e| Error::io(&p, e))
}

pub fn read_set(dir: &Path) -> Result<BenchmarkSet> {
    let p = dir.join(SET_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let set: BenchmarkSet = serde_json::from_str(&text)?;
    if set.version != SET_VERSION {
        return Err(Error::Protocol(format!("unsupported set version {}", set.version)));
    }
    Ok(set)
}

/// (mixture, target reference, scaled interferer) of a record.
pub fn load_record_audio(dir: &Path, r: &MixtureRecord) -> Result<(AudioClip, AudioClip, AudioClip)> {
    Ok((
        read_wav(dir.join(&r.mixture_path))?,
        read_wav(dir.join(&r.target_ref_path))?,
        read_wav(dir.join(&r.interferer_path))?,
    ))
}
