//! JSONL corpus manifests and the loaded, fingerprinted corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::wav::read_wav;
use crate::dsp::{resample, AudioClip};
use crate::error::{Error, Result};
use crate::query::canonicalize;
use crate::training::{LabeledClip, TrainingCorpus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub labels: Vec<String>,
    #[serde(default)]
    pub captions: Vec<String>,
    pub duration_s: f64,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub items: Vec<ManifestItem>,
    pub skipped: Vec<SkippedItem>,
}

impl CorpusManifest {
    pub fn resolve(&self, item: &ManifestItem) -> PathBuf {
        if item.path.is_absolute() {
            item.path.clone()
        } else {
            self.root.join(&item.path)
        }
    }
}

/// Parses and validates a manifest. Items with unreadable audio or no labels
/// are skipped with a warning; duplicate ids and malformed lines are errors.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut m = CorpusManifest {
        root,
        items: Vec::new(),
        skipped: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: ManifestItem = serde_json::from_str(line)
            .map_err(|e| Error::Corpus(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::DuplicateId(item.id));
        }
        let reason = if item.labels.iter().all(|l| canonicalize(l).is_empty()) {
            Some("no labels".to_string())
        } else {
            hound::WavReader::open(m.resolve(&item)).err().map(|e| format!("unreadable audio: {e}"))
        };
        match reason {
            Some(reason) => {
                log::warn!("skipping manifest item {}: {reason}", item.id);
                m.skipped.push(SkippedItem { id: item.id, reason });
            }
            None => m.items.push(item),
        }
    }
    if m.items.is_empty() {
        return Err(Error::Corpus(format!("{}: no valid items", path.display())));
    }
    if !m.skipped.is_empty() {
        log::warn!("{} of {} manifest items skipped", m.skipped.len(), m.skipped.len() + m.items.len());
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub labels: Vec<String>,
    pub captions: Vec<String>,
    pub audio: AudioClip,
}

impl CorpusEntry {
    /// Canonical first label.
    pub fn class(&self) -> String {
        canonicalize(&self.labels[0])
    }

    pub fn label_set(&self) -> BTreeSet<String> {
        self.labels.iter().map(|l| canonicalize(l)).collect()
    }
}

/// Corpus audio in memory at one sample rate, with a content hash.
#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    sample_rate: u32,
    hash: String,
}

impl Corpus {
    pub fn from_entries(entries: Vec<CorpusEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Corpus("empty corpus".into()));
        };
        let sample_rate = first.audio.sample_rate();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if e.labels.is_empty() {
                return Err(Error::Corpus(format!("item {} has no labels", e.id)));
            }
            if e.audio.sample_rate() != sample_rate {
                return Err(Error::RateMismatch(e.audio.sample_rate(), sample_rate));
            }
        }
        let hash = fingerprint(&entries);
        Ok(Self {
            entries,
            sample_rate,
            hash,
        })
    }

    /// Reads every item, resampling to `sample_rate` (the first item's rate when `None`).
    pub fn load(manifest: &CorpusManifest, sample_rate: Option<u32>) -> Result<Self> {
        let mut entries = Vec::with_capacity(manifest.items.len());
        let mut rate = sample_rate;
        for item in &manifest.items {
            let audio = read_wav(manifest.resolve(item))?;
            let target = *rate.get_or_insert(audio.sample_rate());
            entries.push(CorpusEntry {
                id: item.id.clone(),
                labels: item.labels.clone(),
                captions: item.captions.clone(),
                audio: resample(&audio, target)?,
            });
        }
        Self::from_entries(entries)
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Hex SHA-256 over ids, labels, captions and samples.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Entry indices per canonical first label.
    pub fn classes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.entry(e.class()).or_default().push(i);
        }
        out
    }

    pub fn to_training(&self) -> Result<TrainingCorpus> {
        TrainingCorpus::new(
            self.entries
                .iter()
                .map(|e| LabeledClip {
                    id: e.id.clone(),
                    audio: e.audio.clone(),
                    labels: e.labels.clone(),
                    captions: e.captions.clone(),
                })
                .collect(),
        )
    }
}

impl From<&LabeledClip> for CorpusEntry {
    fn from(c: &LabeledClip) -> Self {
        Self {
            id: c.id.clone(),
            labels: c.labels.clone(),
            captions: c.captions.clone(),
            audio: c.audio.clone(),
        }
    }
}

fn fingerprint(entries: &[CorpusEntry]) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    for e in entries {
        field(e.id.as_bytes());
        for l in &e.labels {
            field(l.as_bytes());
        }
        field(b"|");
        for c in &e.captions {
            field(c.as_bytes());
        }
        field(&e.audio.sample_rate().to_le_bytes());
        let samples: Vec<u8> = e.audio.samples().iter().flat_map(|v| v.to_le_bytes()).collect();
        field(&samples);
    }
    hex::encode(h.finalize())
}

/// Maximal-RMS window of `seg_seconds`, scanning starts on a 100 ms grid.
/// Ties go to the earliest window.
pub fn anchor_segment(clip: &AudioClip, seg_seconds: f64) -> Result<AudioClip> {
    let rate = clip.sample_rate() as f64;
    let len = (seg_seconds * rate).round() as usize;
    if !(seg_seconds > 0.0) || len == 0 {
        return Err(Error::InvalidConfig(format!("segment length {seg_seconds} s")));
    }
    if clip.len() < len {
        return Err(Error::TooShort { len: clip.len(), min: len });
    }
    let stride = ((0.1 * rate).round() as usize).max(1);
    let s = clip.samples();
    let mut best = (0, f64::NEG_INFINITY);
    for start in (0..=clip.len() - len).step_by(stride) {
        let e: f64 = s[start..start + len].iter().map(|v| v * v).sum();
        if e > best.1 {
            best = (start, e);
        }
    }
    clip.slice(best.0, len)
}
