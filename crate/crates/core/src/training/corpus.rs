//! In-memory labeled clips and the on-the-fly pair sampler.

use std::collections::BTreeMap;

use rand::Rng;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::mixing::{energy, fit_to_length};
use crate::query::canonicalize;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub audio: AudioClip,
    /// Non-empty; the first label is the clip's class.
    pub labels: Vec<String>,
    pub captions: Vec<String>,
}

impl LabeledClip {
    pub fn class(&self) -> String {
        canonicalize(&self.labels[0])
    }
}

/// Clips grouped by class.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    clips: Vec<LabeledClip>,
    /// class → clip indices, in class-name order.
    classes: BTreeMap<String, Vec<usize>>,
    sample_rate: u32,
}

impl TrainingCorpus {
    pub fn new(clips: Vec<LabeledClip>) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(Error::Corpus("no clips".into()));
        };
        let sample_rate = first.audio.sample_rate();
        let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, c) in clips.iter().enumerate() {
            if c.labels.is_empty() {
                return Err(Error::Corpus(format!("clip {} has no labels", c.id)));
            }
            if c.audio.sample_rate() != sample_rate {
                return Err(Error::RateMismatch(c.audio.sample_rate(), sample_rate));
            }
            classes.entry(c.class()).or_default().push(i);
        }
        Ok(Self {
            clips,
            classes,
            sample_rate,
        })
    }

    pub fn clips(&self) -> &[LabeledClip] {
        &self.clips
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.keys().map(String::as_str).collect()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Every string a training query can take: labels, then captions.
    pub fn query_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        let mut push = |s: &str| {
            let k = canonicalize(s);
            if !k.is_empty() && !keys.contains(&k) {
                keys.push(k);
            }
        };
        for c in &self.clips {
            c.labels.iter().for_each(|l| push(l));
        }
        for c in &self.clips {
            c.captions.iter().for_each(|l| push(l));
        }
        keys
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub target: AudioClip,
    pub interferer: AudioClip,
    pub query: String,
    pub target_class: String,
    pub interferer_class: String,
}

const SILENT_RETRIES: usize = 32;

/// Two class-disjoint segments of `segment_len` samples. The query is drawn
/// uniformly from the target's label and captions.
pub fn sample_training_pair(
    corpus: &TrainingCorpus,
    segment_len: usize,
    rng: &mut impl Rng,
) -> Result<TrainingPair> {
    let names: Vec<&String> = corpus.classes.keys().collect();
    if names.len() < 2 {
        return Err(Error::Corpus("pair sampling needs at least two classes".into()));
    }
    for _ in 0..SILENT_RETRIES {
        let ti = rng.random_range(0..names.len());
        let mut ii = rng.random_range(0..names.len() - 1);
        if ii >= ti {
            ii += 1;
        }
        let pick = |class: &str, rng: &mut _| {
            let members = &corpus.classes[class];
            &corpus.clips[members[Rng::random_range(rng, 0..members.len())]]
        };
        let t = pick(names[ti], rng);
        let i = pick(names[ii], rng);
        let target = fit_to_length(&t.audio, segment_len, rng)?;
        let interferer = fit_to_length(&i.audio, segment_len, rng)?;
        let n_queries = 1 + t.captions.len();
        let q = rng.random_range(0..n_queries);
        let query = if q == 0 {
            t.labels[0].clone()
        } else {
            t.captions[q - 1].clone()
        };
        if energy(&target) > 0.0 && energy(&interferer) > 0.0 {
            return Ok(TrainingPair {
                target,
                interferer,
                query: canonicalize(&query),
                target_class: names[ti].clone(),
                interferer_class: names[ii].clone(),
            });
        }
    }
    Err(Error::Corpus("could not draw non-silent segments".into()))
}
