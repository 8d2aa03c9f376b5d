//! FiLM-conditioned ResUNet separator over STFT magnitudes.
//!
//! The network reads log1p-compressed mixture magnitudes, predicts a
//! magnitude mask and a phase residual per time-frequency bin, applies them to
//! the complex mixture spectrogram and resynthesizes a waveform.

mod checkpoint;
mod film;
mod graph;

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NormMode, Tape};
use crate::dsp::{AudioClip, MaskPair, StftConfig, StftPlan};
use crate::error::{Error, Result};
use crate::query::{embed_query, EmbeddingSource, QueryEmbedding, Vocabulary};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, ManifestEntry, TensorKind, CHECKPOINT_VERSION};
pub use film::{film, residual_conv_block, FeatureMap, FilmParams, ResidualUnitParams};
pub(crate) use graph::{GraphOutput, QueryInput};
use graph::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downsample {
    AvgPool2x2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_encoder_blocks: usize,
    pub n_bottleneck_blocks: usize,
    /// Output channels of each encoder block; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Residual units in every encoder and decoder block.
    pub units_per_block: usize,
    /// Residual units in every bottleneck block.
    pub bottleneck_units: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub d_query: usize,
    pub film_hidden: usize,
    pub mask_ceiling: f64,
    pub downsample: Downsample,
    pub bn_momentum: f64,
    /// Zero the FiLM generator's last layer so every γ = 1 and β = 0 at init.
    pub zero_init_film: bool,
    pub sample_rate: u32,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    /// Desk-scale model for 8 kHz audio.
    fn default() -> Self {
        Self {
            n_encoder_blocks: 3,
            n_bottleneck_blocks: 2,
            channels: vec![8, 16, 32],
            units_per_block: 2,
            bottleneck_units: 1,
            kernel: 3,
            leaky_slope: 0.01,
            d_query: 64,
            film_hidden: 64,
            mask_ceiling: 2.0,
            downsample: Downsample::AvgPool2x2,
            bn_momentum: 0.99,
            zero_init_film: false,
            sample_rate: 8000,
            stft: StftConfig::new(256, 128),
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter network for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_encoder_blocks: 2,
            n_bottleneck_blocks: 1,
            channels: vec![2, 4],
            units_per_block: 1,
            bottleneck_units: 1,
            d_query: 4,
            film_hidden: 4,
            stft: StftConfig::new(16, 8),
            ..Self::default()
        }
    }

    /// Full-size layout: six encoder blocks up to 1024 channels, four units
    /// per block, 512-dimensional queries, 32 kHz audio.
    pub fn full_scale() -> Self {
        Self {
            n_encoder_blocks: 6,
            n_bottleneck_blocks: 4,
            channels: vec![32, 64, 128, 256, 512, 1024],
            units_per_block: 4,
            bottleneck_units: 1,
            d_query: 512,
            film_hidden: 512,
            sample_rate: 32000,
            stft: StftConfig::new(1024, 320),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_encoder_blocks == 0 || self.channels.len() != self.n_encoder_blocks {
            return bad("channel list length must equal n_encoder_blocks (≥ 1)");
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("encoder channels must be positive and strictly increasing");
        }
        if self.units_per_block == 0 || (self.n_bottleneck_blocks > 0 && self.bottleneck_units == 0) {
            return bad("blocks need at least one residual unit");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.d_query == 0 || self.film_hidden == 0 {
            return bad("query and FiLM widths must be positive");
        }
        if !(self.mask_ceiling > 0.0 && self.mask_ceiling.is_finite()) {
            return bad("mask ceiling must be positive");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("batch-norm momentum must lie in [0, 1)");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky slope must be non-negative");
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidSampleRate(0));
        }
        self.stft.validate()
    }

    /// Spatial padding multiple: 2^n_encoder_blocks.
    pub fn scale_factor(&self) -> usize {
        1 << self.n_encoder_blocks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Trainable tensors and batch-norm running statistics in a stable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn buffer_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.buffers[i].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .chain(&self.buffers)
            .find(|p| !p.value.is_finite())
            .map(|p| p.name.as_str())
    }

    /// Rounds every value to the nearest f32 so the float32 checkpoint is exact.
    pub fn quantize_f32(&mut self) {
        for t in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            t.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// The separator: configuration, parameters and the query vocabulary keys.
#[derive(Clone)]
pub struct Separator {
    config: ModelConfig,
    params: ModelParams,
    vocab_keys: Vec<String>,
    layout: Layout,
    plan: Arc<StftPlan>,
}

impl fmt::Debug for Separator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Separator")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("vocab", &self.vocab_keys)
            .finish()
    }
}

impl Separator {
    /// Initializes a network whose query table is `vocab`'s table.
    pub fn new(config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.dim() != config.d_query {
            return Err(Error::ShapeMismatch(format!(
                "vocabulary dim {} vs d_query {}",
                vocab.dim(),
                config.d_query
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, mut params) = Layout::build(&config, vocab.table().clone(), &mut rng);
        params.quantize_f32();
        let plan = Arc::new(StftPlan::new(config.stft)?);
        Ok(Self {
            config,
            params,
            vocab_keys: vocab.entries().to_vec(),
            layout,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn vocab_keys(&self) -> &[String] {
        &self.vocab_keys
    }

    /// The vocabulary with the current (possibly trained) table.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_parts(
            self.vocab_keys.clone(),
            self.params.params[self.layout.table].value.clone(),
        )
        .expect("vocabulary keys and table are kept consistent")
    }

    /// Table embedding of a vocabulary query.
    pub fn embed(&self, query: &str) -> Result<QueryEmbedding> {
        embed_query(&self.vocabulary(), query)
    }

    fn check_embedding(&self, e_q: &QueryEmbedding) -> Result<()> {
        if e_q.dim() != self.config.d_query {
            return Err(Error::ShapeMismatch(format!(
                "query embedding dim {} vs d_query {}",
                e_q.dim(),
                self.config.d_query
            )));
        }
        if (e_q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig("query embedding is not unit norm".into()));
        }
        Ok(())
    }

    fn check_mixture(&self, mixture: &AudioClip) -> Result<()> {
        if mixture.sample_rate() != self.config.sample_rate {
            return Err(Error::RateMismatch(mixture.sample_rate(), self.config.sample_rate));
        }
        if mixture.len() < self.config.stft.window_size {
            return Err(Error::TooShort {
                len: mixture.len(),
                min: self.config.stft.window_size,
            });
        }
        if let Some(name) = self.params.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        Ok(())
    }

    /// Inference: separated clip of the mixture's length and the mask used.
    /// Batch norm uses running statistics, so this is a pure function.
    pub fn forward(&self, mixture: &AudioClip, e_q: &QueryEmbedding) -> Result<(AudioClip, MaskPair)> {
        self.check_mixture(mixture)?;
        self.check_embedding(e_q)?;
        let mut tape = Tape::new();
        let out = self.build_graph(
            &mut tape,
            std::slice::from_ref(mixture),
            QueryInput::Vectors(std::slice::from_ref(e_q)),
            NormMode::Running,
            false,
        )?;
        let wave = tape.value(out.estimate).data().to_vec();
        let mask = graph::mask_from_head(tape.value(out.head), 0, out.frames, out.bins, self.config.mask_ceiling);
        Ok((AudioClip::new(wave, mixture.sample_rate())?, mask))
    }

    /// Separates with a vocabulary query.
    pub fn separate(&self, mixture: &AudioClip, query: &str) -> Result<AudioClip> {
        let e = self.embed(query)?;
        Ok(self.forward(mixture, &e)?.0)
    }

    /// Per-layer FiLM parameters generated from `e_q`, in network order.
    pub fn film_generator(&self, e_q: &QueryEmbedding) -> Result<Vec<FilmParams>> {
        self.check_embedding(e_q)?;
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_vec(&[1, e_q.dim()], e_q.vector().to_vec()));
        let raw = self.layout.film_raw(&mut tape, e, &self.params, false);
        let r = tape.value(raw).data();
        Ok(self
            .layout
            .film_slots
            .iter()
            .map(|&(off, m)| FilmParams {
                gamma: r[off..off + m].iter().map(|v| 1.0 + v).collect(),
                beta: r[off + m..off + 2 * m].to_vec(),
            })
            .collect())
    }

    /// Number of FiLM-modulated conv layers.
    pub fn film_layer_count(&self) -> usize {
        self.layout.film_slots.len()
    }

    /// Parameters of one residual unit, addressed by its name prefix
    /// (for example `enc.0.unit.1`).
    pub fn unit_params(&self, prefix: &str) -> Option<ResidualUnitParams> {
        self.layout.unit_params(prefix, &self.params)
    }

    /// Builds a batched graph. With `trainable` the parameters become
    /// gradient-tracked leaves indexed like [`ModelParams::params`].
    pub(crate) fn build_graph(
        &self,
        tape: &mut Tape,
        mixtures: &[AudioClip],
        queries: QueryInput<'_>,
        mode: NormMode,
        trainable: bool,
    ) -> Result<GraphOutput> {
        graph::build(self, tape, mixtures, queries, mode, trainable)
    }

    /// Folds recorded batch statistics into the running buffers.
    pub(crate) fn update_running_stats(&mut self, out: &GraphOutput) {
        let m = self.config.bn_momentum;
        for (mean_i, var_i, st) in &out.stats {
            for (r, b) in self.params.buffers[*mean_i].value.data_mut().iter_mut().zip(&st.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.params.buffers[*var_i].value.data_mut().iter_mut().zip(&st.unbiased_var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Embedding for a query: vocabulary first, then an external map.
    pub fn resolve_query(
        &self,
        query: &str,
        external: Option<&std::collections::BTreeMap<String, QueryEmbedding>>,
    ) -> Result<QueryEmbedding> {
        match self.embed(query) {
            Ok(e) => Ok(e),
            Err(Error::UnknownQuery(q)) => {
                let key = crate::query::canonicalize(&q);
                let e = external
                    .and_then(|m| m.get(&key))
                    .cloned()
                    .ok_or(Error::UnknownQuery(q))?;
                debug_assert_eq!(e.source(), EmbeddingSource::External);
                Ok(e)
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests;
