//! Stand-alone FiLM and residual-unit evaluation on single feature maps.

use serde::{Deserialize, Serialize};

use crate::autograd::{NormMode, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One m×h×w activation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    fn from_tensor(t: &Tensor) -> Self {
        let (_, c, h, w) = t.dims4();
        Self {
            channels: c,
            height: h,
            width: w,
            data: t.data().to_vec(),
        }
    }
}

/// Per-channel scale γ and shift β for one modulated layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FilmParams {
    pub fn identity(m: usize) -> Self {
        Self {
            gamma: vec![1.0; m],
            beta: vec![0.0; m],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Generator-space encoding: [γ − 1, β].
    fn raw(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .map(|g| g - 1.0)
            .chain(self.beta.iter().copied())
            .collect()
    }
}

/// out_i = γ_i · H_i + β_i, broadcast over each channel plane.
pub fn film(h: &FeatureMap, p: &FilmParams) -> Result<FeatureMap> {
    if p.gamma.len() != h.channels || p.beta.len() != h.channels {
        return Err(Error::ShapeMismatch(format!(
            "FiLM for {}/{} channels on a {}-channel map",
            p.gamma.len(),
            p.beta.len(),
            h.channels
        )));
    }
    let plane = h.height * h.width;
    let mut out = h.clone();
    for (c, chunk) in out.data.chunks_mut(plane.max(1)).enumerate().take(h.channels) {
        chunk.iter_mut().for_each(|v| *v = p.gamma[c] * *v + p.beta[c]);
    }
    Ok(out)
}

/// Weights of one residual unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnitParams {
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub bn1_running: (Vec<f64>, Vec<f64>),
    /// out × in × k × k.
    pub conv1: Tensor,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    pub bn2_running: (Vec<f64>, Vec<f64>),
    pub conv2: Tensor,
    /// 1×1 projection (weight, bias) when input and output widths differ.
    pub shortcut: Option<(Tensor, Tensor)>,
}

impl ResidualUnitParams {
    pub fn in_channels(&self) -> usize {
        self.conv1.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.shape()[0]
    }
}

/// shortcut(h) + [BN → LeakyReLU → conv → FiLM] × 2 (h). `training` selects
/// batch statistics instead of the running ones.
pub fn residual_conv_block(
    h: &FeatureMap,
    p: &ResidualUnitParams,
    films: [&FilmParams; 2],
    training: bool,
    leaky_slope: f64,
) -> Result<FeatureMap> {
    let (cin, cout) = (p.in_channels(), p.out_channels());
    if h.channels != cin {
        return Err(Error::ShapeMismatch(format!(
            "unit expects {cin} channels, got {}",
            h.channels
        )));
    }
    if films.iter().any(|f| f.channels() != cout || f.beta.len() != cout) {
        return Err(Error::ShapeMismatch("FiLM width differs from unit output".into()));
    }
    if p.shortcut.is_none() && cin != cout {
        return Err(Error::ShapeMismatch("identity shortcut needs equal widths".into()));
    }
    let k = p.conv1.shape()[2];
    let mode = if training { NormMode::Batch } else { NormMode::Running };
    let mut tape = Tape::new();
    let x = tape.constant(h.to_tensor());
    let raw: Vec<f64> = films.iter().flat_map(|f| f.raw()).collect();
    let film_raw = tape.constant(Tensor::from_vec(&[1, raw.len()], raw));
    let layers = [
        (&p.bn1_gamma, &p.bn1_beta, &p.bn1_running, &p.conv1, 0),
        (&p.bn2_gamma, &p.bn2_beta, &p.bn2_running, &p.conv2, 2 * cout),
    ];
    let mut y = x;
    for (g, b, running, conv, offset) in layers {
        let g = tape.constant(Tensor::from_vec(&[g.len()], g.clone()));
        let b = tape.constant(Tensor::from_vec(&[b.len()], b.clone()));
        y = tape.batch_norm(y, g, b, mode, (&running.0, &running.1)).0;
        y = tape.leaky_relu(y, leaky_slope);
        let w = tape.constant(conv.clone());
        y = tape.conv2d(y, w, None, k / 2);
        y = tape.film(y, film_raw, offset);
    }
    let short = match &p.shortcut {
        Some((w, b)) => {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            tape.conv2d(x, w, Some(b), 0)
        }
        None => x,
    };
    let out = tape.add(short, y);
    Ok(FeatureMap::from_tensor(tape.value(out)))
}
