//! Parameter layout and graph construction.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::film::ResidualUnitParams;
use super::{ModelConfig, ModelParams, NamedTensor, Separator};
use crate::autograd::{MixtureSpectra, NormMode, RecordedStats, Tape, Var};
use crate::dsp::{AudioClip, MaskPair};
use crate::error::{Error, Result};
use crate::query::QueryEmbedding;
use crate::tensor::Tensor;

/// Batch-norm slots: affine parameters and running-statistic buffers.
#[derive(Debug, Clone, Copy)]
pub(super) struct BnIdx {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Debug, Clone)]
pub(super) struct UnitIdx {
    pub prefix: String,
    pub bn1: BnIdx,
    pub conv1: usize,
    pub film1: usize,
    pub bn2: BnIdx,
    pub conv2: usize,
    pub film2: usize,
    pub shortcut: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub(super) struct DecoderIdx {
    pub up_w: usize,
    pub up_b: usize,
    pub units: Vec<UnitIdx>,
}

#[derive(Debug, Clone)]
pub(super) struct Layout {
    pub table: usize,
    pub pre_w: usize,
    pub pre_b: usize,
    pub encoder: Vec<Vec<UnitIdx>>,
    pub bottleneck: Vec<Vec<UnitIdx>>,
    pub decoder: Vec<DecoderIdx>,
    pub final_bn: BnIdx,
    pub head_w: usize,
    pub head_b: usize,
    pub film_w1: usize,
    pub film_b1: usize,
    pub film_w2: usize,
    pub film_b2: usize,
    /// (offset, channels) of each modulated conv in the generator output.
    pub film_slots: Vec<(usize, usize)>,
}

enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Values(Vec<f64>),
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    film_slots: Vec<(usize, usize)>,
    film_total: usize,
    kernel: usize,
}

/// He-uniform bound for a layer with the given fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..b)).collect(),
            Init::Values(v) => v,
        };
        self.params.push(NamedTensor {
            name,
            value: Tensor::from_vec(shape, data),
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, c: usize, value: f64) -> usize {
        self.buffers.push(NamedTensor {
            name,
            value: Tensor::full(&[c], value),
        });
        self.buffers.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.param(format!("{prefix}.gamma"), &[c], Init::Ones),
            beta: self.param(format!("{prefix}.beta"), &[c], Init::Zeros),
            mean: self.buffer(format!("{prefix}.running_mean"), c, 0.0),
            var: self.buffer(format!("{prefix}.running_var"), c, 1.0),
        }
    }

    fn film_slot(&mut self, m: usize) -> usize {
        self.film_slots.push((self.film_total, m));
        self.film_total += 2 * m;
        self.film_slots.len() - 1
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize) -> usize {
        let k = self.kernel;
        self.param(name, &[cout, cin, k, k], Init::Uniform(he_bound(cin * k * k)))
    }

    fn unit(&mut self, prefix: String, cin: usize, cout: usize) -> UnitIdx {
        let bn1 = self.bn(&format!("{prefix}.bn1"), cin);
        let conv1 = self.conv(format!("{prefix}.conv1.weight"), cin, cout);
        let film1 = self.film_slot(cout);
        let bn2 = self.bn(&format!("{prefix}.bn2"), cout);
        let conv2 = self.conv(format!("{prefix}.conv2.weight"), cout, cout);
        let film2 = self.film_slot(cout);
        let shortcut = (cin != cout).then(|| {
            (
                self.param(
                    format!("{prefix}.shortcut.weight"),
                    &[cout, cin, 1, 1],
                    Init::Uniform(he_bound(cin)),
                ),
                self.param(format!("{prefix}.shortcut.bias"), &[cout], Init::Zeros),
            )
        });
        UnitIdx {
            prefix,
            bn1,
            conv1,
            film1,
            bn2,
            conv2,
            film2,
            shortcut,
        }
    }
}

impl Layout {
    pub fn build(cfg: &ModelConfig, table: Tensor, rng: &mut ChaCha8Rng) -> (Layout, ModelParams) {
        let mut b = Builder {
            rng,
            params: Vec::new(),
            buffers: Vec::new(),
            film_slots: Vec::new(),
            film_total: 0,
            kernel: cfg.kernel,
        };
        let table_shape = table.shape().to_vec();
        let table = b.param("query.table".into(), &table_shape, Init::Values(table.into_data()));
        let c0 = cfg.channels[0];
        let pre_w = b.param("pre.weight".into(), &[c0, 1, 1, 1], Init::Uniform(he_bound(1)));
        let pre_b = b.param("pre.bias".into(), &[c0], Init::Zeros);

        let mut encoder = Vec::new();
        let mut cin = c0;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let units = (0..cfg.units_per_block)
                .map(|u| b.unit(format!("enc.{i}.unit.{u}"), if u == 0 { cin } else { c }, c))
                .collect();
            encoder.push(units);
            cin = c;
        }
        let c_last = *cfg.channels.last().expect("validated non-empty");
        let bottleneck = (0..cfg.n_bottleneck_blocks)
            .map(|i| {
                (0..cfg.bottleneck_units)
                    .map(|u| b.unit(format!("mid.{i}.unit.{u}"), c_last, c_last))
                    .collect()
            })
            .collect();
        let mut decoder = Vec::new();
        let mut cin = c_last;
        for i in (0..cfg.n_encoder_blocks).rev() {
            let c = cfg.channels[i];
            let up_w = b.param(
                format!("dec.{i}.up.weight"),
                &[cin, c, 2, 2],
                Init::Uniform(he_bound(cin)),
            );
            let up_b = b.param(format!("dec.{i}.up.bias"), &[c], Init::Zeros);
            let units = (0..cfg.units_per_block)
                .map(|u| b.unit(format!("dec.{i}.unit.{u}"), if u == 0 { 2 * c } else { c }, c))
                .collect();
            decoder.push(DecoderIdx { up_w, up_b, units });
            cin = c;
        }
        let final_bn = b.bn("final.bn", c0);
        let head_w = b.param("head.weight".into(), &[3, c0, 1, 1], Init::Uniform(0.01));
        // u = 0 → |M| = ceiling/2; (t_re, t_im) = (1, 0) → zero phase residual.
        let head_b = b.param("head.bias".into(), &[3], Init::Values(vec![0.0, 1.0, 0.0]));

        let (d, hidden, total) = (cfg.d_query, cfg.film_hidden, b.film_total);
        let film_w1 = b.param("film.fc1.weight".into(), &[hidden, d], Init::Uniform(he_bound(d)));
        let film_b1 = b.param("film.fc1.bias".into(), &[hidden], Init::Zeros);
        let w2_init = if cfg.zero_init_film {
            Init::Zeros
        } else {
            Init::Uniform(0.1 / (hidden as f64).sqrt())
        };
        let film_w2 = b.param("film.fc2.weight".into(), &[total, hidden], w2_init);
        let film_b2 = b.param("film.fc2.bias".into(), &[total], Init::Zeros);

        let layout = Layout {
            table,
            pre_w,
            pre_b,
            encoder,
            bottleneck,
            decoder,
            final_bn,
            head_w,
            head_b,
            film_w1,
            film_b1,
            film_w2,
            film_b2,
            film_slots: b.film_slots,
        };
        let params = ModelParams {
            params: b.params,
            buffers: b.buffers,
        };
        (layout, params)
    }

    fn units(&self) -> impl Iterator<Item = &UnitIdx> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.bottleneck.iter().flatten())
            .chain(self.decoder.iter().flat_map(|d| &d.units))
    }

    pub fn unit_params(&self, prefix: &str, p: &ModelParams) -> Option<ResidualUnitParams> {
        let u = self.units().find(|u| u.prefix == prefix)?;
        let t = |i: usize| p.params[i].value.clone();
        let buf = |i: usize| p.buffers[i].value.data().to_vec();
        Some(ResidualUnitParams {
            bn1_gamma: t(u.bn1.gamma).into_data(),
            bn1_beta: t(u.bn1.beta).into_data(),
            bn1_running: (buf(u.bn1.mean), buf(u.bn1.var)),
            conv1: t(u.conv1),
            bn2_gamma: t(u.bn2.gamma).into_data(),
            bn2_beta: t(u.bn2.beta).into_data(),
            bn2_running: (buf(u.bn2.mean), buf(u.bn2.var)),
            conv2: t(u.conv2),
            shortcut: u.shortcut.map(|(w, b)| (t(w), t(b))),
        })
    }

    /// FiLM generator: FC → ReLU → FC over n×d query vectors.
    pub fn film_raw(&self, tape: &mut Tape, e: Var, p: &ModelParams, trainable: bool) -> Var {
        let mut v = |i: usize| leaf(tape, p, i, trainable);
        let (w1, b1, w2, b2) = (v(self.film_w1), v(self.film_b1), v(self.film_w2), v(self.film_b2));
        let h = tape.linear(e, w1, b1);
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }
}

fn leaf(tape: &mut Tape, p: &ModelParams, i: usize, trainable: bool) -> Var {
    let value = p.params[i].value.clone();
    if trainable {
        tape.param(value, i)
    } else {
        tape.constant(value)
    }
}

/// How queries enter the graph.
#[derive(Debug, Clone, Copy)]
pub(crate) enum QueryInput<'a> {
    /// Rows of the trainable table, normalized inside the graph.
    Rows(&'a [usize]),
    /// Fixed unit vectors.
    Vectors(&'a [QueryEmbedding]),
}

pub(crate) struct GraphOutput {
    /// n × len separated waveforms.
    pub estimate: Var,
    /// n × 3 × H × W mask head.
    pub head: Var,
    pub frames: usize,
    pub bins: usize,
    /// Batch statistics with their (mean, var) buffer slots.
    pub stats: Vec<(usize, usize, RecordedStats)>,
}

struct Ctx<'a> {
    p: &'a ModelParams,
    trainable: bool,
    mode: NormMode,
    slope: f64,
    pad: usize,
    film: Var,
    slots: &'a [(usize, usize)],
    stats: Vec<(usize, usize, RecordedStats)>,
}

impl Ctx<'_> {
    fn leaf(&self, tape: &mut Tape, i: usize) -> Var {
        leaf(tape, self.p, i, self.trainable)
    }

    fn bn(&mut self, tape: &mut Tape, x: Var, idx: BnIdx) -> Var {
        let (g, b) = (self.leaf(tape, idx.gamma), self.leaf(tape, idx.beta));
        let running = (
            self.p.buffers[idx.mean].value.data(),
            self.p.buffers[idx.var].value.data(),
        );
        let (y, rec) = tape.batch_norm(x, g, b, self.mode, running);
        if let Some(rec) = rec {
            self.stats.push((idx.mean, idx.var, rec));
        }
        y
    }

    /// [BN → LeakyReLU → conv → FiLM] × 2 plus the shortcut.
    fn unit(&mut self, tape: &mut Tape, x: Var, u: &UnitIdx) -> Var {
        let mut h = x;
        for (bn, conv, slot) in [(u.bn1, u.conv1, u.film1), (u.bn2, u.conv2, u.film2)] {
            h = self.bn(tape, h, bn);
            h = tape.leaky_relu(h, self.slope);
            let w = self.leaf(tape, conv);
            h = tape.conv2d(h, w, None, self.pad);
            h = tape.film(h, self.film, self.slots[slot].0);
        }
        let short = match u.shortcut {
            Some((w, b)) => {
                let (w, b) = (self.leaf(tape, w), self.leaf(tape, b));
                tape.conv2d(x, w, Some(b), 0)
            }
            None => x,
        };
        tape.add(short, h)
    }
}

/// log1p|X| features, zero-padded to h×w (frequency × time), Nyquist dropped.
fn features(spectra: &[Vec<rustfft::num_complex::Complex64>], frames: usize, bins: usize, h: usize, w: usize) -> Tensor {
    let mut x = Tensor::zeros(&[spectra.len(), 1, h, w]);
    for (s, spec) in spectra.iter().enumerate() {
        let plane = &mut x.data_mut()[s * h * w..(s + 1) * h * w];
        for t in 0..frames {
            for f in 0..bins - 1 {
                plane[f * w + t] = spec[t * bins + f].norm().ln_1p();
            }
        }
    }
    x
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

pub(super) fn build(
    sep: &Separator,
    tape: &mut Tape,
    mixtures: &[AudioClip],
    queries: QueryInput<'_>,
    mode: NormMode,
    trainable: bool,
) -> Result<GraphOutput> {
    let cfg = &sep.config;
    let layout = &sep.layout;
    let n = mixtures.len();
    if n == 0 {
        return Err(Error::EmptySignal);
    }
    let len = mixtures[0].len();
    if mixtures.iter().any(|m| m.len() != len) {
        return Err(Error::ShapeMismatch("batch items differ in length".into()));
    }
    let mut spectra = Vec::with_capacity(n);
    let mut frames = 0;
    for m in mixtures {
        let spec = sep.plan.analyze(m)?;
        frames = spec.frames();
        spectra.push(spec.data().to_vec());
    }
    let bins = cfg.stft.bins();
    let scale = cfg.scale_factor();
    let (h, w) = (round_up(bins - 1, scale), round_up(frames, scale));

    let e = match queries {
        QueryInput::Rows(rows) => {
            if rows.len() != n {
                return Err(Error::ShapeMismatch("one query per batch item".into()));
            }
            if let Some(r) = rows.iter().find(|&&r| r >= sep.vocab_keys.len()) {
                return Err(Error::UnknownQuery(format!("row {r}")));
            }
            let table = leaf(tape, &sep.params, layout.table, trainable);
            let g = tape.gather(table, rows);
            tape.l2_normalize(g)
        }
        QueryInput::Vectors(vs) => {
            if vs.len() != n {
                return Err(Error::ShapeMismatch("one query per batch item".into()));
            }
            let d = cfg.d_query;
            let mut data = Vec::with_capacity(n * d);
            for v in vs {
                if v.dim() != d {
                    return Err(Error::ShapeMismatch(format!("query dim {} vs {d}", v.dim())));
                }
                data.extend_from_slice(v.vector());
            }
            tape.constant(Tensor::from_vec(&[n, d], data))
        }
    };
    let film = layout.film_raw(tape, e, &sep.params, trainable);
    let mut ctx = Ctx {
        p: &sep.params,
        trainable,
        mode,
        slope: cfg.leaky_slope,
        pad: cfg.kernel / 2,
        film,
        slots: &layout.film_slots,
        stats: Vec::new(),
    };

    let x = tape.constant(features(&spectra, frames, bins, h, w));
    let (pw, pb) = (ctx.leaf(tape, layout.pre_w), ctx.leaf(tape, layout.pre_b));
    let mut hv = tape.conv2d(x, pw, Some(pb), 0);
    let mut skips = Vec::new();
    for block in &layout.encoder {
        for u in block {
            hv = ctx.unit(tape, hv, u);
        }
        skips.push(hv);
        hv = tape.avg_pool2(hv);
    }
    for block in &layout.bottleneck {
        for u in block {
            hv = ctx.unit(tape, hv, u);
        }
    }
    for dec in &layout.decoder {
        let (uw, ub) = (ctx.leaf(tape, dec.up_w), ctx.leaf(tape, dec.up_b));
        let up = tape.conv_transpose2(hv, uw, Some(ub));
        let skip = skips.pop().expect("one skip per encoder block");
        hv = tape.concat(up, skip);
        for u in &dec.units {
            hv = ctx.unit(tape, hv, u);
        }
    }
    hv = ctx.bn(tape, hv, layout.final_bn);
    hv = tape.leaky_relu(hv, cfg.leaky_slope);
    let (hw_, hb) = (ctx.leaf(tape, layout.head_w), ctx.leaf(tape, layout.head_b));
    let head = tape.conv2d(hv, hw_, Some(hb), 0);
    let mix = Arc::new(MixtureSpectra {
        spectra,
        frames,
        bins,
    });
    let masked = tape.mask_apply(head, mix, cfg.mask_ceiling);
    let estimate = tape.istft(masked, sep.plan.clone(), len);
    Ok(GraphOutput {
        estimate,
        head,
        frames,
        bins,
        stats: ctx.stats,
    })
}

/// Decodes item `s` of a mask head into (|M|, ∠M), matching the masking op.
pub(super) fn mask_from_head(head: &Tensor, s: usize, frames: usize, bins: usize, ceiling: f64) -> MaskPair {
    let (_, _, h, w) = head.dims4();
    let plane = h * w;
    let d = &head.data()[s * 3 * plane..(s + 1) * 3 * plane];
    let mut mask = MaskPair::unit(frames, bins);
    for t in 0..frames {
        for f in 0..bins {
            let idx = f.min(h - 1).min(bins - 2) * w + t;
            let (u, a, b) = (d[idx], d[plane + idx], d[2 * plane + idx]);
            let mag = ceiling / (1.0 + (-u).exp());
            let phase = if (a * a + b * b).sqrt() < 1e-12 { 0.0 } else { b.atan2(a) };
            mask.set(t, f, mag, phase.clamp(-PI, PI));
        }
    }
    mask
}
