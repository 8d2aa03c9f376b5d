//! Tape-based reverse-mode differentiation over the separator's operation set.
//!
//! Every value produced during a forward pass is appended to a [`Tape`];
//! [`Tape::backward`] then walks the tape in reverse, accumulating adjoints.
//! Parameters enter the tape as [`Tape::param`] leaves tagged with their index
//! in the parameter store, so gradients can be gathered per parameter.

pub mod kernels;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rustfft::num_complex::Complex64;

use crate::dsp::StftPlan;
use crate::tensor::{gemm, Tensor};
use kernels::*;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm statistics mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch's own statistics (training).
    Batch,
    /// Normalize with supplied running statistics (inference).
    Running,
}

/// Constant inputs of the masking op: one mixture spectrogram per batch item.
#[derive(Debug, Clone)]
pub struct MixtureSpectra {
    pub spectra: Vec<Vec<Complex64>>,
    pub frames: usize,
    pub bins: usize,
}

enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2 {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Relu {
        x: Var,
    },
    Film {
        x: Var,
        raw: Var,
        offset: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    L2Normalize {
        x: Var,
    },
    MaskApply {
        head: Var,
        mix: Arc<MixtureSpectra>,
        ceiling: f64,
    },
    Istft {
        spec: Var,
        plan: Arc<StftPlan>,
        frames: usize,
    },
    L1Loss {
        est: Var,
        target: Tensor,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Batch statistics recorded by a batch-norm node, for running-average updates.
#[derive(Debug, Clone)]
pub struct RecordedStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

const NORM_EPS: f64 = 1e-5;
const PHASOR_FLOOR: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf tagged with its parameter-store index.
    pub fn param(&mut self, value: Tensor, index: usize) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
            param: Some(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let out = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, pad }, &inputs)
    }

    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = conv_transpose2(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::ConvTranspose2 { x, w, b }, &inputs)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        self.push(out, Op::AvgPool2 { x }, &[x])
    }

    /// Batch normalization. In [`NormMode::Running`] the supplied statistics
    /// are used; in [`NormMode::Batch`] the batch statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: (&[f64], &[f64]),
    ) -> (Var, Option<RecordedStats>) {
        let (mean, var, recorded) = match mode {
            NormMode::Batch => {
                let st = channel_stats(self.value(x));
                let corr = if st.count > 1 {
                    st.count as f64 / (st.count - 1) as f64
                } else {
                    1.0
                };
                let rec = RecordedStats {
                    mean: st.mean.clone(),
                    unbiased_var: st.var.iter().map(|v| v * corr).collect(),
                };
                (st.mean, st.var, Some(rec))
            }
            NormMode::Running => (running.0.to_vec(), running.1.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (y, xhat) = normalize_affine(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
        );
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Batch,
            },
            &[x, gamma, beta],
        );
        (v, recorded)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Per-channel modulation γ·x + β with γ = 1 + raw[:, offset..offset+c] and
    /// β = raw[:, offset+c..offset+2c], raw being n×P.
    pub fn film(&mut self, x: Var, raw: Var, offset: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (rn, p) = self.value(raw).dims2();
        assert_eq!(rn, n, "FiLM batch size");
        assert!(offset + 2 * c <= p, "FiLM parameter slice out of range");
        let hw = h * w;
        let mut out = self.value(x).clone();
        let r = self.value(raw).data();
        for s in 0..n {
            for ch in 0..c {
                let g = 1.0 + r[s * p + offset + ch];
                let b = r[s * p + offset + c + ch];
                out.data_mut()[(s * c + ch) * hw..][..hw]
                    .iter_mut()
                    .for_each(|v| *v = g * *v + b);
            }
        }
        self.push(out, Op::Film { x, raw, offset }, &[x, raw])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shapes");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        self.push(
            Tensor::from_vec(&[n, ca + cb, h, w], data),
            Op::Concat { a, b },
            &[a, b],
        )
    }

    /// x·Wᵀ + b for x: n×din, W: dout×din.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, wdin) = self.value(w).dims2();
        assert_eq!(din, wdin, "linear input width");
        let mut out = Tensor::zeros(&[n, dout]);
        for row in out.data_mut().chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            out.data_mut(),
        );
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Selects table rows, producing an n×d matrix.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let (_, d) = self.value(table).dims2();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&self.value(table).data()[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::from_vec(&[rows.len(), d], data),
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        )
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (_, d) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push(out, Op::L2Normalize { x }, &[x])
    }

    /// Masks the mixture spectra with a 3-channel head (n×3×H×W, H over
    /// frequency and W over time). Channel 0 gives |M| = ceiling·σ(u); channels
    /// 1–2 give the phase residual as the angle of (re, im). Frequency rows
    /// beyond the last head row (the Nyquist bin) reuse the last row; padded
    /// rows and columns are ignored. Output is n×T×F×2 (re, im).
    pub fn mask_apply(&mut self, head: Var, mix: Arc<MixtureSpectra>, ceiling: f64) -> Var {
        let (n, c, h, w) = self.value(head).dims4();
        assert_eq!(c, 3, "mask head must have 3 channels");
        assert_eq!(n, mix.spectra.len());
        let (frames, bins) = (mix.frames, mix.bins);
        assert!(frames <= w && bins - 1 <= h, "head smaller than spectrogram");
        let hd = self.value(head).data();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, frames, bins, 2]);
        for s in 0..n {
            let base = s * 3 * plane;
            for t in 0..frames {
                for f in 0..bins {
                    let fr = f.min(h - 1).min(bins - 2);
                    let idx = fr * w + t;
                    let u = hd[base + idx];
                    let a = hd[base + plane + idx];
                    let b = hd[base + 2 * plane + idx];
                    let mag = ceiling * sigmoid(u);
                    let r = (a * a + b * b).sqrt();
                    let (cs, sn) = if r < PHASOR_FLOOR { (1.0, 0.0) } else { (a / r, b / r) };
                    let x = mix.spectra[s][t * bins + f];
                    let o = ((s * frames + t) * bins + f) * 2;
                    out.data_mut()[o] = mag * (x.re * cs - x.im * sn);
                    out.data_mut()[o + 1] = mag * (x.re * sn + x.im * cs);
                }
            }
        }
        self.push(out, Op::MaskApply { head, mix, ceiling }, &[head])
    }

    /// Inverse STFT of an n×T×F×2 spectrogram into n×len samples.
    pub fn istft(&mut self, spec: Var, plan: Arc<StftPlan>, len: usize) -> Var {
        let (n, frames, bins) = {
            let s = self.value(spec).shape();
            (s[0], s[1], s[2])
        };
        let mut out = Tensor::zeros(&[n, len]);
        for s in 0..n {
            let data: Vec<Complex64> = self.value(spec).data()[s * frames * bins * 2..][..frames * bins * 2]
                .chunks(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect();
            let wave = plan
                .synthesize(&data, frames, len)
                .expect("STFT plan validated before graph construction");
            out.data_mut()[s * len..(s + 1) * len].copy_from_slice(&wave);
        }
        self.push(out, Op::Istft { spec, plan, frames }, &[spec])
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, est: Var, target: Tensor) -> Var {
        assert_eq!(self.value(est).shape(), target.shape(), "L1 operand shapes");
        let n = target.len() as f64;
        let loss = self
            .value(est)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::L1Loss { est, target }, &[est])
    }

    /// Σ weights ⊙ x, a smooth scalar reduction.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        assert_eq!(self.value(x).len(), weights.len(), "weighted sum operand sizes");
        let v: f64 = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum { x, weights }, &[x])
    }

    /// Fingerprint of the branch taken at every non-differentiable point
    /// (activation signs, L1 residual signs). Two evaluations with the same
    /// signature lie in the same smooth piece of the loss.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } | Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::L1Loss { est, target } => {
                    for (a, b) in self.value(*est).data().iter().zip(target.data()) {
                        (a - b).partial_cmp(&0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter leaf, indexed by parameter-store slot.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(p), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                match out[p].as_mut() {
                    Some(acc) => acc.add_assign(g),
                    None => out[p] = Some(g.clone()),
                }
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match grads[v.0].as_mut() {
            Some(a) => a.add_assign(&t),
            None => grads[v.0] = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, pad } => {
                let r = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *pad,
                    self.needs(*x),
                    b.is_some(),
                );
                if let Some(dx) = r.dx {
                    acc(grads, *x, dx);
                }
                acc(grads, *w, r.dw);
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(grads, *b, db);
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let r = conv_transpose2_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.needs(*x),
                    b.is_some(),
                );
                if let Some(dx) = r.dx {
                    acc(grads, *x, dx);
                }
                acc(grads, *w, r.dw);
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(grads, *b, db);
                }
            }
            Op::AvgPool2 { x } => {
                let dx = avg_pool2_backward(g, self.value(*x).shape());
                acc(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let r = batch_norm_backward(g, xhat, inv_std, self.value(*gamma), *batch_stats);
                if self.needs(*x) {
                    acc(grads, *x, r.dx);
                }
                acc(grads, *gamma, r.dgamma);
                acc(grads, *beta, r.dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= 0.0 {
                        *d *= slope;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Film { x, raw, offset } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let rv = self.value(*raw);
                let p = rv.dims2().1;
                let mut draw = Tensor::zeros(rv.shape());
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        let gs = &g.data()[off..off + hw];
                        let xs = &xv.data()[off..off + hw];
                        let dgamma: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                        let dbeta: f64 = gs.iter().sum();
                        draw.data_mut()[s * p + offset + ch] += dgamma;
                        draw.data_mut()[s * p + offset + c + ch] += dbeta;
                        if let Some(dx) = dx.as_mut() {
                            let gm = 1.0 + rv.data()[s * p + offset + ch];
                            for (d, gv) in dx.data_mut()[off..off + hw].iter_mut().zip(gs) {
                                *d = gm * gv;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                acc(grads, *raw, draw);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let blk = &g.data()[s * (ca + cb) * hw..(s + 1) * (ca + cb) * hw];
                    da.extend_from_slice(&blk[..ca * hw]);
                    db.extend_from_slice(&blk[ca * hw..]);
                }
                if self.needs(*a) {
                    acc(grads, *a, Tensor::from_vec(&[n, ca, h, w], da));
                }
                if self.needs(*b) {
                    acc(grads, *b, Tensor::from_vec(&[n, cb, h, w], db));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let dout = self.value(*w).dims2().0;
                let mut dw = Tensor::zeros(&[dout, din]);
                // dW = gᵀ·x
                gemm(dout, n, din, g.data(), true, self.value(*x).data(), false, 0.0, dw.data_mut());
                let mut db = Tensor::zeros(&[dout]);
                for row in g.data().chunks(dout) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[n, din]);
                    gemm(n, dout, din, g.data(), false, self.value(*w).data(), false, 0.0, dx.data_mut());
                    acc(grads, *x, dx);
                }
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Gather { table, rows } => {
                let (_, d) = self.value(*table).dims2();
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[r * d + j] += g.data()[k * d + j];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::L2Normalize { x } => {
                let xv = self.value(*x);
                let yv = &self.nodes[i].value;
                let (_, d) = xv.dims2();
                let mut dx = Tensor::zeros(xv.shape());
                for ((dxr, xr), (yr, gr)) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(yv.data().chunks(d).zip(g.data().chunks(d)))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::MaskApply { head, mix, ceiling } => {
                let hv = self.value(*head);
                let (n, _, h, w) = hv.dims4();
                let plane = h * w;
                let (frames, bins) = (mix.frames, mix.bins);
                let mut dh = Tensor::zeros(hv.shape());
                for s in 0..n {
                    let base = s * 3 * plane;
                    for t in 0..frames {
                        for f in 0..bins {
                            let fr = f.min(h - 1).min(bins - 2);
                            let idx = fr * w + t;
                            let u = hv.data()[base + idx];
                            let a = hv.data()[base + plane + idx];
                            let b = hv.data()[base + 2 * plane + idx];
                            let sg = sigmoid(u);
                            let mag = ceiling * sg;
                            let r = (a * a + b * b).sqrt();
                            let x = mix.spectra[s][t * bins + f];
                            let o = ((s * frames + t) * bins + f) * 2;
                            let (gr, gi) = (g.data()[o], g.data()[o + 1]);
                            let (cs, sn) = if r < PHASOR_FLOOR { (1.0, 0.0) } else { (a / r, b / r) };
                            let dmag = gr * (x.re * cs - x.im * sn) + gi * (x.re * sn + x.im * cs);
                            dh.data_mut()[base + idx] += dmag * ceiling * sg * (1.0 - sg);
                            if r >= PHASOR_FLOOR {
                                let dc = mag * (gr * x.re + gi * x.im);
                                let ds = mag * (gi * x.re - gr * x.im);
                                let r3 = r * r * r;
                                dh.data_mut()[base + plane + idx] += (dc * b * b - ds * a * b) / r3;
                                dh.data_mut()[base + 2 * plane + idx] += (ds * a * a - dc * a * b) / r3;
                            }
                        }
                    }
                }
                acc(grads, *head, dh);
            }
            Op::Istft { spec, plan, frames } => {
                let shape = self.value(*spec).shape().to_vec();
                let (n, bins) = (shape[0], shape[2]);
                let len = g.dims2().1;
                let mut ds = Tensor::zeros(&shape);
                for s in 0..n {
                    let adj = plan
                        .synthesize_adjoint(&g.data()[s * len..(s + 1) * len], *frames)
                        .expect("STFT plan validated before graph construction");
                    let dst = &mut ds.data_mut()[s * frames * bins * 2..][..frames * bins * 2];
                    for (p, c) in dst.chunks_mut(2).zip(adj) {
                        p[0] = c.re;
                        p[1] = c.im;
                    }
                }
                acc(grads, *spec, ds);
            }
            Op::L1Loss { est, target } => {
                let scale = g.item() / target.len() as f64;
                let mut de = Tensor::zeros(target.shape());
                for ((d, a), b) in de
                    .data_mut()
                    .iter_mut()
                    .zip(self.value(*est).data())
                    .zip(target.data())
                {
                    // Subgradient 0 at ties.
                    *d = match (a - b).partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => scale,
                        Some(std::cmp::Ordering::Less) => -scale,
                        _ => 0.0,
                    };
                }
                acc(grads, *est, de);
            }
            Op::WeightedSum { x, weights } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let gv = g.item();
                for (d, w) in dx.data_mut().iter_mut().zip(weights.data()) {
                    *d = gv * w;
                }
                acc(grads, *x, dx);
            }
        }
    }
}
