//! Dictionary convolution transform and the reconstruction losses built on it.
//!
//! A dictionary holds `G` groups of `K` fixed, zero-mean random kernels. For
//! every dilation `d` each group convolves the signal with its `K` kernels
//! ("same" length, zero padding). At each time step the kernel with the
//! largest response adds that response to its max-pathway accumulator and
//! the kernel with the smallest response adds its response to its
//! min-pathway accumulator. Accumulators are divided by the signal length.
//!
//! The loss compares signed-square-root compressed accumulators,
//! `phi(v) = sign(v) * (sqrt(|v| + eps) - sqrt(eps))`. Raw accumulators are
//! linear in the response amplitude, so a squared distance between them
//! weighs frequency components almost exactly like a time-domain MSE;
//! compression lets the count of winning time steps, not just the response
//! energy, shape the distance.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Smoothing constant of the compression.
pub const COMPRESS_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictConfig {
    pub groups: usize,
    pub kernels: usize,
    pub kernel_length: usize,
    pub seed: u64,
}

impl Default for DictConfig {
    fn default() -> Self {
        Self {
            groups: 32,
            kernels: 8,
            kernel_length: 9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    groups: usize,
    kernels: usize,
    kernel_length: usize,
    dilations: Vec<usize>,
    design_len: usize,
    seed: u64,
    /// `[G, K, kernel_length]`
    weights: Arc<Vec<f64>>,
}

/// Dilations `1, 2, 4, ...` whose receptive field `(kernel_length - 1)·d + 1` fits in `len`.
pub fn dilations_for(kernel_length: usize, len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut d = 1usize;
    while (kernel_length - 1) * d + 1 <= len {
        out.push(d);
        if kernel_length == 1 {
            break;
        }
        d *= 2;
    }
    out
}

impl Dictionary {
    pub fn build(groups: usize, kernels: usize, kernel_length: usize, len: usize, seed: u64) -> Result<Self> {
        if groups == 0 || kernels == 0 {
            return Err(Error::Config("dictionary needs at least one group and one kernel".into()));
        }
        if kernel_length % 2 == 0 {
            return Err(Error::Config(format!("kernel length {} must be odd", kernel_length)));
        }
        if kernel_length > len {
            return Err(Error::Config(format!(
                "kernel length {} exceeds signal length {}",
                kernel_length, len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; groups * kernels * kernel_length];
        for kernel in weights.chunks_mut(kernel_length) {
            for w in kernel.iter_mut() {
                *w = StandardNormal.sample(&mut rng);
            }
            let mean = kernel.iter().sum::<f64>() / kernel_length as f64;
            kernel.iter_mut().for_each(|w| *w -= mean);
        }
        Ok(Self {
            groups,
            kernels,
            kernel_length,
            dilations: dilations_for(kernel_length, len),
            design_len: len,
            seed,
            weights: Arc::new(weights),
        })
    }

    pub fn from_config(config: &DictConfig, len: usize) -> Result<Self> {
        Self::build(config.groups, config.kernels, config.kernel_length, len, config.seed)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernels(&self) -> usize {
        self.kernels
    }

    pub fn kernel_length(&self) -> usize {
        self.kernel_length
    }

    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }

    pub fn design_len(&self) -> usize {
        self.design_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Kernel `k` of group `g`.
    pub fn kernel(&self, g: usize, k: usize) -> &[f64] {
        let i = (g * self.kernels + k) * self.kernel_length;
        &self.weights[i..i + self.kernel_length]
    }

    /// Features per channel: `G · K · |dilations| · 2`.
    pub fn feature_len(&self) -> usize {
        self.groups * self.kernels * self.dilations.len() * 2
    }

    /// Flat feature index; `path` is 0 for max, 1 for min.
    pub fn feature_index(&self, dilation: usize, path: usize, g: usize, k: usize) -> usize {
        ((dilation * 2 + path) * self.groups + g) * self.kernels + k
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::shape("dict_transform", format!("expected [C, L], got {:?}", shape)));
        }
        if shape[1] > self.design_len {
            return Err(Error::Validation(format!(
                "signal length {} exceeds dictionary design length {}",
                shape[1], self.design_len
            )));
        }
        Ok((shape[0], shape[1]))
    }

    /// Raw accumulators of a `[C, L]` signal, shape `[C, feature_len]`.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.0)
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Vec<u16>)> {
        let (c, len) = self.check_input(x.shape())?;
        let (gn, kn, kl) = (self.groups, self.kernels, self.kernel_length);
        let half = kl / 2;
        let f = self.feature_len();
        let nd = self.dilations.len();
        let mut feats = vec![0.0; c * f];
        // winners[((ch * nd + di) * G + g) * L + t] = kmax | kmin << 8
        let mut winners = vec![0u16; c * nd * gn * len];
        let mut resp = vec![0.0; kn * len];
        let inv_len = 1.0 / len as f64;
        for ch in 0..c {
            let xs = &x.data()[ch * len..(ch + 1) * len];
            let fc = &mut feats[ch * f..(ch + 1) * f];
            for (di, &d) in self.dilations.iter().enumerate() {
                for g in 0..gn {
                    resp.iter_mut().for_each(|r| *r = 0.0);
                    for k in 0..kn {
                        let w = self.kernel(g, k);
                        let row = &mut resp[k * len..(k + 1) * len];
                        for (j, &wj) in w.iter().enumerate() {
                            let off = j as isize * d as isize - (half * d) as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = (len as isize - off).clamp(0, len as isize) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let src = &xs[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (r, &xv) in row[lo..hi].iter_mut().zip(src) {
                                *r += wj * xv;
                            }
                        }
                    }
                    let wbase = ((ch * nd + di) * gn + g) * len;
                    let max_base = self.feature_index(di, 0, g, 0);
                    let min_base = self.feature_index(di, 1, g, 0);
                    for t in 0..len {
                        let (mut kmax, mut kmin) = (0usize, 0usize);
                        let (mut vmax, mut vmin) = (resp[t], resp[t]);
                        for k in 1..kn {
                            let v = resp[k * len + t];
                            if v > vmax {
                                vmax = v;
                                kmax = k;
                            }
                            if v < vmin {
                                vmin = v;
                                kmin = k;
                            }
                        }
                        fc[max_base + kmax] += vmax * inv_len;
                        fc[min_base + kmin] += vmin * inv_len;
                        winners[wbase + t] = (kmax | (kmin << 8)) as u16;
                    }
                }
            }
        }
        Ok((Tensor::new(vec![c, f], feats)?, winners))
    }

    /// Differentiable transform of a `[C, L]` variable. Gradients reach only
    /// input samples under the winning kernels.
    pub fn transform_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.kernels > 256 {
            return Err(Error::Config("at most 256 kernels per group".into()));
        }
        let (value, winners) = self.run(&x.value())?;
        let shape = x.shape();
        let op = TransformOp {
            dict: self.clone(),
            winners,
            channels: shape[0],
            len: shape[1],
        };
        Ok(x.tape().custom(&[x], value, Box::new(op)))
    }
}

struct TransformOp {
    dict: Dictionary,
    winners: Vec<u16>,
    channels: usize,
    len: usize,
}

impl CustomOp for TransformOp {
    fn name(&self) -> &'static str {
        "dict_transform"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let dict = &self.dict;
        let (gn, kl, len) = (dict.groups, dict.kernel_length, self.len);
        let half = kl / 2;
        let f = dict.feature_len();
        let nd = dict.dilations.len();
        let inv_len = 1.0 / len as f64;
        let mut dx = vec![0.0; self.channels * len];
        for ch in 0..self.channels {
            let gc = &grad[ch * f..(ch + 1) * f];
            let dxc = &mut dx[ch * len..(ch + 1) * len];
            for (di, &d) in dict.dilations.iter().enumerate() {
                for g in 0..gn {
                    let wbase = ((ch * nd + di) * gn + g) * len;
                    let max_base = dict.feature_index(di, 0, g, 0);
                    let min_base = dict.feature_index(di, 1, g, 0);
                    for t in 0..len {
                        let code = self.winners[wbase + t];
                        let (kmax, kmin) = ((code & 0xff) as usize, (code >> 8) as usize);
                        for (k, gr) in [(kmax, gc[max_base + kmax]), (kmin, gc[min_base + kmin])] {
                            if gr == 0.0 {
                                continue;
                            }
                            let gr = gr * inv_len;
                            for (j, &wj) in dict.kernel(g, k).iter().enumerate() {
                                let pos = t as isize + j as isize * d as isize - (half * d) as isize;
                                if pos >= 0 && (pos as usize) < len {
                                    dxc[pos as usize] += wj * gr;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// `sign(v) * (sqrt(|v| + eps) - sqrt(eps))`
pub fn compress(v: f64) -> f64 {
    v.signum() * ((v.abs() + COMPRESS_EPS).sqrt() - COMPRESS_EPS.sqrt())
}

fn compress_grad(v: f64) -> f64 {
    0.5 / (v.abs() + COMPRESS_EPS).sqrt()
}

struct CompressOp;

impl CustomOp for CompressOp {
    fn name(&self) -> &'static str {
        "compress"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0].data().iter().zip(grad).map(|(&v, g)| g * compress_grad(v)).collect();
        vec![Some(d)]
    }
}

pub fn compress_var<'t>(x: Var<'t>) -> Var<'t> {
    let value = x.value().map(compress);
    x.tape().custom(&[x], value, Box::new(CompressOp))
}

/// Compressed features used as a fixed reconstruction target.
pub fn target_features(dict: &Dictionary, x_clean: &Tensor) -> Result<Tensor> {
    Ok(dict.transform(x_clean)?.map(compress))
}

/// DiCT loss against precomputed [`target_features`]: squared distance of
/// compressed features summed over channels, divided by the per-channel
/// feature count.
pub fn dict_loss_to_target<'t>(dict: &Dictionary, target: &Tensor, x_decoder: Var<'t>) -> Result<Var<'t>> {
    let shape = x_decoder.shape();
    let expected = [shape.first().copied().unwrap_or(0), dict.feature_len()];
    if target.shape() != expected {
        return Err(Error::shape(
            "dict_loss",
            format!("target {:?} vs decoder {:?}", target.shape(), shape),
        ));
    }
    let t = x_decoder.tape().constant(target.clone());
    let fd = compress_var(dict.transform_var(x_decoder)?);
    Ok(fd.sub(&t)?.squared_l2().scale(1.0 / dict.feature_len() as f64))
}

pub fn dict_loss_var<'t>(dict: &Dictionary, x_clean: &Tensor, x_decoder: Var<'t>) -> Result<Var<'t>> {
    if x_clean.shape() != x_decoder.shape().as_slice() {
        return Err(Error::shape(
            "dict_loss",
            format!("{:?} vs {:?}", x_clean.shape(), x_decoder.shape()),
        ));
    }
    dict_loss_to_target(dict, &target_features(dict, x_clean)?, x_decoder)
}

pub fn dict_loss(dict: &Dictionary, x_clean: &Tensor, x_decoder: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(dict_loss_var(dict, x_clean, tape.constant(x_decoder.clone()))?.item())
}

/// Mean of squared elementwise differences.
pub fn direct_mse_var<'t>(x: Var<'t>, y: &Var<'t>) -> Result<Var<'t>> {
    Ok(x.sub(y).map_err(|_| Error::shape("direct_mse", format!("{:?} vs {:?}", x.shape(), y.shape())))?
        .mul(&x.sub(y)?)?
        .mean())
}

pub fn direct_mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape("direct_mse", format!("[{}] vs [{}]", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A1Config {
    pub sample_rate: f64,
    pub duration: f64,
    /// Source: `(frequency Hz, amplitude)` components.
    pub source: Vec<(f64, f64)>,
    pub low_only: Vec<(f64, f64)>,
    pub high_dominant: Vec<(f64, f64)>,
    /// Phase added to every `high_dominant` component for the third reconstruction.
    pub phase_shift: f64,
    pub groups: usize,
    pub kernels: usize,
    pub kernel_length: usize,
}

impl Default for A1Config {
    fn default() -> Self {
        Self {
            sample_rate: 1000.0,
            duration: 1.0,
            source: vec![(2.0, 5.0), (20.0, 1.0), (100.0, 0.5)],
            low_only: vec![(2.0, 5.0), (100.0, 0.1)],
            high_dominant: vec![(100.0, 0.5), (20.0, 1.0), (2.0, 2.5)],
            phase_shift: std::f64::consts::PI / 3.0,
            groups: 32,
            kernels: 8,
            kernel_length: 9,
        }
    }
}

pub fn sinusoid_mix(components: &[(f64, f64)], phase: f64, sample_rate: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 / sample_rate;
            components
                .iter()
                .map(|&(f, a)| a * (2.0 * std::f64::consts::PI * f * t + phase).sin())
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct A1Signals {
    pub source: Vec<f64>,
    /// Low-frequency-only, high-frequency-dominant, phase-shifted.
    pub reconstructions: [Vec<f64>; 3],
}

impl A1Config {
    pub fn len(&self) -> usize {
        (self.sample_rate * self.duration).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn signals(&self) -> A1Signals {
        let (fs, n) = (self.sample_rate, self.len());
        A1Signals {
            source: sinusoid_mix(&self.source, 0.0, fs, n),
            reconstructions: [
                sinusoid_mix(&self.low_only, 0.0, fs, n),
                sinusoid_mix(&self.high_dominant, 0.0, fs, n),
                sinusoid_mix(&self.high_dominant, self.phase_shift, fs, n),
            ],
        }
    }
}

pub const A1_LABELS: [&str; 3] = ["low_freq_only", "high_freq_dominant", "phase_shifted"];

#[derive(Clone, Debug, PartialEq)]
pub struct A1Report {
    pub seed: u64,
    pub direct: [f64; 3],
    pub dict: [f64; 3],
}

impl A1Report {
    /// Direct MSE strictly increases over the three reconstructions.
    pub fn direct_ordered(&self) -> bool {
        self.direct[0] < self.direct[1] && self.direct[1] < self.direct[2]
    }

    /// Low-frequency-only has the largest DiCT error.
    pub fn dict_low_worst(&self) -> bool {
        self.dict[0] > self.dict[1] && self.dict[0] > self.dict[2]
    }

    /// The phase shift costs relatively less under DiCT than under direct MSE.
    pub fn phase_robust(&self) -> bool {
        self.dict[2] / self.dict[1] < self.direct[2] / self.direct[1]
    }

    pub fn all_hold(&self) -> bool {
        self.direct_ordered() && self.dict_low_worst() && self.phase_robust()
    }
}

pub fn a1_experiment(config: &A1Config, seed: u64) -> Result<A1Report> {
    let n = config.len();
    let sig = config.signals();
    let dict = Dictionary::build(config.groups, config.kernels, config.kernel_length, n, seed)?;
    let src = Tensor::new(vec![1, n], sig.source.clone())?;
    let target = target_features(&dict, &src)?;
    let mut direct = [0.0; 3];
    let mut dict_err = [0.0; 3];
    for (i, r) in sig.reconstructions.iter().enumerate() {
        direct[i] = direct_mse(&sig.source, r)?;
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, n], r.clone())?);
        dict_err[i] = dict_loss_to_target(&dict, &target, x)?.item();
    }
    Ok(A1Report {
        seed,
        direct,
        dict: dict_err,
    })
}
