//! Windowed segmentation, STFT-magnitude token embedding and the sinusoidal
//! location embedding of each channel.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, ElectrodePosition};
use crate::error::{Error, Result};
use crate::signal::RawRecording;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub window: usize,
    pub overlap: usize,
    pub d_e: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            window: 128,
            overlap: 32,
            d_e: 16,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::Config(format!(
                "overlap {} must be smaller than window {}",
                self.overlap, self.window
            )));
        }
        if self.d_e == 0 || self.d_e % 4 != 0 {
            return Err(Error::Config(format!("d_e {} must be a positive multiple of 4", self.d_e)));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.window - self.overlap
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn token_count(&self, len: usize) -> Result<usize> {
        token_count(len, self.window, self.overlap)
    }
}

/// `ceil((L - o) / (w - o))`, at least one token.
pub fn token_count(len: usize, window: usize, overlap: usize) -> Result<usize> {
    if window == 0 || overlap >= window {
        return Err(Error::Config(format!(
            "overlap {} must be smaller than window {}",
            overlap, window
        )));
    }
    if len == 0 {
        return Err(Error::Validation("cannot segment an empty signal".into()));
    }
    let hop = window - overlap;
    Ok(len.saturating_sub(overlap).div_ceil(hop).max(1))
}

/// Cuts every channel into `n` windows of `w` samples starting every `w - o`
/// samples; the tail of the last window is zero-filled. Output `[C, n, w]`.
pub fn segment(recording: &RawRecording, window: usize, overlap: usize) -> Result<Tensor> {
    let len = recording.len();
    let n = token_count(len, window, overlap)?;
    let hop = window - overlap;
    let c = recording.num_channels();
    let mut data = vec![0.0; c * n * window];
    for ch in 0..c {
        let x = recording.channel(ch);
        for i in 0..n {
            let start = i * hop;
            let end = (start + window).min(len);
            let dst = (ch * n + i) * window;
            data[dst..dst + end - start].copy_from_slice(&x[start..end]);
        }
    }
    Tensor::new(vec![c, n, window], data)
}

/// Single-frame Hann-windowed magnitude spectrum of each token.
pub struct Stft {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(frame: usize) -> Result<Self> {
        if frame < 2 {
            return Err(Error::Config(format!("STFT frame length {} too short", frame)));
        }
        let window = (0..frame)
            .map(|t| {
                let s = (std::f64::consts::PI * t as f64 / frame as f64).sin();
                s * s
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(frame);
        Ok(Self { window, fft })
    }

    pub fn frame(&self) -> usize {
        self.window.len()
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    pub fn magnitude(&self, token: &[f64]) -> Result<Vec<f64>> {
        if token.len() != self.frame() {
            return Err(Error::Config(format!(
                "token length {} does not match STFT frame {}",
                token.len(),
                self.frame()
            )));
        }
        let mut buf: Vec<Complex<f64>> = token.iter().zip(&self.window).map(|(x, h)| Complex::new(x * h, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..self.bins()].iter().map(|z| z.norm()).collect())
    }

    /// `[C, n, w]` tokens to `[C·n, w/2 + 1]` magnitudes.
    pub fn magnitudes(&self, tokens: &Tensor) -> Result<Tensor> {
        let shape = tokens.shape();
        if shape.len() != 3 {
            return Err(Error::shape("stft", format!("{:?}", shape)));
        }
        let w = shape[2];
        let rows = shape[0] * shape[1];
        let mut data = Vec::with_capacity(rows * self.bins());
        for r in 0..rows {
            data.extend(self.magnitude(&tokens.data()[r * w..(r + 1) * w])?);
        }
        Tensor::new(vec![rows, self.bins()], data)
    }
}

/// Linear token embedding `e = |STFT(t)| · W + b` with `W: [bins, d_e]`.
pub fn stft_embed<'t>(magnitudes: Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    magnitudes.matmul(weight)?.add_bias(bias)
}

/// Sinusoidal encoding of scaled scalp coordinates: entries `4k..4k+4` are
/// `sin(u ω_k), cos(u ω_k), sin(v ω_k), cos(v ω_k)` with `ω_k = 1000^(-4k/d_e)`.
pub fn location_embedding(u: f64, v: f64, d_e: usize) -> Result<Vec<f64>> {
    if d_e == 0 || d_e % 4 != 0 {
        return Err(Error::Config(format!("d_e {} must be a positive multiple of 4", d_e)));
    }
    let mut out = Vec::with_capacity(d_e);
    for k in 0..d_e / 4 {
        let omega = 1000f64.powf(-4.0 * k as f64 / d_e as f64);
        out.extend([(u * omega).sin(), (u * omega).cos(), (v * omega).sin(), (v * omega).cos()]);
    }
    Ok(out)
}

pub fn position_embedding(atlas: &Atlas, p: &ElectrodePosition, d_e: usize) -> Result<Vec<f64>> {
    let (u, v) = atlas.scaled(p);
    location_embedding(u, v, d_e)
}

/// `[C, d_e]` location embeddings of a recording's channels.
pub fn channel_embeddings(atlas: &Atlas, channels: &[ElectrodePosition], d_e: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(channels.len() * d_e);
    for p in channels {
        data.extend(position_embedding(atlas, p, d_e)?);
    }
    Tensor::new(vec![channels.len(), d_e], data)
}

#[derive(Clone, Debug)]
pub struct TokenBatch {
    /// `[C, n, w]`
    pub tokens: Tensor,
    /// `[C, n, d_e]`
    pub embeddings: Tensor,
    pub window: usize,
    pub overlap: usize,
    pub n: usize,
}

/// Segments, embeds and adds each channel's location embedding to its tokens.
/// `weight` is `[w/2 + 1, d_e]`, `bias` is `[d_e]`.
pub fn tokenize(
    recording: &RawRecording,
    config: &TokenizerConfig,
    atlas: &Atlas,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<TokenBatch> {
    config.validate()?;
    let tokens = segment(recording, config.window, config.overlap)?;
    let (c, n) = (tokens.shape()[0], tokens.shape()[1]);
    let mags = Stft::new(config.window)?.magnitudes(&tokens)?;
    let tape = Tape::new();
    let e = stft_embed(tape.constant(mags), &tape.constant(weight.clone()), &tape.constant(bias.clone()))?;
    let loc = channel_embeddings(atlas, recording.channels(), config.d_e)?;
    let mut embeddings = e.value().reshaped(&[c, n, config.d_e])?;
    for ch in 0..c {
        for i in 0..n {
            let row = &mut embeddings.data_mut()[(ch * n + i) * config.d_e..(ch * n + i + 1) * config.d_e];
            for (x, p) in row.iter_mut().zip(loc.row(ch)) {
                *x += p;
            }
        }
    }
    Ok(TokenBatch {
        tokens,
        embeddings,
        window: config.window,
        overlap: config.overlap,
        n,
    })
}
