//! Student and teacher encoders, cross-attention predictor and the
//! transformer + transposed-convolution decoder.
//!
//! All encoders are pre-norm transformers working on the flattened
//! channel-major token sequence (`index = c * n + i`). The teacher is an EMA
//! shadow of the student encoder layers; it shares the token embedding and
//! channel embedding with the student and never records gradients.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::error::{Error, Result};
use crate::masking::{apply_mask_var, MaskPlan};
use crate::signal::RawRecording;
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::tokenizer::{channel_embeddings, segment, stft_embed, Stft, TokenizerConfig};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelEmbedding {
    /// No channel information.
    None,
    /// A trained vector per atlas position.
    Learned,
    /// Fixed sinusoidal encoding of scalp coordinates.
    Location,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub encoder_layers: usize,
    pub predictor_layers: usize,
    pub decoder_layers: usize,
    pub channel_embedding: ChannelEmbedding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            heads: 8,
            ffn_mult: 4,
            dropout: 0.1,
            encoder_layers: 4,
            predictor_layers: 2,
            decoder_layers: 2,
            channel_embedding: ChannelEmbedding::Location,
        }
    }
}

impl ModelConfig {
    pub fn d_e(&self) -> usize {
        self.tokenizer.d_e
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        let d = self.d_e();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("d_e {} not divisible by {} heads", d, self.heads)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.tokenizer.window % (d / 4) != 0 {
            return Err(Error::Config(format!(
                "window {} must be a multiple of d_e/4 = {} for the decoder",
                self.tokenizer.window,
                d / 4
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameters placed on a tape, as leaves (trainable) or constants.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn leaves(tape: &'t Tape, params: &Params) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    pub fn constants(tape: &'t Tape, params: &Params) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Wraps handles already on a tape, one per parameter in `params` order.
    pub fn from_vars(params: &Params, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != params.len() || vars.iter().zip(&params.tensors).any(|(v, t)| v.shape() != t.shape()) {
            return Err(Error::Validation(format!(
                "{} handles for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Self { vars: vars.to_vec() })
    }

    pub fn var(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient per parameter, zero-filled where none reached.
    pub fn gradients(&self, grads: &Gradients, params: &Params) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&params.tensors)
            .map(|(v, t)| grads.slice(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

struct Registrar<'a> {
    params: &'a mut Params,
    rng: &'a mut ChaCha8Rng,
}

impl Registrar<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let t = Tensor::trunc_normal(shape, INIT_STD, self.rng);
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.insert(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.insert(name, Tensor::full(shape, 1.0))
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.weight(format!("{}.w", prefix), &[input, output]),
            b: self.zeros(format!("{}.b", prefix), &[output]),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.ones(format!("{}.g", prefix), &[d]),
            b: self.zeros(format!("{}.b", prefix), &[d]),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{}.q", prefix), d, d),
            k: self.linear(&format!("{}.k", prefix), d, d),
            v: self.linear(&format!("{}.v", prefix), d, d),
            o: self.linear(&format!("{}.o", prefix), d, d),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, ffn: usize, cross: bool) -> Block {
        Block {
            norm1: self.norm(&format!("{}.ln1", prefix), d),
            norm_kv: cross.then(|| self.norm(&format!("{}.ln_kv", prefix), d)),
            attn: self.attention(&format!("{}.attn", prefix), d),
            norm2: self.norm(&format!("{}.ln2", prefix), d),
            ff1: self.linear(&format!("{}.ff1", prefix), d, d * ffn),
            ff2: self.linear(&format!("{}.ff2", prefix), d * ffn, d),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&p.var(self.w))?.add_bias(&p.var(self.b))
    }

    fn shift(&self, by: usize) -> Self {
        Self {
            w: self.w - by,
            b: self.b - by,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    g: usize,
    b: usize,
}

impl Norm {
    fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&p.var(self.g), &p.var(self.b))
    }

    fn shift(&self, by: usize) -> Self {
        Self {
            g: self.g - by,
            b: self.b - by,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    norm1: Norm,
    norm_kv: Option<Norm>,
    attn: Attention,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn shift(&self, by: usize) -> Self {
        Self {
            norm1: self.norm1.shift(by),
            norm_kv: self.norm_kv.map(|n| n.shift(by)),
            attn: Attention {
                q: self.attn.q.shift(by),
                k: self.attn.k.shift(by),
                v: self.attn.v.shift(by),
                o: self.attn.o.shift(by),
            },
            norm2: self.norm2.shift(by),
            ff1: self.ff1.shift(by),
            ff2: self.ff2.shift(by),
        }
    }
}

/// Dropout settings for one forward pass; `None` disables it.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout<'t>(x: Var<'t>, drop: &mut Option<Dropout<'_>>) -> Result<Var<'t>> {
    match drop {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let n: usize = x.shape().iter().product();
            let mask: Vec<f64> = (0..n)
                .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = x.tape().constant(Tensor::new(x.shape(), mask)?);
            x.mul(&m)
        }
        _ => Ok(x),
    }
}

fn multi_head<'t>(p: &Bound<'t>, a: &Attention, heads: usize, q_in: Var<'t>, kv_in: Var<'t>) -> Result<Var<'t>> {
    let d = q_in.shape()[1];
    let dh = d / heads;
    let q = a.q.apply(p, q_in)?;
    let k = a.k.apply(p, kv_in)?;
    let v = a.v.apply(p, kv_in)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let w = qh.matmul(&kh.transpose()?)?.scale(scale).softmax();
        outs.push(w.matmul(&vh)?);
    }
    a.o.apply(p, Var::concat(&outs, 1)?)
}

fn run_block<'t>(
    p: &Bound<'t>,
    b: &Block,
    heads: usize,
    x: Var<'t>,
    kv: Option<Var<'t>>,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var<'t>> {
    let h = b.norm1.apply(p, x)?;
    let ctx = match (kv, b.norm_kv) {
        (Some(kv), Some(n)) => n.apply(p, kv)?,
        _ => h,
    };
    let a = dropout(multi_head(p, &b.attn, heads, h, ctx)?, drop)?;
    let x = x.add(&a)?;
    let h = b.norm2.apply(p, x)?;
    let f = b.ff2.apply(p, b.ff1.apply(p, h)?.gelu())?;
    x.add(&dropout(f, drop)?)
}

/// 1-D sinusoidal encoding of token index `i`.
pub fn temporal_encoding(i: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let k = (j / 2) as f64;
            let angle = i as f64 / 10000f64.powf(2.0 * k / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Per-recording constants reused across training steps.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[C·n, w/2 + 1]`
    pub magnitudes: Tensor,
    /// `[C, d_e]` location embeddings.
    pub location: Tensor,
    /// Atlas row of each channel (for learned embeddings).
    pub atlas_rows: Vec<usize>,
    pub channels: usize,
    pub tokens: usize,
    pub len: usize,
}

pub struct Forward<'t> {
    /// `[C·n, d_e]` student latents.
    pub latents: Var<'t>,
    /// `[|B|, d_e]` predictions at masked slots (ascending flat index).
    pub predictions: Option<Var<'t>>,
    /// `[C, L]` reconstructed signal.
    pub reconstruction: Option<Var<'t>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Params,
    teacher: Params,
    /// Student parameter index of every teacher tensor.
    teacher_source: Vec<usize>,
    step: u64,
    layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    mask_token: usize,
    ce_table: Option<usize>,
    encoder: Vec<Block>,
    encoder_norm: Norm,
    encoder_start: usize,
    predictor: Vec<Block>,
    predictor_out: (usize, usize),
    decoder_in: (usize, usize),
    decoder: Vec<Block>,
    deconv_w: usize,
    deconv_b: usize,
}

impl ModelState {
    pub fn new(config: ModelConfig, atlas: &Atlas, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_e();
        let bins = config.tokenizer.bins();
        let ffn = config.ffn_mult;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let mut r = Registrar {
            params: &mut params,
            rng: &mut rng,
        };
        let embed = r.linear("embed", bins, d);
        let mask_token = r.weight("mask_token".into(), &[d]);
        let ce_table = (config.channel_embedding == ChannelEmbedding::Learned)
            .then(|| r.weight("channel_table".into(), &[atlas.len(), d]));
        let encoder_start = r.params.len();
        let encoder: Vec<Block> = (0..config.encoder_layers)
            .map(|l| r.block(&format!("encoder.{}", l), d, ffn, false))
            .collect();
        let encoder_norm = r.norm("encoder.ln_f", d);
        let encoder_end = r.params.len();
        let predictor: Vec<Block> = (0..config.predictor_layers)
            .map(|l| r.block(&format!("predictor.{}", l), d, ffn, true))
            .collect();
        let predictor_out = r.linear("predictor.out", d, d);
        let decoder_in = r.linear("decoder.in", 2 * d, d);
        let decoder: Vec<Block> = (0..config.decoder_layers)
            .map(|l| r.block(&format!("decoder.{}", l), d, ffn, false))
            .collect();
        let kernel = config.tokenizer.window / (d / 4);
        let deconv_w = r.weight("decoder.deconv.w".into(), &[4, 1, kernel]);
        let deconv_b = r.zeros("decoder.deconv.b".into(), &[1]);

        let mut teacher = Params::default();
        let mut teacher_source = Vec::new();
        for i in encoder_start..encoder_end {
            teacher.insert(params.names[i].clone(), params.tensors[i].clone());
            teacher_source.push(i);
        }
        let layout = Layout {
            embed_w: embed.w,
            embed_b: embed.b,
            mask_token,
            ce_table,
            encoder,
            encoder_norm,
            encoder_start,
            predictor,
            predictor_out: (predictor_out.w, predictor_out.b),
            decoder_in: (decoder_in.w, decoder_in.b),
            decoder,
            deconv_w,
            deconv_b,
        };
        Ok(Self {
            config,
            params,
            teacher,
            teacher_source,
            step: 0,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn teacher(&self) -> &Params {
        &self.teacher
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Name of the student tensor each teacher tensor shadows.
    pub fn teacher_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.teacher_source.iter().copied().enumerate()
    }

    /// `teacher ← tau·teacher + (1 − tau)·student`, parameterwise.
    pub fn ema_update(&mut self, tau: f64) {
        for (ti, si) in self.teacher_source.iter().copied().enumerate() {
            let src = self.params.tensors[si].data().to_vec();
            for (t, s) in self.teacher.tensors[ti].data_mut().iter_mut().zip(src) {
                *t = tau * *t + (1.0 - tau) * s;
            }
        }
    }

    /// Makes the teacher an exact copy of the student encoder.
    pub fn sync_teacher(&mut self) {
        for (ti, si) in self.teacher_source.iter().copied().enumerate() {
            self.teacher.tensors[ti] = self.params.tensors[si].clone();
        }
    }

    fn encoder_blocks(&self) -> &[Block] {
        &self.layout.encoder
    }

    /// Encoder blocks re-indexed into the teacher store.
    fn teacher_blocks(&self) -> Vec<Block> {
        self.encoder_blocks()
            .iter()
            .map(|b| b.shift(self.layout.encoder_start))
            .collect()
    }

    pub fn prepare(&self, recording: &RawRecording, atlas: &Atlas) -> Result<Prepared> {
        let tk = &self.config.tokenizer;
        let tokens = segment(recording, tk.window, tk.overlap)?;
        let (c, n) = (tokens.shape()[0], tokens.shape()[1]);
        let magnitudes = Stft::new(tk.window)?.magnitudes(&tokens)?;
        let location = channel_embeddings(atlas, recording.channels(), tk.d_e)?;
        let atlas_rows = match self.config.channel_embedding {
            ChannelEmbedding::Learned => recording
                .channels()
                .iter()
                .map(|p| match atlas.index_of(&p.name) {
                    Ok(i) => Ok(i),
                    Err(_) => atlas.nearest(p.u, p.v).and_then(|q| atlas.index_of(&q.name)),
                })
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok(Prepared {
            magnitudes,
            location,
            atlas_rows,
            channels: c,
            tokens: n,
            len: recording.len(),
        })
    }

    /// `[C·n, d]` channel-embedding rows, or `None` when disabled.
    fn channel_rows<'t>(&self, tape: &'t Tape, p: &Bound<'t>, prep: &Prepared) -> Result<Option<Var<'t>>> {
        let (c, n, d) = (prep.channels, prep.tokens, self.config.d_e());
        match self.config.channel_embedding {
            ChannelEmbedding::None => Ok(None),
            ChannelEmbedding::Location => {
                let mut data = Vec::with_capacity(c * n * d);
                for ch in 0..c {
                    for _ in 0..n {
                        data.extend_from_slice(prep.location.row(ch));
                    }
                }
                Ok(Some(tape.constant(Tensor::new(vec![c * n, d], data)?)))
            }
            ChannelEmbedding::Learned => {
                let table = p.var(self.layout.ce_table.expect("learned table registered"));
                let rows: Vec<usize> = (0..c * n).map(|j| prep.atlas_rows[j / n]).collect();
                Ok(Some(table.index_rows(&rows)?))
            }
        }
    }

    /// Token embeddings plus channel embeddings, `[C·n, d]`.
    pub fn embed_tokens<'t>(&self, tape: &'t Tape, p: &Bound<'t>, prep: &Prepared) -> Result<Var<'t>> {
        let mags = tape.constant(prep.magnitudes.clone());
        let e = stft_embed(mags, &p.var(self.layout.embed_w), &p.var(self.layout.embed_b))?;
        match self.channel_rows(tape, p, prep)? {
            Some(ce) => e.add(&ce),
            None => Ok(e),
        }
    }

    fn encode<'t>(
        &self,
        p: &Bound<'t>,
        blocks: &[Block],
        norm: Norm,
        x: Var<'t>,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var<'t>> {
        let mut h = x;
        for b in blocks {
            h = run_block(p, b, self.config.heads, h, None, drop)?;
        }
        norm.apply(p, h)
    }

    /// Student encoder over (optionally masked) embeddings.
    pub fn encode_student<'t>(&self, p: &Bound<'t>, x: Var<'t>, drop: &mut Option<Dropout<'_>>) -> Result<Var<'t>> {
        self.encode(p, self.encoder_blocks(), self.layout.encoder_norm, x, drop)
    }

    /// Teacher latents of the unmasked recording, `[C·n, d]`, computed off-tape.
    pub fn encode_teacher(&self, prep: &Prepared) -> Result<Tensor> {
        let tape = Tape::new();
        let student = Bound::constants(&tape, &self.params);
        let teacher = Bound::constants(&tape, &self.teacher);
        let x = self.embed_tokens(&tape, &student, prep)?;
        let x = tape.constant(x.value());
        let norm = self.layout.encoder_norm.shift(self.layout.encoder_start);
        Ok(self.encode(&teacher, &self.teacher_blocks(), norm, x, &mut None)?.value())
    }

    /// Query rows for masked slots: temporal encoding plus channel embedding.
    fn queries<'t>(&self, tape: &'t Tape, p: &Bound<'t>, prep: &Prepared, masked: &[usize]) -> Result<Var<'t>> {
        let (n, d) = (prep.tokens, self.config.d_e());
        let mut data = Vec::with_capacity(masked.len() * d);
        for &j in masked {
            data.extend(temporal_encoding(j % n, d));
        }
        let q = tape.constant(Tensor::new(vec![masked.len(), d], data)?);
        match self.channel_rows(tape, p, prep)? {
            Some(ce) => q.add(&ce.index_rows(masked)?),
            None => Ok(q),
        }
    }

    /// Cross-attention predictor: one output row per masked slot.
    pub fn predict_masked<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prep: &Prepared,
        latents: Var<'t>,
        plan: &MaskPlan,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var<'t>> {
        let masked = plan.masked_indices();
        if masked.is_empty() {
            return Err(Error::Validation("predictor needs at least one masked token".into()));
        }
        let mut q = self.queries(tape, p, prep, &masked)?;
        for b in &self.layout.predictor {
            q = run_block(p, b, self.config.heads, q, Some(latents), drop)?;
        }
        let (w, b) = self.layout.predictor_out;
        q.matmul(&p.var(w))?.add_bias(&p.var(b))
    }

    /// Decoder: `[pred scattered to masked slots ‖ latents]` → transformer →
    /// per-token transposed convolution → overlap-add to `[C, L]`.
    pub fn decode<'t>(
        &self,
        p: &Bound<'t>,
        prep: &Prepared,
        predictions: Var<'t>,
        latents: Var<'t>,
        plan: &MaskPlan,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var<'t>> {
        let (c, n, d) = (prep.channels, prep.tokens, self.config.d_e());
        let rows = c * n;
        let scattered = predictions.scatter_rows(&plan.masked_indices(), rows)?;
        let x = Var::concat(&[scattered, latents], 1)?;
        let (w, b) = self.layout.decoder_in;
        let mut h = x.matmul(&p.var(w))?.add_bias(&p.var(b))?;
        for blk in &self.layout.decoder {
            h = run_block(p, blk, self.config.heads, h, None, drop)?;
        }
        let tk = &self.config.tokenizer;
        let kernel = tk.window / (d / 4);
        let y = h.reshape(&[rows, 4, d / 4])?.conv1d_transpose(
            &p.var(self.layout.deconv_w),
            Some(&p.var(self.layout.deconv_b)),
            kernel,
            0,
            1,
        )?;
        y.reshape(&[c, n, tk.window])?.overlap_add(tk.hop(), prep.len)
    }

    /// Full student-side pass: mask, encode, predict and decode.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prep: &Prepared,
        plan: &MaskPlan,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Forward<'t>> {
        let x = self.embed_tokens(tape, p, prep)?;
        let x = apply_mask_var(x, plan, &p.var(self.layout.mask_token))?;
        let latents = self.encode_student(p, x, drop)?;
        if plan.masked_count() == 0 {
            return Ok(Forward {
                latents,
                predictions: None,
                reconstruction: None,
            });
        }
        let pred = self.predict_masked(tape, p, prep, latents, plan, drop)?;
        let recon = self.decode(p, prep, pred, latents, plan, drop)?;
        Ok(Forward {
            latents,
            predictions: Some(pred),
            reconstruction: Some(recon),
        })
    }

    /// Mean-pooled student latents of the unmasked recording.
    pub fn embed(&self, recording: &RawRecording, atlas: &Atlas) -> Result<Vec<f64>> {
        let prep = self.prepare(recording, atlas)?;
        let tape = Tape::new();
        let p = Bound::constants(&tape, &self.params);
        let x = self.embed_tokens(&tape, &p, &prep)?;
        let z = self.encode_student(&p, x, &mut None)?;
        Ok(z.mean_axis(0)?.value().into_data())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, atlas: &Atlas) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, atlas)
    }

    /// Checkpoint layout (little-endian):
    /// magic `EEGXCKPT`, version u32, config TOML (u32 length + bytes), step
    /// u64, then for the student and teacher tables a u32 count followed by
    /// entries of (u16 name length, name, u8 rank, u32 dims, f64 values).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for table in [&self.params, &self.teacher] {
            out.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for (name, t) in table.names.iter().zip(&table.tensors) {
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(t.ndim() as u8);
                for &s in t.shape() {
                    out.extend_from_slice(&(s as u32).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], atlas: &Atlas) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let n = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = ModelConfig::from_toml(cfg)?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let mut state = Self::new(config, atlas, 0)?;
        state.step = step;
        for table in [&mut state.params, &mut state.teacher] {
            let count = r.u32()? as usize;
            if count != table.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} tensors, model expects {}",
                    count,
                    table.len()
                )));
            }
            for _ in 0..count {
                let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                    .to_string();
                let rank = r.take(1)?[0] as usize;
                let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                let slot = table
                    .get_mut(&name)
                    .ok_or_else(|| Error::Format(format!("unexpected parameter {:?}", name)))?;
                if slot.shape() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "parameter {:?} has shape {:?}, model expects {:?}",
                        name,
                        shape,
                        slot.shape()
                    )));
                }
                let raw = r.take(slot.numel() * 8)?;
                for (v, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                    *v = f64::from_le_bytes(b.try_into().unwrap());
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(state)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EEGXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
