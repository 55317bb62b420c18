//! Losses, optimizer and the pretraining loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::denoise::{denoise, DenoiserSpec};
use crate::dict::{dict_loss_to_target, direct_mse_var, target_features, DictConfig, Dictionary};
use crate::error::{Error, Result};
use crate::masking::{make_mask, MaskConfig};
use crate::model::{Bound, Dropout, ModelConfig, ModelState, Prepared};
use crate::signal::RawRecording;
use crate::synth::LabeledRecording;
use crate::tensor::{Tape, Tensor, Var};

/// `(1/|B|) Σ_j ||ŷ_j − y_j||²` over masked rows. `target` should be a constant.
pub fn align_loss<'t>(pred: Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    let rows = pred.shape().first().copied().unwrap_or(0);
    if rows == 0 || pred.shape() != target.shape() {
        return Err(Error::shape(
            "align_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(pred.sub(target)?.squared_l2().scale(1.0 / rows as f64))
}

/// Variance hinge target for [`reg_loss`].
pub const REG_GAMMA: f64 = 1.0;

/// Variance-covariance regularizer over a `[N, d]` batch of latents:
/// `mean_k relu(γ − std_k)` plus the mean squared off-diagonal covariance.
pub fn reg_loss<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::shape("reg_loss", format!("need [N >= 2, d], got {:?}", shape)));
    }
    let (n, d) = (shape[0], shape[1]);
    let std = z.variance_rows()?.sqrt();
    let var_term = std.scale(-1.0).add_scalar(REG_GAMMA).relu().mean();
    if d < 2 {
        return Ok(var_term);
    }
    let centered = z.add_bias(&z.mean_axis(0)?.scale(-1.0))?;
    let cov = centered.transpose()?.matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let mut off = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        off.data_mut()[i * d + i] = 0.0;
    }
    let off = z.tape().constant(off);
    let cov_term = cov.mul(&off)?.squared_l2().scale(1.0 / (d * (d - 1)) as f64);
    var_term.add(&cov_term)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub align: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            align: 1.0,
            reg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub val_frac: f64,
    pub patience: usize,
    /// Compare reconstructions in dictionary feature space; direct MSE otherwise.
    pub use_dict: bool,
    /// Only "f64" is supported.
    pub precision: String,
    pub loss_weights: LossWeights,
    pub mask: MaskConfig,
    pub denoiser: DenoiserSpec,
    pub dict: DictConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 256,
            epochs: 100,
            lr: 1e-3,
            lr_min: 1e-5,
            ema_start: 0.996,
            ema_end: 0.9999,
            val_frac: 0.1,
            patience: 20,
            use_dict: true,
            precision: "f64".into(),
            loss_weights: LossWeights::default(),
            mask: MaskConfig::default(),
            denoiser: DenoiserSpec::default(),
            dict: DictConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!("invalid learning rates {} -> {}", self.lr, self.lr_min)));
        }
        for (name, t) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{} {} outside [0, 1]", name, t)));
            }
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config(format!("val_frac {} outside [0, 1)", self.val_frac)));
        }
        let w = self.loss_weights;
        if [w.rec, w.align, w.reg].iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.precision != "f64" {
            return Err(Error::Config(format!(
                "precision {:?} is not supported; computation is 64-bit",
                self.precision
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Cosine decay from `lr` to `lr_min` over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = if total <= 1 { 1.0 } else { (step as f64 / (total - 1) as f64).min(1.0) };
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Linear EMA-decay ramp from `ema_start` to `ema_end`.
    pub fn ema_at(&self, step: usize, total: usize) -> f64 {
        let frac = if total <= 1 { 1.0 } else { (step as f64 / (total - 1) as f64).min(1.0) };
        self.ema_start + (self.ema_end - self.ema_start) * frac
    }
}

/// Adam without weight decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(shapes: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_rec: f64,
    pub l_align: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    /// One record per optimizer step.
    pub steps: Vec<LossRecord>,
    /// Mean training losses per epoch.
    pub epochs: Vec<LossRecord>,
    /// Validation losses per epoch (empty without a validation split).
    pub validation: Vec<LossRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// `epoch,l_rec,l_align,l_reg,l_total`
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,l_rec,l_align,l_reg,l_total\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.l_rec, r.l_align, r.l_reg, r.l_total));
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Writes `last.ckpt` after every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps (smoke runs).
    pub max_steps: Option<usize>,
}

/// Cached per-recording inputs and reconstruction target.
pub struct Sample {
    pub prep: Prepared,
    /// Dictionary features `[C, F]` or the time-domain target `[C, L]`.
    pub target: Tensor,
}

struct Values {
    rec: f64,
    align: f64,
    reg: f64,
    total: f64,
}

/// The three loss terms of a batch and their weighted sum.
pub struct BatchLosses<'t> {
    pub rec: Var<'t>,
    pub align: Var<'t>,
    pub reg: Var<'t>,
    pub total: Var<'t>,
}

impl BatchLosses<'_> {
    fn values(&self) -> Values {
        Values {
            rec: self.rec.item(),
            align: self.align.item(),
            reg: self.reg.item(),
            total: self.total.item(),
        }
    }
}

/// Reconstruction target of one recording under the configured denoiser.
pub fn reconstruction_target(rec: &LabeledRecording, spec: &DenoiserSpec) -> Result<RawRecording> {
    denoise(&rec.noisy, spec, Some(&rec.clean))
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub atlas: &'a Atlas,
    dict: Option<Dictionary>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, atlas: &'a Atlas, max_len: usize) -> Result<Self> {
        config.validate()?;
        let dict = if config.use_dict {
            Some(Dictionary::from_config(&config.dict, max_len)?)
        } else {
            None
        };
        Ok(Self { config, atlas, dict })
    }

    pub fn dictionary(&self) -> Option<&Dictionary> {
        self.dict.as_ref()
    }

    pub fn sample(&self, state: &ModelState, rec: &LabeledRecording) -> Result<Sample> {
        let prep = state.prepare(&rec.noisy, self.atlas)?;
        let clean = reconstruction_target(rec, &self.config.denoiser)?;
        let x = Tensor::new(vec![clean.num_channels(), clean.len()], clean.samples().to_vec())?;
        let target = match &self.dict {
            Some(d) => target_features(d, &x)?,
            None => x,
        };
        Ok(Sample { prep, target })
    }

    /// Builds the three losses and their weighted sum for a batch on `tape`.
    /// `mask_seeds` holds one mask seed per sample.
    pub fn batch_losses<'t>(
        &self,
        state: &ModelState,
        tape: &'t Tape,
        p: &Bound<'t>,
        samples: &[&Sample],
        mask_seeds: &[u64],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<BatchLosses<'t>> {
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        let mut latents = Vec::new();
        let mut recs = Vec::new();
        for (s, &seed) in samples.iter().zip(mask_seeds) {
            let (c, n) = (s.prep.channels, s.prep.tokens);
            let block = self.config.mask.block_len_for(n);
            let plan = make_mask(c, n, self.config.mask.ratio, block, seed)?;
            let teacher = state.encode_teacher(&s.prep)?;
            let masked = plan.masked_indices();
            let mut rows = Vec::with_capacity(masked.len() * teacher.shape()[1]);
            for &j in &masked {
                rows.extend_from_slice(teacher.row(j));
            }
            targets.push(Tensor::new(vec![masked.len(), teacher.shape()[1]], rows)?);
            let out = state.forward(tape, p, &s.prep, &plan, drop)?;
            let recon = out.reconstruction.expect("mask is non-empty");
            let l_rec = match &self.dict {
                Some(d) => dict_loss_to_target(d, &s.target, recon)?,
                None => direct_mse_var(recon, &tape.constant(s.target.clone()))?,
            };
            recs.push(l_rec);
            preds.push(out.predictions.expect("mask is non-empty"));
            latents.push(out.latents);
        }
        let pred = Var::concat(&preds, 0)?;
        let target = Tensor::new(
            pred.shape(),
            targets.iter().flat_map(|t| t.data().iter().copied()).collect(),
        )?;
        let align = align_loss(pred, &tape.constant(target))?;
        let reg = reg_loss(Var::concat(&latents, 0)?)?;
        let mut rec = recs[0];
        for r in &recs[1..] {
            rec = rec.add(r)?;
        }
        let rec = rec.scale(1.0 / recs.len() as f64);
        let w = self.config.loss_weights;
        let total = rec.scale(w.rec).add(&align.scale(w.align))?.add(&reg.scale(w.reg))?;
        Ok(BatchLosses { rec, align, reg, total })
    }

    fn evaluate(&self, state: &ModelState, samples: &[Sample], seed: u64) -> Result<Values> {
        let mut acc = Values {
            rec: 0.0,
            align: 0.0,
            reg: 0.0,
            total: 0.0,
        };
        let bs = self.config.batch_size;
        let mut count = 0.0;
        for range in batch_ranges(samples.len(), bs) {
            let (start, chunk) = (range.start, &samples[range]);
            let tape = Tape::new();
            let p = Bound::constants(&tape, state.params());
            let refs: Vec<&Sample> = chunk.iter().collect();
            let seeds: Vec<u64> = (0..chunk.len()).map(|i| seed ^ ((start + i) as u64).wrapping_mul(0x9e37_79b9)).collect();
            let v = self.batch_losses(state, &tape, &p, &refs, &seeds, &mut None)?.values();
            let wgt = chunk.len() as f64;
            acc.rec += v.rec * wgt;
            acc.align += v.align * wgt;
            acc.reg += v.reg * wgt;
            acc.total += v.total * wgt;
            count += wgt;
        }
        acc.rec /= count;
        acc.align /= count;
        acc.reg /= count;
        acc.total /= count;
        Ok(acc)
    }
}

/// Contiguous batches of at most `size` items; a trailing singleton joins the
/// previous batch so every batch can feed [`reg_loss`].
pub fn batch_ranges(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..len).step_by(size.max(1)).map(|s| s..(s + size).min(len)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn check_finite(step: usize, v: &Values) -> Result<()> {
    if [v.rec, v.align, v.reg, v.total].iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!(
                "l_rec={} l_align={} l_reg={} l_total={}",
                v.rec, v.align, v.reg, v.total
            ),
        })
    }
}

fn record(epoch: usize, step: usize, v: &Values) -> LossRecord {
    LossRecord {
        epoch,
        step,
        l_rec: v.rec,
        l_align: v.align,
        l_reg: v.reg,
        l_total: v.total,
    }
}

/// Self-supervised pretraining on the noisy recordings of `data`.
///
/// Training stops after `patience` epochs without a new lowest validation
/// `L_total`. The state at that point is returned; the best one is written
/// to `best.ckpt` when checkpointing.
pub fn pretrain(
    data: &[LabeledRecording],
    config: &TrainConfig,
    atlas: &Atlas,
    options: &PretrainOptions,
) -> Result<(ModelState, TrainHistory)> {
    if data.is_empty() {
        return Err(Error::Validation("pretraining set is empty".into()));
    }
    let max_len = data.iter().map(|r| r.noisy.len()).max().unwrap_or(0);
    let trainer = Trainer::new(config, atlas, max_len)?;
    let mut state = ModelState::new(config.model.clone(), atlas, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * config.val_frac).round() as usize;
    let n_val = if n_val < 2 || data.len() - n_val < 2 { 0 } else { n_val };
    if data.len() - n_val < 2 {
        return Err(Error::Validation("pretraining needs at least two recordings".into()));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<Sample> = train_idx.iter().map(|&i| trainer.sample(&state, &data[i])).collect::<Result<_>>()?;
    let val: Vec<Sample> = val_idx.iter().map(|&i| trainer.sample(&state, &data[i])).collect::<Result<_>>()?;

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(state.params().tensors());
    let mut history = TrainHistory::default();
    let mut best: Option<f64> = None;
    let mut since_best = 0;
    let mut step = 0usize;
    let val_seed: u64 = rng.random();
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut limit_hit = false;
    for epoch in 1..=config.epochs {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut rng);
        let mut sums = Values {
            rec: 0.0,
            align: 0.0,
            reg: 0.0,
            total: 0.0,
        };
        let mut batches = 0.0;
        for range in batch_ranges(perm.len(), config.batch_size) {
            let chunk = &perm[range];
            if options.max_steps.is_some_and(|m| step >= m) {
                limit_hit = true;
                break;
            }
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len()).map(|_| rng.random()).collect();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut dropout = Some(Dropout {
                p: config.model.dropout,
                rng: &mut drop_rng,
            });
            let tape = Tape::new();
            let p = Bound::leaves(&tape, state.params());
            let batch = trainer.batch_losses(&state, &tape, &p, &samples, &seeds, &mut dropout)?;
            let values = batch.values();
            check_finite(step, &values)?;
            let grads = tape.backward(batch.total)?;
            let g = p.gradients(&grads, state.params());
            let lr = config.lr_at(step, total_steps);
            adam.step(state.params_mut().tensors_mut(), &g, lr);
            state.ema_update(config.ema_at(step, total_steps));
            step += 1;
            state.set_step(step as u64);
            history.steps.push(record(epoch, step, &values));
            sums.rec += values.rec;
            sums.align += values.align;
            sums.reg += values.reg;
            sums.total += values.total;
            batches += 1.0;
        }
        if batches == 0.0 {
            break;
        }
        let mean = Values {
            rec: sums.rec / batches,
            align: sums.align / batches,
            reg: sums.reg / batches,
            total: sums.total / batches,
        };
        history.epochs.push(record(epoch, step, &mean));
        log::info!(
            "epoch {} step {} l_total {:.5} (rec {:.5} align {:.5} reg {:.5})",
            epoch,
            step,
            mean.total,
            mean.rec,
            mean.align,
            mean.reg
        );
        let score = if val.is_empty() {
            mean.total
        } else {
            let v = trainer.evaluate(&state, &val, val_seed)?;
            check_finite(step, &v)?;
            history.validation.push(record(epoch, step, &v));
            v.total
        };
        if let Some(dir) = &options.checkpoint_dir {
            state.save(dir.join("last.ckpt"))?;
        }
        if best.is_none_or(|b| score < b) {
            best = Some(score);
            history.best_epoch = epoch;
            since_best = 0;
            if let Some(dir) = &options.checkpoint_dir {
                state.save(dir.join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
        if limit_hit || options.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    Ok((state, history))
}

/// Mean-pooled student representations, one row per recording.
pub fn embed_all(state: &ModelState, recordings: &[&RawRecording], atlas: &Atlas) -> Result<Vec<Vec<f64>>> {
    recordings.iter().map(|r| state.embed(r, atlas)).collect()
}
