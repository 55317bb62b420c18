//! Block masking of the token grid for latent self-prediction.
//!
//! Each channel gets its share of the masked-token budget, cut into contiguous
//! blocks of `block_len` tokens (the last block may be shorter). Block
//! positions are drawn uniformly over all arrangements of blocks and visible
//! gaps, so blocks never overlap and every channel keeps a visible token.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
    /// `None` means `max(1, n / 4)`.
    pub block_len: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            block_len: None,
        }
    }
}

impl MaskConfig {
    pub fn block_len_for(&self, n: usize) -> usize {
        self.block_len.unwrap_or((n / 4).max(1)).min(n.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    channels: usize,
    tokens: usize,
    masked: Vec<bool>,
    block_len: usize,
    seed: u64,
}

impl MaskPlan {
    /// Plan with nothing masked.
    pub fn empty(channels: usize, tokens: usize) -> Self {
        Self {
            channels,
            tokens,
            masked: vec![false; channels * tokens],
            block_len: 1,
            seed: 0,
        }
    }

    /// Plan from an explicit `[C·n]` flag grid (channel-major).
    pub fn from_flags(channels: usize, tokens: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != channels * tokens {
            return Err(Error::shape(
                "mask_plan",
                format!("{} flags for {}x{} grid", masked.len(), channels, tokens),
            ));
        }
        Ok(Self {
            channels,
            tokens,
            masked,
            block_len: 1,
            seed: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_masked(&self, channel: usize, token: usize) -> bool {
        self.masked[channel * self.tokens + token]
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    /// Flat (channel-major) indices of masked tokens, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn ratio(&self) -> f64 {
        self.masked_count() as f64 / self.masked.len().max(1) as f64
    }
}

/// Draws a block mask over a `channels × tokens` grid.
pub fn make_mask(channels: usize, tokens: usize, ratio: f64, block_len: usize, seed: u64) -> Result<MaskPlan> {
    if channels == 0 || tokens == 0 {
        return Err(Error::Validation("mask grid is empty".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {} outside (0, 1)", ratio)));
    }
    if block_len == 0 || block_len > tokens {
        return Err(Error::Config(format!("block length {} outside [1, {}]", block_len, tokens)));
    }
    if ratio * (tokens as f64) < 1.0 {
        return Err(Error::Config(format!(
            "ratio {} over {} tokens masks nothing",
            ratio, tokens
        )));
    }
    let total = (ratio * (channels * tokens) as f64).round() as usize;
    if total > channels * (tokens - 1) {
        return Err(Error::Config(format!(
            "masking {} of {}x{} tokens leaves a channel without a visible token",
            total, channels, tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..channels).collect();
    order.shuffle(&mut rng);
    let mut per_channel = vec![total / channels; channels];
    for &c in order.iter().take(total % channels) {
        per_channel[c] += 1;
    }

    let mut masked = vec![false; channels * tokens];
    for (c, &m) in per_channel.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let mut blocks = vec![block_len; m / block_len];
        if m % block_len != 0 {
            blocks.push(m % block_len);
        }
        blocks.shuffle(&mut rng);
        let visible = tokens - m;
        // Stars and bars: `blocks.len()` block slots among `visible + blocks.len()`.
        let slots = visible + blocks.len();
        let mut picked = index::sample(&mut rng, slots, blocks.len()).into_vec();
        picked.sort_unstable();
        let mut pos = 0;
        let mut next_block = 0;
        for slot in 0..slots {
            if next_block < picked.len() && picked[next_block] == slot {
                for t in pos..pos + blocks[next_block] {
                    masked[c * tokens + t] = true;
                }
                pos += blocks[next_block];
                next_block += 1;
            } else {
                pos += 1;
            }
        }
    }
    Ok(MaskPlan {
        channels,
        tokens,
        masked,
        block_len,
        seed,
    })
}

fn check_plan(rows: usize, d: usize, plan: &MaskPlan, mask_len: usize) -> Result<()> {
    if rows != plan.masked.len() || mask_len != d {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "{} rows x {} vs plan {}x{} with mask token of {}",
                rows, d, plan.channels, plan.tokens, mask_len
            ),
        ));
    }
    Ok(())
}

/// Replaces masked rows of `[C·n, d]` (or `[C, n, d]`) embeddings with the mask vector.
pub fn apply_mask(embeddings: &Tensor, plan: &MaskPlan, mask_token: &[f64]) -> Result<Tensor> {
    let d = *embeddings.shape().last().unwrap_or(&0);
    let rows = if d == 0 { 0 } else { embeddings.numel() / d };
    check_plan(rows, d, plan, mask_token.len())?;
    let mut out = embeddings.clone();
    for i in plan.masked_indices() {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(mask_token);
    }
    Ok(out)
}

/// Differentiable form over `[C·n, d]` rows: gradients reach the visible
/// embeddings and the mask token.
pub fn apply_mask_var<'t>(embeddings: Var<'t>, plan: &MaskPlan, mask_token: &Var<'t>) -> Result<Var<'t>> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(Error::shape("apply_mask", format!("{:?}", shape)));
    }
    check_plan(shape[0], shape[1], plan, mask_token.shape().iter().product())?;
    let masked = plan.masked_indices();
    if masked.is_empty() {
        return Ok(embeddings);
    }
    let visible = plan.visible_indices();
    let rows = shape[0];
    let token = mask_token.reshape(&[1, shape[1]])?.index_rows(&vec![0; masked.len()])?;
    let filled = token.scatter_rows(&masked, rows)?;
    if visible.is_empty() {
        return Ok(filled);
    }
    let kept = embeddings.index_rows(&visible)?.scatter_rows(&visible, rows)?;
    kept.add(&filled)
}
