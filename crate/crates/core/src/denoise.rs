//! Artifact removal producing the reconstruction target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::RawRecording;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Passthrough: reconstruct the raw signal.
    Identity,
    /// Use the stored ground-truth clean signal.
    Oracle,
    /// Zero-phase 4th-order Butterworth band-pass plus an optional notch.
    Spectral {
        #[serde(default = "default_low")]
        low_hz: f64,
        #[serde(default = "default_high")]
        high_hz: f64,
        #[serde(default = "default_line")]
        line_hz: Option<f64>,
        #[serde(default = "default_notch_q")]
        notch_q: f64,
    },
}

fn default_low() -> f64 {
    0.5
}
fn default_high() -> f64 {
    45.0
}
fn default_line() -> Option<f64> {
    Some(50.0)
}
fn default_notch_q() -> f64 {
    30.0
}

impl DenoiserSpec {
    pub fn spectral() -> Self {
        DenoiserSpec::Spectral {
            low_hz: default_low(),
            high_hz: default_high(),
            line_hz: default_line(),
            notch_q: default_notch_q(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DenoiserSpec::Identity => "identity",
            DenoiserSpec::Oracle => "oracle",
            DenoiserSpec::Spectral { .. } => "spectral",
        }
    }
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Oracle
    }
}

pub fn denoise(recording: &RawRecording, spec: &DenoiserSpec, oracle_clean: Option<&RawRecording>) -> Result<RawRecording> {
    match spec {
        DenoiserSpec::Identity => Ok(recording.clone()),
        DenoiserSpec::Oracle => {
            let clean = oracle_clean.ok_or_else(|| Error::Validation("oracle denoiser needs the clean signal".into()))?;
            if clean.num_channels() != recording.num_channels()
                || clean.len() != recording.len()
                || clean.sample_rate() != recording.sample_rate()
            {
                return Err(Error::shape(
                    "denoise",
                    format!(
                        "oracle {}x{} @ {} Hz vs recording {}x{} @ {} Hz",
                        clean.num_channels(),
                        clean.len(),
                        clean.sample_rate(),
                        recording.num_channels(),
                        recording.len(),
                        recording.sample_rate()
                    ),
                ));
            }
            Ok(clean.clone())
        }
        DenoiserSpec::Spectral {
            low_hz,
            high_hz,
            line_hz,
            notch_q,
        } => {
            let chain = SpectralChain::new(recording.sample_rate(), *low_hz, *high_hz, *line_hz, *notch_q)?;
            let mut out = Vec::with_capacity(recording.samples().len());
            for c in 0..recording.num_channels() {
                out.extend(chain.filtfilt(recording.channel(c)));
            }
            recording.with_samples(out)
        }
    }
}

/// Second-order section in transposed direct form II, `a0` normalized to 1.
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    pub fn lowpass(fs: f64, f0: f64, q: f64) -> Self {
        let (cw, alpha) = Self::angles(fs, f0, q);
        Self::from_raw(
            [(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0],
            [1.0 + alpha, -2.0 * cw, 1.0 - alpha],
        )
    }

    pub fn highpass(fs: f64, f0: f64, q: f64) -> Self {
        let (cw, alpha) = Self::angles(fs, f0, q);
        Self::from_raw(
            [(1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0],
            [1.0 + alpha, -2.0 * cw, 1.0 - alpha],
        )
    }

    pub fn notch(fs: f64, f0: f64, q: f64) -> Self {
        let (cw, alpha) = Self::angles(fs, f0, q);
        Self::from_raw([1.0, -2.0 * cw, 1.0], [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
    }

    fn angles(fs: f64, f0: f64, q: f64) -> (f64, f64) {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        (w0.cos(), w0.sin() / (2.0 * q))
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Filters in place starting from the steady state for a constant input `x0`.
    fn run(&self, x: &mut [f64], x0: f64) {
        let y0 = self.dc_gain() * x0;
        let mut s2 = self.b[2] * x0 - self.a[1] * y0;
        let mut s1 = self.b[1] * x0 - self.a[0] * y0 + s2;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + s1;
            s1 = self.b[1] * input - self.a[0] * y + s2;
            s2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }
}

/// Butterworth section quality factors for order 4.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_6];

pub struct SpectralChain {
    sections: Vec<Biquad>,
}

impl SpectralChain {
    pub fn new(fs: f64, low_hz: f64, high_hz: f64, line_hz: Option<f64>, notch_q: f64) -> Result<Self> {
        let nyquist = fs / 2.0;
        for (what, f) in [("low", Some(low_hz)), ("high", Some(high_hz)), ("line", line_hz)] {
            if let Some(f) = f {
                if !(f > 0.0 && f < nyquist) {
                    return Err(Error::Config(format!(
                        "{} edge {} Hz outside (0, {}) Hz Nyquist range",
                        what, f, nyquist
                    )));
                }
            }
        }
        if low_hz >= high_hz {
            return Err(Error::Config(format!("band {}..{} Hz is empty", low_hz, high_hz)));
        }
        let mut sections = Vec::new();
        for q in BUTTER4_Q {
            sections.push(Biquad::highpass(fs, low_hz, q));
        }
        for q in BUTTER4_Q {
            sections.push(Biquad::lowpass(fs, high_hz, q));
        }
        if let Some(f) = line_hz {
            sections.push(Biquad::notch(fs, f, notch_q));
        }
        Ok(Self { sections })
    }

    fn pass(&self, x: &mut [f64]) {
        for s in &self.sections {
            let x0 = x[0];
            s.run(x, x0);
        }
    }

    /// Forward-backward filtering with odd reflection at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        self.pass(&mut ext);
        ext.reverse();
        self.pass(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
