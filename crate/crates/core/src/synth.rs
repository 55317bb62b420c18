//! Synthetic EEG with spatially smooth sources, class-dependent oscillations
//! and injected artifacts.
//!
//! Every source sits at a point of the normalized scalp disk and reaches
//! electrode `c` with gain `exp(-dist² / σ²)`. Each recording mixes random
//! 1/f background sources, the class-specific narrowband sources and white
//! sensor noise; the noisy copy adds blinks, line noise and muscle bursts.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, ElectrodePosition};
use crate::error::{Error, Result};
use crate::signal::RawRecording;

pub const MONTAGE_19: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "P7", "P3", "Pz", "P4", "P8", "O1", "O2",
];

pub const MONTAGE_14: [&str; 14] = [
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
];

pub const MONTAGE_8: [&str; 8] = ["Fp1", "Fp2", "T7", "T8", "PO7", "PO8", "O1", "O2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDef {
    pub u: f64,
    pub v: f64,
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub name: String,
    pub sources: Vec<SourceDef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactMix {
    /// Expected blinks per second.
    pub blink_rate: f64,
    pub blink_amp: f64,
    pub line_amp: f64,
    pub line_hz: f64,
    pub muscle_amp: f64,
}

impl Default for ArtifactMix {
    fn default() -> Self {
        Self {
            blink_rate: 0.5,
            blink_amp: 4.0,
            line_amp: 1.0,
            line_hz: 50.0,
            muscle_amp: 1.5,
        }
    }
}

impl ArtifactMix {
    pub fn none() -> Self {
        Self {
            blink_rate: 0.0,
            blink_amp: 0.0,
            line_amp: 0.0,
            line_hz: 50.0,
            muscle_amp: 0.0,
        }
    }

    fn is_none(&self) -> bool {
        self.blink_rate == 0.0 && self.line_amp == 0.0 && self.muscle_amp == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub montage: Vec<String>,
    pub sample_rate: f64,
    pub duration: f64,
    pub classes: Vec<ClassDef>,
    pub background_sources: usize,
    pub background_amp: f64,
    pub sensor_noise: f64,
    /// Source spread relative to the head radius.
    pub sigma: f64,
    /// Random displacement of class sources per recording.
    pub position_jitter: f64,
    pub artifacts: ArtifactMix,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            montage: MONTAGE_8.iter().map(|s| s.to_string()).collect(),
            sample_rate: 128.0,
            duration: 2.0,
            classes: lateralized_alpha(),
            background_sources: 6,
            background_amp: 1.0,
            sensor_noise: 0.1,
            sigma: 0.25,
            position_jitter: 0.05,
            artifacts: ArtifactMix::default(),
            seed: 0,
        }
    }
}

/// Two classes: a 10 Hz posterior source on the left or on the right.
pub fn lateralized_alpha() -> Vec<ClassDef> {
    [("left", -0.35), ("right", 0.35)]
        .into_iter()
        .map(|(name, u)| ClassDef {
            name: name.into(),
            sources: vec![SourceDef {
                u,
                v: -0.5,
                freq_hz: 10.0,
                amplitude: 1.5,
            }],
        })
        .collect()
}

impl SynthSpec {
    pub fn with_montage(mut self, names: &[&str]) -> Self {
        self.montage = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn len(&self) -> usize {
        (self.sample_rate * self.duration).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.montage.is_empty() {
            return Err(Error::Config("montage is empty".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.sources == b.sources {
                    return Err(Error::Config(format!("classes {:?} and {:?} are identical", a.name, b.name)));
                }
            }
        }
        if self.is_empty() || !(self.sample_rate > 0.0) {
            return Err(Error::Config("recordings must have at least one sample".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecording {
    pub clean: RawRecording,
    pub noisy: RawRecording,
    pub label: usize,
}

pub fn gain(p: &ElectrodePosition, u: f64, v: f64, sigma: f64) -> f64 {
    let d2 = (p.u - u).powi(2) + (p.v - v).powi(2);
    (-d2 / (sigma * sigma)).exp()
}

/// Unit-variance noise with a `1/f` power spectrum (DC removed).
pub fn pink_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    if len < 2 {
        return vec![0.0; len];
    }
    let mut spec = vec![Complex::new(0.0, 0.0); len];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for k in 1..=len / 2 {
        let a = 1.0 / (k as f64).sqrt();
        let z = Complex::new(normal.sample(rng), normal.sample(rng)) * a;
        spec[k] = z;
        if k != len - k {
            spec[len - k] = z.conj();
        } else {
            spec[k] = Complex::new(z.re, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|z| z.re).collect();
    let mean = x.iter().sum::<f64>() / len as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
    x.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

fn random_disk_point<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> (f64, f64) {
    loop {
        let u = rng.random_range(-radius..radius);
        let v = rng.random_range(-radius..radius);
        if u * u + v * v <= radius * radius {
            return (u, v);
        }
    }
}

/// Unit-RMS white noise with FFT bins outside `[lo, hi]` Hz zeroed.
fn band_noise<R: Rng + ?Sized>(len: usize, fs: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut spec: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut spec);
    for (k, z) in spec.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * fs / len as f64;
        if f < lo || f > hi {
            *z = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|z| z.re).collect();
    let sd = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    x.iter().map(|v| v / sd.max(1e-12)).collect()
}

const BLINK_CENTER: (f64, f64) = (0.0, 0.95);
const MUSCLE_CENTERS: [(f64, f64); 2] = [(-0.8, 0.0), (0.8, 0.0)];

fn recording_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` recordings with balanced labels (`index mod classes`).
pub fn generate(spec: &SynthSpec, atlas: &Atlas, count: usize) -> Result<Vec<LabeledRecording>> {
    spec.validate()?;
    let channels = spec
        .montage
        .iter()
        .map(|n| atlas.lookup(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    (0..count)
        .map(|i| generate_one(spec, &channels, i as u64, i % spec.classes.len()))
        .collect()
}

fn generate_one(spec: &SynthSpec, channels: &[ElectrodePosition], index: u64, label: usize) -> Result<LabeledRecording> {
    let mut rng = recording_rng(spec.seed, index);
    let (len, fs, c) = (spec.len(), spec.sample_rate, channels.len());
    let tau = std::f64::consts::TAU;
    let mut clean = vec![0.0; c * len];
    let add_source = |out: &mut Vec<f64>, u: f64, v: f64, sigma: f64, wave: &[f64]| {
        for (ch, p) in channels.iter().enumerate() {
            let g = gain(p, u, v, sigma);
            for (o, w) in out[ch * len..(ch + 1) * len].iter_mut().zip(wave) {
                *o += g * w;
            }
        }
    };

    for _ in 0..spec.background_sources {
        let (u, v) = random_disk_point(&mut rng, 0.9);
        let wave: Vec<f64> = pink_noise(len, &mut rng).iter().map(|x| x * spec.background_amp).collect();
        add_source(&mut clean, u, v, spec.sigma, &wave);
    }
    for s in &spec.classes[label].sources {
        let (du, dv) = random_disk_point(&mut rng, spec.position_jitter.max(1e-12));
        let freq = s.freq_hz + rng.random_range(-0.5..0.5);
        let amp = s.amplitude * rng.random_range(0.7..1.3);
        let phase = rng.random_range(0.0..tau);
        let wave: Vec<f64> = (0..len).map(|t| amp * (tau * freq * t as f64 / fs + phase).sin()).collect();
        add_source(&mut clean, s.u + du, s.v + dv, spec.sigma, &wave);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for x in clean.iter_mut() {
        *x += spec.sensor_noise * normal.sample(&mut rng);
    }

    let mut noisy = clean.clone();
    let a = &spec.artifacts;
    if !a.is_none() {
        let duration = len as f64 / fs;
        let blinks = if a.blink_rate > 0.0 {
            Poisson::new(a.blink_rate * duration).map_or(0, |p| p.sample(&mut rng) as usize)
        } else {
            0
        };
        for _ in 0..blinks {
            let center = rng.random_range(0.0..duration);
            let width = rng.random_range(0.08..0.15);
            let amp = a.blink_amp * rng.random_range(0.7..1.3);
            // Derivative-of-Gaussian, scaled so the peak equals `amp`.
            let wave: Vec<f64> = (0..len)
                .map(|t| {
                    let z = (t as f64 / fs - center) / width;
                    -amp * z * (-0.5 * z * z).exp() * 1.6487
                })
                .collect();
            add_source(&mut noisy, BLINK_CENTER.0, BLINK_CENTER.1, 0.35, &wave);
        }
        if a.line_amp > 0.0 && a.line_hz < fs / 2.0 {
            let phase = rng.random_range(0.0..tau);
            for ch in 0..c {
                for t in 0..len {
                    noisy[ch * len + t] += a.line_amp * (tau * a.line_hz * t as f64 / fs + phase).sin();
                }
            }
        }
        if a.muscle_amp > 0.0 {
            let side = rng.random_range(0..2);
            let (u, v) = MUSCLE_CENTERS[side];
            let hi = (fs / 2.0 * 0.95).min(60.0);
            let noise = band_noise(len, fs, 20.0_f64.min(hi / 2.0), hi, &mut rng);
            let start = rng.random_range(0.0..duration * 0.7);
            let stop = start + rng.random_range(0.3 * duration..0.6 * duration).min(duration - start);
            let wave: Vec<f64> = noise
                .iter()
                .enumerate()
                .map(|(t, x)| {
                    let s = t as f64 / fs;
                    if s >= start && s <= stop {
                        a.muscle_amp * x * (std::f64::consts::PI * (s - start) / (stop - start)).sin()
                    } else {
                        0.0
                    }
                })
                .collect();
            add_source(&mut noisy, u, v, 0.3, &wave);
        }
    }
    Ok(LabeledRecording {
        clean: RawRecording::new(channels.to_vec(), clean, fs)?,
        noisy: RawRecording::new(channels.to_vec(), noisy, fs)?,
        label,
    })
}

/// Stratified split of sample indices. Each class contributes
/// `round(train_frac · count)` samples to the training side.
pub fn split_indices(labels: &[usize], train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction {} outside (0, 1)", train_frac)));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Validation(format!("class {} has fewer than 2 samples", c)));
        }
        idx.shuffle(&mut rng);
        let k = ((train_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(data: &[LabeledRecording], train_frac: f64, seed: u64) -> Result<(Vec<LabeledRecording>, Vec<LabeledRecording>)> {
    let labels: Vec<usize> = data.iter().map(|r| r.label).collect();
    let (tr, te) = split_indices(&labels, train_frac, seed)?;
    Ok((
        tr.iter().map(|&i| data[i].clone()).collect(),
        te.iter().map(|&i| data[i].clone()).collect(),
    ))
}

pub const LABELS_FILE: &str = "labels.csv";

/// Writes `NNNNN_clean.sig`, `NNNNN_noisy.sig` and `labels.csv` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &[LabeledRecording]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels_path = dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["index", "label", "clean_path", "noisy_path"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (i, r) in data.iter().enumerate() {
        let clean = format!("{:05}_clean.sig", i);
        let noisy = format!("{:05}_noisy.sig", i);
        r.clean.write_binary(dir.join(&clean))?;
        r.noisy.write_binary(dir.join(&noisy))?;
        w.write_record([i.to_string(), r.label.to_string(), clean, noisy])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>, atlas: &Atlas) -> Result<Vec<LabeledRecording>> {
    let dir = dir.as_ref();
    let labels_path = dir.join(LABELS_FILE);
    let mut r = csv::Reader::from_path(&labels_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&labels_path, io),
        other => Error::Format(format!("{:?}", other)),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: "expected index,label,clean_path,noisy_path".into(),
            });
        }
        let label = rec[1].parse::<usize>().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid label {:?}", &rec[1]),
        })?;
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                dir.join(p)
            }
        };
        out.push(LabeledRecording {
            clean: RawRecording::read_binary(resolve(&rec[2]), atlas)?,
            noisy: RawRecording::read_binary(resolve(&rec[3]), atlas)?,
            label,
        });
    }
    Ok(out)
}
