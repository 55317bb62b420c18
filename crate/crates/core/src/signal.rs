//! Multi-channel recordings and their on-disk formats.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "EEGXSIG\0"
//! version      u32      1
//! channels     u32      C
//! samples      u32      L
//! sample_rate  f64      Hz
//! names        C × (u16 byte length, UTF-8 bytes)
//! data         C × L f32, row-major (channel 0 first)
//! ```
//!
//! The CSV fallback has a header row of channel names and one row per sample.
//! Channel names are resolved against an [`Atlas`] on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::atlas::{Atlas, ElectrodePosition};
use crate::error::{Error, Result};

pub const SIGNAL_MAGIC: &[u8; 8] = b"EEGXSIG\0";
pub const SIGNAL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    channels: Vec<ElectrodePosition>,
    samples: Vec<f64>,
    len: usize,
    sample_rate: f64,
}

impl RawRecording {
    /// `samples` is row-major `C × L`.
    pub fn new(channels: Vec<ElectrodePosition>, samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Validation("recording needs at least one channel".into()));
        }
        if samples.is_empty() || samples.len() % channels.len() != 0 {
            return Err(Error::Validation(format!(
                "{} samples do not fill {} channels",
                samples.len(),
                channels.len()
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Validation(format!("invalid sample rate {}", sample_rate)));
        }
        let len = samples.len() / channels.len();
        Ok(Self {
            channels,
            samples,
            len,
            sample_rate,
        })
    }

    /// Resolves each name with an exact (case-insensitive) atlas lookup.
    pub fn from_names(atlas: &Atlas, names: &[impl AsRef<str>], samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        let channels = names
            .iter()
            .map(|n| atlas.lookup(n.as_ref()).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels, samples, sample_rate)
    }

    pub fn channels(&self) -> &[ElectrodePosition] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    /// Same channels and rate with new sample values.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != self.samples.len() {
            return Err(Error::shape(
                "with_samples",
                format!("{} vs {}", samples.len(), self.samples.len()),
            ));
        }
        Ok(Self {
            channels: self.channels.clone(),
            samples,
            len: self.len,
            sample_rate: self.sample_rate,
        })
    }

    /// Keeps the listed channels, in the given order.
    pub fn select(&self, names: &[impl AsRef<str>]) -> Result<Self> {
        let mut channels = Vec::with_capacity(names.len());
        let mut samples = Vec::with_capacity(names.len() * self.len);
        for n in names {
            let c = self
                .channels
                .iter()
                .position(|p| p.name.eq_ignore_ascii_case(n.as_ref()))
                .ok_or_else(|| Error::NotFound(format!("channel {:?} in recording", n.as_ref())))?;
            channels.push(self.channels[c].clone());
            samples.extend_from_slice(self.channel(c));
        }
        Self::new(channels, samples, self.sample_rate)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(32 + self.samples.len() * 4);
        buf.extend_from_slice(SIGNAL_MAGIC);
        buf.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.channels.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len as u32).to_le_bytes());
        buf.extend_from_slice(&self.sample_rate.to_le_bytes());
        for ch in &self.channels {
            let bytes = ch.name.as_bytes();
            let n = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("channel name too long: {}", ch.name)))?;
            buf.extend_from_slice(&n.to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        for &x in &self.samples {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: impl AsRef<Path>, atlas: &Atlas) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_binary(&bytes, atlas)
    }

    pub fn decode_binary(bytes: &[u8], atlas: &Atlas) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != SIGNAL_MAGIC {
            return Err(Error::Format("not a signal file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != SIGNAL_VERSION {
            return Err(Error::Format(format!("unsupported signal version {}", version)));
        }
        let c = cur.u32()? as usize;
        let l = cur.u32()? as usize;
        let sample_rate = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let mut names = Vec::with_capacity(c);
        for _ in 0..c {
            let n = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(n)?).map_err(|_| Error::Format("channel name is not UTF-8".into()))?;
            names.push(name.to_string());
        }
        let raw = cur.take(c * l * 4)?;
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        let samples = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_names(atlas, &names, samples, sample_rate)
    }

    /// CSV fallback. The sample rate is not part of the CSV and must be supplied.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(self.channels.iter().map(|c| c.name.as_str())).map_err(|e| csv_io(path, e))?;
        for t in 0..self.len {
            w.write_record((0..self.channels.len()).map(|c| format!("{}", self.samples[c * self.len + t])))
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, atlas: &Atlas, sample_rate: f64) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_io(path, e))?;
        let names: Vec<String> = r
            .headers()
            .map_err(|e| csv_io(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_io(path, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("invalid sample {:?}", s),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let c = names.len();
        let l = rows.len();
        let mut samples = vec![0.0; c * l];
        for (t, row) in rows.iter().enumerate() {
            for (ch, &x) in row.iter().enumerate() {
                samples[ch * l + t] = x;
            }
        }
        Self::from_names(atlas, &names, samples, sample_rate)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {:?}", path.display(), other)),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated signal file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
