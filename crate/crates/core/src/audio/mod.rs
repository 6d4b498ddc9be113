//! Waveforms, 16-bit PCM storage, and the pluggable audio feature encoders.

pub mod encoder;

use std::path::Path;

use crate::error::{Error, Result};

pub use encoder::{encode, freeze, EncoderKind, EncoderSpec, FeatureSequence, SpectralStandIn};

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, c: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Round-trips through 16-bit PCM quantisation.
    pub fn quantized(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|&s| f64::from(to_i16(s)) / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn to_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a canonical 44-byte-header RIFF/WAVE file: mono, 16-bit PCM.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::storage(path, e))?;
    for &s in &w.samples {
        writer.write_sample(to_i16(s)).map_err(|e| Error::storage(path, e))?;
    }
    writer.finalize().map_err(|e| Error::storage(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::storage(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::storage(
            path,
            format!(
                "expected mono 16-bit PCM, found {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::storage(path, e))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::storage(path, e))
}
