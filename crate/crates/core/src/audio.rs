//! Waveform container, WAV file I/O and band-limited resampling.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Project-wide sample rate. Everything loaded from disk is converted to it.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "waveform sample {i} is not finite"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales to the given peak amplitude. Silent input is returned unchanged.
    pub fn normalized(mut self, peak: f64) -> Self {
        let current = self.peak();
        if current > 0.0 {
            let g = peak / current;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
        self
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

/// Reads a mono WAV (16/24/32-bit PCM or 32-bit float). Multi-channel files
/// are downmixed; other sample rates are converted to [`SAMPLE_RATE`].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let channels = spec.channels.max(1) as usize;
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate)?;
    Ok(resample_to(&wave, SAMPLE_RATE))
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        writer.write_sample(s as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub fn resample_to(wave: &Waveform, target_rate: u32) -> Waveform {
    if wave.sample_rate == target_rate {
        return wave.clone();
    }
    let step = wave.sample_rate as f64 / target_rate as f64;
    let out_len = (wave.len() as f64 / step).floor() as usize;
    Waveform {
        samples: interpolate(&wave.samples, step, out_len),
        sample_rate: target_rate,
    }
}

const SINC_HALF_WIDTH: f64 = 16.0;

/// Reads `input` at fractional positions `0, step, 2*step, ...` with a
/// Blackman-windowed sinc kernel. When `step > 1` the kernel is widened so the
/// cutoff drops to the new Nyquist frequency.
pub fn interpolate(input: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    assert!(step > 0.0, "interpolation step must be positive");
    if (step - 1.0).abs() < 1e-12 {
        let mut out = input.to_vec();
        out.resize(out_len, 0.0);
        return out;
    }
    let cutoff = (1.0 / step).min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    let n_in = input.len() as isize;
    (0..out_len)
        .map(|n| {
            let pos = n as f64 * step;
            let lo = (pos - half).ceil() as isize;
            let hi = (pos + half).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n_in - 1) {
                let d = pos - k as f64;
                let x = d * cutoff;
                let sinc = if x.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * x).sin() / (PI * x)
                };
                let u = (d / half + 1.0) * 0.5;
                let window = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
                acc += input[k as usize] * sinc * window * cutoff;
            }
            acc
        })
        .collect()
}
