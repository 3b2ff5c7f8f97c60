//! Short-time Fourier analysis, log compression, Griffin-Lim inversion and
//! the mel-domain features used by the evaluation metrics.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Small constant added inside logarithms.
pub const LOG_EPS: f64 = 1e-5;
/// Lower bound for dB-scale features; equals `20 * log10(LOG_EPS)`.
pub const DB_FLOOR: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_samples: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    /// Hop of 1/32 s and 1025 frequency bins at 16 kHz.
    fn default() -> Self {
        Self {
            fft_size: 2048,
            hop_samples: 500,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl StftConfig {
    /// Small front-end (257 bins, 8 ms hop) used by the toy model preset.
    pub fn toy() -> Self {
        Self {
            fft_size: 512,
            hop_samples: 128,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn from_hop_seconds(fft_size: usize, hop_seconds: f64, sample_rate: u32) -> Result<Self> {
        let hop = hop_seconds * sample_rate as f64;
        let rounded = hop.round();
        if !(rounded >= 1.0) || (hop - rounded).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "hop of {hop_seconds} s is not a whole number of samples at {sample_rate} Hz"
            )));
        }
        let cfg = Self {
            fft_size,
            hop_samples: rounded as usize,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop_samples == 0 || self.hop_samples > self.fft_size {
            return Err(Error::Config(format!(
                "hop_samples must be in 1..={}, got {}",
                self.fft_size, self.hop_samples
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_samples as f64 / self.sample_rate as f64
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop_samples as f64
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop_samples).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    /// T x F
    pub frames: Array2<Complex64>,
    pub hop_seconds: f64,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn magnitude(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }
}

/// Log-compressed magnitude spectrogram, `log(1 + |X|)`, laid out T x F.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<f64>,
    pub hop_seconds: f64,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// Linear magnitude, inverting the compression law.
    pub fn decompress(&self) -> Array2<f64> {
        self.frames.mapv(|v| v.exp_m1())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// T x M, dB
    pub frames: Array2<f64>,
    pub mel_bands: usize,
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable FFT plans and window for one [`StftConfig`].
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann(cfg.fft_size),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Centered analysis: frame `t` is centered on sample `t * hop`; the
    /// signal is reflect-padded by `fft_size / 2` on both sides.
    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        if w.is_empty() {
            return Err(Error::InvalidInput("cannot analyze an empty waveform".into()));
        }
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "waveform is {} Hz, front-end expects {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let frames = self.cfg.frame_count(w.len());
        let padded = reflect_pad(&w.samples, self.cfg.fft_size / 2, self.padded_len(frames));
        Ok(ComplexSpectrogram {
            frames: self.frame_transform(&padded, frames),
            hop_seconds: self.cfg.hop_seconds(),
            sample_rate: self.cfg.sample_rate,
        })
    }

    /// Length of the padded domain covered by `frames` frames.
    fn padded_len(&self, frames: usize) -> usize {
        (frames - 1) * self.cfg.hop_samples + self.cfg.fft_size
    }

    /// Plain frame operator on an already padded signal.
    fn frame_transform(&self, padded: &[f64], frames: usize) -> Array2<Complex64> {
        let n = self.cfg.fft_size;
        let bins = self.cfg.bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * self.cfg.hop_samples;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (f, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = buf[f];
            }
        }
        out
    }

    /// Least-squares inverse of [`Self::frame_transform`]: windowed overlap-add
    /// normalized by the summed squared window. Returns the padded-domain signal.
    fn frame_inverse(&self, frames: &Array2<Complex64>) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let bins = self.cfg.bins();
        let total = self.padded_len(frames.nrows());
        let mut num = vec![0.0; total];
        let mut den = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (t, row) in frames.outer_iter().enumerate() {
            for f in 0..bins {
                buf[f] = row[f];
            }
            // Hermitian extension; DC and Nyquist imaginary parts are dropped.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for f in 1..n / 2 {
                buf[n - f] = row[f].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.cfg.hop_samples;
            for i in 0..n {
                let w = self.window[i];
                num[start + i] += w * buf[i].re / n as f64;
                den[start + i] += w * w;
            }
        }
        num.iter()
            .zip(&den)
            .map(|(&a, &d)| if d > 1e-12 { a / d } else { 0.0 })
            .collect()
    }

    /// Inverse of [`Self::analyze`], cropped to `frames * hop` samples.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Waveform {
        let padded = self.frame_inverse(&spec.frames);
        self.crop(&padded, spec.frames.nrows())
    }

    fn crop(&self, padded: &[f64], frames: usize) -> Waveform {
        let start = self.cfg.fft_size / 2;
        let len = frames * self.cfg.hop_samples;
        let samples = (0..len)
            .map(|i| padded.get(start + i).copied().unwrap_or(0.0))
            .collect();
        Waveform {
            samples,
            sample_rate: self.cfg.sample_rate,
        }
    }
}

fn reflect_pad(x: &[f64], pad: usize, total: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (0..total)
        .map(|i| {
            let mut k = i as isize - pad as isize;
            if n == 1 {
                return if k == 0 { x[0] } else { 0.0 };
            }
            // fold into [0, n) by repeated reflection about the end samples
            let period = 2 * (n - 1);
            k = k.rem_euclid(period);
            if k >= n {
                k = period - k;
            }
            x[k as usize]
        })
        .collect()
}

pub fn stft(w: &Waveform, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(cfg)?.analyze(w)
}

pub fn compress(c: &ComplexSpectrogram) -> Spectrogram {
    Spectrogram {
        frames: c.frames.mapv(|v| v.norm().ln_1p()),
        hop_seconds: c.hop_seconds,
        sample_rate: c.sample_rate,
    }
}

/// Waveform to log-magnitude spectrogram.
pub fn spectrogram(w: &Waveform, cfg: StftConfig) -> Result<Spectrogram> {
    Ok(compress(&stft(w, cfg)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseInit {
    Zero,
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GriffinLimConfig {
    pub iterations: usize,
    pub init: PhaseInit,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            init: PhaseInit::Zero,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// Frobenius distance between the target magnitude and the magnitude of
    /// the current estimate, one entry per iteration plus the final estimate.
    pub objective: Vec<f64>,
}

/// Recovers a waveform from a log-compressed magnitude spectrogram.
pub fn griffin_lim(s: &Spectrogram, cfg: StftConfig, gl: GriffinLimConfig) -> Result<Waveform> {
    Ok(griffin_lim_traced(s, cfg, gl)?.waveform)
}

pub fn griffin_lim_traced(
    s: &Spectrogram,
    cfg: StftConfig,
    gl: GriffinLimConfig,
) -> Result<GriffinLimResult> {
    let stft = Stft::new(cfg)?;
    if s.num_bins() != cfg.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, front-end produces {}",
            s.num_bins(),
            cfg.bins()
        )));
    }
    if s.num_frames() == 0 {
        return Err(Error::InvalidInput("spectrogram has no frames".into()));
    }
    let target = s.decompress();
    let mut estimate: Array2<Complex64> = match gl.init {
        PhaseInit::Zero => target.mapv(|m| Complex64::new(m, 0.0)),
        PhaseInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            target.mapv(|m| Complex64::from_polar(m, rng.random_range(0.0..2.0 * PI)))
        }
    };
    let frames = target.nrows();
    let mismatch = |c: &Array2<Complex64>| -> f64 {
        c.iter()
            .zip(target.iter())
            .map(|(v, m)| (v.norm() - m).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut objective = Vec::with_capacity(gl.iterations + 1);
    for _ in 0..gl.iterations {
        let signal = stft.frame_inverse(&estimate);
        let consistent = stft.frame_transform(&signal, frames);
        objective.push(mismatch(&consistent));
        estimate = ndarray::Zip::from(&consistent)
            .and(&target)
            .map_collect(|c, &m| {
                let norm = c.norm();
                if norm > 1e-300 {
                    c * (m / norm)
                } else {
                    Complex64::new(m, 0.0)
                }
            });
    }
    let signal = stft.frame_inverse(&estimate);
    objective.push(mismatch(&stft.frame_transform(&signal, frames)));
    Ok(GriffinLimResult {
        waveform: stft.crop(&signal, frames),
        objective,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `bands x bins`, spanning 0 Hz to Nyquist.
pub fn mel_filterbank(bands: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((bands, bins));
    for b in 0..bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub mel_bands: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            mel_bands: 80,
        }
    }
}

/// dB-scale mel spectrogram: `20 log10(mel magnitude + eps)`, floored at
/// [`DB_FLOOR`].
pub fn mel_db(w: &Waveform, mel_bands: usize) -> Result<MelSpectrogram> {
    mel_db_with(
        w,
        MelConfig {
            mel_bands,
            ..MelConfig::default()
        },
    )
}

pub fn mel_db_with(w: &Waveform, cfg: MelConfig) -> Result<MelSpectrogram> {
    if cfg.mel_bands == 0 {
        return Err(Error::Config("mel_bands must be >= 1".into()));
    }
    let mag = stft(w, cfg.stft)?.magnitude();
    let fb = mel_filterbank(cfg.mel_bands, cfg.stft.fft_size, cfg.stft.sample_rate);
    let mel = mag.dot(&fb.t());
    Ok(MelSpectrogram {
        frames: mel.mapv(|e| (20.0 * (e + LOG_EPS).log10()).max(DB_FLOOR)),
        mel_bands: cfg.mel_bands,
    })
}

/// Log-spectral distance: RMSE over all time-band cells. The shorter input is
/// extended in time with silent (floor-valued) frames.
pub fn lsd(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.mel_bands != b.mel_bands || a.frames.ncols() != b.frames.ncols() {
        return Err(Error::Shape(format!(
            "mel band count differs: {} vs {}",
            a.frames.ncols(),
            b.frames.ncols()
        )));
    }
    let frames = a.frames.nrows().max(b.frames.nrows());
    let bands = a.frames.ncols();
    if frames == 0 || bands == 0 {
        return Ok(0.0);
    }
    let at = |m: &Array2<f64>, t: usize, k: usize| {
        if t < m.nrows() {
            m[[t, k]]
        } else {
            DB_FLOOR
        }
    };
    let mut sum = 0.0;
    for t in 0..frames {
        for k in 0..bands {
            let d = at(&a.frames, t, k) - at(&b.frames, t, k);
            sum += d * d;
        }
    }
    Ok((sum / (frames * bands) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccConfig {
    pub stft: StftConfig,
    pub mel_bands: usize,
    /// First kept coefficient, 1-based (coefficient 1 is the DCT's DC term).
    pub lo_coeff: usize,
    /// Last kept coefficient, inclusive.
    pub hi_coeff: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig {
                fft_size: 1024,
                hop_samples: 256,
                sample_rate: SAMPLE_RATE,
            },
            mel_bands: 40,
            lo_coeff: 2,
            hi_coeff: 13,
        }
    }
}

/// MFCCs `lo..=hi` (1-based), one row per frame.
pub fn mfcc(w: &Waveform, lo_coeff: usize, hi_coeff: usize) -> Result<Array2<f64>> {
    mfcc_with(
        w,
        MfccConfig {
            lo_coeff,
            hi_coeff,
            ..MfccConfig::default()
        },
    )
}

pub fn mfcc_with(w: &Waveform, cfg: MfccConfig) -> Result<Array2<f64>> {
    if cfg.lo_coeff < 1 || cfg.hi_coeff <= cfg.lo_coeff || cfg.hi_coeff > cfg.mel_bands {
        return Err(Error::Config(format!(
            "invalid MFCC range {}..={} for {} mel bands",
            cfg.lo_coeff, cfg.hi_coeff, cfg.mel_bands
        )));
    }
    let power = stft(w, cfg.stft)?.frames.mapv(|c| c.norm_sqr());
    let fb = mel_filterbank(cfg.mel_bands, cfg.stft.fft_size, cfg.stft.sample_rate);
    let log_mel = power.dot(&fb.t()).mapv(|e| (e + LOG_EPS).ln());
    Ok(log_mel.dot(&dct_basis(cfg.mel_bands, cfg.lo_coeff - 1..cfg.hi_coeff).t()))
}

/// Orthonormal DCT-II rows for the requested coefficient indices (0-based).
fn dct_basis(n: usize, coeffs: std::ops::Range<usize>) -> Array2<f64> {
    let mut basis = Array2::zeros((coeffs.len(), n));
    for (row, k) in coeffs.enumerate() {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for m in 0..n {
            basis[[row, m]] = scale * (PI * k as f64 * (m as f64 + 0.5) / n as f64).cos();
        }
    }
    basis
}

/// Mean and standard deviation over time of each column; `2 * cols` values.
pub fn pooled_stats(features: &Array2<f64>) -> Vec<f64> {
    let n = features.nrows().max(1) as f64;
    let mean = features.sum_axis(Axis(0)) / n;
    let mut var = ndarray::Array1::<f64>::zeros(features.ncols());
    for row in features.outer_iter() {
        var += &(&row - &mean).mapv(|d| d * d);
    }
    var /= n;
    mean.iter()
        .copied()
        .chain(var.iter().map(|v| v.sqrt()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn sine(freq: f64, seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 0.1).unwrap();
        Waveform::new((0..len).map(|_| d.sample(&mut rng)).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn eight_seconds_gives_256_frames_of_1025_bins() {
        let w = Waveform::silence(8 * SAMPLE_RATE as usize, SAMPLE_RATE);
        let c = stft(&w, StftConfig::default()).unwrap();
        assert_eq!(c.frames.dim(), (256, 1025));
    }

    #[test]
    fn non_integer_hop_is_a_config_error() {
        assert!(StftConfig::from_hop_seconds(2048, 1.0 / 32.0, 16_000).is_ok());
        assert!(matches!(
            StftConfig::from_hop_seconds(2048, 1.0 / 3.0, 16_000),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn silence_has_zero_magnitude() {
        let w = Waveform::silence(4000, SAMPLE_RATE);
        let s = spectrogram(&w, StftConfig::default()).unwrap();
        assert!(s.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centered_sine_peaks_in_its_bin() {
        let cfg = StftConfig::default();
        let bin = 56;
        let freq = bin as f64 * SAMPLE_RATE as f64 / cfg.fft_size as f64;
        let mag = stft(&sine(freq, 1.0), cfg).unwrap().magnitude();
        // interior frames only; edge frames see the reflection
        for t in 4..mag.nrows() - 4 {
            let row = mag.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, bin, "frame {t}");
        }
    }

    #[test]
    fn compression_law() {
        let mut frames = Array2::zeros((1, 3));
        frames[[0, 1]] = Complex64::new(std::f64::consts::E - 1.0, 0.0);
        frames[[0, 2]] = Complex64::new(0.0, 3.0);
        let s = compress(&ComplexSpectrogram {
            frames,
            hop_seconds: 1.0,
            sample_rate: SAMPLE_RATE,
        });
        assert_eq!(s.frames[[0, 0]], 0.0);
        assert_relative_eq!(s.frames[[0, 1]], 1.0, epsilon = 1e-12);
        assert!(s.frames[[0, 2]] > s.frames[[0, 1]]);
    }

    #[test]
    fn compress_then_decompress_recovers_magnitude() {
        let c = stft(&noise(6000, 3), StftConfig::toy()).unwrap();
        let back = compress(&c).decompress();
        for (m, b) in c.magnitude().iter().zip(back.iter()) {
            assert!((m - b).abs() <= 1e-5 * m.max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn analysis_then_synthesis_is_near_identity() {
        let cfg = StftConfig::toy();
        let w = noise(5000, 11);
        let st = Stft::new(cfg).unwrap();
        let back = st.synthesize(&st.analyze(&w).unwrap());
        for i in 0..w.len() {
            assert!((w.samples[i] - back.samples[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn griffin_lim_on_silence_is_silent() {
        let cfg = StftConfig::toy();
        let s = spectrogram(&Waveform::silence(3000, SAMPLE_RATE), cfg).unwrap();
        let w = griffin_lim(&s, cfg, GriffinLimConfig::default()).unwrap();
        assert!(w.peak() < 1e-12);
    }

    #[test]
    fn griffin_lim_objective_is_non_increasing() {
        let cfg = StftConfig::toy();
        let s = spectrogram(&sine(523.0, 0.5), cfg).unwrap();
        let res = griffin_lim_traced(&s, cfg, GriffinLimConfig::default()).unwrap();
        assert_eq!(res.objective.len(), 61);
        for pair in res.objective.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-12, "{pair:?}");
        }
    }

    #[test]
    fn griffin_lim_is_deterministic_for_a_seed() {
        let cfg = StftConfig::toy();
        let s = spectrogram(&noise(4000, 5), cfg).unwrap();
        let gl = GriffinLimConfig {
            iterations: 0,
            init: PhaseInit::Random { seed: 9 },
        };
        let a = griffin_lim(&s, cfg, gl).unwrap();
        let b = griffin_lim(&s, cfg, gl).unwrap();
        assert_eq!(a, b);
        let other = griffin_lim(
            &s,
            cfg,
            GriffinLimConfig {
                init: PhaseInit::Random { seed: 10 },
                ..gl
            },
        )
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn mel_db_of_silence_is_the_floor() {
        let m = mel_db(&Waveform::silence(8000, SAMPLE_RATE), 40).unwrap();
        assert!(m.frames.iter().all(|&v| (v - DB_FLOOR).abs() < 1e-9));
    }

    #[test]
    fn scaling_by_ten_adds_twenty_db() {
        let w = noise(8000, 1);
        let loud = Waveform::new(w.samples.iter().map(|s| s * 10.0).collect(), SAMPLE_RATE).unwrap();
        let a = mel_db(&w, 40).unwrap();
        let b = mel_db(&loud, 40).unwrap();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            if *x > -60.0 {
                assert!((y - x - 20.0).abs() < 1e-3, "{x} -> {y}");
            }
        }
        assert_eq!(lsd(&a, &mel_db(&w, 40).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn lsd_constant_offset_and_band_mismatch() {
        let a = MelSpectrogram {
            frames: Array2::from_shape_fn((5, 4), |(t, k)| (t * 4 + k) as f64 - 30.0),
            mel_bands: 4,
        };
        let b = MelSpectrogram {
            frames: a.frames.mapv(|v| v + 6.0),
            mel_bands: 4,
        };
        assert_relative_eq!(lsd(&a, &b).unwrap(), 6.0, epsilon = 1e-12);
        assert_relative_eq!(lsd(&b, &a).unwrap(), 6.0, epsilon = 1e-12);
        let c = MelSpectrogram {
            frames: Array2::zeros((5, 3)),
            mel_bands: 3,
        };
        assert!(matches!(lsd(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn lsd_pads_the_shorter_input_with_silence() {
        let a = MelSpectrogram {
            frames: Array2::from_elem((2, 2), -40.0),
            mel_bands: 2,
        };
        let b = MelSpectrogram {
            frames: Array2::from_elem((1, 2), -40.0),
            mel_bands: 2,
        };
        // one frame matches, one differs by 60 dB in both bands
        assert_relative_eq!(lsd(&a, &b).unwrap(), (3600.0f64 / 2.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn mfcc_width_and_constant_spectrum() {
        let w = noise(8000, 2);
        assert_eq!(mfcc(&w, 2, 13).unwrap().ncols(), 12);
        // a flat log-mel row has energy only in the DC coefficient
        let basis = dct_basis(40, 1..13);
        let flat = ndarray::Array1::from_elem(40, -3.7);
        assert!(basis.dot(&flat).iter().all(|c| c.abs() < 1e-12));
        assert!(mfcc(&w, 0, 13).is_err());
        assert!(mfcc(&w, 5, 5).is_err());
    }

    #[test]
    fn whole_frame_shift_only_moves_mfcc_rows() {
        let hop = MfccConfig::default().stft.hop_samples;
        let w = noise(12_000, 4);
        let mut shifted = vec![0.0; 3 * hop];
        shifted.extend_from_slice(&w.samples);
        let shifted = Waveform::new(shifted, SAMPLE_RATE).unwrap();
        let a = mfcc(&w, 2, 13).unwrap();
        let b = mfcc(&shifted, 2, 13).unwrap();
        // frames far from both edges see identical sample windows
        for t in 4..a.nrows() - 4 {
            for k in 0..12 {
                assert!((a[[t, k]] - b[[t + 3, k]]).abs() < 1e-9);
            }
        }
    }
}
