//! Objective metrics: frame-wise pitch-set Jaccard distance, a learned timbre
//! distance, mel log-spectral distance, and the benchmark runner that scores a
//! system against the copy-content and copy-style baselines.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Waveform};
use crate::data::{self, midi_to_hz, Benchmark, Manifest, NoteEvent};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Linear, Param};
use crate::seeded_rng;
use crate::spectral::{self, StftConfig};
use crate::train::Archive;

/// Per-frame sets of sounding MIDI pitches.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchFrameSets {
    pub frames: Vec<BTreeSet<u8>>,
    pub frame_rate: f64,
}

/// Frame `i` holds every pitch sounding at time `i / frame_rate`.
pub fn pitch_sets_from_events(events: &[NoteEvent], frame_rate: f64) -> PitchFrameSets {
    let end = events.iter().map(NoteEvent::offset).fold(0.0, f64::max);
    let n = (end * frame_rate).ceil() as usize;
    let mut frames = vec![BTreeSet::new(); n];
    for e in events {
        let first = (e.onset * frame_rate).ceil() as usize;
        for (i, frame) in frames.iter_mut().enumerate().skip(first) {
            let t = i as f64 / frame_rate;
            if t >= e.offset() {
                break;
            }
            if t >= e.onset {
                frame.insert(e.pitch);
            }
        }
    }
    PitchFrameSets { frames, frame_rate }
}

/// Mean over frames of `1 - |A ∩ B| / |A ∪ B|`. The shorter sequence is
/// padded with empty sets; frames empty on both sides count as 0.
pub fn pitch_jaccard(a: &PitchFrameSets, b: &PitchFrameSets) -> Result<f64> {
    if (a.frame_rate - b.frame_rate).abs() > 1e-9 * a.frame_rate.abs().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "frame rates differ: {} vs {}",
            a.frame_rate, b.frame_rate
        )));
    }
    let n = a.frames.len().max(b.frames.len());
    if n == 0 {
        return Ok(0.0);
    }
    let empty = BTreeSet::new();
    let total: f64 = (0..n)
        .map(|i| {
            let x = a.frames.get(i).unwrap_or(&empty);
            let y = b.frames.get(i).unwrap_or(&empty);
            let union = x.union(y).count();
            if union == 0 {
                0.0
            } else {
                1.0 - x.intersection(y).count() as f64 / union as f64
            }
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchTrackerConfig {
    pub fft_size: usize,
    pub hop_samples: usize,
    pub min_pitch: u8,
    pub max_pitch: u8,
    pub max_polyphony: usize,
    pub harmonics: usize,
    /// Weight of harmonic `h` is `harmonic_weight^(h-1)`.
    pub harmonic_weight: f64,
    /// Further pitches must reach this fraction of the strongest salience.
    pub relative_threshold: f64,
    /// Frames this far below the loudest frame (dB) are treated as silent.
    pub silence_db: f64,
    /// The fundamental peak must reach this fraction of the candidate's
    /// strongest partial; rejects subharmonics.
    pub min_fundamental_ratio: f64,
}

impl Default for PitchTrackerConfig {
    fn default() -> Self {
        Self {
            fft_size: 4096,
            hop_samples: 160,
            min_pitch: 21,
            max_pitch: 108,
            max_polyphony: 4,
            harmonics: 10,
            harmonic_weight: 0.85,
            relative_threshold: 0.3,
            silence_db: 35.0,
            min_fundamental_ratio: 0.1,
        }
    }
}

impl PitchTrackerConfig {
    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.hop_samples as f64
    }
}

struct Peak {
    hz: f64,
    mag: f64,
}

fn spectral_peaks(mags: &[f64], bin_hz: f64, floor: f64) -> Vec<Peak> {
    let mut peaks = Vec::new();
    for k in 1..mags.len().saturating_sub(1) {
        let m = mags[k];
        if m > floor && m > mags[k - 1] && m >= mags[k + 1] {
            let (a, b, c) = (
                mags[k - 1].max(1e-300).ln(),
                m.ln(),
                mags[k + 1].max(1e-300).ln(),
            );
            let denom = a - 2.0 * b + c;
            let delta = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            peaks.push(Peak {
                hz: (k as f64 + delta) * bin_hz,
                mag: m,
            });
        }
    }
    peaks
}

/// Multi-pitch estimate per frame: harmonic-sum salience over spectral peaks,
/// taking the best pitch and removing its partials until the salience falls
/// below the threshold.
pub fn extract_pitch_sets(w: &Waveform, cfg: &PitchTrackerConfig) -> Result<PitchFrameSets> {
    let stft_cfg = StftConfig {
        fft_size: cfg.fft_size,
        hop_samples: cfg.hop_samples,
        sample_rate: w.sample_rate,
    };
    let frame_rate = cfg.frame_rate(w.sample_rate);
    if w.is_empty() {
        return Ok(PitchFrameSets {
            frames: Vec::new(),
            frame_rate,
        });
    }
    let mags = spectral::stft(w, stft_cfg)?.magnitude();
    let loudest = mags.iter().fold(0.0f64, |m, &v| m.max(v));
    let bin_hz = w.sample_rate as f64 / cfg.fft_size as f64;
    let nyquist = w.sample_rate as f64 / 2.0;
    let gate = loudest * 10f64.powf(-cfg.silence_db / 20.0);
    let mut frames = Vec::with_capacity(mags.nrows());
    for row in mags.outer_iter() {
        let row: Vec<f64> = row.to_vec();
        let frame_max = row.iter().fold(0.0f64, |m, &v| m.max(v));
        let mut found = BTreeSet::new();
        if loudest <= 1e-9 || frame_max < gate {
            frames.push(found);
            continue;
        }
        let peaks = spectral_peaks(&row, bin_hz, frame_max * 1e-3);
        let mut used = vec![false; peaks.len()];
        let mut strongest = None;
        while found.len() < cfg.max_polyphony {
            let mut best: Option<(u8, f64, Vec<usize>)> = None;
            for p in cfg.min_pitch..=cfg.max_pitch {
                let f0 = midi_to_hz(p as f64);
                let mut sal = 0.0;
                let mut matched = Vec::new();
                let mut fundamental = 0.0;
                let mut strongest_partial = 0.0f64;
                for h in 1..=cfg.harmonics {
                    let target = h as f64 * f0;
                    if target > nyquist * 0.95 {
                        break;
                    }
                    let hit = peaks
                        .iter()
                        .enumerate()
                        .filter(|(i, pk)| {
                            !used[*i] && (12.0 * (pk.hz / target).log2()).abs() < 0.5
                        })
                        .max_by(|a, b| a.1.mag.total_cmp(&b.1.mag));
                    if let Some((i, pk)) = hit {
                        sal += cfg.harmonic_weight.powi(h as i32 - 1) * pk.mag;
                        matched.push(i);
                        strongest_partial = strongest_partial.max(pk.mag);
                        if h == 1 {
                            fundamental = pk.mag;
                        }
                    }
                }
                let has_fundamental =
                    fundamental > 0.0 && fundamental >= cfg.min_fundamental_ratio * strongest_partial;
                if has_fundamental && best.as_ref().is_none_or(|b| sal > b.1) {
                    best = Some((p, sal, matched));
                }
            }
            let Some((p, sal, matched)) = best else { break };
            let reference = *strongest.get_or_insert(sal);
            if sal < cfg.relative_threshold * reference {
                break;
            }
            found.insert(p);
            for i in matched {
                used[i] = true;
            }
        }
        frames.push(found);
    }
    Ok(PitchFrameSets { frames, frame_rate })
}

/// Input features of the timbre model: mean and standard deviation over time
/// of MFCCs 2-13.
pub fn timbre_features(w: &Waveform) -> Result<Vec<f64>> {
    Ok(spectral::pooled_stats(&spectral::mfcc(w, 2, 13)?))
}

pub const TIMBRE_FEATURES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub margin: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Minimum number of distinct source tracks in the training data.
    pub min_tracks: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embedding: 64,
            margin: 0.2,
            epochs: 1000,
            learning_rate: 3e-3,
            seed: 0,
            min_tracks: 50,
        }
    }
}

/// Standardized features, a tanh hidden layer and a linear layer, projected
/// onto the unit sphere.
#[derive(Clone, Debug)]
pub struct TripletModel {
    pub config: TripletConfig,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub hidden: Linear,
    pub out: Linear,
}

struct EmbedCache {
    z: Array2<f64>,
    h: Array2<f64>,
    e: Array2<f64>,
    norms: Array1<f64>,
}

impl TripletModel {
    pub fn new(config: TripletConfig, mean: Vec<f64>, std: Vec<f64>) -> Self {
        let mut rng = seeded_rng(config.seed, 0x7121_9000);
        let n_in = mean.len();
        Self {
            hidden: Linear::new(n_in, config.hidden, &mut rng),
            out: Linear::new(config.hidden, config.embedding, &mut rng),
            config,
            mean,
            std,
        }
    }

    fn standardize(&self, features: &[Vec<f64>]) -> Result<Array2<f64>> {
        let d = self.mean.len();
        let mut z = Array2::zeros((features.len(), d));
        for (i, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::Shape(format!("feature vector has {} values, expected {d}", f.len())));
            }
            for j in 0..d {
                z[[i, j]] = (f[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(z)
    }

    fn forward(&self, features: &[Vec<f64>]) -> Result<(Array2<f64>, EmbedCache)> {
        let z = self.standardize(features)?;
        let h = self.hidden.forward(&z).mapv(f64::tanh);
        let e = self.out.forward(&h);
        let norms = e
            .outer_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect::<Array1<f64>>();
        let u = &e / &norms.view().insert_axis(ndarray::Axis(1));
        Ok((u, EmbedCache { z, h, e, norms }))
    }

    fn backward(&mut self, cache: &EmbedCache, du: &Array2<f64>) {
        let mut de = Array2::zeros(du.raw_dim());
        for i in 0..du.nrows() {
            let n = cache.norms[i];
            let u = cache.e.row(i).mapv(|v| v / n);
            let proj = du.row(i).dot(&u);
            de.row_mut(i).assign(&((&du.row(i) - &(&u * proj)) / n));
        }
        let dh = self.out.backward(&cache.h, &de);
        let dpre = &dh * &cache.h.mapv(|t| 1.0 - t * t);
        self.hidden.backward(&cache.z, &dpre);
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.hidden.params_mut().into_iter().map(|(_, p)| p).collect();
        v.extend(self.out.params_mut().into_iter().map(|(_, p)| p));
        v
    }

    pub fn embed_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (u, _) = self.forward(&[features.to_vec()])?;
        Ok(u.row(0).to_vec())
    }

    pub fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        self.embed_features(&timbre_features(w)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(toml::to_string(&self.config).expect("config serializes"));
        a.push("mean", Array2::from_shape_vec((1, self.mean.len()), self.mean.clone()).expect("row"));
        a.push("std", Array2::from_shape_vec((1, self.std.len()), self.std.clone()).expect("row"));
        let mut m = self.clone();
        for (name, p) in m.hidden.params_mut() {
            a.push(format!("hidden.{name}"), p.value.clone());
        }
        for (name, p) in m.out.params_mut() {
            a.push(format!("out.{name}"), p.value.clone());
        }
        a.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let config: TripletConfig = toml::from_str(&a.header).map_err(|e| Error::parse("config", e))?;
        let mean = a.get("mean")?.row(0).to_vec();
        let std = a.get("std")?.row(0).to_vec();
        let mut m = TripletModel::new(config, mean, std);
        for (prefix, layer) in [("hidden", &mut m.hidden), ("out", &mut m.out)] {
            for (name, p) in layer.params_mut() {
                let v = a.get(&format!("{prefix}.{name}"))?;
                if v.dim() != p.value.dim() {
                    return Err(Error::parse(format!("tensor {prefix}.{name}"), "wrong shape"));
                }
                p.value.assign(v);
            }
        }
        Ok(m)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between the two embeddings; in `[0, 2]`.
pub fn timbre_distance(a: &Waveform, b: &Waveform, m: &TripletModel) -> Result<f64> {
    Ok(dist(&m.embed(a)?, &m.embed(b)?))
}

/// Trains on same-timbre feature pairs. Each pair supplies an anchor and a
/// positive; negatives are drawn from other pairs.
pub fn train_triplet_features(pairs: &[(Vec<f64>, Vec<f64>)], config: TripletConfig) -> Result<TripletModel> {
    if pairs.len() < 2 {
        return Err(Error::InvalidInput("need at least two pairs".into()));
    }
    let all: Vec<&Vec<f64>> = pairs.iter().flat_map(|(a, b)| [a, b]).collect();
    let d = all[0].len();
    let n = all.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| all.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = all.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    let mut model = TripletModel::new(config, mean, std);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = seeded_rng(config.seed, 0x7121_9001);
    let m = pairs.len();
    for _ in 0..config.epochs {
        let mut batch = Vec::with_capacity(3 * m);
        for (i, (a, p)) in pairs.iter().enumerate() {
            let j = (i + rng.random_range(1..m)) % m;
            let neg = if rng.random_bool(0.5) { &pairs[j].0 } else { &pairs[j].1 };
            let (a, p) = if rng.random_bool(0.5) { (a, p) } else { (p, a) };
            batch.extend([a.clone(), p.clone(), neg.clone()]);
        }
        let (u, cache) = model.forward(&batch)?;
        let mut du = Array2::zeros(u.raw_dim());
        for t in 0..m {
            let (a, p, q) = (u.row(3 * t), u.row(3 * t + 1), u.row(3 * t + 2));
            let dap = (&a - &p).mapv(|v| v * v).sum().sqrt().max(1e-12);
            let dan = (&a - &q).mapv(|v| v * v).sum().sqrt().max(1e-12);
            if dap - dan + config.margin > 0.0 {
                let gp = (&a - &p) / dap / m as f64;
                let gn = (&a - &q) / dan / m as f64;
                let mut row = du.row_mut(3 * t);
                row += &(&gp - &gn);
                let mut row = du.row_mut(3 * t + 1);
                row -= &gp;
                let mut row = du.row_mut(3 * t + 2);
                row += &gn;
            }
        }
        for p in model.params_mut() {
            p.zero_grad();
        }
        model.backward(&cache, &du);
        adam.update(&mut model.params_mut());
    }
    Ok(model)
}

/// Trains the timbre model on a pair manifest (needs `min_tracks` distinct
/// source tracks).
pub fn train_triplet(manifest: &Manifest, config: TripletConfig) -> Result<TripletModel> {
    let tracks: HashSet<u64> = manifest.rows.iter().map(|r| r.track_seed).collect();
    if tracks.len() < config.min_tracks {
        return Err(Error::InvalidInput(format!(
            "timbre model needs at least {} distinct tracks, manifest has {}",
            config.min_tracks,
            tracks.len()
        )));
    }
    let mut pairs = Vec::with_capacity(manifest.rows.len());
    for r in &manifest.rows {
        let x = audio::read_wav(manifest.resolve(&r.x.audio))?;
        let y = audio::read_wav(manifest.resolve(&r.y.audio))?;
        pairs.push((timbre_features(&x)?, timbre_features(&y)?));
    }
    train_triplet_features(&pairs, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Compare against the synthesized ground-truth target.
    Artificial,
    /// Compare against the content and style inputs.
    Real,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "artificial" => Ok(EvalMode::Artificial),
            "real" => Ok(EvalMode::Real),
            other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

/// Metrics for one example or a system mean. In artificial mode `pitch`,
/// `timbre` and `lsd` are measured against the target; in real mode `pitch`
/// is against the content input and `timbre` against the style input, and
/// `lsd` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<usize>,
    pub pitch: Option<f64>,
    pub timbre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lsd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// One row per benchmark example for the evaluated system, followed by
    /// the mean rows of the two baselines.
    pub rows: Vec<ReportRow>,
    /// Means over the evaluated system's non-missing examples.
    pub system_mean: ReportRow,
    /// Per-example baseline rows, kept for paired comparisons.
    #[serde(skip)]
    pub baseline_examples: Vec<(ReportRow, ReportRow)>,
}

pub const CP_CONTENT: &str = "cp-content";
pub const CP_STYLE: &str = "cp-style";

pub fn output_file_name(pair_id: usize) -> String {
    format!("output_{pair_id:05}.wav")
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub tracker: PitchTrackerConfig,
    pub mel_bands: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tracker: PitchTrackerConfig::default(),
            mel_bands: 80,
        }
    }
}

struct Inputs {
    content: Waveform,
    style: Waveform,
    target: Option<Waveform>,
    content_notes: Option<Vec<NoteEvent>>,
    style_notes: Option<Vec<NoteEvent>>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_row(system: &str, rows: &[&ReportRow]) -> ReportRow {
    ReportRow {
        system: system.into(),
        pair_id: None,
        pitch: mean_of(rows.iter().map(|r| r.pitch)),
        timbre: mean_of(rows.iter().map(|r| r.timbre)),
        lsd: mean_of(rows.iter().map(|r| r.lsd)),
        missing: None,
    }
}

/// Scores the system outputs in `outputs_dir` (named by [`output_file_name`])
/// against a benchmark. Missing outputs are reported per row and left out of
/// the means.
pub fn run_benchmark(
    outputs_dir: &Path,
    bench: &Benchmark,
    mode: EvalMode,
    timbre: &TripletModel,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let frame_rate = cfg.tracker.frame_rate(audio::SAMPLE_RATE);
    let mut rows = Vec::new();
    let mut baselines = Vec::new();
    for rec in &bench.rows {
        let inputs = Inputs {
            content: audio::read_wav(bench.resolve(&rec.content))?,
            style: audio::read_wav(bench.resolve(&rec.style))?,
            target: match (&rec.target, mode) {
                (Some(t), EvalMode::Artificial) => Some(audio::read_wav(bench.resolve(t))?),
                (None, EvalMode::Artificial) => {
                    return Err(Error::InvalidInput(format!(
                        "benchmark row {} has no target; use real mode",
                        rec.pair_id
                    )))
                }
                _ => None,
            },
            content_notes: rec
                .content_notes
                .as_ref()
                .map(|p| data::read_notes(bench.resolve(p)))
                .transpose()?,
            style_notes: rec
                .style_notes
                .as_ref()
                .map(|p| data::read_notes(bench.resolve(p)))
                .transpose()?,
        };
        let content_ref = match &inputs.content_notes {
            Some(ev) => pitch_sets_from_events(ev, frame_rate),
            None => extract_pitch_sets(&inputs.content, &cfg.tracker)?,
        };
        let reference = match mode {
            EvalMode::Artificial => inputs.target.as_ref().expect("checked above"),
            EvalMode::Real => &inputs.style,
        };
        let score = |system: &str, out: &Waveform, pitch_sets: PitchFrameSets| -> Result<ReportRow> {
            Ok(ReportRow {
                system: system.into(),
                pair_id: Some(rec.pair_id),
                pitch: Some(pitch_jaccard(&pitch_sets, &content_ref)?),
                timbre: Some(timbre_distance(out, reference, timbre)?),
                lsd: match mode {
                    EvalMode::Artificial => Some(spectral::lsd(
                        &spectral::mel_db(out, cfg.mel_bands)?,
                        &spectral::mel_db(reference, cfg.mel_bands)?,
                    )?),
                    EvalMode::Real => None,
                },
                missing: None,
            })
        };
        let output_path = outputs_dir.join(output_file_name(rec.pair_id));
        let row = if output_path.exists() {
            let out = audio::read_wav(&output_path)?;
            let sets = extract_pitch_sets(&out, &cfg.tracker)?;
            score("model", &out, sets)?
        } else {
            log::warn!("missing output {}", output_path.display());
            ReportRow {
                system: "model".into(),
                pair_id: Some(rec.pair_id),
                pitch: None,
                timbre: None,
                lsd: None,
                missing: Some(output_path.display().to_string()),
            }
        };
        rows.push(row);
        // Baselines copy an input whose notes are known, so their pitch sets
        // come from the event oracle when available.
        let cp_content = score(CP_CONTENT, &inputs.content, content_ref.clone())?;
        let style_sets = match &inputs.style_notes {
            Some(ev) => pitch_sets_from_events(ev, frame_rate),
            None => extract_pitch_sets(&inputs.style, &cfg.tracker)?,
        };
        let cp_style = score(CP_STYLE, &inputs.style, style_sets)?;
        baselines.push((cp_content, cp_style));
    }
    let present: Vec<&ReportRow> = rows.iter().filter(|r| r.missing.is_none()).collect();
    let system_mean = mean_row("model", &present);
    let cp_content_mean = mean_row(CP_CONTENT, &baselines.iter().map(|b| &b.0).collect::<Vec<_>>());
    let cp_style_mean = mean_row(CP_STYLE, &baselines.iter().map(|b| &b.1).collect::<Vec<_>>());
    rows.push(cp_content_mean);
    rows.push(cp_style_mean);
    Ok(EvalReport {
        mode,
        rows,
        system_mean,
        baseline_examples: baselines,
    })
}

impl EvalReport {
    pub fn missing_count(&self) -> usize {
        self.rows.iter().filter(|r| r.missing.is_some()).count()
    }

    /// Text table with one line per system.
    pub fn table(&self) -> String {
        let (p, t) = match self.mode {
            EvalMode::Artificial => ("pitch_T", "timbre_T"),
            EvalMode::Real => ("pitch_C", "timbre_S"),
        };
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        match self.mode {
            EvalMode::Artificial => {
                writeln!(s, "{:<12} {:>10} {:>10} {:>10}", "system", "lsd_T", t, p).unwrap();
            }
            EvalMode::Real => writeln!(s, "{:<12} {:>10} {:>10}", "system", t, p).unwrap(),
        }
        let n = self.rows.len();
        for r in std::iter::once(&self.system_mean).chain(&self.rows[n.saturating_sub(2)..]) {
            match self.mode {
                EvalMode::Artificial => writeln!(
                    s,
                    "{:<12} {:>10} {:>10} {:>10}",
                    r.system,
                    fmt(r.lsd),
                    fmt(r.timbre),
                    fmt(r.pitch)
                )
                .unwrap(),
                EvalMode::Real => {
                    writeln!(s, "{:<12} {:>10} {:>10}", r.system, fmt(r.timbre), fmt(r.pitch)).unwrap()
                }
            }
        }
        let missing = self.missing_count();
        if missing > 0 {
            writeln!(s, "{missing} output(s) missing; excluded from the means").unwrap();
        }
        s
    }

    /// Writes `<path>` (table) and `<path>.jsonl` (rows).
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.table()).map_err(|e| Error::io(path, e))?;
        let mut jsonl = String::new();
        for r in &self.rows {
            jsonl.push_str(&serde_json::to_string(r).expect("rows serialize"));
            jsonl.push('\n');
        }
        let jpath = path.with_extension("jsonl");
        fs::write(&jpath, jsonl).map_err(|e| Error::io(&jpath, e))
    }
}
