//! Training loop, checkpoints and the on-disk spectrogram cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::model::{Bottleneck, Model, ModelConfig, Mode, DOWNSAMPLE_FACTOR};
use crate::nn::{Adam, AdamConfig, Param};
use crate::seeded_rng;
use crate::spectral::{self, StftConfig};
use crate::vq::{self, CodeSequence, LossBreakdown};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperScale,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::PaperScale => ModelConfig::paper_scale(),
        }
    }

    pub fn stft(self) -> StftConfig {
        match self {
            Preset::Toy => StftConfig::toy(),
            Preset::PaperScale => StftConfig::default(),
        }
    }
}

/// How the codebook is filled before the first step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookInit {
    /// i.i.d. `U[-1/K, 1/K]`.
    Uniform,
    /// Encoder outputs of the first training batch, sampled at random.
    #[default]
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Weight of the commitment loss.
    pub beta: f64,
    pub seed: u64,
    pub preset: Preset,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub codebook_init: CodebookInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            beta: 0.25,
            seed: 0,
            preset: Preset::Toy,
            clip_norm: 10.0,
            codebook_init: CodebookInit::Data,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config(
                "learning_rate and clip_norm must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One training example: content and style spectrograms, `[bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramPair {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

fn stack(items: &[&Array2<f64>]) -> Result<Array3<f64>> {
    let (f, t) = items[0].dim();
    let mut out = Array3::zeros((items.len(), f, t));
    for (i, a) in items.iter().enumerate() {
        if a.dim() != (f, t) {
            return Err(Error::Shape(format!(
                "batch item {i} is {:?}, expected {:?}",
                a.dim(),
                (f, t)
            )));
        }
        out.slice_mut(s![i, .., ..]).assign(a);
    }
    Ok(out)
}

pub fn global_grad_norm(params: &[&mut Param]) -> f64 {
    params
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub codes: CodeSequence,
    pub grad_norm: f64,
}

/// One optimizer update on the batch's total loss. Non-finite losses abort
/// before any parameter changes, naming the diverged component.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&SpectrogramPair],
    config: &TrainConfig,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let x = stack(&batch.iter().map(|p| &p.x).collect::<Vec<_>>())?;
    let y = stack(&batch.iter().map(|p| &p.y).collect::<Vec<_>>())?;
    let pass = model.forward(&x, &y, config.beta, Mode::Train, Bottleneck::Nearest)?;
    if let Some((component, value)) = pass.losses.non_finite() {
        return Err(Error::NonFinite { component, value });
    }
    model.zero_grad();
    model.backward(&pass);
    let mut params = model.params_mut();
    let grad_norm = global_grad_norm(&params);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            component: "gradient",
            value: grad_norm,
        });
    }
    if config.clip_norm > 0.0 && grad_norm > config.clip_norm {
        let scale = config.clip_norm / grad_norm;
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    adam.update(&mut params);
    model.update_running_stats(&pass);
    Ok(StepOutcome {
        losses: pass.losses,
        codes: pass.codes,
        grad_norm,
    })
}

/// Spectrogram frames transposed to `[bins, frames]`, cropped to a multiple
/// of the downsampling factor.
pub fn training_frames(w: &audio::Waveform, stft: StftConfig) -> Result<Array2<f64>> {
    let spec = spectral::spectrogram(w, stft)?;
    let t = spec.num_frames() / DOWNSAMPLE_FACTOR * DOWNSAMPLE_FACTOR;
    if t == 0 {
        return Err(Error::InvalidInput(format!(
            "segment of {} samples is shorter than one latent frame",
            w.len()
        )));
    }
    Ok(spec.frames.slice(s![..t, ..]).t().to_owned())
}

pub fn cache_path(manifest: &Manifest, stft: StftConfig) -> PathBuf {
    manifest.dir.join(format!(
        "spectrograms_{}_{}.cache",
        stft.fft_size, stft.hop_samples
    ))
}

/// Loads the manifest's spectrogram pairs from the cache next to it, building
/// the cache on first use.
pub fn load_or_build_cache(manifest: &Manifest, stft: StftConfig) -> Result<Vec<SpectrogramPair>> {
    let path = cache_path(manifest, stft);
    if path.exists() {
        let archive = Archive::read(&path)?;
        if archive.header == cache_header(manifest, stft) {
            return pairs_from_archive(&archive, manifest.rows.len());
        }
        log::info!("spectrogram cache {} is stale; rebuilding", path.display());
    }
    let mut pairs = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let x = audio::read_wav(manifest.resolve(&row.x.audio))?;
        let y = audio::read_wav(manifest.resolve(&row.y.audio))?;
        pairs.push(SpectrogramPair {
            x: training_frames(&x, stft)?,
            y: training_frames(&y, stft)?,
        });
    }
    let mut archive = Archive::new(cache_header(manifest, stft));
    for (i, p) in pairs.iter().enumerate() {
        archive.push(format!("x.{i}"), p.x.clone());
        archive.push(format!("y.{i}"), p.y.clone());
    }
    archive.write_atomic(&path)?;
    Ok(pairs)
}

fn cache_header(manifest: &Manifest, stft: StftConfig) -> String {
    let ids: Vec<String> = manifest
        .rows
        .iter()
        .map(|r| format!("{}:{}:{}", r.pair_id, r.seed, r.track_seed))
        .collect();
    format!(
        "fft_size = {}\nhop_samples = {}\npairs = [{}]\n",
        stft.fft_size,
        stft.hop_samples,
        ids.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ")
    )
}

fn pairs_from_archive(archive: &Archive, n: usize) -> Result<Vec<SpectrogramPair>> {
    (0..n)
        .map(|i| {
            Ok(SpectrogramPair {
                x: archive.get(&format!("x.{i}"))?.clone(),
                y: archive.get(&format!("y.{i}"))?.clone(),
            })
        })
        .collect()
}

/// Single-file tensor archive: a text header with a magic line, format
/// version and embedded TOML, followed by named `f64` matrices in
/// little-endian binary and an end marker.
///
/// ```text
/// TIMBREVQ-ARCHIVE
/// version 1
/// header <bytes>
/// <toml>
/// tensor <name> <rows> <cols>
/// <rows * cols * 8 bytes>
/// ...
/// end
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

const MAGIC: &str = "TIMBREVQ-ARCHIVE";
pub const FORMAT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self, section: &str) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(section, "unexpected end of file"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::parse(section, "invalid text"))
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(section, "truncated data"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

impl Archive {
    pub fn new(header: String) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::parse(format!("tensor {name}"), "missing"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(format!("{MAGIC}\nversion {FORMAT_VERSION}\n").as_bytes());
        out.extend_from_slice(format!("header {}\n", self.header.len()).as_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.push(b'\n');
        for (name, t) in &self.tensors {
            out.extend_from_slice(format!("tensor {name} {} {}\n", t.nrows(), t.ncols()).as_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(b'\n');
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.line("magic")? != MAGIC {
            return Err(Error::parse("magic", "not a timbrevq archive"));
        }
        let version = c.line("version")?;
        let found: u32 = version
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("version", format!("bad version line {version:?}")))?;
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let len: usize = c
            .line("header")?
            .strip_prefix("header ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("header", "bad length line"))?;
        let header = std::str::from_utf8(c.take(len, "header")?)
            .map_err(|_| Error::parse("header", "invalid text"))?
            .to_string();
        c.take(1, "header")?;
        let mut tensors = Vec::new();
        loop {
            let line = c.line("tensor list")?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let section = format!("tensor {}", parts.get(1).unwrap_or(&"?"));
            let (rows, cols) = match parts.as_slice() {
                ["tensor", _, r, c] => (
                    r.parse::<usize>().map_err(|e| Error::parse(&section, e))?,
                    c.parse::<usize>().map_err(|e| Error::parse(&section, e))?,
                ),
                _ => return Err(Error::parse(&section, format!("bad record {line:?}"))),
            };
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::parse(&section, "size overflow"))?;
            let raw = c.take(n, &section)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            if c.take(1, &section)? != b"\n" {
                return Err(Error::parse(&section, "missing record terminator"));
            }
            let t = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::parse(&section, e))?;
            tensors.push((parts[1].to_string(), t));
        }
        Ok(Self { header, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
    pub used_count: usize,
    pub perplexity: f64,
}

/// Non-tensor checkpoint contents, stored as the archive's TOML header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub train: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    #[serde(default)]
    pub history: Vec<EpochSummary>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let header = toml::to_string(&self.meta).expect("checkpoint metadata serializes");
        let mut archive = Archive::new(header);
        let mut model = self.model.clone();
        for (name, p) in model.named_params_mut() {
            archive.push(format!("param.{name}"), p.value.clone());
        }
        for (name, bn) in model.batchnorms_mut() {
            archive.push(format!("running.{name}"), bn.running.clone());
        }
        let names: Vec<String> = model.named_params_mut().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            if let (Some(m), Some(v)) = (self.adam.first.get(i), self.adam.second.get(i)) {
                archive.push(format!("adam.m.{name}"), m.clone());
                archive.push(format!("adam.v.{name}"), v.clone());
            }
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: CheckpointMeta =
            toml::from_str(&archive.header).map_err(|e| Error::parse("config", e))?;
        let mut model = Model::new(meta.model, 0).map_err(|e| Error::parse("config", e))?;
        for (name, p) in model.named_params_mut() {
            let v = archive.get(&format!("param.{name}"))?;
            if v.dim() != p.value.dim() {
                return Err(Error::parse(
                    format!("tensor param.{name}"),
                    format!("shape {:?}, expected {:?}", v.dim(), p.value.dim()),
                ));
            }
            p.value.assign(v);
        }
        for (name, bn) in model.batchnorms_mut() {
            let v = archive.get(&format!("running.{name}"))?;
            if v.dim() != bn.running.dim() {
                return Err(Error::parse(format!("tensor running.{name}"), "wrong shape"));
            }
            bn.running.assign(v);
        }
        let mut adam = Adam::new(meta.train.adam());
        adam.step = meta.step;
        let names: Vec<(String, (usize, usize))> = model
            .named_params_mut()
            .into_iter()
            .map(|(n, p)| (n, p.value.dim()))
            .collect();
        if meta.step > 0 {
            for (name, dim) in &names {
                let m = archive.get(&format!("adam.m.{name}"))?;
                let v = archive.get(&format!("adam.v.{name}"))?;
                if m.dim() != *dim || v.dim() != *dim {
                    return Err(Error::parse(format!("tensor adam.m.{name}"), "wrong shape"));
                }
                adam.first.push(m.clone());
                adam.second.push(v.clone());
            }
        }
        Ok(Self { meta, model, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        recon: f64,
        codebook: f64,
        commit: f64,
        beta: f64,
        total: f64,
        grad_norm: f64,
    },
    Epoch(EpochSummary),
}

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub history: Vec<EpochSummary>,
    pub log: Vec<LogRecord>,
}

const CODEBOOK_INIT_STREAM: u64 = 0xC0DE_0000;

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 0x5EED_0000 + epoch as u64));
    order
}

/// Trains on a manifest, writing `epoch_NNN.ckpt`, `last.ckpt`, `best.ckpt`
/// and the JSONL training log into `out_dir`. With `resume`, continues from
/// the epoch after the one stored in that checkpoint.
pub fn fit(
    manifest: &Manifest,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    if manifest.rows.is_empty() {
        return Err(Error::InvalidInput("manifest has no pairs".into()));
    }
    let stft = config.preset.stft();
    let data = load_or_build_cache(manifest, stft)?;
    fit_pairs(&data, stft, config, out_dir, resume)
}

fn initial_model(data: &[SpectrogramPair], config: &TrainConfig) -> Result<Model> {
    let mut model = Model::new(config.preset.model(), config.seed)?;
    if config.codebook_init == CodebookInit::Data && !data.is_empty() {
        let order = epoch_order(config.seed, 1, data.len());
        let items: Vec<&Array2<f64>> = order.iter().take(config.batch_size).map(|&i| &data[i].x).collect();
        let x = stack(&items)?;
        let pass = model.forward(&x, &x, config.beta, Mode::Train, Bottleneck::Nearest)?;
        model
            .codebook
            .init_from_latents(&pass.latent, &mut seeded_rng(config.seed, CODEBOOK_INIT_STREAM))?;
    }
    Ok(model)
}

pub fn fit_pairs(
    data: &[SpectrogramPair],
    stft: StftConfig,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ckpt = match resume {
        Some(path) => {
            let mut c = Checkpoint::load(path)?;
            // epochs may be extended on resume; everything else must match
            let stored = TrainConfig { epochs: config.epochs, ..c.meta.train };
            if stored != *config {
                return Err(Error::Config(
                    "resume configuration differs from the checkpoint's".into(),
                ));
            }
            c.meta.train.epochs = config.epochs;
            c
        }
        None => Checkpoint {
            meta: CheckpointMeta {
                model: config.preset.model(),
                stft,
                train: *config,
                epoch: 0,
                step: 0,
                history: Vec::new(),
            },
            model: initial_model(data, config)?,
            adam: Adam::new(config.adam()),
        },
    };
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        let line = serde_json::to_string(&rec).expect("log record serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.push(rec);
        Ok(())
    };
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let k = ckpt.model.config.codebook_size;
    for epoch in ckpt.meta.epoch + 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        let mut codes = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SpectrogramPair> = chunk.iter().map(|&i| &data[i]).collect();
            let out = train_step(&mut ckpt.model, &mut ckpt.adam, &batch, config)?;
            ckpt.meta.step += 1;
            let l = out.losses;
            for (s, v) in sums.iter_mut().zip([l.recon, l.codebook, l.commit, l.total]) {
                *s += v;
            }
            batches += 1;
            emit(
                LogRecord::Step {
                    epoch,
                    step: ckpt.meta.step,
                    recon: l.recon,
                    codebook: l.codebook,
                    commit: l.commit,
                    beta: l.beta,
                    total: l.total,
                    grad_norm: out.grad_norm,
                },
                &mut log,
            )?;
            codes.push(out.codes);
        }
        let stats = vq::codebook_stats(&codes, k)?;
        let n = batches as f64;
        let summary = EpochSummary {
            epoch,
            recon: sums[0] / n,
            codebook: sums[1] / n,
            commit: sums[2] / n,
            total: sums[3] / n,
            used_count: stats.used_count,
            perplexity: stats.perplexity,
        };
        log::info!(
            "epoch {epoch}: recon {:.5} total {:.5} codes used {} perplexity {:.2}",
            summary.recon,
            summary.total,
            summary.used_count,
            summary.perplexity
        );
        emit(LogRecord::Epoch(summary.clone()), &mut log)?;
        let is_best = ckpt
            .meta
            .history
            .iter()
            .all(|h| summary.total < h.total);
        ckpt.meta.history.push(summary);
        ckpt.meta.epoch = epoch;
        let archive = ckpt.to_archive();
        archive.write_atomic(&out_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        archive.write_atomic(&last_path)?;
        if is_best {
            archive.write_atomic(&best_path)?;
        }
    }
    Ok(FitOutcome {
        last: last_path,
        best: best_path,
        history: ckpt.meta.history,
        log,
    })
}
