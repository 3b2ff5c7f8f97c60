//! Vector-quantization bottleneck: nearest-neighbour codebook lookup, the
//! straight-through gradient route, the codebook/commitment losses and
//! codebook-usage diagnostics.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

/// `K x D` table of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub vectors: Param,
}

impl Codebook {
    /// Entries drawn i.i.d. from `U[-1/K, 1/K]`.
    pub fn new<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Self {
        assert!(size >= 1 && dim >= 1, "codebook must be at least 1 x 1");
        Self {
            vectors: Param::uniform(size, dim, 1.0 / size as f64, rng),
        }
    }

    pub fn from_vectors(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Shape("codebook must be at least 1 x 1".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook contains non-finite values".into()));
        }
        Ok(Self {
            vectors: Param::new(vectors),
        })
    }

    /// Overwrites every entry with a latent row sampled without replacement
    /// (with replacement when there are fewer rows than entries).
    pub fn init_from_latents<R: Rng>(&mut self, latents: &Array2<f64>, rng: &mut R) -> Result<()> {
        if latents.ncols() != self.dim() || latents.nrows() == 0 {
            return Err(Error::Shape(format!(
                "cannot initialize a {}-d codebook from {} x {} latents",
                self.dim(),
                latents.nrows(),
                latents.ncols()
            )));
        }
        let mut rows: Vec<usize> = (0..latents.nrows()).collect();
        rows.shuffle(rng);
        for j in 0..self.size() {
            let r = rows[j % rows.len()];
            self.vectors.value.row_mut(j).assign(&latents.row(r));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.vectors.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.value.ncols()
    }
}

/// Encoder output, one `D`-dimensional row per latent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentLatent {
    pub frames: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeSequence {
    pub indices: Vec<usize>,
    /// Row `i` is an exact copy of codebook row `indices[i]`.
    pub quantized: Array2<f64>,
}

impl CodeSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, codebook: f64, commit: f64, beta: f64) -> Self {
        let mut lb = Self {
            recon,
            codebook,
            commit,
            beta,
            total: 0.0,
        };
        lb.total = total_loss(&lb);
        lb
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("recon", self.recon),
            ("codebook", self.codebook),
            ("commit", self.commit),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

pub fn total_loss(lb: &LossBreakdown) -> f64 {
    lb.recon + lb.codebook + lb.beta * lb.commit
}

fn check_dims(latent: &ContentLatent, dim: usize) -> Result<()> {
    if latent.frames.ncols() != dim {
        return Err(Error::Shape(format!(
            "latent width {} does not match codebook width {dim}",
            latent.frames.ncols()
        )));
    }
    Ok(())
}

/// Nearest codebook row per latent frame (Euclidean); ties go to the lowest
/// index.
pub fn quantize(latent: &ContentLatent, cb: &Codebook) -> Result<CodeSequence> {
    check_dims(latent, cb.dim())?;
    let table = &cb.vectors.value;
    let indices: Vec<usize> = latent
        .frames
        .outer_iter()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (j, code) in table.outer_iter().enumerate() {
                let d: f64 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect();
    let mut quantized = Array2::zeros(latent.frames.raw_dim());
    for (mut row, &j) in quantized.outer_iter_mut().zip(&indices) {
        row.assign(&table.row(j));
    }
    Ok(CodeSequence { indices, quantized })
}

/// Gradients produced by routing a downstream gradient through
/// [`straight_through`].
#[derive(Clone, Debug, PartialEq)]
pub struct StraightThroughGrads {
    pub latent: Array2<f64>,
    pub codebook: Array2<f64>,
}

/// Forward value is the quantized sequence; see [`straight_through_backward`]
/// for where its gradient goes.
pub fn straight_through(latent: &ContentLatent, codes: &CodeSequence) -> Result<ContentLatent> {
    if latent.frames.dim() != codes.quantized.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} vs codes {:?}",
            latent.frames.dim(),
            codes.quantized.dim()
        )));
    }
    Ok(ContentLatent {
        frames: codes.quantized.clone(),
    })
}

/// The gradient arriving at the quantized value is handed to the encoder
/// output unchanged; the codebook gets nothing along this path.
pub fn straight_through_backward(grad: &Array2<f64>, codebook_size: usize) -> StraightThroughGrads {
    StraightThroughGrads {
        latent: grad.clone(),
        codebook: Array2::zeros((codebook_size, grad.ncols())),
    }
}

/// Codebook and commitment terms, each the mean squared residual over all
/// elements. `recon` is left at zero for the caller to fill in.
pub fn vq_losses(latent: &ContentLatent, codes: &CodeSequence, beta: f64) -> Result<LossBreakdown> {
    if latent.frames.dim() != codes.quantized.dim() {
        return Err(Error::Shape("latent and codes differ in shape".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("beta must be >= 0, got {beta}")));
    }
    let n = latent.frames.len().max(1) as f64;
    let sq: f64 = latent
        .frames
        .iter()
        .zip(codes.quantized.iter())
        .map(|(e, q)| (q - e) * (q - e))
        .sum::<f64>()
        / n;
    Ok(LossBreakdown::new(0.0, sq, sq, beta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqLossGrads {
    /// `beta * d(commit)/d(latent)`; the codebook term contributes nothing here.
    pub latent: Array2<f64>,
    /// `d(codebook)/d(codebook rows)`; the commitment term contributes nothing.
    pub codebook: Array2<f64>,
}

pub fn vq_loss_gradients(
    latent: &ContentLatent,
    codes: &CodeSequence,
    beta: f64,
    codebook_size: usize,
) -> VqLossGrads {
    let n = latent.frames.len().max(1) as f64;
    let residual = &latent.frames - &codes.quantized;
    let mut codebook = Array2::zeros((codebook_size, latent.frames.ncols()));
    for (row, &j) in residual.outer_iter().zip(&codes.indices) {
        let mut target = codebook.row_mut(j);
        target.scaled_add(-2.0 / n, &row);
    }
    VqLossGrads {
        latent: residual.mapv(|r| beta * 2.0 * r / n),
        codebook,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub used_count: usize,
    pub usage_histogram: Vec<u64>,
    pub perplexity: f64,
}

/// Usage of each of `codebook_size` codes across all observed sequences.
pub fn codebook_stats<'a, I>(histories: I, codebook_size: usize) -> Result<CodebookStats>
where
    I: IntoIterator<Item = &'a CodeSequence>,
{
    let mut usage_histogram = vec![0u64; codebook_size];
    for seq in histories {
        for &i in &seq.indices {
            let slot = usage_histogram.get_mut(i).ok_or_else(|| {
                Error::InvalidInput(format!("code {i} outside codebook of {codebook_size}"))
            })?;
            *slot += 1;
        }
    }
    let total: u64 = usage_histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("no codes observed".into()));
    }
    let entropy: f64 = usage_histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        used_count: usage_histogram.iter().filter(|&&c| c > 0).count(),
        perplexity: entropy.exp().clamp(1.0, codebook_size as f64),
        usage_histogram,
    })
}

/// Information carried per beat by `used_count` equiprobable codes emitted
/// at `latent_frames_per_second`.
pub fn bits_per_beat(tempo_bpm: f64, used_count: usize, latent_frames_per_second: f64) -> Result<f64> {
    if used_count < 1 {
        return Err(Error::InvalidInput("used_count must be >= 1".into()));
    }
    if !(tempo_bpm > 0.0) || !(latent_frames_per_second > 0.0) {
        return Err(Error::InvalidInput(
            "tempo and latent frame rate must be positive".into(),
        ));
    }
    Ok(latent_frames_per_second * 60.0 / tempo_bpm * (used_count as f64).log2())
}
