//! WebAssembly bindings for the static demo page in `www/`. Results are
//! returned as JSON strings.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;
use timbrevq::data::{self, Family, InstrumentPatch, NoteEvent};
use timbrevq::spectral::{self, GriffinLimConfig, PhaseInit, StftConfig};
use timbrevq::vq::{self, Codebook, ContentLatent};
use timbrevq::{seeded_rng, Result};
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsError::new(&e.to_string()))
}

fn family(index: usize) -> Family {
    Family::ALL[index % Family::ALL.len()]
}

#[derive(Serialize)]
struct NoteView {
    family: &'static str,
    sample_rate: u32,
    samples: Vec<f32>,
    /// Log-compressed magnitudes, frame-major.
    spectrogram: Vec<f32>,
    frames: usize,
    bins: usize,
    max: f32,
}

fn render_note(family_index: usize, pitch: u8, seed: u32) -> Result<NoteView> {
    let patch = InstrumentPatch::random(family(family_index), &mut seeded_rng(seed.into(), 0));
    let ev = [NoteEvent {
        onset: 0.05,
        duration: 1.0,
        pitch,
        velocity: 0.9,
    }];
    let w = data::synthesize(&ev, &patch, timbrevq::audio::SAMPLE_RATE)?;
    let spec = spectral::spectrogram(&w, StftConfig::toy())?;
    let (frames, bins) = spec.frames.dim();
    let max = spec.frames.iter().fold(0.0f64, |m, &v| m.max(v)) as f32;
    Ok(NoteView {
        family: patch.family.name(),
        sample_rate: w.sample_rate,
        samples: w.samples.iter().map(|&v| v as f32).collect(),
        spectrogram: spec.frames.iter().map(|&v| v as f32).collect(),
        frames,
        bins,
        max,
    })
}

/// Synthesizes one note with a random patch of the given family and returns
/// its samples and spectrogram.
#[wasm_bindgen]
pub fn synth_note(family_index: usize, pitch: u8, seed: u32) -> std::result::Result<String, JsError> {
    to_js(render_note(family_index, pitch, seed))
}

#[derive(Serialize)]
struct GriffinLimView {
    objective: Vec<f64>,
    samples: Vec<f32>,
}

/// Inverts the spectrogram of a synthesized note and reports the magnitude
/// mismatch after every iteration.
#[wasm_bindgen]
pub fn griffin_lim_trace(
    family_index: usize,
    pitch: u8,
    seed: u32,
    iterations: usize,
    random_phase: bool,
) -> std::result::Result<String, JsError> {
    to_js((|| {
        let patch = InstrumentPatch::random(family(family_index), &mut seeded_rng(seed.into(), 0));
        let ev = [NoteEvent {
            onset: 0.05,
            duration: 0.8,
            pitch,
            velocity: 0.9,
        }];
        let w = data::synthesize(&ev, &patch, timbrevq::audio::SAMPLE_RATE)?;
        let cfg = StftConfig::toy();
        let spec = spectral::spectrogram(&w, cfg)?;
        let gl = GriffinLimConfig {
            iterations,
            init: if random_phase {
                PhaseInit::Random { seed: seed.into() }
            } else {
                PhaseInit::Zero
            },
        };
        let r = spectral::griffin_lim_traced(&spec, cfg, gl)?;
        Ok(GriffinLimView {
            objective: r.objective,
            samples: r.waveform.samples.iter().map(|&v| v as f32).collect(),
        })
    })())
}

#[derive(Serialize)]
struct QuantizeView {
    points: Vec<[f64; 2]>,
    codebook: Vec<[f64; 2]>,
    assignment: Vec<usize>,
    used_count: usize,
    perplexity: f64,
    bits_per_beat: f64,
}

/// Snaps `n` random 2-D points to a random codebook of `k` vectors and
/// reports usage and the information rate at the given tempo.
#[wasm_bindgen]
pub fn quantize_points(
    n: usize,
    k: usize,
    seed: u32,
    tempo_bpm: f64,
    codes_per_second: f64,
) -> std::result::Result<String, JsError> {
    to_js((|| {
        let mut rng = seeded_rng(seed.into(), 1);
        let mut cb = Codebook::new(k.max(1), 2, &mut rng);
        cb.vectors.value = Array2::from_shape_fn((k.max(1), 2), |_| rng.random_range(-1.0..1.0));
        let frames = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let codes = vq::quantize(&ContentLatent { frames: frames.clone() }, &cb)?;
        let stats = vq::codebook_stats([&codes], cb.size())?;
        let row = |a: &Array2<f64>, i: usize| [a[[i, 0]], a[[i, 1]]];
        Ok(QuantizeView {
            points: (0..n).map(|i| row(&frames, i)).collect(),
            codebook: (0..cb.size()).map(|i| row(&cb.vectors.value, i)).collect(),
            bits_per_beat: if stats.used_count > 0 {
                vq::bits_per_beat(tempo_bpm, stats.used_count, codes_per_second)?
            } else {
                0.0
            },
            assignment: codes.indices,
            used_count: stats.used_count,
            perplexity: stats.perplexity,
        })
    })())
}
