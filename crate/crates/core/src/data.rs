//! Synthetic training data: a seeded note generator, a small additive
//! synthesizer with four instrument families, audio effects, and the pair
//! mining pipeline that writes WAV files plus a JSONL manifest.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Peak level every synthesized or processed waveform is normalized to.
pub const PEAK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset: f64,
    pub duration: f64,
    pub pitch: u8,
    pub velocity: f64,
}

impl NoteEvent {
    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

pub fn midi_to_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    KeyboardGuitar,
    Bass,
    WindString,
    Pluck,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::KeyboardGuitar,
        Family::Bass,
        Family::WindString,
        Family::Pluck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::KeyboardGuitar => "keyboard_guitar",
            Family::Bass => "bass",
            Family::WindString => "wind_string",
            Family::Pluck => "pluck",
        }
    }

    /// Allowed MIDI pitch range for generated melodies.
    pub fn pitch_range(self) -> (u8, u8) {
        match self {
            Family::KeyboardGuitar => (48, 79),
            Family::Bass => (28, 55),
            Family::WindString => (55, 86),
            Family::Pluck => (50, 81),
        }
    }

    fn ranges(self) -> PatchRanges {
        match self {
            Family::KeyboardGuitar => PatchRanges {
                harmonic_decay: (1.0, 1.8),
                even_gain: (0.6, 1.0),
                attack: (0.002, 0.01),
                decay: (0.15, 0.5),
                sustain: (0.25, 0.5),
                release: (0.08, 0.3),
                vibrato_rate: (4.0, 6.0),
                vibrato_depth: (0.0, 0.03),
                noise_mix: (0.0, 0.03),
            },
            Family::Bass => PatchRanges {
                harmonic_decay: (1.6, 3.0),
                even_gain: (0.7, 1.0),
                attack: (0.005, 0.02),
                decay: (0.1, 0.3),
                sustain: (0.5, 0.8),
                release: (0.05, 0.15),
                vibrato_rate: (4.0, 6.0),
                vibrato_depth: (0.0, 0.02),
                noise_mix: (0.0, 0.02),
            },
            Family::WindString => PatchRanges {
                harmonic_decay: (0.6, 1.2),
                even_gain: (0.1, 0.5),
                attack: (0.04, 0.12),
                decay: (0.05, 0.2),
                sustain: (0.75, 0.95),
                release: (0.05, 0.2),
                vibrato_rate: (4.5, 6.5),
                vibrato_depth: (0.1, 0.3),
                noise_mix: (0.05, 0.15),
            },
            Family::Pluck => PatchRanges {
                harmonic_decay: (0.8, 1.5),
                even_gain: (0.8, 1.0),
                attack: (0.001, 0.004),
                decay: (0.05, 0.2),
                sustain: (0.0, 0.1),
                release: (0.03, 0.1),
                vibrato_rate: (4.0, 6.0),
                vibrato_depth: (0.0, 0.01),
                noise_mix: (0.02, 0.08),
            },
        }
    }
}

struct PatchRanges {
    harmonic_decay: (f64, f64),
    even_gain: (f64, f64),
    attack: (f64, f64),
    decay: (f64, f64),
    sustain: (f64, f64),
    release: (f64, f64),
    vibrato_rate: (f64, f64),
    vibrato_depth: (f64, f64),
    noise_mix: (f64, f64),
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn within((lo, hi): (f64, f64), v: f64) -> bool {
    v >= lo && v <= hi
}

/// Attack and decay times and release in seconds; sustain is a level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adsr {
    pub attack: f64,
    pub decay: f64,
    pub sustain: f64,
    pub release: f64,
}

impl Adsr {
    /// Envelope level `t` seconds after onset for a note held `held` seconds.
    pub fn level(&self, t: f64, held: f64) -> f64 {
        let before_release = |t: f64| {
            if t < self.attack {
                t / self.attack
            } else if t < self.attack + self.decay {
                1.0 - (1.0 - self.sustain) * (t - self.attack) / self.decay
            } else {
                self.sustain
            }
        };
        if t < 0.0 {
            0.0
        } else if t < held {
            before_release(t)
        } else {
            let start = before_release(held);
            (start * (1.0 - (t - held) / self.release)).max(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentPatch {
    pub id: u64,
    pub family: Family,
    /// Harmonic `k` has amplitude `k^-harmonic_decay`.
    pub harmonic_decay: f64,
    /// Extra gain on even harmonics; low values give a hollow, clarinet-like tone.
    pub even_gain: f64,
    pub adsr: Adsr,
    pub vibrato_rate: f64,
    /// Peak pitch deviation in semitones.
    pub vibrato_depth: f64,
    pub noise_mix: f64,
}

impl InstrumentPatch {
    pub fn random(family: Family, rng: &mut impl Rng) -> Self {
        let r = family.ranges();
        Self {
            id: rng.random(),
            family,
            harmonic_decay: draw(rng, r.harmonic_decay),
            even_gain: draw(rng, r.even_gain),
            adsr: Adsr {
                attack: draw(rng, r.attack),
                decay: draw(rng, r.decay),
                sustain: draw(rng, r.sustain),
                release: draw(rng, r.release),
            },
            vibrato_rate: draw(rng, r.vibrato_rate),
            vibrato_depth: draw(rng, r.vibrato_depth),
            noise_mix: draw(rng, r.noise_mix),
        }
    }

    /// Whether every parameter lies inside its family's range.
    pub fn is_valid(&self) -> bool {
        let r = self.family.ranges();
        within(r.harmonic_decay, self.harmonic_decay)
            && within(r.even_gain, self.even_gain)
            && within(r.attack, self.adsr.attack)
            && within(r.decay, self.adsr.decay)
            && within(r.sustain, self.adsr.sustain)
            && within(r.release, self.adsr.release)
            && within(r.vibrato_rate, self.vibrato_rate)
            && within(r.vibrato_depth, self.vibrato_depth)
            && within(r.noise_mix, self.noise_mix)
    }
}

/// A different instrument from the same family.
pub fn reprogram(patch: &InstrumentPatch, rng: &mut impl Rng) -> InstrumentPatch {
    InstrumentPatch::random(patch.family, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub duration_seconds: f64,
    /// Maximum number of simultaneous notes.
    pub polyphony: usize,
    pub tempo_bpm: (f64, f64),
    /// Restricts the generator to these families; empty means all.
    pub families: Vec<Family>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            duration_seconds: 32.0,
            polyphony: 1,
            tempo_bpm: (80.0, 160.0),
            families: Vec::new(),
        }
    }
}

/// A random melody (with chord tones when `polyphony > 1`) and a random
/// patch to play it with. Deterministic in `seed`.
pub fn generate_track(seed: u64, cfg: &TrackConfig) -> (Vec<NoteEvent>, InstrumentPatch) {
    let mut rng = seeded_rng(seed, 0);
    let families: &[Family] = if cfg.families.is_empty() {
        &Family::ALL
    } else {
        &cfg.families
    };
    let family = families[rng.random_range(0..families.len())];
    let patch = InstrumentPatch::random(family, &mut rng);
    let (lo, hi) = family.pitch_range();
    let beat = 60.0 / draw(&mut rng, cfg.tempo_bpm);
    let mut pitch = rng.random_range(lo..=hi) as i32;
    let mut t = 0.0;
    let mut events = Vec::new();
    while t < cfg.duration_seconds {
        let span = beat * [0.5, 0.5, 1.0, 1.0, 2.0][rng.random_range(0..5)];
        if rng.random_bool(0.1) {
            t += span;
            continue;
        }
        let step = rng.random_range(-7..=7);
        pitch += step;
        // reflect at the range boundaries
        if pitch < lo as i32 {
            pitch = 2 * lo as i32 - pitch;
        }
        if pitch > hi as i32 {
            pitch = 2 * hi as i32 - pitch;
        }
        pitch = pitch.clamp(lo as i32, hi as i32);
        let duration = span * rng.random_range(0.6..0.95);
        let velocity = rng.random_range(0.6..1.0);
        events.push(NoteEvent {
            onset: t,
            duration,
            pitch: pitch as u8,
            velocity,
        });
        let extra = rng.random_range(0..cfg.polyphony.max(1));
        for interval in [4, 7, 12].iter().take(extra) {
            let p = pitch + interval;
            if p <= 127 {
                events.push(NoteEvent {
                    onset: t,
                    duration,
                    pitch: p as u8,
                    velocity: velocity * 0.8,
                });
            }
        }
        t += span;
    }
    (events, patch)
}

/// Notes whose onset falls inside `[start, start + len)`, shifted to start at
/// zero and truncated at the window end.
pub fn window(events: &[NoteEvent], start: f64, len: f64) -> Vec<NoteEvent> {
    events
        .iter()
        .filter(|e| e.onset >= start && e.onset < start + len)
        .map(|e| NoteEvent {
            onset: e.onset - start,
            duration: e.duration.min(start + len - e.onset),
            ..*e
        })
        .collect()
}

/// Minimum distance between the start offsets of the two segments of a pair.
pub const MIN_OFFSET_GAP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentWindows {
    pub x: Vec<NoteEvent>,
    pub y: Vec<NoteEvent>,
    pub x_start: f64,
    pub y_start: f64,
}

/// Two windows of `segment` seconds from one track. Their start offsets
/// differ by at least [`MIN_OFFSET_GAP`]; empty windows are redrawn.
pub fn sample_segment_pair(
    events: &[NoteEvent],
    segment: f64,
    rng: &mut impl Rng,
) -> Result<SegmentWindows> {
    let track_len = events.iter().map(NoteEvent::offset).fold(0.0, f64::max);
    if !(segment > 0.0) || track_len < 2.0 * segment.max(MIN_OFFSET_GAP) {
        return Err(Error::InvalidInput(format!(
            "track of {track_len:.2} s is too short for two {segment} s segments"
        )));
    }
    let last_start = track_len - segment;
    for _ in 0..1000 {
        let x_start = rng.random_range(0.0..last_start);
        let y_start = rng.random_range(0.0..last_start);
        if (x_start - y_start).abs() < MIN_OFFSET_GAP {
            continue;
        }
        let x = window(events, x_start, segment);
        let y = window(events, y_start, segment);
        if !x.is_empty() && !y.is_empty() {
            return Ok(SegmentWindows {
                x,
                y,
                x_start,
                y_start,
            });
        }
    }
    Err(Error::InvalidInput(
        "could not find two non-empty segments in track".into(),
    ))
}

/// Shifts every pitch; notes leaving the MIDI range are dropped.
pub fn transpose(events: &[NoteEvent], semitones: i32) -> Vec<NoteEvent> {
    events
        .iter()
        .filter_map(|e| {
            let p = e.pitch as i32 + semitones;
            (0..=127).contains(&p).then(|| NoteEvent {
                pitch: p as u8,
                ..*e
            })
        })
        .collect()
}

/// Renders notes with the patch. Output runs to the last note-off plus the
/// release time and is peak-normalized.
pub fn synthesize(events: &[NoteEvent], patch: &InstrumentPatch, sample_rate: u32) -> Result<Waveform> {
    if events.is_empty() {
        return Err(Error::InvalidInput("cannot synthesize an empty note list".into()));
    }
    let sr = sample_rate as f64;
    let release = patch.adsr.release;
    let end = events.iter().map(NoteEvent::offset).fold(0.0, f64::max) + release;
    let mut out = vec![0.0; (end * sr).ceil() as usize];
    let nyquist = 0.45 * sr;
    for (i, e) in events.iter().enumerate() {
        let f0 = midi_to_hz(e.pitch as f64);
        let max_dev = 2f64.powf(patch.vibrato_depth / 12.0);
        let harmonics = ((nyquist / (f0 * max_dev)).floor() as usize).clamp(1, 40);
        let amps: Vec<f64> = (1..=harmonics)
            .map(|k| {
                let a = (k as f64).powf(-patch.harmonic_decay);
                if k % 2 == 0 {
                    a * patch.even_gain
                } else {
                    a
                }
            })
            .collect();
        let mut noise_rng = seeded_rng(patch.id, i as u64);
        let mut noise_state = 0.0;
        // one-pole lowpass with its corner near the note's fundamental region
        let alpha = 1.0 - (-2.0 * PI * (4.0 * f0).min(nyquist) / sr).exp();
        let first = (e.onset * sr).round() as usize;
        let len = ((e.duration + release) * sr).ceil() as usize;
        let mut phase = 0.0;
        for m in 0..len {
            let n = first + m;
            if n >= out.len() {
                break;
            }
            let t = m as f64 / sr;
            let env = patch.adsr.level(t, e.duration);
            let vib = patch.vibrato_depth * (2.0 * PI * patch.vibrato_rate * t).sin();
            phase += 2.0 * PI * f0 * 2f64.powf(vib / 12.0) / sr;
            // sin(k * phase) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut tone = 0.0;
            for &a in &amps {
                tone += a * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            let white: f64 = noise_rng.sample(StandardNormal);
            noise_state += alpha * (white - noise_state);
            let sample = (1.0 - patch.noise_mix) * tone + patch.noise_mix * 4.0 * noise_state;
            out[n] += e.velocity * env * sample;
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate,
    }
    .normalized(PEAK))
}

/// Plays the waveform `2^(semitones/12)` times faster, which raises pitch and
/// shortens duration together.
pub fn resample_augment(w: &Waveform, semitones: f64) -> Waveform {
    let rate = 2f64.powf(semitones / 12.0);
    let out_len = (w.len() as f64 / rate).floor() as usize;
    Waveform {
        samples: audio::interpolate(&w.samples, rate, out_len),
        sample_rate: w.sample_rate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    /// Schroeder reverb; `decay` is the RT60 in seconds.
    Reverb { decay: f64, mix: f64 },
    /// `tanh(gain x) / tanh(gain)`.
    Overdrive { gain: f64 },
    /// Four swept first-order allpass stages mixed with the dry signal.
    Phaser { rate: f64, depth: f64 },
    Tremolo { rate: f64, depth: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectChain {
    pub effects: Vec<Effect>,
    pub resample_semitones: Option<f64>,
}

impl EffectChain {
    pub const MAX_EFFECTS: usize = 4;

    /// 0-4 distinct effects in random order with random parameters, and a
    /// playback-rate change of up to `max_resample` semitones half the time.
    pub fn random(rng: &mut impl Rng, max_resample: f64) -> Self {
        let mut kinds = [0, 1, 2, 3];
        kinds.shuffle(rng);
        let count = rng.random_range(0..=Self::MAX_EFFECTS);
        let effects = kinds[..count]
            .iter()
            .map(|k| match k {
                0 => Effect::Reverb {
                    decay: rng.random_range(0.2..1.5),
                    mix: rng.random_range(0.15..0.45),
                },
                1 => Effect::Overdrive {
                    gain: rng.random_range(2.0..10.0),
                },
                2 => Effect::Phaser {
                    rate: rng.random_range(0.1..2.0),
                    depth: rng.random_range(0.5..1.0),
                },
                _ => Effect::Tremolo {
                    rate: rng.random_range(2.0..8.0),
                    depth: rng.random_range(0.3..0.9),
                },
            })
            .collect();
        let resample_semitones = (max_resample > 0.0 && rng.random_bool(0.5))
            .then(|| rng.random_range(-max_resample..=max_resample));
        Self {
            effects,
            resample_semitones,
        }
    }
}

fn reverb(x: &[f64], sr: f64, decay: f64, mix: f64) -> Vec<f64> {
    let scale = sr / 44_100.0;
    let combs = [1116.0, 1188.0, 1277.0, 1356.0].map(|d: f64| ((d * scale) as usize).max(1));
    let allpasses = [556.0, 441.0].map(|d: f64| ((d * scale) as usize).max(1));
    let mut wet = vec![0.0; x.len()];
    for &d in &combs {
        let g = 10f64.powf(-3.0 * d as f64 / (decay * sr));
        let mut buf = vec![0.0; d];
        for (n, &v) in x.iter().enumerate() {
            let out = buf[n % d];
            buf[n % d] = v + g * out;
            wet[n] += out / combs.len() as f64;
        }
    }
    for &d in &allpasses {
        let g = 0.5;
        let mut buf = vec![0.0; d];
        for v in wet.iter_mut() {
            let delayed = buf[0];
            let input = *v + g * delayed;
            *v = delayed - g * input;
            buf.rotate_left(1);
            buf[d - 1] = input;
        }
    }
    x.iter()
        .zip(&wet)
        .map(|(d, w)| (1.0 - mix) * d + mix * w)
        .collect()
}

fn phaser(x: &[f64], sr: f64, rate: f64, depth: f64) -> Vec<f64> {
    let (lo, hi): (f64, f64) = (300.0, 3000.0);
    let mut state = [(0.0f64, 0.0f64); 4];
    x.iter()
        .enumerate()
        .map(|(n, &v)| {
            let lfo = 0.5 - 0.5 * (2.0 * PI * rate * n as f64 / sr).cos();
            let fc = lo * (hi / lo).powf(lfo);
            let tan = (PI * fc / sr).tan();
            let a = (1.0 - tan) / (1.0 + tan);
            let mut s = v;
            for (x1, y1) in state.iter_mut() {
                let y = -a * s + *x1 + a * *y1;
                *x1 = s;
                *y1 = y;
                s = y;
            }
            v + depth * s
        })
        .collect()
}

/// Applies the chain's effects in order and renormalizes. The playback-rate
/// part of the chain is handled by [`resample_augment`].
pub fn apply_effects(w: &Waveform, chain: &EffectChain) -> Waveform {
    let sr = w.sample_rate as f64;
    let mut x = w.samples.clone();
    for effect in &chain.effects {
        x = match *effect {
            Effect::Reverb { decay, mix } => reverb(&x, sr, decay, mix),
            Effect::Overdrive { gain } => {
                let norm = gain.tanh();
                x.iter().map(|v| (gain * v).tanh() / norm).collect()
            }
            Effect::Phaser { rate, depth } => phaser(&x, sr, rate, depth),
            Effect::Tremolo { rate, depth } => x
                .iter()
                .enumerate()
                .map(|(n, v)| {
                    let lfo = 0.5 + 0.5 * (2.0 * PI * rate * n as f64 / sr).sin();
                    v * (1.0 - depth * lfo)
                })
                .collect(),
        };
    }
    Waveform {
        samples: x,
        sample_rate: w.sample_rate,
    }
    .normalized(PEAK)
}

/// Renders a segment's notes with the patch and the shared transformations,
/// producing exactly `segment_samples` samples.
pub fn render_segment(
    events: &[NoteEvent],
    patch: &InstrumentPatch,
    chain: &EffectChain,
    segment_samples: usize,
) -> Result<Waveform> {
    let rate = 2f64.powf(chain.resample_semitones.unwrap_or(0.0) / 12.0);
    let source_len = (segment_samples as f64 * rate).ceil() as usize;
    let mut w = synthesize(events, patch, SAMPLE_RATE)?.fit_to(source_len);
    if let Some(st) = chain.resample_semitones {
        w = resample_augment(&w, st);
    }
    Ok(apply_effects(&w.fit_to(segment_samples), chain))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub segment_seconds: f64,
    pub max_transpose: i32,
    pub max_resample_semitones: f64,
    pub track: TrackConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            segment_seconds: 8.0,
            max_transpose: 5,
            max_resample_semitones: 4.0,
            track: TrackConfig::default(),
        }
    }
}

impl DataConfig {
    /// 2.048 s segments: 256 frames at a 128-sample hop.
    pub fn toy() -> Self {
        Self {
            segment_seconds: 2.048,
            ..Self::default()
        }
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.segment_seconds > 0.0 && self.segment_seconds <= 8.0) {
            return Err(Error::Config("segment_seconds must be in (0, 8]".into()));
        }
        if !(1..=5).contains(&self.max_transpose) {
            return Err(Error::Config("max_transpose must be in 1..=5".into()));
        }
        if !(0.0..=4.0).contains(&self.max_resample_semitones) {
            return Err(Error::Config(
                "max_resample_semitones must be in [0, 4]".into(),
            ));
        }
        if self.track.polyphony == 0 || self.track.polyphony > 4 {
            return Err(Error::Config("track.polyphony must be in 1..=4".into()));
        }
        let min_track = 2.0 * self.segment_seconds * 2f64.powf(self.max_resample_semitones / 12.0);
        if self.track.duration_seconds < min_track.max(2.0 * MIN_OFFSET_GAP) + 1.0 {
            return Err(Error::Config(format!(
                "track.duration_seconds must exceed {:.1} for this segment length",
                min_track + 1.0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    /// Audio path relative to the manifest directory.
    pub audio: String,
    /// Note-event path relative to the manifest directory.
    pub notes: String,
    /// Window start within the source track, in seconds.
    pub offset: f64,
    /// Symbolic transposition applied before synthesis.
    pub transpose: i32,
}

/// One manifest row. Both members share the patch and the effect chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub seed: u64,
    pub track_seed: u64,
    pub patch: InstrumentPatch,
    pub effects: EffectChain,
    pub x: SegmentRecord,
    pub y: SegmentRecord,
}

/// In-memory pair, before anything is written to disk.
#[derive(Clone, Debug)]
pub struct SegmentPair {
    pub x: Waveform,
    pub y: Waveform,
    pub x_events: Vec<NoteEvent>,
    pub y_events: Vec<NoteEvent>,
    pub record: PairRecord,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Draws pair `index` of the dataset defined by `(config, seed)`. Each pair
/// uses its own rng stream, so pairs can be generated in any order.
pub fn make_pair(config: &DataConfig, seed: u64, index: usize) -> Result<SegmentPair> {
    let mut rng: ChaCha8Rng = seeded_rng(seed, index as u64 + 1);
    let track_seed: u64 = rng.random();
    let (events, original) = generate_track(track_seed, &config.track);
    let patch = reprogram(&original, &mut rng);
    let effects = EffectChain::random(&mut rng, config.max_resample_semitones);
    let rate = 2f64.powf(effects.resample_semitones.unwrap_or(0.0) / 12.0);
    let windows = sample_segment_pair(&events, config.segment_seconds * rate, &mut rng)?;
    let mut shift = 0;
    let mut y_events = Vec::new();
    for _ in 0..100 {
        shift = rng.random_range(1..=config.max_transpose);
        if rng.random_bool(0.5) {
            shift = -shift;
        }
        y_events = transpose(&windows.y, shift);
        if !y_events.is_empty() {
            break;
        }
    }
    let n = config.segment_samples();
    let x = render_segment(&windows.x, &patch, &effects, n)?;
    let y = render_segment(&y_events, &patch, &effects, n)?;
    let record = PairRecord {
        pair_id: index,
        seed,
        track_seed,
        patch,
        effects,
        x: SegmentRecord {
            audio: format!("pair{index:05}_x.wav"),
            notes: format!("pair{index:05}_x.notes"),
            offset: windows.x_start,
            transpose: 0,
        },
        y: SegmentRecord {
            audio: format!("pair{index:05}_y.wav"),
            notes: format!("pair{index:05}_y.notes"),
            offset: windows.y_start,
            transpose: shift,
        },
    };
    Ok(SegmentPair {
        x,
        y,
        x_events: windows.x,
        y_events,
        record,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("manifest rows serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e))?,
        );
    }
    Ok(rows)
}

/// Generates `pairs` pairs into `out_dir` and writes the manifest.
pub fn build_dataset(config: &DataConfig, pairs: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let pair = make_pair(config, seed, i)?;
        let r = &pair.record;
        audio::write_wav(out_dir.join(&r.x.audio), &pair.x)?;
        audio::write_wav(out_dir.join(&r.y.audio), &pair.y)?;
        write_notes(out_dir.join(&r.x.notes), &pair.x_events)?;
        write_notes(out_dir.join(&r.y.notes), &pair.y_events)?;
        log::debug!("pair {i}: {} patch {:x}", r.patch.family.name(), r.patch.id);
        rows.push(pair.record);
    }
    write_jsonl(&out_dir.join(MANIFEST_FILE), &rows)?;
    Ok(Manifest {
        dir: out_dir.to_path_buf(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub rows: Vec<PairRecord>,
}

impl Manifest {
    /// Accepts the manifest file itself or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        Ok(Self {
            dir: file.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows: read_jsonl(&file)?,
        })
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.dir.join(relative)
    }
}

/// Writes notes as text, one `onset duration pitch velocity` line each.
pub fn write_notes(path: impl AsRef<Path>, events: &[NoteEvent]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("# onset_s duration_s midi_pitch velocity\n");
    for e in events {
        text.push_str(&format!(
            "{} {} {} {}\n",
            e.onset, e.duration, e.pitch, e.velocity
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_notes(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_notes(&text).map_err(|message| Error::Parse {
        section: path.display().to_string(),
        message,
    })
}

pub fn parse_notes(text: &str) -> std::result::Result<Vec<NoteEvent>, String> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| format!("line {}: {what}", i + 1);
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid number"));
        let e = NoteEvent {
            onset: num(fields[0])?,
            duration: num(fields[1])?,
            pitch: fields[2].parse().map_err(|_| bad("pitch must be 0-127"))?,
            velocity: num(fields[3])?,
        };
        if !(e.onset >= 0.0) || !(e.duration > 0.0) || e.pitch > 127 || !(0.0..=1.0).contains(&e.velocity) {
            return Err(bad("note out of range"));
        }
        events.push(e);
    }
    Ok(events)
}

/// Row of a transfer benchmark. Artificial benchmarks carry a target (the
/// content notes played with the style instrument) and ground-truth notes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub pair_id: usize,
    pub content: String,
    pub style: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_notes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_notes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_patch: Option<InstrumentPatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_patch: Option<InstrumentPatch>,
}

pub const BENCHMARK_FILE: &str = "benchmark.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub dir: PathBuf,
    pub rows: Vec<BenchmarkRecord>,
}

impl Benchmark {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(BENCHMARK_FILE)
        } else {
            path.to_path_buf()
        };
        Ok(Self {
            dir: file.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows: read_jsonl(&file)?,
        })
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.dir.join(relative)
    }
}

/// Writes an artificial benchmark: for each row, a content segment and a
/// style segment from instruments of different families, plus the target
/// rendering of the content notes with the style instrument. No effects are
/// applied so the target is exact.
pub fn build_benchmark(config: &DataConfig, rows: usize, seed: u64, out_dir: &Path) -> Result<Benchmark> {
    config.validate()?;
    create_dir(out_dir)?;
    let n = config.segment_samples();
    let seg = config.segment_seconds;
    let mut records = Vec::with_capacity(rows);
    for i in 0..rows {
        // streams above 2^32 keep benchmark draws disjoint from training pairs
        let mut rng = seeded_rng(seed, (1 << 32) + i as u64);
        let (content_events, content_patch) = generate_track(rng.random(), &config.track);
        let style_family = loop {
            let f = Family::ALL[rng.random_range(0..4)];
            if f != content_patch.family {
                break f;
            }
        };
        let style_track = TrackConfig {
            families: vec![style_family],
            ..config.track.clone()
        };
        let (style_events, style_patch) = generate_track(rng.random(), &style_track);
        let c = sample_segment_pair(&content_events, seg, &mut rng)?.x;
        let s = sample_segment_pair(&style_events, seg, &mut rng)?.x;
        let render = |ev: &[NoteEvent], p: &InstrumentPatch| -> Result<Waveform> {
            Ok(synthesize(ev, p, SAMPLE_RATE)?.fit_to(n))
        };
        let rec = BenchmarkRecord {
            pair_id: i,
            content: format!("bench{i:05}_content.wav"),
            style: format!("bench{i:05}_style.wav"),
            target: Some(format!("bench{i:05}_target.wav")),
            content_notes: Some(format!("bench{i:05}_content.notes")),
            style_notes: Some(format!("bench{i:05}_style.notes")),
            content_patch: Some(content_patch.clone()),
            style_patch: Some(style_patch.clone()),
        };
        audio::write_wav(out_dir.join(&rec.content), &render(&c, &content_patch)?)?;
        audio::write_wav(out_dir.join(&rec.style), &render(&s, &style_patch)?)?;
        audio::write_wav(
            out_dir.join(rec.target.as_ref().expect("set above")),
            &render(&c, &style_patch)?,
        )?;
        write_notes(out_dir.join(rec.content_notes.as_ref().expect("set above")), &c)?;
        write_notes(out_dir.join(rec.style_notes.as_ref().expect("set above")), &s)?;
        records.push(rec);
    }
    write_jsonl(&out_dir.join(BENCHMARK_FILE), &records)?;
    Ok(Benchmark {
        dir: out_dir.to_path_buf(),
        rows: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rustfft::{num_complex::Complex64, FftPlanner};

    fn peak_hz(w: &Waveform) -> f64 {
        let n = w.len();
        let mut buf: Vec<Complex64> = w
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                Complex64::new(s * hann, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let k = (1..n / 2 - 1)
            .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
            .unwrap();
        // parabolic interpolation on log magnitude
        let (a, b, c) = (mags[k - 1].ln(), mags[k].ln(), mags[k + 1].ln());
        let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
        (k as f64 + delta) * w.sample_rate as f64 / n as f64
    }

    fn level_at(w: &Waveform, hz: f64) -> f64 {
        let (re, im) = w.samples.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, s)| {
            let ph = 2.0 * PI * hz * n as f64 / w.sample_rate as f64;
            (re + s * ph.cos(), im - s * ph.sin())
        });
        (re * re + im * im).sqrt()
    }

    fn note(onset: f64, duration: f64, pitch: u8) -> NoteEvent {
        NoteEvent {
            onset,
            duration,
            pitch,
            velocity: 1.0,
        }
    }

    fn steady_patch(decay: f64) -> InstrumentPatch {
        InstrumentPatch {
            id: 1,
            family: Family::WindString,
            harmonic_decay: decay,
            even_gain: 1.0,
            adsr: Adsr {
                attack: 0.01,
                decay: 0.01,
                sustain: 1.0,
                release: 0.05,
            },
            vibrato_rate: 5.0,
            vibrato_depth: 0.0,
            noise_mix: 0.0,
        }
    }

    fn tone(hz: f64, len: usize) -> Waveform {
        Waveform {
            samples: (0..len)
                .map(|n| 0.5 * (2.0 * PI * hz * n as f64 / 16_000.0).sin())
                .collect(),
            sample_rate: 16_000,
        }
    }

    #[test]
    fn tracks_are_deterministic_long_and_monophonic_by_default() {
        let cfg = TrackConfig::default();
        let (a, pa) = generate_track(11, &cfg);
        let (b, pb) = generate_track(11, &cfg);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(pa.is_valid());
        assert!(a.last().unwrap().offset() >= 30.0);
        for w in a.windows(2) {
            assert!(w[0].offset() <= w[1].onset);
        }
    }

    #[test]
    fn pitch_histogram_spans_two_octaves() {
        let cfg = TrackConfig::default();
        let mut lo = u8::MAX;
        let mut hi = 0;
        for seed in 0..100 {
            for e in generate_track(seed, &cfg).0 {
                lo = lo.min(e.pitch);
                hi = hi.max(e.pitch);
            }
        }
        assert!(hi - lo >= 24, "{lo}..{hi}");
    }

    #[test]
    fn polyphonic_config_produces_chords() {
        let cfg = TrackConfig {
            polyphony: 3,
            ..TrackConfig::default()
        };
        let (ev, _) = generate_track(5, &cfg);
        assert!(ev.windows(2).any(|w| w[0].onset == w[1].onset));
    }

    #[test]
    fn transpose_rules() {
        let ev = vec![note(0.0, 1.0, 60), note(1.0, 1.0, 125)];
        assert_eq!(transpose(&ev, 0), ev);
        assert_eq!(transpose(&transpose(&ev[..1], 5), -5), ev[..1].to_vec());
        let up = transpose(&ev, 5);
        assert_eq!(up.len(), 1);
        assert_eq!(up[0].pitch, 65);
    }

    #[test]
    fn segment_windows_keep_relative_onsets() {
        let (ev, _) = generate_track(3, &TrackConfig::default());
        let mut rng = seeded_rng(1, 1);
        let w = sample_segment_pair(&ev, 8.0, &mut rng).unwrap();
        let track_len = ev.last().unwrap().offset();
        assert!(w.x_start >= 0.0 && w.x_start + 8.0 <= track_len);
        let orig: Vec<f64> = ev
            .iter()
            .filter(|e| e.onset >= w.x_start && e.onset < w.x_start + 8.0)
            .map(|e| e.onset - w.x_start)
            .collect();
        let got: Vec<f64> = w.x.iter().map(|e| e.onset).collect();
        assert_eq!(orig, got);
        assert!(w.x.iter().all(|e| e.offset() <= 8.0 + 1e-9));
    }

    #[test]
    fn short_track_is_rejected() {
        let ev = vec![note(0.0, 10.0, 60)];
        assert!(sample_segment_pair(&ev, 8.0, &mut seeded_rng(0, 0)).is_err());
    }

    #[test]
    fn reprogram_keeps_family_and_changes_patch() {
        let mut rng = seeded_rng(2, 0);
        for family in Family::ALL {
            let p = InstrumentPatch::random(family, &mut rng);
            for _ in 0..250 {
                let q = reprogram(&p, &mut rng);
                assert_eq!(q.family, family);
                assert!(q.is_valid());
                assert_ne!(q, p);
            }
        }
        let p = InstrumentPatch::random(Family::Bass, &mut seeded_rng(3, 0));
        assert_eq!(
            reprogram(&p, &mut seeded_rng(4, 0)),
            reprogram(&p, &mut seeded_rng(4, 0))
        );
    }

    #[test]
    fn a4_has_its_peak_at_440_hz() {
        let w = synthesize(&[note(0.0, 1.0, 69)], &steady_patch(1.0), 16_000).unwrap();
        assert!((w.peak() - PEAK).abs() < 1e-12);
        assert!((peak_hz(&w) - 440.0).abs() < 2.0);
        assert_eq!(w.len(), (1.05f64 * 16_000.0).ceil() as usize);
    }

    #[test]
    fn steep_harmonic_decay_is_nearly_a_pure_tone() {
        let w = synthesize(&[note(0.0, 1.0, 69)], &steady_patch(8.0), 16_000).unwrap();
        let ratio_db = 20.0 * (level_at(&w, 880.0) / level_at(&w, 440.0)).log10();
        assert!(ratio_db < -40.0, "{ratio_db}");
    }

    #[test]
    fn disjoint_notes_leave_silence_between_spans() {
        let p = steady_patch(1.0);
        let w = synthesize(&[note(0.0, 0.3, 60), note(1.0, 0.3, 67)], &p, 16_000).unwrap();
        let first_end = ((0.3 + p.adsr.release) * 16_000.0).ceil() as usize;
        assert!(w.samples[first_end..16_000].iter().all(|&s| s == 0.0));
        assert!(w.samples[..first_end].iter().any(|&s| s != 0.0));
        assert!(w.samples[16_000..].iter().any(|&s| s != 0.0));
    }

    #[test]
    fn resampling_changes_rate_and_pitch_together() {
        let w = tone(440.0, 16_000);
        assert_eq!(resample_augment(&w, 0.0), w);
        let up = resample_augment(&w, 4.0);
        let expected = (16_000.0 / 2f64.powf(4.0 / 12.0)).floor() as usize;
        assert_eq!(up.len(), expected);
        assert!((up.len() as f64 / 16_000.0 - 0.7937).abs() < 1e-3);
        assert!((peak_hz(&up) - 554.37).abs() < 2.0, "{}", peak_hz(&up));
    }

    #[test]
    fn tremolo_shows_up_in_the_envelope_spectrum() {
        let w = tone(1000.0, 32_000);
        let chain = EffectChain {
            effects: vec![Effect::Tremolo {
                rate: 4.0,
                depth: 0.6,
            }],
            resample_semitones: None,
        };
        let out = apply_effects(&w, &chain);
        // rectify and average over 10 ms blocks to get the envelope at 100 Hz
        let env: Vec<f64> = out
            .samples
            .chunks(160)
            .map(|c| c.iter().map(|s| s.abs()).sum::<f64>() / c.len() as f64)
            .collect();
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        let env = Waveform {
            samples: env.iter().map(|e| e - mean).collect(),
            sample_rate: 100,
        };
        assert!((peak_hz(&env) - 4.0).abs() < 0.3, "{}", peak_hz(&env));
    }

    #[test]
    fn effects_are_deterministic_and_empty_chain_only_normalizes() {
        let w = tone(330.0, 8000);
        let empty = apply_effects(&w, &EffectChain::default());
        for (a, b) in empty.samples.iter().zip(&w.samples) {
            assert!((a - b * PEAK / 0.5).abs() < 1e-9);
        }
        let mut rng = seeded_rng(9, 0);
        for _ in 0..20 {
            let chain = EffectChain::random(&mut rng, 4.0);
            assert!(chain.effects.len() <= 4);
            let a = apply_effects(&w, &chain);
            assert_eq!(a, apply_effects(&w, &chain));
            assert!(a.samples.iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn notes_round_trip_through_text() {
        let ev = vec![note(0.0, 0.5, 60), note(0.25, 1.5, 64)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.notes");
        write_notes(&path, &ev).unwrap();
        assert_eq!(read_notes(&path).unwrap(), ev);
        assert!(parse_notes("0 1 200 0.5").is_err());
        assert!(parse_notes("0 -1 60 0.5").is_err());
    }

    #[test]
    fn dataset_is_reproducible_and_pairs_share_transformations() {
        let cfg = DataConfig {
            segment_seconds: 1.0,
            ..DataConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&cfg, 4, 7, a.path()).unwrap();
        build_dataset(&cfg, 4, 7, b.path()).unwrap();
        let text = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(text(a.path()), text(b.path()));
        assert_eq!(ma.rows.len(), 4);
        let files = fs::read_dir(a.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
            .count();
        assert_eq!(files, 8);
        let loaded = Manifest::load(a.path()).unwrap();
        assert_eq!(loaded.rows, ma.rows);
        for r in &loaded.rows {
            assert_ne!(r.y.transpose, 0);
            assert!((r.x.offset - r.y.offset).abs() >= MIN_OFFSET_GAP);
            let x = audio::read_wav(loaded.resolve(&r.x.audio)).unwrap();
            assert_eq!(x.len(), 16_000);
            // x is reproducible from its provenance
            let ev = read_notes(loaded.resolve(&r.x.notes)).unwrap();
            let again = render_segment(&ev, &r.patch, &r.effects, 16_000).unwrap();
            for (p, q) in x.samples.iter().zip(&again.samples) {
                assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_pairs_gives_an_empty_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = build_dataset(&DataConfig::toy(), 0, 1, d.path()).unwrap();
        assert!(m.rows.is_empty());
        assert_eq!(fs::read_to_string(d.path().join(MANIFEST_FILE)).unwrap(), "");
    }

    #[test]
    fn pair_contents_differ() {
        let cfg = DataConfig::toy();
        let mut differ = 0;
        for i in 0..40 {
            let p = make_pair(&cfg, 99, i).unwrap();
            let set = |ev: &[NoteEvent]| {
                let mut v: Vec<u8> = ev.iter().map(|e| e.pitch).collect();
                v.sort();
                v.dedup();
                v
            };
            if set(&p.x_events) != set(&p.y_events) {
                differ += 1;
            }
        }
        assert!(differ >= 38, "{differ}/40");
    }

    #[test]
    fn benchmark_targets_use_the_style_instrument() {
        let d = tempfile::tempdir().unwrap();
        let b = build_benchmark(&DataConfig::toy(), 3, 5, d.path()).unwrap();
        let loaded = Benchmark::load(d.path()).unwrap();
        assert_eq!(loaded.rows, b.rows);
        for r in &b.rows {
            let (cp, sp) = (r.content_patch.as_ref().unwrap(), r.style_patch.as_ref().unwrap());
            assert_ne!(cp.family, sp.family);
            let notes = read_notes(b.resolve(r.content_notes.as_ref().unwrap())).unwrap();
            let target = audio::read_wav(b.resolve(r.target.as_ref().unwrap())).unwrap();
            let expected = synthesize(&notes, sp, SAMPLE_RATE).unwrap().fit_to(target.len());
            for (p, q) in target.samples.iter().zip(&expected.samples) {
                assert!((p - q).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn segment_offsets_are_always_far_apart(seed in 0u64..10_000) {
            let (ev, _) = generate_track(seed % 17, &TrackConfig::default());
            let mut rng = seeded_rng(seed, 3);
            let w = sample_segment_pair(&ev, 8.0, &mut rng).unwrap();
            prop_assert!((w.x_start - w.y_start).abs() >= MIN_OFFSET_GAP);
            let len = ev.last().unwrap().offset();
            prop_assert!(w.x_start + 8.0 <= len && w.y_start + 8.0 <= len);
        }

        #[test]
        fn transpose_is_invertible_inside_range(shift in -5i32..=5, pitch in 5u8..=122) {
            let ev = vec![note(0.0, 1.0, pitch)];
            prop_assert_eq!(transpose(&transpose(&ev, shift), -shift), ev);
        }
    }
}
