//! Synthetic instrument corpus.
//!
//! Ten additive-synthesis instrument classes with well-separated spectral
//! profiles stand in for the sound sources. Every clip is derived from a
//! single u64 seed, so corpora regenerate bit-identically, and feature
//! tracks (activity, object and motion vectors) recompute on demand instead
//! of being stored.
//!
//! The object feature of a clip is a jittered copy of its class's fixed
//! unit vector, playing the role a detector embedding would play with real
//! video. Motion features lift the 16-band activity track through a frozen
//! random linear map.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dsp::{self, StftPlan, CLIP_LEN, FRAMES, LOG_BINS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::{fnv1a, normal, rng_for, uniform};

/// Time steps in the activity/motion track.
pub const MOTION_STEPS: usize = 64;
/// Bands in the activity track.
pub const ACT_DIMS: usize = 16;
/// Width of object and motion feature vectors.
pub const FEAT_DIM: usize = 256;
/// Fixed seed for corpus-independent constants (class vectors, motion lift).
const BANK_SEED: u64 = 0x51f7;
/// Keep partials below this to avoid aliasing at 11025 Hz.
const MAX_PARTIAL_HZ: f64 = 5300.0;

// ── Instruments ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Instrument {
    pub id: usize,
    pub name: &'static str,
    pub midi_range: (u8, u8),
    /// Harmonic h gets amplitude h^-rolloff (before the other shapers).
    pub rolloff: f64,
    /// Multiplier on even harmonics (clarinet-like timbres suppress them).
    pub even_gain: f64,
    /// Optional resonance bump: (center_hz, width_hz).
    pub formant: Option<(f64, f64)>,
    pub attack_s: f64,
    pub release_s: f64,
    /// Exponential decay time constant; 0 means sustained.
    pub decay_s: f64,
    pub vibrato_hz: f64,
    pub vibrato_semitones: f64,
    pub noise_level: f64,
    pub notes_range: (usize, usize),
}

/// The full bank. The desk corpus uses the first 8 classes; class 8 serves
/// as the held-out class in prompt fine-tuning experiments.
pub fn instrument_bank() -> Vec<Instrument> {
    let i = |id,
             name,
             midi_range,
             rolloff,
             even_gain,
             formant,
             attack_s,
             release_s,
             decay_s,
             vibrato_hz,
             vibrato_semitones,
             noise_level,
             notes_range| Instrument {
        id,
        name,
        midi_range,
        rolloff,
        even_gain,
        formant,
        attack_s,
        release_s,
        decay_s,
        vibrato_hz,
        vibrato_semitones,
        noise_level,
        notes_range,
    };
    vec![
        i(0, "organ", (40, 70), 0.9, 1.0, None, 0.04, 0.08, 0.0, 0.0, 0.0, 0.0, (2, 4)),
        i(1, "flute", (72, 90), 2.5, 1.0, None, 0.06, 0.08, 0.0, 5.0, 0.3, 0.010, (3, 6)),
        i(2, "trumpet", (58, 79), 0.6, 1.0, None, 0.02, 0.05, 0.0, 0.0, 0.0, 0.002, (3, 6)),
        i(3, "clarinet", (50, 74), 1.2, 0.15, None, 0.05, 0.06, 0.0, 0.0, 0.0, 0.003, (3, 6)),
        i(4, "cello", (36, 60), 1.0, 1.0, None, 0.10, 0.12, 0.0, 4.5, 0.2, 0.004, (2, 5)),
        i(5, "glockenspiel", (84, 103), 1.8, 1.0, None, 0.002, 0.0, 0.40, 0.0, 0.0, 0.0, (5, 9)),
        i(6, "bass", (28, 47), 2.2, 1.0, None, 0.004, 0.0, 0.80, 0.0, 0.0, 0.0, (3, 6)),
        i(7, "oboe", (58, 81), 0.8, 1.0, Some((1100.0, 450.0)), 0.04, 0.06, 0.0, 5.5, 0.15, 0.003, (3, 6)),
        i(8, "marimba", (48, 72), 3.0, 1.0, None, 0.002, 0.0, 0.25, 0.0, 0.0, 0.0, (5, 9)),
        i(9, "synthlead", (45, 69), 1.0, 1.0, None, 0.01, 0.04, 0.0, 6.0, 0.1, 0.0, (3, 6)),
    ]
}

// ── Clip rendering ──────────────────────────────────────────────────────────

/// Renders one deterministic clip: a handful of notes from the instrument's
/// register, additively synthesized and peak-normalized to 0.5.
pub fn render_clip(class_id: usize, seed: u64) -> Vec<f32> {
    let bank = instrument_bank();
    let inst = &bank[class_id];
    let mut rng = rng_for(seed, "synth/notes");
    let sr = SAMPLE_RATE as f64;
    let clip_s = CLIP_LEN as f64 / sr;

    let (nlo, nhi) = inst.notes_range;
    let n_notes = rng.gen_range(nlo..=nhi);
    let mut bounds = Vec::with_capacity(n_notes + 1);
    for k in 0..=n_notes {
        let jitter = if k == 0 || k == n_notes { 0.0 } else { uniform(&mut rng, -0.2, 0.2) };
        bounds.push((k as f64 + jitter) / n_notes as f64 * clip_s);
    }

    let mut out = vec![0.0f64; CLIP_LEN];
    for k in 0..n_notes {
        let dur = (bounds[k + 1] - bounds[k]) * uniform(&mut rng, 0.75, 0.95);
        let onset = (bounds[k] * sr) as usize;
        let midi = rng.gen_range(inst.midi_range.0..=inst.midi_range.1) as f64;
        let f0 = 440.0 * ((midi - 69.0) / 12.0).exp2();
        let velocity = uniform(&mut rng, 0.4, 0.9);
        let vib_phase = uniform(&mut rng, 0.0, 1.0);

        let n_harm = ((MAX_PARTIAL_HZ / f0).floor() as usize).max(1);
        let mut amps = Vec::with_capacity(n_harm);
        let mut phases = Vec::with_capacity(n_harm);
        let mut total = 0.0;
        for h in 1..=n_harm {
            let mut a = (h as f64).powf(-inst.rolloff);
            if h % 2 == 0 {
                a *= inst.even_gain;
            }
            if let Some((center, width)) = inst.formant {
                let d = (f0 * h as f64 - center) / width;
                a *= 1.0 + 2.0 * (-d * d).exp();
            }
            total += a;
            amps.push(a);
            phases.push(uniform(&mut rng, 0.0, std::f64::consts::TAU));
        }
        for a in &mut amps {
            *a /= total;
        }

        let note_len = ((dur * sr) as usize).min(CLIP_LEN - onset);
        let mut phase = 0.0f64;
        for n in 0..note_len {
            let t = n as f64 / sr;
            let mut env = (t / inst.attack_s).min(1.0);
            if inst.decay_s > 0.0 {
                env *= (-t / inst.decay_s).exp();
            } else {
                env *= ((dur - t) / inst.release_s).clamp(0.0, 1.0);
            }
            let vib = if inst.vibrato_hz > 0.0 {
                let arg = std::f64::consts::TAU * (inst.vibrato_hz * t + vib_phase);
                (inst.vibrato_semitones / 12.0 * arg.sin()).exp2()
            } else {
                1.0
            };
            phase += std::f64::consts::TAU * f0 * vib / sr;
            let mut s = 0.0;
            for (h, (&a, &p0)) in amps.iter().zip(&phases).enumerate() {
                s += a * ((h + 1) as f64 * phase + p0).sin();
            }
            if inst.noise_level > 0.0 {
                s += inst.noise_level * normal(&mut rng);
            }
            out[onset + n] += velocity * env * s;
        }
    }

    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    out.iter().map(|&v| (v * scale) as f32).collect()
}

// ── Feature tracks ──────────────────────────────────────────────────────────

/// Activity track `[MOTION_STEPS x ACT_DIMS]`: band energies of the warped
/// spectrogram pooled to a coarse grid, log-compressed, peak-normalized.
pub fn activity_track(plan: &StftPlan, clip: &[f32]) -> Vec<f32> {
    let mag = plan.stft(clip).magnitude();
    let warped = dsp::warp_log_freq(&mag, FRAMES);
    let band = LOG_BINS / ACT_DIMS;
    let slice = FRAMES / MOTION_STEPS;
    let mut act = vec![0.0f32; MOTION_STEPS * ACT_DIMS];
    for b in 0..ACT_DIMS {
        for s in 0..MOTION_STEPS {
            let mut e = 0.0f32;
            for bb in b * band..(b + 1) * band {
                for tt in s * slice..(s + 1) * slice {
                    e += warped[bb * FRAMES + tt];
                }
            }
            act[s * ACT_DIMS + b] = (e / (band * slice) as f32 * 10.0).ln_1p();
        }
    }
    let peak = act.iter().fold(0.0f32, |m, &v| m.max(v));
    if peak > 0.0 {
        for v in &mut act {
            *v /= peak;
        }
    }
    act
}

/// Frozen 16 -> 256 linear lift shared by every corpus.
fn motion_lift() -> Vec<f32> {
    let mut rng = rng_for(BANK_SEED, "synth/motion_lift");
    (0..ACT_DIMS * FEAT_DIM)
        .map(|_| (normal(&mut rng) / (ACT_DIMS as f64).sqrt()) as f32)
        .collect()
}

/// Motion tokens `[MOTION_STEPS x FEAT_DIM]` from an activity track.
pub fn motion_features(activity: &[f32]) -> Vec<f32> {
    assert_eq!(activity.len(), MOTION_STEPS * ACT_DIMS);
    let lift = motion_lift();
    let mut out = vec![0.0f32; MOTION_STEPS * FEAT_DIM];
    crate::autodiff::matmul_into(activity, &lift, &mut out, MOTION_STEPS, ACT_DIMS, FEAT_DIM);
    out
}

/// The fixed unit vector identifying a class.
pub fn class_vector(class_id: usize) -> Vec<f32> {
    let mut rng = rng_for(BANK_SEED, &format!("synth/object_class/{class_id}"));
    let mut v: Vec<f32> = (0..FEAT_DIM).map(|_| normal(&mut rng) as f32).collect();
    let norm = v.iter().map(|&x| x * x).sum::<f32>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Per-clip object feature: the class vector plus a Gaussian jitter of
/// expected norm 0.1, renormalized to unit length.
pub fn object_feature(class_id: usize, clip_seed: u64) -> Vec<f32> {
    let mut v = class_vector(class_id);
    let mut rng = rng_for(clip_seed, "synth/object_jitter");
    let sigma = 0.1 / (FEAT_DIM as f32).sqrt();
    for x in &mut v {
        *x += sigma * normal(&mut rng) as f32;
    }
    let norm = v.iter().map(|&x| x * x).sum::<f32>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

// ── Corpus ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub classes: usize,
    pub clips_per_class: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { classes: 8, clips_per_class: 50, seed: 7, train_frac: 0.8, val_frac: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct ClipEntry {
    pub clip_id: String,
    pub split: Split,
    pub class_id: usize,
    pub class_name: String,
    pub seed: u64,
    pub rel_path: String,
}

pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<ClipEntry>,
}

const MANIFEST_HEADER: [&str; 6] = ["clip_id", "split", "class_id", "class_name", "seed", "path"];

/// Renders every clip and writes `<root>/<split>/<class_id>/<clip_id>.wav`
/// plus a `.meta` sidecar and a `manifest.tsv` at the root.
pub fn generate_corpus(cfg: &CorpusConfig, root: &Path) -> Result<Corpus> {
    let bank = instrument_bank();
    if cfg.classes == 0 || cfg.classes > bank.len() {
        return Err(Error::Config(format!(
            "classes must be 1..={}, got {}",
            bank.len(),
            cfg.classes
        )));
    }
    let train_n = (cfg.train_frac * cfg.clips_per_class as f64).floor() as usize;
    let val_n = (cfg.val_frac * cfg.clips_per_class as f64).floor() as usize;
    let mut entries = Vec::new();
    for class_id in 0..cfg.classes {
        for idx in 0..cfg.clips_per_class {
            let split = if idx < train_n {
                Split::Train
            } else if idx < train_n + val_n {
                Split::Val
            } else {
                Split::Test
            };
            let clip_id = format!("{class_id:02}_{idx:03}");
            let seed = cfg.seed ^ fnv1a(format!("corpus/{class_id:02}/{idx:03}").as_bytes());
            let rel_path = format!("{}/{}/{}.wav", split.as_str(), class_id, clip_id);
            entries.push(ClipEntry {
                clip_id,
                split,
                class_id,
                class_name: bank[class_id].name.to_string(),
                seed,
                rel_path,
            });
        }
    }

    for e in &entries {
        let wav_path = root.join(&e.rel_path);
        let dir = wav_path.parent().unwrap();
        std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        let wave = render_clip(e.class_id, e.seed);
        let peak = wave.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        io::write_wav(&wav_path, &wave, SAMPLE_RATE)?;
        io::write_kv(
            &wav_path.with_extension("meta"),
            &[
                ("clip_id", e.clip_id.clone()),
                ("class_id", e.class_id.to_string()),
                ("class_name", e.class_name.clone()),
                ("seed", e.seed.to_string()),
                ("sample_rate", SAMPLE_RATE.to_string()),
                ("samples", CLIP_LEN.to_string()),
                ("peak", format!("{peak:.6}")),
            ],
        )?;
    }

    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                e.clip_id.clone(),
                e.split.as_str().to_string(),
                e.class_id.to_string(),
                e.class_name.clone(),
                e.seed.to_string(),
                e.rel_path.clone(),
            ]
        })
        .collect();
    io::write_tsv(&root.join("manifest.tsv"), &MANIFEST_HEADER, &rows)?;
    Ok(Corpus { root: root.to_path_buf(), entries })
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Corpus> {
        let manifest = root.join("manifest.tsv");
        let rows = io::read_tsv(&manifest, &MANIFEST_HEADER)?;
        let mut entries = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: manifest.clone(),
                line: i + 2,
                msg,
            };
            entries.push(ClipEntry {
                clip_id: row[0].clone(),
                split: Split::parse(&row[1])
                    .ok_or_else(|| parse_err(format!("bad split {:?}", row[1])))?,
                class_id: row[2]
                    .parse()
                    .map_err(|_| parse_err(format!("bad class_id {:?}", row[2])))?,
                class_name: row[3].clone(),
                seed: row[4].parse().map_err(|_| parse_err(format!("bad seed {:?}", row[4])))?,
                rel_path: row[5].clone(),
            });
        }
        Ok(Corpus { root: root.to_path_buf(), entries })
    }

    pub fn clips(&self, split: Split) -> Vec<&ClipEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn classes(&self) -> usize {
        self.entries.iter().map(|e| e.class_id).max().map_or(0, |m| m + 1)
    }

    pub fn load_wave(&self, entry: &ClipEntry) -> Result<Vec<f32>> {
        let (wave, sr) = io::read_wav(&self.root.join(&entry.rel_path))?;
        if sr != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "{}: sample rate {sr}, expected {SAMPLE_RATE}",
                entry.rel_path
            )));
        }
        Ok(wave)
    }
}
