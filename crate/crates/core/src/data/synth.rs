//! Deterministic six-class moving-square dataset.
//!
//! A bright square on a dark background. Three classes translate
//! diagonally at different speeds and bounce off the borders; two oscillate
//! sinusoidally along one axis; one stays put and pulses in size with an
//! integer period. Each subject has its own square size and start offset.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, ClipSource, DatasetManifest, DEFAULT_FPS};
use crate::error::{config_err, Result};
use crate::rng;

/// Class names in label order (sorted, so on-disk ingestion agrees).
pub const SYNTH_CLASSES: [&str; 6] = [
    "oscillate_horizontal",
    "oscillate_vertical",
    "pulse_scale",
    "translate_fast",
    "translate_medium",
    "translate_slow",
];

/// Pixels per frame for the translate classes on a 32-pixel frame.
const SPEEDS: [f64; 3] = [0.5, 1.0, 2.0];
/// Frames per oscillation / pulse cycle.
pub const PULSE_PERIOD: usize = 8;
const OSC_PERIOD: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Translate { speed: f64 },
    OscillateHorizontal,
    OscillateVertical,
    Pulse,
}

impl Motion {
    pub fn for_class(name: &str) -> Option<Self> {
        Some(match name {
            "translate_slow" => Motion::Translate { speed: SPEEDS[0] },
            "translate_medium" => Motion::Translate { speed: SPEEDS[1] },
            "translate_fast" => Motion::Translate { speed: SPEEDS[2] },
            "oscillate_horizontal" => Motion::OscillateHorizontal,
            "oscillate_vertical" => Motion::OscillateVertical,
            "pulse_scale" => Motion::Pulse,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clips_per_class: usize,
    /// `[C, H, W]`
    pub frame_shape: [usize; 3],
    pub clip_length: usize,
    pub subjects: usize,
    /// Amplitude of uniform additive noise, in `[0, 1]` intensity units.
    pub noise: f64,
    pub seed: u64,
    /// Longest context the dataset must support.
    pub max_context: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips_per_class: 100,
            frame_shape: [1, 32, 32],
            clip_length: 32,
            subjects: 25,
            noise: 0.05,
            seed: 0,
            max_context: 24,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length < self.max_context {
            return Err(config_err!(
                "clip length {} is below the longest context length {}",
                self.clip_length,
                self.max_context
            ));
        }
        let [c, h, w] = self.frame_shape;
        if !(c == 1 || c == 3) || h < 16 || w < 16 {
            return Err(config_err!("frame shape {:?}: need C in {{1,3}} and H, W >= 16", self.frame_shape));
        }
        if self.clips_per_class == 0 || self.subjects == 0 || self.clip_length == 0 {
            return Err(config_err!("clips_per_class, subjects and clip_length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(config_err!("noise level {} outside [0, 1]", self.noise));
        }
        Ok(())
    }
}

/// Per-subject appearance.
struct Subject {
    size: f64,
    offset: (f64, f64),
}

fn subject_style(seed: u64, subject: usize, h: usize, w: usize) -> Subject {
    let mut r = rng::derived(seed, &format!("subject-{subject}"));
    let base = (h.min(w) as f64 / 5.0).round();
    Subject { size: base + f64::from(r.gen_range(-1i32..=1)), offset: (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)) }
}

/// Reflects `x` into `[0, span]`.
fn bounce(x: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = x.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

fn draw(frame: &mut [f64], h: usize, w: usize, top: f64, left: f64, size: usize) {
    let (y0, x0) = (top.round().max(0.0) as usize, left.round().max(0.0) as usize);
    for y in y0..(y0 + size).min(h) {
        for x in x0..(x0 + size).min(w) {
            frame[y * w + x] = 1.0;
        }
    }
}

fn render_clip(spec: &SyntheticSpec, motion: Motion, subject: &Subject, clip_seed: u64) -> Vec<Vec<u8>> {
    let [c, h, w] = spec.frame_shape;
    let (hf, wf) = (h as f64, w as f64);
    let scale = hf.min(wf) / 32.0;
    let mut r = rng::seeded(clip_seed);
    let size = subject.size.max(2.0);
    let (span_y, span_x) = (hf - size, wf - size);
    let start = (
        (r.gen_range(0.0..span_y) + subject.offset.0).clamp(0.0, span_y),
        (r.gen_range(0.0..span_x) + subject.offset.1).clamp(0.0, span_x),
    );
    let dir = (if r.gen_bool(0.5) { 1.0 } else { -1.0 }, if r.gen_bool(0.5) { 1.0 } else { -1.0 });
    let phase = r.gen_range(0.0..2.0 * PI);
    let amp_y = (span_y / 2.0 - 1.0).max(1.0);
    let amp_x = (span_x / 2.0 - 1.0).max(1.0);

    let mut noise_rng = rng::derived(clip_seed, "noise");
    (0..spec.clip_length)
        .map(|t| {
            let tf = t as f64;
            let mut plane = vec![0.0; h * w];
            match motion {
                Motion::Translate { speed } => {
                    let step = speed * scale / 2f64.sqrt();
                    let y = bounce(start.0 + dir.0 * step * tf, span_y);
                    let x = bounce(start.1 + dir.1 * step * tf, span_x);
                    draw(&mut plane, h, w, y, x, size as usize);
                }
                Motion::OscillateHorizontal => {
                    let x = span_x / 2.0 + amp_x * (2.0 * PI * tf / OSC_PERIOD + phase).sin();
                    draw(&mut plane, h, w, start.0, x, size as usize);
                }
                Motion::OscillateVertical => {
                    let y = span_y / 2.0 + amp_y * (2.0 * PI * tf / OSC_PERIOD + phase).sin();
                    draw(&mut plane, h, w, y, start.1, size as usize);
                }
                Motion::Pulse => {
                    // triangle wave over one integer period
                    let k = t % PULSE_PERIOD;
                    let tri = if k <= PULSE_PERIOD / 2 { k } else { PULSE_PERIOD - k };
                    let s = size as usize + tri;
                    let center = (hf / 2.0 + subject.offset.0, wf / 2.0 + subject.offset.1);
                    let half = s as f64 / 2.0;
                    draw(&mut plane, h, w, (center.0 - half).max(0.0), (center.1 - half).max(0.0), s);
                }
            }
            let mut bytes = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for &v in &plane {
                    let n = if spec.noise > 0.0 { noise_rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
                    bytes.push(((v + n).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            bytes
        })
        .collect()
}

/// Generates the full dataset. Records are ordered by class, subject, clip.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let [_, h, w] = spec.frame_shape;
    let subjects: Vec<Subject> = (0..spec.subjects).map(|s| subject_style(spec.seed, s, h, w)).collect();
    let mut records = Vec::with_capacity(SYNTH_CLASSES.len() * spec.clips_per_class);
    for (label, class) in SYNTH_CLASSES.iter().enumerate() {
        let motion = Motion::for_class(class).expect("known class");
        for s in 0..spec.subjects {
            // clips j with j % subjects == s belong to subject s
            for (k, j) in (s..spec.clips_per_class).step_by(spec.subjects).enumerate() {
                let clip_seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((label * 100_000 + j) as u64);
                records.push(ClipRecord {
                    frames: render_clip(spec, motion, &subjects[s], clip_seed),
                    shape: spec.frame_shape,
                    label,
                    class_name: class.to_string(),
                    subject: format!("subject{s:02}"),
                    clip_id: format!("clip{k:03}"),
                    source: ClipSource::Synth { seed: clip_seed },
                });
            }
        }
    }
    Ok(DatasetManifest {
        classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        records,
        shape: Some(spec.frame_shape),
        fps: DEFAULT_FPS,
    })
}
