//! Clip records, manifests, subject-disjoint splits and temporal windows.

mod io;
mod synth;

pub use io::{
    load_dataset, read_pgm, read_raw_clip, write_atomic, write_dataset, write_pgm, write_raw_clip, ClipFormat,
    MANIFEST_NAME, RAW_EXT, RAW_MAGIC,
};
pub use synth::{synth_generate, Motion, SyntheticSpec, PULSE_PERIOD, SYNTH_CLASSES};

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::vision::Frame;

/// Frames per second recorded in manifests unless the source says otherwise.
pub const DEFAULT_FPS: f64 = 25.0;

/// Where a clip came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClipSource {
    Path(PathBuf),
    Synth { seed: u64 },
}

/// One labelled clip of 8-bit frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    /// Each frame is `C·H·W` bytes, channel-major.
    pub frames: Vec<Vec<u8>>,
    /// `[C, H, W]`
    pub shape: [usize; 3],
    pub label: usize,
    pub class_name: String,
    pub subject: String,
    /// Clip name within its subject directory.
    pub clip_id: String,
    pub source: ClipSource,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Path relative to the dataset root, `<class>/<subject>/<clip>`.
    pub fn rel_path(&self) -> String {
        format!("{}/{}/{}", self.class_name, self.subject, self.clip_id)
    }

    /// Frames `start..start+n` normalized to `[0, 1]`.
    pub fn frames_range<S: Scalar>(&self, start: usize, n: usize) -> Result<Vec<Frame<S>>> {
        self.frames[start..start + n].iter().map(|f| Frame::from_u8(self.shape, f)).collect()
    }

    /// The window selected by `mode`, normalized.
    pub fn window<S: Scalar>(&self, n: usize, mode: WindowMode) -> Result<Vec<Frame<S>>> {
        let start = window_start(self.len(), n, mode)?;
        self.frames_range(start, n)
    }
}

/// Class list, records and shared frame metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<ClipRecord>,
    pub shape: Option<[usize; 3]>,
    pub fps: f64,
}

/// JSON view of a manifest record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub subject: String,
    pub frames: usize,
}

/// JSON view of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestJson {
    pub classes: Vec<String>,
    pub records: Vec<ManifestEntry>,
    pub shape: Option<[usize; 3]>,
    pub fps: f64,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<String> {
        self.records.iter().map(|r| r.subject.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn to_json(&self) -> ManifestJson {
        ManifestJson {
            classes: self.classes.clone(),
            records: self
                .records
                .iter()
                .map(|r| ManifestEntry {
                    path: r.rel_path(),
                    label: r.label,
                    subject: r.subject.clone(),
                    frames: r.len(),
                })
                .collect(),
            shape: self.shape,
            fps: self.fps,
        }
    }

    /// Equality of everything except where each clip came from.
    pub fn same_content(&self, other: &Self) -> bool {
        self.classes == other.classes
            && self.shape == other.shape
            && self.fps == other.fps
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.frames == b.frames
                    && a.shape == b.shape
                    && a.label == b.label
                    && a.class_name == b.class_name
                    && a.subject == b.subject
                    && a.clip_id == b.clip_id
            })
    }
}

/// How a context window is placed inside a longer clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// The `N` temporally central frames; used for every evaluation.
    Center,
    /// A contiguous window at a seeded random offset.
    Random(u64),
}

/// First frame index of the window of `n` frames in a clip of `len`.
pub fn window_start(len: usize, n: usize, mode: WindowMode) -> Result<usize> {
    if n == 0 || len < n {
        return Err(contract_err!("clip of {len} frames is shorter than the context length {n}"));
    }
    Ok(match mode {
        WindowMode::Center => (len - n) / 2,
        WindowMode::Random(seed) => rng::seeded(seed).gen_range(0..=len - n),
    })
}

/// Returns the `n` selected frames of `frames`.
pub fn sample_window<T: Clone>(frames: &[T], n: usize, mode: WindowMode) -> Result<Vec<T>> {
    let start = window_start(frames.len(), n, mode)?;
    Ok(frames[start..start + n].to_vec())
}

/// Subject ids assigned to each partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(crate::error::config_err!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

impl SplitSpec {
    pub fn subjects(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Every subject lands in exactly one partition.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train.iter().chain(&self.val).chain(&self.test).all(|s| seen.insert(s))
    }

    /// Indices (in manifest order) of the records in one partition.
    pub fn indices(&self, manifest: &DatasetManifest, which: SplitName) -> Vec<usize> {
        let set: BTreeSet<&String> = self.subjects(which).iter().collect();
        manifest.records.iter().enumerate().filter(|(_, r)| set.contains(&r.subject)).map(|(i, _)| i).collect()
    }
}

/// Shuffles subjects with `seed` and partitions them by `ratios`
/// (train, val, test). Counts are rounded; test takes the remainder.
pub fn split_by_subject(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract_err!("split ratios {ratios:?} must be non-negative and sum to 1"));
    }
    let mut subjects = manifest.subjects();
    let n = subjects.len();
    // a positive fraction gets at least one subject, a zero fraction none
    let count = |r: f64| if r > 0.0 { ((r * n as f64).round() as usize).max(1) } else { 0 };
    let n_train = count(ratios[0]);
    let n_val = if ratios[2] == 0.0 { n.saturating_sub(n_train) } else { count(ratios[1]) };
    let n_test = n as isize - (n_train + n_val) as isize;
    if n_train == 0 || n_test < 0 || (ratios[1] > 0.0) != (n_val > 0) || (ratios[2] > 0.0) != (n_test > 0) {
        return Err(contract_err!(
            "{n} subjects cannot be split {ratios:?} with at least one subject per non-empty split"
        ));
    }
    subjects.shuffle(&mut rng::derived(seed, "subject-split"));
    let mut test = subjects.split_off(n_train + n_val);
    let mut val = subjects.split_off(n_train);
    let mut train = subjects;
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitSpec { train, val, test })
}
