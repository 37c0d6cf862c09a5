//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json                               (optional)
//! <root>/<class>/<subject>/<clip>/frame_00000.pgm    (8-bit PGM or PPM frames)
//! <root>/<class>/<subject>/<clip>.sthar              (raw clip)
//! ```
//!
//! Raw clip: the bytes `STHAR1`, then little-endian `u32` T, C, H, W, then
//! `T·C·H·W` sample bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ClipRecord, ClipSource, DatasetManifest, ManifestJson, DEFAULT_FPS};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 6] = b"STHAR1";
pub const RAW_EXT: &str = "sthar";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipFormat {
    Raw,
    Pgm,
}

/// Parses a binary PGM (`P5`) or PPM (`P6`, converted to luminance) image
/// with maxval 255. Returns `(height, width, gray bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::ingest(path, msg);
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} (only 255 supported)")));
    }
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(bad("truncated sample data"));
    }
    let px = &bytes[pos..pos + n];
    let gray = if channels == 1 {
        px.to_vec()
    } else {
        px.chunks(3)
            .map(|c| {
                let y = 0.299 * f64::from(c[0]) + 0.587 * f64::from(c[1]) + 0.114 * f64::from(c[2]);
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    };
    Ok((h, w, gray))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, gray: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    write_atomic(path, &out)
}

/// Reads a raw clip, returning `([C, H, W], frames)`.
pub fn read_raw_clip(path: &Path) -> Result<([usize; 3], Vec<Vec<u8>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 22 || &bytes[..6] != RAW_MAGIC {
        return Err(Error::ingest(path, "missing STHAR1 magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (t, c, h, w) = (word(0), word(1), word(2), word(3));
    let frame = c * h * w;
    if t == 0 || frame == 0 {
        return Err(Error::ingest(path, "clip has a zero extent"));
    }
    if bytes.len() != 22 + t * frame {
        return Err(Error::ingest(path, format!("expected {} sample bytes, found {}", t * frame, bytes.len() - 22)));
    }
    let frames = bytes[22..].chunks(frame).map(<[u8]>::to_vec).collect();
    Ok(([c, h, w], frames))
}

pub fn write_raw_clip(path: &Path, shape: [usize; 3], frames: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(22 + frames.len() * shape.iter().product::<usize>());
    out.extend_from_slice(RAW_MAGIC);
    for v in [frames.len(), shape[0], shape[1], shape[2]] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in frames {
        out.extend_from_slice(f);
    }
    write_atomic(path, &out)
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Sorted (byte-wise) visible entries of a directory.
fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().into_string().map_err(|_| Error::ingest(entry.path(), "non UTF-8 name"))?;
        if name.starts_with('.') {
            continue;
        }
        out.push((name, entry.path()));
    }
    out.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    Ok(out)
}

fn read_frame_dir(dir: &Path) -> Result<([usize; 3], Vec<Vec<u8>>)> {
    let mut indexed = Vec::new();
    for (name, path) in sorted_entries(dir)? {
        let idx = name
            .strip_prefix("frame_")
            .and_then(|r| r.strip_suffix(".pgm").or_else(|| r.strip_suffix(".ppm")))
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::ingest(&path, "expected frame_%05d.pgm"))?;
        indexed.push((idx, path));
    }
    indexed.sort();
    let Some(first) = indexed.first().map(|(i, _)| *i) else {
        return Err(Error::ingest(dir, "clip directory has no frames"));
    };
    if first > 1 {
        return Err(Error::ingest(dir, format!("frames start at index {first}")));
    }
    let mut shape = None;
    let mut frames = Vec::with_capacity(indexed.len());
    for (k, (idx, path)) in indexed.iter().enumerate() {
        if *idx != first + k {
            return Err(Error::ingest(dir, format!("missing frame {:05}", first + k)));
        }
        let (h, w, px) = read_pgm(path)?;
        match shape {
            None => shape = Some([1, h, w]),
            Some(s) if s != [1, h, w] => {
                return Err(Error::ingest(path, format!("frame is {h}×{w}, clip started at {}×{}", s[1], s[2])))
            }
            _ => {}
        }
        frames.push(px);
    }
    Ok((shape.unwrap(), frames))
}

/// Loads every clip under `root` in byte-wise lexicographic path order.
/// Labels index the sorted class directory names.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::ingest(root, "dataset root is not a directory"));
    }
    let mut known: Option<Vec<String>> = None;
    let mut fps = DEFAULT_FPS;
    let manifest_path = root.join(MANIFEST_NAME);
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mj: ManifestJson = serde_json::from_str(&text).map_err(|e| Error::ingest(&manifest_path, e.to_string()))?;
        known = Some(mj.classes);
        fps = mj.fps;
    }

    let class_dirs: Vec<(String, PathBuf)> = sorted_entries(root)?.into_iter().filter(|(_, p)| p.is_dir()).collect();
    if let Some(k) = &known {
        if let Some((_, p)) = class_dirs.iter().find(|(n, _)| !k.contains(n)) {
            return Err(Error::ingest(p, "class directory not listed in manifest.json"));
        }
    }
    let classes: Vec<String> = class_dirs.iter().map(|(n, _)| n.clone()).collect();

    let mut records = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    for (label, (class_name, class_path)) in class_dirs.iter().enumerate() {
        for (subject, subject_path) in sorted_entries(class_path)? {
            if !subject_path.is_dir() {
                return Err(Error::ingest(&subject_path, "expected a subject directory"));
            }
            for (entry, path) in sorted_entries(&subject_path)? {
                let (clip_id, (s, frames)) = if path.is_dir() {
                    (entry.clone(), read_frame_dir(&path)?)
                } else if let Some(stem) = entry.strip_suffix(&format!(".{RAW_EXT}")) {
                    (stem.to_string(), read_raw_clip(&path)?)
                } else {
                    return Err(Error::ingest(&path, "neither a frame directory nor a .sthar clip"));
                };
                match shape {
                    None => shape = Some(s),
                    Some(prev) if prev != s => {
                        return Err(Error::ingest(&path, format!("clip frames are {s:?}, dataset frames are {prev:?}")))
                    }
                    _ => {}
                }
                records.push(ClipRecord {
                    frames,
                    shape: s,
                    label,
                    class_name: class_name.clone(),
                    subject: subject.clone(),
                    clip_id,
                    source: ClipSource::Path(path),
                });
            }
        }
    }
    Ok(DatasetManifest { classes, records, shape, fps })
}

/// Writes the dataset tree plus `manifest.json` under `root`.
pub fn write_dataset(manifest: &DatasetManifest, root: &Path, format: ClipFormat) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for class in &manifest.classes {
        let p = root.join(class);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for r in &manifest.records {
        let dir = root.join(&r.class_name).join(&r.subject);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match format {
            ClipFormat::Raw => write_raw_clip(&dir.join(format!("{}.{RAW_EXT}", r.clip_id)), r.shape, &r.frames)?,
            ClipFormat::Pgm => {
                if r.shape[0] != 1 {
                    return Err(Error::Format("PGM output needs single-channel frames".into()));
                }
                let clip_dir = dir.join(&r.clip_id);
                fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
                for (i, f) in r.frames.iter().enumerate() {
                    write_pgm(&clip_dir.join(format!("frame_{i:05}.pgm")), r.shape[1], r.shape[2], f)?;
                }
            }
        }
    }
    let mut json = serde_json::to_vec_pretty(&manifest.to_json())?;
    json.push(b'\n');
    write_atomic(&root.join(MANIFEST_NAME), &json)
}
