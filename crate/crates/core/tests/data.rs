use std::fs;

use sthar::data::*;
use sthar::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { clips_per_class: 4, subjects: 2, clip_length: 24, ..Default::default() }
}

#[test]
fn empty_root_has_no_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_dataset(dir.path()).unwrap();
    assert!(m.records.is_empty() && m.classes.is_empty());
}

#[test]
fn missing_root_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(&dir.path().join("nope")), Err(Error::Ingestion { .. })));
}

#[test]
fn two_classes_are_labelled_by_sorted_name() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["zeta", "alpha"] {
        let clip = dir.path().join(class).join("person01").join("clip0");
        fs::create_dir_all(&clip).unwrap();
        for i in 0..3 {
            write_pgm(&clip.join(format!("frame_{i:05}.pgm")), 8, 8, &[i as u8 * 10; 64]).unwrap();
        }
    }
    let m = load_dataset(dir.path()).unwrap();
    assert_eq!(m.classes, ["alpha", "zeta"]);
    assert_eq!(m.records.len(), 2);
    assert_eq!((m.records[0].label, m.records[1].label), (0, 1));
    assert_eq!(m.records[0].len(), 3);
    assert_eq!(m.shape, Some([1, 8, 8]));
}

#[test]
fn ingestion_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("walk").join("p1").join("c1");
    fs::create_dir_all(&clip).unwrap();
    write_pgm(&clip.join("frame_00000.pgm"), 8, 8, &[0; 64]).unwrap();
    write_pgm(&clip.join("frame_00002.pgm"), 8, 8, &[0; 64]).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Ingestion { path, msg }) => {
            assert!(path.ends_with("c1"), "{path:?}");
            assert!(msg.contains("missing frame"), "{msg}");
        }
        other => panic!("expected ingestion error, got {other:?}"),
    }

    fs::remove_file(clip.join("frame_00002.pgm")).unwrap();
    write_pgm(&clip.join("frame_00001.pgm"), 8, 16, &[0; 128]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Ingestion { .. })));

    fs::remove_file(clip.join("frame_00001.pgm")).unwrap();
    fs::write(dir.path().join(MANIFEST_NAME), r#"{"classes":["run"],"records":[],"shape":null,"fps":25.0}"#).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("walk")),
        other => panic!("expected unknown class error, got {other:?}"),
    }
}

#[test]
fn synthetic_dump_round_trips() {
    let m = synth_generate(&small_spec()).unwrap();
    for format in [ClipFormat::Raw, ClipFormat::Pgm] {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&m, dir.path(), format).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.same_content(&m), "{format:?}");
        assert_eq!(back.to_json(), m.to_json());
    }
}

#[test]
fn generation_is_deterministic() {
    let a = synth_generate(&small_spec()).unwrap();
    let b = synth_generate(&small_spec()).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
    assert!(!a.same_content(&c));
}

/// Intensity-weighted centroid (y, x) of a single-channel frame.
fn centroid(frame: &[u8], w: usize) -> (f64, f64) {
    let (mut sy, mut sx, mut total) = (0.0, 0.0, 0.0);
    for (i, &v) in frame.iter().enumerate() {
        if v > 127 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            total += 1.0;
        }
    }
    (sy / total, sx / total)
}

fn mean_step(frames: &[Vec<u8>], w: usize) -> f64 {
    let c: Vec<(f64, f64)> = frames.iter().map(|f| centroid(f, w)).collect();
    c.windows(2).map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt()).sum::<f64>()
        / (c.len() - 1) as f64
}

#[test]
fn fast_clips_outpace_slow_clips() {
    let spec = SyntheticSpec { clips_per_class: 25, subjects: 5, ..Default::default() };
    let m = synth_generate(&spec).unwrap();
    let w = spec.frame_shape[2];
    let speeds = |class: &str| -> Vec<f64> {
        m.records.iter().filter(|r| r.class_name == class).map(|r| mean_step(&r.frames, w)).collect()
    };
    let fast = speeds("translate_fast");
    let slow = speeds("translate_slow");
    let slowest_fast = fast.iter().cloned().fold(f64::INFINITY, f64::min);
    let fastest_slow = slow.iter().cloned().fold(0.0, f64::max);
    assert!(slowest_fast > fastest_slow, "fast {slowest_fast} vs slow {fastest_slow}");
}

#[test]
fn noiseless_pulse_is_periodic() {
    let spec = SyntheticSpec { noise: 0.0, ..small_spec() };
    let m = synth_generate(&spec).unwrap();
    for r in m.records.iter().filter(|r| r.class_name == "pulse_scale") {
        for t in 0..r.len() - PULSE_PERIOD {
            assert_eq!(r.frames[t], r.frames[t + PULSE_PERIOD]);
        }
        assert_ne!(r.frames[0], r.frames[PULSE_PERIOD / 2]);
    }
}

#[test]
fn normalized_pixels_lie_in_unit_interval() {
    let m = synth_generate(&SyntheticSpec { noise: 0.3, ..small_spec() }).unwrap();
    for r in &m.records {
        for f in r.frames_range::<f64>(0, r.len()).unwrap() {
            assert!(f.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn center_window_is_idempotent() {
    let m = synth_generate(&small_spec()).unwrap();
    let r = &m.records[0];
    let once = sample_window(&r.frames, 12, WindowMode::Center).unwrap();
    let twice = sample_window(&once, 12, WindowMode::Center).unwrap();
    assert_eq!(once, twice);
    assert_eq!(once, r.frames[6..18].to_vec());
}

#[test]
fn short_clip_window_is_a_contract_error() {
    let frames = vec![0u8; 5];
    assert!(matches!(sample_window(&frames, 6, WindowMode::Center), Err(Error::Contract(_))));
}
