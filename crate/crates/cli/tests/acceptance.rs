//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit if any fails. Runs serially so the timings are single-threaded.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};
use sthar::data::{split_by_subject, synth_generate, SyntheticSpec, WindowMode};
use sthar::graph::softmax_rows;
use sthar::models::{ClassDistribution, ModelConfig, ModelKind};
use sthar::training::{cross_entropy, train, Checkpoint, TrainConfig};
use sthar::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_sthar");

/// Epochs for the toy benchmark run.
const BENCH_EPOCHS: usize = 15;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn sthar(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("STHAR_THREADS", "1").output().expect("run sthar binary")
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn failure(what: &str, out: &Output) -> Verdict {
    verdict(false, format!("{what} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
}

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let out = sthar(&["gradcheck", "--level", "all"]);
    let secs = started.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary: Vec<String> = stdout
        .lines()
        .filter(|l| l.contains("max relative error"))
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    let ok = out.status.success() && secs < 120.0;
    let mut detail = format!("{} in {secs:.1}s (limit 120s)", summary.join("; "));
    if !out.status.success() {
        detail.push_str(&format!("; failing: {}", String::from_utf8_lossy(&out.stderr).trim().replace('\n', " ")));
    }
    verdict(ok, detail)
}

fn cell_oracles() -> Verdict {
    let lstm = oracles::lstm_deviation(1000);
    let gru = oracles::gru_deviation(1000);
    verdict(
        lstm <= 1e-10 && gru <= 1e-10,
        format!("1000 steps: LSTM max dev {lstm:.2e}, GRU max dev {gru:.2e} (tol 1e-10)"),
    )
}

fn attention_invariants() -> Verdict {
    let rows = oracles::attention_row_sum_deviation(500, 0);
    let ident = oracles::identity_head_deviation(500, 1);
    let perm = oracles::permutation_deviation(200, 2);
    verdict(
        rows <= 1e-12 && ident <= 1e-12 && perm <= 1e-12,
        format!("row-sum dev {rows:.2e}, H=1 identity dev {ident:.2e}, permutation dev {perm:.2e} (tol 1e-12)"),
    )
}

fn architecture_contrast() -> Verdict {
    let (clip, swapped) = oracles::swapped_probe(3);
    let hybrid_changed =
        oracles::logit_bits(ModelKind::Hybrid, &clip) != oracles::logit_bits(ModelKind::Hybrid, &swapped);
    let cnn_same =
        oracles::logit_bits(ModelKind::CnnBaseline, &clip) == oracles::logit_bits(ModelKind::CnnBaseline, &swapped);
    verdict(
        hybrid_changed && cnn_same,
        format!("first/last frames swapped: hybrid logits changed = {hybrid_changed}, cnn_baseline bit-identical = {cnn_same}"),
    )
}

fn overfit(dir: &Path) -> Verdict {
    let spec =
        json!({"clips_per_class": 2, "frame_shape": [1, 16, 16], "clip_length": 12, "subjects": 2, "max_context": 8});
    let data = dir.join("overfit-data");
    write_json(&dir.join("overfit-spec.json"), &spec);
    let out =
        sthar(&["synth", "--spec", dir.join("overfit-spec.json").to_str().unwrap(), "--out", data.to_str().unwrap()]);
    if !out.status.success() {
        return failure("synth", &out);
    }
    let config = json!({
        "data": {"root": data, "split": [1.0, 0.0, 0.0]},
        "model": {"kind": "hybrid", "context": 8, "allowed_contexts": [8], "frame_shape": [1, 16, 16],
                  "d_model": 16, "heads": 2, "depth": 1, "d_ff": 32, "feature_len": 16, "seed": 0},
        "train": {"epochs": 1000, "max_steps": 500, "batch_size": 12, "lr": 0.003, "seed": 0},
    });
    write_json(&dir.join("overfit.json"), &config);
    let run = dir.join("overfit-run");
    let started = Instant::now();
    let out = sthar(&["train", "--config", dir.join("overfit.json").to_str().unwrap(), "--out", run.to_str().unwrap()]);
    let secs = started.elapsed().as_secs_f64();
    if !out.status.success() {
        return failure("train", &out);
    }
    let steps = read_json(&run.join("metrics.json"))["step_losses"].as_array().map_or(0, Vec::len);
    let out = sthar(&[
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "train",
    ]);
    if !out.status.success() {
        return failure("eval", &out);
    }
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = m["accuracy"].as_f64().unwrap_or(0.0);
    verdict(
        acc == 1.0 && steps <= 500 && secs < 60.0,
        format!("12 clips, {steps} steps: train accuracy {acc:.4} in {secs:.1}s (limit 60s)"),
    )
}

fn toy_benchmark(dir: &Path) -> Verdict {
    let run = dir.join("bench");
    let epochs = format!("train.epochs={BENCH_EPOCHS}");
    let started = Instant::now();
    let out = sthar(&[
        "train",
        "--set",
        &epochs,
        "--model",
        "hybrid",
        "--context",
        "24",
        "--seed",
        "0",
        "--out",
        run.to_str().unwrap(),
    ]);
    let secs = started.elapsed().as_secs_f64();
    if !out.status.success() {
        return failure("train", &out);
    }
    let metrics = read_json(&run.join("metrics.json"));
    let acc = metrics["test"]["accuracy"].as_f64().unwrap_or(0.0);
    let total = metrics["test"]["total"].as_u64().unwrap_or(0);
    let best = metrics["best_epoch"].as_u64().map_or("-".into(), |e| e.to_string());

    // the grid check only needs every cell trained and tested, so it uses a short schedule
    let grid = dir.join("grid");
    let out = sthar(&[
        "compare",
        "--set",
        "train.max_steps=4",
        "--set",
        "train.epochs=1",
        "--contexts",
        "12,18,24",
        "--models",
        "hybrid,vit_only,cnn_baseline",
        "--out",
        grid.to_str().unwrap(),
    ]);
    let table = if out.status.success() { read_json(&grid.join("compare.json")) } else { Value::Null };
    let cells = table["accuracy"]
        .as_array()
        .map_or(0, |rows| rows.iter().filter_map(Value::as_array).flatten().filter(|v| v.is_number()).count());
    let shape =
        table["accuracy"].as_array().map(|r| (r.len(), r.first().and_then(Value::as_array).map_or(0, Vec::len)));
    let csv_rows = fs::read_to_string(grid.join("compare.csv")).map_or(0, |s| s.lines().count().saturating_sub(1));

    verdict(
        acc >= 0.9 && secs <= 900.0 && cells == 9 && shape == Some((3, 3)) && csv_rows == 9,
        format!(
            "hybrid@24, {BENCH_EPOCHS} epochs (best val epoch {best}): test accuracy {acc:.4} on {total} clips in {secs:.0}s (need >= 0.90, <= 900s); \
             compare grid {shape:?} with {cells}/9 cells populated, {csv_rows} CSV rows"
        ),
    )
}

fn determinism(dir: &Path) -> Verdict {
    let config = json!({
        "data": {"synth": {"clips_per_class": 4, "subjects": 4, "frame_shape": [1, 16, 16], "clip_length": 8, "max_context": 6},
                 "split": [0.5, 0.25, 0.25]},
        "model": {"context": 6, "allowed_contexts": [6], "frame_shape": [1, 16, 16], "d_model": 8, "heads": 2, "depth": 1,
                  "d_ff": 16, "feature_len": 8},
        "train": {"epochs": 3, "batch_size": 4},
    });
    let cfg_path = dir.join("det.json");
    write_json(&cfg_path, &config);
    let mut metrics = Vec::new();
    for run in ["det-a", "det-b"] {
        let out = sthar(&["train", "--config", cfg_path.to_str().unwrap(), "--out", dir.join(run).to_str().unwrap()]);
        if !out.status.success() {
            return failure("train", &out);
        }
        metrics.push(fs::read(dir.join(run).join("metrics.json")).unwrap());
    }
    let same_metrics = metrics[0] == metrics[1];

    // in-memory checkpoint against its saved-and-reloaded copy
    let spec = SyntheticSpec {
        clips_per_class: 4,
        subjects: 4,
        frame_shape: [1, 16, 16],
        clip_length: 8,
        max_context: 6,
        ..Default::default()
    };
    let m = synth_generate(&spec).unwrap();
    let split = split_by_subject(&m, [0.5, 0.25, 0.25], 0).unwrap();
    let mc = ModelConfig {
        context: 6,
        allowed_contexts: vec![6],
        frame_shape: [1, 16, 16],
        d_model: 8,
        heads: 2,
        depth: 1,
        d_ff: 16,
        feature_len: 8,
        ..Default::default()
    };
    let (ck, _) = train(&mc, &m, &split, &TrainConfig { epochs: 2, batch_size: 4, ..Default::default() }).unwrap();
    let path = dir.join("probe.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let probe = m.records[m.records.len() - 1].window::<f32>(6, WindowMode::Center).unwrap();
    let bits = |c: &Checkpoint| -> Vec<u32> {
        c.to_model().unwrap().logits(&probe).unwrap().data().iter().map(|v| v.to_bits()).collect()
    };
    let same_logits = bits(&ck) == bits(&back);
    let same_bytes = back.to_bytes().unwrap() == fs::read(&path).unwrap();
    verdict(
        same_metrics && same_logits && same_bytes,
        format!("metrics JSON byte-identical = {same_metrics}; reloaded logits bit-identical = {same_logits}; re-save byte-identical = {same_bytes}"),
    )
}

fn closed_forms() -> Verdict {
    let p = softmax_rows(&Tensor::<f64>::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap()).unwrap();
    let (p0, p1) = (p.data()[0], p.data()[1]);
    let uniform = ClassDistribution::new(vec![1.0 / 6.0; 6]).unwrap();
    let ce = cross_entropy(&uniform, 2).unwrap();
    let (h, _) = oracles::zero_lstm_step();
    let ok = (p0 - 0.25).abs() <= 1e-10
        && (p1 - 0.75).abs() <= 1e-10
        && (ce - 6f64.ln()).abs() <= 1e-10
        && (h - 0.23106).abs() <= 1e-5;
    verdict(ok, format!("softmax([0, ln 3]) = [{p0:.12}, {p1:.12}]; uniform 6-class CE = {ce:.12} (ln 6 = {:.12}); zero LSTM h = {h:.8}", 6f64.ln()))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let checks: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("cell oracles", Box::new(cell_oracles)),
        ("attention invariants", Box::new(attention_invariants)),
        ("architecture contrast", Box::new(architecture_contrast)),
        ("overfit sanity", Box::new(|| overfit(dir.path()))),
        ("toy benchmark", Box::new(|| toy_benchmark(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
        ("closed-form values", Box::new(closed_forms)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let v = check();
        failed += usize::from(!v.pass);
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
