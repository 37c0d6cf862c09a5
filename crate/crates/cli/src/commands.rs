use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::json;
use sthar::data::{
    load_dataset, synth_generate, write_atomic, write_dataset, ClipFormat, DatasetManifest, SplitName, SplitSpec,
    SyntheticSpec,
};
use sthar::gradcheck::{run_suite, Level};
use sthar::models::ModelKind;
use sthar::training::{evaluate, train as run_training, Checkpoint};
use sthar::{Error, Result};

use crate::config::RunConfig;
use crate::{Format, GradLevel, OutArgs, Outcome, RunArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";
pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_JSON: &str = "compare.json";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn pretty(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Resolves the output directory and refuses to clobber a non-empty one
/// unless `--force` was given.
fn output_dir(args: &OutArgs, from_config: Option<&Path>) -> Result<PathBuf> {
    let out = args
        .out
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .ok_or_else(|| config_err("no output directory (pass --out or set `out` in the config)"))?;
    if let Ok(mut entries) = fs::read_dir(&out) {
        if entries.next().is_some() && !args.force {
            return Err(config_err(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    } else if out.exists() {
        return Err(config_err(format!("{} exists and is not a directory", out.display())));
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn synth(spec: Option<&Path>, format: Format, out: &OutArgs) -> Result<Outcome> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| config_err(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    spec.validate()?;
    let root = output_dir(out, None)?;
    let manifest = synth_generate(&spec)?;
    let format = match format {
        Format::Raw => ClipFormat::Raw,
        Format::Pgm => ClipFormat::Pgm,
    };

    // build next to the target, then swap it in whole
    let name = root.file_name().ok_or_else(|| config_err(format!("bad output path {}", root.display())))?;
    let parent = root.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(parent)?;
    let staging = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| io_err(&staging, e))?;
    }
    if let Err(e) = write_dataset(&manifest, &staging, format) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| io_err(&root, e))?;
    }
    fs::rename(&staging, &root).map_err(|e| io_err(&root, e))?;
    eprintln!("wrote {} clips in {} classes to {}", manifest.records.len(), manifest.classes.len(), root.display());
    Ok(Outcome::Ok)
}

fn load_run(run: &RunArgs) -> Result<RunConfig> {
    RunConfig::load(run.config.as_deref(), &run.sets)
}

pub fn train(run: &RunArgs, model: Option<&str>, context: Option<usize>, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg = load_run(run)?;
    if let Some(k) = model {
        cfg.model.kind = k.parse()?;
    }
    if let Some(c) = context {
        cfg.model.context = c;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let out = output_dir(&run.out, cfg.out.as_deref())?;
    cfg.out = Some(out.clone());
    cfg.validate()?;

    create_dir(&out)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    let (manifest, split) = cfg.load_data()?;
    let (checkpoint, metrics) = run_training(&cfg.model, &manifest, &split, &cfg.train)?;
    checkpoint.save(out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(METRICS_FILE), &pretty(&metrics)?)?;

    let mut summary =
        format!("{} at context {}: {} steps", cfg.model.kind, cfg.model.context, metrics.step_losses.len());
    if let Some(v) = metrics.best_val_accuracy {
        let _ = write!(summary, ", best val {v:.4}");
    }
    if let Some(t) = &metrics.test {
        let _ = write!(summary, ", test {:.4}", t.accuracy);
    }
    eprintln!("{summary}");
    Ok(Outcome::Ok)
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str) -> Result<Outcome> {
    let which: SplitName = split.parse()?;
    let ck = Checkpoint::load(checkpoint)?;
    let spec = ck.split.clone().ok_or_else(|| config_err("the checkpoint records no data split"))?;
    if spec.subjects(which).is_empty() {
        return Err(config_err(format!("the {split} split of this checkpoint is empty")));
    }
    let manifest = load_dataset(data)?;
    if spec.indices(&manifest, which).is_empty() {
        return Err(config_err(format!("no clips of the {split} split found under {}", data.display())));
    }
    let model = ck.to_model()?;
    let metrics = evaluate(&model, &manifest, &spec, which, ck.model.context)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(Outcome::Ok)
}

pub fn gradcheck(level: GradLevel, seed: u64) -> Result<Outcome> {
    let levels: &[(&str, Level)] = match level {
        GradLevel::Ops => &[("ops", Level::Ops)],
        GradLevel::Cells => &[("cells", Level::Cells)],
        GradLevel::Models => &[("models", Level::Models)],
        GradLevel::All => &[("ops", Level::Ops), ("cells", Level::Cells), ("models", Level::Models)],
    };
    let started = Instant::now();
    let mut failures = Vec::new();
    for &(name, lvl) in levels {
        let reports = run_suite(lvl, seed)?;
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        for r in &reports {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "{name:<6} {:<34} {:>10.3e} < {:.0e}  {verdict:<4} ({} entries)",
                r.name, r.max_rel_err, r.tolerance, r.checked
            );
            if !r.passed() {
                failures.push(format!("{name}/{}: {}", r.name, r.worst));
            }
        }
        println!("{name:<6} max relative error {worst:.3e} over {} checks", reports.len());
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    if failures.is_empty() {
        return Ok(Outcome::Ok);
    }
    eprintln!("failing checks:");
    for f in &failures {
        eprintln!("  {f}");
    }
    Ok(Outcome::Failed)
}

struct Cell {
    context: usize,
    kind: ModelKind,
    accuracy: Option<f64>,
    seconds: f64,
    error: Option<String>,
}

fn thread_cap() -> Result<usize> {
    match std::env::var("STHAR_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err(format!("STHAR_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run_cell(cfg: &RunConfig, manifest: &DatasetManifest, split: &SplitSpec) -> Cell {
    let started = Instant::now();
    let result = run_training(&cfg.model, manifest, split, &cfg.train)
        .and_then(|(_, m)| m.test.map(|t| t.accuracy).ok_or_else(|| config_err("the test split is empty")));
    let seconds = started.elapsed().as_secs_f64();
    let (accuracy, error) = match result {
        Ok(a) => (Some(a), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Cell { context: cfg.model.context, kind: cfg.model.kind, accuracy, seconds, error }
}

pub fn compare(run: &RunArgs, contexts: &[usize], models: &[String]) -> Result<Outcome> {
    let mut base = load_run(run)?;
    let kinds = models.iter().map(|m| m.parse::<ModelKind>()).collect::<Result<Vec<_>>>()?;
    if contexts.is_empty() || kinds.is_empty() {
        return Err(config_err("need at least one context and one model"));
    }
    let out = output_dir(&run.out, base.out.as_deref())?;
    base.out = Some(out.clone());
    base.validate()?;
    let mut grid = Vec::new();
    for &context in contexts {
        for &kind in &kinds {
            let mut c = base.clone();
            c.model.context = context;
            c.model.kind = kind;
            c.validate().map_err(|e| config_err(format!("{kind} at context {context}: {e}")))?;
            grid.push(c);
        }
    }
    let threads = if base.train.deterministic { 1 } else { thread_cap()?.min(grid.len()) };

    create_dir(&out)?;
    write_atomic(&out.join(CONFIG_FILE), base.to_json()?.as_bytes())?;
    let (manifest, split) = base.load_data()?;

    let cells: Vec<Cell> = if threads <= 1 {
        grid.iter()
            .map(|c| {
                let cell = run_cell(c, &manifest, &split);
                report(&cell);
                cell
            })
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let done = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(c) = grid.get(i) else { break };
                    let cell = run_cell(c, &manifest, &split);
                    report(&cell);
                    done.lock().unwrap().push((i, cell));
                });
            }
        });
        let mut done = done.into_inner().unwrap();
        done.sort_by_key(|(i, _)| *i);
        done.into_iter().map(|(_, c)| c).collect()
    };

    let mut csv = String::from("context,model,accuracy,seconds\n");
    for c in &cells {
        let acc = c.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{acc},{:.3}", c.context, c.kind, c.seconds);
    }
    let row = |ctx: usize, f: &dyn Fn(&Cell) -> serde_json::Value| -> Vec<serde_json::Value> {
        kinds.iter().map(|k| cells.iter().find(|c| c.context == ctx && c.kind == *k).map_or(json!(null), f)).collect()
    };
    let failures: Vec<_> = cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| json!({"context": c.context, "model": c.kind, "error": e})))
        .collect();
    let table = json!({
        "rows": "context",
        "columns": "model",
        "contexts": contexts,
        "models": kinds,
        "accuracy": contexts.iter().map(|&ctx| row(ctx, &|c| json!(c.accuracy))).collect::<Vec<_>>(),
        "seconds": contexts.iter().map(|&ctx| row(ctx, &|c| json!(c.seconds))).collect::<Vec<_>>(),
        "failures": failures,
    });
    write_atomic(&out.join(COMPARE_CSV), csv.as_bytes())?;
    write_atomic(&out.join(COMPARE_JSON), &pretty(&table)?)?;
    print!("{csv}");
    Ok(if failures.is_empty() { Outcome::Ok } else { Outcome::Failed })
}

fn report(c: &Cell) {
    match (&c.accuracy, &c.error) {
        (Some(a), _) => eprintln!("{} @ {}: test accuracy {a:.4} in {:.1}s", c.kind, c.context, c.seconds),
        (_, Some(e)) => eprintln!("{} @ {}: failed: {e}", c.kind, c.context),
        _ => {}
    }
}
