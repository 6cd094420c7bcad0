//! Subcommand implementations. Each returns the process exit status on
//! success paths; errors are mapped by [`exit_code`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use restore_core::checkpoint::{self, config_hash};
use restore_core::degrade::{make_eval_set, make_sample, parse_tasks, Task};
use restore_core::imageio::{write_manifest, write_ppm, ManifestRecord};
use restore_core::metrics::{purity_table, MetricReport};
use restore_core::model::{ModelConfig, Restorer};
use restore_core::train::{evaluate, train_loop, EvalResult, TrainingReport};
use restore_core::{Error, Result};

use crate::checks::{format_rows, run_scope, Scope};
use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Reference parameter count for the full-size configuration.
pub const REFERENCE_PARAMS: usize = 6_450_000;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn header(hash: &str) -> String {
    format!("# config_hash {hash}\n")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub struct TrainOutcome {
    pub report: TrainingReport,
    pub eval: EvalResult,
    pub out_dir: PathBuf,
}

/// Train, then evaluate on the held-out set. Writes `config.cfg`,
/// `report.jsonl`, `checkpoint.bin`, `metrics.md` and `trace.csv`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (m, t) = cfg.effective();
    let hash = cfg.hash();
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    write_text(&dir.join("config.cfg"), &(header(&hash) + &cfg.to_text()))?;
    let mut model = Restorer::<f32>::build(m, t.seed)?;
    let report = train_loop(&mut model, &t, Some(&dir))?;
    let set = make_eval_set(&t.tasks, cfg.eval_per_task, t.crop, cfg.eval_seed)?;
    let eval = evaluate(&model, &set, cfg.eval_chunk)?;
    write_eval(&dir, &hash, &eval, "model")?;
    Ok(TrainOutcome {
        report,
        eval,
        out_dir: dir,
    })
}

fn eval_summary(eval: &EvalResult, method: &str) -> Result<String> {
    let mut s = eval.output.to_table(method);
    s.push('\n');
    s.push_str(&eval.input.to_table("degraded input"));
    if !eval.trace.rows.is_empty() {
        let purity = purity_table(&eval.trace)?;
        let mean = purity.iter().sum::<f64>() / purity.len() as f64;
        let cells: Vec<String> = purity.iter().map(|p| format!("{p:.3}")).collect();
        write!(
            s,
            "\nrouting purity per layer: {}\nmean routing purity: {mean:.4}\n",
            cells.join(" ")
        )
        .expect("string write");
    }
    Ok(s)
}

fn write_eval(dir: &Path, hash: &str, eval: &EvalResult, method: &str) -> Result<()> {
    write_text(
        &dir.join("metrics.md"),
        &(header(hash) + &eval_summary(eval, method)?),
    )?;
    let csv = eval.trace.to_csv(Some(&format!("config_hash {hash}")));
    write_text(&dir.join("trace.csv"), &csv)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub tasks: Vec<Task>,
    pub per_task: usize,
    pub crop: usize,
    pub seed: u64,
    pub chunk: usize,
    pub out_dir: PathBuf,
}

/// Evaluate a saved checkpoint; writes `metrics.md` and `trace.csv`.
pub fn eval(args: &EvalArgs) -> Result<(EvalResult, String)> {
    let ck = checkpoint::load::<f32>(&args.checkpoint)?;
    if args.tasks.len() > ck.model.config.n_degradations {
        return Err(Error::Config(format!(
            "{} eval tasks but the checkpoint has {} degradation experts",
            args.tasks.len(),
            ck.model.config.n_degradations
        )));
    }
    let names: Vec<String> = args.tasks.iter().map(Task::to_string).collect();
    let hash = config_hash(&format!(
        "{}eval.tasks = {}\neval.per_task = {}\neval.crop = {}\neval.seed = {}\n",
        ck.model.config.to_text(),
        names.join(","),
        args.per_task,
        args.crop,
        args.seed
    ));
    let set = make_eval_set(&args.tasks, args.per_task, args.crop, args.seed)?;
    let result = evaluate(&ck.model, &set, args.chunk)?;
    write_eval(&args.out_dir, &hash, &result, "model")?;
    let summary = eval_summary(&result, "model")?;
    Ok((result, summary))
}

/// Run one finite-difference suite; returns the printed table and whether
/// every row is under `threshold`.
pub fn gradcheck(scope: Scope, threshold: f64) -> Result<(String, bool)> {
    let rows = run_scope(scope)?;
    let ok = rows.iter().all(|r| r.max_rel_err < threshold);
    Ok((format_rows(&rows, threshold), ok))
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub alpha: f64,
    pub average_psnr: f64,
    pub report: MetricReport,
}

/// Train and evaluate one model per alpha with identical seeds, sequentially.
/// Each run lives in `<out_dir>/alpha_<a>`; the table goes to `sweep.md`.
pub fn sweep_alpha(base: &RunConfig, alphas: &[f64]) -> Result<(Vec<SweepRow>, String)> {
    if alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    let mut hashes = String::new();
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.model.controller_alpha = alpha;
        cfg.out_dir = base.out_dir.join(format!("alpha_{alpha}"));
        hashes.push_str(&cfg.hash());
        let out = train(&cfg)?;
        rows.push(SweepRow {
            alpha,
            average_psnr: out.eval.output.average_psnr(),
            report: out.eval.output,
        });
    }
    let mut table = String::from("| alpha | average PSNR (dB) |\n|---|---|\n");
    for r in &rows {
        writeln!(table, "| {} | {:.3} |", r.alpha, r.average_psnr).expect("string write");
    }
    write_text(
        &base.out_dir.join("sweep.md"),
        &(header(&config_hash(&hashes)) + &table),
    )?;
    Ok((rows, table))
}

/// Parameter and compute report for a model configuration.
pub fn info(config: &ModelConfig, h: usize, w: usize) -> Result<String> {
    let model = Restorer::<f32>::build(config.clone(), 0)?;
    let total = model.param_count();
    let mut s = String::new();
    writeln!(s, "config_hash {}", config_hash(&config.to_text())).expect("string write");
    writeln!(
        s,
        "trainable parameters: {total} ({:.3}M)",
        total as f64 / 1e6
    )
    .expect("string write");
    let rel = (total as f64 - REFERENCE_PARAMS as f64) / REFERENCE_PARAMS as f64;
    writeln!(
        s,
        "reference full-size model: {:.2}M ({:+.1}% relative)",
        REFERENCE_PARAMS as f64 / 1e6,
        100.0 * rel
    )
    .expect("string write");
    writeln!(s, "per component:").expect("string write");
    for (name, n) in model.component_counts() {
        writeln!(s, "  {name:<24} {n:>10}").expect("string write");
    }
    writeln!(s, "router layers: {}", model.router_count()).expect("string write");
    writeln!(
        s,
        "multiply-accumulates at {h}x{w}: {}",
        model.mac_estimate(h, w)
    )
    .expect("string write");
    Ok(s)
}

pub struct SynthArgs {
    pub tasks: Vec<Task>,
    pub per_task: usize,
    pub crop: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Write degraded/clean PPM pairs and a `manifest.jsonl`.
pub fn synth(args: &SynthArgs) -> Result<usize> {
    fs::create_dir_all(&args.out_dir)?;
    let mut records = Vec::new();
    for (label, &task) in args.tasks.iter().enumerate() {
        for i in 0..args.per_task {
            let seed =
                args.seed ^ ((label as u64) << 32 | i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let s = make_sample(task, args.crop, seed, false)?;
            let stem = format!("{}_{i:04}", task.kind.name());
            let (deg, clean) = (format!("{stem}_degraded.ppm"), format!("{stem}_clean.ppm"));
            write_ppm(&args.out_dir.join(&deg), &s.degraded)?;
            write_ppm(&args.out_dir.join(&clean), &s.clean)?;
            records.push(ManifestRecord {
                path: deg,
                clean_path: clean,
                label,
                task: task.to_string(),
                gen_params: s.params,
            });
        }
    }
    write_manifest(&args.out_dir.join("manifest.jsonl"), &records)?;
    Ok(records.len())
}

pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad alpha {a:?}")))
        })
        .collect()
}

pub fn parse_task_list(s: &str) -> Result<Vec<Task>> {
    parse_tasks(s)
}
