//! The `bridgelab` command line.
//!
//! Every command reads an optional `--config` file of `key = value` lines,
//! overlays the named flags and then any `--set key=value` pairs, rejects
//! unknown keys, and writes the fully resolved configuration next to its
//! outputs so the run can be repeated with `--config <resolved file>`.

pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::Faults;
use crate::config::ConfigMap;
use crate::data::{generate_synthetic, MultimodalDataset, Split};
use crate::fewshot::check_split;
use crate::diagnostics::{gradient_suite, GRADCHECK_TOLERANCE};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::train::{evaluate, train, EvalReport, TrainLog};

pub use config::{default_seed, gen_config_from_map, gen_config_to_map, RunConfig, SEED_ENV};
pub use report::Comparison;

pub const RESOLVED_CONFIG: &str = "resolved.conf";
pub const CHECKPOINT_FILE: &str = "checkpoint.smpx";
pub const REPORT_FILE: &str = "report.txt";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const ERROR_FILE: &str = "error.txt";

#[derive(Debug, Parser)]
#[command(name = "bridgelab", version, about = "Few-shot learning with auxiliary-conditioned batch normalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset file.
    GenData(GenDataArgs),
    /// Train one variant and write a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on paired episodes and write a report.
    Eval(RunArgs),
    /// Train and evaluate every variant over several seeds and tabulate.
    Ablate(RunArgs),
    /// Rebuild comparison tables from ablation directories or report files.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override any configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Fraction of class-separating attributes absent from the images, in [0, 1].
    #[arg(long)]
    pub ambiguity: Option<f64>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub pixel_noise: Option<f64>,
    #[arg(long)]
    pub caption_noise: Option<f64>,
    #[arg(long)]
    pub val_classes: Option<usize>,
    #[arg(long)]
    pub test_classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// baseline, simpaux, ablation or oracle.
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated variants for `ablate`.
    #[arg(long)]
    pub variants: Option<String>,
    /// Comma-separated training seeds for `ablate`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// train, val or test.
    #[arg(long)]
    pub eval_split: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Ablation output directories or individual report files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Directory for `table.txt`, `table.csv` and `per_seed.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true, value_name = "FAULT")]
    pub inject_fault: Option<String>,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Completed, but a validation failed.
    Failed(String),
}

fn base_map(common: &Common) -> Result<ConfigMap> {
    let mut map = match &common.config {
        Some(p) => ConfigMap::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => ConfigMap::new(),
    };
    if let Some(s) = common.seed {
        map.set("seed", s);
    }
    if let Some(o) = &common.out {
        map.set("out", o.display());
    }
    Ok(map)
}

fn apply_overrides(map: &mut ConfigMap, common: &Common) -> Result<()> {
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        map.set(k.trim(), v.trim());
    }
    Ok(())
}

fn set_opt<T: std::fmt::Display>(map: &mut ConfigMap, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        map.set(key, v);
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(args: &GenDataArgs) -> Result<Status> {
    let mut map = base_map(&args.common)?;
    set_opt(&mut map, "classes", &args.classes);
    set_opt(&mut map, "per_class", &args.per_class);
    set_opt(&mut map, "image_size", &args.image_size);
    set_opt(&mut map, "attributes", &args.attributes);
    set_opt(&mut map, "embedding_dim", &args.embedding_dim);
    set_opt(&mut map, "ambiguity", &args.ambiguity);
    set_opt(&mut map, "flip_prob", &args.flip_prob);
    set_opt(&mut map, "pixel_noise", &args.pixel_noise);
    set_opt(&mut map, "caption_noise", &args.caption_noise);
    set_opt(&mut map, "val_classes", &args.val_classes);
    set_opt(&mut map, "test_classes", &args.test_classes);
    apply_overrides(&mut map, &args.common)?;
    let (cfg, out) = gen_config_from_map(&map, default_seed()?)?;
    let out = out.ok_or_else(|| Error::Config("no output file given (set `out` or --out)".into()))?;
    let dataset = generate_synthetic(&cfg)?;
    ensure_parent(&out)?;
    dataset.save(&out)?;
    write_file(
        &out.with_extension(RESOLVED_CONFIG),
        &gen_config_to_map(&cfg, Some(&out)).to_text(),
    )?;
    let s = dataset.splits();
    println!(
        "wrote {}: {} classes ({} train / {} val / {} test), {} instances, ambiguity {}",
        out.display(),
        dataset.classes(),
        s.train.len(),
        s.val.len(),
        s.test.len(),
        dataset.len(),
        cfg.ambiguity
    );
    Ok(Status::Ok)
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut map = base_map(&args.common)?;
    for (k, v) in [("dataset", &args.dataset), ("checkpoint", &args.checkpoint)] {
        if let Some(p) = v {
            map.set(k, p.display());
        }
    }
    set_opt(&mut map, "variant", &args.variant);
    set_opt(&mut map, "variants", &args.variants);
    set_opt(&mut map, "seeds", &args.seeds);
    set_opt(&mut map, "steps", &args.steps);
    set_opt(&mut map, "optimizer", &args.optimizer);
    set_opt(&mut map, "lr", &args.lr);
    set_opt(&mut map, "way", &args.way);
    set_opt(&mut map, "shot", &args.shot);
    set_opt(&mut map, "query", &args.query);
    set_opt(&mut map, "val_every", &args.val_every);
    set_opt(&mut map, "eval_seed", &args.eval_seed);
    set_opt(&mut map, "eval_episodes", &args.eval_episodes);
    set_opt(&mut map, "eval_split", &args.eval_split);
    set_opt(&mut map, "workers", &args.workers);
    apply_overrides(&mut map, &args.common)?;
    RunConfig::from_map(&map, default_seed()?)
}

/// Trains one model of `cfg.model` with training seed `seed`, which also
/// seeds parameter initialization.
fn train_one(cfg: &RunConfig, dataset: &MultimodalDataset, seed: u64, log: &mut TrainLog) -> Result<Model> {
    let model = Model::new(cfg.model.clone().fit_to(dataset), seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    Ok(train(model, dataset, &tc, log)?.model)
}

fn cmd_train(args: &RunArgs) -> Result<Status> {
    let mut cfg = run_config(args)?;
    let dataset = MultimodalDataset::load(cfg.require_dataset()?)?;
    cfg.model = cfg.model.fit_to(&dataset);
    let out = cfg.require_out()?.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_map().to_text())?;
    let mut log = TrainLog::default();
    let result = train_one(&cfg, &dataset, cfg.train.seed, &mut log);
    write_file(&out.join(TRAIN_LOG_FILE), &log.to_text())?;
    let model = result?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    let last = log.entries.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "trained {} for {} steps (final loss {last:.4}); checkpoint {}",
        cfg.model.variant,
        cfg.train.steps,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(Status::Ok)
}

fn cmd_eval(args: &RunArgs) -> Result<Status> {
    let mut cfg = run_config(args)?;
    let dataset = MultimodalDataset::load(cfg.require_dataset()?)?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("no checkpoint given (set `checkpoint` or --checkpoint)".into()))?;
    let model = Model::load(&ckpt)?;
    cfg.model = model.config().clone();
    let out = cfg.require_out()?.clone();
    let report = evaluate(&model, &dataset, &cfg.eval)?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_map().to_text())?;
    write_file(&out.join(REPORT_FILE), &report.to_text())?;
    println!(
        "{} on {} episodes of the {} split: {}",
        report.variant,
        report.episodes(),
        report.split,
        report::pct(report.mean, report.ci95)
    );
    Ok(Status::Ok)
}

fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{variant}-seed{seed}"))
}

fn write_tables(out: &Path, cmp: &Comparison) -> Result<String> {
    let table = cmp.render_table();
    write_file(&out.join("table.txt"), &table)?;
    write_file(&out.join("table.csv"), &cmp.render_csv())?;
    write_file(&out.join("per_seed.csv"), &cmp.render_seed_csv())?;
    Ok(table)
}

fn failure_status(cmp: &Comparison) -> Status {
    let failed: usize = cmp
        .variants
        .iter()
        .map(|(_, r)| r.runs.values().filter(|o| o.is_err()).count())
        .sum();
    if failed == 0 {
        Status::Ok
    } else {
        Status::Failed(format!("{failed} run(s) failed"))
    }
}

fn cmd_ablate(args: &RunArgs) -> Result<Status> {
    let mut cfg = run_config(args)?;
    let dataset = MultimodalDataset::load(cfg.require_dataset()?)?;
    cfg.model = cfg.model.fit_to(&dataset);
    if !cfg.variants.contains(&Variant::Ablation) {
        cfg.variants.push(Variant::Ablation);
    }
    cfg.variants.sort_by_key(|v| variant_rank(*v));
    cfg.variants.dedup();
    check_split(&dataset, Split::Train, cfg.train.shape)?;
    check_split(&dataset, cfg.eval.split, cfg.eval.shape)?;
    let out = cfg.require_out()?.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_map().to_text())?;
    let mut cmp = Comparison::default();
    for &variant in &cfg.variants {
        let mut vcfg = cfg.clone();
        vcfg.model.variant = variant;
        for &seed in &cfg.seeds {
            let dir = run_dir(&out, variant, seed);
            let mut log = TrainLog::default();
            let outcome = train_one(&vcfg, &dataset, seed, &mut log)
                .and_then(|m| evaluate(&m, &dataset, &vcfg.eval));
            write_file(&dir.join(TRAIN_LOG_FILE), &log.to_text())?;
            let outcome = match outcome {
                Ok(r) => {
                    write_file(&dir.join(REPORT_FILE), &format!("{}train_seed = {seed}\n", r.to_text()))?;
                    eprintln!("{variant} seed {seed}: {}", report::pct(r.mean, r.ci95));
                    Ok(r)
                }
                Err(e) => {
                    write_file(&dir.join(ERROR_FILE), &format!("{e}\n"))?;
                    eprintln!("{variant} seed {seed}: failed: {e}");
                    Err(e.to_string())
                }
            };
            cmp.record(variant, seed, outcome);
        }
    }
    print!("{}", write_tables(&out, &cmp)?);
    Ok(failure_status(&cmp))
}

fn variant_rank(v: Variant) -> usize {
    Variant::ALL.iter().position(|a| *a == v).unwrap_or(usize::MAX)
}

fn parse_run_name(name: &str) -> Option<(Variant, u64)> {
    let (v, s) = name.rsplit_once("-seed")?;
    Some((v.parse().ok()?, s.parse().ok()?))
}

fn read_report(path: &Path) -> Result<(EvalReport, Option<u64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report = EvalReport::from_text(&text)?;
    let seed = ConfigMap::parse(&text)
        .ok()
        .and_then(|m| m.parsed::<u64>("train_seed").ok().flatten());
    Ok((report, seed))
}

/// Loads an ablation directory (its `runs/` subdirectories) or a single
/// report file into `cmp`. Report files without a recorded training seed
/// are numbered in the order given.
fn collect(cmp: &mut Comparison, path: &Path, next_seed: &mut u64) -> Result<()> {
    if path.is_file() {
        let (r, seed) = read_report(path)?;
        let seed = seed.unwrap_or_else(|| {
            *next_seed += 1;
            *next_seed - 1
        });
        cmp.record(r.variant, seed, Ok(r));
        return Ok(());
    }
    let runs = path.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let Some((variant, seed)) = dir.file_name().and_then(|n| n.to_str()).and_then(parse_run_name) else {
            continue;
        };
        let report = dir.join(REPORT_FILE);
        if report.is_file() {
            cmp.record(variant, seed, Ok(read_report(&report)?.0));
        } else {
            let err = fs::read_to_string(dir.join(ERROR_FILE)).unwrap_or_else(|_| "no report".into());
            cmp.record(variant, seed, Err(err.trim().to_string()));
        }
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<Status> {
    let mut cmp = Comparison::default();
    let mut next_seed = 0;
    for p in &args.inputs {
        collect(&mut cmp, p, &mut next_seed)?;
    }
    if cmp.variants.is_empty() {
        return Err(Error::InsufficientData("no reports found".into()));
    }
    cmp.variants.sort_by_key(|(v, _)| variant_rank(*v));
    let table = match &args.out {
        Some(dir) => write_tables(dir, &cmp)?,
        None => cmp.render_table(),
    };
    print!("{table}");
    Ok(failure_status(&cmp))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Status> {
    let faults = match args.inject_fault.as_deref() {
        None => Faults::default(),
        Some("bn-backward") => Faults {
            corrupt_bn_backward: true,
        },
        Some(other) => return Err(Error::Config(format!("unknown fault `{other}`"))),
    };
    let checks = gradient_suite(args.seed, faults)?;
    let width = checks.iter().map(|c| c.component.len()).max().unwrap_or(0).max(9);
    println!("{:<width$}  {:>14}  {:>8}  {:>7}  status", "component", "max rel error", "checked", "skipped");
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        if !c.passed() {
            failed.push(c.component);
        }
        println!(
            "{:<width$}  {:>14.3e}  {:>8}  {:>7}  {status}",
            c.component, c.report.max_rel_error, c.report.checked, c.report.skipped
        );
    }
    if failed.is_empty() {
        println!("all {} components within {GRADCHECK_TOLERANCE:e}", checks.len());
        Ok(Status::Ok)
    } else {
        Ok(Status::Failed(format!(
            "gradient check above {GRADCHECK_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Process entry point: exit code 0 iff the command completed and every
/// validation passed.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
