//! `credal`: command-line driver for credal graph-learning experiments.
//!
//! Subcommands: `train` (one model, checkpoint + history), `eval-ood` (the
//! leave-out-class experiment grid), `gen-synthetic` (write a cSBM dataset
//! directory), and `verify` (built-in numerical self-checks).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config/schema error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use credal_core::eval::{
    emit_results, results_to_csv, summarize, ExperimentPlan, MethodSpec, SplitPlan, TrainTemplate,
};
use credal_core::graph::{
    generate_csbm, leave_out_class_split, load_dataset, save_dataset, ClassPartition, CsbmParams,
    GraphDataset,
};
use credal_core::model::{BackboneConfig, ModelKind};
use credal_core::train::{save_checkpoint, train_model, TrainConfig};
use credal_core::verify::{battery_passed, run_battery, FaultInjection};

#[derive(Parser)]
#[command(name = "credal", version, about = "Credal graph learning toolkit")]
struct Cli {
    /// Upper bound on concurrently processed seeds; the CREDAL_JOBS
    /// environment variable overrides this flag.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; write a checkpoint and the training history CSV.
    Train {
        /// Path to the run-configuration JSON file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the leave-out-class OOD experiment grid and write result files.
    EvalOod {
        /// Path to the run-configuration JSON file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic cSBM dataset directory.
    GenSynthetic {
        /// Path to the run-configuration JSON file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in verification battery; exit 0 iff every check passes.
    Verify {
        /// Test hook: corrupt the min-entropy solver result so the battery
        /// must report a failure.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// A command failure carrying its exit code: 2 for config/schema problems,
/// 1 for runtime failures.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

type CliResult = Result<(), Failure>;

/// Dataset source: exactly one of a dataset directory or cSBM parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    #[serde(default)]
    path: Option<PathBuf>,
    #[serde(default)]
    csbm: Option<CsbmParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionSection {
    /// Classes withheld from training and treated as OOD.
    ood_classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSection {
    train_frac: f64,
    val_frac: f64,
    /// One experiment repetition per seed; `train` uses the first seed.
    seeds: Vec<u64>,
}

fn default_delta() -> f64 {
    1.0
}

/// Model architecture plus training hyperparameters. `kind` selects the
/// model `train` builds; `eval-ood` trains whatever its methods need.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    kind: ModelKind,
    lr: f64,
    #[serde(default)]
    weight_decay: f64,
    max_epochs: usize,
    patience: usize,
    #[serde(default = "default_delta")]
    delta: f64,
    backbone: BackboneConfig,
    /// Record wall-clock times in history and result files. Off by default
    /// so reruns produce byte-identical outputs.
    #[serde(default)]
    record_timings: bool,
}

impl ModelSection {
    fn template(&self) -> TrainTemplate {
        TrainTemplate {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            delta: self.delta,
            backbone: self.backbone.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: PathBuf,
}

/// One experiment as a reproducible document. Sections beyond `dataset`
/// and `output` are required only by the subcommands that use them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    dataset: DatasetSection,
    #[serde(default)]
    partition: Option<PartitionSection>,
    #[serde(default)]
    split: Option<SplitSection>,
    #[serde(default)]
    model: Option<ModelSection>,
    #[serde(default)]
    methods: Vec<MethodSpec>,
    output: OutputSection,
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&body)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

/// Build the dataset from whichever source the config names. Loading and
/// generation failures are config errors: the work has not started yet.
fn build_dataset(section: &DatasetSection) -> Result<GraphDataset, Failure> {
    match (&section.path, &section.csbm) {
        (Some(dir), None) => {
            let (dataset, _) = load_dataset(dir)
                .map_err(|e| Failure::config(format!("cannot load dataset: {e}")))?;
            Ok(dataset)
        }
        (None, Some(params)) => generate_csbm(params)
            .map_err(|e| Failure::config(format!("invalid csbm parameters: {e}"))),
        _ => Err(Failure::config("dataset section needs exactly one of `path` or `csbm`")),
    }
}

fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
    section.as_ref().ok_or_else(|| Failure::config(format!("config is missing the `{name}` section")))
}

fn build_partition(
    dataset: &GraphDataset,
    section: &PartitionSection,
) -> Result<ClassPartition, Failure> {
    ClassPartition::from_ood_classes(dataset.num_classes, &section.ood_classes)
        .map_err(|e| Failure::config(format!("invalid partition: {e}")))
}

/// CREDAL_JOBS overrides the --jobs flag when set.
fn resolve_jobs(flag: usize) -> Result<usize, Failure> {
    match std::env::var("CREDAL_JOBS") {
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::config(format!("CREDAL_JOBS must be a positive integer, got {raw:?}"))),
        Err(_) => Ok(flag),
    }
}

fn cmd_train(config_path: &Path) -> CliResult {
    let config = load_config(config_path)?;
    let dataset = build_dataset(&config.dataset)?;
    let partition = build_partition(&dataset, require(&config.partition, "partition")?)?;
    let split = require(&config.split, "split")?;
    let model_section = require(&config.model, "model")?;
    let &seed = split
        .seeds
        .first()
        .ok_or_else(|| Failure::config("split.seeds must name at least one seed"))?;

    let train_config = TrainConfig {
        lr: model_section.lr,
        weight_decay: model_section.weight_decay,
        max_epochs: model_section.max_epochs,
        patience: model_section.patience,
        delta: model_section.delta,
        seed,
        model_kind: model_section.kind,
        backbone: model_section.backbone.clone(),
        early_stop_metric: None,
        record_timings: model_section.record_timings,
    };
    train_config.validate().map_err(|e| Failure::config(format!("invalid model section: {e}")))?;
    let masks = leave_out_class_split(&dataset, &partition, split.train_frac, split.val_frac, seed)
        .map_err(|e| Failure::config(format!("invalid split: {e}")))?;

    log::info!("training {:?} on {} (seed {seed})", model_section.kind, dataset.name);
    let (model, history) = train_model(&dataset, &masks, &partition, &train_config)
        .map_err(|e| Failure::runtime(format!("training failed: {e}")))?;

    let out_dir = &config.output.dir;
    save_checkpoint(&model, out_dir)
        .map_err(|e| Failure::runtime(format!("cannot write checkpoint: {e}")))?;
    let history_path = out_dir.join("history.csv");
    std::fs::write(&history_path, history.to_csv())
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", history_path.display())))?;

    println!(
        "trained {} for {} epochs (best epoch {})",
        model_section.kind.as_str(),
        history.records.len(),
        history.best_epoch
    );
    println!("wrote {}", out_dir.join("checkpoint.json").display());
    println!("wrote {}", history_path.display());
    Ok(())
}

fn cmd_eval_ood(config_path: &Path, jobs: usize) -> CliResult {
    let config = load_config(config_path)?;
    let dataset = build_dataset(&config.dataset)?;
    let partition = build_partition(&dataset, require(&config.partition, "partition")?)?;
    let split = require(&config.split, "split")?;
    let model_section = require(&config.model, "model")?;
    if config.methods.is_empty() {
        return Err(Failure::config("eval-ood needs a non-empty `methods` list"));
    }

    let plan = ExperimentPlan {
        split: SplitPlan {
            train_frac: split.train_frac,
            val_frac: split.val_frac,
            seeds: split.seeds.clone(),
        },
        train: model_section.template(),
        methods: config.methods.clone(),
        record_timings: model_section.record_timings,
        jobs,
    };
    plan.validate().map_err(|e| Failure::config(format!("invalid experiment plan: {e}")))?;

    log::info!(
        "evaluating {} methods x {} seeds on {}",
        plan.methods.len(),
        plan.split.seeds.len(),
        dataset.name
    );
    let output = credal_core::eval::run_ood_experiment(&dataset, &partition, &plan)
        .map_err(|e| Failure::runtime(format!("experiment failed: {e}")))?;
    let written = emit_results(&output, &config.output.dir)
        .map_err(|e| Failure::runtime(format!("cannot write results: {e}")))?;

    print!("{}", results_to_csv(&output.results));
    let doc = summarize(&output);
    for (method, block) in &doc.methods {
        for (kind, stats) in &block.summary {
            println!(
                "summary: {method}/{kind} auroc {:.4} +/- {:.4} ({} seed{})",
                stats.mean_auroc,
                stats.std_auroc,
                stats.seeds,
                if stats.seeds == 1 { "" } else { "s" }
            );
        }
    }
    for path in written {
        println!("wrote {}", path.display());
    }

    let failed: Vec<&str> = output
        .results
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.method.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Failure::runtime(format!(
            "{} experiment cell(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}

fn cmd_gen_synthetic(config_path: &Path) -> CliResult {
    let config = load_config(config_path)?;
    let Some(params) = &config.dataset.csbm else {
        return Err(Failure::config("gen-synthetic needs a `dataset.csbm` section"));
    };
    let dataset =
        generate_csbm(params).map_err(|e| Failure::config(format!("invalid csbm parameters: {e}")))?;
    save_dataset(&config.output.dir, &dataset, None)
        .map_err(|e| Failure::runtime(format!("cannot write dataset: {e}")))?;
    println!(
        "wrote dataset '{}' ({} nodes, {} classes) to {}",
        dataset.name,
        dataset.num_nodes,
        dataset.num_classes,
        config.output.dir.display()
    );
    Ok(())
}

fn cmd_verify(inject_fault: bool) -> CliResult {
    let fault = FaultInjection { flip_min_entropy: inject_fault };
    let reports =
        run_battery(&fault).map_err(|e| Failure::runtime(format!("battery aborted: {e}")))?;
    for r in &reports {
        println!(
            "check {:<26} measured {:>12.5e}  tolerance {:>9.1e}  {}",
            r.name,
            r.measured,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if battery_passed(&reports) {
        println!("verification passed ({} checks)", reports.len());
        Ok(())
    } else {
        let failed = reports.iter().filter(|r| !r.passed).count();
        Err(Failure::runtime(format!("verification failed: {failed} check(s) out of tolerance")))
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let jobs = resolve_jobs(cli.jobs)?;
    match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::EvalOod { config } => cmd_eval_ood(config, jobs),
        Command::GenSynthetic { config } => cmd_gen_synthetic(config),
        Command::Verify { inject_fault } => cmd_verify(*inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
