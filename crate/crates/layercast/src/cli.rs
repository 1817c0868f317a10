//! Command-line interface: one binary driving the whole pipeline with
//! reproducible seeds. Validation problems exit 1, numerical failures exit
//! 2, and every run logs its resolved configuration to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    filter_complete, load_records, save_records, split, synth_generate, to_thickness,
    ThicknessRecord, DEFAULT_BOUNDARIES, DEFAULT_WIDTH,
};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::graph::{window_starts, GraphCacheEntry, PartitionSpec};
use crate::model::{Aggregator, ModelConfig, SkipMode};
use crate::report::{
    self, default_ablation_grid, evaluate, run_ablation, run_alpha_sweep,
    write_column_mae_csv, write_json, write_trials_csv, DEFAULT_BOUNDARY_PIXELS,
};
use crate::train::{
    build_all_sequences, train_one, write_trace_csv, Checkpoint, SchedulerKind, TrainConfig,
};

/// Bundled configuration file: model, training, graph and data sections.
/// Command-line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub graph: GraphConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub window: usize,
    pub stride: usize,
    /// Insert the square root into the edge-weight formula (classical
    /// haversine central angle) instead of the plain sum of haversines.
    pub standard_haversine: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { window: 5, stride: 3, standard_haversine: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub records: Option<PathBuf>,
    /// Records with fewer complete top layers than this are dropped.
    pub min_layers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { records: None, min_layers: 20 }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "layercast",
    about = "Deep ice-layer thickness prediction from shallow-layer radargram traces",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic radargram corpus (JSON Lines).
    SynthGen {
        /// Number of records to generate.
        #[arg(long)]
        count: usize,
        /// Master seed; identical seeds give bit-identical corpora.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON Lines file.
        #[arg(long)]
        out: PathBuf,
        /// Columns per radargram.
        #[arg(long, default_value_t = DEFAULT_WIDTH)]
        width: usize,
        /// Boundary curves per radargram (one more than thickness layers).
        #[arg(long, default_value_t = DEFAULT_BOUNDARIES)]
        boundaries: usize,
    },
    /// Build partitioned graph sequences and cache them as JSON files.
    BuildGraphs {
        /// Input records (JSON Lines).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory; one JSON file per record.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        graph: GraphFlags,
        /// Shallow input layers per sequence.
        #[arg(long, default_value_t = 5)]
        l: usize,
        /// Deep target layers per sequence.
        #[arg(long, default_value_t = 15)]
        m: usize,
        /// Drop records with fewer complete top layers than this.
        #[arg(long)]
        min_layers: Option<usize>,
    },
    /// Train one model on one seeded split and write checkpoint plus trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a seeded split.
    Eval {
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Records file (JSON Lines).
        #[arg(long)]
        data: PathBuf,
        /// Split seed; the same seed as training reproduces its test split.
        #[arg(long, default_value_t = 1)]
        split_seed: u64,
        /// Output directory for the report files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Drop records with fewer complete top layers than this.
        #[arg(long)]
        min_layers: Option<usize>,
        /// Also report the mean of per-record RMSEs next to the pooled one.
        #[arg(long)]
        per_record: bool,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Train and evaluate every meaningful component combination.
    Ablate {
        #[command(flatten)]
        common: ExperimentArgs,
    },
    /// Sensitivity of the skip mix to its initial value across block counts.
    AlphaSweep {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Comma-separated block counts to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 8])]
        n_blocks: Vec<usize>,
        /// Comma-separated initial alpha values to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75])]
        alphas: Vec<f64>,
    },
    /// Finite-difference verification of every op and the tiny full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
pub struct GraphFlags {
    /// Sliding-window size for the partitioned graphs.
    #[arg(long)]
    pub window: Option<usize>,
    /// Sliding-window stride (must be smaller than the window).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Use the classical haversine central angle for edge weights.
    #[arg(long)]
    pub standard_haversine: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Records file (JSON Lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON config file ({model, train, graph, data}); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint.json and loss_trace.csv.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed for init, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split seed selecting the train/val/test permutation.
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning-rate schedule: plateau or step.
    #[arg(long, value_enum)]
    pub scheduler: Option<CliScheduler>,
    /// Embedding width.
    #[arg(long)]
    pub d: Option<usize>,
    /// Temporal attention blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// GraphSAGE layers in the spatial stack.
    #[arg(long)]
    pub sage_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Initial value of the skip-mix scalars.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Shallow input layers (the temporal depth of the model).
    #[arg(long)]
    pub l: Option<usize>,
    /// Deep target layers.
    #[arg(long)]
    pub m: Option<usize>,
    /// Weight neighbor aggregation by the geographic edge weights.
    #[arg(long)]
    pub weighted_mean: bool,
    /// Share one skip-mix scalar across all blocks.
    #[arg(long)]
    pub shared_alpha: bool,
    /// Disable the adaptive long-range skip (plain block chaining).
    #[arg(long)]
    pub no_lr_skip: bool,
    /// Drop records with fewer complete top layers than this.
    #[arg(long)]
    pub min_layers: Option<usize>,
    #[command(flatten)]
    pub graph: GraphFlags,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Records file (JSON Lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON config file ({model, train, graph, data}); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the report files.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Trials (seeded splits) per configuration.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Drop records with fewer complete top layers than this.
    #[arg(long)]
    pub min_layers: Option<usize>,
    #[command(flatten)]
    pub graph: GraphFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CliScheduler {
    Plateau,
    Step,
}

/// Parse argv, execute, and map errors to exit codes.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Numeric(_)) => {
            log::error!("{e}");
            2
        }
        Err(e) => {
            log::error!("{e}");
            1
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                line: 1,
                msg: e.to_string(),
            })
        }
    }
}

fn log_resolved(cfg: &RunConfig, seed: u64) {
    if let Ok(json) = serde_json::to_string(cfg) {
        log::info!("resolved config (seed {seed}): {json}");
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_thickness(path: &Path, min_layers: usize) -> Result<Vec<ThicknessRecord>> {
    let records = load_records(path)?;
    let total = records.len();
    let thickness: Vec<ThicknessRecord> = records
        .iter()
        .map(to_thickness)
        .collect::<Result<Vec<_>>>()?;
    let kept = filter_complete(thickness, min_layers);
    log::info!(
        "loaded {total} records from {}, kept {} with >= {min_layers} complete layers",
        path.display(),
        kept.len()
    );
    Ok(kept)
}

fn apply_graph_flags(cfg: &mut RunConfig, flags: &GraphFlags) {
    if let Some(w) = flags.window {
        cfg.graph.window = w;
    }
    if let Some(s) = flags.stride {
        cfg.graph.stride = s;
    }
    if flags.standard_haversine {
        cfg.graph.standard_haversine = true;
    }
}

fn partition_spec(cfg: &RunConfig) -> Result<PartitionSpec> {
    PartitionSpec::new(cfg.graph.window, cfg.graph.stride)
}

fn resolve_train_args(args: &TrainArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = load_config(&args.config)?;
    apply_graph_flags(&mut cfg, &args.graph);
    if let Some(d) = &args.data {
        cfg.data.records = Some(d.clone());
    }
    if let Some(v) = args.min_layers {
        cfg.data.min_layers = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr0 = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.scheduler {
        cfg.train.scheduler = match v {
            CliScheduler::Plateau => SchedulerKind::Plateau,
            CliScheduler::Step => SchedulerKind::Step,
        };
    }
    if let Some(v) = args.d {
        cfg.model.d = v;
    }
    if let Some(v) = args.blocks {
        cfg.model.n_blocks = v;
    }
    if let Some(v) = args.heads {
        cfg.model.n_heads = v;
    }
    if let Some(v) = args.sage_layers {
        cfg.model.l_sage = v;
    }
    if let Some(v) = args.dropout {
        cfg.model.dropout_p = v;
    }
    if let Some(v) = args.alpha0 {
        cfg.model.alpha0 = v;
    }
    if let Some(v) = args.l {
        cfg.model.k = v;
    }
    if let Some(v) = args.m {
        cfg.model.m = v;
    }
    if args.weighted_mean {
        cfg.model.aggregator = Aggregator::WeightedMean;
    }
    if args.shared_alpha {
        cfg.model.shared_alpha = true;
    }
    if args.no_lr_skip {
        cfg.model.skip = SkipMode::Off;
    }
    let data = cfg
        .data
        .records
        .clone()
        .ok_or_else(|| Error::Config("no records file given (--data or config)".into()))?;
    Ok((cfg, data))
}

fn resolve_experiment_args(args: &ExperimentArgs) -> Result<(RunConfig, PathBuf, usize)> {
    let mut cfg = load_config(&args.config)?;
    apply_graph_flags(&mut cfg, &args.graph);
    if let Some(d) = &args.data {
        cfg.data.records = Some(d.clone());
    }
    if let Some(v) = args.min_layers {
        cfg.data.min_layers = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr0 = v;
    }
    if let Some(v) = args.trials {
        cfg.train.trials = v;
    }
    if let Some(v) = args.d {
        cfg.model.d = v;
    }
    if let Some(v) = args.blocks {
        cfg.model.n_blocks = v;
    }
    if let Some(v) = args.heads {
        cfg.model.n_heads = v;
    }
    if let Some(v) = args.alpha0 {
        cfg.model.alpha0 = v;
    }
    if let Some(v) = args.l {
        cfg.model.k = v;
    }
    if let Some(v) = args.m {
        cfg.model.m = v;
    }
    let data = cfg
        .data
        .records
        .clone()
        .ok_or_else(|| Error::Config("no records file given (--data or config)".into()))?;
    let trials = cfg.train.trials;
    Ok((cfg, data, trials))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthGen { count, seed, out, width, boundaries } => {
            if count == 0 {
                return Err(Error::Config("--count must be >= 1".into()));
            }
            if width < 2 || boundaries < 2 {
                return Err(Error::Config("--width and --boundaries must be >= 2".into()));
            }
            let records = synth_generate(count, seed, width, boundaries);
            save_records(&out, &records)?;
            log::info!("wrote {count} records to {} (seed {seed})", out.display());
            Ok(())
        }
        Command::BuildGraphs { input, out, graph, l, m, min_layers } => {
            let mut cfg = RunConfig::default();
            apply_graph_flags(&mut cfg, &graph);
            let spec = partition_spec(&cfg)?;
            let min_layers = min_layers.unwrap_or(cfg.data.min_layers).max(l + m);
            let records = load_thickness(&input, min_layers)?;
            if records.is_empty() {
                return Err(Error::Validation("no records left after filtering".into()));
            }
            ensure_dir(&out)?;
            for rec in &records {
                let seq =
                    crate::graph::build_sequence(rec, l, m, &spec, cfg.graph.standard_haversine)?;
                let starts = window_starts(rec.width, &spec)?;
                let entry = GraphCacheEntry::from_sequence(&seq, starts);
                write_json(out.join(format!("{}.json", rec.id)), &entry)?;
            }
            log::info!("wrote {} graph files to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train(args) => {
            let (cfg, data_path) = resolve_train_args(&args)?;
            log_resolved(&cfg, cfg.train.seed);
            cfg.model.validate()?;
            cfg.train.validate()?;
            let spec = partition_spec(&cfg)?;
            let records = load_thickness(&data_path, cfg.data.min_layers)?;
            let seqs =
                build_all_sequences(&records, &cfg.model, &spec, cfg.graph.standard_haversine)?;
            let s = split(&records, args.split_seed)?;
            let pick = |ids: &Vec<String>| -> Vec<_> {
                seqs.iter().filter(|q| ids.contains(&q.id)).collect::<Vec<_>>()
            };
            let (train_set, val_set) = (pick(&s.train), pick(&s.val));
            log::info!(
                "split seed {}: {} train / {} val / {} test",
                args.split_seed,
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
            let run = train_one(&train_set, &val_set, &cfg.model, &cfg.train, cfg.train.seed)?;
            ensure_dir(&args.out)?;
            run.checkpoint.save(args.out.join("checkpoint.json"))?;
            write_trace_csv(args.out.join("loss_trace.csv"), &run.trace)?;
            if let Some(msg) = run.diverged {
                return Err(Error::Numeric(format!(
                    "training diverged ({msg}); last good checkpoint written to {}",
                    args.out.display()
                )));
            }
            log::info!(
                "best val mse {:.6} at epoch {:?}; artifacts in {}",
                run.best_val_mse,
                run.best_epoch,
                args.out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split_seed,
            out,
            min_layers,
            per_record,
            graph,
        } => {
            let mut cfg = RunConfig::default();
            apply_graph_flags(&mut cfg, &graph);
            let ckpt = Checkpoint::load(&checkpoint)?;
            let params = ckpt.to_param_set()?;
            let spec = partition_spec(&cfg)?;
            let records =
                load_thickness(&data, min_layers.unwrap_or(cfg.data.min_layers))?;
            let seqs = build_all_sequences(
                &records,
                &ckpt.config,
                &spec,
                cfg.graph.standard_haversine,
            )?;
            let s = split(&records, split_seed)?;
            let test: Vec<_> = seqs.iter().filter(|q| s.test.contains(&q.id)).collect();
            if test.is_empty() {
                return Err(Error::Validation("empty test split".into()));
            }
            let outcome = evaluate(
                &params,
                &ckpt.config,
                &ckpt.norm_stats,
                &test,
                &DEFAULT_BOUNDARY_PIXELS,
            )?;
            ensure_dir(&out)?;
            write_json(out.join("eval_report.json"), &outcome)?;
            write_column_mae_csv(out.join("column_mae.csv"), &outcome.column_mae)?;
            log::info!("test rmse (pooled): {:.6} px", outcome.rmse);
            if per_record {
                log::info!("test rmse (per-record mean): {:.6} px", outcome.per_record_rmse_mean);
            }
            for (p, v) in &outcome.boundary {
                log::info!("boundary rmse p={p}: {v:.6} px");
            }
            Ok(())
        }
        Command::Ablate { common } => {
            let (cfg, data_path, trials) = resolve_experiment_args(&common)?;
            log_resolved(&cfg, cfg.train.seed);
            let spec = partition_spec(&cfg)?;
            let records = load_thickness(&data_path, cfg.data.min_layers)?;
            let grid = default_ablation_grid();
            let reports = run_ablation(
                &records,
                &cfg.model,
                &cfg.train,
                &spec,
                cfg.graph.standard_haversine,
                &grid,
                trials,
                &DEFAULT_BOUNDARY_PIXELS,
            )?;
            ensure_dir(&common.out)?;
            write_json(common.out.join("ablation.json"), &reports)?;
            let rows: Vec<(String, usize, f64, &report::TrialReport)> = reports
                .iter()
                .flat_map(|r| {
                    r.aggregate
                        .trials
                        .iter()
                        .map(move |t| (r.variant.flags_string(), r.n_blocks, r.alpha0, t))
                })
                .collect();
            write_trials_csv(common.out.join("ablation.csv"), &rows)?;
            for r in &reports {
                log::info!(
                    "{}: rmse {:.4} +/- {:.4}",
                    r.variant.flags_string(),
                    r.aggregate.rmse_mean,
                    r.aggregate.rmse_std
                );
            }
            Ok(())
        }
        Command::AlphaSweep { common, n_blocks, alphas } => {
            let (cfg, data_path, trials) = resolve_experiment_args(&common)?;
            log_resolved(&cfg, cfg.train.seed);
            let spec = partition_spec(&cfg)?;
            let records = load_thickness(&data_path, cfg.data.min_layers)?;
            let reports = run_alpha_sweep(
                &records,
                &cfg.model,
                &cfg.train,
                &spec,
                cfg.graph.standard_haversine,
                &n_blocks,
                &alphas,
                trials,
                &DEFAULT_BOUNDARY_PIXELS,
            )?;
            ensure_dir(&common.out)?;
            write_json(common.out.join("alpha_sweep.json"), &reports)?;
            let rows: Vec<(String, usize, f64, &report::TrialReport)> = reports
                .iter()
                .flat_map(|r| {
                    r.aggregate
                        .trials
                        .iter()
                        .map(move |t| ("full".to_string(), r.n_blocks, r.alpha0, t))
                })
                .collect();
            write_trials_csv(common.out.join("alpha_sweep.csv"), &rows)?;
            for r in &reports {
                log::info!(
                    "n_blocks={} alpha0={}: rmse {:.4} +/- {:.4} (final alphas per trial logged in JSON)",
                    r.n_blocks,
                    r.alpha0,
                    r.aggregate.rmse_mean,
                    r.aggregate.rmse_std
                );
            }
            Ok(())
        }
        Command::Gradcheck { seed, step, tolerance } => {
            let report = gradcheck::run_op_suite(seed, step, tolerance)?;
            let mut all_ok = true;
            for e in &report.entries {
                let ok = e.max_rel_err <= tolerance;
                all_ok &= ok;
                println!(
                    "{:24} max rel err {:>12.3e}   {}",
                    e.name,
                    e.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            let model_err = gradcheck::check_tiny_model(seed, step)?;
            let model_ok = model_err <= tolerance;
            all_ok &= model_ok;
            println!(
                "{:24} max rel err {:>12.3e}   {}",
                "full model (tiny)",
                model_err,
                if model_ok { "ok" } else { "FAIL" }
            );
            if all_ok {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed at tolerance {tolerance}"
                )))
            }
        }
    }
}
