//! Command-line orchestration: dataset preparation, experiment execution
//! from config files, evaluation, and comparison tables.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 missing or
//! malformed data.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fpfl::config::ExperimentConfig;
use fpfl::datasets::{adult, femnist, packed, partition_users, PreparedDataset, SplitData};
use fpfl::error::Error;
use fpfl::fairness::GroupMetricsReport;
use fpfl::fed::{self, RunOptions};
use fpfl::nn::checkpoint;

#[derive(Parser)]
#[command(name = "fpfl", about = "Fair private federated learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a packed dataset and its manifest from raw inputs.
    Prepare(PrepareArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Validate a config and print the derived noise scale without training.
    DryRun(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Consolidate finished runs into a comparison table.
    Table(TableArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset to build: "adult" (census files) or "femnist-synthetic".
    dataset: String,
    /// Raw census train CSV (adult only).
    #[arg(long)]
    train_csv: Option<PathBuf>,
    /// Raw census test CSV (adult only).
    #[arg(long)]
    test_csv: Option<PathBuf>,
    /// Mean shard size for the user partition (adult only).
    #[arg(long, default_value_t = 2.0)]
    mean_shard: f64,
    /// Also one-hot the group attribute as a model feature (adult only).
    #[arg(long, default_value_t = false)]
    include_group_feature: bool,
    /// Number of synthetic users (femnist-synthetic only).
    #[arg(long, default_value_t = 300)]
    users: usize,
    /// Mean train samples per user (femnist-synthetic only).
    #[arg(long, default_value_t = 10.0)]
    mean_train: f64,
    /// Test samples per user (femnist-synthetic only).
    #[arg(long, default_value_t = 4)]
    test_per_user: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Packed dataset file produced by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Force serial per-user computation (results are identical either way).
    #[arg(long, default_value_t = false)]
    deterministic: bool,
    /// Calibration cache file (default: <out>/dp_cache.json).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Validate and print the derived noise scale, then exit.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: "train" or "test".
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional path for the JSON report (always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    /// Run directories containing summary.json.
    runs: Vec<PathBuf>,
    /// Optional path for the CSV table.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything cmd_train records about a finished run.
#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    name: String,
    reference_row: Option<String>,
    dataset: String,
    algorithm: String,
    federated: bool,
    seed: u64,
    sigma: Option<f64>,
    loss_normalizer: String,
    selected_iteration: Option<usize>,
    rounds: usize,
    runtime_seconds: f64,
    /// Test-split report of the end-of-training model; the cohort-selected
    /// snapshot is kept alongside in `selected_test`.
    primary: GroupMetricsReport,
    final_test: GroupMetricsReport,
    selected_test: GroupMetricsReport,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidArchitecture(_)
        | Error::UnknownMetric(_)
        | Error::Calibration(_)
        | Error::DimensionMismatch(_) => 2,
        Error::NonFinite(_) | Error::AllGroupsEmpty | Error::EmptyBatch => 3,
        Error::MissingData(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args, false),
        Command::DryRun(mut args) => {
            args.dry_run = true;
            cmd_train(args, true)
        }
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Table(args) => cmd_table(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_prepare(args: PrepareArgs) -> fpfl::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let (dataset, group_user_counts, skipped) = match args.dataset.as_str() {
        "adult" => {
            let train_csv = args.train_csv.as_deref().ok_or_else(|| {
                Error::MissingData("adult needs --train-csv (raw census file)".into())
            })?;
            let test_csv = args.test_csv.as_deref().ok_or_else(|| {
                Error::MissingData("adult needs --test-csv (raw census file)".into())
            })?;
            let options = adult::AdultOptions {
                include_group_feature: args.include_group_feature,
            };
            let (train, test, stats) = adult::load_adult(train_csv, test_csv, &options)?;
            println!(
                "parsed census data: {} train rows ({} skipped), {} test rows ({} skipped), {} features",
                stats.rows_kept_train,
                stats.rows_skipped_train,
                stats.rows_kept_test,
                stats.rows_skipped_test,
                stats.feature_names.len()
            );
            let split = partition_users(train.labels.len(), args.mean_shard, args.seed)?;
            let dataset = PreparedDataset {
                name: "adult".into(),
                group_count: 2,
                group_names: adult::GROUP_NAMES.iter().map(|s| s.to_string()).collect(),
                label_count: 2,
                train: SplitData::Tabular(train),
                test: SplitData::Tabular(test),
                split,
            };
            let skipped = stats.rows_skipped_train + stats.rows_skipped_test;
            (dataset, vec![], skipped)
        }
        "femnist-synthetic" => {
            let source =
                femnist::synthetic_source(args.users, args.mean_train, args.test_per_user, args.seed)?;
            let built = femnist::build_unfair_femnist(&source, args.seed)?;
            let dataset = PreparedDataset {
                name: "unfair_femnist".into(),
                group_count: 3,
                group_names: femnist::GROUP_NAMES.iter().map(|s| s.to_string()).collect(),
                label_count: 10,
                train: SplitData::Image(built.train),
                test: SplitData::Image(built.test),
                split: built.split,
            };
            (dataset, built.group_user_counts.to_vec(), 0)
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown dataset '{other}' (expected adult or femnist-synthetic)"
            )))
        }
    };

    let packed_path = args.out.join(format!("{}.fpds", dataset.name));
    let manifest_path = args.out.join(format!("{}.manifest.json", dataset.name));
    let bytes = packed::save(&dataset, &packed_path)?;
    let manifest = packed::manifest_for(&dataset, &bytes, group_user_counts, skipped);
    packed::save_manifest(&manifest, &manifest_path)?;
    println!(
        "wrote {} ({} train / {} test rows, {} users) and {}",
        packed_path.display(),
        manifest.n_train,
        manifest.n_test,
        manifest.user_count,
        manifest_path.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, force_dry: bool) -> fpfl::Result<()> {
    let started = Instant::now();
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dataset = packed::load(&args.data)?;
    if config.dataset != dataset.name {
        return Err(Error::InvalidConfig(format!(
            "config expects dataset '{}', packed file holds '{}'",
            config.dataset, dataset.name
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    let cache = args
        .cache
        .clone()
        .unwrap_or_else(|| args.out.join("dp_cache.json"));
    let options = RunOptions {
        serial: args.deterministic,
        calibration_cache: Some(cache),
    };

    if args.dry_run || force_dry {
        let sigma = fed::derived_sigma(&config, &dataset, &options)?;
        match sigma {
            Some(sigma) => println!(
                "config ok: {} on {} for {} iterations; noise multiplier sigma = {sigma:.6}",
                config.name, config.dataset, config.schedule.iterations
            ),
            None => println!(
                "config ok: {} on {} for {} iterations; privacy off",
                config.name, config.dataset, config.schedule.iterations
            ),
        }
        return Ok(());
    }

    let result = fed::run_experiment(&config, &dataset, &options)?;
    let (final_test, selected_test) = fed::evaluate_models(&result, &dataset, &dataset.test)?;
    let primary = final_test.clone();

    let summary = RunSummary {
        name: config.name.clone(),
        reference_row: config.reference_row.clone(),
        dataset: config.dataset.clone(),
        algorithm: config.algorithm.label().to_string(),
        federated: config.is_federated(),
        seed: config.seed,
        sigma: result.sigma,
        loss_normalizer: result.normalizer_used.clone(),
        selected_iteration: result.selected_iteration,
        rounds: result.history.len(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        primary,
        final_test,
        selected_test,
    };

    std::fs::write(args.out.join("config.resolved.toml"), config.to_toml())?;
    std::fs::write(
        args.out.join("metrics.csv"),
        fed::history_to_csv(&result.history, dataset.group_count),
    )?;
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    checkpoint::save(&result.final_model, &args.out.join("checkpoint_final.bin"))?;
    checkpoint::save(
        &result.selected_model,
        &args.out.join("checkpoint_selected.bin"),
    )?;

    println!(
        "{}: {} rounds in {:.1}s; test accuracy {:.3} (selected {:.3})",
        summary.name,
        summary.rounds,
        summary.runtime_seconds,
        summary.final_test.accuracy,
        summary.selected_test.accuracy,
    );
    Ok(())
}

fn split_of<'a>(dataset: &'a PreparedDataset, name: &str) -> fpfl::Result<&'a SplitData> {
    match name {
        "train" => Ok(&dataset.train),
        "test" => Ok(&dataset.test),
        other => Err(Error::InvalidConfig(format!(
            "unknown split '{other}' (expected train or test)"
        ))),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> fpfl::Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let dataset = packed::load(&args.data)?;
    let split = split_of(&dataset, &args.split)?;
    let batch = split.full_batch();
    let report = fpfl::fairness::evaluate_report(&model, &batch, dataset.group_count, 0.5)?;
    let json = fpfl::fairness::report_to_json(&report);
    println!("{json}");
    if let Some(path) = args.out {
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn fmt_gap(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

fn cmd_table(args: TableArgs) -> fpfl::Result<()> {
    if args.runs.is_empty() {
        return Err(Error::InvalidConfig("table needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in &args.runs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rows.push(summary);
    }
    rows.sort_by(|a, b| {
        (a.dataset.as_str(), a.algorithm.as_str(), a.name.as_str()).cmp(&(
            b.dataset.as_str(),
            b.algorithm.as_str(),
            b.name.as_str(),
        ))
    });

    let header = [
        "Dataset", "Run", "Algorithm", "Accuracy", "FNR gap", "EO gap", "DemP gap", "PP gap",
        "Acc gap",
    ];
    let mut csv = header.join(",") + "\n";
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in &rows {
        let row = vec![
            r.dataset.clone(),
            r.name.clone(),
            r.algorithm.clone(),
            format!("{:.3}", r.primary.accuracy),
            fmt_gap(r.primary.fnr_gap),
            fmt_gap(r.primary.eo_gap),
            fmt_gap(r.primary.demp_gap),
            fmt_gap(r.primary.pp_gap),
            fmt_gap(r.primary.acc_gap),
        ];
        csv.push_str(&row.join(","));
        csv.push('\n');
        cells.push(row);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }

    if let Some(path) = args.out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}
