use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use clinprompt::aggregate::{aggregate_record, AggregationConfig, Imputation};
use clinprompt::ingest::{parse_records, FeatureCatalog, PatientRecord};
use clinprompt::llm::{generate_description, LlmClient};
use clinprompt::metrics::render_summary;
use clinprompt::optimizer::OptimizationBudget;
use clinprompt::runner::{
    ablate_feature, in_split, load_records, resolve_instruction, run_experiment, run_optimization, time_inference,
    LoadedConfig, RunReport, REPORT_FILE,
};
use clinprompt::serialize::render_numeric_block;
use clinprompt::tasks::{TaskId, TaskSpec};

#[derive(Parser)]
#[command(name = "clinprompt", version, about = "Clinical note and vital-sign prompting harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a record file and list rejected lines.
    Ingest {
        data: PathBuf,
        #[arg(long, default_value = "mortality")]
        task: TaskId,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Print the bucketed series of each record as JSON lines.
    Aggregate(SeriesArgs),
    /// Print the numeric block of each record.
    Render(SeriesArgs),
    /// Generate the prose description of each record's series.
    Describe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        record: Option<String>,
    },
    /// Search for a task instruction on the dev split.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        budget: PathBuf,
        /// Must match the config's task when given.
        #[arg(long)]
        task: Option<TaskId>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the repeated experiment described by a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exclude a feature from the series (repeatable).
        #[arg(long = "ablate")]
        ablate: Vec<String>,
    },
    /// Summarize a finished run directory.
    Report { run_dir: PathBuf },
    /// Time `n` uncached endpoint calls.
    Time {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
}

#[derive(Args)]
struct SeriesArgs {
    data: PathBuf,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Only this record.
    #[arg(long)]
    record: Option<String>,
    #[arg(long, default_value_t = 48)]
    window_hours: u32,
    #[arg(long, default_value_t = 6)]
    buckets: u32,
    /// Drop a feature (repeatable).
    #[arg(long)]
    exclude: Vec<String>,
    /// Drop features with an empty bucket instead of forward filling.
    #[arg(long)]
    omit_incomplete: bool,
}

fn catalog(path: Option<&Path>) -> Result<FeatureCatalog> {
    Ok(match path {
        Some(p) => FeatureCatalog::load(p)?,
        None => FeatureCatalog::default_catalog(),
    })
}

fn series_records(args: &SeriesArgs) -> Result<(FeatureCatalog, AggregationConfig, Vec<PatientRecord>)> {
    let cat = catalog(args.catalog.as_deref())?;
    let cfg = AggregationConfig {
        window_hours: args.window_hours,
        bucket_count: args.buckets,
        excluded_features: args.exclude.iter().cloned().collect(),
        imputation: if args.omit_incomplete {
            Imputation::OmitFeature
        } else {
            Imputation::ForwardFill
        },
        ..Default::default()
    };
    cfg.validate_against(&cat)?;
    let parsed = parse_records(&args.data, &cat, &TaskSpec::get(TaskId::Mortality))?;
    for r in &parsed.rejections {
        log::warn!("line {} rejected: {}", r.line, r.reason);
    }
    let records = select(parsed.records, args.record.as_deref())?;
    Ok((cat, cfg, records))
}

fn select(records: Vec<PatientRecord>, id: Option<&str>) -> Result<Vec<PatientRecord>> {
    match id {
        None => Ok(records),
        Some(id) => {
            let picked: Vec<_> = records.into_iter().filter(|r| r.id == id).collect();
            if picked.is_empty() {
                bail!("no record `{id}`");
            }
            Ok(picked)
        }
    }
}

fn client(loaded: &LoadedConfig) -> Result<LlmClient> {
    Ok(LlmClient::new(loaded.client_config())?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, task, catalog: cat } => {
            let parsed = parse_records(&data, &catalog(cat.as_deref())?, &TaskSpec::get(task))?;
            println!("accepted {} of {} lines", parsed.records.len(), parsed.line_count());
            for r in &parsed.rejections {
                let id = r.record_id.as_deref().map(|i| format!(" ({i})")).unwrap_or_default();
                println!("line {}{id}: {}", r.line, r.reason);
            }
        }
        Command::Aggregate(args) => {
            let (cat, cfg, records) = series_records(&args)?;
            for r in &records {
                let agg = aggregate_record(r, &cat, &cfg)?;
                let line = json!({
                    "record_id": r.id,
                    "series": agg.series,
                    "dropped_outside_window": agg.dropped_outside_window,
                    "removed_outliers": agg.removed_outliers,
                });
                println!("{line}");
            }
        }
        Command::Render(args) => {
            let (cat, cfg, records) = series_records(&args)?;
            for (i, r) in records.iter().enumerate() {
                let agg = aggregate_record(r, &cat, &cfg)?;
                if records.len() > 1 {
                    if i > 0 {
                        println!();
                    }
                    println!("# {}", r.id);
                }
                println!("{}", render_numeric_block(&agg.series).text);
            }
        }
        Command::Describe { config, record } => {
            let loaded = LoadedConfig::load(&config)?;
            let pipeline = loaded.pipeline()?;
            if !pipeline.task.has_series() {
                bail!("task `{}` has no time series to describe", pipeline.task.id);
            }
            let parsed = load_records(&loaded, &pipeline.catalog, &pipeline.task)?;
            let records = select(in_split(&parsed.records, loaded.config.split), record.as_deref())?;
            let c = client(&loaded)?;
            for r in &records {
                let agg = aggregate_record(r, &pipeline.catalog, &pipeline.aggregation)?;
                let block = render_numeric_block(&agg.series);
                let d = generate_description(&c, &block, &pipeline.template, &pipeline.description_generation)
                    .with_context(|| format!("record `{}`", r.id))?;
                let line = json!({
                    "record_id": r.id,
                    "description": d.text,
                    "sentence_count": d.check.sentence_count,
                    "violations": d.check.violations,
                });
                println!("{line}");
            }
        }
        Command::Optimize {
            config,
            budget,
            task,
            out,
        } => {
            let loaded = LoadedConfig::load(&config)?;
            if let Some(t) = task {
                if t != loaded.config.task {
                    bail!("--task {t} does not match the config's task {}", loaded.config.task);
                }
            }
            let budget = OptimizationBudget::load(&budget)?;
            let (result, best) = run_optimization(&loaded, &budget, &client(&loaded)?, &out)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            let value = best.value.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("selected ({}, {} {value} at rung {}):", best.strategy, best.metric, best.rung);
            println!("{}", best.text);
            println!("calls charged: {} of {}", best.calls_charged, budget.eval_calls_max);
        }
        Command::Run { config, out, ablate } => {
            let mut loaded = LoadedConfig::load(&config)?;
            if !ablate.is_empty() {
                let cat = loaded.catalog()?;
                for feature in &ablate {
                    loaded.config = ablate_feature(&loaded.config, &cat, feature)?;
                }
            }
            let run = run_experiment(&loaded, &client(&loaded)?, &out)?;
            print!("{}", render_summary(&run.report.median));
            println!("wrote {}", out.display());
        }
        Command::Report { run_dir } => {
            let report = RunReport::load(&run_dir.join(REPORT_FILE))?;
            println!(
                "{} / {} / {}  config {}",
                report.task,
                report.mode,
                report.model,
                &report.config_hash[..12.min(report.config_hash.len())]
            );
            println!("median of {} repetition(s):", report.repetitions.len());
            print!("{}", render_summary(&report.median));
            println!(
                "truncated notes: {} of {} inputs",
                report.truncation.truncated, report.truncation.inputs
            );
            if !report.rejected_lines.is_empty() {
                println!("rejected lines: {}", report.rejected_lines.len());
            }
            if !report.description_issues.is_empty() {
                println!("descriptions with issues: {}", report.description_issues.len());
            }
        }
        Command::Time { config, n } => {
            let loaded = LoadedConfig::load(&config)?;
            let pipeline = loaded.pipeline()?;
            let parsed = load_records(&loaded, &pipeline.catalog, &pipeline.task)?;
            let records = in_split(&parsed.records, loaded.config.split);
            let instruction = resolve_instruction(&loaded)?;
            let report = time_inference(
                &pipeline,
                &records,
                &instruction,
                &client(&loaded)?,
                n,
                loaded.config.meter_command.as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

/// The error chain, skipping causes whose text the outer message already contains.
fn describe_error(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe_error(&e));
            ExitCode::FAILURE
        }
    }
}
