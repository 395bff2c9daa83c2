use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sapsim::data::{load_dataset, validate_schema};
use sapsim::harness::{
    apply_primary, emit_report, to_json, Manifest, ReportFormat, Study, StudyConfig, ITERATIONS_FILE,
    MANIFEST_FILE, METRICS_FILE, REPORT_FILE, SELECTION_FILE,
};
use sapsim::metrics::{compute_report, read_records, select_estimator, MetricsReport, SelectionReport, SelectionScheme};
use sapsim::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sapsim", version, about = "Plasmode simulation for pre-specifying causal estimators")]
struct Cli {
    /// Study configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the config and dataset.
    Validate,
    /// Compute and print the true effect.
    Truth,
    /// Run the full study and write all outputs.
    Run,
    /// Re-aggregate metrics from an iterations file.
    Metrics {
        #[arg(long)]
        iterations: Option<PathBuf>,
    },
    /// Re-run a selection scheme on a stored metrics report.
    Select {
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Built-in scheme; defaults to the config's scheme.
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
    },
    /// Emit the analysis plan from stored outputs.
    Report {
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        /// Also run the primary analysis on the source data.
        #[arg(long)]
        apply: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Observational,
    Trial,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Markdown,
    Json,
}

fn load_config(cli: &Cli) -> Result<StudyConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = StudyConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    if let Some(o) = &cli.out {
        return Ok(o.clone());
    }
    Ok(load_config(cli)?.output_dir)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate => {
            let cfg = load_config(cli)?;
            cfg.validate()?;
            let ds = load_dataset(&cfg.dataset.path, &cfg.dataset.schema)?;
            let report = validate_schema(&ds, cfg.study_type());
            if !report.is_empty() {
                for f in &report.findings {
                    eprintln!(
                        "{:?}: {}{}",
                        f.kind,
                        f.message,
                        f.column.as_ref().map(|c| format!(" (column `{c}`)")).unwrap_or_default()
                    );
                }
                let f = &report.findings[0];
                return Err(Error::SchemaMismatch {
                    column: f.column.clone().unwrap_or_else(|| "<dataset>".into()),
                    detail: f.message.clone(),
                });
            }
            Study::prepare(cfg)?;
            println!("ok: {} rows", ds.n_rows());
        }
        Command::Truth => {
            let study = Study::prepare(load_config(cli)?)?;
            print!("{}", to_json(&study.truth()?)?);
        }
        Command::Run => {
            let study = Study::prepare(load_config(cli)?)?;
            let results = study.run()?;
            let dir = study.config.output_dir.clone();
            results.write(&dir)?;
            println!(
                "wrote {} records to {}; primary analysis: {}",
                results.records.len(),
                dir.display(),
                results.selection.winner
            );
        }
        Command::Metrics { iterations } => {
            let dir = out_dir(cli)?;
            let path = iterations.clone().unwrap_or_else(|| dir.join(ITERATIONS_FILE));
            if !path.exists() {
                return Err(Error::FileNotFound(path));
            }
            let records = read_records(std::fs::File::open(&path)?)?;
            let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
            let study = &manifest.config;
            let candidates: Vec<_> = study
                .candidates
                .iter()
                .map(|c| sapsim::metrics::Candidate {
                    id: c.id.clone(),
                    axes: c.axes.clone(),
                })
                .collect();
            let report = compute_report(&records, &manifest.truth, &candidates)?;
            print!("{}", to_json(&report)?);
        }
        Command::Select { metrics, scheme } => {
            let dir = out_dir(cli)?;
            let path = metrics.clone().unwrap_or_else(|| dir.join(METRICS_FILE));
            let report: MetricsReport = read_json(&path)?;
            let scheme = match scheme {
                Some(SchemeArg::Observational) => SelectionScheme::observational(),
                Some(SchemeArg::Trial) => SelectionScheme::trial(),
                None => load_config(cli)?.scheme(),
            };
            print!("{}", to_json(&select_estimator(&report, &scheme)?)?);
        }
        Command::Report { format, apply } => {
            let dir = out_dir(cli)?;
            let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
            let metrics: MetricsReport = read_json(&dir.join(METRICS_FILE))?;
            let selection: SelectionReport = read_json(&dir.join(SELECTION_FILE))?;
            let fmt = match format {
                FormatArg::Markdown => ReportFormat::Markdown,
                FormatArg::Json => ReportFormat::Json,
            };
            let mut doc = emit_report(&manifest, &metrics, &selection, fmt)?;
            if *apply {
                let study = Study::prepare(manifest.config.clone())?;
                let line = apply_primary(&study, &selection)?;
                doc.push_str(&format!("\n## Result\n\n{line}\n"));
            }
            if fmt == ReportFormat::Markdown {
                std::fs::write(dir.join(REPORT_FILE), &doc)?;
            }
            print!("{doc}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
