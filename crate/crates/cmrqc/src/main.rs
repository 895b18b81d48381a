use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmrqc::config::{LabelMapSpec, OutputFormat, PipelineConfig};
use cmrqc::pipeline::{run_batch, BatchOptions, RunMode, QUEUE_FILE};
use cmrqc::validation::{run_validation, write_reports};
use cmrqc_core::loss::{gradcheck, LossConfig};

#[derive(Parser)]
#[command(name = "cmrqc", version, about = "Quality control and volumetry for cine cardiac MR segmentations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelMapArg {
    Identity,
    Acdc,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON pipeline configuration; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report formats (repeatable); default is both.
    #[arg(long, value_enum)]
    format: Vec<FormatArg>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Source label encoding.
    #[arg(long, value_enum)]
    label_map: Option<LabelMapArg>,
    /// Reject files with label codes outside the map.
    #[arg(long)]
    strict_labels: bool,
    #[arg(long)]
    exclude_papillary: bool,
}

#[derive(Args)]
struct BatchArgs {
    /// Directory holding one subdirectory per case.
    root: PathBuf,
    #[arg(long, default_value = "cmrqc-out")]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Post-analysis QC and biomarkers for automated segmentations.
    Analyze {
        #[command(flatten)]
        batch: BatchArgs,
        /// Honour accept/reject decisions logged against the flag queue.
        #[arg(long)]
        apply_review: bool,
        /// Queue whose decisions apply (default: <out>/flag_queue.json).
        #[arg(long, requires = "apply_review")]
        queue: Option<PathBuf>,
    },
    /// Screen ground-truth segmentations.
    QaGt {
        #[command(flatten)]
        batch: BatchArgs,
    },
    /// Agreement of automated against manual segmentations.
    Validate {
        #[arg(long)]
        auto: PathBuf,
        #[arg(long)]
        manual: PathBuf,
        #[arg(long, default_value = "cmrqc-validation")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Finite-difference check of the masked loss gradient.
    LossCheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Review service over a flag queue.
    Serve {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Static files to serve for the review UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Write the synthetic phantom dataset.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn build_config(common: &CommonArgs) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if !common.format.is_empty() {
        config.formats = common
            .format
            .iter()
            .map(|f| match f {
                FormatArg::Json => OutputFormat::Json,
                FormatArg::Csv => OutputFormat::Csv,
            })
            .collect();
    }
    if let Some(j) = common.jobs {
        config.jobs = j;
    }
    match common.label_map {
        Some(LabelMapArg::Identity) => config.label_map = LabelMapSpec::Identity,
        Some(LabelMapArg::Acdc) => config.label_map = LabelMapSpec::Acdc,
        None => {}
    }
    config.strict_labels |= common.strict_labels;
    config.exclude_papillary |= common.exclude_papillary;
    config.validate()?;
    Ok(config)
}

fn batch(args: &BatchArgs, mode: RunMode, apply_review: Option<PathBuf>) -> Result<ExitCode> {
    let config = build_config(&args.common)?;
    let options = BatchOptions {
        mode,
        out_dir: args.out.clone(),
        apply_review,
    };
    let outcome = run_batch(&args.root, &config, &options)?;
    let m = &outcome.manifest;
    println!(
        "discovered {} | curated out {} (failed {}) | processed {} | flagged {} | clean {}",
        m.discovered, m.curated_out, m.failed, m.processed, m.flagged, m.clean
    );
    if let Some(r) = &m.review {
        println!(
            "review: accepted {} | rejected {} | pending {} | analysis set {}",
            r.accepted,
            r.rejected,
            r.pending,
            m.analysis_set.len()
        );
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    for record in m.cases.iter().filter(|r| r.error.is_some()) {
        eprintln!("{}: {}", record.case_id, record.error.as_deref().unwrap_or_default());
    }
    println!("outputs in {} (queue {})", args.out.display(), outcome.queue_path.display());
    Ok(if outcome.failures() > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn validate(auto: &Path, manual: &Path, out: &Path, common: &CommonArgs) -> Result<ExitCode> {
    let config = build_config(common)?;
    let report = run_validation(auto, manual, &config)?;
    write_reports(&report, out, &config)?;
    println!(
        "matched {} | compared {} | failed {} | unmatched auto {} | unmatched manual {}",
        report.matched.len(),
        report.cases.len(),
        report.failed.len(),
        report.unmatched_auto.len(),
        report.unmatched_manual.len()
    );
    for d in &report.dice_summary {
        println!("{:<18} median {:.2} IQR {:.2} (n={})", d.metric, d.median, d.iqr, d.n);
    }
    for (id, e) in &report.failed {
        eprintln!("{id}: {e}");
    }
    Ok(if report.failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn loss_check(seeds: u64, tolerance: f64) -> Result<ExitCode> {
    let results = gradcheck::suite(seeds, &LossConfig::default())?;
    let worst = results
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .context("no seeds checked")?;
    println!(
        "{} patches, {} coordinates each: worst relative error {:.3e} (seed {})",
        results.len(),
        worst.coordinates,
        worst.max_relative_error,
        worst.seed
    );
    Ok(if worst.max_relative_error < tolerance { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Analyze {
            batch: args,
            apply_review,
            queue,
        } => {
            let queue = apply_review.then(|| queue.unwrap_or_else(|| args.out.join(QUEUE_FILE)));
            batch(&args, RunMode::Analyze, queue)
        }
        Command::QaGt { batch: args } => batch(&args, RunMode::QaGt, None),
        Command::Validate {
            auto,
            manual,
            out,
            common,
        } => validate(&auto, &manual, &out, &common),
        Command::LossCheck { seeds, tolerance } => loss_check(seeds, tolerance),
        Command::Serve {
            queue,
            port,
            host,
            ui_dir,
        } => {
            let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
            runtime.block_on(cmrqc::server::serve(&queue, SocketAddr::new(host, port), ui_dir.as_deref()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, seed } => {
            let index = cmrqc::synth::generate(&out, seed)?;
            println!(
                "wrote {} cases ({} with defects) to {}",
                index.cases.len(),
                index.flagged().count(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
