use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vlaudit::audit::{
    compare_runs, emit_controls, emit_report, run_audit, run_controls, write_deltas_csv,
    AuditConfig, AuditReport, Pairing, ReportFormat,
};
use vlaudit::catalog::{default_attribute_prompts, default_calibration_pairs, export_catalog};
use vlaudit::debias::{
    calibrated_projector, orthogonal_projector, save_projector, AttributeSpec, CalibrationPairs,
    DEFAULT_LAMBDA,
};
use vlaudit::embedding_store::{load_embeddings, manifest_path, RecordManifest};
use vlaudit::zeroshot::PredictionMode;
use vlaudit::{Error, Result};

#[derive(Parser)]
#[command(name = "vlaudit", version, about = "Social-bias audits over precomputed CLIP embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the skew, harm and directional audit described by a config file.
    Audit(AuditArgs),
    /// Factor deltas between two audit reports.
    Compare(CompareArgs),
    /// Calibration curves, template robustness and the neutral-image floor.
    Controls(ControlsArgs),
    #[command(subcommand)]
    Debias(DebiasCommand),
    #[command(subcommand)]
    Catalog(CatalogCommand),
}

#[derive(Args)]
struct AuditArgs {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap resamples; 0 disables confidence intervals.
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long, default_value = "all")]
    format: String,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    /// Add-one smoothing of group proportions.
    #[arg(long)]
    smoothing: Option<bool>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Union,
    Pooled,
}

#[derive(Args)]
struct CompareArgs {
    first: PathBuf,
    second: PathBuf,
    /// identity, size, data-size, source or auto
    #[arg(long, default_value = "identity")]
    pairing: String,
    /// Write the delta table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ControlsArgs {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DebiasCommand {
    /// Build a projection matrix from attribute prompt embeddings.
    BuildProjector(BuildProjectorArgs),
}

#[derive(Args)]
struct BuildProjectorArgs {
    /// Attribute prompt embeddings (VLBE).
    #[arg(long)]
    attributes: PathBuf,
    /// Calibration pair embeddings, stored as consecutive rows.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Output VLBE path; a `.projector.json` sidecar is written beside it.
    output: PathBuf,
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Write the prompt catalog JSON consumed by the extractor.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Audit(args) => audit(args),
        Command::Compare(args) => compare(args),
        Command::Controls(args) => controls(args),
        Command::Debias(DebiasCommand::BuildProjector(args)) => build_projector(args),
        Command::Catalog(CatalogCommand::Export { out }) => {
            let mut json = serde_json::to_string_pretty(&export_catalog())?;
            json.push('\n');
            write_output(out.as_deref(), json.as_bytes())
        }
    }
}

fn audit(args: AuditArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let mut cfg = AuditConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match args.resamples {
        Some(0) => cfg.bootstrap = None,
        Some(n) => cfg.bootstrap.get_or_insert_with(Default::default).resamples = n,
        None => {}
    }
    if let Some(p) = args.pooling {
        cfg.pooling = match p {
            PoolingArg::Union => PredictionMode::Union,
            PoolingArg::Pooled => PredictionMode::Pooled,
        };
    }
    if let Some(s) = args.smoothing {
        cfg.smoothing = s;
    }
    let report = run_audit(&cfg)?;
    let dir = args.out.unwrap_or_else(|| cfg.output_path());
    for path in emit_report(&report, &dir, format)? {
        info!("wrote {}", path.display());
    }
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.key.label(), s.reason);
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let pairing: Pairing = args.pairing.parse()?;
    let a = AuditReport::load(&args.first)?;
    let b = AuditReport::load(&args.second)?;
    let rows = compare_runs(&a, &b, pairing)?;
    let mut buf = Vec::new();
    write_deltas_csv(&rows, &mut buf)?;
    write_output(args.out.as_deref(), &buf)
}

fn controls(args: ControlsArgs) -> Result<()> {
    let mut cfg = AuditConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = run_controls(&cfg)?;
    let dir = args.out.unwrap_or_else(|| cfg.output_path().join("controls"));
    for path in emit_controls(&report, &dir)? {
        info!("wrote {}", path.display());
    }
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.key.label(), s.reason);
    }
    Ok(())
}

/// Row labels from the manifest sidecar, else the shipped defaults when the
/// row count matches, else positional names.
fn row_labels(path: &Path, rows: usize, defaults: Vec<String>) -> Result<Vec<String>> {
    let sidecar = manifest_path(path);
    if sidecar.exists() {
        let m = RecordManifest::load(&sidecar)?;
        return Ok(m.records.into_iter().map(|r| r.id).collect());
    }
    if defaults.len() == rows {
        return Ok(defaults);
    }
    Ok((0..rows).map(|i| format!("row{i}")).collect())
}

fn build_projector(args: BuildProjectorArgs) -> Result<()> {
    let emb = load_embeddings(&args.attributes)?;
    let defaults = default_attribute_prompts().into_iter().map(|(_, t)| t).collect();
    let labels = row_labels(&args.attributes, emb.rows(), defaults)?;
    let spec = AttributeSpec::new(labels, &emb)?;
    let raw = orthogonal_projector(&spec)?;
    let projector = match &args.pairs {
        Some(path) => {
            let pairs = load_embeddings(path)?;
            let defaults = default_calibration_pairs()
                .into_iter()
                .flat_map(|(a, b)| [a, b])
                .collect();
            let flat = row_labels(path, pairs.rows(), defaults)?;
            let labels = flat
                .chunks(2)
                .map(|c| (c[0].clone(), c.get(1).cloned().unwrap_or_default()))
                .collect();
            let pairs = CalibrationPairs::from_consecutive_rows(labels, &pairs, args.lambda)?;
            calibrated_projector(&raw, &pairs)?
        }
        None => raw,
    };
    save_projector(&args.output, &projector)?;
    info!("wrote {}", args.output.display());
    Ok(())
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(p, bytes).map_err(|e| Error::io(p, e))
        }
        None => io::stdout().write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}
