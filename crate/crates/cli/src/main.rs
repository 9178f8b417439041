use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use failaudit::audit::{cmd_audit, AuditConfig};
use failaudit::patch_geom::SplitFractions;
use failaudit::prep::{cmd_prep, PrepOptions};
use failaudit::records::write_records_file;
use failaudit::synth::{generate, SynthConfig};
use failaudit::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "failaudit", version, about = "Subgroup failure audit for binary classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bootstrapped subgroup metrics, pairwise AUC tests and FN/FP risk tables.
    Audit(AuditArgs),
    /// Cut 512x512 positive and negative patches from PGM images.
    Prep(PrepArgs),
    /// Write a synthetic prediction records file.
    Synth(SynthArgs),
}

#[derive(Args)]
struct AuditArgs {
    /// Prediction records CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// TOML audit config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Whole-set bootstrap sample sizes, e.g. 1000:13390.
    #[arg(long, value_name = "LO:HI", value_parser = parse_range)]
    size_range: Option<(usize, usize)>,
    #[arg(long, value_name = "normal|percentile")]
    ci: Option<String>,
    /// P0 estimator for the risk ratios.
    #[arg(long, value_name = "control-share|control-incidence")]
    prevalence: Option<String>,
    /// Skip malformed rows instead of failing.
    #[arg(long)]
    lenient: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PrepArgs {
    /// ROI manifest CSV (image, patient_id, x, y, width, height).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_parser = parse_fractions)]
    split: Option<SplitFractions>,
    #[arg(long, default_value_t = 1)]
    negatives_per_roi: usize,
    #[arg(long, default_value_t = 1)]
    negatives_per_image: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML cohort config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output records CSV.
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = lo.trim().parse().map_err(|_| format!("bad lower bound `{lo}`"))?;
    let hi = hi.trim().parse().map_err(|_| format!("bad upper bound `{hi}`"))?;
    Ok((lo, hi))
}

fn parse_fractions(s: &str) -> Result<SplitFractions, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad fraction `{p}`")))
        .collect::<Result<_, _>>()?;
    let [train, validation, test] = parts[..] else {
        return Err("expected three comma-separated fractions".into());
    };
    SplitFractions::new(train, validation, test).map_err(|e| e.to_string())
}

fn audit(args: AuditArgs) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(path) => AuditConfig::load(path)?,
        None => AuditConfig::default(),
    };
    if args.input.is_some() {
        config.input = args.input;
    }
    if args.out.is_some() {
        config.out = args.out;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    if args.size_range.is_some() {
        config.size_range = args.size_range;
    }
    if let Some(ci) = args.ci {
        config.ci = ci;
    }
    if let Some(p) = args.prevalence {
        config.prevalence = p;
    }
    config.lenient |= args.lenient;
    let out = config.out.clone().ok_or_else(|| Error::Config {
        key: "out".into(),
        message: "no output directory given".into(),
    })?;

    let report = cmd_audit(&config)?;
    let written = report.write(&out)?;
    print!("{}", report.render_text());
    eprintln!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn prep(args: PrepArgs) -> Result<(), Error> {
    let options = PrepOptions {
        fractions: args.split.unwrap_or_default(),
        seed: args.seed,
        negatives_per_roi: args.negatives_per_roi,
        negatives_per_image: args.negatives_per_image,
        ..PrepOptions::default()
    };
    let report = cmd_prep(&args.input, &args.out, &options)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let positives = report.patches.iter().filter(|p| p.label).count();
    eprintln!(
        "wrote {} patches ({positives} positive, {} negative) to {}",
        report.patches.len(),
        report.patches.len() - positives,
        args.out.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Error> {
    let mut config = SynthConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dataset = generate(&config)?;
    write_records_file(&dataset.records, &args.out)?;
    eprintln!("wrote {} records to {}", dataset.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Audit(a) => audit(a),
        Command::Prep(a) => prep(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            match e.kind() {
                ErrorKind::Input => ExitCode::from(2),
                ErrorKind::Statistical => ExitCode::from(3),
            }
        }
    }
}
