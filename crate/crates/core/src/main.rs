use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use coalpsm::datamodel::{split_by_region, validate, write_zip_table};
use coalpsm::exposure::classify;
use coalpsm::pipeline::{
    analyze, emit_match_report, emit_report, load_dataset, match_only, read_irr_table, render_human_table, AnalysisMode,
    PipelineError, RunConfig, SweepRange,
};
use coalpsm::synth::{generate, write_truth_csv};

#[derive(Parser)]
#[command(name = "coalpsm", version, about = "Propensity score matched analysis of coal emissions exposure and IHD hospitalizations")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// ZIP-level input CSV (overrides the config).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Exposure cutoff in µg/m³.
    #[arg(long, global = true)]
    cutoff: Option<f64>,
    /// Cutoff sweep as LO:HI:STEP.
    #[arg(long, global = true)]
    sweep: Option<String>,
    /// Seed for `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Primary,
    Secondary,
    Stratified,
    Daps,
}

impl From<ModeArg> for AnalysisMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Primary => AnalysisMode::Primary,
            ModeArg::Secondary => AnalysisMode::SecondaryPm25,
            ModeArg::Stratified => AnalysisMode::Stratified,
            ModeArg::Daps => AnalysisMode::Daps,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the input table.
    IngestCheck,
    /// Label ZIPs high-exposed or control at the cutoff.
    Classify,
    /// Propensity score matching per region (matched sets and balance only).
    Match {
        #[arg(long, value_enum, default_value = "primary")]
        mode: ModeArg,
    },
    /// Distance-adjusted propensity score matching analysis.
    Daps,
    /// Propensity score quintile stratification analysis.
    Stratify,
    /// Matched outcome analysis.
    Analyze {
        #[arg(long, value_enum, default_value = "primary")]
        mode: ModeArg,
    },
    /// Primary analysis across a range of cutoffs.
    Sweep,
    /// Write a synthetic dataset and its ground truth.
    Synth {
        /// ZIPs per region (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Print the IRR table of a finished run.
    Report,
}

fn resolve_config(opts: &Opts) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &opts.input {
        cfg.input = Some(p.clone());
    }
    if let Some(c) = opts.cutoff {
        cfg.cutoff = c;
    }
    if let Some(s) = &opts.sweep {
        cfg.sweep = SweepRange::parse(s)?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = Some(seed);
        cfg.synth.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn run_analysis(cfg: &RunConfig, mode: AnalysisMode) -> Result<(), PipelineError> {
    let ds = load_dataset(cfg)?;
    let report = analyze(&ds, cfg, mode)?;
    for flag in report.flags() {
        log::warn!("{flag}");
    }
    let files = emit_report(&report, &cfg.output_dir)?;
    info!("wrote {} files to {}", files.len(), cfg.output_dir.display());
    if mode != AnalysisMode::Sweep {
        let table = read_irr_table(File::open(cfg.output_dir.join("irr_table.csv"))?)?;
        print!("{}", render_human_table(&table));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = resolve_config(&cli.opts)?;
    match cli.command {
        Command::IngestCheck => {
            let path = cfg.input.clone().ok_or_else(|| PipelineError::Config("no input file given".into()))?;
            let raw = coalpsm::datamodel::read_zip_table(&path, &cfg.columns).map_err(|e| PipelineError::Data(e.to_string()))?;
            let violations = validate(&raw);
            for v in &violations {
                println!("invalid {}: {}", v.zip_id, v.rule);
            }
            let ds = raw.drop_invalid();
            println!(
                "rows accepted {} dropped (unparseable) {} dropped (invalid) {}",
                ds.len(),
                ds.provenance.dropped,
                ds.provenance.invalid
            );
            for (region, part) in split_by_region(&ds) {
                println!("{region}: {} zips", part.len());
            }
            if ds.is_empty() {
                return Err(PipelineError::Data("no valid rows".into()));
            }
            Ok(())
        }
        Command::Classify => {
            let ds = load_dataset(&cfg)?;
            let path = cfg.output_dir.join("classification.csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record(["zip", "region", "coal_influence", "label"]).map_err(io)?;
            for (region, part) in split_by_region(&ds) {
                let c = classify(&part, cfg.cutoff).map_err(|e| PipelineError::Config(e.to_string()))?;
                println!("{region}: {} high-exposed, {} control", c.n_high, c.n_control);
                for a in &c.assignments {
                    w.write_record([a.zip_id.as_str(), region.code(), &a.influence.to_string(), a.label.as_str()])
                        .map_err(io)?;
                }
            }
            w.flush()?;
            Ok(())
        }
        Command::Match { mode } => {
            let ds = load_dataset(&cfg)?;
            let matches = match_only(&ds, &cfg, mode.into())?;
            for m in &matches {
                println!(
                    "{}: {} pairs (caliper {:.4}), {} discarded",
                    m.region,
                    m.matched.n_pairs(),
                    m.matched.caliper,
                    m.matched.discarded.len()
                );
            }
            emit_match_report(&matches, &cfg.output_dir)?;
            Ok(())
        }
        Command::Daps => run_analysis(&cfg, AnalysisMode::Daps),
        Command::Stratify => run_analysis(&cfg, AnalysisMode::Stratified),
        Command::Analyze { mode } => run_analysis(&cfg, mode.into()),
        Command::Sweep => run_analysis(&cfg, AnalysisMode::Sweep),
        Command::Synth { n } => {
            if let Some(n) = n {
                cfg.synth.n_per_region = n;
            }
            let (ds, truth) = generate(&cfg.synth).map_err(PipelineError::Config)?;
            let data_path = cfg.output_dir.join("synthetic_zips.csv");
            let truth_path = cfg.output_dir.join("synthetic_truth.csv");
            write_zip_table(&ds, create(&data_path)?).map_err(|e| PipelineError::Io(e.to_string()))?;
            write_truth_csv(&truth, create(&truth_path)?).map_err(|e| PipelineError::Io(e.to_string()))?;
            println!("wrote {} zips to {}", ds.len(), data_path.display());
            Ok(())
        }
        Command::Report => {
            let path = cfg.output_dir.join("irr_table.csv");
            let file = File::open(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            print!("{}", render_human_table(&read_irr_table(file)?));
            Ok(())
        }
    }
}

fn io(e: csv::Error) -> PipelineError {
    PipelineError::Io(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
