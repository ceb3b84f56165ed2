use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use synflow_core::dataset::SplitPlan;
use synflow_core::eval::{report_csv, report_table, BucketSpec};
use synflow_core::pipeline::{self, PipelineConfig, PipelineError, Predictor};

/// Synthetic LiDAR scene-flow data engine.
#[derive(Parser)]
#[command(name = "synflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sequences from a pipeline config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictor on every sequence in a directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `ego`, `nn`, or a directory of SYNP files.
        #[arg(long)]
        pred: String,
        /// `width,max,min` in m/s.
        #[arg(long, default_value = "0.4,20,0.5")]
        buckets: String,
        /// JSON report, or CSV when the path ends in `.csv`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Frame, point and speed statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Also write the speed histogram as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Assign sequences to splits and print the assignment as JSON.
    Splits {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Run(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn generate(config: &Path, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> Result<bool, Failure> {
    let mut cfg = PipelineConfig::load(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let manifest = pipeline::run_generate(&cfg)?;
    for s in &manifest.sequences {
        println!("{}  {} frames  dynamic frames {:.3}", s.file, s.n_frames, s.dynamic_frame_ratio);
    }
    for f in &manifest.failures {
        eprintln!("failed {}: {}", f.file, f.error);
    }
    println!(
        "{} written, {} failed -> {}",
        manifest.sequences.len(),
        manifest.failures.len(),
        cfg.output_dir.join(pipeline::MANIFEST_FILE).display()
    );
    Ok(manifest.failures.is_empty())
}

fn eval(data: &Path, pred: &str, buckets: &str, report: &Path) -> Result<bool, Failure> {
    let spec = BucketSpec::parse(buckets).map_err(|e| Failure::Config(e.into()))?;
    let predictor: Predictor = pred.parse().expect("infallible");
    let out = pipeline::run_eval(data, &predictor, spec)?;
    let rows = out.rows();
    print!("{}", report_table(&rows));
    if report.extension().is_some_and(|e| e == "csv") {
        write_file(report, report_csv(&rows).as_bytes())?;
    } else {
        let mut json = serde_json::to_vec_pretty(&out).context("serializing report")?;
        json.push(b'\n');
        write_file(report, &json)?;
    }
    Ok(true)
}

fn stats(data: &Path, csv: Option<PathBuf>) -> Result<bool, Failure> {
    let st = pipeline::run_stats(data, BucketSpec::default())?;
    print!("{}", st.render_text());
    if let Some(p) = csv {
        write_file(&p, st.render_csv().as_bytes())?;
    }
    Ok(true)
}

fn splits(data: &Path, plan: &Path) -> Result<bool, Failure> {
    let bytes = std::fs::read(plan).with_context(|| format!("reading {}", plan.display())).map_err(Failure::Config)?;
    let plan: SplitPlan = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", plan.display()))
        .map_err(Failure::Config)?;
    let assignment = pipeline::run_splits(data, &plan)?;
    println!("{}", serde_json::to_string_pretty(&assignment).context("serializing splits")?);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, seed, workers, out } => generate(&config, seed, workers, out),
        Command::Eval { data, pred, buckets, report } => eval(&data, &pred, &buckets, &report),
        Command::Stats { data, csv } => stats(&data, csv),
        Command::Splits { data, plan } => splits(&data, &plan),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
