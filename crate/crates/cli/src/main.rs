use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rkhs_conformal::experiments::{self, ExperimentConfig, RunMeta};
use rkhs_conformal::Result;

#[derive(Parser)]
#[command(name = "rkhs-cp", version, about = "Approximate full conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Thickness gap and bound against the sample size, with log-log slopes.
    Sweep(Common),
    /// Region length, coverage and relative time per method.
    Compare(Common),
    /// Region and p-value curve for one query.
    Region(WithData),
    /// Choose lambda by leave-one-out region measure, then build the region.
    SelectLambda(WithData),
    /// Write a synthetic friedman1 dataset.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Small sample-size schedule for quick runs.
    #[arg(long)]
    desk: bool,
}

#[derive(Args)]
struct WithData {
    #[command(flatten)]
    common: Common,
    /// CSV with feature columns and a `y` column, overriding the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

impl WithData {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let (mut cfg, out) = self.common.resolve()?;
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        Ok((cfg, out))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |s| format!("{s:.3}"))
}

fn done(out: &Path) {
    println!("wrote {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sweep(c) => {
            let (cfg, out) = c.resolve()?;
            let report = experiments::sweep(&cfg, c.desk)?;
            report.write(&out, &RunMeta::new("sweep", &cfg))?;
            for s in &report.slopes {
                println!("{:<20} {:<6} slope {}", s.method, s.quantity, fmt_opt(s.slope));
            }
            done(&out);
        }
        Command::Compare(c) => {
            let (cfg, out) = c.resolve()?;
            let report = experiments::compare(&cfg)?;
            report.write(&out, &RunMeta::new("compare", &cfg))?;
            for s in &report.summary {
                println!(
                    "{:<20} length {:>9.4}  coverage {:.3}  time x{:.2}",
                    s.method, s.mean_length, s.coverage, s.relative_time
                );
            }
            done(&out);
        }
        Command::Region(c) => {
            let (cfg, out) = c.resolve()?;
            let report = experiments::region(&cfg)?;
            report.write(&out, &RunMeta::new("region", &cfg))?;
            for s in &report.summaries {
                println!("{:<20} measure {:>9.4}  {:?}", s.method, s.measure, s.intervals);
            }
            done(&out);
        }
        Command::SelectLambda(c) => {
            let (cfg, out) = c.resolve()?;
            let report = experiments::select_lambda(&cfg)?;
            report.write(&out, &RunMeta::new("select-lambda", &cfg))?;
            for r in &report.rows {
                println!("lambda {:<8} mean LOO measure {:.4}", r.lambda, r.mean_loo_measure);
            }
            println!("chosen lambda {}", report.chosen);
            done(&out);
        }
        Command::GenData(c) => {
            let (cfg, out) = c.resolve()?;
            let path = experiments::gen_data(&cfg, &out)?;
            done(&path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
