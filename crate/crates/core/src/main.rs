use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ebpmse::informative::Tilt;
use ebpmse::io::{self, Format, Table};
use ebpmse::mse::MseVariant;
use ebpmse::pipeline::{self, Pipeline, RunOptions};
use ebpmse::{AreaParameter, Error};

/// Empirical best prediction of small-area parameters with bootstrap MSE
/// estimation and calibrated prediction intervals.
///
/// Exit status: 0 on success, 2 for invalid input, 3 for numerical failure.
/// EBPMSE_THREADS sets the worker thread count.
#[derive(Parser)]
#[command(name = "ebpmse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the unit-level model (and weight models for the informative pipeline).
    Fit(RunArgs),
    /// Empirical best predictors with Monte Carlo standard errors.
    Predict(RunArgs),
    /// Bootstrap MSE estimates, one row per area, functional and method.
    Mse {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict output to these methods (noBC, Add, Mult, Comp, HM, S).
        #[arg(long = "variant", value_name = "METHOD")]
        variants: Vec<MseVariant>,
    },
    /// Naive, calibrated and normal-theory prediction intervals.
    Ci {
        #[command(flatten)]
        run: RunArgs,
        /// Nominal coverage levels.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Run a Monte Carlo study described by a TOML file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Override the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of replicates.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Recompute summaries of a finished study.
    Report {
        #[arg(long)]
        input_dir: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset CSV.
    #[arg(long, short)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// TOML file with run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pipeline: Option<Pipeline>,
    /// Area functional: mean, expmean, quantile:P, pg:Z, gini. Repeatable.
    #[arg(long = "param", value_name = "FUNCTIONAL")]
    params: Vec<AreaParameter>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo draws per predictor.
    #[arg(short = 'L', long = "draws")]
    l: Option<usize>,
    /// Bootstrap replicates.
    #[arg(short = 'B', long = "boot")]
    b: Option<usize>,
    /// Candidate pool of the resampling sampler for non-sampled units.
    #[arg(long)]
    pool_size: Option<usize>,
    /// Draw non-sampled units exactly instead of by resampling.
    #[arg(long)]
    exact_tilt: bool,
    /// Add the x*y interaction to the unit weight model.
    #[arg(long)]
    interaction: bool,
    /// Also compute the full-population bootstrap MSE (noninformative only).
    #[arg(long)]
    standard: bool,
    /// csv or json-lines.
    #[arg(long)]
    format: Option<Format>,
}

/// Settings file accepted by `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    pipeline: Option<Pipeline>,
    parameters: Option<Vec<String>>,
    seed: Option<u64>,
    l: Option<usize>,
    b: Option<usize>,
    pool_size: Option<usize>,
    exact_tilt: Option<bool>,
    interaction: Option<bool>,
    standard: Option<bool>,
    levels: Option<Vec<f64>>,
    format: Option<String>,
}

struct Resolved {
    opts: RunOptions,
    format: Format,
    levels: Vec<f64>,
}

impl RunArgs {
    fn resolve(&self, levels: Option<&[f64]>) -> Result<Resolved> {
        let file: RunFile = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
            }
            None => RunFile::default(),
        };
        let defaults = RunOptions::default();
        let parameters = if !self.params.is_empty() {
            self.params.clone()
        } else if let Some(list) = &file.parameters {
            list.iter().map(|s| s.parse()).collect::<ebpmse::Result<_>>()?
        } else {
            defaults.parameters
        };
        let exact = self.exact_tilt || file.exact_tilt.unwrap_or(false);
        let tilt = if exact {
            Tilt::Exact
        } else {
            match self.pool_size.or(file.pool_size) {
                Some(pool_size) => Tilt::Sir { pool_size },
                None => Tilt::default(),
            }
        };
        let opts = RunOptions {
            pipeline: self.pipeline.or(file.pipeline).unwrap_or_default(),
            parameters,
            l: self.l.or(file.l).unwrap_or(defaults.l),
            b: self.b.or(file.b).unwrap_or(defaults.b),
            seed: self.seed.or(file.seed).unwrap_or(0),
            tilt,
            interaction: self.interaction || file.interaction.unwrap_or(false),
            standard: self.standard || file.standard.unwrap_or(false),
        };
        let format = match (self.format, &file.format) {
            (Some(f), _) => f,
            (None, Some(s)) => s.parse()?,
            (None, None) => Format::Csv,
        };
        let levels = levels.map(<[f64]>::to_vec).or(file.levels).unwrap_or_else(|| vec![0.90, 0.95, 0.99]);
        Ok(Resolved { opts, format, levels })
    }
}

fn write_output(output: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match output {
        Some(p) => {
            // Render fully before touching the file so failures leave no partial output.
            let mut buf = Vec::new();
            f(&mut buf)?;
            fs::write(p, buf).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn emit(table: &Table, output: Option<&Path>, format: Format) -> Result<()> {
    write_output(output, |w| Ok(table.write(w, format)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => {
            let r = args.resolve(None)?;
            let data = io::ingest(&args.input)?;
            let summary = pipeline::fit(&data, &r.opts)?;
            write_output(args.output.as_deref(), |w| {
                serde_json::to_writer_pretty(&mut *w, &summary)?;
                writeln!(w)?;
                Ok(())
            })
        }
        Command::Predict(args) => {
            let r = args.resolve(None)?;
            let data = io::ingest(&args.input)?;
            let draws = pipeline::predict(&data, &r.opts)?;
            emit(&io::prediction_table(&draws), args.output.as_deref(), r.format)
        }
        Command::Mse { run, variants } => {
            let r = run.resolve(None)?;
            let data = io::ingest(&run.input)?;
            let reports = pipeline::mse(&data, &r.opts)?;
            let mut table = io::report_table(&reports);
            if !variants.is_empty() {
                let labels: Vec<&str> = variants.iter().map(|v| v.label()).collect();
                table.rows.retain(|row| matches!(&row[2], io::Cell::Text(m) if labels.contains(&m.as_str())));
            }
            emit(&table, run.output.as_deref(), r.format)
        }
        Command::Ci { run, levels } => {
            let r = run.resolve(levels.as_deref())?;
            let data = io::ingest(&run.input)?;
            let (_, cis) = pipeline::intervals(&data, &r.opts, &r.levels)?;
            emit(&io::interval_table(&cis), run.output.as_deref(), r.format)
        }
        Command::Simulate { config, output_dir, seed, replicates } => {
            let mut cfg = io::load_sim_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = replicates {
                cfg.replicates = m;
            }
            cfg.validate()?;
            let result = ebpmse::sim::run_study(&cfg)?;
            for (m, e) in &result.dropped {
                log::warn!("replicate {m} dropped: {e}");
            }
            io::write_sim_records(&result, &output_dir)?;
            io::write_sim_summaries(&result, &output_dir)?;
            Ok(())
        }
        Command::Report { input_dir, output_dir } => {
            let result = io::read_sim_records(&input_dir)?;
            io::write_sim_summaries(&result, output_dir.as_deref().unwrap_or(&input_dir))?;
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Ok(n) = std::env::var("EBPMSE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("global pool set once");
            }
            _ => {
                eprintln!("error: EBPMSE_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
