//! The `acdc` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregator::AggregateOptions;
use crate::catalog::{validate_catalog, Catalog, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "acdc", version, about = "Train regression models over normalized relational data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its parameters.
    Train(TrainArgs),
    /// Print the variable order, register sizes and distinct aggregates.
    Plan(ModelArgs),
    /// Compute and print every root aggregate.
    Aggregates(ModelArgs),
    /// Verify the functional dependencies and print the regularizer matrices.
    FdCheck(ModelArgs),
    /// Dump the brute-force dense Σ, c and s_Y.
    #[command(hide = true)]
    Oracle(ModelArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    use_fd: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Model output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Include wall-clock timings in the report.
    #[arg(long)]
    timings: bool,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: crate::catalog::CatalogError| e.to_string())
}

impl ModelArgs {
    /// Loads the config and applies flag overrides, then revalidates.
    fn catalog(&self) -> Result<(Catalog, PathBuf)> {
        let (mut catalog, base) = pipeline::load_catalog(&self.config)?;
        let old = catalog.model.clone();
        if let Some(kind) = self.model {
            if kind != old.kind {
                let mut spec = ModelSpec::new(kind);
                spec.lambda = old.lambda;
                spec.seed = old.seed;
                spec.tolerance = old.tolerance;
                spec.use_fd = old.use_fd;
                spec.rank = old.rank;
                if old.max_iters != ModelSpec::new(old.kind).max_iters {
                    spec.max_iters = old.max_iters;
                }
                catalog.model = spec;
            }
        }
        let m = &mut catalog.model;
        if let Some(r) = self.rank {
            m.rank = r;
        }
        if let Some(l) = self.lambda {
            m.lambda = l;
        }
        if let Some(s) = self.seed {
            m.seed = s;
        }
        if let Some(i) = self.max_iters {
            m.max_iters = i;
        }
        if let Some(t) = self.tolerance {
            m.tolerance = t;
        }
        if self.use_fd {
            m.use_fd = true;
        }
        Ok((validate_catalog(catalog)?, base))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn run_command(command: Command) -> Result<String> {
    match command {
        Command::Train(args) => {
            let (catalog, base) = args.model.catalog()?;
            let outcome = pipeline::train(&catalog, &base, args.timings)?;
            let model = to_json(&outcome.model);
            if let Some(path) = &args.report {
                write_file(path, &to_json(&outcome.report))?;
            }
            match &args.out {
                Some(path) => {
                    write_file(path, &model)?;
                    Ok(String::new())
                }
                None => Ok(model),
            }
        }
        Command::Plan(args) => {
            let (catalog, _) = args.catalog()?;
            let components = crate::planner::enumerate_components(&catalog, catalog.model.kind);
            Ok(crate::planner::Plan::build(&catalog, components)?.describe())
        }
        Command::Aggregates(args) => {
            let (catalog, base) = args.catalog()?;
            let db = pipeline::load_database(&catalog, &base)?;
            let prepared = pipeline::prepare(&catalog, &db, AggregateOptions::default())?;
            Ok(pipeline::describe_aggregates(&prepared, &db))
        }
        Command::FdCheck(mut args) => {
            args.use_fd = true;
            if args.model.is_none() {
                args.model = Some(ModelKind::Lr);
            }
            let (catalog, base) = args.catalog()?;
            let db = pipeline::load_database(&catalog, &base)?;
            let prepared = pipeline::prepare(&catalog, &db, AggregateOptions::default())?;
            Ok(pipeline::describe_fds(&catalog, &prepared, &db))
        }
        Command::Oracle(args) => {
            let (catalog, base) = args.catalog()?;
            let db = pipeline::load_database(&catalog, &base)?;
            pipeline::describe_oracle(&catalog, &db)
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_command(cli.command) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
