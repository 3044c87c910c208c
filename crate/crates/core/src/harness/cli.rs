//! Command-line entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::baselines::BaselineKind;
use super::config::Config;
use super::experiments::{self, format_comparison};
use super::pipeline::Pipeline;
use crate::factorization::rmse;
use crate::Error;

#[derive(Parser, Debug)]
#[command(name = "freetrial", version, about = "Free-trial adopter selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, split and thin the ratings; cache the tables.
    Prepare(Common),
    /// Train the rating model.
    TrainMf(Common),
    /// Train the ranker.
    TrainBpr(Common),
    /// Build and audit the user tree.
    BuildTree(Common),
    /// Train the selection agent.
    TrainAgent(Common),
    /// Run static baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// One of random, activity, inactivity, high_rating, low_rating; all when omitted.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Precision/recall of the ranker before and/or after trials.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        before: bool,
        #[arg(long)]
        after: bool,
    },
    /// Adopter-count sweep.
    Rq1(Common),
    /// Tree-depth sweep.
    Rq3(Common),
    /// Train if needed, then compare against every baseline.
    Report(Common),
}

/// Usage problems: exit 2.
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(c: &Common) -> std::result::Result<Config, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Usage(format!("config file not found: {}", path.display())));
            }
            Config::load(path).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn pipeline(c: &Common) -> std::result::Result<Pipeline, Failure> {
    Ok(Pipeline::open(load_config(c)?)?)
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Prepare(c) => {
            let p = pipeline(&c)?;
            let prep = p.prepared()?;
            let s = prep.train.stats();
            println!(
                "users {} items {} train {} test {} ranker rows {} promoted {:?}",
                s.num_users,
                s.num_items,
                prep.train.len(),
                prep.test.len(),
                prep.thinned.len(),
                prep.promoted.items()
            );
        }
        Command::TrainMf(c) => {
            let p = pipeline(&c)?;
            let prep = p.prepared()?;
            let mf = p.mf(&prep)?;
            println!("mf test rmse {:.4}", rmse(&mf, &prep.test, true));
        }
        Command::TrainBpr(c) => {
            let p = pipeline(&c)?;
            let prep = p.prepared()?;
            let bpr = p.bpr(&prep)?;
            println!("bpr trained on {} rows, dim {}", bpr.trained_on_rows, bpr.dim());
        }
        Command::BuildTree(c) => {
            let p = pipeline(&c)?;
            let prep = p.prepared()?;
            let tree = p.tree(&p.mf(&prep)?)?;
            println!(
                "tree depth {} arity {} internal nodes {} height {}",
                tree.depth(),
                tree.arity(),
                tree.num_internal(),
                tree.height()
            );
        }
        Command::TrainAgent(c) => {
            let p = pipeline(&c)?;
            let (_, s) = experiments::train_agent(&p)?;
            if let Some(last) = s.last() {
                println!(
                    "trained {} episodes; last avg {:.3}, running max {:.3}",
                    s.len(),
                    last.avg_reward,
                    last.running_max_reward
                );
            }
        }
        Command::Baseline { common, kind } => {
            let p = pipeline(&common)?;
            let kinds = match kind {
                Some(k) => vec![k.parse::<BaselineKind>().map_err(|e| Failure::Usage(e.to_string()))?],
                None => BaselineKind::ALL.to_vec(),
            };
            for r in experiments::run_baselines(&p, &kinds)? {
                println!("{:<12} avg {:.3} max {:.3}", r.name, r.avg_reward, r.max_reward);
            }
        }
        Command::Eval { common, before, after } => {
            let p = pipeline(&common)?;
            let (before, after) = if before || after { (before, after) } else { (true, true) };
            let mut out = serde_json::Map::new();
            if before {
                let q = experiments::ranking_before(&p)?;
                println!("before: precision@{} {:.4} recall@{} {:.4}", q.k, q.precision_at_k, q.k, q.recall_at_k);
                out.insert("before".into(), json!(q));
            }
            if after {
                let prep = p.prepared()?;
                let mut agent = experiments::load_or_train_agent(&p, &prep)?;
                let q = experiments::ranking_after(&p, &mut agent)?;
                println!("after:  precision@{} {:.4} recall@{} {:.4}", q.k, q.precision_at_k, q.k, q.recall_at_k);
                out.insert("after".into(), json!(q));
            }
            let mut merged = p.metrics()?.get("ranking").and_then(|v| v.as_object().cloned()).unwrap_or_default();
            merged.extend(out);
            p.record("ranking", serde_json::Value::Object(merged))?;
        }
        Command::Rq1(c) => {
            let p = pipeline(&c)?;
            let (sweep, _) = experiments::rq1_for_run(&p)?;
            print!("{}", experiments::rq1_csv(&sweep));
        }
        Command::Rq3(c) => {
            let p = pipeline(&c)?;
            for r in experiments::rq3_for_run(&p)? {
                println!(
                    "depth {} arity {} sample {:.3e}s avg_reward {}",
                    r.depth,
                    r.arity,
                    r.mean_sample_seconds,
                    r.avg_reward.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
                );
            }
        }
        Command::Report(c) => {
            let p = pipeline(&c)?;
            let cmp = experiments::compare(&p)?;
            print!("{}", format_comparison(&cmp));
        }
    }
    Ok(())
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
