//! Command-line driver. Subcommands:
//!
//! ```text
//! bioproc simulate  --out DIR [--config PATH] [--seed U64]
//! bioproc fit       --dataset PATH --out DIR [--config PATH] [--seed U64]
//! bioproc optimize  --draws DIR --out DIR [--dataset PATH] [--config PATH] [--seed U64]
//! bioproc evaluate  --policy PATH --out DIR [--config PATH] [--seed U64]
//! bioproc shapley   --policy PATH --draws DIR --observe s0,..,s4,a --h N --t N --out DIR
//! bioproc benchmark --out DIR [--reps N]
//! bioproc profiles  --policy PATH --out DIR [--config PATH] [--seed U64]
//! bioproc integrated --out DIR [--config PATH] [--seed U64]
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 i/o.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use bioproc_cli::bench;
use bioproc_cli::config::ExperimentConfig;
use bioproc_cli::integrated;
use bioproc_cli::pipeline;
use ndarray::Array1;

struct Args {
    flags: BTreeMap<String, String>,
}

impl Args {
    fn parse(raw: &[String]) -> Result<Args, String> {
        let mut flags = BTreeMap::new();
        let mut it = raw.iter();
        while let Some(arg) = it.next() {
            let Some(name) = arg.strip_prefix("--") else {
                return Err(format!("unexpected argument {arg}"));
            };
            let value = it
                .next()
                .ok_or_else(|| format!("flag --{name} needs a value"))?;
            if flags.insert(name.to_string(), value.clone()).is_some() {
                return Err(format!("flag --{name} given twice"));
            }
        }
        Ok(Args { flags })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.flags.get(name).map(PathBuf::from)
    }

    fn require_path(&self, name: &str) -> Result<PathBuf, String> {
        self.path(name)
            .ok_or_else(|| format!("missing required flag --{name}"))
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig, String> {
    let mut cfg = match args.path("config") {
        Some(path) => ExperimentConfig::from_file(&path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.flags.get("seed") {
        let seed: u64 = seed.parse().map_err(|_| "seed must be a u64".to_string())?;
        cfg.seed = seed;
        cfg.optimizer.seed = seed;
    }
    Ok(cfg)
}

enum CmdError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl From<bioproc::io::IoError> for CmdError {
    fn from(e: bioproc::io::IoError) -> Self {
        match &e {
            bioproc::io::IoError::Io(_) => CmdError::Io(e.to_string()),
            bioproc::io::IoError::Json(_) => CmdError::Io(e.to_string()),
            other => {
                // integration failures surface through schema strings; map
                // anything mentioning a non-finite state to the numeric code
                let text = other.to_string();
                if text.contains("integration failure") || text.contains("non-finite") {
                    CmdError::Numeric(text)
                } else {
                    CmdError::Config(text)
                }
            }
        }
    }
}

fn run(cmd: &str, args: &Args) -> Result<(), CmdError> {
    match cmd {
        "simulate" => {
            let cfg = load_config(args).map_err(CmdError::Config)?;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let result = pipeline::cmd_simulate(&cfg, &out)?;
            println!("wrote {}", result.dataset_path.display());
            Ok(())
        }
        "fit" => {
            let cfg = load_config(args).map_err(CmdError::Config)?;
            let dataset = args.require_path("dataset").map_err(CmdError::Config)?;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let draws_dir = pipeline::cmd_fit(&cfg, &dataset, &out)?;
            println!("wrote {}", draws_dir.display());
            Ok(())
        }
        "optimize" => {
            let cfg = load_config(args).map_err(CmdError::Config)?;
            let draws = args.require_path("draws").map_err(CmdError::Config)?;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let dataset = args.path("dataset");
            let result = pipeline::cmd_optimize(&cfg, &draws, dataset.as_deref(), &out)?;
            println!("wrote {}", result.policy_path.display());
            println!("wrote {}", result.trace_path.display());
            Ok(())
        }
        "evaluate" => {
            let cfg = load_config(args).map_err(CmdError::Config)?;
            let policy = args.require_path("policy").map_err(CmdError::Config)?;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let (path, metrics) = pipeline::cmd_evaluate(&cfg, &[policy], &out)?;
            for m in &metrics {
                println!(
                    "{}: reward {:.3} +- {:.3}, titer {:.3} +- {:.3}",
                    m.name,
                    m.reward_mean(),
                    m.reward_se(),
                    m.titer_mean(),
                    m.titer_se()
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        "shapley" => {
            let policy = args.require_path("policy").map_err(CmdError::Config)?;
            let draws = args.require_path("draws").map_err(CmdError::Config)?;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let observe = args
                .flags
                .get("observe")
                .ok_or_else(|| CmdError::Config("missing --observe s0,s1,s2,s3,s4,a".into()))?;
            let values: Vec<f64> = observe
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CmdError::Config(format!("bad --observe: {e}")))?;
            if values.len() != pipeline::STATE_DIM + 1 {
                return Err(CmdError::Config(format!(
                    "--observe needs {} values",
                    pipeline::STATE_DIM + 1
                )));
            }
            let parse_idx = |name: &str| -> Result<usize, CmdError> {
                args.flags
                    .get(name)
                    .ok_or_else(|| CmdError::Config(format!("missing --{name}")))?
                    .parse()
                    .map_err(|_| CmdError::Config(format!("--{name} must be an index")))
            };
            let h = parse_idx("h")?;
            let t = parse_idx("t")?;
            let coord = args
                .flags
                .get("coord")
                .map(|s| s.parse::<usize>())
                .transpose()
                .map_err(|_| CmdError::Config("--coord must be an index".into()))?
                .unwrap_or(1); // citrate
            let state = Array1::from(values[..pipeline::STATE_DIM].to_vec());
            let action = Array1::from(vec![values[pipeline::STATE_DIM]]);
            let path =
                pipeline::cmd_shapley(&policy, &draws, &state, &action, h, t, coord, &out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        "benchmark" => {
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let reps = args
                .flags
                .get("reps")
                .map(|s| s.parse::<usize>())
                .transpose()
                .map_err(|_| CmdError::Config("--reps must be a count".into()))?
                .unwrap_or(30);
            let (path, rows) = bench::cmd_benchmark(&out, reps)?;
            for r in &rows {
                println!(
                    "H={} {}: {:.6} s +- {:.6}",
                    r.horizon, r.method, r.mean_seconds, r.stderr_seconds
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        "profiles" => {
            let cfg = load_config(args).map_err(CmdError::Config)?;
            let policy = args.require_path("policy").map_err(CmdError::Config)?;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let path = pipeline::cmd_profiles(&cfg, &policy, &out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        "integrated" => {
            let mut cfg = load_config(args).map_err(CmdError::Config)?;
            cfg.scenario = bioproc_cli::config::Scenario::Integrated;
            let out = args.require_path("out").map_err(CmdError::Config)?;
            let result = integrated::run_integrated(&cfg, &out)?;
            for m in &result.metrics {
                println!(
                    "{}: reward {:.3}, yield {:.3}, purity {:.4} ({} failed)",
                    m.name,
                    m.reward_mean(),
                    m.yield_mean(),
                    m.purity_mean(),
                    m.failed_replications
                );
            }
            println!("wrote {}", result.report_path.display());
            Ok(())
        }
        other => Err(CmdError::Config(format!(
            "unknown subcommand {other}; expected simulate | fit | optimize | evaluate | shapley | benchmark | profiles | integrated"
        ))),
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let Some((cmd, rest)) = raw.split_first() else {
        eprintln!("usage: bioproc <subcommand> [flags]; see the README");
        return ExitCode::from(2);
    };
    let args = match Args::parse(rest) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("argument error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cmd, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(CmdError::Numeric(e)) => {
            eprintln!("numeric failure: {e}");
            ExitCode::from(3)
        }
        Err(CmdError::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::from(4)
        }
    }
}
