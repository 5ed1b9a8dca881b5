//! Batch entry point: scenario runs, topology transformation and acceptance
//! suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use relaynet::dot::{build_world, parse_dot};
use relaynet::ifr::{cpg, plan_transform, IfrError, TargetGraph};
use relaynet::scenario::{run_scenario, RunOverrides, Scenario, EXIT_BUDGET, EXIT_OK, EXIT_PARSE, EXIT_VIOLATION};
use relaynet::suites::{run_suite, SuiteConfig, SUITES};

#[derive(Parser)]
#[command(name = "relaynet", version, about = "Relay layer simulator and checkers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a TOML scenario and print a key=value report.
    Run {
        scenario: PathBuf,
        /// Write the per-step trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write a DOT frame every N steps into DIR.
        #[arg(long, num_args = 2, value_names = ["N", "DIR"])]
        dot_every: Option<Vec<String>>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rewrite the relay graph in SOURCE into the one in TARGET with the
    /// introduction, fusion and reversal rules.
    Transform {
        source: PathBuf,
        target: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the executed plan as JSON.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run one acceptance suite.
    Suite {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        name: String,
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run {
            scenario,
            trace,
            dot_every,
            max_steps,
            seed,
        } => run(&scenario, trace, dot_every, max_steps, seed),
        Cmd::Transform {
            source,
            target,
            seed,
            plan,
        } => transform(&source, &target, seed, plan.as_deref()),
        Cmd::Suite { name, runs, seed } => suite(&name, runs, seed),
    };
    ExitCode::from(code)
}

fn run(
    path: &Path,
    trace: Option<PathBuf>,
    dot_every: Option<Vec<String>>,
    max_steps: Option<u64>,
    seed: Option<u64>,
) -> u8 {
    let dot_every = match dot_every.as_deref() {
        Some([n, dir]) => match n.parse::<u64>() {
            Ok(n) if n > 0 => Some((n, PathBuf::from(dir))),
            _ => {
                eprintln!("error: --dot-every needs a positive step count, got {n:?}");
                return EXIT_PARSE;
            }
        },
        _ => None,
    };
    let ov = RunOverrides {
        seed,
        max_steps,
        trace,
        dot_every,
    };
    let result = Scenario::load(path).and_then(|sc| run_scenario(&sc, &path.display().to_string(), &ov));
    match result {
        Ok(report) => {
            print!("{}", report.render());
            report.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_target(path: &Path) -> Result<TargetGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let g = parse_dot(&text).with_context(|| path.display().to_string())?;
    g.to_target().with_context(|| path.display().to_string())
}

fn transform(source: &Path, target: &Path, seed: u64, plan_out: Option<&Path>) -> u8 {
    let inputs = read_target(source).and_then(|s| {
        let t = read_target(target)?;
        let (w, _) = build_world(&s).map_err(|e| anyhow!("{}: {e}", source.display()))?;
        Ok((w, t))
    });
    let (world, tg) = match inputs {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_PARSE;
        }
    };
    let done = match plan_transform(world, &tg, seed) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                IfrError::Unsettled(_) => EXIT_BUDGET,
                IfrError::ConnectivityLost(_) => EXIT_VIOLATION,
                _ => EXIT_PARSE,
            };
        }
    };
    let plan = &done.plan;
    let trees_equal = TargetGraph::from_world(&done.world).canonical_trees() == tg.canonical_trees();
    let cpg_equal = if tg.is_simple() {
        cpg(&done.world).is_ok_and(|g| g == tg.process_graph()).to_string()
    } else {
        "n/a".to_string()
    };
    println!("source={}", source.display());
    println!("target={}", target.display());
    println!("process_rules={}", plan.process_rules.len());
    println!("relay_steps={}", plan.steps.len());
    for (i, n) in plan.phase_steps.iter().enumerate() {
        println!("phase{}_steps={n}", i + 1);
    }
    println!("closes={}", plan.closes.len());
    println!("kernel_steps={}", done.world.step_count);
    println!("trees_equal={trees_equal}");
    println!("cpg_equal={cpg_equal}");
    for (i, s) in plan.steps.iter().enumerate() {
        println!("step{i}={}", serde_json_line(s));
    }
    if let Some(p) = plan_out {
        let json = match serde_json::to_string_pretty(plan) {
            Ok(j) => j,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_PARSE;
            }
        };
        if let Err(e) = fs::write(p, json) {
            eprintln!("error: {}: {e}", p.display());
            return EXIT_PARSE;
        }
    }
    if trees_equal && cpg_equal != "false" {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

fn serde_json_line(s: &relaynet::ifr::IfrStep) -> String {
    serde_json::to_string(s).unwrap_or_default()
}

fn suite(name: &str, runs: Option<usize>, seed: u64) -> u8 {
    let cfg = SuiteConfig {
        runs,
        base_seed: seed,
        tracing: false,
    };
    let Some(r) = run_suite(name, &cfg) else {
        eprintln!("error: unknown suite {name}");
        return EXIT_PARSE;
    };
    println!("{r}");
    for n in &r.notes {
        println!("note={n}");
    }
    if r.passed() {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}
