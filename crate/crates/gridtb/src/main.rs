//! `gridtb`: CLI for the grid testbed simulator.
//!
//! Exit codes: 0 success, 1 scenario/input error, 2 internal abort.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridtb_core::engine::{run, RunOptions};
use gridtb_core::fabric::{self, CompiledProfile, NodeState, SourceSet};
use gridtb_core::scenario::{ReleasePlan, Scenario};

#[derive(Parser)]
#[command(
    name = "gridtb",
    version,
    about = "Deterministic multi-site grid testbed simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and emit the canonical report.
    Run(RunArgs),
    /// Validate a scenario file, reporting every schema error.
    Validate { scenario: PathBuf },
    /// Node configuration tooling.
    Fabric {
        #[command(subcommand)]
        command: FabricCommand,
    },
    /// Release procedure tooling.
    Release {
        #[command(subcommand)]
        command: ReleaseCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination (stdout when omitted; a prefix with --seeds).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Batch mode: run once per seed in the inclusive range `a..b`.
    /// Requires --out, used as a filename prefix.
    #[arg(long, value_parser = parse_seed_range)]
    seeds: Option<(u64, u64)>,
}

#[derive(Subcommand)]
enum FabricCommand {
    /// Compile profile sources (<name>.node, <name>.tmpl) to per-node XML.
    Compile {
        srcdir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Apply a compiled profile to a node state file.
    Apply {
        profile: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Re-run object handlers even if this version is already applied.
        #[arg(long)]
        force: bool,
        /// Simulate a failing object handler (repeatable).
        #[arg(long = "fail")]
        fail: Vec<String>,
    },
    /// Show the last apply report recorded in a node state file.
    Ack {
        #[arg(long)]
        state: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReleaseCommand {
    /// Drive tags through the staged gates according to a plan file.
    Simulate {
        plan: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| "expected a..b".to_string())?;
    let a: u64 = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    if b < a {
        return Err("range end before start".into());
    }
    Ok((a, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal abort: {msg}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Input(String),
    Internal(String),
}

fn input_err(e: impl std::fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Fabric { command } => match command {
            FabricCommand::Compile { srcdir, out } => cmd_fabric_compile(&srcdir, &out),
            FabricCommand::Apply {
                profile,
                state,
                force,
                fail,
            } => cmd_fabric_apply(&profile, &state, force, &fail),
            FabricCommand::Ack { state } => cmd_fabric_ack(&state),
        },
        Command::Release { command } => match command {
            ReleaseCommand::Simulate { plan, seed, out } => cmd_release_simulate(&plan, seed, out),
        },
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let bytes = fs::read(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    Scenario::validate(&bytes).map_err(|errors| {
        let mut msg = format!("scenario {} is invalid:", path.display());
        for e in &errors {
            msg.push_str(&format!("\n  {e}"));
        }
        Failure::Input(msg)
    })
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|e| input_err(format!("writing {}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let scenario = load_scenario(&args.scenario)?;
    if let Some((first, last)) = args.seeds {
        let Some(prefix) = &args.out else {
            return Err(Failure::Input("--seeds requires --out as a prefix".into()));
        };
        for seed in first..=last {
            let options = RunOptions {
                seed_override: Some(seed),
                collect_trace: false,
            };
            let output = run(&scenario, &options).map_err(|e| Failure::Internal(e.to_string()))?;
            let path = PathBuf::from(format!("{}-{seed}.json", prefix.display()));
            fs::write(&path, output.report.canonical_json())
                .map_err(|e| input_err(format!("writing {}: {e}", path.display())))?;
            eprintln!("seed {seed}: report written to {}", path.display());
        }
        return Ok(());
    }

    let options = RunOptions {
        seed_override: args.seed,
        collect_trace: args.trace.is_some(),
    };
    let output = run(&scenario, &options).map_err(|e| Failure::Internal(e.to_string()))?;
    if let Some(trace_path) = &args.trace {
        let lines = output.trace.as_deref().unwrap_or(&[]);
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(trace_path, text)
            .map_err(|e| input_err(format!("writing {}: {e}", trace_path.display())))?;
    }
    write_or_print(args.out.as_deref(), &output.report.canonical_json())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let scenario = load_scenario(path)?;
    println!(
        "valid: {} site(s), {} broker(s), {} workload(s), {} fault spec(s)",
        scenario.sites.len(),
        scenario.rbs.len(),
        scenario.workloads.len(),
        scenario.effective_faults().len(),
    );
    Ok(())
}

fn cmd_fabric_compile(srcdir: &Path, outdir: &Path) -> Result<(), Failure> {
    let mut set = SourceSet::default();
    let entries =
        fs::read_dir(srcdir).map_err(|e| input_err(format!("{}: {e}", srcdir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let text = match ext {
            "node" | "tmpl" => fs::read_to_string(&path)
                .map_err(|e| input_err(format!("{}: {e}", path.display())))?,
            _ => continue,
        };
        let parsed = fabric::parse_source(stem, &text).map_err(input_err)?;
        if ext == "node" {
            set.nodes.insert(stem.to_string(), parsed);
        } else {
            set.templates.insert(stem.to_string(), parsed);
        }
    }
    if set.nodes.is_empty() {
        return Err(Failure::Input(format!(
            "no .node profiles found in {}",
            srcdir.display()
        )));
    }
    let profiles = fabric::compile(&set).map_err(|errors| {
        let msg = errors
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        Failure::Input(msg)
    })?;
    fs::create_dir_all(outdir).map_err(|e| input_err(format!("{}: {e}", outdir.display())))?;
    for (node, profile) in &profiles {
        let path = outdir.join(format!("{node}.xml"));
        fs::write(&path, profile.to_xml())
            .map_err(|e| input_err(format!("writing {}: {e}", path.display())))?;
        println!("{node}: version {} -> {}", profile.version, path.display());
    }
    Ok(())
}

fn load_node_state(path: &Path) -> Result<NodeState, Failure> {
    if path.exists() {
        let bytes = fs::read(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| input_err(format!("{}: {e}", path.display())))
    } else {
        Ok(NodeState::default())
    }
}

fn cmd_fabric_apply(
    profile_path: &Path,
    state_path: &Path,
    force: bool,
    fail: &[String],
) -> Result<(), Failure> {
    let xml = fs::read_to_string(profile_path)
        .map_err(|e| input_err(format!("{}: {e}", profile_path.display())))?;
    let profile = CompiledProfile::from_xml(&xml).map_err(input_err)?;
    let mut state = load_node_state(state_path)?;
    let fail: BTreeSet<String> = fail.iter().cloned().collect();
    let report = state.apply(&profile, force, &fail);
    let json =
        serde_json::to_string_pretty(&state).map_err(|e| Failure::Internal(e.to_string()))?;
    fs::write(state_path, json)
        .map_err(|e| input_err(format!("writing {}: {e}", state_path.display())))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Internal(e.to_string()))?
    );
    Ok(())
}

fn cmd_fabric_ack(state_path: &Path) -> Result<(), Failure> {
    let state = load_node_state(state_path)?;
    let report = state.ack_status().map_err(input_err)?;
    println!(
        "{}",
        serde_json::to_string_pretty(report).map_err(|e| Failure::Internal(e.to_string()))?
    );
    Ok(())
}

fn cmd_release_simulate(plan_path: &Path, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    let bytes =
        fs::read(plan_path).map_err(|e| input_err(format!("{}: {e}", plan_path.display())))?;
    let plan: ReleasePlan = serde_json::from_slice(&bytes)
        .map_err(|e| input_err(format!("{}: {e}", plan_path.display())))?;

    // the release machinery runs inside a minimal scenario long enough for
    // every scheduled gate and bypass
    let mut horizon_s: u64 = 1;
    for tag in &plan.tags {
        let total = tag.propose_at_s
            + tag.gate_delays_s.dev
            + tag.gate_delays_s.core
            + tag.gate_delays_s.application;
        horizon_s = horizon_s.max(total + 1);
    }
    for bypass in &plan.bypasses {
        horizon_s = horizon_s.max(bypass.at_s + 1);
    }
    let scenario_json = serde_json::json!({
        "seed": seed,
        "duration_h": horizon_s.div_ceil(3600).max(1),
        "faults": [],
        "release": serde_json::to_value(&plan).map_err(|e| Failure::Internal(e.to_string()))?,
    });
    let scenario = Scenario::validate(scenario_json.to_string().as_bytes()).map_err(|errors| {
        let msg = errors
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        Failure::Input(msg)
    })?;
    let output =
        run(&scenario, &RunOptions::default()).map_err(|e| Failure::Internal(e.to_string()))?;
    let release = output
        .report
        .metrics
        .release
        .ok_or_else(|| Failure::Internal("release metrics missing".into()))?;
    let value = serde_json::to_value(&release).map_err(|e| Failure::Internal(e.to_string()))?;
    let mut text =
        serde_json::to_string_pretty(&value).map_err(|e| Failure::Internal(e.to_string()))?;
    text.push('\n');
    write_or_print(out.as_deref(), &text)
}
