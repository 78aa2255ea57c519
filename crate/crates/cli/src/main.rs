use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use warpred::tuner::{tune, PolicyFamily};
use warpred::workload::{histogram_active_lanes, histogram_distinct_primitives};
use warpred::MachineConfig;
use warpred_cli::config::ExperimentConfig;
use warpred_cli::experiment::{
    load_trace, save_trace, tune_file_name, write_histogram_csv, write_tune_csv, HIST_ACTIVE_FILE, HIST_DISTINCT_FILE,
};
use warpred_cli::{run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "warpred", version, about = "Warp-level gradient reduction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace from the config's scene.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Trace file to write; `.bin` selects the binary container.
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Run every (machine, policy, threshold) cell of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a per-cycle event log for every cell.
        #[arg(long)]
        emit_events: bool,
    },
    /// Sweep the balancing threshold on one iteration of the trace.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Machine preset or name from the config; defaults to the first machine.
        #[arg(long)]
        machine: Option<String>,
        /// SW_S or SW_B; defaults to both.
        #[arg(long)]
        family: Option<PolicyFamily>,
        /// Iteration to profile; defaults to the first.
        #[arg(long)]
        iteration: Option<u32>,
        /// Output directory; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histograms of distinct primitives and active lanes per record.
    Analyze {
        trace: PathBuf,
        /// Output directory; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List machine presets as TOML.
    Presets,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn with_stage<T>(stage: &str, r: anyhow::Result<T>) -> anyhow::Result<T> {
    r.with_context(|| stage.to_string())
}

fn cmd_gen(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> anyhow::Result<()> {
    let cfg = with_stage("config", load_config(config.as_deref(), seed))?;
    let trace = with_stage(
        "generate trace",
        warpred::generate(&cfg.effective_scene()).map_err(Into::into),
    )?;
    with_stage("write trace", save_trace(&trace, &out))?;
    eprintln!("wrote {} records to {}", trace.records.len(), out.display());
    Ok(())
}

fn cmd_run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, emit_events: bool) -> anyhow::Result<()> {
    let mut cfg = with_stage("config", load_config(Some(&config), seed))?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let manifest = run_experiment(&cfg, RunOptions { emit_events })?;
    eprintln!(
        "{} cells complete, outputs in {} (config {})",
        manifest.cells_completed.len(),
        cfg.output_dir.display(),
        &manifest.config_hash[..12]
    );
    Ok(())
}

fn pick_machine(cfg: &ExperimentConfig, name: Option<&str>) -> anyhow::Result<MachineConfig> {
    let machines: Vec<MachineConfig> = cfg.machines.iter().map(|m| m.resolve()).collect::<Result<_, _>>()?;
    match name {
        None => Ok(machines.into_iter().next().expect("validated config has a machine")),
        Some(n) => machines
            .into_iter()
            .find(|m| m.name == n)
            .or_else(|| MachineConfig::preset(n))
            .with_context(|| format!("unknown machine `{n}`")),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_tune(
    config: PathBuf,
    seed: Option<u64>,
    machine: Option<String>,
    family: Option<PolicyFamily>,
    iteration: Option<u32>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = with_stage("config", load_config(Some(&config), seed))?;
    let machine = with_stage("config", pick_machine(&cfg, machine.as_deref()))?;
    let base = match &cfg.trace {
        Some(path) => with_stage("load trace", load_trace(path))?,
        None => with_stage(
            "generate trace",
            warpred::generate(&cfg.effective_scene()).map_err(Into::into),
        )?,
    };
    let trace = if cfg.replicate_per_sm {
        base.replicate_across_sms(machine.num_sms, machine.subcores_per_sm)
    } else {
        base
    };
    let Some(first) = trace.records.iter().map(|r| r.iteration).min() else {
        bail!("tune: trace has no records");
    };
    let segment = trace.segment(iteration.unwrap_or(first));
    let families = family.map_or(PolicyFamily::ALL.to_vec(), |f| vec![f]);
    for family in families {
        let report = with_stage(
            &format!("tune {}/{family}", machine.name),
            tune(&segment, &machine, family).map_err(Into::into),
        )?;
        match &out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(tune_file_name(&machine.name, family));
                write_tune_csv(&report, BufWriter::new(File::create(&path)?))?;
                eprintln!("{family}: chosen {} -> {}", report.chosen, path.display());
            }
            None => {
                println!("# {} {family}", machine.name);
                write_tune_csv(&report, io::stdout().lock())?;
            }
        }
    }
    Ok(())
}

fn cmd_analyze(trace: PathBuf, out: Option<PathBuf>) -> anyhow::Result<()> {
    let trace = with_stage("load trace", load_trace(&trace))?;
    let distinct = with_stage("histograms", histogram_distinct_primitives(&trace).map_err(Into::into))?;
    let active = with_stage("histograms", histogram_active_lanes(&trace).map_err(Into::into))?;
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            write_histogram_csv(
                "distinct_primitives",
                &distinct,
                BufWriter::new(File::create(dir.join(HIST_DISTINCT_FILE))?),
            )?;
            write_histogram_csv(
                "active_lanes",
                &active,
                BufWriter::new(File::create(dir.join(HIST_ACTIVE_FILE))?),
            )?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            write_histogram_csv("distinct_primitives", &distinct, &mut stdout)?;
            writeln!(stdout)?;
            write_histogram_csv("active_lanes", &active, &mut stdout)?;
        }
    }
    Ok(())
}

fn cmd_presets() -> anyhow::Result<()> {
    for preset in MachineConfig::presets() {
        println!("[{}]\n{}", preset.name, toml::to_string(&preset)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config, seed, out),
        Command::Run {
            config,
            seed,
            out,
            emit_events,
        } => cmd_run(config, seed, out, emit_events),
        Command::Tune {
            config,
            seed,
            machine,
            family,
            iteration,
            out,
        } => cmd_tune(config, seed, machine, family, iteration, out),
        Command::Analyze { trace, out } => cmd_analyze(trace, out),
        Command::Presets => cmd_presets(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
