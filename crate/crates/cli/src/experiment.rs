//! Runs an experiment matrix and writes its artifacts.
//!
//! Output directory layout:
//!
//! | file | contents |
//! |------|----------|
//! | `trace.csv` | the workload, as generated or loaded |
//! | `metrics.csv` | one row per (machine, policy, threshold) |
//! | `hist_distinct_primitives.csv`, `hist_active_lanes.csv` | per-record histograms |
//! | `tune_<machine>_<family>.csv` | cycles per threshold plus the chosen one |
//! | `events/<machine>_<policy>.log` | with `--emit-events` only |
//! | `manifest.json` | config hash, completed cells, output digests |

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use warpred::hwsim::{simulate_with_events, SimOutcome};
use warpred::tuner::{tune, PolicyFamily, TuneReport};
use warpred::workload::{histogram_active_lanes, histogram_distinct_primitives, GradDistribution};
use warpred::{io, oracle_sum, MachineConfig, Policy, RunMetrics, Trace};

use crate::config::ExperimentConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HIST_DISTINCT_FILE: &str = "hist_distinct_primitives.csv";
pub const HIST_ACTIVE_FILE: &str = "hist_active_lanes.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub machine: String,
    pub policy: String,
    pub threshold: Option<u32>,
    pub total_cycles: u64,
    pub stalls_lsu: u64,
    pub stalls_other: u64,
    pub atomic_requests_to_l2: u64,
    pub core_instructions: u64,
    pub core_fp_adds: u64,
    pub interconnect_packets: u64,
    pub energy_proxy: f64,
    /// Baseline cycles over this cell's cycles, same trace and machine.
    pub speedup: f64,
    /// Speedup of the whole training step given the gradient-kernel fraction.
    pub end_to_end_speedup: f64,
}

impl MetricsRow {
    pub fn new(machine: &str, policy: Policy, m: &RunMetrics, native_cycles: u64, grad_fraction: f64) -> Self {
        let s = speedup(native_cycles, m.total_cycles);
        MetricsRow {
            machine: machine.to_string(),
            policy: policy.name().to_string(),
            threshold: policy.threshold().map(|t| t.value()),
            total_cycles: m.total_cycles,
            stalls_lsu: m.stalls_lsu,
            stalls_other: m.stalls_other,
            atomic_requests_to_l2: m.atomic_requests_to_l2,
            core_instructions: m.core_instructions,
            core_fp_adds: m.core_fp_adds,
            interconnect_packets: m.interconnect_packets,
            energy_proxy: m.energy_proxy,
            speedup: s,
            end_to_end_speedup: end_to_end_speedup(s, grad_fraction),
        }
    }
}

pub fn speedup(baseline_cycles: u64, cycles: u64) -> f64 {
    if cycles == 0 {
        1.0
    } else {
        baseline_cycles as f64 / cycles as f64
    }
}

/// Overall speedup when only a fraction `f` of the time is sped up by `s`.
pub fn end_to_end_speedup(s: f64, f: f64) -> f64 {
    1.0 / (f / s + (1.0 - f))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellId {
    pub machine: String,
    pub policy: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub cells_completed: Vec<CellId>,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub emit_events: bool,
}

/// Error carrying the stage that failed.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

fn stage<T>(name: impl Into<String>, r: anyhow::Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError {
        stage: name.into(),
        source,
    })
}

/// Reads a trace in either container, telling them apart by the magic bytes.
pub fn load_trace(path: &Path) -> anyhow::Result<Trace> {
    let mut file = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut magic = [0u8; 4];
    let n = file.read(&mut magic)?;
    let file = BufReader::new(File::open(path)?);
    let trace = if n == 4 && &magic == io::TRACE_MAGIC {
        io::read_trace_binary(file)
    } else {
        io::read_trace_csv(file)
    };
    trace.with_context(|| format!("parsing {}", path.display()))
}

/// Writes a trace, choosing the binary container for a `.bin` extension.
pub fn save_trace(trace: &Trace, path: &Path) -> anyhow::Result<()> {
    let w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    if path.extension().is_some_and(|e| e == "bin") {
        io::write_trace_binary(trace, w)?;
    } else {
        io::write_trace_csv(trace, w)?;
    }
    Ok(())
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> anyhow::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, _>>()
        .context("metrics csv")
}

pub fn write_histogram_csv<W: Write>(label: &str, hist: &BTreeMap<u32, u64>, w: W) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([label, "records"])?;
    for (k, v) in hist {
        out.write_record([k.to_string(), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_histogram_csv<R: Read>(r: R) -> anyhow::Result<BTreeMap<u32, u64>> {
    let mut hist = BTreeMap::new();
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        let k = rec.get(0).unwrap_or_default().parse()?;
        let v = rec.get(1).unwrap_or_default().parse()?;
        hist.insert(k, v);
    }
    Ok(hist)
}

/// `threshold,cycles` rows followed by a `chosen,<t>` summary row.
pub fn write_tune_csv<W: Write>(report: &TuneReport, w: W) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["threshold", "cycles"])?;
    for (t, c) in &report.per_threshold_cycles {
        out.write_record([t.to_string(), c.to_string()])?;
    }
    out.write_record(["chosen".to_string(), report.chosen.to_string()])?;
    out.flush()?;
    Ok(())
}

pub fn read_tune_csv<R: Read>(r: R) -> anyhow::Result<(BTreeMap<u32, u64>, u32)> {
    let mut cycles = BTreeMap::new();
    let mut chosen = None;
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        let (a, b) = (rec.get(0).unwrap_or_default(), rec.get(1).unwrap_or_default());
        if a == "chosen" {
            chosen = Some(b.parse()?);
        } else {
            cycles.insert(a.parse()?, b.parse()?);
        }
    }
    Ok((cycles, chosen.ok_or_else(|| anyhow!("tune csv has no chosen row"))?))
}

fn digest(path: &Path) -> anyhow::Result<(String, u64)> {
    let bytes = fs::read(path)?;
    Ok((format!("{:x}", Sha256::digest(&bytes)), bytes.len() as u64))
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn tune_file_name(machine: &str, family: PolicyFamily) -> String {
    format!("tune_{}_{}.csv", file_stem(machine), family)
}

struct Outputs {
    dir: PathBuf,
    written: BTreeMap<String, (String, u64)>,
}

impl Outputs {
    fn create(&mut self, name: &str, write: impl FnOnce(BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write(BufWriter::new(file))?;
        self.written.insert(name.to_string(), digest(&path)?);
        Ok(())
    }
}

struct Cell {
    machine: usize,
    policy: Policy,
}

/// Generates or loads the trace, runs every cell, and writes all artifacts.
/// On failure the manifest still lists the cells that completed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Manifest, StageError> {
    stage("config", cfg.validate())?;
    let dir = cfg.output_dir.clone();
    stage(
        "output",
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())),
    )?;
    let mut outputs = Outputs {
        dir: dir.clone(),
        written: BTreeMap::new(),
    };
    let scene = cfg.effective_scene();
    let mut manifest = Manifest {
        config_version: cfg.config_version,
        config_hash: cfg.config_hash(),
        seed: scene.seed,
        status: "complete".into(),
        failed_stage: None,
        error: None,
        cells_completed: Vec::new(),
        outputs: Vec::new(),
    };

    let result = run_cells(cfg, opts, &mut outputs, &mut manifest);
    if let Err(e) = &result {
        manifest.status = "failed".into();
        manifest.failed_stage = Some(e.stage.clone());
        manifest.error = Some(format!("{:#}", e.source));
    }
    manifest.outputs = outputs
        .written
        .iter()
        .map(|(path, (sha256, bytes))| OutputEntry {
            path: path.clone(),
            sha256: sha256.clone(),
            bytes: *bytes,
        })
        .collect();
    let written = fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    );
    stage("manifest", written.map_err(anyhow::Error::from))?;
    result.map(|()| manifest)
}

fn run_cells(
    cfg: &ExperimentConfig,
    opts: RunOptions,
    outputs: &mut Outputs,
    manifest: &mut Manifest,
) -> Result<(), StageError> {
    let scene = cfg.effective_scene();
    let base = match &cfg.trace {
        Some(path) => stage("load trace", load_trace(path))?,
        None => stage("generate trace", warpred::generate(&scene).map_err(Into::into))?,
    };
    stage(
        "write trace",
        outputs.create(TRACE_FILE, |w| io::write_trace_csv(&base, w).map_err(Into::into)),
    )?;

    if !base.records.is_empty() {
        let distinct = stage("histograms", histogram_distinct_primitives(&base).map_err(Into::into))?;
        let active = stage("histograms", histogram_active_lanes(&base).map_err(Into::into))?;
        stage(
            "write histograms",
            outputs.create(HIST_DISTINCT_FILE, |w| {
                write_histogram_csv("distinct_primitives", &distinct, w)
            }),
        )?;
        stage(
            "write histograms",
            outputs.create(HIST_ACTIVE_FILE, |w| write_histogram_csv("active_lanes", &active, w)),
        )?;
    }

    let machines: Vec<MachineConfig> = cfg
        .machines
        .iter()
        .map(|m| stage("config", m.resolve()))
        .collect::<Result<_, _>>()?;
    let traces: Vec<Trace> = machines
        .iter()
        .map(|m| {
            if cfg.replicate_per_sm {
                base.replicate_across_sms(m.num_sms, m.subcores_per_sm)
            } else {
                base.clone()
            }
        })
        .collect();
    let policies = stage("config", cfg.policy_cells())?;
    let mut cells = Vec::new();
    for machine in 0..machines.len() {
        // the baseline goes first so every later row can report a speedup
        cells.push(Cell {
            machine,
            policy: Policy::Native,
        });
        cells.extend(
            policies
                .iter()
                .filter(|p| **p != Policy::Native)
                .map(|&policy| Cell { machine, policy }),
        );
    }

    let exact = scene.grad_distribution == GradDistribution::Dyadic && cfg.trace.is_none();
    let oracles: Vec<_> = if exact {
        traces.iter().map(oracle_sum).collect()
    } else {
        Vec::new()
    };
    let events_dir = outputs.dir.join("events");
    let results: Vec<Result<SimOutcome, StageError>> = cells
        .par_iter()
        .map(|cell| {
            let machine = &machines[cell.machine];
            let name = format!("simulate {}/{}", machine.name, cell.policy);
            let outcome = if opts.emit_events {
                let path = events_dir.join(format!(
                    "{}_{}.log",
                    file_stem(&machine.name),
                    file_stem(&cell.policy.to_string())
                ));
                let run = || -> anyhow::Result<SimOutcome> {
                    fs::create_dir_all(&events_dir)?;
                    let mut w = BufWriter::new(File::create(&path)?);
                    let mut failed = None;
                    let out = simulate_with_events(&traces[cell.machine], machine, cell.policy, |e| {
                        if failed.is_none() {
                            if let Err(err) = writeln!(w, "{e}") {
                                failed = Some(err);
                            }
                        }
                    })?;
                    if let Some(err) = failed {
                        return Err(err.into());
                    }
                    w.flush()?;
                    Ok(out)
                };
                stage(name.clone(), run())?
            } else {
                stage(
                    name.clone(),
                    warpred::simulate(&traces[cell.machine], machine, cell.policy).map_err(Into::into),
                )?
            };
            if exact && outcome.memory != oracles[cell.machine] {
                return Err(StageError {
                    stage: name,
                    source: anyhow!("applied sums differ from the reference accumulation"),
                });
            }
            Ok(outcome)
        })
        .collect();

    let mut rows = Vec::new();
    let mut native_cycles = vec![0u64; machines.len()];
    let mut failure = None;
    for (cell, result) in cells.iter().zip(results) {
        let machine = &machines[cell.machine];
        match result {
            Ok(outcome) => {
                if cell.policy == Policy::Native {
                    native_cycles[cell.machine] = outcome.metrics.total_cycles;
                }
                if policies.contains(&cell.policy) {
                    rows.push(MetricsRow::new(
                        &machine.name,
                        cell.policy,
                        &outcome.metrics,
                        native_cycles[cell.machine],
                        cfg.grad_fraction,
                    ));
                    manifest.cells_completed.push(CellId {
                        machine: machine.name.clone(),
                        policy: cell.policy.to_string(),
                    });
                }
                if opts.emit_events {
                    let name = format!(
                        "events/{}_{}.log",
                        file_stem(&machine.name),
                        file_stem(&cell.policy.to_string())
                    );
                    let digest = stage("write events", digest(&outputs.dir.join(&name)))?;
                    outputs.written.insert(name, digest);
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    stage(
        "write metrics",
        outputs.create(METRICS_FILE, |w| write_metrics_csv(&rows, w)),
    )?;
    if let Some(e) = failure {
        return Err(e);
    }

    for (machine, trace) in machines.iter().zip(&traces) {
        for family in cfg.tuned_families() {
            let name = format!("tune {}/{}", machine.name, family);
            let Some(first) = trace.records.iter().map(|r| r.iteration).min() else {
                continue;
            };
            let segment = trace.segment(first);
            let report = stage(name.clone(), tune(&segment, machine, family).map_err(Into::into))?;
            stage(
                name,
                outputs.create(&tune_file_name(&machine.name, family), |w| write_tune_csv(&report, w)),
            )?;
        }
    }
    Ok(())
}
