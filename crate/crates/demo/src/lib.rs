//! Browser bindings: each export takes a JSON scene (any subset of the
//! `SceneSpec` fields) and returns a JSON document for the page to draw.

use std::collections::BTreeMap;

use serde::Serialize;
use warpred::hwsim::PRESET_NAMES;
use warpred::tuner::{tune, PolicyFamily};
use warpred::workload::{histogram_active_lanes, histogram_distinct_primitives};
use warpred::{generate, simulate, BalancingThreshold, MachineConfig, Policy, SceneSpec, Trace};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub machine: String,
    pub family: String,
    pub cycles: Vec<u64>,
    pub chosen: u32,
    pub native_cycles: u64,
}

#[derive(Debug, Serialize)]
pub struct Histograms {
    pub records: usize,
    pub distinct_primitives: BTreeMap<u32, u64>,
    pub active_lanes: BTreeMap<u32, u64>,
}

#[derive(Debug, Serialize)]
pub struct PolicyRow {
    pub policy: String,
    pub total_cycles: u64,
    pub atomic_requests_to_l2: u64,
    pub core_instructions: u64,
    pub lsu_stall_fraction: f64,
    pub energy_proxy: f64,
}

fn parse_scene(scene: &str) -> Result<SceneSpec, String> {
    let scene: SceneSpec = if scene.trim().is_empty() {
        SceneSpec::default()
    } else {
        serde_json::from_str(scene).map_err(|e| format!("scene: {e}"))?
    };
    scene.validate().map_err(|e| format!("scene: {e}"))?;
    Ok(scene)
}

fn machine(name: &str) -> Result<MachineConfig, String> {
    MachineConfig::preset(name).ok_or_else(|| format!("unknown machine `{name}`"))
}

fn placed_trace(scene: &SceneSpec, cfg: &MachineConfig, replicate: bool) -> Result<Trace, String> {
    let trace = generate(scene).map_err(|e| e.to_string())?;
    Ok(if replicate {
        trace.replicate_across_sms(cfg.num_sms, cfg.subcores_per_sm)
    } else {
        trace
    })
}

pub fn sweep(scene: &str, machine_name: &str, family: &str, replicate: bool) -> Result<Sweep, String> {
    let scene = parse_scene(scene)?;
    let cfg = machine(machine_name)?;
    let family: PolicyFamily = family.parse().map_err(|e| format!("{e}"))?;
    let trace = placed_trace(&scene, &cfg, replicate)?;
    let report = tune(&trace, &cfg, family).map_err(|e| e.to_string())?;
    let native = simulate(&trace, &cfg, Policy::Native).map_err(|e| e.to_string())?;
    Ok(Sweep {
        machine: cfg.name,
        family: family.to_string(),
        cycles: report.per_threshold_cycles.values().copied().collect(),
        chosen: report.chosen.value(),
        native_cycles: native.metrics.total_cycles,
    })
}

pub fn scene_histograms(scene: &str) -> Result<Histograms, String> {
    let trace = generate(&parse_scene(scene)?).map_err(|e| e.to_string())?;
    Ok(Histograms {
        records: trace.records.len(),
        distinct_primitives: histogram_distinct_primitives(&trace).map_err(|e| e.to_string())?,
        active_lanes: histogram_active_lanes(&trace).map_err(|e| e.to_string())?,
    })
}

pub fn policy_table(
    scene: &str,
    machine_name: &str,
    threshold: u32,
    replicate: bool,
) -> Result<Vec<PolicyRow>, String> {
    let scene = parse_scene(scene)?;
    let cfg = machine(machine_name)?;
    let t = BalancingThreshold::new(threshold).map_err(|e| e.to_string())?;
    let trace = placed_trace(&scene, &cfg, replicate)?;
    [
        Policy::Native,
        Policy::SerialReduce(t),
        Policy::ButterflyReduce(t),
        Policy::Cccl,
        Policy::HwAtomred,
    ]
    .into_iter()
    .map(|policy| {
        let m = simulate(&trace, &cfg, policy).map_err(|e| e.to_string())?.metrics;
        Ok(PolicyRow {
            policy: policy.to_string(),
            total_cycles: m.total_cycles,
            atomic_requests_to_l2: m.atomic_requests_to_l2,
            core_instructions: m.core_instructions,
            lsu_stall_fraction: m.lsu_stall_fraction(),
            energy_proxy: m.energy_proxy,
        })
    })
    .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn threshold_sweep(scene: &str, machine: &str, family: &str, replicate: bool) -> Result<String, JsValue> {
    to_js(sweep(scene, machine, family, replicate))
}

#[wasm_bindgen]
pub fn histograms(scene: &str) -> Result<String, JsValue> {
    to_js(scene_histograms(scene))
}

#[wasm_bindgen]
pub fn compare_policies(scene: &str, machine: &str, threshold: u32, replicate: bool) -> Result<String, JsValue> {
    to_js(policy_table(scene, machine, threshold, replicate))
}

#[wasm_bindgen]
pub fn machine_names() -> String {
    serde_json::to_string(&PRESET_NAMES).unwrap_or_default()
}
