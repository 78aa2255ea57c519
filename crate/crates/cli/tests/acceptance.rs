//! Acceptance criteria, one pass/fail line each. Exits nonzero if any fail.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpred::hwsim::{simulate, MachineConfig, QueueDepth};
use warpred::reducers::{reduce_bfly, reduce_serial, Address, BalancingThreshold, Policy};
use warpred::tuner::{tune, PolicyFamily};
use warpred::workload::{generate, histogram_distinct_primitives, SceneSpec, Trace, WarpRecord};
use warpred::WARP_SIZE;
use warpred_cli::{run_experiment, ExperimentConfig, RunOptions};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Per-address totals accumulated straight from the trace, in trace order.
fn reference_sums(trace: &Trace) -> BTreeMap<Address, f64> {
    let mut sums = BTreeMap::new();
    for record in &trace.records {
        for lane in 0..WARP_SIZE {
            if !record.active.contains(lane) {
                continue;
            }
            for (param, g) in record.grads(lane).iter().enumerate() {
                *sums
                    .entry(Address::new(record.lane_primitive[lane], param))
                    .or_insert(0.0) += g;
            }
        }
    }
    sums
}

fn presets() -> [MachineConfig; 3] {
    [
        MachineConfig::rtx4090like(),
        MachineConfig::rtx3060like(),
        MachineConfig::single_sm(),
    ]
}

fn small_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneSpec {
        num_primitives: rng.random_range(1..200),
        params_per_primitive: rng.random_range(1..=4),
        image_width: rng.random_range(1..=24),
        image_height: rng.random_range(1..=12),
        mean_fragment_span: rng.random_range(2.0..64.0),
        fragments_per_pixel_mean: rng.random_range(0.5..3.0),
        activity_prob: rng.random_range(0.0..=1.0),
        locality: rng.random_range(0.0..=1.0),
        seed,
        ..SceneSpec::default()
    }
}

fn c1_sum_correctness() -> Outcome {
    const TRACES: u64 = 1000;
    let start = Instant::now();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()) as u64;
    let failures: Vec<String> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let mut bad = Vec::new();
                    for seed in (w..TRACES).step_by(workers as usize) {
                        let trace = generate(&small_scene(seed)).unwrap();
                        let expected = reference_sums(&trace);
                        let t = BalancingThreshold::new((seed % 34) as u32).unwrap();
                        let policies = [
                            Policy::Native,
                            Policy::SerialReduce(t),
                            Policy::ButterflyReduce(t),
                            Policy::Cccl,
                            Policy::HwAtomred,
                        ];
                        for cfg in presets() {
                            for policy in policies {
                                let out = simulate(&trace, &cfg, policy).unwrap();
                                if out.memory != expected {
                                    bad.push(format!("seed {seed} {} {policy}", cfg.name));
                                }
                            }
                        }
                    }
                    bad
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let elapsed = start.elapsed();
    if !failures.is_empty() {
        return Err(format!("{} mismatches, first: {}", failures.len(), failures[0]));
    }
    if elapsed > Duration::from_secs(300) {
        return Err(format!("took {elapsed:.1?}, limit 5 min"));
    }
    Ok(format!(
        "{TRACES} traces x 5 policies x 3 presets bit-exact in {elapsed:.1?}"
    ))
}

fn c2_locality_histogram() -> Outcome {
    let trace = generate(&SceneSpec {
        locality: 0.99,
        image_width: 512,
        image_height: 256,
        fragments_per_pixel_mean: 8.0,
        ..SceneSpec::default()
    })
    .unwrap();
    let hist = histogram_distinct_primitives(&trace).unwrap();
    let total: u64 = hist.values().sum();
    let single = hist.get(&1).copied().unwrap_or(0);
    let mass = single as f64 / total as f64;
    let detail = format!("mass at 1 = {mass:.4} over {total} records");
    if total < 10_000 {
        Err(format!("only {total} records"))
    } else if (mass - 0.99).abs() <= 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c3_traffic_collapse() -> Outcome {
    let trace = generate(&SceneSpec {
        locality: 1.0,
        activity_prob: 1.0,
        ..SceneSpec::default()
    })
    .unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for cfg in presets() {
        let native = simulate(&trace, &cfg, Policy::Native)
            .unwrap()
            .metrics
            .atomic_requests_to_l2;
        for policy in [Policy::ButterflyReduce(BalancingThreshold::ALWAYS), Policy::HwAtomred] {
            let got = simulate(&trace, &cfg, policy).unwrap().metrics.atomic_requests_to_l2;
            let exact = got * 32 == native;
            ok &= exact;
            if !exact {
                lines.push(format!(
                    "{} {policy}: {got} of {native} (want {})",
                    cfg.name,
                    native / 32
                ));
            }
        }
    }
    if ok {
        Ok("SW_B(0) and HW_ATOMRED at exactly 1/32 on all presets".into())
    } else {
        Err(lines.join("; "))
    }
}

fn random_record(rng: &mut ChaCha8Rng) -> WarpRecord {
    let params = rng.random_range(1..=4);
    let pool = rng.random_range(1..=6u32);
    let mut record = WarpRecord::new(0, 0, params);
    let activity: f64 = rng.random_range(0.0..=1.0);
    for lane in 0..WARP_SIZE {
        if rng.random_bool(activity) {
            let grads: Vec<f64> = (0..params).map(|_| rng.random_range(1..=255) as f64 / 256.0).collect();
            record.set_lane(lane, rng.random_range(0..pool), &grads);
        }
    }
    record
}

fn c4_threshold_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let record = random_record(&mut rng);
        for (name, reduce) in [
            ("SW_S", reduce_serial as fn(&WarpRecord, BalancingThreshold) -> _),
            ("SW_B", reduce_bfly),
        ] {
            let counts: Vec<usize> = BalancingThreshold::sweep()
                .map(|t| reduce(&record, t).requests.len())
                .collect();
            if let Some(t) = counts.windows(2).position(|w| w[1] < w[0]) {
                return Err(format!(
                    "record {i} {name}: {} requests at {t}, {} at {}",
                    counts[t],
                    counts[t + 1],
                    t + 1
                ));
            }
        }
    }
    Ok("100 records, SW_S and SW_B non-decreasing over 0..32".into())
}

fn replicated(scene: &SceneSpec, cfg: &MachineConfig) -> Trace {
    generate(scene)
        .unwrap()
        .replicate_across_sms(cfg.num_sms, cfg.subcores_per_sm)
}

fn contended_scene(activity: f64) -> SceneSpec {
    SceneSpec {
        locality: 0.99,
        activity_prob: activity,
        params_per_primitive: 3,
        image_width: 32,
        image_height: 16,
        ..SceneSpec::default()
    }
}

fn c5_architecture_ordering() -> Outcome {
    let scene = contended_scene(0.6);
    let mut fraction = Vec::new();
    for cfg in [MachineConfig::rtx4090like(), MachineConfig::rtx3060like()] {
        let m = simulate(&replicated(&scene, &cfg), &cfg, Policy::Native)
            .unwrap()
            .metrics;
        fraction.push(m.lsu_stall_fraction());
    }
    let detail = format!(
        "NATIVE LSU stall fraction 4090 {:.3} vs 3060 {:.3}",
        fraction[0], fraction[1]
    );
    if fraction[0] > fraction[1] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c6_speedup_shape() -> Outcome {
    let cfg = MachineConfig::rtx4090like();
    let trace = replicated(&contended_scene(0.3), &cfg);
    let mut lines = Vec::new();
    let mut ok = true;
    for family in PolicyFamily::ALL {
        let report = tune(&trace, &cfg, family).unwrap();
        let cycles: Vec<u64> = report.per_threshold_cycles.values().copied().collect();
        let rising = cycles.windows(2).any(|w| w[1] > w[0]);
        let falling = cycles.windows(2).any(|w| w[1] < w[0]);
        let at = |t: u32| {
            let policy = family.with_threshold(BalancingThreshold::new(t).unwrap());
            simulate(&trace, &cfg, policy).unwrap().metrics.total_cycles
        };
        let (chosen, low, high) = (at(report.chosen.value()), at(0), at(32));
        ok &= rising && falling && chosen <= low && chosen <= high;
        lines.push(format!(
            "{family}: chosen {} at {chosen} cycles, endpoints {low}/{high}, non-monotone {}",
            report.chosen,
            rising && falling
        ));
    }
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

fn c7_cccl_inefficiency() -> Outcome {
    let cfg = MachineConfig::rtx4090like();
    let scene = SceneSpec {
        locality: 1.0,
        ..contended_scene(0.6)
    };
    let trace = replicated(&scene, &cfg);
    let cccl = simulate(&trace, &cfg, Policy::Cccl).unwrap().metrics;
    let bfly = simulate(&trace, &cfg, Policy::ButterflyReduce(BalancingThreshold::ALWAYS))
        .unwrap()
        .metrics;
    let detail = format!(
        "N=3 instructions CCCL {} vs SW_B(0) {}, cycles {} vs {}",
        cccl.core_instructions, bfly.core_instructions, cccl.total_cycles, bfly.total_cycles
    );
    if cccl.core_instructions > bfly.core_instructions && cccl.total_cycles > bfly.total_cycles {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_routing_degeneracy() -> Outcome {
    let mut cases = 0;
    for base in presets() {
        let cfg = MachineConfig {
            lsu_queue_depth: QueueDepth::Unbounded,
            ..base
        };
        for seed in 0..3 {
            let trace = replicated(
                &SceneSpec {
                    seed,
                    ..contended_scene(0.6)
                },
                &cfg,
            );
            let hw = simulate(&trace, &cfg, Policy::HwAtomred).unwrap();
            let native = simulate(&trace, &cfg, Policy::Native).unwrap();
            if hw.metrics != native.metrics {
                return Err(format!(
                    "{} seed {seed}: {:?} vs {:?}",
                    cfg.name, hw.metrics, native.metrics
                ));
            }
            cases += 1;
        }
    }
    Ok(format!("HW_ATOMRED == NATIVE on {cases} unbounded-LSU cases"))
}

fn read_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn c9_determinism() -> Outcome {
    let text = r#"
config_version = 1
seed = 9
machines = ["single_sm", "rtx3060like"]
policies = ["NATIVE", "SW_S", "SW_B", "CCCL", "HW_ATOMRED"]
thresholds = [0, 8, 16, 33]

[scene]
image_width = 32
image_height = 16
"#;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        run_experiment(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
        outputs.push(read_files(dir.path()));
    }
    let csvs = outputs[0].keys().filter(|k| k.ends_with(".csv")).count();
    if outputs[0] == outputs[1] {
        Ok(format!(
            "{} files ({csvs} CSV) byte-identical across reruns",
            outputs[0].len()
        ))
    } else {
        Err("rerun outputs differ".into())
    }
}

fn c10_interconnect_traffic() -> Outcome {
    let mut worst = f64::MIN;
    let mut cases = 0;
    for cfg in [MachineConfig::rtx4090like(), MachineConfig::rtx3060like()] {
        for locality in [0.99, 1.0] {
            for seed in 0..3 {
                let scene = SceneSpec {
                    seed,
                    locality,
                    ..contended_scene(0.6)
                };
                let trace = replicated(&scene, &cfg);
                let hw = simulate(&trace, &cfg, Policy::HwAtomred).unwrap().metrics;
                let native = simulate(&trace, &cfg, Policy::Native).unwrap().metrics;
                if hw.interconnect_packets >= native.interconnect_packets || hw.energy_proxy >= native.energy_proxy {
                    return Err(format!(
                        "{} locality {locality} seed {seed}: packets {} vs {}",
                        cfg.name, hw.interconnect_packets, native.interconnect_packets
                    ));
                }
                worst = worst.max(hw.interconnect_packets as f64 / native.interconnect_packets as f64);
                cases += 1;
            }
        }
    }
    Ok(format!(
        "HW_ATOMRED below NATIVE packets and energy on {cases} traces, worst ratio {worst:.3}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("C1 sum correctness", c1_sum_correctness),
        ("C2 locality histogram", c2_locality_histogram),
        ("C3 traffic collapse", c3_traffic_collapse),
        ("C4 threshold monotonicity", c4_threshold_monotonicity),
        ("C5 architecture stall ordering", c5_architecture_ordering),
        ("C6 threshold sweep shape", c6_speedup_shape),
        ("C7 CCCL inefficiency", c7_cccl_inefficiency),
        ("C8 HW routing degeneracy", c8_routing_degeneracy),
        ("C9 rerun determinism", c9_determinism),
        ("C10 interconnect traffic", c10_interconnect_traffic),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
