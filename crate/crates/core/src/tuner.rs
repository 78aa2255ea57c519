//! Balancing-threshold selection by exhaustive profiling: simulate one
//! iteration at every threshold and keep the fastest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwsim::{simulate, MachineConfig};
use crate::reducers::{BalancingThreshold, Policy};
use crate::workload::Trace;

pub const DEFAULT_REPROFILE_PERIOD: u32 = 2000;

/// Software reduction policies that take a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyFamily {
    #[serde(rename = "SW_S")]
    Serial,
    #[serde(rename = "SW_B")]
    Butterfly,
}

impl PolicyFamily {
    pub const ALL: [PolicyFamily; 2] = [PolicyFamily::Serial, PolicyFamily::Butterfly];

    pub fn with_threshold(self, t: BalancingThreshold) -> Policy {
        match self {
            PolicyFamily::Serial => Policy::SerialReduce(t),
            PolicyFamily::Butterfly => Policy::ButterflyReduce(t),
        }
    }

    pub fn of(policy: Policy) -> Option<Self> {
        match policy {
            Policy::SerialReduce(_) => Some(PolicyFamily::Serial),
            Policy::ButterflyReduce(_) => Some(PolicyFamily::Butterfly),
            _ => None,
        }
    }
}

impl fmt::Display for PolicyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyFamily::Serial => "SW_S",
            PolicyFamily::Butterfly => "SW_B",
        })
    }
}

impl FromStr for PolicyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "SW_S" => Ok(PolicyFamily::Serial),
            "SW_B" => Ok(PolicyFamily::Butterfly),
            _ => Err(Error::UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneReport {
    pub family: PolicyFamily,
    /// Total cycles for thresholds 0..=32.
    pub per_threshold_cycles: BTreeMap<u32, u64>,
    pub chosen: BalancingThreshold,
    pub profile_iteration: u32,
    pub reprofile_period: u32,
}

impl TuneReport {
    pub fn chosen_policy(&self) -> Policy {
        self.family.with_threshold(self.chosen)
    }

    pub fn chosen_cycles(&self) -> u64 {
        self.per_threshold_cycles[&self.chosen.value()]
    }
}

/// Lowest threshold among those with the fewest cycles.
pub fn argmin_threshold(cycles: &BTreeMap<u32, u64>) -> Option<u32> {
    // BTreeMap iterates ascending and min_by_key keeps the first minimum
    cycles.iter().min_by_key(|(_, c)| **c).map(|(t, _)| *t)
}

/// Profiles `segment` at every threshold in 0..=32 and returns the cycle map
/// with the argmin. Tuner overhead itself is not modeled.
pub fn tune(segment: &Trace, config: &MachineConfig, family: PolicyFamily) -> Result<TuneReport> {
    if segment.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let thresholds: Vec<BalancingThreshold> = BalancingThreshold::sweep().collect();
    let run = |t: &BalancingThreshold| {
        simulate(segment, config, family.with_threshold(*t)).map(|o| (t.value(), o.metrics.total_cycles))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(u32, u64)>> = {
        use rayon::prelude::*;
        thresholds.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(u32, u64)>> = thresholds.iter().map(run).collect();

    let per_threshold_cycles = results.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
    let chosen = argmin_threshold(&per_threshold_cycles).expect("sweep is nonempty");
    Ok(TuneReport {
        family,
        chosen: BalancingThreshold::new(chosen)?,
        per_threshold_cycles,
        profile_iteration: segment.records.iter().map(|r| r.iteration).min().unwrap_or(0),
        reprofile_period: DEFAULT_REPROFILE_PERIOD,
    })
}

/// Periodic re-tuning over a multi-iteration trace: the first iteration of
/// every `period`-long window is profiled and its choice is used for the
/// rest of the window.
#[derive(Clone, Debug)]
pub struct AutoTuner {
    pub family: PolicyFamily,
    pub period: u32,
}

impl AutoTuner {
    pub fn new(family: PolicyFamily) -> Self {
        AutoTuner {
            family,
            period: DEFAULT_REPROFILE_PERIOD,
        }
    }

    pub fn with_period(mut self, period: u32) -> Self {
        self.period = period.max(1);
        self
    }

    /// One report per profiled window, in iteration order. Windows whose
    /// first iteration has no records are skipped.
    pub fn profile(&self, trace: &Trace, config: &MachineConfig) -> Result<Vec<TuneReport>> {
        let last = trace.max_iteration().ok_or(Error::EmptyTrace)?;
        let mut reports = Vec::new();
        let mut it = 0u32;
        while it <= last {
            let segment = trace.segment(it);
            if !segment.records.is_empty() {
                let mut report = tune(&segment, config, self.family)?;
                report.profile_iteration = it;
                report.reprofile_period = self.period;
                reports.push(report);
            }
            it = match it.checked_add(self.period) {
                Some(next) => next,
                None => break,
            };
        }
        Ok(reports)
    }

    /// Threshold in effect at `iteration` given the reports from [`profile`](Self::profile).
    pub fn threshold_at(reports: &[TuneReport], iteration: u32) -> Option<BalancingThreshold> {
        reports
            .iter()
            .rev()
            .find(|r| r.profile_iteration <= iteration)
            .map(|r| r.chosen)
    }
}
