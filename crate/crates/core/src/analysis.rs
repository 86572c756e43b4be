//! Post-processing of scan traces: Pearson correlation of the simulated
//! counters against load latency inside peak windows, and per-scenario
//! latency histograms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memmap::{PhysicalAddress, VirtualAddress};
use crate::mob::{AliasingClass, CounterSample, MicroArchParams, Mob};
use crate::noise::GaussianNoise;
use crate::spoiler::TimingTrace;

/// Latency jump over the quiet level that opens a correlation window.
pub const DEFAULT_TRIGGER: u64 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least two samples, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: a series has zero variance")]
    ZeroVariance,
    #[error("scenario `{0}` has no samples")]
    EmptyScenario(String),
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(AnalysisError::TooShort(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// The counters the simulator models, in report order.
pub const COUNTERS: [&str; 3] = ["stalls_ldm_pending", "address_alias", "bound_on_stores"];

fn counter_value(c: &CounterSample, name: &str) -> u64 {
    match name {
        "stalls_ldm_pending" => c.stalls_ldm_pending,
        "address_alias" => c.address_alias,
        _ => c.bound_on_stores,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterCorrelation {
    pub counter: String,
    pub r: f64,
    /// The counter never changed inside the windows. `r` is reported as 0
    /// because a constant cannot carry the leak.
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub windows: usize,
    pub samples: usize,
    pub window_len: usize,
    pub trigger: u64,
    pub counters: Vec<CounterCorrelation>,
}

impl CorrelationReport {
    pub fn no_windows(&self) -> bool {
        self.windows == 0
    }

    pub fn r(&self, counter: &str) -> Option<f64> {
        self.counters.iter().find(|c| c.counter == counter).map(|c| c.r)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("counter,r,constant\n");
        for c in &self.counters {
            out.push_str(&format!("{},{:.6},{}\n", c.counter, c.r, c.constant));
        }
        out
    }
}

/// Start indices of the correlation windows. The quiet level is the trace
/// median; a window opens when latency exceeds it by `trigger`, and the
/// detector re-arms once latency drops back below that level.
pub fn peak_windows(cycles: &[u64], window_len: usize, trigger: u64) -> Vec<usize> {
    if cycles.is_empty() {
        return Vec::new();
    }
    let mut sorted = cycles.to_vec();
    sorted.sort_unstable();
    let level = sorted[sorted.len() / 2] + trigger;
    let mut starts = Vec::new();
    let mut armed = true;
    let mut i = 0;
    while i < cycles.len() {
        if cycles[i] < level {
            armed = true;
        } else if armed {
            if i + window_len <= cycles.len() {
                starts.push(i);
            }
            armed = false;
            i += window_len.max(1);
            continue;
        }
        i += 1;
    }
    starts
}

pub fn correlate_counters(trace: &TimingTrace, steps: usize) -> CorrelationReport {
    correlate_counters_with(trace, steps, DEFAULT_TRIGGER)
}

/// Correlates each counter with latency over the `window_len` samples that
/// follow every peak trigger.
pub fn correlate_counters_with(trace: &TimingTrace, window_len: usize, trigger: u64) -> CorrelationReport {
    let cycles = trace.cycles();
    let starts = peak_windows(&cycles, window_len, trigger);
    let idx: Vec<usize> = starts.iter().flat_map(|&s| s..s + window_len).collect();
    let timing: Vec<f64> = idx.iter().map(|&i| cycles[i] as f64).collect();
    let counters = COUNTERS
        .iter()
        .map(|&name| {
            let values: Vec<f64> =
                idx.iter().map(|&i| counter_value(&trace.entries[i].counters, name) as f64).collect();
            let (r, constant) = match pearson(&timing, &values) {
                Ok(r) => (r, false),
                Err(_) => (0.0, !values.is_empty() && values.iter().all(|&v| v == values[0])),
            };
            CounterCorrelation { counter: name.to_string(), r, constant }
        })
        .collect();
    CorrelationReport { windows: starts.len(), samples: idx.len(), window_len, trigger, counters }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub scenario: String,
    pub samples: usize,
    pub mean: f64,
    /// Latency value to number of loads.
    pub histogram: BTreeMap<u64, usize>,
}

/// Mean and latency histogram of each named scenario.
pub fn histogram_classes<S: AsRef<str>>(scenarios: &[(S, Vec<u64>)]) -> Result<Vec<ClassSummary>, AnalysisError> {
    scenarios
        .iter()
        .map(|(name, samples)| {
            if samples.is_empty() {
                return Err(AnalysisError::EmptyScenario(name.as_ref().to_string()));
            }
            let mut histogram = BTreeMap::new();
            for &s in samples {
                *histogram.entry(s).or_insert(0) += 1;
            }
            Ok(ClassSummary {
                scenario: name.as_ref().to_string(),
                samples: samples.len(),
                mean: samples.iter().sum::<u64>() as f64 / samples.len() as f64,
                histogram,
            })
        })
        .collect()
}

/// Builds the store buffer state that produces `class` and returns the
/// latency of a load issued against it.
pub fn scenario_latency(params: &MicroArchParams, class: AliasingClass) -> u64 {
    let mut mob = Mob::new(params.clone());
    let load_pa = PhysicalAddress::from_frame(0x4_0000, 0x100);
    let load_va = VirtualAddress::from_page(0x9000, 0x100);
    let store = |frame: u64, offset: u64| PhysicalAddress::from_frame(frame, offset);
    let stores: Vec<PhysicalAddress> = match class {
        AliasingClass::NoAlias => vec![store(0x1001, 0x200), store(0x1002, 0x300)],
        AliasingClass::StoreStore4k => vec![store(0x1001, 0x200), store(0x1002, 0x200)],
        AliasingClass::LoadStore4k => vec![store(0x1001, 0x100), store(0x1002, 0x300)],
        // Oldest store matches all 20 low bits: the top of the peak.
        AliasingClass::OneMb => vec![store(0x4_1000, 0x100), store(0x1002, 0x100)],
    };
    for (i, pa) in stores.into_iter().enumerate() {
        mob.issue_store(VirtualAddress::from_page(0x8000 + i as u64, pa.page_offset()), pa);
    }
    mob.speculative_load(load_va, load_pa).cycles
}

/// `loads` latency samples per aliasing class, with optional measurement noise.
pub fn latency_scenarios(
    params: &MicroArchParams,
    loads: usize,
    mut noise: Option<&mut GaussianNoise>,
) -> Vec<(AliasingClass, Vec<u64>)> {
    AliasingClass::ALL
        .iter()
        .map(|&class| {
            let clean = scenario_latency(params, class);
            let samples = (0..loads)
                .map(|_| match noise.as_deref_mut() {
                    Some(n) => n.perturb(clean),
                    None => clean,
                })
                .collect();
            (class, samples)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Presets;
    use crate::spoiler::TraceEntry;

    #[test]
    fn pearson_identity_and_negation() {
        let xs = [1.0, 5.0, 2.0, 8.0];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert_eq!(pearson(&[1.0, 2.0], &[3.0]), Err(AnalysisError::LengthMismatch(2, 1)));
        assert_eq!(pearson(&[1.0], &[3.0]), Err(AnalysisError::TooShort(1)));
        assert_eq!(pearson(&[1.0, 1.0], &[3.0, 4.0]), Err(AnalysisError::ZeroVariance));
    }

    #[test]
    fn windows_rearm_after_quiet_sample() {
        let mut c = vec![30, 30, 500, 480, 460, 440, 420, 30, 30, 30, 600, 590, 580];
        c.extend([30; 12]);
        assert_eq!(peak_windows(&c, 3, 200), vec![2, 10]);
        // Still elevated after the window: no second trigger.
        assert_eq!(peak_windows(&c, 2, 200), vec![2, 10]);
        // A ramp opens its window where it first clears the level.
        let ramp = [30, 30, 30, 100, 170, 240, 310, 380, 30, 30, 30, 30, 30, 30];
        assert_eq!(peak_windows(&ramp, 3, 200), vec![5]);
        assert!(peak_windows(&[30; 20], 3, 200).is_empty());
    }

    #[test]
    fn flat_trace_reports_no_windows() {
        let entries = (0..50)
            .map(|page| TraceEntry { page, cycles: 30, counters: CounterSample::default() })
            .collect();
        let trace = TimingTrace { entries, window: 64, load_page: VirtualAddress::from_page(1, 0) };
        let report = correlate_counters(&trace, 22);
        assert!(report.no_windows());
        assert_eq!(report.samples, 0);
    }

    #[test]
    fn empty_scenario_is_an_error() {
        let r = histogram_classes(&[("a", vec![1, 2]), ("b", vec![])]);
        assert_eq!(r, Err(AnalysisError::EmptyScenario("b".into())));
    }

    #[test]
    fn scenarios_hit_their_classes() {
        let p = Presets::builtin().microarch("kabylake-r").unwrap().clone();
        let lat: Vec<u64> = AliasingClass::ALL.iter().map(|&c| scenario_latency(&p, c)).collect();
        assert_eq!(lat[..3], [p.base_load_cycles, p.store_4k_class_cycles, p.load_4k_class_cycles]);
        assert_eq!(lat[3], p.peak_cycles);
    }
}
