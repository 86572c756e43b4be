//! The aliasing scan, peak detection over its timing trace, recovery of
//! pages sharing 20 physical low bits with a chosen page, and the
//! speculation-depth and context-switch probes.
//!
//! Nothing here consults the pagemap; only timing and counters are used.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memmap::{AddressSpace, MemError, PhysicalAddress, VirtualAddress, ALIAS_PERIOD_FRAMES};
use crate::mob::{CounterSample, FillerKind, Mob};
use crate::noise::GaussianNoise;

/// Default detection threshold: a load counts as elevated above this latency.
pub const DEFAULT_THRESHOLD: u64 = 200;
/// Default scan window; every load sees `window + 1` preceding stores.
pub const DEFAULT_WINDOW: usize = 64;
/// Expected distance between aliasing pages over random frames.
pub const EXPECTED_SPACING: f64 = ALIAS_PERIOD_FRAMES as f64;

#[derive(Debug, Error)]
pub enum SpoilerError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("scan needs more than {needed} pages, buffer has {available}")]
    InsufficientPages { needed: usize, available: usize },
    #[error("window {window} is smaller than the store buffer ({capacity} entries)")]
    WindowTooSmall { window: usize, capacity: usize },
    #[error("scan budget exhausted with {found} of {target} aliased pages found")]
    BudgetExhausted { found: usize, target: usize },
    #[error("pool target must be positive")]
    EmptyTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Index of the youngest store's page in the scanned buffer.
    pub page: usize,
    pub cycles: u64,
    pub counters: CounterSample,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingTrace {
    pub entries: Vec<TraceEntry>,
    pub window: usize,
    pub load_page: VirtualAddress,
}

impl TimingTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cycles(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.cycles).collect()
    }

    pub fn apply_noise(&mut self, noise: &mut GaussianNoise) {
        for e in &mut self.entries {
            e.cycles = noise.perturb(e.cycles);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("page,cycles,stalls_ldm_pending,address_alias,bound_on_stores\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.page, e.cycles, e.counters.stalls_ldm_pending, e.counters.address_alias, e.counters.bound_on_stores
            );
        }
        out
    }
}

/// Runs the aliasing scan over every page index in `[window, pages.len())`.
pub fn aliasing_scan(
    space: &AddressSpace,
    mob: &mut Mob,
    pages: &[VirtualAddress],
    window: usize,
    load: VirtualAddress,
) -> Result<TimingTrace, SpoilerError> {
    let frames = translate_all(space, pages)?;
    let load_pa = space.translate(load)?;
    scan_translated(mob, &frames, pages, window, load, load_pa, window..pages.len())
}

fn translate_all(space: &AddressSpace, pages: &[VirtualAddress]) -> Result<Vec<PhysicalAddress>, SpoilerError> {
    pages.iter().map(|&v| space.translate(v).map_err(SpoilerError::from)).collect()
}

fn scan_translated(
    mob: &mut Mob,
    frames: &[PhysicalAddress],
    pages: &[VirtualAddress],
    window: usize,
    load: VirtualAddress,
    load_pa: PhysicalAddress,
    range: std::ops::Range<usize>,
) -> Result<TimingTrace, SpoilerError> {
    if window < mob.capacity() {
        return Err(SpoilerError::WindowTooSmall { window, capacity: mob.capacity() });
    }
    if pages.len() <= window {
        return Err(SpoilerError::InsufficientPages { needed: window, available: pages.len() });
    }
    let start = range.start.max(window);
    let end = range.end.min(pages.len());
    let mut entries = Vec::with_capacity(end.saturating_sub(start));
    for p in start..end {
        mob.commit_all();
        for i in (0..=window).rev() {
            let idx = p - i;
            mob.issue_store(pages[idx], frames[idx]);
        }
        let outcome = mob.speculative_load(load, load_pa);
        entries.push(TraceEntry { page: p, cycles: outcome.cycles, counters: outcome.counters });
    }
    mob.commit_all();
    Ok(TimingTrace { entries, window, load_page: load })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peak {
    /// Buffer index of the page that aliases the load page.
    pub page: usize,
    /// Number of trace samples attributed to this peak.
    pub samples: usize,
    /// Distinct latency levels observed.
    pub steps: usize,
    pub max_cycles: u64,
    /// False when the peak was cut short by the next one or by the trace end.
    pub complete: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakReport {
    pub peaks: Vec<Peak>,
    /// Peak indices grouped by inferred equal 20 low physical bits.
    pub groups: Vec<Vec<usize>>,
}

impl PeakReport {
    pub fn peak_pages(&self) -> Vec<usize> {
        self.peaks.iter().map(|p| p.page).collect()
    }

    pub fn step_counts(&self) -> Vec<usize> {
        self.peaks.iter().map(|p| p.steps).collect()
    }

    pub fn complete_step_counts(&self) -> Vec<usize> {
        self.peaks.iter().filter(|p| p.complete).map(|p| p.steps).collect()
    }

    /// Distances between consecutive peak pages.
    pub fn spacings(&self) -> Vec<usize> {
        self.peaks.windows(2).map(|w| w[1].page - w[0].page).collect()
    }

    pub fn mean_spacing(&self) -> Option<f64> {
        let s = self.spacings();
        if s.is_empty() {
            None
        } else {
            Some(s.iter().sum::<usize>() as f64 / s.len() as f64)
        }
    }
}

/// Peak detection parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakDetector {
    /// A sample is elevated when its latency exceeds this.
    pub threshold: u64,
    /// A fall of at least this much inside an elevated run starts a new peak.
    pub min_drop: u64,
    /// Runs shorter than this are ignored.
    pub min_run: usize,
    /// Rises no larger than this do not count as a new level.
    pub level_tolerance: u64,
}

impl Default for PeakDetector {
    fn default() -> Self {
        PeakDetector { threshold: DEFAULT_THRESHOLD, min_drop: 1, min_run: 1, level_tolerance: 0 }
    }
}

impl PeakDetector {
    pub fn with_threshold(threshold: u64) -> Self {
        PeakDetector { threshold, ..Default::default() }
    }

    /// Settings for latencies perturbed by Gaussian noise of the given sigma.
    pub fn for_noise(sigma: f64) -> Self {
        if sigma <= 0.0 {
            return Self::default();
        }
        PeakDetector {
            threshold: DEFAULT_THRESHOLD + (5.0 * sigma).ceil() as u64,
            min_drop: (8.0 * sigma).ceil() as u64,
            min_run: 2,
            level_tolerance: (3.0 * sigma).ceil() as u64,
        }
    }

    pub fn detect(&self, trace: &TimingTrace) -> PeakReport {
        let e = &trace.entries;
        let mut peaks = Vec::new();
        let mut i = 0;
        while i < e.len() {
            if e[i].cycles <= self.threshold {
                i += 1;
                continue;
            }
            let run_start = i;
            let mut j = i;
            while j < e.len() && e[j].cycles > self.threshold {
                j += 1;
            }
            let ended_in_trace = j < e.len();
            if j - run_start >= self.min_run {
                // Split the run wherever latency falls back: a younger aliasing
                // store has entered the window.
                let mut seg_start = run_start;
                let mut peak_level = e[run_start].cycles;
                for k in run_start + 1..=j {
                    let split = k < j && e[k].cycles + self.min_drop <= peak_level;
                    if k == j || split {
                        // A run already in progress at the first sample has an unknown start.
                        if seg_start != 0 {
                            peaks.push(self.summarize(trace, seg_start, k, ended_in_trace && k == j));
                        }
                        seg_start = k;
                        if k < j {
                            peak_level = e[k].cycles;
                        }
                    } else {
                        peak_level = peak_level.max(e[k].cycles);
                    }
                }
            }
            i = j;
        }
        let groups = if peaks.is_empty() { Vec::new() } else { vec![(0..peaks.len()).collect()] };
        PeakReport { peaks, groups }
    }

    fn summarize(&self, trace: &TimingTrace, start: usize, end: usize, complete: bool) -> Peak {
        let seg = &trace.entries[start..end];
        let mut steps = 1;
        let mut level = seg[0].cycles;
        for s in &seg[1..] {
            if s.cycles > level + self.level_tolerance {
                steps += 1;
                level = s.cycles;
            }
        }
        Peak {
            page: seg[0].page,
            samples: seg.len(),
            steps,
            max_cycles: seg.iter().map(|s| s.cycles).max().unwrap_or(0),
            complete,
        }
    }
}

pub fn detect_peaks(trace: &TimingTrace, threshold: u64) -> PeakReport {
    PeakDetector::with_threshold(threshold).detect(trace)
}

/// Scan statistics returned with a recovered pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolScan {
    pub pages_scanned: usize,
    pub peaks: usize,
}

/// Scans `pages` until `target` pages that 1 MB-alias `load` are found.
pub fn recover_aliased_pool(
    space: &AddressSpace,
    mob: &mut Mob,
    pages: &[VirtualAddress],
    window: usize,
    load: VirtualAddress,
    target: usize,
    detector: &PeakDetector,
    mut noise: Option<&mut GaussianNoise>,
) -> Result<(Vec<VirtualAddress>, PoolScan), SpoilerError> {
    const CHUNK: usize = 8192;
    if target == 0 {
        return Err(SpoilerError::EmptyTarget);
    }
    let frames = translate_all(space, pages)?;
    let load_pa = space.translate(load)?;
    let mut trace = TimingTrace { entries: Vec::new(), window, load_page: load };
    let mut next = window;
    let mut report = PeakReport::default();
    while next < pages.len() {
        let end = (next + CHUNK).min(pages.len());
        let mut chunk = scan_translated(mob, &frames, pages, window, load, load_pa, next..end)?;
        if let Some(n) = noise.as_deref_mut() {
            chunk.apply_noise(n);
        }
        trace.entries.extend(chunk.entries);
        next = end;
        report = detector.detect(&trace);
        // A peak still rising at the chunk edge may yet be split; keep scanning
        // one window past the target's start before trusting it.
        let settled = report.peaks.iter().filter(|p| p.page + window < next || next == pages.len()).count();
        if settled >= target {
            let pool = report.peaks.iter().take(target).map(|p| pages[p.page]).collect();
            let last = report.peaks[target - 1].page;
            return Ok((pool, PoolScan { pages_scanned: last + 1, peaks: target }));
        }
    }
    Err(SpoilerError::BudgetExhausted { found: report.peaks.len(), target })
}

/// Surviving peak steps after `count` filler instructions, for each count.
///
/// For every count the aliasing store is placed at each position of a full
/// window in turn; the result is the number of distinct 1 MB latency levels
/// still observed after the drain.
pub fn depth_probe(mob: &Mob, filler: FillerKind, counts: &[u64]) -> Vec<(u64, usize)> {
    const LOAD_FRAME: u64 = 0x40_0003;
    const ALIAS_FRAME: u64 = LOAD_FRAME + (1 << 8) * 17;
    let load_pa = PhysicalAddress::from_frame(LOAD_FRAME, 0);
    let load_va = VirtualAddress::from_page(0x10_0000, 0);
    let cap = mob.capacity();
    counts
        .iter()
        .map(|&count| {
            let mut levels = std::collections::BTreeSet::new();
            for pos in 0..cap {
                let mut m = mob.clone();
                m.commit_all();
                for i in 0..cap as u64 {
                    let frame = if i as usize == pos { ALIAS_FRAME } else { 0x80_0080 + i };
                    m.issue_store(VirtualAddress::from_page(0x20_0000 + i, 0), PhysicalAddress::from_frame(frame, 0));
                }
                m.drain(filler, count);
                let out = m.speculative_load(load_va, load_pa);
                if out.step_index.is_some() {
                    levels.insert(out.cycles);
                }
            }
            (count, levels.len())
        })
        .collect()
}

/// Latency seen by a system call whose kernel load runs behind attacker stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSwitchScenario {
    /// No stores pending.
    NoStore,
    /// Stores pending, none aliasing the kernel load.
    NoConflict,
    /// One pending store 1 MB-aliases the kernel load.
    Conflict,
}

/// Syscall latency without pending stores.
pub const SYSCALL_BASE_CYCLES: u64 = 250;

/// Syscall latency as the aliasing store moves from oldest to youngest
/// position in a full store buffer (one value per position).
pub fn context_switch_probe(mob: &Mob, scenario: ContextSwitchScenario, kernel_steps: usize) -> Vec<u64> {
    let mut params = mob.params().clone();
    params.steps = kernel_steps.min(mob.capacity());
    params.store_buffer_size = mob.capacity();
    params.hyperthreading = false;
    let base = params.base_load_cycles;
    let cap = params.store_buffer_size;
    let kernel_pa = PhysicalAddress::from_frame(0xa_0005, 0x180);
    let kernel_va = VirtualAddress::from_page(0xffff_8000_0000, 0x180);
    (0..cap)
        .map(|pos| {
            let mut m = Mob::new(params.clone());
            if scenario != ContextSwitchScenario::NoStore {
                for i in 0..cap as u64 {
                    let frame = if scenario == ContextSwitchScenario::Conflict && i as usize == pos {
                        0x30_0005
                    } else {
                        0x50_0080 + i
                    };
                    m.issue_store(VirtualAddress::from_page(0x7000 + i, 0x180), PhysicalAddress::from_frame(frame, 0x180));
                }
            }
            let out = m.speculative_load(kernel_va, kernel_pa);
            SYSCALL_BASE_CYCLES + out.cycles - base
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Presets;
    use crate::memmap::AllocPolicy;

    fn kaby() -> Mob {
        Mob::new(Presets::builtin().microarch("kabylake-r").unwrap().clone())
    }

    fn trace_of(cycles: &[u64]) -> TimingTrace {
        TimingTrace {
            entries: cycles
                .iter()
                .enumerate()
                .map(|(i, &c)| TraceEntry { page: 64 + i, cycles: c, counters: CounterSample::default() })
                .collect(),
            window: 64,
            load_page: VirtualAddress(0),
        }
    }

    #[test]
    fn flat_trace_has_no_peaks() {
        assert!(detect_peaks(&trace_of(&[200; 50]), 200).peaks.is_empty());
        assert!(detect_peaks(&trace_of(&[]), 200).peaks.is_empty());
    }

    #[test]
    fn planted_peak_steps() {
        let mut c = vec![200; 10];
        for s in 0..22u64 {
            c.extend([300 + 45 * s; 2]);
        }
        c.extend([200; 10]);
        let r = detect_peaks(&trace_of(&c), 200);
        assert_eq!(r.step_counts(), [22]);
        assert_eq!(r.peak_pages(), [74]);
        assert!(r.peaks[0].complete);
    }

    #[test]
    fn drop_inside_run_splits() {
        let c = [200, 300, 400, 500, 300, 400, 200];
        let r = detect_peaks(&trace_of(&c), 200);
        assert_eq!(r.peak_pages(), [65, 68]);
        assert!(!r.peaks[0].complete);
        assert!(r.peaks[1].complete);
    }

    #[test]
    fn run_at_trace_start_is_discarded() {
        let r = detect_peaks(&trace_of(&[400, 500, 200, 300, 200]), 200);
        assert_eq!(r.peak_pages(), [67]);
    }

    #[test]
    fn scan_sees_full_buffer_of_loosenet_hits() {
        let mut space = AddressSpace::new(1 << 14, 1).unwrap();
        let pages = space.alloc_pages(600, AllocPolicy::fragmented(2)).unwrap();
        let load = space.alloc_pages(1, AllocPolicy::fragmented(3)).unwrap()[0];
        let mut mob = kaby();
        let trace = aliasing_scan(&space, &mut mob, &pages, 64, load).unwrap();
        assert_eq!(trace.len(), 600 - 64);
        assert!(trace.entries.windows(2).all(|w| w[0].page < w[1].page));
        for e in &trace.entries {
            assert!(e.cycles >= 200);
            assert_eq!(e.counters.bound_on_stores, 9);
            if e.cycles == 200 {
                assert_eq!(e.counters.address_alias, 56);
            }
        }
    }

    #[test]
    fn window_must_cover_store_buffer() {
        let mut space = AddressSpace::new(1 << 12, 1).unwrap();
        let pages = space.alloc_pages(200, AllocPolicy::contiguous(1)).unwrap();
        let mut mob = kaby();
        assert!(matches!(
            aliasing_scan(&space, &mut mob, &pages, 40, pages[0]),
            Err(SpoilerError::WindowTooSmall { .. })
        ));
        assert!(matches!(
            aliasing_scan(&space, &mut mob, &pages[..50], 64, pages[0]),
            Err(SpoilerError::InsufficientPages { .. })
        ));
    }

    #[test]
    fn depth_probe_kaby() {
        let mob = kaby();
        let add = depth_probe(&mob, FillerKind::Add, &[0, 200, 400, 600, 800, 1000]);
        assert_eq!(add[0], (0, 22));
        assert_eq!(add.last().unwrap(), &(1000, 0));
        assert!(add.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(depth_probe(&mob, FillerKind::Nop, &[4000]), [(4000, 0)]);
    }

    #[test]
    fn context_switch_shapes() {
        use ContextSwitchScenario::*;
        let mob = kaby();
        let none = context_switch_probe(&mob, NoStore, 7);
        assert!(none.iter().all(|&c| c == 250));
        let flat = context_switch_probe(&mob, NoConflict, 7);
        assert!(flat.iter().all(|&c| c == flat[0] && c > 250));
        let conflict = context_switch_probe(&mob, Conflict, 7);
        let levels: std::collections::BTreeSet<u64> = conflict.iter().copied().collect();
        assert_eq!(levels.len(), 7);
        assert!(conflict.windows(2).all(|w| w[0] >= w[1]));
        assert!(conflict.iter().all(|&c| c > flat[0]));
    }
}
