//! DRAM bank mapping, the row-buffer timing channel, bank co-location of
//! 1 MB-aliased pages, contiguous-memory detection from aliasing peaks,
//! double-sided rowhammer and the fragmentation sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DramPreset;
use crate::memmap::{
    AddressSpace, AllocPolicy, MemError, PhysicalAddress, VirtualAddress, ALIAS_BITS, ALIAS_PERIOD_FRAMES, PAGE_SIZE,
};
use crate::mob::{MicroArchParams, Mob};
use crate::spoiler::{aliasing_scan, PeakDetector, PeakReport, SpoilerError, TimingTrace, DEFAULT_WINDOW};

/// Bank-address functions in the default mapping (32 banks).
pub const BANK_FUNCTIONS: u32 = 5;
/// Smallest contiguous block holding three consecutive rows of one bank.
pub const MIN_HAMMER_REGION_PAGES: usize = 130;

#[derive(Debug, Error)]
pub enum DramError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Spoiler(#[from] SpoilerError),
    #[error("attack infeasible: {0}")]
    AttackInfeasible(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramGeometry {
    /// One XOR mask over physical address bits per bank-address bit.
    pub mapping_masks: Vec<u64>,
    pub mapping_bits_total: u32,
    pub row_size_bytes: u64,
    pub row_offset_bytes: u64,
    pub hit_cycles: u64,
    pub closed_cycles: u64,
    pub conflict_cycles: u64,
}

impl DramGeometry {
    /// Mapping whose functions use only address bits below `bits`; every
    /// bit at or above the aliasing boundary feeds its own function.
    pub fn from_bits(bits: u32) -> Self {
        let limit = bits.min(ALIAS_BITS);
        let unknown = bits.saturating_sub(ALIAS_BITS);
        let masks = (0..BANK_FUNCTIONS)
            .map(|i| {
                let mut m = 1u64 << (13 + i);
                if 18 + i < limit {
                    m |= 1 << (18 + i);
                }
                if i < unknown {
                    m |= 1 << (ALIAS_BITS + i);
                }
                m
            })
            .collect();
        DramGeometry {
            mapping_masks: masks,
            mapping_bits_total: bits,
            row_size_bytes: 8192,
            row_offset_bytes: 256 * 1024,
            hit_cycles: 200,
            closed_cycles: 250,
            conflict_cycles: 300,
        }
    }

    pub fn from_preset(preset: &DramPreset) -> Self {
        Self::from_bits(preset.bits)
    }

    /// Same bit budget, but the upper (unknown) bits are assigned to the
    /// bank functions in a seeded random order.
    pub fn with_shuffled_upper_bits(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let n = self.unknown_bits();
        let mut funcs: Vec<usize> = (0..self.mapping_masks.len()).collect();
        funcs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let upper: u64 = !((1u64 << ALIAS_BITS) - 1);
        let mut masks: Vec<u64> = self.mapping_masks.iter().map(|m| m & !upper).collect();
        for (i, &f) in funcs.iter().take(n as usize).enumerate() {
            masks[f] |= 1 << (ALIAS_BITS + i as u32);
        }
        DramGeometry { mapping_masks: masks, ..self.clone() }
    }

    /// Mapping bits that lie above the 20 bits known through aliasing.
    pub fn unknown_bits(&self) -> u32 {
        self.mapping_bits_total.saturating_sub(ALIAS_BITS)
    }

    pub fn banks(&self) -> usize {
        1 << self.mapping_masks.len()
    }

    pub fn bank_of(&self, pa: PhysicalAddress) -> usize {
        self.mapping_masks
            .iter()
            .enumerate()
            .fold(0, |b, (i, &m)| b | (((pa.value() & m).count_ones() & 1) as usize) << i)
    }

    pub fn row_of(&self, pa: PhysicalAddress) -> u64 {
        pa.value() / self.row_offset_bytes
    }

    /// Pages per row offset (64 for 256 kB).
    pub fn pages_per_row_offset(&self) -> usize {
        (self.row_offset_bytes / PAGE_SIZE) as usize
    }
}

/// Open row per bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowBufferState {
    open: Vec<Option<u64>>,
}

impl RowBufferState {
    pub fn new(geometry: &DramGeometry) -> Self {
        RowBufferState { open: vec![None; geometry.banks()] }
    }

    pub fn open_row(&self, bank: usize) -> Option<u64> {
        self.open[bank]
    }

    pub fn access_timed(&mut self, geometry: &DramGeometry, pa: PhysicalAddress) -> u64 {
        let bank = geometry.bank_of(pa);
        let row = geometry.row_of(pa);
        let cycles = match self.open[bank] {
            Some(r) if r == row => geometry.hit_cycles,
            Some(_) => geometry.conflict_cycles,
            None => geometry.closed_cycles,
        };
        self.open[bank] = Some(row);
        cycles
    }
}

/// Row-conflict test: alternately accesses two pages and reports whether the
/// latency stays in the conflict class (same bank, different rows).
pub fn row_conflict(
    state: &mut RowBufferState,
    geometry: &DramGeometry,
    space: &AddressSpace,
    a: VirtualAddress,
    b: VirtualAddress,
) -> Result<bool, DramError> {
    const ROUNDS: usize = 4;
    let pa = space.translate(a)?;
    let pb = space.translate(b)?;
    let threshold = (geometry.hit_cycles + geometry.conflict_cycles) / 2;
    let mut total = 0;
    state.access_timed(geometry, pa);
    for _ in 0..ROUNDS {
        total += state.access_timed(geometry, pb);
        total += state.access_timed(geometry, pa);
    }
    Ok(total / (2 * ROUNDS as u64) > threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColocationReport {
    pub trials: usize,
    pub same_bank: usize,
    pub probability: f64,
    pub load_pages: usize,
}

/// Share of 1 MB-aliased page pairs that land in the same bank, measured
/// with the row-conflict channel on pairs taken from aliasing-scan pools.
pub fn colocation_probability(
    geometry: &DramGeometry,
    arch: &MicroArchParams,
    trials: usize,
    seed: u64,
) -> Result<ColocationReport, DramError> {
    const FRAMES: u64 = 1 << 19;
    const BUFFER: u64 = 1 << 17;
    if trials == 0 {
        return Err(DramError::Invalid("at least one trial is required".into()));
    }
    let mut space = AddressSpace::new(FRAMES, seed)?;
    let buffer = space.alloc_pages(BUFFER, AllocPolicy::fragmented(seed))?;
    let mut mob = Mob::new(arch.clone());
    let detector = PeakDetector::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc01a_7e00);
    let mut state = RowBufferState::new(geometry);
    let mut same = 0;
    let mut done = 0;
    let mut loads = 0;
    while done < trials {
        let load = space.alloc_pages(1, AllocPolicy::fragmented(rng.random()))?[0];
        loads += 1;
        let want = trials - done;
        let trace = aliasing_scan(&space, &mut mob, &buffer, DEFAULT_WINDOW, load)?;
        for a in detector.detect(&trace).peaks.iter().map(|p| buffer[p.page]).take(want) {
            if row_conflict(&mut state, geometry, &space, load, a)? {
                same += 1;
            }
            done += 1;
        }
    }
    Ok(ColocationReport { trials: done, same_bank: same, probability: same as f64 / done as f64, load_pages: loads })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContiguousRegion {
    /// First page index of the region in the scanned buffer.
    pub start_page: usize,
    pub length: usize,
    pub peaks: usize,
}

impl ContiguousRegion {
    pub fn end_page(&self) -> usize {
        self.start_page + self.length
    }

    pub fn contains(&self, page: usize) -> bool {
        (self.start_page..self.end_page()).contains(&page)
    }
}

/// Minimum number of peaks spaced exactly one alias period apart that
/// certifies a region as contiguous.
pub const DEFAULT_MIN_PEAKS: usize = 3;

/// Regions between runs of at least `min_peaks` peaks spaced exactly 256
/// pages apart. A region spans from its first to its last peak.
pub fn contiguous_regions(report: &PeakReport, min_peaks: usize) -> Vec<ContiguousRegion> {
    let period = ALIAS_PERIOD_FRAMES as usize;
    let pages = report.peak_pages();
    let mut regions = Vec::new();
    let mut i = 0;
    while i < pages.len() {
        let mut j = i;
        while j + 1 < pages.len() && pages[j + 1] - pages[j] == period {
            j += 1;
        }
        let count = j - i + 1;
        if count >= min_peaks.max(2) {
            regions.push(ContiguousRegion { start_page: pages[i], length: pages[j] - pages[i] + 1, peaks: count });
        }
        i = j + 1;
    }
    regions
}

pub fn detect_contiguous(trace: &TimingTrace) -> Vec<ContiguousRegion> {
    contiguous_regions(&PeakDetector::default().detect(trace), DEFAULT_MIN_PEAKS)
}

/// Oracle check of detected regions against the pagemap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContiguityScore {
    pub detected_pages: usize,
    pub correct_pages: usize,
    pub detectable_pages: usize,
    pub found_pages: usize,
}

impl ContiguityScore {
    pub fn precision(&self) -> f64 {
        if self.detected_pages == 0 {
            1.0
        } else {
            self.correct_pages as f64 / self.detected_pages as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.detectable_pages == 0 {
            1.0
        } else {
            self.found_pages as f64 / self.detectable_pages as f64
        }
    }

    pub fn merge(&mut self, other: &ContiguityScore) {
        self.detected_pages += other.detected_pages;
        self.correct_pages += other.correct_pages;
        self.detectable_pages += other.detectable_pages;
        self.found_pages += other.found_pages;
    }
}

/// Scores regions against ground truth.
///
/// A detected page is correct when its frame continues the region start's
/// frame without a gap. Detectable pages are those between the first and last
/// aliasing page of each frame-contiguous stretch that holds at least
/// `min_peaks` aliasing pages visible to the scan (index above the window).
pub fn score_contiguity(
    space: &AddressSpace,
    pages: &[VirtualAddress],
    load: VirtualAddress,
    window: usize,
    min_peaks: usize,
    regions: &[ContiguousRegion],
) -> ContiguityScore {
    let pm = space.pagemap();
    let frames: Vec<u64> = pages.iter().map(|&p| pm.frame_of(p).expect("mapped")).collect();
    let load_alias = pm.physical(load).expect("mapped").alias20();
    let mut detected = vec![false; pages.len()];
    let mut score = ContiguityScore::default();
    for r in regions {
        for p in r.start_page..r.end_page().min(pages.len()) {
            detected[p] = true;
            score.detected_pages += 1;
            if frames[p] == frames[r.start_page] + (p - r.start_page) as u64 {
                score.correct_pages += 1;
            }
        }
    }
    let mut start = 0;
    while start < pages.len() {
        let mut end = start + 1;
        while end < pages.len() && frames[end] == frames[end - 1] + 1 {
            end += 1;
        }
        let aliased: Vec<usize> = (start..end)
            .filter(|&p| p > window && PhysicalAddress::from_frame(frames[p], 0).alias20() == load_alias)
            .collect();
        if aliased.len() >= min_peaks.max(2) {
            for p in aliased[0]..=*aliased.last().expect("non-empty") {
                score.detectable_pages += 1;
                if detected[p] {
                    score.found_pages += 1;
                }
            }
        }
        start = end;
    }
    score
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    OneToZero,
    ZeroToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitFlip {
    pub bank: usize,
    pub row: u64,
    pub bit_offset: u64,
    pub direction: FlipDirection,
}

/// Threshold-plus-Bernoulli disturbance model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipModel {
    pub threshold_hammers: u64,
    /// Per-cell flip probability for every activation beyond the threshold.
    pub per_cell_flip_rate: f64,
    /// Share of cells in a row that can flip at all.
    pub vulnerable_fraction: f64,
    pub susceptible: bool,
    pub seed: u64,
}

impl Default for FlipModel {
    fn default() -> Self {
        FlipModel {
            threshold_hammers: 50_000_000,
            per_cell_flip_rate: 1e-8,
            vulnerable_fraction: 1e-3,
            susceptible: true,
            seed: 0,
        }
    }
}

impl FlipModel {
    /// Flips in the victim row after `hammers` activations of both neighbours.
    pub fn flips(&self, geometry: &DramGeometry, bank: usize, row: u64, hammers: u64) -> Vec<BitFlip> {
        if !self.susceptible || hammers <= self.threshold_hammers {
            return Vec::new();
        }
        let excess = (hammers - self.threshold_hammers) as f64;
        let p_flip = -(-self.per_cell_flip_rate).ln_1p() * excess;
        let p_flip = 1.0 - (-p_flip).exp();
        let cell_seed = self.seed ^ (bank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ row.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
        let bits = geometry.row_size_bytes * 8;
        let mut out = Vec::new();
        for bit in 0..bits {
            let vulnerable = rng.random::<f64>() < self.vulnerable_fraction;
            let u: f64 = rng.random();
            let direction = if rng.random::<bool>() { FlipDirection::OneToZero } else { FlipDirection::ZeroToOne };
            if vulnerable && u < p_flip {
                out.push(BitFlip { bank, row, bit_offset: bit, direction });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowhammerReport {
    pub region: ContiguousRegion,
    /// Buffer page indices of the two aggressor rows.
    pub aggressors: [usize; 2],
    /// Buffer page indices of the sandwiched row.
    pub victim_pages: Vec<usize>,
    pub hammers: u64,
    pub flips: Vec<BitFlip>,
}

/// Target rows chosen by the attacker inside a contiguous region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HammerPlan {
    pub region: ContiguousRegion,
    pub aggressors: [usize; 2],
    pub victim_pages: Vec<usize>,
}

/// Locates a contiguous region with the aliasing scan, then three
/// consecutive rows of one bank within it using the row-conflict channel.
pub fn plan_double_sided(
    space: &AddressSpace,
    geometry: &DramGeometry,
    mob: &mut Mob,
    pages: &[VirtualAddress],
    load: VirtualAddress,
) -> Result<HammerPlan, DramError> {
    let trace = aliasing_scan(space, mob, pages, DEFAULT_WINDOW, load)?;
    let regions = detect_contiguous(&trace);
    let mut state = RowBufferState::new(geometry);
    for region in regions.iter().filter(|r| r.length >= MIN_HAMMER_REGION_PAGES) {
        let reference = region.start_page;
        let mut same_bank = Vec::new();
        for p in reference + 1..region.end_page() {
            if row_conflict(&mut state, geometry, space, pages[reference], pages[p])? {
                same_bank.push(p);
            }
        }
        // Rows of one bank appear as runs of consecutive pages, one run per row offset.
        let rows_per_chunk = (geometry.row_size_bytes / PAGE_SIZE) as usize;
        let mut chunks: Vec<Vec<usize>> = Vec::new();
        for p in same_bank {
            match chunks.last_mut() {
                Some(c) if *c.last().expect("non-empty") + 1 == p => c.push(p),
                _ => chunks.push(vec![p]),
            }
        }
        chunks.retain(|c| c.len() == rows_per_chunk);
        if chunks.len() >= 3 {
            return Ok(HammerPlan {
                region: *region,
                aggressors: [chunks[0][0], chunks[2][0]],
                victim_pages: chunks[1].clone(),
            });
        }
    }
    Err(DramError::AttackInfeasible(if regions.is_empty() {
        "no contiguous memory detected".into()
    } else {
        "no three consecutive same-bank rows in detected regions".into()
    }))
}

/// Hammers the planned aggressor rows; the memory decides which row is
/// disturbed from their physical placement.
pub fn hammer(
    space: &AddressSpace,
    geometry: &DramGeometry,
    plan: &HammerPlan,
    pages: &[VirtualAddress],
    model: &FlipModel,
    hammers: u64,
) -> Result<RowhammerReport, DramError> {
    let a = space.translate(pages[plan.aggressors[0]])?;
    let b = space.translate(pages[plan.aggressors[1]])?;
    let (bank_a, bank_b) = (geometry.bank_of(a), geometry.bank_of(b));
    let (row_a, row_b) = (geometry.row_of(a), geometry.row_of(b));
    let flips = if bank_a == bank_b && row_a.abs_diff(row_b) == 2 {
        model.flips(geometry, bank_a, row_a.min(row_b) + 1, hammers)
    } else {
        Vec::new()
    };
    Ok(RowhammerReport {
        region: plan.region,
        aggressors: plan.aggressors,
        victim_pages: plan.victim_pages.clone(),
        hammers,
        flips,
    })
}

pub fn double_sided_rowhammer(
    space: &AddressSpace,
    geometry: &DramGeometry,
    mob: &mut Mob,
    pages: &[VirtualAddress],
    load: VirtualAddress,
    model: &FlipModel,
    hammers: u64,
) -> Result<RowhammerReport, DramError> {
    let plan = plan_double_sided(space, geometry, mob, pages, load)?;
    hammer(space, geometry, &plan, pages, model, hammers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPhase {
    Rising,
    Falling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub frames: u64,
    pub buffer_pages: u64,
    pub trials: usize,
    pub seed: u64,
    pub rising: Vec<f64>,
    pub falling: Vec<f64>,
    /// Contiguous block the attacker needs, in pages.
    pub block_pages: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            frames: 1 << 17,
            buffer_pages: 8192,
            trials: 100,
            seed: 0,
            rising: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            falling: vec![0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
            block_pages: MIN_HAMMER_REGION_PAGES as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub utilization: f64,
    pub phase: SweepPhase,
    /// Share of trials whose buffer holds a frame-contiguous block (pagemap).
    pub oracle_available: f64,
    /// Share of trials where the aliasing scan reports a contiguous region.
    pub spoiler_available: f64,
    /// Share of trials whose free memory still has a block of that size.
    pub free_block_available: f64,
}

/// Allocation-availability of contiguous blocks while utilization rises
/// and then falls again, without rebooting in between.
pub fn fragmentation_sweep(arch: &MicroArchParams, cfg: &SweepConfig) -> Result<Vec<SweepPoint>, DramError> {
    if cfg.trials == 0 {
        return Err(DramError::Invalid("at least one trial is required".into()));
    }
    let steps: Vec<(f64, SweepPhase)> = cfg
        .rising
        .iter()
        .map(|&u| (u, SweepPhase::Rising))
        .chain(cfg.falling.iter().map(|&u| (u, SweepPhase::Falling)))
        .collect();
    let mut oracle = vec![0usize; steps.len()];
    let mut spoiler = vec![0usize; steps.len()];
    let mut free = vec![0usize; steps.len()];
    let mut mob = Mob::new(arch.clone());
    for t in 0..cfg.trials {
        let trial_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let mut space = AddressSpace::new(cfg.frames, trial_seed)?;
        for (k, &(u, _)) in steps.iter().enumerate() {
            space.set_utilization(u, trial_seed ^ ((k as u64 + 1) << 32))?;
            if space.pagemap().largest_contiguous_run() >= cfg.block_pages {
                free[k] += 1;
            }
            let buffer = space.alloc_pages(cfg.buffer_pages, AllocPolicy::buddy(trial_seed))?;
            let load = space.alloc_pages(1, AllocPolicy::buddy(trial_seed))?;
            if space.pagemap().longest_frame_run(&buffer) >= cfg.block_pages {
                oracle[k] += 1;
            }
            let trace = aliasing_scan(&space, &mut mob, &buffer, DEFAULT_WINDOW, load[0])?;
            if detect_contiguous(&trace).iter().any(|r| r.length as u64 >= cfg.block_pages) {
                spoiler[k] += 1;
            }
            space.free_pages(&buffer);
            space.free_pages(&load);
        }
    }
    let n = cfg.trials as f64;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(k, &(u, phase))| SweepPoint {
            utilization: u,
            phase,
            oracle_available: oracle[k] as f64 / n,
            spoiler_available: spoiler[k] as f64 / n,
            free_block_available: free[k] as f64 / n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_address_maps_to_bank_zero_row_zero() {
        let g = DramGeometry::from_bits(22);
        assert_eq!(g.bank_of(PhysicalAddress(0)), 0);
        assert_eq!(g.row_of(PhysicalAddress(0)), 0);
        assert_eq!(g.banks(), 32);
    }

    #[test]
    fn unknown_bits_per_config() {
        for (bits, n) in [(19, 0), (20, 0), (21, 1), (22, 2), (23, 3)] {
            let g = DramGeometry::from_bits(bits);
            assert_eq!(g.unknown_bits(), n);
            let all: u64 = g.mapping_masks.iter().fold(0, |a, m| a | m);
            assert!(all < 1 << bits, "mapping bits must lie below {bits}");
        }
    }

    #[test]
    fn next_row_offset_is_next_row() {
        let g = DramGeometry::from_bits(22);
        let a = PhysicalAddress(0x1234_0000);
        let b = PhysicalAddress(a.value() + g.row_offset_bytes);
        assert_eq!(g.row_of(b), g.row_of(a) + 1);
    }

    #[test]
    fn row_buffer_timing() {
        let g = DramGeometry::from_bits(21);
        let mut s = RowBufferState::new(&g);
        let a = PhysicalAddress(0);
        let same_row = PhysicalAddress(64);
        let other_row = PhysicalAddress(g.row_offset_bytes | 1 << 13);
        assert_eq!(g.bank_of(a), g.bank_of(other_row));
        assert_eq!(s.access_timed(&g, a), g.closed_cycles);
        assert_eq!(s.access_timed(&g, same_row), g.hit_cycles);
        for _ in 0..4 {
            assert_eq!(s.access_timed(&g, other_row), g.conflict_cycles);
            assert_eq!(s.access_timed(&g, a), g.conflict_cycles);
        }
        assert_eq!(g.conflict_cycles - g.hit_cycles, 100);
        assert!(g.hit_cycles < g.closed_cycles && g.closed_cycles < g.conflict_cycles);
    }

    #[test]
    fn regions_need_three_evenly_spaced_peaks() {
        let peaks = |pages: &[usize]| PeakReport {
            peaks: pages
                .iter()
                .map(|&page| crate::spoiler::Peak { page, samples: 56, steps: 22, max_cycles: 1245, complete: true })
                .collect(),
            groups: vec![],
        };
        assert!(contiguous_regions(&peaks(&[100, 356]), 3).is_empty());
        let r = contiguous_regions(&peaks(&[10, 100, 356, 612, 868, 1000, 1256]), 3);
        assert_eq!(r, [ContiguousRegion { start_page: 100, length: 769, peaks: 4 }]);
        assert_eq!(contiguous_regions(&peaks(&[1000, 1256]), 2).len(), 1);
    }

    #[test]
    fn flip_model_threshold_and_monotone() {
        let g = DramGeometry::from_bits(21);
        let m = FlipModel { seed: 3, ..Default::default() };
        assert!(m.flips(&g, 1, 10, 10_000_000).is_empty());
        assert!(m.flips(&g, 1, 10, 50_000_000).is_empty());
        let mut last = 0;
        for h in [60_000_000u64, 100_000_000, 200_000_000, 500_000_000, 1_000_000_000] {
            let n = m.flips(&g, 1, 10, h).len();
            assert!(n >= last);
            last = n;
        }
        assert!(last > 0);
        let off = FlipModel { susceptible: false, ..m };
        assert!(off.flips(&g, 1, 10, 1_000_000_000).is_empty());
    }
}
