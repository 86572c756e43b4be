//! Memory order buffer model: store buffer occupancy, the loosenet / finenet /
//! physical-address dependency checks, and the resulting latency of a
//! speculative load together with the counter events it raises.
//!
//! The timing model is deterministic. Given the pending stores and a load,
//! the outcome is one of four latency classes:
//!
//! * no pending store shares an offset with the load or with another store:
//!   `base_load_cycles`;
//! * stores 4K-alias each other but not the load: `store_4k_class_cycles`;
//! * at least one store 4K-aliases the load but none matches bits 19..0:
//!   `load_4k_class_cycles`;
//! * a store matches bits 19..0 and at least two stores are loosenet hits:
//!   a stepped latency between `peak_cycles` and `plateau_cycles`, selected
//!   by how many loosenet hits are older than the youngest 1 MB match.
//!
//! A single loosenet hit never produces the stepped latency.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::memmap::{PhysicalAddress, VirtualAddress, PAGE_SIZE};

/// Filler instruction executed between the stores and the load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillerKind {
    Nop,
    Add,
    Leal,
}

impl FillerKind {
    pub const ALL: [FillerKind; 3] = [FillerKind::Nop, FillerKind::Add, FillerKind::Leal];

    pub fn name(self) -> &'static str {
        match self {
            FillerKind::Nop => "nop",
            FillerKind::Add => "add",
            FillerKind::Leal => "leal",
        }
    }
}

impl std::str::FromStr for FillerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nop" => Ok(FillerKind::Nop),
            "add" => Ok(FillerKind::Add),
            "leal" => Ok(FillerKind::Leal),
            other => Err(format!("unknown filler instruction `{other}`")),
        }
    }
}

/// Stores committed per filler instruction, as an exact ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct DrainRate {
    pub stores: u64,
    pub per_instructions: u64,
}

impl DrainRate {
    pub fn committed_after(self, instructions: u64) -> u64 {
        if self.per_instructions == 0 {
            return 0;
        }
        instructions * self.stores / self.per_instructions
    }
}

impl From<[u64; 2]> for DrainRate {
    fn from(v: [u64; 2]) -> Self {
        DrainRate { stores: v[0], per_instructions: v[1] }
    }
}

impl From<DrainRate> for [u64; 2] {
    fn from(r: DrainRate) -> Self {
        [r.stores, r.per_instructions]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroArchParams {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub cpu: String,
    #[serde(default)]
    pub architecture: String,
    pub store_buffer_size: usize,
    /// Number of latency steps of a 1 MB aliasing peak; 0 when the
    /// architecture shows no 1 MB aliasing.
    pub steps: usize,
    pub base_load_cycles: u64,
    pub store_4k_class_cycles: u64,
    pub load_4k_class_cycles: u64,
    pub plateau_cycles: u64,
    pub peak_cycles: u64,
    pub drain: BTreeMap<FillerKind, DrainRate>,
    #[serde(default)]
    pub hyperthreading: bool,
}

impl MicroArchParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.store_buffer_size == 0 {
            return Err(format!("{}: store buffer size must be positive", self.name));
        }
        if self.steps > self.store_buffer_size {
            return Err(format!(
                "{}: {} steps exceed store buffer size {}",
                self.name, self.steps, self.store_buffer_size
            ));
        }
        let order = [
            self.base_load_cycles,
            self.store_4k_class_cycles,
            self.load_4k_class_cycles,
            self.plateau_cycles,
            self.peak_cycles,
        ];
        if order.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!(
                "{}: latency classes must satisfy base < store-4K < load-4K < plateau < peak",
                self.name
            ));
        }
        if self.steps > 1 && self.peak_cycles - self.plateau_cycles < (self.steps - 1) as u64 {
            return Err(format!("{}: peak-plateau gap too small for {} steps", self.name, self.steps));
        }
        for kind in FillerKind::ALL {
            if !self.drain.contains_key(&kind) {
                return Err(format!("{}: missing drain rate for `{}`", self.name, kind.name()));
            }
        }
        Ok(())
    }

    /// Latency of the given step of a 1 MB aliasing peak (step 0 is the top).
    pub fn step_cycles(&self, steps: usize, step_index: usize) -> u64 {
        if steps <= 1 {
            return self.peak_cycles;
        }
        let span = self.peak_cycles - self.plateau_cycles;
        self.peak_cycles - span * step_index as u64 / (steps - 1) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreBufferEntry {
    pub va: VirtualAddress,
    pub pa: PhysicalAddress,
    pub age: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AliasingClass {
    NoAlias,
    StoreStore4k,
    LoadStore4k,
    OneMb,
}

impl AliasingClass {
    pub const ALL: [AliasingClass; 4] = [
        AliasingClass::NoAlias,
        AliasingClass::StoreStore4k,
        AliasingClass::LoadStore4k,
        AliasingClass::OneMb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AliasingClass::NoAlias => "no_alias",
            AliasingClass::StoreStore4k => "store_store_4k",
            AliasingClass::LoadStore4k => "load_store_4k",
            AliasingClass::OneMb => "one_mb",
        }
    }
}

/// Simulated performance counter events for one load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSample {
    /// Cycle_Activity:Stalls_Ldm_Pending
    pub stalls_ldm_pending: u64,
    /// Ld_Blocks_Partial:Address_Alias
    pub address_alias: u64,
    /// Exe_Activity:Bound_on_Stores
    pub bound_on_stores: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOutcome {
    pub cycles: u64,
    pub aliasing_class: AliasingClass,
    /// Step of the 1 MB peak (0 = highest), only for [`AliasingClass::OneMb`].
    pub step_index: Option<usize>,
    pub counters: CounterSample,
}

/// Loosenet: page offsets (bits 11..0) match.
pub fn loosenet(load_pa: PhysicalAddress, entry: &StoreBufferEntry) -> bool {
    load_pa.page_offset() == entry.pa.page_offset()
}

/// Finenet: the partial physical tag, bits 19..12, matches.
pub fn finenet(load_pa: PhysicalAddress, entry: &StoreBufferEntry) -> bool {
    const TAG: u64 = 0xff * PAGE_SIZE;
    load_pa.value() & TAG == entry.pa.value() & TAG
}

/// Memory disambiguation predictor: a table of saturating counters indexed
/// by load address.
#[derive(Clone, Debug, PartialEq)]
pub struct Disambiguator {
    table: HashMap<u64, u32>,
    threshold: u32,
    predictions: u64,
    mispredictions: u64,
}

impl Disambiguator {
    pub fn new(threshold: u32) -> Self {
        Disambiguator { table: HashMap::new(), threshold, predictions: 0, mispredictions: 0 }
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn counter(&self, load_va: VirtualAddress) -> u32 {
        self.table.get(&load_va.value()).copied().unwrap_or(0)
    }

    /// True when the load is predicted independent of older stores.
    pub fn predict(&self, load_va: VirtualAddress) -> bool {
        self.threshold > 0 && self.counter(load_va) >= self.threshold
    }

    pub fn update(&mut self, load_va: VirtualAddress, false_dependency: bool) {
        if self.predict(load_va) {
            self.predictions += 1;
            if false_dependency {
                self.mispredictions += 1;
            }
        }
        let counter = self.table.entry(load_va.value()).or_insert(0);
        if false_dependency {
            *counter = 0;
        } else {
            *counter = (*counter + 1).min(self.threshold);
        }
    }

    /// Share of saturated predictions later found wrong; what a watchdog would monitor.
    pub fn misprediction_rate(&self) -> f64 {
        if self.predictions == 0 {
            0.0
        } else {
            self.mispredictions as f64 / self.predictions as f64
        }
    }
}

/// Memory order buffer for one logical core.
#[derive(Clone, Debug)]
pub struct Mob {
    params: MicroArchParams,
    capacity: usize,
    steps: usize,
    pending: VecDeque<StoreBufferEntry>,
    next_age: u64,
    committed: u64,
    blocked_since_load: u64,
    disambiguator: Option<Disambiguator>,
}

impl Mob {
    pub fn new(params: MicroArchParams) -> Self {
        let mut mob = Mob {
            capacity: params.store_buffer_size,
            steps: params.steps,
            pending: VecDeque::with_capacity(params.store_buffer_size),
            next_age: 0,
            committed: 0,
            blocked_since_load: 0,
            disambiguator: None,
            params,
        };
        if mob.params.hyperthreading {
            mob.set_hyperthreading(true);
        }
        mob
    }

    pub fn params(&self) -> &MicroArchParams {
        &self.params
    }

    /// Effective store buffer entries available to this thread.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Effective number of peak steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn pending(&self) -> impl ExactSizeIterator<Item = &StoreBufferEntry> {
        self.pending.iter()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    pub fn enable_disambiguator(&mut self, threshold: u32) {
        self.disambiguator = Some(Disambiguator::new(threshold));
    }

    pub fn disambiguator(&self) -> Option<&Disambiguator> {
        self.disambiguator.as_ref()
    }

    /// Appends a store. A full buffer commits its oldest entry first.
    pub fn issue_store(&mut self, va: VirtualAddress, pa: PhysicalAddress) {
        if self.pending.len() >= self.capacity {
            self.commit_oldest(self.pending.len() + 1 - self.capacity);
            self.blocked_since_load += 1;
        }
        self.pending.push_back(StoreBufferEntry { va, pa, age: self.next_age });
        self.next_age += 1;
    }

    fn commit_oldest(&mut self, n: usize) {
        let n = n.min(self.pending.len());
        self.pending.drain(..n);
        self.committed += n as u64;
    }

    pub fn commit_all(&mut self) {
        self.commit_oldest(self.pending.len());
    }

    /// Executes `count` filler instructions; stores retire at the
    /// architecture's drain rate for that instruction kind.
    pub fn drain(&mut self, kind: FillerKind, count: u64) {
        let rate = self.params.drain.get(&kind).copied().unwrap_or(DrainRate { stores: 0, per_instructions: 1 });
        let n = rate.committed_after(count).min(self.pending.len() as u64) as usize;
        self.commit_oldest(n);
    }

    /// Splits the store buffer between two logical cores (or restores it).
    pub fn set_hyperthreading(&mut self, enabled: bool) {
        self.params.hyperthreading = enabled;
        if enabled {
            self.capacity = self.params.store_buffer_size / 2;
            self.steps = self.params.steps / 2;
        } else {
            self.capacity = self.params.store_buffer_size;
            self.steps = self.params.steps;
        }
        if self.pending.len() > self.capacity {
            self.commit_oldest(self.pending.len() - self.capacity);
        }
    }

    /// Classifies a load against the pending stores without side effects.
    pub fn classify(&self, load_pa: PhysicalAddress) -> LoadOutcome {
        let p = &self.params;
        let mut loosenet_hits = 0usize;
        // Carry chain: scan from the most recent store.
        let mut youngest_match_rank: Option<usize> = None;
        for entry in self.pending.iter().rev() {
            if !loosenet(load_pa, entry) {
                continue;
            }
            if youngest_match_rank.is_none() && finenet(load_pa, entry) {
                youngest_match_rank = Some(loosenet_hits);
            }
            loosenet_hits += 1;
        }

        let (class, cycles, step_index) = match youngest_match_rank {
            Some(younger) if loosenet_hits >= 2 && self.steps > 0 => {
                let older = loosenet_hits - 1 - younger;
                let step = (older * self.steps / loosenet_hits).min(self.steps - 1);
                (AliasingClass::OneMb, p.step_cycles(self.steps, step), Some(step))
            }
            _ if loosenet_hits > 0 => (AliasingClass::LoadStore4k, p.load_4k_class_cycles, None),
            _ if self.stores_alias_each_other() => (AliasingClass::StoreStore4k, p.store_4k_class_cycles, None),
            _ => (AliasingClass::NoAlias, p.base_load_cycles, None),
        };
        LoadOutcome {
            cycles,
            aliasing_class: class,
            step_index,
            counters: CounterSample {
                stalls_ldm_pending: cycles.saturating_sub(p.base_load_cycles),
                address_alias: step_index.map_or(loosenet_hits as u64, |s| s as u64),
                bound_on_stores: self.blocked_since_load,
            },
        }
    }

    fn stores_alias_each_other(&self) -> bool {
        let mut offsets: Vec<u64> = self.pending.iter().map(|e| e.pa.page_offset()).collect();
        offsets.sort_unstable();
        offsets.windows(2).any(|w| w[0] == w[1])
    }

    /// Executes a speculative load and returns its latency and counter events.
    /// Pending stores stay in the buffer.
    pub fn speculative_load(&mut self, load_va: VirtualAddress, load_pa: PhysicalAddress) -> LoadOutcome {
        let mut outcome = self.classify(load_pa);
        if let Some(predictor) = self.disambiguator.as_mut() {
            // A confident prediction skips the loosenet stage only; 1 MB
            // aliasing is caught later in the pipeline regardless.
            let bypass = predictor.predict(load_va);
            if bypass && outcome.aliasing_class == AliasingClass::LoadStore4k {
                outcome.aliasing_class = AliasingClass::NoAlias;
                outcome.cycles = self.params.base_load_cycles;
                outcome.counters.stalls_ldm_pending = 0;
                outcome.counters.address_alias = 0;
            }
            predictor.update(load_va, outcome.aliasing_class == AliasingClass::OneMb);
        }
        self.blocked_since_load = 0;
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Presets;

    fn kaby() -> MicroArchParams {
        Presets::builtin().microarch("kabylake-r").unwrap().clone()
    }

    fn pa(frame: u64, offset: u64) -> PhysicalAddress {
        PhysicalAddress::from_frame(frame, offset)
    }

    fn va(n: u64) -> VirtualAddress {
        VirtualAddress::from_page(0x1000 + n, 0)
    }

    #[test]
    fn full_buffer_commits_oldest() {
        let mut mob = Mob::new(kaby());
        for i in 0..64 {
            mob.issue_store(va(i), pa(1000 + i, 0));
        }
        assert_eq!(mob.pending_len(), 56);
        assert_eq!(mob.committed(), 8);
        let ages: Vec<u64> = mob.pending().map(|e| e.age).collect();
        assert!(ages.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ages[0], 8);
    }

    #[test]
    fn single_store_is_pending() {
        let mut mob = Mob::new(kaby());
        mob.issue_store(va(0), pa(1, 0));
        assert_eq!(mob.pending_len(), 1);
        assert_eq!(mob.committed(), 0);
    }

    #[test]
    fn loosenet_and_finenet() {
        let e = StoreBufferEntry { va: va(0), pa: pa(0x300, 0), age: 0 };
        assert!(loosenet(pa(0x7, 0), &e));
        assert!(!loosenet(pa(0x300, 0x40), &e));
        assert!(finenet(pa(0x300 + 0x100 * 5, 0), &e));
        assert!(!finenet(pa(0x301, 0), &e));
    }

    #[test]
    fn latency_classes() {
        let p = kaby();
        let mut mob = Mob::new(p.clone());
        assert_eq!(mob.speculative_load(va(99), pa(5, 0)).aliasing_class, AliasingClass::NoAlias);

        for i in 0..10 {
            mob.issue_store(va(i), pa(100 + i, i * 64));
        }
        let out = mob.speculative_load(va(99), pa(5, 0x800));
        assert_eq!((out.aliasing_class, out.cycles), (AliasingClass::NoAlias, 30));

        mob.commit_all();
        for i in 0..10 {
            mob.issue_store(va(i), pa(100 + i, 0x40));
        }
        let out = mob.speculative_load(va(99), pa(5, 0x800));
        assert_eq!((out.aliasing_class, out.cycles), (AliasingClass::StoreStore4k, 100));
        let out = mob.speculative_load(va(99), pa(5, 0x40));
        assert_eq!((out.aliasing_class, out.cycles), (AliasingClass::LoadStore4k, 200));
        assert_eq!(out.counters.address_alias, 10);
    }

    #[test]
    fn oldest_alias_in_full_window_is_the_peak() {
        let p = kaby();
        let mut mob = Mob::new(p.clone());
        mob.issue_store(va(0), pa(0x100 + 7, 0));
        for i in 1..56 {
            mob.issue_store(va(i), pa(0x1080 + i, 0));
        }
        let out = mob.speculative_load(va(99), pa(7, 0));
        assert_eq!(out.aliasing_class, AliasingClass::OneMb);
        assert_eq!(out.step_index, Some(0));
        assert_eq!(out.cycles, p.peak_cycles);
        assert!(out.cycles >= 1200);
        assert_eq!(out.counters.address_alias, 0);
    }

    #[test]
    fn single_loosenet_hit_has_no_peak() {
        let mut mob = Mob::new(kaby());
        mob.issue_store(va(0), pa(0x100 + 7, 0));
        for i in 1..56 {
            mob.issue_store(va(i), pa(0x1080 + i, 0x80));
        }
        let out = mob.speculative_load(va(99), pa(7, 0));
        assert_eq!(out.aliasing_class, AliasingClass::LoadStore4k);
        assert_eq!(out.cycles, 200);
    }

    #[test]
    fn one_finenet_hit_in_full_buffer_is_one_mb() {
        let mut mob = Mob::new(kaby());
        for i in 0..56 {
            let frame = if i == 30 { 0x500 + 9 } else { 0x2080 + i };
            mob.issue_store(va(i), pa(frame, 0));
        }
        let load = pa(9, 0);
        let hits = mob.pending().filter(|e| loosenet(load, e) && finenet(load, e)).count();
        assert_eq!(hits, 1);
        assert_eq!(mob.speculative_load(va(99), load).aliasing_class, AliasingClass::OneMb);
    }

    #[test]
    fn full_window_produces_exactly_steps_levels() {
        let p = kaby();
        let mut levels = std::collections::BTreeSet::new();
        for pos in 0..56 {
            let mut mob = Mob::new(p.clone());
            for i in 0..56 {
                let frame = if i == pos { 0x100 + 3 } else { 0x2080 + i };
                mob.issue_store(va(i), pa(frame, 0));
            }
            levels.insert(mob.speculative_load(va(99), pa(3, 0)).cycles);
        }
        assert_eq!(levels.len(), 22);
        assert_eq!(*levels.iter().next_back().unwrap(), p.peak_cycles);
        assert_eq!(*levels.iter().next().unwrap(), p.plateau_cycles);
    }

    #[test]
    fn drain_by_filler() {
        let p = kaby();
        let fill = |mob: &mut Mob| {
            for i in 0..56 {
                mob.issue_store(va(i), pa(0x2080 + i, 0));
            }
        };
        let mut mob = Mob::new(p.clone());
        fill(&mut mob);
        mob.drain(FillerKind::Add, 0);
        assert_eq!(mob.pending_len(), 56);
        mob.drain(FillerKind::Add, 1000);
        assert_eq!(mob.pending_len(), 0);
        assert_eq!(mob.speculative_load(va(99), pa(3, 0)).aliasing_class, AliasingClass::NoAlias);
        fill(&mut mob);
        mob.drain(FillerKind::Nop, 4000);
        assert_eq!(mob.pending_len(), 0);
        fill(&mut mob);
        mob.drain(FillerKind::Nop, 1000);
        assert_eq!(mob.pending_len(), 42);
    }

    #[test]
    fn hyperthreading_halves_and_restores() {
        let presets = Presets::builtin();
        let mut mob = Mob::new(presets.microarch("kabylake-r").unwrap().clone());
        mob.set_hyperthreading(true);
        assert_eq!((mob.steps(), mob.capacity()), (11, 28));
        mob.set_hyperthreading(false);
        assert_eq!((mob.steps(), mob.capacity()), (22, 56));
        let mut snb = Mob::new(presets.microarch("sandybridge-2400").unwrap().clone());
        snb.set_hyperthreading(true);
        assert_eq!(snb.steps(), 6);
    }

    #[test]
    fn disambiguator_saturates_and_resets() {
        let mut d = Disambiguator::new(4);
        let load = va(7);
        assert!(!d.predict(load));
        for _ in 0..4 {
            d.update(load, false);
        }
        assert!(d.predict(load));
        d.update(load, false);
        assert_eq!(d.counter(load), 4);
        d.update(load, true);
        assert_eq!(d.counter(load), 0);
        assert!(!d.predict(load));
        assert_eq!(d.misprediction_rate(), 0.5);
    }

    #[test]
    fn prediction_does_not_hide_one_mb_aliasing() {
        let mut mob = Mob::new(kaby());
        mob.enable_disambiguator(3);
        let load_va = va(99);
        let mut classes = Vec::new();
        for _ in 0..4 {
            for i in 0..56 {
                mob.issue_store(va(i), pa(0x2080 + i, 0));
            }
            classes.push(mob.speculative_load(load_va, pa(3, 0)).aliasing_class);
            mob.commit_all();
        }
        use AliasingClass::*;
        assert_eq!(classes, [LoadStore4k, LoadStore4k, LoadStore4k, NoAlias]);
        assert!(mob.disambiguator().unwrap().predict(load_va));
        for i in 0..56 {
            let frame = if i == 0 { 0x100 + 3 } else { 0x2080 + i };
            mob.issue_store(va(i), pa(frame, 0));
        }
        let out = mob.speculative_load(load_va, pa(3, 0));
        assert_eq!(out.aliasing_class, OneMb);
        assert!(!mob.disambiguator().unwrap().predict(load_va));
    }

    #[test]
    fn architecture_without_steps_never_peaks() {
        let mut mob = Mob::new(Presets::builtin().microarch("core2").unwrap().clone());
        for i in 0..20 {
            let frame = if i == 0 { 0x100 + 3 } else { 0x2080 + i };
            mob.issue_store(va(i), pa(frame, 0));
        }
        assert_eq!(mob.speculative_load(va(99), pa(3, 0)).aliasing_class, AliasingClass::LoadStore4k);
    }

    #[test]
    fn bound_on_stores_counts_blocked_issues() {
        let mut mob = Mob::new(kaby());
        for i in 0..65 {
            mob.issue_store(va(i), pa(0x2080 + i, 0));
        }
        assert_eq!(mob.speculative_load(va(99), pa(1, 0)).counters.bound_on_stores, 9);
        assert_eq!(mob.speculative_load(va(99), pa(1, 0)).counters.bound_on_stores, 0);
    }
}
