//! Inclusive last-level cache model and eviction-set search.
//!
//! Three search strategies share one interface and are looked up by name in
//! a [`StrategyRegistry`]: `classic` (expand / contract / collect),
//! `improved` (contract leftovers seed the next candidate set, group
//! removal) and `aa` (partition a pool of 1 MB-aliased pages by slice).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memmap::{AddressSpace, MemError, PhysicalAddress, VirtualAddress};

pub const LINE_BYTES: u64 = 64;
const LINE_SHIFT: u32 = 6;
/// Lines per 4 kB page; sets derived from one base set by varying bits 6..11.
pub const LINES_PER_PAGE: u64 = 64;

/// Abort budget of the classic search, in eviction tests per pool address.
/// Runs that need longer than this are given up as statistical outliers.
pub const CLASSIC_TESTS_PER_ADDRESS: u64 = 112;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("pool of {size} addresses is too small, need at least {needed}")]
    InsufficientPool { size: usize, needed: usize },
    #[error("unknown eviction-set strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid cache geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheGeometry {
    pub line_bytes: u64,
    pub sets_per_slice: u64,
    pub ways: usize,
    pub slices: usize,
    /// One XOR mask over physical address bits per slice-index bit.
    pub slice_hash: Vec<u64>,
}

fn mask_of(bits: &[u32]) -> u64 {
    bits.iter().fold(0, |m, &b| m | 1 << b)
}

impl Default for CacheGeometry {
    /// 8 MB, 16-way, 4 slices.
    fn default() -> Self {
        CacheGeometry {
            line_bytes: LINE_BYTES,
            sets_per_slice: 2048,
            ways: 16,
            slices: 4,
            slice_hash: vec![
                mask_of(&[6, 10, 12, 14, 16, 17, 18, 20, 22, 24, 25, 26, 27, 28, 30, 32]),
                mask_of(&[7, 11, 13, 15, 17, 19, 20, 21, 22, 23, 24, 26, 28, 29, 31, 33]),
            ],
        }
    }
}

impl CacheGeometry {
    pub fn validate(&self) -> Result<(), CacheError> {
        if self.line_bytes != LINE_BYTES {
            return Err(CacheError::InvalidGeometry("line size must be 64 bytes".into()));
        }
        if !self.sets_per_slice.is_power_of_two() || self.sets_per_slice < LINES_PER_PAGE {
            return Err(CacheError::InvalidGeometry("sets per slice must be a power of two ≥ 64".into()));
        }
        if self.ways == 0 {
            return Err(CacheError::InvalidGeometry("ways must be positive".into()));
        }
        if self.slices != 1 << self.slice_hash.len() {
            return Err(CacheError::InvalidGeometry(format!(
                "{} slices need {} hash masks, got {}",
                self.slices,
                self.slices.trailing_zeros(),
                self.slice_hash.len()
            )));
        }
        Ok(())
    }

    /// Highest set-index bit plus one (set-index bits plus line-offset bits).
    pub fn set_bits(&self) -> u32 {
        self.sets_per_slice.trailing_zeros() + LINE_SHIFT
    }

    pub fn slice_bits(&self) -> u32 {
        self.slice_hash.len() as u32
    }

    pub fn total_sets(&self) -> u64 {
        self.sets_per_slice * self.slices as u64
    }

    pub fn set_and_slice(&self, pa: PhysicalAddress) -> (u64, usize) {
        let set = (pa.value() >> LINE_SHIFT) & (self.sets_per_slice - 1);
        let slice = self
            .slice_hash
            .iter()
            .enumerate()
            .fold(0usize, |s, (i, &m)| s | (((pa.value() & m).count_ones() & 1) as usize) << i);
        (set, slice)
    }

    /// Probability that a random address agreeing with a witness on its
    /// `known_bits` low bits is congruent with it.
    pub fn congruence_probability(&self, known_bits: u32) -> f64 {
        let c = self.set_bits() as i32;
        let exponent = known_bits.min(self.set_bits()) as i32 - c - self.slice_bits() as i32;
        2f64.powi(exponent)
    }

    fn class_of(&self, pa: PhysicalAddress) -> u64 {
        let (set, slice) = self.set_and_slice(pa);
        set * self.slices as u64 + slice as u64
    }
}

/// `true` iff at least `ways` candidates are congruent with the witness.
pub fn evicts(
    geometry: &CacheGeometry,
    space: &AddressSpace,
    witness: VirtualAddress,
    candidates: &[VirtualAddress],
) -> Result<bool, CacheError> {
    let target = geometry.set_and_slice(space.translate(witness)?);
    let mut congruent = 0;
    for &c in candidates {
        if geometry.set_and_slice(space.translate(c)?) == target {
            congruent += 1;
        }
    }
    Ok(congruent >= geometry.ways)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    pub witness: VirtualAddress,
    pub addresses: Vec<VirtualAddress>,
}

impl EvictionSet {
    /// The same pages at another line offset within the page.
    pub fn at_line(&self, line: u64) -> EvictionSet {
        let off = line * LINE_BYTES;
        EvictionSet {
            witness: self.witness.with_offset(off),
            addresses: self.addresses.iter().map(|a| a.with_offset(off)).collect(),
        }
    }

    /// The 63 sets obtained by varying the line-offset bits 6..11.
    pub fn derived_sets(&self) -> Vec<EvictionSet> {
        (1..LINES_PER_PAGE).map(|l| self.at_line(l)).collect()
    }

    /// Oracle: (set, slice) if all members and the witness are congruent.
    pub fn oracle_target(&self, geometry: &CacheGeometry, space: &AddressSpace) -> Option<(u64, usize)> {
        let pm = space.pagemap();
        let target = geometry.set_and_slice(pm.physical(self.witness)?);
        for &a in &self.addresses {
            if geometry.set_and_slice(pm.physical(a)?) != target {
                return None;
            }
        }
        Some(target)
    }

    pub fn to_json(&self, geometry: &CacheGeometry, space: &AddressSpace) -> serde_json::Value {
        let target = self.oracle_target(geometry, space);
        serde_json::json!({
            "set": target.map(|t| t.0),
            "slice": target.map(|t| t.1),
            "addresses": self.addresses.iter().map(|a| format!("{a}")).collect::<Vec<_>>(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub seed: u64,
    /// Probability that a single eviction test reports the wrong answer.
    pub flip_probability: f64,
    /// Repetitions of each test; the majority answer is used.
    pub rounds: usize,
    /// Abort once this many eviction tests have been spent.
    pub test_budget: Option<u64>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { seed: 0, flip_probability: 0.0, rounds: 1, test_budget: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub tests: u64,
    /// Simulated memory accesses: each test costs candidates + 1.
    pub accesses: u64,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub base_sets: Vec<EvictionSet>,
    pub stats: SearchStats,
}

impl SearchOutcome {
    /// Sets reachable by line-offset enumeration of every base set.
    pub fn total_sets(&self) -> u64 {
        self.base_sets.len() as u64 * LINES_PER_PAGE
    }
}

struct BudgetExceeded;

/// Eviction test oracle seen by the search algorithms: it answers
/// "does this candidate set evict that address" and nothing else.
struct Tester {
    classes: Vec<u64>,
    ways: usize,
    opts: SearchOptions,
    rng: ChaCha8Rng,
    stats: SearchStats,
}

/// Candidate set with a congruence-class histogram private to the tester.
#[derive(Clone, Default)]
struct Candidates {
    members: Vec<usize>,
    counts: BTreeMap<u64, usize>,
}

impl Candidates {
    fn push(&mut self, t: &Tester, a: usize) {
        self.members.push(a);
        *self.counts.entry(t.classes[a]).or_insert(0) += 1;
    }

    fn remove_at(&mut self, t: &Tester, idx: usize) -> usize {
        let a = self.members.swap_remove(idx);
        let c = self.counts.get_mut(&t.classes[a]).expect("member counted");
        *c -= 1;
        a
    }

    fn count(&self, class: u64) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    fn len(&self) -> usize {
        self.members.len()
    }
}

impl Tester {
    fn new(geometry: &CacheGeometry, space: &AddressSpace, pool: &[VirtualAddress], opts: SearchOptions) -> Result<Self, CacheError> {
        let classes = pool
            .iter()
            .map(|&v| space.translate(v).map(|pa| geometry.class_of(pa)))
            .collect::<Result<_, _>>()?;
        Ok(Tester {
            classes,
            ways: geometry.ways,
            opts: SearchOptions { rounds: opts.rounds.max(1), ..opts },
            rng: ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe71c_7e57),
            stats: SearchStats::default(),
        })
    }

    /// Eviction test of `witness` against a set of `size` lines of which
    /// `congruent` share its class.
    fn test(&mut self, congruent: usize, size: usize) -> Result<bool, BudgetExceeded> {
        if let Some(budget) = self.opts.test_budget {
            if self.stats.tests >= budget {
                self.stats.aborted = true;
                return Err(BudgetExceeded);
            }
        }
        let truth = congruent >= self.ways;
        let rounds = self.opts.rounds;
        self.stats.tests += 1;
        self.stats.accesses += rounds as u64 * (size as u64 + 1);
        if self.opts.flip_probability <= 0.0 {
            return Ok(truth);
        }
        let mut yes = 0;
        for _ in 0..rounds {
            let flip = self.rng.random::<f64>() < self.opts.flip_probability;
            if truth != flip {
                yes += 1;
            }
        }
        Ok(2 * yes > rounds)
    }

    fn evicts(&mut self, witness: usize, set: &Candidates) -> Result<bool, BudgetExceeded> {
        let k = set.count(self.classes[witness]);
        self.test(k, set.len())
    }

    fn evicts_without(&mut self, witness: usize, set: &Candidates, excluded: &[usize]) -> Result<bool, BudgetExceeded> {
        let wc = self.classes[witness];
        let k = set.count(wc) - excluded.iter().filter(|&&e| self.classes[e] == wc).count();
        self.test(k, set.len() - excluded.len())
    }

    fn evicts_members(&mut self, witness: usize, members: &[usize]) -> Result<bool, BudgetExceeded> {
        let wc = self.classes[witness];
        let k = members.iter().filter(|&&m| self.classes[m] == wc).count();
        self.test(k, members.len())
    }
}

/// A named eviction-set search algorithm.
pub trait EvictionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn find(
        &self,
        geometry: &CacheGeometry,
        space: &AddressSpace,
        pool: &[VirtualAddress],
        opts: &SearchOptions,
    ) -> Result<SearchOutcome, CacheError>;
}

/// Grows `c` from `pool` until it evicts some address, which is returned.
fn expand(t: &mut Tester, c: &mut Candidates, pool: &mut Vec<usize>) -> Result<Option<usize>, BudgetExceeded> {
    while let Some(x) = pool.pop() {
        if c.len() >= t.ways && t.evicts(x, c)? {
            return Ok(Some(x));
        }
        c.push(t, x);
    }
    Ok(None)
}

/// Removes one address at a time while the set still evicts `witness`.
fn contract_single(t: &mut Tester, c: &mut Candidates, witness: usize) -> Result<Vec<usize>, BudgetExceeded> {
    let mut removed = Vec::new();
    let mut i = 0;
    while i < c.len() && c.len() > t.ways {
        let a = c.members[i];
        if t.evicts_without(witness, c, &[a])? {
            removed.push(c.remove_at(t, i));
        } else {
            i += 1;
        }
    }
    Ok(removed)
}

/// Splits the set into ways + 1 groups and drops any group whose removal
/// keeps the eviction.
fn contract_groups(t: &mut Tester, c: &mut Candidates, witness: usize) -> Result<Vec<usize>, BudgetExceeded> {
    let mut removed = Vec::new();
    while c.len() > t.ways {
        let groups = (t.ways + 1).min(c.len());
        let size = c.len().div_ceil(groups);
        let members = c.members.clone();
        let mut dropped = None;
        for g in members.chunks(size) {
            if t.evicts_without(witness, c, g)? {
                dropped = Some(g.to_vec());
                break;
            }
        }
        let Some(g) = dropped else {
            // Noise left a set that no longer evicts; fall back to single steps.
            removed.extend(contract_single(t, c, witness)?);
            break;
        };
        for a in g {
            let idx = c.members.iter().position(|&m| m == a).expect("group member present");
            removed.push(c.remove_at(t, idx));
        }
    }
    Ok(removed)
}

/// Drops from `pool` every address the found set evicts.
fn collect(t: &mut Tester, set: &[usize], pool: &mut Vec<usize>) -> Result<(), BudgetExceeded> {
    let mut keep = Vec::with_capacity(pool.len());
    for &y in pool.iter() {
        if !t.evicts_members(y, set)? {
            keep.push(y);
        }
    }
    *pool = keep;
    Ok(())
}

fn finish(pool: &[VirtualAddress], sets: Vec<(usize, Vec<usize>)>, stats: SearchStats) -> SearchOutcome {
    SearchOutcome {
        base_sets: sets
            .into_iter()
            .map(|(w, m)| EvictionSet { witness: pool[w], addresses: m.into_iter().map(|i| pool[i]).collect() })
            .collect(),
        stats,
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn search(
    geometry: &CacheGeometry,
    space: &AddressSpace,
    pool: &[VirtualAddress],
    opts: &SearchOptions,
    improved: bool,
) -> Result<SearchOutcome, CacheError> {
    geometry.validate()?;
    let mut t = Tester::new(geometry, space, pool, *opts)?;
    let mut remaining = shuffled_indices(pool.len(), opts.seed);
    let mut sets = Vec::new();
    let mut c = Candidates::default();
    let _: Result<(), BudgetExceeded> = (|| {
        loop {
            let Some(witness) = expand(&mut t, &mut c, &mut remaining)? else { break };
            let removed =
                if improved { contract_groups(&mut t, &mut c, witness)? } else { contract_single(&mut t, &mut c, witness)? };
            let found = std::mem::take(&mut c.members);
            if improved {
                let mut leftovers = removed;
                collect(&mut t, &found, &mut leftovers)?;
                collect(&mut t, &found, &mut remaining)?;
                c = Candidates::default();
                for a in leftovers {
                    c.push(&t, a);
                }
            } else {
                remaining.extend(removed);
                collect(&mut t, &found, &mut remaining)?;
                c = Candidates::default();
            }
            sets.push((witness, found));
        }
        Ok(())
    })();
    Ok(finish(pool, sets, t.stats))
}

pub struct Classic;
pub struct Improved;
pub struct AliasAware;

impl EvictionStrategy for Classic {
    fn name(&self) -> &'static str {
        "classic"
    }

    fn find(&self, g: &CacheGeometry, s: &AddressSpace, pool: &[VirtualAddress], o: &SearchOptions) -> Result<SearchOutcome, CacheError> {
        search(g, s, pool, o, false)
    }
}

impl EvictionStrategy for Improved {
    fn name(&self) -> &'static str {
        "improved"
    }

    fn find(&self, g: &CacheGeometry, s: &AddressSpace, pool: &[VirtualAddress], o: &SearchOptions) -> Result<SearchOutcome, CacheError> {
        search(g, s, pool, o, true)
    }
}

impl EvictionStrategy for AliasAware {
    fn name(&self) -> &'static str {
        "aa"
    }

    /// `pool` must consist of pages sharing their 20 low physical bits; they
    /// then differ only in slice, so the search ends after `slices` sets.
    /// The last slice needs no witness: whatever remains belongs to it.
    fn find(&self, g: &CacheGeometry, s: &AddressSpace, pool: &[VirtualAddress], o: &SearchOptions) -> Result<SearchOutcome, CacheError> {
        g.validate()?;
        let needed = g.slices * g.ways;
        if pool.len() < needed {
            return Err(CacheError::InsufficientPool { size: pool.len(), needed });
        }
        let mut t = Tester::new(g, s, pool, *o)?;
        let mut remaining = shuffled_indices(pool.len(), o.seed);
        let mut sets: Vec<(usize, Vec<usize>)> = Vec::new();
        let _: Result<(), BudgetExceeded> = (|| {
            while sets.len() < g.slices {
                if sets.len() + 1 == g.slices && remaining.len() > g.ways {
                    // Remaining addresses form the last class: verify with one test.
                    let witness = remaining[0];
                    let members: Vec<usize> = remaining[1..=g.ways].to_vec();
                    if t.evicts_members(witness, &members)? {
                        sets.push((witness, members));
                    }
                    break;
                }
                let mut c = Candidates::default();
                let mut pool_left = remaining.clone();
                let Some(witness) = expand(&mut t, &mut c, &mut pool_left)? else { break };
                contract_groups(&mut t, &mut c, witness)?;
                let found = c.members.clone();
                remaining.retain(|&a| a != witness && !found.contains(&a));
                collect(&mut t, &found, &mut remaining)?;
                sets.push((witness, found));
            }
            Ok(())
        })();
        Ok(finish(pool, sets, t.stats))
    }
}

/// Strategies by name.
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn EvictionStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry { strategies: BTreeMap::new() };
        r.register(Box::new(Classic));
        r.register(Box::new(Improved));
        r.register(Box::new(AliasAware));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry { strategies: BTreeMap::new() }
    }

    pub fn register(&mut self, strategy: Box<dyn EvictionStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn EvictionStrategy, CacheError> {
        self.strategies.get(name).map(|b| b.as_ref()).ok_or_else(|| CacheError::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.strategies.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memmap::AllocPolicy;

    #[test]
    fn zero_address() {
        let g = CacheGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.set_and_slice(PhysicalAddress(0)), (0, 0));
        assert_eq!(g.set_bits(), 17);
        assert_eq!(g.total_sets(), 8192);
    }

    #[test]
    fn line_offset_is_ignored() {
        let g = CacheGeometry::default();
        for base in [0x1234_5000u64, 0x3f_ffc0, 0x2000_0040] {
            let a = g.set_and_slice(PhysicalAddress(base & !63));
            for off in 0..64 {
                assert_eq!(g.set_and_slice(PhysicalAddress((base & !63) | off)), a);
            }
        }
    }

    #[test]
    fn congruence_probability_clamps() {
        let g = CacheGeometry::default();
        assert_eq!(g.congruence_probability(12), 1.0 / 128.0);
        assert_eq!(g.congruence_probability(20), 0.25);
        assert_eq!(g.congruence_probability(17), 0.25);
    }

    #[test]
    fn exact_fill_evicts() {
        let g = CacheGeometry::default();
        let mut space = AddressSpace::new(1 << 16, 1).unwrap();
        let pages = space.alloc_pages(1 << 15, AllocPolicy::fragmented(1)).unwrap();
        let pm = space.pagemap();
        let w = pages[0];
        let target = g.set_and_slice(pm.physical(w).unwrap());
        let congruent: Vec<_> =
            pages[1..].iter().copied().filter(|&p| g.set_and_slice(pm.physical(p).unwrap()) == target).take(16).collect();
        assert_eq!(congruent.len(), 16);
        assert!(evicts(&g, &space, w, &congruent).unwrap());
        assert!(!evicts(&g, &space, w, &congruent[..15]).unwrap());
    }

    #[test]
    fn registry_lookup() {
        let r = StrategyRegistry::default();
        assert_eq!(r.names().collect::<Vec<_>>(), ["aa", "classic", "improved"]);
        assert!(matches!(r.get("nope"), Err(CacheError::UnknownStrategy(_))));
        assert_eq!(r.get("aa").unwrap().name(), "aa");
    }

    #[test]
    fn single_class_pool_gives_one_set() {
        let g = CacheGeometry::default();
        let mut space = AddressSpace::new(1 << 16, 2).unwrap();
        let pages = space.alloc_pages(1 << 15, AllocPolicy::fragmented(2)).unwrap();
        let pm = space.pagemap();
        let target = g.set_and_slice(pm.physical(pages[0]).unwrap());
        let pool: Vec<_> =
            pages.iter().copied().filter(|&p| g.set_and_slice(pm.physical(p).unwrap()) == target).take(40).collect();
        for name in ["classic", "improved"] {
            let out = StrategyRegistry::default().get(name).unwrap().find(&g, &space, &pool, &SearchOptions::default()).unwrap();
            assert_eq!(out.base_sets.len(), 1, "{name}");
            let set = &out.base_sets[0];
            assert_eq!(set.addresses.len(), 16);
            assert!(evicts(&g, &space, set.witness, &set.addresses).unwrap());
            assert_eq!(set.oracle_target(&g, &space), Some(target));
            for d in set.derived_sets() {
                assert!(d.oracle_target(&g, &space).is_some());
            }
        }
    }

    #[test]
    fn aa_rejects_small_pool() {
        let g = CacheGeometry::default();
        let mut space = AddressSpace::new(1 << 12, 2).unwrap();
        let pages = space.alloc_pages(63, AllocPolicy::fragmented(2)).unwrap();
        assert!(matches!(
            AliasAware.find(&g, &space, &pages, &SearchOptions::default()),
            Err(CacheError::InsufficientPool { size: 63, needed: 64 })
        ));
    }

    #[test]
    fn budget_aborts() {
        let g = CacheGeometry::default();
        let mut space = AddressSpace::new(1 << 16, 3).unwrap();
        let pool = space.alloc_pages(4096, AllocPolicy::fragmented(3)).unwrap();
        let opts = SearchOptions { test_budget: Some(500), ..Default::default() };
        let out = Classic.find(&g, &space, &pool, &opts).unwrap();
        assert!(out.stats.aborted);
        assert_eq!(out.stats.tests, 500);
    }
}
