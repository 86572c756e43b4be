//! Virtual/physical address spaces backed by a binary buddy allocator.
//!
//! Physical memory is modeled as frame numbers only. Attack code reaches
//! physical addresses exclusively through [`AddressSpace::translate`], which
//! stands in for the MMU inside the simulated hardware models. Ground truth
//! for verification lives behind [`AddressSpace::pagemap`], the privileged
//! oracle view that attack code must never call.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
/// Number of least significant physical bits exposed by 1 MB aliasing.
pub const ALIAS_BITS: u32 = 20;
pub const ALIAS_MASK: u64 = (1 << ALIAS_BITS) - 1;
/// Frames between two frames that share the same low 20 address bits.
pub const ALIAS_PERIOD_FRAMES: u64 = 1 << (ALIAS_BITS - PAGE_SHIFT);
/// Largest buddy block is 2^MAX_ORDER frames (4 MiB).
pub const MAX_ORDER: u32 = 10;

const USER_BASE_VPN: u64 = 0x7f00_0000;
const GUARD_PAGES: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("out of memory: requested {requested} frames, {free} free")]
    OutOfMemory { requested: u64, free: u64 },
    #[error("page fault at {0}")]
    PageFault(VirtualAddress),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhysicalAddress(pub u64);

impl PhysicalAddress {
    pub fn from_frame(frame: u64, offset: u64) -> Self {
        debug_assert!(offset < PAGE_SIZE);
        PhysicalAddress((frame << PAGE_SHIFT) | offset)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub fn frame_number(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    /// The 20 least significant bits, i.e. the quantity leaked by 1 MB aliasing.
    pub fn alias20(self) -> u64 {
        self.0 & ALIAS_MASK
    }
}

impl fmt::Display for PhysicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pa:{:#x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VirtualAddress(pub u64);

impl VirtualAddress {
    pub fn from_page(vpn: u64, offset: u64) -> Self {
        debug_assert!(offset < PAGE_SIZE);
        VirtualAddress((vpn << PAGE_SHIFT) | offset)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub fn page_number(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub fn with_offset(self, offset: u64) -> Self {
        VirtualAddress::from_page(self.page_number(), offset)
    }

    pub fn offset_by(self, bytes: u64) -> Self {
        VirtualAddress(self.0 + bytes)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "va:{:#x}", self.0)
    }
}

/// How `alloc_pages` picks physical frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocKind {
    /// Largest free runs first, consecutive frame numbers within a run.
    Contiguous,
    /// Frames drawn uniformly without replacement from the free frames.
    Fragmented,
    /// Alternating segments; `contiguous_fraction` of segments are contiguous.
    Mixed { contiguous_fraction: f64 },
    /// Plain order-0 buddy allocation (LIFO free lists, smallest order first).
    Buddy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocPolicy {
    pub kind: AllocKind,
    pub seed: u64,
}

impl AllocPolicy {
    pub fn contiguous(seed: u64) -> Self {
        AllocPolicy { kind: AllocKind::Contiguous, seed }
    }

    pub fn fragmented(seed: u64) -> Self {
        AllocPolicy { kind: AllocKind::Fragmented, seed }
    }

    pub fn mixed(contiguous_fraction: f64, seed: u64) -> Self {
        AllocPolicy { kind: AllocKind::Mixed { contiguous_fraction }, seed }
    }

    pub fn buddy(seed: u64) -> Self {
        AllocPolicy { kind: AllocKind::Buddy, seed }
    }
}

/// Segment length bounds (pages) for [`AllocKind::Mixed`].
pub const MIXED_SEGMENT_MIN: u64 = 512;
pub const MIXED_SEGMENT_MAX: u64 = 4096;

// Free list with O(1) push, removal by value and random pick.
#[derive(Clone, Debug, Default)]
struct FreeList {
    blocks: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl FreeList {
    fn push(&mut self, block: u64) {
        self.index.insert(block, self.blocks.len());
        self.blocks.push(block);
    }

    fn remove(&mut self, block: u64) -> bool {
        let Some(i) = self.index.remove(&block) else {
            return false;
        };
        let last = self.blocks.pop().expect("index and blocks out of sync");
        if i < self.blocks.len() {
            self.blocks[i] = last;
            self.index.insert(last, i);
        }
        true
    }

    fn contains(&self, block: u64) -> bool {
        self.index.contains_key(&block)
    }

    fn len(&self) -> usize {
        self.blocks.len()
    }

    fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Which free block the allocator hands out within the chosen order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pick {
    /// Most recently freed block of the smallest sufficient order.
    Lifo,
    /// Uniformly random block of the smallest sufficient order.
    Random,
    /// Uniformly random free frame; the request is carved out around it.
    Scatter,
}

/// Binary buddy allocator over `frames` physical frames.
#[derive(Clone, Debug)]
pub struct BuddyAllocator {
    frames: u64,
    lists: Vec<FreeList>,
    free_frames: u64,
}

impl BuddyAllocator {
    pub fn new(frames: u64) -> Self {
        let mut alloc = BuddyAllocator {
            frames,
            lists: vec![FreeList::default(); MAX_ORDER as usize + 1],
            free_frames: frames,
        };
        let mut start = 0;
        while start < frames {
            let mut order = MAX_ORDER;
            while order > 0 && (start % (1 << order) != 0 || start + (1 << order) > frames) {
                order -= 1;
            }
            alloc.lists[order as usize].push(start);
            start += 1 << order;
        }
        alloc
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn free_frames(&self) -> u64 {
        self.free_frames
    }

    /// Allocates a block of `2^order` frames and returns its first frame.
    pub fn alloc<R: Rng>(&mut self, order: u32, pick: Pick, rng: &mut R) -> Option<u64> {
        let (found, mut start) = match pick {
            Pick::Lifo | Pick::Random => {
                let found = (order..=MAX_ORDER).find(|&o| !self.lists[o as usize].is_empty())?;
                let list = &self.lists[found as usize];
                let block = if pick == Pick::Lifo {
                    *list.blocks.last().expect("non-empty")
                } else {
                    list.blocks[rng.random_range(0..list.len())]
                };
                (found, block)
            }
            Pick::Scatter => {
                // Frame-weighted: larger free blocks are proportionally likelier
                // to receive the request somewhere inside them.
                let weight = |o: u32| (self.lists[o as usize].len() as u64) << (o - order);
                let total: u64 = (order..=MAX_ORDER).map(weight).sum();
                if total == 0 {
                    return None;
                }
                let mut k = rng.random_range(0..total);
                let mut chosen = None;
                for o in order..=MAX_ORDER {
                    let w = weight(o);
                    if k < w {
                        let list = &self.lists[o as usize];
                        let block = list.blocks[(k >> (o - order)) as usize];
                        chosen = Some((o, block, (k & ((1 << (o - order)) - 1)) << order));
                        break;
                    }
                    k -= w;
                }
                let (found, block, offset) = chosen.expect("index within total");
                self.lists[found as usize].remove(block);
                let mut start = block;
                let mut cur = found;
                while cur > order {
                    cur -= 1;
                    let half = 1u64 << cur;
                    if offset & half != 0 {
                        self.lists[cur as usize].push(start);
                        start += half;
                    } else {
                        self.lists[cur as usize].push(start + half);
                    }
                }
                self.free_frames -= 1 << order;
                return Some(start);
            }
        };
        self.lists[found as usize].remove(start);
        let mut cur = found;
        while cur > order {
            cur -= 1;
            self.lists[cur as usize].push(start + (1 << cur));
        }
        start &= !((1u64 << order) - 1);
        self.free_frames -= 1 << order;
        Some(start)
    }

    /// Allocates exactly `frame` as an order-0 block, splitting its free parent.
    pub fn alloc_frame(&mut self, frame: u64) -> bool {
        for order in 0..=MAX_ORDER {
            let mut start = frame & !((1u64 << order) - 1);
            if !self.lists[order as usize].contains(start) {
                continue;
            }
            self.lists[order as usize].remove(start);
            let mut cur = order;
            while cur > 0 {
                cur -= 1;
                let half = 1u64 << cur;
                if frame >= start + half {
                    self.lists[cur as usize].push(start);
                    start += half;
                } else {
                    self.lists[cur as usize].push(start + half);
                }
            }
            self.free_frames -= 1;
            return true;
        }
        false
    }

    /// Returns a block to the allocator, merging with free buddies.
    pub fn free(&mut self, start: u64, order: u32) {
        debug_assert_eq!(start % (1 << order), 0, "unaligned block");
        self.free_frames += 1 << order;
        let mut start = start;
        let mut order = order;
        while order < MAX_ORDER {
            let buddy = start ^ (1 << order);
            if !self.lists[order as usize].remove(buddy) {
                break;
            }
            start = start.min(buddy);
            order += 1;
        }
        self.lists[order as usize].push(start);
    }

    pub fn is_free(&self, frame: u64) -> bool {
        (0..=MAX_ORDER).any(|o| self.lists[o as usize].contains(frame & !((1u64 << o) - 1)))
    }

    /// Free blocks as `(start, order)`, sorted by start frame.
    pub fn free_blocks(&self) -> Vec<(u64, u32)> {
        let mut blocks: Vec<(u64, u32)> = self
            .lists
            .iter()
            .enumerate()
            .flat_map(|(o, l)| l.blocks.iter().map(move |&b| (b, o as u32)))
            .collect();
        blocks.sort_unstable();
        blocks
    }

    /// Maximal runs of consecutive free frames as `(start, length)`, sorted by start.
    pub fn free_runs(&self) -> Vec<(u64, u64)> {
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for (start, order) in self.free_blocks() {
            let len = 1u64 << order;
            match runs.last_mut() {
                Some((s, l)) if *s + *l == start => *l += len,
                _ => runs.push((start, len)),
            }
        }
        runs
    }

    /// Checks the buddy structure: aligned power-of-two blocks, no overlap,
    /// free count consistent. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut covered = 0u64;
        let mut last_end = 0u64;
        for (start, order) in self.free_blocks() {
            let len = 1u64 << order;
            if start % len != 0 {
                return Err(format!("block {start} of order {order} is unaligned"));
            }
            if start < last_end {
                return Err(format!("block {start} overlaps previous block"));
            }
            if start + len > self.frames {
                return Err(format!("block {start} exceeds memory"));
            }
            last_end = start + len;
            covered += len;
        }
        if covered != self.free_frames {
            return Err(format!("free lists cover {covered} frames, counter says {}", self.free_frames));
        }
        Ok(())
    }
}

/// Background workload used by [`AddressSpace::set_utilization`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadModel {
    /// Background blocks have a uniformly random order in `0..=max_order`.
    pub max_order: u32,
    /// Probability that a background allocation is placed anywhere in free
    /// memory instead of the smallest fitting free block.
    pub scatter: f64,
    /// Fraction of live background blocks replaced after every utilization
    /// change. Replacements are allocated before the old blocks are released,
    /// so each turnover leaves holes behind.
    pub churn: f64,
}

impl Default for WorkloadModel {
    fn default() -> Self {
        WorkloadModel { max_order: 3, scatter: 0.0, churn: 0.1 }
    }
}

/// Virtual-to-physical mapping for a single process plus the machine's
/// physical allocator state.
#[derive(Clone, Debug)]
pub struct AddressSpace {
    allocator: BuddyAllocator,
    page_table: BTreeMap<u64, u64>,
    next_vpn: u64,
    background: Vec<(u64, u32)>,
    workload: WorkloadModel,
    seed: u64,
}

impl AddressSpace {
    pub fn new(frames: u64, seed: u64) -> Result<Self, MemError> {
        if frames == 0 {
            return Err(MemError::InvalidConfig("address space needs at least one frame".into()));
        }
        Ok(AddressSpace {
            allocator: BuddyAllocator::new(frames),
            page_table: BTreeMap::new(),
            next_vpn: USER_BASE_VPN,
            background: Vec::new(),
            workload: WorkloadModel::default(),
            seed,
        })
    }

    pub fn with_workload(mut self, workload: WorkloadModel) -> Self {
        self.workload = workload;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_frames(&self) -> u64 {
        self.allocator.frames()
    }

    pub fn free_frames(&self) -> u64 {
        self.allocator.free_frames()
    }

    pub fn mapped_pages(&self) -> usize {
        self.page_table.len()
    }

    /// Occupied fraction of physical memory (process pages plus background).
    pub fn utilization(&self) -> f64 {
        let total = self.total_frames();
        (total - self.free_frames()) as f64 / total as f64
    }

    pub fn allocator(&self) -> &BuddyAllocator {
        &self.allocator
    }

    /// Maps `n` fresh virtual pages (consecutive virtual page numbers) and
    /// returns their page-aligned addresses.
    pub fn alloc_pages(&mut self, n: u64, policy: AllocPolicy) -> Result<Vec<VirtualAddress>, MemError> {
        if n == 0 {
            return Err(MemError::InvalidConfig("allocation of zero pages".into()));
        }
        let free = self.free_frames();
        if n > free {
            return Err(MemError::OutOfMemory { requested: n, free });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        let frames = match policy.kind {
            AllocKind::Contiguous => self.take_contiguous(n),
            AllocKind::Fragmented => self.take_fragmented(n, &mut rng),
            AllocKind::Buddy => self.take_buddy(n, &mut rng),
            AllocKind::Mixed { contiguous_fraction } => {
                if !(0.0..=1.0).contains(&contiguous_fraction) {
                    return Err(MemError::InvalidConfig(format!(
                        "contiguous fraction {contiguous_fraction} outside [0, 1]"
                    )));
                }
                let mut frames = Vec::with_capacity(n as usize);
                while (frames.len() as u64) < n {
                    let remaining = n - frames.len() as u64;
                    let len = rng.random_range(MIXED_SEGMENT_MIN..=MIXED_SEGMENT_MAX).min(remaining);
                    if rng.random::<f64>() < contiguous_fraction {
                        frames.extend(self.take_contiguous(len));
                    } else {
                        frames.extend(self.take_fragmented(len, &mut rng));
                    }
                }
                frames
            }
        };
        let base = self.next_vpn;
        let vas = frames
            .into_iter()
            .enumerate()
            .map(|(i, frame)| {
                let vpn = base + i as u64;
                self.page_table.insert(vpn, frame);
                VirtualAddress::from_page(vpn, 0)
            })
            .collect();
        self.next_vpn = base + n + GUARD_PAGES;
        Ok(vas)
    }

    fn take_contiguous(&mut self, n: u64) -> Vec<u64> {
        let mut runs = self.allocator.free_runs();
        runs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut frames = Vec::with_capacity(n as usize);
        'outer: for (start, len) in runs {
            for frame in start..start + len {
                if frames.len() as u64 == n {
                    break 'outer;
                }
                let ok = self.allocator.alloc_frame(frame);
                debug_assert!(ok);
                frames.push(frame);
            }
        }
        frames
    }

    fn take_fragmented(&mut self, n: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
        let runs = self.allocator.free_runs();
        let mut prefix = Vec::with_capacity(runs.len());
        let mut total = 0u64;
        for &(_, len) in &runs {
            total += len;
            prefix.push(total);
        }
        let picks = index::sample(rng, total as usize, n as usize);
        let frames: Vec<u64> = picks
            .into_iter()
            .map(|k| {
                let k = k as u64;
                let r = prefix.partition_point(|&p| p <= k);
                let before = if r == 0 { 0 } else { prefix[r - 1] };
                runs[r].0 + (k - before)
            })
            .collect();
        for &f in &frames {
            let ok = self.allocator.alloc_frame(f);
            debug_assert!(ok);
        }
        frames
    }

    fn take_buddy(&mut self, n: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
        (0..n)
            .map(|_| self.allocator.alloc(0, Pick::Lifo, rng).expect("free frames checked by caller"))
            .collect()
    }

    /// Unmaps the given pages and returns their frames to the allocator.
    pub fn free_pages(&mut self, pages: &[VirtualAddress]) {
        for va in pages {
            if let Some(frame) = self.page_table.remove(&va.page_number()) {
                self.allocator.free(frame, 0);
            }
        }
    }

    /// MMU translation used by the simulated hardware. Preserves the page offset.
    pub fn translate(&self, va: VirtualAddress) -> Result<PhysicalAddress, MemError> {
        self.page_table
            .get(&va.page_number())
            .map(|&frame| PhysicalAddress::from_frame(frame, va.page_offset()))
            .ok_or(MemError::PageFault(va))
    }

    /// Drives the background workload until the occupied share of physical
    /// memory is within one percent of `fraction`.
    pub fn set_utilization(&mut self, fraction: f64, seed: u64) -> Result<(), MemError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(MemError::InvalidConfig(format!("utilization {fraction} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_b0d1);
        let total = self.total_frames();
        let target = (fraction * total as f64).round() as u64;
        let tolerance = (total / 100).max(1);
        let occupied = |s: &Self| s.total_frames() - s.free_frames();
        while occupied(self) < target {
            let order = rng.random_range(0..=self.workload.max_order);
            if occupied(self) + (1 << order) > target + tolerance {
                if order == 0 {
                    break;
                }
                continue;
            }
            let pick = if rng.random::<f64>() < self.workload.scatter { Pick::Scatter } else { Pick::Lifo };
            match self.allocator.alloc(order, pick, &mut rng) {
                Some(start) => self.background.push((start, order)),
                None if order == 0 => break,
                None => continue,
            }
        }
        while occupied(self) > target && !self.background.is_empty() {
            let (start, order) = self.background.swap_remove(rng.random_range(0..self.background.len()));
            self.allocator.free(start, order);
        }
        // Turnover at the new level: replacements start before the exiting
        // owners release their blocks, so the released blocks stay behind as holes.
        let turnover = (self.background.len() as f64 * self.workload.churn).round() as usize;
        let leaving: Vec<usize> = rand::seq::index::sample(&mut rng, self.background.len(), turnover).into_vec();
        let mut exits = Vec::with_capacity(turnover);
        for &i in &leaving {
            let (_, order) = self.background[i];
            if let Some(start) = self.allocator.alloc(order, Pick::Lifo, &mut rng) {
                exits.push(i);
                self.background.push((start, order));
            }
        }
        exits.sort_unstable_by(|a, b| b.cmp(a));
        for i in exits {
            let (start, order) = self.background.swap_remove(i);
            self.allocator.free(start, order);
        }
        Ok(())
    }

    /// Privileged ground-truth view (the pagemap file). Verification only.
    pub fn pagemap(&self) -> Pagemap<'_> {
        Pagemap { space: self }
    }
}

/// Privileged oracle over an [`AddressSpace`].
#[derive(Clone, Copy, Debug)]
pub struct Pagemap<'a> {
    space: &'a AddressSpace,
}

impl Pagemap<'_> {
    pub fn frame_of(&self, va: VirtualAddress) -> Option<u64> {
        self.space.page_table.get(&va.page_number()).copied()
    }

    pub fn physical(&self, va: VirtualAddress) -> Option<PhysicalAddress> {
        self.frame_of(va).map(|f| PhysicalAddress::from_frame(f, va.page_offset()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.space.page_table.iter().map(|(&v, &p)| (v, p))
    }

    /// Longest run of consecutive free frames in physical memory.
    pub fn largest_contiguous_run(&self) -> u64 {
        self.space.allocator.free_runs().iter().map(|r| r.1).max().unwrap_or(0)
    }

    /// Longest stretch of `pages` whose frames are consecutive in order.
    pub fn longest_frame_run(&self, pages: &[VirtualAddress]) -> u64 {
        let mut best = 0u64;
        let mut cur = 0u64;
        let mut prev: Option<u64> = None;
        for va in pages {
            let frame = self.frame_of(*va);
            cur = match (prev, frame) {
                (Some(p), Some(f)) if f == p + 1 => cur + 1,
                (_, Some(_)) => 1,
                _ => 0,
            };
            best = best.max(cur);
            prev = frame;
        }
        best
    }

    /// CSV dump with header `vpn,pfn`, one row per mapped page in vpn order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("vpn,pfn\n");
        for (vpn, pfn) in self.entries() {
            out.push_str(&format!("{vpn},{pfn}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frames_rejected() {
        assert!(matches!(AddressSpace::new(0, 1), Err(MemError::InvalidConfig(_))));
    }

    #[test]
    fn fresh_space_is_empty() {
        let space = AddressSpace::new(1 << 18, 7).unwrap();
        assert_eq!(space.total_frames() * PAGE_SIZE, 1 << 30);
        assert_eq!(space.free_frames(), 1 << 18);
        assert_eq!(space.mapped_pages(), 0);
        assert_eq!(space.pagemap().largest_contiguous_run(), 1 << 18);
    }

    #[test]
    fn contiguous_allocation_is_sequential() {
        let mut space = AddressSpace::new(1 << 18, 7).unwrap();
        let pages = space.alloc_pages(130, AllocPolicy::contiguous(1)).unwrap();
        let oracle = space.pagemap();
        let first = oracle.frame_of(pages[0]).unwrap();
        for (i, va) in pages.iter().enumerate() {
            assert_eq!(oracle.frame_of(*va), Some(first + i as u64));
        }
    }

    #[test]
    fn out_of_memory() {
        let mut space = AddressSpace::new(64, 7).unwrap();
        let err = space.alloc_pages(65, AllocPolicy::fragmented(1)).unwrap_err();
        assert_eq!(err, MemError::OutOfMemory { requested: 65, free: 64 });
        space.alloc_pages(64, AllocPolicy::fragmented(1)).unwrap();
        assert!(space.alloc_pages(1, AllocPolicy::buddy(1)).is_err());
    }

    #[test]
    fn translate_preserves_offset_and_faults_when_unmapped() {
        let mut space = AddressSpace::new(1024, 3).unwrap();
        let pages = space.alloc_pages(4, AllocPolicy::fragmented(9)).unwrap();
        let va = pages[2].with_offset(0x123);
        let pa = space.translate(va).unwrap();
        assert_eq!(pa.page_offset(), 0x123);
        let unmapped = VirtualAddress::from_page(1, 0);
        assert_eq!(space.translate(unmapped), Err(MemError::PageFault(unmapped)));
    }

    #[test]
    fn buddy_allocation_from_fresh_block_is_sequential() {
        let mut space = AddressSpace::new(4096, 3).unwrap();
        let pages = space.alloc_pages(300, AllocPolicy::buddy(1)).unwrap();
        assert_eq!(space.pagemap().longest_frame_run(&pages), 300);
    }

    #[test]
    fn buddy_free_merges_back_to_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut alloc = BuddyAllocator::new(3000);
        let initial = alloc.free_blocks();
        let mut held = Vec::new();
        for i in 0..400 {
            let order = (i % 4) as u32;
            if let Some(b) = alloc.alloc(order, Pick::Random, &mut rng) {
                held.push((b, order));
            }
        }
        alloc.check_invariants().unwrap();
        held.reverse();
        for (b, o) in held {
            alloc.free(b, o);
        }
        alloc.check_invariants().unwrap();
        assert_eq!(alloc.free_blocks(), initial);
    }

    #[test]
    fn zero_utilization_frees_everything() {
        let mut space = AddressSpace::new(1 << 14, 3).unwrap();
        space.set_utilization(0.5, 1).unwrap();
        space.set_utilization(0.0, 2).unwrap();
        assert_eq!(space.free_frames(), space.total_frames());
        assert_eq!(space.pagemap().largest_contiguous_run(), 1 << 14);
    }

    #[test]
    fn utilization_lands_within_one_percent() {
        let mut space = AddressSpace::new(1 << 16, 3).unwrap();
        for (i, u) in [0.2, 0.55, 0.9, 0.4].into_iter().enumerate() {
            space.set_utilization(u, i as u64).unwrap();
            assert!((space.utilization() - u).abs() <= 0.01, "{u} -> {}", space.utilization());
        }
        assert!(space.set_utilization(1.5, 0).is_err());
    }

    #[test]
    fn csv_dump_lists_every_page() {
        let mut space = AddressSpace::new(256, 3).unwrap();
        let pages = space.alloc_pages(3, AllocPolicy::contiguous(0)).unwrap();
        let csv = space.pagemap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("vpn,pfn"));
        assert_eq!(lines.count(), 3);
        assert!(csv.contains(&format!("{},0\n", pages[0].page_number())));
    }
}
