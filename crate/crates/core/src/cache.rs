//! Set-associative L2 with (ASID, C-bit) extended tags, Prime+Probe over
//! eviction sets, perf counters and the out-of-order trail noise model.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::{Cycles, Vm, PAGE_SIZE};

/// Sets covered by one lookup table (16 lines of 64 bytes).
pub const TRACE_SETS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("invalid cache geometry: {0}")]
    Geometry(String),
    #[error("page allocator exhausted while building the eviction set for set {0}")]
    AllocatorExhausted(usize),
    #[error("eviction set for set {0} failed its self-eviction check")]
    Verification(usize),
    #[error("set {set} is out of range for {sets} sets")]
    SetOutOfRange { set: usize, sets: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub line_size: u64,
    pub sets: usize,
    pub ways: usize,
    pub hit_latency: Cycles,
    pub miss_latency: Cycles,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        CacheGeometry {
            line_size: 64,
            sets: 1024,
            ways: 8,
            hit_latency: 14,
            miss_latency: 200,
        }
    }
}

impl CacheGeometry {
    pub fn validate(&self) -> Result<(), CacheError> {
        if !self.sets.is_power_of_two() || !self.ways.is_power_of_two() || !self.line_size.is_power_of_two() {
            return Err(CacheError::Geometry("sets, ways and line size must be powers of two".into()));
        }
        if self.miss_latency <= self.hit_latency {
            return Err(CacheError::Geometry("miss latency must exceed hit latency".into()));
        }
        if self.line_size > PAGE_SIZE {
            return Err(CacheError::Geometry("line size exceeds the page size".into()));
        }
        Ok(())
    }

    pub fn set_index(&self, paddr: u64) -> usize {
        ((paddr / self.line_size) % self.sets as u64) as usize
    }

    pub fn line_address(&self, paddr: u64) -> u64 {
        paddr & !(self.line_size - 1)
    }

    pub fn lines_per_page(&self) -> u64 {
        PAGE_SIZE / self.line_size
    }

    /// Distinct page colors: pages whose PFNs agree modulo this value cover
    /// the same sets.
    pub fn page_colors(&self) -> u64 {
        (self.sets as u64 / self.lines_per_page()).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheLineTag {
    pub address_tag: u64,
    pub asid: u32,
    pub c_bit: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfCounters {
    pub guest_retired_instructions: u64,
    pub l2_miss_from_l1d_miss: u64,
    pub l2_hit_from_l1d_miss: u64,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    geometry: CacheGeometry,
    /// `ways` slots per set, least recently used first.
    lines: Vec<CacheLineTag>,
    fill: Vec<u8>,
    counters: PerfCounters,
    fills_by_asid: BTreeMap<u32, u64>,
}

impl CacheState {
    pub fn new(geometry: CacheGeometry) -> Result<Self, CacheError> {
        geometry.validate()?;
        if geometry.ways > u8::MAX as usize {
            return Err(CacheError::Geometry("at most 255 ways".into()));
        }
        let empty = CacheLineTag {
            address_tag: 0,
            asid: 0,
            c_bit: false,
        };
        Ok(CacheState {
            geometry,
            lines: vec![empty; geometry.sets * geometry.ways],
            fill: vec![0; geometry.sets],
            counters: PerfCounters::default(),
            fills_by_asid: BTreeMap::new(),
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn counters(&self) -> &PerfCounters {
        &self.counters
    }

    pub fn counters_mut(&mut self) -> &mut PerfCounters {
        &mut self.counters
    }

    /// Lines ever inserted on behalf of `asid`.
    pub fn fills(&self, asid: u32) -> u64 {
        self.fills_by_asid.get(&asid).copied().unwrap_or(0)
    }

    pub fn tag_of(&self, paddr: u64, asid: u32, c_bit: bool) -> CacheLineTag {
        CacheLineTag {
            address_tag: paddr / self.geometry.line_size / self.geometry.sets as u64,
            asid,
            c_bit,
        }
    }

    /// Tags currently resident in `set`, least recently used first.
    pub fn set_contents(&self, set: usize) -> &[CacheLineTag] {
        let base = set * self.geometry.ways;
        &self.lines[base..base + self.fill[set] as usize]
    }

    pub fn contains(&self, paddr: u64, asid: u32, c_bit: bool) -> bool {
        let tag = self.tag_of(paddr, asid, c_bit);
        self.set_contents(self.geometry.set_index(paddr)).contains(&tag)
    }

    /// One L1D-missing access. Hits move the line to MRU; misses insert it,
    /// evicting the LRU line of a full set.
    pub fn access(&mut self, paddr: u64, asid: u32, c_bit: bool) -> (bool, Cycles) {
        let ways = self.geometry.ways;
        let set = self.geometry.set_index(paddr);
        let tag = self.tag_of(paddr, asid, c_bit);
        let base = set * ways;
        let n = self.fill[set] as usize;
        let slots = &mut self.lines[base..base + ways];
        if let Some(pos) = slots[..n].iter().position(|t| *t == tag) {
            slots[pos..n].rotate_left(1);
            self.counters.l2_hit_from_l1d_miss += 1;
            return (true, self.geometry.hit_latency);
        }
        if n == ways {
            slots.rotate_left(1);
            slots[ways - 1] = tag;
        } else {
            slots[n] = tag;
            self.fill[set] += 1;
        }
        self.counters.l2_miss_from_l1d_miss += 1;
        *self.fills_by_asid.entry(asid).or_insert(0) += 1;
        (false, self.geometry.miss_latency)
    }

    pub fn flush_all(&mut self) {
        self.fill.iter_mut().for_each(|f| *f = 0);
    }
}

/// Monotone simulated cycle counter (the modeled `rdpru`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Cycles,
}

impl SimClock {
    pub fn measure_time(&self) -> Cycles {
        self.now
    }

    pub fn advance(&mut self, cycles: Cycles) {
        self.now += cycles;
    }

    /// Moves the clock forward to `t` if it lies in the future.
    pub fn advance_to(&mut self, t: Cycles) {
        self.now = self.now.max(t);
    }
}

/// Hands out host page frames, optionally of a chosen color.
#[derive(Debug, Clone)]
pub struct PageAllocator {
    range: Range<u64>,
    used: HashSet<u64>,
    next_by_color: BTreeMap<u64, u64>,
}

impl PageAllocator {
    pub fn new(range: Range<u64>) -> Self {
        PageAllocator {
            range,
            used: HashSet::new(),
            next_by_color: BTreeMap::new(),
        }
    }

    /// Lowest free frame with `pfn % colors == color`.
    pub fn alloc_with_color(&mut self, color: u64, colors: u64) -> Option<u64> {
        let colors = colors.max(1);
        let first = self.range.start + (color + colors - self.range.start % colors) % colors;
        let mut pfn = *self.next_by_color.get(&color).unwrap_or(&first);
        while pfn < self.range.end {
            if self.used.insert(pfn) {
                self.next_by_color.insert(color, pfn + colors);
                return Some(pfn);
            }
            pfn += colors;
        }
        None
    }

    pub fn allocated(&self) -> usize {
        self.used.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionSet {
    pub target_set: usize,
    pub members: Vec<u64>,
}

/// Builds `ways` line addresses on distinct pages that all map to
/// `target_set`, then checks in a scratch cache that they fill it exactly.
pub fn build_eviction_set(
    geometry: &CacheGeometry,
    target_set: usize,
    allocator: &mut PageAllocator,
) -> Result<EvictionSet, CacheError> {
    if target_set >= geometry.sets {
        return Err(CacheError::SetOutOfRange {
            set: target_set,
            sets: geometry.sets,
        });
    }
    let lines_per_page = geometry.lines_per_page() as usize;
    let colors = geometry.page_colors();
    let color = (target_set / lines_per_page) as u64 % colors;
    let offset = (target_set % lines_per_page) as u64 * geometry.line_size;
    let mut members = Vec::with_capacity(geometry.ways);
    for _ in 0..geometry.ways {
        let pfn = allocator
            .alloc_with_color(color, colors)
            .ok_or(CacheError::AllocatorExhausted(target_set))?;
        members.push(pfn * PAGE_SIZE + offset);
    }
    let set = EvictionSet { target_set, members };
    verify_eviction_set(geometry, &set)?;
    Ok(set)
}

fn verify_eviction_set(geometry: &CacheGeometry, set: &EvictionSet) -> Result<(), CacheError> {
    let fail = || CacheError::Verification(set.target_set);
    if set.members.len() != geometry.ways || set.members.iter().any(|&m| geometry.set_index(m) != set.target_set) {
        return Err(fail());
    }
    let mut scratch = CacheState::new(*geometry)?;
    let victim = set.members[0] + geometry.line_size * geometry.sets as u64 * 7919;
    for &m in &set.members {
        scratch.access(m, 0, false);
    }
    scratch.access(victim, 1, true);
    let misses = set.members.iter().rev().filter(|&&m| !scratch.access(m, 0, false).0).count();
    if misses != 1 {
        return Err(fail());
    }
    Ok(())
}

/// Sets observed for one 16-line region, usually a lookup table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitoredRegion {
    pub eviction_sets: Vec<EvictionSet>,
}

impl MonitoredRegion {
    /// Eviction sets for the 16 sets starting at the set of `paddr`.
    pub fn for_region(geometry: &CacheGeometry, paddr: u64, allocator: &mut PageAllocator) -> Result<Self, CacheError> {
        let first = geometry.set_index(paddr);
        let eviction_sets = (0..TRACE_SETS)
            .map(|i| build_eviction_set(geometry, (first + i) % geometry.sets, allocator))
            .collect::<Result<_, _>>()?;
        Ok(MonitoredRegion { eviction_sets })
    }

    pub fn sets(&self) -> Vec<usize> {
        self.eviction_sets.iter().map(|e| e.target_set).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheTrace {
    pub latencies: [Cycles; TRACE_SETS],
    pub hot: [bool; TRACE_SETS],
}

impl CacheTrace {
    pub fn from_mask(mask: u16) -> Self {
        let mut hot = [false; TRACE_SETS];
        for (i, h) in hot.iter_mut().enumerate() {
            *h = mask >> i & 1 == 1;
        }
        CacheTrace {
            latencies: [0; TRACE_SETS],
            hot,
        }
    }

    pub fn mask(&self) -> u16 {
        self.hot
            .iter()
            .enumerate()
            .fold(0u16, |m, (i, &h)| if h { m | 1 << i } else { m })
    }

    pub fn hot_sets(&self) -> Vec<u8> {
        (0..TRACE_SETS as u8).filter(|&i| self.hot[i as usize]).collect()
    }

    pub fn hot_count(&self) -> usize {
        self.hot.iter().filter(|&&h| h).count()
    }
}

pub const ATTACKER_ASID: u32 = 0;
pub const VICTIM_ASID: u32 = 1;

/// Prime+Probe over a list of monitored regions.
#[derive(Debug, Clone)]
pub struct PrimeProbe {
    pub regions: Vec<MonitoredRegion>,
    pub threshold: Cycles,
    /// Probability that a set reads as a miss without a victim access.
    pub p_noise: f64,
    /// When set, only this region is primed and probed.
    pub active: Option<usize>,
}

impl PrimeProbe {
    pub fn new(regions: Vec<MonitoredRegion>, geometry: &CacheGeometry, p_noise: f64) -> Result<Self, CacheError> {
        Ok(PrimeProbe {
            regions,
            threshold: calibrate_threshold(geometry)?,
            p_noise,
            active: None,
        })
    }

    fn selected(&self) -> &[MonitoredRegion] {
        match self.active {
            Some(i) => std::slice::from_ref(&self.regions[i]),
            None => &self.regions,
        }
    }

    /// Walks every member forward, leaving each set filled with attacker lines
    /// in member order.
    pub fn prime(&self, cache: &mut CacheState) {
        for region in self.selected() {
            for es in &region.eviction_sets {
                for &m in &es.members {
                    cache.access(m, ATTACKER_ASID, false);
                }
            }
        }
    }

    /// Walks every set in reverse member order so a single victim line costs
    /// exactly one miss; classifies each set against the threshold. Only
    /// meaningful directly after [`PrimeProbe::prime`].
    pub fn probe(&self, cache: &mut CacheState, rng: &mut impl Rng) -> Vec<CacheTrace> {
        let extra = cache.geometry().miss_latency - cache.geometry().hit_latency;
        self.selected()
            .iter()
            .map(|region| {
                let mut trace = CacheTrace {
                    latencies: [0; TRACE_SETS],
                    hot: [false; TRACE_SETS],
                };
                for (i, es) in region.eviction_sets.iter().enumerate() {
                    let mut total: Cycles = es.members.iter().rev().map(|&m| cache.access(m, ATTACKER_ASID, false).1).sum();
                    if self.p_noise > 0.0 && rng.gen_bool(self.p_noise) {
                        total += extra;
                    }
                    trace.latencies[i] = total;
                    trace.hot[i] = total > self.threshold;
                }
                trace
            })
            .collect()
    }
}

/// Midpoint between the all-hit and one-miss probe latencies of a set,
/// measured in a scratch cache.
pub fn calibrate_threshold(geometry: &CacheGeometry) -> Result<Cycles, CacheError> {
    let mut scratch = CacheState::new(*geometry)?;
    let mut alloc = PageAllocator::new(0..(geometry.ways as u64 + 2) * geometry.page_colors() + 1);
    let es = build_eviction_set(geometry, 0, &mut alloc)?;
    let walk = |c: &mut CacheState| -> Cycles { es.members.iter().rev().map(|&m| c.access(m, ATTACKER_ASID, false).1).sum() };
    for &m in &es.members {
        scratch.access(m, ATTACKER_ASID, false);
    }
    let hit_mode = walk(&mut scratch);
    for &m in &es.members {
        scratch.access(m, ATTACKER_ASID, false);
    }
    scratch.access(es.members[0] + geometry.line_size * geometry.sets as u64 * 101, VICTIM_ASID, true);
    let miss_mode = walk(&mut scratch);
    Ok((hit_mode + miss_mode) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OooConfig {
    /// How many upcoming same-table loads execute ahead of the interrupt.
    pub window: usize,
    pub p_ooo: f64,
    /// Raw instructions the reorder buffer looks ahead.
    pub horizon: usize,
}

impl Default for OooConfig {
    fn default() -> Self {
        OooConfig {
            window: 4,
            p_ooo: 1.0,
            horizon: 32,
        }
    }
}

/// Touches the cache lines of the next `window` loads with the same table id
/// as the instruction at `retired`, stopping at a fence or the horizon.
/// Returns the touched physical line addresses.
pub fn inject_ooo_noise(
    cache: &mut CacheState,
    vm: &Vm,
    retired: usize,
    cfg: &OooConfig,
    rng: &mut impl Rng,
) -> Vec<u64> {
    let program = vm.program();
    let Some(table) = program.instructions.get(retired).and_then(|i| i.table_id) else {
        return Vec::new();
    };
    let mut touched = Vec::new();
    let mut found = 0;
    let end = (retired + 1 + cfg.horizon).min(program.len());
    for insn in &program.instructions[retired + 1..end] {
        if found >= cfg.window || insn.is_fence() {
            break;
        }
        if insn.table_id != Some(table) {
            continue;
        }
        found += 1;
        if cfg.p_ooo < 1.0 && !rng.gen_bool(cfg.p_ooo.max(0.0)) {
            continue;
        }
        if let Some(&addr) = insn.mem_operands.last() {
            if let Some(paddr) = vm.peek_paddr(addr) {
                cache.access(paddr, VICTIM_ASID, vm.c_bit(addr));
                touched.push(cache.geometry().line_address(paddr));
            }
        }
    }
    touched
}

/// CSV rows `ordinal,set0..set15,truth` for labeled or unlabeled traces.
pub fn trace_csv(rows: &[(CacheTrace, Option<u8>)]) -> String {
    let mut out = String::from("ordinal");
    for i in 0..TRACE_SETS {
        out.push_str(&format!(",set{i}"));
    }
    out.push_str(",truth\n");
    for (n, (trace, truth)) in rows.iter().enumerate() {
        out.push_str(&n.to_string());
        for h in trace.hot {
            out.push_str(if h { ",1" } else { ",0" });
        }
        match truth {
            Some(t) => out.push_str(&format!(",{t}\n")),
            None => out.push_str(",\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn small() -> CacheGeometry {
        CacheGeometry {
            sets: 16,
            ways: 4,
            ..CacheGeometry::default()
        }
    }

    #[test]
    fn reaccess_hits() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        assert!(!c.access(0x1234_0040, 1, true).0);
        assert_eq!(c.access(0x1234_0040, 1, true), (true, 14));
    }

    #[test]
    fn other_asid_never_hits_victim_line() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        c.access(0x5000, VICTIM_ASID, true);
        assert!(!c.access(0x5000, ATTACKER_ASID, false).0);
        assert!(!c.access(0x5000, VICTIM_ASID, false).0);
    }

    #[test]
    fn lru_thrashes_with_one_extra_line() {
        let g = small();
        let mut c = CacheState::new(g).unwrap();
        let stride = g.line_size * g.sets as u64;
        for _ in 0..10 {
            for k in 0..=g.ways as u64 {
                assert!(!c.access(3 * 64 + k * stride, 0, false).0);
            }
        }
    }

    #[test]
    fn geometry_validation() {
        assert!(CacheState::new(CacheGeometry { sets: 1000, ..CacheGeometry::default() }).is_err());
        assert!(CacheState::new(CacheGeometry { miss_latency: 5, ..CacheGeometry::default() }).is_err());
    }

    #[test]
    fn eviction_set_congruence() {
        let g = CacheGeometry::default();
        let mut alloc = PageAllocator::new(0x1000..0x9000);
        for target in [0usize, 63, 64, 517, 1023] {
            let es = build_eviction_set(&g, target, &mut alloc).unwrap();
            assert_eq!(es.members.len(), 8);
            let mut pages: Vec<u64> = es.members.iter().map(|m| m / PAGE_SIZE).collect();
            for &m in &es.members {
                assert_eq!(g.set_index(m), target);
                assert_eq!((m / PAGE_SIZE) % 16, (target as u64 / 64) % 16);
                assert_eq!((m % PAGE_SIZE) / 64, target as u64 % 64);
            }
            pages.dedup();
            assert_eq!(pages.len(), 8);
        }
    }

    #[test]
    fn allocator_exhaustion() {
        let g = CacheGeometry::default();
        let mut alloc = PageAllocator::new(0..64);
        assert_eq!(build_eviction_set(&g, 0, &mut alloc), Err(CacheError::AllocatorExhausted(0)));
    }

    fn monitor(g: &CacheGeometry, base: u64) -> PrimeProbe {
        let mut alloc = PageAllocator::new(0x1_0000..0x2_0000);
        let region = MonitoredRegion::for_region(g, base, &mut alloc).unwrap();
        PrimeProbe::new(vec![region], g, 0.0).unwrap()
    }

    #[test]
    fn prime_probe_without_victim_is_all_hits() {
        let g = CacheGeometry::default();
        let pp = monitor(&g, 0x7_7000);
        let mut c = CacheState::new(g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pp.prime(&mut c);
        let t = &pp.probe(&mut c, &mut rng)[0];
        assert_eq!(t.hot_count(), 0);
    }

    #[test]
    fn victim_line_shows_as_single_miss() {
        let g = CacheGeometry::default();
        let table = 0x7_7400;
        let pp = monitor(&g, table);
        let mut c = CacheState::new(g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pp.prime(&mut c);
        c.access(table + 5 * 64 + 12, VICTIM_ASID, true);
        let before = *c.counters();
        let t = &pp.probe(&mut c, &mut rng)[0];
        assert_eq!(t.hot_sets(), vec![5]);
        assert_eq!(c.counters().l2_miss_from_l1d_miss - before.l2_miss_from_l1d_miss, 1);
        pp.prime(&mut c);
        let t2 = &pp.probe(&mut c, &mut rng)[0];
        assert_eq!(t2.hot_count(), 0);
    }

    #[test]
    fn threshold_separates_modes() {
        let g = CacheGeometry::default();
        let th = calibrate_threshold(&g).unwrap();
        let all_hit = g.ways as u64 * g.hit_latency;
        let one_miss = all_hit - g.hit_latency + g.miss_latency;
        assert!(all_hit < th && th < one_miss);
    }

    #[test]
    fn clock_is_monotone() {
        let mut clk = SimClock::default();
        let a = clk.measure_time();
        clk.advance(200);
        clk.advance_to(10);
        assert!(clk.measure_time() >= a + 200);
    }

    #[test]
    fn trace_csv_layout() {
        let csv = trace_csv(&[(CacheTrace::from_mask(0b101), Some(2))]);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("ordinal,set0,"));
        assert_eq!(lines[1], "0,1,0,1,0,0,0,0,0,0,0,0,0,0,0,0,0,2");
    }

    proptest! {
        #[test]
        fn matches_bruteforce_lru(seq in proptest::collection::vec((0u64..40, 0u32..3, any::<bool>()), 1..400)) {
            let g = small();
            let mut c = CacheState::new(g).unwrap();
            let mut oracle: HashMap<usize, Vec<(u64, u32, bool)>> = HashMap::new();
            for (line, asid, cbit) in seq {
                let paddr = line * 64 * 5;
                let set = ((paddr / 64) % 16) as usize;
                let key = (paddr / 64, asid, cbit);
                let lru = oracle.entry(set).or_default();
                let expect = if let Some(p) = lru.iter().position(|k| *k == key) {
                    lru.remove(p);
                    true
                } else {
                    if lru.len() == g.ways { lru.remove(0); }
                    false
                };
                lru.push(key);
                prop_assert_eq!(c.access(paddr, asid, cbit).0, expect);
            }
        }

        #[test]
        fn counters_count_every_access(seq in proptest::collection::vec(0u64..1_000_000, 0..300)) {
            let mut c = CacheState::new(CacheGeometry::default()).unwrap();
            for &a in &seq {
                c.access(a, 0, false);
            }
            let k = c.counters();
            prop_assert_eq!(k.l2_hit_from_l1d_miss + k.l2_miss_from_l1d_miss, seq.len() as u64);
        }
    }
}
