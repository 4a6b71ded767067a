//! AES key recovery from per-lookup cache-line candidates.
//!
//! First-round lookups index the tables with `input ^ key`, so each
//! measurement pins the high nibble of one key byte. Second-round lookups
//! depend on a whole diagonal of first-round output, which lets a
//! depth-first search fix the low nibbles one column at a time.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::aes::{
    encrypt_block, hex, line_of, table_entry, ttable_decrypt, ttable_encrypt, AesKeySchedule, Block,
    Direction, SBOX,
};
use crate::crypto::xts::{sector_iv, xor_blocks, xts_mul_alpha, XtsContext};
use crate::classifier::MAX_CANDIDATES;
use crate::fixture::DiskFixture;

#[derive(Debug, Error, PartialEq)]
pub enum KeyRecError {
    #[error("no key survived the search ({nodes} nodes)")]
    NoSurvivor { nodes: u64 },
    #[error("{survivors} keys survive; residual candidates per byte: {residual:?}")]
    Ambiguous { survivors: usize, residual: Vec<usize> },
    #[error("search budget of {0} nodes exhausted")]
    Budget(u64),
    #[error("no block operations of the requested direction")]
    NoOperations,
    #[error("tweak key recovery failed: {0}")]
    TweakPhase(Box<KeyRecError>),
    #[error("data key recovery failed: {0}")]
    DataPhase(Box<KeyRecError>),
    #[error("data key phase needs known plaintext, but none of the traced sectors has any")]
    NoKnownPlaintext,
    #[error("recovered keys do not decrypt sector {0} to its known plaintext")]
    FinalCheck(u64),
    #[error("fixture: {0}")]
    Fixture(String),
}

/// Candidate lines of one table lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub round: u8,
    pub table: u8,
    pub position: u8,
    /// Lines with their probability, most likely first.
    pub candidates: Vec<(u8, f64)>,
}

impl Measurement {
    pub fn exact(round: u8, table: u8, position: u8, line: u8) -> Self {
        Measurement {
            round,
            table,
            position,
            candidates: vec![(line, 1.0)],
        }
    }

    pub fn mask(&self) -> u16 {
        self.candidates.iter().fold(0, |m, &(l, _)| m | 1 << l)
    }
}

/// Key bytes a round-1 measurement allows for known input byte `p`.
pub fn extract_candidates(m: &Measurement, p: u8) -> Vec<u8> {
    let mut out: Vec<u8> = m
        .candidates
        .iter()
        .flat_map(|&(line, _)| (0..16u8).map(move |lo| (line << 4 | lo) ^ p))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// One traced AES call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOp {
    pub direction: Direction,
    pub input: Block,
    /// Known output, when the plaintext is known.
    pub output: Option<Block>,
    pub measurements: Vec<Measurement>,
}

impl BlockOp {
    /// Exact measurements of every lookup, as a noise-free trace would give.
    pub fn noise_free(direction: Direction, input: Block, key: &Block, rounds: u8) -> Self {
        let sched = AesKeySchedule::expand(key);
        let (output, script) = match direction {
            Direction::Encrypt => ttable_encrypt(&input, &sched),
            Direction::Decrypt => ttable_decrypt(&input, &sched),
        };
        BlockOp {
            direction,
            input,
            output: Some(output),
            measurements: script
                .iter()
                .filter(|a| a.round <= rounds)
                .map(|a| Measurement::exact(a.round, a.table, a.position, line_of(a.index)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Rounds of measurements the search consumes (1 or 2).
    pub depth: u8,
    /// Fraction of an observation's measurements allowed to miss the
    /// hypothesis before it is pruned.
    pub tolerance: f64,
    /// Miss fraction allowed when a full key is checked against every round.
    pub verify_tolerance: f64,
    pub max_survivors: usize,
    pub node_budget: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            depth: 2,
            tolerance: 0.15,
            verify_tolerance: 0.25,
            max_survivors: 64,
            node_budget: 4_000_000_000,
        }
    }
}

impl SearchConfig {
    fn allowed(&self, n: usize) -> usize {
        (self.tolerance * n as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub nodes: u64,
    pub measurements_used: usize,
    pub measurements_dropped: usize,
    pub survivors: usize,
}

/// The key a direction's first whitening step uses: the master key for
/// encryption, the last round key for decryption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingleKey {
    pub master: Block,
    pub whitening: Block,
}

/// Candidate masks of one constraint, one entry per observing operation.
#[derive(Debug, Clone, Default)]
struct Observations {
    /// (operation, candidate mask).
    items: Vec<(usize, u16)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    Hi(usize),
    Lo(usize),
    /// High nibble of second-round key byte `q` (decryption only).
    Rk(usize),
}

struct Problem<'a> {
    dir: Direction,
    ops: &'a [BlockOp],
    round2: Vec<Observations>,
    /// Ordered high-nibble candidates per key byte.
    hi_domain: Vec<Vec<u8>>,
    vars: Vec<Var>,
    /// Round-2 positions checkable once `vars[..=v]` are assigned.
    checks_at: Vec<Vec<usize>>,
    cfg: SearchConfig,
    nodes: AtomicU64,
    stop: AtomicBool,
    survivors: Mutex<Vec<(Block, [u8; 16])>>,
}

#[derive(Debug, Clone, Copy)]
struct Partial {
    key: Block,
    rk_hi: [u8; 16],
}

fn diagonal(dir: Direction, col: usize) -> [usize; 4] {
    std::array::from_fn(|r| dir.source_position(col, r))
}

/// Sbox-fed byte of the first key-schedule word for row `i`.
fn schedule_source(i: usize) -> usize {
    12 + (i + 1) % 4
}

fn plan(dir: Direction) -> (Vec<Var>, Vec<Vec<usize>>) {
    let mut vars: Vec<Var> = (0..16).map(Var::Hi).collect();
    let mut deps: Vec<(usize, Vec<Var>)> = Vec::new();
    match dir {
        Direction::Encrypt => {
            let mut assigned = Vec::new();
            for col in 0..4 {
                let diag = diagonal(dir, col);
                let mut col_vars = Vec::new();
                for &b in &diag {
                    if !assigned.contains(&b) {
                        col_vars.push(b);
                    }
                }
                // Sbox sources of the checks, cheapest first.
                for i in [2usize, 0, 1, 3] {
                    let s = schedule_source(i);
                    if !assigned.contains(&s) && !col_vars.contains(&s) && col == 0 {
                        col_vars.push(s);
                    }
                }
                for &b in &col_vars {
                    assigned.push(b);
                    vars.push(Var::Lo(b));
                }
                for i in 0..4 {
                    let mut d: Vec<Var> = diag.iter().map(|&b| Var::Lo(b)).collect();
                    d.push(Var::Lo(schedule_source(i)));
                    deps.push((4 * col + i, d));
                }
            }
        }
        Direction::Decrypt => {
            for col in 0..4 {
                let diag = diagonal(dir, col);
                for &b in &diag {
                    vars.push(Var::Lo(b));
                }
                for i in 0..4 {
                    vars.push(Var::Rk(4 * col + i));
                    let mut d: Vec<Var> = diag.iter().map(|&b| Var::Lo(b)).collect();
                    d.push(Var::Rk(4 * col + i));
                    deps.push((4 * col + i, d));
                }
            }
        }
    }
    let mut checks_at = vec![Vec::new(); vars.len()];
    for (q, d) in deps {
        let last = d
            .iter()
            .map(|v| vars.iter().position(|x| x == v).expect("dependency is a variable"))
            .max()
            .expect("nonempty dependencies");
        checks_at[last].push(q);
    }
    (vars, checks_at)
}

impl<'a> Problem<'a> {
    fn new(dir: Direction, ops: &'a [BlockOp], cfg: SearchConfig, stats: &mut SearchStats) -> Self {
        let mut round1 = vec![Observations::default(); 16];
        let mut round2 = vec![Observations::default(); 16];
        for (i, op) in ops.iter().enumerate() {
            for m in &op.measurements {
                if m.candidates.is_empty() || m.candidates.len() > MAX_CANDIDATES || Direction::of_table(m.table) != dir {
                    stats.measurements_dropped += 1;
                    continue;
                }
                let slot = match m.round {
                    1 => &mut round1,
                    2 if cfg.depth >= 2 => &mut round2,
                    _ => continue,
                };
                slot[m.position as usize].items.push((i, m.mask()));
                stats.measurements_used += 1;
            }
        }
        let hi_domain = (0..16)
            .map(|b| {
                let obs = &round1[b];
                let allowed = cfg.allowed(obs.items.len());
                let mut scored: Vec<(usize, f64, u8)> = (0..16u8)
                    .map(|h| {
                        let mut misses = 0;
                        let mut score = 0.0;
                        for &(op, mask) in &obs.items {
                            let line = h ^ (ops[op].input[b] >> 4);
                            if mask >> line & 1 == 1 {
                                score += ops[op]
                                    .measurements
                                    .iter()
                                    .find(|m| m.round == 1 && m.position as usize == b)
                                    .and_then(|m| m.candidates.iter().find(|c| c.0 == line))
                                    .map_or(0.0, |c| c.1);
                            } else {
                                misses += 1;
                            }
                        }
                        (misses, score, h)
                    })
                    .collect();
                // Inputs that repeat across ops (zero IV bytes) repeat the
                // classifier's mistakes too, so the bound is relative to the
                // best nibble.
                let best = scored.iter().map(|s| s.0).min().unwrap_or(0);
                scored.retain(|s| s.0 <= allowed.max(best + allowed));
                scored.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
                scored.into_iter().map(|(.., h)| h).collect()
            })
            .collect();
        let (vars, checks_at) = plan(dir);
        Problem {
            dir,
            ops,
            round2,
            hi_domain,
            vars,
            checks_at,
            cfg,
            nodes: AtomicU64::new(0),
            stop: AtomicBool::new(false),
            survivors: Mutex::new(Vec::new()),
        }
    }

    fn domain(&self, v: Var) -> Vec<u8> {
        match v {
            Var::Hi(b) => self.hi_domain[b].clone(),
            Var::Lo(_) | Var::Rk(_) => (0..16).collect(),
        }
    }

    fn assign(p: &mut Partial, v: Var, value: u8) {
        match v {
            Var::Hi(b) => p.key[b] = (p.key[b] & 0x0f) | value << 4,
            Var::Lo(b) => p.key[b] = (p.key[b] & 0xf0) | value,
            Var::Rk(q) => p.rk_hi[q] = value,
        }
    }

    /// High nibble of the second-round key byte at `q` under the hypothesis.
    fn round2_key_hi(&self, p: &Partial, q: usize) -> u8 {
        match self.dir {
            Direction::Encrypt => {
                let (col, i) = (q / 4, q % 4);
                let mut hi = (p.key[i] ^ SBOX[p.key[schedule_source(i)] as usize]) >> 4;
                for m in 1..=col {
                    hi ^= p.key[4 * m + i] >> 4;
                }
                hi
            }
            Direction::Decrypt => p.rk_hi[q],
        }
    }

    /// High nibble of the first-round output byte `q` (before the round key).
    fn round1_out_hi(&self, p: &Partial, op: &BlockOp, q: usize) -> u8 {
        let (col, i) = (q / 4, q % 4);
        let mut word = 0u32;
        for r in 0..4 {
            let pos = self.dir.source_position(col, r);
            word ^= table_entry(self.dir.table_id(r as u8), op.input[pos] ^ p.key[pos]);
        }
        (word >> (8 * i + 4)) as u8 & 0x0f
    }

    fn check(&self, p: &Partial, q: usize) -> bool {
        let obs = &self.round2[q];
        let allowed = self.cfg.allowed(obs.items.len());
        let rk = self.round2_key_hi(p, q);
        let mut misses = 0;
        for &(op, mask) in &obs.items {
            let line = self.round1_out_hi(p, &self.ops[op], q) ^ rk;
            if mask >> line & 1 == 0 {
                misses += 1;
                if misses > allowed {
                    return false;
                }
            }
        }
        true
    }

    fn leaf(&self, p: &Partial) {
        let sched = match self.dir {
            Direction::Encrypt => AesKeySchedule::expand(&p.key),
            Direction::Decrypt => {
                let s = AesKeySchedule::from_last_round_key(&p.key);
                // The free second-round nibbles must agree with the schedule.
                if (0..16).any(|q| s.inverse_round_keys[1][q] >> 4 != p.rk_hi[q]) {
                    return;
                }
                s
            }
        };
        if !verify(self.dir, &sched, self.ops, self.cfg.verify_tolerance) {
            return;
        }
        let mut s = self.survivors.lock().expect("survivor lock");
        s.push((p.key, p.rk_hi));
        if s.len() > self.cfg.max_survivors {
            self.stop.store(true, Ordering::Relaxed);
        }
    }

    fn dfs(&self, depth: usize, p: Partial) {
        if self.stop.load(Ordering::Relaxed) {
            return;
        }
        if depth == self.vars.len() {
            self.leaf(&p);
            return;
        }
        let v = self.vars[depth];
        for value in self.domain(v) {
            if self.nodes.fetch_add(1, Ordering::Relaxed) >= self.cfg.node_budget {
                self.stop.store(true, Ordering::Relaxed);
                return;
            }
            let mut next = p;
            Self::assign(&mut next, v, value);
            if self.checks_at[depth].iter().all(|&q| self.check(&next, q)) {
                self.dfs(depth + 1, next);
            }
        }
    }

    /// Partial assignments of the first variables, breadth first, until
    /// there are enough to spread over the thread pool.
    fn frontier(&self) -> (usize, Vec<Partial>) {
        let mut level = vec![Partial {
            key: [0; 16],
            rk_hi: [0; 16],
        }];
        let mut depth = 0;
        let target = 8 * rayon::current_num_threads().max(1);
        while depth < self.vars.len() && level.len() < target && depth < 24 {
            let v = self.vars[depth];
            let mut next = Vec::new();
            for p in &level {
                for value in self.domain(v) {
                    self.nodes.fetch_add(1, Ordering::Relaxed);
                    let mut q = *p;
                    Self::assign(&mut q, v, value);
                    if self.checks_at[depth].iter().all(|&c| self.check(&q, c)) {
                        next.push(q);
                    }
                }
            }
            level = next;
            depth += 1;
        }
        (depth, level)
    }
}

/// Checks a complete key against every measurement of every op: known
/// outputs must match exactly and at most `tolerance` of the lookups may
/// fall outside their candidates.
pub fn verify(dir: Direction, sched: &AesKeySchedule, ops: &[BlockOp], tolerance: f64) -> bool {
    let mut total = 0usize;
    let mut misses = 0usize;
    for op in ops {
        let (out, script) = match dir {
            Direction::Encrypt => ttable_encrypt(&op.input, sched),
            Direction::Decrypt => ttable_decrypt(&op.input, sched),
        };
        if let Some(expected) = op.output {
            if expected != out {
                return false;
            }
        }
        for m in op.measurements.iter().filter(|m| m.candidates.len() <= MAX_CANDIDATES) {
            if let Some(a) = script
                .iter()
                .find(|a| a.round == m.round && a.table == m.table && a.position == m.position)
            {
                total += 1;
                if m.mask() >> line_of(a.index) & 1 == 0 {
                    misses += 1;
                }
            }
        }
    }
    misses as f64 <= tolerance * total as f64
}

/// Recovers one AES key from ops of one direction.
pub fn recover_single_key(ops: &[BlockOp], direction: Direction, cfg: &SearchConfig) -> Result<(SingleKey, SearchStats), KeyRecError> {
    let ops: Vec<BlockOp> = ops.iter().filter(|o| o.direction == direction).cloned().collect();
    if ops.is_empty() {
        return Err(KeyRecError::NoOperations);
    }
    let mut stats = SearchStats::default();
    let problem = Problem::new(direction, &ops, *cfg, &mut stats);
    let residual: Vec<usize> = problem.hi_domain.iter().map(|d| d.len() * 16).collect();
    if problem.round2.iter().all(|o| o.items.is_empty()) {
        return Err(KeyRecError::Ambiguous {
            survivors: residual.iter().fold(1usize, |a, &r| a.saturating_mul(r)),
            residual,
        });
    }
    if problem.hi_domain.iter().any(|d| d.is_empty()) {
        return Err(KeyRecError::NoSurvivor { nodes: 0 });
    }
    let (depth, frontier) = problem.frontier();
    frontier.into_par_iter().for_each(|p| problem.dfs(depth, p));
    stats.nodes = problem.nodes.load(Ordering::Relaxed);
    let mut survivors = problem.survivors.into_inner().expect("survivor lock");
    survivors.sort_unstable();
    survivors.dedup_by_key(|s| s.0);
    stats.survivors = survivors.len();
    if stats.nodes >= cfg.node_budget && survivors.is_empty() {
        return Err(KeyRecError::Budget(cfg.node_budget));
    }
    match survivors.len() {
        0 => Err(KeyRecError::NoSurvivor { nodes: stats.nodes }),
        1 => {
            let whitening = survivors[0].0;
            let master = match direction {
                Direction::Encrypt => whitening,
                Direction::Decrypt => AesKeySchedule::from_last_round_key(&whitening).master_key(),
            };
            Ok((SingleKey { master, whitening }, stats))
        }
        n => {
            let residual = (0..16)
                .map(|b| {
                    let mut v: Vec<u8> = survivors.iter().map(|s| s.0[b]).collect();
                    v.sort_unstable();
                    v.dedup();
                    v.len()
                })
                .collect();
            Err(KeyRecError::Ambiguous { survivors: n, residual })
        }
    }
}

/// Measurements of one traced AES call in a sector decryption, keyed by the
/// fixture slot of the sector and the block within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorObservation {
    pub direction: Direction,
    pub slot: usize,
    pub block: usize,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    direction: Direction,
    slot: usize,
    block: usize,
    round: u8,
    table: u8,
    position: u8,
    /// `line:probability` pairs separated by `;`.
    candidates: String,
}

/// One row per measurement.
pub fn write_predictions_csv<W: std::io::Write>(observations: &[SectorObservation], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for o in observations {
        for m in &o.measurements {
            w.serialize(PredictionRow {
                direction: o.direction,
                slot: o.slot,
                block: o.block,
                round: m.round,
                table: m.table,
                position: m.position,
                candidates: m
                    .candidates
                    .iter()
                    .map(|(l, p)| format!("{l}:{p:.6}"))
                    .collect::<Vec<_>>()
                    .join(";"),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_predictions_csv`]; rows of one call must be adjacent.
pub fn read_predictions_csv<R: std::io::Read>(input: R) -> Result<Vec<SectorObservation>, KeyRecError> {
    let bad = |e: String| KeyRecError::Fixture(format!("predictions: {e}"));
    let mut out: Vec<SectorObservation> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<PredictionRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let mut candidates = Vec::new();
        for pair in row.candidates.split(';').filter(|p| !p.is_empty()) {
            let (l, p) = pair.split_once(':').ok_or_else(|| bad(format!("malformed candidate {pair:?}")))?;
            let line: u8 = l.parse().map_err(|_| bad(format!("bad line {l:?}")))?;
            if line >= 16 {
                return Err(bad(format!("line {line} out of range")));
            }
            candidates.push((line, p.parse().map_err(|_| bad(format!("bad probability {p:?}")))?));
        }
        let m = Measurement {
            round: row.round,
            table: row.table,
            position: row.position,
            candidates,
        };
        match out.last_mut() {
            Some(o) if o.direction == row.direction && o.slot == row.slot && o.block == row.block => o.measurements.push(m),
            _ => out.push(SectorObservation {
                direction: row.direction,
                slot: row.slot,
                block: row.block,
                measurements: vec![m],
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredKeys {
    pub tweak_key: Block,
    pub data_key: Block,
    pub tweak_stats: SearchStats,
    pub data_stats: SearchStats,
}

impl RecoveredKeys {
    /// `{tweak_key, data_key, stats}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tweak_key": hex(&self.tweak_key),
            "data_key": hex(&self.data_key),
            "stats": { "tweak": self.tweak_stats, "data": self.data_stats },
        })
    }
}

/// Two-phase XTS recovery. The tweak key comes from the IV encryptions,
/// whose inputs are the sector numbers. Its tweaks then turn every traced
/// ciphertext block of a known-plaintext sector into a known input/output
/// pair for the data-key decryptions.
pub fn recover_xts_keys(
    observations: &[SectorObservation],
    fixture: &DiskFixture,
    cfg: &SearchConfig,
) -> Result<RecoveredKeys, KeyRecError> {
    let fx = |e: crate::fixture::FixtureError| KeyRecError::Fixture(e.to_string());
    let tweak_ops: Vec<BlockOp> = observations
        .iter()
        .filter(|o| o.direction == Direction::Encrypt)
        .map(|o| BlockOp {
            direction: Direction::Encrypt,
            input: sector_iv(fixture.sectors[o.slot].sector),
            output: None,
            measurements: o.measurements.clone(),
        })
        .collect();
    let (tweak, tweak_stats) =
        recover_single_key(&tweak_ops, Direction::Encrypt, cfg).map_err(|e| KeyRecError::TweakPhase(Box::new(e)))?;
    let tweak_sched = AesKeySchedule::expand(&tweak.master);

    let mut data_ops = Vec::new();
    for o in observations.iter().filter(|o| o.direction == Direction::Decrypt) {
        let Some(pt) = fixture.plaintext(o.slot).map_err(fx)? else {
            continue;
        };
        let ct = fixture.ciphertext(o.slot).map_err(fx)?;
        let mut t = encrypt_block(&sector_iv(fixture.sectors[o.slot].sector), &tweak_sched);
        for _ in 0..o.block {
            t = xts_mul_alpha(&t);
        }
        let at = 16 * o.block;
        if at + 16 > ct.len() {
            return Err(KeyRecError::Fixture(format!("block {} outside sector {}", o.block, o.slot)));
        }
        let block = |v: &[u8]| -> Block { v[at..at + 16].try_into().expect("checked length") };
        data_ops.push(BlockOp {
            direction: Direction::Decrypt,
            input: xor_blocks(&block(&ct), &t),
            output: Some(xor_blocks(&block(&pt), &t)),
            measurements: o.measurements.clone(),
        });
    }
    if data_ops.is_empty() {
        return Err(KeyRecError::NoKnownPlaintext);
    }
    let (data, data_stats) =
        recover_single_key(&data_ops, Direction::Decrypt, cfg).map_err(|e| KeyRecError::DataPhase(Box::new(e)))?;

    let ctx = XtsContext::new(data.master, tweak.master, fixture.sector_size).map_err(|e| KeyRecError::Fixture(e.to_string()))?;
    let known = (0..fixture.sectors.len())
        .find(|&i| fixture.sectors[i].plaintext.is_some())
        .ok_or(KeyRecError::NoKnownPlaintext)?;
    let ct = fixture.ciphertext(known).map_err(fx)?;
    let pt = fixture.plaintext(known).map_err(fx)?.expect("known slot");
    let sector = fixture.sectors[known].sector;
    if ctx.decrypt_sector(sector, &ct).map_err(|e| KeyRecError::Fixture(e.to_string()))? != pt {
        return Err(KeyRecError::FinalCheck(sector));
    }
    Ok(RecoveredKeys {
        tweak_key: tweak.master,
        data_key: data.master,
        tweak_stats,
        data_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut impl RngCore) -> Block {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        b
    }

    fn ops(dir: Direction, key: &Block, n: usize, rounds: u8, seed: u64) -> Vec<BlockOp> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| BlockOp::noise_free(dir, random_block(&mut rng), key, rounds))
            .collect()
    }

    #[test]
    fn extract_examples() {
        let m = Measurement::exact(1, 0, 0, 3);
        assert_eq!(extract_candidates(&m, 0x00), (0x30..=0x3f).collect::<Vec<u8>>());
        let m = Measurement::exact(1, 0, 0, 0);
        assert_eq!(extract_candidates(&m, 0xff), (0xf0..=0xff).collect::<Vec<u8>>());
        let two = Measurement {
            candidates: vec![(1, 0.5), (9, 0.5)],
            ..Measurement::exact(1, 0, 0, 0)
        };
        assert_eq!(extract_candidates(&two, 0x42).len(), 32);
    }

    #[test]
    fn noise_free_encrypt_four_ops() {
        let key = *b"\x2b\x7e\x15\x16\x28\xae\xd2\xa6\xab\xf7\x15\x88\x09\xcf\x4f\x3c";
        let (k, stats) = recover_single_key(&ops(Direction::Encrypt, &key, 4, 2, 1), Direction::Encrypt, &SearchConfig::default()).unwrap();
        assert_eq!(k.master, key);
        assert_eq!(stats.survivors, 1);
    }

    #[test]
    fn noise_free_decrypt_four_ops() {
        let key = [7u8; 16];
        let (k, _) = recover_single_key(&ops(Direction::Decrypt, &key, 4, 2, 2), Direction::Decrypt, &SearchConfig::default()).unwrap();
        assert_eq!(k.master, key);
        assert_eq!(k.whitening, AesKeySchedule::expand(&key).round_keys[10]);
    }

    #[test]
    fn single_encrypt_op_with_full_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let key = random_block(&mut rng);
        let mut one = ops(Direction::Encrypt, &key, 1, 10, 3);
        one[0].output = None;
        let (k, _) = recover_single_key(&one, Direction::Encrypt, &SearchConfig::default()).unwrap();
        assert_eq!(k.master, key);
    }

    #[test]
    fn round_one_only_is_ambiguous() {
        let key = [3u8; 16];
        match recover_single_key(&ops(Direction::Encrypt, &key, 8, 1, 4), Direction::Encrypt, &SearchConfig::default()) {
            Err(KeyRecError::Ambiguous { residual, .. }) => assert_eq!(residual, vec![16; 16]),
            other => panic!("expected ambiguity, got {other:?}"),
        }
    }

    #[test]
    fn predictions_csv_round_trip() {
        let o = ops(Direction::Decrypt, &[5; 16], 2, 2, 9);
        let obs: Vec<SectorObservation> = o
            .iter()
            .enumerate()
            .map(|(i, op)| SectorObservation {
                direction: op.direction,
                slot: i,
                block: 0,
                measurements: op.measurements.clone(),
            })
            .collect();
        let mut buf = Vec::new();
        write_predictions_csv(&obs, &mut buf).unwrap();
        assert_eq!(read_predictions_csv(&buf[..]).unwrap(), obs);
        assert!(read_predictions_csv(&b"direction,slot,block,round,table,position,candidates\ndecrypt,0,0,1,5,0,17:1\n"[..]).is_err());
    }

    #[test]
    fn wide_measurements_are_dropped() {
        let key = [1u8; 16];
        let mut o = ops(Direction::Encrypt, &key, 4, 2, 6);
        o[0].measurements[0].candidates = (0..8).map(|l| (l, 0.125)).collect();
        let (k, stats) = recover_single_key(&o, Direction::Encrypt, &SearchConfig::default()).unwrap();
        assert_eq!(k.master, key);
        assert_eq!(stats.measurements_dropped, 1);
    }

    #[test]
    fn wrong_direction_has_no_ops() {
        let o = ops(Direction::Encrypt, &[0; 16], 2, 2, 0);
        assert_eq!(recover_single_key(&o, Direction::Decrypt, &SearchConfig::default()).unwrap_err(), KeyRecError::NoOperations);
    }

    #[test]
    fn contradicting_measurements_leave_nothing() {
        let key = [9u8; 16];
        let mut o = ops(Direction::Encrypt, &key, 6, 2, 5);
        for op in &mut o {
            for m in &mut op.measurements {
                if m.round == 2 {
                    m.candidates = vec![((m.candidates[0].0 + 8) % 16, 1.0)];
                }
            }
        }
        let cfg = SearchConfig {
            tolerance: 0.0,
            ..SearchConfig::default()
        };
        assert!(matches!(recover_single_key(&o, Direction::Encrypt, &cfg), Err(KeyRecError::NoSurvivor { .. })));
    }

    /// Widens each measurement with random wrong lines the way trail noise
    /// does; the true line always stays in.
    fn widen(ops: &mut [BlockOp], rng: &mut impl Rng, extra: usize) {
        for op in ops {
            for m in &mut op.measurements {
                for _ in 0..rng.gen_range(0..=extra) {
                    let l = rng.gen_range(0..16u8);
                    if !m.candidates.iter().any(|c| c.0 == l) {
                        m.candidates.push((l, 0.1));
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn true_key_survives_widened_candidates(seed in any::<u64>(), decrypt in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let key = random_block(&mut rng);
            let dir = if decrypt { Direction::Decrypt } else { Direction::Encrypt };
            let mut o = ops(dir, &key, 24, 2, seed ^ 1);
            widen(&mut o, &mut rng, 3);
            let cfg = SearchConfig { tolerance: 0.0, ..SearchConfig::default() };
            let (k, _) = recover_single_key(&o, dir, &cfg).unwrap();
            prop_assert_eq!(k.master, key);
        }

        #[test]
        fn more_measurements_never_add_survivors(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let key = random_block(&mut rng);
            let mut all = ops(Direction::Encrypt, &key, 6, 2, seed);
            widen(&mut all, &mut rng, 6);
            let cfg = SearchConfig { tolerance: 0.0, max_survivors: 1 << 20, verify_tolerance: 1.0, ..SearchConfig::default() };
            let count = |o: &[BlockOp]| match recover_single_key(o, Direction::Encrypt, &cfg) {
                Ok(_) => 1,
                Err(KeyRecError::Ambiguous { survivors, .. }) => survivors,
                Err(KeyRecError::NoSurvivor { .. }) => 0,
                Err(e) => panic!("{e}"),
            };
            let few = count(&all[..4]);
            let many = count(&all);
            prop_assert!(many <= few, "{} > {}", many, few);
        }
    }
}
