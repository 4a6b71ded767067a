//! Page-fault controlled channel: permission-bit tracking, sliding-window
//! fingerprint capture, one-page-at-a-time fingerprint matching and lookup
//! table localization by fault sacrifice.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::{page_base, AccessType, GuestError, Vm};
use crate::stepper::{FreeRun, Machine};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrackError {
    #[error(transparent)]
    Guest(#[from] GuestError),
    #[error("the trigger did not finish within {0} instructions")]
    TriggerStalled(usize),
    #[error("instruction {0} retired without touching a tracked data page")]
    NoDataAccess(usize),
    #[error("program finished before reaching the located instruction")]
    Finished,
    #[error("fingerprint parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fingerprint is empty")]
    EmptyFingerprint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackMode {
    /// Clear the present bit: any access faults.
    Access,
    /// Set no-execute: instruction fetches fault.
    Execute,
    /// Clear writable: stores fault.
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageFaultEvent {
    pub gpa: u64,
    pub access: AccessType,
    /// Payload instruction that faulted.
    pub instruction_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Saved {
    mode: TrackMode,
    present: bool,
    no_execute: bool,
    writable: bool,
}

/// Remembers the original bits of every tracked page so untracking restores
/// them exactly.
#[derive(Debug, Clone, Default)]
pub struct PageTracker {
    tracked: BTreeMap<u64, Saved>,
}

impl PageTracker {
    pub fn track(&mut self, vm: &mut Vm, gpa: u64, mode: TrackMode) -> Result<(), TrackError> {
        let page = page_base(gpa);
        if self.tracked.contains_key(&page) {
            self.untrack(vm, page)?;
        }
        let entry = *vm.page(page).ok_or(GuestError::UnknownPage(gpa))?;
        self.tracked.insert(
            page,
            Saved {
                mode,
                present: entry.present,
                no_execute: entry.no_execute,
                writable: entry.writable,
            },
        );
        vm.update_page(page, |e| match mode {
            TrackMode::Access => e.present = false,
            TrackMode::Execute => e.no_execute = true,
            TrackMode::Write => e.writable = false,
        })?;
        Ok(())
    }

    pub fn track_pages(&mut self, vm: &mut Vm, gpas: impl IntoIterator<Item = u64>, mode: TrackMode) -> Result<(), TrackError> {
        for gpa in gpas {
            self.track(vm, gpa, mode)?;
        }
        Ok(())
    }

    /// Restores the page's bits. Untracking an untracked page only checks
    /// that it exists.
    pub fn untrack(&mut self, vm: &mut Vm, gpa: u64) -> Result<(), TrackError> {
        let page = page_base(gpa);
        if vm.page(page).is_none() {
            return Err(GuestError::UnknownPage(gpa).into());
        }
        if let Some(saved) = self.tracked.remove(&page) {
            vm.update_page(page, |e| {
                e.present = saved.present;
                e.no_execute = saved.no_execute;
                e.writable = saved.writable;
            })?;
        }
        Ok(())
    }

    pub fn untrack_all(&mut self, vm: &mut Vm) -> Result<(), TrackError> {
        let pages: Vec<u64> = self.tracked.keys().copied().collect();
        for p in pages {
            self.untrack(vm, p)?;
        }
        Ok(())
    }

    pub fn is_tracked(&self, gpa: u64) -> bool {
        self.tracked.contains_key(&page_base(gpa))
    }

    pub fn mode(&self, gpa: u64) -> Option<TrackMode> {
        self.tracked.get(&page_base(gpa)).map(|s| s.mode)
    }

    pub fn tracked_count(&self) -> usize {
        self.tracked.len()
    }
}

/// Runs the VM's program with every page in `code_pages` execute-tracked,
/// re-arming only the previously faulted page after each fault. Returns
/// the faulting pages as offsets (in pages) from `text_base`.
pub fn run_fingerprint_capture(
    m: &mut Machine,
    code_pages: &[u64],
    text_base: u64,
    budget: usize,
) -> Result<Vec<u64>, TrackError> {
    m.tracker.track_pages(&mut m.vm, code_pages.iter().copied(), TrackMode::Execute)?;
    let mut log = Vec::new();
    let mut previous: Option<u64> = None;
    let mut retired = 0usize;
    loop {
        match m.run_free(budget.saturating_sub(retired))? {
            FreeRun::Fault { event, retired: r } => {
                retired += r;
                let page = page_base(event.gpa);
                log.push((page - page_base(text_base)) >> crate::guest::PAGE_SHIFT);
                m.tracker.untrack(&mut m.vm, page)?;
                if let Some(prev) = previous.replace(page) {
                    m.tracker.track(&mut m.vm, prev, TrackMode::Execute)?;
                }
            }
            FreeRun::Finished { .. } => break,
            FreeRun::Budget { .. } => {
                m.tracker.untrack_all(&mut m.vm)?;
                return Err(TrackError::TriggerStalled(budget));
            }
        }
    }
    m.tracker.untrack_all(&mut m.vm)?;
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Marker,
    Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintEntry {
    pub offset: u64,
    pub role: Role,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub entries: Vec<FingerprintEntry>,
}

impl Fingerprint {
    pub fn new(entries: Vec<FingerprintEntry>) -> Result<Self, TrackError> {
        if entries.is_empty() {
            return Err(TrackError::EmptyFingerprint);
        }
        Ok(Fingerprint { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn offsets(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.offset).collect()
    }

    /// Parses `<hex-offset> <marker|payload> [label]` lines.
    pub fn parse(text: &str) -> Result<Self, TrackError> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| TrackError::Parse { line: n + 1, message };
            let mut words = line.splitn(3, char::is_whitespace);
            let off = words.next().unwrap_or_default();
            let offset = u64::from_str_radix(off.trim_start_matches("0x"), 16)
                .map_err(|e| err(format!("bad offset `{off}`: {e}")))?;
            let role = match words.next().map(str::trim) {
                Some("marker") => Role::Marker,
                Some("payload") => Role::Payload,
                other => return Err(err(format!("expected marker or payload, got {other:?}"))),
            };
            let label = words.next().map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
            entries.push(FingerprintEntry { offset, role, label });
        }
        Self::new(entries)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let role = match e.role {
                Role::Marker => "marker",
                Role::Payload => "payload",
            };
            write!(f, "{:#x} {role}", e.offset)?;
            if let Some(l) = &e.label {
                write!(f, " {l}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for Fingerprint {
    type Err = TrackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fingerprint::parse(s)
    }
}

/// The XTS decryption fingerprint with the AES functions as payload pages.
pub fn xts_fingerprint() -> Fingerprint {
    let labels = [
        ("marker", "xts_decrypt"),
        ("marker", "crypto_cipher_encrypt_one"),
        ("payload", "crypto_aes_encrypt"),
        ("marker", "crypto_aes_encrypt"),
        ("marker", "ecb_decrypt"),
        ("payload", "crypto_aes_decrypt"),
        ("marker", "crypto_aes_decrypt"),
    ];
    let entries = crate::crypto::victim::XTS_FINGERPRINT
        .iter()
        .zip(labels)
        .map(|(&offset, (role, label))| FingerprintEntry {
            offset,
            role: if role == "payload" { Role::Payload } else { Role::Marker },
            label: Some(label.to_string()),
        })
        .collect();
    Fingerprint { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStep {
    /// The fault matched the armed entry; `role` says what to do about it.
    Advanced { position: usize, role: Role },
    /// The whole sequence completed with this fault.
    Completed { role: Role },
    /// The fault did not match; state held.
    Held,
}

/// Tracks the fingerprint one expected page at a time.
#[derive(Debug, Clone)]
pub struct FingerprintMatcher {
    fingerprint: Fingerprint,
    state: usize,
    matches: usize,
}

impl FingerprintMatcher {
    pub fn new(fingerprint: Fingerprint) -> Self {
        FingerprintMatcher {
            fingerprint,
            state: 0,
            matches: 0,
        }
    }

    pub fn expected(&self) -> &FingerprintEntry {
        &self.fingerprint.entries[self.state]
    }

    pub fn position(&self) -> usize {
        self.state
    }

    pub fn matches(&self) -> usize {
        self.matches
    }

    pub fn on_fault(&mut self, offset: u64) -> MatchStep {
        let entry = &self.fingerprint.entries[self.state];
        if entry.offset != offset {
            return MatchStep::Held;
        }
        let role = entry.role;
        let position = self.state;
        self.state += 1;
        if self.state == self.fingerprint.len() {
            self.state = 0;
            self.matches += 1;
            return MatchStep::Completed { role };
        }
        MatchStep::Advanced { position, role }
    }

    /// Arms the page of the expected entry, disarming `previous` if given.
    pub fn arm(&self, m: &mut Machine, text_base: u64, previous: Option<u64>) -> Result<u64, TrackError> {
        if let Some(p) = previous {
            m.tracker.untrack(&mut m.vm, p)?;
        }
        let page = page_base(text_base) + (self.expected().offset << crate::guest::PAGE_SHIFT);
        m.tracker.track(&mut m.vm, page, TrackMode::Execute)?;
        Ok(page)
    }
}

/// Feeds a page-offset stream through a single-armed matcher: pages other
/// than the armed one never fault, so they are skipped. Returns the stream
/// indices at which a match completed.
pub fn match_fingerprint(stream: &[u64], fingerprint: &Fingerprint) -> Vec<usize> {
    let mut m = FingerprintMatcher::new(fingerprint.clone());
    let mut out = Vec::new();
    for (i, &page) in stream.iter().enumerate() {
        if page != m.expected().offset {
            continue;
        }
        if let MatchStep::Completed { .. } = m.on_fault(page) {
            out.push(i);
        }
    }
    out
}

/// Finds the page an instruction's last data operand lives on: every page in
/// `data_pages` is made non-present, the instruction at the cursor is
/// retried, and each faulting page is released until it retires.
pub fn locate_table(m: &mut Machine, data_pages: &[u64]) -> Result<u64, TrackError> {
    let target = m.vm.cursor();
    if m.vm.finished() {
        return Err(TrackError::Finished);
    }
    let fresh: Vec<u64> = data_pages.iter().copied().filter(|&p| !m.tracker.is_tracked(p)).collect();
    m.tracker.track_pages(&mut m.vm, fresh.iter().copied(), TrackMode::Access)?;
    let mut last = None;
    let result = loop {
        match m.run_free(1)? {
            FreeRun::Fault { event, .. } => {
                last = Some(page_base(event.gpa));
                m.tracker.untrack(&mut m.vm, event.gpa)?;
            }
            FreeRun::Budget { .. } | FreeRun::Finished { .. } => {
                break last.ok_or(TrackError::NoDataAccess(target));
            }
        }
    };
    for p in fresh {
        m.tracker.untrack(&mut m.vm, p)?;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{CacheGeometry, CacheState};
    use crate::guest::{GuestProgram, GuestTiming, Instruction, OpcodeClass, PageEntry, Vm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn machine(program: GuestProgram) -> Machine {
        let pages = (0x10..0x20).map(|p| PageEntry::new(p, 0x500 + p)).collect();
        let vm = Vm::new(program, pages, GuestTiming::default()).unwrap();
        Machine::new(vm, CacheState::new(CacheGeometry::default()).unwrap(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn access_tracking_faults_reads() {
        let prog = GuestProgram::contiguous(vec![Instruction::new(OpcodeClass::Load).with_mem([0x12_010])], 0x10_000).unwrap();
        let mut m = machine(prog);
        m.tracker.track(&mut m.vm, 0x12_000, TrackMode::Access).unwrap();
        match m.run_free(10).unwrap() {
            FreeRun::Fault { event, .. } => {
                assert_eq!(event.gpa, 0x12_000);
                assert_eq!(event.access, AccessType::Read);
            }
            other => panic!("expected fault, got {other:?}"),
        }
        m.tracker.untrack(&mut m.vm, 0x12_000).unwrap();
        assert_eq!(m.run_free(10).unwrap(), FreeRun::Finished { retired: 1 });
    }

    #[test]
    fn execute_tracking_leaves_reads_alone() {
        let prog = GuestProgram::contiguous(vec![Instruction::new(OpcodeClass::Load).with_mem([0x12_010])], 0x10_000).unwrap();
        let mut m = machine(prog);
        m.tracker.track(&mut m.vm, 0x12_000, TrackMode::Execute).unwrap();
        assert_eq!(m.run_free(10).unwrap(), FreeRun::Finished { retired: 1 });
        m.tracker.track(&mut m.vm, 0x12_000, TrackMode::Execute).unwrap();
        assert!(m.tracker.is_tracked(0x12_000));
    }

    #[test]
    fn untracked_page_does_not_fault() {
        let prog = GuestProgram::contiguous(vec![Instruction::new(OpcodeClass::Nop); 3], 0x10_000).unwrap();
        let mut m = machine(prog);
        m.tracker.track(&mut m.vm, 0x10_000, TrackMode::Execute).unwrap();
        m.tracker.untrack(&mut m.vm, 0x10_000).unwrap();
        assert_eq!(m.run_free(10).unwrap(), FreeRun::Finished { retired: 3 });
        assert!(m.tracker.untrack(&mut m.vm, 0x99_000).is_err());
    }

    #[test]
    fn matcher_fires_on_full_sequence_only() {
        let fp = xts_fingerprint();
        let seq = fp.offsets();
        assert_eq!(match_fingerprint(&seq, &fp), vec![6]);
        assert!(match_fingerprint(&seq[..5], &fp).is_empty());
        let mut noisy = Vec::new();
        for &p in &seq {
            noisy.push(0x123);
            noisy.push(p);
        }
        assert_eq!(match_fingerprint(&noisy, &fp).len(), 1);
        let twice: Vec<u64> = seq.iter().chain(&seq).copied().collect();
        assert_eq!(match_fingerprint(&twice, &fp), vec![6, 13]);
    }

    #[test]
    fn fingerprint_file_round_trip() {
        let fp = xts_fingerprint();
        let text = fp.to_string();
        assert!(text.starts_with("0x65c marker xts_decrypt"));
        assert_eq!(Fingerprint::parse(&text).unwrap(), fp);
        assert!(Fingerprint::parse("").is_err());
        assert!(Fingerprint::parse("0x10 sometimes").is_err());
    }

    #[test]
    fn locate_single_operand_page() {
        let prog = GuestProgram::contiguous(vec![Instruction::new(OpcodeClass::Load).with_mem([0x13_040])], 0x10_000).unwrap();
        let mut m = machine(prog);
        assert_eq!(locate_table(&mut m, &[0x12_000, 0x13_000]).unwrap(), 0x13_000);
        assert_eq!(m.tracker.tracked_count(), 0);
    }

    #[test]
    fn locate_returns_final_fault_of_two_operands() {
        let insn = Instruction::new(OpcodeClass::Load).with_mem([0x12_000, 0x14_080]);
        let prog = GuestProgram::contiguous(vec![insn], 0x10_000).unwrap();
        let mut m = machine(prog);
        assert_eq!(locate_table(&mut m, &[0x12_000, 0x13_000, 0x14_000]).unwrap(), 0x14_000);
    }

    #[test]
    fn locate_without_data_access_errors() {
        let prog = GuestProgram::contiguous(vec![Instruction::new(OpcodeClass::Nop)], 0x10_000).unwrap();
        let mut m = machine(prog);
        assert_eq!(locate_table(&mut m, &[0x12_000]), Err(TrackError::NoDataAccess(0)));
    }
}
