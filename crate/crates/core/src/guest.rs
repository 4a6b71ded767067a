//! Guest VM model: instruction stream, nested page table with a TLB and
//! accessed bits, and the per-instruction timing the stepper interrupts.
//!
//! Guest virtual addresses equal guest physical addresses. The nested level
//! (GPA -> HPA) is the one the hypervisor controls, so every permission bit
//! the attacker flips lives in [`PageEntry`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Cycles = u64;

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;
/// Every modeled instruction occupies this many bytes of code.
pub const INSTRUCTION_BYTES: u64 = 4;
/// Divisor used by the modeled `div` (the `rbx = 0xffff_ffff_ffff_ffff` setup).
pub const DIV_DIVISOR: u128 = u64::MAX as u128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuestError {
    #[error("address {0:#x} is outside every mapped guest page")]
    Unmapped(u64),
    #[error("unknown guest page {0:#x}")]
    UnknownPage(u64),
    #[error("cursor {0} is past the end of the program")]
    CursorOutOfRange(usize),
    #[error("invalid instruction: {0}")]
    InvalidInstruction(String),
    #[error("program parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("code layout does not cover instruction {0}")]
    MissingLayout(usize),
    #[error("page {0:#x} is mapped twice")]
    DuplicatePage(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpcodeClass {
    Nop,
    Add,
    Mul,
    Div,
    Rdrand,
    Lar,
    Load,
    Store,
    Fence,
    Generic,
}

impl OpcodeClass {
    pub const ALL: [OpcodeClass; 10] = [
        OpcodeClass::Nop,
        OpcodeClass::Add,
        OpcodeClass::Mul,
        OpcodeClass::Div,
        OpcodeClass::Rdrand,
        OpcodeClass::Lar,
        OpcodeClass::Load,
        OpcodeClass::Store,
        OpcodeClass::Fence,
        OpcodeClass::Generic,
    ];

    /// Default issue-to-retire latency in cycles when nothing else is stalling.
    pub fn default_latency(self) -> Cycles {
        match self {
            OpcodeClass::Nop | OpcodeClass::Add | OpcodeClass::Generic | OpcodeClass::Store => 1,
            OpcodeClass::Mul => 3,
            OpcodeClass::Load => 4,
            OpcodeClass::Div => 8,
            OpcodeClass::Fence => 12,
            OpcodeClass::Lar => 60,
            OpcodeClass::Rdrand => 1000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpcodeClass::Nop => "nop",
            OpcodeClass::Add => "add",
            OpcodeClass::Mul => "mul",
            OpcodeClass::Div => "div",
            OpcodeClass::Rdrand => "rdrand",
            OpcodeClass::Lar => "lar",
            OpcodeClass::Load => "load",
            OpcodeClass::Store => "store",
            OpcodeClass::Fence => "fence",
            OpcodeClass::Generic => "generic",
        }
    }
}

impl fmt::Display for OpcodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpcodeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpcodeClass::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown opcode class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessType {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub class: OpcodeClass,
    pub base_latency: Cycles,
    pub mem_operands: Vec<u64>,
    /// Class specific payload, e.g. the 128-bit dividend of a `div`.
    pub operand_meta: Option<u128>,
    /// Lookup-table tag used by the out-of-order noise model.
    pub table_id: Option<u8>,
}

impl Instruction {
    pub fn new(class: OpcodeClass) -> Self {
        Instruction {
            class,
            base_latency: class.default_latency(),
            mem_operands: Vec::new(),
            operand_meta: None,
            table_id: None,
        }
    }

    pub fn with_latency(mut self, latency: Cycles) -> Self {
        self.base_latency = latency;
        self
    }

    pub fn with_mem(mut self, addrs: impl IntoIterator<Item = u64>) -> Self {
        self.mem_operands.extend(addrs);
        self
    }

    pub fn with_table(mut self, table: u8) -> Self {
        self.table_id = Some(table);
        self
    }

    pub fn with_meta(mut self, meta: u128) -> Self {
        self.operand_meta = Some(meta);
        self
    }

    pub fn validate(&self) -> Result<(), GuestError> {
        if self.base_latency == 0 {
            return Err(GuestError::InvalidInstruction(
                "base latency must be at least one cycle".into(),
            ));
        }
        if self.class == OpcodeClass::Fence && !self.mem_operands.is_empty() {
            return Err(GuestError::InvalidInstruction(
                "fence instructions take no memory operands".into(),
            ));
        }
        Ok(())
    }

    pub fn is_fence(&self) -> bool {
        self.class == OpcodeClass::Fence
    }

    fn data_access_type(&self) -> AccessType {
        if self.class == OpcodeClass::Store {
            AccessType::Write
        } else {
            AccessType::Read
        }
    }
}

/// One line of the program text format:
/// `<opcode-class> [lat=<n>] [mem=<hexaddr>,...] [table=<id>] [div=<hexvalue>]`.
impl FromStr for Instruction {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut words = line.split_whitespace();
        let class: OpcodeClass = words.next().ok_or("empty instruction")?.parse()?;
        let mut insn = Instruction::new(class);
        for word in words {
            let (key, value) = word
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{word}`"))?;
            match key {
                "lat" => {
                    insn.base_latency = value.parse().map_err(|e| format!("lat: {e}"))?;
                }
                "mem" => {
                    for addr in value.split(',').filter(|a| !a.is_empty()) {
                        insn.mem_operands.push(parse_hex_u64(addr)?);
                    }
                }
                "table" => {
                    insn.table_id = Some(value.parse().map_err(|e| format!("table: {e}"))?);
                }
                "div" => {
                    let digits = value.trim_start_matches("0x");
                    insn.operand_meta =
                        Some(u128::from_str_radix(digits, 16).map_err(|e| format!("div: {e}"))?);
                }
                other => return Err(format!("unknown attribute `{other}`")),
            }
        }
        insn.validate().map_err(|e| e.to_string())?;
        Ok(insn)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.class)?;
        if self.base_latency != self.class.default_latency() {
            write!(f, " lat={}", self.base_latency)?;
        }
        if !self.mem_operands.is_empty() {
            let addrs: Vec<String> = self.mem_operands.iter().map(|a| format!("{a:#x}")).collect();
            write!(f, " mem={}", addrs.join(","))?;
        }
        if let Some(t) = self.table_id {
            write!(f, " table={t}")?;
        }
        if let Some(m) = self.operand_meta {
            write!(f, " div={m:#x}")?;
        }
        Ok(())
    }
}

fn parse_hex_u64(s: &str) -> Result<u64, String> {
    u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(|e| format!("bad hex `{s}`: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageEntry {
    /// Guest page frame number.
    pub gpa: u64,
    /// Host page frame number.
    pub hpa: u64,
    pub present: bool,
    pub no_execute: bool,
    pub writable: bool,
    pub accessed: bool,
    pub c_bit: bool,
}

impl PageEntry {
    pub fn new(gpa: u64, hpa: u64) -> Self {
        PageEntry {
            gpa,
            hpa,
            present: true,
            no_execute: false,
            writable: true,
            accessed: false,
            c_bit: true,
        }
    }

    fn permits(&self, access: AccessType) -> bool {
        self.present
            && match access {
                AccessType::Read => true,
                AccessType::Write => self.writable,
                AccessType::Execute => !self.no_execute,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TlbEntry {
    hpa: u64,
    writable: bool,
    no_execute: bool,
}

/// Fully associative TLB; FIFO replacement once `capacity` is reached.
#[derive(Debug, Clone, Default)]
pub struct TlbState {
    entries: BTreeMap<u64, TlbEntry>,
    order: VecDeque<u64>,
    capacity: Option<usize>,
}

impl TlbState {
    pub fn with_capacity(capacity: Option<usize>) -> Self {
        TlbState {
            capacity,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, gpn: u64) -> bool {
        self.entries.contains_key(&gpn)
    }

    fn insert(&mut self, gpn: u64, entry: TlbEntry) {
        if self.entries.insert(gpn, entry).is_none() {
            self.order.push_back(gpn);
        }
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap.max(1) {
                if let Some(old) = self.order.pop_front() {
                    self.entries.remove(&old);
                }
            }
        }
    }

    fn invalidate(&mut self, gpn: u64) {
        if self.entries.remove(&gpn).is_some() {
            self.order.retain(|&p| p != gpn);
        }
    }

    fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestTiming {
    pub tlb_hit: Cycles,
    pub page_walk: Cycles,
    pub a_bit_set: Cycles,
    /// `div` costs one extra cycle per started 9 bits of quotient.
    pub div_quotient_rule: bool,
}

impl Default for GuestTiming {
    fn default() -> Self {
        GuestTiming {
            tlb_hit: 2,
            page_walk: 400,
            a_bit_set: 150,
            div_quotient_rule: true,
        }
    }
}

/// Extra `div` cycles: one per started group of 9 significant quotient bits.
pub fn div_extra_cycles(dividend: u128) -> Cycles {
    let quotient = dividend / DIV_DIVISOR;
    let bits = 128 - quotient.leading_zeros() as u64;
    bits.div_ceil(9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    /// Page-aligned guest physical address of the faulting page.
    pub gpa: u64,
    pub access: AccessType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    Mapped { paddr: u64, latency: Cycles },
    Fault(Fault),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestProgram {
    pub instructions: Vec<Instruction>,
    /// Guest address of every instruction, indexed like `instructions`.
    pub code_layout: Vec<u64>,
    pub entry_index: usize,
}

impl GuestProgram {
    pub fn new(instructions: Vec<Instruction>, code_layout: Vec<u64>) -> Result<Self, GuestError> {
        if code_layout.len() < instructions.len() {
            return Err(GuestError::MissingLayout(code_layout.len()));
        }
        for insn in &instructions {
            insn.validate()?;
        }
        Ok(GuestProgram {
            instructions,
            code_layout,
            entry_index: 0,
        })
    }

    /// Lays instructions out contiguously starting at `code_base`.
    pub fn contiguous(instructions: Vec<Instruction>, code_base: u64) -> Result<Self, GuestError> {
        let layout = (0..instructions.len() as u64)
            .map(|i| code_base + i * INSTRUCTION_BYTES)
            .collect();
        Self::new(instructions, layout)
    }

    /// Parses the line-oriented program format. Blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str, code_base: u64) -> Result<Self, GuestError> {
        let mut instructions = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let insn = line.parse::<Instruction>().map_err(|message| GuestError::Parse {
                line: n + 1,
                message,
            })?;
            instructions.push(insn);
        }
        Self::contiguous(instructions, code_base)
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Distinct code pages (page-aligned addresses) in first-use order.
    pub fn code_pages(&self) -> Vec<u64> {
        let mut pages: Vec<u64> = Vec::new();
        for &addr in &self.code_layout {
            let page = page_base(addr);
            if !pages.contains(&page) {
                pages.push(page);
            }
        }
        pages
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for insn in &self.instructions {
            out.push_str(&insn.to_string());
            out.push('\n');
        }
        out
    }
}

pub fn page_base(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

pub fn page_number(addr: u64) -> u64 {
    addr >> PAGE_SHIFT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetireRecord {
    pub index: usize,
    pub issue_time: Cycles,
    pub retire_time: Cycles,
    pub walk_penalties: Cycles,
    pub faulted: Option<Fault>,
    /// Host physical addresses of the data accesses the instruction made.
    pub data_paddrs: Vec<u64>,
    /// Retired from the virtual interrupt handler rather than the payload.
    pub handler: bool,
}

impl RetireRecord {
    pub fn retired(&self) -> bool {
        self.faulted.is_none()
    }
}

/// The guest's own timer interrupt handler, executed when the hypervisor
/// injects a virtual timer interrupt.
#[derive(Debug, Clone)]
struct InterruptHandler {
    code_base: u64,
    length: usize,
    position: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Vm {
    program: GuestProgram,
    pages: BTreeMap<u64, PageEntry>,
    tlb: TlbState,
    timing: GuestTiming,
    cursor: usize,
    fresh_entry: bool,
    last_code_page: Option<u64>,
    handler: InterruptHandler,
    pending_virtual_interrupt: bool,
}

pub const DEFAULT_HANDLER_GPA: u64 = 0x7f_f000;
pub const DEFAULT_HANDLER_LENGTH: usize = 24;

impl Vm {
    pub fn new(program: GuestProgram, pages: Vec<PageEntry>, timing: GuestTiming) -> Result<Self, GuestError> {
        let mut map = BTreeMap::new();
        for entry in pages {
            if map.insert(entry.gpa, entry).is_some() {
                return Err(GuestError::DuplicatePage(entry.gpa << PAGE_SHIFT));
            }
        }
        let cursor = program.entry_index;
        Ok(Vm {
            program,
            pages: map,
            tlb: TlbState::default(),
            timing,
            cursor,
            fresh_entry: true,
            last_code_page: None,
            handler: InterruptHandler {
                code_base: DEFAULT_HANDLER_GPA,
                length: DEFAULT_HANDLER_LENGTH,
                position: None,
            },
            pending_virtual_interrupt: false,
        })
    }

    pub fn set_tlb_capacity(&mut self, capacity: Option<usize>) {
        self.tlb = TlbState::with_capacity(capacity);
    }

    /// Places the guest's timer interrupt handler. Its page must be mapped.
    pub fn set_interrupt_handler(&mut self, code_base: u64, length: usize) {
        self.handler = InterruptHandler {
            code_base,
            length: length.max(1),
            position: None,
        };
    }

    pub fn program(&self) -> &GuestProgram {
        &self.program
    }

    pub fn timing(&self) -> &GuestTiming {
        &self.timing
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn finished(&self) -> bool {
        self.cursor >= self.program.len() && self.handler.position.is_none() && !self.pending_virtual_interrupt
    }

    pub fn remaining(&self) -> usize {
        self.program.len().saturating_sub(self.cursor)
    }

    pub fn tlb(&self) -> &TlbState {
        &self.tlb
    }

    pub fn page(&self, gpa: u64) -> Option<&PageEntry> {
        self.pages.get(&page_number(gpa))
    }

    pub fn pages(&self) -> impl Iterator<Item = &PageEntry> {
        self.pages.values()
    }

    /// Applies `f` to the page entry and drops any TLB entry for it.
    pub fn update_page(&mut self, gpa: u64, f: impl FnOnce(&mut PageEntry)) -> Result<(), GuestError> {
        let gpn = page_number(gpa);
        let entry = self.pages.get_mut(&gpn).ok_or(GuestError::UnknownPage(gpa))?;
        f(entry);
        self.tlb.invalidate(gpn);
        Ok(())
    }

    /// Marks the VM as just (re-)entered: the next instruction translates its
    /// own code page.
    pub fn enter(&mut self) {
        self.fresh_entry = true;
    }

    pub fn inject_virtual_interrupt(&mut self) {
        self.pending_virtual_interrupt = true;
    }

    pub fn handler_active(&self) -> bool {
        self.handler.position.is_some() || self.pending_virtual_interrupt
    }

    pub fn flush_tlb(&mut self) {
        self.tlb.clear();
    }

    pub fn reset_accessed_bit(&mut self, gpa: u64) -> Result<(), GuestError> {
        let entry = self
            .pages
            .get_mut(&page_number(gpa))
            .ok_or(GuestError::UnknownPage(gpa))?;
        entry.accessed = false;
        Ok(())
    }

    /// Guest address of the instruction that would execute next.
    pub fn next_code_address(&self) -> Option<u64> {
        if let Some(pos) = self.handler.position {
            return Some(self.handler.code_base + pos as u64 * INSTRUCTION_BYTES);
        }
        if self.pending_virtual_interrupt {
            return Some(self.handler.code_base);
        }
        self.program.code_layout.get(self.cursor).copied()
    }

    /// Next payload instruction, ignoring any pending handler work.
    pub fn next_instruction(&self) -> Option<&Instruction> {
        self.program.instructions.get(self.cursor)
    }

    /// Side-effect free GPA -> HPA lookup through the page table, ignoring
    /// permissions and the TLB.
    pub fn peek_paddr(&self, vaddr: u64) -> Option<u64> {
        let entry = self.pages.get(&page_number(vaddr))?;
        entry
            .present
            .then_some((entry.hpa << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1)))
    }

    pub fn c_bit(&self, vaddr: u64) -> bool {
        self.pages.get(&page_number(vaddr)).is_some_and(|e| e.c_bit)
    }

    /// Translates through TLB and nested page table.
    ///
    /// A TLB hit costs `tlb_hit`. A miss adds a walk, fills the TLB and sets
    /// the accessed bit (paying `a_bit_set` if it was clear). Faults leave
    /// all translation state untouched.
    pub fn translate(&mut self, vaddr: u64, access: AccessType) -> Result<Translation, GuestError> {
        let gpn = page_number(vaddr);
        let offset = vaddr & (PAGE_SIZE - 1);
        let entry = self.pages.get_mut(&gpn).ok_or(GuestError::Unmapped(vaddr))?;
        if let Some(cached) = self.tlb.entries.get(&gpn) {
            let allowed = match access {
                AccessType::Read => true,
                AccessType::Write => cached.writable,
                AccessType::Execute => !cached.no_execute,
            };
            if allowed {
                return Ok(Translation::Mapped {
                    paddr: (cached.hpa << PAGE_SHIFT) | offset,
                    latency: self.timing.tlb_hit,
                });
            }
        }
        if !entry.permits(access) {
            return Ok(Translation::Fault(Fault {
                gpa: gpn << PAGE_SHIFT,
                access,
            }));
        }
        let mut latency = self.timing.tlb_hit + self.timing.page_walk;
        if !entry.accessed {
            entry.accessed = true;
            latency += self.timing.a_bit_set;
        }
        let cached = TlbEntry {
            hpa: entry.hpa,
            writable: entry.writable,
            no_execute: entry.no_execute,
        };
        let paddr = (entry.hpa << PAGE_SHIFT) | offset;
        self.tlb.insert(gpn, cached);
        Ok(Translation::Mapped { paddr, latency })
    }

    fn current_instruction(&self) -> Result<(Instruction, u64, Option<usize>), GuestError> {
        if self.pending_virtual_interrupt || self.handler.position.is_some() {
            let pos = self.handler.position.unwrap_or(0);
            let addr = self.handler.code_base + pos as u64 * INSTRUCTION_BYTES;
            return Ok((Instruction::new(OpcodeClass::Generic), addr, Some(pos)));
        }
        let insn = self
            .program
            .instructions
            .get(self.cursor)
            .ok_or(GuestError::CursorOutOfRange(self.cursor))?;
        let addr = *self
            .program
            .code_layout
            .get(self.cursor)
            .ok_or(GuestError::MissingLayout(self.cursor))?;
        Ok((insn.clone(), addr, None))
    }

    /// Issues the next instruction at `issue_time` and runs it to retirement.
    ///
    /// The first instruction after an entry, and any instruction on a new code
    /// page, translates its code page; a TLB hit there is hidden by the
    /// front end, a miss costs the walk. On a fault nothing retires, the
    /// cursor stays put and the record carries the fault.
    pub fn step_instruction(&mut self, issue_time: Cycles) -> Result<RetireRecord, GuestError> {
        let (insn, code_addr, handler_pos) = self.current_instruction()?;
        let index = handler_pos.unwrap_or(self.cursor);
        let mut elapsed: Cycles = 0;
        let mut walk_penalties: Cycles = 0;
        let code_page = page_base(code_addr);

        if self.fresh_entry || self.last_code_page != Some(code_page) {
            match self.translate(code_addr, AccessType::Execute)? {
                Translation::Mapped { latency, .. } => {
                    let stall = latency.saturating_sub(self.timing.tlb_hit);
                    walk_penalties += stall;
                    elapsed += stall;
                }
                Translation::Fault(fault) => return Ok(self.fault_record(index, issue_time, elapsed, walk_penalties, fault, handler_pos)),
            }
        }

        let mut data_paddrs = Vec::with_capacity(insn.mem_operands.len());
        let access = insn.data_access_type();
        for &addr in &insn.mem_operands {
            match self.translate(addr, access)? {
                Translation::Mapped { paddr, latency } => {
                    walk_penalties += latency.saturating_sub(self.timing.tlb_hit);
                    elapsed += latency;
                    data_paddrs.push(paddr);
                }
                Translation::Fault(fault) => {
                    // Translations done so far stay in the TLB, as on hardware.
                    self.last_code_page = Some(code_page);
                    self.fresh_entry = false;
                    return Ok(self.fault_record(index, issue_time, elapsed, walk_penalties, fault, handler_pos));
                }
            }
        }

        let mut latency = insn.base_latency;
        if insn.class == OpcodeClass::Div && self.timing.div_quotient_rule {
            latency += insn.operand_meta.map_or(0, div_extra_cycles);
        }
        elapsed += latency;

        self.fresh_entry = false;
        self.last_code_page = Some(code_page);
        match handler_pos {
            Some(pos) => {
                self.pending_virtual_interrupt = false;
                self.handler.position = (pos + 1 < self.handler.length).then_some(pos + 1);
            }
            None => self.cursor += 1,
        }
        Ok(RetireRecord {
            index,
            issue_time,
            retire_time: issue_time + elapsed,
            walk_penalties,
            faulted: None,
            data_paddrs,
            handler: handler_pos.is_some(),
        })
    }

    fn fault_record(
        &mut self,
        index: usize,
        issue_time: Cycles,
        elapsed: Cycles,
        walk_penalties: Cycles,
        fault: Fault,
        handler_pos: Option<usize>,
    ) -> RetireRecord {
        // An exit follows every fault, so the retry starts from a fresh entry.
        self.fresh_entry = true;
        RetireRecord {
            index,
            issue_time,
            retire_time: issue_time + elapsed + 1,
            walk_penalties,
            faulted: Some(fault),
            data_paddrs: Vec::new(),
            handler: handler_pos.is_some(),
        }
    }
}
