//! APIC-timer single stepping. A step programs the timer, enters the VM,
//! lets every instruction whose issue time precedes the interrupt retire and
//! reads the step size off the retired-instruction counter.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{inject_ooo_noise, CacheState, CacheTrace, OooConfig, PrimeProbe, SimClock, VICTIM_ASID};
use crate::channel::{ChannelError, EventChannel, EventPayload};
use crate::guest::{page_base, Cycles, GuestError, GuestProgram, Instruction, OpcodeClass, PageEntry, RetireRecord, Vm, DEFAULT_HANDLER_GPA};
use crate::tracker::{PageFaultEvent, PageTracker};

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Guest(#[from] GuestError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid stepper knobs: {0}")]
    Knobs(String),
    #[error("no timer value retired any instruction")]
    NoProgress,
    #[error("tracking error: {0}")]
    Tracking(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryJitter {
    pub mean: f64,
    pub stddev: f64,
}

impl Default for EntryJitter {
    fn default() -> Self {
        EntryJitter {
            mean: 1500.0,
            stddev: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepperKnobs {
    pub timer_value: u64,
    pub tick_scale: u64,
    pub flush_tlb: bool,
    pub reset_a_bit: bool,
    pub suppress_virtual_timer: bool,
    /// When set, an interrupt due earlier than this many cycles after entry
    /// is held back until a random 1..=`countermeasure_max_extra`
    /// instructions have retired.
    pub countermeasure_min_cycles: Option<Cycles>,
    pub countermeasure_max_extra: u64,
    pub do_cache_attack: bool,
    pub entry_jitter: EntryJitter,
    /// Cycles from the exit to the post-exit timestamp.
    pub exit_overhead: Cycles,
}

impl Default for StepperKnobs {
    fn default() -> Self {
        StepperKnobs {
            timer_value: 8,
            tick_scale: 200,
            flush_tlb: false,
            reset_a_bit: false,
            suppress_virtual_timer: true,
            countermeasure_min_cycles: None,
            countermeasure_max_extra: 32,
            do_cache_attack: false,
            entry_jitter: EntryJitter::default(),
            exit_overhead: 600,
        }
    }
}

impl StepperKnobs {
    /// The knob set that single-steps reliably once the timer is calibrated.
    pub fn reliable() -> Self {
        StepperKnobs {
            flush_tlb: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StepError> {
        if self.timer_value == 0 {
            return Err(StepError::Knobs("timer value must be positive".into()));
        }
        if self.tick_scale == 0 {
            return Err(StepError::Knobs("tick scale must be at least 1".into()));
        }
        if !(self.entry_jitter.stddev >= 0.0 && self.entry_jitter.mean.is_finite()) {
            return Err(StepError::Knobs("entry jitter needs a finite mean and stddev >= 0".into()));
        }
        if self.countermeasure_max_extra == 0 {
            return Err(StepError::Knobs("countermeasure needs at least one extra instruction".into()));
        }
        Ok(())
    }

    pub fn timer_cycles(&self) -> Cycles {
        self.timer_value * self.tick_scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step_size: u64,
    pub latency: Cycles,
    /// One trace per monitored region when the cache attack is on.
    pub cache_trace: Option<Vec<CacheTrace>>,
    pub faulted: Option<PageFaultEvent>,
    /// Payload instructions retired in this step.
    pub instruction_indices: Range<usize>,
    /// How many of the retired instructions belonged to the guest's own
    /// interrupt handler.
    pub handler_instructions: u64,
}

impl StepEvent {
    pub fn is_zero_step(&self) -> bool {
        self.step_size == 0
    }

    pub fn is_single_step(&self) -> bool {
        self.step_size == 1
    }
}

/// Everything the supervisor owns: the VM, the shared cache, the clock and
/// the attack state.
#[derive(Debug, Clone)]
pub struct Machine {
    pub vm: Vm,
    pub cache: CacheState,
    pub clock: SimClock,
    pub monitor: Option<PrimeProbe>,
    pub ooo: OooConfig,
    pub tracker: PageTracker,
    pub rng: ChaCha8Rng,
    /// Every record produced by the guest, kept when `record_retires` is set.
    pub retire_log: Vec<RetireRecord>,
    pub record_retires: bool,
}

impl Machine {
    pub fn new(vm: Vm, cache: CacheState, rng: ChaCha8Rng) -> Self {
        Machine {
            vm,
            cache,
            clock: SimClock::default(),
            monitor: None,
            ooo: OooConfig::default(),
            tracker: PageTracker::default(),
            rng,
            retire_log: Vec::new(),
            record_retires: false,
        }
    }

    fn touch_data(&mut self, rec: &RetireRecord) {
        if rec.data_paddrs.is_empty() {
            return;
        }
        let insn = &self.vm.program().instructions[rec.index];
        for (&paddr, &vaddr) in rec.data_paddrs.iter().zip(&insn.mem_operands) {
            let c_bit = self.vm.c_bit(vaddr);
            self.cache.access(paddr, VICTIM_ASID, c_bit);
        }
    }

    fn execute(&mut self, issue: Cycles) -> Result<RetireRecord, GuestError> {
        let rec = self.vm.step_instruction(issue)?;
        if rec.retired() {
            if !rec.handler {
                self.touch_data(&rec);
            }
            self.cache.counters_mut().guest_retired_instructions += 1;
        }
        if self.record_retires {
            self.retire_log.push(rec.clone());
        }
        Ok(rec)
    }

    /// Runs the guest without a timer until it faults, finishes, or retires
    /// `budget` instructions.
    pub fn run_free(&mut self, budget: usize) -> Result<FreeRun, GuestError> {
        self.vm.enter();
        let mut issue = self.clock.measure_time() + 1;
        let mut retired = 0;
        while !self.vm.finished() {
            if retired >= budget {
                self.clock.advance_to(issue);
                return Ok(FreeRun::Budget { retired });
            }
            let index = self.vm.cursor();
            let rec = self.execute(issue)?;
            issue = rec.retire_time;
            if let Some(f) = rec.faulted {
                self.clock.advance_to(issue);
                return Ok(FreeRun::Fault {
                    event: PageFaultEvent {
                        gpa: f.gpa,
                        access: f.access,
                        instruction_index: index,
                    },
                    retired,
                });
            }
            retired += 1;
        }
        self.clock.advance_to(issue);
        Ok(FreeRun::Finished { retired })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeRun {
    Fault { event: PageFaultEvent, retired: usize },
    Finished { retired: usize },
    Budget { retired: usize },
}

fn sample_entry(knobs: &StepperKnobs, rng: &mut impl Rng) -> Cycles {
    let j = knobs.entry_jitter;
    let e = if j.stddev > 0.0 {
        Normal::new(j.mean, j.stddev).expect("validated jitter").sample(rng)
    } else {
        j.mean
    };
    e.round().max(1.0) as Cycles
}

/// One timer-bounded VM entry.
pub fn run_step(m: &mut Machine, knobs: &StepperKnobs) -> Result<StepEvent, StepError> {
    knobs.validate()?;
    if knobs.flush_tlb {
        m.vm.flush_tlb();
    }
    if knobs.reset_a_bit {
        if let Some(addr) = m.vm.next_code_address() {
            m.vm.reset_accessed_bit(page_base(addr))?;
        }
    }
    let attack = knobs.do_cache_attack && m.monitor.is_some();
    if attack {
        if let Some(pp) = &m.monitor {
            pp.prime(&mut m.cache);
        }
    }

    let t0 = m.clock.measure_time();
    let entry = t0 + sample_entry(knobs, &mut m.rng);
    let fire = t0 + knobs.timer_cycles();
    let counter_before = m.cache.counters().guest_retired_instructions;
    let forced = match knobs.countermeasure_min_cycles {
        Some(min) if fire < entry + min => Some(m.rng.gen_range(1..=knobs.countermeasure_max_extra)),
        _ => None,
    };

    m.vm.enter();
    let mut issue = entry;
    let mut exit = entry;
    let mut retired = 0u64;
    let mut handler = 0u64;
    let mut first_payload = None;
    let mut last_payload = None;
    let mut faulted = None;
    let mut natural_done = false;
    while !m.vm.finished() {
        if !natural_done && issue > fire {
            natural_done = true;
        }
        if natural_done {
            // An early interrupt is held back until the random count retired.
            match forced {
                Some(extra) if retired < extra => {}
                _ => break,
            }
        }
        let index = m.vm.cursor();
        let rec = m.execute(issue)?;
        exit = rec.retire_time;
        if let Some(f) = rec.faulted {
            faulted = Some(PageFaultEvent {
                gpa: f.gpa,
                access: f.access,
                instruction_index: index,
            });
            break;
        }
        retired += 1;
        if rec.handler {
            handler += 1;
        } else {
            first_payload.get_or_insert(rec.index);
            last_payload = Some(rec.index);
        }
        issue = rec.retire_time;
    }

    // The interrupt lands after the last retired instruction; loads queued
    // behind it have already been issued out of order.
    if faulted.is_none() {
        if let Some(last) = last_payload {
            if m.ooo.window > 0 {
                inject_ooo_noise(&mut m.cache, &m.vm, last, &m.ooo, &mut m.rng);
            }
        }
        if !knobs.suppress_virtual_timer && !m.vm.handler_active() && !m.vm.finished() {
            m.vm.inject_virtual_interrupt();
        }
    }

    m.clock.advance_to(exit.max(fire.min(entry)) + knobs.exit_overhead);
    let latency = m.clock.measure_time() - t0;
    let cache_trace = if attack {
        m.monitor.as_ref().map(|pp| pp.probe(&mut m.cache, &mut m.rng))
    } else {
        None
    };
    let step_size = m.cache.counters().guest_retired_instructions - counter_before;
    debug_assert_eq!(step_size, retired);
    let instruction_indices = match (first_payload, last_payload) {
        (Some(a), Some(b)) => a..b + 1,
        _ => {
            let c = m.vm.cursor();
            c..c
        }
    };
    Ok(StepEvent {
        step_size,
        latency,
        cache_trace,
        faulted,
        instruction_indices,
        handler_instructions: handler,
    })
}

/// Steps until `until` holds, publishing every event and waiting for its
/// acknowledgment. Configuration submitted meanwhile applies to the next step.
pub fn single_step_region(
    m: &mut Machine,
    knobs: &mut StepperKnobs,
    channel: &EventChannel,
    mut until: impl FnMut(&Machine) -> bool,
) -> Result<usize, StepError> {
    let mut events = 0;
    loop {
        let change = channel.take_config();
        change.apply(knobs);
        for (gpa, mode) in &change.track {
            m.tracker
                .track(&mut m.vm, *gpa, *mode)
                .map_err(|e| StepError::Tracking(e.to_string()))?;
        }
        for gpa in &change.untrack {
            m.tracker.untrack(&mut m.vm, *gpa).map_err(|e| StepError::Tracking(e.to_string()))?;
        }
        if until(m) || m.vm.finished() {
            return Ok(events);
        }
        let event = run_step(m, knobs)?;
        channel.send_event(EventPayload::Step(event))?;
        events += 1;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub timer: u64,
    pub zero: u64,
    pub single: u64,
    pub multi: u64,
    pub mean_multi: f64,
    /// Whether the whole slide retired within the step budget.
    pub completed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timer,zero,single,multi,mean_multi\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{:.2}\n", r.timer, r.zero, r.single, r.multi, r.mean_multi));
        }
        out
    }

    pub fn row(&self, timer: u64) -> Option<&CalibrationRow> {
        self.rows.iter().find(|r| r.timer == timer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Starting timer value; derived from the jitter model when absent.
    pub start: Option<u64>,
    /// Step attempts per candidate before giving up on finishing the slide.
    pub step_budget: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            start: None,
            step_budget: 20_000,
        }
    }
}

/// Runs one full slide at a fixed timer value and tallies the step sizes.
pub fn measure_slide(m: &mut Machine, knobs: &StepperKnobs, budget: usize) -> Result<CalibrationRow, StepError> {
    let mut row = CalibrationRow {
        timer: knobs.timer_value,
        ..Default::default()
    };
    let mut multi_total = 0u64;
    for _ in 0..budget {
        if m.vm.finished() {
            break;
        }
        let e = run_step(m, knobs)?;
        match e.step_size {
            0 => row.zero += 1,
            1 => row.single += 1,
            n => {
                row.multi += 1;
                multi_total += n;
            }
        }
    }
    row.completed = m.vm.finished();
    if row.multi > 0 {
        row.mean_multi = multi_total as f64 / row.multi as f64;
    }
    Ok(row)
}

/// Sweeps the timer downward from an over-estimate until a value only
/// produces zero-steps. Returns the smallest value whose slide finished with
/// at least one single-step (falling back to the smallest value with any
/// single-step) and the per-candidate report.
pub fn calibrate_timer(
    mut factory: impl FnMut() -> Machine,
    template: &StepperKnobs,
    opts: CalibrationOptions,
) -> Result<(u64, CalibrationReport), StepError> {
    template.validate()?;
    let j = template.entry_jitter;
    let start = opts
        .start
        .unwrap_or_else(|| ((j.mean + 6.0 * j.stddev) / template.tick_scale as f64).ceil() as u64 + 2)
        .max(1);
    let mut report = CalibrationReport::default();
    let mut best_completed = None;
    let mut best_any = None;
    let mut progressed = false;
    for timer in (1..=start).rev() {
        let knobs = StepperKnobs {
            timer_value: timer,
            ..*template
        };
        let mut m = factory();
        let row = measure_slide(&mut m, &knobs, opts.step_budget)?;
        report.rows.push(row);
        if row.single + row.multi > 0 {
            progressed = true;
        }
        if row.single > 0 {
            best_any = Some(timer);
            if row.completed {
                best_completed = Some(timer);
            }
        }
        if row.single == 0 && row.multi == 0 {
            break;
        }
    }
    if !progressed {
        return Err(StepError::NoProgress);
    }
    let chosen = best_completed.or(best_any).ok_or(StepError::NoProgress)?;
    Ok((chosen, report))
}

/// Code base of generated slides.
pub const SLIDE_BASE: u64 = 0x40_0000;
/// Host frames for slide machines.
const SLIDE_HOST_BASE: u64 = 0x8_0000;

/// A VM running `n` copies of `insn` laid out contiguously.
pub fn slide_vm(insns: Vec<Instruction>, timing: crate::guest::GuestTiming) -> Result<Vm, GuestError> {
    let program = GuestProgram::contiguous(insns, SLIDE_BASE)?;
    let mut pages: Vec<u64> = program.code_pages();
    pages.push(DEFAULT_HANDLER_GPA);
    for insn in &program.instructions {
        for &a in &insn.mem_operands {
            let p = page_base(a);
            if !pages.contains(&p) {
                pages.push(p);
            }
        }
    }
    let entries = pages
        .iter()
        .enumerate()
        .map(|(i, &p)| PageEntry::new(p >> crate::guest::PAGE_SHIFT, SLIDE_HOST_BASE + i as u64))
        .collect();
    Vm::new(program, entries, timing)
}

pub fn nop_slide(n: usize) -> Vec<Instruction> {
    vec![Instruction::new(OpcodeClass::Nop); n]
}
