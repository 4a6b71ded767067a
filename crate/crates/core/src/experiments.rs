//! Self-contained experiments on the simulator: step-size tables, zero-step
//! purity, the alternating-line cache attack and page-fault fingerprints.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{table_regions, AttackError};
use crate::cache::{CacheGeometry, CacheState, MonitoredRegion, OooConfig, PageAllocator, PrimeProbe, VICTIM_ASID};
use crate::crypto::victim::{boot_vm, compile_to_program, control_workload, CompileOptions, VictimLayout, ATTACKER_HOST_BASE};
use crate::crypto::xts::XtsContext;
use crate::guest::{GuestTiming, Instruction, OpcodeClass, PAGE_SIZE};
use crate::stepper::{measure_slide, nop_slide, run_step, slide_vm, CalibrationReport, Machine, StepperKnobs};
use crate::tracker::{match_fingerprint, run_fingerprint_capture, xts_fingerprint};

fn fresh_cache(geometry: CacheGeometry) -> Result<CacheState, AttackError> {
    Ok(CacheState::new(geometry)?)
}

/// A knob combination of the step-size table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnobSetting {
    pub name: &'static str,
    pub flush_tlb: bool,
    pub reset_a_bit: bool,
}

pub const KNOB_SETTINGS: [KnobSetting; 4] = [
    KnobSetting {
        name: "none",
        flush_tlb: false,
        reset_a_bit: false,
    },
    KnobSetting {
        name: "a-bit",
        flush_tlb: false,
        reset_a_bit: true,
    },
    KnobSetting {
        name: "flush-tlb",
        flush_tlb: true,
        reset_a_bit: false,
    },
    KnobSetting {
        name: "flush-tlb+a-bit",
        flush_tlb: true,
        reset_a_bit: true,
    },
];

/// Steps a fresh `slide`-nop slide once per timer value.
pub fn step_table(
    knobs: &StepperKnobs,
    timing: GuestTiming,
    timers: impl IntoIterator<Item = u64>,
    slide: usize,
    seed: u64,
) -> Result<CalibrationReport, AttackError> {
    let mut report = CalibrationReport::default();
    for timer in timers {
        let k = StepperKnobs {
            timer_value: timer,
            ..*knobs
        };
        let vm = slide_vm(nop_slide(slide), timing)?;
        let mut m = Machine::new(vm, fresh_cache(CacheGeometry::default())?, ChaCha8Rng::seed_from_u64(seed ^ timer));
        report.rows.push(measure_slide(&mut m, &k, 4 * slide + 100)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurityReport {
    pub steps: u64,
    pub zero_steps: u64,
    /// Steps after which the victim filled a line, a probed set turned hot,
    /// an accessed bit changed or the guest advanced.
    pub dirty_steps: u64,
    pub victim_fills: u64,
    pub hot_sets: u64,
}

/// Forces `steps` zero-steps on the AES victim with Prime+Probe on its
/// tables and counts anything the guest changed.
pub fn zero_step_purity(steps: u64, seed: u64) -> Result<PurityReport, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = XtsContext::new([1; 16], [2; 16], 512).map_err(crate::fixture::FixtureError::from)?;
    let script = ctx.xts_decrypt_sector(3, &[0u8; 512]).map_err(crate::fixture::FixtureError::from)?.1;
    let layout = VictimLayout::boot(&mut rng);
    let compiled = compile_to_program(&[script], &layout, CompileOptions::default())?;
    let geometry = CacheGeometry::default();
    let vm = boot_vm(compiled.program, &layout, GuestTiming::default(), geometry.page_colors(), &mut rng)?;
    let mut m = Machine::new(vm, fresh_cache(geometry)?, ChaCha8Rng::seed_from_u64(rng.next_u64()));
    let mut alloc = PageAllocator::new(ATTACKER_HOST_BASE..ATTACKER_HOST_BASE + 0x10_0000);
    let page = layout.tables.base_gpa[0] & !(PAGE_SIZE - 1);
    let regions = table_regions(&m, page, &mut alloc)?;
    m.monitor = Some(PrimeProbe::new(regions, &geometry, 0.0)?);
    // Park the guest in the middle of the first AES call.
    m.run_free(compiled.calls[0].0 + 20)?;
    let knobs = StepperKnobs {
        timer_value: 1,
        do_cache_attack: true,
        ..StepperKnobs::reliable()
    };
    let accessed = |m: &Machine| m.vm.pages().map(|p| p.accessed).collect::<Vec<_>>();
    let mut report = PurityReport::default();
    for _ in 0..steps {
        let fills = m.cache.fills(VICTIM_ASID);
        let bits = accessed(&m);
        let cursor = m.vm.cursor();
        let e = run_step(&mut m, &knobs)?;
        report.steps += 1;
        if e.step_size != 0 {
            continue;
        }
        report.zero_steps += 1;
        let filled = m.cache.fills(VICTIM_ASID) - fills;
        let hot: usize = e.cache_trace.iter().flatten().map(|t| t.hot_count()).sum();
        report.victim_fills += filled;
        report.hot_sets += hot as u64;
        if filled > 0 || hot > 0 || accessed(&m) != bits || m.vm.cursor() != cursor {
            report.dirty_steps += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlternatingResult {
    pub loads: u64,
    pub observed: u64,
    pub correct: u64,
    pub accuracy: f64,
}

/// Lines the alternating victim switches between.
pub const ALTERNATING_LINES: [u8; 2] = [1, 15];

/// A victim loading lines 1 and 15 of one table in turn, optionally fenced,
/// single-stepped with Prime+Probe. A load is classified correctly when its
/// line's set is hot and the other line's set is cold.
pub fn alternating_attack(fenced: bool, ooo: OooConfig, p_noise: f64, loads: usize, seed: u64) -> Result<AlternatingResult, AttackError> {
    const TABLE: u64 = 0x60_0000;
    let mut insns = Vec::new();
    let mut lines = Vec::new();
    for k in 0..loads {
        let line = ALTERNATING_LINES[k % 2];
        lines.push(Some(line));
        insns.push(Instruction::new(OpcodeClass::Load).with_mem([TABLE + 64 * line as u64]).with_table(0));
        if fenced {
            lines.push(None);
            insns.push(Instruction::new(OpcodeClass::Fence));
        }
    }
    let geometry = CacheGeometry::default();
    let vm = slide_vm(insns, GuestTiming::default())?;
    let hpa = vm.peek_paddr(TABLE).ok_or(AttackError::Unmapped(TABLE))?;
    let mut m = Machine::new(vm, fresh_cache(geometry)?, ChaCha8Rng::seed_from_u64(seed));
    m.ooo = ooo;
    let mut alloc = PageAllocator::new(ATTACKER_HOST_BASE..ATTACKER_HOST_BASE + 0x10_0000);
    let region = MonitoredRegion::for_region(&geometry, hpa, &mut alloc)?;
    m.monitor = Some(PrimeProbe::new(vec![region], &geometry, p_noise)?);
    let knobs = StepperKnobs {
        do_cache_attack: true,
        ..StepperKnobs::reliable()
    };
    let mut r = AlternatingResult {
        loads: loads as u64,
        ..Default::default()
    };
    let mut guard = 0;
    while !m.vm.finished() && guard < 8 * lines.len() + 100 {
        guard += 1;
        let e = run_step(&mut m, &knobs)?;
        if e.step_size != 1 {
            continue;
        }
        let Some(line) = lines[e.instruction_indices.start] else {
            continue;
        };
        r.observed += 1;
        let trace = &e.cache_trace.as_ref().expect("cache attack on")[0];
        let other = ALTERNATING_LINES[usize::from(line == ALTERNATING_LINES[0])];
        if trace.hot[line as usize] && !trace.hot[other as usize] {
            r.correct += 1;
        }
    }
    r.accuracy = if r.loads == 0 { 0.0 } else { r.correct as f64 / r.loads as f64 };
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintRun {
    /// Faulting pages as offsets from the text base.
    pub pages: Vec<u64>,
    /// Positions in `pages` where the XTS fingerprint completed.
    pub matches: Vec<usize>,
}

/// Execute-tracks every text page while the victim decrypts `sectors`
/// one-block sectors.
pub fn capture_xts_fingerprint(sectors: usize, seed: u64) -> Result<FingerprintRun, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = XtsContext::new([1; 16], [2; 16], 512).map_err(crate::fixture::FixtureError::from)?;
    let scripts = (0..sectors as u64)
        .map(|s| ctx.xts_decrypt_sector(s, &[0u8; 512]).map(|r| r.1))
        .collect::<Result<Vec<_>, _>>()
        .map_err(crate::fixture::FixtureError::from)?;
    let layout = VictimLayout::boot(&mut rng);
    let compiled = compile_to_program(&scripts, &layout, CompileOptions::default())?;
    capture(compiled.program, &layout, &mut rng)
}

/// The same capture over unrelated kernel code.
pub fn capture_control(length: usize, seed: u64) -> Result<FingerprintRun, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = VictimLayout::boot(&mut rng);
    let program = control_workload(&layout, &mut rng, length)?;
    capture(program, &layout, &mut rng)
}

fn capture(program: crate::guest::GuestProgram, layout: &VictimLayout, rng: &mut ChaCha8Rng) -> Result<FingerprintRun, AttackError> {
    let geometry = CacheGeometry::default();
    let budget = program.len() + 1;
    let vm = boot_vm(program, layout, GuestTiming::default(), geometry.page_colors(), rng)?;
    let mut m = Machine::new(vm, fresh_cache(geometry)?, ChaCha8Rng::seed_from_u64(rng.next_u64()));
    let text: Vec<u64> = layout.text_pages().collect();
    let pages = run_fingerprint_capture(&mut m, &text, layout.text_base, budget)?;
    let matches = match_fingerprint(&pages, &xts_fingerprint());
    Ok(FingerprintRun { pages, matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::victim::XTS_FINGERPRINT;

    #[test]
    fn flush_row_single_steps_whole_slide() {
        let r = step_table(&StepperKnobs::reliable(), GuestTiming::default(), [8], 500, 1).unwrap();
        assert_eq!((r.rows[0].single, r.rows[0].multi), (500, 0));
    }

    #[test]
    fn zero_steps_leave_no_trace() {
        let r = zero_step_purity(200, 2).unwrap();
        assert_eq!(r.zero_steps, 200);
        assert_eq!(r.dirty_steps, 0);
    }

    #[test]
    fn fences_separate_the_lines() {
        let fenced = alternating_attack(true, OooConfig::default(), 0.0, 200, 3).unwrap();
        assert_eq!(fenced.correct, 200);
        let open = alternating_attack(false, OooConfig::default(), 0.0, 200, 3).unwrap();
        assert!(open.accuracy < 0.1, "{open:?}");
    }

    #[test]
    fn one_block_gives_the_fingerprint() {
        let run = capture_xts_fingerprint(1, 4).unwrap();
        assert_eq!(run.pages, XTS_FINGERPRINT.to_vec());
        assert_eq!(run.matches.len(), 1);
        assert!(capture_control(5000, 4).unwrap().matches.is_empty());
    }
}
