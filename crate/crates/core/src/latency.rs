//! Per-step latency measurements over instruction slides, their summary
//! statistics and nearest-median instruction classification.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Distribution as _, OrderStatistics};
use thiserror::Error;

use crate::cache::{CacheGeometry, CacheState};
use crate::guest::{Cycles, GuestError, GuestTiming, Instruction, OpcodeClass, DIV_DIVISOR};
use crate::stepper::{calibrate_timer, nop_slide, run_step, slide_vm, CalibrationOptions, Machine, StepError, StepperKnobs};

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("timer not calibrated")]
    Uncalibrated,
    #[error("no samples")]
    Empty,
    #[error("no reference summaries")]
    NoReferences,
    #[error("class {0} has no latency model")]
    UnknownClass(OpcodeClass),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Guest(#[from] GuestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassLatency {
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub classes: BTreeMap<OpcodeClass, ClassLatency>,
    /// `div` pays one cycle per started 9 bits of quotient.
    pub div_rule: bool,
}

impl Default for LatencyModel {
    fn default() -> Self {
        let fixed = |mean: f64| ClassLatency { mean, stddev: 0.0 };
        let classes = BTreeMap::from([
            (OpcodeClass::Nop, fixed(1.0)),
            (OpcodeClass::Add, fixed(1.0)),
            (OpcodeClass::Mul, fixed(3.0)),
            (OpcodeClass::Div, fixed(8.0)),
            (OpcodeClass::Lar, ClassLatency { mean: 60.0, stddev: 2.0 }),
            (OpcodeClass::Rdrand, ClassLatency { mean: 1000.0, stddev: 20.0 }),
        ]);
        LatencyModel { classes, div_rule: true }
    }
}

impl LatencyModel {
    fn sample(&self, class: OpcodeClass, rng: &mut impl Rng) -> Result<Cycles, LatencyError> {
        let c = self.classes.get(&class).ok_or(LatencyError::UnknownClass(class))?;
        let v = if c.stddev > 0.0 {
            Normal::new(c.mean, c.stddev).map_err(|_| LatencyError::UnknownClass(class))?.sample(rng)
        } else {
            c.mean
        };
        Ok(v.round().max(1.0) as Cycles)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub class: OpcodeClass,
    pub operand: Option<u128>,
    pub latency: Cycles,
    pub step_size: u64,
}

/// Samples of one slide run; only single steps are kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlideRun {
    pub samples: Vec<LatencySample>,
    pub zero_steps: u64,
    pub multi_steps: u64,
}

pub fn samples_to_csv(samples: &[LatencySample]) -> String {
    let mut out = String::from("class,operand,latency,step_size\n");
    for s in samples {
        let operand = s.operand.map(|o| format!("{o:#x}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", s.class, operand, s.latency, s.step_size));
    }
    out
}

#[derive(Debug, Clone)]
pub struct LatencyBench {
    pub model: LatencyModel,
    pub timing: GuestTiming,
    pub knobs: StepperKnobs,
    pub calibrated: bool,
    pub seed: u64,
}

impl LatencyBench {
    pub fn new(model: LatencyModel, timing: GuestTiming, knobs: StepperKnobs, seed: u64) -> Self {
        LatencyBench {
            model,
            timing,
            knobs,
            calibrated: false,
            seed,
        }
    }

    /// Calibrates the timer on a nop slide and keeps the result.
    pub fn calibrate(&mut self) -> Result<u64, LatencyError> {
        let timing = self.timing;
        let mut n = 0u64;
        let seed = self.seed;
        let (timer, _) = calibrate_timer(
            || {
                n += 1;
                let vm = slide_vm(nop_slide(4000), timing).expect("nop slide");
                Machine::new(vm, CacheState::new(CacheGeometry::default()).expect("default geometry"), ChaCha8Rng::seed_from_u64(seed ^ n))
            },
            &self.knobs,
            CalibrationOptions::default(),
        )?;
        self.knobs.timer_value = timer;
        self.calibrated = true;
        Ok(timer)
    }

    /// Steps `reps` fresh slides of `n` instructions and records the
    /// latency of every single step.
    pub fn run_slide(&self, class: OpcodeClass, operand: Option<u128>, n: usize, reps: usize) -> Result<SlideRun, LatencyError> {
        if !self.calibrated {
            return Err(LatencyError::Uncalibrated);
        }
        let timing = GuestTiming {
            div_quotient_rule: self.model.div_rule,
            ..self.timing
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (class as u64) << 32 ^ operand.unwrap_or(0) as u64);
        let mut run = SlideRun::default();
        for _ in 0..reps {
            let insns = (0..n)
                .map(|_| {
                    let mut i = Instruction::new(class).with_latency(self.model.sample(class, &mut rng)?);
                    i.operand_meta = operand;
                    Ok(i)
                })
                .collect::<Result<Vec<_>, LatencyError>>()?;
            let vm = slide_vm(insns, timing)?;
            let mut m = Machine::new(vm, CacheState::new(CacheGeometry::default()).expect("default geometry"), ChaCha8Rng::seed_from_u64(rng.gen()));
            // A slide that never advances would loop forever.
            let mut idle = 0;
            while !m.vm.finished() && idle < 4 * n + 16 {
                let e = run_step(&mut m, &self.knobs)?;
                match e.step_size {
                    0 => {
                        run.zero_steps += 1;
                        idle += 1;
                    }
                    1 => run.samples.push(LatencySample {
                        class,
                        operand,
                        latency: e.latency,
                        step_size: 1,
                    }),
                    _ => run.multi_steps += 1,
                }
            }
        }
        if run.samples.is_empty() {
            log::warn!("{class} slide produced no single steps ({} zero, {} multi)", run.zero_steps, run.multi_steps);
        }
        Ok(run)
    }

    /// Median zero-step latency plus the code-page walk every flushed entry
    /// pays: the part of a single-step latency that is not the instruction.
    pub fn estimate_overhead(&self, samples: usize) -> Result<f64, LatencyError> {
        let knobs = StepperKnobs {
            timer_value: 1,
            ..self.knobs
        };
        let vm = slide_vm(nop_slide(1), self.timing)?;
        let mut m = Machine::new(vm, CacheState::new(CacheGeometry::default()).expect("default geometry"), ChaCha8Rng::seed_from_u64(self.seed ^ 0x0e));
        let mut zero = Vec::with_capacity(samples);
        while zero.len() < samples {
            let e = run_step(&mut m, &knobs)?;
            if e.step_size == 0 {
                zero.push(e.latency as f64);
            }
        }
        let walk = if self.knobs.flush_tlb { self.timing.page_walk } else { 0 };
        Ok(Data::new(zero).median() + walk as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub start: Cycles,
    pub width: Cycles,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[Cycles], width: Cycles) -> Self {
        let width = width.max(1);
        let lo = values.iter().copied().min().unwrap_or(0);
        let hi = values.iter().copied().max().unwrap_or(0);
        let start = lo - lo % width;
        let mut counts = vec![0; ((hi - start) / width + 1) as usize];
        for &v in values {
            counts[((v - start) / width) as usize] += 1;
        }
        Histogram { start, width, counts }
    }

    /// Peaks holding at least 5% of the largest bin, separated by a valley
    /// below half the smaller peak.
    pub fn modes(&self) -> usize {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let floor = (max as f64 * 0.05).max(1.0);
        let mut modes = 0;
        let mut peak = 0.0f64;
        let mut valley = f64::INFINITY;
        let mut rising = true;
        for &c in &self.counts {
            let c = c as f64;
            if rising {
                if c >= peak {
                    peak = c;
                } else if peak >= floor {
                    modes += 1;
                    rising = false;
                    valley = c;
                }
            } else if c < valley {
                valley = c;
            } else if c >= floor && valley < 0.5 * c.min(peak) {
                rising = true;
                peak = c;
            }
        }
        if rising && peak >= floor {
            modes += 1;
        }
        modes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub histogram: Histogram,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

pub fn summarize(samples: &[LatencySample]) -> Result<Summary, LatencyError> {
    summarize_values(&samples.iter().map(|s| s.latency).collect::<Vec<_>>())
}

pub fn summarize_values(values: &[Cycles]) -> Result<Summary, LatencyError> {
    if values.is_empty() {
        return Err(LatencyError::Empty);
    }
    let mut data = Data::new(values.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let lo = values.iter().min().copied().unwrap_or(0);
    let hi = values.iter().max().copied().unwrap_or(0);
    Ok(Summary {
        count: values.len(),
        mean: data.mean().unwrap_or(f64::NAN),
        stddev: data.std_dev().unwrap_or(0.0),
        median: data.median(),
        q1: data.lower_quartile(),
        q3: data.upper_quartile(),
        histogram: Histogram::new(values, ((hi - lo) / 50).max(1)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Label { label: String, confidence: f64 },
    Tie { labels: Vec<String> },
}

/// Nearest-median label. The confidence is one minus the sign-flip
/// permutation p-value of the samples sitting on the chosen side of the
/// midpoint to the runner-up.
pub fn classify_instruction(samples: &[Cycles], references: &[(String, Summary)], seed: u64) -> Result<Verdict, LatencyError> {
    if samples.is_empty() {
        return Err(LatencyError::Empty);
    }
    if references.is_empty() {
        return Err(LatencyError::NoReferences);
    }
    let median = Data::new(samples.iter().map(|&v| v as f64).collect::<Vec<_>>()).median();
    let mut ranked: Vec<(f64, &(String, Summary))> = references.iter().map(|r| ((median - r.1.median).abs(), r)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let best = ranked[0];
    let Some(second) = ranked.get(1) else {
        return Ok(Verdict::Label {
            label: best.1 .0.clone(),
            confidence: 1.0,
        });
    };
    if second.0 == best.0 {
        let labels = ranked.iter().take_while(|r| r.0 == best.0).map(|r| r.1 .0.clone()).collect();
        return Ok(Verdict::Tie { labels });
    }
    let mid = (best.1 .1.median + second.1 .1.median) / 2.0;
    let toward = (best.1 .1.median - mid).signum();
    let d: Vec<f64> = samples.iter().map(|&v| (v as f64 - mid) * toward).collect();
    Ok(Verdict::Label {
        label: best.1 .0.clone(),
        confidence: 1.0 - sign_flip_p_value(&d, seed),
    })
}

/// One-sided p-value of `mean(d) > 0` under random sign flips; exact for
/// up to 12 values, 9999 draws beyond that.
pub fn sign_flip_p_value(d: &[f64], seed: u64) -> f64 {
    let observed: f64 = d.iter().sum();
    if d.len() <= 12 {
        let total = 1u32 << d.len();
        let hits = (0..total)
            .filter(|mask| {
                let s: f64 = d.iter().enumerate().map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x }).sum();
                s >= observed
            })
            .count();
        return hits as f64 / total as f64;
    }
    let draws = 9999;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..draws)
        .filter(|_| {
            let s: f64 = d.iter().map(|&x| if rng.gen() { -x } else { x }).sum();
            s >= observed
        })
        .count();
    (hits + 1) as f64 / (draws + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivProfile {
    pub name: String,
    pub dividend: u128,
}

impl DivProfile {
    /// A dividend whose quotient by the fixed divisor has `bits` significant bits.
    pub fn with_quotient_bits(name: &str, bits: u32) -> Self {
        let quotient: u128 = if bits == 0 { 0 } else { (1u128 << (bits - 1)) | 1 };
        DivProfile {
            name: name.to_string(),
            dividend: quotient * DIV_DIVISOR,
        }
    }
}

/// Zero quotient, then 18, 45 and 64 quotient bits.
pub fn default_div_profiles() -> Vec<DivProfile> {
    vec![
        DivProfile::with_quotient_bits("div64-0", 0),
        DivProfile::with_quotient_bits("div64-1", 18),
        DivProfile::with_quotient_bits("div64-2", 45),
        DivProfile::with_quotient_bits("div64-3", 64),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivResult {
    pub profile: DivProfile,
    pub median: f64,
    pub samples: usize,
}

pub fn div_operand_experiment(bench: &LatencyBench, profiles: &[DivProfile], n: usize, reps: usize) -> Result<Vec<DivResult>, LatencyError> {
    profiles
        .iter()
        .map(|p| {
            let run = bench.run_slide(OpcodeClass::Div, Some(p.dividend), n, reps)?;
            Ok(DivResult {
                profile: p.clone(),
                median: summarize(&run.samples)?.median,
                samples: run.samples.len(),
            })
        })
        .collect()
}
