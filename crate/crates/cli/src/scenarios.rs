use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sevstep::cache::CacheState;
use sevstep::crypto::aes::hex;
use sevstep::experiments::{capture_control, capture_xts_fingerprint, step_table, KNOB_SETTINGS};
use sevstep::fixture::{make_fixture_sized, DiskFixture};
use sevstep::guest::OpcodeClass;
use sevstep::keyrec::write_predictions_csv;
use sevstep::latency::{classify_instruction, div_operand_experiment, samples_to_csv, summarize, DivProfile, LatencyBench, Summary, Verdict};
use sevstep::pipeline::{attack_fixture, train_classifiers};
use sevstep::stepper::{calibrate_timer, nop_slide, slide_vm, CalibrationOptions, Machine, StepperKnobs};

use crate::config::{ExperimentConfig, Scenario};

/// Outcome of a scenario: the summary printed on stdout, and whether the
/// scenario reached its goal.
pub struct Outcome {
    pub summary: Value,
    pub success: bool,
}

pub fn run_scenario(cfg: &ExperimentConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let outcome = match cfg.scenario {
        Scenario::Calibrate => calibrate(cfg)?,
        Scenario::StepBench => step_bench(cfg)?,
        Scenario::PfTrace => pf_trace(cfg)?,
        Scenario::AttackAes => attack_aes(cfg)?,
        Scenario::TrainClassifier => train_classifier(cfg)?,
        Scenario::Nemesis => nemesis(cfg)?,
    };
    write(&cfg.out, "summary.json", &(serde_json::to_string_pretty(&outcome.summary)? + "\n"))?;
    Ok(outcome)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn calibrate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut n = 0u64;
    let (timer, report) = calibrate_timer(
        || {
            n += 1;
            let vm = slide_vm(nop_slide(cfg.calibrate.slide), cfg.sim.timing).expect("nop slide");
            let cache = CacheState::new(cfg.sim.geometry).expect("validated geometry");
            Machine::new(vm, cache, ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(n)))
        },
        &cfg.sim.knobs,
        CalibrationOptions {
            start: None,
            step_budget: cfg.calibrate.step_budget,
        },
    )?;
    write(&cfg.out, "calibration.csv", &report.to_csv())?;
    let row = report.row(timer).copied().unwrap_or_default();
    Ok(Outcome {
        success: row.multi == 0 && row.single as usize == cfg.calibrate.slide,
        summary: json!({
            "scenario": "calibrate",
            "timer": timer,
            "single": row.single,
            "zero": row.zero,
            "multi": row.multi,
            "candidates": report.rows.len(),
        }),
    })
}

fn step_bench(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut csv = String::from("setting,timer,zero,single,multi,mean_multi\n");
    let mut settings = serde_json::Map::new();
    for s in KNOB_SETTINGS {
        let knobs = StepperKnobs {
            flush_tlb: s.flush_tlb,
            reset_a_bit: s.reset_a_bit,
            ..cfg.sim.knobs
        };
        let report = step_table(&knobs, cfg.sim.timing, 1..=cfg.step_bench.max_timer, cfg.step_bench.slide, cfg.seed)?;
        let mut clean = Vec::new();
        for r in &report.rows {
            csv.push_str(&format!("{},{},{},{},{},{:.2}\n", s.name, r.timer, r.zero, r.single, r.multi, r.mean_multi));
            if r.multi == 0 && r.single as usize == cfg.step_bench.slide {
                clean.push(r.timer);
            }
        }
        settings.insert(s.name.to_string(), json!({ "single_step_timers": clean }));
    }
    write(&cfg.out, "step_bench.csv", &csv)?;
    Ok(Outcome {
        success: true,
        summary: json!({ "scenario": "step-bench", "settings": settings }),
    })
}

fn pf_trace(cfg: &ExperimentConfig) -> Result<Outcome> {
    let run = capture_xts_fingerprint(cfg.pf_trace.sectors, cfg.seed)?;
    let control = capture_control(cfg.pf_trace.control_length, cfg.seed)?;
    let mut csv = String::from("index,page_offset\n");
    for (i, p) in run.pages.iter().enumerate() {
        csv.push_str(&format!("{i},{p:#x}\n"));
    }
    write(&cfg.out, "fingerprint.csv", &csv)?;
    Ok(Outcome {
        success: run.matches.len() == cfg.pf_trace.sectors && control.matches.is_empty(),
        summary: json!({
            "scenario": "pf-trace",
            "pages": run.pages.iter().map(|p| format!("{p:#x}")).collect::<Vec<_>>(),
            "matches": run.matches.len(),
            "control_faults": control.pages.len(),
            "control_matches": control.matches.len(),
        }),
    })
}

fn load_fixture(cfg: &ExperimentConfig) -> Result<DiskFixture> {
    let f = &cfg.fixture;
    if f.path.is_empty() {
        Ok(make_fixture_sized(cfg.seed, f.sectors, f.known, f.sector_size)?)
    } else {
        Ok(DiskFixture::load(Path::new(&f.path))?)
    }
}

fn attack_aes(cfg: &ExperimentConfig) -> Result<Outcome> {
    let fixture = load_fixture(cfg)?;
    write(&cfg.out, "fixture.json", &fixture.to_json())?;
    let ctx = fixture.context()?;
    let report = attack_fixture(&fixture, &cfg.pipeline())?;
    log::info!(
        "training {:.1?}, tracing {:.1?}, search {:.1?}",
        report.train_time,
        report.trace_time,
        report.search_time
    );
    let mut predictions = Vec::new();
    write_predictions_csv(&report.observations, &mut predictions)?;
    write(&cfg.out, "predictions.csv", std::str::from_utf8(&predictions)?)?;
    write(&cfg.out, "classifier.csv", &table_csv(&report.tables))?;
    let (keys, success) = match &report.keys {
        Ok(k) => {
            write(&cfg.out, "keys.json", &(serde_json::to_string_pretty(&k.to_json())? + "\n"))?;
            let ok = k.data_key == ctx.data_key && k.tweak_key == ctx.tweak_key;
            (json!({ "data_key": hex(&k.data_key), "tweak_key": hex(&k.tweak_key), "match": ok }), ok)
        }
        Err(e) => (json!({ "error": e.to_string() }), false),
    };
    Ok(Outcome {
        success,
        summary: json!({
            "scenario": "attack-aes",
            "sectors": fixture.sectors.len(),
            "known": fixture.known_count(),
            "fixture_keys": { "data_key": hex(&ctx.data_key), "tweak_key": hex(&ctx.tweak_key) },
            "recovered": keys,
            "steps": report.step_stats,
            "candidate_recall": report.candidate_recall,
            "mean_candidates": report.mean_candidates,
            "tables": report.tables,
        }),
    })
}

fn table_csv(tables: &[sevstep::classifier::TableReport]) -> String {
    let mut csv = String::from("table,train,test,outliers,accuracy\n");
    for t in tables {
        csv.push_str(&format!("{},{},{},{},{:.4}\n", t.table, t.train, t.test, t.outliers, t.accuracy));
    }
    csv
}

fn train_classifier(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (set, tables) = train_classifiers(&cfg.pipeline())?;
    for (row, model) in set.models.iter().enumerate() {
        if let Some(m) = model {
            let path = cfg.out.join(format!("model_row{row}.bin"));
            let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            m.save(&mut f)?;
        }
    }
    write(&cfg.out, "classifier.csv", &table_csv(&tables))?;
    Ok(Outcome {
        success: true,
        summary: json!({ "scenario": "train-classifier", "tables": tables }),
    })
}

fn nemesis(cfg: &ExperimentConfig) -> Result<Outcome> {
    let n = &cfg.nemesis;
    let mut bench = LatencyBench::new(n.model.clone(), cfg.sim.timing, cfg.sim.knobs, cfg.seed);
    let timer = bench.calibrate()?;
    let mut csv = String::new();
    let mut summaries: Vec<(String, Summary)> = Vec::new();
    for &class in n.model.classes.keys() {
        let run = bench.run_slide(class, None, n.slide, n.reps)?;
        let body = samples_to_csv(&run.samples);
        if csv.is_empty() {
            csv.push_str(&body);
        } else {
            csv.push_str(body.split_once('\n').map_or("", |b| b.1));
        }
        match summarize(&run.samples) {
            Ok(s) => summaries.push((class.to_string(), s)),
            Err(_) => log::warn!("{class}: no single-step samples"),
        }
    }
    write(&cfg.out, "latency_samples.csv", &csv)?;

    let profiles: Vec<DivProfile> = n
        .div_quotient_bits
        .iter()
        .enumerate()
        .map(|(i, &b)| DivProfile::with_quotient_bits(&format!("div64-{i}"), b))
        .collect();
    let div = div_operand_experiment(&bench, &profiles, n.slide, n.reps.min(10))?;
    let mut div_csv = String::from("profile,dividend,median,samples\n");
    for d in &div {
        div_csv.push_str(&format!("{},{:#x},{},{}\n", d.profile.name, d.profile.dividend, d.median, d.samples));
    }
    write(&cfg.out, "div.csv", &div_csv)?;

    let reference = |name: &str| summaries.iter().find(|s| s.0 == name).cloned();
    let refs: Vec<(String, Summary)> = ["add", "rdrand"].iter().filter_map(|c| reference(c)).collect();
    if refs.len() != 2 {
        return Err(anyhow!("nemesis needs add and rdrand in the latency model"));
    }
    let mut correct = 0;
    for t in 0..n.trials {
        let class = if t % 2 == 0 { OpcodeClass::Add } else { OpcodeClass::Rdrand };
        bench.seed = cfg.seed.wrapping_add(1 + t as u64);
        let run = bench.run_slide(class, None, n.trial_slide, 1)?;
        let values: Vec<u64> = run.samples.iter().map(|s| s.latency).collect();
        if values.is_empty() {
            continue;
        }
        if let Verdict::Label { label, .. } = classify_instruction(&values, &refs, t as u64)? {
            if label == class.name() {
                correct += 1;
            }
        }
    }
    let accuracy = if n.trials == 0 { 0.0 } else { correct as f64 / n.trials as f64 };
    let medians: Vec<f64> = div.iter().map(|d| d.median).collect();
    Ok(Outcome {
        success: accuracy > 0.99 && medians.windows(2).skip(1).all(|w| w[0] < w[1]),
        summary: json!({
            "scenario": "nemesis",
            "timer": timer,
            "classes": summaries.iter().map(|(c, s)| json!({
                "class": c, "count": s.count, "median": s.median, "q1": s.q1, "q3": s.q3,
            })).collect::<Vec<_>>(),
            "div_medians": div.iter().map(|d| json!({ "profile": d.profile.name, "median": d.median })).collect::<Vec<_>>(),
            "add_rdrand_accuracy": accuracy,
        }),
    })
}
