//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::HashMap;
use std::panic;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sevstep::attack::SimConfig;
use sevstep::cache::{CacheGeometry, CacheState, OooConfig};
use sevstep::channel::{ConfigChange, EventChannel, EventPayload};
use sevstep::classifier::Mlp;
use sevstep::crypto::aes::{aes128_expand_key, decrypt_block, encrypt_block, ttable_decrypt, ttable_encrypt, Block};
use sevstep::crypto::victim::XTS_FINGERPRINT;
use sevstep::crypto::xts::XtsContext;
use sevstep::experiments::{alternating_attack, capture_control, capture_xts_fingerprint, step_table, zero_step_purity};
use sevstep::fixture::make_fixture;
use sevstep::guest::{GuestTiming, OpcodeClass};
use sevstep::latency::{classify_instruction, default_div_profiles, div_operand_experiment, summarize, LatencyBench, LatencyModel, Verdict};
use sevstep::pipeline::{attack_fixture, train_classifiers, PipelineConfig};
use sevstep::stepper::{calibrate_timer, nop_slide, single_step_region, slide_vm, CalibrationOptions, EntryJitter, Machine, StepperKnobs};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn step_reliability() -> Result<String, String> {
    let timing = GuestTiming::default();
    let mut n = 0;
    let (timer, report) = calibrate_timer(
        || {
            n += 1;
            let vm = slide_vm(nop_slide(4000), timing).expect("slide");
            Machine::new(vm, CacheState::new(CacheGeometry::default()).unwrap(), ChaCha8Rng::seed_from_u64(n))
        },
        &StepperKnobs::reliable(),
        CalibrationOptions {
            start: None,
            step_budget: 20_000,
        },
    )
    .map_err(err)?;
    let row = report.row(timer).copied().unwrap_or_default();
    ensure(row.single == 4000 && row.multi == 0, || format!("flush-tlb timer {timer}: {row:?}"))?;

    let off = StepperKnobs {
        flush_tlb: false,
        reset_a_bit: false,
        ..StepperKnobs::default()
    };
    let table = step_table(&off, timing, 1..=24, 4000, 5).map_err(err)?;
    for r in &table.rows {
        ensure((r.single == 0 && r.multi == 0) || r.multi >= 1, || format!("knobs off, timer {}: {r:?}", r.timer))?;
    }
    Ok(format!("timer {timer}: 4000 single, 0 multi; knobs off never clean over timers 1..=24"))
}

fn zero_step_purity_check() -> Result<String, String> {
    let r = zero_step_purity(1000, 11).map_err(err)?;
    ensure(r.zero_steps == 1000 && r.dirty_steps == 0, || format!("{r:?}"))?;
    Ok(format!("{} zero-steps, {} victim fills, {} hot sets", r.zero_steps, r.victim_fills, r.hot_sets))
}

fn fenced_vs_unfenced() -> Result<String, String> {
    let sim = SimConfig::default();
    let ooo = OooConfig { window: 4, ..sim.ooo };
    let fenced = alternating_attack(true, ooo, sim.p_noise, 1000, 21).map_err(err)?;
    let open = alternating_attack(false, ooo, sim.p_noise, 1000, 21).map_err(err)?;
    ensure(fenced.accuracy >= 0.90 && open.accuracy <= 0.50, || format!("fenced {fenced:?}, unfenced {open:?}"))?;
    Ok(format!("fenced {:.3}, unfenced {:.3}", fenced.accuracy, open.accuracy))
}

fn classifier_accuracy() -> Result<String, String> {
    let cfg = PipelineConfig {
        seed: 4,
        ..PipelineConfig::default()
    };
    let (_, tables) = train_classifiers(&cfg).map_err(err)?;
    let mut parts = Vec::new();
    for t in &tables {
        ensure(t.accuracy >= 0.85, || format!("table {}: {:.3} ({} train, {} test)", t.table, t.accuracy, t.train, t.test))?;
        parts.push(format!("T{} {:.3} ({}/{})", t.table, t.accuracy, t.train, t.test));
    }
    Ok(parts.join(", "))
}

fn gradient_check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for net_no in 0..20 {
        let depth = rng.gen_range(2..=4);
        let sizes: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=7)).collect();
        let mut net = Mlp::new(&sizes, 0.0, &mut rng).map_err(err)?;
        for b in &mut net.biases {
            b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let rows = rng.gen_range(1..=6);
        let x = Array2::from_shape_fn((rows, sizes[0]), |_| rng.gen_range(-1.0..1.0));
        let classes = *sizes.last().unwrap();
        let labels: Vec<u8> = (0..rows).map(|_| rng.gen_range(0..classes) as u8).collect();
        let (_, g) = net.gradients(x.view(), &labels).map_err(err)?;
        params += net.parameter_count();
        let mut compare = |num: f64, ana: f64, what: String| -> Result<(), String> {
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure(rel <= 1e-4, || format!("net {net_no} {what}: numeric {num} analytic {ana}"))
        };
        for l in 0..net.weights.len() {
            for ((i, j), &ana) in g.weights[l].indexed_iter() {
                let (mut plus, mut minus) = (net.clone(), net.clone());
                plus.weights[l][[i, j]] += h;
                minus.weights[l][[i, j]] -= h;
                let num = (plus.loss(x.view(), &labels).unwrap() - minus.loss(x.view(), &labels).unwrap()) / (2.0 * h);
                compare(num, ana, format!("w{l}[{i},{j}]"))?;
            }
            for (i, &ana) in g.biases[l].indexed_iter() {
                let (mut plus, mut minus) = (net.clone(), net.clone());
                plus.biases[l][i] += h;
                minus.biases[l][i] -= h;
                let num = (plus.loss(x.view(), &labels).unwrap() - minus.loss(x.view(), &labels).unwrap()) / (2.0 * h);
                compare(num, ana, format!("b{l}[{i}]"))?;
            }
        }
    }
    Ok(format!("20 networks, {params} parameters, worst relative error {worst:.2e}"))
}

fn reference_xts_encrypt(data_key: &Block, tweak_key: &Block, sector: u64, pt: &[u8]) -> Vec<u8> {
    let data = Aes128::new(data_key.into());
    let tweak = Aes128::new(tweak_key.into());
    let mut t = [0u8; 16];
    t[..8].copy_from_slice(&sector.to_le_bytes());
    tweak.encrypt_block((&mut t).into());
    let mut out = Vec::new();
    for chunk in pt.chunks(16) {
        let mut b = [0u8; 16];
        for i in 0..16 {
            b[i] = chunk[i] ^ t[i];
        }
        data.encrypt_block((&mut b).into());
        for i in 0..16 {
            out.push(b[i] ^ t[i]);
        }
        let v = u128::from_le_bytes(t);
        let doubled = (v << 1) ^ if v >> 127 == 1 { 0x87 } else { 0 };
        t = doubled.to_le_bytes();
    }
    out
}

fn aes_xts_correctness() -> Result<String, String> {
    let key: Block = std::array::from_fn(|i| i as u8);
    let pt: Block = std::array::from_fn(|i| (i as u8) * 0x11);
    let fips = [0x69, 0xc4, 0xe0, 0xd8, 0x6a, 0x7b, 0x04, 0x30, 0xd8, 0xcd, 0xb7, 0x80, 0x70, 0xb4, 0xc5, 0x5a];
    let s = aes128_expand_key(&key);
    ensure(ttable_encrypt(&pt, &s).0 == fips, || "FIPS-197 example encrypt".into())?;
    ensure(ttable_decrypt(&fips, &s).0 == pt, || "FIPS-197 example decrypt".into())?;

    // IEEE 1619 vector 1: all-zero keys, sector 0, 32 zero bytes.
    let v1 = XtsContext::new([0; 16], [0; 16], 32).map_err(err)?;
    let ct = v1.encrypt_sector(0, &[0; 32]).map_err(err)?;
    let expect = "917cf69ebd68b2ec9b9fe9a3eadda692cd43d2f59598ed858c02c2652fbf922e";
    ensure(sevstep::crypto::aes::hex(&ct) == expect, || "IEEE 1619 vector 1".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let key: Block = rng.gen();
        let block: Block = rng.gen();
        let s = aes128_expand_key(&key);
        let cipher = Aes128::new((&key).into());
        let mut enc = block;
        cipher.encrypt_block((&mut enc).into());
        let mut dec = block;
        cipher.decrypt_block((&mut dec).into());
        ensure(encrypt_block(&block, &s) == enc && ttable_encrypt(&block, &s).0 == enc, || format!("encrypt vector {i}"))?;
        ensure(decrypt_block(&block, &s) == dec && ttable_decrypt(&block, &s).0 == dec, || format!("decrypt vector {i}"))?;
        ensure(decrypt_block(&enc, &s) == block, || format!("AES round trip {i}"))?;

        let tweak_key: Block = rng.gen();
        let sector: u64 = rng.gen();
        let blocks = rng.gen_range(1..=8);
        let pt: Vec<u8> = (0..16 * blocks).map(|_| rng.gen()).collect();
        let ctx = XtsContext::new(key, tweak_key, pt.len()).map_err(err)?;
        let ct = ctx.encrypt_sector(sector, &pt).map_err(err)?;
        ensure(ct == reference_xts_encrypt(&key, &tweak_key, sector, &pt), || format!("XTS vector {i}"))?;
        ensure(ctx.decrypt_sector(sector, &ct).map_err(err)? == pt, || format!("XTS round trip {i}"))?;
        ensure(ctx.xts_decrypt_sector(sector, &ct).map_err(err)?.0 == pt, || format!("traced XTS round trip {i}"))?;
    }
    Ok("FIPS-197, IEEE 1619 #1 and 1000 random AES/XTS vectors agree".into())
}

fn fingerprint() -> Result<String, String> {
    let one = capture_xts_fingerprint(1, 8).map_err(err)?;
    ensure(one.pages == XTS_FINGERPRINT.to_vec(), || format!("pages {:x?}", one.pages))?;
    ensure(one.matches.len() == 1, || format!("{} matches on one block", one.matches.len()))?;
    let five = capture_xts_fingerprint(5, 8).map_err(err)?;
    ensure(five.matches.len() == 5, || format!("{} matches on five blocks", five.matches.len()))?;
    for seed in 0..5 {
        let control = capture_control(5000, seed).map_err(err)?;
        ensure(control.matches.is_empty(), || format!("control seed {seed} matched"))?;
    }
    Ok(format!("{:x?}; 1 match per block; control silent", one.pages))
}

fn end_to_end() -> Result<String, String> {
    // Fails only if the pool already exists; the count is a ceiling either way.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(8).build_global();
    let fixture = make_fixture(7, 70, 34).map_err(err)?;
    let ctx = fixture.context().map_err(err)?;
    let cfg = PipelineConfig {
        seed: 7,
        ..PipelineConfig::default()
    };
    let report = attack_fixture(&fixture, &cfg).map_err(err)?;
    let keys = report.keys.map_err(err)?;
    ensure(keys.data_key == ctx.data_key && keys.tweak_key == ctx.tweak_key, || "recovered keys differ".into())?;
    Ok(format!(
        "both keys exact; recall {:.3}, {:.2} candidates; train {:.0?}, trace {:.0?}, search {:.1?}",
        report.candidate_recall, report.mean_candidates, report.train_time, report.trace_time, report.search_time
    ))
}

fn nemesis() -> Result<String, String> {
    let mut bench = LatencyBench::new(LatencyModel::default(), GuestTiming::default(), StepperKnobs::reliable(), 9);
    bench.calibrate().map_err(err)?;
    let reference = |b: &LatencyBench, class: OpcodeClass| -> Result<(String, _), String> {
        let run = b.run_slide(class, None, 1000, 5).map_err(err)?;
        Ok((class.name().to_string(), summarize(&run.samples).map_err(err)?))
    };
    let refs = vec![reference(&bench, OpcodeClass::Add)?, reference(&bench, OpcodeClass::Rdrand)?];
    let mut correct = 0;
    for t in 0..100u64 {
        let class = if t % 2 == 0 { OpcodeClass::Add } else { OpcodeClass::Rdrand };
        bench.seed = 1000 + t;
        let run = bench.run_slide(class, None, 50, 1).map_err(err)?;
        let values: Vec<u64> = run.samples.iter().map(|s| s.latency).collect();
        if let Verdict::Label { label, .. } = classify_instruction(&values, &refs, t).map_err(err)? {
            correct += usize::from(label == class.name());
        }
    }
    let accuracy = correct as f64 / 100.0;
    ensure(accuracy > 0.99, || format!("add/rdrand accuracy {accuracy}"))?;

    let mut exact = bench.clone();
    exact.knobs.entry_jitter = EntryJitter {
        stddev: 0.0,
        ..exact.knobs.entry_jitter
    };
    let div = div_operand_experiment(&exact, &default_div_profiles(), 200, 1).map_err(err)?;
    let medians: Vec<f64> = div.iter().map(|d| d.median).collect();
    ensure(medians[1] < medians[2] && medians[2] < medians[3], || format!("div medians {medians:?}"))?;
    let extra = medians[3] - medians[0];
    ensure(extra == 8.0, || format!("64-bit quotient adds {extra} cycles"))?;
    Ok(format!("add/rdrand {accuracy:.2}; div medians {medians:?}"))
}

/// One randomized schedule: the supervisor steps a short slide through the
/// channel while the controller checks ordering, blocking and the timing of
/// config changes, both sides yielding at random points.
fn channel_schedule(seed: u64) -> Result<usize, String> {
    const SINGLE: u64 = 8;
    const ZERO: u64 = 1;
    let channel = EventChannel::default();
    let boundaries = Arc::new(AtomicUsize::new(0));
    let supervisor = {
        let channel = channel.clone();
        let boundaries = boundaries.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        thread::spawn(move || {
            let vm = slide_vm(nop_slide(3), GuestTiming::default()).expect("slide");
            let mut m = Machine::new(vm, CacheState::new(CacheGeometry::default()).unwrap(), ChaCha8Rng::seed_from_u64(seed));
            let mut knobs = StepperKnobs::reliable();
            let r = single_step_region(&mut m, &mut knobs, &channel, |_| {
                for _ in 0..rng.gen_range(0..3) {
                    thread::yield_now();
                }
                boundaries.fetch_add(1, Ordering::SeqCst);
                false
            });
            channel.close();
            r
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expected_seq = 1;
    let mut timer = SINGLE;
    let mut zero_requests = 0;
    loop {
        let event = match channel.wait_event(Duration::from_secs(5)) {
            Ok(Some(e)) => e,
            Ok(None) => return Err(format!("schedule {seed}: supervisor stalled")),
            Err(_) => break,
        };
        ensure(event.sequence == expected_seq, || format!("schedule {seed}: got {} expected {expected_seq}", event.sequence))?;
        let EventPayload::Step(step) = &event.payload else {
            return Err(format!("schedule {seed}: unexpected payload"));
        };
        // The step ran under the config taken at its boundary.
        if timer == ZERO {
            ensure(step.step_size == 0, || format!("schedule {seed}: step {} under timer {ZERO}", step.step_size))?;
        }
        for _ in 0..rng.gen_range(0..4) {
            thread::yield_now();
        }
        let seen = boundaries.load(Ordering::SeqCst);
        ensure(seen == expected_seq as usize, || format!("schedule {seed}: supervisor ran ahead ({seen} boundaries at event {expected_seq})"))?;
        ensure(channel.poll_event().map(|e| e.sequence) == Some(expected_seq), || format!("schedule {seed}: event consumed"))?;
        for _ in 0..rng.gen_range(0..3) {
            let t = if zero_requests < 3 && rng.gen_bool(0.4) { ZERO } else { SINGLE };
            zero_requests += usize::from(t == ZERO);
            channel.submit_config(ConfigChange {
                timer_value: Some(t),
                ..Default::default()
            });
            timer = t;
        }
        ensure(boundaries.load(Ordering::SeqCst) == expected_seq as usize, || format!("schedule {seed}: supervisor moved before ack"))?;
        channel.ack_event(event.sequence).map_err(err)?;
        expected_seq += 1;
    }
    let sent = supervisor.join().map_err(|_| "supervisor panicked".to_string())?.map_err(err)?;
    ensure(sent as u64 == expected_seq - 1, || format!("schedule {seed}: sent {sent}, received {}", expected_seq - 1))?;
    Ok(sent)
}

fn event_channel() -> Result<String, String> {
    let mut events = 0;
    for seed in 0..10_000 {
        events += channel_schedule(seed)?;
    }
    Ok(format!("10000 schedules, {events} events delivered once and in order"))
}

fn cache_oracle() -> Result<String, String> {
    let g = CacheGeometry::default();
    let mut hits = 0u64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = CacheState::new(g).map_err(err)?;
        let mut sets: HashMap<u64, Vec<(u64, u32, bool)>> = HashMap::new();
        // About 12 lines compete for each 8-way set.
        let span = 64 * 1024 * 12;
        for i in 0..10_000 {
            let paddr = rng.gen_range(0..span);
            let asid = rng.gen_range(0..3u32);
            let c_bit = rng.gen_bool(0.5);
            let line = paddr >> 6;
            let lru = sets.entry(line & 1023).or_default();
            let key = (line, asid, c_bit);
            let expect = match lru.iter().position(|k| *k == key) {
                Some(p) => {
                    lru.remove(p);
                    true
                }
                None => {
                    if lru.len() == 8 {
                        lru.remove(0);
                    }
                    false
                }
            };
            lru.push(key);
            let (hit, cycles) = cache.access(paddr, asid, c_bit);
            ensure(hit == expect, || format!("seed {seed} access {i}: model {hit}, oracle {expect}"))?;
            ensure(cycles == if hit { g.hit_latency } else { g.miss_latency }, || format!("seed {seed} access {i}: {cycles} cycles"))?;
            hits += u64::from(hit);
        }
    }
    Ok(format!("100 seeds x 10000 accesses agree ({hits} hits)"))
}

const CRITERIA: [(u32, &str, u64, Check); 11] = [
    (1, "step reliability", 10, step_reliability),
    (2, "zero-step purity", 5, zero_step_purity_check),
    (3, "fenced vs unfenced cache attack", 30, fenced_vs_unfenced),
    (4, "classifier accuracy", 600, classifier_accuracy),
    (5, "gradient check", 60, gradient_check),
    (6, "AES/XTS correctness", 10, aes_xts_correctness),
    (7, "fingerprint", 5, fingerprint),
    (8, "end-to-end key recovery", 900, end_to_end),
    (9, "latency separation", 60, nemesis),
    (10, "event channel", 120, event_channel),
    (11, "cache model oracle", 60, cache_oracle),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let limit = Duration::from_secs(limit);
        let (ok, detail) = match result {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the time limit")),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!(
            "{} {id:>2} {name} ({:.2}s / {}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
