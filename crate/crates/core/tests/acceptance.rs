//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed.
//! Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use qlink_core::bell::{
    bell_s, chsh_correlations, correlation_e, qber_from_s, visibility_from_s, BellReport,
    CoincidenceMatrix, CorrelationResult, CHSH_ORDER, S_QM,
};
use qlink_core::sim::{
    generate_streams, Basis, MeasurementSettings, PolarizationModel, SimConfig, SimOutput,
};
use qlink_core::sync::io::write_coincidences;
use qlink_core::sync::online::OnlineCorrelator;
use qlink_core::sync::{
    acquire_lock, cross_correlate, extract_coincidences, track, CoincidenceEvent, CorrelatorConfig,
    LockState,
};
use qlink_core::timetag::{Channel, TimeTag, MAX_TICKS};
use qlink_core::transport::{send_stream, Receiver, SenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const TABLE_1: [[u64; 4]; 4] = [
    [1469, 5763, 6500, 1067],
    [4015, 1305, 1483, 2959],
    [2171, 9103, 2633, 6357],
    [1701, 1701, 6889, 1090],
];
const TABLE_2: [f64; 4] = [-0.558, 0.575, -0.578, -0.561];

/// Result of one criterion: whether it held, plus a one-line summary.
type Outcome = (bool, String);

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Pipeline {
    state: LockState,
    events: Vec<CoincidenceEvent>,
}

fn pipeline(out: &SimOutput, cfg: &CorrelatorConfig) -> Option<Pipeline> {
    let (a, b) = (out.alice.tags(), out.bob.tags());
    let state = track(acquire_lock(a, b, cfg).ok()?, a, b, cfg);
    let events = extract_coincidences(a, b, &state, cfg);
    Some(Pipeline { state, events })
}

fn report(p: &Pipeline) -> BellReport {
    let mut m = CoincidenceMatrix::accumulate(&p.events, MeasurementSettings::default());
    m.accumulation_span = p.state.locked_seconds_total;
    BellReport::from_matrix(m).expect("every basis pair has coincidences")
}

fn criterion_1() -> Outcome {
    let m = CoincidenceMatrix::from_counts(TABLE_1, MeasurementSettings::default());
    let c = chsh_correlations(&m).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, expected) in [(0, -0.558), (1, 0.575), (3, -0.561)] {
        let hit = (c[i].e - expected).abs() <= 0.001;
        ok &= hit;
        notes.push(format!(
            "E({},{})={:+.4}",
            c[i].angle_a, c[i].angle_b, c[i].e
        ));
    }
    let printed = TABLE_2.map(|e| CorrelationResult {
        e,
        sigma: 0.0,
        angle_a: 0.0,
        angle_b: 0.0,
    });
    let (s, _) = bell_s(&printed);
    ok &= (s - 2.272).abs() <= 0.001;
    let q = qber_from_s(2.27);
    ok &= (q - 0.0987).abs() <= 0.0005;
    let v = visibility_from_s(2.27);
    ok &= (v - 0.803).abs() <= 0.002;
    // documented inconsistency: the printed counts give −0.472, not −0.578
    let xfail = c[2].e;
    let inconsistency_reproduced = (xfail + 0.472).abs() <= 0.001 && (xfail + 0.578).abs() > 0.001;
    ok &= inconsistency_reproduced;
    notes.push(format!("S(Table 2)={s:.4} QBER={q:.4} V={v:.4}"));
    notes.push(format!(
        "E(45,22.5)={xfail:+.4} vs printed -0.578: expected failure {}",
        if inconsistency_reproduced {
            "reproduced"
        } else {
            "NOT reproduced"
        }
    ));
    (ok, notes.join(", "))
}

fn criterion_2() -> Outcome {
    let sim = SimConfig::default();
    let cfg = CorrelatorConfig::default();
    let results: Vec<_> = [1u64, 2, 3]
        .par_iter()
        .map(|&seed| {
            let out = generate_streams(715.0, &sim, seed).unwrap();
            let p = pipeline(&out, &cfg).expect("nominal profile locks");
            let r = report(&p);
            (
                seed,
                r.coincidence_total,
                r.s,
                r.s_sigma,
                p.state.locked_seconds_total,
            )
        })
        .collect();
    let tol = 4.0 * 60_060f64.sqrt();
    let mut ok = true;
    let mut notes = Vec::new();
    for (seed, n, s, sigma, locked) in results {
        let hit = (n as f64 - 60_060.0).abs() <= tol && (s - 2.27).abs() <= 0.05;
        ok &= hit;
        notes.push(format!(
            "seed {seed}: N={n} locked={locked:.1}s S={s:.3}±{sigma:.3}"
        ));
    }
    (
        ok,
        format!(
            "{} (N window 60060±{tol:.0}, S window 2.27±0.05)",
            notes.join("; ")
        ),
    )
}

fn ideal_source() -> SimConfig {
    let mut sim = SimConfig {
        polarization: PolarizationModel::ideal(),
        ..SimConfig::default()
    };
    sim.link.dark_rate_alice = [0.0; 4];
    sim.link.dark_rate_bob = [0.0; 4];
    sim.link.background_rate_bob = 0.0;
    sim.link.eta_alice = 0.2;
    sim.link.eta_bob = 0.2;
    sim
}

fn criterion_3() -> Outcome {
    let sim = ideal_source();
    let cfg = CorrelatorConfig::default();
    let runs: Vec<_> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let out = generate_streams(30.0, &sim, 100 + seed).unwrap();
            let p = pipeline(&out, &cfg).expect("ideal source locks");
            let r = report(&p);
            (r.coincidence_total, r.s, r.s_sigma)
        })
        .collect();
    let (n0, s0, sig0) = runs[0];
    let mut ok = n0 >= 100_000 && (s0 - S_QM).abs() <= 4.0 * sig0;
    let violations = runs
        .iter()
        .filter(|(_, s, sig)| *s > S_QM + 4.0 * sig)
        .count();
    ok &= violations == 0;
    let max_s = runs.iter().map(|r| r.1).fold(0.0, f64::max);
    (ok, format!("N={n0} S={s0:.4}±{sig0:.4} (2√2={S_QM:.4}); 20 seeds: max S={max_s:.4}, {violations} above 2√2+4σ"))
}

fn criterion_4() -> Outcome {
    let cfg = CorrelatorConfig::default();
    let runs: Vec<_> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC4 + seed);
            let mut sim = SimConfig::default();
            sim.bob_clock.start_offset =
                sim.alice_clock.start_offset + rng.random_range(-10e-3..10e-3);
            sim.bob_clock.drift_fraction = 5e-11;
            sim.bob_clock.gps_jitter_sigma = 50e-9;
            sim.alice_clock.gps_jitter_sigma = 50e-9;
            let out = generate_streams(60.0, &sim, seed).unwrap();
            let (a, b) = (out.alice.tags(), out.bob.tags());
            let Ok(state) = acquire_lock(a, b, &cfg) else {
                return None;
            };
            let est = state.current.unwrap();
            Some((est.offset - out.truth.offset_at(est.valid_from)).abs())
        })
        .collect();
    let locked: Vec<f64> = runs.iter().flatten().copied().collect();
    let worst_acq = locked.iter().copied().fold(0.0, f64::max);
    let mut ok = locked.len() >= 49 && worst_acq < 3.5e-9;

    let out = generate_streams(100.0, &SimConfig::default(), 77).unwrap();
    let state = pipeline(&out, &cfg).unwrap().state;
    let worst_pred = state
        .blocks
        .iter()
        .filter_map(|b| {
            b.predicted_offset
                .map(|p| (p - out.truth.offset_at(b.t_start())).abs())
        })
        .fold(0.0, f64::max);
    ok &= worst_pred < 1e-9 && state.blocks.iter().all(|b| b.is_locked());
    (
        ok,
        format!(
            "locked {}/50, worst acquisition error {:.2} ns; 100 s tracking worst prediction error {:.3} ns",
            locked.len(),
            worst_acq * 1e9,
            worst_pred * 1e9
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut sim = SimConfig::default();
    sim.link.pair_rate = 0.0;
    let cfg = CorrelatorConfig::default();
    let locks = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let out = generate_streams(10.0, &sim, 500 + seed).unwrap();
            acquire_lock(out.alice.tags(), out.bob.tags(), &cfg).is_ok()
        })
        .count();
    (
        locks <= 1,
        format!("{locks}/100 background-only seeds declared lock (k=5, 10 s each)"),
    )
}

fn brute_force(a: &[TimeTag], b: &[TimeTag], center: i64, half: i64, bin: i64) -> Vec<u32> {
    let n = (2 * half + bin - 1) / bin;
    let mut h = vec![0u32; n as usize];
    for x in a.iter().filter(|t| !t.is_marker()) {
        for y in b.iter().filter(|t| !t.is_marker()) {
            let d = y.ticks() as i64 - x.ticks() as i64 - center + half;
            if d >= 0 && d < n * bin {
                h[(d / bin) as usize] += 1;
            }
        }
    }
    h
}

fn random_tags(rng: &mut ChaCha8Rng, n: usize, span: u64) -> Vec<TimeTag> {
    let mut v: Vec<TimeTag> = (0..n)
        .map(|_| {
            let ch = if rng.random_bool(0.02) {
                Channel::GpsMarker
            } else {
                Channel::DETECTORS[rng.random_range(0..4)]
            };
            TimeTag::new(rng.random_range(0..span), ch).unwrap()
        })
        .collect();
    v.sort_by_key(|t| t.ticks());
    v
}

fn criterion_6() -> Outcome {
    let tick = 125e-12;
    let mismatches = (0..200u64)
        .into_par_iter()
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let span = rng.random_range(10_000..2_000_000);
            let n_a = rng.random_range(1..=2000);
            let a = random_tags(&mut rng, n_a, span);
            let n_b = rng.random_range(1..=2000);
            let b = random_tags(&mut rng, n_b, span);
            let center: i64 = rng.random_range(-5000..5000);
            let bin: i64 = rng.random_range(1..200);
            let half: i64 = rng.random_range(1..40) * bin + rng.random_range(0..bin);
            let oracle = brute_force(&a, &b, center, half, bin);
            match cross_correlate(
                &a,
                &b,
                center as f64 * tick,
                half as f64 * tick,
                bin as f64 * tick,
            ) {
                Ok(c) => c.counts != oracle,
                // only legitimate when one side has no detector tags
                Err(_) => a.iter().any(|t| !t.is_marker()) && b.iter().any(|t| !t.is_marker()),
            }
        })
        .count();

    let mut e_mismatches = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let n = rng.random_range(0..500);
        let events: Vec<CoincidenceEvent> = (0..n)
            .map(|i| CoincidenceEvent {
                alice: TimeTag::new(i, Channel::DETECTORS[rng.random_range(0..4)]).unwrap(),
                bob: TimeTag::new(i, Channel::DETECTORS[rng.random_range(0..4)]).unwrap(),
                residual: 0.0,
            })
            .collect();
        let m = CoincidenceMatrix::accumulate(&events, MeasurementSettings::default());
        for (ba, bb) in CHSH_ORDER {
            let (mut agree, mut disagree) = (0i64, 0i64);
            for e in &events {
                if Basis::of_channel(e.alice.channel()) == Some(ba)
                    && Basis::of_channel(e.bob.channel()) == Some(bb)
                {
                    let plus_a = e.alice.channel() == ba.channels().0;
                    let plus_b = e.bob.channel() == bb.channels().0;
                    if plus_a == plus_b {
                        agree += 1;
                    } else {
                        disagree += 1;
                    }
                }
            }
            let total = agree + disagree;
            let same = match correlation_e(&m, ba, bb) {
                Ok(c) => {
                    total > 0 && (c.e - (agree - disagree) as f64 / total as f64).abs() < 1e-12
                }
                Err(_) => total == 0,
            };
            if !same {
                e_mismatches += 1;
            }
        }
    }
    (
        mismatches == 0 && e_mismatches == 0,
        format!(
            "{mismatches}/200 histograms differ from the all-pairs oracle; {e_mismatches}/800 correlations differ from the per-event tally"
        ),
    )
}

fn criterion_7() -> Outcome {
    let out = generate_streams(100.0, &SimConfig::default(), 31).unwrap();
    let cfg = CorrelatorConfig::default();
    let (a, b) = (out.alice.tags(), out.bob.tags());
    let span = out.truth.duration;
    let r_a = out.alice.detector_count() as f64 / span;
    let r_b = out.bob.detector_count() as f64 / span;
    let predicted = r_a * r_b * 2.0 * cfg.coincidence_window;
    // windows displaced from the true peak by 1-50 µs only see accidentals
    let shifts: Vec<f64> = (1..=50).map(|i| i as f64 * 1e-6).collect();
    let counts: usize = shifts
        .par_iter()
        .map(|&shift| {
            let state = LockState::fixed(
                0,
                MAX_TICKS,
                out.truth.offset_at(0.0) + shift,
                out.truth.relative_drift(),
            );
            extract_coincidences(a, b, &state, &cfg).len()
        })
        .sum();
    let measured = counts as f64 / (span * shifts.len() as f64);
    let ratio = measured / predicted;
    (
        (ratio - 1.0).abs() <= 0.10,
        format!(
            "r_A={r_a:.0}/s r_B={r_b:.0}/s: measured {measured:.3}/s vs r_A·r_B·2τ={predicted:.3}/s (ratio {ratio:.3}, {counts} accidentals)"
        ),
    )
}

fn criterion_8() -> Outcome {
    let out = generate_streams(20.0, &SimConfig::default(), 44).unwrap();
    let cfg = CorrelatorConfig::default();
    let bob = out.bob.tags().to_vec();

    let rx = Receiver::bind("127.0.0.1:0").unwrap();
    let addr = rx.local_addr().unwrap();
    let (handle, blocks) = rx.spawn();
    let sender_cfg = SenderConfig {
        block_tags: 4096,
        rate_limit: Some(85_000.0),
        disconnect_after: Some(7),
        ..SenderConfig::default()
    };
    let to_send = bob.clone();
    let sender = thread::spawn(move || send_stream(addr, &to_send, &sender_cfg));

    let (done_tx, done_rx) = mpsc::channel();
    let alice = out.alice.tags().to_vec();
    let correlator = thread::spawn(move || {
        let mut online = OnlineCorrelator::new(alice, cfg).unwrap();
        let mut received = Vec::new();
        for block in blocks {
            online.push_bob(&block.tags).unwrap();
            received.extend_from_slice(&block.tags);
            online.poll();
        }
        done_tx.send(received).unwrap();
        online.finish()
    });
    let stats = sender.join().unwrap().unwrap();
    handle.join().unwrap().unwrap();
    let (online_state, online_events) = correlator.join().unwrap();
    let received = done_rx.recv().unwrap();

    let offline = pipeline(&out, &CorrelatorConfig::default()).unwrap();
    let mut offline_log = Vec::new();
    write_coincidences(&mut offline_log, &offline.events).unwrap();
    let mut online_log = Vec::new();
    write_coincidences(&mut online_log, &online_events).unwrap();

    let bit_exact = received == bob;
    let logs_equal = offline_log == online_log && online_state == offline.state;
    let ok = bit_exact && logs_equal && stats.reconnects == 1 && stats.tags_per_second >= 8500.0;
    (
        ok,
        format!(
            "{} tags at {:.0} tags/s with {} reconnect: stream {}; coincidence logs ({} events, {} bytes) {}",
            bob.len(),
            stats.tags_per_second,
            stats.reconnects,
            if bit_exact { "bit-identical" } else { "DIFFERS" },
            offline.events.len(),
            offline_log.len(),
            if logs_equal { "byte-identical" } else { "DIFFER" }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "table-driven analysis", criterion_1),
        (2, "end-to-end statistical reproduction", criterion_2),
        (3, "ideal source and Tsirelson bound", criterion_3),
        (4, "offset and drift recovery", criterion_4),
        (5, "false-lock rate", criterion_5),
        (6, "oracle equivalence", criterion_6),
        (7, "accidental-rate calibration", criterion_7),
        (8, "transport integrity and path equivalence", criterion_8),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n} [{}] {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
