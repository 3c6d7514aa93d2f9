use proptest::prelude::*;
use qlink_core::sim::{generate_streams, SimConfig, SimOutput};
use qlink_core::sync::online::OnlineCorrelator;
use qlink_core::sync::{
    acquire_lock, coarse_align_markers, cross_correlate, extract_coincidences, track,
    CorrelatorConfig, LockState, SyncError,
};
use qlink_core::timetag::{Channel, TimeTag, MAX_TICKS, TICKS_PER_SECOND};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(out: &SimOutput, cfg: &CorrelatorConfig) -> Result<LockState, SyncError> {
    let (a, b) = (out.alice.tags(), out.bob.tags());
    Ok(track(acquire_lock(a, b, cfg)?, a, b, cfg))
}

#[test]
fn marker_alignment_within_gps_jitter() {
    let mut cfg = SimConfig::default();
    cfg.alice_clock.start_offset = 1e-3;
    cfg.bob_clock.start_offset = 11e-3;
    cfg.bob_clock.drift_fraction = 0.0;
    let out = generate_streams(20.0, &cfg, 3).unwrap();
    let c = coarse_align_markers(out.alice.tags(), out.bob.tags()).unwrap();
    assert!((c - 10e-3).abs() < 200e-9, "{c}");
    assert_eq!(
        coarse_align_markers(out.alice.tags(), out.alice.tags()).unwrap(),
        0.0
    );

    let mut cfg = SimConfig::default();
    cfg.bob_clock.gps_enabled = false;
    let out = generate_streams(2.0, &cfg, 3).unwrap();
    assert!(matches!(
        coarse_align_markers(out.alice.tags(), out.bob.tags()),
        Err(SyncError::NoMarkers)
    ));
}

#[test]
fn locks_without_gps_at_the_default_offset() {
    let mut sim = SimConfig::default();
    sim.alice_clock.gps_enabled = false;
    sim.bob_clock.gps_enabled = false;
    let cfg = CorrelatorConfig::default();
    for seed in 0..5 {
        let out = generate_streams(10.0, &sim, seed).unwrap();
        let state = acquire_lock(out.alice.tags(), out.bob.tags(), &cfg).unwrap();
        let est = state.current.unwrap();
        let truth = out.truth.offset_at(est.valid_from);
        assert!((truth - 3.217e-3).abs() < 1e-6);
        assert!(
            (est.offset - truth).abs() < 3.5e-9,
            "seed {seed}: error {}",
            est.offset - truth
        );
        assert!(est.significance >= cfg.lock_threshold);
    }
}

#[test]
fn fine_peak_holds_the_true_coincidences() {
    let out = generate_streams(5.0, &SimConfig::default(), 11).unwrap();
    let (a, b) = (out.alice.tags(), out.bob.tags());
    let second = |tags: &[TimeTag], k: u64| {
        let lo = tags.partition_point(|t| t.ticks() < k * TICKS_PER_SECOND);
        let hi = tags.partition_point(|t| t.ticks() < (k + 1) * TICKS_PER_SECOND);
        tags[lo..hi].to_vec()
    };
    let offset = out.truth.offset_at(2.5);
    let c = cross_correlate(&second(a, 2), &second(b, 2), offset, 20e-9, 1e-9).unwrap();
    let peak = c.peak();
    assert!((peak.offset() - offset).abs() <= 1.5e-9);
    // 1 ns jitter per station puts ~28 % of true pairs in the best 1 ns bin
    let pairs_in_window: u64 = c.counts[13..27].iter().map(|&n| u64::from(n)).sum();
    assert!((40..=140).contains(&pairs_in_window), "{pairs_in_window}");
    assert!(
        peak.count as f64 > 0.15 * pairs_in_window as f64
            && (peak.count as f64) < 0.45 * pairs_in_window as f64
    );
}

#[test]
fn drift_is_tracked_to_under_a_nanosecond() {
    let out = generate_streams(100.0, &SimConfig::default(), 21).unwrap();
    let state = run(&out, &CorrelatorConfig::default()).unwrap();
    assert!((state.locked_seconds_total - state.span()).abs() < 1e-9);
    let mut worst: f64 = 0.0;
    for b in state.blocks.iter().skip(1) {
        let predicted = b.predicted_offset.unwrap();
        worst = worst.max((predicted - out.truth.offset_at(b.t_start())).abs());
    }
    assert!(worst < 1e-9, "worst prediction error {worst}");
    let first = state.blocks.first().unwrap().estimate.unwrap();
    let last = state.blocks.last().unwrap().estimate.unwrap();
    let change = last.offset - first.offset;
    assert!((change - 5e-9).abs() < 1e-9, "offset change {change}");
    assert!(
        (last.drift_rate - 5e-11).abs() < 2e-11,
        "drift {}",
        last.drift_rate
    );
}

#[test]
fn relocks_after_a_link_outage() {
    let mut sim = SimConfig::default();
    sim.link.outages = vec![(30.0, 40.0)];
    let out = generate_streams(60.0, &sim, 5).unwrap();
    let state = run(&out, &CorrelatorConfig::default()).unwrap();
    for b in &state.blocks {
        let (s, e) = (
            out.truth.alice_clock.true_time(b.t_start()),
            out.truth.alice_clock.true_time(b.t_end()),
        );
        if s >= 30.0 && e <= 40.0 {
            assert!(!b.is_locked(), "block {} locked during the outage", b.index);
        }
        if e <= 30.0 || s >= 42.0 {
            assert!(b.is_locked(), "block {} not locked", b.index);
        }
    }
    let locked = state.locked_seconds_total;
    assert!(locked > 47.0 && locked < 51.0, "{locked}");
}

#[test]
fn constructed_partners_within_three_ns_all_extracted() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut a: Vec<u64> = (0..20_000)
        .map(|_| rng.random_range(0..4 * TICKS_PER_SECOND))
        .collect();
    a.sort_unstable();
    a.dedup_by(|x, y| x.abs_diff(*y) < 200);
    let delta = 1_234_567i64;
    let alice: Vec<_> = a
        .iter()
        .map(|&t| TimeTag::new(t + 100_000, Channel::Ch0).unwrap())
        .collect();
    let mut bob: Vec<_> = a
        .iter()
        .map(|&t| {
            TimeTag::new(
                (t as i64 + 100_000 + delta + rng.random_range(-24..=24)) as u64,
                Channel::Ch2,
            )
            .unwrap()
        })
        .collect();
    bob.sort_by_key(|t| t.ticks());
    let cfg = CorrelatorConfig::default();
    let state = LockState::fixed(0, MAX_TICKS, delta as f64 * 125e-12, 0.0);
    let ev = extract_coincidences(&alice, &bob, &state, &cfg);
    assert_eq!(ev.len(), alice.len());
    for (e, a) in ev.iter().zip(&alice) {
        assert_eq!(e.alice, *a);
        assert!(e.residual.abs() <= 3e-9 + 1e-15);
    }
}

#[test]
fn online_correlator_matches_offline_run() {
    let mut sim = SimConfig::default();
    sim.link.outages = vec![(8.0, 13.0)];
    let out = generate_streams(25.0, &sim, 9).unwrap();
    let cfg = CorrelatorConfig::default();
    let offline = run(&out, &cfg).unwrap();
    let offline_events = extract_coincidences(out.alice.tags(), out.bob.tags(), &offline, &cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut online = OnlineCorrelator::new(out.alice.tags().to_vec(), cfg).unwrap();
    let mut rest = out.bob.tags();
    let mut seen = 0;
    while !rest.is_empty() {
        let n = rng.random_range(1..20_000).min(rest.len());
        online.push_bob(&rest[..n]).unwrap();
        rest = &rest[n..];
        seen += online.poll().len();
    }
    assert!(
        seen > 15,
        "only {seen} blocks processed before the stream ended"
    );
    let (state, events) = online.finish();
    assert_eq!(state, offline);
    assert_eq!(events, offline_events);
}

#[test]
fn online_rejects_out_of_order_bob_tags() {
    let out = generate_streams(2.0, &SimConfig::default(), 1).unwrap();
    let mut online =
        OnlineCorrelator::new(out.alice.into_tags(), CorrelatorConfig::default()).unwrap();
    let b = out.bob.tags();
    online.push_bob(&b[100..200]).unwrap();
    assert!(matches!(
        online.push_bob(&b[..10]),
        Err(SyncError::OutOfOrder(..))
    ));
}

#[test]
fn raising_the_threshold_never_adds_locked_blocks() {
    let mut sim = SimConfig::default();
    sim.link.outages = vec![(10.0, 14.0), (22.0, 23.5)];
    sim.link.fluctuation_sigma = 0.9;
    for seed in 0..4 {
        let out = generate_streams(40.0, &sim, seed).unwrap();
        let mut previous: Option<Vec<bool>> = None;
        for k in [3.0, 5.0, 8.0, 12.0, 20.0] {
            let cfg = CorrelatorConfig {
                lock_threshold: k,
                ..Default::default()
            };
            let locked: Vec<bool> = match run(&out, &cfg) {
                Ok(s) => s.blocks.iter().map(|b| b.is_locked()).collect(),
                Err(_) => vec![false; 40],
            };
            if let Some(prev) = &previous {
                for (i, (&now, &before)) in locked.iter().zip(prev).enumerate() {
                    assert!(
                        !now || before,
                        "seed {seed}: block {i} locked at k={k} but not below"
                    );
                }
            }
            previous = Some(locked);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn extraction_is_symmetric_under_station_swap(
        seed in any::<u64>(),
        offset_ticks in -400i64..400,
        n in 50usize..400,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |ch: Channel| {
            let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(10_000..60_000)).collect();
            v.sort_unstable();
            v.into_iter().map(|t| TimeTag::new(t, ch).unwrap()).collect::<Vec<_>>()
        };
        let a = mk(Channel::Ch1);
        let b = mk(Channel::Ch3);
        let cfg = CorrelatorConfig::default();
        let off = offset_ticks as f64 * 125e-12 + 0.3e-10;
        let ab = extract_coincidences(&a, &b, &LockState::fixed(0, MAX_TICKS, off, 0.0), &cfg);
        let ba = extract_coincidences(&b, &a, &LockState::fixed(0, MAX_TICKS, -off, 0.0), &cfg);
        let mut fwd: Vec<_> = ab.iter().map(|e| (e.alice, e.bob, e.residual)).collect();
        let mut rev: Vec<_> = ba.iter().map(|e| (e.bob, e.alice, -e.residual)).collect();
        fwd.sort_by_key(|x| (x.0.ticks(), x.1.ticks()));
        rev.sort_by_key(|x| (x.0.ticks(), x.1.ticks()));
        prop_assert_eq!(fwd, rev);
    }
}
