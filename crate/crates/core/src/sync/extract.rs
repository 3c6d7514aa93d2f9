use std::cmp::Ordering;
use std::collections::HashSet;

use super::{CorrelatorConfig, LockState};
use crate::timetag::{tick_range, TimeTag, TICK_SECONDS};

/// A matched Alice/Bob detection pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidenceEvent {
    pub alice: TimeTag,
    pub bob: TimeTag,
    /// Bob minus Alice after removing the estimated offset, seconds.
    pub residual: f64,
}

struct Candidate {
    ia: usize,
    ib: usize,
    residual_ticks: f64,
    tick_sum: u64,
}

/// Pairs Alice and Bob tags whose aligned time difference is within the
/// coincidence window, inside locked blocks only.
///
/// Each tag is used at most once. Competing candidates are resolved
/// greedily from the smallest |residual| upward, with ties broken by the
/// pair's summed timestamps so that swapping the two stations yields the
/// same pairs. Events come out in Alice order.
pub fn extract_coincidences(
    alice: &[TimeTag],
    bob: &[TimeTag],
    state: &LockState,
    cfg: &CorrelatorConfig,
) -> Vec<CoincidenceEvent> {
    let window = cfg.window_ticks() as f64;
    let mut candidates = Vec::new();
    for rec in state.locked_blocks() {
        let Some(est) = rec.estimate else { continue };
        for ia in tick_range(alice, rec.start_ticks, rec.end_ticks) {
            let a = alice[ia];
            if a.is_marker() {
                continue;
            }
            let ta = a.ticks() as f64;
            let shift = est.offset_at(a.seconds()) / TICK_SECONDS;
            let lo = (ta + shift - window).floor().max(0.0) as u64;
            let hi = (ta + shift + window).ceil().max(0.0) as u64;
            for ib in tick_range(bob, lo, hi.saturating_add(1)) {
                let b = bob[ib];
                if b.is_marker() {
                    continue;
                }
                let residual_ticks = (b.ticks() as i64 - a.ticks() as i64) as f64 - shift;
                if residual_ticks.abs() <= window {
                    candidates.push(Candidate {
                        ia,
                        ib,
                        residual_ticks,
                        tick_sum: a.ticks() + b.ticks(),
                    });
                }
            }
        }
    }

    candidates.sort_by(|x, y| {
        x.residual_ticks
            .abs()
            .total_cmp(&y.residual_ticks.abs())
            .then(x.tick_sum.cmp(&y.tick_sum))
            .then(x.ia.cmp(&y.ia))
            .then(x.ib.cmp(&y.ib))
    });
    let mut used_a = HashSet::new();
    let mut used_b = HashSet::new();
    let mut chosen: Vec<&Candidate> = Vec::new();
    for c in &candidates {
        if !used_a.contains(&c.ia) && !used_b.contains(&c.ib) {
            used_a.insert(c.ia);
            used_b.insert(c.ib);
            chosen.push(c);
        }
    }
    chosen.sort_by(|x, y| match x.ia.cmp(&y.ia) {
        Ordering::Equal => x.ib.cmp(&y.ib),
        o => o,
    });
    chosen
        .into_iter()
        .map(|c| CoincidenceEvent {
            alice: alice[c.ia],
            bob: bob[c.ib],
            residual: c.residual_ticks * TICK_SECONDS,
        })
        .collect()
}
