use std::collections::VecDeque;

use super::correlate::{coarse_align_markers, correlate_ticks, detector_ticks};
use super::{CorrelatorConfig, SyncError};
use crate::timetag::{
    seconds_to_tick_delta, seconds_to_ticks, tick_range, ticks_to_seconds, TimeTag,
    TICKS_PER_SECOND, TICK_SECONDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    Searching,
    Locked,
}

/// Linear model of Bob-local minus Alice-local time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetEstimate {
    /// Offset at `valid_from`, seconds.
    pub offset: f64,
    pub drift_rate: f64,
    /// Coarse-bin peak count over expected accidentals.
    pub significance: f64,
    /// Alice-local time the estimate refers to, seconds.
    pub valid_from: f64,
}

impl OffsetEstimate {
    pub fn offset_at(&self, alice_local: f64) -> f64 {
        self.offset + self.drift_rate * (alice_local - self.valid_from)
    }
}

/// Outcome of processing one block of Alice's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    pub index: usize,
    pub start_ticks: u64,
    pub end_ticks: u64,
    pub mode: LockMode,
    /// Alignment applied to this block when locked.
    pub estimate: Option<OffsetEstimate>,
    /// Offset predicted for the block start before it was measured.
    pub predicted_offset: Option<f64>,
    pub significance: f64,
}

impl BlockRecord {
    pub fn t_start(&self) -> f64 {
        ticks_to_seconds(self.start_ticks)
    }

    pub fn t_end(&self) -> f64 {
        ticks_to_seconds(self.end_ticks)
    }

    pub fn span(&self) -> f64 {
        ticks_to_seconds(self.end_ticks - self.start_ticks)
    }

    pub fn is_locked(&self) -> bool {
        self.mode == LockMode::Locked
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockGrid {
    origin: u64,
    block: u64,
    count: usize,
    end: u64,
}

impl BlockGrid {
    fn new(alice: &[TimeTag], block_span: f64) -> Result<Self, SyncError> {
        let (first, last) = match (alice.first(), alice.last()) {
            (Some(f), Some(l)) => (f.ticks(), l.ticks()),
            _ => return Err(SyncError::EmptyBlock),
        };
        let block = seconds_to_ticks(block_span).max(1);
        let end = last + 1;
        // a trailing partial block is folded into the one before it
        let count = ((end - first) / block).max(1) as usize;
        Ok(BlockGrid {
            origin: first,
            block,
            count,
            end,
        })
    }

    fn bounds(&self, k: usize) -> (u64, u64) {
        let start = self.origin + k as u64 * self.block;
        let end = if k + 1 == self.count {
            self.end
        } else {
            start + self.block
        };
        (start, end)
    }
}

struct Measurement {
    significance: f64,
    offset: f64,
    t_mid: f64,
}

/// Bob data reach needed beyond a block: marker pairing window, the largest
/// plausible offset and the widest search.
const HORIZON_MARGIN: f64 = 1.0;

/// Progress of the coincidence lock over Alice's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LockState {
    pub mode: LockMode,
    pub current: Option<OffsetEstimate>,
    pub locked_seconds_total: f64,
    /// (block start, estimate) after every successful measurement.
    pub history: Vec<(f64, OffsetEstimate)>,
    pub blocks: Vec<BlockRecord>,
    grid: BlockGrid,
    measurements: VecDeque<(f64, f64)>,
    failures: usize,
}

impl LockState {
    pub fn new(alice: &[TimeTag], cfg: &CorrelatorConfig) -> Result<Self, SyncError> {
        cfg.validate()?;
        Ok(LockState {
            mode: LockMode::Searching,
            current: None,
            locked_seconds_total: 0.0,
            history: Vec::new(),
            blocks: Vec::new(),
            grid: BlockGrid::new(alice, cfg.block_span)?,
            measurements: VecDeque::new(),
            failures: 0,
        })
    }

    /// A single locked interval `[start, end)` with a fixed alignment.
    pub fn fixed(start_ticks: u64, end_ticks: u64, offset: f64, drift_rate: f64) -> Self {
        let estimate = OffsetEstimate {
            offset,
            drift_rate,
            significance: f64::INFINITY,
            valid_from: ticks_to_seconds(start_ticks),
        };
        let record = BlockRecord {
            index: 0,
            start_ticks,
            end_ticks,
            mode: LockMode::Locked,
            estimate: Some(estimate),
            predicted_offset: None,
            significance: f64::INFINITY,
        };
        LockState {
            mode: LockMode::Locked,
            current: Some(estimate),
            locked_seconds_total: record.span(),
            history: vec![(record.t_start(), estimate)],
            blocks: vec![record],
            grid: BlockGrid {
                origin: start_ticks,
                block: end_ticks - start_ticks,
                count: 1,
                end: end_ticks,
            },
            measurements: VecDeque::new(),
            failures: 0,
        }
    }

    pub fn block_count(&self) -> usize {
        self.grid.count
    }

    pub fn next_block(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_complete(&self) -> bool {
        self.blocks.len() >= self.grid.count
    }

    /// Seconds of Alice's stream covered by the block grid.
    pub fn span(&self) -> f64 {
        ticks_to_seconds(self.grid.end - self.grid.origin)
    }

    pub fn locked_blocks(&self) -> impl Iterator<Item = &BlockRecord> {
        self.blocks.iter().filter(|b| b.is_locked())
    }

    /// Last Bob tick that processing block `k` may look at.
    pub fn horizon_ticks(&self, k: usize, cfg: &CorrelatorConfig) -> u64 {
        let (_, end) = self.grid.bounds((k + 1).min(self.grid.count - 1));
        let reach =
            HORIZON_MARGIN + cfg.search_span_gps.max(cfg.search_span_no_gps) + 4.0 * cfg.coarse_bin;
        end + seconds_to_ticks(reach)
    }

    /// Processes the next block. Bob tags past [`Self::horizon_ticks`] are
    /// never consulted, so a partially received Bob stream that already
    /// extends beyond the horizon gives the same result as the full one.
    pub fn step(&mut self, alice: &[TimeTag], bob: &[TimeTag], cfg: &CorrelatorConfig) {
        let k = self.blocks.len();
        if k >= self.grid.count {
            return;
        }
        let horizon = self.horizon_ticks(k, cfg);
        let bob = &bob[..bob.partition_point(|t| t.ticks() <= horizon)];
        match self.mode {
            LockMode::Locked => self.track_block(k, alice, bob, cfg),
            LockMode::Searching => self.search_block(k, alice, bob, cfg),
        }
    }

    fn push_record(&mut self, record: BlockRecord) {
        if record.is_locked() {
            self.locked_seconds_total += record.span();
        }
        self.blocks.push(record);
    }

    fn search_block(
        &mut self,
        k: usize,
        alice: &[TimeTag],
        bob: &[TimeTag],
        cfg: &CorrelatorConfig,
    ) {
        let (start, end) = self.grid.bounds(k);
        match self.try_acquire(k, alice, bob, cfg) {
            Ok((candidate, t_mid)) => {
                self.measurements.clear();
                self.measurements.push_back((t_mid, candidate.offset));
                let t_start = ticks_to_seconds(start);
                let est = OffsetEstimate {
                    offset: candidate.offset_at(t_start),
                    drift_rate: candidate.drift_rate,
                    significance: candidate.significance,
                    valid_from: t_start,
                };
                self.mode = LockMode::Locked;
                self.current = Some(est);
                self.failures = 0;
                self.history.push((t_start, est));
                self.push_record(BlockRecord {
                    index: k,
                    start_ticks: start,
                    end_ticks: end,
                    mode: LockMode::Locked,
                    estimate: Some(est),
                    predicted_offset: None,
                    significance: est.significance,
                });
            }
            Err(significance) => self.push_record(BlockRecord {
                index: k,
                start_ticks: start,
                end_ticks: end,
                mode: LockMode::Searching,
                estimate: None,
                predicted_offset: None,
                significance,
            }),
        }
    }

    fn track_block(
        &mut self,
        k: usize,
        alice: &[TimeTag],
        bob: &[TimeTag],
        cfg: &CorrelatorConfig,
    ) {
        let (start, end) = self.grid.bounds(k);
        let t_start = ticks_to_seconds(start);
        let cur = self.current.expect("locked state carries an estimate");
        let predicted = cur.offset_at(t_start);
        let m = self.measure(k, alice, bob, &cur, cfg);
        let significance = m.as_ref().map_or(0.0, |m| m.significance);

        if let Some(m) = m.filter(|m| m.significance >= cfg.lock_threshold) {
            self.measurements.push_back((m.t_mid, m.offset));
            while self.measurements.len() > cfg.drift_window {
                self.measurements.pop_front();
            }
            let (offset, drift_rate) = fit_line(&self.measurements, cur.drift_rate, t_start);
            let est = OffsetEstimate {
                offset,
                drift_rate,
                significance,
                valid_from: t_start,
            };
            self.current = Some(est);
            self.failures = 0;
            self.history.push((t_start, est));
            self.push_record(BlockRecord {
                index: k,
                start_ticks: start,
                end_ticks: end,
                mode: LockMode::Locked,
                estimate: Some(est),
                predicted_offset: Some(predicted),
                significance,
            });
            return;
        }

        self.failures += 1;
        self.push_record(BlockRecord {
            index: k,
            start_ticks: start,
            end_ticks: end,
            mode: LockMode::Locked,
            estimate: Some(OffsetEstimate {
                offset: predicted,
                valid_from: t_start,
                significance,
                ..cur
            }),
            predicted_offset: Some(predicted),
            significance,
        });
        if self.failures >= cfg.max_failures {
            // the failed run was never really locked
            let n = self.blocks.len();
            for rec in &mut self.blocks[n - self.failures..] {
                rec.mode = LockMode::Searching;
                rec.estimate = None;
                self.locked_seconds_total -= ticks_to_seconds(rec.end_ticks - rec.start_ticks);
            }
            self.mode = LockMode::Searching;
            self.current = None;
            self.measurements.clear();
            self.failures = 0;
        }
    }

    /// Coarse search, fine refinement and confirmation on the next block.
    /// On failure returns the best significance seen.
    fn try_acquire(
        &self,
        k: usize,
        alice: &[TimeTag],
        bob: &[TimeTag],
        cfg: &CorrelatorConfig,
    ) -> Result<(OffsetEstimate, f64), f64> {
        let (start, end) = self.grid.bounds(k);
        let a_ticks = detector_ticks(&alice[tick_range(alice, start, end)]);
        let (Some(&a_first), Some(&a_last)) = (a_ticks.first(), a_ticks.last()) else {
            return Err(0.0);
        };

        let half_second = TICKS_PER_SECOND / 2;
        let a_markers =
            &alice[tick_range(alice, start.saturating_sub(half_second), end + half_second)];
        let b_markers = &bob[tick_range(
            bob,
            start.saturating_sub(2 * half_second),
            end + 2 * half_second,
        )];
        let (center, half_span) = match coarse_align_markers(a_markers, b_markers) {
            Ok(offset) => (offset, cfg.search_span_gps),
            Err(_) => (0.0, cfg.search_span_no_gps),
        };
        let center = seconds_to_tick_delta(center);
        let half_span = seconds_to_tick_delta(half_span);
        let b_ticks = bob_window(
            bob,
            a_first + center - half_span,
            a_last + center + half_span,
        );
        let coarse = correlate_ticks(
            &a_ticks,
            &b_ticks,
            center,
            half_span,
            cfg.coarse_bin_ticks(),
        )
        .map_err(|_| 0.0)?;
        let coarse_peak = coarse.peak();
        if coarse_peak.significance < cfg.lock_threshold {
            return Err(coarse_peak.significance);
        }

        let fine_center = coarse_peak.offset_ticks.round() as i64;
        let fine_half = 2 * cfg.coarse_bin_ticks();
        let b_ticks = bob_window(
            bob,
            a_first + fine_center - fine_half,
            a_last + fine_center + fine_half,
        );
        let fine = correlate_ticks(
            &a_ticks,
            &b_ticks,
            fine_center,
            fine_half,
            cfg.fine_bin_ticks(),
        )
        .map_err(|_| coarse_peak.significance)?;
        let fine_peak = fine.peak();
        if fine_peak.significance < cfg.lock_threshold {
            return Err(coarse_peak.significance);
        }
        let offset = fine.centroid_around(fine_peak.bin, cfg.window_ticks()) * TICK_SECONDS;
        let t_mid = ticks_to_seconds(((a_first + a_last) / 2) as u64);
        let candidate = OffsetEstimate {
            offset,
            drift_rate: 0.0,
            significance: coarse_peak.significance,
            valid_from: t_mid,
        };

        if k + 1 < self.grid.count {
            let confirmed = self
                .measure(k + 1, alice, bob, &candidate, cfg)
                .is_some_and(|m| m.significance >= cfg.lock_threshold);
            if !confirmed {
                return Err(coarse_peak.significance);
            }
        }
        Ok((candidate, t_mid))
    }

    /// Correlates block `k` in a window of about one coarse bin around the
    /// offset predicted by `line`.
    fn measure(
        &self,
        k: usize,
        alice: &[TimeTag],
        bob: &[TimeTag],
        line: &OffsetEstimate,
        cfg: &CorrelatorConfig,
    ) -> Option<Measurement> {
        let (start, end) = self.grid.bounds(k);
        let a_tags = &alice[tick_range(alice, start, end)];
        let predicted: Vec<i64> = a_tags
            .iter()
            .filter(|t| !t.is_marker())
            .map(|t| t.ticks() as i64 + seconds_to_tick_delta(line.offset_at(t.seconds())))
            .collect();
        let (&lo, &hi) = (predicted.iter().min()?, predicted.iter().max()?);
        let bins = cfg.tracking_bins();
        let half = bins / 2 * cfg.fine_bin_ticks();
        let b_ticks = bob_window(bob, lo - half, hi + half);
        let corr = correlate_ticks(&predicted, &b_ticks, 0, half, cfg.fine_bin_ticks()).ok()?;
        let expected = corr.expected_per_bin * bins as f64;
        let significance = if expected > 0.0 {
            corr.total() as f64 / expected
        } else {
            0.0
        };
        let residual = corr.centroid_around(corr.peak().bin, cfg.window_ticks()) * TICK_SECONDS;

        let first = a_tags.iter().find(|t| !t.is_marker())?.seconds();
        let last = a_tags.iter().rev().find(|t| !t.is_marker())?.seconds();
        let t_mid = 0.5 * (first + last);
        Some(Measurement {
            significance,
            offset: line.offset_at(t_mid) + residual,
            t_mid,
        })
    }
}

/// Detector ticks of `bob` within `[lo, hi]`.
fn bob_window(bob: &[TimeTag], lo: i64, hi: i64) -> Vec<i64> {
    let lo = lo.max(0) as u64;
    let hi = hi.max(0) as u64;
    detector_ticks(&bob[tick_range(bob, lo, hi.saturating_add(1))])
}

/// Least-squares line through `(t, offset)` points, evaluated at `at`.
/// A single point keeps `prior_drift`.
fn fit_line(points: &VecDeque<(f64, f64)>, prior_drift: f64, at: f64) -> (f64, f64) {
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let o_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(t, o) in points {
        sxx += (t - t_mean) * (t - t_mean);
        sxy += (t - t_mean) * (o - o_mean);
    }
    let drift = if points.len() >= 2 && sxx > 0.0 {
        sxy / sxx
    } else {
        prior_drift
    };
    (o_mean + drift * (at - t_mean), drift)
}

/// Finds the first block where the correlation peak reaches the lock
/// threshold and is confirmed by the block after it.
pub fn acquire_lock(
    alice: &[TimeTag],
    bob: &[TimeTag],
    cfg: &CorrelatorConfig,
) -> Result<LockState, SyncError> {
    let mut state = LockState::new(alice, cfg)?;
    while !state.is_complete() && state.mode == LockMode::Searching {
        state.step(alice, bob, cfg);
    }
    if state.mode == LockMode::Locked {
        Ok(state)
    } else {
        Err(SyncError::NoLock)
    }
}

/// Runs the tracker over the remaining blocks, re-acquiring after lock loss.
pub fn track(
    mut state: LockState,
    alice: &[TimeTag],
    bob: &[TimeTag],
    cfg: &CorrelatorConfig,
) -> LockState {
    while !state.is_complete() {
        state.step(alice, bob, cfg);
    }
    state
}
