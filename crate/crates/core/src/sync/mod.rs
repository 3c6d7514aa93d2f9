//! Clock recovery between two tag streams and coincidence extraction.
//!
//! Alice's stream is cut into blocks of `block_span` seconds of her local
//! time. While searching, each block is cross-correlated against Bob's tags
//! over a wide offset range (coarse bins, centred on the GPS marker offset
//! when markers exist), the coarse peak is refined with fine bins, and the
//! candidate is confirmed on the following block. Once locked, every block is
//! re-measured in a narrow window around the predicted offset and the drift
//! is refitted by least squares over recent blocks.

mod correlate;
mod extract;
pub mod io;
mod lock;
pub mod online;

use thiserror::Error;

use crate::timetag::{seconds_to_tick_delta, TICK_SECONDS};

pub use correlate::{coarse_align_markers, correlate_ticks, cross_correlate, Correlation, Peak};
pub use extract::{extract_coincidences, CoincidenceEvent};
pub use lock::{acquire_lock, track, BlockRecord, LockMode, LockState, OffsetEstimate};

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("stream has no GPS markers")]
    NoMarkers,
    #[error("block contains no detector tags")]
    EmptyBlock,
    #[error("no correlation peak reached the lock threshold")]
    NoLock,
    #[error("histogram would need {0} bins")]
    TooManyBins(u64),
    #[error("invalid correlator configuration: {0}")]
    InvalidConfig(String),
    #[error("bob tags out of order: {0} after {1}")]
    OutOfOrder(u64, u64),
}

/// Upper bound on histogram size for a single correlation.
pub const MAX_BINS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorConfig {
    /// Half-width τ of the coincidence window, seconds. Pairs with
    /// |aligned Δt| ≤ τ are coincident.
    pub coincidence_window: f64,
    pub fine_bin: f64,
    pub coarse_bin: f64,
    /// Half-width of the acquisition search after GPS alignment.
    pub search_span_gps: f64,
    /// Half-width of the acquisition search when no markers are available.
    pub search_span_no_gps: f64,
    /// Lock when a peak reaches this multiple of the accidental level.
    pub lock_threshold: f64,
    pub block_span: f64,
    /// Number of recent block estimates used for the drift fit.
    pub drift_window: usize,
    /// Consecutive failed blocks before the lock is dropped.
    pub max_failures: usize,
}

impl Default for CorrelatorConfig {
    fn default() -> Self {
        CorrelatorConfig {
            coincidence_window: 7e-9,
            fine_bin: 1e-9,
            coarse_bin: 100e-9,
            search_span_gps: 1e-3,
            search_span_no_gps: 20e-3,
            lock_threshold: 5.0,
            block_span: 1.0,
            drift_window: 20,
            max_failures: 3,
        }
    }
}

impl CorrelatorConfig {
    pub fn validate(&self) -> Result<(), SyncError> {
        let bad = |m: String| Err(SyncError::InvalidConfig(m));
        let all = [
            self.coincidence_window,
            self.fine_bin,
            self.coarse_bin,
            self.search_span_gps,
            self.search_span_no_gps,
            self.block_span,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("all durations must be positive".into());
        }
        if self.fine_bin_ticks() < 1 || self.coarse_bin_ticks() < 1 {
            return bad("bins must be at least one tick (125 ps)".into());
        }
        if !(self.fine_bin <= self.coincidence_window
            && self.coincidence_window <= self.coarse_bin
            && self.coarse_bin <= self.search_span_gps.min(self.search_span_no_gps))
        {
            return bad("need fine_bin <= coincidence_window <= coarse_bin <= search spans".into());
        }
        if self.lock_threshold.is_nan() || self.lock_threshold <= 1.0 {
            return bad(format!(
                "lock_threshold = {} must exceed 1",
                self.lock_threshold
            ));
        }
        if self.drift_window == 0 || self.max_failures == 0 {
            return bad("drift_window and max_failures must be at least 1".into());
        }
        Ok(())
    }

    pub fn fine_bin_ticks(&self) -> i64 {
        seconds_to_tick_delta(self.fine_bin)
    }

    pub fn coarse_bin_ticks(&self) -> i64 {
        seconds_to_tick_delta(self.coarse_bin)
    }

    pub fn window_ticks(&self) -> i64 {
        seconds_to_tick_delta(self.coincidence_window)
    }

    /// Fine bins per tracking window: an even count spanning about one
    /// coarse bin.
    pub(crate) fn tracking_bins(&self) -> i64 {
        2 * (self.coarse_bin_ticks() / (2 * self.fine_bin_ticks())).max(1)
    }
}

pub(crate) fn ticks_as_seconds(t: i64) -> f64 {
    t as f64 * TICK_SECONDS
}
