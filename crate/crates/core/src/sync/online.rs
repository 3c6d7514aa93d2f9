//! Incremental correlation while Bob's tags are still arriving.

use super::{
    extract_coincidences, BlockRecord, CoincidenceEvent, CorrelatorConfig, LockState, SyncError,
};
use crate::timetag::TimeTag;

/// Runs the block tracker as soon as enough of Bob's stream has arrived.
///
/// A block is processed once Bob's data reaches past the block's horizon or
/// Bob's stream is finished, so the outcome is identical to an offline run
/// over the complete streams.
#[derive(Debug)]
pub struct OnlineCorrelator {
    cfg: CorrelatorConfig,
    alice: Vec<TimeTag>,
    bob: Vec<TimeTag>,
    state: LockState,
    bob_complete: bool,
}

impl OnlineCorrelator {
    pub fn new(alice: Vec<TimeTag>, cfg: CorrelatorConfig) -> Result<Self, SyncError> {
        let state = LockState::new(&alice, &cfg)?;
        Ok(OnlineCorrelator {
            cfg,
            alice,
            bob: Vec::new(),
            state,
            bob_complete: false,
        })
    }

    /// Appends a batch of Bob tags, which must continue in time order.
    pub fn push_bob(&mut self, tags: &[TimeTag]) -> Result<(), SyncError> {
        let mut last = self.bob.last().map(|t| t.ticks());
        for t in tags {
            if let Some(prev) = last.filter(|&p| t.ticks() < p) {
                return Err(SyncError::OutOfOrder(t.ticks(), prev));
            }
            last = Some(t.ticks());
        }
        self.bob.extend_from_slice(tags);
        Ok(())
    }

    pub fn finish_bob(&mut self) {
        self.bob_complete = true;
    }

    /// Processes every block whose Bob data is available and returns the
    /// records created by this call.
    pub fn poll(&mut self) -> Vec<BlockRecord> {
        let before = self.state.next_block();
        while !self.state.is_complete() {
            let k = self.state.next_block();
            let ready = self.bob_complete
                || self
                    .bob
                    .last()
                    .is_some_and(|t| t.ticks() > self.state.horizon_ticks(k, &self.cfg));
            if !ready {
                break;
            }
            self.state.step(&self.alice, &self.bob, &self.cfg);
        }
        self.state.blocks[before..].to_vec()
    }

    pub fn state(&self) -> &LockState {
        &self.state
    }

    pub fn bob_len(&self) -> usize {
        self.bob.len()
    }

    /// Completes the run and extracts coincidences over all locked blocks.
    pub fn finish(mut self) -> (LockState, Vec<CoincidenceEvent>) {
        self.finish_bob();
        self.poll();
        let events = extract_coincidences(&self.alice, &self.bob, &self.state, &self.cfg);
        (self.state, events)
    }
}
