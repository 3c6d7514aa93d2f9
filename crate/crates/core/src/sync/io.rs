//! CSV logs of extracted coincidences and of the lock timeline.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CoincidenceEvent, LockState};
use crate::timetag::{Channel, TagError, TimeTag};

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Serialize, Deserialize)]
struct CoincidenceRow {
    alice_ticks: u64,
    alice_channel: u8,
    bob_ticks: u64,
    bob_channel: u8,
    residual_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub t_start: f64,
    pub t_end: f64,
    /// Empty while searching.
    pub offset_ns: Option<f64>,
    pub drift: Option<f64>,
    pub significance: f64,
}

pub fn write_coincidences<W: Write>(w: W, events: &[CoincidenceEvent]) -> Result<(), LogError> {
    let mut out = csv::Writer::from_writer(w);
    for e in events {
        out.serialize(CoincidenceRow {
            alice_ticks: e.alice.ticks(),
            alice_channel: e.alice.channel().code(),
            bob_ticks: e.bob.ticks(),
            bob_channel: e.bob.channel().code(),
            residual_ns: e.residual * 1e9,
        })?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_coincidences<R: Read>(r: R) -> Result<Vec<CoincidenceEvent>, LogError> {
    let mut input = csv::Reader::from_reader(r);
    let mut events = Vec::new();
    for row in input.deserialize() {
        let row: CoincidenceRow = row?;
        events.push(CoincidenceEvent {
            alice: TimeTag::new(row.alice_ticks, Channel::from_code(row.alice_channel)?)?,
            bob: TimeTag::new(row.bob_ticks, Channel::from_code(row.bob_channel)?)?,
            residual: row.residual_ns * 1e-9,
        });
    }
    Ok(events)
}

/// One row per block, with the alignment applied to it.
pub fn timeline(state: &LockState) -> Vec<TimelineRow> {
    state
        .blocks
        .iter()
        .map(|b| TimelineRow {
            t_start: b.t_start(),
            t_end: b.t_end(),
            offset_ns: b.estimate.filter(|_| b.is_locked()).map(|e| e.offset * 1e9),
            drift: b.estimate.filter(|_| b.is_locked()).map(|e| e.drift_rate),
            significance: b.significance,
        })
        .collect()
}

pub fn write_timeline<W: Write>(w: W, state: &LockState) -> Result<(), LogError> {
    let mut out = csv::Writer::from_writer(w);
    for row in timeline(state) {
        out.serialize(row)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_timeline<R: Read>(r: R) -> Result<Vec<TimelineRow>, LogError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(LogError::from))
        .collect()
}
