//! Time-tag data model and its bit-exact encodings.
//!
//! A tag is one detection event: a 125 ps tick count and the channel that
//! fired, packed into a single 64-bit word. The tick count lives in the high
//! 60 bits and the channel code in the low 4 bits, so numeric order of words
//! agrees with time order.
//!
//! # `.ettag` files
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ETTG"
//! 4       2     format version (u16 LE, currently 1)
//! 6       1     station id (0 = Alice, 1 = Bob)
//! 7       1     reserved (0)
//! 8       8     tag count (u64 LE)
//! 16      8*n   encoded tag words (u64 LE), sorted by ticks
//! ```

use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Duration of one tick in seconds.
pub const TICK_SECONDS: f64 = 125e-12;

/// Ticks per second (exact).
pub const TICKS_PER_SECOND: u64 = 8_000_000_000;

/// Ticks are stored in 60 bits.
pub const MAX_TICKS: u64 = (1 << 60) - 1;

pub const FILE_MAGIC: [u8; 4] = *b"ETTG";
pub const FILE_VERSION: u16 = 1;
pub const FILE_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("invalid channel code {0:#x}")]
    InvalidChannel(u8),
    #[error("tick count {0} does not fit in 60 bits")]
    TicksOverflow(u64),
    #[error("bad file magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid station id {0}")]
    InvalidStation(u8),
    #[error("tags are not sorted at index {0}")]
    Unsorted(usize),
    #[error("file truncated: header announces {expected} tags, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which output of a detection module produced a tag.
///
/// `Ch0..Ch3` are the four polarization outputs; which analyzer angle each
/// one corresponds to is a property of the measurement settings, not of the
/// tag. `GpsMarker` is the once-per-second reference pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Ch0,
    Ch1,
    Ch2,
    Ch3,
    GpsMarker,
}

impl Channel {
    pub const DETECTORS: [Channel; 4] = [Channel::Ch0, Channel::Ch1, Channel::Ch2, Channel::Ch3];

    /// 4-bit wire code.
    pub const fn code(self) -> u8 {
        match self {
            Channel::Ch0 => 0x0,
            Channel::Ch1 => 0x1,
            Channel::Ch2 => 0x2,
            Channel::Ch3 => 0x3,
            Channel::GpsMarker => 0xF,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TagError> {
        match code {
            0x0 => Ok(Channel::Ch0),
            0x1 => Ok(Channel::Ch1),
            0x2 => Ok(Channel::Ch2),
            0x3 => Ok(Channel::Ch3),
            0xF => Ok(Channel::GpsMarker),
            other => Err(TagError::InvalidChannel(other)),
        }
    }

    /// Detector index 0..4, or `None` for the GPS marker.
    pub const fn detector_index(self) -> Option<usize> {
        match self {
            Channel::Ch0 => Some(0),
            Channel::Ch1 => Some(1),
            Channel::Ch2 => Some(2),
            Channel::Ch3 => Some(3),
            Channel::GpsMarker => None,
        }
    }

    pub fn from_detector_index(idx: usize) -> Option<Self> {
        Channel::DETECTORS.get(idx).copied()
    }

    pub const fn is_detector(self) -> bool {
        !matches!(self, Channel::GpsMarker)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.detector_index() {
            Some(i) => write!(f, "CH{i}"),
            None => f.write_str("GPS"),
        }
    }
}

/// One detection event, stored in its packed 64-bit form.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeTag(u64);

impl TimeTag {
    pub fn new(ticks: u64, channel: Channel) -> Result<Self, TagError> {
        if ticks > MAX_TICKS {
            return Err(TagError::TicksOverflow(ticks));
        }
        Ok(TimeTag((ticks << 4) | u64::from(channel.code())))
    }

    pub fn ticks(self) -> u64 {
        self.0 >> 4
    }

    pub fn channel(self) -> Channel {
        // the low nibble is only ever written from a valid `Channel`
        Channel::from_code((self.0 & 0xF) as u8).expect("TimeTag holds a valid channel code")
    }

    pub fn seconds(self) -> f64 {
        ticks_to_seconds(self.ticks())
    }

    pub fn is_marker(self) -> bool {
        self.0 & 0xF == u64::from(Channel::GpsMarker.code())
    }
}

impl fmt::Debug for TimeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TimeTag({} @ {})", self.channel(), self.ticks())
    }
}

pub fn encode_tag(tag: TimeTag) -> u64 {
    tag.0
}

pub fn decode_tag(word: u64) -> Result<TimeTag, TagError> {
    Channel::from_code((word & 0xF) as u8)?;
    Ok(TimeTag(word))
}

pub fn ticks_to_seconds(ticks: u64) -> f64 {
    ticks as f64 * TICK_SECONDS
}

/// Signed tick difference to seconds.
pub fn tick_delta_to_seconds(delta: i64) -> f64 {
    delta as f64 * TICK_SECONDS
}

/// Nearest tick count for a non-negative time in seconds.
pub fn seconds_to_ticks(seconds: f64) -> u64 {
    (seconds * TICKS_PER_SECOND as f64).round().max(0.0) as u64
}

/// Nearest signed tick count for a time interval in seconds.
pub fn seconds_to_tick_delta(seconds: f64) -> i64 {
    (seconds * TICKS_PER_SECOND as f64).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Station {
    Alice,
    Bob,
}

impl Station {
    pub const fn id(self) -> u8 {
        match self {
            Station::Alice => 0,
            Station::Bob => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, TagError> {
        match id {
            0 => Ok(Station::Alice),
            1 => Ok(Station::Bob),
            other => Err(TagError::InvalidStation(other)),
        }
    }
}

impl fmt::Display for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Station::Alice => "alice",
            Station::Bob => "bob",
        })
    }
}

/// Time-ordered tags recorded by one station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    pub station: Station,
    /// Free-form run identifier. Not persisted in `.ettag` files.
    pub epoch_label: String,
    tags: Vec<TimeTag>,
}

impl TagStream {
    pub fn new(
        station: Station,
        epoch_label: impl Into<String>,
        tags: Vec<TimeTag>,
    ) -> Result<Self, TagError> {
        if let Some(i) = first_unsorted(&tags) {
            return Err(TagError::Unsorted(i));
        }
        Ok(TagStream {
            station,
            epoch_label: epoch_label.into(),
            tags,
        })
    }

    /// Sorts `tags` by ticks; equal ticks keep their input order.
    pub fn from_unsorted(
        station: Station,
        epoch_label: impl Into<String>,
        mut tags: Vec<TimeTag>,
    ) -> Self {
        tags.sort_by_key(|t| t.ticks());
        TagStream {
            station,
            epoch_label: epoch_label.into(),
            tags,
        }
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn into_tags(self) -> Vec<TimeTag> {
        self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn detector_count(&self) -> usize {
        self.tags.iter().filter(|t| !t.is_marker()).count()
    }

    pub fn markers(&self) -> impl Iterator<Item = TimeTag> + '_ {
        self.tags.iter().copied().filter(|t| t.is_marker())
    }

    /// Seconds between the first and last tag.
    pub fn span_seconds(&self) -> f64 {
        match (self.tags.first(), self.tags.last()) {
            (Some(a), Some(b)) => b.seconds() - a.seconds(),
            _ => 0.0,
        }
    }

    /// Merge with another sorted stream. On equal ticks, tags from `self`
    /// come first.
    pub fn merge(&self, other: &TagStream) -> TagStream {
        TagStream {
            station: self.station,
            epoch_label: self.epoch_label.clone(),
            tags: merge_sorted(&self.tags, &other.tags),
        }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), TagError> {
        let mut w = BufWriter::new(w);
        w.write_all(&FILE_MAGIC)?;
        w.write_all(&FILE_VERSION.to_le_bytes())?;
        w.write_all(&[self.station.id(), 0])?;
        w.write_all(&(self.tags.len() as u64).to_le_bytes())?;
        for tag in &self.tags {
            w.write_all(&encode_tag(*tag).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, TagError> {
        let mut r = BufReader::new(r);
        let mut header = [0u8; FILE_HEADER_LEN];
        r.read_exact(&mut header)?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != FILE_MAGIC {
            return Err(TagError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FILE_VERSION {
            return Err(TagError::UnsupportedVersion(version));
        }
        let station = Station::from_id(header[6])?;
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap());

        let mut tags = Vec::with_capacity(count.min(1 << 24) as usize);
        let mut word = [0u8; 8];
        for found in 0..count {
            match r.read_exact(&mut word) {
                Ok(()) => tags.push(decode_tag(u64::from_le_bytes(word))?),
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                    return Err(TagError::Truncated {
                        expected: count,
                        found,
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        TagStream::new(station, String::new(), tags)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TagError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TagError> {
        let path = path.as_ref();
        let mut stream = Self::read_from(std::fs::File::open(path)?)?;
        stream.epoch_label = path.display().to_string();
        Ok(stream)
    }
}

/// Index of the first tag that breaks tick ordering, if any.
pub fn first_unsorted(tags: &[TimeTag]) -> Option<usize> {
    tags.windows(2)
        .position(|w| w[1].ticks() < w[0].ticks())
        .map(|i| i + 1)
}

/// Stable two-way merge of sorted tag slices; `a` wins ties.
pub fn merge_sorted(a: &[TimeTag], b: &[TimeTag]) -> Vec<TimeTag> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if b[j].ticks() < a[i].ticks() {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(a[i]);
            i += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Index range of tags with `lo <= ticks < hi`.
pub fn tick_range(tags: &[TimeTag], lo: u64, hi: u64) -> std::ops::Range<usize> {
    let start = tags.partition_point(|t| t.ticks() < lo);
    let end = start + tags[start..].partition_point(|t| t.ticks() < hi);
    start..end
}
