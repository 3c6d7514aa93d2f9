//! Block framing and a resumable TCP session for shipping tags between
//! stations.
//!
//! Frame layout, little-endian:
//!
//! ```text
//! "ETBK" | version u16 | station u8 | reserved u8 | sequence u64 | count u32 | count × u64 tag | crc32(payload)
//! ```
//!
//! The session is stop-and-wait. The receiver opens every connection with
//! `ACK(next expected sequence)`, so a reconnecting sender resumes exactly
//! where delivery stopped. Each frame is answered with `ACK(next)` or, on a
//! checksum failure, `NAK(sequence)`; the sender closes with `FIN(total)`.
//! Control messages are a 4-byte tag followed by a u64.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::timetag::{decode_tag, encode_tag, first_unsorted, Station, TagError, TimeTag};

pub const BLOCK_MAGIC: [u8; 4] = *b"ETBK";
pub const FRAME_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
pub const CRC_LEN: usize = 4;
pub const MAX_BLOCK_TAGS: usize = 8192;
pub const MAX_PAYLOAD: usize = MAX_BLOCK_TAGS * 8;
pub const DEFAULT_PORT: u16 = 47_800;

const ACK: [u8; 4] = *b"ETAK";
const NAK: [u8; 4] = *b"ETNK";
const FIN: [u8; 4] = *b"ETFN";
const MAX_RETRANSMITS: usize = 8;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    Oversize(usize),
    #[error("checksum mismatch in block {0}")]
    ChecksumMismatch(u64),
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u16),
    #[error("frame length {found} does not match header ({expected})")]
    Length { expected: usize, found: usize },
    #[error("block tags are not sorted at index {0}")]
    Unsorted(usize),
    #[error("sequence gap: expected block {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("connection lost: {0}")]
    ConnectionLost(io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TransportError {
    pub fn is_resumable(&self) -> bool {
        matches!(self, TransportError::ConnectionLost(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagBlock {
    pub sequence_number: u64,
    pub station: Station,
    pub tags: Vec<TimeTag>,
}

pub fn encode_block(block: &TagBlock) -> Result<Vec<u8>, TransportError> {
    let payload_len = block.tags.len() * 8;
    if payload_len > MAX_PAYLOAD {
        return Err(TransportError::Oversize(payload_len));
    }
    if let Some(i) = first_unsorted(&block.tags) {
        return Err(TransportError::Unsorted(i));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len + CRC_LEN);
    out.extend_from_slice(&BLOCK_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.push(block.station.id());
    out.push(0);
    out.extend_from_slice(&block.sequence_number.to_le_bytes());
    out.extend_from_slice(&(block.tags.len() as u32).to_le_bytes());
    for &t in &block.tags {
        out.extend_from_slice(&encode_tag(t).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Header {
    station: u8,
    sequence: u64,
    count: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, TransportError> {
    let magic: [u8; 4] = h[0..4].try_into().unwrap();
    if magic != BLOCK_MAGIC {
        return Err(TransportError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != FRAME_VERSION {
        return Err(TransportError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(h[16..20].try_into().unwrap()) as usize;
    if count > MAX_BLOCK_TAGS {
        return Err(TransportError::Oversize(count * 8));
    }
    Ok(Header {
        station: h[6],
        sequence: u64::from_le_bytes(h[8..16].try_into().unwrap()),
        count,
    })
}

/// Exact inverse of [`encode_block`].
pub fn decode_block(frame: &[u8]) -> Result<TagBlock, TransportError> {
    let header: &[u8; HEADER_LEN] = frame
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or(TransportError::Length {
            expected: HEADER_LEN + CRC_LEN,
            found: frame.len(),
        })?;
    let h = parse_header(header)?;
    let expected = HEADER_LEN + h.count * 8 + CRC_LEN;
    if frame.len() != expected {
        return Err(TransportError::Length {
            expected,
            found: frame.len(),
        });
    }
    let payload = &frame[HEADER_LEN..expected - CRC_LEN];
    let crc = u32::from_le_bytes(frame[expected - CRC_LEN..].try_into().unwrap());
    if crc32fast::hash(payload) != crc {
        return Err(TransportError::ChecksumMismatch(h.sequence));
    }
    let station = Station::from_id(h.station)?;
    let tags = payload
        .chunks_exact(8)
        .map(|w| decode_tag(u64::from_le_bytes(w.try_into().unwrap())))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(i) = first_unsorted(&tags) {
        return Err(TransportError::Unsorted(i));
    }
    Ok(TagBlock {
        sequence_number: h.sequence,
        station,
        tags,
    })
}

/// Cuts a tag list into consecutively numbered blocks.
pub fn split_blocks(tags: &[TimeTag], station: Station, block_tags: usize) -> Vec<TagBlock> {
    let block_tags = block_tags.clamp(1, MAX_BLOCK_TAGS);
    tags.chunks(block_tags)
        .enumerate()
        .map(|(i, c)| TagBlock {
            sequence_number: i as u64,
            station,
            tags: c.to_vec(),
        })
        .collect()
}

enum Message {
    Frame(Result<TagBlock, TransportError>),
    Fin(u64),
}

fn lost(e: io::Error) -> TransportError {
    TransportError::ConnectionLost(e)
}

fn write_control(s: &mut TcpStream, tag: [u8; 4], value: u64) -> Result<(), TransportError> {
    let mut msg = [0u8; 12];
    msg[..4].copy_from_slice(&tag);
    msg[4..].copy_from_slice(&value.to_le_bytes());
    s.write_all(&msg).map_err(lost)
}

fn read_control(s: &mut TcpStream) -> Result<([u8; 4], u64), TransportError> {
    let mut msg = [0u8; 12];
    s.read_exact(&mut msg).map_err(lost)?;
    Ok((
        msg[..4].try_into().unwrap(),
        u64::from_le_bytes(msg[4..].try_into().unwrap()),
    ))
}

fn read_message(s: &mut TcpStream) -> Result<Message, TransportError> {
    let mut head = [0u8; HEADER_LEN];
    s.read_exact(&mut head[..4]).map_err(lost)?;
    if head[..4] == FIN {
        let mut v = [0u8; 8];
        s.read_exact(&mut v).map_err(lost)?;
        return Ok(Message::Fin(u64::from_le_bytes(v)));
    }
    s.read_exact(&mut head[4..]).map_err(lost)?;
    let h = parse_header(&head)?;
    let mut frame = vec![0u8; HEADER_LEN + h.count * 8 + CRC_LEN];
    frame[..HEADER_LEN].copy_from_slice(&head);
    s.read_exact(&mut frame[HEADER_LEN..]).map_err(lost)?;
    Ok(Message::Frame(decode_block(&frame)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionStats {
    pub blocks_sent: u64,
    pub tags_sent: u64,
    pub bytes_sent: u64,
    pub retransmissions: u64,
    pub reconnects: u64,
    pub elapsed: Duration,
    pub tags_per_second: f64,
    pub bytes_per_second: f64,
}

impl SessionStats {
    fn finish(mut self, start: Instant) -> Self {
        self.elapsed = start.elapsed();
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.tags_per_second = self.tags_sent as f64 / secs;
            self.bytes_per_second = self.bytes_sent as f64 / secs;
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct SenderConfig {
    pub block_tags: usize,
    pub station: Station,
    pub connect_attempts: usize,
    pub retry_delay: Duration,
    /// Pace transmission to this many tags per second.
    pub rate_limit: Option<f64>,
    /// Drop the first connection right after this many frames.
    pub disconnect_after: Option<u64>,
    /// Flip a payload bit in the first transmission of this block.
    pub corrupt_block: Option<u64>,
}

impl Default for SenderConfig {
    fn default() -> Self {
        SenderConfig {
            block_tags: MAX_BLOCK_TAGS,
            station: Station::Bob,
            connect_attempts: 20,
            retry_delay: Duration::from_millis(100),
            rate_limit: None,
            disconnect_after: None,
            corrupt_block: None,
        }
    }
}

/// Sends `tags` to a [`Receiver`] at `addr`, reconnecting and resuming
/// after connection loss.
pub fn send_stream<A: ToSocketAddrs>(
    addr: A,
    tags: &[TimeTag],
    cfg: &SenderConfig,
) -> Result<SessionStats, TransportError> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let blocks = split_blocks(tags, cfg.station, cfg.block_tags);
    let frames = blocks
        .iter()
        .map(encode_block)
        .collect::<Result<Vec<_>, _>>()?;
    let start = Instant::now();
    let mut stats = SessionStats::default();
    let mut fault_pending = cfg.disconnect_after;
    let mut corrupt_pending = cfg.corrupt_block;
    let mut connections = 0u64;

    loop {
        let mut stream = connect(&addrs, cfg, connections == 0)?;
        connections += 1;
        if connections > 1 {
            stats.reconnects += 1;
        }
        let mut frames_this_connection = 0u64;
        let outcome = (|| -> Result<(), TransportError> {
            let (tag, mut next) = read_control(&mut stream)?;
            if tag != ACK {
                return Err(TransportError::Protocol(
                    "expected resume acknowledgment".into(),
                ));
            }
            let mut retries = 0;
            while (next as usize) < frames.len() {
                if let Some(rate) = cfg.rate_limit {
                    let sent: usize = blocks[..next as usize].iter().map(|b| b.tags.len()).sum();
                    let due = Duration::from_secs_f64(sent as f64 / rate);
                    if let Some(wait) = due.checked_sub(start.elapsed()) {
                        thread::sleep(wait);
                    }
                }
                let frame = &frames[next as usize];
                if corrupt_pending == Some(next) {
                    corrupt_pending = None;
                    let mut bad = frame.clone();
                    if bad.len() > HEADER_LEN + CRC_LEN {
                        bad[HEADER_LEN] ^= 1;
                    } else {
                        let n = bad.len();
                        bad[n - 1] ^= 1;
                    }
                    stream.write_all(&bad).map_err(lost)?;
                } else {
                    stream.write_all(frame).map_err(lost)?;
                }
                frames_this_connection += 1;
                if fault_pending == Some(frames_this_connection) {
                    fault_pending = None;
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                    return Err(lost(io::Error::new(
                        io::ErrorKind::ConnectionAborted,
                        "injected disconnect",
                    )));
                }
                match read_control(&mut stream)? {
                    (t, n) if t == ACK && n == next + 1 => {
                        stats.blocks_sent += 1;
                        stats.tags_sent += blocks[next as usize].tags.len() as u64;
                        stats.bytes_sent += frame.len() as u64;
                        next = n;
                        retries = 0;
                    }
                    (t, s) if t == NAK && s == next => {
                        retries += 1;
                        stats.retransmissions += 1;
                        if retries > MAX_RETRANSMITS {
                            return Err(TransportError::ChecksumMismatch(s));
                        }
                    }
                    (t, v) => {
                        return Err(TransportError::Protocol(format!(
                            "unexpected reply {:?} {v} to block {next}",
                            String::from_utf8_lossy(&t)
                        )))
                    }
                }
            }
            write_control(&mut stream, FIN, frames.len() as u64)?;
            match read_control(&mut stream)? {
                (t, n) if t == ACK && n == frames.len() as u64 => Ok(()),
                (_, n) => Err(TransportError::SequenceGap {
                    expected: frames.len() as u64,
                    got: n,
                }),
            }
        })();
        match outcome {
            Ok(()) => return Ok(stats.finish(start)),
            Err(e) if e.is_resumable() => thread::sleep(cfg.retry_delay),
            Err(e) => return Err(e),
        }
    }
}

fn connect(
    addrs: &[SocketAddr],
    cfg: &SenderConfig,
    first: bool,
) -> Result<TcpStream, TransportError> {
    // a refused first connection means nobody is listening
    let attempts = if first {
        1
    } else {
        cfg.connect_attempts.max(1)
    };
    let mut last = None;
    for i in 0..attempts {
        if i > 0 {
            thread::sleep(cfg.retry_delay);
        }
        match TcpStream::connect(addrs) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(TransportError::Io(last.unwrap_or_else(|| {
        io::Error::other("no address to connect to")
    })))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReceiveStats {
    pub blocks: u64,
    pub tags: u64,
    pub duplicates: u64,
    pub checksum_failures: u64,
    pub connections: u64,
}

/// Accepts sender connections and delivers blocks in sequence order.
#[derive(Debug)]
pub struct Receiver {
    listener: TcpListener,
    /// How long to wait for a (re)connection or for data on an open one.
    pub timeout: Duration,
}

impl Receiver {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self, TransportError> {
        Ok(Receiver {
            listener: TcpListener::bind(addr)?,
            timeout: Duration::from_secs(30),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    fn accept(&self) -> Result<TcpStream, TransportError> {
        self.listener.set_nonblocking(true)?;
        let deadline = Instant::now() + self.timeout;
        loop {
            match self.listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_read_timeout(Some(self.timeout))?;
                    s.set_nodelay(true)?;
                    return Ok(s);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Io(io::Error::new(
                            io::ErrorKind::TimedOut,
                            "no sender connected",
                        )));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Runs one session to completion, passing each new block to `sink` in
    /// order. Dropped connections are re-accepted and resumed.
    pub fn receive<F: FnMut(TagBlock)>(&self, mut sink: F) -> Result<ReceiveStats, TransportError> {
        let mut stats = ReceiveStats::default();
        let mut expected = 0u64;
        loop {
            let mut stream = self.accept()?;
            stats.connections += 1;
            let outcome = (|| -> Result<(), TransportError> {
                write_control(&mut stream, ACK, expected)?;
                loop {
                    match read_message(&mut stream)? {
                        Message::Fin(total) => {
                            if total != expected {
                                return Err(TransportError::SequenceGap {
                                    expected,
                                    got: total,
                                });
                            }
                            write_control(&mut stream, ACK, expected)?;
                            return Ok(());
                        }
                        Message::Frame(Err(TransportError::ChecksumMismatch(seq))) => {
                            stats.checksum_failures += 1;
                            write_control(&mut stream, NAK, seq)?;
                        }
                        Message::Frame(Err(e)) => return Err(e),
                        Message::Frame(Ok(block)) => {
                            let seq = block.sequence_number;
                            if seq < expected {
                                stats.duplicates += 1;
                            } else if seq > expected {
                                return Err(TransportError::SequenceGap { expected, got: seq });
                            } else {
                                stats.blocks += 1;
                                stats.tags += block.tags.len() as u64;
                                expected += 1;
                                sink(block);
                            }
                            write_control(&mut stream, ACK, expected)?;
                        }
                    }
                }
            })();
            match outcome {
                Ok(()) => return Ok(stats),
                Err(e) if e.is_resumable() => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs [`Self::receive`] on its own thread, delivering blocks through an
    /// ordered queue.
    pub fn spawn(
        self,
    ) -> (
        thread::JoinHandle<Result<ReceiveStats, TransportError>>,
        mpsc::Receiver<TagBlock>,
    ) {
        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            self.receive(|b| {
                let _ = tx.send(b);
            })
        });
        (handle, rx)
    }
}
