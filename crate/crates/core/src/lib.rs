//! Coincidence recovery between two independently clocked photon-counting
//! stations.
//!
//! Each station records time tags (125 ps ticks plus a detector channel) on
//! its own clock. [`sync`] recovers the relative offset and drift from the
//! cross-correlation of the two tag lists, holds a coincidence lock and
//! extracts coincident pairs; [`bell`] turns those pairs into polarization
//! correlations, a CHSH value and a QBER estimate. [`sim`] produces realistic
//! streams for both stations, and [`transport`] ships one station's tags to
//! the other over a TCP connection.

pub mod bell;
pub mod sim;
pub mod sync;
pub mod timetag;
pub mod transport;
