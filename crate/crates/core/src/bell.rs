//! Polarization correlations, the CHSH parameter and QBER from coincidences.

use std::f64::consts::SQRT_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Basis, MeasurementSettings};
use crate::sync::CoincidenceEvent;
use crate::timetag::Channel;

/// Tsirelson bound 2√2, the quantum prediction at the optimal angles.
pub const S_QM: f64 = 2.0 * SQRT_2;

/// Basis pairs in CHSH order: (φA, φB), (φA, φ̃B), (φ̃A, φB), (φ̃A, φ̃B).
pub const CHSH_ORDER: [(Basis, Basis); 4] = [
    (Basis::First, Basis::First),
    (Basis::First, Basis::Second),
    (Basis::Second, Basis::First),
    (Basis::Second, Basis::Second),
];

#[derive(Debug, Error, PartialEq)]
pub enum BellError {
    #[error("no coincidences for analyzer settings ({angle_a}°, {angle_b}°)")]
    EmptyBasis { angle_a: f64, angle_b: f64 },
}

/// Coincidence counts indexed by (Alice channel, Bob channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceMatrix {
    pub counts: [[u64; 4]; 4],
    pub settings: MeasurementSettings,
    /// Locked seconds the counts were collected over.
    pub accumulation_span: f64,
}

impl CoincidenceMatrix {
    pub fn new(settings: MeasurementSettings) -> Self {
        CoincidenceMatrix {
            counts: [[0; 4]; 4],
            settings,
            accumulation_span: 0.0,
        }
    }

    pub fn from_counts(counts: [[u64; 4]; 4], settings: MeasurementSettings) -> Self {
        CoincidenceMatrix {
            counts,
            settings,
            accumulation_span: 0.0,
        }
    }

    pub fn accumulate(events: &[CoincidenceEvent], settings: MeasurementSettings) -> Self {
        let mut m = Self::new(settings);
        m.add_events(events);
        m
    }

    /// Events involving a GPS marker are ignored.
    pub fn add_events(&mut self, events: &[CoincidenceEvent]) {
        for e in events {
            if let (Some(i), Some(j)) = (
                e.alice.channel().detector_index(),
                e.bob.channel().detector_index(),
            ) {
                self.counts[i][j] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &CoincidenceMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(other_row) {
                *c += o;
            }
        }
        self.accumulation_span += other.accumulation_span;
    }

    pub fn get(&self, alice: Channel, bob: Channel) -> u64 {
        match (alice.detector_index(), bob.detector_index()) {
            (Some(i), Some(j)) => self.counts[i][j],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    #[serde(rename = "E")]
    pub e: f64,
    pub sigma: f64,
    pub angle_a: f64,
    pub angle_b: f64,
}

/// E = (P − M)/(P + M) where P counts equal outcomes (both "+" or both "−")
/// and M opposite ones; sigma is first-order Poisson propagation,
/// 2√(P·M/N³).
pub fn correlation_e(
    m: &CoincidenceMatrix,
    alice: Basis,
    bob: Basis,
) -> Result<CorrelationResult, BellError> {
    let (a_plus, a_minus) = alice.channels();
    let (b_plus, b_minus) = bob.channels();
    let angle_a = m.settings.alice_angle(a_plus).unwrap_or(f64::NAN);
    let angle_b = m.settings.bob_angle(b_plus).unwrap_or(f64::NAN);
    let p = (m.get(a_plus, b_plus) + m.get(a_minus, b_minus)) as f64;
    let q = (m.get(a_plus, b_minus) + m.get(a_minus, b_plus)) as f64;
    let n = p + q;
    if n == 0.0 {
        return Err(BellError::EmptyBasis { angle_a, angle_b });
    }
    Ok(CorrelationResult {
        e: (p - q) / n,
        sigma: 2.0 * (p * q / (n * n * n)).sqrt(),
        angle_a,
        angle_b,
    })
}

/// The four correlations in [`CHSH_ORDER`].
pub fn chsh_correlations(m: &CoincidenceMatrix) -> Result<[CorrelationResult; 4], BellError> {
    let mut out = [CorrelationResult {
        e: 0.0,
        sigma: 0.0,
        angle_a: 0.0,
        angle_b: 0.0,
    }; 4];
    for (slot, (a, b)) in out.iter_mut().zip(CHSH_ORDER) {
        *slot = correlation_e(m, a, b)?;
    }
    Ok(out)
}

/// S = |E₁ − E₂ + E₃ + E₄| with uncorrelated errors added in quadrature.
pub fn bell_s(c: &[CorrelationResult; 4]) -> (f64, f64) {
    let s = (c[0].e - c[1].e + c[2].e + c[3].e).abs();
    let sigma = c.iter().map(|r| r.sigma * r.sigma).sum::<f64>().sqrt();
    (s, sigma)
}

pub fn qber_from_s(s: f64) -> f64 {
    (0.5 * (1.0 - s / S_QM)).clamp(0.0, 1.0)
}

pub fn visibility_from_s(s: f64) -> f64 {
    (s / S_QM).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellReport {
    pub matrix: CoincidenceMatrix,
    pub correlations: [CorrelationResult; 4],
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "S_sigma")]
    pub s_sigma: f64,
    #[serde(rename = "S_QM")]
    pub s_qm: f64,
    pub qber: f64,
    pub visibility: f64,
    pub coincidence_total: u64,
    pub locked_seconds: f64,
}

impl BellReport {
    pub fn from_matrix(matrix: CoincidenceMatrix) -> Result<Self, BellError> {
        let correlations = chsh_correlations(&matrix)?;
        let (s, s_sigma) = bell_s(&correlations);
        Ok(BellReport {
            correlations,
            s,
            s_sigma,
            s_qm: S_QM,
            qber: qber_from_s(s),
            visibility: visibility_from_s(s),
            coincidence_total: matrix.total(),
            locked_seconds: matrix.accumulation_span,
            matrix,
        })
    }

    /// Coincidence table, correlation table and summary lines.
    pub fn render_text(&self) -> String {
        let st = &self.matrix.settings;
        let mut out = String::new();
        let _ = writeln!(out, "Coincidence counts (rows: Alice, columns: Bob)");
        let _ = write!(out, "{:>8}", "");
        for a in st.bob_angles {
            let _ = write!(out, "{:>9}", format!("{a}°"));
        }
        out.push('\n');
        for (row, a) in self.matrix.counts.iter().zip(st.alice_angles) {
            let _ = write!(out, "{:>8}", format!("{a}°"));
            for c in row {
                let _ = write!(out, "{c:>9}");
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "Polarization correlations");
        for c in &self.correlations {
            let _ = writeln!(
                out,
                "  E({:>5}°, {:>5}°) = {:+.3} ± {:.3}",
                c.angle_a, c.angle_b, c.e, c.sigma
            );
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "S          = {:.3} ± {:.3}  (local bound 2, quantum {:.3})",
            self.s, self.s_sigma, self.s_qm
        );
        let _ = writeln!(out, "QBER       = {:.2} %", 100.0 * self.qber);
        let _ = writeln!(out, "visibility = {:.3}", self.visibility);
        let _ = writeln!(
            out,
            "coincidences {} over {:.1} locked seconds",
            self.coincidence_total, self.locked_seconds
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timetag::TimeTag;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    const TABLE_1: [[u64; 4]; 4] = [
        [1469, 5763, 6500, 1067],
        [4015, 1305, 1483, 2959],
        [2171, 9103, 2633, 6357],
        [1701, 1701, 6889, 1090],
    ];

    fn result(e: f64) -> CorrelationResult {
        CorrelationResult {
            e,
            sigma: 0.0,
            angle_a: 0.0,
            angle_b: 0.0,
        }
    }

    #[test]
    fn table_counts_give_published_correlations() {
        let m = CoincidenceMatrix::from_counts(TABLE_1, MeasurementSettings::default());
        let c = chsh_correlations(&m).unwrap();
        assert!((c[0].e + 0.558).abs() < 1e-3);
        assert!((c[1].e - 0.575).abs() < 1e-3);
        assert!((c[3].e + 0.561).abs() < 1e-3);
        assert_eq!((c[0].angle_a, c[0].angle_b), (0.0, 22.5));
        assert_eq!((c[3].angle_a, c[3].angle_b), (45.0, 67.5));
        // the printed 135°/22.5° count does not reproduce the printed −0.578
        assert!((c[2].e + 0.4723).abs() < 1e-3);
    }

    #[test]
    fn perfect_correlation_has_zero_sigma() {
        let mut counts = [[0; 4]; 4];
        counts[0][0] = 10;
        counts[1][1] = 5;
        let m = CoincidenceMatrix::from_counts(counts, MeasurementSettings::default());
        let c = correlation_e(&m, Basis::First, Basis::First).unwrap();
        assert_eq!((c.e, c.sigma), (1.0, 0.0));
        assert!(matches!(
            correlation_e(&m, Basis::Second, Basis::First),
            Err(BellError::EmptyBasis { angle_a, angle_b }) if angle_a == 45.0 && angle_b == 22.5
        ));
    }

    #[test]
    fn chsh_anchor_points() {
        let (s, _) = bell_s(&[
            result(-0.558),
            result(0.575),
            result(-0.578),
            result(-0.561),
        ]);
        assert!((s - 2.272).abs() < 1e-9);
        let h = FRAC_1_SQRT_2;
        let (s, _) = bell_s(&[result(-h), result(h), result(-h), result(-h)]);
        assert!((s - S_QM).abs() < 1e-12);
        assert_eq!(bell_s(&[result(0.0); 4]).0, 0.0);
        assert!((qber_from_s(2.27) - 0.0987).abs() < 5e-5);
        assert_eq!(qber_from_s(S_QM), 0.0);
        assert_eq!(qber_from_s(0.0), 0.5);
        assert!((visibility_from_s(2.27) - 0.803).abs() < 1e-3);
        assert_eq!(visibility_from_s(S_QM), 1.0);
        assert!((visibility_from_s(0.93 * S_QM) - 0.93).abs() < 1e-12);
    }

    #[test]
    fn sigma_adds_in_quadrature() {
        let c = [0.01, 0.02, 0.02, 0.04].map(|s| CorrelationResult {
            sigma: s,
            ..result(0.0)
        });
        assert!((bell_s(&c).1 - 0.05).abs() < 1e-15);
    }

    #[test]
    fn accumulate_counts_pairs() {
        let mut events = Vec::new();
        for (i, a) in Channel::DETECTORS.into_iter().enumerate() {
            for (j, b) in Channel::DETECTORS.into_iter().enumerate() {
                let t = (i * 4 + j) as u64 * 1000;
                events.push(CoincidenceEvent {
                    alice: TimeTag::new(t, a).unwrap(),
                    bob: TimeTag::new(t, b).unwrap(),
                    residual: 0.0,
                });
            }
        }
        let m = CoincidenceMatrix::accumulate(&events, MeasurementSettings::default());
        assert_eq!(m.counts, [[1; 4]; 4]);
        assert_eq!(
            CoincidenceMatrix::accumulate(&[], MeasurementSettings::default()).total(),
            0
        );
    }

    #[test]
    fn report_serializes() {
        let m = CoincidenceMatrix::from_counts(TABLE_1, MeasurementSettings::default());
        let r = BellReport::from_matrix(m).unwrap();
        assert_eq!(r.coincidence_total, TABLE_1.iter().flatten().sum::<u64>());
        let text = r.render_text();
        assert!(text.contains("E(    0°,  22.5°) = -0.558"));
    }

    proptest! {
        #[test]
        fn merge_is_entrywise_sum(
            a in proptest::array::uniform4(proptest::array::uniform4(0u64..1000)),
            b in proptest::array::uniform4(proptest::array::uniform4(0u64..1000)),
        ) {
            let mut m = CoincidenceMatrix::from_counts(a, MeasurementSettings::default());
            m.merge(&CoincidenceMatrix::from_counts(b, MeasurementSettings::default()));
            prop_assert_eq!(m.total(), a.iter().flatten().sum::<u64>() + b.iter().flatten().sum::<u64>());
        }

        #[test]
        fn e_is_bounded_and_linear_maps_hit_anchors(
            counts in proptest::array::uniform4(proptest::array::uniform4(0u64..500)),
            s in 0.0f64..S_QM,
        ) {
            let m = CoincidenceMatrix::from_counts(counts, MeasurementSettings::default());
            for (a, b) in CHSH_ORDER {
                if let Ok(c) = correlation_e(&m, a, b) {
                    prop_assert!(c.e.abs() <= 1.0 && c.sigma >= 0.0);
                }
            }
            prop_assert!((qber_from_s(s) - 0.5 * (1.0 - visibility_from_s(s))).abs() < 1e-15);
        }
    }
}
