//! Monte-Carlo model of an entangled-pair source feeding two independently
//! clocked four-channel polarization analyzers.
//!
//! The generator does not draw undetected pairs. Each second, detections are
//! split into three independent Poisson processes by thinning: pairs seen by
//! both stations, by Alice only, and by Bob only. Their rates are
//! `p·ηA·ηB`, `p·ηA·(1−ηB)` and `p·(1−ηA)·ηB`, which is the same point process
//! as emitting every pair and flipping a survival coin per arm.
//!
//! Randomness comes from a single `ChaCha8Rng` seeded with
//! `ChaCha8Rng::seed_from_u64(seed)` and consumed in a fixed order, so a
//! (config, seed) pair always yields bit-identical streams.

use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timetag::{seconds_to_ticks, Channel, Station, TagStream, TimeTag, MAX_TICKS};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

/// Which of the two analyzer bases a photon was routed to by the 50/50 splitter.
/// `First` is the reflected path (channels 0/1), `Second` the transmitted one
/// (channels 2/3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    First,
    Second,
}

impl Basis {
    /// (channel for the "+" outcome, channel for the orthogonal "−" outcome)
    pub const fn channels(self) -> (Channel, Channel) {
        match self {
            Basis::First => (Channel::Ch0, Channel::Ch1),
            Basis::Second => (Channel::Ch2, Channel::Ch3),
        }
    }

    pub fn of_channel(ch: Channel) -> Option<Basis> {
        match ch {
            Channel::Ch0 | Channel::Ch1 => Some(Basis::First),
            Channel::Ch2 | Channel::Ch3 => Some(Basis::Second),
            Channel::GpsMarker => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationModel {
    /// Correlation visibility when Alice measures in her first (H/V) basis.
    pub visibility_hv: f64,
    /// Correlation visibility when Alice measures in her second (+/−) basis.
    pub visibility_pm: f64,
    /// Uncompensated rotation added to every Bob analyzer angle, degrees.
    pub rotation_error: f64,
}

impl Default for PolarizationModel {
    fn default() -> Self {
        PolarizationModel {
            visibility_hv: 0.96,
            visibility_pm: 0.90,
            rotation_error: 0.0,
        }
    }
}

impl PolarizationModel {
    pub fn ideal() -> Self {
        PolarizationModel {
            visibility_hv: 1.0,
            visibility_pm: 1.0,
            rotation_error: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("visibility_hv", self.visibility_hv),
            ("visibility_pm", self.visibility_pm),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !self.rotation_error.is_finite() {
            return Err(invalid("rotation_error must be finite"));
        }
        Ok(())
    }

    pub fn visibility_for(&self, alice_basis: Basis) -> f64 {
        match alice_basis {
            Basis::First => self.visibility_hv,
            Basis::Second => self.visibility_pm,
        }
    }
}

/// Analyzer angle behind each detector channel, plus the beam-splitter ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSettings {
    pub alice_angles: [f64; 4],
    pub bob_angles: [f64; 4],
    /// Probability that a photon takes the first (reflected) basis.
    pub basis_split: f64,
}

impl Default for MeasurementSettings {
    fn default() -> Self {
        MeasurementSettings {
            alice_angles: [0.0, 90.0, 45.0, 135.0],
            bob_angles: [22.5, 112.5, 67.5, 157.5],
            basis_split: 0.5,
        }
    }
}

impl MeasurementSettings {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.basis_split) {
            return Err(invalid(format!(
                "basis_split = {} is outside [0, 1]",
                self.basis_split
            )));
        }
        for (who, angles) in [("alice", &self.alice_angles), ("bob", &self.bob_angles)] {
            for pair in [(0, 1), (2, 3)] {
                let diff = (angles[pair.1] - angles[pair.0]).rem_euclid(180.0);
                if (diff - 90.0).abs() > 1e-9 {
                    return Err(invalid(format!(
                        "{who} channels {} and {} are not orthogonal ({} vs {})",
                        pair.0, pair.1, angles[pair.0], angles[pair.1]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn alice_angle(&self, ch: Channel) -> Option<f64> {
        ch.detector_index().map(|i| self.alice_angles[i])
    }

    pub fn bob_angle(&self, ch: Channel) -> Option<f64> {
        ch.detector_index().map(|i| self.bob_angles[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDetectorConfig {
    /// Pairs per second reaching both analyzers before any loss.
    pub pair_rate: f64,
    pub eta_alice: f64,
    /// Run-average Bob arm efficiency (link and detection).
    pub eta_bob: f64,
    pub dark_rate_alice: [f64; 4],
    pub dark_rate_bob: [f64; 4],
    /// Unpolarized stray light at Bob, summed over the four channels.
    pub background_rate_bob: f64,
    /// Standard deviation of the per-second log link efficiency.
    pub fluctuation_sigma: f64,
    /// Per-detection timing jitter, seconds.
    pub jitter_sigma: f64,
    /// True-time intervals `[start, end)` during which the link is blocked.
    pub outages: Vec<(f64, f64)>,
}

impl Default for LinkDetectorConfig {
    fn default() -> Self {
        NominalProfile::link()
    }
}

impl LinkDetectorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("pair_rate", self.pair_rate),
            ("background_rate_bob", self.background_rate_bob),
        ];
        for (name, v) in rates
            .into_iter()
            .chain(self.dark_rate_alice.iter().map(|&v| ("dark_rate_alice", v)))
            .chain(self.dark_rate_bob.iter().map(|&v| ("dark_rate_bob", v)))
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} = {v} must be a non-negative rate")));
            }
        }
        for (name, v) in [("eta_alice", self.eta_alice), ("eta_bob", self.eta_bob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("fluctuation_sigma", self.fluctuation_sigma),
            ("jitter_sigma", self.jitter_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} = {v} must be non-negative")));
            }
        }
        if self
            .outages
            .iter()
            .any(|&(s, e)| !(s.is_finite() && e.is_finite() && s <= e))
        {
            return Err(invalid(
                "outages must be finite intervals with start <= end",
            ));
        }
        Ok(())
    }

    fn in_outage(&self, t: f64) -> bool {
        self.outages.iter().any(|&(s, e)| t >= s && t < e)
    }
}

/// Maps true time onto a station's local clock:
/// `local = (1 + drift_fraction)·true + start_offset + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// Local clock reading at true time zero, seconds.
    pub start_offset: f64,
    pub drift_fraction: f64,
    pub phase_noise_sigma: f64,
    pub gps_jitter_sigma: f64,
    pub gps_enabled: bool,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel {
            start_offset: 0.0,
            drift_fraction: 0.0,
            phase_noise_sigma: 0.0,
            gps_jitter_sigma: 50e-9,
            gps_enabled: true,
        }
    }
}

/// Sanity bound on fractional drift; rubidium references sit near 5e-11.
pub const MAX_DRIFT_FRACTION: f64 = 1e-8;

impl ClockModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.start_offset.is_finite() {
            return Err(invalid("start_offset must be finite"));
        }
        if self.drift_fraction.is_nan() || self.drift_fraction.abs() > MAX_DRIFT_FRACTION {
            return Err(invalid(format!(
                "|drift_fraction| = {} exceeds {MAX_DRIFT_FRACTION}",
                self.drift_fraction
            )));
        }
        for (name, v) in [
            ("phase_noise_sigma", self.phase_noise_sigma),
            ("gps_jitter_sigma", self.gps_jitter_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn local_time(&self, true_time: f64) -> f64 {
        (1.0 + self.drift_fraction) * true_time + self.start_offset
    }

    pub fn true_time(&self, local: f64) -> f64 {
        (local - self.start_offset) / (1.0 + self.drift_fraction)
    }
}

/// Bob-local minus Alice-local reading for an event at Alice-local time
/// `alice_local`, ignoring noise.
pub fn true_offset(alice: &ClockModel, bob: &ClockModel, alice_local: f64) -> f64 {
    let t = alice.true_time(alice_local);
    bob.local_time(t) - alice_local
}

/// Bob drift relative to Alice, local seconds per Alice-local second.
pub fn relative_drift(alice: &ClockModel, bob: &ClockModel) -> f64 {
    (1.0 + bob.drift_fraction) / (1.0 + alice.drift_fraction) - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub link: LinkDetectorConfig,
    pub alice_clock: ClockModel,
    pub bob_clock: ClockModel,
    pub settings: MeasurementSettings,
    pub polarization: PolarizationModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        NominalProfile::config()
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.link.validate()?;
        self.alice_clock.validate()?;
        self.bob_clock.validate()?;
        self.settings.validate()?;
        self.polarization.validate()
    }
}

/// Calibration of the default configuration against the measured
/// free-space run: Bob singles 7200/s of which 5850/s background, 800/s dark
/// per Bob channel and 1200/s per Alice channel, 1.4 % average link
/// efficiency, 84/s coincidences inside a ±7 ns window and S ≈ 2.27.
pub struct NominalProfile;

impl NominalProfile {
    pub const BOB_SINGLES: f64 = 7200.0;
    pub const BOB_BACKGROUND: f64 = 5850.0;
    pub const BOB_DARK_PER_CHANNEL: f64 = 800.0;
    pub const ALICE_DARK_PER_CHANNEL: f64 = 1200.0;
    pub const ETA_BOB: f64 = 0.014;
    pub const COINCIDENCE_RATE: f64 = 84.0;
    pub const WINDOW_HALF_WIDTH: f64 = 7e-9;
    pub const TARGET_S: f64 = 2.27;

    pub fn pair_rate() -> f64 {
        (Self::BOB_SINGLES - Self::BOB_BACKGROUND) / Self::ETA_BOB
    }

    /// Alice efficiency such that true plus accidental coincidences in the
    /// window add up to the target rate.
    pub fn eta_alice() -> f64 {
        let p = Self::pair_rate();
        let acc_per_alice_single = Self::BOB_SINGLES * 2.0 * Self::WINDOW_HALF_WIDTH;
        let alice_dark = 4.0 * Self::ALICE_DARK_PER_CHANNEL;
        // 84 = p·ηA·ηB + (p·ηA + dark)·rB·2τ, linear in ηA
        (Self::COINCIDENCE_RATE - alice_dark * acc_per_alice_single)
            / (p * Self::ETA_BOB + p * acc_per_alice_single)
    }

    pub fn accidental_rate() -> f64 {
        let alice_singles =
            Self::pair_rate() * Self::eta_alice() + 4.0 * Self::ALICE_DARK_PER_CHANNEL;
        alice_singles * Self::BOB_SINGLES * 2.0 * Self::WINDOW_HALF_WIDTH
    }

    /// Rotation that brings S down from the intrinsic-visibility value to the
    /// target, given that accidentals carry no correlation.
    ///
    /// With every Bob angle rotated by r, the CHSH sum at the default angles
    /// is √2·(V_hv + V_pm)·cos 2r.
    pub fn rotation_error() -> f64 {
        let pol = PolarizationModel::default();
        let true_fraction = 1.0 - Self::accidental_rate() / Self::COINCIDENCE_RATE;
        let s_unrotated = SQRT_2 * (pol.visibility_hv + pol.visibility_pm) * true_fraction;
        0.5 * (Self::TARGET_S / s_unrotated).acos().to_degrees()
    }

    pub fn link() -> LinkDetectorConfig {
        LinkDetectorConfig {
            pair_rate: Self::pair_rate(),
            eta_alice: Self::eta_alice(),
            eta_bob: Self::ETA_BOB,
            dark_rate_alice: [Self::ALICE_DARK_PER_CHANNEL; 4],
            dark_rate_bob: [Self::BOB_DARK_PER_CHANNEL; 4],
            background_rate_bob: Self::BOB_BACKGROUND - 4.0 * Self::BOB_DARK_PER_CHANNEL,
            fluctuation_sigma: 0.5,
            jitter_sigma: 1e-9,
            outages: Vec::new(),
        }
    }

    pub fn config() -> SimConfig {
        SimConfig {
            link: Self::link(),
            alice_clock: ClockModel {
                start_offset: 2e-3,
                ..ClockModel::default()
            },
            bob_clock: ClockModel {
                start_offset: 5.217e-3,
                drift_fraction: 5e-11,
                ..ClockModel::default()
            },
            settings: MeasurementSettings::default(),
            polarization: PolarizationModel {
                rotation_error: Self::rotation_error(),
                ..PolarizationModel::default()
            },
        }
    }
}

/// Joint outcome probabilities for one pair of analyzer settings.
///
/// `+` means the photon leaves through the channel labelled with the given
/// angle, `−` through its orthogonal partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointProbabilities {
    pub pp: f64,
    pub pm: f64,
    pub mp: f64,
    pub mm: f64,
}

impl JointProbabilities {
    pub fn sum(&self) -> f64 {
        self.pp + self.pm + self.mp + self.mm
    }

    pub fn correlation(&self) -> f64 {
        self.pp + self.mm - self.pm - self.mp
    }
}

/// Singlet-state statistics mixed with white noise:
/// `E = −V·cos 2(a − b)` and `P(i, j) = (1 + i·j·E) / 4`.
pub fn joint_outcome_probabilities(
    angle_a: f64,
    angle_b: f64,
    visibility: f64,
) -> JointProbabilities {
    let e = -visibility * (2.0 * (angle_a - angle_b).to_radians()).cos();
    let same = ((1.0 + e) / 4.0).max(0.0);
    let diff = ((1.0 - e) / 4.0).max(0.0);
    JointProbabilities {
        pp: same,
        pm: diff,
        mp: diff,
        mm: same,
    }
}

fn pick_basis<R: Rng + ?Sized>(split: f64, rng: &mut R) -> Basis {
    if rng.random::<f64>() < split {
        Basis::First
    } else {
        Basis::Second
    }
}

/// Outcome channels for one detected pair with both bases already chosen.
pub fn sample_pair_channels_in<R: Rng + ?Sized>(
    settings: &MeasurementSettings,
    pol: &PolarizationModel,
    alice_basis: Basis,
    bob_basis: Basis,
    rng: &mut R,
) -> (Channel, Channel) {
    let (a_plus, a_minus) = alice_basis.channels();
    let (b_plus, b_minus) = bob_basis.channels();
    let angle_a = settings.alice_angles[a_plus.detector_index().unwrap()];
    let angle_b = settings.bob_angles[b_plus.detector_index().unwrap()] + pol.rotation_error;
    let p = joint_outcome_probabilities(angle_a, angle_b, pol.visibility_for(alice_basis));
    let u: f64 = rng.random();
    if u < p.pp {
        (a_plus, b_plus)
    } else if u < p.pp + p.pm {
        (a_plus, b_minus)
    } else if u < p.pp + p.pm + p.mp {
        (a_minus, b_plus)
    } else {
        (a_minus, b_minus)
    }
}

/// Routes each photon through its station's beam-splitter, then samples the
/// joint polarization outcome.
pub fn sample_pair_channels<R: Rng + ?Sized>(
    settings: &MeasurementSettings,
    pol: &PolarizationModel,
    rng: &mut R,
) -> (Channel, Channel) {
    let alice_basis = pick_basis(settings.basis_split, rng);
    let bob_basis = pick_basis(settings.basis_split, rng);
    sample_pair_channels_in(settings, pol, alice_basis, bob_basis, rng)
}

/// Ground truth recorded alongside a simulated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTruth {
    pub duration: f64,
    pub seed: u64,
    pub alice_clock: ClockModel,
    pub bob_clock: ClockModel,
    /// Bob efficiency actually applied in each true second (outages excluded).
    pub bob_efficiency: Vec<f64>,
    /// Number of pairs detected by both stations.
    pub true_pairs: u64,
}

impl SimTruth {
    pub fn offset_at(&self, alice_local: f64) -> f64 {
        true_offset(&self.alice_clock, &self.bob_clock, alice_local)
    }

    pub fn relative_drift(&self) -> f64 {
        relative_drift(&self.alice_clock, &self.bob_clock)
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub alice: TagStream,
    pub bob: TagStream,
    pub truth: SimTruth,
}

struct StationBuffer<'a> {
    clock: &'a ClockModel,
    phase_noise: Option<Normal<f64>>,
    tags: Vec<TimeTag>,
}

impl<'a> StationBuffer<'a> {
    fn new(clock: &'a ClockModel, capacity: usize) -> Self {
        let phase_noise = (clock.phase_noise_sigma > 0.0)
            .then(|| Normal::new(0.0, clock.phase_noise_sigma).unwrap());
        StationBuffer {
            clock,
            phase_noise,
            tags: Vec::with_capacity(capacity),
        }
    }

    /// Records an event at `true_time`. Events that fall before the local
    /// clock reads zero happen before recording starts and are dropped.
    fn record<R: Rng + ?Sized>(&mut self, true_time: f64, channel: Channel, rng: &mut R) {
        let mut local = self.clock.local_time(true_time);
        if let Some(n) = &self.phase_noise {
            local += n.sample(rng);
        }
        self.push_local(local, channel);
    }

    fn push_local(&mut self, local: f64, channel: Channel) {
        if local < 0.0 {
            return;
        }
        let ticks = seconds_to_ticks(local);
        if ticks <= MAX_TICKS {
            self.tags.push(TimeTag::new(ticks, channel).unwrap());
        }
    }
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).unwrap().sample(rng) as u64
    }
}

/// Simulates `duration` seconds of both stations.
pub fn generate_streams(duration: f64, cfg: &SimConfig, seed: u64) -> Result<SimOutput, SimError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(invalid(format!("duration = {duration} must be positive")));
    }
    cfg.validate()?;
    let link = &cfg.link;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let seconds = duration.ceil() as usize;
    let mut factors: Vec<f64> = (0..seconds)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (link.fluctuation_sigma * z).exp()
        })
        .collect();
    // eta_bob is the run-average efficiency: rescale the draws to mean one
    let mean = factors.iter().sum::<f64>() / seconds as f64;
    factors.iter_mut().for_each(|f| *f /= mean);
    let bob_eff: Vec<f64> = factors
        .iter()
        .map(|f| (link.eta_bob * f).min(1.0))
        .collect();

    let alice_rate = link.pair_rate * link.eta_alice + link.dark_rate_alice.iter().sum::<f64>();
    let bob_rate = link.pair_rate * link.eta_bob
        + link.dark_rate_bob.iter().sum::<f64>()
        + link.background_rate_bob;
    let mut alice = StationBuffer::new(
        &cfg.alice_clock,
        (alice_rate * duration * 1.05) as usize + 16,
    );
    let mut bob = StationBuffer::new(&cfg.bob_clock, (bob_rate * duration * 1.05) as usize + 16);
    let jitter = (link.jitter_sigma > 0.0).then(|| Normal::new(0.0, link.jitter_sigma).unwrap());
    let jitter_of = |rng: &mut ChaCha8Rng| jitter.as_ref().map_or(0.0, |n| n.sample(rng));
    let (settings, pol) = (&cfg.settings, &cfg.polarization);
    let mut true_pairs = 0u64;

    for (k, &eta_b) in bob_eff.iter().enumerate() {
        let t0 = k as f64;
        let dt = (duration - t0).min(1.0);
        let p = link.pair_rate;
        let eta_a = link.eta_alice;

        let n_both = poisson_count(p * eta_a * eta_b * dt, &mut rng);
        for _ in 0..n_both {
            let t = t0 + rng.random::<f64>() * dt;
            let (ca, cb) = sample_pair_channels(settings, pol, &mut rng);
            let ta = t + jitter_of(&mut rng);
            let tb = t + jitter_of(&mut rng);
            alice.record(ta, ca, &mut rng);
            if !link.in_outage(t) {
                bob.record(tb, cb, &mut rng);
                true_pairs += 1;
            }
        }
        let n_alice_only = poisson_count(p * eta_a * (1.0 - eta_b) * dt, &mut rng);
        for _ in 0..n_alice_only {
            let t = t0 + rng.random::<f64>() * dt;
            let (ca, _) = sample_pair_channels(settings, pol, &mut rng);
            alice.record(t + jitter_of(&mut rng), ca, &mut rng);
        }
        let n_bob_only = poisson_count(p * (1.0 - eta_a) * eta_b * dt, &mut rng);
        for _ in 0..n_bob_only {
            let t = t0 + rng.random::<f64>() * dt;
            let (_, cb) = sample_pair_channels(settings, pol, &mut rng);
            let tb = t + jitter_of(&mut rng);
            if !link.in_outage(t) {
                bob.record(tb, cb, &mut rng);
            }
        }

        for (station, rates) in [
            (&mut alice, &link.dark_rate_alice),
            (&mut bob, &link.dark_rate_bob),
        ] {
            for (i, &rate) in rates.iter().enumerate() {
                let ch = Channel::DETECTORS[i];
                for _ in 0..poisson_count(rate * dt, &mut rng) {
                    let t = t0 + rng.random::<f64>() * dt;
                    station.record(t, ch, &mut rng);
                }
            }
        }
        for _ in 0..poisson_count(link.background_rate_bob * dt, &mut rng) {
            let t = t0 + rng.random::<f64>() * dt;
            let ch = Channel::DETECTORS[rng.random_range(0..4)];
            bob.record(t, ch, &mut rng);
        }
    }

    for station in [&mut alice, &mut bob] {
        if !station.clock.gps_enabled {
            continue;
        }
        let gps = Normal::new(0.0, station.clock.gps_jitter_sigma).unwrap();
        let mut k = 0u64;
        while (k as f64) < duration {
            let local = station.clock.local_time(k as f64) + gps.sample(&mut rng);
            station.push_local(local, Channel::GpsMarker);
            k += 1;
        }
    }

    let label = format!("sim-seed-{seed}");
    let alice = TagStream::from_unsorted(Station::Alice, label.clone(), alice.tags);
    let bob = TagStream::from_unsorted(Station::Bob, label, bob.tags);
    let mut bob_efficiency = bob_eff;
    for (k, e) in bob_efficiency.iter_mut().enumerate() {
        if link.in_outage(k as f64) {
            *e = 0.0;
        }
    }
    Ok(SimOutput {
        alice,
        bob,
        truth: SimTruth {
            duration,
            seed,
            alice_clock: cfg.alice_clock,
            bob_clock: cfg.bob_clock,
            bob_efficiency,
            true_pairs,
        },
    })
}

/// Analytic CHSH value for the simulator's noise model at the given settings,
/// without accidentals.
pub fn analytic_chsh(settings: &MeasurementSettings, pol: &PolarizationModel) -> f64 {
    let e = |ai: usize, bi: usize| {
        let v = if ai < 2 {
            pol.visibility_hv
        } else {
            pol.visibility_pm
        };
        joint_outcome_probabilities(
            settings.alice_angles[ai],
            settings.bob_angles[bi] + pol.rotation_error,
            v,
        )
        .correlation()
    };
    (e(0, 0) - e(0, 2) + e(2, 0) + e(2, 2)).abs()
}
