//! Synthetic CAN traffic from a latent vehicle model, and attack injection.
//!
//! A [`LatentVehicle`] drives `d` smooth latent variables (speed, throttle,
//! ...) through a schedule of states. Every byte pair is a noisy, quantized
//! function of one weighted combination of latents, sampled whenever its AID
//! transmits. Attacks are applied to any capture, synthetic or recorded.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{decompose, BytePairId, CanFrame};
use crate::detect::Alert;
use crate::error::SimulateError;
use crate::pipeline::{CanonicalSeries, Scaler, StateCapture};
use crate::rng;

pub const VEHICLE_VERSION: u32 = 1;
pub const ATTACK_VERSION: u32 = 1;
/// Upper bound of the uniform transmission jitter, as a fraction of the period.
pub const MAX_JITTER: f64 = 0.05;
/// Injection rate relative to the target AID's native rate when unspecified.
pub const DEFAULT_INJECTION_FACTOR: f64 = 10.0;
pub const DEFAULT_CANONICAL_RATE: f64 = 100.0;
pub const DEFAULT_CHANNEL: &str = "can0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub name: String,
    /// Trajectories are clamped into `[lo, hi]`.
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ripple {
    pub amplitude: f64,
    /// Seconds.
    pub period: f64,
    /// Radians, added to a per-capture random phase.
    #[serde(default)]
    pub phase: f64,
}

/// A latent curve over the time since state entry: cosine-eased transitions
/// between knots, held flat outside them, plus sinusoidal ripples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `[time, value]` pairs with increasing times.
    pub knots: Vec<[f64; 2]>,
    #[serde(default)]
    pub ripple: Vec<Ripple>,
}

impl Trajectory {
    pub fn constant(value: f64) -> Self {
        Self {
            knots: vec![[0.0, value]],
            ripple: Vec::new(),
        }
    }

    pub fn with_ripple(mut self, amplitude: f64, period: f64) -> Self {
        self.ripple.push(Ripple {
            amplitude,
            period,
            phase: 0.0,
        });
        self
    }

    fn base(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            let ([t0, v0], [t1, v1]) = (w[0], w[1]);
            if t < t1 {
                let u = (t - t0) / (t1 - t0);
                let ease = 0.5 - 0.5 * (std::f64::consts::PI * u).cos();
                return v0 + (v1 - v0) * ease;
            }
        }
        k[k.len() - 1][1]
    }

    fn eval(&self, t: f64, phases: &[f64]) -> f64 {
        self.base(t)
            + self
                .ripple
                .iter()
                .zip(phases)
                .map(|(r, p)| r.amplitude * (TAU * t / r.period + r.phase + p).sin())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub label: String,
    /// Seconds.
    pub duration: f64,
    /// One trajectory per latent, in latent order.
    pub trajectories: Vec<Trajectory>,
}

/// Shape applied to the weighted latent sum `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transfer {
    Linear,
    Quadratic,
    Tanh { center: f64, width: f64 },
    Sine { period: f64 },
}

impl Transfer {
    fn apply(self, s: f64) -> f64 {
        match self {
            Transfer::Linear => s,
            Transfer::Quadratic => s * s,
            Transfer::Tanh { center, width } => ((s - center) / width).tanh(),
            Transfer::Sine { period } => (TAU * s / period).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInput {
    pub latent: usize,
    pub weight: f64,
}

/// `value = offset + gain · transfer(Σ weight·latent) + N(0, noise²)`,
/// rounded and clamped to `[0, 65535]`. No inputs gives a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: BytePairId,
    #[serde(default)]
    pub inputs: Vec<SensorInput>,
    pub transfer: Transfer,
    pub offset: f64,
    pub gain: f64,
    #[serde(default)]
    pub noise: f64,
}

impl SensorSpec {
    fn value(&self, latents: &[f64], noise: f64) -> u16 {
        let raw = if self.inputs.is_empty() {
            self.offset
        } else {
            let s: f64 = self.inputs.iter().map(|i| i.weight * latents[i.latent]).sum();
            self.offset + self.gain * self.transfer.apply(s)
        };
        (raw + noise).round().clamp(0.0, 65535.0) as u16
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AidSpec {
    pub aid: u32,
    pub period_ms: f64,
    /// Payload length in bytes; pairs without a sensor carry zeros.
    #[serde(default = "full_dlc")]
    pub dlc: u8,
}

fn full_dlc() -> u8 {
    8
}

/// The generative vehicle model, stored as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVehicle {
    pub version: u32,
    pub latents: Vec<LatentSpec>,
    pub states: Vec<StateSpec>,
    pub sensors: Vec<SensorSpec>,
    pub aids: Vec<AidSpec>,
    /// Latent exported as each state's canonical series.
    #[serde(default)]
    pub canonical_latent: usize,
    #[serde(default = "default_canonical_rate")]
    pub canonical_rate: f64,
    #[serde(default = "default_channel")]
    pub channel: String,
}

fn default_canonical_rate() -> f64 {
    DEFAULT_CANONICAL_RATE
}

fn default_channel() -> String {
    DEFAULT_CHANNEL.to_string()
}

impl LatentVehicle {
    pub fn d(&self) -> usize {
        self.latents.len()
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidVehicle(m));
        if self.version != VEHICLE_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        let d = self.d();
        if d == 0 {
            return bad("no latent variables".into());
        }
        if self.canonical_latent >= d {
            return bad(format!("canonical latent {} out of range", self.canonical_latent));
        }
        if !(self.canonical_rate > 0.0 && self.canonical_rate.is_finite()) {
            return bad("canonical rate must be positive".into());
        }
        for l in &self.latents {
            if !(l.lo <= l.hi) {
                return bad(format!("latent {} has lo > hi", l.name));
            }
        }
        if self.states.is_empty() {
            return bad("no states".into());
        }
        for s in &self.states {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return bad(format!("state {} has non-positive duration", s.label));
            }
            if s.trajectories.len() != d {
                return bad(format!(
                    "state {} has {} trajectories for {d} latents",
                    s.label,
                    s.trajectories.len()
                ));
            }
            for tr in &s.trajectories {
                if tr.knots.is_empty() || tr.knots.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return bad(format!(
                        "state {}: knot times must be non-empty and increasing",
                        s.label
                    ));
                }
                if tr.ripple.iter().any(|r| !(r.period > 0.0)) {
                    return bad(format!("state {}: ripple periods must be positive", s.label));
                }
            }
        }
        let mut aids = BTreeMap::new();
        for a in &self.aids {
            if !(a.period_ms > 0.0 && a.period_ms.is_finite()) {
                return bad(format!("AID {:03X} has non-positive period", a.aid));
            }
            if a.dlc > 8 {
                return bad(format!("AID {:03X} has dlc {}", a.aid, a.dlc));
            }
            if aids.insert(a.aid, a.dlc).is_some() {
                return bad(format!("AID {:03X} declared twice", a.aid));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.sensors {
            let Some(&dlc) = aids.get(&s.id.aid) else {
                return bad(format!("sensor {} on undeclared AID", s.id));
            };
            if 2 * s.id.pair_index as usize + 2 > dlc as usize {
                return bad(format!("sensor {} beyond payload length {dlc}", s.id));
            }
            if !seen.insert(s.id) {
                return bad(format!("sensor {} declared twice", s.id));
            }
            if s.inputs.iter().any(|i| i.latent >= d) {
                return bad(format!("sensor {} reads a missing latent", s.id));
            }
            if !(s.noise >= 0.0) {
                return bad(format!("sensor {} has negative noise", s.id));
            }
        }
        Ok(())
    }

    /// Same sensors and AIDs, driven through different states.
    pub fn with_states(&self, states: Vec<StateSpec>) -> Self {
        Self { states, ..self.clone() }
    }
}

const SENSOR_AIDS: [u32; 8] = [0x0A0, 0x0B4, 0x0C8, 0x110, 0x1F0, 0x208, 0x2A4, 0x320];
const STATUS_AID: u32 = 0x3E8;
/// Sensors per latent in the reference vehicle.
const SENSORS_PER_LATENT: usize = 8;
/// Local sensor indices whose output decreases with their latent.
const FALLING: [usize; 1] = [6];

fn reference_sensor(j: usize, latent: usize, spec: &LatentSpec) -> SensorSpec {
    let id = BytePairId::new(SENSOR_AIDS[j / 3], (j % 3) as u8);
    let local = j % SENSORS_PER_LATENT;
    let range = spec.hi - spec.lo;
    let transfer = match local % 4 {
        1 => Transfer::Tanh {
            center: spec.lo + 0.5 * range,
            width: 0.35 * range,
        },
        2 => Transfer::Quadratic,
        _ => Transfer::Linear,
    };
    let falling = FALLING.contains(&local);
    let span = 8000.0 + 4000.0 * local as f64;
    let (f_lo, f_hi) = (transfer.apply(spec.lo), transfer.apply(spec.hi));
    let mut gain = span / (f_hi - f_lo);
    let mut offset = 2000.0 - gain * f_lo;
    if falling {
        gain = -gain;
        offset = 2000.0 + span - gain * f_lo;
    }
    SensorSpec {
        id,
        inputs: vec![SensorInput { latent, weight: 1.0 }],
        transfer,
        offset,
        gain,
        noise: 0.005 * span,
    }
}

fn latent_specs() -> Vec<LatentSpec> {
    [("speed", 0.0, 30.0), ("throttle", 0.0, 1.0), ("brake", 0.0, 1.0)]
        .into_iter()
        .map(|(name, lo, hi)| LatentSpec {
            name: name.into(),
            lo,
            hi,
        })
        .collect()
}

fn knots(points: &[(f64, f64)]) -> Trajectory {
    Trajectory {
        knots: points.iter().map(|&(t, v)| [t, v]).collect(),
        ripple: Vec::new(),
    }
}

fn state(label: &str, duration: f64, trajectories: [Trajectory; 3]) -> StateSpec {
    StateSpec {
        label: label.into(),
        duration,
        trajectories: trajectories.into(),
    }
}

/// Constant-speed cruise with slow speed and pedal fluctuations.
pub fn cruise_state(duration: f64) -> StateSpec {
    state(
        "Speed",
        duration,
        [
            Trajectory::constant(20.0).with_ripple(1.5, 13.0).with_ripple(0.6, 4.7),
            Trajectory::constant(0.3).with_ripple(0.08, 6.1),
            Trajectory::constant(0.04).with_ripple(0.02, 9.3),
        ],
    )
}

/// Forward drive cycle: speed swings through the working range with pedal
/// activity following it.
pub fn drive_cycle_state(duration: f64) -> StateSpec {
    let speed: Vec<(f64, f64)> = [0.0, 12.0, 24.0, 16.0, 27.0, 20.0, 8.0, 22.0, 14.0, 0.0]
        .iter()
        .enumerate()
        .map(|(i, &v)| (duration * i as f64 / 9.0, v))
        .collect();
    state(
        "Speed",
        duration,
        [
            knots(&speed).with_ripple(0.8, 6.3),
            Trajectory::constant(0.35).with_ripple(0.15, 7.7).with_ripple(0.05, 2.9),
            Trajectory::constant(0.1).with_ripple(0.08, 10.1),
        ],
    )
}

/// A single drive-cycle state over `d` sensors, four per AID at 10 ms, each
/// following one of the three latents. Sized for throughput measurement.
pub fn wide_vehicle(d: usize, duration: f64) -> LatentVehicle {
    let latents = latent_specs();
    let sensors: Vec<SensorSpec> = (0..d)
        .map(|j| {
            let latent = j % latents.len();
            let local = (j / latents.len()) % SENSORS_PER_LATENT;
            let mut s = reference_sensor(local, latent, &latents[latent]);
            s.id = BytePairId::new(0x100 + (j / 4) as u32, (j % 4) as u8);
            s
        })
        .collect();
    let aids = (0..d.div_ceil(4))
        .map(|i| AidSpec {
            aid: 0x100 + i as u32,
            period_ms: 10.0,
            dlc: 8,
        })
        .collect();
    LatentVehicle {
        version: VEHICLE_VERSION,
        latents,
        states: vec![drive_cycle_state(duration)],
        sensors,
        aids,
        canonical_latent: 0,
        canonical_rate: DEFAULT_CANONICAL_RATE,
        channel: DEFAULT_CHANNEL.into(),
    }
}

/// Three latents (speed, throttle, brake), 24 sensors on eight AIDs, a status
/// AID of constants, and five drive states of `state_secs` each.
pub fn reference_vehicle(state_secs: f64) -> LatentVehicle {
    let latents = latent_specs();
    let mut sensors: Vec<SensorSpec> = (0..latents.len() * SENSORS_PER_LATENT)
        .map(|j| reference_sensor(j, j / SENSORS_PER_LATENT, &latents[j / SENSORS_PER_LATENT]))
        .collect();
    for (i, &aid) in SENSOR_AIDS.iter().enumerate() {
        sensors.push(SensorSpec {
            id: BytePairId::new(aid, 3),
            inputs: Vec::new(),
            transfer: Transfer::Linear,
            offset: (0x1111 * (i + 1)) as f64,
            gain: 0.0,
            noise: 0.0,
        });
    }
    for pair in 0..2 {
        sensors.push(SensorSpec {
            id: BytePairId::new(STATUS_AID, pair),
            inputs: Vec::new(),
            transfer: Transfer::Linear,
            offset: 0x0F00 as f64 + f64::from(pair),
            gain: 0.0,
            noise: 0.0,
        });
    }
    let mut aids: Vec<AidSpec> = SENSOR_AIDS
        .iter()
        .enumerate()
        .map(|(i, &aid)| AidSpec {
            aid,
            period_ms: if i < 4 { 10.0 } else { 20.0 },
            dlc: 8,
        })
        .collect();
    aids.push(AidSpec {
        aid: STATUS_AID,
        period_ms: 100.0,
        dlc: 4,
    });
    let t = state_secs;
    let states = vec![
        state(
            "KeyOn",
            t,
            [
                Trajectory::constant(0.0),
                Trajectory::constant(0.08).with_ripple(0.03, 7.0),
                Trajectory::constant(0.4).with_ripple(0.1, 11.0),
            ],
        ),
        state(
            "Accelerating",
            t,
            [
                knots(&[(0.0, 0.0), (t, 28.0)]).with_ripple(0.5, 9.0),
                Trajectory::constant(0.7).with_ripple(0.1, 5.0),
                Trajectory::constant(0.03).with_ripple(0.02, 6.0),
            ],
        ),
        drive_cycle_state(t),
        state(
            "Braking",
            t,
            [
                knots(&[(0.0, 28.0), (t, 0.0)]).with_ripple(0.5, 7.5),
                Trajectory::constant(0.03).with_ripple(0.02, 5.5),
                Trajectory::constant(0.5).with_ripple(0.15, 8.0),
            ],
        ),
        state(
            "Reverse",
            t,
            [
                knots(&[(0.0, 0.0), (t / 3.0, 4.0), (2.0 * t / 3.0, 4.0), (t, 0.0)]).with_ripple(0.3, 5.0),
                Trajectory::constant(0.15).with_ripple(0.05, 4.0),
                Trajectory::constant(0.1).with_ripple(0.05, 6.5),
            ],
        ),
    ];
    LatentVehicle {
        version: VEHICLE_VERSION,
        latents,
        states,
        sensors,
        aids,
        canonical_latent: 0,
        canonical_rate: DEFAULT_CANONICAL_RATE,
        channel: DEFAULT_CHANNEL.into(),
    }
}

/// The reference vehicle held at cruise for `duration` seconds.
pub fn constant_speed_drive(duration: f64) -> LatentVehicle {
    reference_vehicle(1.0).with_states(vec![cruise_state(duration)])
}

fn quantize_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

/// One capture per state on a continuous clock, each with the true canonical
/// latent sampled at `canonical_rate`.
pub fn generate_ambient(vehicle: &LatentVehicle, seed: u64) -> Result<Vec<StateCapture>, SimulateError> {
    vehicle.validate()?;
    let mut rng = rng::stream(seed, rng::SIMULATOR);
    let mut by_aid: BTreeMap<u32, Vec<&SensorSpec>> = vehicle.aids.iter().map(|a| (a.aid, Vec::new())).collect();
    for s in &vehicle.sensors {
        by_aid.get_mut(&s.id.aid).expect("validated").push(s);
    }
    let mut captures = Vec::with_capacity(vehicle.states.len());
    let mut t0 = 0.0;
    for st in &vehicle.states {
        let phases: Vec<Vec<f64>> = st
            .trajectories
            .iter()
            .map(|tr| tr.ripple.iter().map(|_| rng.random::<f64>() * TAU).collect())
            .collect();
        let latents_at = |t: f64| -> Vec<f64> {
            st.trajectories
                .iter()
                .zip(&phases)
                .zip(&vehicle.latents)
                .map(|((tr, ph), l)| tr.eval(t, ph).clamp(l.lo, l.hi))
                .collect()
        };
        let mut frames = Vec::new();
        for a in &vehicle.aids {
            let period = a.period_ms / 1000.0;
            let phase = rng.random::<f64>() * period;
            let sensors = &by_aid[&a.aid];
            let mut j = 0u64;
            loop {
                let local = phase + j as f64 * period + rng.random::<f64>() * MAX_JITTER * period;
                if local >= st.duration {
                    break;
                }
                let z = latents_at(local);
                let mut payload = vec![0u8; a.dlc as usize];
                for s in sensors {
                    let noise = if s.noise > 0.0 {
                        Normal::new(0.0, s.noise).expect("validated").sample(&mut rng)
                    } else {
                        0.0
                    };
                    let i = 2 * s.id.pair_index as usize;
                    payload[i..i + 2].copy_from_slice(&s.value(&z, noise).to_be_bytes());
                }
                frames.push(CanFrame::new(
                    quantize_us(t0 + local),
                    a.aid,
                    &payload,
                    vehicle.channel.as_str(),
                )?);
                j += 1;
            }
        }
        let n_canon = (st.duration * vehicle.canonical_rate).ceil() as usize;
        let (times, values) = (0..n_canon)
            .map(|i| {
                let local = i as f64 / vehicle.canonical_rate;
                (quantize_us(t0 + local), latents_at(local)[vehicle.canonical_latent])
            })
            .unzip();
        captures.push(StateCapture::new(
            st.label.clone(),
            frames,
            Some(CanonicalSeries { times, values }),
        ));
        t0 += st.duration;
    }
    Ok(captures)
}

/// Per-target perturbation, in raw byte-pair units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta {
    Uniform(f64),
    PerTarget(BTreeMap<BytePairId, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Injection {
        delta: Delta,
        /// Injected frames per second per target AID; defaults to ten times
        /// the AID's native rate.
        #[serde(default)]
        frequency: Option<f64>,
    },
    /// Re-emit the target AIDs' frames from `source`, looped over each window.
    Replay { source: [f64; 2] },
}

/// Windows and the replay source are seconds from the capture's first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub version: u32,
    #[serde(flatten)]
    pub kind: AttackKind,
    pub targets: Vec<BytePairId>,
    pub windows: Vec<[f64; 2]>,
}

impl AttackSpec {
    /// High-frequency injection over three 10 s windows of a 70 s capture.
    pub fn three_window_injection(targets: Vec<BytePairId>, delta: Delta) -> Self {
        Self {
            version: ATTACK_VERSION,
            kind: AttackKind::Injection { delta, frequency: None },
            targets,
            windows: vec![[10.0, 20.0], [30.0, 40.0], [50.0, 60.0]],
        }
    }
}

/// `fraction` of each target's training range, for [`Delta::PerTarget`].
pub fn range_deltas(scaler: &Scaler, members: &[BytePairId], fraction: f64) -> BTreeMap<BytePairId, f64> {
    members
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, fraction * scaler.range(i).unwrap_or(0.0)))
        .collect()
}

/// Attack windows in capture time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub version: u32,
    pub kind: String,
    pub targets: Vec<BytePairId>,
    pub windows: Vec<[f64; 2]>,
    pub attack_frames: usize,
}

impl GroundTruth {
    pub fn contains(&self, t: f64) -> bool {
        in_windows(&self.windows, t)
    }

    /// Inside/outside label per observation time.
    pub fn labels(&self, times: &[f64]) -> Vec<bool> {
        times.iter().map(|&t| self.contains(t)).collect()
    }
}

fn in_windows(windows: &[[f64; 2]], t: f64) -> bool {
    windows.iter().any(|w| w[0] <= t && t <= w[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackedCapture {
    pub capture: StateCapture,
    pub truth: GroundTruth,
    /// Per frame of `capture`: true for attack traffic.
    pub attack_frame: Vec<bool>,
}

fn check_windows(windows: &[[f64; 2]], duration: f64) -> Result<(), SimulateError> {
    let mut sorted = windows.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut last_end = f64::NEG_INFINITY;
    for &[start, end] in &sorted {
        if !(start >= 0.0 && start < end && end <= duration && start >= last_end) {
            return Err(SimulateError::WindowOutOfRange { start, end, duration });
        }
        last_end = end;
    }
    Ok(())
}

fn median_gap(times: &[f64]) -> Option<f64> {
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

/// Apply `spec` to `capture`. Authentic frames are kept untouched; attack
/// frames are merged in after authentic frames sharing their timestamp.
pub fn inject_attack(capture: &StateCapture, spec: &AttackSpec, seed: u64) -> Result<AttackedCapture, SimulateError> {
    if spec.version != ATTACK_VERSION {
        return Err(SimulateError::InvalidAttack(format!(
            "unsupported version {}",
            spec.version
        )));
    }
    if spec.targets.is_empty() {
        return Err(SimulateError::InvalidAttack("no targets".into()));
    }
    let Some((first, _)) = capture.span() else {
        return Err(SimulateError::InvalidAttack("empty capture".into()));
    };
    check_windows(&spec.windows, capture.duration)?;
    let mut rng = rng::stream(seed, rng::ATTACK);

    let mut frames_of: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, f) in capture.frames.iter().enumerate() {
        frames_of.entry(f.aid).or_default().push(i);
    }
    let mut pairs_of: BTreeMap<u32, Vec<BytePairId>> = BTreeMap::new();
    for id in &spec.targets {
        if !frames_of.contains_key(&id.aid) {
            return Err(SimulateError::UnknownTarget(id.to_string()));
        }
        let pairs = pairs_of.entry(id.aid).or_default();
        if !pairs.contains(id) {
            pairs.push(*id);
        }
    }

    let mut extra: Vec<CanFrame> = Vec::new();
    let kind = match &spec.kind {
        AttackKind::Injection { delta, frequency } => {
            if let Some(f) = frequency {
                if !(*f > 0.0 && f.is_finite()) {
                    return Err(SimulateError::InvalidAttack(format!("injection frequency {f}")));
                }
            }
            let delta_of = |id: &BytePairId| -> Result<f64, SimulateError> {
                match delta {
                    Delta::Uniform(d) => Ok(*d),
                    Delta::PerTarget(map) => map
                        .get(id)
                        .copied()
                        .ok_or_else(|| SimulateError::InvalidAttack(format!("no delta for {id}"))),
                }
            };
            for &[w0, w1] in &spec.windows {
                for (aid, pairs) in &pairs_of {
                    let idx = &frames_of[aid];
                    let times: Vec<f64> = idx.iter().map(|&i| capture.frames[i].timestamp).collect();
                    let freq = match frequency {
                        Some(f) => *f,
                        None => match median_gap(&times) {
                            Some(g) => DEFAULT_INJECTION_FACTOR / g,
                            None => {
                                return Err(SimulateError::InvalidAttack(format!(
                                    "AID {aid:03X} has no native rate; give a frequency"
                                )))
                            }
                        },
                    };
                    let step = 1.0 / freq;
                    let mut t = first + w0 + rng.random::<f64>() * step;
                    while t < first + w1 {
                        let tq = quantize_us(t);
                        // most recent authentic frame of this AID
                        let k = times.partition_point(|&x| x <= tq);
                        if k > 0 {
                            let src = &capture.frames[idx[k - 1]];
                            let mut f = src.clone();
                            f.timestamp = tq;
                            let values = decompose(src);
                            for id in pairs {
                                let v = f64::from(values[id.pair_index as usize].1) + delta_of(id)?;
                                f.set_pair(id.pair_index, v.round().clamp(0.0, 65535.0) as u16);
                            }
                            extra.push(f);
                        }
                        t += step;
                    }
                }
            }
            "injection"
        }
        AttackKind::Replay { source: [s0, s1] } => {
            check_windows(&[[*s0, *s1]], capture.duration)?;
            let len = s1 - s0;
            for &[w0, w1] in &spec.windows {
                let mut shift = w0 - s0;
                while s0 + shift < w1 {
                    for aid in pairs_of.keys() {
                        for &i in &frames_of[aid] {
                            let f = &capture.frames[i];
                            let rel = f.timestamp - first;
                            if rel < *s0 || rel >= *s1 {
                                continue;
                            }
                            let t = quantize_us(f.timestamp + shift);
                            if t >= first + w1 {
                                continue;
                            }
                            let mut g = f.clone();
                            g.timestamp = t;
                            extra.push(g);
                        }
                    }
                    shift += len;
                }
            }
            "replay"
        }
    };

    let attack_frames = extra.len();
    let mut tagged: Vec<(CanFrame, bool)> = capture
        .frames
        .iter()
        .cloned()
        .map(|f| (f, false))
        .chain(extra.into_iter().map(|f| (f, true)))
        .collect();
    tagged.sort_by(|a, b| a.0.timestamp.total_cmp(&b.0.timestamp).then(a.1.cmp(&b.1)));
    let (frames, attack_frame): (Vec<CanFrame>, Vec<bool>) = tagged.into_iter().unzip();
    let mut attacked = StateCapture::new(capture.label.clone(), frames, capture.canonical.clone());
    attacked.duration = capture.duration;
    Ok(AttackedCapture {
        capture: attacked,
        truth: GroundTruth {
            version: ATTACK_VERSION,
            kind: kind.into(),
            targets: spec.targets.clone(),
            windows: spec.windows.iter().map(|w| [first + w[0], first + w[1]]).collect(),
            attack_frames,
        },
        attack_frame,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: [f64; 2],
    pub detected: bool,
    /// First alert time minus window start.
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub windows: Vec<WindowMetrics>,
    pub detected: usize,
    pub false_alarms: usize,
    pub ambient_observations: usize,
    pub false_alarm_rate: f64,
}

/// Score `alerts` against attack windows; `observation_times` are the
/// trace times, used for the false-alarm denominator.
pub fn evaluate(alerts: &[Alert], windows: &[[f64; 2]], observation_times: &[f64]) -> Evaluation {
    let per_window: Vec<WindowMetrics> = windows
        .iter()
        .map(|&w| {
            let first = alerts
                .iter()
                .filter(|a| w[0] <= a.time && a.time <= w[1])
                .map(|a| a.time)
                .min_by(f64::total_cmp);
            WindowMetrics {
                window: w,
                detected: first.is_some(),
                latency: first.map(|t| t - w[0]),
            }
        })
        .collect();
    let false_alarms = alerts.iter().filter(|a| !in_windows(windows, a.time)).count();
    let ambient = observation_times.iter().filter(|&&t| !in_windows(windows, t)).count();
    Evaluation {
        detected: per_window.iter().filter(|w| w.detected).count(),
        windows: per_window,
        false_alarms,
        ambient_observations: ambient,
        false_alarm_rate: if ambient == 0 {
            0.0
        } else {
            false_alarms as f64 / ambient as f64
        },
    }
}

/// Two-sample Kolmogorov–Smirnov statistic; 0 if either sample is empty.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = if a[i].total_cmp(&b[j]).is_le() { a[i] } else { b[j] };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
