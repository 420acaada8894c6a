//! From frame streams to signals: per-byte-pair time series, the constant
//! filter, resampling, and the latest-value observation stream that feeds the
//! diffusion embedding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::codec::{decompose, BytePairId, CanFrame};
use crate::error::PipelineError;

/// Default resampling length for correlation analysis.
pub const DEFAULT_INTERP_LEN: usize = 5000;

/// A real-valued ground-truth series (e.g. measured speed) with its own clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl CanonicalSeries {
    /// Read a `time,value` CSV; a non-numeric first line is taken as a header.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, PipelineError> {
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| PipelineError::InvalidParameter(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(t, v)| Some((t.trim().parse::<f64>().ok()?, v.trim().parse::<f64>().ok()?)));
            match parsed {
                Some((t, v)) => {
                    times.push(t);
                    values.push(v);
                }
                None if i == 0 => continue,
                None => {
                    return Err(PipelineError::InvalidParameter(format!(
                        "canonical series line {}: {line:?}",
                        i + 1
                    )))
                }
            }
        }
        Ok(Self { times, values })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,value\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t},{v}\n"));
        }
        out
    }
}

/// Frames recorded while the vehicle was held in one named state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCapture {
    pub label: String,
    pub frames: Vec<CanFrame>,
    pub duration: f64,
    pub canonical: Option<CanonicalSeries>,
}

impl StateCapture {
    /// Build a capture, sorting frames by timestamp. The duration is the span
    /// of the frame timestamps.
    pub fn new(label: impl Into<String>, mut frames: Vec<CanFrame>, canonical: Option<CanonicalSeries>) -> Self {
        frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let duration = match (frames.first(), frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        };
        Self {
            label: label.into(),
            frames,
            duration,
            canonical,
        }
    }

    /// First and last frame timestamps.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.frames.first()?.timestamp, self.frames.last()?.timestamp))
    }
}

/// Values of one byte pair over time.
#[derive(Debug, Clone, PartialEq)]
pub struct BytePairSeries {
    pub id: BytePairId,
    pub times: Vec<f64>,
    pub values: Vec<u16>,
}

/// Split a capture into one series per observed (AID, pair index). Frames
/// sharing a timestamp collapse to the last one, keeping times strictly
/// increasing.
pub fn extract_series(capture: &StateCapture) -> Result<BTreeMap<BytePairId, BytePairSeries>, PipelineError> {
    if capture.frames.is_empty() {
        return Err(PipelineError::EmptyCapture(capture.label.clone()));
    }
    let mut out: BTreeMap<BytePairId, BytePairSeries> = BTreeMap::new();
    for frame in &capture.frames {
        for (id, value) in decompose(frame) {
            let s = out.entry(id).or_insert_with(|| BytePairSeries {
                id,
                times: Vec::new(),
                values: Vec::new(),
            });
            if s.times.last() == Some(&frame.timestamp) {
                *s.values.last_mut().unwrap() = value;
            } else {
                s.times.push(frame.timestamp);
                s.values.push(value);
            }
        }
    }
    Ok(out)
}

/// Ids whose values, pooled over every capture, take at least two distinct
/// values.
pub fn constant_filter<'a, I>(series_by_state: I) -> BTreeSet<BytePairId>
where
    I: IntoIterator<Item = &'a BTreeMap<BytePairId, BytePairSeries>>,
{
    // first value seen, and whether a different one ever followed
    let mut seen: BTreeMap<BytePairId, (u16, bool)> = BTreeMap::new();
    for map in series_by_state {
        for (id, s) in map {
            for &v in &s.values {
                let e = seen.entry(*id).or_insert((v, false));
                e.1 |= e.0 != v;
            }
        }
    }
    seen.into_iter()
        .filter_map(|(id, (_, varies))| varies.then_some(id))
        .collect()
}

/// `len` evenly spaced points from `start` to `end` inclusive.
pub fn uniform_grid(start: f64, end: f64, len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..len)
            .map(|j| {
                if j == len - 1 {
                    end
                } else {
                    start + (end - start) * j as f64 / (len - 1) as f64
                }
            })
            .collect(),
    }
}

/// Previous-value (zero-order hold) resampling onto `grid`. Grid points
/// before the first sample take the first value.
pub fn step_resample(times: &[f64], values: &[f64], grid: &[f64]) -> Vec<f64> {
    assert_eq!(times.len(), values.len());
    assert!(!times.is_empty(), "step resampling needs at least one sample");
    let mut j = 0;
    grid.iter()
        .map(|&t| {
            while j + 1 < times.len() && times[j + 1] <= t {
                j += 1;
            }
            values[j]
        })
        .collect()
}

/// Natural cubic spline through `(times, values)`.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    times: Vec<f64>,
    values: Vec<f64>,
    /// second derivatives at the knots
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(times: &[f64], values: &[f64]) -> Result<Self, PipelineError> {
        let n = times.len();
        if n < 2 {
            return Err(PipelineError::TooShort(n));
        }
        if values.len() != n {
            return Err(PipelineError::InvalidParameter(format!(
                "{} times but {} values",
                n,
                values.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PipelineError::InvalidParameter(
                "spline knots must be strictly increasing".into(),
            ));
        }
        // Thomas algorithm on the interior second-derivative system.
        let mut m = vec![0.0; n];
        if n > 2 {
            let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self {
            times: times.to_vec(),
            values: values.to_vec(),
            m,
        })
    }

    /// Evaluate at `t`; outside the knot range the endpoint value is held.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        let (x0, x1) = (self.times[i], self.times[i + 1]);
        let h = x1 - x0;
        let a = (x1 - t) / h;
        let b = (t - x0) / h;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    /// Previous-value hold, for byte-pair series.
    Step,
    /// Natural cubic spline, for canonical real-valued series.
    Cubic,
}

/// Resample a series onto `len` uniform points spanning its own time range.
pub fn interpolate_to_length(
    times: &[f64],
    values: &[f64],
    len: usize,
    mode: InterpMode,
) -> Result<Vec<f64>, PipelineError> {
    if len == 0 {
        return Err(PipelineError::InvalidParameter("length must be positive".into()));
    }
    let min_len = match mode {
        InterpMode::Step => 1,
        InterpMode::Cubic => 2,
    };
    if times.len() < min_len {
        return Err(PipelineError::TooShort(times.len()));
    }
    let grid = uniform_grid(times[0], times[times.len() - 1], len);
    resample(times, values, &grid, mode)
}

pub fn resample(times: &[f64], values: &[f64], grid: &[f64], mode: InterpMode) -> Result<Vec<f64>, PipelineError> {
    match mode {
        InterpMode::Step => {
            if times.is_empty() {
                return Err(PipelineError::TooShort(0));
            }
            Ok(step_resample(times, values, grid))
        }
        InterpMode::Cubic => {
            let s = NaturalSpline::new(times, values)?;
            Ok(grid.iter().map(|&t| s.eval(t)).collect())
        }
    }
}

/// Per-coordinate affine map onto the unit interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaler {
    Identity,
    MinMax { min: Vec<f64>, max: Vec<f64> },
}

impl Scaler {
    /// Training ranges of `members` over the given frames.
    pub fn fit<'a, I>(frames: I, members: &[BytePairId]) -> Self
    where
        I: IntoIterator<Item = &'a CanFrame>,
    {
        let index: HashMap<BytePairId, usize> = members.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut min = vec![f64::INFINITY; members.len()];
        let mut max = vec![f64::NEG_INFINITY; members.len()];
        for frame in frames {
            for (id, v) in decompose(frame) {
                if let Some(&i) = index.get(&id) {
                    min[i] = min[i].min(f64::from(v));
                    max[i] = max[i].max(f64::from(v));
                }
            }
        }
        for i in 0..members.len() {
            if !min[i].is_finite() {
                min[i] = 0.0;
                max[i] = 0.0;
            }
        }
        Scaler::MinMax { min, max }
    }

    pub fn scale(&self, i: usize, v: f64) -> f64 {
        match self {
            Scaler::Identity => v,
            Scaler::MinMax { min, max } => {
                let range = max[i] - min[i];
                if range <= 0.0 {
                    0.0
                } else {
                    ((v - min[i]) / range).clamp(0.0, 1.0)
                }
            }
        }
    }

    /// Training range of coordinate `i`, if known.
    pub fn range(&self, i: usize) -> Option<f64> {
        match self {
            Scaler::Identity => None,
            Scaler::MinMax { min, max } => Some(max[i] - min[i]),
        }
    }
}

/// One synchronous snapshot of a cluster's byte pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitMode {
    /// One observation per frame that updates any member.
    PerMessage,
    /// Observations on a fixed clock, anchored at warm-up completion.
    FixedRate(f64),
}

impl std::str::FromStr for EmitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "per-message" {
            return Ok(Self::PerMessage);
        }
        let hz = s
            .strip_prefix("rate:")
            .and_then(|r| r.parse::<f64>().ok())
            .filter(|hz| hz.is_finite() && *hz > 0.0)
            .ok_or_else(|| format!("bad emit mode {s:?} (expected per-message or rate:<hz>)"))?;
        Ok(Self::FixedRate(hz))
    }
}

impl std::fmt::Display for EmitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PerMessage => f.write_str("per-message"),
            Self::FixedRate(hz) => write!(f, "rate:{hz}"),
        }
    }
}

/// Latest-value register over a fixed member list.
///
/// Feed frames in timestamp order with [`ObservationStream::push`]; call
/// [`ObservationStream::finish`] at end of input to flush pending
/// fixed-rate ticks and check that every member was seen.
#[derive(Debug, Clone)]
pub struct ObservationStream {
    members: Vec<BytePairId>,
    by_aid: HashMap<u32, Vec<(u8, usize)>>,
    scaler: Scaler,
    mode: EmitMode,
    register: Vec<Option<u16>>,
    missing: usize,
    /// fixed-rate clock origin and next tick index
    clock: Option<(f64, u64)>,
    last_time: Option<f64>,
    foreign_frames: usize,
}

impl ObservationStream {
    pub fn new(members: Vec<BytePairId>, scaler: Scaler, mode: EmitMode) -> Self {
        let mut by_aid: HashMap<u32, Vec<(u8, usize)>> = HashMap::new();
        for (i, id) in members.iter().enumerate() {
            by_aid.entry(id.aid).or_default().push((id.pair_index, i));
        }
        let n = members.len();
        Self {
            members,
            by_aid,
            scaler,
            mode,
            register: vec![None; n],
            missing: n,
            clock: None,
            last_time: None,
            foreign_frames: 0,
        }
    }

    pub fn members(&self) -> &[BytePairId] {
        &self.members
    }

    /// Frames seen that carry none of the members.
    pub fn foreign_frames(&self) -> usize {
        self.foreign_frames
    }

    fn snapshot(&self, time: f64) -> Observation {
        let x = self
            .register
            .iter()
            .enumerate()
            .map(|(i, v)| self.scaler.scale(i, f64::from(v.expect("register initialized"))))
            .collect();
        Observation { time, x }
    }

    fn tick_time(origin: f64, j: u64, hz: f64) -> f64 {
        origin + j as f64 / hz
    }

    pub fn push(&mut self, frame: &CanFrame, out: &mut Vec<Observation>) {
        self.last_time = Some(frame.timestamp);
        let Some(slots) = self.by_aid.get(&frame.aid) else {
            self.foreign_frames += 1;
            return;
        };
        if let (EmitMode::FixedRate(hz), Some((origin, mut j))) = (self.mode, self.clock) {
            while Self::tick_time(origin, j, hz) < frame.timestamp {
                out.push(self.snapshot(Self::tick_time(origin, j, hz)));
                j += 1;
            }
            self.clock = Some((origin, j));
        }
        let p = frame.padded_payload();
        for &(pair, i) in slots {
            let v = u16::from_be_bytes([p[2 * pair as usize], p[2 * pair as usize + 1]]);
            if self.register[i].replace(v).is_none() {
                self.missing -= 1;
            }
        }
        if self.missing > 0 {
            return;
        }
        match self.mode {
            EmitMode::PerMessage => out.push(self.snapshot(frame.timestamp)),
            EmitMode::FixedRate(_) => {
                if self.clock.is_none() {
                    self.clock = Some((frame.timestamp, 0));
                }
            }
        }
    }

    /// Flush remaining fixed-rate ticks up to the last frame time.
    pub fn finish(&mut self, out: &mut Vec<Observation>) -> Result<(), PipelineError> {
        if let (EmitMode::FixedRate(hz), Some((origin, j)), Some(last)) = (self.mode, self.clock, self.last_time) {
            let mut j = j;
            while Self::tick_time(origin, j, hz) <= last {
                out.push(self.snapshot(Self::tick_time(origin, j, hz)));
                j += 1;
            }
            self.clock = Some((origin, j));
        }
        if self.missing > 0 {
            let ids = self
                .members
                .iter()
                .zip(&self.register)
                .filter(|(_, v)| v.is_none())
                .map(|(id, _)| id.to_string())
                .collect();
            return Err(PipelineError::UnknownMember(ids));
        }
        Ok(())
    }
}

/// Run a whole frame sequence through a fresh [`ObservationStream`].
pub fn observation_stream(
    frames: &[CanFrame],
    members: &[BytePairId],
    scaler: &Scaler,
    mode: EmitMode,
) -> Result<Vec<Observation>, PipelineError> {
    let mut stream = ObservationStream::new(members.to_vec(), scaler.clone(), mode);
    let mut out = Vec::new();
    for f in frames {
        stream.push(f, &mut out);
    }
    stream.finish(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(t: f64, aid: u32, payload: &[u8]) -> CanFrame {
        CanFrame::new(t, aid, payload, "can0").unwrap()
    }

    #[test]
    fn extract_series_decodes() {
        let cap = StateCapture::new(
            "KeyOn",
            vec![frame(0.0, 0x100, &[1, 0]), frame(0.1, 0x100, &[2, 0])],
            None,
        );
        let s = extract_series(&cap).unwrap();
        assert_eq!(s[&BytePairId::new(0x100, 0)].values, [256, 512]);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn extract_series_four_per_aid() {
        let frames = (0..3).map(|i| frame(i as f64, 0x100 + i, &[1])).collect();
        let s = extract_series(&StateCapture::new("x", frames, None)).unwrap();
        assert_eq!(s.len(), 12);
    }

    #[test]
    fn extract_series_rejects_empty() {
        let err = extract_series(&StateCapture::new("x", vec![], None)).unwrap_err();
        assert_eq!(err, PipelineError::EmptyCapture("x".into()));
    }

    #[test]
    fn constant_filter_uses_union_across_captures() {
        let key_on = StateCapture::new("KeyOn", vec![frame(0.0, 1, &[0, 0]), frame(1.0, 1, &[0, 0])], None);
        let speed = StateCapture::new("Speed", vec![frame(0.0, 1, &[0, 5]), frame(1.0, 1, &[0, 5])], None);
        let a = extract_series(&key_on).unwrap();
        let b = extract_series(&speed).unwrap();
        let kept = constant_filter([&a, &b]);
        assert_eq!(kept.into_iter().collect::<Vec<_>>(), [BytePairId::new(1, 0)]);
        // each capture alone is constant
        assert!(constant_filter([&a]).is_empty());
        assert!(constant_filter([&b]).is_empty());
    }

    #[test]
    fn step_interpolation_holds_previous_value() {
        let v = interpolate_to_length(&[0.0, 1.0], &[0.0, 10.0], 5, InterpMode::Step).unwrap();
        assert_eq!(v, [0.0, 0.0, 0.0, 0.0, 10.0]);
        let v = interpolate_to_length(&[0.0, 1.0, 2.0], &[5.0; 3], 9, InterpMode::Step).unwrap();
        assert_eq!(v, [5.0; 9]);
        let v = interpolate_to_length(&[3.0], &[7.0], 4, InterpMode::Step).unwrap();
        assert_eq!(v, [7.0; 4]);
    }

    #[test]
    fn cubic_spline_reproduces_lines() {
        let t = [0.0, 0.7, 1.1, 3.0];
        let y: Vec<f64> = t.iter().map(|x| 2.5 * x - 1.0).collect();
        let grid = uniform_grid(0.0, 3.0, 7);
        let v = interpolate_to_length(&t, &y, 7, InterpMode::Cubic).unwrap();
        for (g, v) in grid.iter().zip(&v) {
            assert!((v - (2.5 * g - 1.0)).abs() < 1e-9);
        }
        assert_eq!(
            interpolate_to_length(&[1.0], &[1.0], 3, InterpMode::Cubic).unwrap_err(),
            PipelineError::TooShort(1)
        );
    }

    #[test]
    fn cubic_spline_is_natural() {
        // y = x^2 on 5 knots: natural end conditions force m = 0 at the ends
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = t.map(|x| x * x);
        let s = NaturalSpline::new(&t, &y).unwrap();
        assert_eq!(s.m[0], 0.0);
        assert_eq!(s.m[4], 0.0);
        for (x, v) in t.iter().zip(&y) {
            assert!((s.eval(*x) - v).abs() < 1e-12);
        }
        // interior system 4a + b = 12, a + 4b + c = 12, b + 4c = 12 solved by hand
        assert!((s.m[1] - 18.0 / 7.0).abs() < 1e-12);
        assert!((s.m[2] - 12.0 / 7.0).abs() < 1e-12);
        assert!((s.m[3] - 18.0 / 7.0).abs() < 1e-12);
    }

    fn ab_stream() -> (Vec<CanFrame>, Vec<BytePairId>) {
        let a = BytePairId::new(0x10, 0);
        let b = BytePairId::new(0x20, 0);
        let frames = vec![
            frame(0.0, 0x10, &[0, 2]),
            frame(1.0, 0x20, &[0, 4]),
            frame(2.0, 0x10, &[0, 6]),
        ];
        (frames, vec![a, b])
    }

    #[test]
    fn per_message_stream_waits_for_warm_up() {
        let (frames, members) = ab_stream();
        let obs = observation_stream(&frames, &members, &Scaler::Identity, EmitMode::PerMessage).unwrap();
        assert_eq!(
            obs,
            [
                Observation {
                    time: 1.0,
                    x: vec![2.0, 4.0]
                },
                Observation {
                    time: 2.0,
                    x: vec![6.0, 4.0]
                }
            ]
        );
    }

    #[test]
    fn fixed_rate_stream() {
        let (frames, members) = ab_stream();
        let obs = observation_stream(&frames, &members, &Scaler::Identity, EmitMode::FixedRate(1.0)).unwrap();
        assert_eq!(
            obs,
            [
                Observation {
                    time: 1.0,
                    x: vec![2.0, 4.0]
                },
                Observation {
                    time: 2.0,
                    x: vec![6.0, 4.0]
                }
            ]
        );
        let obs = observation_stream(&frames, &members, &Scaler::Identity, EmitMode::FixedRate(4.0)).unwrap();
        assert_eq!(obs.len(), 5);
        assert_eq!(obs[3].x, [2.0, 4.0]);
        assert_eq!(obs[4].x, [6.0, 4.0]);
    }

    #[test]
    fn stream_reports_unknown_member() {
        let (frames, mut members) = ab_stream();
        members.push(BytePairId::new(0x30, 1));
        let err = observation_stream(&frames, &members, &Scaler::Identity, EmitMode::PerMessage).unwrap_err();
        assert_eq!(err, PipelineError::UnknownMember(vec!["030:1".into()]));
    }

    #[test]
    fn scaler_clamps() {
        let s = Scaler::MinMax {
            min: vec![0.0],
            max: vec![65535.0],
        };
        assert_eq!(s.scale(0, 70000.0), 1.0);
        assert_eq!(s.scale(0, -5.0), 0.0);
        let id = BytePairId::new(1, 0);
        let fitted = Scaler::fit(&[frame(0.0, 1, &[0, 10]), frame(1.0, 1, &[0, 30])], &[id]);
        assert_eq!(
            fitted,
            Scaler::MinMax {
                min: vec![10.0],
                max: vec![30.0]
            }
        );
        assert_eq!(fitted.scale(0, 20.0), 0.5);
    }

    #[test]
    fn emit_mode_text() {
        assert_eq!("per-message".parse::<EmitMode>().unwrap(), EmitMode::PerMessage);
        assert_eq!("rate:100".parse::<EmitMode>().unwrap(), EmitMode::FixedRate(100.0));
        assert!("rate:-1".parse::<EmitMode>().is_err());
        assert_eq!(EmitMode::FixedRate(2.5).to_string(), "rate:2.5");
    }

    #[test]
    fn canonical_csv() {
        let s = CanonicalSeries::read_csv("time,value\n0,1.5\n1,2\n".as_bytes()).unwrap();
        assert_eq!(s.times, [0.0, 1.0]);
        assert_eq!(s.values, [1.5, 2.0]);
        assert_eq!(CanonicalSeries::read_csv(s.to_csv().as_bytes()).unwrap(), s);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<(u32, u8, u16)>> {
        // (time step in ms, aid index, value); distinct timestamps keep "latest" unambiguous
        proptest::collection::vec((1u32..50, 0u8..3, any::<u16>()), 1..60)
    }

    proptest! {
        #[test]
        fn register_matches_brute_force_replay(steps in arb_stream(), rate in prop_oneof![Just(None), (1u32..40).prop_map(Some)]) {
            let mut t = 0u32;
            let frames: Vec<CanFrame> = steps.iter().map(|&(dt, a, v)| {
                t += dt;
                frame(f64::from(t) / 1000.0, 0x100 + u32::from(a), &v.to_be_bytes())
            }).collect();
            let members: Vec<BytePairId> = (0..3).map(|a| BytePairId::new(0x100 + a, 0)).collect();
            let mode = rate.map_or(EmitMode::PerMessage, |hz| EmitMode::FixedRate(f64::from(hz)));
            match observation_stream(&frames, &members, &Scaler::Identity, mode) {
                Ok(obs) => {
                    for o in &obs {
                        for (i, id) in members.iter().enumerate() {
                            let latest = frames.iter().rev()
                                .find(|f| f.aid == id.aid && f.timestamp <= o.time)
                                .map(|f| f64::from(decompose(f)[0].1));
                            prop_assert_eq!(Some(o.x[i]), latest);
                        }
                    }
                    prop_assert!(obs.windows(2).all(|w| w[0].time <= w[1].time));
                }
                Err(PipelineError::UnknownMember(_)) => {
                    prop_assert!(members.iter().any(|id| frames.iter().all(|f| f.aid != id.aid)));
                }
                Err(e) => prop_assert!(false, "unexpected error {e:?}"),
            }
        }

        #[test]
        fn scaled_observations_in_unit_cube(values in proptest::collection::vec(any::<u16>(), 2..40)) {
            let id = BytePairId::new(7, 0);
            let frames: Vec<CanFrame> = values.iter().enumerate()
                .map(|(i, v)| frame(i as f64, 7, &v.to_be_bytes())).collect();
            let scaler = Scaler::fit(&frames[..frames.len() / 2], &[id]);
            let obs = observation_stream(&frames, &[id], &scaler, EmitMode::PerMessage).unwrap();
            prop_assert!(obs.iter().all(|o| (0.0..=1.0).contains(&o.x[0])));
        }

        #[test]
        fn step_output_is_subset_of_input(values in proptest::collection::vec(-100i32..100, 1..30), len in 1usize..50) {
            let times: Vec<f64> = (0..values.len()).map(|i| i as f64 * 0.3).collect();
            let vals: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
            let out = interpolate_to_length(&times, &vals, len, InterpMode::Step).unwrap();
            prop_assert_eq!(out.len(), len);
            prop_assert!(out.iter().all(|v| vals.contains(v)));
        }

        #[test]
        fn constant_filter_idempotent_and_monotone(
            a in proptest::collection::vec((0u32..4, 0u8..3), 1..20),
            b in proptest::collection::vec((0u32..4, 0u8..3), 1..20),
        ) {
            let mk = |spec: &Vec<(u32, u8)>| {
                let frames = spec.iter().enumerate().map(|(i, &(aid, v))| frame(i as f64, aid, &[v])).collect();
                extract_series(&StateCapture::new("s", frames, None)).unwrap()
            };
            let (sa, sb) = (mk(&a), mk(&b));
            let one = constant_filter([&sa]);
            prop_assert_eq!(&one, &constant_filter([&sa, &sa]));
            let both = constant_filter([&sa, &sb]);
            prop_assert!(one.is_subset(&both));
        }
    }
}
