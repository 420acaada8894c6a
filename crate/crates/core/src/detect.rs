//! Online intrusion statistics over a frozen diffusion model.
//!
//! - Distance to manifold: mean distance from an embedded observation to its
//!   `r` nearest neighbors in the embedded training set.
//! - Increment discontinuity: distance between consecutive embedded points.
//!
//! Each statistic alerts when it strictly exceeds its calibrated threshold.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::CanFrame;
use crate::diffusion::{DiffusionModel, EmbeddedPoint};
use crate::error::{DetectError, DiffusionError, PipelineError};
use crate::pipeline::{EmitMode, Observation, ObservationStream};
use crate::spatial::KdTree;

pub const DEFAULT_NEIGHBORS: usize = 5;
pub const DEFAULT_QUANTILE: f64 = 0.999;
pub const DEFAULT_MULTIPLIER: f64 = 1.5;
pub const MIN_HOLDOUT: usize = 1000;
/// Statistic recorded when an observation has no kernel support at all.
pub const MAXIMAL_ANOMALY: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub quantile: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub k_dist: f64,
    pub k_cont: f64,
    /// Neighbor count used for the manifold distance.
    pub neighbors: usize,
    pub calibration: Calibration,
}

impl Thresholds {
    /// Thresholds that never alert, for computing statistics alone.
    pub fn unbounded(neighbors: usize) -> Self {
        Self {
            k_dist: f64::INFINITY,
            k_cont: f64::INFINITY,
            neighbors,
            calibration: Calibration {
                quantile: DEFAULT_QUANTILE,
                multiplier: DEFAULT_MULTIPLIER,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorKind {
    DistanceToManifold,
    IncrementDiscontinuity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub time: f64,
    pub detector: DetectorKind,
    pub statistic: f64,
    pub threshold: f64,
    pub observation_index: usize,
}

/// Nearest-neighbor view of the embedded training set Ψ(S).
#[derive(Debug, Clone)]
pub struct ManifoldIndex {
    tree: KdTree,
}

impl ManifoldIndex {
    pub fn new(model: &DiffusionModel) -> Self {
        Self {
            tree: KdTree::new(model.train_embed.clone()),
        }
    }

    /// Mean distance from `psi` to its `r` nearest training embeddings.
    pub fn distance(&self, psi: &[f64], r: usize) -> f64 {
        let nn = self.tree.knn(psi, r.max(1));
        nn.iter().map(|(d, _)| d).sum::<f64>() / nn.len() as f64
    }
}

pub fn manifold_distance(index: &ManifoldIndex, p: &EmbeddedPoint, r: usize) -> f64 {
    index.distance(&p.psi, r)
}

/// Per-stream memory of the increment detector.
#[derive(Debug, Clone, Default)]
pub struct DetectorState {
    previous: Option<EmbeddedPoint>,
}

impl DetectorState {
    pub fn previous(&self) -> Option<&EmbeddedPoint> {
        self.previous.as_ref()
    }

    /// Distance from the previous point, or `None` for the first one.
    pub fn increment_distance(&mut self, p: EmbeddedPoint) -> Result<Option<f64>, DetectError> {
        let out = match &self.previous {
            Some(prev) if p.time < prev.time => {
                return Err(DetectError::OutOfOrder {
                    previous: prev.time,
                    got: p.time,
                })
            }
            Some(prev) => Some(euclidean(&prev.psi, &p.psi)),
            None => None,
        };
        self.previous = Some(p);
        Ok(out)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linearly interpolated sample quantile (Hyndman–Fan type 7).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// One row of the statistic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time: f64,
    pub manifold_dist: f64,
    pub increment_dist: Option<f64>,
    pub alert_dist: bool,
    pub alert_cont: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detection {
    pub alerts: Vec<Alert>,
    pub trace: Vec<TraceRow>,
}

/// Streaming detector: feed observations in time order.
#[derive(Debug, Clone)]
pub struct Detector<'m> {
    model: &'m DiffusionModel,
    index: ManifoldIndex,
    thresholds: Thresholds,
    state: DetectorState,
    seen: usize,
}

impl<'m> Detector<'m> {
    pub fn new(model: &'m DiffusionModel, thresholds: Thresholds) -> Self {
        Self::with_index(model, ManifoldIndex::new(model), thresholds)
    }

    pub fn with_index(model: &'m DiffusionModel, index: ManifoldIndex, thresholds: Thresholds) -> Self {
        Self {
            model,
            index,
            thresholds,
            state: DetectorState::default(),
            seen: 0,
        }
    }

    /// Both statistics for one observation, without thresholding.
    pub fn statistics(&mut self, obs: &Observation) -> Result<(f64, Option<f64>), DetectError> {
        match self.model.embed_observation(obs) {
            Ok(p) => {
                let dist = self.index.distance(&p.psi, self.thresholds.neighbors);
                let incr = self.state.increment_distance(p)?;
                Ok((dist, incr))
            }
            Err(DiffusionError::ZeroKernelRow) => {
                if let Some(prev) = self.state.previous() {
                    if obs.time < prev.time {
                        return Err(DetectError::OutOfOrder {
                            previous: prev.time,
                            got: obs.time,
                        });
                    }
                }
                Ok((MAXIMAL_ANOMALY, None))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn process(&mut self, obs: &Observation, alerts: &mut Vec<Alert>) -> Result<TraceRow, DetectError> {
        let index = self.seen;
        let (dist, incr) = self.statistics(obs)?;
        self.seen += 1;
        let Thresholds { k_dist, k_cont, .. } = self.thresholds;
        let alert_dist = dist > k_dist;
        let alert_cont = incr.is_some_and(|v| v > k_cont);
        if alert_dist {
            alerts.push(Alert {
                time: obs.time,
                detector: DetectorKind::DistanceToManifold,
                statistic: dist,
                threshold: k_dist,
                observation_index: index,
            });
        }
        if alert_cont {
            alerts.push(Alert {
                time: obs.time,
                detector: DetectorKind::IncrementDiscontinuity,
                statistic: incr.unwrap(),
                threshold: k_cont,
                observation_index: index,
            });
        }
        Ok(TraceRow {
            time: obs.time,
            manifold_dist: dist,
            increment_dist: incr,
            alert_dist,
            alert_cont,
        })
    }
}

pub fn detect_stream(
    model: &DiffusionModel,
    thresholds: &Thresholds,
    observations: &[Observation],
) -> Result<Detection, DetectError> {
    let mut det = Detector::new(model, *thresholds);
    let mut out = Detection::default();
    for obs in observations {
        let row = det.process(obs, &mut out.alerts)?;
        out.trace.push(row);
    }
    Ok(out)
}

/// Statistic traces of an observation sequence, ZeroKernelRow sentinels included.
pub fn statistic_traces(
    model: &DiffusionModel,
    observations: &[Observation],
    neighbors: usize,
) -> Result<(Vec<f64>, Vec<f64>), DetectError> {
    let mut det = Detector::new(
        model,
        Thresholds {
            k_dist: f64::INFINITY,
            k_cont: f64::INFINITY,
            neighbors,
            calibration: Calibration {
                quantile: 1.0,
                multiplier: 1.0,
            },
        },
    );
    let mut dist = Vec::with_capacity(observations.len());
    let mut incr = Vec::with_capacity(observations.len());
    for obs in observations {
        let (d, i) = det.statistics(obs)?;
        dist.push(d);
        incr.extend(i);
    }
    Ok((dist, incr))
}

/// Thresholds at `c` times the `q`-quantile of each statistic on a holdout.
pub fn calibrate(
    model: &DiffusionModel,
    holdout: &[Observation],
    q: f64,
    c: f64,
    neighbors: usize,
) -> Result<Thresholds, DetectError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(DetectError::InvalidParameter(format!(
            "quantile must lie in (0, 1), got {q}"
        )));
    }
    if !(c >= 1.0 && c.is_finite()) {
        return Err(DetectError::InvalidParameter(format!(
            "multiplier must be at least 1, got {c}"
        )));
    }
    if holdout.len() < MIN_HOLDOUT {
        return Err(DetectError::InsufficientHoldout(holdout.len(), MIN_HOLDOUT));
    }
    let (dist, incr) = statistic_traces(model, holdout, neighbors)?;
    thresholds_from_traces(&dist, &incr, q, c, neighbors)
}

/// Threshold rule applied to precomputed statistic traces.
pub fn thresholds_from_traces(
    dist: &[f64],
    incr: &[f64],
    q: f64,
    c: f64,
    neighbors: usize,
) -> Result<Thresholds, DetectError> {
    let finite = |v: &[f64]| -> Vec<f64> { v.iter().copied().filter(|x| *x < MAXIMAL_ANOMALY).collect() };
    let pick = |v: Vec<f64>, what: &str| -> Result<f64, DetectError> {
        let t = c * quantile(&v, q)
            .ok_or_else(|| DetectError::InvalidParameter(format!("no finite {what} statistics in holdout")))?;
        if t > 0.0 {
            Ok(t)
        } else {
            log::warn!("{what} threshold is zero on the holdout; using the smallest positive value");
            Ok(f64::MIN_POSITIVE)
        }
    };
    Ok(Thresholds {
        k_dist: pick(finite(dist), "manifold distance")?,
        k_cont: pick(finite(incr), "increment")?,
        neighbors,
        calibration: Calibration {
            quantile: q,
            multiplier: c,
        },
    })
}

/// Drop alerts that follow an emitted alert of the same detector within
/// `cooldown` seconds.
pub fn debounce(alerts: &[Alert], cooldown: f64) -> Vec<Alert> {
    let mut last: [Option<f64>; 2] = [None, None];
    alerts
        .iter()
        .filter(|a| {
            let slot = &mut last[a.detector as usize];
            if slot.is_some_and(|t| a.time - t < cooldown) {
                return false;
            }
            *slot = Some(a.time);
            true
        })
        .cloned()
        .collect()
}

/// Detection over a raw frame capture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptureDetection {
    pub detection: Detection,
    pub observations: usize,
    /// Frames whose AID never appeared in training traffic.
    pub unseen_frames: usize,
    pub unseen_aids: BTreeSet<u32>,
}

/// Build observations from `frames` with the model's members and scaler and
/// run both detectors over them.
pub fn detect_frames(
    model: &DiffusionModel,
    thresholds: &Thresholds,
    frames: &[CanFrame],
    mode: EmitMode,
) -> Result<CaptureDetection, crate::Error> {
    let known: BTreeSet<u32> = model.training_aids.iter().copied().collect();
    let mut out = CaptureDetection::default();
    for f in frames {
        if !known.is_empty() && !known.contains(&f.aid) {
            out.unseen_frames += 1;
            out.unseen_aids.insert(f.aid);
        }
    }
    if !out.unseen_aids.is_empty() {
        log::warn!(
            "{} frames from {} AIDs unseen in training were excluded",
            out.unseen_frames,
            out.unseen_aids.len()
        );
    }
    if frames.is_empty() {
        return Ok(out);
    }
    let mut stream = ObservationStream::new(model.member_ids.clone(), model.scaler.clone(), mode);
    let mut det = Detector::new(model, *thresholds);
    let mut pending = Vec::new();
    for f in frames {
        stream.push(f, &mut pending);
        for obs in pending.drain(..) {
            let row = det.process(&obs, &mut out.detection.alerts)?;
            out.detection.trace.push(row);
        }
    }
    let finished = stream.finish(&mut pending);
    for obs in pending.drain(..) {
        let row = det.process(&obs, &mut out.detection.alerts)?;
        out.detection.trace.push(row);
    }
    finished.map_err(|e: PipelineError| crate::Error::from(e))?;
    out.observations = out.detection.trace.len();
    Ok(out)
}

fn fmt_stat(v: f64) -> String {
    if v >= MAXIMAL_ANOMALY {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

/// Plot-ready trace: `time,manifold_dist,increment_dist,alert_dist,alert_cont`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("time,manifold_dist,increment_dist,alert_dist,alert_cont\n");
    for r in trace {
        let incr = r.increment_dist.map(fmt_stat).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.time,
            fmt_stat(r.manifold_dist),
            incr,
            u8::from(r.alert_dist),
            u8::from(r.alert_cont)
        );
    }
    out
}

/// One JSON object per alert, newline separated.
pub fn alerts_jsonl(alerts: &[Alert]) -> String {
    alerts
        .iter()
        .map(|a| serde_json::to_string(a).expect("alerts serialize") + "\n")
        .collect()
}
