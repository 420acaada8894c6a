//! Batch compositions over whole captures: cluster, train, calibrate.

use std::collections::{BTreeMap, BTreeSet};

use crate::cocluster::{correlation_matrix, spectral_cocluster, CoClusterModel, CorrelationMatrix, DEFAULT_CLUSTERS};
use crate::codec::BytePairId;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{self, Detector, Thresholds};
use crate::diffusion::{fit_full, DiffusionModel, Fit, FitParams};
use crate::error::{PipelineError, Result};
use crate::pipeline::{
    constant_filter, extract_series, observation_stream, resample, uniform_grid, EmitMode, InterpMode, Observation,
    Scaler, StateCapture, DEFAULT_INTERP_LEN,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    /// Points per state segment.
    pub interp_len: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_CLUSTERS,
            interp_len: DEFAULT_INTERP_LEN,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOutput {
    pub model: CoClusterModel,
    pub matrix: CorrelationMatrix,
    /// Byte pairs dropped by the constant filter.
    pub discarded: Vec<BytePairId>,
    /// States whose canonical series was constant and so could not label a cluster.
    pub unlabeled_states: Vec<String>,
}

/// Byte-pair series, canonical series, and the byte pairs dropped as constant.
pub type InterpolatedSeries = (
    BTreeMap<BytePairId, Vec<f64>>,
    BTreeMap<String, Vec<f64>>,
    Vec<BytePairId>,
);

/// Concatenated per-state segments of `interp_len` points each.
///
/// Byte pairs absent from a state hold their mean over the other states
/// there; each canonical series holds its own mean outside its state.
pub fn interpolated_series(captures: &[StateCapture], interp_len: usize) -> Result<InterpolatedSeries> {
    if interp_len < 2 {
        return Err(PipelineError::InvalidParameter(format!("interpolation length {interp_len} < 2")).into());
    }
    let per_state = captures.iter().map(extract_series).collect::<Result<Vec<_>, _>>()?;
    let kept = constant_filter(&per_state);
    let all: BTreeSet<BytePairId> = per_state.iter().flat_map(|m| m.keys().copied()).collect();
    let discarded: Vec<BytePairId> = all.difference(&kept).copied().collect();

    let mut segments: BTreeMap<BytePairId, Vec<Option<Vec<f64>>>> = BTreeMap::new();
    let mut canon_segments: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for (s, (cap, series)) in captures.iter().zip(&per_state).enumerate() {
        let (t0, t1) = cap.span().expect("non-empty after extract_series");
        let grid = uniform_grid(t0, t1, interp_len);
        for id in &kept {
            let seg = series.get(id).map(|bp| {
                let v: Vec<f64> = bp.values.iter().map(|&x| f64::from(x)).collect();
                resample(&bp.times, &v, &grid, InterpMode::Step).expect("non-empty series")
            });
            segments.entry(*id).or_insert_with(|| vec![None; captures.len()])[s] = seg;
        }
        if let Some(c) = &cap.canonical {
            let v = resample(&c.times, &c.values, &grid, InterpMode::Cubic)?;
            canon_segments.push((cap.label.clone(), s, v));
        }
    }

    let total = interp_len * captures.len();
    let mut series = BTreeMap::new();
    for (id, segs) in segments {
        let present: Vec<&Vec<f64>> = segs.iter().flatten().collect();
        let mean = present.iter().flat_map(|v| v.iter()).sum::<f64>() / (present.len() * interp_len) as f64;
        let mut out = Vec::with_capacity(total);
        for seg in &segs {
            match seg {
                Some(v) => out.extend_from_slice(v),
                None => out.extend(std::iter::repeat_n(mean, interp_len)),
            }
        }
        series.insert(id, out);
    }
    let mut canonical = BTreeMap::new();
    for (label, s, v) in canon_segments {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let mut out = vec![mean; total];
        out[s * interp_len..(s + 1) * interp_len].copy_from_slice(&v);
        if canonical.insert(label.clone(), out).is_some() {
            return Err(PipelineError::InvalidParameter(format!("duplicate state label {label:?}")).into());
        }
    }
    Ok((series, canonical, discarded))
}

/// Constant filter, interpolation, correlation and co-clustering.
pub fn cluster_captures(captures: &[StateCapture], config: &ClusterConfig) -> Result<ClusterOutput> {
    let (series, mut canonical, discarded) = interpolated_series(captures, config.interp_len)?;
    let mut unlabeled_states = Vec::new();
    canonical.retain(|label, v| {
        let varies = v.iter().any(|x| *x != v[0]);
        if !varies {
            log::warn!("canonical series of state {label:?} is constant; the state stays unlabeled");
            unlabeled_states.push(label.clone());
        }
        varies
    });
    let matrix = correlation_matrix(&series, &canonical)?;
    let model = spectral_cocluster(&matrix, config.k, config.seed)?;
    Ok(ClusterOutput {
        model,
        matrix,
        discarded,
        unlabeled_states,
    })
}

/// Observations of `members` over each capture in turn. Each capture has its
/// own warm-up; a capture missing a member entirely is an error.
pub fn capture_observations(
    captures: &[StateCapture],
    members: &[BytePairId],
    scaler: &Scaler,
    mode: EmitMode,
) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for cap in captures {
        out.extend(observation_stream(&cap.frames, members, scaler, mode)?);
    }
    Ok(out)
}

/// Fit the scaler and the diffusion model on the members' observations.
pub fn train_captures(
    captures: &[StateCapture],
    members: &[BytePairId],
    mode: EmitMode,
    params: FitParams,
) -> Result<Fit> {
    if members.is_empty() {
        return Err(PipelineError::InvalidParameter("no member byte pairs to train on".into()).into());
    }
    let scaler = Scaler::fit(captures.iter().flat_map(|c| &c.frames), members);
    let obs = capture_observations(captures, members, &scaler, mode)?;
    let x: Vec<Vec<f64>> = obs.into_iter().map(|o| o.x).collect();
    let mut fit = fit_full(&x, params)?;
    let aids: BTreeSet<u32> = captures.iter().flat_map(|c| c.frames.iter().map(|f| f.aid)).collect();
    fit.model = fit
        .model
        .with_signals(members.to_vec(), scaler, aids.into_iter().collect());
    Ok(fit)
}

pub fn calibrate_captures(
    model: &DiffusionModel,
    holdout: &[StateCapture],
    mode: EmitMode,
    quantile: f64,
    multiplier: f64,
    neighbors: usize,
) -> Result<Thresholds> {
    let obs = capture_observations(holdout, &model.member_ids, &model.scaler, mode)?;
    Ok(detect::calibrate(model, &obs, quantile, multiplier, neighbors)?)
}

/// Default bus rate to compare throughput against: the frame rate of a
/// saturated 500 kbit/s high-speed CAN bus, rounded.
pub const DEFAULT_CAN_RATE: f64 = 2000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub observations: usize,
    pub elapsed_secs: f64,
    pub observations_per_sec: f64,
    pub p50_latency_us: f64,
    pub p99_latency_us: f64,
    pub can_rate: f64,
    pub meets_can_rate: bool,
}

/// Time embedding plus both statistics per observation, as fast as possible.
pub fn bench_observations(
    model: &DiffusionModel,
    thresholds: &Thresholds,
    observations: &[Observation],
    can_rate: f64,
) -> Result<BenchReport> {
    let mut det = Detector::new(model, *thresholds);
    let mut alerts = Vec::new();
    let mut lat = Vec::with_capacity(observations.len());
    let start = Instant::now();
    for obs in observations {
        let t = Instant::now();
        det.process(obs, &mut alerts)?;
        lat.push(t.elapsed().as_secs_f64() * 1e6);
        alerts.clear();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let rate = if observations.is_empty() || elapsed <= 0.0 {
        0.0
    } else {
        observations.len() as f64 / elapsed
    };
    // nearest-rank percentiles
    lat.sort_by(f64::total_cmp);
    let pct = |p: f64| -> f64 {
        if lat.is_empty() {
            0.0
        } else {
            lat[((p * lat.len() as f64).ceil() as usize).clamp(1, lat.len()) - 1]
        }
    };
    Ok(BenchReport {
        observations: observations.len(),
        elapsed_secs: elapsed,
        observations_per_sec: rate,
        p50_latency_us: pct(0.5),
        p99_latency_us: pct(0.99),
        can_rate,
        meets_can_rate: !observations.is_empty() && rate >= can_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CanFrame;
    use crate::pipeline::CanonicalSeries;
    use crate::simulate::{generate_ambient, reference_vehicle};

    fn frame(t: f64, aid: u32, payload: &[u8]) -> CanFrame {
        CanFrame::new(t, aid, payload, "can0").unwrap()
    }

    #[test]
    fn absent_pairs_hold_their_mean_and_canonicals_fill_outside() {
        let a = StateCapture::new(
            "A",
            vec![frame(0.0, 1, &[0, 1]), frame(1.0, 1, &[0, 3])],
            Some(CanonicalSeries {
                times: vec![0.0, 1.0],
                values: vec![0.0, 2.0],
            }),
        );
        let b = StateCapture::new("B", vec![frame(2.0, 2, &[0, 7]), frame(3.0, 2, &[0, 9])], None);
        let (series, canonical, discarded) = interpolated_series(&[a, b], 3).unwrap();
        assert_eq!(
            series[&BytePairId::new(1, 0)],
            vec![1.0, 1.0, 3.0, 5.0 / 3.0, 5.0 / 3.0, 5.0 / 3.0]
        );
        assert_eq!(
            series[&BytePairId::new(2, 0)],
            vec![23.0 / 3.0; 3]
                .into_iter()
                .chain([7.0, 7.0, 9.0])
                .collect::<Vec<_>>()
        );
        let c = &canonical["A"];
        assert!((c[1] - 1.0).abs() < 1e-12);
        assert_eq!(&c[3..], &[1.0, 1.0, 1.0]);
        // all-zero pairs 1..3 of both AIDs are discarded
        assert_eq!(discarded.len(), 6);
    }

    #[test]
    fn reference_vehicle_clusters_by_latent() {
        let caps = generate_ambient(&reference_vehicle(20.0), 0).unwrap();
        let out = cluster_captures(
            &caps,
            &ClusterConfig {
                k: 3,
                interp_len: 1000,
                seed: 0,
            },
        )
        .unwrap();
        // the constant pairs are filtered out
        assert_eq!(out.discarded.len(), 8 + 4);
        assert_eq!(out.unlabeled_states, vec!["KeyOn".to_string()]);
        let sizes = out.model.cluster_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 24 + 4);
    }

    #[test]
    fn bench_of_empty_stream_reports_zero() {
        let caps = generate_ambient(&reference_vehicle(3.0), 0).unwrap();
        let members: Vec<BytePairId> = (0..3).map(|p| BytePairId::new(0x0A0, p)).collect();
        let fit = train_captures(
            &caps,
            &members,
            EmitMode::FixedRate(50.0),
            FitParams {
                landmarks: 30,
                ..FitParams::default()
            },
        )
        .unwrap();
        let th = Thresholds {
            k_dist: 1.0,
            k_cont: 1.0,
            neighbors: 5,
            calibration: detect::Calibration {
                quantile: 0.999,
                multiplier: 1.5,
            },
        };
        let r = bench_observations(&fit.model, &th, &[], DEFAULT_CAN_RATE).unwrap();
        assert_eq!(r.observations, 0);
        assert_eq!(r.observations_per_sec, 0.0);
        assert!(!r.meets_can_rate);
        let obs = capture_observations(&caps, &members, &fit.model.scaler, EmitMode::FixedRate(50.0)).unwrap();
        let r = bench_observations(&fit.model, &th, &obs, DEFAULT_CAN_RATE).unwrap();
        assert_eq!(r.observations, obs.len());
        assert!(r.p50_latency_us <= r.p99_latency_us);
    }
}
