//! Benchmark fixtures: models trained on simulated traffic and the live
//! observations to feed them.

use canshape_core::diffusion::{DiffusionModel, FitParams, GammaChoice};
use canshape_core::simulate::{generate_ambient, wide_vehicle};
use canshape_core::workflow;
use canshape_core::{EmitMode, Observation};

pub const RATE: EmitMode = EmitMode::FixedRate(100.0);

/// A model over `d` simulated signals with `k` landmarks and `m` dimensions,
/// plus observations from an independent capture of the same vehicle.
pub fn wide_fixture(d: usize, k: usize, m: usize, secs: f64) -> (DiffusionModel, Vec<Observation>) {
    let vehicle = wide_vehicle(d, secs);
    let members: Vec<_> = vehicle.sensors.iter().map(|s| s.id).collect();
    let train = generate_ambient(&vehicle, 1).expect("simulated training capture");
    let fit = workflow::train_captures(
        &train,
        &members,
        RATE,
        FitParams {
            landmarks: k,
            dim: m,
            gamma: GammaChoice::Auto,
            seed: 1,
        },
    )
    .expect("fit");
    let live = generate_ambient(&vehicle, 2).expect("simulated live capture");
    let obs =
        workflow::capture_observations(&live, &fit.model.member_ids, &fit.model.scaler, RATE).expect("observations");
    (fit.model, obs)
}
