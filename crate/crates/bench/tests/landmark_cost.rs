use canshape_bench::wide_fixture;
use canshape_core::detect::{Thresholds, DEFAULT_NEIGHBORS};
use canshape_core::workflow::{bench_observations, DEFAULT_CAN_RATE};

#[test]
fn fewer_landmarks_run_faster() {
    let rate = |k| {
        let (model, obs) = wide_fixture(70, k, 3, 30.0);
        let th = Thresholds::unbounded(DEFAULT_NEIGHBORS);
        // best of three passes damps scheduler noise
        (0..3)
            .map(|_| {
                bench_observations(&model, &th, &obs, DEFAULT_CAN_RATE)
                    .unwrap()
                    .observations_per_sec
            })
            .fold(0.0, f64::max)
    };
    let (small, large) = (rate(50), rate(1000));
    assert!(small > large, "k=50 {small:.0} obs/s vs k=1000 {large:.0} obs/s");
}
