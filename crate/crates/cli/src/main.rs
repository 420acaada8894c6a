//! `canshape`: learn the geometry of ambient CAN traffic and flag intrusions.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use canshape_core::artifact::{self, Envelope, Manifest};
use canshape_core::cocluster::{cluster_heatmap_order, CoClusterModel, DEFAULT_CLUSTERS};
use canshape_core::codec::read_log_file;
use canshape_core::detect::{self, Thresholds};
use canshape_core::diffusion::{DiffusionModel, DEFAULT_DIM, DEFAULT_LANDMARKS};
use canshape_core::pipeline::{StateCapture, DEFAULT_INTERP_LEN};
use canshape_core::simulate::{self, AttackSpec, Delta, LatentVehicle};
use canshape_core::workflow::{self, ClusterConfig, DEFAULT_CAN_RATE};
use canshape_core::{EmitMode, FitParams, GammaChoice, LogFormat};

#[derive(Parser, Debug)]
#[command(
    name = "canshape",
    version,
    about = "Geometry-based intrusion detection for CAN traffic"
)]
struct Cli {
    /// Seed of every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log format of captures read or written.
    #[arg(long, global = true, default_value = "candump")]
    format: LogFormat,
    /// On failure, print the error as JSON on stderr.
    #[arg(long, global = true)]
    errors_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group byte pairs of ambient captures into co-clusters.
    Cluster(ClusterArgs),
    /// Fit a diffusion model on one cluster's observations.
    Train(TrainArgs),
    /// Set detection thresholds from an ambient holdout.
    Calibrate(CalibrateArgs),
    /// Run both detectors over a capture.
    Detect(DetectArgs),
    /// Generate synthetic captures, optionally under attack.
    Simulate(SimulateArgs),
    /// Measure embedding and detection throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_INTERP_LEN)]
    interp_len: usize,
    #[arg(long)]
    out: PathBuf,
    /// Cluster-ordered correlation matrix as CSV.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cluster_model: PathBuf,
    /// State label or cluster index.
    #[arg(long)]
    cluster: String,
    /// Landmark count.
    #[arg(long, default_value_t = DEFAULT_LANDMARKS)]
    k: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    m: usize,
    /// `auto` or a positive number.
    #[arg(long, default_value = "auto")]
    gamma: GammaChoice,
    #[arg(long, default_value = "per-message")]
    emit: EmitMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Capture log; repeatable.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Manifest whose captures are read in order.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long, default_value_t = detect::DEFAULT_QUANTILE)]
    q: f64,
    #[arg(long, default_value_t = detect::DEFAULT_MULTIPLIER)]
    c: f64,
    #[arg(long, default_value_t = detect::DEFAULT_NEIGHBORS)]
    neighbors: usize,
    /// Defaults to the emission mode the model was trained with.
    #[arg(long)]
    emit: Option<EmitMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    alerts: Option<PathBuf>,
    /// Suppress repeated alerts of one detector within this many milliseconds.
    #[arg(long)]
    cooldown: Option<f64>,
    #[arg(long)]
    emit: Option<EmitMode>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Vehicle spec; the built-in reference vehicle when absent.
    #[arg(long)]
    vehicle: Option<PathBuf>,
    /// Seconds per state of the reference vehicle.
    #[arg(long, default_value_t = 60.0)]
    state_secs: f64,
    /// Replace the states with one constant-speed cruise of this many seconds.
    #[arg(long)]
    cruise: Option<f64>,
    /// Attack spec applied to the merged capture.
    #[arg(long, conflicts_with = "inject_model")]
    attack: Option<PathBuf>,
    /// Inject into every member of this model over [10,20], [30,40], [50,60] s.
    #[arg(long)]
    inject_model: Option<PathBuf>,
    /// Injection offset as a fraction of each target's training range.
    #[arg(long, default_value_t = 0.1)]
    delta_fraction: f64,
    /// Merged capture log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth attack windows.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Directory for per-state logs, canonical series and a manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write the vehicle spec used.
    #[arg(long)]
    write_vehicle: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Thresholds to apply; alerts are computed but not reported.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    emit: Option<EmitMode>,
    /// Frame rate to compare against.
    #[arg(long, default_value_t = DEFAULT_CAN_RATE)]
    can_rate: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(error: anyhow::Error) -> Failure {
    let validation = error.chain().any(|e| {
        e.downcast_ref::<canshape_core::Error>()
            .is_some_and(|e| e.is_validation())
    }) || error.downcast_ref::<Usage>().is_some();
    Failure {
        code: if validation { 1 } else { 2 },
        error,
    }
}

/// Bad command-line input detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let wants_json = std::env::args().any(|a| a == "--errors-json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report(wants_json, 1, "usage", &e.to_string());
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let f = classify(e);
            let kind = if f.code == 1 { "validation" } else { "runtime" };
            report(cli.errors_json, f.code, kind, &format!("{:#}", f.error));
            ExitCode::from(f.code)
        }
    }
}

fn report(json: bool, code: u8, kind: &str, message: &str) {
    let mut err = std::io::stderr().lock();
    if json {
        let _ = writeln!(
            err,
            "{}",
            json!({"error": {"kind": kind, "exit_code": code, "message": message.trim_end()}})
        );
    } else {
        let _ = writeln!(err, "error: {}", message.trim_end());
    }
}

fn run(cli: &Cli) -> anyhow::Result<Value> {
    match &cli.command {
        Command::Cluster(a) => cmd_cluster(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Detect(a) => cmd_detect(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_model(path: &Path) -> anyhow::Result<Envelope<DiffusionModel>> {
    let env: Envelope<DiffusionModel> = artifact::read_envelope(path)?;
    env.payload.validate().map_err(|e| canshape_core::Error::Artifact {
        path: path_str(path),
        message: e.to_string(),
    })?;
    Ok(env)
}

/// The explicit mode, else the one recorded at training time.
fn emit_mode(explicit: Option<EmitMode>, model: &Envelope<DiffusionModel>) -> anyhow::Result<EmitMode> {
    if let Some(m) = explicit {
        return Ok(m);
    }
    match model.config.get("emit").and_then(Value::as_str) {
        Some(s) => s.parse().map_err(|e: String| anyhow!(e)),
        None => Ok(EmitMode::PerMessage),
    }
}

fn read_capture(path: &Path, format: LogFormat) -> anyhow::Result<StateCapture> {
    let (frames, stats) = read_log_file(path, format).map_err(|e| canshape_core::Error::Artifact {
        path: path_str(path),
        message: e.to_string(),
    })?;
    log::info!("{}: {} data frames", path.display(), stats.data_frames);
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(StateCapture::new(label, frames, None))
}

fn cmd_cluster(cli: &Cli, a: &ClusterArgs) -> anyhow::Result<Value> {
    let captures = Manifest::load_captures(&a.manifest)?;
    let out = workflow::cluster_captures(
        &captures,
        &ClusterConfig {
            k: a.k,
            interp_len: a.interp_len,
            seed: cli.seed,
        },
    )?;
    if !out.model.converged {
        log::warn!("k-means stopped at its iteration cap; keeping the best partition found");
    }
    let config = json!({
        "command": "cluster",
        "manifest": path_str(&a.manifest),
        "k": a.k,
        "interp_len": a.interp_len,
        "seed": cli.seed,
    });
    artifact::write_json(&a.out, &Envelope::new(config, &out.model))?;
    if let Some(h) = &a.heatmap {
        let order = cluster_heatmap_order(&out.model, &out.matrix)?;
        artifact::write_atomic(h, out.matrix.permuted(&order).to_csv().as_bytes())?;
    }
    Ok(json!({
        "signals": out.model.ids.len(),
        "discarded_constant": out.discarded.len(),
        "cluster_sizes": out.model.cluster_sizes(),
        "labels": out.model.labels,
        "unlabeled_states": out.unlabeled_states,
        "disagreement_count": out.model.disagreement_count,
    }))
}

fn cluster_members(model: &CoClusterModel, which: &str) -> anyhow::Result<Vec<canshape_core::BytePairId>> {
    let members = match model.members_of(which) {
        Some(m) => m,
        None => match which.parse::<usize>() {
            Ok(i) if i < model.k => model.members(i),
            _ => {
                return Err(usage(format!(
                    "no cluster {which:?}; labels are {:?} and indices 0..{}",
                    model.labels.keys().collect::<Vec<_>>(),
                    model.k
                )))
            }
        },
    };
    if members.is_empty() {
        return Err(usage(format!("cluster {which:?} holds no byte pairs")));
    }
    Ok(members)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<Value> {
    let cluster: Envelope<CoClusterModel> = artifact::read_envelope(&a.cluster_model)?;
    let members = cluster_members(&cluster.payload, &a.cluster)?;
    let captures = Manifest::load_captures(&a.manifest)?;
    let fit = workflow::train_captures(
        &captures,
        &members,
        a.emit,
        FitParams {
            landmarks: a.k,
            dim: a.m,
            gamma: a.gamma,
            seed: cli.seed,
        },
    )?;
    let model = &fit.model;
    let config = json!({
        "command": "train",
        "manifest": path_str(&a.manifest),
        "cluster_model": path_str(&a.cluster_model),
        "cluster": a.cluster,
        "k": a.k,
        "m": a.m,
        "gamma": a.gamma.to_string(),
        "emit": a.emit.to_string(),
        "seed": cli.seed,
    });
    artifact::write_json(&a.out, &Envelope::new(config, model))?;
    Ok(json!({
        "members": model.member_ids.len(),
        "observations": model.n_train(),
        "landmarks": model.k,
        "gamma": model.gamma,
        "eigenvalues": model.eigvals,
    }))
}

fn holdout_captures(cli: &Cli, inputs: &InputArgs) -> anyhow::Result<Vec<StateCapture>> {
    let mut caps = Vec::new();
    if let Some(m) = &inputs.manifest {
        caps.extend(Manifest::load_captures(m)?);
    }
    for p in &inputs.input {
        caps.push(read_capture(p, cli.format)?);
    }
    if caps.is_empty() {
        return Err(usage("give at least one --input or a --manifest"));
    }
    Ok(caps)
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> anyhow::Result<Value> {
    let model = load_model(&a.model)?;
    let emit = emit_mode(a.emit, &model)?;
    let holdout = holdout_captures(cli, &a.inputs)?;
    let th = workflow::calibrate_captures(&model.payload, &holdout, emit, a.q, a.c, a.neighbors)?;
    let config = json!({
        "command": "calibrate",
        "model": path_str(&a.model),
        "inputs": a.inputs.input.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        "manifest": a.inputs.manifest.as_deref().map(path_str),
        "q": a.q,
        "c": a.c,
        "neighbors": a.neighbors,
        "emit": emit.to_string(),
        "seed": cli.seed,
    });
    artifact::write_json(&a.out, &Envelope::new(config, th))?;
    Ok(json!({ "k_dist": th.k_dist, "k_cont": th.k_cont }))
}

fn cmd_detect(cli: &Cli, a: &DetectArgs) -> anyhow::Result<Value> {
    let model = load_model(&a.model)?;
    let th: Envelope<Thresholds> = artifact::read_envelope(&a.thresholds)?;
    let emit = emit_mode(a.emit, &model)?;
    let capture = read_capture(&a.input, cli.format)?;
    let out = detect::detect_frames(&model.payload, &th.payload, &capture.frames, emit)?;
    let mut alerts = out.detection.alerts.clone();
    if let Some(ms) = a.cooldown {
        if !(ms >= 0.0) {
            return Err(usage("cooldown must be non-negative"));
        }
        alerts = detect::debounce(&alerts, ms / 1000.0);
    }
    if let Some(p) = &a.trace {
        artifact::write_atomic(p, detect::trace_csv(&out.detection.trace).as_bytes())?;
    }
    if let Some(p) = &a.alerts {
        artifact::write_atomic(p, detect::alerts_jsonl(&alerts).as_bytes())?;
    }
    let count = |kind| alerts.iter().filter(|x| x.detector == kind).count();
    Ok(json!({
        "observations": out.observations,
        "alerts_distance": count(detect::DetectorKind::DistanceToManifold),
        "alerts_increment": count(detect::DetectorKind::IncrementDiscontinuity),
        "unseen_frames": out.unseen_frames,
        "unseen_aids": out.unseen_aids.iter().map(|a| format!("{a:03X}")).collect::<Vec<_>>(),
    }))
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> anyhow::Result<Value> {
    let mut vehicle = match &a.vehicle {
        Some(p) => artifact::read_json::<LatentVehicle>(p)?,
        None => simulate::reference_vehicle(a.state_secs),
    };
    if let Some(d) = a.cruise {
        vehicle = vehicle.with_states(vec![simulate::cruise_state(d)]);
    }
    vehicle.validate().map_err(canshape_core::Error::from)?;
    if a.out.is_none() && a.out_dir.is_none() && a.write_vehicle.is_none() {
        return Err(usage("nothing to write: give --out, --out-dir or --write-vehicle"));
    }
    if a.truth.is_some() && a.out.is_none() {
        return Err(usage("--truth needs --out"));
    }
    if let Some(p) = &a.write_vehicle {
        let mut bytes = serde_json::to_vec_pretty(&vehicle)?;
        bytes.push(b'\n');
        artifact::write_atomic(p, &bytes)?;
    }
    if a.out.is_none() && a.out_dir.is_none() {
        return Ok(json!({ "vehicle": a.write_vehicle.as_deref().map(path_str) }));
    }
    let captures = simulate::generate_ambient(&vehicle, cli.seed).map_err(canshape_core::Error::from)?;
    let mut summary = json!({
        "states": captures.iter().map(|c| c.label.clone()).collect::<Vec<_>>(),
        "frames": captures.iter().map(|c| c.frames.len()).sum::<usize>(),
    });
    if let Some(dir) = &a.out_dir {
        let manifest = Manifest::write_captures(dir, &captures, cli.format)?;
        summary["manifest"] = json!(path_str(&manifest));
    }
    let Some(out) = &a.out else {
        return Ok(summary);
    };
    let merged = StateCapture::new(
        "capture",
        captures.iter().flat_map(|c| c.frames.iter().cloned()).collect(),
        None,
    );
    let spec = match (&a.attack, &a.inject_model) {
        (Some(p), _) => Some(artifact::read_json::<AttackSpec>(p)?),
        (None, Some(p)) => {
            let model = load_model(p)?.payload;
            let deltas = simulate::range_deltas(&model.scaler, &model.member_ids, a.delta_fraction);
            Some(AttackSpec::three_window_injection(
                model.member_ids.clone(),
                Delta::PerTarget(deltas),
            ))
        }
        (None, None) => None,
    };
    let (frames, truth) = match &spec {
        Some(spec) => {
            let attacked = simulate::inject_attack(&merged, spec, cli.seed).map_err(canshape_core::Error::from)?;
            summary["attack_frames"] = json!(attacked.truth.attack_frames);
            (attacked.capture.frames, Some(attacked.truth))
        }
        None => (merged.frames, None),
    };
    artifact::write_atomic(out, artifact::log_text(&frames, cli.format).as_bytes())?;
    if let Some(p) = &a.truth {
        let Some(truth) = truth else {
            bail!(usage("--truth needs an attack (--attack or --inject-model)"));
        };
        let config = json!({
            "command": "simulate",
            "vehicle": a.vehicle.as_deref().map(path_str),
            "attack": a.attack.as_deref().map(path_str),
            "inject_model": a.inject_model.as_deref().map(path_str),
            "delta_fraction": a.delta_fraction,
            "seed": cli.seed,
        });
        artifact::write_json(p, &Envelope::new(config, truth))?;
    }
    summary["out"] = json!(path_str(out));
    Ok(summary)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> anyhow::Result<Value> {
    let model = load_model(&a.model)?;
    let th = match &a.thresholds {
        Some(p) => artifact::read_envelope::<Thresholds>(p)?.payload,
        None => Thresholds::unbounded(detect::DEFAULT_NEIGHBORS),
    };
    let emit = emit_mode(a.emit, &model)?;
    let capture = read_capture(&a.input, cli.format)?;
    let obs = if capture.frames.is_empty() {
        Vec::new()
    } else {
        workflow::capture_observations(&[capture], &model.payload.member_ids, &model.payload.scaler, emit)
            .context("building observations")?
    };
    let report = workflow::bench_observations(&model.payload, &th, &obs, a.can_rate)?;
    let value = serde_json::to_value(&report)?;
    if let Some(p) = &a.out {
        let config = json!({
            "command": "bench",
            "model": path_str(&a.model),
            "thresholds": a.thresholds.as_deref().map(path_str),
            "input": path_str(&a.input),
            "emit": emit.to_string(),
            "can_rate": a.can_rate,
            "seed": cli.seed,
        });
        artifact::write_json(p, &Envelope::new(config, &report))?;
    }
    Ok(value)
}
