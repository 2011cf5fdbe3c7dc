//! Scenario harness and CLI.
//!
//! Two canned experiments: a ring-style wave-mitigation scenario where the
//! head vehicle injects a half-sine velocity perturbation and the tail
//! response is compared across CAV policies, and a velocity-tracking
//! scenario over seeded synthetic head profiles. Every run is reproducible
//! from `(config, seed)` and writes `trajectory.csv`, `diagnostics.csv` and
//! `report.json` into its own directory.

pub mod config;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    diagnostics_csv, realized_cost, CavController, ClosedLoopRun, DfkController, EdmdController,
    HdvController, MpcConfig, PlantSim, ReferencePolicy,
};
use crate::error::{Error, Result};
use crate::koopman::{edmd_fit, iterate, EdmdModel, KoopmanRepresentation};
use crate::traffic::{
    equilibrium_spacing, generate_offline_data, ControlInput, TrafficState, Trajectory,
};
pub use config::RunConfig;

/// Controller variants selectable per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Hdv,
    Dfk,
    Edmdk,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Hdv => "hdv",
            ControllerKind::Dfk => "dfk",
            ControllerKind::Edmdk => "edmdk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hdv" => Ok(ControllerKind::Hdv),
            "dfk" => Ok(ControllerKind::Dfk),
            "edmdk" => Ok(ControllerKind::Edmdk),
            other => Err(Error::Config(format!("unknown controller `{other}`"))),
        }
    }
}

/// Summary of one closed-loop run; serialized as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    pub realized_cost: f64,
    pub wave_ratio: f64,
    pub qp_failures: usize,
    pub iterations_alg1: usize,
    pub converged: bool,
}

/// Artifacts of one run kept in memory for the experiment-level summaries.
pub struct RunArtifacts {
    pub report: RunReport,
    pub dir: PathBuf,
    pub trajectory: Trajectory,
    pub run: ClosedLoopRun,
}

/// Head-vehicle velocity for the wave scenario: a single half-sine bump on
/// a constant 15 m/s, active on `t` in [10 s, 20 s] at the 0.05 s step
/// (steps 200..=400), continuous at both window edges.
pub fn sine_disturbance_profile(k: usize) -> f64 {
    const BASE: f64 = 15.0;
    const AMP: f64 = 5.0;
    const START: usize = 200;
    const END: usize = 400;
    if (START..=END).contains(&k) {
        BASE + AMP * (std::f64::consts::PI * (k - START) as f64 / 200.0).sin()
    } else {
        BASE
    }
}

/// Four seeded synthetic head-velocity profiles for the tracking scenario:
/// sums of a few sinusoids plus one smoothed step, 40-60 s each, bounded to
/// [10, 20] m/s with slope capped below 2 m/s^2 by construction.
pub fn synthetic_tracking_profiles(seed: u64, dt: f64) -> Vec<Vec<f64>> {
    let mut profiles = Vec::with_capacity(4);
    for i in 0..4u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(4).wrapping_add(i));
        let duration = Uniform::new_inclusive(40.0, 60.0).sample(&mut rng);
        let steps = (duration / dt).round() as usize;
        let base: f64 = Uniform::new_inclusive(14.0, 16.0).sample(&mut rng);
        let n_sin = Uniform::new_inclusive(2usize, 4).sample(&mut rng);
        let mut amps: Vec<f64> = (0..n_sin)
            .map(|_| Uniform::new(0.3, 1.0).sample(&mut rng))
            .collect();
        let freqs: Vec<f64> = (0..n_sin)
            .map(|_| 2.0 * std::f64::consts::PI * Uniform::new(0.02, 0.12).sample(&mut rng))
            .collect();
        let phases: Vec<f64> = (0..n_sin)
            .map(|_| Uniform::new(0.0, 2.0 * std::f64::consts::PI).sample(&mut rng))
            .collect();
        let mut step_amp: f64 = Uniform::new(-1.0f64, 1.0).sample(&mut rng);
        let step_center = Uniform::new(10.0, duration - 10.0).sample(&mut rng);
        let step_width = Uniform::new_inclusive(2.0, 4.0).sample(&mut rng);

        // Scale so the range stays inside [10, 20] with margin.
        let budget = 0.9 * (base - 10.0).min(20.0 - base);
        let total: f64 = amps.iter().sum::<f64>() + step_amp.abs();
        let range_scale = budget / total;
        for a in amps.iter_mut() {
            *a *= range_scale;
        }
        step_amp *= range_scale;
        // Cap the analytic slope below 1.8 m/s^2.
        let slope: f64 = amps
            .iter()
            .zip(freqs.iter())
            .map(|(a, w)| a * w)
            .sum::<f64>()
            + step_amp.abs() / step_width;
        if slope > 1.8 {
            let s = 1.8 / slope;
            for a in amps.iter_mut() {
                *a *= s;
            }
            step_amp *= s;
        }

        let profile: Vec<f64> = (0..steps)
            .map(|k| {
                let t = k as f64 * dt;
                let mut v = base;
                for j in 0..n_sin {
                    v += amps[j] * (freqs[j] * t + phases[j]).sin();
                }
                v += step_amp * ((t - step_center) / step_width).tanh();
                v
            })
            .collect();
        profiles.push(profile);
    }
    profiles
}

/// Velocity-oscillation ratio of the last vehicle over a step window,
/// normalized by the head disturbance amplitude (5 m/s): half the
/// peak-to-peak velocity of the platoon tail divided by 5.
pub fn wave_damping_metric(traj: &Trajectory, window: std::ops::Range<usize>) -> f64 {
    let n = traj.outputs[0].n_vehicles();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in window {
        if k >= traj.outputs.len() {
            break;
        }
        let v = traj.outputs[k].velocity(n);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return 0.0;
    }
    ((hi - lo) / 2.0) / 5.0
}

/// Build (or load) the dictionary-free representation for a config.
pub fn build_representation(cfg: &RunConfig) -> Result<KoopmanRepresentation> {
    if let Some(path) = &cfg.rep_path {
        return KoopmanRepresentation::load_json(Path::new(path));
    }
    let traj = generate_offline_data(cfg.seed, cfg.n_vehicles, cfg.data_length, cfg.dt, &cfg.ovm)?;
    let mut rep = iterate(traj.input_matrix().view(), traj.output_matrix().view(), &cfg.id)?;
    rep.data_seed = Some(cfg.seed);
    Ok(rep)
}

/// Sample lift centers: spacing coordinates uniform on [5, 15] m, velocity
/// coordinates uniform on [10, 20] m/s, in the interleaved state layout.
pub fn sample_centers(seed: u64, n_centers: usize, n_vehicles: usize) -> Array2<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_c3_7e5);
    let dist_s = Uniform::new_inclusive(5.0, 15.0);
    let dist_v = Uniform::new_inclusive(10.0, 20.0);
    let dim = 2 * n_vehicles;
    let mut centers = Array2::zeros((n_centers, dim));
    for c in 0..n_centers {
        for j in 0..dim {
            centers[[c, j]] = if j % 2 == 0 {
                dist_s.sample(&mut rng)
            } else {
                dist_v.sample(&mut rng)
            };
        }
    }
    centers
}

/// Build (or load) the lifted parametric baseline model for a config.
pub fn build_edmd(cfg: &RunConfig) -> Result<EdmdModel> {
    if let Some(path) = &cfg.edmd_path {
        return EdmdModel::load_json(Path::new(path));
    }
    let trajs: Vec<Trajectory> = (0..cfg.edmd_trajectories as u64)
        .map(|i| {
            generate_offline_data(
                cfg.seed.wrapping_add(7919 * (i + 1)),
                cfg.n_vehicles,
                cfg.edmd_traj_length,
                cfg.dt,
                &cfg.ovm,
            )
        })
        .collect::<Result<_>>()?;
    let centers = sample_centers(cfg.seed, cfg.edmd_centers, cfg.n_vehicles);
    edmd_fit(&trajs, centers)
}

fn make_controller(
    kind: ControllerKind,
    cfg: &RunConfig,
    mpc: MpcConfig,
    rep: Option<&KoopmanRepresentation>,
    model: Option<&EdmdModel>,
) -> Result<Box<dyn CavController>> {
    match kind {
        ControllerKind::Hdv => {
            let reference = match mpc.reference {
                ReferencePolicy::Fixed { s_r, v_r } => (s_r, v_r),
                ReferencePolicy::FollowHead { s_r } => (s_r, 15.0),
            };
            Ok(Box::new(HdvController::new(cfg.ovm, reference)))
        }
        ControllerKind::Dfk => {
            let rep = rep.ok_or_else(|| Error::Config("dfk run needs a representation".into()))?;
            Ok(Box::new(DfkController::new(rep, mpc)?))
        }
        ControllerKind::Edmdk => {
            let model = model.ok_or_else(|| Error::Config("edmdk run needs a lifted model".into()))?;
            Ok(Box::new(EdmdController::new(model, mpc, cfg.id.t_ini)?))
        }
    }
}

/// One closed-loop scenario run: equilibrium start matched to the profile's
/// initial velocity, a dithered warm-up window of `t_ini` steps shared by
/// all controller variants, then the receding-horizon loop over the rest of
/// the profile. Artifacts land in `<out>/<scenario>_<controller>/`.
#[allow(clippy::too_many_arguments)]
fn run_scenario(
    scenario: &str,
    kind: ControllerKind,
    cfg: &RunConfig,
    mpc: MpcConfig,
    rep: Option<&KoopmanRepresentation>,
    model: Option<&EdmdModel>,
    profile: &dyn Fn(usize) -> f64,
    total_steps: usize,
    out_dir: &Path,
    write_positions: bool,
) -> Result<RunArtifacts> {
    let t_ini = cfg.id.t_ini;
    if total_steps <= t_ini {
        return Err(Error::Config("scenario shorter than the warm-up window".into()));
    }
    let v_start = profile(0);
    let s_start = equilibrium_spacing(v_start, &cfg.ovm);
    let x0 = TrafficState::uniform(cfg.n_vehicles, s_start, v_start);
    let mut plant = PlantSim::new(cfg.ovm, cfg.dt, x0);
    let mut controller = make_controller(kind, cfg, mpc, rep, model)?;

    // Warm-up with seeded dither, identical across controller variants.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xd17e4);
    let dither = Uniform::new_inclusive(-0.1, 0.1);
    let mut warm_inputs = Vec::with_capacity(t_ini);
    let mut warm_outputs = Vec::with_capacity(t_ini);
    for k in 0..t_ini {
        let u = ControlInput { u1: dither.sample(&mut rng), v0: profile(k) };
        warm_outputs.push(plant.state.clone());
        warm_inputs.push(u);
        plant.step(&u).map_err(|e| match e {
            Error::SimulationDiverged { .. } => Error::SimulationDiverged { step: k },
            other => other,
        })?;
        controller.push(u, warm_outputs.last().unwrap());
    }

    let run = crate::control::receding_horizon(
        &mut plant,
        controller.as_mut(),
        profile,
        t_ini,
        total_steps,
    )?;

    // Full timeline (warm-up + control window) for plotting and metrics.
    let mut inputs = warm_inputs;
    let mut outputs = warm_outputs;
    inputs.extend(run.trajectory.inputs.iter().copied());
    outputs.extend(run.trajectory.outputs.iter().cloned());
    let full = Trajectory { dt: cfg.dt, inputs, outputs };

    let cost = realized_cost(&run.trajectory, &mpc, &run.references);
    let window = ((cfg.wave_window_s.0 / cfg.dt).round() as usize)
        ..((cfg.wave_window_s.1 / cfg.dt).round() as usize);
    let wave = wave_damping_metric(&full, window);
    let qp_failures = run
        .diagnostics
        .iter()
        .filter(|d| d.status != "optimal" && d.status != "hdv")
        .count();
    let (iterations_alg1, converged) = match (kind, rep) {
        (ControllerKind::Dfk, Some(r)) => (r.log.iterations, r.log.converged),
        _ => (0, true),
    };

    let name = format!("{scenario}_{}", kind.as_str());
    let dir = out_dir.join(&name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("trajectory.csv"), full.to_csv())?;
    std::fs::write(dir.join("diagnostics.csv"), diagnostics_csv(&run.diagnostics))?;
    if write_positions {
        std::fs::write(
            dir.join("positions.csv"),
            positions_csv(&full, cfg.ring_circumference),
        )?;
    }
    let report = RunReport {
        scenario: scenario.to_string(),
        controller: kind.as_str().to_string(),
        seed: cfg.seed,
        realized_cost: cost,
        wave_ratio: wave,
        qp_failures,
        iterations_alg1,
        converged,
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(RunArtifacts { report, dir, trajectory: full, run })
}

/// Vehicle positions wrapped onto a ring for plotting: the head vehicle
/// integrates its velocity from zero, each follower sits one spacing behind
/// its predecessor, and everything is reported modulo the circumference.
pub fn positions_csv(traj: &Trajectory, circumference: f64) -> String {
    let n = traj.outputs[0].n_vehicles();
    let mut out = String::from("k");
    for i in 0..=n {
        out.push_str(&format!(",p{i}"));
    }
    out.push('\n');
    let mut p0 = 0.0f64;
    for (k, (u, y)) in traj.inputs.iter().zip(traj.outputs.iter()).enumerate() {
        out.push_str(&format!("{k}"));
        let mut pos = p0;
        out.push_str(&format!(",{}", pos.rem_euclid(circumference)));
        for i in 1..=n {
            pos -= y.spacing(i);
            out.push_str(&format!(",{}", pos.rem_euclid(circumference)));
        }
        out.push('\n');
        p0 += traj.dt * u.v0;
    }
    out
}

/// Wave-mitigation experiment: the same half-sine head disturbance under
/// the all-human baseline and both predictive controllers.
pub fn run_experiment_a(
    cfg: &RunConfig,
    out_dir: &Path,
    only: Option<ControllerKind>,
) -> Result<Vec<RunArtifacts>> {
    let kinds: Vec<ControllerKind> = [ControllerKind::Hdv, ControllerKind::Dfk, ControllerKind::Edmdk]
        .into_iter()
        .filter(|k| only.map_or(true, |o| o == *k))
        .collect();
    let needs_rep = kinds.contains(&ControllerKind::Dfk);
    let needs_model = kinds.contains(&ControllerKind::Edmdk);
    let rep = if needs_rep { Some(build_representation(cfg)?) } else { None };
    let model = if needs_model { Some(build_edmd(cfg)?) } else { None };

    let total_steps = cfg.id.t_ini + (cfg.duration_s / cfg.dt).round() as usize;
    let mut artifacts = Vec::new();
    for kind in kinds {
        let art = run_scenario(
            "exp_a",
            kind,
            cfg,
            cfg.mpc,
            rep.as_ref(),
            model.as_ref(),
            &sine_disturbance_profile,
            total_steps,
            out_dir,
            true,
        )?;
        log::info!(
            "exp_a {}: wave ratio {:.3}, realized cost {:.2}",
            art.report.controller,
            art.report.wave_ratio,
            art.report.realized_cost
        );
        artifacts.push(art);
    }
    Ok(artifacts)
}

/// Velocity-tracking experiment: four synthetic head profiles, each run
/// under both predictive controllers with pure velocity weighting and the
/// reference estimated from the recent head history.
pub fn run_experiment_b(
    cfg: &RunConfig,
    out_dir: &Path,
    only: Option<ControllerKind>,
) -> Result<Vec<RunArtifacts>> {
    let kinds: Vec<ControllerKind> = [ControllerKind::Dfk, ControllerKind::Edmdk]
        .into_iter()
        .filter(|k| only.map_or(true, |o| o == *k))
        .collect();
    if kinds.is_empty() {
        return Err(Error::Config("tracking experiment needs dfk and/or edmdk".into()));
    }
    let needs_rep = kinds.contains(&ControllerKind::Dfk);
    let needs_model = kinds.contains(&ControllerKind::Edmdk);
    let rep = if needs_rep { Some(build_representation(cfg)?) } else { None };
    let model = if needs_model { Some(build_edmd(cfg)?) } else { None };

    // Velocity tracking: unit velocity weight, no spacing weight, reference
    // estimated from the head-vehicle history.
    let mpc = MpcConfig {
        q_v: 1.0,
        w_s: 0.0,
        reference: ReferencePolicy::FollowHead { s_r: 20.0 },
        ..cfg.mpc
    };

    let profiles = synthetic_tracking_profiles(cfg.seed, cfg.dt);
    let mut artifacts = Vec::new();
    for (idx, profile) in profiles.iter().enumerate() {
        let scenario = format!("exp_b{}", idx + 1);
        let data = profile.clone();
        let head = move |k: usize| {
            let i = k.min(data.len() - 1);
            data[i]
        };
        for kind in &kinds {
            let art = run_scenario(
                &scenario,
                *kind,
                cfg,
                mpc,
                rep.as_ref(),
                model.as_ref(),
                &head,
                profile.len(),
                out_dir,
                false,
            )?;
            log::info!(
                "{} {}: realized cost {:.2}",
                scenario,
                art.report.controller,
                art.report.realized_cost
            );
            artifacts.push(art);
        }
    }

    // Comparison table.
    let mut table = String::from("scenario,controller,realized_cost\n");
    for art in &artifacts {
        table.push_str(&format!(
            "{},{},{}\n",
            art.report.scenario, art.report.controller, art.report.realized_cost
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("exp_b_summary.csv"), table)?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "dfkmpc",
    about = "Mixed-traffic platoon control: data collection, model identification and closed-loop experiments",
    version
)]
struct Cli {
    /// Path to a key=value config file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Restrict experiment runs to one controller.
    #[arg(long, global = true, value_parser = ["hdv", "dfk", "edmdk"])]
    controller: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded offline excitation trajectory (CSV).
    Collect,
    /// Build the dictionary-free representation from offline data (JSON).
    BuildRep,
    /// Fit the lifted parametric baseline model (JSON).
    EdmdFit,
    /// Wave-mitigation experiment (all-human, dfk, edmdk).
    ExpA,
    /// Velocity-tracking experiment over four synthetic head profiles.
    ExpB,
    /// Open-loop simulation with the CAV following the car-following law.
    Simulate,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let only = cli
        .controller
        .as_deref()
        .map(ControllerKind::parse)
        .transpose()?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Collect => {
            let traj =
                generate_offline_data(cfg.seed, cfg.n_vehicles, cfg.data_length, cfg.dt, &cfg.ovm)?;
            let path = cli.out.join("offline_data.csv");
            std::fs::write(&path, traj.to_csv())?;
            println!("wrote {}", path.display());
        }
        Command::BuildRep => {
            let rep = build_representation(&cfg)?;
            let path = cli.out.join("representation.json");
            rep.save_json(&path)?;
            println!(
                "wrote {} (iterations {}, converged {}, final relative change {:.3e})",
                path.display(),
                rep.log.iterations,
                rep.log.converged,
                rep.log.final_change
            );
        }
        Command::EdmdFit => {
            let model = build_edmd(&cfg)?;
            let path = cli.out.join("edmd_model.json");
            model.save_json(&path)?;
            println!("wrote {} (n_z {})", path.display(), model.n_z());
        }
        Command::ExpA => {
            let artifacts = run_experiment_a(&cfg, &cli.out, only)?;
            println!("scenario,controller,wave_ratio,realized_cost");
            for a in &artifacts {
                println!(
                    "{},{},{},{}",
                    a.report.scenario, a.report.controller, a.report.wave_ratio, a.report.realized_cost
                );
            }
        }
        Command::ExpB => {
            let artifacts = run_experiment_b(&cfg, &cli.out, only)?;
            println!("scenario,controller,realized_cost");
            for a in &artifacts {
                println!(
                    "{},{},{}",
                    a.report.scenario, a.report.controller, a.report.realized_cost
                );
            }
        }
        Command::Simulate => {
            let total_steps = cfg.id.t_ini + (cfg.duration_s / cfg.dt).round() as usize;
            let art = run_scenario(
                "simulate",
                ControllerKind::Hdv,
                &cfg,
                cfg.mpc,
                None,
                None,
                &sine_disturbance_profile,
                total_steps,
                &cli.out,
                true,
            )?;
            println!("wrote {}", art.dir.display());
        }
    }
    Ok(())
}

/// CLI entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
