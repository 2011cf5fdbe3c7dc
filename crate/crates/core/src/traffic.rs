//! Nonlinear car-following platoon simulation.
//!
//! The platoon is an open chain: an exogenous head vehicle (index 0) whose
//! velocity is an input, one controlled vehicle (index 1, the CAV) modeled
//! as a double integrator, and human-driven vehicles (indices 2..n)
//! following an optimal-velocity car-following law. The state collects
//! `(spacing, velocity)` per vehicle; the measured output is the full state.
//!
//! Integration is explicit forward Euler at a fixed step, matching the
//! discrete-time data consumed by the identification and control layers.
//! Velocities are floored at zero (no reversing) and the CAV acceleration
//! saturates at the physical limits below before it is applied.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical lower limit on the CAV acceleration, m/s^2.
pub const CAV_ACCEL_MIN: f64 = -5.0;
/// Physical upper limit on the CAV acceleration, m/s^2.
pub const CAV_ACCEL_MAX: f64 = 2.0;

/// Optimal-velocity car-following parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OvmParams {
    /// Sensitivity gain towards the desired velocity, 1/s.
    pub alpha: f64,
    /// Relative-velocity gain, 1/s.
    pub beta: f64,
    /// Standstill spacing, m.
    pub s_st: f64,
    /// Free-flow spacing, m.
    pub s_go: f64,
    /// Maximum desired velocity, m/s.
    pub v_max: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        OvmParams {
            alpha: 0.6,
            beta: 0.9,
            s_st: 5.0,
            s_go: 35.0,
            v_max: 30.0,
        }
    }
}

impl OvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Param { name: "alpha", details: "must be positive".into() });
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Param { name: "beta", details: "must be non-negative".into() });
        }
        if !(self.s_st > 0.0 && self.s_st < self.s_go) {
            return Err(Error::Param {
                name: "s_st",
                details: "need 0 < s_st < s_go".into(),
            });
        }
        if !(self.v_max > 0.0) {
            return Err(Error::Param { name: "v_max", details: "must be positive".into() });
        }
        Ok(())
    }
}

/// Platoon state: spacing and velocity per vehicle, CAV first.
///
/// The layout is `[s_1, v_1, s_2, v_2, ..., s_n, v_n]` with vehicle indices
/// starting at 1 (the CAV); the head vehicle is exogenous and carries no
/// state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    data: Vec<f64>,
}

impl TrafficState {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || data.len() % 2 != 0 {
            return Err(Error::Param {
                name: "data",
                details: format!("state length {} must be a positive multiple of 2", data.len()),
            });
        }
        Ok(TrafficState { data })
    }

    /// Uniform platoon: every vehicle at spacing `s` and velocity `v`.
    pub fn uniform(n_vehicles: usize, s: f64, v: f64) -> Self {
        let mut data = Vec::with_capacity(2 * n_vehicles);
        for _ in 0..n_vehicles {
            data.push(s);
            data.push(v);
        }
        TrafficState { data }
    }

    pub fn n_vehicles(&self) -> usize {
        self.data.len() / 2
    }

    /// Spacing of vehicle `i` (1-based, CAV is 1).
    pub fn spacing(&self, i: usize) -> f64 {
        self.data[2 * (i - 1)]
    }

    /// Velocity of vehicle `i` (1-based, CAV is 1).
    pub fn velocity(&self, i: usize) -> f64 {
        self.data[2 * (i - 1) + 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// External input: CAV commanded acceleration and head-vehicle velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// CAV commanded acceleration, m/s^2.
    pub u1: f64,
    /// Head-vehicle velocity, m/s.
    pub v0: f64,
}

/// Paired input/output sequences sampled at a fixed step.
///
/// `outputs[k]` is the state *before* `inputs[k]` is applied, so each
/// `(inputs[k], outputs[k])` pair is causally aligned for identification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub inputs: Vec<ControlInput>,
    pub outputs: Vec<TrafficState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input samples as a `(T, 2)` matrix with columns `(u1, v0)`.
    pub fn input_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.inputs.len(), 2));
        for (k, u) in self.inputs.iter().enumerate() {
            m[[k, 0]] = u.u1;
            m[[k, 1]] = u.v0;
        }
        m
    }

    /// Output samples as a `(T, 2n)` matrix.
    pub fn output_matrix(&self) -> Array2<f64> {
        let p = self.outputs[0].as_slice().len();
        let mut m = Array2::zeros((self.outputs.len(), p));
        for (k, y) in self.outputs.iter().enumerate() {
            for (j, v) in y.as_slice().iter().enumerate() {
                m[[k, j]] = *v;
            }
        }
        m
    }

    /// Serialize as CSV with header `k,u1,v0,s1,v1,...,sn,vn`.
    ///
    /// Floats are written with the shortest representation that round-trips
    /// to the same 64-bit value.
    pub fn to_csv(&self) -> String {
        let n = self.outputs.first().map(|s| s.n_vehicles()).unwrap_or(0);
        let mut out = String::from("k,u1,v0");
        for i in 1..=n {
            out.push_str(&format!(",s{i},v{i}"));
        }
        out.push('\n');
        for (k, (u, y)) in self.inputs.iter().zip(self.outputs.iter()).enumerate() {
            out.push_str(&format!("{k},{},{}", u.u1, u.v0));
            for v in y.as_slice() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the CSV format written by [`Trajectory::to_csv`].
    pub fn from_csv(text: &str, dt: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty trajectory CSV".into()))?;
        let cols = header.split(',').count();
        if cols < 5 || (cols - 3) % 2 != 0 {
            return Err(Error::Config(format!("unexpected trajectory header `{header}`")));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::Config(format!(
                    "line {}: expected {cols} fields, found {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 2)))
            };
            inputs.push(ControlInput {
                u1: parse(fields[1])?,
                v0: parse(fields[2])?,
            });
            let mut data = Vec::with_capacity(cols - 3);
            for f in &fields[3..] {
                data.push(parse(f)?);
            }
            outputs.push(TrafficState::new(data)?);
        }
        Ok(Trajectory { dt, inputs, outputs })
    }
}

/// Spacing-dependent desired velocity: zero at or below the standstill
/// spacing, the maximum at or above the free-flow spacing, and a smooth
/// cosine ramp in between.
pub fn desired_velocity(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_st {
        0.0
    } else if s >= p.s_go {
        p.v_max
    } else {
        p.v_max / 2.0 * (1.0 - (std::f64::consts::PI * (s - p.s_st) / (p.s_go - p.s_st)).cos())
    }
}

/// Inverse of [`desired_velocity`] on the ramp: the spacing at which `v` is
/// the desired velocity. `v` is clamped to `[0, v_max]`.
pub fn equilibrium_spacing(v: f64, p: &OvmParams) -> f64 {
    let v = v.clamp(0.0, p.v_max);
    p.s_st + (p.s_go - p.s_st) / std::f64::consts::PI * (1.0 - 2.0 * v / p.v_max).acos()
}

/// Car-following acceleration: relaxation towards the desired velocity plus
/// a relative-velocity term against the preceding vehicle.
pub fn hdv_acceleration(s: f64, v: f64, v_prec: f64, p: &OvmParams) -> f64 {
    p.alpha * (desired_velocity(s, p) - v) + p.beta * (v_prec - v)
}

/// Saturate a commanded CAV acceleration at the physical limits.
pub fn clamp_cav_accel(u1: f64) -> f64 {
    u1.clamp(CAV_ACCEL_MIN, CAV_ACCEL_MAX)
}

/// One forward-Euler step of the platoon.
///
/// Spacing integrates the velocity difference against the preceding vehicle
/// (the head velocity for the CAV), the CAV velocity integrates the
/// saturated commanded acceleration, and HDV velocities integrate the
/// car-following law. Velocities are floored at zero.
pub fn step(x: &TrafficState, u: &ControlInput, dt: f64, p: &OvmParams) -> Result<TrafficState> {
    if !(dt > 0.0) {
        return Err(Error::Param { name: "dt", details: "must be positive".into() });
    }
    let n = x.n_vehicles();
    let mut data = Vec::with_capacity(2 * n);
    for i in 1..=n {
        let v_prec = if i == 1 { u.v0 } else { x.velocity(i - 1) };
        let s_new = x.spacing(i) + dt * (v_prec - x.velocity(i));
        let accel = if i == 1 {
            clamp_cav_accel(u.u1)
        } else {
            hdv_acceleration(x.spacing(i), x.velocity(i), v_prec, p)
        };
        let v_new = (x.velocity(i) + dt * accel).max(0.0);
        data.push(s_new);
        data.push(v_new);
    }
    let next = TrafficState { data };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::SimulationDiverged { step: 0 })
    }
}

/// Roll the platoon forward under an input sequence.
///
/// The returned trajectory records the state before each input and the
/// input as applied by the plant, i.e. with the CAV acceleration already
/// saturated; the recorded pairs are therefore exactly the pairs the plant
/// realized.
pub fn simulate(
    x0: &TrafficState,
    u_seq: &[ControlInput],
    dt: f64,
    p: &OvmParams,
) -> Result<Trajectory> {
    if u_seq.is_empty() {
        return Err(Error::Param { name: "u_seq", details: "must be nonempty".into() });
    }
    p.validate()?;
    let mut inputs = Vec::with_capacity(u_seq.len());
    let mut outputs = Vec::with_capacity(u_seq.len());
    let mut x = x0.clone();
    for (k, u) in u_seq.iter().enumerate() {
        outputs.push(x.clone());
        inputs.push(ControlInput { u1: clamp_cav_accel(u.u1), v0: u.v0 });
        x = step(&x, u, dt, p).map_err(|e| match e {
            Error::SimulationDiverged { .. } => Error::SimulationDiverged { step: k },
            other => other,
        })?;
    }
    Ok(Trajectory { dt, inputs, outputs })
}

/// Ranges used when sampling excitation data.
const INIT_SPACING_RANGE: (f64, f64) = (15.0, 25.0);
const INIT_VELOCITY_RANGE: (f64, f64) = (10.0, 20.0);
const EXCITE_ACCEL_RANGE: (f64, f64) = (-5.0, 5.0);
const EXCITE_HEAD_RANGE: (f64, f64) = (10.0, 20.0);

/// Generate a seeded excitation run for offline identification.
///
/// Initial spacings are uniform on [15, 25] m and velocities on [10, 20]
/// m/s; per step the commanded CAV acceleration is uniform on [-5, 5] m/s^2
/// and the head velocity uniform on [10, 20] m/s. Everything is driven by
/// the seed, so equal seeds give bitwise-equal trajectories.
pub fn generate_offline_data(
    seed: u64,
    n_vehicles: usize,
    length: usize,
    dt: f64,
    p: &OvmParams,
) -> Result<Trajectory> {
    if length < 1 {
        return Err(Error::Param { name: "length", details: "must be at least 1".into() });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spacing = Uniform::new_inclusive(INIT_SPACING_RANGE.0, INIT_SPACING_RANGE.1);
    let velocity = Uniform::new_inclusive(INIT_VELOCITY_RANGE.0, INIT_VELOCITY_RANGE.1);
    let accel = Uniform::new_inclusive(EXCITE_ACCEL_RANGE.0, EXCITE_ACCEL_RANGE.1);
    let head = Uniform::new_inclusive(EXCITE_HEAD_RANGE.0, EXCITE_HEAD_RANGE.1);

    let mut data = Vec::with_capacity(2 * n_vehicles);
    for _ in 0..n_vehicles {
        data.push(spacing.sample(&mut rng));
        data.push(velocity.sample(&mut rng));
    }
    let x0 = TrafficState { data };
    let u_seq: Vec<ControlInput> = (0..length)
        .map(|_| ControlInput {
            u1: accel.sample(&mut rng),
            v0: head.sample(&mut rng),
        })
        .collect();
    simulate(&x0, &u_seq, dt, p)
}
