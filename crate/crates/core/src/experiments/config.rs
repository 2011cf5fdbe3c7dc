//! Flat key-value run configuration.
//!
//! The file format is one `key = value` pair per line with `#` comments;
//! keys are dotted paths (`ovm.alpha`, `mpc.q_v`, ...). Every key has a
//! default, so an empty or absent config is a valid full configuration.

use std::collections::HashMap;
use std::path::Path;

use crate::control::{MpcConfig, ReferencePolicy};
use crate::error::{Error, Result};
use crate::koopman::IdConfig;
use crate::traffic::OvmParams;

/// Complete run configuration with defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub dt: f64,
    pub n_vehicles: usize,
    pub ovm: OvmParams,
    pub id: IdConfig,
    /// Length of the excitation run feeding the library identification.
    pub data_length: usize,
    pub edmd_trajectories: usize,
    pub edmd_traj_length: usize,
    pub edmd_centers: usize,
    pub mpc: MpcConfig,
    /// Scenario duration in seconds (tracking runs).
    pub duration_s: f64,
    /// Wave-metric window in seconds.
    pub wave_window_s: (f64, f64),
    pub ring_circumference: f64,
    /// Optional paths to a prebuilt representation / lifted model.
    pub rep_path: Option<String>,
    pub edmd_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            dt: 0.05,
            n_vehicles: 5,
            ovm: OvmParams::default(),
            id: IdConfig::new(40, 50),
            data_length: 1200,
            edmd_trajectories: 100,
            edmd_traj_length: 1200,
            edmd_centers: 30,
            mpc: MpcConfig::default(),
            duration_s: 40.0,
            wave_window_s: (25.0, 40.0),
            ring_circumference: 140.0,
            rep_path: None,
            edmd_path: None,
        }
    }
}

impl RunConfig {
    /// Parse a config file; unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_str_pairs(&text)
    }

    pub fn from_str_pairs(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&map)?;
        Ok(cfg)
    }

    fn apply(&mut self, map: &HashMap<String, String>) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
        }
        for (key, value) in map {
            match key.as_str() {
                "seed" => self.seed = num(key, value)?,
                "dt" => self.dt = num(key, value)?,
                "n_vehicles" => self.n_vehicles = num(key, value)?,
                "ovm.alpha" => self.ovm.alpha = num(key, value)?,
                "ovm.beta" => self.ovm.beta = num(key, value)?,
                "ovm.s_st" => self.ovm.s_st = num(key, value)?,
                "ovm.s_go" => self.ovm.s_go = num(key, value)?,
                "ovm.v_max" => self.ovm.v_max = num(key, value)?,
                "id.n_z" => self.id.n_z = num(key, value)?,
                "id.t_ini" => self.id.t_ini = num(key, value)?,
                "id.n_future" => {
                    self.id.n_future = num(key, value)?;
                    self.mpc.n_future = self.id.n_future;
                }
                "id.epsilon" => self.id.epsilon = num(key, value)?,
                "id.max_iters" => self.id.max_iters = num(key, value)?,
                "id.data_length" => self.data_length = num(key, value)?,
                "edmd.n_trajectories" => self.edmd_trajectories = num(key, value)?,
                "edmd.traj_length" => self.edmd_traj_length = num(key, value)?,
                "edmd.n_centers" => self.edmd_centers = num(key, value)?,
                "mpc.q_v" => self.mpc.q_v = num(key, value)?,
                "mpc.w_s" => self.mpc.w_s = num(key, value)?,
                "mpc.r_weight" => self.mpc.r_weight = num(key, value)?,
                "mpc.a_min" => self.mpc.a_min = num(key, value)?,
                "mpc.a_max" => self.mpc.a_max = num(key, value)?,
                "mpc.s_min" => self.mpc.s_min = num(key, value)?,
                "mpc.s_max" => self.mpc.s_max = num(key, value)?,
                "mpc.s_r" => {
                    let s_r: f64 = num(key, value)?;
                    self.mpc.reference = match self.mpc.reference {
                        ReferencePolicy::Fixed { v_r, .. } => ReferencePolicy::Fixed { s_r, v_r },
                        ReferencePolicy::FollowHead { .. } => ReferencePolicy::FollowHead { s_r },
                    };
                }
                "mpc.v_r" => {
                    let v_r: f64 = num(key, value)?;
                    let s_r = match self.mpc.reference {
                        ReferencePolicy::Fixed { s_r, .. } => s_r,
                        ReferencePolicy::FollowHead { s_r } => s_r,
                    };
                    self.mpc.reference = ReferencePolicy::Fixed { s_r, v_r };
                }
                "scenario.duration_s" => self.duration_s = num(key, value)?,
                "scenario.wave_window_start_s" => self.wave_window_s.0 = num(key, value)?,
                "scenario.wave_window_end_s" => self.wave_window_s.1 = num(key, value)?,
                "scenario.ring_circumference" => self.ring_circumference = num(key, value)?,
                "exp.rep_path" => self.rep_path = Some(value.clone()),
                "exp.edmd_path" => self.edmd_path = Some(value.clone()),
                other => {
                    return Err(Error::Config(format!("unknown config key `{other}`")));
                }
            }
        }
        self.ovm.validate()?;
        self.id.validate()?;
        self.mpc.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::from_str_pairs("").unwrap();
        assert_eq!(cfg.dt, 0.05);
        assert_eq!(cfg.n_vehicles, 5);
        assert_eq!(cfg.id.t_ini, 40);
        assert_eq!(cfg.id.n_future, 50);
        assert_eq!(cfg.data_length, 1200);
        assert_eq!(cfg.mpc.a_max, 2.0);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# comment\nseed = 9\novm.alpha = 0.7  # inline\nmpc.q_v = 2.5\n";
        let cfg = RunConfig::from_str_pairs(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ovm.alpha, 0.7);
        assert_eq!(cfg.mpc.q_v, 2.5);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(RunConfig::from_str_pairs("mpc.qv = 1\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::from_file(Path::new("/nonexistent/cfg.txt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/cfg.txt"));
    }
}
