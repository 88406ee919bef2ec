//! Experiment manifests and the defaults each command resolves.

use std::path::Path;

use obsdrive::model::ModelSpec;
use obsdrive::verify::VerifyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Couple,
    Backward,
    Stationary,
    Verify,
    Diagnose,
}

/// Command parameters. Absent fields take command defaults, which are written
/// back into the replay manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0_prime: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_schedule: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    /// Spacing `h` of regeneration times; calibrated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    /// Threshold `C`; calibrated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Truncation horizon of the W statistics; chosen from the tail estimate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: Command,
    pub model: ModelSpec,
    #[serde(default)]
    pub params: Params,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Validates the model and fills every parameter the command uses.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.model.validate().map_err(|e| CliError::Usage(format!("invalid model: {e}")))?;
        let start = self.model.default_start();
        let p = &mut self.params;
        match self.command {
            Command::Simulate => {
                p.t_start.get_or_insert(0);
                p.horizon.get_or_insert(1000);
                p.s0.get_or_insert(start);
            }
            Command::Couple => {
                p.t_start.get_or_insert(0);
                p.horizon.get_or_insert(400);
                p.s0.get_or_insert(start.clone());
                p.s0_prime.get_or_insert_with(|| start.iter().map(|v| v + 10.0).collect());
                p.replicas.get_or_insert(1);
            }
            Command::Backward => {
                p.starts.get_or_insert_with(|| vec![start.clone(), start.iter().map(|v| v + 10.0).collect()]);
                p.n_schedule.get_or_insert_with(|| vec![25, 50, 100, 200, 400]);
                p.replicas.get_or_insert(1000);
            }
            Command::Stationary => {
                p.tol.get_or_insert(0.01);
                p.max_n.get_or_insert(1600);
                p.replicas.get_or_insert(1000);
            }
            Command::Verify => {
                p.verify.get_or_insert_with(VerifyConfig::default);
            }
            Command::Diagnose => {
                p.t_start.get_or_insert(0);
                p.horizon.get_or_insert(10_000);
            }
        }
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), CliError> {
        let p = &self.params;
        let d = self.model.state_dim();
        let states = p.s0.iter().chain(&p.s0_prime).chain(p.starts.iter().flatten());
        for s in states {
            if s.len() != d {
                return Err(CliError::Usage(format!("state {s:?} does not have dimension {d}")));
            }
        }
        if p.horizon == Some(0) {
            return Err(CliError::Usage("horizon must be positive".into()));
        }
        if p.n_schedule.as_ref().is_some_and(|s| s.is_empty() || s.contains(&0)) {
            return Err(CliError::Usage("n_schedule must hold positive step counts".into()));
        }
        if p.starts.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(CliError::Usage("starts must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use obsdrive::benchmarks::poisson_ingarch_x;

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(Manifest {
            command: Command::Simulate,
            model: poisson_ingarch_x(),
            params: Params::default(),
            seed: 1,
            output_dir: None,
        })
        .unwrap();
        assert!(serde_json::from_value::<Manifest>(v.clone()).is_ok());
        v["params"]["bogus"] = serde_json::json!(3);
        assert!(serde_json::from_value::<Manifest>(v.clone()).is_err());
        v["params"] = serde_json::json!({});
        v["extra"] = serde_json::json!(true);
        assert!(serde_json::from_value::<Manifest>(v).is_err());
    }

    #[test]
    fn resolution_fills_defaults() {
        let m = Manifest {
            command: Command::Couple,
            model: poisson_ingarch_x(),
            params: Params::default(),
            seed: 1,
            output_dir: None,
        }
        .resolve()
        .unwrap();
        assert_eq!(m.params.s0_prime, Some(vec![10.0]));
        assert_eq!(m.params.horizon, Some(400));
        assert_eq!(m.clone().resolve().unwrap(), m);
    }
}
