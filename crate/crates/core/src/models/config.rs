//! JSON model configurations.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BurgersConfig, BurgersModel, ControlSystem, LinearSystem, UavModel, UavParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavConfig {
    /// Parameter file, resolved relative to the config file. The name
    /// `aerosonde.json` falls back to the built-in airframe.
    #[serde(default = "default_params_file")]
    pub params_file: String,
    /// Trim airspeed, m/s.
    #[serde(default = "default_airspeed")]
    pub airspeed: f64,
    /// Altitude band (m) about trim outside which simulations abort.
    #[serde(default = "default_envelope")]
    pub envelope: f64,
}

fn default_params_file() -> String {
    "aerosonde.json".into()
}
fn default_airspeed() -> f64 {
    20.0
}
fn default_envelope() -> f64 {
    300.0
}

/// Linear-quadratic system given as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    Burgers(BurgersConfig),
    Uav(UavConfig),
    Linear(LinearConfig),
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("matrix {what} has ragged rows")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, std::path::PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_json(&text)?, base))
    }

    /// Instantiates the model; relative file references resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<Arc<dyn ControlSystem>> {
        Ok(match self {
            Self::Burgers(c) => Arc::new(BurgersModel::new(c.clone()).map_err(config_error)?),
            Self::Uav(c) => {
                let params = UavParams::load(&base.join(&c.params_file))?;
                let mut m = UavModel::new(params, c.airspeed)?;
                m.envelope = c.envelope;
                Arc::new(m)
            }
            Self::Linear(c) => Arc::new(
                LinearSystem::new(matrix(&c.a, "a")?, matrix(&c.b, "b")?, matrix(&c.q, "q")?, matrix(&c.r, "r")?)
                    .map_err(config_error)?,
            ),
        })
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(s) | Error::Dimension(s) => Error::Config(s),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_model() {
        let b = ModelConfig::from_json(r#"{"model":"burgers","n":12,"nu":0.3}"#).unwrap();
        let m = b.build(Path::new(".")).unwrap();
        assert_eq!(m.state_dim(), 12);
        let u = ModelConfig::from_json(r#"{"model":"uav","params_file":"aerosonde.json","airspeed":20.0}"#).unwrap();
        assert_eq!(u.build(Path::new("/nonexistent")).unwrap().state_dim(), 13);
        let l = ModelConfig::from_json(r#"{"model":"linear","a":[[0,1],[0,0]],"b":[[0],[1]],"q":[[1,0],[0,1]],"r":[[1]]}"#)
            .unwrap();
        assert_eq!(l.build(Path::new(".")).unwrap().control_dim(), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig::from_json(r#"{"model":"rocket"}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"model":"burgers","n":12,"bogus":1}"#).is_err());
        let bad = ModelConfig::from_json(r#"{"model":"burgers","n":12,"nu":-1}"#).unwrap();
        assert!(matches!(bad.build(Path::new(".")), Err(Error::Config(_))));
    }
}
