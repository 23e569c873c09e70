use anyhow::{bail, Context, Result};
use ldpnn_core::rate::NetworkConfig;
use ldpnn_core::Activation;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::io::SCHEMA;

/// A width ratio: a number, or the string `"inf"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Finite(f64),
    Named(String),
}

impl Gamma {
    fn value(&self) -> Result<f64> {
        match self {
            Self::Finite(v) => Ok(*v),
            Self::Named(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
                other => other.parse().with_context(|| format!("bad width ratio {s:?}")),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schema: Option<String>,
    pub activation: String,
    #[serde(alias = "C_b")]
    pub c_b: f64,
    #[serde(alias = "C_W", alias = "c_W")]
    pub c_w: f64,
    #[serde(alias = "L")]
    pub depth: usize,
    pub gammas: Vec<Gamma>,
    pub n0: usize,
    pub inputs: Vec<Vec<f64>>,
    pub n_out: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Number of optimizer restarts for rate computations.
    #[serde(default)]
    pub restarts: Option<usize>,
    /// `mc | quad | closed | series` for kappa evaluations inside the rate solver.
    #[serde(default)]
    pub kappa_method: Option<String>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(s) = &cfg.schema {
            if s != SCHEMA {
                bail!("unsupported schema {s:?}, expected {SCHEMA:?}");
            }
        }
        Ok(cfg)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let activation: Activation = self.activation.parse()?;
        let gammas = self.gammas.iter().map(Gamma::value).collect::<Result<Vec<_>>>()?;
        let config = NetworkConfig {
            depth: self.depth,
            gammas,
            c_b: self.c_b,
            c_w: self.c_w,
            n0: self.n0,
            inputs: self.inputs.clone(),
            n_out: self.n_out,
            activation,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Flag, then `LDPNN_SEED`, then the config file, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(env) = std::env::var("LDPNN_SEED") {
        return env.trim().parse().with_context(|| format!("LDPNN_SEED={env:?} is not an unsigned integer"));
    }
    Ok(config.unwrap_or(0))
}
