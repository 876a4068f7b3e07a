use std::path::Path;

use cage_core::decode::{DecodeOptions, RewardNormalization};
use cage_core::jacobi::{JacobiOptions, UpdateMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub delta: f64,
    pub probes: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { delta: 1e-3, probes: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub grid_step: f64,
    pub improve_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { grid_step: 0.02, improve_tol: 1e-9 }
    }
}

/// Every tunable value. Built-in defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Replaces the instance temperature and the decode temperature.
    pub tau: Option<f64>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub jacobi: JacobiOptions,
    pub decode: DecodeOptions,
    pub diagnose: DiagnoseConfig,
    pub oracle: OracleConfig,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonFlags {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub max_rounds: Option<usize>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_norm)]
    pub norm: Option<RewardNormalization>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<UpdateMode>,
    /// Solve every decoding step from zero incentives.
    #[arg(long, global = true)]
    pub cold_start: bool,
}

fn parse_norm(s: &str) -> Result<RewardNormalization, String> {
    match s {
        "shift" => Ok(RewardNormalization::ShiftMinToZero),
        "clamp" => Ok(RewardNormalization::ClampNegativeToZero),
        _ => Err(format!("expected shift or clamp, got {s}")),
    }
}

fn parse_mode(s: &str) -> Result<UpdateMode, String> {
    match s {
        "jacobi" => Ok(UpdateMode::Jacobi),
        "gauss-seidel" => Ok(UpdateMode::GaussSeidel),
        _ => Err(format!("expected jacobi or gauss-seidel, got {s}")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn resolve(flags: &CommonFlags) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(t) = flags.tau {
            cfg.tau = Some(t);
        }
        if let Some(t) = cfg.tau {
            cfg.decode.tau = t;
        }
        if let Some(n) = flags.top_n {
            cfg.decode.top_n = n;
        }
        if let Some(e) = flags.epsilon {
            cfg.jacobi.epsilon = e;
            cfg.decode.epsilon = e;
        }
        if let Some(r) = flags.max_rounds {
            cfg.jacobi.max_rounds = r;
            cfg.decode.max_rounds = r;
        }
        if let Some(m) = flags.mode {
            cfg.jacobi.update_mode = m;
            cfg.decode.update_mode = m;
        }
        if let Some(n) = flags.norm {
            cfg.decode.reward_normalization = n;
        }
        if flags.cold_start {
            cfg.decode.warm_start = false;
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(j) = flags.jobs {
            cfg.jobs = Some(j);
        }
        if cfg.jobs == Some(0) {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        cfg.jacobi.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.decode.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
