use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::files::CliError;
use crate::Common;

/// Merge defaults, the config file and the command-line flags, in that
/// order of increasing precedence.
pub fn resolve<T: DeserializeOwned>(args: &impl Serialize, common: &Common) -> Result<T, CliError> {
    let mut merged = match &common.config {
        Some(path) => load_config(path)?,
        None => Map::new(),
    };
    let flags = serde_json::to_value(args).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Value::Object(flags) = flags {
        merged.extend(flags);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("bad parameter: {e}")))
}

fn load_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), e.line())))?;
    // A run manifest carries its parameters under `parameters`.
    let value = match value {
        Value::Object(mut m) if m.get("parameters").is_some_and(Value::is_object) => {
            m.remove("parameters").expect("checked")
        }
        v => v,
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateParams {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid_steps: usize,
    pub sigma: f64,
    pub t_end: f64,
    pub s0: f64,
    pub people: usize,
    pub lambda: f64,
    pub death_scale: f64,
}

impl Default for SimulateParams {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: "out".into(),
            grid_steps: 30_000,
            sigma: 0.1,
            t_end: 300.0,
            s0: 0.0,
            people: 400,
            lambda: 1.0,
            death_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    pub out_dir: PathBuf,
    pub spikes: Option<PathBuf>,
    pub grid_steps: usize,
    pub sigma: f64,
    pub t_end: f64,
    pub tolerance: Option<f64>,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            spikes: None,
            grid_steps: 3000,
            sigma: 0.1,
            t_end: 300.0,
            tolerance: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleParams {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub path: Option<PathBuf>,
    pub sigma: f64,
    pub du: f64,
    pub samples: usize,
    pub burn_in: Option<f64>,
    pub thinning: Option<f64>,
    pub chains: usize,
    pub mode: String,
    pub scheme: String,
    pub level: f64,
    pub node_time: Option<f64>,
    pub bins: usize,
    pub range: f64,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: "out".into(),
            path: None,
            sigma: 0.1,
            du: 0.05,
            samples: 2000,
            burn_in: None,
            thinning: None,
            chains: 1,
            mode: "full".into(),
            scheme: "crank-nicolson".into(),
            level: 0.95,
            node_time: None,
            bins: 30,
            range: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeParams {
    pub out_dir: PathBuf,
    pub path: Option<PathBuf>,
    pub sigma: f64,
    pub node_time: Option<f64>,
    pub window: f64,
    pub bins: usize,
    pub range: f64,
    pub histogram: Option<PathBuf>,
    pub quadrature: bool,
}

impl Default for AnalyzeParams {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            path: None,
            sigma: 0.1,
            node_time: None,
            window: ratefield::perturbative::DEFAULT_WINDOW,
            bins: 30,
            range: 3.0,
            histogram: None,
            quadrature: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IndirectParams {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mentions: Option<PathBuf>,
    pub grid_steps: usize,
    pub sigma: f64,
    pub t_end: f64,
    pub tolerance: Option<f64>,
    pub lambda: f64,
    pub samples: usize,
    pub du: Option<f64>,
    pub level: f64,
    pub extra_starts: usize,
}

impl Default for IndirectParams {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: "out".into(),
            mentions: None,
            grid_steps: 300,
            sigma: 0.1,
            t_end: 300.0,
            tolerance: None,
            lambda: 1.0,
            samples: 1000,
            du: None,
            level: 0.95,
            extra_starts: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanParams {
    pub out_dir: PathBuf,
    pub model: String,
    pub spikes: Option<PathBuf>,
    pub mentions: Option<PathBuf>,
    pub grid_steps: Option<usize>,
    pub t_end: f64,
    pub tolerance: Option<f64>,
    pub lambda: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_points: usize,
    pub prior: String,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            model: "direct".into(),
            spikes: None,
            mentions: None,
            grid_steps: None,
            t_end: 300.0,
            tolerance: None,
            lambda: 1.0,
            sigma_min: 0.01,
            sigma_max: 1.0,
            sigma_points: 16,
            prior: "log-flat".into(),
        }
    }
}
