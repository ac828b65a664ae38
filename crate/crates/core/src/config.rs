//! Declarative pipeline configuration (JSON).
//!
//! Every key is optional; missing keys take their defaults and unknown keys
//! are rejected. Constraints of the downstream stages are checked on parse.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cscp::CscpParams;
use crate::diffusion::DiffusionParams;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lambda1: f64,
    pub graph: GraphConfig,
    pub diffusion: DiffusionConfig,
    pub cscp: CscpConfig,
    pub superpixel: SuperpixelConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub alpha: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CscpConfig {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub beta: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub softmax_temp: f64,
    pub eps_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperpixelConfig {
    pub scale: f64,
    pub min_size: usize,
    pub sigma: f64,
    pub w_in: f64,
    pub w_cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `null` disables ignoring.
    pub ignore_index: Option<i64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            graph: GraphConfig::default(),
            diffusion: DiffusionConfig::default(),
            cscp: CscpConfig::default(),
            superpixel: SuperpixelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 30, tau: 0.07 }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { alpha: 0.9, steps: 40 }
    }
}

impl Default for CscpConfig {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_d: 0.2,
            beta: 0.10,
            max_iters: 500,
            rel_tol: 1e-6,
            softmax_temp: 1.0,
            eps_floor: 1e-8,
        }
    }
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        Self {
            scale: 100.0,
            min_size: 50,
            sigma: 0.8,
            w_in: 1.0,
            w_cross: 0.10,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ignore_index: Some(255),
        }
    }
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::ConstraintViolation(msg()))
    }
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("unknown field `") {
                Some(rest) => ConfigError::UnknownKey(rest.split('`').next().unwrap_or(rest).to_string()),
                None => ConfigError::Syntax(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require(self.lambda1.is_finite() && self.lambda1 >= 0.0, || {
            format!("lambda1 = {} must be finite and >= 0", self.lambda1)
        })?;
        let g = &self.graph;
        require(g.k >= 1, || "graph.k must be >= 1".into())?;
        require(g.tau.is_finite() && g.tau > 0.0, || {
            format!("graph.tau = {} must be > 0", g.tau)
        })?;
        let d = &self.diffusion;
        require(d.alpha > 0.0 && d.alpha < 1.0, || {
            format!("diffusion.alpha = {} must lie in (0, 1)", d.alpha)
        })?;
        self.cscp_params::<f64>()
            .validate()
            .map_err(|e| ConfigError::ConstraintViolation(format!("cscp: {e}")))?;
        require(self.cscp.max_iters >= 1, || "cscp.max_iters must be >= 1".into())?;
        let s = &self.superpixel;
        require(s.scale.is_finite() && s.scale > 0.0, || {
            format!("superpixel.scale = {} must be > 0", s.scale)
        })?;
        require(s.min_size >= 1, || "superpixel.min_size must be >= 1".into())?;
        require(s.sigma.is_finite() && s.sigma >= 0.0, || {
            format!("superpixel.sigma = {} must be >= 0", s.sigma)
        })?;
        require(
            s.w_in.is_finite() && s.w_in >= 0.0 && s.w_cross.is_finite() && s.w_cross >= 0.0,
            || format!("superpixel weights ({}, {}) must be finite and >= 0", s.w_in, s.w_cross),
        )?;
        Ok(())
    }

    pub fn diffusion_params<T: Scalar>(&self) -> DiffusionParams<T> {
        DiffusionParams::new(T::of_f64(self.diffusion.alpha), self.diffusion.steps).expect("validated at parse time")
    }

    pub fn cscp_params<T: Scalar>(&self) -> CscpParams<T> {
        let c = &self.cscp;
        CscpParams {
            lambda_c: T::of_f64(c.lambda_c),
            lambda_d: T::of_f64(c.lambda_d),
            beta: T::of_f64(c.beta),
            max_iters: c.max_iters,
            rel_tol: T::of_f64(c.rel_tol),
            softmax_temp: T::of_f64(c.softmax_temp),
            eps_floor: T::of_f64(c.eps_floor),
        }
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    PipelineConfig::from_json_str(&std::fs::read_to_string(path)?)
}
