//! Run configuration, read from a flat `key=value` document.
//!
//! Pairs are separated by whitespace or newlines; `#` starts a comment that
//! runs to the end of the line. Unknown keys are reported as warnings.

use std::fmt;
use std::str::FromStr;

use crate::error::{PearlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Svd,
    NewtonSchulz,
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "svd" => Ok(SolverKind::Svd),
            "newton_schulz" | "ns" => Ok(SolverKind::NewtonSchulz),
            other => Err(format!("expected `svd` or `newton_schulz`, got `{other}`")),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Svd => "svd",
            SolverKind::NewtonSchulz => "newton_schulz",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Temperature of the prototype similarity softmax.
    pub tau_s: f64,
    /// Self-affinity boost added to the class graph diagonal.
    pub beta: f64,
    /// Floor on node peak probability.
    pub epsilon: f64,
    /// Image-edge sensitivity.
    pub kappa: f64,
    /// Strength of the text-consistency gate.
    pub lambda: f64,
    /// Smoothness weight; 0 disables propagation.
    pub tau: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub cg_iters: usize,
    pub ns_iters: usize,
    pub solver: SolverKind,
    pub use_key_key: bool,
    pub zero_cls_weight: bool,
    /// Replay residual/MLP/post-norm/projection tensors when the features
    /// container ships them.
    pub replay_tail: bool,
    /// Debug: skip the Procrustes solve and use the identity rotation.
    pub identity_rotation: bool,
    pub window: usize,
    pub stride: usize,
    pub short_side: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.5,
            beta: 10.0,
            epsilon: 1e-6,
            kappa: 5.0,
            lambda: 1.0,
            tau: 1.0,
            grid_h: 80,
            grid_w: 80,
            cg_iters: 25,
            ns_iters: 8,
            solver: SolverKind::NewtonSchulz,
            use_key_key: true,
            zero_cls_weight: true,
            replay_tail: true,
            identity_rotation: false,
            window: 224,
            stride: 112,
            short_side: 336,
        }
    }
}

/// A parsed configuration plus the keys that were not recognised.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub unknown_keys: Vec<String>,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| PearlError::validation(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_flag(key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(PearlError::validation(
            key,
            format!("expected a boolean, got `{raw}`"),
        )),
    }
}

impl PipelineConfig {
    /// Cityscapes geometry: larger propagation grid and short side.
    pub fn cityscapes() -> Self {
        Self {
            grid_h: 224,
            grid_w: 224,
            short_side: 560,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<LoadedConfig> {
        let mut config = Self::default();
        let mut unknown_keys = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for token in line.split_whitespace() {
                let (key, raw) = token.split_once('=').ok_or_else(|| {
                    PearlError::validation(token, "expected `key=value`".to_string())
                })?;
                if !config.set(key, raw)? {
                    log::warn!("ignoring unknown configuration key `{key}`");
                    unknown_keys.push(key.to_string());
                }
            }
        }
        config.validate()?;
        Ok(LoadedConfig {
            config,
            unknown_keys,
        })
    }

    /// Sets one key from its textual value. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "tau_s" => self.tau_s = parse_value(key, raw)?,
            "beta" => self.beta = parse_value(key, raw)?,
            "epsilon" => self.epsilon = parse_value(key, raw)?,
            "kappa" => self.kappa = parse_value(key, raw)?,
            "lambda" => self.lambda = parse_value(key, raw)?,
            "tau" => self.tau = parse_value(key, raw)?,
            "grid_h" => self.grid_h = parse_value(key, raw)?,
            "grid_w" => self.grid_w = parse_value(key, raw)?,
            "cg_iters" => self.cg_iters = parse_value(key, raw)?,
            "ns_iters" => self.ns_iters = parse_value(key, raw)?,
            "solver" => self.solver = parse_value(key, raw)?,
            "use_key_key" => self.use_key_key = parse_flag(key, raw)?,
            "zero_cls_weight" => self.zero_cls_weight = parse_flag(key, raw)?,
            "replay_tail" => self.replay_tail = parse_flag(key, raw)?,
            "identity_rotation" => self.identity_rotation = parse_flag(key, raw)?,
            "window" => self.window = parse_value(key, raw)?,
            "stride" => self.stride = parse_value(key, raw)?,
            "short_side" => self.short_side = parse_value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_s", self.tau_s),
            ("epsilon", self.epsilon),
            ("kappa", self.kappa),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PearlError::validation(key, format!("must be > 0, got {v}")));
            }
        }
        let non_negative = [("beta", self.beta), ("lambda", self.lambda), ("tau", self.tau)];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PearlError::validation(key, format!("must be >= 0, got {v}")));
            }
        }
        let counts = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("cg_iters", self.cg_iters),
            ("ns_iters", self.ns_iters),
            ("window", self.window),
            ("stride", self.stride),
            ("short_side", self.short_side),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(PearlError::validation(key, "must be a positive integer"));
            }
        }
        if self.stride > self.window {
            return Err(PearlError::validation(
                "stride",
                format!("stride {} exceeds window {}", self.stride, self.window),
            ));
        }
        Ok(())
    }

    /// Renders the configuration in the same `key=value` form `parse` reads.
    pub fn to_text(&self) -> String {
        format!(
            "tau_s={}\nbeta={}\nepsilon={:e}\nkappa={}\nlambda={}\ntau={}\n\
             grid_h={}\ngrid_w={}\ncg_iters={}\nns_iters={}\nsolver={}\n\
             use_key_key={}\nzero_cls_weight={}\nreplay_tail={}\nidentity_rotation={}\n\
             window={}\nstride={}\nshort_side={}\n",
            self.tau_s,
            self.beta,
            self.epsilon,
            self.kappa,
            self.lambda,
            self.tau,
            self.grid_h,
            self.grid_w,
            self.cg_iters,
            self.ns_iters,
            self.solver,
            self.use_key_key,
            self.zero_cls_weight,
            self.replay_tail,
            self.identity_rotation,
            self.window,
            self.stride,
            self.short_side
        )
    }
}

/// Parses a configuration document; see [`PipelineConfig::parse`].
pub fn load_config(text: &str) -> Result<PipelineConfig> {
    PipelineConfig::parse(text).map(|l| l.config)
}
