use std::fmt::Write as _;

use crate::diffcore::Precision;
use crate::error::{Error, Result};

/// Network shape. The two ablation switches are not part of the config file;
/// they are set by callers (the command line exposes `--no-oe`/`--no-attention`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_points: usize,
    /// Widths of the PointOE stages; the last one is the local descriptor width.
    pub mlp_dims: Vec<usize>,
    pub vlad_k: usize,
    pub out_dim: usize,
    pub s8n_radius: f64,
    pub precision: Precision,
    pub use_oe: bool,
    pub use_attention: bool,
}

pub const CONFIG_KEYS: [&str; 6] = ["n_points", "mlp_dims", "vlad_k", "out_dim", "s8n_radius", "precision"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            n_points: 256,
            mlp_dims: vec![16, 32, 64, 128],
            vlad_k: 8,
            out_dim: 32,
            s8n_radius: 0.2,
            precision: Precision::F32,
            use_oe: true,
            use_attention: true,
        }
    }

    /// Full-size network: 4096 points, [64, 128, 256, 1024], K = 64, 256-d output.
    pub fn full_size() -> Self {
        ModelConfig {
            n_points: 4096,
            mlp_dims: vec![64, 128, 256, 1024],
            vlad_k: 64,
            out_dim: 256,
            ..Self::desk()
        }
    }

    pub fn local_dim(&self) -> usize {
        *self.mlp_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.vlad_k == 0 || self.out_dim == 0 {
            return Err(Error::Invalid("n_points, vlad_k and out_dim must be >= 1".into()));
        }
        if self.mlp_dims.is_empty() || self.mlp_dims.contains(&0) {
            return Err(Error::Invalid(format!("mlp_dims must be non-empty positive widths, got {:?}", self.mlp_dims)));
        }
        if self.out_dim > self.vlad_k * self.local_dim() {
            return Err(Error::Invalid(format!(
                "out_dim {} exceeds vlad_k x last width = {}",
                self.out_dim,
                self.vlad_k * self.local_dim()
            )));
        }
        if !(self.s8n_radius > 0.0) {
            return Err(Error::Invalid(format!("s8n_radius must be > 0, got {}", self.s8n_radius)));
        }
        Ok(())
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys are rejected and missing keys keep the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Format(format!("config line {}: bad {what} `{value}`", lineno + 1));
            match key {
                "n_points" => cfg.n_points = value.parse().map_err(|_| bad(key))?,
                "mlp_dims" => {
                    cfg.mlp_dims = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(key))?
                }
                "vlad_k" => cfg.vlad_k = value.parse().map_err(|_| bad(key))?,
                "out_dim" => cfg.out_dim = value.parse().map_err(|_| bad(key))?,
                "s8n_radius" => cfg.s8n_radius = value.parse().map_err(|_| bad(key))?,
                "precision" => cfg.precision = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(Error::Format(format!(
                        "config line {}: unknown key `{other}` (expected one of {})",
                        lineno + 1,
                        CONFIG_KEYS.join(", ")
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.mlp_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "n_points={}", self.n_points);
        let _ = writeln!(s, "mlp_dims={}", dims.join(","));
        let _ = writeln!(s, "vlad_k={}", self.vlad_k);
        let _ = writeln!(s, "out_dim={}", self.out_dim);
        let _ = writeln!(s, "s8n_radius={}", self.s8n_radius);
        let _ = writeln!(s, "precision={}", self.precision);
        s
    }
}
