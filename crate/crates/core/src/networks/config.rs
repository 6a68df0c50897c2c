use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::pose_dim;

/// Network sizes. Desk defaults are far below the published full-scale
/// setting (5 layers, 512 hidden units, 256 phase channels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Attention blocks in each of encoder, prior and decoder.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Phase channel count `D`.
    pub channels: usize,
    pub cond_dim: usize,
    pub joints: usize,
    /// Window length `T`; the shift and sigma heads read whole windows.
    pub frames: usize,
    pub omega: f64,
    /// Only 0 is supported; kept so configs can state it explicitly.
    pub dropout: f64,
    pub sigma_hidden: usize,
    pub traj_hidden: usize,
    pub traj_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 128,
            channels: 8,
            cond_dim: 6,
            joints: 24,
            frames: 64,
            omega: 30.0,
            dropout: 0.0,
            sigma_hidden: 32,
            traj_hidden: 32,
            traj_kernel: 5,
        }
    }
}

impl ModelConfig {
    pub fn pose_dim(&self) -> usize {
        pose_dim(self.joints)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("channels", self.channels),
            ("cond_dim", self.cond_dim),
            ("joints", self.joints),
            ("sigma_hidden", self.sigma_hidden),
            ("traj_hidden", self.traj_hidden),
            ("traj_kernel", self.traj_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("model.{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "model.heads ({}) must divide model.hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.frames < 2 {
            return Err(Error::Invalid("model.frames must be at least 2".into()));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::Invalid("model.omega must be positive".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Invalid("model.dropout: only 0 is supported".into()));
        }
        Ok(())
    }
}
