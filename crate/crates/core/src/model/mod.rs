//! The super-resolution network and its tooling: configuration, parameters,
//! checkpoints, training, FLOP accounting and receptive-field maps.

pub mod erf;
pub mod flops;
pub mod layers;
pub mod net;
pub mod params;
pub mod train;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::pipeline::ImageError;
use crate::ssm::SsmError;
use crate::tensor::TensorError;
use crate::traj::TrajError;

pub use erf::{erf_from_fn, erf_map, erf_panel, probe_report, ProbeKind, ScanProbe};
pub use flops::{count_flops, FlopReport, SCAN_MACS_PER_STEP};
pub use layers::{Cab, Conv, LayerNorm, Linear, Mlp, Rlmb, Rlmg, Ss2d};
pub use net::MambaCsr;
pub use params::{load_checkpoint, save_checkpoint, CheckpointEntry, ParamId, ParamStore};
pub use train::{train_toy, Adam, ToyTrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// How many directional scans each block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanMode {
    /// One trajectory and its flip, alternating per block.
    Dis,
    /// Horizontal and vertical trajectories with both flips.
    FourDir,
}

impl ScanMode {
    pub fn scans_per_block(self) -> usize {
        match self {
            ScanMode::Dis => 2,
            ScanMode::FourDir => 4,
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::Dis => "dis",
            ScanMode::FourDir => "4dir",
        })
    }
}

impl FromStr for ScanMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dis" => Ok(ScanMode::Dis),
            "4dir" | "four_dir" | "fourdir" => Ok(ScanMode::FourDir),
            other => Err(ModelError::Config(format!("unknown scan_mode {other:?} (dis|4dir)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub d_state: usize,
    pub expand: usize,
    pub mlp_ratio: f64,
    pub window: usize,
    pub seq_window: usize,
    pub scale: usize,
    pub scan_mode: ScanMode,
    pub cross_scale: bool,
}

/// Squeeze ratio of the channel-attention branch.
pub const CAB_REDUCTION: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            groups: 2,
            blocks_per_group: 4,
            d_state: 8,
            expand: 2,
            mlp_ratio: 2.0,
            window: 8,
            seq_window: 64,
            scale: 4,
            scan_mode: ScanMode::Dis,
            cross_scale: true,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every component.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 4,
            groups: 1,
            blocks_per_group: 2,
            d_state: 2,
            window: 4,
            ..Self::default()
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.channels
    }

    pub fn dt_rank(&self) -> usize {
        self.channels.div_ceil(16).max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn cab_hidden(&self) -> usize {
        (self.channels / CAB_REDUCTION).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("groups", self.groups),
            ("blocks_per_group", self.blocks_per_group),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("window", self.window),
            ("seq_window", self.seq_window),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{k} must be positive")));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(ModelError::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if ![2, 4].contains(&self.scale) {
            return Err(ModelError::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment. Keys not present keep
    /// their default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ModelError::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "channels" => cfg.channels = int()?,
                "groups" => cfg.groups = int()?,
                "blocks_per_group" => cfg.blocks_per_group = int()?,
                "d_state" => cfg.d_state = int()?,
                "expand" => cfg.expand = int()?,
                "mlp_ratio" => cfg.mlp_ratio = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "window" => cfg.window = int()?,
                "seq_window" => cfg.seq_window = int()?,
                "scale" => cfg.scale = int()?,
                "scan_mode" => cfg.scan_mode = value.parse()?,
                "cross_scale" => {
                    cfg.cross_scale = value.parse().map_err(|e| err(format!("{key}: {e}")))?;
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "channels={}\ngroups={}\nblocks_per_group={}\nd_state={}\nexpand={}\nmlp_ratio={}\nwindow={}\nseq_window={}\nscale={}\nscan_mode={}\ncross_scale={}\n",
            self.channels,
            self.groups,
            self.blocks_per_group,
            self.d_state,
            self.expand,
            self.mlp_ratio,
            self.window,
            self.seq_window,
            self.scale,
            self.scan_mode,
            self.cross_scale
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = ModelConfig::tiny();
        cfg.scan_mode = ScanMode::FourDir;
        cfg.mlp_ratio = 1.5;
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_comments_and_errors() {
        let cfg = ModelConfig::parse("# desk\nchannels = 16  # narrower\n\nscan_mode=4dir\n").unwrap();
        assert_eq!(cfg.channels, 16);
        assert_eq!(cfg.scan_mode, ScanMode::FourDir);
        assert_eq!(cfg.groups, 2);
        assert!(ModelConfig::parse("colour=3").is_err());
        assert!(ModelConfig::parse("channels").is_err());
        assert!(ModelConfig::parse("scale=3").is_err());
        assert!(ModelConfig::parse("channels=0").is_err());
    }

    #[test]
    fn derived_sizes() {
        let cfg = ModelConfig::default();
        assert_eq!((cfg.d_inner(), cfg.dt_rank(), cfg.mlp_hidden(), cfg.cab_hidden()), (64, 2, 64, 8));
        assert_eq!(ModelConfig::tiny().dt_rank(), 1);
    }
}
