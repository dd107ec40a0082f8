use serde::{Deserialize, Serialize};

use crate::data::{NUM_CLASSES, TOKEN_DIM};
use crate::error::{Error, Result};
use crate::loss::{FocalParams, LossConfig};

/// Architecture and objective settings. Field names double as keys of the
/// flat JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Query pairs `N`.
    pub queries: usize,
    /// Channel width `C`.
    pub channels: usize,
    /// Hypergraph scales `S`.
    pub scales: usize,
    /// Hyperedge convolution layers `L` per scale.
    pub layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_classes: usize,
    /// Token grid; the encoder sees `grid_w * grid_h` tokens.
    pub grid_w: usize,
    pub grid_h: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Both query sets share one self-attention over `2N` rows.
    pub joint_attention: bool,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_focal: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// The full-size setting (ResNet features replaced by the token grid).
    pub fn paper() -> Self {
        ModelConfig {
            queries: 64,
            channels: 256,
            scales: 5,
            layers: 2,
            enc_layers: 6,
            dec_layers: 3,
            heads: 8,
            ffn_dim: 2048,
            ..ModelConfig::desk()
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            queries: 16,
            channels: 64,
            scales: 3,
            layers: 2,
            enc_layers: 1,
            dec_layers: 2,
            num_classes: NUM_CLASSES,
            grid_w: 8,
            grid_h: 8,
            token_dim: TOKEN_DIM,
            heads: 4,
            ffn_dim: 128,
            joint_attention: true,
            lambda_l1: 2.5,
            lambda_giou: 1.0,
            lambda_focal: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed: 0,
        }
    }

    /// 4 queries, 16 channels, 2 scales, 1 layer: for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            queries: 4,
            channels: 16,
            scales: 2,
            layers: 1,
            enc_layers: 1,
            dec_layers: 1,
            grid_w: 3,
            grid_h: 3,
            heads: 4,
            ffn_dim: 16,
            ..ModelConfig::desk()
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            l1: self.lambda_l1,
            giou: self.lambda_giou,
            focal: self.lambda_focal,
            focal_params: FocalParams {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("queries", self.queries),
            ("scales", self.scales),
            ("num_classes", self.num_classes),
            ("grid_w", self.grid_w),
            ("grid_h", self.grid_h),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::validation("channels", format!("must be a positive multiple of 4, got {}", self.channels)));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        let ints = [
            self.queries,
            self.channels,
            self.scales,
            self.layers,
            self.enc_layers,
            self.dec_layers,
            self.num_classes,
            self.grid_w,
            self.grid_h,
            self.token_dim,
            self.heads,
            self.ffn_dim,
        ];
        if ints.iter().any(|&v| v > i32::MAX as usize) {
            return Err(Error::validation("config", "values must fit in a 32-bit integer"));
        }
        self.loss().validate()
    }

    /// Integer header stored in checkpoints, in file order.
    pub(crate) fn header(&self) -> [i32; 13] {
        [
            self.queries,
            self.channels,
            self.scales,
            self.layers,
            self.enc_layers,
            self.dec_layers,
            self.num_classes,
            self.grid_w,
            self.grid_h,
            self.token_dim,
            self.heads,
            self.ffn_dim,
            self.joint_attention as usize,
        ]
        .map(|v| v as i32)
    }

    /// Applies a checkpoint header; objective settings and seed are kept.
    pub(crate) fn with_header(&self, h: [i32; 13]) -> Result<Self> {
        if let Some(bad) = h.iter().find(|&&v| v < 0) {
            return Err(Error::Checkpoint(format!("negative config value {bad}")));
        }
        let u = h.map(|v| v as usize);
        let cfg = ModelConfig {
            queries: u[0],
            channels: u[1],
            scales: u[2],
            layers: u[3],
            enc_layers: u[4],
            dec_layers: u[5],
            num_classes: u[6],
            grid_w: u[7],
            grid_h: u[8],
            token_dim: u[9],
            heads: u[10],
            ffn_dim: u[11],
            joint_attention: u[12] != 0,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::paper(), ModelConfig::desk(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
        let p = ModelConfig::paper();
        assert_eq!((p.queries, p.channels, p.scales, p.layers), (64, 256, 5, 2));
        assert_eq!((p.enc_layers, p.dec_layers), (6, 3));
        assert_eq!((p.lambda_l1, p.lambda_giou, p.lambda_focal), (2.5, 1.0, 2.0));
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
        let mut c = ModelConfig::tiny();
        c.lambda_giou = -1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.queries = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_keys_and_header_round_trip() {
        let c: ModelConfig = serde_json::from_str(r#"{"queries": 8, "layers": 0}"#).unwrap();
        assert_eq!((c.queries, c.layers, c.channels), (8, 0, 64));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"querys": 8}"#).is_err());
        let back = ModelConfig::desk().with_header(c.header()).unwrap();
        assert_eq!(back.header(), c.header());
    }
}
