//! Pipeline configuration. Every threshold is exposed and echoed into the
//! run manifest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable holding the VLM endpoint credential.
pub const VLM_KEY_ENV: &str = "MASKPRIOR_VLM_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Minimum cycle-consistency recall for a candidate pair (inclusive).
    pub recall_threshold: f64,
    /// Chamfer distance threshold in the scene's normalized frame.
    pub cd_threshold: f64,
    /// Static iff summed score exceeds `score_frac * N`.
    pub score_frac: f64,
    /// Smallest transient candidate sent to the VLM.
    pub min_region_pixels: usize,
    /// Iterations (inclusive) during which the prior replaces the trainer mask.
    pub warmup_iters: u64,
    pub occupancy_frac: f64,
    pub max_query_tokens: usize,
    /// Per-side cap on Chamfer point sets.
    pub max_cd_points: usize,
    /// Pixel stride when building the initial point cloud.
    pub point_stride: usize,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub vlm: VlmConfig,
    pub warmup: WarmupConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            recall_threshold: 0.5,
            cd_threshold: 0.2,
            score_frac: 0.5,
            min_region_pixels: 20_000,
            warmup_iters: 500,
            occupancy_frac: 0.5,
            max_query_tokens: 256,
            max_cd_points: 2048,
            point_stride: 1,
            seed: 0,
            jobs: 0,
            vlm: VlmConfig::default(),
            warmup: WarmupConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.recall_threshold) {
            return bad(format!("recall_threshold {} outside [0, 1]", self.recall_threshold));
        }
        if !(self.cd_threshold > 0.0 && self.cd_threshold.is_finite()) {
            return bad(format!("cd_threshold {} must be positive", self.cd_threshold));
        }
        if !(self.score_frac >= 0.0 && self.score_frac.is_finite()) {
            return bad(format!("score_frac {} must be non-negative", self.score_frac));
        }
        if !(self.occupancy_frac > 0.0 && self.occupancy_frac <= 1.0) {
            return bad(format!("occupancy_frac {} outside (0, 1]", self.occupancy_frac));
        }
        if self.max_cd_points == 0 {
            return bad("max_cd_points must be positive".into());
        }
        if self.vlm.max_attempts == 0 {
            return bad("vlm.max_attempts must be positive".into());
        }
        if self.vlm.mode == VlmMode::Endpoint && self.vlm.url.is_none() {
            return bad("vlm endpoint mode needs a url".into());
        }
        if !(0.0..=1.0).contains(&self.warmup.ssim_lambda) {
            return bad(format!("ssim_lambda {} outside [0, 1]", self.warmup.ssim_lambda));
        }
        Ok(())
    }

    /// The score threshold `score_frac * N` for an `n`-view scene.
    pub fn score_threshold(&self, n: usize) -> f64 {
        self.score_frac * n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VlmMode {
    Off,
    Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmConfig {
    pub mode: VlmMode,
    pub url: Option<String>,
    pub model: String,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub palette_seed: u64,
    pub overlay_alpha: f64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            mode: VlmMode::Off,
            url: None,
            model: "gpt-4o".into(),
            timeout_secs: 60.0,
            max_attempts: 3,
            backoff_ms: 500,
            concurrency: 4,
            palette_seed: 0,
            overlay_alpha: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub reg_weight: f64,
    pub ssim_lambda: f64,
    pub blur_radius: usize,
    pub learning_rate: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            reg_weight: 0.5,
            ssim_lambda: 0.2,
            blur_radius: 8,
            learning_rate: 0.1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"cd_threshold": 0.1, "vlm": {"mode": "off"}}"#).unwrap();
        assert_eq!(c.cd_threshold, 0.1);
        assert_eq!(c.recall_threshold, 0.5);
        assert_eq!(c.vlm.max_attempts, 3);
        c.validate().unwrap();
    }

    #[test]
    fn out_of_range_values_rejected() {
        let c = PipelineConfig { recall_threshold: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = PipelineConfig { cd_threshold: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.vlm.mode = VlmMode::Endpoint;
        assert!(c.validate().is_err());
    }
}
