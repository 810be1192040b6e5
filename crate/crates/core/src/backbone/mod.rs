//! Toy diffusion transformer with predict/update camera conditioning.

mod model;
mod params;
mod tokens;


pub use model::{sinusoidal, Conditioning, KalmanBlockState, KalmanDit, ModelInput, TokenFeatures};
pub use params::{Init, ParamSpec, ParamStore};
pub use tokens::{patchify, unpatchify_index};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite model input: {0}")]
    NonFinite(String),
    #[error("timestep {0} outside [0, 1]")]
    Timestep(f64),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<usize> },
}

/// Source of the control input `u` in the predict step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    /// Camera tokens attend to point-cloud tokens.
    CrossAttention,
    /// Point-cloud tokens attend to camera tokens.
    CrossAttentionSwapped,
    /// Self-attention over camera tokens only.
    CameraOnly,
    /// `cam + z_pc`, no attention.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_backbone_blocks: usize,
    pub num_kalman_blocks: usize,
    /// Backbone block after which each Kalman block runs (1-based). `None`
    /// spaces them evenly: `⌊N·k/K⌋` for `k = 1..=K`.
    pub kalman_insertion_indices: Option<Vec<usize>>,
    pub diff_blocks_per_update: usize,
    pub mlp_ratio: usize,
    /// Codec patch size `p`.
    pub patch_size: usize,
    /// Latent cells per token side `p'`.
    pub token_patch: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub control: ControlMode,
    pub update: bool,
    pub last_frame_conditioning: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_heads: 4,
            num_backbone_blocks: 6,
            num_kalman_blocks: 2,
            kalman_insertion_indices: None,
            diff_blocks_per_update: 1,
            mlp_ratio: 4,
            patch_size: 2,
            token_patch: 2,
            frames: 9,
            latent_channels: 12,
            latent_height: 16,
            latent_width: 16,
            control: ControlMode::CrossAttention,
            update: true,
            last_frame_conditioning: true,
        }
    }
}

impl ModelConfig {
    /// Latent geometry for `frames` of `height×width` pixels.
    pub fn for_video(frames: usize, height: usize, width: usize, patch_size: usize) -> Self {
        ModelConfig {
            frames,
            patch_size,
            latent_channels: 3 * patch_size * patch_size,
            latent_height: height / patch_size,
            latent_width: width / patch_size,
            ..Default::default()
        }
    }

    pub fn insertion_indices(&self) -> Vec<usize> {
        match &self.kalman_insertion_indices {
            Some(v) => v.clone(),
            None => {
                let (n, k) = (self.num_backbone_blocks, self.num_kalman_blocks);
                (1..=k).map(|i| n * i / k).collect()
            }
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_height / self.token_patch, self.latent_width / self.token_patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        self.frames * gh * gw
    }

    pub fn video_features(&self) -> usize {
        (2 * self.latent_channels + 1) * self.token_patch * self.token_patch
    }

    pub fn camera_features(&self) -> usize {
        let s = self.patch_size * self.token_patch;
        6 * s * s
    }

    pub fn latent_features(&self) -> usize {
        self.latent_channels * self.token_patch * self.token_patch
    }

    /// Frames whose clean latent is given to the model.
    pub fn conditioned_frames(&self) -> Vec<usize> {
        if self.last_frame_conditioning {
            vec![0, self.frames - 1]
        } else {
            vec![0]
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.embed_dim % 2 != 0 {
            return err("embed_dim must be even".into());
        }
        if self.num_kalman_blocks > self.num_backbone_blocks {
            return err(format!("K = {} exceeds N = {}", self.num_kalman_blocks, self.num_backbone_blocks));
        }
        let idx = self.insertion_indices();
        if idx.len() != self.num_kalman_blocks {
            return err(format!("{} insertion indices for {} Kalman blocks", idx.len(), self.num_kalman_blocks));
        }
        if idx.iter().any(|&i| i < 1 || i > self.num_backbone_blocks) || idx.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("insertion indices {idx:?} must increase strictly within [1, N]"));
        }
        if self.patch_size == 0 || self.token_patch == 0 || self.mlp_ratio == 0 {
            return err("patch sizes and mlp_ratio must be positive".into());
        }
        if self.latent_height % self.token_patch != 0 || self.latent_width % self.token_patch != 0 {
            return err(format!(
                "latent {}x{} not divisible by token patch {}",
                self.latent_height, self.latent_width, self.token_patch
            ));
        }
        if self.frames < 2 || self.latent_channels == 0 || self.latent_height == 0 || self.latent_width == 0 {
            return err("need at least 2 frames and a non-empty latent".into());
        }
        Ok(())
    }
}
