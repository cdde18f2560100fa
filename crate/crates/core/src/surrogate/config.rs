use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the surrogate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pixels per token edge.
    pub patch_size: usize,
    /// Residual-stream width C.
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Input frames per prediction.
    pub window_t: usize,
    /// Channels per frame.
    pub field_count: usize,
    /// Grid height H in pixels.
    pub height: usize,
    /// Grid width W in pixels.
    pub width: usize,
    /// Hidden width multiplier of the MLP.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// With `false` blocks contain only the MLP sublayer.
    #[serde(default = "default_true")]
    pub attention: bool,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Patch 8, C = 64, 4 blocks, 4 heads, 4-frame window.
    pub fn tiny(field_count: usize, height: usize, width: usize) -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            n_blocks: 4,
            n_heads: 4,
            window_t: 4,
            field_count,
            height,
            width,
            mlp_ratio: 4,
            attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return bad(format!(
                "grid {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.window_t < 2 {
            return bad(format!("window_t must be >= 2, got {}", self.window_t));
        }
        if self.field_count == 0 || self.mlp_ratio == 0 {
            return bad("field_count and mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    /// Token rows (y).
    pub fn tokens_h(&self) -> usize {
        self.height / self.patch_size
    }

    /// Token columns (x).
    pub fn tokens_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.window_t * self.tokens_h() * self.tokens_w()
    }

    pub fn patch_features(&self) -> usize {
        self.field_count * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// `[T, C, W, H]` of a tapped activation.
    pub fn activation_shape(&self) -> [usize; 4] {
        [self.window_t, self.embed_dim, self.tokens_w(), self.tokens_h()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_token_grid() {
        let c = ModelConfig::tiny(4, 64, 64);
        c.validate().unwrap();
        assert_eq!(c.activation_shape(), [4, 64, 8, 8]);
        assert_eq!(c.tokens(), 256);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::tiny(4, 64, 60);
        assert!(c.validate().is_err());
        c.width = 64;
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.window_t = 1;
        assert!(c.validate().is_err());
    }
}
