use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    /// Block count `L`; must be even.
    pub depth: usize,
    pub heads: usize,
    /// Real classes; the null label gets one extra embedding row.
    pub num_classes: usize,
    pub variant: Variant,
    /// Learnable scale/shift on the fusion layer norm.
    pub fusion_norm_affine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            hidden_dim: 64,
            depth: 8,
            heads: 4,
            num_classes: 10,
            variant: Variant::Skip,
            fusion_norm_affine: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(invalid(format!("depth {} must be positive and even", self.depth)));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(invalid(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(invalid("channels must be positive"));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn is_skip(&self) -> bool {
        self.variant == Variant::Skip
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch: `channels * patch_size²`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Number of long-skip branches (`L/2` for the skip variant, else 0).
    pub fn skip_branches(&self) -> usize {
        if self.is_skip() {
            self.depth / 2
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 16);
        assert_eq!(c.patch_dim(), 16);
        assert_eq!(c.skip_branches(), 4);
        assert_eq!(c.with_variant(Variant::Vanilla).skip_branches(), 0);
    }

    #[test]
    fn invalid_configs() {
        let odd = ModelConfig {
            depth: 3,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
        let heads = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(heads.validate().is_err());
        let patch = ModelConfig {
            patch_size: 3,
            ..ModelConfig::default()
        };
        assert!(patch.validate().is_err());
    }

    #[test]
    fn json_round_trip_applies_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"depth": 4, "variant": "vanilla"}"#).unwrap();
        assert_eq!(c.depth, 4);
        assert_eq!(c.variant, Variant::Vanilla);
        assert_eq!(c.hidden_dim, 64);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"depht": 4}"#).is_err());
    }
}
