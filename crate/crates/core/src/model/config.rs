//! Model configuration and supervision types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether the classifier predicts one class or several binary attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

/// Supervision for one sample: a class index or a vector of attribute flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Flags(Vec<bool>),
}

/// Architecture of the Vision Transformer classifier.
///
/// Images are split into square patches, linearly embedded, given
/// learnable position embeddings, passed through `depth` pre-norm
/// transformer blocks, mean-pooled over patch tokens, and classified by
/// a linear head. Parameter shapes are fully determined by this config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Pixels per image side.
    pub image_size: usize,
    /// Pixels per patch side; must divide `image_size`.
    pub patch_size: usize,
    /// Input channels per pixel.
    pub channels: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    /// Token embedding width.
    pub embed_dim: usize,
    /// Hidden width of each block's MLP as a multiple of `embed_dim`.
    pub mlp_ratio: f64,
    /// Classifier outputs (classes or attributes).
    pub num_outputs: usize,
    pub task_kind: TaskKind,
}

impl ViTConfig {
    /// Check every structural invariant, naming the violated one.
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::config("image_size and patch_size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size ({}) must be divisible by patch_size ({})",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if self.depth < 1 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.num_outputs < 1 {
            return Err(Error::config("num_outputs must be >= 1"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patch tokens per image: (image_size / patch_size)^2.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch length: channels * patch_size^2.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// MLP hidden width.
    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Width of one attention head.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

impl Label {
    /// Check the label against the task's arity.
    pub fn validate(&self, task_kind: TaskKind, num_outputs: usize) -> Result<()> {
        match (self, task_kind) {
            (Label::Class(c), TaskKind::Multiclass) => {
                if *c >= num_outputs {
                    Err(Error::input(format!(
                        "class label {c} out of range for {num_outputs} outputs"
                    )))
                } else {
                    Ok(())
                }
            }
            (Label::Flags(f), TaskKind::Multilabel) => {
                if f.len() != num_outputs {
                    Err(Error::input(format!(
                        "expected {num_outputs} attribute flags, got {}",
                        f.len()
                    )))
                } else {
                    Ok(())
                }
            }
            (Label::Class(_), TaskKind::Multilabel) => {
                Err(Error::input("class label given for a multilabel task"))
            }
            (Label::Flags(_), TaskKind::Multiclass) => {
                Err(Error::input("attribute flags given for a multiclass task"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            depth: 2,
            heads: 2,
            embed_dim: 16,
            mlp_ratio: 2.0,
            num_outputs: 8,
            task_kind: TaskKind::Multiclass,
        }
    }

    #[test]
    fn valid_config_passes() {
        base().validate().unwrap();
        assert_eq!(base().num_patches(), 64);
        assert_eq!(base().patch_dim(), 16);
        assert_eq!(base().mlp_dim(), 32);
    }

    #[test]
    fn indivisible_patch_size_rejected() {
        let cfg = ViTConfig {
            patch_size: 5,
            ..base()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = ViTConfig {
            heads: 3,
            ..base()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn label_arity_checked() {
        assert!(Label::Class(7).validate(TaskKind::Multiclass, 8).is_ok());
        assert!(Label::Class(8).validate(TaskKind::Multiclass, 8).is_err());
        assert!(Label::Flags(vec![true, false, true])
            .validate(TaskKind::Multilabel, 3)
            .is_ok());
        assert!(Label::Flags(vec![true])
            .validate(TaskKind::Multilabel, 3)
            .is_err());
        assert!(Label::Class(0).validate(TaskKind::Multilabel, 3).is_err());
    }
}
