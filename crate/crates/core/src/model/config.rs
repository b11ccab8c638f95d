use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::EncodingConfig;

/// Longest window the positional table covers.
pub const MAX_POSITIONS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Similarity-learning model: emits a unit-length embedding.
    Slm,
    /// Classification model: emits one logit per enrolled user.
    Clm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub n_transformer_layers: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub gru_dropout: f64,
    pub dropout_frames: f64,
    pub dropout_global: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub window_size: usize,
    pub frame_step: usize,
    pub learning_rate: f64,
}

impl ModelConfig {
    /// Final similarity-model hyperparameters.
    pub fn slm() -> Self {
        Self {
            kind: ModelKind::Slm,
            d_model: 320,
            n_transformer_layers: 1,
            ff_dim: 960,
            n_heads: 16,
            gru_hidden: 480,
            gru_layers: 2,
            gru_dropout: 0.1,
            dropout_frames: 0.3,
            dropout_global: 0.2,
            embedding_size: Some(480),
            n_classes: None,
            window_size: 450,
            frame_step: 50,
            learning_rate: 0.00098,
        }
    }

    /// Final classification-model hyperparameters for `n_users` classes.
    pub fn clm(n_users: usize) -> Self {
        Self {
            kind: ModelKind::Clm,
            d_model: 704,
            n_transformer_layers: 2,
            ff_dim: 640,
            n_heads: 8,
            gru_hidden: 512,
            gru_layers: 1,
            gru_dropout: 0.1,
            dropout_frames: 0.3,
            dropout_global: 0.2,
            embedding_size: None,
            n_classes: Some(n_users),
            window_size: 600,
            frame_step: 100,
            learning_rate: 0.0004,
        }
    }

    /// Small similarity model that trains in seconds on a CPU.
    pub fn slm_tiny() -> Self {
        Self {
            d_model: 16,
            ff_dim: 32,
            n_heads: 2,
            gru_hidden: 16,
            gru_layers: 1,
            embedding_size: Some(16),
            window_size: 60,
            frame_step: 30,
            learning_rate: 0.003,
            ..Self::slm()
        }
    }

    /// Small classification model that trains in seconds on a CPU.
    pub fn clm_tiny(n_users: usize) -> Self {
        Self {
            d_model: 16,
            n_transformer_layers: 1,
            ff_dim: 32,
            n_heads: 2,
            gru_hidden: 16,
            window_size: 60,
            frame_step: 30,
            learning_rate: 0.003,
            ..Self::clm(n_users)
        }
    }

    pub fn output_size(&self) -> usize {
        match self.kind {
            ModelKind::Slm => self.gru_hidden,
            ModelKind::Clm => self.n_classes.unwrap_or(0),
        }
    }

    pub fn encoding(&self) -> Result<EncodingConfig> {
        EncodingConfig::new(self.window_size, self.frame_step)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ff_dim == 0 || self.gru_hidden == 0 || self.gru_layers == 0 {
            return bad("ff_dim, gru_hidden and gru_layers must be positive".into());
        }
        for (name, p) in [
            ("gru_dropout", self.gru_dropout),
            ("dropout_frames", self.dropout_frames),
            ("dropout_global", self.dropout_global),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.window_size == 0 || self.frame_step == 0 {
            return bad("window_size and frame_step must be positive".into());
        }
        if self.window_size > MAX_POSITIONS {
            return Err(Error::WindowTooLong {
                len: self.window_size,
                max: MAX_POSITIONS,
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        match self.kind {
            ModelKind::Slm => match self.embedding_size {
                Some(e) if e == self.gru_hidden => {}
                other => {
                    return bad(format!(
                        "embedding_size {other:?} must equal gru_hidden {}",
                        self.gru_hidden
                    ))
                }
            },
            ModelKind::Clm => match self.n_classes {
                Some(n) if n >= 2 => {}
                other => return bad(format!("n_classes {other:?} must be at least 2")),
            },
        }
        Ok(())
    }
}
