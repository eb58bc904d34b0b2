//! Trainable parts of the fusion model: per-modality evidence heads, the
//! pairwise objectness network, their losses and optimizers.

mod checkpoint;
mod head;
mod linear;
mod loss;
mod optim;
mod score;
pub mod special;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use head::{softplus, EvidenceHead};
pub use linear::Linear;
pub use loss::{
    bce_with_logit, score_backward, ssl_grad, ssl_loss, total_loss, total_loss_grad, PairSample,
};
pub use optim::{sgd_step, AdamConfig, AdamState, DEFAULT_LR};
pub use score::{
    sigmoid, ObjsFeature, ScoreCache, ScoreNet, FEATURE_DIM, HIDDEN1, HIDDEN2, NO_MATCH_OBJECTNESS,
};

use crate::evidence::EvidenceError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default scale of the evidence heads' initial pass-through.
pub const DEFAULT_KAPPA: f64 = 25.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("non-finite objectness feature {0:?}")]
    InvalidFeature(ObjsFeature),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}

/// Every trainable parameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub head3d: EvidenceHead,
    pub head2d: EvidenceHead,
    pub score: ScoreNet,
}

impl ModelParams {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            head3d: EvidenceHead::zeros(num_classes),
            head2d: EvidenceHead::zeros(num_classes),
            score: ScoreNet::zeros(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_classes())
    }

    pub fn num_classes(&self) -> usize {
        self.head3d.num_classes()
    }

    /// Evidence-head parameters, optimized together.
    pub fn heads_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.head3d.linear.extend_flat(&mut out);
        self.head2d.linear.extend_flat(&mut out);
        out
    }

    pub fn assign_heads_flat(&mut self, flat: &[f64]) {
        let n = self.head3d.linear.assign_flat(flat);
        self.head2d.linear.assign_flat(&flat[n..]);
    }

    /// All parameters: heads first, then the score network.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.heads_flat();
        out.extend(self.score.flatten());
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let n = self.head3d.linear.num_params() + self.head2d.linear.num_params();
        self.assign_heads_flat(&flat[..n]);
        self.score.assign_flat(&flat[n..]);
    }
}

/// Deterministic initialization: fan-in uniform score network, scaled-identity evidence heads.
pub fn init_params(seed: u64, num_classes: usize, kappa: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams {
        head3d: EvidenceHead::scaled_identity(num_classes, kappa),
        head2d: EvidenceHead::scaled_identity(num_classes, kappa),
        score: ScoreNet::random(&mut rng),
    }
}
