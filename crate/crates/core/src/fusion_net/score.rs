//! The pairwise objectness network: a 1x1 convolution stack over the `1 x k x 5`
//! objectness tensor, i.e. one shared MLP applied to each pair independently.

use super::linear::Linear;
use super::NetError;
use rand::Rng;

pub const FEATURE_DIM: usize = 5;
pub const HIDDEN1: usize = 18;
pub const HIDDEN2: usize = 36;

/// Objectness sentinel for 3D candidates without an intersecting 2D candidate.
pub const NO_MATCH_OBJECTNESS: f64 = -10.0;

/// Per-pair input channels: IoU, 3D objectness, 2D objectness, distance, fused uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjsFeature {
    pub iou: f64,
    pub objs3d: f64,
    pub objs2d: f64,
    pub dis: f64,
    pub uncertainty: f64,
}

impl ObjsFeature {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.iou,
            self.objs3d,
            self.objs2d,
            self.dis,
            self.uncertainty,
        ]
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NetError::InvalidFeature(*self))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    pub layer1: Linear,
    pub layer2: Linear,
    pub layer3: Linear,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    pub input: [f64; FEATURE_DIM],
    pub pre1: Vec<f64>,
    pub act1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub act2: Vec<f64>,
    pub logit: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

impl ScoreNet {
    pub fn zeros() -> Self {
        Self {
            layer1: Linear::zeros(FEATURE_DIM, HIDDEN1),
            layer2: Linear::zeros(HIDDEN1, HIDDEN2),
            layer3: Linear::zeros(HIDDEN2, 1),
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            layer1: Linear::uniform(FEATURE_DIM, HIDDEN1, rng),
            layer2: Linear::uniform(HIDDEN1, HIDDEN2, rng),
            layer3: Linear::uniform(HIDDEN2, 1, rng),
        }
    }

    pub fn forward_cached(&self, input: [f64; FEATURE_DIM]) -> ScoreCache {
        let pre1 = self.layer1.forward(&input);
        let act1 = relu(&pre1);
        let pre2 = self.layer2.forward(&act1);
        let act2 = relu(&pre2);
        let logit = self.layer3.forward(&act2)[0];
        ScoreCache {
            input,
            pre1,
            act1,
            pre2,
            act2,
            logit,
        }
    }

    /// Fused objectness of one pair, in `(0, 1)`.
    pub fn score(&self, feature: &ObjsFeature) -> Result<f64, NetError> {
        feature.validate()?;
        Ok(sigmoid(self.forward_cached(feature.to_array()).logit))
    }

    /// Backpropagates a gradient on the logit; returns the gradient on the input features.
    pub fn backward(
        &self,
        cache: &ScoreCache,
        grad_logit: f64,
        grad: &mut ScoreNet,
    ) -> [f64; FEATURE_DIM] {
        let g_act2 = self
            .layer3
            .backward(&cache.act2, &[grad_logit], &mut grad.layer3);
        let g_pre2: Vec<f64> = g_act2
            .iter()
            .zip(&cache.pre2)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect();
        let g_act1 = self.layer2.backward(&cache.act1, &g_pre2, &mut grad.layer2);
        let g_pre1: Vec<f64> = g_act1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect();
        let g_in = self
            .layer1
            .backward(&cache.input, &g_pre1, &mut grad.layer1);
        [g_in[0], g_in[1], g_in[2], g_in[3], g_in[4]]
    }

    pub(crate) fn layers(&self) -> [(&'static str, &Linear); 3] {
        [
            ("score.layer1", &self.layer1),
            ("score.layer2", &self.layer2),
            ("score.layer3", &self.layer3),
        ]
    }

    pub(crate) fn layers_mut(&mut self) -> [(&'static str, &mut Linear); 3] {
        [
            ("score.layer1", &mut self.layer1),
            ("score.layer2", &mut self.layer2),
            ("score.layer3", &mut self.layer3),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, l) in self.layers() {
            l.extend_flat(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, l) in self.layers_mut() {
            offset += l.assign_flat(&flat[offset..]);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.num_params()).sum()
    }
}
