use super::linear::Linear;
use super::NetError;

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn softplus_grad(z: f64) -> f64 {
    super::score::sigmoid(z)
}

/// Maps a detector's per-class scores to non-negative evidence: `softplus(W s + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceHead {
    pub linear: Linear,
}

impl EvidenceHead {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            linear: Linear::zeros(num_classes, num_classes),
        }
    }

    /// `W = kappa * I`, `b = 0`: evidence starts as a scaled pass-through of the scores.
    pub fn scaled_identity(num_classes: usize, kappa: f64) -> Self {
        let mut linear = Linear::zeros(num_classes, num_classes);
        for h in 0..num_classes {
            linear.weight[h * num_classes + h] = kappa;
        }
        Self { linear }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.outputs()
    }

    fn check(&self, scores: &[f64]) -> Result<(), NetError> {
        if scores.len() != self.num_classes() {
            return Err(NetError::Dimension {
                expected: self.num_classes(),
                actual: scores.len(),
            });
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(NetError::InvalidParameter(format!(
                "non-finite class score {bad}"
            )));
        }
        Ok(())
    }

    /// Returns the pre-activations and the evidence.
    pub fn forward(&self, scores: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        self.check(scores)?;
        let pre = self.linear.forward(scores);
        let evidence = pre.iter().map(|&z| softplus(z)).collect();
        Ok((pre, evidence))
    }

    pub fn evidence(&self, scores: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward(scores).map(|(_, e)| e)
    }

    pub fn backward(
        &self,
        scores: &[f64],
        pre: &[f64],
        grad_evidence: &[f64],
        grad: &mut EvidenceHead,
    ) {
        let g_pre: Vec<f64> = grad_evidence
            .iter()
            .zip(pre)
            .map(|(g, &z)| g * softplus_grad(z))
            .collect();
        self.linear.backward(scores, &g_pre, &mut grad.linear);
    }
}
