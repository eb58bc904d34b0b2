//! Subjective-logic algebra over Dirichlet opinions.
//!
//! Per-class evidence `e` parameterizes a Dirichlet with `alpha = e + 1`.
//! The strength `S = sum(alpha)` splits unit mass into per-class beliefs
//! `b_h = e_h / S` and a residual uncertainty `u = H / S`. Two opinions on
//! the same frame of discernment are merged with Dempster's rule.

use thiserror::Error;

/// Conflict at or above `1 - TOTAL_CONFLICT_EPS` is treated as total conflict.
pub const TOTAL_CONFLICT_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("evidence must be finite and non-negative, got {value} at class {index}")]
    InvalidEvidence { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected} classes, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("total conflict between opinions (C = {0})")]
    TotalConflict(f64),
    #[error("opinion with zero uncertainty has unbounded evidence")]
    Degenerate,
}

/// Non-negative per-class support.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceVector {
    values: Vec<f64>,
}

impl EvidenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EvidenceError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(EvidenceError::InvalidEvidence { index, value });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }
}

/// A multinomial opinion: belief masses, uncertainty and the matching Dirichlet.
#[derive(Debug, Clone, PartialEq)]
pub struct Opinion {
    belief: Vec<f64>,
    uncertainty: f64,
    alpha: Vec<f64>,
    strength: f64,
}

impl Opinion {
    /// The zero-evidence opinion, identity of Dempster combination.
    pub fn vacuous(num_classes: usize) -> Self {
        let h = num_classes as f64;
        Self {
            belief: vec![0.0; num_classes],
            uncertainty: 1.0,
            alpha: vec![1.0; num_classes],
            strength: h,
        }
    }

    /// Builds an opinion from belief masses and uncertainty, deriving the Dirichlet.
    ///
    /// The caller guarantees `sum(belief) + uncertainty == 1` and `uncertainty > 0`.
    pub(crate) fn from_masses(belief: Vec<f64>, uncertainty: f64) -> Self {
        let h = belief.len() as f64;
        let strength = h / uncertainty;
        let alpha = belief.iter().map(|b| b * strength + 1.0).collect();
        Self {
            belief,
            uncertainty,
            alpha,
            strength,
        }
    }

    pub fn belief(&self) -> &[f64] {
        &self.belief
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn num_classes(&self) -> usize {
        self.belief.len()
    }

    /// Index of the largest belief mass; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (h, &b) in self.belief.iter().enumerate() {
            if b > self.belief[best] {
                best = h;
            }
        }
        best
    }
}

pub fn opinion_from_evidence(
    evidence: &EvidenceVector,
    num_classes: usize,
) -> Result<Opinion, EvidenceError> {
    if num_classes < 2 {
        return Err(EvidenceError::TooFewClasses(num_classes));
    }
    if evidence.len() != num_classes {
        return Err(EvidenceError::Dimension {
            expected: num_classes,
            actual: evidence.len(),
        });
    }
    let alpha: Vec<f64> = evidence.values().iter().map(|e| e + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    let belief = evidence.values().iter().map(|e| e / strength).collect();
    Ok(Opinion {
        belief,
        uncertainty: num_classes as f64 / strength,
        alpha,
        strength,
    })
}

/// Convenience wrapper validating a raw slice first.
pub fn opinion_from_slice(evidence: &[f64]) -> Result<Opinion, EvidenceError> {
    let ev = EvidenceVector::new(evidence.to_vec())?;
    opinion_from_evidence(&ev, evidence.len())
}

fn check_dims(a: &Opinion, b: &Opinion) -> Result<(), EvidenceError> {
    if a.num_classes() != b.num_classes() {
        return Err(EvidenceError::Dimension {
            expected: a.num_classes(),
            actual: b.num_classes(),
        });
    }
    Ok(())
}

/// Belief mass the two opinions place on differing classes: `sum_{i != j} a_i * b_j`.
pub fn conflict(a: &Opinion, b: &Opinion) -> Result<f64, EvidenceError> {
    check_dims(a, b)?;
    let mut c = 0.0;
    for (i, &ai) in a.belief.iter().enumerate() {
        for (j, &bj) in b.belief.iter().enumerate() {
            if i != j {
                c += ai * bj;
            }
        }
    }
    Ok(c)
}

/// Dempster's rule for two opinions.
pub fn combine_opinions(a: &Opinion, b: &Opinion) -> Result<Opinion, EvidenceError> {
    let c = conflict(a, b)?;
    if c >= 1.0 - TOTAL_CONFLICT_EPS {
        return Err(EvidenceError::TotalConflict(c));
    }
    let norm = 1.0 - c;
    let belief = a
        .belief
        .iter()
        .zip(&b.belief)
        .map(|(&ba, &bb)| (ba * bb + (ba * b.uncertainty + bb * a.uncertainty)) / norm)
        .collect();
    let uncertainty = a.uncertainty * b.uncertainty / norm;
    Ok(Opinion::from_masses(belief, uncertainty))
}

/// Inverse of [`opinion_from_evidence`]: `e_h = b_h * H / u`.
pub fn evidence_from_opinion(o: &Opinion) -> Result<EvidenceVector, EvidenceError> {
    if o.uncertainty <= 0.0 {
        return Err(EvidenceError::Degenerate);
    }
    let scale = o.num_classes() as f64 / o.uncertainty;
    EvidenceVector::new(o.belief.iter().map(|b| b * scale).collect())
}

/// Vector-Jacobian product of [`opinion_from_evidence`].
///
/// Given upstream gradients on the belief masses and uncertainty, returns the
/// gradient with respect to the evidence.
pub fn opinion_backward(evidence: &[f64], grad_belief: &[f64], grad_uncertainty: f64) -> Vec<f64> {
    let h = evidence.len() as f64;
    let strength: f64 = evidence.iter().sum::<f64>() + h;
    let weighted: f64 = grad_belief.iter().zip(evidence).map(|(g, e)| g * e).sum();
    let shared = (weighted + grad_uncertainty * h) / (strength * strength);
    grad_belief.iter().map(|g| g / strength - shared).collect()
}

/// Gradients of a Dempster combination with respect to both inputs' masses.
#[derive(Debug, Clone, PartialEq)]
pub struct CombineGrad {
    pub belief_a: Vec<f64>,
    pub uncertainty_a: f64,
    pub belief_b: Vec<f64>,
    pub uncertainty_b: f64,
}

/// Vector-Jacobian product of [`combine_opinions`] on the (belief, uncertainty) masses.
pub fn combine_backward(
    a: &Opinion,
    b: &Opinion,
    fused: &Opinion,
    grad_belief: &[f64],
    grad_uncertainty: f64,
) -> Result<CombineGrad, EvidenceError> {
    let c = conflict(a, b)?;
    let norm = 1.0 - c;
    let sum_a: f64 = a.belief.iter().sum();
    let sum_b: f64 = b.belief.iter().sum();
    // d loss / d norm, with fused = numerator / norm
    let mut grad_norm = -grad_uncertainty * fused.uncertainty / norm;
    for (g, bf) in grad_belief.iter().zip(&fused.belief) {
        grad_norm -= g * bf / norm;
    }
    let n = a.num_classes();
    let mut out = CombineGrad {
        belief_a: vec![0.0; n],
        uncertainty_a: grad_uncertainty * b.uncertainty / norm,
        belief_b: vec![0.0; n],
        uncertainty_b: grad_uncertainty * a.uncertainty / norm,
    };
    #[allow(clippy::needless_range_loop)]
    for h in 0..n {
        let g = grad_belief[h] / norm;
        out.belief_a[h] = g * (b.belief[h] + b.uncertainty) - grad_norm * (sum_b - b.belief[h]);
        out.belief_b[h] = g * (a.belief[h] + a.uncertainty) - grad_norm * (sum_a - a.belief[h]);
        out.uncertainty_a += g * b.belief[h];
        out.uncertainty_b += g * a.belief[h];
    }
    Ok(out)
}
