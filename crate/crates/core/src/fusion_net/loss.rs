//! Objectness and evidential classification losses with their gradients.

use super::score::{sigmoid, ObjsFeature, ScoreCache, ScoreNet};
use super::special::{digamma, ln_gamma, trigamma};
use super::{ModelParams, NetError};
use crate::evidence::{
    combine_backward, combine_opinions, opinion_backward, opinion_from_slice, Opinion,
};

fn check_alpha(alpha: &[f64], target: usize) -> Result<(), NetError> {
    if target >= alpha.len() {
        return Err(NetError::InvalidParameter(format!(
            "target class {target} out of range for {} classes",
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a >= 1.0)) {
        return Err(NetError::InvalidParameter(format!(
            "Dirichlet parameter {a} < 1"
        )));
    }
    Ok(())
}

/// Sample-specific evidential loss for a one-hot target `target`.
///
/// Adjusted cross-entropy `psi(S) - psi(alpha_y)` plus `lambda` times the KL
/// divergence of the target-removed Dirichlet from the uniform one.
pub fn ssl_loss(alpha: &[f64], target: usize, lambda: f64) -> Result<f64, NetError> {
    check_alpha(alpha, target)?;
    let strength: f64 = alpha.iter().sum();
    let ce = digamma(strength) - digamma(alpha[target]);
    if lambda == 0.0 {
        return Ok(ce);
    }
    let h = alpha.len() as f64;
    let adjusted: Vec<f64> = alpha
        .iter()
        .enumerate()
        .map(|(k, &a)| if k == target { 1.0 } else { a })
        .collect();
    let s_adj: f64 = adjusted.iter().sum();
    let psi_s = digamma(s_adj);
    let mut kl = ln_gamma(s_adj) - ln_gamma(h);
    for &a in &adjusted {
        kl += -ln_gamma(a) + (a - 1.0) * (digamma(a) - psi_s);
    }
    // KL is non-negative; clamp rounding noise
    Ok(ce + lambda * kl.max(0.0))
}

/// Gradient of [`ssl_loss`] with respect to `alpha`.
pub fn ssl_grad(alpha: &[f64], target: usize, lambda: f64) -> Result<Vec<f64>, NetError> {
    check_alpha(alpha, target)?;
    let strength: f64 = alpha.iter().sum();
    let tri_s = trigamma(strength);
    let mut grad: Vec<f64> = vec![tri_s; alpha.len()];
    grad[target] -= trigamma(alpha[target]);
    if lambda != 0.0 {
        let h = alpha.len() as f64;
        let s_adj: f64 = alpha
            .iter()
            .enumerate()
            .map(|(k, &a)| if k == target { 1.0 } else { a })
            .sum();
        let tri_adj = trigamma(s_adj);
        for (k, &a) in alpha.iter().enumerate() {
            if k != target {
                grad[k] += lambda * ((a - 1.0) * trigamma(a) - tri_adj * (s_adj - h));
            }
        }
    }
    Ok(grad)
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed from the logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Per-entry weights realizing "mean over obj mask + mean over no-obj mask".
fn mask_weights(targets: &[bool]) -> (f64, f64) {
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    let w = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    (w(pos), w(neg))
}

/// Objectness loss over a batch of pair features and its gradient on the score network.
///
/// `targets[k]` places entry `k` in the object mask (`true`) or the no-object mask.
pub fn score_backward(
    net: &ScoreNet,
    features: &[ObjsFeature],
    targets: &[bool],
) -> Result<(f64, ScoreNet), NetError> {
    if features.len() != targets.len() {
        return Err(NetError::Dimension {
            expected: features.len(),
            actual: targets.len(),
        });
    }
    let (w_pos, w_neg) = mask_weights(targets);
    let mut grad = ScoreNet::zeros();
    let mut loss = 0.0;
    for (f, &t) in features.iter().zip(targets) {
        f.validate()?;
        let cache = net.forward_cached(f.to_array());
        let (w, y) = if t { (w_pos, 1.0) } else { (w_neg, 0.0) };
        loss += w * bce_with_logit(cache.logit, y);
        net.backward(&cache, w * (sigmoid(cache.logit) - y), &mut grad);
    }
    Ok((loss, grad))
}

/// One hypothetical pair prepared for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub scores3d: Vec<f64>,
    /// `None` marks a fallback pair without a 2D partner.
    pub scores2d: Option<Vec<f64>>,
    pub iou: f64,
    pub objs3d: f64,
    pub objs2d: f64,
    pub dis: f64,
    /// Ground-truth class of the pair's 3D candidate, if it covers an object.
    pub class_target: Option<usize>,
    pub obj_target: bool,
}

struct HeadPass {
    pre: Vec<f64>,
    evidence: Vec<f64>,
    opinion: Opinion,
}

struct SampleForward {
    pass3d: HeadPass,
    pass2d: Option<HeadPass>,
    fused: Opinion,
    cache: ScoreCache,
}

fn head_pass(head: &super::EvidenceHead, scores: &[f64]) -> Result<HeadPass, NetError> {
    let (pre, evidence) = head.forward(scores)?;
    let opinion = opinion_from_slice(&evidence)?;
    Ok(HeadPass {
        pre,
        evidence,
        opinion,
    })
}

fn forward_sample(params: &ModelParams, s: &PairSample) -> Result<SampleForward, NetError> {
    let pass3d = head_pass(&params.head3d, &s.scores3d)?;
    let pass2d = s
        .scores2d
        .as_ref()
        .map(|scores| head_pass(&params.head2d, scores))
        .transpose()?;
    let fused = match &pass2d {
        Some(p2) => combine_opinions(&pass3d.opinion, &p2.opinion)?,
        None => pass3d.opinion.clone(),
    };
    let feature = ObjsFeature {
        iou: s.iou,
        objs3d: s.objs3d,
        objs2d: s.objs2d,
        dis: s.dis,
        uncertainty: fused.uncertainty(),
    };
    feature.validate()?;
    let cache = params.score.forward_cached(feature.to_array());
    Ok(SampleForward {
        pass3d,
        pass2d,
        fused,
        cache,
    })
}

fn sample_loss(
    fw: &SampleForward,
    s: &PairSample,
    lambda: f64,
    w_obj: f64,
) -> Result<f64, NetError> {
    let mut loss = 0.0;
    if let Some(y) = s.class_target {
        loss += ssl_loss(fw.pass3d.opinion.alpha(), y, lambda)?;
        if let Some(p2) = &fw.pass2d {
            loss += ssl_loss(fw.fused.alpha(), y, lambda)?;
            loss += ssl_loss(p2.opinion.alpha(), y, lambda)?;
        }
    }
    let t = if s.obj_target { 1.0 } else { 0.0 };
    Ok(loss + w_obj * bce_with_logit(fw.cache.logit, t))
}

/// Frame loss: evidential terms over matched and fallback pairs plus the objectness loss.
pub fn total_loss(
    params: &ModelParams,
    samples: &[PairSample],
    lambda: f64,
) -> Result<f64, NetError> {
    let targets: Vec<bool> = samples.iter().map(|s| s.obj_target).collect();
    let (w_pos, w_neg) = mask_weights(&targets);
    let mut loss = 0.0;
    for s in samples {
        let fw = forward_sample(params, s)?;
        loss += sample_loss(&fw, s, lambda, if s.obj_target { w_pos } else { w_neg })?;
    }
    Ok(loss)
}

/// [`total_loss`] together with its gradient on every model parameter.
pub fn total_loss_grad(
    params: &ModelParams,
    samples: &[PairSample],
    lambda: f64,
) -> Result<(f64, ModelParams), NetError> {
    let targets: Vec<bool> = samples.iter().map(|s| s.obj_target).collect();
    let (w_pos, w_neg) = mask_weights(&targets);
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let h = params.num_classes();
    for s in samples {
        let fw = forward_sample(params, s)?;
        let w = if s.obj_target { w_pos } else { w_neg };
        loss += sample_loss(&fw, s, lambda, w)?;

        let t = if s.obj_target { 1.0 } else { 0.0 };
        let g_feature = params.score.backward(
            &fw.cache,
            w * (sigmoid(fw.cache.logit) - t),
            &mut grad.score,
        );
        let mut g_fused_u = g_feature[4];
        let mut g_fused_b = vec![0.0; h];
        let mut g_e3 = vec![0.0; h];
        let mut g_e2 = vec![0.0; h];

        if let Some(y) = s.class_target {
            // alpha = e + 1 for the per-modality opinions
            for (g, d) in g_e3
                .iter_mut()
                .zip(ssl_grad(fw.pass3d.opinion.alpha(), y, lambda)?)
            {
                *g += d;
            }
            if let Some(p2) = &fw.pass2d {
                for (g, d) in g_e2
                    .iter_mut()
                    .zip(ssl_grad(p2.opinion.alpha(), y, lambda)?)
                {
                    *g += d;
                }
                // fused alpha_h = H * b_h / u + 1
                let g_alpha = ssl_grad(fw.fused.alpha(), y, lambda)?;
                let u = fw.fused.uncertainty();
                let scale = h as f64 / u;
                for (k, ga) in g_alpha.iter().enumerate() {
                    g_fused_b[k] += ga * scale;
                    g_fused_u -= ga * scale * fw.fused.belief()[k] / u;
                }
            }
        }

        match &fw.pass2d {
            Some(p2) => {
                let cg = combine_backward(
                    &fw.pass3d.opinion,
                    &p2.opinion,
                    &fw.fused,
                    &g_fused_b,
                    g_fused_u,
                )?;
                let d3 = opinion_backward(&fw.pass3d.evidence, &cg.belief_a, cg.uncertainty_a);
                let d2 = opinion_backward(&p2.evidence, &cg.belief_b, cg.uncertainty_b);
                g_e3.iter_mut().zip(d3).for_each(|(g, d)| *g += d);
                g_e2.iter_mut().zip(d2).for_each(|(g, d)| *g += d);
                let scores2d = s.scores2d.as_deref().unwrap_or_default();
                params
                    .head2d
                    .backward(scores2d, &p2.pre, &g_e2, &mut grad.head2d);
            }
            None => {
                let d3 = opinion_backward(&fw.pass3d.evidence, &vec![0.0; h], g_fused_u);
                g_e3.iter_mut().zip(d3).for_each(|(g, d)| *g += d);
            }
        }
        params
            .head3d
            .backward(&s.scores3d, &fw.pass3d.pre, &g_e3, &mut grad.head3d);
    }
    Ok((loss, grad))
}
