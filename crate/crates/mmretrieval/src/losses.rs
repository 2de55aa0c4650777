//! The two training objectives.
//!
//! Masked-patch matching (`mpm_r_loss`): each masked position's original
//! embedding must pick out its own slot's prediction from the full `N x L`
//! grid of predictions, under a trainable temperature.
//!
//! Query-product matching (`qpm_loss`): a query embedding must pick out its
//! clicked product against weighted negative sets, where every similarity is
//! corrected by subtracting the log sampling probability of the candidate so
//! popular products are not over-selected. Negatives never receive
//! gradients.
//!
//! All softmaxes run through max-shifted log-sum-exp.

use crate::error::{Error, Result};
use crate::math::{self, Grid3};

/// Default weight for memory-bank negatives.
pub const W1_MBNS: f64 = 0.25;
/// Default weight for cross-device negatives.
pub const W2_CDNS: f64 = 1.0;

const TAU_MIN: f64 = 0.01;
const TAU_MAX: f64 = 10.0;

/// Trainable temperature stored as a log-parameter so it stays positive;
/// clamped to `[0.01, 10]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    log_tau: f64,
}

impl Temperature {
    pub fn new(tau: f64) -> Result<Temperature> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature {
            log_tau: tau.clamp(TAU_MIN, TAU_MAX).ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    /// Set the log-parameter, clamping back into the allowed range.
    pub fn set_log_tau(&mut self, log_tau: f64) {
        self.log_tau = log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature { log_tau: 0.0 }
    }
}

/// One negative pool: embeddings with their sampling probabilities.
#[derive(Debug, Clone, Default)]
pub struct NegBlock {
    pub embs: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl NegBlock {
    pub fn len(&self) -> usize {
        self.embs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embs.is_empty()
    }

    pub fn push(&mut self, emb: Vec<f64>, prob: f64) {
        self.embs.push(emb);
        self.probs.push(prob);
    }
}

/// Memory-bank and cross-device negatives with their softmax weights.
#[derive(Debug, Clone)]
pub struct NegativeSets {
    pub mbns: NegBlock,
    pub cdns: NegBlock,
    pub w1: f64,
    pub w2: f64,
}

impl NegativeSets {
    pub fn empty() -> NegativeSets {
        NegativeSets {
            mbns: NegBlock::default(),
            cdns: NegBlock::default(),
            w1: W1_MBNS,
            w2: W2_CDNS,
        }
    }

    pub fn total(&self) -> usize {
        self.mbns.len() + self.cdns.len()
    }
}

/// `u . v - ln p`: inner product corrected by the candidate's sampling
/// probability.
pub fn corrected_similarity(u: &[f64], v: &[f64], sample_prob: f64) -> Result<f64> {
    if !(sample_prob > 0.0) {
        return Err(Error::Domain(format!(
            "sample probability must be positive, got {sample_prob}"
        )));
    }
    Ok(math::dot(u, v) - sample_prob.ln())
}

/// Output of [`mpm_r_loss`].
#[derive(Debug, Clone)]
pub struct MpmResult {
    pub loss: f64,
    /// Gradient with respect to the full prediction grid.
    pub grad_predictions: Grid3,
    /// Gradient with respect to each target, in target order.
    pub grad_targets: Vec<Vec<f64>>,
    /// Gradient with respect to the temperature's log-parameter.
    pub d_log_tau: f64,
}

/// Contrastive masked-patch loss.
///
/// For masked position `k` at grid slot `c_k` with original embedding `t_k`,
/// the per-position score of grid slot `(i,j)` is `t_k . pred[i][j] / tau`,
/// and the loss is the mean cross-entropy of picking `c_k` from the whole
/// grid: `-(1/n_mask) sum_k log softmax_k(c_k)`. The denominator includes
/// the aligned slot itself; `exclude_self` drops it for comparison runs.
pub fn mpm_r_loss(
    targets: &[Vec<f64>],
    mask_positions: &[(usize, usize)],
    predictions: &Grid3,
    tau: &Temperature,
    exclude_self: bool,
) -> Result<MpmResult> {
    let n_mask = targets.len();
    if n_mask == 0 || mask_positions.len() != n_mask {
        return Err(Error::Domain(
            "mpm loss needs at least one masked position with matching targets".into(),
        ));
    }
    let (n, l, d) = (predictions.n, predictions.l, predictions.d);
    if exclude_self && n * l < 2 {
        return Err(Error::Domain(
            "cannot exclude the aligned slot from a single-slot grid".into(),
        ));
    }
    if !predictions.is_finite()
        || targets.iter().any(|t| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("mpm loss inputs"));
    }
    let t = tau.tau();
    let inv_nm = 1.0 / n_mask as f64;

    let mut loss = 0.0;
    let mut d_log_tau = 0.0;
    let mut grad_predictions = Grid3::zeros(n, l, d);
    let mut grad_targets = vec![vec![0.0; d]; n_mask];

    let mut scores = vec![0.0; n * l];
    for (k, (target, &(ci, cj))) in targets.iter().zip(mask_positions).enumerate() {
        if target.len() != d {
            return Err(Error::Shape(format!(
                "target {k} has dimension {}, grid has {d}",
                target.len()
            )));
        }
        if ci >= n || cj >= l {
            return Err(Error::Shape(format!("mask position ({ci},{cj}) outside grid")));
        }
        let own = ci * l + cj;
        for i in 0..n {
            for j in 0..l {
                scores[i * l + j] = math::dot(target, predictions.at(i, j)) / t;
            }
        }
        let mut max = f64::NEG_INFINITY;
        for (idx, &s) in scores.iter().enumerate() {
            if exclude_self && idx == own {
                continue;
            }
            if s > max {
                max = s;
            }
        }
        max = max.max(scores[own]);
        let mut z = 0.0;
        for (idx, &s) in scores.iter().enumerate() {
            if exclude_self && idx == own {
                continue;
            }
            z += (s - max).exp();
        }
        let lse = max + z.ln();
        loss -= inv_nm * (scores[own] - lse);

        // softmax over the (possibly self-excluded) denominator
        let mut score_mean = 0.0;
        let mut target_pull = vec![0.0; d];
        for i in 0..n {
            for j in 0..l {
                let idx = i * l + j;
                if exclude_self && idx == own {
                    continue;
                }
                let sigma = (scores[idx] - lse).exp();
                score_mean += sigma * scores[idx];
                // dL/dpred[i][j] += -(1/nm) (1{own} - sigma) t_k / tau
                let coeff = -inv_nm / t
                    * (if idx == own { 1.0 } else { 0.0 } - sigma);
                math::axpy(coeff, target, grad_predictions.at_mut(i, j));
                math::axpy(sigma, predictions.at(i, j), &mut target_pull);
            }
        }
        if exclude_self {
            // the numerator slot still contributes its own gradient terms
            let coeff = -inv_nm / t;
            math::axpy(coeff, target, grad_predictions.at_mut(ci, cj));
        }
        // dL/dt_k = -(1/(nm tau)) (pred[c_k] - sum sigma pred)
        let gt = &mut grad_targets[k];
        math::axpy(-inv_nm / t, predictions.at(ci, cj), gt);
        math::axpy(inv_nm / t, &target_pull, gt);
        // dL/dlog tau = (1/nm) (s_own - sum sigma s)
        d_log_tau += inv_nm * (scores[own] - score_mean);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("mpm loss"));
    }
    Ok(MpmResult {
        loss,
        grad_predictions,
        grad_targets,
        d_log_tau,
    })
}

/// Output of [`qpm_loss`].
#[derive(Debug, Clone)]
pub struct QpmResult {
    pub loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_v_pos: Vec<f64>,
}

/// Corrected-softmax query-product matching loss.
///
/// `loss = -log[ e^{s+} / (e^{s+} + w1 sum e^{s_mbns} + w2 sum e^{s_cdns}) ]`
/// with `s = u . v - ln p`. Gradients flow to `u` and `v_pos` only; the
/// negative embeddings are constants. With no negatives at all the loss is
/// exactly zero and a warning is logged.
pub fn qpm_loss(
    u: &[f64],
    v_pos: &[f64],
    p_pos: f64,
    negatives: &NegativeSets,
) -> Result<QpmResult> {
    let d = u.len();
    if v_pos.len() != d {
        return Err(Error::Shape(format!(
            "query dimension {d} vs positive dimension {}",
            v_pos.len()
        )));
    }
    if negatives.w1 < 0.0 || negatives.w2 < 0.0 {
        return Err(Error::Domain("negative-set weights must be non-negative".into()));
    }
    if u.iter().chain(v_pos).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("qpm loss inputs"));
    }
    if negatives.total() == 0 {
        log::warn!("qpm_loss called with no negatives; loss is 0 by definition");
        return Ok(QpmResult {
            loss: 0.0,
            grad_u: vec![0.0; d],
            grad_v_pos: vec![0.0; d],
        });
    }

    let s_pos = corrected_similarity(u, v_pos, p_pos)?;
    let blocks = [
        (&negatives.mbns, negatives.w1),
        (&negatives.cdns, negatives.w2),
    ];
    let mut s_neg: Vec<(f64, f64)> = Vec::with_capacity(negatives.total());
    let mut max = s_pos;
    for (block, w) in blocks {
        if block.probs.len() != block.embs.len() {
            return Err(Error::Shape("negative block has mismatched lengths".into()));
        }
        for (emb, &prob) in block.embs.iter().zip(&block.probs) {
            if emb.len() != d {
                return Err(Error::Shape(format!(
                    "negative dimension {} vs query dimension {d}",
                    emb.len()
                )));
            }
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("qpm negative embedding"));
            }
            let s = corrected_similarity(u, emb, prob)?;
            if w > 0.0 && s > max {
                max = s;
            }
            s_neg.push((s, w));
        }
    }

    let mut z = (s_pos - max).exp();
    for &(s, w) in &s_neg {
        z += w * (s - max).exp();
    }
    let log_z = max + z.ln();
    let loss = log_z - s_pos;
    if !loss.is_finite() {
        return Err(Error::NonFinite("qpm loss"));
    }

    let sigma_pos = (s_pos - log_z).exp();
    // dL/du = (sigma_pos - 1) v_pos + sum_i sigma_i v_i
    let mut grad_u = vec![0.0; d];
    math::axpy(sigma_pos - 1.0, v_pos, &mut grad_u);
    let mut idx = 0;
    for (block, w) in [
        (&negatives.mbns, negatives.w1),
        (&negatives.cdns, negatives.w2),
    ] {
        for emb in &block.embs {
            let (s, _) = s_neg[idx];
            idx += 1;
            let sigma = w * (s - log_z).exp();
            math::axpy(sigma, emb, &mut grad_u);
        }
    }
    let mut grad_v_pos = vec![0.0; d];
    math::axpy(sigma_pos - 1.0, u, &mut grad_v_pos);

    Ok(QpmResult {
        loss,
        grad_u,
        grad_v_pos,
    })
}
