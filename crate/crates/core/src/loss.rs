//! Training objectives with analytic gradients.
//!
//! Detection combines a penalty-reduced focal loss on the heatmaps with
//! masked L1 regression on sizes and offsets; recognition uses CTC, computed
//! by the forward–backward recursion in log-domain `f64`. Every loss value
//! is a plain `f64`; gradients come back as tensors shaped like their
//! inputs, so a plain gradient step (or a finite-difference probe) can be
//! run without any autodiff machinery.

use crate::error::{Error, Result};
use crate::heatmap::{DetectionMaps, DetectionTargets};
use crate::recognize::RecognitionOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights tying the objectives together: the recognition term enters the
/// total with factor `lambda`, the sub-cell offset regressions enter the
/// detection sum with factor `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            beta: 0.05,
        }
    }
}

/// Predictions are clamped into `[CLAMP, 1 - CLAMP]` before taking logs.
const CLAMP: f64 = 1e-6;

/// Penalty-reduced focal loss on a heatmap (any channel count):
///
/// - at cells where the target is exactly 1: `-(1-p)^2 ln p`
/// - elsewhere: `-(1-y)^4 p^2 ln(1-p)`
///
/// summed and divided by the number of target-1 cells (at least 1). Returns
/// the loss and its gradient with respect to the predictions (zero inside
/// the clamped flats).
pub fn focal_center_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let n_pos = target
        .data()
        .iter()
        .filter(|v| v.to_f64_lossless() == 1.0)
        .count()
        .max(1) as f64;
    let mut grad = Tensor::zeros(pred.dims())?;
    let mut loss = 0.0f64;
    for (i, (p_raw, y)) in pred.data().iter().zip(target.data()).enumerate() {
        let p_raw = p_raw.to_f64_lossless();
        let y = y.to_f64_lossless();
        let p = p_raw.clamp(CLAMP, 1.0 - CLAMP);
        let (l, g) = if y == 1.0 {
            let q = 1.0 - p;
            (-(q * q) * p.ln(), -(q * q) / p + 2.0 * q * p.ln())
        } else {
            let w = (1.0 - y).powi(4);
            let q = 1.0 - p;
            (-w * p * p * q.ln(), w * (p * p / q - 2.0 * p * q.ln()))
        };
        loss += l / n_pos;
        // the clamp is flat: no gradient flows outside it
        if p_raw > CLAMP && p_raw < 1.0 - CLAMP {
            grad.data_mut()[i] = T::from_f64_lossy(g / n_pos);
        }
    }
    Ok((loss, grad))
}

/// Masked L1 regression on a `C × h × w` map: the absolute errors over all
/// channels at the given `(y, x)` cells, summed and divided by the cell
/// count. No cells means no constraint: zero loss and gradient.
pub fn l1_reg_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cells: &[(usize, usize)],
) -> Result<(f64, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "regression prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let (c_len, h, w) = pred.dims3();
    let mut grad = Tensor::zeros(pred.dims())?;
    if cells.is_empty() {
        return Ok((0.0, grad));
    }
    let n = cells.len() as f64;
    let mut loss = 0.0f64;
    for &(y, x) in cells {
        if y >= h || x >= w {
            return Err(Error::InvalidArgument(format!(
                "regression cell ({y}, {x}) outside {h} × {w} map"
            )));
        }
        for c in 0..c_len {
            let e = pred.get3(c, y, x).to_f64_lossless() - target.get3(c, y, x).to_f64_lossless();
            loss += e.abs() / n;
            grad.set3(c, y, x, T::from_f64_lossy(e.signum() / n));
        }
    }
    Ok((loss, grad))
}

/// The six detection terms, unweighted, plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLossBreakdown {
    pub center_heat: f64,
    pub wh: f64,
    pub center_off: f64,
    pub corner_heat: f64,
    pub corner_rel: f64,
    pub corner_off: f64,
    /// `center_heat + wh + beta*center_off + corner_heat + corner_rel +
    /// beta*corner_off`
    pub total: f64,
}

/// Full detection objective against encoded targets. Heatmaps use the focal
/// loss; `wh`, `center_off` and `corner_rel` regress at the plate center
/// cells, `corner_off` at the corner cells. Returns the breakdown and the
/// gradient maps (offset gradients already scaled by `beta`).
pub fn detection_loss<T: Scalar>(
    pred: &DetectionMaps<T>,
    targets: &DetectionTargets<T>,
    weights: &LossWeights,
) -> Result<(DetectionLossBreakdown, DetectionMaps<T>)> {
    let pe = pred.extents()?;
    let te = targets.maps.extents()?;
    if pe != te {
        return Err(Error::ShapeMismatch(format!(
            "predicted maps {pe:?} vs target maps {te:?}"
        )));
    }
    let t = &targets.maps;
    let (l_ch, g_ch) = focal_center_loss(&pred.center_heat, &t.center_heat)?;
    let (l_wh, g_wh) = l1_reg_loss(&pred.wh, &t.wh, &targets.center_cells)?;
    let (l_co, mut g_co) = l1_reg_loss(&pred.center_off, &t.center_off, &targets.center_cells)?;
    let (l_kh, g_kh) = focal_center_loss(&pred.corner_heat, &t.corner_heat)?;
    let (l_kr, g_kr) = l1_reg_loss(&pred.corner_rel, &t.corner_rel, &targets.center_cells)?;
    let (l_ko, mut g_ko) = l1_reg_loss(&pred.corner_off, &t.corner_off, &targets.corner_cells)?;
    let beta = weights.beta;
    for v in g_co.data_mut() {
        *v = *v * T::from_f64_lossy(beta);
    }
    for v in g_ko.data_mut() {
        *v = *v * T::from_f64_lossy(beta);
    }
    let breakdown = DetectionLossBreakdown {
        center_heat: l_ch,
        wh: l_wh,
        center_off: l_co,
        corner_heat: l_kh,
        corner_rel: l_kr,
        corner_off: l_ko,
        total: l_ch + l_wh + beta * l_co + l_kh + l_kr + beta * l_ko,
    };
    let grads = DetectionMaps {
        center_heat: g_ch,
        wh: g_wh,
        center_off: g_co,
        corner_heat: g_kh,
        corner_rel: g_kr,
        corner_off: g_ko,
    };
    Ok((breakdown, grads))
}

/// CTC results for a batch: per-item negative log label probability
/// (`+inf` when the label cannot fit in the frames), the matching
/// infeasibility flags, and the gradient with respect to the logits
/// (zero rows for infeasible items).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutcome<T> {
    pub losses: Vec<f64>,
    pub infeasible: Vec<bool>,
    pub grad: Tensor<T>,
}

impl<T> CtcOutcome<T> {
    /// Mean loss over the feasible items, `None` when every item is
    /// infeasible.
    pub fn mean_feasible(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .losses
            .iter()
            .zip(&self.infeasible)
            .filter(|(_, &inf)| !inf)
            .map(|(&l, _)| l)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// States of the blank-interleaved label `⌀ l1 ⌀ l2 … ⌀`.
fn extended_label(label: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &l in label {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Fewest frames that can emit the label: its length plus one blank per
/// adjacent repeat.
fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_label(label: &[usize], blank: usize) -> Result<()> {
    for &l in label {
        if l >= blank {
            return Err(Error::InvalidArgument(format!(
                "label token {l} is not below the blank index {blank}"
            )));
        }
    }
    Ok(())
}

/// Log-probability that the frames emit exactly `label` under CTC, i.e. the
/// sum over all frame paths that collapse to it. `logp` is `frames ×
/// classes` with the blank last. Returns `-inf` when the label cannot fit.
pub fn ctc_label_log_prob(logp: &[Vec<f64>], label: &[usize]) -> Result<f64> {
    let t_len = logp.len();
    if t_len == 0 {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let k_len = logp[0].len();
    if k_len < 2 {
        return Err(Error::InvalidArgument(
            "need at least one token class plus the blank".into(),
        ));
    }
    let blank = k_len - 1;
    check_label(label, blank)?;
    if min_frames(label) > t_len {
        return Ok(f64::NEG_INFINITY);
    }
    let alpha = ctc_alpha(logp, label, blank);
    let s_len = 2 * label.len() + 1;
    let mut z = alpha[t_len - 1][s_len - 1];
    if s_len >= 2 {
        z = log_sum_exp(z, alpha[t_len - 1][s_len - 2]);
    }
    Ok(z)
}

/// Forward variables; `alpha[t][s]` includes the emission at frame `t`.
fn ctc_alpha(logp: &[Vec<f64>], label: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let ext = extended_label(label, blank);
    let s_len = ext.len();
    let t_len = logp.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = logp[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = logp[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_sum_exp(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = log_sum_exp(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + logp[t][ext[s]];
        }
    }
    alpha
}

/// Backward variables; `beta[t][s]` also includes the emission at frame `t`.
fn ctc_beta(logp: &[Vec<f64>], label: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let ext = extended_label(label, blank);
    let s_len = ext.len();
    let t_len = logp.len();
    let skip_ok = |s: usize| s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s];
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = logp[t_len - 1][ext[s_len - 1]];
    if s_len >= 2 {
        beta[t_len - 1][s_len - 2] = logp[t_len - 1][ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_sum_exp(b, beta[t + 1][s + 1]);
            }
            if skip_ok(s) {
                b = log_sum_exp(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + logp[t][ext[s]];
        }
    }
    beta
}

/// CTC loss and gradient for a batch of logit sequences (`frames × batch ×
/// classes`, blank last; probability-form input is rejected because the
/// gradient is defined with respect to pre-softmax scores). One label per
/// batch item. The gradient at each frame is `softmax(logits) - occupancy`,
/// where occupancy is the posterior probability of each class under paths
/// consistent with the label.
pub fn ctc_loss<T: Scalar>(
    output: &RecognitionOutput<T>,
    labels: &[Vec<usize>],
) -> Result<CtcOutcome<T>> {
    if output.is_probs {
        return Err(Error::InvalidArgument(
            "CTC gradients need logits, not probabilities".into(),
        ));
    }
    let (t_len, b_len, k_len) = output.extents();
    if labels.len() != b_len {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {b_len}",
            labels.len()
        )));
    }
    if k_len < 2 {
        return Err(Error::InvalidArgument(
            "need at least one token class plus the blank".into(),
        ));
    }
    let blank = k_len - 1;
    let mut losses = Vec::with_capacity(b_len);
    let mut infeasible = Vec::with_capacity(b_len);
    let mut grad = Tensor::zeros(&[t_len, b_len, k_len])?;
    for (b, label) in labels.iter().enumerate() {
        check_label(label, blank)?;
        let logp = output.frame_log_probs(b);
        if min_frames(label) > t_len {
            losses.push(f64::INFINITY);
            infeasible.push(true);
            continue;
        }
        let ext = extended_label(label, blank);
        let s_len = ext.len();
        let alpha = ctc_alpha(&logp, label, blank);
        let beta = ctc_beta(&logp, label, blank);
        let mut z = alpha[t_len - 1][s_len - 1];
        if s_len >= 2 {
            z = log_sum_exp(z, alpha[t_len - 1][s_len - 2]);
        }
        losses.push(-z);
        infeasible.push(false);
        for t in 0..t_len {
            // posterior class occupancy at this frame
            let mut occ = vec![f64::NEG_INFINITY; k_len];
            for s in 0..s_len {
                let a = alpha[t][s];
                let bt = beta[t][s];
                if a == f64::NEG_INFINITY || bt == f64::NEG_INFINITY {
                    continue;
                }
                // alpha and beta both include frame t's emission
                let g = a + bt - logp[t][ext[s]] - z;
                occ[ext[s]] = log_sum_exp(occ[ext[s]], g);
            }
            for k in 0..k_len {
                let softmax = logp[t][k].exp();
                let o = if occ[k] == f64::NEG_INFINITY {
                    0.0
                } else {
                    occ[k].exp()
                };
                grad.set3(t, b, k, T::from_f64_lossy(softmax - o));
            }
        }
    }
    Ok(CtcOutcome {
        losses,
        infeasible,
        grad,
    })
}

/// Scalar summary of one training step's objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub detection: DetectionLossBreakdown,
    /// Mean CTC loss over feasible items; `None` without a recognition term.
    pub recognition: Option<f64>,
    /// `detection.total + lambda * recognition` (detection only when the
    /// recognition mean is absent).
    pub total: f64,
}

/// Combines detection and (optionally) recognition into the joint training
/// objective. Infeasible recognition items are excluded from the mean; if
/// nothing is feasible the total falls back to detection alone.
pub fn total_loss<T: Scalar>(
    pred: &DetectionMaps<T>,
    targets: &DetectionTargets<T>,
    recognition: Option<(&RecognitionOutput<T>, &[Vec<usize>])>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let (detection, _) = detection_loss(pred, targets, weights)?;
    let recognition_mean = match recognition {
        Some((output, labels)) => ctc_loss(output, labels)?.mean_feasible(),
        None => None,
    };
    let total = match recognition_mean {
        Some(m) => detection.total + weights.lambda * m,
        None => detection.total,
    };
    Ok(LossReport {
        detection,
        recognition: recognition_mean,
        total,
    })
}
