//! Training objectives. Every loss returns its value together with the
//! analytic gradient with respect to its differentiable inputs.

use ndarray::{Array, Array2, ArrayView, ArrayView2, Axis, Dimension, RemoveAxis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of the compound Dice + weighted cross-entropy objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompoundLossConfig {
    #[serde(rename = "wCE")]
    pub w_ce: f64,
    #[serde(rename = "wDice")]
    pub w_dice: f64,
    #[serde(rename = "classWeights")]
    pub class_weights: Vec<f64>,
    #[serde(rename = "smoothingEps")]
    pub smoothing_eps: f64,
}

impl Default for CompoundLossConfig {
    /// Fine-tuning weights: Dice 0.6, CE 0.4, classes 0.2/0.2/0.3/0.3.
    fn default() -> Self {
        Self {
            w_ce: 0.4,
            w_dice: 0.6,
            class_weights: vec![0.2, 0.2, 0.3, 0.3],
            smoothing_eps: 1e-6,
        }
    }
}

impl CompoundLossConfig {
    /// Equal-weight compound used while pre-training on segmentation data.
    pub fn equal(num_classes: usize) -> Self {
        Self {
            w_ce: 0.5,
            w_dice: 0.5,
            class_weights: vec![1.0; num_classes],
            smoothing_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_ce < 0.0 || self.w_dice < 0.0 || self.w_ce + self.w_dice <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with positive sum (w_ce={}, w_dice={})",
                self.w_ce, self.w_dice
            )));
        }
        if self.class_weights.is_empty() || self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("class weights must all be positive".into()));
        }
        if !(self.smoothing_eps > 0.0) {
            return Err(Error::Config("smoothing_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Row-wise softmax, computed with the max subtracted.
pub fn softmax<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn log_softmax_at<T: Scalar>(row: ndarray::ArrayView1<T>, idx: usize) -> T {
    let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[idx] - lse
}

/// Batch mean of `w_y · (−log softmax(logits)_y)`. Returns `(loss, dloss/dlogits)`.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(T, Array2<T>)> {
    let (n, c) = logits.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::Validation(format!(
            "{} labels for a batch of {n} logits",
            labels.len()
        )));
    }
    if class_weights.len() != c {
        return Err(Error::Validation(format!(
            "{} class weights for {c} classes",
            class_weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = softmax(logits);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let w = T::lit(class_weights[y]);
        loss -= w * log_softmax_at(logits.row(i), y);
        let mut row = grad.row_mut(i);
        row[y] -= T::one();
        row.mapv_inplace(|g| g * w * inv_n);
    }
    Ok((loss * inv_n, grad))
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Soft Dice loss `1 − (2Σgs + ε)/(Σg + Σs + ε)` with `s = sigmoid(logits)`,
/// computed per sample (axis 0) and averaged. Returns `(loss, dloss/dlogits)`.
pub fn dice_loss<T: Scalar, D: RemoveAxis>(
    seg_logits: ArrayView<T, D>,
    gt_mask: ArrayView<T, D>,
    eps: f64,
) -> Result<(T, Array<T, D>)> {
    if seg_logits.shape() != gt_mask.shape() {
        return Err(Error::Validation(format!(
            "segmentation logits {:?} vs mask {:?}",
            seg_logits.shape(),
            gt_mask.shape()
        )));
    }
    let n = seg_logits.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Validation("empty segmentation batch".into()));
    }
    let eps = T::lit(eps);
    let two = T::lit(2.0);
    let inv_n = T::one() / T::lit(n as f64);
    let probs = seg_logits.mapv(sigmoid);
    let mut grad = Array::zeros(seg_logits.raw_dim());
    let mut loss = T::zero();
    for ((s, g), mut d) in probs
        .axis_iter(Axis(0))
        .zip(gt_mask.axis_iter(Axis(0)))
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        let inter: T = Zip::from(&s).and(&g).fold(T::zero(), |acc, &a, &b| acc + a * b);
        let denom = g.sum() + s.sum() + eps;
        let numer = two * inter + eps;
        loss += T::one() - numer / denom;
        let denom2 = denom * denom;
        Zip::from(&mut d).and(&s).and(&g).for_each(|d, &sv, &gv| {
            let ds = -(two * gv * denom - numer) / denom2;
            *d = ds * sv * (T::one() - sv) * inv_n;
        });
    }
    Ok((loss * inv_n, grad))
}

/// Value and gradients of the compound objective, with its two parts.
#[derive(Debug, Clone)]
pub struct CompoundLoss<T, D: Dimension> {
    pub value: T,
    pub ce: T,
    pub dice: T,
    pub grad_class: Array2<T>,
    pub grad_seg: Array<T, D>,
}

/// `w_ce · weighted CE + w_dice · Dice`.
pub fn dice_wce<T: Scalar, D: RemoveAxis>(
    class_logits: ArrayView2<T>,
    labels: &[usize],
    seg_logits: ArrayView<T, D>,
    gt_mask: ArrayView<T, D>,
    cfg: &CompoundLossConfig,
) -> Result<CompoundLoss<T, D>> {
    let (ce, mut grad_class) = weighted_cross_entropy(class_logits, labels, &cfg.class_weights)?;
    let (dice, mut grad_seg) = dice_loss(seg_logits, gt_mask, cfg.smoothing_eps)?;
    let (wc, wd) = (T::lit(cfg.w_ce), T::lit(cfg.w_dice));
    grad_class.mapv_inplace(|g| g * wc);
    grad_seg.mapv_inplace(|g| g * wd);
    Ok(CompoundLoss {
        value: wc * ce + wd * dice,
        ce,
        dice,
        grad_class,
        grad_seg,
    })
}

/// Gradients of the contrastive loss.
#[derive(Debug, Clone)]
pub struct InfoNceGrad<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
}

/// Batch-mean InfoNCE. Row `i` scores its positive `keys[i]` against every
/// queue row; the positive sits at index 0 of a (K+1)-way softmax.
pub fn info_nce<T: Scalar>(
    queries: ArrayView2<T>,
    keys: ArrayView2<T>,
    queue: ArrayView2<T>,
    temperature: f64,
) -> Result<(T, InfoNceGrad<T>)> {
    if !(temperature > 0.0) {
        return Err(Error::Validation(format!("temperature must be positive, got {temperature}")));
    }
    let (n, d) = queries.dim();
    if keys.dim() != (n, d) || (queue.nrows() > 0 && queue.ncols() != d) || n == 0 {
        return Err(Error::Validation(format!(
            "query {:?}, key {:?} and queue {:?} shapes disagree",
            queries.dim(),
            keys.dim(),
            queue.dim()
        )));
    }
    let inv_t = T::lit(1.0 / temperature);
    let k_count = queue.nrows();
    let mut logits = Array2::<T>::zeros((n, k_count + 1));
    for i in 0..n {
        logits[[i, 0]] = queries.row(i).dot(&keys.row(i)) * inv_t;
    }
    if k_count > 0 {
        let neg = queries.dot(&queue.t()).mapv(|v| v * inv_t);
        logits.slice_mut(ndarray::s![.., 1..]).assign(&neg);
    }
    let (loss, dlogits) = weighted_cross_entropy(logits.view(), &vec![0; n], &vec![1.0; k_count + 1])?;
    // dlogits already carries 1/N.
    let mut gq = Array2::<T>::zeros((n, d));
    let mut gk = Array2::<T>::zeros((n, d));
    for i in 0..n {
        let d0 = dlogits[[i, 0]] * inv_t;
        gq.row_mut(i).scaled_add(d0, &keys.row(i));
        gk.row_mut(i).scaled_add(d0, &queries.row(i));
    }
    if k_count > 0 {
        let dneg = dlogits.slice(ndarray::s![.., 1..]).mapv(|v| v * inv_t);
        gq += &dneg.dot(&queue);
    }
    Ok((loss, InfoNceGrad { q: gq, k: gk }))
}

/// Mean squared error over pixels where `loss_mask == 1`.
pub fn masked_mse<T: Scalar, D: Dimension>(
    reconstruction: ArrayView<T, D>,
    target: ArrayView<T, D>,
    loss_mask: ArrayView<T, D>,
) -> Result<(T, Array<T, D>)> {
    if reconstruction.shape() != target.shape() || target.shape() != loss_mask.shape() {
        return Err(Error::Validation("masked MSE operands differ in shape".into()));
    }
    let count = loss_mask.iter().filter(|&&m| m > T::zero()).count();
    if count == 0 {
        return Err(Error::Validation("masked MSE needs a non-empty loss mask".into()));
    }
    let inv = T::one() / T::lit(count as f64);
    let two = T::lit(2.0);
    let mut grad = Array::zeros(reconstruction.raw_dim());
    let mut total = T::zero();
    Zip::from(&mut grad)
        .and(&reconstruction)
        .and(&target)
        .and(&loss_mask)
        .for_each(|g, &r, &t, &m| {
            if m > T::zero() {
                let diff = r - t;
                total += diff * diff;
                *g = two * diff * inv;
            }
        });
    Ok((total * inv, grad))
}
