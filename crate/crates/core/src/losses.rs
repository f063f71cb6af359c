//! Training losses over a single foreground channel, each returned with its
//! exact gradient with respect to the prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{soft_skeleton, soft_skeleton_values, DEFAULT_SKELETON_ITERATIONS};
use crate::volume::{BinaryMask, ProbVolume, ScalarField};

/// A loss value and `dL/dp` for every voxel of the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedScalar {
    pub value: f64,
    pub gradient: ScalarField,
}

impl GradedScalar {
    fn new(value: f64, gradient: ScalarField) -> Self {
        debug_assert!(value.is_finite());
        debug_assert!(gradient.values().iter().all(|g| g.is_finite()));
        GradedScalar { value, gradient }
    }
}

/// Loss weights, numerical guards and the top-K schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_cldice: f64,
    pub w_bce: f64,
    pub skeleton_iterations: usize,
    pub epsilon: f64,
    pub ce_clip: f64,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub k_start: f64,
    pub k_end: f64,
    pub total_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_cldice: 1.0,
            w_bce: 1.0,
            skeleton_iterations: DEFAULT_SKELETON_ITERATIONS,
            epsilon: 1e-5,
            ce_clip: 1e-7,
            warmup_epochs: 400,
            ramp_epochs: 100,
            k_start: 0.15,
            k_end: 0.50,
            total_epochs: 500,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("w_cldice", self.w_cldice)?;
        nonneg("w_bce", self.w_bce)?;
        if self.skeleton_iterations == 0 {
            return Err(Error::param("skeleton_iterations must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.ce_clip > 0.0 && self.ce_clip < 0.5) {
            return Err(Error::param(format!("ce_clip must be in (0, 0.5), got {}", self.ce_clip)));
        }
        if !(self.k_start > 0.0 && self.k_start <= self.k_end && self.k_end <= 1.0) {
            return Err(Error::param(format!(
                "need 0 < k_start <= k_end <= 1, got k_start {} and k_end {}",
                self.k_start, self.k_end
            )));
        }
        if self.ramp_epochs == 0 {
            return Err(Error::param("ramp_epochs must be positive"));
        }
        if self.warmup_epochs + self.ramp_epochs != self.total_epochs {
            return Err(Error::param(format!(
                "warmup_epochs ({}) + ramp_epochs ({}) must equal total_epochs ({})",
                self.warmup_epochs, self.ramp_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

fn check_pair(pred: &ProbVolume, gt: &BinaryMask) -> Result<()> {
    pred.geometry().ensure_same_grid(gt.geometry())
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn soft_dice_loss(pred: &ProbVolume, gt: &BinaryMask, epsilon: f64) -> Result<GradedScalar> {
    check_pair(pred, gt)?;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let g = indicator(g);
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let num = 2.0 * inter + epsilon;
    let den = sum_p + sum_g + epsilon;
    let value = 1.0 - num / den;
    let den2 = den * den;
    let gradient = gt
        .values()
        .iter()
        .map(|&g| -(2.0 * indicator(g) * den - num) / den2)
        .collect();
    Ok(GradedScalar::new(
        value,
        ScalarField::new(pred.geometry().clone(), gradient)?,
    ))
}

/// Per-voxel binary cross-entropy with its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub per_voxel: ScalarField,
    pub mean: GradedScalar,
}

/// Per-voxel loss and its (unnormalised) derivative with clipping.
#[inline]
fn ce_voxel(p: f64, g: bool, clip: f64) -> (f64, f64) {
    let hi = 1.0 - clip;
    if g {
        let active = p >= clip && p <= hi;
        (-(p.clamp(clip, hi)).ln(), if active { -1.0 / p } else { 0.0 })
    } else {
        let q = 1.0 - p;
        let active = q >= clip && q <= hi;
        (-(q.clamp(clip, hi)).ln(), if active { 1.0 / q } else { 0.0 })
    }
}

/// Binary cross-entropy with probabilities clipped to `[clip, 1 - clip]`.
/// Clipped voxels have zero gradient.
pub fn cross_entropy_loss(pred: &ProbVolume, gt: &BinaryMask, clip: f64) -> Result<CrossEntropy> {
    check_pair(pred, gt)?;
    let n = pred.values().len() as f64;
    let (losses, grads): (Vec<f64>, Vec<f64>) = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| ce_voxel(p, g, clip))
        .unzip();
    let mean = losses.iter().sum::<f64>() / n;
    let gradient = grads.into_iter().map(|d| d / n).collect();
    let geometry = pred.geometry().clone();
    Ok(CrossEntropy {
        per_voxel: ScalarField::new(geometry.clone(), losses)?,
        mean: GradedScalar::new(mean, ScalarField::new(geometry, gradient)?),
    })
}

/// Fraction of voxels kept by the bootstrapped cross-entropy at `epoch`:
/// 1 during warm-up, then a linear ramp that starts at `k_start` on the first
/// ramp epoch and reaches `k_end` on the last epoch.
pub fn k_schedule(epoch: usize, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    if epoch >= config.total_epochs {
        return Err(Error::Range(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.total_epochs
        )));
    }
    if epoch < config.warmup_epochs {
        return Ok(1.0);
    }
    if config.ramp_epochs == 1 {
        return Ok(config.k_end);
    }
    let t = (epoch - config.warmup_epochs) as f64 / (config.ramp_epochs - 1) as f64;
    // endpoint-exact interpolation: t = 0 gives k_start, t = 1 gives k_end
    Ok(config.k_start * (1.0 - t) + config.k_end * t)
}

/// Number of voxels kept for fraction `k` of `n`: `max(1, ceil(k n))`.
/// Products within 1e-9 relative of an integer are snapped to it first, so
/// `0.15 * 100` keeps 15 voxels rather than 16.
pub fn top_k_count(k: f64, n: usize) -> usize {
    let x = k * n as f64;
    let r = x.round();
    let m = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (m as usize).clamp(1, n.max(1))
}

/// Mean cross-entropy over the `max(1, ceil(k N))` highest-loss voxels.
/// Ties at the cut-off are taken in increasing linear index.
pub fn bootstrapped_ce_loss(
    pred: &ProbVolume,
    gt: &BinaryMask,
    k: f64,
    clip: f64,
) -> Result<GradedScalar> {
    check_pair(pred, gt)?;
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::param(format!("k must be in (0, 1], got {k}")));
    }
    let (losses, grads): (Vec<f64>, Vec<f64>) = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| ce_voxel(p, g, clip))
        .unzip();
    let n = losses.len();
    let m = top_k_count(k, n);

    let mut order: Vec<usize> = (0..n).collect();
    if m < n {
        order.sort_unstable_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    }
    let mut selected = vec![false; n];
    for &i in &order[..m] {
        selected[i] = true;
    }

    let mf = m as f64;
    let mut sum = 0.0;
    let mut gradient = vec![0.0; n];
    for i in 0..n {
        if selected[i] {
            sum += losses[i];
            gradient[i] = grads[i] / mf;
        }
    }
    Ok(GradedScalar::new(
        sum / mf,
        ScalarField::new(pred.geometry().clone(), gradient)?,
    ))
}

/// Soft clDice loss: `1 - 2 Tprec Tsens / (Tprec + Tsens)` with
///
/// ```text
/// Tprec = (sum(S_P g) + eps) / (sum(S_P) + eps)
/// Tsens = (sum(S_G p) + eps) / (sum(S_G) + eps)
/// ```
///
/// where `S_P`, `S_G` are soft skeletons of prediction and ground truth. The
/// gradient flows through `Tsens` directly and through `S_P` by replaying
/// the skeleton's pooling traces; `S_G` is constant.
pub fn cl_dice_loss(
    pred: &ProbVolume,
    gt: &BinaryMask,
    iterations: usize,
    epsilon: f64,
) -> Result<GradedScalar> {
    check_pair(pred, gt)?;
    let sp = soft_skeleton(pred, iterations)?;
    let sg = soft_skeleton_values(&ProbVolume::from(gt), iterations)?;

    let s_p = sp.skeleton.values();
    let s_g = sg.values();
    let p = pred.values();

    let mut sp_g = 0.0;
    let mut sp_sum = 0.0;
    let mut sg_p = 0.0;
    let mut sg_sum = 0.0;
    for i in 0..p.len() {
        let g = indicator(gt.get(i));
        sp_g += s_p[i] * g;
        sp_sum += s_p[i];
        sg_p += s_g[i] * p[i];
        sg_sum += s_g[i];
    }
    let prec_den = sp_sum + epsilon;
    let sens_den = sg_sum + epsilon;
    let tprec = (sp_g + epsilon) / prec_den;
    let tsens = (sg_p + epsilon) / sens_den;
    let hsum = tprec + tsens;
    let value = 1.0 - 2.0 * tprec * tsens / hsum;

    let d_prec = -2.0 * tsens * tsens / (hsum * hsum);
    let d_sens = -2.0 * tprec * tprec / (hsum * hsum);

    let upstream: Vec<f64> = (0..p.len())
        .map(|i| d_prec * (indicator(gt.get(i)) - tprec) / prec_den)
        .collect();
    let mut gradient = sp.tape.backward(&upstream);
    for (gi, &sgi) in gradient.iter_mut().zip(s_g) {
        *gi += d_sens * sgi / sens_den;
    }
    Ok(GradedScalar::new(
        value,
        ScalarField::new(pred.geometry().clone(), gradient)?,
    ))
}

/// Components of the combined training loss at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub cl_dice: GradedScalar,
    pub bootstrapped_ce: GradedScalar,
    pub k: f64,
    pub total: GradedScalar,
}

/// `w_cldice * clDice + w_bce * bootstrapped CE` with `k` from the schedule.
pub fn combined_loss(
    pred: &ProbVolume,
    gt: &BinaryMask,
    epoch: usize,
    config: &LossConfig,
) -> Result<CombinedLoss> {
    check_pair(pred, gt)?;
    let k = k_schedule(epoch, config)?;
    let cl = cl_dice_loss(pred, gt, config.skeleton_iterations, config.epsilon)?;
    let bce = bootstrapped_ce_loss(pred, gt, k, config.ce_clip)?;
    let (wc, wb) = (config.w_cldice, config.w_bce);
    let gradient: Vec<f64> = cl
        .gradient
        .values()
        .iter()
        .zip(bce.gradient.values())
        .map(|(&a, &b)| wc * a + wb * b)
        .collect();
    let total = GradedScalar::new(
        wc * cl.value + wb * bce.value,
        ScalarField::new(pred.geometry().clone(), gradient)?,
    );
    Ok(CombinedLoss {
        cl_dice: cl,
        bootstrapped_ce: bce,
        k,
        total,
    })
}

/// Compare an analytic gradient with central differences
/// `(L(p + h e_i) - L(p - h e_i)) / 2h` at `samples` random voxels.
///
/// Returns the largest `|fd - analytic| / max(|analytic|, 1e-8)`.
/// Perturbed values must stay inside `[0, 1]`.
pub fn finite_difference_check<F>(
    loss: F,
    pred: &ProbVolume,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ProbVolume) -> Result<GradedScalar>,
{
    if !(h > 0.0) {
        return Err(Error::param(format!("step must be positive, got {h}")));
    }
    let n = pred.values().len();
    let analytic = loss(pred)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, samples.min(n));
    let mut worst: f64 = 0.0;
    for idx in picks.iter() {
        let p0 = pred.values()[idx];
        let plus = loss(&pred.with_value(idx, p0 + h)?)?.value;
        let minus = loss(&pred.with_value(idx, p0 - h)?)?.value;
        let fd = (plus - minus) / (2.0 * h);
        let an = analytic.gradient.values()[idx];
        let rel = (fd - an).abs() / an.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
