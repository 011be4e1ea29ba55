//! Training objectives and the step-conditioned dispatch between them.
//!
//! Two composites share the batch. Rows whose diffusion step falls on the
//! structural side of the staged boundary pay a class-center consistency
//! loss plus classification cross-entropy; rows on the other side pay a
//! reconstruction MSE against the textual target plus cross-entropy. Every
//! objective comes with its analytic gradient with respect to the predicted
//! features and, where applicable, the logits; the trainer feeds those into
//! the network backward pass.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMode, Labels};
use crate::error::{Result, SedaError};
use crate::scalar::Scalar;

/// Which branch the low-step rows get.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// Steps `i <= staged_step` pay the structural composite.
    AsWritten,
    /// Swapped: low steps pay the reconstruction composite instead.
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagedLossConfig {
    /// Weight on the structural consistency term.
    pub alpha1: f64,
    /// Weight on the reconstruction MSE term.
    pub alpha2: f64,
    /// Weight on cross-entropy within the structural branch.
    pub beta: f64,
    /// Weight on cross-entropy within the reconstruction branch.
    pub gamma: f64,
    /// Step boundary `t` between the two branches.
    pub staged_step: usize,
    pub label_mode: LabelMode,
    #[serde(default = "StagedLossConfig::default_order")]
    pub stage_order: StageOrder,
}

impl StagedLossConfig {
    fn default_order() -> StageOrder {
        StageOrder::AsWritten
    }

    pub fn new(staged_step: usize, label_mode: LabelMode) -> Self {
        StagedLossConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 1.0,
            gamma: 1.0,
            staged_step,
            label_mode,
            stage_order: StageOrder::AsWritten,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        for (name, w) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(SedaError::invalid(format!(
                    "loss weight {name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        if self.staged_step > total_steps {
            return Err(SedaError::invalid(format!(
                "staged_step {} exceeds total_steps {total_steps}",
                self.staged_step
            )));
        }
        Ok(())
    }

    /// True when `step` belongs to the structural branch.
    pub fn is_structural_step(&self, step: usize) -> bool {
        match self.stage_order {
            StageOrder::AsWritten => step <= self.staged_step,
            StageOrder::Reversed => step > self.staged_step,
        }
    }
}

/// Per-class arithmetic mean of the rows carrying that class. Classes with
/// no members are absent. The map is ordered, so downstream float sums are
/// reproducible.
pub fn class_centers<T: Scalar>(
    features: ArrayView2<T>,
    labels: &Labels,
    num_classes: usize,
) -> Result<BTreeMap<usize, (Array1<T>, usize)>> {
    if features.nrows() != labels.len() {
        return Err(SedaError::invalid(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    labels.validate(num_classes)?;
    let d = features.ncols();
    let mut sums: BTreeMap<usize, (Array1<T>, usize)> = BTreeMap::new();
    for (row, feat) in features.axis_iter(Axis(0)).enumerate() {
        for class in labels.classes_of(row) {
            let entry = sums
                .entry(class)
                .or_insert_with(|| (Array1::zeros(d), 0usize));
            entry.0 += &feat;
            entry.1 += 1;
        }
    }
    for (center, count) in sums.values_mut() {
        let n = T::from_usize(*count);
        center.mapv_inplace(|v| v / n);
    }
    Ok(sums)
}

/// Class-center offset plus matched-row L1 offset:
/// `sum_c ||mu_pred_c - mu_visual_c||_2 + sum_b ||x_pred_b - x_visual_b||_1`.
pub fn structural_consistency_loss<T: Scalar>(
    x_pred: ArrayView2<T>,
    x_visual: ArrayView2<T>,
    labels: &Labels,
    num_classes: usize,
) -> Result<T> {
    structural_consistency_with_grad(x_pred, x_visual, labels, num_classes).map(|(v, _)| v)
}

/// Value plus gradient with respect to `x_pred`. The L2 center term uses a
/// zero subgradient where the two centers coincide, and the L1 term uses
/// `sign(0) = 0`.
pub fn structural_consistency_with_grad<T: Scalar>(
    x_pred: ArrayView2<T>,
    x_visual: ArrayView2<T>,
    labels: &Labels,
    num_classes: usize,
) -> Result<(T, Array2<T>)> {
    if x_pred.dim() != x_visual.dim() {
        return Err(SedaError::invalid(format!(
            "prediction shape {:?} does not match visual shape {:?}",
            x_pred.dim(),
            x_visual.dim()
        )));
    }
    if x_pred.nrows() == 0 {
        return Err(SedaError::invalid("consistency loss needs a nonempty batch"));
    }
    let pred_centers = class_centers(x_pred, labels, num_classes)?;
    let visual_centers = class_centers(x_visual, labels, num_classes)?;
    let mut grad = Array2::<T>::zeros(x_pred.dim());
    let mut center_term = T::zero();
    // scale applied to each member row of class c: delta_c / (||delta_c|| n_c)
    let mut row_scales: BTreeMap<usize, Array1<T>> = BTreeMap::new();
    for (class, (pred_center, count)) in &pred_centers {
        let (visual_center, _) = &visual_centers[class];
        let delta = pred_center - visual_center;
        let norm = delta.iter().map(|&v| v * v).sum::<T>().sqrt();
        center_term += norm;
        if norm > T::zero() {
            let scale = T::one() / (norm * T::from_usize(*count));
            row_scales.insert(*class, delta.mapv(|v| v * scale));
        }
    }
    let mut offset_term = T::zero();
    for row in 0..x_pred.nrows() {
        for class in labels.classes_of(row) {
            if let Some(scaled) = row_scales.get(&class) {
                let mut grad_row = grad.row_mut(row);
                grad_row += scaled;
            }
        }
        for col in 0..x_pred.ncols() {
            let diff = x_pred[[row, col]] - x_visual[[row, col]];
            offset_term += diff.abs();
            grad[[row, col]] += sign(diff);
        }
    }
    Ok((center_term + offset_term, grad))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Batch mean of the per-row squared Euclidean distance to the target.
pub fn reconstruction_mse<T: Scalar>(
    x_pred: ArrayView2<T>,
    x_textual: ArrayView2<T>,
) -> Result<T> {
    reconstruction_mse_with_grad(x_pred, x_textual).map(|(v, _)| v)
}

pub fn reconstruction_mse_with_grad<T: Scalar>(
    x_pred: ArrayView2<T>,
    x_textual: ArrayView2<T>,
) -> Result<(T, Array2<T>)> {
    if x_pred.dim() != x_textual.dim() {
        return Err(SedaError::invalid(format!(
            "prediction shape {:?} does not match target shape {:?}",
            x_pred.dim(),
            x_textual.dim()
        )));
    }
    let rows = x_pred.nrows();
    if rows == 0 {
        return Err(SedaError::invalid("reconstruction loss needs a nonempty batch"));
    }
    let inv_b = T::one() / T::from_usize(rows);
    let mut total = T::zero();
    let mut grad = Array2::<T>::zeros(x_pred.dim());
    let two = T::from_f64(2.0);
    for ((g, &p), &t) in grad.iter_mut().zip(x_pred.iter()).zip(x_textual.iter()) {
        let diff = p - t;
        total += diff * diff;
        *g = two * diff * inv_b;
    }
    Ok((total * inv_b, grad))
}

/// Single-label: mean negative log softmax probability of the true class.
/// Multi-label: mean element-wise binary cross-entropy against sigmoid
/// activations, averaged over batch times classes.
pub fn cross_entropy_loss<T: Scalar>(logits: ArrayView2<T>, labels: &Labels) -> Result<T> {
    cross_entropy_with_grad(logits, labels).map(|(v, _)| v)
}

pub fn cross_entropy_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &Labels,
) -> Result<(T, Array2<T>)> {
    let (rows, classes) = logits.dim();
    if rows == 0 {
        return Err(SedaError::invalid("cross-entropy needs a nonempty batch"));
    }
    if labels.len() != rows {
        return Err(SedaError::invalid(format!(
            "{rows} logit rows but {} labels",
            labels.len()
        )));
    }
    labels.validate(classes)?;
    let mut grad = Array2::<T>::zeros((rows, classes));
    let mut total = T::zero();
    match labels {
        Labels::Single(ids) => {
            let inv_b = T::one() / T::from_usize(rows);
            for (row, &label) in ids.iter().enumerate() {
                let z = logits.row(row);
                let max = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut sum = T::zero();
                for &v in z.iter() {
                    sum += (v - max).exp();
                }
                let lse = max + sum.ln();
                total += lse - z[label as usize];
                for col in 0..classes {
                    let softmax = (z[col] - lse).exp();
                    let indicator = if col == label as usize { T::one() } else { T::zero() };
                    grad[[row, col]] = (softmax - indicator) * inv_b;
                }
            }
            total *= inv_b;
        }
        Labels::Multi(rows_active) => {
            let inv_bc = T::one() / T::from_usize(rows * classes);
            for (row, active) in rows_active.iter().enumerate() {
                for col in 0..classes {
                    let z = logits[[row, col]];
                    let y = if active[col] { T::one() } else { T::zero() };
                    // max(z, 0) - z y + ln(1 + exp(-|z|)), stable for large |z|
                    let loss = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
                    total += loss;
                    let sigma = T::one() / (T::one() + (-z).exp());
                    grad[[row, col]] = (sigma - y) * inv_bc;
                }
            }
            total *= inv_bc;
        }
    }
    Ok((total, grad))
}

/// Weighted loss contributions and the gradients the trainer propagates.
/// The fields are the already-weighted branch terms, so
/// `total = consistency + class_structural + reconstruction + class_reconstruction`.
#[derive(Debug, Clone)]
pub struct StagedLossOutput<T> {
    pub total: T,
    pub consistency: T,
    pub class_structural: T,
    pub reconstruction: T,
    pub class_reconstruction: T,
    pub d_pred: Array2<T>,
    pub d_logits: Array2<T>,
}

/// Splits the batch by each row's diffusion step and applies the branch
/// composite to its sub-batch. An empty sub-batch contributes zero.
pub fn staged_loss<T: Scalar>(
    config: &StagedLossConfig,
    steps: &[usize],
    x_pred: ArrayView2<T>,
    x_visual: ArrayView2<T>,
    x_textual: ArrayView2<T>,
    logits: ArrayView2<T>,
    labels: &Labels,
) -> Result<StagedLossOutput<T>> {
    let rows = x_pred.nrows();
    if rows == 0 {
        return Err(SedaError::invalid("staged loss needs a nonempty batch"));
    }
    if x_visual.dim() != x_pred.dim() || x_textual.dim() != x_pred.dim() {
        return Err(SedaError::invalid(format!(
            "mismatched feature shapes: pred {:?}, visual {:?}, textual {:?}",
            x_pred.dim(),
            x_visual.dim(),
            x_textual.dim()
        )));
    }
    if steps.len() != rows || labels.len() != rows || logits.nrows() != rows {
        return Err(SedaError::invalid(format!(
            "row mismatch: {rows} features, {} steps, {} labels, {} logit rows",
            steps.len(),
            labels.len(),
            logits.nrows()
        )));
    }
    if let Some(&bad) = steps.iter().find(|&&i| i == 0) {
        return Err(SedaError::invalid(format!(
            "step {bad} is outside the diffusion range (steps start at 1)"
        )));
    }
    if labels.mode() != config.label_mode {
        return Err(SedaError::invalid(
            "label batch mode does not match the loss configuration",
        ));
    }

    let num_classes = logits.ncols();
    let mut structural_rows = Vec::new();
    let mut recon_rows = Vec::new();
    for (row, &step) in steps.iter().enumerate() {
        if config.is_structural_step(step) {
            structural_rows.push(row);
        } else {
            recon_rows.push(row);
        }
    }

    let mut d_pred = Array2::<T>::zeros(x_pred.dim());
    let mut d_logits = Array2::<T>::zeros(logits.dim());
    let mut consistency = T::zero();
    let mut class_structural = T::zero();
    let mut reconstruction = T::zero();
    let mut class_reconstruction = T::zero();

    if !structural_rows.is_empty() {
        let pred_sub = x_pred.select(Axis(0), &structural_rows);
        let visual_sub = x_visual.select(Axis(0), &structural_rows);
        let logits_sub = logits.select(Axis(0), &structural_rows);
        let labels_sub = labels.select(&structural_rows);
        let alpha1 = T::from_f64(config.alpha1);
        let beta = T::from_f64(config.beta);
        let (sc, sc_grad) =
            structural_consistency_with_grad(pred_sub.view(), visual_sub.view(), &labels_sub, num_classes)?;
        let (ce, ce_grad) = cross_entropy_with_grad(logits_sub.view(), &labels_sub)?;
        consistency = alpha1 * sc;
        class_structural = beta * ce;
        for (sub, &row) in structural_rows.iter().enumerate() {
            for col in 0..x_pred.ncols() {
                d_pred[[row, col]] += alpha1 * sc_grad[[sub, col]];
            }
            for col in 0..num_classes {
                d_logits[[row, col]] += beta * ce_grad[[sub, col]];
            }
        }
    }

    if !recon_rows.is_empty() {
        let pred_sub = x_pred.select(Axis(0), &recon_rows);
        let textual_sub = x_textual.select(Axis(0), &recon_rows);
        let logits_sub = logits.select(Axis(0), &recon_rows);
        let labels_sub = labels.select(&recon_rows);
        let alpha2 = T::from_f64(config.alpha2);
        let gamma = T::from_f64(config.gamma);
        let (mse, mse_grad) = reconstruction_mse_with_grad(pred_sub.view(), textual_sub.view())?;
        let (ce, ce_grad) = cross_entropy_with_grad(logits_sub.view(), &labels_sub)?;
        reconstruction = alpha2 * mse;
        class_reconstruction = gamma * ce;
        for (sub, &row) in recon_rows.iter().enumerate() {
            for col in 0..x_pred.ncols() {
                d_pred[[row, col]] += alpha2 * mse_grad[[sub, col]];
            }
            for col in 0..num_classes {
                d_logits[[row, col]] += gamma * ce_grad[[sub, col]];
            }
        }
    }

    let total = consistency + class_structural + reconstruction + class_reconstruction;
    Ok(StagedLossOutput {
        total,
        consistency,
        class_structural,
        reconstruction,
        class_reconstruction,
        d_pred,
        d_logits,
    })
}
