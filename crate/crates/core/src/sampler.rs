//! Reverse denoising chain. Starting from standard-normal noise, the chain
//! repeatedly asks the model for a clean-feature estimate, steps toward it
//! with the closed-form posterior mean and, in stochastic mode, re-injects a
//! shrinking amount of noise. The result is a batch of aligned features
//! ready for classification.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMode;
use crate::denoiser::SedaModel;
use crate::error::{Result, SedaError};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingOptions {
    /// 1 keeps the full reverse-process variance, 0 follows the posterior
    /// mean deterministically. Values in between shrink the noise.
    pub noise_scale: f64,
    /// Distance between visited steps; 1 walks the whole chain.
    pub stride: usize,
    /// Keep every intermediate state for diagnostics.
    pub record_trajectory: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            noise_scale: 1.0,
            stride: 1,
            record_trajectory: false,
        }
    }
}

impl SamplingOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_scale) || !self.noise_scale.is_finite() {
            return Err(SedaError::invalid(format!(
                "noise_scale must lie in [0, 1], got {}",
                self.noise_scale
            )));
        }
        if self.stride == 0 {
            return Err(SedaError::invalid("stride must be at least 1"));
        }
        Ok(())
    }
}

/// Steps the chain visits, descending from `total_steps` by `stride`. Step 1
/// is always included so the chain terminates on the clean estimate.
pub fn visited_steps(total_steps: usize, stride: usize) -> Vec<usize> {
    assert!(total_steps >= 1 && stride >= 1);
    let mut steps = Vec::new();
    let mut i = total_steps;
    loop {
        steps.push(i);
        if i <= stride {
            break;
        }
        i -= stride;
    }
    if *steps.last().unwrap() != 1 {
        steps.push(1);
    }
    steps
}

/// Mean of the reverse-process posterior at step `i` given the current state
/// and the predicted clean features. The two coefficients collapse to (1, 0)
/// at `i = 1`, so the last step lands exactly on the prediction.
pub fn posterior_mean<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    i: usize,
    x_i: ArrayView2<T>,
    x_pred: ArrayView2<T>,
) -> Result<Array2<T>> {
    if x_i.dim() != x_pred.dim() {
        return Err(SedaError::invalid(format!(
            "state shape {:?} does not match prediction shape {:?}",
            x_i.dim(),
            x_pred.dim()
        )));
    }
    let (to_pred, to_state) = posterior_coefficients(schedule, i)?;
    let mut mean = x_pred.to_owned();
    mean.zip_mut_with(&x_i, |p, &s| *p = to_pred * *p + to_state * s);
    Ok(mean)
}

/// `(coefficient on x_pred, coefficient on x_i)` of the posterior mean.
pub fn posterior_coefficients<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    i: usize,
) -> Result<(T, T)> {
    if i < 1 || i > schedule.total_steps() {
        return Err(SedaError::invalid(format!(
            "step {i} outside 1..={}",
            schedule.total_steps()
        )));
    }
    let denom = schedule.one_minus_alpha_bar(i);
    let to_pred = schedule.sqrt_alpha_bar(i - 1) * schedule.beta(i) / denom;
    let to_state = schedule.alpha(i).sqrt() * schedule.one_minus_alpha_bar(i - 1) / denom;
    Ok((to_pred, to_state))
}

pub struct ChainOutput<T> {
    /// Final state of the chain, the aligned features.
    pub aligned: Array2<T>,
    /// Start state plus the state after every visited step, in visit order.
    pub trajectory: Option<Vec<Array2<T>>>,
}

/// Runs the chain from a standard-normal start drawn from `rng`.
pub fn reverse_chain<T: Scalar, R: Rng>(
    model: &SedaModel<T>,
    schedule: &NoiseSchedule<T>,
    x_visual: ArrayView2<T>,
    rng: &mut R,
    options: &SamplingOptions,
) -> Result<ChainOutput<T>> {
    options.validate()?;
    let shape = (x_visual.nrows(), model.feature_dim());
    let start = Array2::from_shape_fn(shape, |_| T::standard_normal(rng));
    reverse_chain_from(model, schedule, x_visual, start, Some(rng), options)
}

/// Runs the chain from an explicit start state. `rng` may be `None` only in
/// deterministic mode (`noise_scale = 0`); the chain then never touches it.
pub fn reverse_chain_from<T: Scalar, R: Rng>(
    model: &SedaModel<T>,
    schedule: &NoiseSchedule<T>,
    x_visual: ArrayView2<T>,
    start: Array2<T>,
    mut rng: Option<&mut R>,
    options: &SamplingOptions,
) -> Result<ChainOutput<T>> {
    options.validate()?;
    if start.dim() != (x_visual.nrows(), model.feature_dim()) {
        return Err(SedaError::invalid(format!(
            "start shape {:?} does not match {} visual rows of width {}",
            start.dim(),
            x_visual.nrows(),
            model.feature_dim()
        )));
    }
    if options.noise_scale > 0.0 && rng.is_none() {
        return Err(SedaError::invalid(
            "stochastic sampling needs an rng; pass one or set noise_scale = 0",
        ));
    }
    let rows = start.nrows();
    let plan = visited_steps(schedule.total_steps(), options.stride);
    let mut x = start;
    let mut trajectory = if options.record_trajectory {
        Some(vec![x.clone()])
    } else {
        None
    };
    let scale = T::from_f64(options.noise_scale);
    for &i in &plan {
        let steps = vec![i; rows];
        let pred = model.predict_clean(x.view(), &steps, x_visual)?;
        x = posterior_mean(schedule, i, x.view(), pred.view())?;
        let variance = schedule.posterior_variance(i);
        if options.noise_scale > 0.0 && variance > T::zero() {
            let sd = scale * variance.sqrt();
            let r = rng.as_deref_mut().expect("checked above");
            for v in x.iter_mut() {
                *v += sd * T::standard_normal(r);
            }
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(SedaError::NumericFailure {
                step: i,
                message: format!("chain state became non-finite ({bad})"),
            });
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(x.clone());
        }
    }
    Ok(ChainOutput {
        aligned: x,
        trajectory,
    })
}

/// Chain output plus classifier scores and a full class ranking per row.
pub struct ClassifiedOutput<T> {
    pub aligned: Array2<T>,
    pub trajectory: Option<Vec<Array2<T>>>,
    /// Softmax probabilities (single-label) or sigmoid activations
    /// (multi-label), one row per input row.
    pub scores: Array2<T>,
    /// Classes of each row ordered by descending score; ties go to the lower
    /// class index. The first k entries are the top-k prediction.
    pub ranking: Vec<Vec<usize>>,
}

pub fn align_and_classify<T: Scalar, R: Rng>(
    model: &SedaModel<T>,
    schedule: &NoiseSchedule<T>,
    x_visual: ArrayView2<T>,
    rng: &mut R,
    options: &SamplingOptions,
) -> Result<ClassifiedOutput<T>> {
    let chain = reverse_chain(model, schedule, x_visual, rng, options)?;
    let logits = model.classify(chain.aligned.view())?;
    let scores = score_logits(logits.view(), model.head.label_mode);
    let ranking = rank_rows(scores.view());
    Ok(ClassifiedOutput {
        aligned: chain.aligned,
        trajectory: chain.trajectory,
        scores,
        ranking,
    })
}

/// Softmax per row for single-label heads, element-wise sigmoid otherwise.
pub fn score_logits<T: Scalar>(logits: ArrayView2<T>, mode: LabelMode) -> Array2<T> {
    let mut scores = logits.to_owned();
    match mode {
        LabelMode::Single => {
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        LabelMode::Multi => {
            scores.mapv_inplace(|z| T::one() / (T::one() + (-z).exp()));
        }
    }
    scores
}

/// Classes ordered by descending score with ties broken toward the lower
/// class index.
pub fn rank_rows<T: Scalar>(scores: ArrayView2<T>) -> Vec<Vec<usize>> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Activation, DenoiserConfig, Fusion};
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule64(total: usize) -> NoiseSchedule<f64> {
        NoiseSchedule::linear(total, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn first_step_mean_is_exactly_the_prediction() {
        let schedule = schedule64(50);
        let (to_pred, to_state) = posterior_coefficients(&schedule, 1).unwrap();
        assert_eq!(to_pred, 1.0);
        assert_eq!(to_state, 0.0);
        let x_i = array![[3.0f64, -4.0]];
        let pred = array![[0.5f64, 0.25]];
        let mean = posterior_mean(&schedule, 1, x_i.view(), pred.view()).unwrap();
        assert_eq!(mean, pred);
    }

    #[test]
    fn two_step_coefficients_match_hand_evaluation() {
        let schedule = NoiseSchedule::from_betas(vec![0.5f64, 0.5]).unwrap();
        let (to_pred, to_state) = posterior_coefficients(&schedule, 2).unwrap();
        assert_relative_eq!(to_pred, 0.4714045207910317, max_relative = 1e-15);
        assert_relative_eq!(to_state, 0.4714045207910317, max_relative = 1e-15);
    }

    #[test]
    fn posterior_mean_is_linear_in_its_inputs() {
        let schedule = schedule64(10);
        let x_i = array![[1.0f64, 2.0], [0.5, -1.5]];
        let pred = array![[0.2f64, -0.3], [1.0, 1.0]];
        let base = posterior_mean(&schedule, 5, x_i.view(), pred.view()).unwrap();
        let doubled =
            posterior_mean(&schedule, 5, (&x_i * 2.0).view(), (&pred * 2.0).view()).unwrap();
        for (a, b) in base.iter().zip(doubled.iter()) {
            assert_relative_eq!(2.0 * a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let schedule = schedule64(10);
        let x = array![[0.0f64]];
        assert!(posterior_mean(&schedule, 0, x.view(), x.view()).is_err());
        assert!(posterior_mean(&schedule, 11, x.view(), x.view()).is_err());
    }

    #[test]
    fn visited_step_lists_descend_and_end_at_one() {
        assert_eq!(visited_steps(10, 1), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(visited_steps(10, 3), vec![10, 7, 4, 1]);
        assert_eq!(visited_steps(10, 4), vec![10, 6, 2, 1]);
        assert_eq!(visited_steps(1, 1), vec![1]);
        assert_eq!(visited_steps(5, 100), vec![5, 1]);
    }

    fn tiny_model(rng: &mut ChaCha8Rng) -> SedaModel<f64> {
        let config = DenoiserConfig {
            feature_dim: 8,
            token_count: 2,
            attention_heads: 1,
            decoder_hidden: vec![16],
            activation: Activation::Silu,
            fusion: Fusion::CrossAttention,
        };
        SedaModel::init(config, 3, crate::data::LabelMode::Single, rng).unwrap()
    }

    #[test]
    fn deterministic_chain_repeats_bit_for_bit_and_ignores_the_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = tiny_model(&mut rng);
        let schedule = schedule64(20);
        let x_visual = Array2::from_shape_fn((3, 8), |_| f64::standard_normal(&mut rng));
        let start = Array2::from_shape_fn((3, 8), |_| f64::standard_normal(&mut rng));
        let options = SamplingOptions {
            noise_scale: 0.0,
            stride: 1,
            record_trajectory: false,
        };
        let a = reverse_chain_from::<f64, ChaCha8Rng>(
            &model,
            &schedule,
            x_visual.view(),
            start.clone(),
            None,
            &options,
        )
        .unwrap();
        let b = reverse_chain_from::<f64, ChaCha8Rng>(
            &model,
            &schedule,
            x_visual.view(),
            start,
            None,
            &options,
        )
        .unwrap();
        assert_eq!(a.aligned, b.aligned);
    }

    #[test]
    fn stochastic_chain_without_an_rng_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(&mut rng);
        let schedule = schedule64(5);
        let x_visual = Array2::zeros((1, 8));
        let start = Array2::zeros((1, 8));
        let err = reverse_chain_from::<f64, ChaCha8Rng>(
            &model,
            &schedule,
            x_visual.view(),
            start,
            None,
            &SamplingOptions::default(),
        );
        assert!(matches!(err, Err(SedaError::InvalidArgument(_))));
    }

    #[test]
    fn trajectory_has_one_entry_per_visited_step_plus_the_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(&mut rng);
        let schedule = schedule64(12);
        let x_visual = Array2::from_shape_fn((2, 8), |_| f64::standard_normal(&mut rng));
        let options = SamplingOptions {
            noise_scale: 1.0,
            stride: 5,
            record_trajectory: true,
        };
        let out = reverse_chain(&model, &schedule, x_visual.view(), &mut rng, &options).unwrap();
        let plan = visited_steps(12, 5);
        let trajectory = out.trajectory.unwrap();
        assert_eq!(trajectory.len(), plan.len() + 1);
        assert_eq!(trajectory.last().unwrap(), &out.aligned);
    }

    #[test]
    fn classification_composes_chain_and_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(&mut rng);
        let schedule = schedule64(8);
        let x_visual = Array2::from_shape_fn((4, 8), |_| f64::standard_normal(&mut rng));
        let options = SamplingOptions::default();
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        let combined =
            align_and_classify(&model, &schedule, x_visual.view(), &mut rng_a, &options).unwrap();
        let chain = reverse_chain(&model, &schedule, x_visual.view(), &mut rng_b, &options).unwrap();
        let logits = model.classify(chain.aligned.view()).unwrap();
        let scores = score_logits(logits.view(), crate::data::LabelMode::Single);
        assert_eq!(combined.aligned, chain.aligned);
        assert_eq!(combined.scores, scores);
        assert_eq!(combined.ranking.len(), 4);
        for (row, ranking) in combined.ranking.iter().enumerate() {
            assert_eq!(ranking.len(), 3);
            for pair in ranking.windows(2) {
                assert!(combined.scores[[row, pair[0]]] >= combined.scores[[row, pair[1]]]);
            }
        }
    }

    #[test]
    fn softmax_scores_sum_to_one_and_rank_ties_by_index() {
        let logits = array![[0.0f64, 0.0, 1.0]];
        let scores = score_logits(logits.view(), crate::data::LabelMode::Single);
        assert_relative_eq!(scores.row(0).sum(), 1.0, max_relative = 1e-12);
        let ranking = rank_rows(scores.view());
        assert_eq!(ranking[0], vec![2, 0, 1]);
    }

    /// An oracle model that always predicts the true clean features makes the
    /// chain land on them, for any noise scale, because the last step is
    /// deterministic and collapses onto the prediction.
    #[test]
    fn oracle_prediction_pulls_the_chain_onto_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let schedule = schedule64(30);
        let target = array![[2.5f64, -1.0, 0.5, 3.0]];
        let mut x = Array2::from_shape_fn((1, 4), |_| f64::standard_normal(&mut rng));
        for &i in &visited_steps(30, 1) {
            let mean = posterior_mean(&schedule, i, x.view(), target.view()).unwrap();
            x = mean;
            let var = schedule.posterior_variance(i);
            if var > 0.0 {
                let sd = var.sqrt();
                for v in x.iter_mut() {
                    *v += sd * f64::standard_normal(&mut rng);
                }
            }
        }
        for (a, b) in x.iter().zip(target.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn visited_steps_are_descending_unique_and_reach_one(
            total in 1usize..300,
            stride in 1usize..50,
        ) {
            let steps = visited_steps(total, stride);
            prop_assert_eq!(steps[0], total);
            prop_assert_eq!(*steps.last().unwrap(), 1);
            for pair in steps.windows(2) {
                prop_assert!(pair[0] > pair[1]);
            }
        }
    }
}
