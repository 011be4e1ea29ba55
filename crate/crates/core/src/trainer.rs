//! Optimization loop. Each step draws a per-sample diffusion step, noises
//! the textual targets forward, asks the model to predict them back from the
//! noisy state plus the visual conditioning, scores the prediction with the
//! staged loss and applies one Adam update with decoupled weight decay.
//!
//! Three ablation switches reduce the full model to its control arms: with
//! `use_dst` off the trainer skips diffusion entirely and fits only the
//! classifier head on raw visual features; `use_attention_interaction` off
//! swaps cross attention for concatenation; `use_dsl` off forces the staged
//! boundary to zero so only the reconstruction composite is active.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_fingerprint, Checkpoint, ConfigBundle};
use crate::data::{ClassCentroids, PairedFeatureDataset, Split};
use crate::denoiser::{DenoiserConfig, Fusion, SedaModel};
use crate::error::{Result, SedaError};
use crate::losses::{cross_entropy_with_grad, staged_loss, StageOrder, StagedLossConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_halving_period")]
    pub lr_halving_period_epochs: usize,
    /// Diffusion chain length T.
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    pub staged: StagedLossConfig,
    /// Off: no diffusion, train the classifier head on raw visual features.
    #[serde(default = "default_true")]
    pub use_dst: bool,
    /// Off: concatenation fusion instead of cross attention.
    #[serde(default = "default_true")]
    pub use_attention_interaction: bool,
    /// Off: staged boundary forced to 0, disabling the structural branch.
    #[serde(default = "default_true")]
    pub use_dsl: bool,
}

fn default_batch_size() -> usize {
    64
}
fn default_base_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_halving_period() -> usize {
    4
}
fn default_total_steps() -> usize {
    200
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(epochs: usize, staged: StagedLossConfig) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch_size(),
            base_lr: default_base_lr(),
            weight_decay: default_weight_decay(),
            lr_halving_period_epochs: default_halving_period(),
            total_steps: default_total_steps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            staged,
            use_dst: true,
            use_attention_interaction: true,
            use_dsl: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SedaError::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(SedaError::invalid("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(SedaError::invalid(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(SedaError::invalid(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.lr_halving_period_epochs == 0 {
            return Err(SedaError::invalid("lr_halving_period_epochs must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(SedaError::invalid("total_steps must be at least 1"));
        }
        self.staged.validate(self.total_steps)?;
        Ok(())
    }

    /// Soft hyperparameter range checks. Out-of-range values train fine at
    /// desk scale, so these are surfaced as warnings, not errors.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let grid = [0.5, 1.0, 1.5, 2.0];
        let on_grid = |v: f64| grid.iter().any(|g| (v - g).abs() < 1e-12);
        for (name, v) in [("alpha1", self.staged.alpha1), ("alpha2", self.staged.alpha2)] {
            if !(0.1..=2.0).contains(&v) {
                warnings.push(format!("{name} = {v} is outside the usual range [0.1, 2.0]"));
            }
        }
        for (name, v) in [("beta", self.staged.beta), ("gamma", self.staged.gamma)] {
            if !on_grid(v) {
                warnings.push(format!(
                    "{name} = {v} is off the usual grid {{0.5, 1.0, 1.5, 2.0}}"
                ));
            }
        }
        if !(900..=1500).contains(&self.total_steps) {
            warnings.push(format!(
                "total_steps = {} is outside the usual range [900, 1500]",
                self.total_steps
            ));
        }
        if self.staged.staged_step > 500 {
            warnings.push(format!(
                "staged_step = {} is above the usual cap of 500",
                self.staged.staged_step
            ));
        }
        warnings
    }

    pub fn apply_ablation(&mut self, arm: AblationArm) {
        let (dst, attention, dsl) = match arm {
            AblationArm::Base => (false, false, false),
            AblationArm::Translator => (true, false, false),
            AblationArm::TranslatorInteraction => (true, true, false),
            AblationArm::Full => (true, true, true),
        };
        self.use_dst = dst;
        self.use_attention_interaction = attention;
        self.use_dsl = dsl;
    }
}

/// The four control arms of the ablation ladder, from a bare classifier on
/// raw visual features up to the full staged model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArm {
    /// Classifier head only, no diffusion.
    Base,
    /// Diffusion reconstruction with concatenation fusion.
    Translator,
    /// Adds cross-attention interaction.
    TranslatorInteraction,
    /// Adds the staged structural branch.
    Full,
}

impl AblationArm {
    /// Accepts the ladder tokens `base`, `T`, `TI`, `TIL` (case-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(AblationArm::Base),
            "t" => Ok(AblationArm::Translator),
            "ti" => Ok(AblationArm::TranslatorInteraction),
            "til" => Ok(AblationArm::Full),
            other => Err(SedaError::invalid(format!(
                "unknown ablation arm '{other}' (expected base, T, TI or TIL)"
            ))),
        }
    }
}

/// `base_lr * 0.5^(epoch / period)` with integer division; epochs are
/// 0-based, so the first `period` epochs run at the base rate.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, period: usize) -> f64 {
    assert!(period >= 1, "halving period must be at least 1");
    base_lr * 0.5f64.powi((epoch / period) as i32)
}

/// Adam moments for the trainable tensors, in trainable order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One adaptive-moment update with decoupled weight decay:
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
    pub fn update(
        &mut self,
        params: &mut [&mut [T]],
        grads: &[&[T]],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(params.len(), self.m.len(), "tensor count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let beta1 = T::from_f64(ADAM_BETA1);
        let beta2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPSILON);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * weight_decay);
        let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.len(), m.len(), "tensor size mismatch");
            assert_eq!(grad.len(), m.len(), "gradient size mismatch");
            for j in 0..param.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (T::one() - beta1) * g;
                v[j] = beta2 * v[j] + (T::one() - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param[j] -= lr_t * m_hat / (v_hat.sqrt() + eps) + decay * param[j];
            }
        }
    }
}

/// Mean loss terms of one epoch or one step; the fields are the weighted
/// branch contributions, so they recombine to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub consistency: f64,
    pub class_structural: f64,
    pub reconstruction: f64,
    pub class_reconstruction: f64,
}

impl LossBreakdown {
    fn zero() -> Self {
        LossBreakdown {
            total: 0.0,
            consistency: 0.0,
            class_structural: 0.0,
            reconstruction: 0.0,
            class_reconstruction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct Trainer<T> {
    pub(crate) model: SedaModel<T>,
    pub(crate) schedule: NoiseSchedule<T>,
    pub(crate) config: TrainConfig,
    /// Architecture as requested; the ablation-resolved copy lives in the
    /// model itself.
    pub(crate) denoiser_config: DenoiserConfig,
    /// Staged config with the ablation switches already applied.
    pub(crate) staged: StagedLossConfig,
    pub(crate) adam: AdamState<T>,
    /// Indices into the model's parameter list that receive updates.
    pub(crate) trainable: Vec<usize>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) epoch: usize,
    pub(crate) history: Vec<EpochStats>,
    pub(crate) seed: u64,
    pub(crate) centroids: ClassCentroids,
    pub(crate) fingerprint: [u8; 32],
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        data: &PairedFeatureDataset,
        denoiser: DenoiserConfig,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.split() != Split::Train {
            return Err(SedaError::invalid(
                "training needs a train split with textual features",
            ));
        }
        if data.len() == 0 {
            return Err(SedaError::invalid("training set is empty"));
        }
        if denoiser.feature_dim != data.feature_dim() {
            return Err(SedaError::invalid(format!(
                "model width {} does not match dataset width {}",
                denoiser.feature_dim,
                data.feature_dim()
            )));
        }
        if config.staged.label_mode != data.label_mode() {
            return Err(SedaError::invalid(
                "loss label mode does not match the dataset label mode",
            ));
        }
        for warning in config.range_warnings() {
            log::warn!("{warning}");
        }

        let mut resolved = denoiser.clone();
        if !config.use_attention_interaction {
            resolved.fusion = Fusion::Concat;
        }
        let mut staged = config.staged.clone();
        if !config.use_dsl {
            // No structural stage at all. The boundary alone is not enough:
            // under the reversed order a zero boundary would flip every step
            // INTO the structural branch, so pin the direction too.
            staged.staged_step = 0;
            staged.stage_order = StageOrder::AsWritten;
        }

        let schedule = NoiseSchedule::linear(
            config.total_steps,
            T::from_f64(config.beta_start),
            T::from_f64(config.beta_end),
        )?;
        let centroids = ClassCentroids::of(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SedaModel::init(resolved, data.num_classes, data.label_mode(), &mut rng)?;
        let trainable = trainable_indices(&model, config.use_dst);
        let sizes: Vec<usize> = {
            let slices = model.param_slices();
            trainable.iter().map(|&i| slices[i].len()).collect()
        };
        let fingerprint = config_fingerprint(&ConfigBundle {
            denoiser: denoiser.clone(),
            train: config.clone(),
            num_classes: data.num_classes,
            label_mode: data.label_mode(),
            feature_dim: data.feature_dim(),
            seed,
        });
        Ok(Trainer {
            model,
            schedule,
            config,
            denoiser_config: denoiser,
            staged,
            adam: AdamState::zeros(&sizes),
            trainable,
            rng,
            epoch: 0,
            history: Vec::new(),
            seed,
            centroids,
            fingerprint,
        })
    }

    pub fn model(&self) -> &SedaModel<T> {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn centroids(&self) -> &ClassCentroids {
        &self.centroids
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One optimizer step over the given dataset rows.
    pub fn train_step(
        &mut self,
        data: &PairedFeatureDataset,
        rows: &[usize],
    ) -> Result<LossBreakdown> {
        if rows.is_empty() {
            return Err(SedaError::invalid("a training batch needs at least one row"));
        }
        let lr = lr_at_epoch(
            self.config.base_lr,
            self.epoch,
            self.config.lr_halving_period_epochs,
        );
        let visual = gather::<T>(&data.visual, rows);
        let labels = data.labels.select(rows);

        if !self.config.use_dst {
            // classifier-only arm: fit the head on raw visual features
            let logits = self.model.classify(visual.view())?;
            let (ce, mut d_logits) = cross_entropy_with_grad(logits.view(), &labels)?;
            let gamma = T::from_f64(self.staged.gamma);
            d_logits.mapv_inplace(|g| g * gamma);
            let (head_grads, _) = self.model.head_backward(visual.view(), d_logits.view());
            let grads: Vec<&[T]> = vec![
                head_grads.weight.as_slice().unwrap(),
                head_grads.bias.as_slice().unwrap(),
            ];
            self.apply_update(&grads, lr)?;
            let weighted = (gamma * ce).as_f64();
            let mut breakdown = LossBreakdown::zero();
            breakdown.total = weighted;
            breakdown.class_reconstruction = weighted;
            return Ok(breakdown);
        }

        let textual_all = data
            .textual
            .as_ref()
            .ok_or_else(|| SedaError::invalid("training rows are missing textual features"))?;
        let textual = gather::<T>(textual_all, rows);
        let total_steps = self.schedule.total_steps();
        let steps: Vec<usize> = (0..rows.len())
            .map(|_| self.rng.random_range(1..=total_steps))
            .collect();
        let noise = Array2::from_shape_fn((rows.len(), visual.ncols()), |_| {
            T::standard_normal(&mut self.rng)
        });
        let x_noisy = self
            .schedule
            .forward_noising(textual.view(), &steps, noise.view())?;
        let cache = self
            .model
            .forward_cached(x_noisy.view(), &steps, visual.view())?;
        let logits = self.model.classify(cache.output.view())?;
        let staged = staged_loss(
            &self.staged,
            &steps,
            cache.output.view(),
            visual.view(),
            textual.view(),
            logits.view(),
            &labels,
        )?;
        if !staged.total.is_finite() {
            return Err(SedaError::NumericFailure {
                step: self.epoch,
                message: "training loss became non-finite".to_string(),
            });
        }
        let backward = self
            .model
            .backward(&cache, staged.d_pred.view(), Some(staged.d_logits.view()));
        let grad_slices = backward.grads.slices();
        let grads: Vec<&[T]> = self.trainable.iter().map(|&i| grad_slices[i]).collect();
        self.apply_update(&grads, lr)?;
        Ok(LossBreakdown {
            total: staged.total.as_f64(),
            consistency: staged.consistency.as_f64(),
            class_structural: staged.class_structural.as_f64(),
            reconstruction: staged.reconstruction.as_f64(),
            class_reconstruction: staged.class_reconstruction.as_f64(),
        })
    }

    fn apply_update(&mut self, grads: &[&[T]], lr: f64) -> Result<()> {
        let mut slices = self.model.param_slices_mut();
        let mut params: Vec<&mut [T]> = Vec::with_capacity(self.trainable.len());
        let mut taken = 0;
        for (idx, slice) in slices.drain(..).enumerate() {
            if self.trainable.get(taken) == Some(&idx) {
                params.push(slice);
                taken += 1;
            }
        }
        self.adam
            .update(&mut params, grads, lr, self.config.weight_decay);
        Ok(())
    }

    /// One pass over the shuffled dataset. Returns the row-weighted mean of
    /// the per-batch loss terms.
    pub fn train_epoch(&mut self, data: &PairedFeatureDataset) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = LossBreakdown::zero();
        let mut seen = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let step = self.train_step(data, chunk)?;
            let w = chunk.len() as f64;
            sums.total += step.total * w;
            sums.consistency += step.consistency * w;
            sums.class_structural += step.class_structural * w;
            sums.reconstruction += step.reconstruction * w;
            sums.class_reconstruction += step.class_reconstruction * w;
            seen += chunk.len();
        }
        let n = seen as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            lr: lr_at_epoch(
                self.config.base_lr,
                self.epoch,
                self.config.lr_halving_period_epochs,
            ),
            loss: LossBreakdown {
                total: sums.total / n,
                consistency: sums.consistency / n,
                class_structural: sums.class_structural / n,
                reconstruction: sums.reconstruction / n,
                class_reconstruction: sums.class_reconstruction / n,
            },
        };
        log::info!(
            "epoch {} done: lr {:.3e}, loss {:.6}",
            stats.epoch,
            stats.lr,
            stats.loss.total
        );
        self.history.push(stats.clone());
        self.epoch += 1;
        Ok(stats)
    }

    /// Trains until the configured epoch count, writing one checkpoint per
    /// epoch when a directory is given. Picks up wherever `epoch` stands, so
    /// a resumed trainer continues instead of restarting.
    pub fn fit(
        &mut self,
        data: &PairedFeatureDataset,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        while self.epoch < self.config.epochs {
            self.train_epoch(data)?;
            if let Some(dir) = checkpoint_dir {
                self.save_checkpoint(dir)?;
            }
        }
        Ok(())
    }

    /// In-memory equivalent of saving and reloading a checkpoint, minus the
    /// single-precision round trip.
    pub fn snapshot(&self) -> crate::checkpoint::ModelSnapshot<T> {
        crate::checkpoint::ModelSnapshot {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            centroids: self.centroids.clone(),
            bundle: ConfigBundle {
                denoiser: self.denoiser_config.clone(),
                train: self.config.clone(),
                num_classes: self.model.num_classes(),
                label_mode: self.model.head.label_mode,
                feature_dim: self.model.feature_dim(),
                seed: self.seed,
            },
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    /// Writes `epoch_NNNN.ckpt` for the last completed epoch and returns the
    /// path.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("epoch_{:04}.ckpt", self.epoch));
        Checkpoint::from_trainer(self).write(&path)?;
        Ok(path)
    }

    /// Rebuilds a trainer from a checkpoint. With matching build and inputs
    /// the continuation reproduces an uninterrupted run bit for bit when the
    /// scalar type matches the stored single-precision tensors.
    pub fn resume(path: &Path, data: &PairedFeatureDataset) -> Result<Self> {
        Checkpoint::read(path)?.into_trainer(data)
    }
}

pub(crate) fn trainable_indices<T: Scalar>(model: &SedaModel<T>, use_dst: bool) -> Vec<usize> {
    let count = model.param_slices().len();
    if use_dst {
        (0..count).collect()
    } else {
        // the classifier head tensors sit at the end of the parameter list
        vec![count - 2, count - 1]
    }
}

fn gather<T: Scalar>(source: &Array2<f32>, rows: &[usize]) -> Array2<T> {
    source.select(Axis(0), rows).mapv(T::from_f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LabelMode, SyntheticSpec};
    use approx::assert_relative_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            feature_dim: 8,
            num_classes: 2,
            train_per_class: 16,
            test_per_class: 4,
            nuisance_dim: 2,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_trainer(use_dst: bool, use_dsl: bool) -> (Trainer<f64>, PairedFeatureDataset) {
        let (train, _) = generate_synthetic(&tiny_spec()).unwrap();
        let mut staged = StagedLossConfig::new(10, LabelMode::Single);
        staged.beta = 1.5;
        staged.gamma = 1.5;
        let mut config = TrainConfig::new(3, staged);
        config.total_steps = 40;
        config.batch_size = 8;
        config.base_lr = 1e-3;
        config.use_dst = use_dst;
        config.use_dsl = use_dsl;
        let mut denoiser = DenoiserConfig::new(8);
        denoiser.token_count = 2;
        denoiser.decoder_hidden = vec![16, 16];
        let trainer = Trainer::new(&train, denoiser, config, 7).unwrap();
        (trainer, train)
    }

    #[test]
    fn lr_schedule_halves_on_the_period() {
        assert_eq!(lr_at_epoch(1e-4, 0, 4), 1e-4);
        assert_eq!(lr_at_epoch(1e-4, 3, 4), 1e-4);
        assert_eq!(lr_at_epoch(1e-4, 4, 4), 5e-5);
        assert_eq!(lr_at_epoch(1e-4, 7, 4), 5e-5);
        assert_eq!(lr_at_epoch(1e-4, 8, 4), 2.5e-5);
        assert_eq!(lr_at_epoch(2.0, 5, 1), 2.0 / 32.0);
    }

    /// Closed-form check of a single scalar Adam step.
    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut state = AdamState::<f64>::zeros(&[1]);
        let mut p = [1.0f64];
        let g = [0.5f64];
        {
            let mut params: Vec<&mut [f64]> = vec![&mut p];
            let grads: Vec<&[f64]> = vec![&g];
            state.update(&mut params, &grads, 0.1, 0.01);
        }
        // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        let m_hat = 0.5;
        let v_hat: f64 = 0.25;
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8) - 0.1 * 0.01 * 1.0;
        assert_relative_eq!(p[0], expected, max_relative = 1e-14);
        assert_eq!(state.step, 1);
        assert_relative_eq!(state.m[0][0], 0.05, max_relative = 1e-14);
        assert_relative_eq!(state.v[0][0], 0.00025, max_relative = 1e-14);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moment_update() {
        // with zero gradient the update reduces to pure decay
        let mut state = AdamState::<f64>::zeros(&[1]);
        let mut p = [2.0f64];
        let g = [0.0f64];
        let mut params: Vec<&mut [f64]> = vec![&mut p];
        let grads: Vec<&[f64]> = vec![&g];
        state.update(&mut params, &grads, 0.5, 0.1);
        assert_relative_eq!(p[0], 2.0 - 0.5 * 0.1 * 2.0, max_relative = 1e-14);
    }

    #[test]
    fn training_drives_the_reconstruction_and_class_terms_down() {
        let (mut trainer, data) = tiny_trainer(true, true);
        trainer.config.base_lr = 3e-3;
        trainer.config.lr_halving_period_epochs = 16;
        // Epoch means are noisy (steps and noise are redrawn per batch), so
        // compare a window of early epochs against a window of late ones.
        // The consistency value is left out on purpose: it is a sub-batch
        // sum, so it scales with how many rows the step draw happens to send
        // into the structural branch, and its pull toward the visual
        // features competes with the reconstruction pull toward the textual
        // ones. The terms below must drop for any working optimizer.
        let mut recon = Vec::new();
        let mut class_terms = Vec::new();
        for _ in 0..40 {
            let stats = trainer.train_epoch(&data).unwrap();
            recon.push(stats.loss.reconstruction);
            class_terms.push(stats.loss.class_structural + stats.loss.class_reconstruction);
        }
        let window = |v: &[f64], range: std::ops::Range<usize>| -> f64 {
            v[range.clone()].iter().sum::<f64>() / range.len() as f64
        };
        let recon_early = window(&recon, 0..5);
        let recon_late = window(&recon, 35..40);
        assert!(
            recon_late < recon_early,
            "reconstruction went {recon_early} -> {recon_late}"
        );
        let class_early = window(&class_terms, 0..5);
        let class_late = window(&class_terms, 35..40);
        assert!(
            class_late < class_early,
            "class terms went {class_early} -> {class_late}"
        );
    }

    #[test]
    fn zero_alpha_weights_leave_only_the_class_terms() {
        let (train, _) = generate_synthetic(&tiny_spec()).unwrap();
        let mut staged = StagedLossConfig::new(20, LabelMode::Single);
        staged.alpha1 = 0.0;
        staged.alpha2 = 0.0;
        let mut config = TrainConfig::new(1, staged);
        config.total_steps = 40;
        let mut denoiser = DenoiserConfig::new(8);
        denoiser.token_count = 2;
        let mut trainer = Trainer::<f64>::new(&train, denoiser, config, 3).unwrap();
        let rows: Vec<usize> = (0..8).collect();
        let step = trainer.train_step(&train, &rows).unwrap();
        assert_eq!(step.consistency, 0.0);
        assert_eq!(step.reconstruction, 0.0);
        assert_relative_eq!(
            step.total,
            step.class_structural + step.class_reconstruction,
            max_relative = 1e-12
        );
    }

    #[test]
    fn breakdown_recombines_to_the_total() {
        let (mut trainer, data) = tiny_trainer(true, true);
        let rows: Vec<usize> = (0..16).collect();
        let step = trainer.train_step(&data, &rows).unwrap();
        let sum = step.consistency
            + step.class_structural
            + step.reconstruction
            + step.class_reconstruction;
        assert!((step.total - sum).abs() < 1e-9);
    }

    #[test]
    fn disabling_the_structural_branch_zeroes_its_terms() {
        let (mut trainer, data) = tiny_trainer(true, false);
        for _ in 0..2 {
            trainer.train_epoch(&data).unwrap();
        }
        for stats in trainer.history() {
            assert_eq!(stats.loss.consistency, 0.0);
            assert_eq!(stats.loss.class_structural, 0.0);
        }
    }

    #[test]
    fn classifier_only_arm_trains_just_the_head() {
        let (mut trainer, data) = tiny_trainer(false, true);
        let before = trainer.model.clone();
        trainer.train_epoch(&data).unwrap();
        assert_eq!(trainer.trainable.len(), 2);
        // body parameters untouched, head parameters moved
        assert_eq!(before.time_w1, trainer.model.time_w1);
        assert_eq!(before.decoder, trainer.model.decoder);
        assert_ne!(before.head.weight, trainer.model.head.weight);
    }

    #[test]
    fn same_seed_reproduces_identical_parameters() {
        let (mut a, data) = tiny_trainer(true, true);
        let (mut b, _) = tiny_trainer(true, true);
        a.fit(&data, None).unwrap();
        b.fit(&data, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn mismatched_label_mode_is_rejected() {
        let (train, _) = generate_synthetic(&tiny_spec()).unwrap();
        let staged = StagedLossConfig::new(10, LabelMode::Multi);
        let mut config = TrainConfig::new(1, staged);
        config.total_steps = 40;
        let denoiser = DenoiserConfig::new(8);
        let err = Trainer::<f64>::new(&train, denoiser, config, 0);
        assert!(matches!(err, Err(SedaError::InvalidArgument(_))));
    }

    #[test]
    fn test_split_is_rejected_for_training() {
        let (_, test) = generate_synthetic(&tiny_spec()).unwrap();
        let staged = StagedLossConfig::new(10, LabelMode::Single);
        let mut config = TrainConfig::new(1, staged);
        config.total_steps = 40;
        let denoiser = DenoiserConfig::new(8);
        let err = Trainer::<f64>::new(&test, denoiser, config, 0);
        assert!(matches!(err, Err(SedaError::InvalidArgument(_))));
    }

    #[test]
    fn range_warnings_flag_unusual_values_without_failing() {
        let mut staged = StagedLossConfig::new(600, LabelMode::Single);
        staged.alpha1 = 5.0;
        staged.beta = 0.7;
        let mut config = TrainConfig::new(1, staged);
        config.total_steps = 700;
        let warnings = config.range_warnings();
        assert_eq!(warnings.len(), 4);
        assert!(warnings.iter().any(|w| w.contains("alpha1")));
        assert!(warnings.iter().any(|w| w.contains("beta")));
        assert!(warnings.iter().any(|w| w.contains("total_steps")));
        assert!(warnings.iter().any(|w| w.contains("staged_step")));
        // a paper-scale setup stays quiet
        let mut quiet = StagedLossConfig::new(300, LabelMode::Single);
        quiet.beta = 1.5;
        quiet.gamma = 0.5;
        let mut config = TrainConfig::new(1, quiet);
        config.total_steps = 1000;
        assert!(config.range_warnings().is_empty());
    }

    #[test]
    fn ablation_arms_set_the_three_switches() {
        let staged = StagedLossConfig::new(10, LabelMode::Single);
        let mut config = TrainConfig::new(1, staged);
        config.apply_ablation(AblationArm::parse("base").unwrap());
        assert!(!config.use_dst && !config.use_attention_interaction && !config.use_dsl);
        config.apply_ablation(AblationArm::parse("T").unwrap());
        assert!(config.use_dst && !config.use_attention_interaction && !config.use_dsl);
        config.apply_ablation(AblationArm::parse("TI").unwrap());
        assert!(config.use_dst && config.use_attention_interaction && !config.use_dsl);
        config.apply_ablation(AblationArm::parse("TIL").unwrap());
        assert!(config.use_dst && config.use_attention_interaction && config.use_dsl);
        assert!(AblationArm::parse("full").is_err());
    }

    /// The per-sample step draw should cover 1..=T uniformly. Chi-square
    /// goodness of fit over 100k draws; the p-value threshold is loose
    /// enough that a correct sampler fails with probability about 1e-3.
    #[test]
    fn timestep_draws_are_uniform() {
        let total = 50usize;
        let draws = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut counts = vec![0usize; total];
        for _ in 0..draws {
            let step = rng.random_range(1..=total);
            counts[step - 1] += 1;
        }
        let expected = draws as f64 / total as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let dist = ChiSquared::new((total - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.001, "chi2 = {chi2}, p = {p}");
    }
}
