//! Versioned checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u32 version, the 32-byte
//! configuration fingerprint, a u64-length-prefixed JSON header (config
//! bundle, epoch, loss history, optimizer step, rng state, tensor index) and
//! finally the tensor payload as little-endian IEEE-754 single precision in
//! index order. Readers are strict: wrong magic, a version from the future,
//! a fingerprint that disagrees with the embedded bundle, shape mismatches
//! and trailing bytes are all errors.
//!
//! Parameters are stored in single precision, so training in f32 resumes
//! bit for bit; wider scalar types lose their extra mantissa bits across a
//! save/load cycle.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClassCentroids, Cursor, LabelMode, PairedFeatureDataset};
use crate::denoiser::{DenoiserConfig, Fusion, SedaModel};
use crate::error::{Result, SedaError};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::trainer::{trainable_indices, AdamState, EpochStats, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a run deterministically. The fingerprint is
/// the SHA-256 of this bundle's canonical JSON encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigBundle {
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub num_classes: usize,
    pub label_mode: LabelMode,
    pub feature_dim: usize,
    pub seed: u64,
}

pub fn config_fingerprint(bundle: &ConfigBundle) -> [u8; 32] {
    let json = serde_json::to_vec(bundle).expect("config bundle always serializes");
    let digest = Sha256::digest(&json);
    digest.into()
}

/// Architecture actually instantiated after the ablation switches.
pub(crate) fn resolved_denoiser(bundle: &ConfigBundle) -> DenoiserConfig {
    let mut config = bundle.denoiser.clone();
    if !bundle.train.use_attention_interaction {
        config.fusion = Fusion::Concat;
    }
    config
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    word_pos_hi: u64,
    word_pos_lo: u64,
    stream: u64,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

impl TensorMeta {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    bundle: ConfigBundle,
    epoch: usize,
    history: Vec<EpochStats>,
    adam_step: u64,
    rng: RngState,
    centroid_counts: Vec<u32>,
    tensors: Vec<TensorMeta>,
}

pub struct Checkpoint {
    fingerprint: [u8; 32],
    header: Header,
    /// Aligned with `header.tensors`.
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_trainer<T: Scalar>(trainer: &Trainer<T>) -> Self {
        let bundle = ConfigBundle {
            denoiser: trainer.denoiser_config.clone(),
            train: trainer.config.clone(),
            num_classes: trainer.model.num_classes(),
            label_mode: trainer.model.head.label_mode,
            feature_dim: trainer.model.feature_dim(),
            seed: trainer.seed,
        };
        let mut tensors = Vec::new();
        let mut data: Vec<Vec<f32>> = Vec::new();
        let names = trainer.model.param_names();
        let shapes = trainer.model.param_shapes();
        let slices = trainer.model.param_slices();
        for ((name, shape), slice) in names.iter().zip(&shapes).zip(&slices) {
            tensors.push(TensorMeta {
                name: format!("params.{name}"),
                shape: shape.clone(),
            });
            data.push(slice.iter().map(|v| v.as_f32()).collect());
        }
        for (moment, store) in [("m", &trainer.adam.m), ("v", &trainer.adam.v)] {
            for (slot, values) in trainer.trainable.iter().zip(store.iter()) {
                tensors.push(TensorMeta {
                    name: format!("adam.{moment}.{}", names[*slot]),
                    shape: vec![values.len()],
                });
                data.push(values.iter().map(|v| v.as_f32()).collect());
            }
        }
        for (name, matrix) in [
            ("centroids.textual", &trainer.centroids.textual),
            ("centroids.visual", &trainer.centroids.visual),
        ] {
            tensors.push(TensorMeta {
                name: name.to_string(),
                shape: matrix.shape().to_vec(),
            });
            data.push(matrix.iter().copied().collect());
        }
        Checkpoint {
            fingerprint: trainer.fingerprint,
            header: Header {
                bundle,
                epoch: trainer.epoch,
                history: trainer.history.clone(),
                adam_step: trainer.adam.step,
                rng: RngState::capture(&trainer.rng),
                centroid_counts: trainer.centroids.counts.clone(),
                tensors,
            },
            data,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header_json =
            serde_json::to_vec(&self.header).expect("checkpoint header always serializes");
        let payload: usize = self.data.iter().map(|t| t.len() * 4).sum();
        let mut bytes =
            Vec::with_capacity(8 + 4 + 32 + 8 + header_json.len() + payload);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.fingerprint);
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for tensor in &self.data {
            for v in tensor {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(SedaError::format(format!(
                "{}: bad magic, not a checkpoint file",
                path.display()
            )));
        }
        let version = cur.take_u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(SedaError::format(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(cur.take(32)?);
        let header_len = cur.take_u64()? as usize;
        let header: Header = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| SedaError::format(format!("checkpoint header is not valid JSON: {e}")))?;
        if config_fingerprint(&header.bundle) != fingerprint {
            return Err(SedaError::format(
                "checkpoint fingerprint does not match its embedded configuration",
            ));
        }
        let mut data = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let mut tensor = Vec::with_capacity(meta.len());
            for _ in 0..meta.len() {
                tensor.push(cur.take_f32()?);
            }
            data.push(tensor);
        }
        if cur.remaining() != 0 {
            return Err(SedaError::format(format!(
                "{} trailing bytes after the declared tensor payload",
                cur.remaining()
            )));
        }
        Ok(Checkpoint {
            fingerprint,
            header,
            data,
        })
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn bundle(&self) -> &ConfigBundle {
        &self.header.bundle
    }

    /// Completed epochs at save time.
    pub fn epoch(&self) -> usize {
        self.header.epoch
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.header.history
    }

    fn tensor(&self, name: &str) -> Result<(&TensorMeta, &[f32])> {
        for (meta, values) in self.header.tensors.iter().zip(&self.data) {
            if meta.name == name {
                return Ok((meta, values));
            }
        }
        Err(SedaError::format(format!("checkpoint is missing tensor {name}")))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        let (meta, values) = self.tensor(name)?;
        if meta.shape.len() != 2 {
            return Err(SedaError::format(format!(
                "tensor {name} should be two-dimensional, found shape {:?}",
                meta.shape
            )));
        }
        Array2::from_shape_vec((meta.shape[0], meta.shape[1]), values.to_vec())
            .map_err(|e| SedaError::format(format!("tensor {name}: {e}")))
    }

    fn centroids(&self) -> Result<ClassCentroids> {
        Ok(ClassCentroids {
            textual: self.matrix("centroids.textual")?,
            visual: self.matrix("centroids.visual")?,
            counts: self.header.centroid_counts.clone(),
        })
    }

    /// Rebuilds the model, schedule and centroids without needing a dataset;
    /// the evaluation path.
    pub fn load_model<T: Scalar>(&self) -> Result<ModelSnapshot<T>> {
        let bundle = &self.header.bundle;
        let config = resolved_denoiser(bundle);
        // throwaway init; every parameter is overwritten from the file
        let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SedaModel::<T>::init(
            config,
            bundle.num_classes,
            bundle.label_mode,
            &mut scratch_rng,
        )?;
        self.fill_params(&mut model)?;
        let schedule = NoiseSchedule::linear(
            bundle.train.total_steps,
            T::from_f64(bundle.train.beta_start),
            T::from_f64(bundle.train.beta_end),
        )?;
        Ok(ModelSnapshot {
            model,
            schedule,
            centroids: self.centroids()?,
            bundle: bundle.clone(),
            epoch: self.header.epoch,
            history: self.header.history.clone(),
        })
    }

    fn fill_params<T: Scalar>(&self, model: &mut SedaModel<T>) -> Result<()> {
        let names = model.param_names();
        let shapes = model.param_shapes();
        let mut slices = model.param_slices_mut();
        for ((name, shape), slice) in names.iter().zip(&shapes).zip(slices.iter_mut()) {
            let key = format!("params.{name}");
            let (meta, values) = self.tensor(&key)?;
            if &meta.shape != shape {
                return Err(SedaError::format(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    meta.shape, shape
                )));
            }
            for (dst, src) in slice.iter_mut().zip(values.iter()) {
                *dst = T::from_f32(*src);
            }
        }
        Ok(())
    }

    /// Rebuilds a trainer mid-run. The dataset must be the one the run was
    /// started with; shape and class-count mismatches are rejected through
    /// the fingerprint.
    pub fn into_trainer<T: Scalar>(self, data: &PairedFeatureDataset) -> Result<Trainer<T>> {
        let bundle = self.header.bundle.clone();
        let mut trainer = Trainer::<T>::new(
            data,
            bundle.denoiser.clone(),
            bundle.train.clone(),
            bundle.seed,
        )?;
        if trainer.fingerprint != self.fingerprint {
            return Err(SedaError::invalid(
                "checkpoint fingerprint does not match the dataset and configuration it is resumed with",
            ));
        }
        self.fill_params(&mut trainer.model)?;
        let names = trainer.model.param_names();
        let mut m = Vec::with_capacity(trainer.trainable.len());
        let mut v = Vec::with_capacity(trainer.trainable.len());
        for slot in &trainer.trainable {
            let name = &names[*slot];
            let (_, m_vals) = self.tensor(&format!("adam.m.{name}"))?;
            let (_, v_vals) = self.tensor(&format!("adam.v.{name}"))?;
            m.push(m_vals.iter().map(|&x| T::from_f32(x)).collect::<Vec<T>>());
            v.push(v_vals.iter().map(|&x| T::from_f32(x)).collect::<Vec<T>>());
        }
        trainer.adam = AdamState {
            step: self.header.adam_step,
            m,
            v,
        };
        trainer.rng = self.header.rng.restore();
        trainer.epoch = self.header.epoch;
        trainer.history = self.header.history.clone();
        trainer.centroids = self.centroids()?;
        // a resumed head-only trainer must agree on which tensors train
        let expected = trainable_indices(&trainer.model, bundle.train.use_dst);
        if trainer.trainable != expected {
            return Err(SedaError::format("trainable tensor set diverged"));
        }
        Ok(trainer)
    }
}

/// A trained model plus everything evaluation needs.
pub struct ModelSnapshot<T> {
    pub model: SedaModel<T>,
    pub schedule: NoiseSchedule<T>,
    pub centroids: ClassCentroids,
    pub bundle: ConfigBundle,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::losses::StagedLossConfig;
    use tempfile::tempdir;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            feature_dim: 8,
            num_classes: 2,
            train_per_class: 12,
            test_per_class: 2,
            nuisance_dim: 2,
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    fn trainer_setup(use_dst: bool) -> (Trainer<f32>, PairedFeatureDataset) {
        let (train, _) = generate_synthetic(&spec()).unwrap();
        let mut staged = StagedLossConfig::new(8, LabelMode::Single);
        staged.beta = 1.5;
        staged.gamma = 1.5;
        let mut config = TrainConfig::new(4, staged);
        config.total_steps = 20;
        config.batch_size = 6;
        config.base_lr = 1e-3;
        config.use_dst = use_dst;
        let mut denoiser = DenoiserConfig::new(8);
        denoiser.token_count = 2;
        denoiser.decoder_hidden = vec![12];
        let trainer = Trainer::new(&train, denoiser, config, 11).unwrap();
        (trainer, train)
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let (trainer, _) = trainer_setup(true);
        let bundle = ConfigBundle {
            denoiser: trainer.denoiser_config.clone(),
            train: trainer.config.clone(),
            num_classes: 2,
            label_mode: LabelMode::Single,
            feature_dim: 8,
            seed: 11,
        };
        assert_eq!(config_fingerprint(&bundle), trainer.fingerprint());
        let mut other = bundle.clone();
        other.seed = 12;
        assert_ne!(config_fingerprint(&other), trainer.fingerprint());
    }

    #[test]
    fn round_trip_preserves_everything_bit_for_bit() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(true);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        assert!(path.ends_with("epoch_0001.ckpt"));

        let restored: Trainer<f32> = Trainer::resume(&path, &data).unwrap();
        assert_eq!(restored.model, trainer.model);
        assert_eq!(restored.adam, trainer.adam);
        assert_eq!(restored.epoch, trainer.epoch);
        assert_eq!(restored.history, trainer.history);
        assert_eq!(restored.centroids.textual, trainer.centroids.textual);
        assert_eq!(restored.centroids.counts, trainer.centroids.counts);
        let mut a = trainer.rng.clone();
        let mut b = restored.rng.clone();
        for _ in 0..16 {
            assert_eq!(
                rand::Rng::random::<u64>(&mut a),
                rand::Rng::random::<u64>(&mut b)
            );
        }
    }

    #[test]
    fn rewriting_a_read_checkpoint_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(true);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        let copy = dir.path().join("copy.ckpt");
        Checkpoint::read(&path).unwrap().write(&copy).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&copy).unwrap());
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let dir = tempdir().unwrap();
        let (mut straight, data) = trainer_setup(true);
        straight.fit(&data, None).unwrap();

        let (mut interrupted, _) = trainer_setup(true);
        interrupted.train_epoch(&data).unwrap();
        interrupted.train_epoch(&data).unwrap();
        let path = interrupted.save_checkpoint(dir.path()).unwrap();
        drop(interrupted);
        let mut resumed: Trainer<f32> = Trainer::resume(&path, &data).unwrap();
        resumed.fit(&data, None).unwrap();

        assert_eq!(straight.model, resumed.model);
        assert_eq!(straight.history, resumed.history);
        assert_eq!(straight.adam, resumed.adam);
    }

    #[test]
    fn head_only_checkpoints_carry_only_head_moments() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(false);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        let ckpt = Checkpoint::read(&path).unwrap();
        let adam_tensors: Vec<&str> = ckpt
            .header
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("adam."))
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(
            adam_tensors,
            vec![
                "adam.m.head.weight",
                "adam.m.head.bias",
                "adam.v.head.weight",
                "adam.v.head.bias"
            ]
        );
        let resumed: Trainer<f32> = Trainer::resume(&path, &data).unwrap();
        assert_eq!(resumed.trainable.len(), 2);
    }

    #[test]
    fn loaded_snapshot_predicts_like_the_trainer_model() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(true);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        let snapshot: ModelSnapshot<f32> = Checkpoint::read(&path).unwrap().load_model().unwrap();
        assert_eq!(snapshot.model, trainer.model);
        assert_eq!(snapshot.epoch, 1);
        assert_eq!(snapshot.bundle.seed, 11);
        assert_eq!(
            snapshot.schedule.total_steps(),
            trainer.schedule.total_steps()
        );
    }

    #[test]
    fn tampered_fingerprint_is_rejected() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(true);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // flip one fingerprint bit (offset: magic 8 + version 4)
        bytes[12] ^= 0x01;
        let bad = dir.path().join("tampered.ckpt");
        fs::write(&bad, bytes).unwrap();
        assert!(matches!(Checkpoint::read(&bad), Err(SedaError::Format(_))));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(true);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        let good = fs::read(&path).unwrap();

        let wrong_magic = dir.path().join("wrong_magic.ckpt");
        let mut bytes = good.clone();
        bytes[0] = b'X';
        fs::write(&wrong_magic, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::read(&wrong_magic),
            Err(SedaError::Format(_))
        ));

        let truncated = dir.path().join("truncated.ckpt");
        fs::write(&truncated, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            Checkpoint::read(&truncated),
            Err(SedaError::Format(_))
        ));

        let trailing = dir.path().join("trailing.ckpt");
        let mut bytes = good.clone();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::read(&trailing),
            Err(SedaError::Format(_))
        ));

        let future = dir.path().join("future.ckpt");
        let mut bytes = good;
        bytes[8] = 99;
        fs::write(&future, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::read(&future),
            Err(SedaError::Format(_))
        ));
        drop(data);
    }

    #[test]
    fn resume_with_a_different_configuration_is_rejected() {
        let dir = tempdir().unwrap();
        let (mut trainer, data) = trainer_setup(true);
        trainer.train_epoch(&data).unwrap();
        let path = trainer.save_checkpoint(dir.path()).unwrap();
        // same file, but the caller reconstructs with a different seed by
        // rewriting the bundle; emulate by resuming against a dataset with a
        // different class count
        let mut other_spec = spec();
        other_spec.num_classes = 3;
        other_spec.train_per_class = 8;
        let (other_train, _) = generate_synthetic(&other_spec).unwrap();
        let result: Result<Trainer<f32>> = Trainer::resume(&path, &other_train);
        assert!(result.is_err());
    }
}
