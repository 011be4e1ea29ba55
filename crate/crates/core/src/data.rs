//! Paired visual/textual feature datasets: label handling, the synthetic
//! generator and the SEDA-EMB v1 binary container.
//!
//! The generator builds a labeled benchmark where textual features are more
//! discriminative than visual ones. Each class's visual prototype shares part
//! of its textual direction, as paired modalities describe the same classes;
//! heterogeneity then comes from three knobs: a separation gap (textual
//! prototypes are pushed apart by rejection sampling, visual prototypes are
//! not), a value range gap (`scale_gap` multiplies visual samples) and
//! nuisance coordinates (the trailing `nuisance_dim` visual coordinates carry
//! class-independent noise).

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SedaError};

const MAGIC: &[u8; 8] = b"SEDAEMB1";

/// Cosine caps used when placing class prototypes on their spheres. The
/// textual cap is tight so prototypes are well separated; the visual cap only
/// rejects near-duplicates, which leaves the visual space more confusable.
const TEXTUAL_COS_CAP: f64 = 0.2;
const VISUAL_COS_CAP: f64 = 0.95;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Weight of the textual direction when deriving a class's visual prototype.
/// Paired modalities describe the same classes, so the visual prototype is a
/// blend of the class's textual direction and a fresh random one rather than
/// an independent draw; the blend keeps the cross-modal map structured while
/// the radius, spread, scale and nuisance knobs still degrade the visual side.
const PROTO_ALIGNMENT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-sample labels: class ids for single-label data, multi-hot rows for
/// multi-label data.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Single(Vec<u32>),
    Multi(Vec<Vec<bool>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> LabelMode {
        match self {
            Labels::Single(_) => LabelMode::Single,
            Labels::Multi(_) => LabelMode::Multi,
        }
    }

    /// Classes the row belongs to, ascending.
    pub fn classes_of(&self, row: usize) -> Vec<usize> {
        match self {
            Labels::Single(v) => vec![v[row] as usize],
            Labels::Multi(rows) => rows[row]
                .iter()
                .enumerate()
                .filter_map(|(c, &on)| on.then_some(c))
                .collect(),
        }
    }

    pub fn is_active(&self, row: usize, class: usize) -> bool {
        match self {
            Labels::Single(v) => v[row] as usize == class,
            Labels::Multi(rows) => rows[row].get(class).copied().unwrap_or(false),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Single(v) => Labels::Single(indices.iter().map(|&i| v[i]).collect()),
            Labels::Multi(rows) => {
                Labels::Multi(indices.iter().map(|&i| rows[i].clone()).collect())
            }
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            Labels::Single(v) => {
                for (i, &id) in v.iter().enumerate() {
                    if id as usize >= num_classes {
                        return Err(SedaError::Validation {
                            record: i,
                            message: format!("class id {id} outside 0..{num_classes}"),
                        });
                    }
                }
            }
            Labels::Multi(rows) => {
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != num_classes {
                        return Err(SedaError::Validation {
                            record: i,
                            message: format!(
                                "multi-hot width {} does not match {num_classes} classes",
                                row.len()
                            ),
                        });
                    }
                    if !row.iter().any(|&b| b) {
                        return Err(SedaError::Validation {
                            record: i,
                            message: "multi-hot row has no active class".into(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Class ids when single-label, None otherwise.
    pub fn single_ids(&self) -> Option<&[u32]> {
        match self {
            Labels::Single(v) => Some(v),
            Labels::Multi(_) => None,
        }
    }
}

/// Row-aligned visual features, optional textual features and labels. The
/// split marker is not persisted by the file format; readers infer train when
/// textual features are present.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatureDataset {
    pub visual: Array2<f32>,
    pub textual: Option<Array2<f32>>,
    pub labels: Labels,
    pub num_classes: usize,
}

impl PairedFeatureDataset {
    pub fn len(&self) -> usize {
        self.visual.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.visual.ncols()
    }

    pub fn label_mode(&self) -> LabelMode {
        self.labels.mode()
    }

    pub fn split(&self) -> Split {
        if self.textual.is_some() {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() == 0 {
            return Err(SedaError::invalid("dataset has no rows"));
        }
        if self.num_classes == 0 {
            return Err(SedaError::invalid("dataset declares zero classes"));
        }
        if let Some(t) = &self.textual {
            if t.dim() != self.visual.dim() {
                return Err(SedaError::invalid(format!(
                    "textual shape {:?} does not match visual shape {:?}",
                    t.dim(),
                    self.visual.dim()
                )));
            }
        }
        if self.labels.len() != self.len() {
            return Err(SedaError::invalid(format!(
                "{} labels for {} rows",
                self.labels.len(),
                self.len()
            )));
        }
        for (i, row) in self.visual.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SedaError::Validation {
                    record: i,
                    message: "non-finite visual feature".into(),
                });
            }
        }
        if let Some(t) = &self.textual {
            for (i, row) in t.axis_iter(Axis(0)).enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(SedaError::Validation {
                        record: i,
                        message: "non-finite textual feature".into(),
                    });
                }
            }
        }
        self.labels.validate(self.num_classes)
    }

    pub fn select(&self, indices: &[usize]) -> PairedFeatureDataset {
        PairedFeatureDataset {
            visual: self.visual.select(Axis(0), indices),
            textual: self.textual.as_ref().map(|t| t.select(Axis(0), indices)),
            labels: self.labels.select(indices),
            num_classes: self.num_classes,
        }
    }
}

/// Per-class mean features of a training split, used for the trajectory
/// diagnostic and the projection plot.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    pub textual: Array2<f32>,
    pub visual: Array2<f32>,
    pub counts: Vec<u32>,
}

impl ClassCentroids {
    pub fn of(dataset: &PairedFeatureDataset) -> Result<Self> {
        let textual = dataset
            .textual
            .as_ref()
            .ok_or_else(|| SedaError::invalid("centroids need textual features"))?;
        let d = dataset.feature_dim();
        let c = dataset.num_classes;
        let mut tex = Array2::<f64>::zeros((c, d));
        let mut vis = Array2::<f64>::zeros((c, d));
        let mut counts = vec![0u32; c];
        for row in 0..dataset.len() {
            for class in dataset.labels.classes_of(row) {
                counts[class] += 1;
                for j in 0..d {
                    tex[[class, j]] += textual[[row, j]] as f64;
                    vis[[class, j]] += dataset.visual[[row, j]] as f64;
                }
            }
        }
        for class in 0..c {
            if counts[class] > 0 {
                let n = counts[class] as f64;
                for j in 0..d {
                    tex[[class, j]] /= n;
                    vis[[class, j]] /= n;
                }
            }
        }
        Ok(ClassCentroids {
            textual: tex.mapv(|v| v as f32),
            visual: vis.mapv(|v| v as f32),
            counts,
        })
    }
}

/// Knobs for the synthetic paired-feature benchmark. `seed = 0` in a config
/// file means "inherit the run seed"; the generator itself treats every value
/// literally.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub textual_radius: f64,
    pub textual_spread: f64,
    pub visual_radius: f64,
    pub visual_spread: f64,
    pub scale_gap: f64,
    pub nuisance_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            feature_dim: 64,
            num_classes: 20,
            train_per_class: 200,
            test_per_class: 50,
            textual_radius: 5.0,
            textual_spread: 0.4,
            visual_radius: 4.0,
            visual_spread: 0.5,
            scale_gap: 1.0,
            nuisance_dim: 54,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(SedaError::invalid("feature_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(SedaError::invalid("need at least two classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(SedaError::invalid("per-class counts must be positive"));
        }
        if !(self.textual_radius > 0.0) || !(self.visual_radius > 0.0) {
            return Err(SedaError::invalid("prototype radii must be positive"));
        }
        if self.textual_spread < 0.0 || self.visual_spread < 0.0 {
            return Err(SedaError::invalid("spreads must be non-negative"));
        }
        if !(self.scale_gap > 0.0) {
            return Err(SedaError::invalid("scale_gap must be positive"));
        }
        if self.nuisance_dim > self.feature_dim {
            return Err(SedaError::invalid(format!(
                "nuisance_dim {} exceeds feature_dim {}",
                self.nuisance_dim, self.feature_dim
            )));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn place_prototypes(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    radius: f64,
    cos_cap: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(SedaError::invalid(format!(
                    "could not place {count} prototypes of dimension {dim} under cosine cap {cos_cap}"
                )));
            }
            let u = unit_vector(rng, dim);
            let ok = placed.iter().all(|p| {
                let cos: f64 = p
                    .iter()
                    .zip(&u)
                    .map(|(a, b)| a * b / (radius * radius))
                    .sum();
                cos <= cos_cap
            });
            if ok {
                placed.push(u.into_iter().map(|x| x * radius).collect());
                break;
            }
        }
    }
    Ok(placed)
}

/// Visual prototypes blend each class's textual direction with a fresh random
/// one (see `PROTO_ALIGNMENT`), then land on the radius-`radius` sphere. The
/// near-duplicate cap still applies.
fn derive_visual_prototypes(
    rng: &mut ChaCha8Rng,
    textual: &[Vec<f64>],
    dim: usize,
    radius: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(textual.len());
    for proto in textual {
        let t_norm = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(SedaError::invalid(format!(
                    "could not place {} visual prototypes of dimension {dim} under cosine cap {VISUAL_COS_CAP}",
                    textual.len()
                )));
            }
            let u = unit_vector(rng, dim);
            let mut v: Vec<f64> = proto
                .iter()
                .zip(&u)
                .map(|(t, r)| PROTO_ALIGNMENT * t / t_norm + (1.0 - PROTO_ALIGNMENT) * r)
                .collect();
            let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x *= radius / v_norm;
            }
            let ok = placed.iter().all(|p| {
                let cos: f64 = p
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b / (radius * radius))
                    .sum();
                cos <= VISUAL_COS_CAP
            });
            if ok {
                placed.push(v);
                break;
            }
        }
    }
    Ok(placed)
}

/// Generates the paired benchmark. Returns (train, test); the test split drops
/// textual features. The output is a pure function of the spec.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(PairedFeatureDataset, PairedFeatureDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let c = spec.num_classes;

    let textual_protos = place_prototypes(&mut rng, c, d, spec.textual_radius, TEXTUAL_COS_CAP)?;
    let visual_protos = derive_visual_prototypes(&mut rng, &textual_protos, d, spec.visual_radius)?;

    let nuisance_sigma = spec.scale_gap
        * (spec.visual_radius * spec.visual_radius / d as f64
            + spec.visual_spread * spec.visual_spread)
            .sqrt();
    let nuisance_start = d - spec.nuisance_dim;

    let draw_textual = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f32> {
        (0..d)
            .map(|j| (textual_protos[class][j] + spec.textual_spread * standard_normal(rng)) as f32)
            .collect()
    };
    let draw_visual = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f32> {
        let mut row: Vec<f64> = (0..d)
            .map(|j| {
                spec.scale_gap * (visual_protos[class][j] + spec.visual_spread * standard_normal(rng))
            })
            .collect();
        for slot in row.iter_mut().skip(nuisance_start) {
            *slot = nuisance_sigma * standard_normal(rng);
        }
        row.into_iter().map(|x| x as f32).collect()
    };

    let n_train = c * spec.train_per_class;
    let n_test = c * spec.test_per_class;
    let mut train_visual = Vec::with_capacity(n_train * d);
    let mut train_textual = Vec::with_capacity(n_train * d);
    let mut train_labels = Vec::with_capacity(n_train);
    let mut test_visual = Vec::with_capacity(n_test * d);
    let mut test_labels = Vec::with_capacity(n_test);

    for class in 0..c {
        for _ in 0..spec.train_per_class {
            train_textual.extend(draw_textual(&mut rng, class));
            train_visual.extend(draw_visual(&mut rng, class));
            train_labels.push(class as u32);
        }
        for _ in 0..spec.test_per_class {
            test_visual.extend(draw_visual(&mut rng, class));
            test_labels.push(class as u32);
        }
    }

    let train = PairedFeatureDataset {
        visual: Array2::from_shape_vec((n_train, d), train_visual)
            .expect("train visual shape"),
        textual: Some(
            Array2::from_shape_vec((n_train, d), train_textual).expect("train textual shape"),
        ),
        labels: Labels::Single(train_labels),
        num_classes: c,
    };
    let test = PairedFeatureDataset {
        visual: Array2::from_shape_vec((n_test, d), test_visual).expect("test visual shape"),
        textual: None,
        labels: Labels::Single(test_labels),
        num_classes: c,
    };
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// Writes a dataset in SEDA-EMB v1: magic, u32 counts, mode flags, then fixed
/// width little-endian records.
pub fn write_dataset(dataset: &PairedFeatureDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let n = dataset.len();
    let d = dataset.feature_dim();
    let c = dataset.num_classes;
    let has_textual = dataset.textual.is_some();
    let label_width = match dataset.label_mode() {
        LabelMode::Single => 4,
        LabelMode::Multi => c.div_ceil(8),
    };
    let record = d * 4 * if has_textual { 2 } else { 1 } + label_width;
    let mut bytes = Vec::with_capacity(20 + n * record);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&(c as u32).to_le_bytes());
    bytes.push(match dataset.label_mode() {
        LabelMode::Single => 0,
        LabelMode::Multi => 1,
    });
    bytes.push(has_textual as u8);
    bytes.extend_from_slice(&[0u8, 0u8]);

    for row in 0..n {
        for j in 0..d {
            bytes.extend_from_slice(&dataset.visual[[row, j]].to_le_bytes());
        }
        if let Some(t) = &dataset.textual {
            for j in 0..d {
                bytes.extend_from_slice(&t[[row, j]].to_le_bytes());
            }
        }
        match &dataset.labels {
            Labels::Single(ids) => bytes.extend_from_slice(&ids[row].to_le_bytes()),
            Labels::Multi(rows) => {
                let mut packed = vec![0u8; label_width];
                for (class, &on) in rows[row].iter().enumerate() {
                    if on {
                        packed[class / 8] |= 1 << (class % 8);
                    }
                }
                bytes.extend_from_slice(&packed);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<PairedFeatureDataset> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(SedaError::format(format!(
            "{}: bad magic, not a SEDA-EMB v1 file",
            path.display()
        )));
    }
    let n = cur.take_u32()? as usize;
    let d = cur.take_u32()? as usize;
    let c = cur.take_u32()? as usize;
    let mode = match cur.take_u8()? {
        0 => LabelMode::Single,
        1 => LabelMode::Multi,
        other => {
            return Err(SedaError::format(format!("unknown label mode byte {other}")));
        }
    };
    let has_textual = match cur.take_u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(SedaError::format(format!("bad has-textual byte {other}")));
        }
    };
    let pad = cur.take(2)?;
    if pad != [0, 0] {
        return Err(SedaError::format("non-zero padding bytes"));
    }
    if n == 0 {
        return Err(SedaError::format("dataset declares zero records"));
    }
    if d == 0 {
        return Err(SedaError::format("dataset declares zero feature width"));
    }

    let mut visual = Vec::with_capacity(n * d);
    let mut textual = if has_textual {
        Vec::with_capacity(n * d)
    } else {
        Vec::new()
    };
    let label_width = c.div_ceil(8);
    let mut single = Vec::new();
    let mut multi = Vec::new();
    for record in 0..n {
        for _ in 0..d {
            visual.push(cur.take_f32()?);
        }
        if has_textual {
            for _ in 0..d {
                textual.push(cur.take_f32()?);
            }
        }
        match mode {
            LabelMode::Single => single.push(cur.take_u32()?),
            LabelMode::Multi => {
                let packed = cur.take(label_width)?;
                let mut row = vec![false; c];
                for (byte_idx, &byte) in packed.iter().enumerate() {
                    for bit in 0..8 {
                        if byte & (1 << bit) != 0 {
                            let class = byte_idx * 8 + bit;
                            if class >= c {
                                return Err(SedaError::Validation {
                                    record,
                                    message: format!("label bit {class} outside {c} classes"),
                                });
                            }
                            row[class] = true;
                        }
                    }
                }
                multi.push(row);
            }
        }
    }
    if cur.offset != bytes.len() {
        return Err(SedaError::format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - cur.offset
        )));
    }

    let dataset = PairedFeatureDataset {
        visual: Array2::from_shape_vec((n, d), visual)
            .map_err(|e| SedaError::format(e.to_string()))?,
        textual: if has_textual {
            Some(
                Array2::from_shape_vec((n, d), textual)
                    .map_err(|e| SedaError::format(e.to_string()))?,
            )
        } else {
            None
        },
        labels: match mode {
            LabelMode::Single => Labels::Single(single),
            LabelMode::Multi => Labels::Multi(multi),
        },
        num_classes: c,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, offset: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(SedaError::format(format!(
                "truncated payload: wanted {len} bytes at offset {}, file has {}",
                self.offset,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }

    pub(crate) fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn take_f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
}
