//! Metrics, evaluation passes, the one-step baseline arm and the report
//! document. Reports are pure functions of (model snapshot, dataset,
//! options, seed): every float in them comes from a deterministic sequential
//! reduction, so two identical runs serialize to identical bytes. Wall time
//! is logged, not serialized, to keep that property.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_fingerprint, ConfigBundle, ModelSnapshot};
use crate::data::{ClassCentroids, LabelMode, Labels, PairedFeatureDataset, Split};
use crate::denoiser::{Dense, DenoiserConfig, Mlp};
use crate::error::{Result, SedaError};
use crate::losses::{cross_entropy_with_grad, reconstruction_mse_with_grad};
use crate::sampler::{align_and_classify, rank_rows, score_logits, SamplingOptions};
use crate::scalar::Scalar;
use crate::trainer::{lr_at_epoch, AdamState, TrainConfig};

/// Rows per evaluation batch; large enough to amortize the chain cost,
/// small enough to keep peak memory flat.
pub const EVAL_BATCH: usize = 256;

/// Fraction of rows whose true class appears among the k highest-scoring
/// classes. Ties are broken toward the lower class index.
pub fn topk_accuracy<T: Scalar>(
    scores: ArrayView2<T>,
    labels: &Labels,
    k: usize,
) -> Result<f64> {
    let (rows, classes) = scores.dim();
    let ids = match labels {
        Labels::Single(ids) => ids,
        Labels::Multi(_) => {
            return Err(SedaError::invalid(
                "top-k accuracy is defined for single-label batches",
            ))
        }
    };
    if ids.len() != rows {
        return Err(SedaError::invalid(format!(
            "{rows} score rows but {} labels",
            ids.len()
        )));
    }
    if rows == 0 {
        return Err(SedaError::invalid("top-k accuracy needs a nonempty batch"));
    }
    if k < 1 || k > classes {
        return Err(SedaError::invalid(format!(
            "k = {k} is outside 1..={classes}"
        )));
    }
    labels.validate(classes)?;
    let ranking = rank_rows(scores);
    let hits = ranking
        .iter()
        .zip(ids.iter())
        .filter(|(order, &label)| order[..k].contains(&(label as usize)))
        .count();
    Ok(hits as f64 / rows as f64)
}

/// Micro-averaged precision and recall at k. With H the total number of
/// true labels found in the top-k lists: precision = H / (k * M) and
/// recall = H / (total true labels).
pub fn precision_recall_at_k<T: Scalar>(
    scores: ArrayView2<T>,
    labels: &Labels,
    k: usize,
) -> Result<(f64, f64)> {
    let (rows, classes) = scores.dim();
    let active = match labels {
        Labels::Multi(rows_active) => rows_active,
        Labels::Single(_) => {
            return Err(SedaError::invalid(
                "precision/recall at k is defined for multi-label batches",
            ))
        }
    };
    if active.len() != rows {
        return Err(SedaError::invalid(format!(
            "{rows} score rows but {} label rows",
            active.len()
        )));
    }
    if rows == 0 {
        return Err(SedaError::invalid("precision/recall needs a nonempty batch"));
    }
    if k < 1 || k > classes {
        return Err(SedaError::invalid(format!(
            "k = {k} is outside 1..={classes}"
        )));
    }
    labels.validate(classes)?;
    let ranking = rank_rows(scores);
    let mut hits = 0usize;
    let mut truth = 0usize;
    for (order, row_active) in ranking.iter().zip(active.iter()) {
        hits += order[..k].iter().filter(|&&c| row_active[c]).count();
        truth += row_active.iter().filter(|&&b| b).count();
    }
    Ok((
        hits as f64 / (k * rows) as f64,
        hits as f64 / truth as f64,
    ))
}

/// Count matrix indexed (true class, predicted class).
pub fn confusion_matrix(
    predictions: &[u32],
    labels: &[u32],
    num_classes: usize,
) -> Result<Array2<u64>> {
    if predictions.len() != labels.len() {
        return Err(SedaError::invalid(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut matrix = Array2::<u64>::zeros((num_classes, num_classes));
    for (row, (&pred, &truth)) in predictions.iter().zip(labels.iter()).enumerate() {
        if pred as usize >= num_classes || truth as usize >= num_classes {
            return Err(SedaError::invalid(format!(
                "row {row}: class id out of range (pred {pred}, true {truth}, C = {num_classes})"
            )));
        }
        matrix[[truth as usize, pred as usize]] += 1;
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Full reverse chain, then classify the aligned features.
    Chain,
    /// Classify the raw visual features, bypassing the chain.
    RawVisual,
}

/// Mean distances from the evolving chain state to the true-class centroids,
/// indexed like the recorded trajectory (start state first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostic {
    /// Steps the chain visited, descending.
    pub visited_steps: Vec<usize>,
    /// One entry per trajectory state: mean distance to the textual centroid
    /// of each row's true class.
    pub mean_dist_to_textual: Vec<f64>,
    /// Same, against the visual centroids.
    pub mean_dist_to_visual: Vec<f64>,
    /// Mean distance from the raw visual features to the textual centroids,
    /// the no-alignment reference point.
    pub raw_visual_dist_to_textual: f64,
}

/// Two-dimensional views of the feature clouds under a shared deterministic
/// linear projection (top two principal directions of the combined set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionScatter {
    pub aligned: Vec<[f64; 2]>,
    pub visual: Vec<[f64; 2]>,
    pub textual_centroids: Vec<[f64; 2]>,
    /// One class id per aligned/visual row, for coloring. Multi-label rows
    /// use their lowest active class.
    pub point_classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Hex SHA-256 of the configuration bundle the model was trained under.
    pub fingerprint: String,
    pub seed: u64,
    pub mode: EvalMode,
    pub label_mode: LabelMode,
    pub num_classes: usize,
    pub test_rows: usize,
    pub noise_scale: f64,
    pub stride: usize,
    /// Metric name to value; keys are ordered, so serialization is stable.
    pub metrics: BTreeMap<String, f64>,
    /// Single-label only: counts indexed (true, predicted).
    pub confusion: Option<Vec<Vec<u64>>>,
    pub trajectory: Option<TrajectoryDiagnostic>,
    pub projection: Option<ProjectionScatter>,
    /// Measured, logged, deliberately not serialized: reports must be
    /// byte-identical across equally seeded runs.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| SedaError::format(format!("invalid report document: {e}")))
    }

    /// Scalar metric lookup, for tests and comparisons.
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn hex_fingerprint(fingerprint: &[u8; 32]) -> String {
    fingerprint.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the model over the test set in batches and assembles the report.
/// `seed` is recorded as metadata; the rng drives the chain start states and
/// noise injections.
pub fn evaluate<T: Scalar, R: Rng>(
    snapshot: &ModelSnapshot<T>,
    data: &PairedFeatureDataset,
    mode: EvalMode,
    options: &SamplingOptions,
    rng: &mut R,
    seed: u64,
) -> Result<EvaluationReport> {
    let started = Instant::now();
    options.validate()?;
    data.validate()?;
    let model = &snapshot.model;
    if data.label_mode() != model.head.label_mode {
        return Err(SedaError::invalid(
            "dataset label mode does not match the classifier head",
        ));
    }
    if data.feature_dim() != model.feature_dim() {
        return Err(SedaError::invalid(format!(
            "dataset width {} does not match model width {}",
            data.feature_dim(),
            model.feature_dim()
        )));
    }
    let rows = data.len();
    let classes = model.num_classes();
    let mut scores = Array2::<f64>::zeros((rows, classes));
    let mut aligned = Array2::<f64>::zeros((rows, data.feature_dim()));
    let mut trajectory_sums: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut visited: Vec<usize> = Vec::new();

    let order: Vec<usize> = (0..rows).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let visual = data.visual.select(Axis(0), chunk).mapv(T::from_f32);
        let chunk_labels = data.labels.select(chunk);
        match mode {
            EvalMode::Chain => {
                let out = align_and_classify(model, &snapshot.schedule, visual.view(), rng, options)?;
                for (sub, &row) in chunk.iter().enumerate() {
                    for c in 0..classes {
                        scores[[row, c]] = out.scores[[sub, c]].as_f64();
                    }
                    for d in 0..data.feature_dim() {
                        aligned[[row, d]] = out.aligned[[sub, d]].as_f64();
                    }
                }
                if let Some(batch_trajectory) = &out.trajectory {
                    let (textual_sums, visual_sums) = trajectory_sums.get_or_insert_with(|| {
                        (
                            vec![0.0; batch_trajectory.len()],
                            vec![0.0; batch_trajectory.len()],
                        )
                    });
                    for (pos, state) in batch_trajectory.iter().enumerate() {
                        let (t_sum, v_sum) =
                            centroid_distance_sums(state.view(), &chunk_labels, &snapshot.centroids);
                        textual_sums[pos] += t_sum;
                        visual_sums[pos] += v_sum;
                    }
                    if visited.is_empty() {
                        visited = crate::sampler::visited_steps(
                            snapshot.schedule.total_steps(),
                            options.stride,
                        );
                    }
                }
            }
            EvalMode::RawVisual => {
                let logits = model.classify(visual.view())?;
                let batch_scores = score_logits(logits.view(), model.head.label_mode);
                for (sub, &row) in chunk.iter().enumerate() {
                    for c in 0..classes {
                        scores[[row, c]] = batch_scores[[sub, c]].as_f64();
                    }
                    for d in 0..data.feature_dim() {
                        aligned[[row, d]] = visual[[sub, d]].as_f64();
                    }
                }
            }
        }
    }

    let trajectory = trajectory_sums.map(|(t_sums, v_sums)| {
        let n = rows as f64;
        let (raw_sum, _) = centroid_distance_sums_f32(data.visual.view(), &data.labels, &snapshot.centroids);
        TrajectoryDiagnostic {
            visited_steps: visited,
            mean_dist_to_textual: t_sums.iter().map(|s| s / n).collect(),
            mean_dist_to_visual: v_sums.iter().map(|s| s / n).collect(),
            raw_visual_dist_to_textual: raw_sum / n,
        }
    });

    let metrics = collect_metrics(scores.view(), &data.labels)?;
    let confusion = match &data.labels {
        Labels::Single(ids) => {
            let ranking = rank_rows(scores.view());
            let predictions: Vec<u32> = ranking.iter().map(|order| order[0] as u32).collect();
            let matrix = confusion_matrix(&predictions, ids, classes)?;
            Some(
                matrix
                    .axis_iter(Axis(0))
                    .map(|row| row.to_vec())
                    .collect::<Vec<Vec<u64>>>(),
            )
        }
        Labels::Multi(_) => None,
    };
    let projection = Some(project_feature_clouds(
        aligned.view(),
        data,
        &snapshot.centroids,
    ));

    let report = EvaluationReport {
        fingerprint: hex_fingerprint(&config_fingerprint(&snapshot.bundle)),
        seed,
        mode,
        label_mode: data.label_mode(),
        num_classes: classes,
        test_rows: rows,
        noise_scale: options.noise_scale,
        stride: options.stride,
        metrics,
        confusion,
        trajectory,
        projection,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "evaluated {rows} rows in {:.2}s (mode {:?})",
        report.wall_time_seconds,
        mode
    );
    Ok(report)
}

fn collect_metrics(scores: ArrayView2<f64>, labels: &Labels) -> Result<BTreeMap<String, f64>> {
    let classes = scores.ncols();
    let mut metrics = BTreeMap::new();
    match labels {
        Labels::Single(_) => {
            metrics.insert("acc@1".to_string(), topk_accuracy(scores, labels, 1)?);
            if classes >= 5 {
                metrics.insert("acc@5".to_string(), topk_accuracy(scores, labels, 5)?);
            }
        }
        Labels::Multi(_) => {
            let (p1, r1) = precision_recall_at_k(scores, labels, 1)?;
            metrics.insert("pre@1".to_string(), p1);
            metrics.insert("rec@1".to_string(), r1);
            if classes >= 5 {
                let (p5, r5) = precision_recall_at_k(scores, labels, 5)?;
                metrics.insert("pre@5".to_string(), p5);
                metrics.insert("rec@5".to_string(), r5);
            }
        }
    }
    Ok(metrics)
}

/// Sum over rows of the Euclidean distance to the centroid of the row's true
/// class; multi-label rows average over their active classes. Returns the
/// (textual, visual) centroid sums.
fn centroid_distance_sums<T: Scalar>(
    state: ArrayView2<T>,
    labels: &Labels,
    centroids: &ClassCentroids,
) -> (f64, f64) {
    let mut textual_sum = 0.0;
    let mut visual_sum = 0.0;
    for (row, feat) in state.axis_iter(Axis(0)).enumerate() {
        let classes = labels.classes_of(row);
        let mut t_row = 0.0;
        let mut v_row = 0.0;
        for &class in &classes {
            t_row += distance_to_centroid(&feat, centroids.textual.row(class));
            v_row += distance_to_centroid(&feat, centroids.visual.row(class));
        }
        textual_sum += t_row / classes.len() as f64;
        visual_sum += v_row / classes.len() as f64;
    }
    (textual_sum, visual_sum)
}

fn centroid_distance_sums_f32(
    state: ArrayView2<f32>,
    labels: &Labels,
    centroids: &ClassCentroids,
) -> (f64, f64) {
    let as_f64 = state.mapv(|v| v as f64);
    centroid_distance_sums(as_f64.view(), labels, centroids)
}

fn distance_to_centroid<T: Scalar>(
    feat: &ndarray::ArrayView1<T>,
    centroid: ndarray::ArrayView1<f32>,
) -> f64 {
    feat.iter()
        .zip(centroid.iter())
        .map(|(&a, &c)| {
            let d = a.as_f64() - c as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Top two principal directions of the combined cloud via power iteration
/// with deflation. Fully deterministic: fixed iteration budget, fixed start
/// vectors, sign anchored on the largest-magnitude component.
pub fn principal_directions(data: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let d = data.ncols();
    let n = data.nrows().max(1) as f64;
    let mean = data.sum_axis(Axis(0)) / n;
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / n;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EDA);
    let mut directions = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut v = Array1::from_shape_fn(d, |_| f64::standard_normal(&mut rng));
        normalize(&mut v);
        for _ in 0..200 {
            let mut next = cov.dot(&v);
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-30 {
                break;
            }
            next.mapv_inplace(|x| x / norm);
            let delta: f64 = next
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if delta < 1e-13 {
                break;
            }
        }
        anchor_sign(&mut v);
        let eigenvalue = v.dot(&cov.dot(&v));
        // deflate so the next iteration converges to the runner-up
        let outer = outer_product(&v, &v);
        cov = &cov - &(outer * eigenvalue);
        directions.push(v);
    }
    let second = directions.pop().unwrap();
    let first = directions.pop().unwrap();
    (first, second)
}

fn normalize(v: &mut Array1<f64>) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
}

fn anchor_sign(v: &mut Array1<f64>) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

fn outer_product(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

fn project_feature_clouds(
    aligned: ArrayView2<f64>,
    data: &PairedFeatureDataset,
    centroids: &ClassCentroids,
) -> ProjectionScatter {
    let visual = data.visual.mapv(|v| v as f64);
    let textual = centroids.textual.mapv(|v| v as f64);
    let total_rows = aligned.nrows() + visual.nrows() + textual.nrows();
    let mut combined = Array2::<f64>::zeros((total_rows, aligned.ncols()));
    combined
        .slice_mut(ndarray::s![..aligned.nrows(), ..])
        .assign(&aligned);
    combined
        .slice_mut(ndarray::s![aligned.nrows()..aligned.nrows() + visual.nrows(), ..])
        .assign(&visual);
    combined
        .slice_mut(ndarray::s![aligned.nrows() + visual.nrows().., ..])
        .assign(&textual);
    let (first, second) = principal_directions(combined.view());
    let project = |m: ArrayView2<f64>| -> Vec<[f64; 2]> {
        m.axis_iter(Axis(0))
            .map(|row| [row.dot(&first), row.dot(&second)])
            .collect()
    };
    let point_classes = (0..data.len())
        .map(|row| data.labels.classes_of(row)[0] as u32)
        .collect();
    ProjectionScatter {
        aligned: project(aligned),
        visual: project(visual.view()),
        textual_centroids: project(textual.view()),
        point_classes,
    }
}

/// A feed-forward projector trained to map visual features straight onto
/// textual features in one shot, plus the same classifier-head construction.
/// This is the control arm the chain is compared against.
pub struct BaselineModel<T> {
    pub projector: Mlp<T>,
    pub head: Dense<T>,
}

impl<T: Scalar> BaselineModel<T> {
    fn param_count(&self) -> usize {
        2 * self.projector.layers.len() + 2
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.param_count());
        for layer in &self.projector.layers {
            sizes.push(layer.weight.len());
            sizes.push(layer.bias.len());
        }
        sizes.push(self.head.weight.len());
        sizes.push(self.head.bias.len());
        sizes
    }
}

/// Trains the one-step projector under the same optimizer settings and
/// evaluates it with the same metrics. The reconstruction and class terms
/// reuse the staged-loss weights of the reconstruction branch.
pub fn run_baseline_onestep<T: Scalar>(
    train: &PairedFeatureDataset,
    test: &PairedFeatureDataset,
    denoiser: &DenoiserConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    let started = Instant::now();
    config.validate()?;
    train.validate()?;
    test.validate()?;
    if train.split() != Split::Train {
        return Err(SedaError::invalid("the baseline needs textual training targets"));
    }
    if train.feature_dim() != test.feature_dim() || train.num_classes != test.num_classes {
        return Err(SedaError::invalid("train and test sets disagree on shape"));
    }
    let d = train.feature_dim();
    let classes = train.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // mirror the decoder's hidden widths so both arms get comparable capacity
    let mut widths = vec![d];
    widths.extend_from_slice(&denoiser.decoder_hidden);
    widths.push(d);
    let mut model = BaselineModel {
        projector: Mlp::init(&widths, denoiser.activation, &mut rng),
        head: init_head(d, classes, &mut rng),
    };
    let mut adam = AdamState::<T>::zeros(&model.param_sizes());
    let alpha2 = T::from_f64(config.staged.alpha2);
    let gamma = T::from_f64(config.staged.gamma);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.base_lr, epoch, config.lr_halving_period_epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let visual = train.visual.select(Axis(0), chunk).mapv(T::from_f32);
            let textual = train
                .textual
                .as_ref()
                .expect("validated above")
                .select(Axis(0), chunk)
                .mapv(T::from_f32);
            let labels = train.labels.select(chunk);

            let cache = model.projector.forward_cached(visual.view());
            let logits = affine(&cache.output, &model.head);
            let (_, mse_grad) = reconstruction_mse_with_grad(cache.output.view(), textual.view())?;
            let (_, ce_grad) = cross_entropy_with_grad(logits.view(), &labels)?;

            let d_logits = ce_grad.mapv(|g| g * gamma);
            let head_weight_grad = cache.output.t().dot(&d_logits);
            let head_bias_grad = d_logits.sum_axis(Axis(0));
            let mut d_pred = mse_grad.mapv(|g| g * alpha2);
            d_pred += &d_logits.dot(&model.head.weight.t());
            let (_, layer_grads) = model.projector.backward(&cache, d_pred.view());

            let mut grads: Vec<&[T]> = Vec::with_capacity(model.param_count());
            for layer in &layer_grads {
                grads.push(layer.weight.as_slice().unwrap());
                grads.push(layer.bias.as_slice().unwrap());
            }
            grads.push(head_weight_grad.as_slice().unwrap());
            grads.push(head_bias_grad.as_slice().unwrap());
            let mut params: Vec<&mut [T]> = Vec::with_capacity(model.param_count());
            for layer in &mut model.projector.layers {
                params.push(layer.weight.as_slice_mut().unwrap());
                params.push(layer.bias.as_slice_mut().unwrap());
            }
            params.push(model.head.weight.as_slice_mut().unwrap());
            params.push(model.head.bias.as_slice_mut().unwrap());
            adam.update(&mut params, &grads, lr, config.weight_decay);
        }
    }

    // evaluate: project the test visual features once, classify, score
    let rows = test.len();
    let mut scores = Array2::<f64>::zeros((rows, classes));
    let mut projected = Array2::<f64>::zeros((rows, d));
    let order: Vec<usize> = (0..rows).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let visual = test.visual.select(Axis(0), chunk).mapv(T::from_f32);
        let out = model.projector.forward(visual.view());
        let logits = affine(&out, &model.head);
        let batch_scores = score_logits(logits.view(), test.label_mode());
        for (sub, &row) in chunk.iter().enumerate() {
            for c in 0..classes {
                scores[[row, c]] = batch_scores[[sub, c]].as_f64();
            }
            for j in 0..d {
                projected[[row, j]] = out[[sub, j]].as_f64();
            }
        }
    }
    let metrics = collect_metrics(scores.view(), &test.labels)?;
    let confusion = match &test.labels {
        Labels::Single(ids) => {
            let ranking = rank_rows(scores.view());
            let predictions: Vec<u32> = ranking.iter().map(|order| order[0] as u32).collect();
            Some(
                confusion_matrix(&predictions, ids, classes)?
                    .axis_iter(Axis(0))
                    .map(|row| row.to_vec())
                    .collect::<Vec<Vec<u64>>>(),
            )
        }
        Labels::Multi(_) => None,
    };
    let centroids = ClassCentroids::of(train)?;
    let projection = Some(project_feature_clouds(projected.view(), test, &centroids));
    let bundle = ConfigBundle {
        denoiser: denoiser.clone(),
        train: config.clone(),
        num_classes: classes,
        label_mode: train.label_mode(),
        feature_dim: d,
        seed,
    };
    let report = EvaluationReport {
        fingerprint: hex_fingerprint(&config_fingerprint(&bundle)),
        seed,
        mode: EvalMode::RawVisual,
        label_mode: test.label_mode(),
        num_classes: classes,
        test_rows: rows,
        noise_scale: 0.0,
        stride: 1,
        metrics,
        confusion,
        trajectory: None,
        projection,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "baseline trained {} epochs and evaluated {rows} rows in {:.2}s",
        config.epochs,
        report.wall_time_seconds
    );
    Ok(report)
}

fn init_head<T: Scalar, R: Rng>(d: usize, classes: usize, rng: &mut R) -> Dense<T> {
    // same fan-in rule the main model uses
    let probe = Mlp::init(&[d, classes], crate::denoiser::Activation::Identity, rng);
    let layer = probe.layers.into_iter().next().unwrap();
    Dense {
        weight: layer.weight,
        bias: layer.bias,
    }
}

fn affine<T: Scalar>(features: &Array2<T>, head: &Dense<T>) -> Array2<T> {
    head.forward(features.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::losses::StagedLossConfig;
    use crate::trainer::Trainer;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn topk_hand_case_counts_hits_exactly() {
        // row 0: true class 0 ranked first; row 1: true class 1 ranked
        // second; row 2: true class 2 ranked second
        let scores = array![
            [0.9f64, 0.05, 0.05],
            [0.6, 0.3, 0.1],
            [0.1, 0.5, 0.4]
        ];
        let labels = Labels::Single(vec![0, 1, 2]);
        assert_relative_eq!(
            topk_accuracy(scores.view(), &labels, 1).unwrap(),
            1.0 / 3.0
        );
        assert_relative_eq!(
            topk_accuracy(scores.view(), &labels, 2).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_eq!(topk_accuracy(scores.view(), &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn topk_breaks_ties_toward_the_lower_index() {
        let scores = array![[0.5f64, 0.5, 0.0]];
        // class 1 ties with class 0; the tie goes to class 0, so a true
        // label of 1 misses at k = 1
        let labels = Labels::Single(vec![1]);
        assert_eq!(topk_accuracy(scores.view(), &labels, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(scores.view(), &labels, 2).unwrap(), 1.0);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let scores = array![[0.5f64, 0.5]];
        let labels = Labels::Single(vec![0]);
        assert!(topk_accuracy(scores.view(), &labels, 0).is_err());
        assert!(topk_accuracy(scores.view(), &labels, 3).is_err());
    }

    #[test]
    fn precision_recall_hand_case() {
        // one sample, true labels {0, 1}, top-2 picks {0, 2}
        let scores = array![[0.9f64, 0.1, 0.5]];
        let labels = Labels::Multi(vec![vec![true, true, false]]);
        let (p, r) = precision_recall_at_k(scores.view(), &labels, 2).unwrap();
        assert_relative_eq!(p, 0.5);
        assert_relative_eq!(r, 0.5);
    }

    #[test]
    fn recall_is_one_when_every_true_label_ranks_on_top() {
        let scores = array![[0.9f64, 0.8, 0.1, 0.0], [0.2, 0.9, 0.05, 0.01]];
        let labels = Labels::Multi(vec![
            vec![true, true, false, false],
            vec![false, true, false, false],
        ]);
        let (_, r) = precision_recall_at_k(scores.view(), &labels, 2).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn empty_label_rows_are_rejected() {
        let scores = array![[0.9f64, 0.1]];
        let labels = Labels::Multi(vec![vec![false, false]]);
        assert!(precision_recall_at_k(scores.view(), &labels, 1).is_err());
    }

    #[test]
    fn confusion_diagonal_for_perfect_predictions() {
        let labels = vec![0u32, 1, 1, 2, 2, 2];
        let matrix = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(matrix[[0, 0]], 1);
        assert_eq!(matrix[[1, 1]], 2);
        assert_eq!(matrix[[2, 2]], 3);
        assert_eq!(matrix.sum(), 6);
    }

    #[test]
    fn confusion_places_the_single_miss_where_expected() {
        let truth = vec![0u32, 0, 1, 1];
        let preds = vec![0u32, 1, 1, 1];
        let matrix = confusion_matrix(&preds, &truth, 2).unwrap();
        assert_eq!(matrix[[0, 1]], 1);
        assert_eq!(matrix[[0, 0]], 1);
        assert_eq!(matrix[[1, 1]], 2);
        // row sums are the ground-truth class counts
        assert_eq!(matrix.row(0).sum(), 2);
        assert_eq!(matrix.row(1).sum(), 2);
    }

    #[test]
    fn confusion_rejects_out_of_range_ids() {
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
        assert!(confusion_matrix(&[0], &[5], 2).is_err());
    }

    #[test]
    fn principal_directions_find_the_dominant_axis() {
        // points spread along (1, 1, 0) with slight noise in other axes
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Array2::<f64>::zeros((400, 3));
        for i in 0..400 {
            let t = f64::standard_normal(&mut rng);
            rows[[i, 0]] = 5.0 * t + 0.01 * f64::standard_normal(&mut rng);
            rows[[i, 1]] = 5.0 * t + 0.01 * f64::standard_normal(&mut rng);
            rows[[i, 2]] = 0.1 * f64::standard_normal(&mut rng);
        }
        let (first, second) = principal_directions(rows.view());
        let diag = 1.0 / 2.0f64.sqrt();
        let cos = (first[0] * diag + first[1] * diag).abs();
        assert!(cos > 0.999, "first direction {first:?}");
        let dot: f64 = first.dot(&second);
        assert!(dot.abs() < 1e-6, "directions not orthogonal: {dot}");
        // deterministic across calls
        let (again, _) = principal_directions(rows.view());
        assert_eq!(first, again);
    }

    fn quick_snapshot() -> (ModelSnapshot<f64>, PairedFeatureDataset, PairedFeatureDataset) {
        let spec = SyntheticSpec {
            feature_dim: 8,
            num_classes: 3,
            train_per_class: 12,
            test_per_class: 4,
            nuisance_dim: 2,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let mut staged = StagedLossConfig::new(5, LabelMode::Single);
        staged.beta = 1.5;
        staged.gamma = 1.5;
        let mut config = TrainConfig::new(2, staged);
        config.total_steps = 15;
        config.batch_size = 12;
        let mut denoiser = DenoiserConfig::new(8);
        denoiser.token_count = 2;
        denoiser.decoder_hidden = vec![12];
        let mut trainer = Trainer::<f64>::new(&train, denoiser, config, 13).unwrap();
        trainer.fit(&train, None).unwrap();
        (trainer.snapshot(), train, test)
    }

    #[test]
    fn chain_evaluation_produces_a_complete_report() {
        let (snapshot, _, test) = quick_snapshot();
        let options = SamplingOptions {
            noise_scale: 1.0,
            stride: 1,
            record_trajectory: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let report = evaluate(&snapshot, &test, EvalMode::Chain, &options, &mut rng, 50).unwrap();
        assert_eq!(report.test_rows, 12);
        assert_eq!(report.num_classes, 3);
        for (name, value) in &report.metrics {
            assert!(
                (0.0..=1.0).contains(value),
                "{name} = {value} outside [0, 1]"
            );
        }
        assert!(report.metrics.contains_key("acc@1"));
        let confusion = report.confusion.as_ref().unwrap();
        // row sums equal per-class test counts (4 each)
        for row in confusion {
            assert_eq!(row.iter().sum::<u64>(), 4);
        }
        let trajectory = report.trajectory.as_ref().unwrap();
        assert_eq!(trajectory.visited_steps.len(), 15);
        assert_eq!(trajectory.mean_dist_to_textual.len(), 16);
        assert!(trajectory.raw_visual_dist_to_textual > 0.0);
        assert!(report.projection.is_some());
    }

    #[test]
    fn equal_seeds_give_identical_reports() {
        let (snapshot, _, test) = quick_snapshot();
        let options = SamplingOptions::default();
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let a = evaluate(&snapshot, &test, EvalMode::Chain, &options, &mut rng_a, 9).unwrap();
        let b = evaluate(&snapshot, &test, EvalMode::Chain, &options, &mut rng_b, 9).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn raw_visual_mode_skips_the_chain_entirely() {
        let (snapshot, _, test) = quick_snapshot();
        let options = SamplingOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone();
        let report =
            evaluate(&snapshot, &test, EvalMode::RawVisual, &options, &mut rng, 1).unwrap();
        assert!(report.trajectory.is_none());
        assert!(report.metrics.contains_key("acc@1"));
        // raw mode consumes no randomness
        let mut same = before;
        assert_eq!(same.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn report_json_round_trips() {
        let (snapshot, _, test) = quick_snapshot();
        let options = SamplingOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let report = evaluate(&snapshot, &test, EvalMode::Chain, &options, &mut rng, 2).unwrap();
        let parsed = EvaluationReport::from_json(&report.to_json()).unwrap();
        assert_eq!(parsed.metrics, report.metrics);
        assert_eq!(parsed.confusion, report.confusion);
        assert_eq!(parsed.wall_time_seconds, 0.0);
    }

    #[test]
    fn baseline_beats_chance_on_an_easy_problem() {
        let spec = SyntheticSpec {
            feature_dim: 8,
            num_classes: 2,
            train_per_class: 40,
            test_per_class: 10,
            textual_radius: 2.0,
            textual_spread: 0.3,
            visual_radius: 2.0,
            visual_spread: 0.3,
            scale_gap: 1.0,
            nuisance_dim: 0,
            seed: 8,
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let staged = StagedLossConfig::new(5, LabelMode::Single);
        let mut config = TrainConfig::new(40, staged);
        config.total_steps = 10;
        config.base_lr = 5e-3;
        config.batch_size = 16;
        config.lr_halving_period_epochs = 16;
        let denoiser = DenoiserConfig::new(8);
        let report =
            run_baseline_onestep::<f64>(&train, &test, &denoiser, &config, 21).unwrap();
        let acc = report.metric("acc@1").unwrap();
        assert!(acc > 0.5, "baseline acc@1 = {acc}");
        assert_eq!(report.test_rows, 20);
        assert!(report.confusion.is_some());
    }

    proptest! {
        #[test]
        fn topk_accuracy_is_monotone_in_k(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = 1 + (seed as usize % 6);
            let classes = 2 + (seed as usize % 5);
            let scores = Array2::from_shape_fn((rows, classes), |_| f64::standard_normal(&mut rng));
            let labels = Labels::Single(
                (0..rows).map(|_| rng.random_range(0..classes as u32)).collect(),
            );
            let mut last = 0.0;
            for k in 1..=classes {
                let acc = topk_accuracy(scores.view(), &labels, k).unwrap();
                prop_assert!(acc + 1e-12 >= last);
                last = acc;
            }
            prop_assert_eq!(last, 1.0);
        }

        #[test]
        fn precision_recall_matches_a_set_intersection_oracle(seed in 0u64..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let rows = 1 + (seed as usize % 8);
            let classes = 2 + (seed as usize % 6);
            let k = 1 + (seed as usize % classes);
            let scores = Array2::from_shape_fn((rows, classes), |_| f64::standard_normal(&mut rng));
            let mut active = Vec::new();
            for _ in 0..rows {
                let mut row: Vec<bool> = (0..classes).map(|_| rng.random::<f64>() < 0.4).collect();
                if row.iter().all(|&b| !b) {
                    let fix = rng.random_range(0..classes);
                    row[fix] = true;
                }
                active.push(row);
            }
            let labels = Labels::Multi(active.clone());
            let (p, r) = precision_recall_at_k(scores.view(), &labels, k).unwrap();

            // oracle: explicit per-row top-k set built by sorting
            let mut hits = 0usize;
            let mut truth = 0usize;
            for (row, row_active) in active.iter().enumerate() {
                let mut order: Vec<usize> = (0..classes).collect();
                order.sort_by(|&a, &b| {
                    scores[[row, b]].partial_cmp(&scores[[row, a]]).unwrap().then(a.cmp(&b))
                });
                let top: std::collections::BTreeSet<usize> = order[..k].iter().copied().collect();
                let want: std::collections::BTreeSet<usize> = row_active
                    .iter()
                    .enumerate()
                    .filter_map(|(c, &on)| on.then_some(c))
                    .collect();
                hits += top.intersection(&want).count();
                truth += want.len();
            }
            prop_assert!((p - hits as f64 / (k * rows) as f64).abs() < 1e-12);
            prop_assert!((r - hits as f64 / truth as f64).abs() < 1e-12);
        }
    }
}
