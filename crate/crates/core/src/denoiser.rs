//! Conditional reconstruction network. Given a noisy feature vector, its
//! diffusion step and the matching visual feature vector, the model predicts
//! the clean target vector.
//!
//! Pipeline per batch row:
//!
//! 1. fuse the noisy vector with the visual vector, either by token-level
//!    cross attention with a residual on the noisy stream, or by
//!    concatenation plus a linear projection (the ablation fusion)
//! 2. embed the step index sinusoidally and pass it through a two-layer MLP
//! 3. concatenate fused features with the step embedding and decode through
//!    an MLP back to feature width
//!
//! Every forward has a cached variant and a matching hand-written backward
//! pass; gradient checks against central finite differences keep them honest.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMode;
use crate::error::{Result, SedaError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// x * sigmoid(x)
    Silu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn grad<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }

}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// How the noisy stream meets the visual conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    CrossAttention,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub feature_dim: usize,
    /// Tokens per feature vector; must divide `feature_dim`.
    pub token_count: usize,
    /// Attention heads; must divide the token width.
    pub attention_heads: usize,
    /// Hidden widths of the decoder MLP (input is `2 * feature_dim`).
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub fusion: Fusion,
}

impl DenoiserConfig {
    pub fn new(feature_dim: usize) -> Self {
        DenoiserConfig {
            feature_dim,
            token_count: 8,
            attention_heads: 1,
            decoder_hidden: vec![2 * feature_dim, 2 * feature_dim],
            activation: Activation::Silu,
            fusion: Fusion::CrossAttention,
        }
    }

    pub fn token_width(&self) -> usize {
        self.feature_dim / self.token_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.feature_dim % 2 != 0 {
            return Err(SedaError::invalid(format!(
                "feature_dim must be even and at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.token_count == 0 || self.feature_dim % self.token_count != 0 {
            return Err(SedaError::invalid(format!(
                "token_count {} must divide feature_dim {}",
                self.token_count, self.feature_dim
            )));
        }
        let width = self.feature_dim / self.token_count;
        if self.attention_heads == 0 || width % self.attention_heads != 0 {
            return Err(SedaError::invalid(format!(
                "attention_heads {} must divide token width {width}",
                self.attention_heads
            )));
        }
        if self.decoder_hidden.iter().any(|&h| h == 0) {
            return Err(SedaError::invalid("decoder hidden widths must be positive"));
        }
        Ok(())
    }
}

/// One affine map, `y = x W + b` with `W` laid out input x output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((input, output), |_| uniform(rng, bound)),
            bias: Array1::from_shape_fn(output, |_| uniform(rng, bound)),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, bound: f64) -> T {
    let u: f64 = rng.random();
    T::from_f64((2.0 * u - 1.0) * bound)
}

fn init_matrix<T: Scalar, R: Rng>(input: usize, output: usize, rng: &mut R) -> Array2<T> {
    let bound = 1.0 / (input as f64).sqrt();
    Array2::from_shape_fn((input, output), |_| uniform(rng, bound))
}

/// Plain MLP with the hidden layers activated and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to each layer.
    inputs: Vec<Array2<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<T>>,
    pub output: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_cached(x).output
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> MlpCache<T> {
        let count = self.layers.len();
        let mut inputs = Vec::with_capacity(count);
        let mut pre = Vec::with_capacity(count);
        let mut cur = x.to_owned();
        for (idx, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let z = layer.forward(cur.view());
            pre.push(z.clone());
            cur = if idx + 1 < count {
                z.mapv(|v| self.activation.apply(v))
            } else {
                z
            };
        }
        MlpCache {
            inputs,
            pre,
            output: cur,
        }
    }

    /// Returns the gradient with respect to the MLP input and per-layer
    /// parameter gradients, ordered like `self.layers`.
    pub fn backward(&self, cache: &MlpCache<T>, d_output: ArrayView2<T>) -> (Array2<T>, Vec<Dense<T>>) {
        let count = self.layers.len();
        let mut grads: Vec<Dense<T>> = (0..count)
            .map(|i| Dense::zeros(self.layers[i].weight.nrows(), self.layers[i].weight.ncols()))
            .collect();
        let mut g = d_output.to_owned();
        for idx in (0..count).rev() {
            if idx + 1 < count {
                // the output of this layer went through the activation
                let z = &cache.pre[idx];
                g.zip_mut_with(z, |gv, &zv| *gv = *gv * self.activation.grad(zv));
            }
            grads[idx].weight = cache.inputs[idx].t().dot(&g);
            grads[idx].bias = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[idx].weight.t());
        }
        (g, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams<T> {
    Attention {
        w_query: Array2<T>,
        w_key: Array2<T>,
        w_value: Array2<T>,
    },
    Concat(Dense<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub label_mode: LabelMode,
}

/// Denoiser parameters plus the classifier head that rides on its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SedaModel<T> {
    pub config: DenoiserConfig,
    pub fusion: FusionParams<T>,
    pub time_w1: Array2<T>,
    pub time_w2: Array2<T>,
    pub decoder: Mlp<T>,
    pub head: ClassifierHead<T>,
}

#[derive(Debug, Clone)]
enum FusionCache<T> {
    Attention {
        q: Array2<T>,
        k: Array2<T>,
        v: Array2<T>,
        /// Row-softmax attention weights, one m x m matrix per (row, head).
        attn: Vec<Array2<T>>,
    },
    Concat {
        stacked: Array2<T>,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    x_noisy: Array2<T>,
    x_visual: Array2<T>,
    fusion: FusionCache<T>,
    sinpos: Array2<T>,
    time_pre1: Array2<T>,
    time_act1: Array2<T>,
    time_pre2: Array2<T>,
    mlp: MlpCache<T>,
    /// Predicted clean features.
    pub output: Array2<T>,
}

/// Parameter gradients, mirroring the model tensor for tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub fusion: FusionParams<T>,
    pub time_w1: Array2<T>,
    pub time_w2: Array2<T>,
    pub decoder: Vec<Dense<T>>,
    pub head: Dense<T>,
}

pub struct BackwardResult<T> {
    pub grads: Gradients<T>,
    pub d_x_noisy: Array2<T>,
    pub d_x_visual: Array2<T>,
}

impl<T: Scalar> SedaModel<T> {
    /// Fresh parameters with uniform fan-in initialization. Draw order is
    /// fixed, so the result is a pure function of the rng state.
    pub fn init<R: Rng>(
        config: DenoiserConfig,
        num_classes: usize,
        label_mode: LabelMode,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(SedaError::invalid("need at least one class"));
        }
        let d = config.feature_dim;
        let fusion = match config.fusion {
            Fusion::CrossAttention => FusionParams::Attention {
                w_query: init_matrix(d, d, rng),
                w_key: init_matrix(d, d, rng),
                w_value: init_matrix(d, d, rng),
            },
            Fusion::Concat => FusionParams::Concat(Dense::init(2 * d, d, rng)),
        };
        let time_w1 = init_matrix(d, d, rng);
        let time_w2 = init_matrix(d, d, rng);
        let mut widths = vec![2 * d];
        widths.extend_from_slice(&config.decoder_hidden);
        widths.push(d);
        let decoder = Mlp::init(&widths, config.activation, rng);
        let head_dense = Dense::init(d, num_classes, rng);
        Ok(SedaModel {
            config,
            fusion,
            time_w1,
            time_w2,
            decoder,
            head: ClassifierHead {
                weight: head_dense.weight,
                bias: head_dense.bias,
                label_mode,
            },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.ncols()
    }

    /// Sinusoidal step embedding through the two-layer time MLP.
    pub fn embed_time(&self, steps: &[usize]) -> Array2<T> {
        let (_, _, _, e) = self.time_forward(&sinusoidal(steps, self.config.feature_dim));
        e
    }

    fn time_forward(&self, sinpos: &Array2<T>) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
        let act = self.config.activation;
        let pre1 = sinpos.dot(&self.time_w1);
        let act1 = pre1.mapv(|v| act.apply(v));
        let pre2 = act1.dot(&self.time_w2);
        let e = pre2.mapv(|v| act.apply(v));
        (pre1, act1, pre2, e)
    }

    /// Token-level cross attention without the residual path.
    fn attention_core(
        &self,
        q: &Array2<T>,
        k: &Array2<T>,
        v: &Array2<T>,
    ) -> (Array2<T>, Vec<Array2<T>>) {
        let m = self.config.token_count;
        let w = self.config.token_width();
        let heads = self.config.attention_heads;
        let hw = w / heads;
        let scale = T::one() / T::from_usize(hw).sqrt();
        let rows = q.nrows();
        let mut fused = Array2::<T>::zeros((rows, self.config.feature_dim));
        let mut attn = Vec::with_capacity(rows * heads);
        for b in 0..rows {
            let qt = q.row(b).into_shape_with_order((m, w)).expect("row is contiguous");
            let kt = k.row(b).into_shape_with_order((m, w)).expect("row is contiguous");
            let vt = v.row(b).into_shape_with_order((m, w)).expect("row is contiguous");
            for h in 0..heads {
                let cols = s![.., h * hw..(h + 1) * hw];
                let qh = qt.slice(cols);
                let kh = kt.slice(cols);
                let vh = vt.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_rows(&mut scores);
                let out = scores.dot(&vh);
                for t in 0..m {
                    for j in 0..hw {
                        fused[[b, t * w + h * hw + j]] = out[[t, j]];
                    }
                }
                attn.push(scores);
            }
        }
        (fused, attn)
    }

    /// Cross-attention fusion: project, attend, flatten, then add the noisy
    /// stream back (residual).
    pub fn cross_attention_fuse(
        &self,
        x_noisy: ArrayView2<T>,
        x_visual: ArrayView2<T>,
    ) -> Result<Array2<T>> {
        let (fused, _) = self.fuse_cached(x_noisy, x_visual)?;
        Ok(fused)
    }

    fn fuse_cached(
        &self,
        x_noisy: ArrayView2<T>,
        x_visual: ArrayView2<T>,
    ) -> Result<(Array2<T>, FusionCache<T>)> {
        match &self.fusion {
            FusionParams::Attention {
                w_query,
                w_key,
                w_value,
            } => {
                let q = x_noisy.dot(w_query);
                let k = x_visual.dot(w_key);
                let v = x_visual.dot(w_value);
                let (mut fused, attn) = self.attention_core(&q, &k, &v);
                fused += &x_noisy;
                Ok((fused, FusionCache::Attention { q, k, v, attn }))
            }
            FusionParams::Concat(dense) => {
                let stacked = stack_columns(x_noisy, x_visual);
                let fused = dense.forward(stacked.view());
                Ok((fused, FusionCache::Concat { stacked }))
            }
        }
    }

    /// Predicted clean feature vectors for a batch of noisy rows.
    pub fn predict_clean(
        &self,
        x_noisy: ArrayView2<T>,
        steps: &[usize],
        x_visual: ArrayView2<T>,
    ) -> Result<Array2<T>> {
        Ok(self.forward_cached(x_noisy, steps, x_visual)?.output)
    }

    pub fn forward_cached(
        &self,
        x_noisy: ArrayView2<T>,
        steps: &[usize],
        x_visual: ArrayView2<T>,
    ) -> Result<ForwardCache<T>> {
        let d = self.config.feature_dim;
        if x_noisy.ncols() != d || x_visual.ncols() != d {
            return Err(SedaError::invalid(format!(
                "feature width mismatch: model {d}, noisy {}, visual {}",
                x_noisy.ncols(),
                x_visual.ncols()
            )));
        }
        if x_noisy.nrows() != x_visual.nrows() || steps.len() != x_noisy.nrows() {
            return Err(SedaError::invalid(format!(
                "row mismatch: {} noisy, {} visual, {} steps",
                x_noisy.nrows(),
                x_visual.nrows(),
                steps.len()
            )));
        }
        if let Some(&bad) = steps.iter().find(|&&i| i == 0) {
            return Err(SedaError::invalid(format!(
                "step {bad} is not a valid diffusion step (steps start at 1)"
            )));
        }

        let (fused, fusion_cache) = self.fuse_cached(x_noisy, x_visual)?;
        let sinpos = sinusoidal(steps, d);
        let (pre1, act1, pre2, embed) = self.time_forward(&sinpos);
        let stacked = stack_columns(fused.view(), embed.view());
        let mlp = self.decoder.forward_cached(stacked.view());
        let output = mlp.output.clone();
        for (row, &step) in steps.iter().enumerate() {
            if output.row(row).iter().any(|v| !v.is_finite()) {
                return Err(SedaError::NumericFailure {
                    step,
                    message: format!("non-finite prediction in batch row {row}"),
                });
            }
        }
        Ok(ForwardCache {
            x_noisy: x_noisy.to_owned(),
            x_visual: x_visual.to_owned(),
            fusion: fusion_cache,
            sinpos,
            time_pre1: pre1,
            time_act1: act1,
            time_pre2: pre2,
            mlp,
            output,
        })
    }

    /// Class logits for feature rows.
    pub fn classify(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        if features.ncols() != self.feature_dim() {
            return Err(SedaError::invalid(format!(
                "classifier expects width {}, got {}",
                self.feature_dim(),
                features.ncols()
            )));
        }
        let mut logits = features.dot(&self.head.weight);
        for mut row in logits.axis_iter_mut(Axis(0)) {
            row += &self.head.bias;
        }
        Ok(logits)
    }

    /// Head gradients and the gradient passed back to the features.
    pub fn head_backward(
        &self,
        features: ArrayView2<T>,
        d_logits: ArrayView2<T>,
    ) -> (Dense<T>, Array2<T>) {
        let grads = Dense {
            weight: features.t().dot(&d_logits),
            bias: d_logits.sum_axis(Axis(0)),
        };
        let d_features = d_logits.dot(&self.head.weight.t());
        (grads, d_features)
    }

    /// Backward pass through the cached forward. `d_output` is the loss
    /// gradient on the predicted features; `d_logits`, when given, chains the
    /// classifier head on top of the same prediction.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_output: ArrayView2<T>,
        d_logits: Option<ArrayView2<T>>,
    ) -> BackwardResult<T> {
        let d = self.config.feature_dim;
        let mut head_grads = Dense::zeros(d, self.num_classes());
        let mut d_out = d_output.to_owned();
        if let Some(dl) = d_logits {
            let (hg, d_feat) = self.head_backward(cache.output.view(), dl);
            head_grads = hg;
            d_out += &d_feat;
        }

        let (d_stacked, decoder_grads) = self.decoder.backward(&cache.mlp, d_out.view());
        let d_fused = d_stacked.slice(s![.., 0..d]).to_owned();
        let d_embed = d_stacked.slice(s![.., d..2 * d]).to_owned();

        // time MLP: e = act(act(s W1) W2)
        let act = self.config.activation;
        let mut d_pre2 = d_embed;
        d_pre2.zip_mut_with(&cache.time_pre2, |g, &z| *g = *g * act.grad(z));
        let time_w2_grad = cache.time_act1.t().dot(&d_pre2);
        let mut d_pre1 = d_pre2.dot(&self.time_w2.t());
        d_pre1.zip_mut_with(&cache.time_pre1, |g, &z| *g = *g * act.grad(z));
        let time_w1_grad = cache.sinpos.t().dot(&d_pre1);

        let (fusion_grads, d_x_noisy, d_x_visual) = self.fusion_backward(cache, &d_fused);

        BackwardResult {
            grads: Gradients {
                fusion: fusion_grads,
                time_w1: time_w1_grad,
                time_w2: time_w2_grad,
                decoder: decoder_grads,
                head: head_grads,
            },
            d_x_noisy,
            d_x_visual,
        }
    }

    fn fusion_backward(
        &self,
        cache: &ForwardCache<T>,
        d_fused: &Array2<T>,
    ) -> (FusionParams<T>, Array2<T>, Array2<T>) {
        let d = self.config.feature_dim;
        match (&self.fusion, &cache.fusion) {
            (
                FusionParams::Attention {
                    w_query,
                    w_key,
                    w_value,
                },
                FusionCache::Attention { q, k, v, attn },
            ) => {
                let m = self.config.token_count;
                let w = self.config.token_width();
                let heads = self.config.attention_heads;
                let hw = w / heads;
                let scale = T::one() / T::from_usize(hw).sqrt();
                let rows = cache.x_noisy.nrows();
                let mut dq = Array2::<T>::zeros((rows, d));
                let mut dk = Array2::<T>::zeros((rows, d));
                let mut dv = Array2::<T>::zeros((rows, d));
                for b in 0..rows {
                    let kt = k.row(b).into_shape_with_order((m, w)).unwrap();
                    let qt = q.row(b).into_shape_with_order((m, w)).unwrap();
                    for h in 0..heads {
                        let a = &attn[b * heads + h];
                        let cols = s![.., h * hw..(h + 1) * hw];
                        let kh = kt.slice(cols);
                        let qh = qt.slice(cols);
                        // gather dO_h from the flattened gradient
                        let mut d_out_h = Array2::<T>::zeros((m, hw));
                        for t in 0..m {
                            for j in 0..hw {
                                d_out_h[[t, j]] = d_fused[[b, t * w + h * hw + j]];
                            }
                        }
                        let vt = v.row(b).into_shape_with_order((m, w)).unwrap();
                        let vh = vt.slice(cols);
                        let d_attn = d_out_h.dot(&vh.t());
                        let dv_h = a.t().dot(&d_out_h);
                        // softmax rows: dS = A (dA - rowdot(dA, A))
                        let mut d_scores = Array2::<T>::zeros((m, m));
                        for t in 0..m {
                            let mut dot = T::zero();
                            for u in 0..m {
                                dot += d_attn[[t, u]] * a[[t, u]];
                            }
                            for u in 0..m {
                                d_scores[[t, u]] = a[[t, u]] * (d_attn[[t, u]] - dot);
                            }
                        }
                        let dq_h = d_scores.dot(&kh).mapv(|x| x * scale);
                        let dk_h = d_scores.t().dot(&qh).mapv(|x| x * scale);
                        for t in 0..m {
                            for j in 0..hw {
                                let col = t * w + h * hw + j;
                                dq[[b, col]] = dq_h[[t, j]];
                                dk[[b, col]] = dk_h[[t, j]];
                                dv[[b, col]] = dv_h[[t, j]];
                            }
                        }
                    }
                }
                let grads = FusionParams::Attention {
                    w_query: cache.x_noisy.t().dot(&dq),
                    w_key: cache.x_visual.t().dot(&dk),
                    w_value: cache.x_visual.t().dot(&dv),
                };
                // residual path feeds d_fused straight into the noisy stream
                let mut d_x_noisy = d_fused.clone();
                d_x_noisy += &dq.dot(&w_query.t());
                let mut d_x_visual = dk.dot(&w_key.t());
                d_x_visual += &dv.dot(&w_value.t());
                (grads, d_x_noisy, d_x_visual)
            }
            (FusionParams::Concat(dense), FusionCache::Concat { stacked }) => {
                let grads = Dense {
                    weight: stacked.t().dot(d_fused),
                    bias: d_fused.sum_axis(Axis(0)),
                };
                let d_stacked = d_fused.dot(&dense.weight.t());
                let d_x_noisy = d_stacked.slice(s![.., 0..d]).to_owned();
                let d_x_visual = d_stacked.slice(s![.., d..2 * d]).to_owned();
                (FusionParams::Concat(grads), d_x_noisy, d_x_visual)
            }
            _ => unreachable!("cache kind always matches the parameter kind"),
        }
    }

    /// Named parameter tensors in a fixed order shared with [`Gradients`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.fusion {
            FusionParams::Attention { .. } => {
                names.push("fusion.w_query".to_string());
                names.push("fusion.w_key".to_string());
                names.push("fusion.w_value".to_string());
            }
            FusionParams::Concat(_) => {
                names.push("fusion.weight".to_string());
                names.push("fusion.bias".to_string());
            }
        }
        names.push("time.w1".to_string());
        names.push("time.w2".to_string());
        for i in 0..self.decoder.layers.len() {
            names.push(format!("decoder.{i}.weight"));
            names.push(format!("decoder.{i}.bias"));
        }
        names.push("head.weight".to_string());
        names.push("head.bias".to_string());
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        match &self.fusion {
            FusionParams::Attention {
                w_query,
                w_key,
                w_value,
            } => {
                shapes.push(w_query.shape().to_vec());
                shapes.push(w_key.shape().to_vec());
                shapes.push(w_value.shape().to_vec());
            }
            FusionParams::Concat(dense) => {
                shapes.push(dense.weight.shape().to_vec());
                shapes.push(dense.bias.shape().to_vec());
            }
        }
        shapes.push(self.time_w1.shape().to_vec());
        shapes.push(self.time_w2.shape().to_vec());
        for layer in &self.decoder.layers {
            shapes.push(layer.weight.shape().to_vec());
            shapes.push(layer.bias.shape().to_vec());
        }
        shapes.push(self.head.weight.shape().to_vec());
        shapes.push(self.head.bias.shape().to_vec());
        shapes
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        match &self.fusion {
            FusionParams::Attention {
                w_query,
                w_key,
                w_value,
            } => {
                out.push(w_query.as_slice().unwrap());
                out.push(w_key.as_slice().unwrap());
                out.push(w_value.as_slice().unwrap());
            }
            FusionParams::Concat(dense) => {
                out.push(dense.weight.as_slice().unwrap());
                out.push(dense.bias.as_slice().unwrap());
            }
        }
        out.push(self.time_w1.as_slice().unwrap());
        out.push(self.time_w2.as_slice().unwrap());
        for layer in &self.decoder.layers {
            out.push(layer.weight.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        match &mut self.fusion {
            FusionParams::Attention {
                w_query,
                w_key,
                w_value,
            } => {
                out.push(w_query.as_slice_mut().unwrap());
                out.push(w_key.as_slice_mut().unwrap());
                out.push(w_value.as_slice_mut().unwrap());
            }
            FusionParams::Concat(dense) => {
                out.push(dense.weight.as_slice_mut().unwrap());
                out.push(dense.bias.as_slice_mut().unwrap());
            }
        }
        out.push(self.time_w1.as_slice_mut().unwrap());
        out.push(self.time_w2.as_slice_mut().unwrap());
        for layer in &mut self.decoder.layers {
            out.push(layer.weight.as_slice_mut().unwrap());
            out.push(layer.bias.as_slice_mut().unwrap());
        }
        out.push(self.head.weight.as_slice_mut().unwrap());
        out.push(self.head.bias.as_slice_mut().unwrap());
        out
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        match &self.fusion {
            FusionParams::Attention {
                w_query,
                w_key,
                w_value,
            } => {
                out.push(w_query.as_slice().unwrap());
                out.push(w_key.as_slice().unwrap());
                out.push(w_value.as_slice().unwrap());
            }
            FusionParams::Concat(dense) => {
                out.push(dense.weight.as_slice().unwrap());
                out.push(dense.bias.as_slice().unwrap());
            }
        }
        out.push(self.time_w1.as_slice().unwrap());
        out.push(self.time_w2.as_slice().unwrap());
        for layer in &self.decoder {
            out.push(layer.weight.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }
}

fn stack_columns<T: Scalar>(left: ArrayView2<T>, right: ArrayView2<T>) -> Array2<T> {
    let (rows, lc) = left.dim();
    let rc = right.ncols();
    let mut out = Array2::zeros((rows, lc + rc));
    out.slice_mut(s![.., 0..lc]).assign(&left);
    out.slice_mut(s![.., lc..lc + rc]).assign(&right);
    out
}

fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
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

/// Interleaved sinusoidal position encoding: pair k of the output carries
/// `sin(i * 10000^(-2k/d))` and `cos(i * 10000^(-2k/d))`.
fn sinusoidal<T: Scalar>(steps: &[usize], d: usize) -> Array2<T> {
    let mut out = Array2::zeros((steps.len(), d));
    for (row, &step) in steps.iter().enumerate() {
        for k in 0..d / 2 {
            let omega = 10000f64.powf(-2.0 * k as f64 / d as f64);
            let angle = step as f64 * omega;
            out[[row, 2 * k]] = T::from_f64(angle.sin());
            out[[row, 2 * k + 1]] = T::from_f64(angle.cos());
        }
    }
    out
}
