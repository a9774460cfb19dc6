//! Toy speech-grader head: additive attention pooling over frame features,
//! cosine similarity to one learnable prototype per CEFR level, and a
//! single-layer MLP over the concatenation `[x; s]`.

mod train;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use train::{
    batch_loss_and_gradients, dev_macro_f1, train, AdamW, EpochRecord, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Regression,
    Classification,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(HeadMode::Regression),
            "classification" => Ok(HeadMode::Classification),
            other => Err(Error::InvalidConfig(format!("unknown head mode {other:?}"))),
        }
    }
}

/// A `T x d` matrix of frame features with an optional score label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    frames: Array2<f64>,
    label: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Array2<f64>, label: Option<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "frame sequence must be non-empty, got {:?}",
                frames.dim()
            )));
        }
        if let Some(&bad) = frames.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScore(bad));
        }
        if let Some(l) = label.filter(|l| !l.is_finite()) {
            return Err(Error::NonFiniteScore(l));
        }
        Ok(FrameSequence {
            frames: frames.as_standard_layout().into_owned(),
            label,
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn label(&self) -> Option<f64> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Unweighted mean over frames.
    pub fn mean_frame(&self) -> Array1<f64> {
        self.frames.mean_axis(Axis(0)).expect("non-empty")
    }
}

/// The learnable tensors of the head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// `d_a x d`
    pub attn_w: Array2<f64>,
    pub attn_b: Array1<f64>,
    /// attention context vector
    pub attn_u: Array1<f64>,
    /// `N x d`, one row per level
    pub prototypes: Array2<f64>,
    /// `out x (d + N)`
    pub mlp_w: Array2<f64>,
    pub mlp_b: Array1<f64>,
}

impl HeadWeights {
    pub const NAMES: [&'static str; 6] =
        ["attn_w", "attn_b", "attn_u", "prototypes", "mlp_w", "mlp_b"];

    pub fn zeros_like(other: &HeadWeights) -> HeadWeights {
        HeadWeights {
            attn_w: Array2::zeros(other.attn_w.raw_dim()),
            attn_b: Array1::zeros(other.attn_b.raw_dim()),
            attn_u: Array1::zeros(other.attn_u.raw_dim()),
            prototypes: Array2::zeros(other.prototypes.raw_dim()),
            mlp_w: Array2::zeros(other.mlp_w.raw_dim()),
            mlp_b: Array1::zeros(other.mlp_b.raw_dim()),
        }
    }

    /// Tensors as flat slices, in [`HeadWeights::NAMES`] order.
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.attn_w.as_slice().expect("standard layout"),
            self.attn_b.as_slice().expect("standard layout"),
            self.attn_u.as_slice().expect("standard layout"),
            self.prototypes.as_slice().expect("standard layout"),
            self.mlp_w.as_slice().expect("standard layout"),
            self.mlp_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.attn_w.as_slice_mut().expect("standard layout"),
            self.attn_b.as_slice_mut().expect("standard layout"),
            self.attn_u.as_slice_mut().expect("standard layout"),
            self.prototypes.as_slice_mut().expect("standard layout"),
            self.mlp_w.as_slice_mut().expect("standard layout"),
            self.mlp_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for slice in self.slices() {
            slice.len().hash(&mut h);
            for v in slice {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn scale_add(&mut self, alpha: f64, other: &HeadWeights) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}

/// Head weights plus the level table they were trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParameters {
    pub weights: HeadWeights,
    pub mode: HeadMode,
    /// Ascending CEFR levels, one per prototype (and per logit in
    /// classification mode).
    pub levels: Vec<f64>,
}

fn uniform_array<R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn uniform_vec<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-bound..=bound))
}

impl HeadParameters {
    /// Random weights: attention and MLP uniform in `±1/sqrt(fan_in)`,
    /// prototypes uniform in `±1/sqrt(d)`.
    pub fn random<R: Rng>(
        rng: &mut R,
        dim: usize,
        attn_dim: usize,
        levels: Vec<f64>,
        mode: HeadMode,
    ) -> Result<Self> {
        if dim == 0 || attn_dim == 0 || levels.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "head needs positive sizes: d={dim}, d_a={attn_dim}, N={}",
                levels.len()
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "levels must be strictly ascending".into(),
            ));
        }
        let n = levels.len();
        let out = match mode {
            HeadMode::Regression => 1,
            HeadMode::Classification => n,
        };
        let attn_bound = 1.0 / (dim as f64).sqrt();
        let u_bound = 1.0 / (attn_dim as f64).sqrt();
        let mlp_bound = 1.0 / ((dim + n) as f64).sqrt();
        let weights = HeadWeights {
            attn_w: uniform_array(rng, (attn_dim, dim), attn_bound),
            attn_b: uniform_vec(rng, attn_dim, attn_bound),
            attn_u: uniform_vec(rng, attn_dim, u_bound),
            prototypes: uniform_array(rng, (n, dim), attn_bound),
            mlp_w: uniform_array(rng, (out, dim + n), mlp_bound),
            mlp_b: uniform_vec(rng, out, mlp_bound),
        };
        Ok(HeadParameters {
            weights,
            mode,
            levels,
        })
    }

    /// Random init followed by setting each prototype to the mean pooled
    /// embedding of its level's training utterances.
    pub fn initialize<R: Rng>(
        rng: &mut R,
        train: &[FrameSequence],
        attn_dim: usize,
        mode: HeadMode,
    ) -> Result<Self> {
        let first = train.first().ok_or(Error::EmptyDataset)?;
        let levels = label_levels(train)?;
        let mut params = Self::random(rng, first.dim(), attn_dim, levels, mode)?;
        let mut sums = Array2::<f64>::zeros(params.weights.prototypes.raw_dim());
        let mut counts = vec![0usize; params.levels.len()];
        for seq in train {
            let j = params.level_index(seq.label.expect("checked by label_levels"))?;
            let pooled = attn_pool(seq, &params)?;
            sums.row_mut(j).scaled_add(1.0, &pooled);
            counts[j] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            let mean = sums.row(j).mapv(|v| v / c as f64);
            if mean.iter().any(|v| *v != 0.0) {
                params.weights.prototypes.row_mut(j).assign(&mean);
            }
        }
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.weights.attn_w.ncols()
    }

    pub fn attn_dim(&self) -> usize {
        self.weights.attn_w.nrows()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.mlp_b.len()
    }

    pub fn level_index(&self, target: f64) -> Result<usize> {
        self.levels
            .iter()
            .position(|&l| l == target)
            .ok_or(Error::OffGridTarget(target))
    }

    /// Checks that every tensor agrees on `d`, `d_a`, `N` and the output size.
    pub fn check_shapes(&self) -> Result<()> {
        let w = &self.weights;
        let (da, d) = w.attn_w.dim();
        let n = self.levels.len();
        let out = match self.mode {
            HeadMode::Regression => 1,
            HeadMode::Classification => n,
        };
        let ok = w.attn_b.len() == da
            && w.attn_u.len() == da
            && w.prototypes.dim() == (n, d)
            && w.mlp_w.dim() == (out, d + n)
            && w.mlp_b.len() == out;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "inconsistent head tensors for d={d}, d_a={da}, N={n}, out={out}"
            )))
        }
    }
}

/// Sorted distinct training labels; every label must be a reference level.
pub fn label_levels(data: &[FrameSequence]) -> Result<Vec<f64>> {
    let mut levels = Vec::new();
    for seq in data {
        let label = seq
            .label
            .ok_or_else(|| Error::InvalidConfig("training sequence without label".into()))?;
        if !crate::score::is_reference_level(label) {
            return Err(Error::OffGridTarget(label));
        }
        if !levels.contains(&label) {
            levels.push(label);
        }
    }
    levels.sort_by(f64::total_cmp);
    Ok(levels)
}

fn check_input(seq: &FrameSequence, params: &HeadParameters) -> Result<()> {
    params.check_shapes()?;
    if seq.dim() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frames have d={}, head expects d={}",
            seq.dim(),
            params.dim()
        )));
    }
    Ok(())
}

fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

struct Pooling {
    /// tanh(W h_t + b), `T x d_a`
    hidden: Array2<f64>,
    alpha: Array1<f64>,
    pooled: Array1<f64>,
}

fn pool(seq: &FrameSequence, w: &HeadWeights) -> Pooling {
    let h = &seq.frames;
    let hidden = (h.dot(&w.attn_w.t()) + &w.attn_b).mapv(f64::tanh);
    let alpha = softmax(hidden.dot(&w.attn_u).view());
    let pooled = h.t().dot(&alpha);
    Pooling {
        hidden,
        alpha,
        pooled,
    }
}

/// Attention weights over frames (a probability vector).
pub fn attention_weights(seq: &FrameSequence, params: &HeadParameters) -> Result<Array1<f64>> {
    check_input(seq, params)?;
    Ok(pool(seq, &params.weights).alpha)
}

/// `x = sum_t softmax(u . tanh(W h_t + b))_t h_t`
pub fn attn_pool(seq: &FrameSequence, params: &HeadParameters) -> Result<Array1<f64>> {
    check_input(seq, params)?;
    Ok(pool(seq, &params.weights).pooled)
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity of `x` to each prototype row.
pub fn prototype_similarity(x: ArrayView1<f64>, prototypes: &Array2<f64>) -> Result<Array1<f64>> {
    if x.len() != prototypes.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "vector has {} entries, prototypes have {} columns",
            x.len(),
            prototypes.ncols()
        )));
    }
    let x_norm = norm(x);
    if x_norm == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    prototypes
        .rows()
        .into_iter()
        .map(|p| {
            let p_norm = norm(p);
            if p_norm == 0.0 {
                return Err(Error::ZeroNormVector);
            }
            Ok((p.dot(&x) / (x_norm * p_norm)).clamp(-1.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    frames: Array2<f64>,
    hidden: Array2<f64>,
    alpha: Array1<f64>,
    pooled: Array1<f64>,
    similarity: Array1<f64>,
    concat: Array1<f64>,
    output: Array1<f64>,
}

impl ForwardCache {
    /// Regression: one value. Classification: one logit per level.
    pub fn output(&self) -> &Array1<f64> {
        &self.output
    }

    pub fn attention(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }

    pub fn similarity(&self) -> &Array1<f64> {
        &self.similarity
    }
}

pub fn forward(seq: &FrameSequence, params: &HeadParameters) -> Result<ForwardCache> {
    check_input(seq, params)?;
    let w = &params.weights;
    let Pooling {
        hidden,
        alpha,
        pooled,
    } = pool(seq, w);
    let similarity = prototype_similarity(pooled.view(), &w.prototypes)?;
    let d = pooled.len();
    let mut concat = Array1::zeros(d + similarity.len());
    concat.slice_mut(s![..d]).assign(&pooled);
    concat.slice_mut(s![d..]).assign(&similarity);
    let output = w.mlp_w.dot(&concat) + &w.mlp_b;
    Ok(ForwardCache {
        fingerprint: w.fingerprint(),
        frames: seq.frames.clone(),
        hidden,
        alpha,
        pooled,
        similarity,
        concat,
        output,
    })
}

/// Squared error (regression) or cross-entropy against the target level
/// (classification).
pub fn loss(output: &Array1<f64>, target: f64, params: &HeadParameters) -> Result<f64> {
    Ok(loss_with_gradient(output, target, params)?.0)
}

/// Loss and its gradient with respect to the head output.
pub fn loss_with_gradient(
    output: &Array1<f64>,
    target: f64,
    params: &HeadParameters,
) -> Result<(f64, Array1<f64>)> {
    if output.len() != params.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "output has {} entries, head emits {}",
            output.len(),
            params.output_dim()
        )));
    }
    match params.mode {
        HeadMode::Regression => {
            let diff = output[0] - target;
            Ok((diff * diff, Array1::from(vec![2.0 * diff])))
        }
        HeadMode::Classification => {
            let idx = params.level_index(target)?;
            let max = output.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let log_total = output.mapv(|v| (v - max).exp()).sum().ln() + max;
            let mut grad = softmax(output.view());
            grad[idx] -= 1.0;
            Ok(((log_total - output[idx]).max(0.0), grad))
        }
    }
}

/// Gradients of `upstream . output` with respect to every head tensor,
/// where `upstream` is the loss gradient at the output.
pub fn backward(
    params: &HeadParameters,
    cache: &ForwardCache,
    upstream: &Array1<f64>,
) -> Result<HeadWeights> {
    let w = &params.weights;
    if cache.fingerprint != w.fingerprint() {
        return Err(Error::StaleCache);
    }
    if upstream.len() != cache.output.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries, output has {}",
            upstream.len(),
            cache.output.len()
        )));
    }
    let d = cache.pooled.len();
    let mut grads = HeadWeights::zeros_like(w);

    // MLP
    for (i, &g) in upstream.iter().enumerate() {
        grads.mlp_w.row_mut(i).scaled_add(g, &cache.concat);
    }
    grads.mlp_b.assign(upstream);
    let d_concat = w.mlp_w.t().dot(upstream);
    let mut d_pooled = d_concat.slice(s![..d]).to_owned();
    let d_sim = d_concat.slice(s![d..]);

    // cosine similarities
    let x = &cache.pooled;
    let x_norm = norm(x.view());
    for (j, p) in w.prototypes.rows().into_iter().enumerate() {
        let g = d_sim[j];
        if g == 0.0 {
            continue;
        }
        let p_norm = norm(p);
        let s_j = cache.similarity[j];
        let inv = 1.0 / (x_norm * p_norm);
        // ds/dx = p/(|x||p|) - s x/|x|^2 ; ds/dp = x/(|x||p|) - s p/|p|^2
        d_pooled.scaled_add(g * inv, &p);
        d_pooled.scaled_add(-g * s_j / (x_norm * x_norm), x);
        let mut row = grads.prototypes.row_mut(j);
        row.scaled_add(g * inv, x);
        row.scaled_add(-g * s_j / (p_norm * p_norm), &p);
    }

    // attention pooling
    let d_alpha = cache.frames.dot(&d_pooled);
    let mean = cache.alpha.dot(&d_alpha);
    let d_logits = &cache.alpha * &(d_alpha - mean);
    grads.attn_u = cache.hidden.t().dot(&d_logits);
    // d(pre-activation) = (d_logits u^T) * (1 - tanh^2)
    let d_pre = Array2::from_shape_fn(cache.hidden.raw_dim(), |(t, k)| {
        let z = cache.hidden[[t, k]];
        d_logits[t] * w.attn_u[k] * (1.0 - z * z)
    });
    grads.attn_w = d_pre.t().dot(&cache.frames);
    grads.attn_b = d_pre.sum_axis(Axis(0));
    Ok(grads)
}

/// Scalar score for fusion: the regression output, or in classification mode
/// the probability-weighted mean of the level values.
pub fn predict_score(seq: &FrameSequence, params: &HeadParameters) -> Result<f64> {
    let cache = forward(seq, params)?;
    Ok(decode_score(&cache.output, params))
}

pub fn decode_score(output: &Array1<f64>, params: &HeadParameters) -> f64 {
    match params.mode {
        HeadMode::Regression => output[0],
        HeadMode::Classification => {
            let probs = softmax(output.view());
            probs.iter().zip(&params.levels).map(|(p, l)| p * l).sum()
        }
    }
}

/// Most probable level (classification) or the raw scalar (regression).
pub fn decode_label(output: &Array1<f64>, params: &HeadParameters) -> f64 {
    match params.mode {
        HeadMode::Regression => output[0],
        HeadMode::Classification => {
            let mut best = 0;
            for (i, &v) in output.iter().enumerate() {
                if v > output[best] {
                    best = i;
                }
            }
            params.levels[best]
        }
    }
}

/// Class probabilities from logits.
pub fn probabilities(output: &Array1<f64>) -> Array1<f64> {
    softmax(output.view())
}
