//! Trainable trunk encoder: stacked dense layers with rectifiers, an optional
//! channel-dropout perturbation site, and an identity classifier head.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::linalg::{relu_in_place, Dense, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    /// Index of the layer whose (activated) output is perturbed.
    pub dp_site: usize,
    pub classifier: Dense,
}

impl EncoderParams {
    /// `dims = [d_in, h_1, ..., d_embed]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], dp_site: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(GmnError::config("encoder_dims", "need an input and at least one layer"));
        }
        if dims.contains(&0) {
            return Err(GmnError::config("encoder_dims", "dimensions must be positive"));
        }
        let num_layers = dims.len() - 1;
        if dp_site >= num_layers {
            return Err(GmnError::config(
                "dp_site",
                format!("must be below the number of layers ({num_layers})"),
            ));
        }
        if num_classes == 0 {
            return Err(GmnError::config("num_classes", "must be positive"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let gain = if l + 1 < num_layers { 2.0 } else { 1.0 };
                Dense::random(w[0], w[1], gain, rng)
            })
            .collect();
        let classifier = Dense::random(dims[num_layers], num_classes, 1.0, rng);
        Ok(EncoderParams {
            layers,
            dp_site,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self.layers.iter().map(|l| Dense::zeros(l.d_in, l.d_out)).collect(),
            dp_site: self.dp_site,
            classifier: Dense::zeros(self.classifier.d_in, self.classifier.d_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").d_out
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.d_out
    }

    /// `[d_in, h_1, ..., d_embed]`
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.d_out));
        dims
    }

    /// Trunk parameters only (the classifier is a training-time head).
    pub fn trunk_param_count(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.classifier.num_params()
    }

    pub fn validate(&self) -> Result<()> {
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].d_out != pair[1].d_in {
                return Err(GmnError::shape(format!("encoder layer {} input", l + 1), pair[0].d_out, pair[1].d_in));
            }
        }
        if self.dp_site >= self.layers.len() {
            return Err(GmnError::config("dp_site", "out of range"));
        }
        if self.classifier.d_in != self.embedding_dim() {
            return Err(GmnError::shape("classifier input", self.embedding_dim(), self.classifier.d_in));
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| l.params())
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpMode {
    /// Exactly `floor(rate * channels)` channels are dropped per sample.
    #[default]
    ExactFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub rate: f64,
    pub active: bool,
    pub mode: DpMode,
    pub inverted_scaling: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            rate: 0.5,
            active: false,
            mode: DpMode::ExactFraction,
            inverted_scaling: true,
        }
    }
}

impl DpConfig {
    pub fn inactive() -> Self {
        DpConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate < 1.0) {
            return Err(GmnError::config("dp_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Whether masks actually change anything (and thus consume randomness).
    pub fn is_effective(&self) -> bool {
        self.active && self.rate > 0.0
    }

    pub fn dropped_channels(&self, channels: usize) -> usize {
        ((self.rate * channels as f64) + 1e-9).floor() as usize
    }

    fn keep_scale(&self) -> f64 {
        if self.inverted_scaling {
            1.0 / (1.0 - self.rate)
        } else {
            1.0
        }
    }
}

/// One channel mask. Draws nothing from `rng` when DP is not effective.
pub fn dp_mask<R: Rng + ?Sized>(channels: usize, dp: &DpConfig, rng: &mut R) -> Vec<f64> {
    if !dp.is_effective() {
        return vec![1.0; channels];
    }
    let mut mask = vec![dp.keep_scale(); channels];
    let drop = dp.dropped_channels(channels);
    for c in index::sample(rng, channels, drop) {
        mask[c] = 0.0;
    }
    mask
}

/// One mask row per sample, or `None` when DP is not effective.
pub fn dp_masks<R: Rng + ?Sized>(rows: usize, channels: usize, dp: &DpConfig, rng: &mut R) -> Option<Matrix> {
    if !dp.is_effective() {
        return None;
    }
    let mut data = Vec::with_capacity(rows * channels);
    for _ in 0..rows {
        data.extend(dp_mask(channels, dp, rng));
    }
    Some(Matrix {
        rows,
        cols: channels,
        data,
    })
}

/// Activations kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    dims: Vec<usize>,
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    mask: Option<Matrix>,
}

impl EncoderCache {
    pub fn mask(&self) -> Option<&Matrix> {
        self.mask.as_ref()
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub embeddings: Matrix,
    pub logits: Matrix,
    pub cache: EncoderCache,
}

/// Forward pass; DP masks are drawn from `rng` only when `training` and DP is effective.
pub fn encoder_forward<R: Rng + ?Sized>(
    params: &EncoderParams,
    dp: &DpConfig,
    inputs: &Matrix,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let mask = if training {
        let channels = params.layers[params.dp_site].d_out;
        dp_masks(inputs.rows, channels, dp, rng)
    } else {
        None
    };
    encoder_forward_with_mask(params, inputs, mask)
}

/// Forward pass with an explicit (frozen) DP mask.
pub fn encoder_forward_with_mask(params: &EncoderParams, inputs: &Matrix, mask: Option<Matrix>) -> Result<EncoderOutput> {
    params.validate()?;
    if inputs.cols != params.input_dim() {
        return Err(GmnError::shape("encoder input", params.input_dim(), inputs.cols));
    }
    if let Some(m) = &mask {
        let channels = params.layers[params.dp_site].d_out;
        if m.rows != inputs.rows || m.cols != channels {
            return Err(GmnError::shape("dp mask", inputs.rows * channels, m.rows * m.cols));
        }
    }
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let x = if l == 0 { inputs } else { &post[l - 1] };
        let z = layer.forward(x)?;
        let mut a = z.clone();
        if l < last {
            relu_in_place(&mut a.data);
        }
        if l == params.dp_site {
            if let Some(m) = &mask {
                a.data.iter_mut().zip(&m.data).for_each(|(v, s)| *v *= s);
            }
        }
        pre.push(z);
        post.push(a);
    }
    let embeddings = post[last].clone();
    let logits = params.classifier.forward(&embeddings)?;
    Ok(EncoderOutput {
        embeddings,
        logits,
        cache: EncoderCache {
            dims: params.dims(),
            input: inputs.clone(),
            pre,
            post,
            mask,
        },
    })
}

/// Reverse pass. Returns parameter gradients and the input gradient.
///
/// `d_logits` may be omitted when the classifier head takes no part in the loss.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_embeddings: &Matrix,
    d_logits: Option<&Matrix>,
) -> Result<(EncoderParams, Matrix)> {
    if cache.dims != params.dims() || cache.pre.len() != params.layers.len() {
        return Err(GmnError::State("encoder cache does not match the parameters".into()));
    }
    let rows = cache.batch_size();
    if d_embeddings.rows != rows || d_embeddings.cols != params.embedding_dim() {
        return Err(GmnError::State("embedding gradient does not match the cached batch".into()));
    }
    let mut grads = params.zeros_like();
    let last = params.layers.len() - 1;
    let mut upstream = d_embeddings.clone();
    if let Some(dl) = d_logits {
        if dl.rows != rows || dl.cols != params.num_classes() {
            return Err(GmnError::State("logit gradient does not match the cached batch".into()));
        }
        let via_head = params.classifier.backward(&cache.post[last], dl, &mut grads.classifier);
        upstream.data.iter_mut().zip(&via_head.data).for_each(|(u, v)| *u += v);
    }
    for l in (0..=last).rev() {
        if l == params.dp_site {
            if let Some(m) = &cache.mask {
                upstream.data.iter_mut().zip(&m.data).for_each(|(g, s)| *g *= s);
            }
        }
        if l < last {
            for (g, z) in upstream.data.iter_mut().zip(&cache.pre[l].data) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let x = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        upstream = params.layers[l].backward(x, &upstream, &mut grads.layers[l]);
    }
    Ok((grads, upstream))
}
