use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{encoder_forward_with_mask, EncoderParams};
use crate::error::{GmnError, Result};
use crate::linalg::Matrix;
use crate::metric_net::MetricNetParams;

/// Encoder (with its classifier head) plus an optional metric network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmnModel {
    pub encoder: EncoderParams,
    pub metric_net: Option<MetricNetParams>,
    /// Identity label of each classifier output.
    pub class_identities: Vec<u32>,
}

/// Parameter gradients, shaped like [`GmnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderParams,
    pub metric_net: Option<MetricNetParams>,
}

impl GmnModel {
    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.zeros_like(),
            metric_net: self.metric_net.as_ref().map(MetricNetParams::zeros_like),
        }
    }

    /// Parameter slices in checkpoint order: encoder layers, classifier, metric net.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.encoder.params();
        if let Some(m) = &self.metric_net {
            p.extend(m.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.params_mut();
        if let Some(m) = &mut self.metric_net {
            p.extend(m.params_mut());
        }
        p
    }

    pub fn param_len(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Inference embeddings (no perturbation).
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(encoder_forward_with_mask(&self.encoder, inputs, None)?.embeddings)
    }

    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<Matrix> {
        if dataset.d_in() != self.encoder.input_dim() {
            return Err(GmnError::shape("dataset dimension", self.encoder.input_dim(), dataset.d_in()));
        }
        self.embed(&dataset.embedding_matrix())
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            encoder_dims: self.encoder.dims(),
            encoder_trunk_params: self.encoder.trunk_param_count(),
            classifier_params: self.encoder.classifier.num_params(),
            metric_net_hidden: self.metric_net.as_ref().map(|m| m.hidden()),
            metric_net_params: self.metric_net.as_ref().map_or(0, |m| m.param_count()),
        }
    }
}

impl ModelGrads {
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.encoder.params();
        if let Some(m) = &self.metric_net {
            p.extend(m.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.params_mut();
        if let Some(m) = &mut self.metric_net {
            p.extend(m.params_mut());
        }
        p
    }

    /// All gradient entries concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params().concat()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub encoder_dims: Vec<usize>,
    pub encoder_trunk_params: usize,
    pub classifier_params: usize,
    pub metric_net_hidden: Option<usize>,
    pub metric_net_params: usize,
}

impl ModelSummary {
    /// Metric-net size relative to the encoder trunk.
    pub fn metric_to_encoder_ratio(&self) -> f64 {
        self.metric_net_params as f64 / self.encoder_trunk_params.max(1) as f64
    }
}
