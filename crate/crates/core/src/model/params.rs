use rand_distr::{Distribution, Normal, Uniform};

use super::{ModelConfig, ModelError};
use crate::tensor::{Scalar, Tensor};

/// Role of a parameter tensor; decides initialization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear weight, Xavier-uniform initialized.
    Weight,
    /// Gene embedding table, `N(0, 0.02^2)`.
    Embedding,
    /// Mask token, zero at init.
    MaskToken,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Biases and layer-norm parameters are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::Weight | ParamKind::Embedding | ParamKind::MaskToken
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub attn_norm_gain: Tensor<T>,
    pub attn_norm_bias: Tensor<T>,
    pub query_weight: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key_weight: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub value_weight: Tensor<T>,
    pub value_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ffn_norm_gain: Tensor<T>,
    pub ffn_norm_bias: Tensor<T>,
    pub ffn_in_weight: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out_weight: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
}

/// All learned tensors of one model. Linear weights are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Scalar = f32> {
    pub config: ModelConfig,
    pub gene_embedding: Tensor<T>,
    pub value_proj_weight: Tensor<T>,
    pub value_proj_bias: Tensor<T>,
    pub mask_token: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

const LAYER_SLOTS: [(&str, ParamKind); 16] = [
    ("attn_norm.gain", ParamKind::NormGain),
    ("attn_norm.bias", ParamKind::NormBias),
    ("attn.query.weight", ParamKind::Weight),
    ("attn.query.bias", ParamKind::Bias),
    ("attn.key.weight", ParamKind::Weight),
    ("attn.key.bias", ParamKind::Bias),
    ("attn.value.weight", ParamKind::Weight),
    ("attn.value.bias", ParamKind::Bias),
    ("attn.out.weight", ParamKind::Weight),
    ("attn.out.bias", ParamKind::Bias),
    ("ffn_norm.gain", ParamKind::NormGain),
    ("ffn_norm.bias", ParamKind::NormBias),
    ("ffn.in.weight", ParamKind::Weight),
    ("ffn.in.bias", ParamKind::Bias),
    ("ffn.out.weight", ParamKind::Weight),
    ("ffn.out.bias", ParamKind::Bias),
];

impl<T: Scalar> LayerParams<T> {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, f) = (c.dim, c.ffn_dim());
        Self {
            attn_norm_gain: Tensor::full(&[d], T::ONE),
            attn_norm_bias: Tensor::zeros(&[d]),
            query_weight: Tensor::zeros(&[d, d]),
            query_bias: Tensor::zeros(&[d]),
            key_weight: Tensor::zeros(&[d, d]),
            key_bias: Tensor::zeros(&[d]),
            value_weight: Tensor::zeros(&[d, d]),
            value_bias: Tensor::zeros(&[d]),
            out_weight: Tensor::zeros(&[d, d]),
            out_bias: Tensor::zeros(&[d]),
            ffn_norm_gain: Tensor::full(&[d], T::ONE),
            ffn_norm_bias: Tensor::zeros(&[d]),
            ffn_in_weight: Tensor::zeros(&[d, f]),
            ffn_in_bias: Tensor::zeros(&[f]),
            ffn_out_weight: Tensor::zeros(&[f, d]),
            ffn_out_bias: Tensor::zeros(&[d]),
        }
    }

    fn slots(&self) -> [&Tensor<T>; 16] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.query_weight,
            &self.query_bias,
            &self.key_weight,
            &self.key_bias,
            &self.value_weight,
            &self.value_bias,
            &self.out_weight,
            &self.out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
            &self.ffn_in_weight,
            &self.ffn_in_bias,
            &self.ffn_out_weight,
            &self.ffn_out_bias,
        ]
    }

    fn slots_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.key_weight,
            &mut self.key_bias,
            &mut self.value_weight,
            &mut self.value_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
            &mut self.ffn_in_weight,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_weight,
            &mut self.ffn_out_bias,
        ]
    }
}

impl<T: Scalar> ParameterSet<T> {
    /// Correctly shaped parameters with zero weights, unit norm gains and a
    /// zero mask token.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        Ok(Self {
            config: *config,
            gene_embedding: Tensor::zeros(&[config.vocab, d]),
            value_proj_weight: Tensor::zeros(&[1, d]),
            value_proj_bias: Tensor::zeros(&[d]),
            mask_token: Tensor::zeros(&[d]),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(config))
                .collect(),
            head_weight: Tensor::zeros(&[d, 1]),
            head_bias: Tensor::zeros(&[1]),
        })
    }

    /// Xavier-uniform linear weights, `N(0, 0.02^2)` embeddings, zero biases
    /// and mask token, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        let mut rng = crate::rng::stream(seed, "init");
        let embed_dist = Normal::new(0.0, 0.02).expect("valid normal");
        for (_, kind, t) in p.named_mut() {
            match kind {
                ParamKind::Weight => {
                    let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
                    let bound = xavier_bound(fan_in, fan_out);
                    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    for v in t.data_mut() {
                        *v = T::from_f64(dist.sample(&mut rng));
                    }
                }
                ParamKind::Embedding => {
                    for v in t.data_mut() {
                        *v = T::from_f64(embed_dist.sample(&mut rng));
                    }
                }
                _ => {}
            }
        }
        Ok(p)
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = vec![
            (
                "gene_embedding".to_string(),
                ParamKind::Embedding,
                &self.gene_embedding,
            ),
            (
                "value_proj.weight".to_string(),
                ParamKind::Weight,
                &self.value_proj_weight,
            ),
            (
                "value_proj.bias".to_string(),
                ParamKind::Bias,
                &self.value_proj_bias,
            ),
            (
                "mask_token".to_string(),
                ParamKind::MaskToken,
                &self.mask_token,
            ),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for ((name, kind), t) in LAYER_SLOTS.iter().zip(layer.slots()) {
                out.push((format!("layers.{l}.{name}"), *kind, t));
            }
        }
        out.push((
            "head.weight".to_string(),
            ParamKind::Weight,
            &self.head_weight,
        ));
        out.push(("head.bias".to_string(), ParamKind::Bias, &self.head_bias));
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        let mut out = vec![
            (
                "gene_embedding".to_string(),
                ParamKind::Embedding,
                &mut self.gene_embedding,
            ),
            (
                "value_proj.weight".to_string(),
                ParamKind::Weight,
                &mut self.value_proj_weight,
            ),
            (
                "value_proj.bias".to_string(),
                ParamKind::Bias,
                &mut self.value_proj_bias,
            ),
            (
                "mask_token".to_string(),
                ParamKind::MaskToken,
                &mut self.mask_token,
            ),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for ((name, kind), t) in LAYER_SLOTS.iter().zip(layer.slots_mut()) {
                out.push((format!("layers.{l}.{name}"), *kind, t));
            }
        }
        out.push((
            "head.weight".to_string(),
            ParamKind::Weight,
            &mut self.head_weight,
        ));
        out.push((
            "head.bias".to_string(),
            ParamKind::Bias,
            &mut self.head_bias,
        ));
        out
    }

    pub fn scalar_count(&self) -> u64 {
        self.named().iter().map(|(_, _, t)| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, _, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::<U>::zeros(&self.config).expect("config already validated");
        for ((_, _, dst), (_, _, src)) in out.named_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
