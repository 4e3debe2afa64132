use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ImageEncoderConfig, ModelConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const LOGIT_SCALE: &str = "logit_scale";
pub const IMAGE_PREFIX: &str = "visual.";
pub const TEXT_PREFIX: &str = "text.";

/// Initial logit scale: ln(1 / 0.07).
pub const INIT_LOG_SCALE: f32 = 2.659_26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("param", &shape, &[data.len()]));
        }
        Ok(ParamTensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }
}

fn push_block(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize, mlp_ratio: usize) {
    let hidden = width * mlp_ratio;
    let mut add = |name: &str, shape: Vec<usize>| out.push((format!("{prefix}{name}"), shape));
    add("ln1.gain", vec![width]);
    add("ln1.bias", vec![width]);
    for proj in ["q", "k", "v", "out"] {
        add(&format!("attn.{proj}.weight"), vec![width, width]);
        add(&format!("attn.{proj}.bias"), vec![width]);
    }
    add("ln2.gain", vec![width]);
    add("ln2.bias", vec![width]);
    add("mlp.fc1.weight", vec![width, hidden]);
    add("mlp.fc1.bias", vec![hidden]);
    add("mlp.fc2.weight", vec![hidden, width]);
    add("mlp.fc2.bias", vec![width]);
}

/// Names and shapes of every image-tower parameter.
pub fn image_param_shapes(c: &ImageEncoderConfig, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
    let d = c.width;
    let mut out = vec![
        ("visual.patch_embed.weight".to_string(), vec![c.patch_dim(), d]),
        ("visual.patch_embed.bias".to_string(), vec![d]),
        ("visual.class_token".to_string(), vec![d]),
        ("visual.pos_embed".to_string(), vec![1 + c.num_patches(), d]),
    ];
    for i in 0..c.layers {
        push_block(&mut out, &format!("visual.blocks.{i}."), d, c.mlp_ratio);
    }
    out.push(("visual.ln_post.gain".to_string(), vec![d]));
    out.push(("visual.ln_post.bias".to_string(), vec![d]));
    out.push(("visual.proj".to_string(), vec![d, embed_dim]));
    out
}

/// Names and shapes of every text-tower parameter.
pub fn text_param_shapes(c: &TextEncoderConfig, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
    let d = c.width;
    let mut out = vec![
        ("text.token_embed".to_string(), vec![c.vocab_size, d]),
        ("text.pos_embed".to_string(), vec![c.context_length, d]),
    ];
    for i in 0..c.layers {
        push_block(&mut out, &format!("text.blocks.{i}."), d, c.mlp_ratio);
    }
    out.push(("text.ln_final.gain".to_string(), vec![d]));
    out.push(("text.ln_final.bias".to_string(), vec![d]));
    out.push(("text.proj".to_string(), vec![d, embed_dim]));
    out
}

pub fn model_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = image_param_shapes(&cfg.image, cfg.embed_dim);
    out.extend(text_param_shapes(&cfg.text, cfg.embed_dim));
    out.push((LOGIT_SCALE.to_string(), vec![1]));
    out
}

/// Biases, normalization gains and the logit scale never receive weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain") || name == LOGIT_SCALE
}

/// Trainable parameters by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh initialization: unit gains, zero biases, `N(0, 0.02)` weights and
    /// embeddings, `N(0, width^-1/2)` output projections, and the logit scale
    /// at ln(1/0.07).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in model_param_shapes(cfg) {
            let n = numel(&shape);
            let data = if name == LOGIT_SCALE {
                vec![INIT_LOG_SCALE]
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let std = if name.ends_with(".proj") {
                    (shape[0] as f32).powf(-0.5)
                } else {
                    0.02
                };
                let normal = Normal::new(0.0f32, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(name, ParamTensor { shape, data });
        }
        Ok(ParamStore { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ParamTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn log_scale(&self) -> Option<f32> {
        self.tensors.get(LOGIT_SCALE).map(|t| t.data[0])
    }

    /// Checks that every parameter the config calls for is present with the
    /// expected shape.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        check_shapes(&model_param_shapes(cfg), |n| self.get(n).map(|t| t.shape.as_slice()))
    }

    /// Wraps each parameter as a leaf tensor; gradients are tracked when
    /// `requires_grad` is set.
    pub fn bind(&self, requires_grad: bool) -> BoundParams {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, p)| {
                let t = if requires_grad {
                    Tensor::param(p.data.clone(), &p.shape)
                } else {
                    Tensor::new(p.data.clone(), &p.shape)
                }
                .expect("param store holds consistent shapes");
                (name.clone(), t)
            })
            .collect();
        BoundParams { tensors }
    }
}

pub(crate) fn check_shapes<'a>(
    expected: &[(String, Vec<usize>)],
    lookup: impl Fn(&str) -> Option<&'a [usize]>,
) -> Result<()> {
    for (name, shape) in expected {
        match lookup(name) {
            None => return Err(Error::MissingParam(name.clone())),
            Some(found) if found != shape.as_slice() => {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: found.to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Parameters bound into the graph for one forward/backward pass.
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub(crate) fn check(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        check_shapes(expected, |n| self.tensors.get(n).map(Tensor::shape))
    }

    /// Accumulated gradients by name; parameters the loss did not reach get zeros.
    pub fn grads(&self) -> BTreeMap<String, Vec<f32>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let g = t.take_grad().unwrap_or_else(|| vec![0.0; t.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}
