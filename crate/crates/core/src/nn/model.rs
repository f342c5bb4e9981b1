//! Convolutional encoder (three stride-2 3×3 convolutions, global average
//! pooling, linear embedding) and the two-layer regression head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::regression::HEAD_DIM;
use super::{NnError, Tensor};
use crate::hand::{HandPose, POSE_DIM};
use crate::image::Image;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            channels: [8, 16, 32],
            embed_dim: 64,
            hidden_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.image_size == 0
            || self.in_channels == 0
            || self.channels.contains(&0)
            || self.embed_dim == 0
            || self.hidden_dim == 0
        {
            return Err(NnError::InvalidConfig("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![c, c_in, 3, 3]));
            out.push((format!("conv{}.bias", i + 1), vec![c]));
            c_in = c;
        }
        out.push(("embed.weight".into(), vec![self.embed_dim, c_in]));
        out.push(("embed.bias".into(), vec![self.embed_dim]));
        out.push(("head1.weight".into(), vec![self.hidden_dim, self.embed_dim]));
        out.push(("head1.bias".into(), vec![self.hidden_dim]));
        out.push(("head2.weight".into(), vec![HEAD_DIM, self.hidden_dim]));
        out.push(("head2.bias".into(), vec![HEAD_DIM]));
        out
    }
}

/// Index of the first head tensor in [`ModelConfig::layout`].
pub const HEAD_START: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: Vec<Var>,
    pub embedding: Var,
    pub head: Option<Var>,
}

impl ModelParams {
    /// He-uniform weights, zero biases; the last head layer is scaled down
    /// and its pose bias set to the identity rotation of every joint.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let mut limit = (6.0 / fan_in as f64).sqrt();
                if name == "head2.weight" {
                    limit *= 0.1;
                }
                for v in t.data.iter_mut() {
                    *v = rng.gen_range(-limit..limit) as f32;
                }
            } else if name == "head2.bias" {
                for (v, p) in t.data.iter_mut().zip(HandPose::identity().to_flat()) {
                    *v = p as f32;
                }
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, NnError> {
        config.validate()?;
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&named) {
            if name != n || shape != &t.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor {n} {:?} does not match {name} {shape:?}",
                    t.shape
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the regression head with a fresh initialization.
    pub fn reset_head(&mut self, seed: u64) -> Result<(), NnError> {
        let fresh = Self::init(&self.config, seed)?;
        for i in HEAD_START..self.tensors.len() {
            self.tensors[i] = fresh.tensors[i].clone();
        }
        Ok(())
    }

    /// Stacks images into a `B×C×H×W` tensor.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor, NnError> {
        let size = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * size * size);
        for img in images {
            if img.height != size || img.width != size || self.config.in_channels != 3 {
                return Err(NnError::ShapeMismatch(format!(
                    "image {}×{} does not match the configured size {size}",
                    img.height, img.width
                )));
            }
            data.extend(img.to_chw());
        }
        Tensor::new(vec![images.len(), 3, size, size], data)
    }

    /// Records the encoder (and optionally the head) on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: Tensor,
        with_head: bool,
        trainable: bool,
    ) -> Result<ForwardVars, NnError> {
        let params: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        let mut h = g.input(images);
        for l in 0..3 {
            let c = g.conv2d(h, params[2 * l], params[2 * l + 1], 2, 1)?;
            h = g.relu(c);
        }
        let pooled = g.global_avg_pool(h)?;
        let embedding = g.linear(pooled, params[6], params[7])?;
        let head = if with_head {
            let h1 = g.linear(embedding, params[8], params[9])?;
            let a1 = g.relu(h1);
            Some(g.linear(a1, params[10], params[11])?)
        } else {
            None
        };
        Ok(ForwardVars {
            params,
            embedding,
            head,
        })
    }

    fn run(&self, images: &[&Image], with_head: bool) -> Result<Tensor, NnError> {
        let width = if with_head { HEAD_DIM } else { self.config.embed_dim };
        let mut data = Vec::with_capacity(images.len() * width);
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let fv = self.forward(&mut g, self.batch_tensor(chunk)?, with_head, false)?;
            let out = if with_head { fv.head.unwrap_or(fv.embedding) } else { fv.embedding };
            data.extend_from_slice(&g.value(out).data);
        }
        let t = Tensor::new(vec![images.len(), width], data)?;
        if !t.is_finite() {
            return Err(NnError::NonFinite("model output".into()));
        }
        Ok(t)
    }

    /// Embedding of a single image.
    pub fn encode(&self, image: &Image) -> Result<Vec<f32>, NnError> {
        Ok(self.run(&[image], false)?.data)
    }

    /// `B×E` embeddings.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Tensor, NnError> {
        self.run(images, false)
    }

    /// `B×109` raw head outputs.
    pub fn predict_raw(&self, images: &[&Image]) -> Result<Tensor, NnError> {
        self.run(images, true)
    }
}

/// Gradients of every parameter in storage order; untouched ones are zero.
pub fn collect_param_grads(
    params: &ModelParams,
    fv: &ForwardVars,
    grads: &mut super::Gradients,
) -> Vec<Tensor> {
    fv.params
        .iter()
        .zip(&params.tensors)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| t.zeros_like()))
        .collect()
}

pub fn pose_bias_is_identity(params: &ModelParams) -> bool {
    params.get("head2.bias").is_some_and(|b| {
        b.data[..POSE_DIM]
            .iter()
            .zip(HandPose::identity().to_flat())
            .all(|(a, b)| *a as f64 == b)
    })
}
