use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer::{LayerDescriptor, Shape};
use super::tensor::{l2_normalize, one_hot_encode, Tensor};
use crate::error::{Error, Result};
use crate::maskio::SemanticMask;
use crate::rng;

/// Hyperparameters of the default convolutional encoder and projection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// One stride-2 3x3 conv + ReLU block per entry.
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Compare embeddings by cosine (unit-normalized dot product) rather than
    /// a raw dot product.
    pub normalize: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            in_channels: 9,
            in_h: 64,
            in_w: 80,
            conv_channels: vec![16, 32, 64],
            embed_dim: 64,
            proj_hidden: 64,
            proj_dim: 128,
            normalize: true,
        }
    }
}

impl ArchitectureConfig {
    pub fn encoder_layers(&self) -> Vec<LayerDescriptor> {
        let mut layers = Vec::new();
        let mut c = self.in_channels;
        for &out in &self.conv_channels {
            layers.push(LayerDescriptor::conv3x3(c, out, 2));
            layers.push(LayerDescriptor::Relu);
            c = out;
        }
        layers.push(LayerDescriptor::GlobalAvgPool);
        layers.push(LayerDescriptor::dense(c, self.embed_dim));
        layers
    }

    pub fn projection_layers(&self) -> Vec<LayerDescriptor> {
        vec![
            LayerDescriptor::dense(self.embed_dim, self.proj_hidden),
            LayerDescriptor::Relu,
            LayerDescriptor::dense(self.proj_hidden, self.proj_dim),
        ]
    }

    pub fn build(&self, seed: u64) -> Result<EmbeddingModel> {
        let mut m = EmbeddingModel::new(
            Shape::new(self.in_channels, self.in_h, self.in_w),
            self.encoder_layers(),
            self.projection_layers(),
            self.normalize,
        )?;
        m.init_params(seed);
        Ok(m)
    }
}

/// Encoder followed by a projection head over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    input: Shape,
    layers: Vec<LayerDescriptor>,
    encoder_len: usize,
    /// input shape of every layer, plus the final output shape
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    normalize: bool,
}

impl EmbeddingModel {
    /// Validates the shape algebra; parameters start at zero.
    pub fn new(
        input: Shape,
        encoder: Vec<LayerDescriptor>,
        projection: Vec<LayerDescriptor>,
        normalize: bool,
    ) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Shape("model input must be non-empty".into()));
        }
        if encoder.is_empty() || projection.is_empty() {
            return Err(Error::Shape("encoder and projection head must be non-empty".into()));
        }
        let encoder_len = encoder.len();
        let layers: Vec<_> = encoder.into_iter().chain(projection).collect();
        let mut shapes = vec![input];
        let mut offsets = vec![0];
        for (i, l) in layers.iter().enumerate() {
            let next = l
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", l.name())))?;
            shapes.push(next);
            offsets.push(offsets.last().unwrap() + l.param_count());
        }
        let r = shapes[encoder_len];
        if r.h != 1 || r.w != 1 {
            return Err(Error::Shape(format!("encoder must end in a flat vector, got {r:?}")));
        }
        let z = *shapes.last().unwrap();
        if z.h != 1 || z.w != 1 {
            return Err(Error::Shape(format!("projection must end in a flat vector, got {z:?}")));
        }
        let n = *offsets.last().unwrap();
        Ok(Self {
            input,
            layers,
            encoder_len,
            shapes,
            offsets,
            params: vec![0.0; n],
            normalize,
        })
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init_params(&mut self, seed: u64) {
        for l in 0..self.layers.len() {
            self.init_layer(l, seed);
        }
    }

    fn init_layer(&mut self, l: usize, seed: u64) {
        let desc = self.layers[l];
        let Some((fan_in, fan_out)) = desc.fans() else { return };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng::child(seed, l as u64);
        let start = self.offsets[l];
        let nw = desc.weight_count();
        for p in &mut self.params[start..start + nw] {
            *p = r.random_range(-bound..bound);
        }
        for p in &mut self.params[start + nw..self.offsets[l + 1]] {
            *p = 0.0;
        }
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn embed_dim(&self) -> usize {
        self.shapes[self.encoder_len].c
    }

    pub fn proj_dim(&self) -> usize {
        self.shapes.last().unwrap().c
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn set_normalize(&mut self, normalize: bool) {
        self.normalize = normalize;
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    pub fn encoder_layers(&self) -> &[LayerDescriptor] {
        &self.layers[..self.encoder_len]
    }

    pub fn projection_layers(&self) -> &[LayerDescriptor] {
        &self.layers[self.encoder_len..]
    }

    /// Index of the first projection-head layer in [`Self::layers`].
    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "model has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("non-finite parameter".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Parameter index range of layer `l`.
    pub fn layer_param_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    /// Appends `Dense(z, z) -> ReLU -> Dense(z, z)` to the projection head and
    /// initializes only the new layers. Returns the new parameters' range.
    pub fn append_dense_pair(&mut self, seed: u64) -> Result<std::ops::Range<usize>> {
        let z = self.proj_dim();
        let old = self.param_count();
        let mut projection: Vec<_> = self.projection_layers().to_vec();
        projection.extend([
            LayerDescriptor::dense(z, z),
            LayerDescriptor::Relu,
            LayerDescriptor::dense(z, z),
        ]);
        let mut grown = Self::new(self.input, self.encoder_layers().to_vec(), projection, self.normalize)?;
        grown.params[..old].copy_from_slice(&self.params);
        let n = grown.layers.len();
        for l in [n - 3, n - 1] {
            grown.init_layer(l, rng::derive_seed(seed, 0xADD));
        }
        *self = grown;
        Ok(old..self.param_count())
    }

    /// Resizes (nearest) and one-hot encodes a mask for this model.
    pub fn prepare(&self, mask: &SemanticMask) -> Result<Tensor> {
        let resized = mask.resize_nearest(self.input.w, self.input.h)?;
        one_hot_encode(&resized, self.input.c)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.input;
        let ok = match input.shape() {
            [c, h, w] => (*c, *h, *w) == (s.c, s.h, s.w),
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "model expects input shape [{}, {}, {}], got {:?}",
                s.c,
                s.h,
                s.w,
                input.shape()
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, input: &Tensor) -> Result<Trace> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.data().to_vec());
        for (l, desc) in self.layers.iter().enumerate() {
            let out = desc.forward(&self.params[self.layer_param_range(l)], acts.last().unwrap(), self.shapes[l]);
            acts.push(out);
        }
        Ok(Trace { activations: acts })
    }

    /// Encoder output `r` and projection output `z` (before any normalization).
    pub fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.forward_trace(input)?;
        Ok((t.activations[self.encoder_len].clone(), t.activations.last().unwrap().clone()))
    }

    /// Records a forward pass over a batch for a later [`Self::backward`].
    pub fn forward_batch(&self, inputs: &[Tensor]) -> Result<BatchTrace> {
        let samples = inputs
            .par_iter()
            .map(|x| self.forward_trace(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchTrace {
            samples,
            param_count: self.param_count(),
            encoder_len: self.encoder_len,
        })
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to each sample's raw `z`.
    pub fn backward(&self, trace: &BatchTrace, grad_z: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.backward_from(trace, grad_z, 0)
    }

    /// Like [`Self::backward`], but stops propagating below layer `first_layer`;
    /// gradients of earlier layers are left at zero.
    pub fn backward_from(&self, trace: &BatchTrace, grad_z: &[Vec<f64>], first_layer: usize) -> Result<Vec<f64>> {
        if trace.param_count != self.param_count() || trace.encoder_len != self.encoder_len {
            return Err(Error::Shape("batch trace was recorded for a different model".into()));
        }
        if trace.samples.is_empty() {
            return Err(Error::Shape("backward called without a recorded forward pass".into()));
        }
        if grad_z.len() != trace.samples.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for a batch of {}",
                grad_z.len(),
                trace.samples.len()
            )));
        }
        let z = self.proj_dim();
        if let Some(g) = grad_z.iter().find(|g| g.len() != z) {
            return Err(Error::Shape(format!("upstream gradient has length {}, expected {z}", g.len())));
        }
        let per_sample: Vec<Vec<f64>> = trace
            .samples
            .par_iter()
            .zip(grad_z)
            .map(|(t, g)| self.backward_sample(t, g, first_layer))
            .collect();
        // fixed reduction order keeps the sum independent of thread count
        let mut total = vec![0.0; self.param_count()];
        for g in &per_sample {
            for (a, b) in total.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(total)
    }

    fn backward_sample(&self, trace: &Trace, grad_z: &[f64], first_layer: usize) -> Vec<f64> {
        let mut grads = vec![0.0; self.param_count()];
        let mut upstream = grad_z.to_vec();
        for l in (first_layer..self.layers.len()).rev() {
            let range = self.layer_param_range(l);
            let need_input = l > first_layer;
            let gi = self.layers[l].backward(
                &self.params[range.clone()],
                &trace.activations[l],
                self.shapes[l],
                &upstream,
                &mut grads[range],
                need_input,
            );
            match gi {
                Some(g) => upstream = g,
                None => break,
            }
        }
        grads
    }

    /// Embedding of a prepared input, unit-normalized when the model compares
    /// by cosine.
    pub fn embed(&self, input: &Tensor) -> Result<Vec<f64>> {
        let (_, z) = self.forward(input)?;
        if self.normalize {
            l2_normalize(&z)
        } else {
            Ok(z)
        }
    }

    /// Resizes, encodes and embeds a mask.
    pub fn embed_mask(&self, mask: &SemanticMask) -> Result<Vec<f64>> {
        self.embed(&self.prepare(mask)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input: self.input,
            encoder: self.encoder_layers().to_vec(),
            projection: self.projection_layers().to_vec(),
            embed_dim: self.embed_dim(),
            proj_dim: self.proj_dim(),
            normalize: self.normalize,
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("{}: not a model checkpoint", path.display())));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.version
            )));
        }
        let mut m = Self::new(ckpt.input, ckpt.encoder, ckpt.projection, ckpt.normalize)?;
        if m.embed_dim() != ckpt.embed_dim || m.proj_dim() != ckpt.proj_dim {
            return Err(Error::Shape(format!(
                "checkpoint declares dims ({}, {}) but layers produce ({}, {})",
                ckpt.embed_dim,
                ckpt.proj_dim,
                m.embed_dim(),
                m.proj_dim()
            )));
        }
        m.set_params(ckpt.params)?;
        Ok(m)
    }
}

pub const CHECKPOINT_FORMAT: &str = "semloc-embedding-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    input: Shape,
    encoder: Vec<LayerDescriptor>,
    projection: Vec<LayerDescriptor>,
    embed_dim: usize,
    proj_dim: usize,
    normalize: bool,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Trace {
    /// input to each layer, then the final output
    activations: Vec<Vec<f64>>,
}

/// Activations recorded by [`EmbeddingModel::forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchTrace {
    samples: Vec<Trace>,
    param_count: usize,
    encoder_len: usize,
}

impl BatchTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Encoder output of sample `i`.
    pub fn r(&self, i: usize) -> &[f64] {
        &self.samples[i].activations[self.encoder_len]
    }

    /// Raw projection output of sample `i`.
    pub fn z(&self, i: usize) -> &[f64] {
        self.samples[i].activations.last().unwrap()
    }
}
