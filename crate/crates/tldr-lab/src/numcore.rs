//! Dense feed-forward network with exact forward/backward passes, losses and
//! an Adam optimizer.
//!
//! The network is a fixed MLP family: rectified-linear hidden layers, linear
//! output layer, optional identity skip connections every two layers when the
//! dimensions match. Real values are 64-bit throughout and batch reductions
//! are means. Everything here is deterministic given its inputs; models are
//! immutable snapshots that may be evaluated from many threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::matrix::RealMatrix;
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TLDR";
const CHECKPOINT_VERSION: u32 = 1;

/// One dense layer: `z = a W^T + b`, weight shape (out, in) row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: RealMatrix,
    pub bias: Vec<f64>,
}

/// Per-layer parameter gradients, same shapes as [`Layer`].
pub type ParamGrads = Vec<Layer>;

/// A dense feed-forward classifier. Houses `h` (argmax prediction) and its
/// softmax output `h^s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    skip_connections: bool,
}

/// Forward-pass cache for backprop: inputs of every layer plus
/// pre-activations.
pub struct ForwardCache {
    /// activations[l] is the input of layer l; activations[L] is the logits.
    activations: Vec<RealMatrix>,
    /// pre_activations[l] is z_l before the hidden ReLU (last layer: logits).
    pre_activations: Vec<RealMatrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &RealMatrix {
        self.activations.last().expect("nonempty cache")
    }

    /// Pre-activation values per layer; exposes the ReLU on/off pattern,
    /// which finite-difference gradient checks need to detect kink crossings.
    pub fn pre_activations(&self) -> &[RealMatrix] {
        &self.pre_activations
    }
}

impl Model {
    /// Builds a model with all parameters zero.
    pub fn zeros(layer_dims: &[usize], skip_connections: bool) -> Result<Self> {
        Self::validate_dims(layer_dims, skip_connections)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer {
                weight: RealMatrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Model {
            layer_dims: layer_dims.to_vec(),
            layers,
            skip_connections,
        })
    }

    /// Random initialization, scaled by 1/sqrt(fan-in), deterministic in the
    /// seed.
    pub fn random(layer_dims: &[usize], skip_connections: bool, seed: u64) -> Result<Self> {
        Self::validate_dims(layer_dims, skip_connections)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let scale = (1.0 / w[0] as f64).sqrt();
                let mut weight = RealMatrix::zeros(w[1], w[0]);
                for v in weight.data_mut() {
                    *v = rng.gen_range(-scale..scale);
                }
                Layer {
                    weight,
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Model {
            layer_dims: layer_dims.to_vec(),
            layers,
            skip_connections,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, skip_connections: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].weight.cols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols() != dims[i] {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} expects input dim {}, got weight cols {}",
                    i,
                    dims[i],
                    l.weight.cols()
                )));
            }
            if l.bias.len() != l.weight.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} bias length {} != weight rows {}",
                    i,
                    l.bias.len(),
                    l.weight.rows()
                )));
            }
            dims.push(l.weight.rows());
        }
        Ok(Model {
            layer_dims: dims,
            layers,
            skip_connections,
        })
    }

    fn validate_dims(layer_dims: &[usize], _skip: bool) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer dims {layer_dims:?}"
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn skip_connections(&self) -> bool {
        self.skip_connections
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Whether layer `l` receives an identity skip from the input of layer
    /// `l-1` (every second layer, when the dimensions match).
    fn skip_into(&self, l: usize) -> bool {
        self.skip_connections
            && l >= 1
            && l % 2 == 1
            && self.layer_dims[l + 1] == self.layer_dims[l - 1]
    }

    /// Computes logits for a batch (one sample per row).
    pub fn forward(&self, batch: &RealMatrix) -> Result<RealMatrix> {
        Ok(self.forward_with_cache(batch)?.activations.pop_unwrap())
    }

    pub fn forward_with_cache(&self, batch: &RealMatrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch cols {} != input dim {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        let num_layers = self.layers.len();
        let mut activations = Vec::with_capacity(num_layers + 1);
        let mut pre_activations = Vec::with_capacity(num_layers);
        activations.push(batch.clone());
        for l in 0..num_layers {
            let input = &activations[l];
            let layer = &self.layers[l];
            let out_dim = layer.weight.rows();
            let mut z = RealMatrix::zeros(n, out_dim);
            for r in 0..n {
                let a = input.row(r);
                let zr = z.row_mut(r);
                for (o, zo) in zr.iter_mut().enumerate() {
                    let wrow = layer.weight.row(o);
                    let mut acc = layer.bias[o];
                    for (wi, ai) in wrow.iter().zip(a.iter()) {
                        acc += wi * ai;
                    }
                    *zo = acc;
                }
            }
            if self.skip_into(l) {
                let src = &activations[l - 1];
                for (zv, sv) in z.data_mut().iter_mut().zip(src.data().iter()) {
                    *zv += sv;
                }
            }
            let is_last = l + 1 == num_layers;
            let act = if is_last {
                z.clone()
            } else {
                let mut a = z.clone();
                for v in a.data_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                a
            };
            pre_activations.push(z);
            activations.push(act);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Class prediction `h(x) = argmax` of the logits (lowest index on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.forward(&RealMatrix::row_vector(x))?;
        Ok(argmax(logits.row(0)))
    }

    pub fn predict_batch(&self, batch: &RealMatrix) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Backpropagates a gradient seeded at the logits, returning the gradient
    /// w.r.t. the batch input and all parameters.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &RealMatrix,
    ) -> (RealMatrix, ParamGrads) {
        let num_layers = self.layers.len();
        let n = dlogits.rows();
        // d_act[l]: gradient w.r.t. the input of layer l (activation index l).
        let mut d_act: Vec<RealMatrix> = self
            .layer_dims
            .iter()
            .map(|&d| RealMatrix::zeros(n, d))
            .collect();
        let mut grads: ParamGrads = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: RealMatrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();

        // dz for the layer currently being processed.
        let mut dz = dlogits.clone();
        for l in (0..num_layers).rev() {
            let input = &cache.activations[l];
            let layer = &self.layers[l];
            let g = &mut grads[l];
            for r in 0..n {
                let gz = dz.row(r);
                let a = input.row(r);
                for (o, &go) in gz.iter().enumerate() {
                    g.bias[o] += go;
                    let wrow = g.weight.row_mut(o);
                    for (wv, &av) in wrow.iter_mut().zip(a.iter()) {
                        *wv += go * av;
                    }
                }
            }
            // Gradient to the layer input.
            for r in 0..n {
                let gz: Vec<f64> = dz.row(r).to_vec();
                let da = d_act[l].row_mut(r);
                for (o, &go) in gz.iter().enumerate() {
                    let wrow = layer.weight.row(o);
                    for (dv, &wv) in da.iter_mut().zip(wrow.iter()) {
                        *dv += go * wv;
                    }
                }
            }
            // Identity skip contributes directly to the earlier activation.
            if self.skip_into(l) {
                let (left, right) = d_act.split_at_mut(l);
                let dst = &mut left[l - 1];
                let _ = right;
                for (dv, sv) in dst.data_mut().iter_mut().zip(dz.data().iter()) {
                    *dv += sv;
                }
            }
            if l > 0 {
                // Through the hidden ReLU of layer l-1: zero where z <= 0.
                let z_prev = &cache.pre_activations[l - 1];
                let mut next_dz = d_act[l].clone();
                for (dv, &zv) in next_dz.data_mut().iter_mut().zip(z_prev.data().iter()) {
                    if zv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                dz = next_dz;
            }
        }
        (d_act.swap_remove(0), grads)
    }

    /// Gradient of the mean cross-entropy loss w.r.t. the input batch.
    pub fn grad_input_ce(&self, batch: &RealMatrix, labels: &[usize]) -> Result<RealMatrix> {
        let cache = self.forward_with_cache(batch)?;
        let probs = softmax(cache.logits());
        let dlogits = ce_grad_logits(&probs, labels)?;
        Ok(self.backward(&cache, &dlogits).0)
    }

    /// Gradients of the mean cross-entropy loss w.r.t. all parameters, plus
    /// the loss value.
    pub fn grad_params_ce(
        &self,
        batch: &RealMatrix,
        labels: &[usize],
    ) -> Result<(f64, ParamGrads)> {
        let cache = self.forward_with_cache(batch)?;
        let probs = softmax(cache.logits());
        let loss = cross_entropy(&probs, labels)?;
        let dlogits = ce_grad_logits(&probs, labels)?;
        Ok((loss, self.backward(&cache, &dlogits).1))
    }

    /// Cross-entropy value and input gradient for a single sample.
    pub fn ce_value_grad_input(&self, x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        let batch = RealMatrix::row_vector(x);
        let cache = self.forward_with_cache(&batch)?;
        let probs = softmax(cache.logits());
        let loss = cross_entropy(&probs, &[y])?;
        let dlogits = ce_grad_logits(&probs, &[y])?;
        let (gin, _) = self.backward(&cache, &dlogits);
        Ok((loss, gin.row(0).to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weight.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &l.bias {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.push(self.skip_connections as u8);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::BadCheckpoint(format!(
                    "truncated at offset {} (need {} more bytes)",
                    *pos, n
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let layer_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shapes = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            shapes.push((rows, cols));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for &(rows, cols) in &shapes {
            let mut wdata = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                wdata.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let mut bias = Vec::with_capacity(rows);
            for _ in 0..rows {
                bias.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            layers.push(Layer {
                weight: RealMatrix::from_vec(rows, cols, wdata)?,
                bias,
            });
        }
        let skip = take(&mut pos, 1)?[0] != 0;
        Model::from_layers(layers, skip)
    }
}

trait PopUnwrap<T> {
    fn pop_unwrap(self) -> T;
}

impl<T> PopUnwrap<T> for Vec<T> {
    fn pop_unwrap(mut self) -> T {
        self.pop().expect("nonempty")
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise stabilized softmax (shift-invariant: subtracts the row max).
pub fn softmax(logits: &RealMatrix) -> RealMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean of `-log p[true class]` over the batch.
pub fn cross_entropy(probs: &RealMatrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let classes = probs.cols();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        total += -(probs.get(r, y).max(f64::MIN_POSITIVE)).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of mean cross-entropy w.r.t. the logits: `(p - onehot) / n`.
pub fn ce_grad_logits(probs: &RealMatrix, labels: &[usize]) -> Result<RealMatrix> {
    if probs.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let n = probs.rows() as f64;
    let mut g = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: probs.cols(),
            });
        }
        let row = g.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(g)
}

/// Adam optimizer state. Accumulator shapes mirror the model's parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &Model, learning_rate: f64) -> Self {
        let zeros: ParamGrads = model
            .layers()
            .iter()
            .map(|l| Layer {
                weight: RealMatrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Standard Adam update with bias correction; increments the step counter.
    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((layer, g), (m, v)) in model
            .layers_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            };
            for ((p, &gv), (mv, vv)) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(g.weight.data().iter())
                .zip(m.weight.data_mut().iter_mut().zip(v.weight.data_mut()))
            {
                update(p, gv, mv, vv);
            }
            for ((p, &gv), (mv, vv)) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
            {
                update(p, gv, mv, vv);
            }
        }
    }
}
