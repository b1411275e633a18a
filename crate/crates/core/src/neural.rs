//! Residual CNN used as the learned operator `Q`.
//!
//! `depth` 3×3 convolution layers with zero "same" padding: 1 → width → … →
//! width → 1 channels, ReLU after every layer but the last, and the input
//! added back to the last layer's output. Everything is `f64`; convolutions
//! are im2col followed by one matrix product over the whole minibatch.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_f32, write_f32, Image};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// No nonlinearity; makes the residual path linear. Used in tests.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Uniform on `±√(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform on `±√(6 / fan_in)`.
    He,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub depth: usize,
    pub width: usize,
    pub residual: bool,
    pub activation: Activation,
    pub init: InitScheme,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 32,
            residual: true,
            activation: Activation::Relu,
            init: InitScheme::Glorot,
        }
    }
}

impl NetworkSpec {
    pub fn new(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("network depth {} < 2", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::InvalidConfig("network width must be positive".into()));
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of layer `l`.
    pub fn channels(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { 1 } else { self.width };
        let cout = if l + 1 == self.depth { 1 } else { self.width };
        (cin, cout)
    }

    pub fn num_params(&self) -> usize {
        (0..self.depth)
            .map(|l| {
                let (cin, cout) = self.channels(l);
                cout * cin * TAPS + cout
            })
            .sum()
    }
}

/// One convolution layer. `weights[[o, i*9 + ky*3 + kx]]` multiplies input
/// channel `i` at offset `(ky − 1, kx − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weights: Array2::zeros((cout, cin * TAPS)),
            bias: Array1::zeros(cout),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.ncols() / TAPS
    }

    pub fn out_channels(&self) -> usize {
        self.weights.nrows()
    }
}

/// Parameter-shaped buffers: gradients and ADAM moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        Self {
            layers: (0..spec.depth)
                .map(|l| {
                    let (cin, cout) = spec.channels(l);
                    Layer::zeros(cin, cout)
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    /// Number of updates applied since the last reset.
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
    pub adam: AdamState,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            iterations: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws weights uniformly with fan-scaled limits (fans count the 3×3 taps);
/// biases start at zero.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let mut net = Network::zeros(spec)?;
    net.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        let fan_in = (layer.in_channels() * TAPS) as f64;
        let fan_out = (layer.out_channels() * TAPS) as f64;
        let limit = match spec.init {
            InitScheme::Glorot => (6.0 / (fan_in + fan_out)).sqrt(),
            InitScheme::He => (6.0 / fan_in).sqrt(),
        };
        layer.weights.mapv_inplace(|_| rng.random_range(-limit..limit));
    }
    Ok(net)
}

impl Network {
    /// All parameters zero: the network is the identity map.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let grads = Gradients::zeros_like(spec);
        Ok(Self {
            spec: *spec,
            layers: grads.layers.clone(),
            adam: AdamState {
                m: grads.clone(),
                v: grads,
                t: 0,
            },
            seed: 0,
        })
    }

    /// Clears the ADAM moments and step counter.
    pub fn reset_optimizer(&mut self) {
        let zeros = Gradients::zeros_like(&self.spec);
        self.adam = AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        };
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn forward(&self, f: &Image) -> Image {
        self.forward_batch(&[f]).pop().expect("one output per input")
    }

    pub fn forward_batch(&self, inputs: &[&Image]) -> Vec<Image> {
        if inputs.is_empty() {
            return Vec::new();
        }
        let side = inputs[0].side();
        let pass = self.run(inputs);
        split_batch(&pass.output, side, inputs.len())
    }

    fn run(&self, inputs: &[&Image]) -> Pass {
        let side = inputs[0].side();
        let hw = side * side;
        let batch = inputs.len();
        let mut input = Array2::zeros((1, batch * hw));
        for (b, img) in inputs.iter().enumerate() {
            assert_eq!(img.side(), side, "minibatch images must share a side");
            input
                .as_slice_mut()
                .expect("standard layout")[b * hw..(b + 1) * hw]
                .copy_from_slice(img.pixels());
        }

        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(input);
        let last = self.layers.len() - 1;
        let mut output = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let cols = im2col(&acts[l], side, batch);
            let mut z = Array2::zeros((layer.out_channels(), batch * hw));
            general_mat_mul(1.0, &layer.weights, &cols, 0.0, &mut z);
            z += &layer.bias.view().insert_axis(Axis(1));
            if l == last {
                if self.spec.residual {
                    z += &acts[0];
                }
                output = Some(z);
            } else {
                if self.spec.activation == Activation::Relu {
                    z.mapv_inplace(|v| v.max(0.0));
                }
                acts.push(z);
            }
        }
        Pass {
            side,
            batch,
            acts,
            output: output.expect("depth ≥ 2"),
        }
    }

    /// `½·mean((Q(f) − target)²)` and its gradient with respect to every
    /// parameter.
    pub fn backward(&self, f: &Image, target: &Image) -> (f64, Gradients) {
        self.loss_and_gradients(&[(f, target)])
    }

    /// Loss and gradient of `½·mean((Q(f) − t)²)` over all pixels of a
    /// minibatch of `(input, target)` pairs.
    pub fn loss_and_gradients(&self, batch: &[(&Image, &Image)]) -> (f64, Gradients) {
        let inputs: Vec<&Image> = batch.iter().map(|(f, _)| *f).collect();
        let pass = self.run(&inputs);
        let (side, nb) = (pass.side, pass.batch);
        let hw = side * side;
        let count = (nb * hw) as f64;

        let mut delta = pass.output.clone();
        {
            let d = delta.as_slice_mut().expect("standard layout");
            for (b, (_, target)) in batch.iter().enumerate() {
                assert_eq!(target.side(), side, "target side");
                for (dk, t) in d[b * hw..(b + 1) * hw].iter_mut().zip(target.pixels()) {
                    *dk -= t;
                }
            }
        }
        let loss = 0.5 * delta.iter().map(|v| v * v).sum::<f64>() / count;
        delta /= count;

        let mut grads = Gradients::zeros_like(&self.spec);
        for l in (0..self.layers.len()).rev() {
            let cols = im2col(&pass.acts[l], side, nb);
            let g = &mut grads.layers[l];
            general_mat_mul(1.0, &delta, &cols.t(), 0.0, &mut g.weights);
            g.bias = delta.sum_axis(Axis(1));
            if l == 0 {
                break;
            }
            drop(cols);
            let layer = &self.layers[l];
            let mut dcols = Array2::zeros((layer.weights.ncols(), nb * hw));
            general_mat_mul(1.0, &layer.weights.t(), &delta, 0.0, &mut dcols);
            let mut prev = col2im(&dcols, layer.in_channels(), side, nb);
            if self.spec.activation == Activation::Relu {
                prev.zip_mut_with(&pass.acts[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        (loss, grads)
    }

    /// Mean loss over a dataset, evaluated in chunks of `chunk` pairs.
    pub fn mean_loss(&self, data: &[(Image, Image)], chunk: usize) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for part in data.chunks(chunk.max(1)) {
            let inputs: Vec<&Image> = part.iter().map(|(f, _)| f).collect();
            for (out, (_, t)) in self.forward_batch(&inputs).iter().zip(part) {
                let sq: f64 = out.pixels().iter().zip(t.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
                total += 0.5 * sq / out.len() as f64;
            }
        }
        total / data.len() as f64
    }

    pub fn save(&self, stem: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend(layer.weights.iter());
            flat.extend(layer.bias.iter());
        }
        let (manifest_path, data_path) = weight_paths(stem);
        write_f32(&data_path, &flat)?;
        let manifest = WeightManifest {
            spec: self.spec,
            seed: self.seed,
            num_params: flat.len(),
            data_file: data_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            metadata,
        };
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads weights written by [`Network::save`]; optimizer state starts
    /// fresh.
    pub fn load(stem: &Path) -> Result<(Self, serde_json::Value)> {
        let (manifest_path, data_path) = weight_paths(stem);
        let manifest: WeightManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        let flat = read_f32(&data_path)?;
        let mut net = Network::zeros(&manifest.spec)?;
        net.seed = manifest.seed;
        if flat.len() != net.num_params() || manifest.num_params != flat.len() {
            return Err(Error::Format {
                path: data_path,
                reason: format!("expected {} parameters, found {}", net.num_params(), flat.len()),
            });
        }
        let mut it = flat.into_iter();
        for layer in &mut net.layers {
            layer.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            layer.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok((net, manifest.metadata))
    }
}

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    spec: NetworkSpec,
    seed: u64,
    num_params: usize,
    data_file: String,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// `<stem>.json` (manifest) and `<stem>.f32` (parameters).
pub fn weight_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f32"))
}

struct Pass {
    side: usize,
    batch: usize,
    /// Input to each layer, `[channels, batch·side²]`.
    acts: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn split_batch(out: &Array2<f64>, side: usize, batch: usize) -> Vec<Image> {
    let hw = side * side;
    let data = out.as_slice().expect("standard layout");
    (0..batch)
        .map(|b| Image::from_pixels(side, data[b * hw..(b + 1) * hw].to_vec()).expect("shape"))
        .collect()
}

/// `[c, B·s²] → [c·9, B·s²]` patch matrix with zero padding.
fn im2col(act: &Array2<f64>, side: usize, batch: usize) -> Array2<f64> {
    let cin = act.nrows();
    let hw = side * side;
    let ncols = batch * hw;
    let src = act.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((cin * TAPS, ncols));
    let dst = cols.as_slice_mut().expect("standard layout");
    for c in 0..cin {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut dst[(c * TAPS + ky * KERNEL + kx) * ncols..][..ncols];
                let (x0, x1) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                for b in 0..batch {
                    let base = c * ncols + b * hw;
                    for y in 0..side {
                        let sy = y + ky;
                        if sy == 0 || sy > side {
                            continue;
                        }
                        let sy = sy - 1;
                        for x in x0..x1 {
                            row[b * hw + y * side + x] = src[base + sy * side + x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back to pixels.
fn col2im(cols: &Array2<f64>, cin: usize, side: usize, batch: usize) -> Array2<f64> {
    let hw = side * side;
    let ncols = batch * hw;
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array2::zeros((cin, ncols));
    let dst = out.as_slice_mut().expect("standard layout");
    for c in 0..cin {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &src[(c * TAPS + ky * KERNEL + kx) * ncols..][..ncols];
                let (x0, x1) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                for b in 0..batch {
                    let base = c * ncols + b * hw;
                    for y in 0..side {
                        let sy = y + ky;
                        if sy == 0 || sy > side {
                            continue;
                        }
                        let sy = sy - 1;
                        for x in x0..x1 {
                            dst[base + sy * side + x + kx - 1] += row[b * hw + y * side + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// In-place ADAM update of one parameter tensor with bias-corrected moments;
/// `t` is the 1-based step number.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for i in 0..w.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Applies ADAM step `t` (1-based) to every parameter of `net`.
pub fn adam_step(net: &mut Network, grads: &Gradients, config: &TrainConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("ADAM step counter starts at 1".into()));
    }
    let lr = config.learning_rate;
    let state = &mut net.adam;
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        let (m, v) = (&mut state.m.layers[l], &mut state.v.layers[l]);
        adam_update(
            layer.weights.as_slice_mut().expect("standard layout"),
            g.weights.as_slice().expect("standard layout"),
            m.weights.as_slice_mut().expect("standard layout"),
            v.weights.as_slice_mut().expect("standard layout"),
            t,
            lr,
        );
        adam_update(
            layer.bias.as_slice_mut().expect("standard layout"),
            g.bias.as_slice().expect("standard layout"),
            m.bias.as_slice_mut().expect("standard layout"),
            v.bias.as_slice_mut().expect("standard layout"),
            t,
            lr,
        );
    }
    state.t = t;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Minibatch loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Minibatch ADAM on `½·mean((Q(input) − target)²)`.
///
/// Batches are consecutive slices of a per-epoch permutation drawn from
/// `config.seed`, so identical inputs give bit-identical weights. Continues
/// the network's ADAM step counter.
pub fn train(net: &mut Network, data: &[(Image, Image)], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let batch_size = config.batch_size.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut report = TrainReport::default();
    for _ in 0..config.iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (f, t) = &data[order[cursor]];
            batch.push((f, t));
            cursor += 1;
        }
        let (loss, grads) = net.loss_and_gradients(&batch);
        report.loss_trace.push(loss);
        let t = net.adam.t + 1;
        adam_step(net, &grads, config, t)?;
    }
    Ok(report)
}

/// Sum of gradients over several minibatches; mainly for tests.
pub fn accumulate(a: &mut Gradients, b: &Gradients) {
    a.add_assign(b);
}
