//! Scene-specific feature compressor: an MLP encoder `D → … → C` and a
//! mirrored decoder, trained with Adam on transient-weighted features.
//!
//! The network is generic over `f32` (training, inference) and `f64`
//! (gradient checks). Hidden layers use a leaky rectifier with slope 0.01;
//! the latent and reconstruction layers are linear. [`MlpParams::decode`]
//! returns unit-norm features; the training loss compares the raw decoder
//! output with the weighted input.
//!
//! MAE1 layout (little-endian): magic `b"MAE1"`, `u32` encoder layer count,
//! `u32` decoder layer count, then per layer `u32` rows (outputs), `u32`
//! cols (inputs), `rows * cols` row-major `f32` weights and `rows` `f32`
//! biases.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{write_atomic, Tensor};
use crate::uncertainty::UncertaintyMap;

pub const MAE_MAGIC: &[u8; 4] = b"MAE1";
pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 32];
/// Decoder outputs shorter than this are returned unnormalized.
pub const NORMALIZE_EPS: f64 = 1e-12;

pub trait Real: Float + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// One affine layer `y = W x + b`, `W` stored `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Layer<T> {
    fn zeros_like(&self) -> Self {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weights.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = f32> {
    pub encoder: Vec<Layer<T>>,
    pub decoder: Vec<Layer<T>>,
}

fn leaky<T: Real>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        z * T::of(LEAKY_SLOPE)
    }
}

fn leaky_grad<T: Real>(z: T) -> T {
    if z > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}

fn glorot_layer<T: Real>(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Layer<T> {
    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
    Layer {
        weights: Array2::from_shape_simple_fn((outputs, inputs), || T::of(rng.random_range(-limit..limit))),
        bias: Array1::zeros(outputs),
    }
}

impl<T: Real> MlpParams<T> {
    /// Glorot-uniform weights and zero biases; encoder widths
    /// `[d, hidden…, c]`, decoder the reverse.
    pub fn init(d: usize, c: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if c == 0 || d < c {
            return Err(Error::invalid(format!("autoencoder needs D >= C >= 1, got D = {d}, C = {c}")));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        let mut rng = seed::stream(seed, &[seed::tag("ae-init")]);
        let mut widths = vec![d];
        widths.extend_from_slice(hidden);
        widths.push(c);
        let encoder = widths.windows(2).map(|w| glorot_layer(w[0], w[1], &mut rng)).collect();
        widths.reverse();
        let decoder = widths.windows(2).map(|w| glorot_layer(w[0], w[1], &mut rng)).collect();
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map_or(0, Layer::outputs)
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.encoder.iter_mut().chain(&mut self.decoder)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(Layer::zeros_like).collect(),
            decoder: self.decoder.iter().map(Layer::zeros_like).collect(),
        }
    }

    /// Dimension chain and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::invalid("empty layer chain"));
        }
        for chain in [&self.encoder, &self.decoder] {
            for pair in chain.windows(2) {
                if pair[0].outputs() != pair[1].inputs() {
                    return Err(Error::shape(pair[0].outputs(), pair[1].inputs()));
                }
            }
            for l in chain.iter() {
                if l.bias.len() != l.outputs() {
                    return Err(Error::shape(l.outputs(), l.bias.len()));
                }
            }
        }
        if self.latent_dim() != self.decoder[0].inputs() {
            return Err(Error::shape(self.latent_dim(), self.decoder[0].inputs()));
        }
        let out = self.decoder.last().map_or(0, Layer::outputs);
        if out != self.input_dim() {
            return Err(Error::shape(self.input_dim(), out));
        }
        if self.layers().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("autoencoder parameters"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        let conv = |l: &Layer<T>| Layer {
            weights: l.weights.mapv(|v| U::of(v.to_f64().unwrap_or(f64::NAN))),
            bias: l.bias.mapv(|v| U::of(v.to_f64().unwrap_or(f64::NAN))),
        };
        MlpParams {
            encoder: self.encoder.iter().map(conv).collect(),
            decoder: self.decoder.iter().map(conv).collect(),
        }
    }

    fn run(chain: &[Layer<T>], x: ArrayView2<T>) -> Array2<T> {
        let mut a = x.to_owned();
        for (k, l) in chain.iter().enumerate() {
            a = l.forward(a.view());
            if k + 1 < chain.len() {
                a.mapv_inplace(leaky);
            }
        }
        a
    }

    fn check_cols(x: &ArrayView2<T>, expected: usize) -> Result<()> {
        if x.ncols() != expected {
            return Err(Error::shape(format!("{expected} columns"), format!("{} columns", x.ncols())));
        }
        Ok(())
    }

    /// Row-wise encoding of an `M × D` batch.
    pub fn encode_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Self::check_cols(&x, self.input_dim())?;
        Ok(Self::run(&self.encoder, x))
    }

    /// Raw decoder output of an `M × C` batch, without normalization.
    pub fn decode_raw_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        Self::check_cols(&z, self.latent_dim())?;
        Ok(Self::run(&self.decoder, z))
    }

    /// Row-wise decoding to unit-norm features.
    pub fn decode_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        let mut out = self.decode_raw_batch(z)?;
        for mut row in out.rows_mut() {
            let n = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
            if n.to_f64().unwrap_or(0.0) >= NORMALIZE_EPS {
                row.mapv_inplace(|v| v / n);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, feature: &[T]) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, feature.len()), feature).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.encode_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn decode(&self, latent: &[T]) -> Result<Vec<T>> {
        let z = ArrayView2::from_shape((1, latent.len()), latent).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.decode_batch(z)?.into_raw_vec_and_offset().0)
    }
}

impl MlpParams<f32> {
    /// Encodes every pixel of a `H × W × D` map into a `H × W × C` map.
    pub fn encode_map(&self, features: &Tensor) -> Result<Tensor> {
        let (h, w, d) = features.shape();
        let x = ArrayView2::from_shape((h * w, d), features.data()).map_err(|e| Error::invalid(e.to_string()))?;
        let z = self.encode_batch(x)?;
        Tensor::from_vec(h, w, self.latent_dim(), z.into_raw_vec_and_offset().0)
    }

    /// Decodes a `H × W × C` latent map into unit-norm `D`-dim features.
    pub fn decode_map(&self, latents: &Tensor) -> Result<Tensor> {
        let (h, w, c) = latents.shape();
        let z = ArrayView2::from_shape((h * w, c), latents.data()).map_err(|e| Error::invalid(e.to_string()))?;
        let x = self.decode_batch(z)?;
        Tensor::from_vec(h, w, self.input_dim(), x.into_raw_vec_and_offset().0)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("{v} exceeds u32")));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAE_MAGIC);
        buf.extend_from_slice(&u32_of(self.encoder.len())?.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.decoder.len())?.to_le_bytes());
        for l in self.layers() {
            buf.extend_from_slice(&u32_of(l.outputs())?.to_le_bytes());
            buf.extend_from_slice(&u32_of(l.inputs())?.to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: String| Error::Format { format: "MAE1", reason };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n_enc = cur.u32()?;
        let n_dec = cur.u32()?;
        let mut layers = Vec::with_capacity(n_enc.min(64) + n_dec.min(64));
        for _ in 0..n_enc + n_dec {
            let rows = cur.u32()?;
            let cols = cur.u32()?;
            let n = rows
                .checked_mul(cols)
                .and_then(|v| v.checked_add(rows))
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| bad("dimension overflow".into()))?;
            let vals: Vec<f32> = cur
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let weights = Array2::from_shape_vec((rows, cols), vals[..rows * cols].to_vec())
                .map_err(|e| bad(e.to_string()))?;
            layers.push(Layer {
                weights,
                bias: Array1::from(vals[rows * cols..].to_vec()),
            });
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        let decoder = layers.split_off(n_enc);
        let params = MlpParams { encoder: layers, decoder };
        params.validate().map_err(|e| bad(e.to_string()))?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let chunk = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::Format {
                format: "MAE1",
                reason: "truncated".into(),
            })?;
        self.pos += n;
        Ok(chunk)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Forward pass keeping pre-activations and activations of every layer.
struct Trace<T> {
    /// `inputs[k]` feeds layer `k`; the last entry is the network output.
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

fn trace<T: Real>(p: &MlpParams<T>, x: Array2<T>) -> Trace<T> {
    let n_enc = p.encoder.len();
    let total = n_enc + p.decoder.len();
    let mut inputs = vec![x];
    let mut pre = Vec::with_capacity(total);
    for (k, l) in p.layers().enumerate() {
        let z = l.forward(inputs[k].view());
        let linear = k + 1 == n_enc || k + 1 == total;
        inputs.push(if linear { z.clone() } else { z.mapv(leaky) });
        pre.push(z);
    }
    Trace { inputs, pre }
}

fn check_batch<T: Real>(p: &MlpParams<T>, x: &ArrayView2<T>, w: &[T]) -> Result<()> {
    if x.ncols() != p.input_dim() {
        return Err(Error::shape(p.input_dim(), x.ncols()));
    }
    if w.len() != x.nrows() {
        return Err(Error::shape(x.nrows(), w.len()));
    }
    Ok(())
}

/// Weighted inputs `w·F` and the residual sign pattern; rows with `w = 0`
/// are masked out entirely.
fn weighted<T: Real>(x: ArrayView2<T>, w: &[T]) -> Array2<T> {
    let mut xw = x.to_owned();
    for (mut row, &wi) in xw.rows_mut().into_iter().zip(w) {
        row.mapv_inplace(|v| v * wi);
    }
    xw
}

fn row_losses<T: Real>(out: &Array2<T>, target: &Array2<T>, w: &[T]) -> T {
    let mut total = T::zero();
    for ((o, t), &wi) in out.rows().into_iter().zip(target.rows()).zip(w) {
        if wi != T::zero() {
            total = total + Zip::from(&o).and(&t).fold(T::zero(), |acc, &a, &b| acc + (a - b).abs());
        }
    }
    total
}

/// Mean over samples of `‖dec(enc(w·F)) − w·F‖₁` using the raw decoder
/// output. Samples with `w = 0` contribute nothing.
pub fn ae_loss<T: Real>(p: &MlpParams<T>, x: ArrayView2<T>, w: &[T]) -> Result<T> {
    check_batch(p, &x, w)?;
    if x.nrows() == 0 {
        return Ok(T::zero());
    }
    let xw = weighted(x, w);
    let out = MlpParams::run(&p.decoder, MlpParams::run(&p.encoder, xw.view()).view());
    Ok(row_losses(&out, &xw, w) / T::of(x.nrows() as f64))
}

/// [`ae_loss`] and its gradient with respect to every parameter.
pub fn ae_loss_grad<T: Real>(p: &MlpParams<T>, x: ArrayView2<T>, w: &[T]) -> Result<(T, MlpParams<T>)> {
    check_batch(p, &x, w)?;
    let mut grads = p.zeros_like();
    let m = x.nrows();
    if m == 0 {
        return Ok((T::zero(), grads));
    }
    let xw = weighted(x, w);
    let tr = trace(p, xw.clone());
    let out = tr.inputs.last().expect("non-empty trace");
    let loss = row_losses(out, &xw, w) / T::of(m as f64);

    let inv_m = T::one() / T::of(m as f64);
    let mut delta = out - &xw;
    for (mut row, &wi) in delta.rows_mut().into_iter().zip(w) {
        if wi == T::zero() {
            row.fill(T::zero());
        } else {
            row.mapv_inplace(|r| {
                if r > T::zero() {
                    inv_m
                } else if r < T::zero() {
                    -inv_m
                } else {
                    T::zero()
                }
            });
        }
    }

    let n_enc = p.encoder.len();
    let total = tr.pre.len();
    let layers: Vec<&Layer<T>> = p.layers().collect();
    let mut grad_layers: Vec<&mut Layer<T>> = grads.layers_mut().collect();
    for k in (0..total).rev() {
        // `delta` holds dL/d(output of layer k); turn it into dL/dz.
        let linear = k + 1 == n_enc || k + 1 == total;
        if !linear {
            Zip::from(&mut delta).and(&tr.pre[k]).for_each(|d, &z| *d = *d * leaky_grad(z));
        }
        let g = &mut grad_layers[k];
        g.weights = delta.t().dot(&tr.inputs[k]);
        g.bias = delta.sum_axis(Axis(0));
        if k > 0 {
            delta = delta.dot(&layers[k].weights);
        }
    }
    Ok((loss, grads))
}

/// Adam with per-parameter moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: MlpParams<T>,
    v: MlpParams<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(like: &MlpParams<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &MlpParams<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        let update = |p: &mut T, &g: &T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        let layers = params.layers_mut().zip(grads.layers()).zip(self.m.layers_mut().zip(self.v.layers_mut()));
        for ((pl, gl), (ml, vl)) in layers {
            Zip::from(&mut pl.weights)
                .and(&gl.weights)
                .and(&mut ml.weights)
                .and(&mut vl.weights)
                .for_each(update);
            Zip::from(&mut pl.bias)
                .and(&gl.bias)
                .and(&mut ml.bias)
                .and(&mut vl.bias)
                .for_each(update);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tau_u: f64,
    pub hidden: Vec<usize>,
    /// Upper bound on training pixels drawn from the original images.
    pub max_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 64,
            seed: 0,
            tau_u: 0.9,
            hidden: DEFAULT_HIDDEN.to_vec(),
            max_samples: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate = {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_samples == 0 {
            return Err(Error::Config("batch_size and max_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_u) {
            return Err(Error::Config(format!("tau_u = {} outside [0, 1]", self.tau_u)));
        }
        Ok(())
    }
}

/// Training pixels: `M × D` features and their weights `w = 1 − U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AeDataset {
    pub features: Array2<f32>,
    pub weights: Vec<f32>,
}

impl AeDataset {
    pub fn new(features: Array2<f32>, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != features.nrows() {
            return Err(Error::shape(features.nrows(), weights.len()));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("sample weights must lie in [0, 1]"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("autoencoder features"));
        }
        Ok(Self { features, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Pixels of the original-image feature maps whose normalized transient
    /// uncertainty is at most `tau_u`, weighted by `1 − U^T`. A map without
    /// uncertainty gets weight 1 everywhere. At most `max_samples` pixels
    /// are kept, drawn without replacement from a seeded stream and then
    /// kept in scan order.
    pub fn from_maps(maps: &[(&Tensor, Option<&UncertaintyMap>)], tau_u: f64, max_samples: usize, seed: u64) -> Result<Self> {
        let dim = maps.first().map(|(t, _)| t.channels()).ok_or_else(|| Error::invalid("no feature maps"))?;
        let mut pool: Vec<(usize, usize, f32)> = Vec::new();
        for (mi, (f, u)) in maps.iter().enumerate() {
            if f.channels() != dim {
                return Err(Error::shape(dim, f.channels()));
            }
            if let Some(u) = u {
                if (u.values.height(), u.values.width()) != (f.height(), f.width()) {
                    return Err(Error::shape(
                        format!("{}x{}", f.height(), f.width()),
                        format!("{}x{}", u.values.height(), u.values.width()),
                    ));
                }
            }
            for p in 0..f.num_pixels() {
                let ut = u.map_or(0.0, |u| f64::from(u.get(p)));
                if ut <= tau_u {
                    pool.push((mi, p, (1.0 - ut) as f32));
                }
            }
        }
        if pool.is_empty() {
            return Err(Error::invalid("no training pixels left after occluder exclusion"));
        }
        if pool.len() > max_samples {
            let mut rng = seed::stream(seed, &[seed::tag("ae-samples")]);
            let mut keep = index::sample(&mut rng, pool.len(), max_samples).into_vec();
            keep.sort_unstable();
            pool = keep.into_iter().map(|i| pool[i]).collect();
        }
        let mut features = Array2::zeros((pool.len(), dim));
        for (row, &(mi, p, _)) in pool.iter().enumerate() {
            features.row_mut(row).assign(&ndarray::ArrayView1::from(maps[mi].0.pixel(p)));
        }
        Self::new(features, pool.iter().map(|s| s.2).collect())
    }
}

/// Mean loss before training (`initial`) and the mean training loss of each
/// epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub initial: f64,
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }

    /// `epoch,loss` rows; epoch 0 is the loss before training.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss"])?;
        w.write_record(["0".to_string(), format!("{:.9}", self.initial)])?;
        for (e, l) in self.epochs.iter().enumerate() {
            w.write_record([(e + 1).to_string(), format!("{l:.9}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Full-dataset loss evaluated in chunks.
pub fn dataset_loss(p: &MlpParams<f32>, data: &AeDataset) -> Result<f64> {
    const CHUNK: usize = 2048;
    let mut total = 0.0f64;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let l = ae_loss(p, data.features.slice(s![start..end, ..]), &data.weights[start..end])?;
        total += f64::from(l) * (end - start) as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Initializes from `cfg.seed` and trains.
pub fn train_ae(data: &AeDataset, latent_dim: usize, cfg: &TrainConfig) -> Result<(MlpParams<f32>, LossCurve)> {
    let params = MlpParams::init(data.dim(), latent_dim, &cfg.hidden, cfg.seed)?;
    train_from(params, data, cfg)
}

/// Adam over seeded mini-batch shuffles; aborts when a loss turns
/// non-finite.
pub fn train_from(mut params: MlpParams<f32>, data: &AeDataset, cfg: &TrainConfig) -> Result<(MlpParams<f32>, LossCurve)> {
    cfg.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty autoencoder dataset"));
    }
    if data.dim() != params.input_dim() {
        return Err(Error::shape(params.input_dim(), data.dim()));
    }
    let mut curve = LossCurve {
        initial: dataset_loss(&params, data)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(cfg.seed, &[seed::tag("ae-shuffle"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.features.select(Axis(0), batch);
            let w: Vec<f32> = batch.iter().map(|&i| data.weights[i]).collect();
            let (loss, grads) = ae_loss_grad(&params, x.view(), &w)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    what: "autoencoder",
                    step,
                    loss,
                });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut params, &grads, cfg.learning_rate);
            step += 1;
        }
        curve.epochs.push(total / data.len() as f64);
    }
    params.validate().map_err(|_| Error::Diverged {
        what: "autoencoder",
        step,
        loss: curve.last(),
    })?;
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(m: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::stream(seed, &[]);
        Array2::from_shape_simple_fn((m, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = MlpParams::<f32>::init(512, 3, &DEFAULT_HIDDEN, 1).unwrap();
        assert_eq!(p.latent_dim(), 3);
        assert_eq!(p.input_dim(), 512);
        assert_eq!(p.encoder.len(), 4);
        assert_eq!(p.decoder[0].inputs(), 3);
        p.validate().unwrap();
        assert_eq!(p, MlpParams::init(512, 3, &DEFAULT_HIDDEN, 1).unwrap());
        assert_ne!(p, MlpParams::init(512, 3, &DEFAULT_HIDDEN, 2).unwrap());

        let lin = MlpParams::<f32>::init(8, 2, &[], 0).unwrap();
        assert_eq!((lin.encoder.len(), lin.decoder.len()), (1, 1));
        let z = lin.encode(&[0.5; 8]).unwrap();
        assert_eq!(z.len(), 2);
        assert_eq!(lin.decode(&z).unwrap().len(), 8);

        assert!(MlpParams::<f32>::init(2, 3, &[], 0).is_err());
        assert!(MlpParams::<f32>::init(2, 0, &[], 0).is_err());
        assert!(lin.encode(&[0.5; 7]).is_err());
    }

    #[test]
    fn zero_weights_decode_to_zero() {
        let mut p = MlpParams::<f32>::init(6, 2, &[4], 0).unwrap();
        for l in p.layers_mut() {
            l.weights.fill(0.0);
        }
        assert_eq!(p.decode(&[1.0, -1.0]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn decode_is_unit_norm_and_batch_consistent() {
        let p = MlpParams::<f64>::init(10, 3, &[7, 5], 4).unwrap();
        let x = random_batch(6, 10, 9);
        let z = p.encode_batch(x.view()).unwrap();
        let y = p.decode_batch(z.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let zi = p.encode(row.as_slice().unwrap()).unwrap();
            assert_eq!(zi.as_slice(), z.row(i).as_slice().unwrap());
            let yi = p.decode(&zi).unwrap();
            assert_eq!(yi.as_slice(), y.row(i).as_slice().unwrap());
            let n: f64 = yi.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_network_has_zero_loss() {
        let d = 4;
        let eye = Array2::<f64>::eye(d);
        let layer = Layer {
            weights: eye,
            bias: Array1::zeros(d),
        };
        let p = MlpParams {
            encoder: vec![layer.clone()],
            decoder: vec![layer],
        };
        let x = random_batch(5, d, 3);
        assert_eq!(ae_loss(&p, x.view(), &[1.0; 5]).unwrap(), 0.0);
        assert_eq!(ae_loss(&p, x.view(), &[0.3; 5]).unwrap(), 0.0);
    }

    #[test]
    fn fully_masked_batch_is_inert() {
        let p = MlpParams::<f64>::init(6, 2, &[5], 1).unwrap();
        let x = random_batch(4, 6, 2);
        let (loss, g) = ae_loss_grad(&p, x.view(), &[0.0; 4]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layers().all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0)));

        // A masked row changes neither the gradient sum nor the loss sum.
        let w = [1.0, 0.0, 0.7, 0.0];
        let (l_all, g_all) = ae_loss_grad(&p, x.view(), &w).unwrap();
        let kept = x.select(Axis(0), &[0, 2]);
        let (l_kept, g_kept) = ae_loss_grad(&p, kept.view(), &[1.0, 0.7]).unwrap();
        assert!((l_all * 4.0 - l_kept * 2.0).abs() < 1e-12);
        for (a, b) in g_all.layers().zip(g_kept.layers()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x * 4.0 - y * 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = MlpParams::<f64>::init(6, 2, &[5, 4], 7).unwrap();
        let x = random_batch(5, 6, 8);
        let w = [1.0, 0.8, 0.5, 1.0, 0.9];
        let (_, g) = ae_loss_grad(&p, x.view(), &w).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        let n_layers = p.encoder.len() + p.decoder.len();
        for k in 0..n_layers {
            let shape = p.layers().nth(k).unwrap().weights.dim();
            let mut entries: Vec<(Option<(usize, usize)>, usize)> = Vec::new();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    entries.push((Some((r, c)), 0));
                }
                entries.push((None, r));
            }
            for (wc, bi) in entries {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    let l = q.layers_mut().nth(k).unwrap();
                    match wc {
                        Some(rc) => l.weights[rc] += delta,
                        None => l.bias[bi] += delta,
                    }
                    ae_loss(&q, x.view(), &w).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let gl = g.layers().nth(k).unwrap();
                let an = match wc {
                    Some(rc) => gl.weights[rc],
                    None => gl.bias[bi],
                };
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err <= 1e-3, "layer {k} {wc:?}/{bi}: fd {fd} vs analytic {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, p.num_parameters());
    }

    #[test]
    fn mae_round_trip() {
        let p = MlpParams::<f32>::init(16, 3, &[8, 4], 5).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MAE1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(MlpParams::read_from(buf.as_slice()).unwrap(), p);
        assert!(MlpParams::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(MlpParams::read_from(bad.as_slice()).is_err());
    }

    fn toy_dataset() -> AeDataset {
        let mut rng = seed::stream(3, &[]);
        let centers = [array![1.0f32, 0.0, 0.0, 0.0], array![0.0, 1.0, 0.0, 0.0], array![0.0, 0.0, 0.0, 1.0]];
        let rows: Vec<f32> = (0..96)
            .flat_map(|i| {
                let c = &centers[i % 3];
                c.iter().map(|&v| v + rng.random_range(-0.05..0.05)).collect::<Vec<_>>()
            })
            .collect();
        AeDataset::new(Array2::from_shape_vec((96, 4), rows).unwrap(), vec![1.0; 96]).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let data = toy_dataset();
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 1e-2,
            batch_size: 16,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let (p1, c1) = train_ae(&data, 2, &cfg).unwrap();
        let (p2, c2) = train_ae(&data, 2, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
        assert!(c1.last() < c1.initial);
        assert_eq!(c1.epochs.len(), 40);
        let csv = c1.to_csv().unwrap();
        assert!(csv.starts_with("epoch,loss\n0,"));
        assert_eq!(csv.lines().count(), 42);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let data = toy_dataset();
        let cfg = TrainConfig {
            epochs: 0,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let (p, curve) = train_ae(&data, 2, &cfg).unwrap();
        assert_eq!(p, MlpParams::init(4, 2, &[8], cfg.seed).unwrap());
        assert!(curve.epochs.is_empty());
    }

    #[test]
    fn dataset_excludes_occluders() {
        let f = Tensor::from_vec(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let u = UncertaintyMap {
            values: Tensor::from_vec(1, 3, 1, vec![0.0, 0.95, 0.5]).unwrap(),
            kind: crate::uncertainty::UncertaintyKind::Transient,
            normalized: true,
        };
        let d = AeDataset::from_maps(&[(&f, Some(&u))], 0.9, 100, 0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.weights, vec![1.0, 0.5]);
        assert_eq!(d.features.row(1).to_vec(), vec![1.0, 1.0]);
        let sub = AeDataset::from_maps(&[(&f, None)], 0.9, 2, 0).unwrap();
        assert_eq!(sub.len(), 2);
        let all_out = UncertaintyMap {
            values: Tensor::filled(1, 3, 1, 1.0),
            ..u
        };
        assert!(AeDataset::from_maps(&[(&f, Some(&all_out))], 0.9, 100, 0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_dataset();
        let mut p = MlpParams::<f32>::init(4, 2, &[8], 0).unwrap();
        p.encoder[0].weights[(0, 0)] = f32::MAX;
        p.encoder[0].weights[(1, 0)] = f32::MAX;
        let cfg = TrainConfig {
            epochs: 1,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        assert!(matches!(train_from(p, &data, &cfg), Err(Error::Diverged { .. })));
    }
}
