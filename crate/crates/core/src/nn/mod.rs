//! A small reverse-mode network engine.
//!
//! Networks are flat layer stacks grouped into named *blocks*. Block outputs
//! are the tap points used for feature pyramids; backward passes accept
//! gradients injected at any tapped block in addition to the final output.
//! Everything runs in `f64` so finite-difference checks are meaningful.

pub mod adam;
pub mod conv;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use conv::{col2im, im2col, nchw_to_rows, rows_to_nchw, ConvGeometry};

pub use adam::Adam;

/// Activations are always 4-D: (batch, channels, height, width).
/// Dense outputs use height = width = 1.
pub type Activation = Array4<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// (out, in * k * k)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub geo: ConvGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    /// (N, C*H*W, 1, 1) -> (N, C, H, W)
    Reshape { channels: usize, height: usize, width: usize },
    Upsample2x,
    AvgPool2x,
    LeakyRelu(f64),
    Tanh,
}

const LEAK: f64 = 0.2;

impl Layer {
    pub fn dense<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let std = (2.0 / ((1.0 + LEAK * LEAK) * fan_in as f64)).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || std * rng.sample::<f64, _>(StandardNormal));
        Layer::Dense(Dense { weight, bias: Array1::zeros(fan_out) })
    }

    pub fn conv<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / ((1.0 + LEAK * LEAK) * fan_in as f64)).sqrt();
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || std * rng.sample::<f64, _>(StandardNormal));
        Layer::Conv(Conv2d {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            geo: ConvGeometry { kernel, stride, pad: kernel / 2 },
        })
    }

    pub fn leaky_relu() -> Self {
        Layer::LeakyRelu(LEAK)
    }

    fn has_params(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv(_))
    }

    fn forward(&self, x: &Activation, keep: bool) -> Result<(Activation, Option<LayerCache>)> {
        Ok(match self {
            Layer::Dense(d) => {
                let n = x.dim().0;
                let flat = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, x.len() / n.max(1)))
                    .map_err(|e| Error::Input(e.to_string()))?;
                if flat.ncols() != d.weight.ncols() {
                    return Err(Error::Input(format!(
                        "dense layer expects {} inputs, got {}",
                        d.weight.ncols(),
                        flat.ncols()
                    )));
                }
                let mut out = flat.dot(&d.weight.t());
                out += &d.bias;
                if !out.is_standard_layout() {
                    out = out.as_standard_layout().into_owned();
                }
                let out4 = out.into_shape_with_order((n, d.weight.nrows(), 1, 1)).expect("dense output");
                let cache = keep.then(|| LayerCache::Dense { input_dim: x.dim(), flat });
                (out4, cache)
            }
            Layer::Conv(c) => {
                let (n, ch, h, w) = x.dim();
                if ch != c.in_channels {
                    return Err(Error::Input(format!("conv expects {} channels, got {ch}", c.in_channels)));
                }
                let cols = im2col(x, c.geo);
                let mut out = cols.dot(&c.weight.t());
                out += &c.bias;
                let y = rows_to_nchw(&out, n, c.geo.out_size(h), c.geo.out_size(w));
                let cache = keep.then(|| LayerCache::Conv { input_dim: x.dim(), cols });
                (y, cache)
            }
            Layer::Reshape { channels, height, width } => {
                let n = x.dim().0;
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, *channels, *height, *width))
                    .map_err(|e| Error::Input(e.to_string()))?;
                (y, keep.then(|| LayerCache::Shape(x.dim())))
            }
            Layer::Upsample2x => {
                let (n, c, h, w) = x.dim();
                let y = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, i, j)| x[[b, ch, i / 2, j / 2]]);
                (y, keep.then(|| LayerCache::Shape(x.dim())))
            }
            Layer::AvgPool2x => {
                let (n, c, h, w) = x.dim();
                let y = Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ch, i, j)| {
                    0.25 * (x[[b, ch, 2 * i, 2 * j]]
                        + x[[b, ch, 2 * i + 1, 2 * j]]
                        + x[[b, ch, 2 * i, 2 * j + 1]]
                        + x[[b, ch, 2 * i + 1, 2 * j + 1]])
                });
                (y, keep.then(|| LayerCache::Shape(x.dim())))
            }
            Layer::LeakyRelu(slope) => {
                let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
                (y, keep.then(|| LayerCache::Input(x.clone())))
            }
            Layer::Tanh => {
                let y = x.mapv(f64::tanh);
                let cache = keep.then(|| LayerCache::Output(y.clone()));
                (y, cache)
            }
        })
    }

    /// Returns the input gradient and, when requested, parameter gradients
    /// `(weight, bias)` flattened.
    fn backward(
        &self,
        cache: &LayerCache,
        grad: &Activation,
        want_params: bool,
    ) -> (Activation, Option<(Vec<f64>, Vec<f64>)>) {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input_dim, flat }) => {
                let n = grad.dim().0;
                let g = grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, d.weight.nrows()))
                    .expect("dense grad");
                let params = want_params.then(|| {
                    let gw = g.t().dot(flat);
                    let gb = g.sum_axis(Axis(0));
                    (row_major(gw), row_major(gb.insert_axis(Axis(0))))
                });
                let gx = Array4::from_shape_vec(*input_dim, row_major(g.dot(&d.weight))).expect("dense input grad");
                (gx, params)
            }
            (Layer::Conv(c), LayerCache::Conv { input_dim, cols }) => {
                let g = nchw_to_rows(grad);
                let params = want_params.then(|| {
                    let gw = g.t().dot(cols);
                    let gb = g.sum_axis(Axis(0));
                    (row_major(gw), row_major(gb.insert_axis(Axis(0))))
                });
                let gcols = g.dot(&c.weight);
                (col2im(&gcols, *input_dim, c.geo), params)
            }
            (Layer::Reshape { .. }, LayerCache::Shape(dim)) => {
                let gx = grad.as_standard_layout().into_owned().into_shape_with_order(*dim).expect("reshape grad");
                (gx, None)
            }
            (Layer::Upsample2x, LayerCache::Shape(dim)) => {
                let mut gx = Array4::zeros(*dim);
                for ((b, ch, i, j), v) in grad.indexed_iter() {
                    gx[[b, ch, i / 2, j / 2]] += v;
                }
                (gx, None)
            }
            (Layer::AvgPool2x, LayerCache::Shape(dim)) => {
                let gx = Array4::from_shape_fn(*dim, |(b, ch, i, j)| 0.25 * grad[[b, ch, i / 2, j / 2]]);
                (gx, None)
            }
            (Layer::LeakyRelu(slope), LayerCache::Input(x)) => {
                let mut gx = grad.clone();
                gx.zip_mut_with(x, |g, &v| {
                    if v <= 0.0 {
                        *g *= slope
                    }
                });
                (gx, None)
            }
            (Layer::Tanh, LayerCache::Output(y)) => {
                let mut gx = grad.clone();
                gx.zip_mut_with(y, |g, &t| *g *= 1.0 - t * t);
                (gx, None)
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Dense { input_dim: (usize, usize, usize, usize), flat: Array2<f64> },
    Conv { input_dim: (usize, usize, usize, usize), cols: Array2<f64> },
    Shape((usize, usize, usize, usize)),
    Input(Activation),
    Output(Activation),
}

/// A named group of consecutive layers whose output is a tap point.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
    pub trainable: bool,
}

impl Block {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self { name: name.into(), layers, trainable: true }
    }
}

/// Per-parameter-tensor gradients, aligned with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGrads(net.params().iter().map(|p| vec![0.0; p.values.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }
}

/// Borrowed view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub values: &'a [f64],
    pub trainable: bool,
}

/// Everything a backward pass needs from a training-mode forward.
#[derive(Clone, Debug)]
pub struct Trace {
    caches: Vec<Vec<LayerCache>>,
}

/// Output of a forward pass: final activation plus the requested taps.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Activation,
    pub taps: BTreeMap<usize, Activation>,
    pub trace: Option<Trace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub blocks: Vec<Block>,
}

impl Network {
    pub fn new(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn validate_taps(&self, taps: &[usize]) -> Result<()> {
        match taps.iter().find(|&&t| t >= self.blocks.len()) {
            Some(t) => Err(config_err(format!(
                "tap index {t} out of range for a network with {} blocks",
                self.blocks.len()
            ))),
            None => Ok(()),
        }
    }

    /// Runs the network. With `keep_trace` the caches needed by
    /// [`Network::backward`] are retained.
    pub fn forward(&self, x: &Activation, taps: &[usize], keep_trace: bool) -> Result<Forward> {
        self.validate_taps(taps)?;
        let mut cur = x.clone();
        let mut tapped = BTreeMap::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut bc = Vec::with_capacity(block.layers.len());
            for layer in &block.layers {
                let (y, cache) = layer.forward(&cur, keep_trace)?;
                if let Some(c) = cache {
                    bc.push(c);
                }
                cur = y;
            }
            if !cur.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: bi });
            }
            if taps.contains(&bi) {
                tapped.insert(bi, cur.clone());
            }
            caches.push(bc);
        }
        Ok(Forward { output: cur, taps: tapped, trace: keep_trace.then_some(Trace { caches }) })
    }

    /// Backpropagates `grad_out` (gradient at the final output, if any) plus
    /// `tap_grads` (gradients at block outputs). Returns the input gradient
    /// and parameter gradients; the latter are zero when `want_params` is
    /// false.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Option<&Activation>,
        tap_grads: &BTreeMap<usize, Activation>,
        want_params: bool,
    ) -> (Option<Activation>, ParamGrads) {
        let mut grads = ParamGrads::zeros_like(self);
        let offsets = self.param_offsets();
        let mut g: Option<Activation> = grad_out.cloned();
        for bi in (0..self.blocks.len()).rev() {
            if let Some(tg) = tap_grads.get(&bi) {
                g = Some(match g {
                    Some(acc) => acc + tg,
                    None => tg.clone(),
                });
            }
            let Some(mut cur) = g.take() else { continue };
            let block = &self.blocks[bi];
            let caches = &trace.caches[bi];
            let mut slot = offsets[bi] + block.layers.iter().filter(|l| l.has_params()).count() * 2;
            for (li, layer) in block.layers.iter().enumerate().rev() {
                let want = want_params && block.trainable && layer.has_params();
                let (gx, pg) = layer.backward(&caches[li], &cur, want);
                if layer.has_params() {
                    slot -= 2;
                    if let Some((gw, gb)) = pg {
                        grads.0[slot] = gw;
                        grads.0[slot + 1] = gb;
                    }
                }
                cur = gx;
            }
            g = Some(cur);
        }
        (g, grads)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            out.push(acc);
            acc += b.layers.iter().filter(|l| l.has_params()).count() * 2;
        }
        out
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for (li, layer) in block.layers.iter().enumerate() {
                let (w, b) = match layer {
                    Layer::Dense(d) => (&d.weight, &d.bias),
                    Layer::Conv(c) => (&c.weight, &c.bias),
                    _ => continue,
                };
                out.push(ParamView {
                    name: format!("{}.{li}.weight", block.name),
                    values: w.as_slice().expect("standard layout"),
                    trainable: block.trainable,
                });
                out.push(ParamView {
                    name: format!("{}.{li}.bias", block.name),
                    values: b.as_slice().expect("standard layout"),
                    trainable: block.trainable,
                });
            }
        }
        out
    }

    /// Mutable parameter slices with their trainable flags, in
    /// [`Network::params`] order.
    pub fn params_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            let trainable = block.trainable;
            for layer in &mut block.layers {
                let (w, b) = match layer {
                    Layer::Dense(d) => (&mut d.weight, &mut d.bias),
                    Layer::Conv(c) => (&mut c.weight, &mut c.bias),
                    _ => continue,
                };
                out.push((w.as_slice_mut().expect("standard layout"), trainable));
                out.push((b.as_slice_mut().expect("standard layout"), trainable));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn param_hash(&self) -> [u8; 32] {
        hash_params(self.params().iter().map(|p| p.values))
    }

    /// Hash restricted to the given blocks.
    pub fn block_hash(&self, blocks: std::ops::Range<usize>) -> [u8; 32] {
        let prefix: Vec<String> = self.blocks[blocks].iter().map(|b| format!("{}.", b.name)).collect();
        let params = self.params();
        hash_params(
            params
                .iter()
                .filter(|p| prefix.iter().any(|pre| p.name.starts_with(pre)))
                .map(|p| p.values),
        )
    }
}

fn hash_params<'a>(slices: impl Iterator<Item = &'a [f64]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for s in slices {
        for v in s {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Global average pool over the spatial axes: (N, C, H, W) -> (N, C).
/// Elements in logical row-major order regardless of memory layout.
fn row_major(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

pub fn global_avg_pool(x: &Activation) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

/// Adjoint of [`global_avg_pool`].
pub fn global_avg_pool_backward(grad: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Activation {
    let area = (dim.2 * dim.3) as f64;
    Array4::from_shape_fn(dim, |(b, c, _, _)| grad[[b, c]] / area)
}
