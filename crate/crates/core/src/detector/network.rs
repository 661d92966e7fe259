use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{self, out_size};
use super::raw::RawPrediction;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::Image;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// 2×2, stride 2.
    MaxPool,
}

/// Layer list plus the grid, class count, and the single anchor prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorArch {
    pub name: String,
    pub input_size: usize,
    pub input_channels: usize,
    pub layers: Vec<Layer>,
    pub grid: usize,
    pub classes: usize,
    /// Prior box `(w, h)` in unit coordinates.
    pub anchor: [f64; 2],
}

fn conv_block(layers: &mut Vec<Layer>, in_ch: usize, out_ch: usize) {
    layers.push(Layer::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
    });
    layers.push(Layer::Relu);
    layers.push(Layer::MaxPool);
}

impl DetectorArch {
    /// Reference detector: four conv/ReLU/pool blocks (16/32/64/64) down to a
    /// 4×4 grid, then a 1×1 head.
    pub fn reference_a() -> Self {
        let mut layers = Vec::new();
        let chans = [3, 16, 32, 64, 64];
        for w in chans.windows(2) {
            conv_block(&mut layers, w[0], w[1]);
        }
        layers.push(Layer::Conv {
            in_ch: 64,
            out_ch: 8,
            kernel: 1,
            stride: 1,
        });
        Self {
            name: "A".into(),
            input_size: 64,
            input_channels: 3,
            layers,
            grid: 4,
            classes: 3,
            anchor: [0.45, 0.45],
        }
    }

    /// Transfer target: three blocks (24/48/96) down to an 8×8 grid.
    pub fn reference_b() -> Self {
        let mut layers = Vec::new();
        let chans = [3, 24, 48, 96];
        for w in chans.windows(2) {
            conv_block(&mut layers, w[0], w[1]);
        }
        layers.push(Layer::Conv {
            in_ch: 96,
            out_ch: 8,
            kernel: 1,
            stride: 1,
        });
        Self {
            name: "B".into(),
            input_size: 64,
            input_channels: 3,
            layers,
            grid: 8,
            classes: 3,
            anchor: [0.45, 0.45],
        }
    }

    pub fn head_channels(&self) -> usize {
        5 + self.classes
    }

    /// Walks the layer list and checks that it ends in a `(5 + C) × G × G` map.
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !self.input_size.is_multiple_of(self.grid) {
            return Err(Error::param(format!(
                "grid {} must divide input size {}",
                self.grid, self.input_size
            )));
        }
        if self.classes < 2 {
            return Err(Error::param("detector needs at least two classes"));
        }
        if !(self.anchor[0] > 0.0 && self.anchor[1] > 0.0) {
            return Err(Error::param("anchor sizes must be positive"));
        }
        let (mut c, mut s) = (self.input_channels, self.input_size);
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                } => {
                    if in_ch != c || kernel == 0 || kernel % 2 == 0 || stride == 0 || out_ch == 0 {
                        return Err(Error::param(format!("layer {i}: bad conv spec {layer:?} for {c} input channels")));
                    }
                    c = out_ch;
                    s = out_size(s, kernel, stride);
                }
                Layer::Relu => {}
                Layer::MaxPool => {
                    if s % 2 != 0 {
                        return Err(Error::param(format!("layer {i}: cannot pool odd size {s}")));
                    }
                    s /= 2;
                }
            }
        }
        if c != self.head_channels() || s != self.grid {
            return Err(Error::param(format!(
                "architecture ends in {c}×{s}×{s}, expected {}×{g}×{g}",
                self.head_channels(),
                g = self.grid
            )));
        }
        Ok(())
    }
}

/// Kernel stored as `out × (in·k·k)`; logical shape `out × in × k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams<T> {
    pub arch: DetectorArch,
    /// One entry per conv layer, in layer order.
    pub convs: Vec<ConvWeights<T>>,
    pub training_seed: u64,
}

impl<T: Scalar> DetectorParams<T> {
    /// He-uniform kernels, zero biases.
    pub fn init(arch: &DetectorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "init"));
        let convs = arch
            .layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => Some((in_ch, out_ch, kernel)),
                _ => None,
            })
            .map(|(in_ch, out_ch, kernel)| {
                let fan_in = in_ch * kernel * kernel;
                let bound = (6.0 / fan_in as f64).sqrt();
                ConvWeights {
                    weight: Array2::from_shape_fn((out_ch, fan_in), |_| T::lit(rng.random_range(-bound..bound))),
                    bias: Array1::zeros(out_ch),
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            convs,
            training_seed: seed,
        })
    }

    pub fn zeros(arch: &DetectorArch) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        for c in &mut p.convs {
            c.weight.fill(T::zero());
            c.bias.fill(T::zero());
        }
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> DetectorParams<U> {
        DetectorParams {
            arch: self.arch.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvWeights {
                    weight: c.weight.mapv(|v| U::lit(v.as_f64())),
                    bias: c.bias.mapv(|v| U::lit(v.as_f64())),
                })
                .collect(),
            training_seed: self.training_seed,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.convs
            .iter()
            .all(|c| c.weight.iter().chain(c.bias.iter()).all(|v| v.is_finite()))
    }
}

enum LayerTape<T> {
    Conv { cols: Array2<T>, in_shape: (usize, usize, usize) },
    Relu { out: Array3<T> },
    Pool { argmax: Vec<u32>, in_shape: (usize, usize, usize) },
}

/// Intermediate values retained by [`forward_with_tape`] for the backward pass.
pub struct Tape<T> {
    layers: Vec<LayerTape<T>>,
}

fn check_input<T: Scalar>(arch: &DetectorArch, image: &Image<T>) -> Result<()> {
    let expected = (arch.input_size, arch.input_size, arch.input_channels);
    if image.dim() != expected {
        let (h, w, c) = image.dim();
        return Err(Error::InputShape {
            expected: vec![expected.0, expected.1, expected.2],
            got: vec![h, w, c],
        });
    }
    Ok(())
}

pub(crate) fn to_chw<T: Scalar>(image: &Image<T>) -> Array3<T> {
    image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

fn run<T: Scalar>(params: &DetectorParams<T>, input: Array3<T>, mut tape: Option<&mut Vec<LayerTape<T>>>) -> RawPrediction<T> {
    let mut x = input;
    let mut conv_idx = 0;
    for layer in &params.arch.layers {
        x = match *layer {
            Layer::Conv { kernel, stride, .. } => {
                let cw = &params.convs[conv_idx];
                conv_idx += 1;
                let in_shape = x.dim();
                let (out, cols) = layers::conv_forward(&x, &cw.weight, &cw.bias, kernel, stride);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::Conv { cols, in_shape });
                }
                out
            }
            Layer::Relu => {
                let out = layers::relu(&x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::Relu { out: out.clone() });
                }
                out
            }
            Layer::MaxPool => {
                let in_shape = x.dim();
                let (out, argmax) = layers::maxpool_forward(&x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::Pool { argmax, in_shape });
                }
                out
            }
        };
    }
    RawPrediction::new(
        x.permuted_axes([1, 2, 0]).as_standard_layout().into_owned(),
        params.arch.anchor,
    )
}

/// Runs the network on an `H × W × 3` image.
pub fn forward<T: Scalar>(params: &DetectorParams<T>, image: &Image<T>) -> Result<RawPrediction<T>> {
    check_input(&params.arch, image)?;
    Ok(run(params, to_chw(image), None))
}

pub fn forward_with_tape<T: Scalar>(params: &DetectorParams<T>, image: &Image<T>) -> Result<(RawPrediction<T>, Tape<T>)> {
    check_input(&params.arch, image)?;
    Ok(forward_chw(params, to_chw(image)))
}

pub(crate) fn forward_chw<T: Scalar>(params: &DetectorParams<T>, input: Array3<T>) -> (RawPrediction<T>, Tape<T>) {
    let mut layers = Vec::with_capacity(params.arch.layers.len());
    let raw = run(params, input, Some(&mut layers));
    (raw, Tape { layers })
}

/// Gradients from one backward pass.
pub struct Gradients<T> {
    /// Same layout as [`DetectorParams::convs`]; `None` unless requested.
    pub params: Option<Vec<ConvWeights<T>>>,
    /// `H × W × C`, like the input image; `None` unless requested.
    pub input: Option<Image<T>>,
}

/// Backpropagates `d_raw` (shaped like the raw prediction values).
pub fn backward<T: Scalar>(
    params: &DetectorParams<T>,
    tape: &Tape<T>,
    d_raw: &Array3<T>,
    want_params: bool,
    want_input: bool,
) -> Gradients<T> {
    let mut g = d_raw.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    let mut conv_idx = params.convs.len();
    let mut pgrads: Vec<Option<ConvWeights<T>>> = vec![None; params.convs.len()];
    for (pos, (layer, lt)) in params.arch.layers.iter().zip(&tape.layers).enumerate().rev() {
        let is_first = pos == 0;
        g = match (layer, lt) {
            (Layer::Conv { kernel, stride, .. }, LayerTape::Conv { cols, in_shape }) => {
                conv_idx -= 1;
                let cw = &params.convs[conv_idx];
                let (oc, ho, wo) = g.dim();
                let g2 = std::mem::take(&mut g).into_shape_with_order((oc, ho * wo)).unwrap();
                if want_params {
                    pgrads[conv_idx] = Some(ConvWeights {
                        weight: g2.dot(&cols.t()),
                        bias: g2.sum_axis(Axis(1)),
                    });
                }
                if is_first && !want_input {
                    break;
                }
                let d_cols = cw.weight.t().dot(&g2);
                layers::col2im(d_cols.view(), *in_shape, *kernel, *stride)
            }
            (Layer::Relu, LayerTape::Relu { out }) => layers::relu_backward(out, &g),
            (Layer::MaxPool, LayerTape::Pool { argmax, in_shape }) => layers::maxpool_backward(&g, argmax, *in_shape),
            _ => unreachable!("tape does not match architecture"),
        };
        if is_first {
            break;
        }
    }
    let input = want_input.then(|| g.permuted_axes([1, 2, 0]).as_standard_layout().into_owned());
    Gradients {
        params: want_params.then(|| pgrads.into_iter().map(|p| p.expect("every conv visited")).collect()),
        input,
    }
}
