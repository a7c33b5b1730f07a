//! A small convolutional keypoint regressor with dropout.
//!
//! The network is described by a [`ModelConfig`]: a list of hidden layers
//! (strided convolutions or dense layers, each with an activation and an
//! optional dropout) followed by a fixed linear head with 12 outputs. All
//! parameters live in one flat `f64` vector; [`Network::layout`] names the
//! offset of every weight and bias block.
//!
//! Three forward modes exist:
//!
//! * [`ForwardMode::Train`]: dropout active, activations recorded on a [`Tape`]
//!   so [`ModelSnapshot::backward`] can produce exact gradients;
//! * [`ForwardMode::EvalDeterministic`]: dropout off, a pure function of
//!   parameters and input;
//! * [`ForwardMode::McStochastic`]: dropout active, nothing recorded.
//!
//! Dropout is inverted: kept units are scaled by `1 / (1 - p)` so that the
//! expected layer output under random masks equals the deterministic output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngState;
use crate::vhs::OUTPUT_DIM;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {got_w}x{got_h}, model expects {want}x{want}")]
    Shape { want: usize, got_w: usize, got_h: usize },
    #[error("parameter vector has {got} entries, architecture needs {want}")]
    ParamCount { want: usize, got: usize },
    #[error("forward mode {0:?} applies dropout and needs a random generator")]
    MissingRng(ForwardMode),
    #[error("backward called without a recorded training forward pass")]
    NothingRecorded,
    #[error("tape holds {recorded} passes but {grads} output gradients were supplied")]
    TapeMismatch { recorded: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Relu | Activation::LeakyRelu => 2f64.sqrt(),
            Activation::Identity | Activation::Tanh => 1.0,
        }
    }
}

/// One hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square-kernel convolution with "same"-style padding of `kernel / 2`.
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        #[serde(default)]
        dropout: bool,
    },
    Dense {
        units: usize,
        activation: Activation,
        #[serde(default)]
        dropout: bool,
    },
}

impl LayerSpec {
    fn has_dropout(&self) -> bool {
        match self {
            LayerSpec::Conv { dropout, .. } | LayerSpec::Dense { dropout, .. } => *dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square grayscale input.
    pub input_size: usize,
    pub hidden: Vec<LayerSpec>,
    pub dropout_rate: f64,
    pub output_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let conv = |channels, dropout| LayerSpec::Conv {
            channels,
            kernel: 3,
            stride: 2,
            activation: Activation::Relu,
            dropout,
        };
        // Dropout only on the features feeding the regression head. The low
        // rate keeps MC-dropout spread on the same scale as the default
        // confidence threshold (0.005 in normalized coordinates).
        ModelConfig {
            input_size: 64,
            hidden: vec![conv(8, false), conv(16, false), conv(16, true)],
            dropout_rate: 0.02,
            output_dim: OUTPUT_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.output_dim != OUTPUT_DIM {
            return bad("output_dim must be 12");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !self.hidden.iter().any(LayerSpec::has_dropout) {
            return bad("at least one hidden layer must carry dropout");
        }
        if self.input_size == 0 {
            return bad("input_size must be positive");
        }
        for layer in &self.hidden {
            match *layer {
                LayerSpec::Conv { channels, kernel, stride, .. } => {
                    if channels == 0 || stride == 0 || kernel == 0 || kernel % 2 == 0 {
                        return bad("conv layers need channels > 0, stride > 0 and an odd kernel");
                    }
                }
                LayerSpec::Dense { units, .. } => {
                    if units == 0 {
                        return bad("dense layers need units > 0");
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    Train,
    EvalDeterministic,
    McStochastic,
}

impl ForwardMode {
    pub fn uses_dropout(self) -> bool {
        !matches!(self, ForwardMode::EvalDeterministic)
    }
}

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        Image { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Image::new(width, height, vec![value; width * height])
    }

    fn to_input(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        out_h: usize,
        out_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone)]
struct Layer {
    kind: Kind,
    activation: Activation,
    dropout: bool,
    weight_offset: usize,
    bias_offset: usize,
}

impl Layer {
    fn fan_in(&self) -> usize {
        match self.kind {
            Kind::Conv { in_c, kernel, .. } => in_c * kernel * kernel,
            Kind::Dense { inputs, .. } => inputs,
        }
    }

    fn weight_len(&self) -> usize {
        match self.kind {
            Kind::Conv { in_c, out_c, kernel, .. } => out_c * in_c * kernel * kernel,
            Kind::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    fn bias_len(&self) -> usize {
        match self.kind {
            Kind::Conv { out_c, .. } => out_c,
            Kind::Dense { outputs, .. } => outputs,
        }
    }

    fn output_len(&self) -> usize {
        match self.kind {
            Kind::Conv { out_c, out_h, out_w, .. } => out_c * out_h * out_w,
            Kind::Dense { outputs, .. } => outputs,
        }
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub is_bias: bool,
}

/// The compiled architecture: shapes and parameter offsets.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    layers: Vec<Layer>,
    param_count: usize,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden.len() + 1);
        let mut offset = 0;
        // (channels, height, width); dense layers flatten into channels
        let mut shape = (1, config.input_size, config.input_size);
        let mut push = |kind: Kind, activation, dropout, offset: &mut usize| {
            let mut layer = Layer { kind, activation, dropout, weight_offset: *offset, bias_offset: 0 };
            layer.bias_offset = *offset + layer.weight_len();
            *offset = layer.bias_offset + layer.bias_len();
            layers.push(layer);
        };
        for spec in &config.hidden {
            match *spec {
                LayerSpec::Conv { channels, kernel, stride, activation, dropout } => {
                    let (in_c, in_h, in_w) = shape;
                    let pad = kernel / 2;
                    let out_h = (in_h + 2 * pad - kernel) / stride + 1;
                    let out_w = (in_w + 2 * pad - kernel) / stride + 1;
                    let kind = Kind::Conv { in_c, in_h, in_w, out_c: channels, out_h, out_w, kernel, stride, pad };
                    push(kind, activation, dropout, &mut offset);
                    shape = (channels, out_h, out_w);
                }
                LayerSpec::Dense { units, activation, dropout } => {
                    let inputs = shape.0 * shape.1 * shape.2;
                    push(Kind::Dense { inputs, outputs: units }, activation, dropout, &mut offset);
                    shape = (units, 1, 1);
                }
            }
        }
        let inputs = shape.0 * shape.1 * shape.2;
        push(
            Kind::Dense { inputs, outputs: OUTPUT_DIM },
            Activation::Identity,
            false,
            &mut offset,
        );
        Ok(Network { config, layers, param_count: offset })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let last = self.layers.len() - 1;
        let mut blocks = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let base = match layer.kind {
                Kind::Conv { .. } => format!("conv{i}"),
                Kind::Dense { .. } if i == last => "head".to_string(),
                Kind::Dense { .. } => format!("dense{i}"),
            };
            blocks.push(ParamBlock {
                name: format!("{base}.weight"),
                offset: layer.weight_offset,
                len: layer.weight_len(),
                is_bias: false,
            });
            blocks.push(ParamBlock {
                name: format!("{base}.bias"),
                offset: layer.bias_offset,
                len: layer.bias_len(),
                is_bias: true,
            });
        }
        blocks
    }

    /// `true` for every weight entry, `false` for biases.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.param_count];
        for block in self.layout().into_iter().filter(|b| !b.is_bias) {
            mask[block.offset..block.offset + block.len].fill(true);
        }
        mask
    }

    /// Fan-in scaled uniform weights, zero hidden biases, and a head bias of
    /// 0.5 so initial predictions sit at the image center.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.param_count];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let bound = layer.activation.gain() * (3.0 / layer.fan_in() as f64).sqrt();
            let bound = if i == last { bound * 0.1 } else { bound };
            for w in &mut params[layer.weight_offset..layer.weight_offset + layer.weight_len()] {
                *w = rng.random_range(-bound..bound);
            }
            if i == last {
                params[layer.bias_offset..layer.bias_offset + layer.bias_len()].fill(0.5);
            }
        }
        params
    }

    fn check(&self, params: &[f64], image: &Image) -> Result<(), ModelError> {
        if params.len() != self.param_count {
            return Err(ModelError::ParamCount { want: self.param_count, got: params.len() });
        }
        let n = self.config.input_size;
        if image.width != n || image.height != n {
            return Err(ModelError::Shape { want: n, got_w: image.width, got_h: image.height });
        }
        Ok(())
    }

    /// Runs the network. When `trace` is given, every layer's input,
    /// pre-activation and dropout multipliers are recorded.
    pub(crate) fn run(
        &self,
        params: &[f64],
        image: &Image,
        mode: ForwardMode,
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut Trace>,
    ) -> Result<[f64; OUTPUT_DIM], ModelError> {
        self.check(params, image)?;
        let rate = self.config.dropout_rate;
        if mode.uses_dropout() && rate > 0.0 && rng.is_none() {
            return Err(ModelError::MissingRng(mode));
        }
        let mut x = image.to_input();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.output_len()];
            layer_forward(layer, params, &x, &mut z);
            let mut a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            let mask = if layer.dropout && mode.uses_dropout() && rate > 0.0 {
                apply_dropout(&mut a, rate, rng.as_deref_mut().expect("checked above"))
            } else {
                Vec::new()
            };
            if let Some(t) = trace.as_deref_mut() {
                t.records.push(LayerRecord { input: std::mem::take(&mut x), pre: z, mask });
            }
            x = a;
        }
        let mut out = [0.0; OUTPUT_DIM];
        out.copy_from_slice(&x);
        Ok(out)
    }

    /// One `McStochastic` pass per generator. Layers before the first dropout
    /// site are evaluated once and shared; each result equals a separate
    /// [`ModelSnapshot::forward`] call with the same generator.
    pub(crate) fn run_stochastic(
        &self,
        params: &[f64],
        image: &Image,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<[f64; OUTPUT_DIM]>, ModelError> {
        self.check(params, image)?;
        let rate = self.config.dropout_rate;
        let activate = |layer: &Layer, x: &[f64]| {
            let mut z = vec![0.0; layer.output_len()];
            layer_forward(layer, params, x, &mut z);
            z.iter().map(|&v| layer.activation.apply(v)).collect::<Vec<f64>>()
        };
        let first = if rate > 0.0 {
            self.layers.iter().position(|l| l.dropout).unwrap_or(self.layers.len())
        } else {
            self.layers.len()
        };
        let mut shared = image.to_input();
        for layer in &self.layers[..(first + 1).min(self.layers.len())] {
            shared = activate(layer, &shared);
        }
        Ok(rngs
            .iter_mut()
            .map(|rng| {
                let mut x = shared.clone();
                for (i, layer) in self.layers.iter().enumerate().skip(first) {
                    if i > first {
                        x = activate(layer, &x);
                    }
                    if layer.dropout && rate > 0.0 {
                        apply_dropout(&mut x, rate, rng);
                    }
                }
                let mut out = [0.0; OUTPUT_DIM];
                out.copy_from_slice(&x);
                out
            })
            .collect::<Vec<_>>())
    }

    /// Accumulates `d loss / d params` for one recorded pass into `grad`.
    pub(crate) fn backprop(
        &self,
        params: &[f64],
        trace: &Trace,
        output_grad: &[f64; OUTPUT_DIM],
        grad: &mut [f64],
    ) {
        let mut upstream = output_grad.to_vec();
        for (layer, rec) in self.layers.iter().zip(&trace.records).rev() {
            // through dropout, then activation
            if !rec.mask.is_empty() {
                for (g, m) in upstream.iter_mut().zip(&rec.mask) {
                    *g *= m;
                }
            }
            if layer.activation != Activation::Identity {
                for (g, &z) in upstream.iter_mut().zip(&rec.pre) {
                    let a = layer.activation.apply(z);
                    *g *= layer.activation.derivative(z, a);
                }
            }
            upstream = layer_backward(layer, params, &rec.input, &upstream, grad);
        }
    }
}

/// Inverted dropout in place; returns the multipliers.
fn apply_dropout(a: &mut [f64], rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - rate);
    a.iter_mut()
        .map(|v| {
            let m = if rng.random::<f64>() < rate { 0.0 } else { keep_scale };
            *v *= m;
            m
        })
        .collect()
}

fn layer_forward(layer: &Layer, params: &[f64], x: &[f64], z: &mut [f64]) {
    match layer.kind {
        Kind::Dense { inputs, outputs } => {
            let w = &params[layer.weight_offset..layer.weight_offset + inputs * outputs];
            let b = &params[layer.bias_offset..layer.bias_offset + outputs];
            for o in 0..outputs {
                let row = &w[o * inputs..(o + 1) * inputs];
                z[o] = b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            }
        }
        Kind::Conv { in_c, in_h, in_w, out_c, out_h, out_w, kernel, stride, pad } => {
            let w = &params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
            let b = &params[layer.bias_offset..layer.bias_offset + out_c];
            for oc in 0..out_c {
                let zc = &mut z[oc * out_h * out_w..(oc + 1) * out_h * out_w];
                zc.fill(b[oc]);
                for ic in 0..in_c {
                    let xc = &x[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                    let wk = &w[(oc * in_c + ic) * kernel * kernel..(oc * in_c + ic + 1) * kernel * kernel];
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wv = wk[ky * kernel + kx];
                            for oy in 0..out_h {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                let xrow = &xc[iy as usize * in_w..(iy as usize + 1) * in_w];
                                let zrow = &mut zc[oy * out_w..(oy + 1) * out_w];
                                for (ox, zv) in zrow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < in_w as isize {
                                        *zv += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds parameter gradients into `grad` and returns the gradient with respect
/// to the layer input.
fn layer_backward(layer: &Layer, params: &[f64], x: &[f64], gz: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    match layer.kind {
        Kind::Dense { inputs, outputs } => {
            let w = &params[layer.weight_offset..layer.weight_offset + inputs * outputs];
            let (gw, gb) = grad[layer.weight_offset..layer.bias_offset + outputs].split_at_mut(inputs * outputs);
            for o in 0..outputs {
                let g = gz[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = &w[o * inputs..(o + 1) * inputs];
                let grow = &mut gw[o * inputs..(o + 1) * inputs];
                for i in 0..inputs {
                    grow[i] += g * x[i];
                    gx[i] += g * row[i];
                }
            }
        }
        Kind::Conv { in_c, in_h, in_w, out_c, out_h, out_w, kernel, stride, pad } => {
            let kk = kernel * kernel;
            let w = &params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
            for oc in 0..out_c {
                let gzc = &gz[oc * out_h * out_w..(oc + 1) * out_h * out_w];
                grad[layer.bias_offset + oc] += gzc.iter().sum::<f64>();
                for ic in 0..in_c {
                    let xc = &x[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                    let gxc = &mut gx[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                    let widx = (oc * in_c + ic) * kk;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wv = w[widx + ky * kernel + kx];
                            let mut gw = 0.0;
                            for oy in 0..out_h {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                let base = iy as usize * in_w;
                                let gzrow = &gzc[oy * out_w..(oy + 1) * out_w];
                                for (ox, &g) in gzrow.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < in_w as isize {
                                        let xi = base + ix as usize;
                                        gw += g * xc[xi];
                                        gxc[xi] += g * wv;
                                    }
                                }
                            }
                            grad[layer.weight_offset + widx + ky * kernel + kx] += gw;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[derive(Debug, Clone)]
struct LayerRecord {
    input: Vec<f64>,
    pre: Vec<f64>,
    mask: Vec<f64>,
}

/// Activations of one training-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<LayerRecord>,
}

/// Recorded training passes for one micro-batch, consumed by
/// [`ModelSnapshot::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    traces: Vec<Trace>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn clear(&mut self) {
        self.traces.clear();
    }
}

/// Parameters plus everything needed to resume: architecture, training RNG
/// position, seed lineage and epoch counter.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    network: Network,
    pub params: Vec<f64>,
    pub rng: RngState,
    /// Master seed the run was started from.
    pub seed: u64,
    /// Number of completed training epochs.
    pub epoch: usize,
}

impl ModelSnapshot {
    pub fn initialize(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let network = Network::new(config)?;
        let params = network.init_params(seed);
        Ok(ModelSnapshot { network, params, rng: RngState::from_seed(seed), seed, epoch: 0 })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: Vec<f64>,
        rng: RngState,
        seed: u64,
        epoch: usize,
    ) -> Result<Self, ModelError> {
        let network = Network::new(config)?;
        if params.len() != network.param_count() {
            return Err(ModelError::ParamCount { want: network.param_count(), got: params.len() });
        }
        Ok(ModelSnapshot { network, params, rng, seed, epoch })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    /// Plain forward pass. `rng` is required whenever `mode` applies dropout
    /// with a non-zero rate.
    pub fn forward(
        &self,
        image: &Image,
        mode: ForwardMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<[f64; OUTPUT_DIM], ModelError> {
        self.network.run(&self.params, image, mode, rng, None)
    }

    /// Dropout-active passes, one per generator, sharing the computation of
    /// the layers in front of the first dropout site.
    pub fn forward_stochastic(
        &self,
        image: &Image,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<[f64; OUTPUT_DIM]>, ModelError> {
        self.network.run_stochastic(&self.params, image, rngs)
    }

    pub fn predict(&self, image: &Image) -> Result<[f64; OUTPUT_DIM], ModelError> {
        self.forward(image, ForwardMode::EvalDeterministic, None)
    }

    /// Training-mode forward pass whose activations and dropout mask are
    /// appended to `tape`.
    pub fn forward_train(
        &self,
        image: &Image,
        rng: &mut ChaCha8Rng,
        tape: &mut Tape,
    ) -> Result<[f64; OUTPUT_DIM], ModelError> {
        let mut trace = Trace::default();
        let out = self.network.run(&self.params, image, ForwardMode::Train, Some(rng), Some(&mut trace))?;
        tape.traces.push(trace);
        Ok(out)
    }

    /// Sum over the recorded passes of `J_i^T output_grads[i]`.
    pub fn backward(&self, tape: &Tape, output_grads: &[[f64; OUTPUT_DIM]]) -> Result<Vec<f64>, ModelError> {
        if tape.is_empty() {
            return Err(ModelError::NothingRecorded);
        }
        if tape.len() != output_grads.len() {
            return Err(ModelError::TapeMismatch { recorded: tape.len(), grads: output_grads.len() });
        }
        let mut grad = vec![0.0; self.network.param_count()];
        for (trace, g) in tape.traces.iter().zip(output_grads) {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            self.network.backprop(&self.params, trace, g, &mut grad);
        }
        Ok(grad)
    }
}
