//! Declarative layer stacks and the forward pass that produces each trainable
//! layer's input matrix.
//!
//! Samples travel as rows of a [`Matrix`]. Image inputs are flattened in
//! `(row, col, channel)` order, so a batch of `B` images of shape `H×W×C` is a
//! `B × (H·W·C)` matrix whose buffer is an NHWC tensor. Convolutions are
//! computed as `im2col(x) · W` with the kernel stored flattened as a
//! `(ks·ks·C_in) × C_out` matrix; that product is already the NHWC output.
//!
//! Layers carry no bias term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    /// Row-wise softmax. Only meaningful on the output layer; it never enters a
    /// least-squares target.
    Softmax,
}

impl Activation {
    pub fn apply(&self, m: &mut Matrix) {
        match *self {
            Activation::Linear => {}
            Activation::Relu => m.map_inplace(|v| v.max(0.0)),
            Activation::LeakyRelu { slope } => {
                m.map_inplace(|v| if v >= 0.0 { v } else { slope * v })
            }
            Activation::Softmax => {
                for i in 0..m.rows() {
                    let row = m.row_mut(i);
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
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv2d {
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    AvgPool2d {
        pool_size: usize,
        stride: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, LayerSpec::AvgPool2d { .. })
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => activation,
            LayerSpec::AvgPool2d { .. } => Activation::Linear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputShape {
    Flat { dim: usize },
    Image { height: usize, width: usize, channels: usize },
}

/// Shape of one sample as it flows between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleShape {
    Flat(usize),
    Image { height: usize, width: usize, channels: usize },
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match *self {
            SampleShape::Flat(d) => d,
            SampleShape::Image { height, width, channels } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<InputShape> for SampleShape {
    fn from(s: InputShape) -> Self {
        match s {
            InputShape::Flat { dim } => SampleShape::Flat(dim),
            InputShape::Image { height, width, channels } => SampleShape::Image { height, width, channels },
        }
    }
}

/// Output spatial size of a sliding window, or `None` if the window does not fit.
fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Per trainable layer facts derived once from the layer list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainableLayer {
    /// Position in [`ModelSpec::layers`].
    pub position: usize,
    /// Columns of the layer's input matrix (`d_{l-1}`; `ks·ks·C_in` for conv).
    pub in_dim: usize,
    /// Columns of the layer's output (`d_l`; `C_out` for conv).
    pub out_dim: usize,
    /// Input-matrix rows produced per sample (`H'·W'` for conv, 1 for dense).
    pub rows_per_sample: usize,
    /// Sample shape entering the layer.
    pub input_shape: SampleShape,
    /// Sample shape leaving the layer.
    pub output_shape: SampleShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDef", into = "ModelSpecDef")]
pub struct ModelSpec {
    input: InputShape,
    layers: Vec<LayerSpec>,
    classes: usize,
    trainable: Vec<TrainableLayer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelSpecDef {
    input: InputShape,
    layers: Vec<LayerSpec>,
    classes: usize,
}

impl TryFrom<ModelSpecDef> for ModelSpec {
    type Error = Error;

    fn try_from(d: ModelSpecDef) -> Result<Self> {
        ModelSpec::new(d.input, d.layers, d.classes)
    }
}

impl From<ModelSpec> for ModelSpecDef {
    fn from(m: ModelSpec) -> Self {
        ModelSpecDef {
            input: m.input,
            layers: m.layers,
            classes: m.classes,
        }
    }
}

impl ModelSpec {
    pub fn new(input: InputShape, layers: Vec<LayerSpec>, classes: usize) -> Result<Self> {
        let mut shape = SampleShape::from(input);
        if shape.is_empty() || classes == 0 {
            return Err(Error::shape("input and class dimensions must be positive"));
        }
        let mut trainable = Vec::new();
        for (position, layer) in layers.iter().enumerate() {
            let input_shape = shape;
            match *layer {
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    if in_dim != shape.len() || out_dim == 0 {
                        return Err(Error::shape(format!(
                            "layer {position}: dense expects {in_dim} inputs, receives {}",
                            shape.len()
                        )));
                    }
                    shape = SampleShape::Flat(out_dim);
                    trainable.push(TrainableLayer {
                        position,
                        in_dim,
                        out_dim,
                        rows_per_sample: 1,
                        input_shape,
                        output_shape: shape,
                    });
                }
                LayerSpec::Conv2d {
                    kernel_size,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    ..
                } => {
                    let SampleShape::Image { height, width, channels } = shape else {
                        return Err(Error::shape(format!(
                            "layer {position}: convolution needs an image input"
                        )));
                    };
                    if channels != in_channels || out_channels == 0 || kernel_size == 0 {
                        return Err(Error::shape(format!(
                            "layer {position}: convolution expects {in_channels} channels, receives {channels}"
                        )));
                    }
                    let (Some(oh), Some(ow)) = (
                        window_out(height, kernel_size, stride, padding),
                        window_out(width, kernel_size, stride, padding),
                    ) else {
                        return Err(Error::shape(format!(
                            "layer {position}: {kernel_size}x{kernel_size} kernel exceeds padded {height}x{width} input"
                        )));
                    };
                    shape = SampleShape::Image {
                        height: oh,
                        width: ow,
                        channels: out_channels,
                    };
                    trainable.push(TrainableLayer {
                        position,
                        in_dim: kernel_size * kernel_size * in_channels,
                        out_dim: out_channels,
                        rows_per_sample: oh * ow,
                        input_shape,
                        output_shape: shape,
                    });
                }
                LayerSpec::AvgPool2d { pool_size, stride } => {
                    let SampleShape::Image { height, width, channels } = shape else {
                        return Err(Error::shape(format!("layer {position}: pooling needs an image input")));
                    };
                    let (Some(oh), Some(ow)) = (
                        window_out(height, pool_size, stride, 0),
                        window_out(width, pool_size, stride, 0),
                    ) else {
                        return Err(Error::shape(format!(
                            "layer {position}: {pool_size}x{pool_size} pool exceeds {height}x{width} input"
                        )));
                    };
                    if pool_size == 0 {
                        return Err(Error::shape(format!("layer {position}: empty pool window")));
                    }
                    shape = SampleShape::Image {
                        height: oh,
                        width: ow,
                        channels,
                    };
                }
            }
        }
        match layers.last() {
            Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == classes => {}
            Some(LayerSpec::Dense { out_dim, .. }) => {
                return Err(Error::shape(format!(
                    "output layer has {out_dim} units but there are {classes} classes"
                )))
            }
            _ => return Err(Error::shape("the last layer must be dense")),
        }
        for (i, layer) in layers.iter().enumerate() {
            if i + 1 < layers.len() && layer.activation() == Activation::Softmax {
                return Err(Error::shape(format!("layer {i}: softmax is only allowed on the output layer")));
            }
        }
        Ok(ModelSpec {
            input,
            layers,
            classes,
            trainable,
        })
    }

    /// Multinomial logistic regression: one dense layer with softmax output.
    pub fn logistic(in_dim: usize, classes: usize) -> Self {
        Self::mlp(in_dim, &[], classes)
    }

    /// Fully connected network with ReLU hidden layers and softmax output.
    pub fn mlp(in_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                in_dim: prev,
                out_dim: h,
                activation: Activation::Relu,
            });
            prev = h;
        }
        layers.push(LayerSpec::Dense {
            in_dim: prev,
            out_dim: classes,
            activation: Activation::Softmax,
        });
        ModelSpec::new(InputShape::Flat { dim: in_dim }, layers, classes).expect("valid mlp")
    }

    /// Five-trainable-layer convolutional network:
    /// `conv5×5 – pool – conv3×3 – pool – conv3×3 – conv3×3 – dense`, stride 1,
    /// same padding and LeakyReLU(0.01) after each convolution.
    ///
    /// `widths` are the four convolution channel counts.
    pub fn dcnn(height: usize, width: usize, channels: usize, widths: [usize; 4], classes: usize) -> Result<Self> {
        let act = Activation::LeakyRelu { slope: 0.01 };
        let conv = |ks: usize, cin: usize, cout: usize| LayerSpec::Conv2d {
            kernel_size: ks,
            in_channels: cin,
            out_channels: cout,
            stride: 1,
            padding: ks / 2,
            activation: act,
        };
        let pool = LayerSpec::AvgPool2d { pool_size: 2, stride: 2 };
        let flat = (height / 4) * (width / 4) * widths[3];
        let layers = vec![
            conv(5, channels, widths[0]),
            pool,
            conv(3, widths[0], widths[1]),
            pool,
            conv(3, widths[1], widths[2]),
            conv(3, widths[2], widths[3]),
            LayerSpec::Dense {
                in_dim: flat,
                out_dim: classes,
                activation: Activation::Softmax,
            },
        ];
        ModelSpec::new(InputShape::Image { height, width, channels }, layers, classes)
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn input_len(&self) -> usize {
        SampleShape::from(self.input).len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of trainable layers, `L`.
    pub fn depth(&self) -> usize {
        self.trainable.len()
    }

    pub fn trainable(&self, layer: usize) -> &TrainableLayer {
        &self.trainable[layer]
    }

    pub fn trainable_layers(&self) -> &[TrainableLayer] {
        &self.trainable
    }

    pub fn is_output(&self, layer: usize) -> bool {
        layer + 1 == self.depth()
    }

    /// Sample shape after every entry of [`layers`](Self::layers).
    pub fn shape_trace(&self) -> Vec<SampleShape> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut t = self.trainable.iter().peekable();
        let mut shape = SampleShape::from(self.input);
        for (pos, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::AvgPool2d { pool_size, stride } => match shape {
                    SampleShape::Image { height, width, channels } => SampleShape::Image {
                        height: (height - pool_size) / stride + 1,
                        width: (width - pool_size) / stride + 1,
                        channels,
                    },
                    flat => flat,
                },
                _ => {
                    let info = t.next().expect("trainable layer");
                    debug_assert_eq!(info.position, pos);
                    info.output_shape
                }
            };
            out.push(shape);
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_len() {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_len()
            )));
        }
        Ok(())
    }
}

/// Batch of images in NHWC layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4D {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor4D {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * height * width * channels {
            return Err(Error::shape(format!(
                "buffer of {} values for a {batch}x{height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        Ok(Tensor4D {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    /// Views each row of `m` as one `height × width × channels` image.
    pub fn from_rows(m: Matrix, height: usize, width: usize, channels: usize) -> Result<Self> {
        let batch = m.rows();
        if m.cols() != height * width * channels {
            return Err(Error::shape(format!(
                "rows of {} values cannot hold {height}x{width}x{channels} images",
                m.cols()
            )));
        }
        Tensor4D::new(batch, height, width, channels, m.into_vec())
    }

    pub fn into_rows(self) -> Matrix {
        let cols = self.height * self.width * self.channels;
        Matrix::from_vec(self.batch, cols, self.data).expect("consistent tensor")
    }

    #[inline]
    pub fn at(&self, b: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[((b * self.height + h) * self.width + w) * self.channels + c]
    }
}

/// Unfolds every `ks × ks` window into a row.
///
/// Rows are ordered `(batch, out_row, out_col)`; columns `(k_row, k_col,
/// channel)` with channel fastest. Out-of-bounds taps read zero padding.
pub fn im2col(input: &Tensor4D, ks: usize, stride: usize, padding: usize) -> Result<Matrix> {
    let (h, w, c) = (input.height, input.width, input.channels);
    let (Some(oh), Some(ow)) = (window_out(h, ks, stride, padding), window_out(w, ks, stride, padding)) else {
        return Err(Error::shape(format!(
            "{ks}x{ks} kernel with padding {padding} does not fit a {h}x{w} input"
        )));
    };
    if ks == 0 {
        return Err(Error::shape("kernel size must be positive"));
    }
    let cols = ks * ks * c;
    let mut out = Matrix::zeros(input.batch * oh * ow, cols);
    let buf = out.as_mut_slice();
    let mut r = 0;
    for b in 0..input.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut buf[r * cols..(r + 1) * cols];
                for ky in 0..ks {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = (ky * ks + kx) * c;
                        row[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
                    }
                }
                r += 1;
            }
        }
    }
    Ok(out)
}

fn avg_pool(input: &Tensor4D, pool: usize, stride: usize) -> Tensor4D {
    let oh = (input.height - pool) / stride + 1;
    let ow = (input.width - pool) / stride + 1;
    let c = input.channels;
    let mut data = vec![0.0; input.batch * oh * ow * c];
    let norm = 1.0 / (pool * pool) as f64;
    for b in 0..input.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * oh + oy) * ow + ox) * c;
                for ky in 0..pool {
                    for kx in 0..pool {
                        let src = ((b * input.height + oy * stride + ky) * input.width + ox * stride + kx) * c;
                        for ch in 0..c {
                            data[dst + ch] += input.data[src + ch];
                        }
                    }
                }
                for v in &mut data[dst..dst + c] {
                    *v *= norm;
                }
            }
        }
    }
    Tensor4D {
        batch: input.batch,
        height: oh,
        width: ow,
        channels: c,
        data,
    }
}

/// One weight matrix per trainable layer; `None` until the layer is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    layers: Vec<Option<Matrix>>,
}

impl WeightSet {
    pub fn empty(spec: &ModelSpec) -> Self {
        WeightSet {
            layers: vec![None; spec.depth()],
        }
    }

    /// Every layer filled with seeded uniform values in `[-1, 1)`.
    pub fn random(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .trainable_layers()
            .iter()
            .map(|t| Some(Matrix::from_fn(t.in_dim, t.out_dim, |_, _| rng.random_range(-1.0..1.0))))
            .collect();
        WeightSet { layers }
    }

    pub fn from_layers(layers: Vec<Matrix>) -> Self {
        WeightSet {
            layers: layers.into_iter().map(Some).collect(),
        }
    }

    /// Layers that may still be untrained.
    pub fn from_partial(layers: Vec<Option<Matrix>>) -> Self {
        WeightSet { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, layer: usize) -> Result<&Matrix> {
        self.layers
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingWeights { layer })
    }

    pub fn set(&mut self, layer: usize, w: Matrix) {
        self.layers[layer] = Some(w);
    }

    /// Installs `w` after checking it against the layer's declared shape.
    pub fn install(&mut self, spec: &ModelSpec, layer: usize, w: Matrix) -> Result<()> {
        let t = spec.trainable(layer);
        if w.shape() != (t.in_dim, t.out_dim) {
            return Err(Error::shape(format!(
                "layer {layer} weights are {}x{}, expected {}x{}",
                w.rows(),
                w.cols(),
                t.in_dim,
                t.out_dim
            )));
        }
        self.set(layer, w);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.layers.iter().all(Option::is_some)
    }

    /// All layers, failing on the first untrained one.
    pub fn matrices(&self) -> Result<Vec<&Matrix>> {
        (0..self.depth()).map(|l| self.get(l)).collect()
    }
}

/// Applies the layer at `position` to a batch held as one row per sample.
fn apply_layer(
    spec: &ModelSpec,
    position: usize,
    x: Matrix,
    shape: SampleShape,
    weights: &WeightSet,
    trainable_index: usize,
) -> Result<Matrix> {
    match spec.layers[position] {
        LayerSpec::Dense { activation, .. } => {
            let mut y = matmul(&x, weights.get(trainable_index)?)?;
            activation.apply(&mut y);
            Ok(y)
        }
        LayerSpec::Conv2d {
            kernel_size,
            stride,
            padding,
            activation,
            ..
        } => {
            let SampleShape::Image { height, width, channels } = shape else {
                unreachable!("validated spec")
            };
            let batch = x.rows();
            let patches = im2col(&Tensor4D::from_rows(x, height, width, channels)?, kernel_size, stride, padding)?;
            let mut y = matmul(&patches, weights.get(trainable_index)?)?;
            activation.apply(&mut y);
            let per_sample = y.rows() / batch.max(1) * y.cols();
            y.reshape(batch, per_sample)
        }
        LayerSpec::AvgPool2d { pool_size, stride } => {
            let SampleShape::Image { height, width, channels } = shape else {
                unreachable!("validated spec")
            };
            let t = Tensor4D::from_rows(x, height, width, channels)?;
            Ok(avg_pool(&t, pool_size, stride).into_rows())
        }
    }
}

/// Runs the raw batch through every layer before trainable layer `layer`.
///
/// Returns one row per sample, shaped as the sample arriving at that layer.
fn forward_samples(x: &Matrix, weights: &WeightSet, spec: &ModelSpec, stop: usize) -> Result<Matrix> {
    spec.check_input(x)?;
    let trace = spec.shape_trace();
    let mut cur = x.clone();
    let mut shape = SampleShape::from(spec.input);
    let mut t = 0;
    for (pos, layer) in spec.layers[..stop].iter().enumerate() {
        cur = apply_layer(spec, pos, cur, shape, weights, t)?;
        shape = trace[pos];
        if layer.is_trainable() {
            t += 1;
        }
    }
    Ok(cur)
}

/// The input matrix `X_l` consumed by trainable layer `layer` (zero-based).
///
/// Dense layers receive one row per sample; convolution layers receive the
/// im2col patch matrix with `H'·W'` rows per sample.
pub fn forward_to_layer(x: &Matrix, weights: &WeightSet, spec: &ModelSpec, layer: usize) -> Result<Matrix> {
    if layer >= spec.depth() {
        return Err(Error::shape(format!(
            "model has {} trainable layers, asked for layer {layer}",
            spec.depth()
        )));
    }
    let info = spec.trainable[layer];
    let samples = forward_samples(x, weights, spec, info.position)?;
    layer_input(spec, layer, samples)
}

/// Turns per-sample rows arriving at trainable layer `layer` into its input matrix.
fn layer_input(spec: &ModelSpec, layer: usize, samples: Matrix) -> Result<Matrix> {
    let info = spec.trainable[layer];
    match spec.layers[info.position] {
        LayerSpec::Conv2d {
            kernel_size,
            stride,
            padding,
            ..
        } => {
            let SampleShape::Image { height, width, channels } = info.input_shape else {
                unreachable!("validated spec")
            };
            im2col(&Tensor4D::from_rows(samples, height, width, channels)?, kernel_size, stride, padding)
        }
        _ => Ok(samples),
    }
}

/// Maps `X_l` (the input matrix of trainable layer `layer`) to `X_{l+1}`
/// using `w` as that layer's weights.
pub fn advance(spec: &ModelSpec, weights: &WeightSet, layer: usize, x_l: &Matrix) -> Result<Matrix> {
    if layer + 1 >= spec.depth() {
        return Err(Error::shape(format!("layer {layer} has no successor")));
    }
    let info = spec.trainable[layer];
    let next = spec.trainable[layer + 1];
    let act = spec.layers[info.position].activation();
    let mut y = matmul(x_l, weights.get(layer)?)?;
    act.apply(&mut y);
    let batch = y.rows() / info.rows_per_sample;
    let mut cur = y.reshape(batch, info.output_shape.len())?;
    let trace = spec.shape_trace();
    for pos in info.position + 1..next.position {
        cur = apply_layer(spec, pos, cur, trace[pos - 1], weights, layer + 1)?;
    }
    layer_input(spec, layer + 1, cur)
}

/// Final-layer outputs (after the output activation) for every row of `x`.
pub fn forward(x: &Matrix, weights: &WeightSet, spec: &ModelSpec) -> Result<Matrix> {
    let mut out = logits(x, weights, spec)?;
    spec.layers.last().expect("non-empty").activation().apply(&mut out);
    Ok(out)
}

fn logits(x: &Matrix, weights: &WeightSet, spec: &ModelSpec) -> Result<Matrix> {
    let last = spec.depth() - 1;
    let x_last = forward_to_layer(x, weights, spec, last)?;
    matmul(&x_last, weights.get(last)?)
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per row. Ranks pre-activation outputs, which the monotone
/// output activation cannot reorder.
pub fn predict(x: &Matrix, weights: &WeightSet, spec: &ModelSpec) -> Result<Vec<usize>> {
    weights.matrices()?;
    Ok(argmax_rows(&logits(x, weights, spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tests::random_matrix;

    fn random_tensor(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor4D {
        let m = random_matrix(b, h * w * c, seed);
        Tensor4D::from_rows(m, h, w, c).unwrap()
    }

    /// Direct nested-loop convolution; kernel indexed `[(ky, kx, ci), co]`.
    fn direct_conv(x: &Tensor4D, k: &Matrix, ks: usize, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (x.height + 2 * pad - ks) / stride + 1;
        let ow = (x.width + 2 * pad - ks) / stride + 1;
        let cout = k.cols();
        let mut out = vec![0.0; x.batch * oh * ow * cout];
        for b in 0..x.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut s = 0.0;
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                for ci in 0..x.channels {
                                    s += x.at(b, iy as usize, ix as usize, ci)
                                        * k.get((ky * ks + kx) * x.channels + ci, co);
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_single_window_is_the_image() {
        let x = random_tensor(1, 3, 3, 1, 1);
        let p = im2col(&x, 3, 1, 0).unwrap();
        assert_eq!(p.shape(), (1, 9));
        assert_eq!(p.as_slice(), x.data.as_slice());
    }

    #[test]
    fn im2col_disjoint_tiles() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = Tensor4D::new(1, 4, 4, 1, data).unwrap();
        let p = im2col(&x, 2, 2, 0).unwrap();
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn im2col_rejects_oversized_kernel() {
        let x = random_tensor(1, 2, 2, 1, 1);
        assert!(matches!(im2col(&x, 3, 1, 0), Err(Error::Shape(_))));
        assert!(im2col(&x, 3, 1, 1).is_ok());
    }

    #[test]
    fn im2col_product_matches_direct_convolution() {
        let x = random_tensor(2, 8, 8, 3, 5);
        let k = random_matrix(27, 4, 6);
        let got = matmul(&im2col(&x, 3, 1, 1).unwrap(), &k).unwrap();
        let want = direct_conv(&x, &k, 3, 1, 1);
        assert_eq!(got.shape(), (2 * 64, 4));
        for (a, b) in got.as_slice().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
        // strided, unpadded
        let got = matmul(&im2col(&x, 3, 2, 0).unwrap(), &k).unwrap();
        let want = direct_conv(&x, &k, 3, 2, 0);
        for (a, b) in got.as_slice().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn im2col_is_linear() {
        let x = random_tensor(2, 5, 5, 2, 1);
        let y = random_tensor(2, 5, 5, 2, 2);
        // scalars that are powers of two keep the identity exact
        let (a, b) = (2.0, -0.5);
        let comb = Tensor4D::new(
            2,
            5,
            5,
            2,
            x.data.iter().zip(&y.data).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let lhs = im2col(&comb, 3, 1, 1).unwrap();
        let px = im2col(&x, 3, 1, 1).unwrap();
        let py = im2col(&y, 3, 1, 1).unwrap();
        let rhs: Vec<f64> = px.as_slice().iter().zip(py.as_slice()).map(|(u, v)| a * u + b * v).collect();
        assert_eq!(lhs.as_slice(), rhs.as_slice());
    }

    #[test]
    fn first_layer_input_is_raw() {
        let spec = ModelSpec::mlp(6, &[4], 3);
        let x = random_matrix(5, 6, 9);
        let got = forward_to_layer(&x, &WeightSet::empty(&spec), &spec, 0).unwrap();
        assert_eq!(got, x);
    }

    #[test]
    fn relu_identity_is_fixed_point() {
        let spec = ModelSpec::mlp(4, &[4], 2);
        let mut w = WeightSet::empty(&spec);
        w.set(0, Matrix::identity(4));
        let x = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25);
        assert_eq!(forward_to_layer(&x, &w, &spec, 1).unwrap(), x);
    }

    #[test]
    fn missing_prefix_weights() {
        let spec = ModelSpec::mlp(4, &[4, 3], 2);
        let x = random_matrix(2, 4, 1);
        let err = forward_to_layer(&x, &WeightSet::empty(&spec), &spec, 2).unwrap_err();
        assert!(matches!(err, Error::MissingWeights { layer: 0 }));
        assert!(matches!(
            predict(&x, &WeightSet::empty(&spec), &spec),
            Err(Error::MissingWeights { layer: 0 })
        ));
    }

    #[test]
    fn dcnn_shape_trace() {
        // hand-derived: same-padded convs keep 32x32; each 2x2 pool halves
        let spec = ModelSpec::dcnn(32, 32, 3, [512, 1024, 2048, 2048], 10).unwrap();
        let img = |h, c| SampleShape::Image { height: h, width: h, channels: c };
        assert_eq!(
            spec.shape_trace(),
            vec![
                img(32, 512),
                img(16, 512),
                img(16, 1024),
                img(8, 1024),
                img(8, 2048),
                img(8, 2048),
                SampleShape::Flat(10),
            ]
        );
        assert_eq!(spec.depth(), 5);
        let dims: Vec<(usize, usize, usize)> = spec
            .trainable_layers()
            .iter()
            .map(|t| (t.in_dim, t.out_dim, t.rows_per_sample))
            .collect();
        assert_eq!(
            dims,
            vec![
                (75, 512, 1024),
                (4608, 1024, 256),
                (9216, 2048, 64),
                (18432, 2048, 64),
                (131072, 10, 1),
            ]
        );
    }

    #[test]
    fn dcnn_forward_shapes_on_narrow_widths() {
        let spec = ModelSpec::dcnn(32, 32, 3, [4, 6, 8, 8], 10).unwrap();
        let w = WeightSet::random(&spec, 3);
        let x = random_matrix(2, 32 * 32 * 3, 4);
        let expect = [(2 * 1024, 75), (2 * 256, 36), (2 * 64, 54), (2 * 64, 72), (2, 512)];
        for (l, shape) in expect.iter().enumerate() {
            assert_eq!(forward_to_layer(&x, &w, &spec, l).unwrap().shape(), *shape);
        }
        assert_eq!(forward(&x, &w, &spec).unwrap().shape(), (2, 10));
    }

    #[test]
    fn advance_composes_with_forward() {
        let specs = [
            ModelSpec::mlp(5, &[7, 4], 3),
            ModelSpec::dcnn(8, 8, 2, [3, 4, 5, 2], 3).unwrap(),
        ];
        for spec in &specs {
            let w = WeightSet::random(spec, 17);
            let x = random_matrix(3, spec.input_len(), 18);
            for l in 0..spec.depth() - 1 {
                let step = advance(spec, &w, l, &forward_to_layer(&x, &w, spec, l).unwrap()).unwrap();
                assert_eq!(step, forward_to_layer(&x, &w, spec, l + 1).unwrap());
            }
        }
    }

    #[test]
    fn predict_one_hot_identity() {
        let spec = ModelSpec::logistic(4, 4);
        let w = WeightSet::from_layers(vec![Matrix::identity(4)]);
        let x = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(predict(&x, &w, &spec).unwrap(), vec![2, 0, 3]);
    }

    #[test]
    fn predict_ties_go_low() {
        let spec = ModelSpec::mlp(3, &[2], 4);
        let w = WeightSet::from_layers(vec![Matrix::zeros(3, 2), Matrix::zeros(2, 4)]);
        let x = random_matrix(5, 3, 2);
        assert_eq!(predict(&x, &w, &spec).unwrap(), vec![0; 5]);
    }

    #[test]
    fn predict_matches_per_row_oracle() {
        let spec = ModelSpec::mlp(6, &[5], 4);
        let w = WeightSet::random(&spec, 8);
        let x = random_matrix(20, 6, 9);
        let got = predict(&x, &w, &spec).unwrap();
        let (w0, w1) = (w.get(0).unwrap(), w.get(1).unwrap());
        for (i, &label) in got.iter().enumerate() {
            let hidden: Vec<f64> = (0..5)
                .map(|j| (0..6).map(|k| x.get(i, k) * w0.get(k, j)).sum::<f64>().max(0.0))
                .collect();
            let out: Vec<f64> = (0..4)
                .map(|c| (0..5).map(|j| hidden[j] * w1.get(j, c)).sum())
                .collect();
            let mut best = 0;
            for c in 1..4 {
                if out[c] > out[best] {
                    best = c;
                }
            }
            assert_eq!(label, best, "row {i}");
        }
    }

    #[test]
    fn spec_validation() {
        let bad_dims = ModelSpec::new(
            InputShape::Flat { dim: 4 },
            vec![LayerSpec::Dense {
                in_dim: 5,
                out_dim: 2,
                activation: Activation::Linear,
            }],
            2,
        );
        assert!(bad_dims.is_err());
        let bad_classes = ModelSpec::new(
            InputShape::Flat { dim: 4 },
            vec![LayerSpec::Dense {
                in_dim: 4,
                out_dim: 3,
                activation: Activation::Linear,
            }],
            2,
        );
        assert!(bad_classes.is_err());
        let conv_on_flat = ModelSpec::new(
            InputShape::Flat { dim: 4 },
            vec![LayerSpec::Conv2d {
                kernel_size: 1,
                in_channels: 1,
                out_channels: 1,
                stride: 1,
                padding: 0,
                activation: Activation::Linear,
            }],
            1,
        );
        assert!(conv_on_flat.is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = random_matrix(4, 5, 1);
        Activation::Softmax.apply(&mut m);
        for i in 0..4 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
