//! Layer primitives with hand-written backward passes.
//!
//! Layers are stateless descriptions that reference their weights in a
//! [`ParameterSet`] by index. A [`Sequential`] forward pass can keep every
//! intermediate activation so the matching backward pass can replay it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Standard deviation of the Gaussian used for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Variance guard inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of the parameter arrays a network needs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamInfo>,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        self.entries.push(ParamInfo {
            name: name.into(),
            shape,
            kind,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(ParamInfo::len).sum()
    }
}

/// Named parameter arrays for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    layout: ParamLayout,
    values: Vec<Vec<T>>,
    init_seed: u64,
}

impl<T: Real> ParameterSet<T> {
    /// Weights ~ N(0, 0.02), biases and norm shifts 0, norm scales 1.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let values = layout
            .entries
            .iter()
            .map(|info| match info.kind {
                ParamKind::Weight => (0..info.len())
                    .map(|_| T::of(normal.sample(&mut rng)))
                    .collect(),
                ParamKind::Bias | ParamKind::NormShift => vec![T::zero(); info.len()],
                ParamKind::NormScale => vec![T::one(); info.len()],
            })
            .collect();
        Self {
            layout: layout.clone(),
            values,
            init_seed: seed,
        }
    }

    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            layout: layout.clone(),
            values: layout.entries.iter().map(|i| vec![T::zero(); i.len()]).collect(),
            init_seed: 0,
        }
    }

    pub fn from_values(layout: &ParamLayout, values: Vec<Vec<T>>, init_seed: u64) -> Option<Self> {
        if values.len() != layout.entries.len()
            || values.iter().zip(&layout.entries).any(|(v, i)| v.len() != i.len())
        {
            return None;
        }
        Some(Self {
            layout: layout.clone(),
            values,
            init_seed,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&[T]> {
        self.layout
            .entries
            .iter()
            .position(|i| i.name == name)
            .map(|id| self.values[id].as_slice())
    }

    pub fn values(&self) -> &[Vec<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.layout.total_len()
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a convolution over `input` pixels, or `None` if the
    /// kernel does not fit.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn transpose_out(&self, input: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfold `x` (`c×h×w`) into a `(c·k·k) × (oh·ow)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let hw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for o_h in 0..oh {
                    let ih = (o_h * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[o_h * ow..(o_h + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (o_w, v) in line.iter_mut().enumerate() {
                        let iw = (o_w * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let hw = oh * ow;
    x.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for o_h in 0..oh {
                    let ih = (o_h * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for o_w in 0..ow {
                        let iw = (o_w * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += src[o_h * ow + o_w];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in y.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_sums<T: Real>(dy: &[T], db: &mut [T], plane: usize) {
    for (chunk, acc) in dy.chunks_exact(plane).zip(db.iter_mut()) {
        let mut s = T::zero();
        for &v in chunk {
            s += v;
        }
        *acc += s;
    }
}

/// 2-D convolution with weight `[out, in, k, k]` and per-channel bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2d {
    pub fn register(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    ) -> Self {
        let k = geometry.kernel;
        let weight = layout.push(
            format!("{name}.weight"),
            vec![out_channels, in_channels, k, k],
            ParamKind::Weight,
        );
        let bias = layout.push(format!("{name}.bias"), vec![out_channels], ParamKind::Bias);
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = self.geometry.conv_out(h).expect("conv kernel larger than padded input");
        let ow = self.geometry.conv_out(w).expect("conv kernel larger than padded input");
        (oh, ow)
    }

    fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let ckk = c * self.geometry.kernel * self.geometry.kernel;
        let mut cols = vec![T::zero(); ckk * oh * ow];
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        for i in 0..n {
            im2col(x.item(i), c, h, w, self.geometry, oh, ow, &mut cols);
            let out = y.item_mut(i);
            T::gemm(
                self.out_channels,
                ckk,
                oh * ow,
                T::one(),
                p.get(self.weight),
                false,
                &cols,
                false,
                T::zero(),
                out,
            );
            add_channel_bias(out, p.get(self.bias), oh * ow);
        }
        y
    }

    fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (dy.height(), dy.width());
        let ckk = c * self.geometry.kernel * self.geometry.kernel;
        let mut cols = vec![T::zero(); ckk * oh * ow];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let dyi = dy.item(i);
            if let Some(g) = grads.as_deref_mut() {
                im2col(x.item(i), c, h, w, self.geometry, oh, ow, &mut cols);
                T::gemm(
                    self.out_channels,
                    oh * ow,
                    ckk,
                    T::one(),
                    dyi,
                    false,
                    &cols,
                    true,
                    T::one(),
                    g.get_mut(self.weight),
                );
                accumulate_channel_sums(dyi, g.get_mut(self.bias), oh * ow);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    ckk,
                    self.out_channels,
                    oh * ow,
                    T::one(),
                    p.get(self.weight),
                    true,
                    dyi,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im(&cols, c, h, w, self.geometry, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }
}

/// Transposed convolution with weight `[in, out, k, k]`, the adjoint of [`Conv2d`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: ParamId,
}

impl ConvTranspose2d {
    pub fn register(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    ) -> Self {
        let k = geometry.kernel;
        let weight = layout.push(
            format!("{name}.weight"),
            vec![in_channels, out_channels, k, k],
            ParamKind::Weight,
        );
        let bias = layout.push(format!("{name}.bias"), vec![out_channels], ParamKind::Bias);
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let oh = self.geometry.transpose_out(h).expect("transposed conv output size");
        let ow = self.geometry.transpose_out(w).expect("transposed conv output size");
        let okk = self.out_channels * self.geometry.kernel * self.geometry.kernel;
        let mut cols = vec![T::zero(); okk * h * w];
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        for i in 0..n {
            T::gemm(
                okk,
                c,
                h * w,
                T::one(),
                p.get(self.weight),
                true,
                x.item(i),
                false,
                T::zero(),
                &mut cols,
            );
            let out = y.item_mut(i);
            col2im(&cols, self.out_channels, oh, ow, self.geometry, h, w, out);
            add_channel_bias(out, p.get(self.bias), oh * ow);
        }
        y
    }

    fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (dy.height(), dy.width());
        let okk = self.out_channels * self.geometry.kernel * self.geometry.kernel;
        let mut cols = vec![T::zero(); okk * h * w];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let dyi = dy.item(i);
            im2col(dyi, self.out_channels, oh, ow, self.geometry, h, w, &mut cols);
            if let Some(g) = grads.as_deref_mut() {
                T::gemm(
                    c,
                    h * w,
                    okk,
                    T::one(),
                    x.item(i),
                    false,
                    &cols,
                    true,
                    T::one(),
                    g.get_mut(self.weight),
                );
                accumulate_channel_sums(dyi, g.get_mut(self.bias), oh * ow);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    c,
                    okk,
                    h * w,
                    T::one(),
                    p.get(self.weight),
                    false,
                    &cols,
                    false,
                    T::zero(),
                    dx.item_mut(i),
                );
            }
        }
        dx
    }
}

/// Batch normalization over `(n, h, w)` using the statistics of the batch
/// it is applied to, at training and inference alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNorm2d {
    pub channels: usize,
    scale: ParamId,
    shift: ParamId,
}

impl BatchNorm2d {
    pub fn register(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let scale = layout.push(format!("{name}.scale"), vec![channels], ParamKind::NormScale);
        let shift = layout.push(format!("{name}.shift"), vec![channels], ParamKind::NormShift);
        Self {
            channels,
            scale,
            shift,
        }
    }

    /// Per-channel (mean, 1/sqrt(var + eps)).
    fn stats<T: Real>(x: &Tensor<T>) -> Vec<(f64, f64)> {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        (0..c)
            .map(|ci| {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += x.item(i)[ci * plane..(ci + 1) * plane]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let mean = sum / count;
                let mut var = 0.0;
                for i in 0..n {
                    var += x.item(i)[ci * plane..(ci + 1) * plane]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                (mean, 1.0 / (var / count + BN_EPS).sqrt())
            })
            .collect()
    }

    fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "batch norm channels");
        let plane = h * w;
        let stats = Self::stats(x);
        let (scale, shift) = (p.get(self.scale), p.get(self.shift));
        let mut y = x.clone();
        for i in 0..n {
            for (ci, chunk) in y.item_mut(i).chunks_exact_mut(plane).enumerate() {
                let (mean, inv) = stats[ci];
                let (g, b) = (scale[ci].as_f64(), shift[ci].as_f64());
                for v in chunk {
                    *v = T::of(g * (v.as_f64() - mean) * inv + b);
                }
            }
        }
        y
    }

    fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let stats = Self::stats(x);
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            let (xi, dyi) = (x.item(i), dy.item(i));
            for ci in 0..c {
                let (mean, inv) = stats[ci];
                for j in ci * plane..(ci + 1) * plane {
                    let d = dyi[j].as_f64();
                    sum_dy[ci] += d;
                    sum_dy_xhat[ci] += d * (xi[j].as_f64() - mean) * inv;
                }
            }
        }
        if let Some(g) = grads {
            for ci in 0..c {
                g.get_mut(self.scale)[ci] += T::of(sum_dy_xhat[ci]);
                g.get_mut(self.shift)[ci] += T::of(sum_dy[ci]);
            }
        }
        if !need_input_grad {
            return None;
        }
        let scale = p.get(self.scale);
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let (xi, dyi) = (x.item(i), dy.item(i));
            let dxi = dx.item_mut(i);
            for ci in 0..c {
                let (mean, inv) = stats[ci];
                let k = scale[ci].as_f64() * inv / count;
                for j in ci * plane..(ci + 1) * plane {
                    let xhat = (xi[j].as_f64() - mean) * inv;
                    dxi[j] = T::of(
                        k * (count * dyi[j].as_f64() - sum_dy[ci] - xhat * sum_dy_xhat[ci]),
                    );
                }
            }
        }
        Some(dx)
    }
}

/// Fully connected layer over the flattened per-item features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn register(layout: &mut ParamLayout, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = layout.push(
            format!("{name}.weight"),
            vec![out_features, in_features],
            ParamKind::Weight,
        );
        let bias = layout.push(format!("{name}.bias"), vec![out_features], ParamKind::Bias);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear input features");
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            false,
            p.get(self.weight),
            true,
            T::zero(),
            y.data_mut(),
        );
        let bias = p.get(self.bias);
        for row in y.data_mut().chunks_exact_mut(self.out_features) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let n = x.batch();
        if let Some(g) = grads {
            T::gemm(
                self.out_features,
                n,
                self.in_features,
                T::one(),
                dy.data(),
                true,
                x.data(),
                false,
                T::one(),
                g.get_mut(self.weight),
            );
            let db = g.get_mut(self.bias);
            for row in dy.data().chunks_exact(self.out_features) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        need_input_grad.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            T::gemm(
                n,
                self.out_features,
                self.in_features,
                T::one(),
                dy.data(),
                false,
                p.get(self.weight),
                false,
                T::zero(),
                dx.data_mut(),
            );
            dx
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    BatchNorm(BatchNorm2d),
    Linear(Linear),
    LeakyRelu(f64),
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Upsample2x,
    /// Reinterpret each item as `[c, h, w]`.
    Reshape([usize; 3]),
}

impl Layer {
    pub fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.forward(p, x),
            Layer::ConvTranspose(l) => l.forward(p, x),
            Layer::BatchNorm(l) => l.forward(p, x),
            Layer::Linear(l) => l.forward(p, x),
            Layer::LeakyRelu(slope) => {
                let s = T::of(*slope);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Layer::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Layer::Elu => x.map(|v| if v > T::zero() { v } else { v.exp_m1() }),
            Layer::Tanh => x.map(|v| v.tanh()),
            Layer::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            Layer::Upsample2x => {
                let [n, c, h, w] = x.shape();
                let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
                for i in 0..n {
                    let (src, dst) = (x.item(i), y.item_mut(i));
                    for ci in 0..c {
                        for r in 0..2 * h {
                            for col in 0..2 * w {
                                dst[(ci * 2 * h + r) * 2 * w + col] =
                                    src[(ci * h + r / 2) * w + col / 2];
                            }
                        }
                    }
                }
                y
            }
            Layer::Reshape([c, h, w]) => x.clone().reshape([x.batch(), *c, *h, *w]),
        }
    }

    /// Gradient with respect to the layer input. `output` is the value
    /// `forward` produced for `input`.
    pub fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        input: &Tensor<T>,
        output: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let elementwise = |f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            let data = input
                .data()
                .iter()
                .zip(output.data())
                .zip(dy.data())
                .map(|((&x, &y), &d)| f(x, y, d))
                .collect();
            Tensor::from_vec(input.shape(), data)
        };
        match self {
            Layer::Conv(l) => l.backward(p, input, dy, grads, need_input_grad),
            Layer::ConvTranspose(l) => l.backward(p, input, dy, grads, need_input_grad),
            Layer::BatchNorm(l) => l.backward(p, input, dy, grads, need_input_grad),
            Layer::Linear(l) => l.backward(p, input, dy, grads, need_input_grad),
            _ if !need_input_grad => None,
            Layer::LeakyRelu(slope) => {
                let s = T::of(*slope);
                Some(elementwise(&|x, _, d| if x > T::zero() { d } else { d * s }))
            }
            Layer::Relu => Some(elementwise(&|x, _, d| if x > T::zero() { d } else { T::zero() })),
            Layer::Elu => Some(elementwise(&|x, y, d| if x > T::zero() { d } else { d * (y + T::one()) })),
            Layer::Tanh => Some(elementwise(&|_, y, d| d * (T::one() - y * y))),
            Layer::Sigmoid => Some(elementwise(&|_, y, d| d * y * (T::one() - y))),
            Layer::Upsample2x => {
                let [n, c, h, w] = input.shape();
                let mut dx = Tensor::zeros(input.shape());
                for i in 0..n {
                    let (src, dst) = (dy.item(i), dx.item_mut(i));
                    for ci in 0..c {
                        for r in 0..2 * h {
                            for col in 0..2 * w {
                                dst[(ci * h + r / 2) * w + col / 2] +=
                                    src[(ci * 2 * h + r) * 2 * w + col];
                            }
                        }
                    }
                }
                Some(dx)
            }
            Layer::Reshape(_) => Some(dy.clone().reshape(input.shape())),
        }
    }
}

/// Activations recorded by [`Sequential::forward_traced`]: entry 0 is the
/// input, entry `i + 1` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Tensor<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.acts[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(p, &cur);
        }
        cur
    }

    pub fn forward_traced<T: Real>(&self, p: &ParameterSet<T>, x: Tensor<T>) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = layer.forward(p, acts.last().unwrap());
            acts.push(next);
        }
        Trace { acts }
    }

    /// Backpropagate `dy` through the traced pass, accumulating parameter
    /// gradients into `grads` when given.
    pub fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        trace: &Trace<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut grad = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let want_dx = i > 0 || need_input_grad;
            grad = layer.backward(p, &trace.acts[i], &trace.acts[i + 1], &grad, grads.as_deref_mut(), want_dx)?;
        }
        Some(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution, independent of the im2col path.
    fn conv_oracle(
        x: &Tensor<f64>,
        wt: &[f64],
        bias: &[f64],
        cout: usize,
        g: ConvGeometry,
    ) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let oh = g.conv_out(h).unwrap();
        let ow = g.conv_out(w).unwrap();
        let k = g.kernel;
        let mut y = Tensor::zeros([n, cout, oh, ow]);
        for i in 0..n {
            for co in 0..cout {
                for r in 0..oh {
                    for s in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c {
                            for a in 0..k {
                                for b in 0..k {
                                    let ih = (r * g.stride + a) as isize - g.padding as isize;
                                    let iw = (s * g.stride + b) as isize - g.padding as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += wt[((co * c + ci) * k + a) * k + b]
                                            * x.item(i)[(ci * h + ih as usize) * w + iw as usize];
                                    }
                                }
                            }
                        }
                        y.item_mut(i)[(co * oh + r) * ow + s] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: [usize; 4], phase: f64) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64) * 0.731 + phase).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_summation() {
        let g = ConvGeometry::new(4, 2, 1);
        let mut layout = ParamLayout::default();
        let conv = Conv2d::register(&mut layout, "c", 2, 3, g);
        let mut p = ParameterSet::<f64>::init(&layout, 3);
        p.get_mut(1).copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = ramp([2, 2, 6, 6], 0.3);
        let y = conv.forward(&p, &x);
        let want = conv_oracle(&x, p.get(0), p.get(1), 3, g);
        assert_eq!(y.shape(), [2, 3, 3, 3]);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
        let g = ConvGeometry::new(4, 2, 1);
        let mut la = ParamLayout::default();
        let conv = Conv2d::register(&mut la, "c", 2, 3, g);
        let mut lb = ParamLayout::default();
        let convt = ConvTranspose2d::register(&mut lb, "t", 3, 2, g);
        let pa = ParameterSet::<f64>::init(&la, 9);
        // conv weight [3,2,k,k] reinterpreted as convT weight [in=3, out=2, k, k].
        let pb = ParameterSet::from_values(&lb, vec![pa.get(0).to_vec(), vec![0.0; 2]], 0).unwrap();
        let x = ramp([1, 2, 8, 8], 0.1);
        let y = ramp([1, 3, 4, 4], 1.7);
        let lhs: f64 = conv.forward(&pa, &x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let ty = convt.forward(&pb, &y);
        assert_eq!(ty.shape(), [1, 2, 8, 8]);
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    fn check_layer_grads(layer: Layer, layout: &ParamLayout, shape: [usize; 4]) {
        let mut p = ParameterSet::<f64>::init(layout, 5);
        // Move params off their trivial init so norm scales/biases matter.
        for v in p.values_mut() {
            for (j, x) in v.iter_mut().enumerate() {
                *x += 0.05 * ((j as f64) * 1.3).cos();
            }
        }
        let x = ramp(shape, 0.4);
        let y = layer.forward(&p, &x);
        let r = ramp(y.shape(), 2.2);
        let objective = |p: &ParameterSet<f64>, x: &Tensor<f64>| -> f64 {
            layer.forward(p, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = ParameterSet::zeros(layout);
        let dx = layer.backward(&p, &x, &y, &r, Some(&mut grads), true).unwrap();
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{layer:?} dx[{j}]: {fd} vs {}", dx.data()[j]);
        }
        for id in 0..layout.entries().len() {
            for j in 0..p.get(id).len() {
                let mut pp = p.clone();
                pp.get_mut(id)[j] += h;
                let mut pm = p.clone();
                pm.get_mut(id)[j] -= h;
                let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h);
                let an = grads.get(id)[j];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{layer:?} param {id}[{j}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut l = ParamLayout::default();
        let conv = Conv2d::register(&mut l, "c", 2, 3, ConvGeometry::new(4, 2, 1));
        check_layer_grads(Layer::Conv(conv), &l, [2, 2, 6, 6]);

        let mut l = ParamLayout::default();
        let conv = Conv2d::register(&mut l, "c", 2, 2, ConvGeometry::new(3, 1, 1));
        check_layer_grads(Layer::Conv(conv), &l, [1, 2, 5, 5]);

        let mut l = ParamLayout::default();
        let t = ConvTranspose2d::register(&mut l, "t", 3, 2, ConvGeometry::new(4, 2, 1));
        check_layer_grads(Layer::ConvTranspose(t), &l, [2, 3, 3, 3]);

        let mut l = ParamLayout::default();
        let bn = BatchNorm2d::register(&mut l, "bn", 3);
        check_layer_grads(Layer::BatchNorm(bn), &l, [2, 3, 3, 2]);

        let mut l = ParamLayout::default();
        let lin = Linear::register(&mut l, "fc", 12, 5);
        check_layer_grads(Layer::Linear(lin), &l, [3, 3, 2, 2]);

        let empty = ParamLayout::default();
        for layer in [
            Layer::LeakyRelu(0.2),
            Layer::Relu,
            Layer::Elu,
            Layer::Tanh,
            Layer::Sigmoid,
            Layer::Upsample2x,
            Layer::Reshape([2, 2, 6]),
        ] {
            check_layer_grads(layer, &empty, [2, 2, 3, 4]);
        }
    }

    #[test]
    fn init_is_seeded() {
        let mut l = ParamLayout::default();
        Conv2d::register(&mut l, "c", 4, 4, ConvGeometry::new(4, 2, 1));
        let a = ParameterSet::<f32>::init(&l, 1);
        assert_eq!(a, ParameterSet::<f32>::init(&l, 1));
        assert_ne!(a.get(0), ParameterSet::<f32>::init(&l, 2).get(0));
        assert!(a.get(1).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn geometry_arithmetic() {
        let g = ConvGeometry::new(4, 2, 1);
        assert_eq!(g.conv_out(256), Some(128));
        assert_eq!(g.transpose_out(128), Some(256));
        let s1 = ConvGeometry::new(4, 1, 1);
        assert_eq!(s1.conv_out(32), Some(31));
        assert_eq!(s1.conv_out(1), None);
    }
}
