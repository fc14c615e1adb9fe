use ndarray::{s, Array2, Array4, ArrayView4, Axis, Ix2, Ix4};
use rand::Rng;

use super::{join, Mode, Param, Parameterized};
use crate::scalar::Scalar;

/// Output spatial size of a convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `x` (N, C, H, W) into columns of shape (C·k·k, N·Ho·Wo).
pub fn im2col<T: Scalar>(x: ArrayView4<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let cols_per_row = n * ho * wo;
    let mut out = vec![T::zero(); c * k * k * cols_per_row];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_row = &mut out[row * cols_per_row..(row + 1) * cols_per_row];
                for ni in 0..n {
                    let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, cols_per_row), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: accumulate columns back into an (N, C, H, W) tensor.
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, w) = dims;
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let cols_per_row = n * ho * wo;
    let mut out = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_row = &src[row * cols_per_row..(row + 1) * cols_per_row];
                for ni in 0..n {
                    let plane = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dims, out).expect("col2im shape")
}

/// 2-D convolution with square kernel, zero padding and bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cols: Option<Array2<T>>,
    in_dims: (usize, usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// "Same" padding for odd kernels.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::with_stride(in_ch, out_ch, kernel, 1, kernel / 2)
    }

    pub fn with_stride(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
            kernel,
            stride,
            pad,
            cols: None,
            in_dims: (0, 0, 0, 0),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let (o, i, k) = (self.out_channels(), self.in_channels(), self.kernel);
        self.weight
            .value
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        );
        let cols = im2col(x.view(), self.kernel, self.stride, self.pad);
        let mut y = self.weight_matrix().dot(&cols);
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("bias");
        for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        self.cols = Some(cols);
        self.in_dims = (n, c, h, w);
        let o = self.out_channels();
        y.into_shape_with_order((o, n, ho, wo))
            .expect("conv output")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
    }

    /// Accumulate weight/bias gradients; returns the input gradient when requested.
    pub fn backward(&mut self, dy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let (n, o, ho, wo) = dy.dim();
        let dy_mat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, n * ho * wo))
            .expect("dy matrix");
        let cols = self.cols.as_ref().expect("conv backward before forward");
        let dw = dy_mat.dot(&cols.t());
        let (i, k) = (self.in_channels(), self.kernel);
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("contiguous grad");
            gw += &dw;
        }
        let db = dy_mat.sum_axis(Axis(1));
        {
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("bias");
            gb += &db;
        }
        need_input_grad.then(|| {
            let dcols = self.weight_matrix().t().dot(&dy_mat);
            col2im(&dcols, self.in_dims, self.kernel, self.stride, self.pad)
        })
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer on (N, in) inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_dim, in_dim]),
            bias: Param::zeros(&[out_dim]),
            input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("bias");
        let y = x.dot(&self.w().t()) + &b;
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.input.as_ref().expect("linear backward before forward");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            gw += &dy.t().dot(x);
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("1-D");
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w())
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    output: Option<ndarray::ArrayD<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward<D: ndarray::Dimension>(&mut self, x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let y = x.mapv(|v| v.max(T::zero()));
        self.output = Some(y.clone().into_dyn());
        y
    }

    pub fn backward<D: ndarray::Dimension>(&mut self, dy: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let y = self.output.as_ref().expect("relu backward before forward");
        let mut dx = dy.clone();
        dx.iter_mut().zip(y.iter()).for_each(|(d, &o)| {
            if o <= T::zero() {
                *d = T::zero();
            }
        });
        dx
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<usize>,
    in_dims: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard");
        let mut out = Vec::with_capacity(n * c * ho * wo);
        self.argmax.clear();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    self.argmax.push(best);
                }
            }
        }
        self.in_dims = (n, c, h, w);
        Array4::from_shape_vec((n, c, ho, wo), out).expect("pool shape")
    }

    pub fn backward<T: Scalar>(&self, dy: &Array4<T>) -> Array4<T> {
        let mut dx = Array4::<T>::zeros(self.in_dims);
        let dst = dx.as_slice_mut().expect("standard");
        for (&idx, &g) in self.argmax.iter().zip(dy.iter()) {
            dst[idx] += g;
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, z)| x[[a, b, y / 2, z / 2]])
    }

    pub fn backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let mut dx = Array4::<T>::zeros((n, c, h / 2, w / 2));
        for ((a, b, y, z), &g) in dy.indexed_iter() {
            dx[[a, b, y / 2, z / 2]] += g;
        }
        dx
    }
}

/// Spatial mean: (N, C, H, W) → (N, C).
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool {
    dims: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>) -> Array2<T> {
        self.dims = x.dim();
        let (n, c, h, w) = x.dim();
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, h * w))
            .expect("flatten");
        flat.mean_axis(Axis(2)).expect("non-empty spatial dims")
    }

    pub fn backward<T: Scalar>(&self, dy: &Array2<T>) -> Array4<T> {
        let (n, c, h, w) = self.dims;
        let scale = T::one() / T::lit((h * w) as f64);
        Array4::from_shape_fn((n, c, h, w), |(a, b, _, _)| dy[[a, b]] * scale)
    }
}

/// Inverted dropout; identity outside training mode.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub p: f64,
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward(&mut self, x: &Array2<T>, mode: &mut Mode<'_>) -> Array2<T> {
        match (&mut mode.rng, mode.train && self.p > 0.0) {
            (Some(rng), true) => {
                let keep = T::lit(1.0 / (1.0 - self.p));
                let mask = x.mapv(|_| if rng.random_bool(self.p) { T::zero() } else { keep });
                let y = x * &mask;
                self.mask = Some(mask);
                y
            }
            _ => {
                self.mask = None;
                x.clone()
            }
        }
    }

    pub fn backward(&self, dy: &Array2<T>) -> Array2<T> {
        match &self.mask {
            Some(m) => dy * m,
            None => dy.clone(),
        }
    }
}

/// Row-wise L2 normalization of (N, d).
#[derive(Debug, Clone, Default)]
pub struct L2Normalize<T> {
    output: Option<Array2<T>>,
    norms: Vec<T>,
}

impl<T: Scalar> L2Normalize<T> {
    pub fn new() -> Self {
        Self {
            output: None,
            norms: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        let eps = T::lit(1e-12);
        let mut y = x.clone();
        self.norms.clear();
        for mut row in y.outer_iter_mut() {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            row.mapv_inplace(|v| v / norm);
            self.norms.push(norm);
        }
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&self, dy: &Array2<T>) -> Array2<T> {
        let y = self.output.as_ref().expect("normalize backward before forward");
        let mut dx = dy.clone();
        for ((mut d, yr), &norm) in dx.outer_iter_mut().zip(y.outer_iter()).zip(&self.norms) {
            let dot = d.iter().zip(yr.iter()).map(|(a, b)| *a * *b).sum::<T>();
            d.iter_mut().zip(yr.iter()).for_each(|(g, &yy)| *g = (*g - yy * dot) / norm);
        }
        dx
    }
}

/// Per-channel batch normalization. Running statistics are stored as
/// parameters whose gradients stay zero, so they travel with checkpoints and
/// are left unchanged by gradient steps.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    xhat: Option<Array4<T>>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let mut bn = Self {
            gamma: Param::zeros(&[channels]),
            beta: Param::zeros(&[channels]),
            running_mean: Param::zeros(&[channels]),
            running_var: Param::zeros(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
            xhat: None,
            inv_std: Vec::new(),
            batch_stats: false,
        };
        bn.gamma.value.fill(T::one());
        bn.running_var.value.fill(T::one());
        bn
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let eps = T::lit(self.eps);
        let mom = T::lit(self.momentum);
        self.batch_stats = mode.train && count > 1;
        let mut xhat = x.clone();
        self.inv_std.clear();
        for ch in 0..c {
            let (mean, var) = if self.batch_stats {
                let plane = x.slice(s![.., ch, .., ..]);
                let mean = plane.sum() / T::lit(count as f64);
                let var = plane.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / T::lit(count as f64);
                let unbiased = var * T::lit(count as f64 / (count - 1) as f64);
                let rm = &mut self.running_mean.value[ch];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut self.running_var.value[ch];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[ch], self.running_var.value[ch])
            };
            let inv = T::one() / (var + eps).sqrt();
            self.inv_std.push(inv);
            xhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - mean) * inv);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v * g + b);
        }
        self.xhat = Some(xhat);
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let xhat = self.xhat.as_ref().expect("batchnorm backward before forward");
        let (n, c, h, w) = dy.dim();
        let m = T::lit((n * h * w) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let d = dy.slice(s![.., ch, .., ..]);
            let xh = xhat.slice(s![.., ch, .., ..]);
            let sum_d = d.sum();
            let sum_dx = ndarray::Zip::from(&d).and(&xh).fold(T::zero(), |a, &g, &x| a + g * x);
            self.gamma.grad[ch] += sum_dx;
            self.beta.grad[ch] += sum_d;
            let scale = self.gamma.value[ch] * self.inv_std[ch];
            let mut out = dx.slice_mut(s![.., ch, .., ..]);
            if self.batch_stats {
                ndarray::Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &g, &x| {
                    *o = scale * (g - sum_d / m - x * sum_dx / m);
                });
            } else {
                ndarray::Zip::from(&mut out).and(&d).for_each(|o, &g| *o = scale * g);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// 2x2 average pooling with stride 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvgPool2 {
    in_dims: (usize, usize, usize, usize),
}

impl AvgPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        self.in_dims = (n, c, h, w);
        let quarter = T::lit(0.25);
        Array4::from_shape_fn((n, c, h / 2, w / 2), |(a, b, y, z)| {
            (x[[a, b, 2 * y, 2 * z]] + x[[a, b, 2 * y + 1, 2 * z]] + x[[a, b, 2 * y, 2 * z + 1]] + x[[a, b, 2 * y + 1, 2 * z + 1]])
                * quarter
        })
    }

    pub fn backward<T: Scalar>(&self, dy: &Array4<T>) -> Array4<T> {
        let quarter = T::lit(0.25);
        let mut dx = Array4::zeros(self.in_dims);
        for ((a, b, y, z), &g) in dy.indexed_iter() {
            for (dy_, dz) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                dx[[a, b, 2 * y + dy_, 2 * z + dz]] = g * quarter;
            }
        }
        dx
    }
}

/// Concatenate two (N, C, H, W) tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching dims")
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Zero-pad (N, C, H, W) at the bottom/right to `(h, w)`.
pub fn pad_to<T: Scalar>(x: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, xh, xw) = x.dim();
    if (xh, xw) == (h, w) {
        return x.clone();
    }
    let mut out = Array4::zeros((n, c, h, w));
    out.slice_mut(s![.., .., ..xh, ..xw]).assign(x);
    out
}

pub fn crop_to<T: Scalar>(x: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    x.slice(s![.., .., ..h, ..w]).to_owned()
}

/// Stack 2-D images into an (N, 1, H, W) batch.
pub fn stack_images<T: Scalar>(images: &[&Array2<T>]) -> Array4<T> {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut out = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, 0, .., ..]).assign(img);
    }
    out
}

pub fn to4<T: Scalar>(x: ndarray::ArrayD<T>) -> Array4<T> {
    x.into_dimensionality::<Ix4>().expect("4-D")
}
