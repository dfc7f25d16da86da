use rand::Rng;

use super::{gemm, Param, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Spatial geometry of a strided square-kernel convolution from `in_*` to `out_*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Self {
        let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
        Self {
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: out(in_h),
            out_w: out(in_w),
        }
    }
}

/// Unfolds `x` (`[c, batch, in_h, in_w]`) into `[c*k*k, batch*out_h*out_w]`; padding reads zero.
pub fn im2col<T: Real>(x: &[T], channels: usize, batch: usize, g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let cols = batch * g.out_h * g.out_w;
    let mut col = vec![T::zero(); channels * k * k * cols];
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * cols..][..cols];
                for b in 0..batch {
                    let img = &x[(c * batch + b) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &img[iy as usize * g.in_w..][..g.in_w];
                        let dst = &mut row[(b * g.out_h + oy) * g.out_w..][..g.out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[c, batch, in_h, in_w]` tensor.
pub fn col2im<T: Real>(col: &[T], channels: usize, batch: usize, g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let cols = batch * g.out_h * g.out_w;
    let mut x = vec![T::zero(); channels * batch * g.in_h * g.in_w];
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * cols..][..cols];
                for b in 0..batch {
                    let img = &mut x[(c * batch + b) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst = &mut img[iy as usize * g.in_w..][..g.in_w];
                        let src = &row[(b * g.out_h + oy) * g.out_w..][..g.out_w];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_row_bias<T: Real>(y: &mut [T], bias: &[T], row_len: usize) {
    for (row, &b) in y.chunks_mut(row_len).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_row_sums<T: Real>(grad: &mut [T], dy: &[T], row_len: usize) {
    for (g, row) in grad.iter_mut().zip(dy.chunks(row_len)) {
        *g += row.iter().copied().sum::<T>();
    }
}

/// `y = x W^T + b` on `[batch, in]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in_uniform(in_features * out_features, in_features, rng),
            bias: Param::zeros(out_features),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut y = vec![T::zero(); batch * self.out_features];
        for row in y.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(false, true, batch, self.out_features, self.in_features, T::one(), x, &self.weight.value, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward(&mut self, x: &[T], dy: &[T], batch: usize, need_input_grad: bool) -> Vec<T> {
        gemm(true, false, self.out_features, self.in_features, batch, T::one(), dy, x, T::one(), &mut self.weight.grad);
        for row in dy.chunks(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_input_grad {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); batch * self.in_features];
        gemm(false, false, batch, self.in_features, self.out_features, T::one(), dy, &self.weight.value, T::zero(), &mut dx);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Strided 2-D convolution; weights `[out_ch, in_ch * k * k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * geometry.kernel * geometry.kernel;
        Self {
            weight: Param::fan_in_uniform(out_channels * fan_in, fan_in, rng),
            bias: Param::zeros(out_channels),
            in_channels,
            out_channels,
            geometry,
        }
    }

    fn patch(&self) -> usize {
        self.in_channels * self.geometry.kernel * self.geometry.kernel
    }

    /// `[in_ch, batch, in_h, in_w]` to `[out_ch, batch, out_h, out_w]`.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let g = &self.geometry;
        let n = batch * g.out_h * g.out_w;
        let col = im2col(x, self.in_channels, batch, g);
        let mut y = vec![T::zero(); self.out_channels * n];
        gemm(false, false, self.out_channels, n, self.patch(), T::one(), &self.weight.value, &col, T::zero(), &mut y);
        add_row_bias(&mut y, &self.bias.value, n);
        y
    }

    pub fn backward(&mut self, x: &[T], dy: &[T], batch: usize, need_input_grad: bool) -> Vec<T> {
        let g = self.geometry;
        let n = batch * g.out_h * g.out_w;
        let patch = self.patch();
        let col = im2col(x, self.in_channels, batch, &g);
        gemm(false, true, self.out_channels, patch, n, T::one(), dy, &col, T::one(), &mut self.weight.grad);
        accumulate_row_sums(&mut self.bias.grad, dy, n);
        if !need_input_grad {
            return Vec::new();
        }
        let mut dcol = col;
        gemm(true, false, patch, n, self.out_channels, T::one(), &self.weight.value, dy, T::zero(), &mut dcol);
        col2im(&dcol, self.in_channels, batch, &g)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s input map); weights `[in_ch, out_ch * k * k]`.
///
/// `geometry` describes the matching forward convolution from the large output grid
/// (`in_h`, `in_w`) down to this layer's input grid (`out_h`, `out_w`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let k2 = geometry.kernel * geometry.kernel;
        // Each output pixel receives about in_ch * k^2 / stride^2 contributions.
        let fan_in = in_channels * k2 / (geometry.stride * geometry.stride).max(1);
        Self {
            weight: Param::fan_in_uniform(in_channels * out_channels * k2, fan_in, rng),
            bias: Param::zeros(out_channels),
            in_channels,
            out_channels,
            geometry,
        }
    }

    fn patch(&self) -> usize {
        self.out_channels * self.geometry.kernel * self.geometry.kernel
    }

    /// `[in_ch, batch, out_h, out_w]` (small grid) to `[out_ch, batch, in_h, in_w]` (large grid).
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let g = &self.geometry;
        let n = batch * g.out_h * g.out_w;
        let mut col = vec![T::zero(); self.patch() * n];
        gemm(true, false, self.patch(), n, self.in_channels, T::one(), &self.weight.value, x, T::zero(), &mut col);
        let mut y = col2im(&col, self.out_channels, batch, g);
        add_row_bias(&mut y, &self.bias.value, batch * g.in_h * g.in_w);
        y
    }

    pub fn backward(&mut self, x: &[T], dy: &[T], batch: usize, need_input_grad: bool) -> Vec<T> {
        let g = self.geometry;
        let n = batch * g.out_h * g.out_w;
        let patch = self.patch();
        let dcol = im2col(dy, self.out_channels, batch, &g);
        gemm(false, true, self.in_channels, patch, n, T::one(), x, &dcol, T::one(), &mut self.weight.grad);
        accumulate_row_sums(&mut self.bias.grad, dy, batch * g.in_h * g.in_w);
        if !need_input_grad {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); self.in_channels * n];
        gemm(false, false, self.in_channels, n, patch, T::one(), &self.weight.value, &dcol, T::zero(), &mut dx);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn leaky_relu<T: Real>(x: &mut [T]) {
    let slope = T::c(LEAKY_SLOPE);
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// In-place `dy *= f'(.)`, using the activation's *output* (its sign matches the input's).
pub fn leaky_relu_backward<T: Real>(y: &[T], dy: &mut [T]) {
    let slope = T::c(LEAKY_SLOPE);
    for (d, &v) in dy.iter_mut().zip(y) {
        if v < T::zero() {
            *d *= slope;
        }
    }
}

pub fn sigmoid<T: Real>(x: &mut [T]) {
    for v in x {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

/// In-place `dy *= y (1 - y)` from the sigmoid output `y`.
pub fn sigmoid_backward<T: Real>(y: &[T], dy: &mut [T]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        *d *= v * (T::one() - v);
    }
}

/// `[C, B, S]` to `[B, C*S]`.
pub fn to_sample_major<T: Real>(x: &[T], channels: usize, batch: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &x[(c * batch + b) * spatial..][..spatial];
            out[(b * channels + c) * spatial..][..spatial].copy_from_slice(src);
        }
    }
    out
}

/// `[B, C*S]` to `[C, B, S]`.
pub fn to_channel_major<T: Real>(x: &[T], channels: usize, batch: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &x[(b * channels + c) * spatial..][..spatial];
            out[(c * batch + b) * spatial..][..spatial].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dotp(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct convolution, independent of im2col.
    fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], ci: usize, co: usize, batch: usize, g: &ConvGeometry) -> Vec<f64> {
        let k = g.kernel;
        let mut y = vec![0.0; co * batch * g.out_h * g.out_w];
        for o in 0..co {
            for b in 0..batch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                        acc += w[o * ci * k * k + (c * k + ki) * k + kj]
                                            * x[((c * batch + b) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                    }
                                }
                            }
                        }
                        y[((o * batch + b) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ConvGeometry::new(4, 2, 1, 8, 8);
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let conv = Conv2d::<f64>::new(3, 5, g, &mut rng);
        let x = rand_vec(3 * 2 * 64, &mut rng);
        let y = conv.forward(&x, 2);
        let want = naive_conv(&x, &conv.weight.value, &conv.bias.value, 3, 5, 2, &g);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeometry::new(4, 2, 1, 6, 6);
        let x = rand_vec(2 * 3 * 36, &mut rng);
        let c = rand_vec(2 * 16 * 3 * g.out_h * g.out_w, &mut rng);
        let lhs = dotp(&im2col(&x, 2, 3, &g), &c);
        let rhs = dotp(&x, &col2im(&c, 2, 3, &g));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x) - b, y> == <x, convT(y) - b'> when both layers share weights.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::new(4, 2, 1, 8, 8);
        let mut conv = Conv2d::<f64>::new(2, 3, g, &mut rng);
        let mut convt = ConvTranspose2d::<f64>::new(3, 2, g, &mut rng);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        convt.bias.value.iter_mut().for_each(|b| *b = 0.0);
        // conv weight [co=3, ci*k*k=2*16] equals convT weight [in=3, out*k*k=2*16].
        convt.weight.value = conv.weight.value.clone();
        let x = rand_vec(2 * 64, &mut rng);
        let y = rand_vec(3 * 16, &mut rng);
        let lhs = dotp(&conv.forward(&x, 1), &y);
        let rhs = dotp(&x, &convt.forward(&y, 1));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_layer_grads(
        params: usize,
        mut loss: impl FnMut(Option<(usize, f64)>) -> f64,
        analytic: &[f64],
    ) {
        let h = 1e-6;
        for i in (0..params).step_by((params / 23).max(1)) {
            let num = (loss(Some((i, h))) - loss(Some((i, -h)))) / (2.0 * h);
            let scale = num.abs().max(analytic[i].abs()).max(1e-6);
            assert!((num - analytic[i]).abs() / scale < 1e-5, "param {i}: numeric {num} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeometry::new(4, 2, 1, 6, 6);
        let mut conv = Conv2d::<f64>::new(2, 3, g, &mut rng);
        let x = rand_vec(2 * 2 * 36, &mut rng);
        let r = rand_vec(3 * 2 * 9, &mut rng);
        let dx = conv.backward(&x, &r, 2, true);
        let gw = conv.weight.grad.clone();
        let base = conv.clone();
        check_layer_grads(gw.len(), |p| {
            let mut c = base.clone();
            if let Some((i, d)) = p {
                c.weight.value[i] += d;
            }
            dotp(&c.forward(&x, 2), &r)
        }, &gw);
        check_layer_grads(x.len(), |p| {
            let mut xx = x.clone();
            if let Some((i, d)) = p {
                xx[i] += d;
            }
            dotp(&base.forward(&xx, 2), &r)
        }, &dx);
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeometry::new(4, 2, 1, 8, 8);
        let mut layer = ConvTranspose2d::<f64>::new(3, 2, g, &mut rng);
        let x = rand_vec(3 * 2 * 16, &mut rng);
        let r = rand_vec(2 * 2 * 64, &mut rng);
        let dx = layer.backward(&x, &r, 2, true);
        let gw = layer.weight.grad.clone();
        let gb = layer.bias.grad.clone();
        let base = layer.clone();
        check_layer_grads(gw.len(), |p| {
            let mut c = base.clone();
            if let Some((i, d)) = p {
                c.weight.value[i] += d;
            }
            dotp(&c.forward(&x, 2), &r)
        }, &gw);
        check_layer_grads(gb.len(), |p| {
            let mut c = base.clone();
            if let Some((i, d)) = p {
                c.bias.value[i] += d;
            }
            dotp(&c.forward(&x, 2), &r)
        }, &gb);
        check_layer_grads(x.len(), |p| {
            let mut xx = x.clone();
            if let Some((i, d)) = p {
                xx[i] += d;
            }
            dotp(&base.forward(&xx, 2), &r)
        }, &dx);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lin = Linear::<f64>::new(5, 4, &mut rng);
        let x = rand_vec(3 * 5, &mut rng);
        let r = rand_vec(3 * 4, &mut rng);
        let dx = lin.backward(&x, &r, 3, true);
        let gw = lin.weight.grad.clone();
        let gb = lin.bias.grad.clone();
        let base = lin.clone();
        check_layer_grads(gw.len(), |p| {
            let mut c = base.clone();
            if let Some((i, d)) = p {
                c.weight.value[i] += d;
            }
            dotp(&c.forward(&x, 3), &r)
        }, &gw);
        check_layer_grads(gb.len(), |p| {
            let mut c = base.clone();
            if let Some((i, d)) = p {
                c.bias.value[i] += d;
            }
            dotp(&c.forward(&x, 3), &r)
        }, &gb);
        check_layer_grads(x.len(), |p| {
            let mut xx = x.clone();
            if let Some((i, d)) = p {
                xx[i] += d;
            }
            dotp(&base.forward(&xx, 3), &r)
        }, &dx);
    }

    #[test]
    fn layout_round_trip() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let s = to_sample_major(&x, 2, 3, 4);
        assert_eq!(&s[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(to_channel_major(&s, 2, 3, 4), x);
    }
}
