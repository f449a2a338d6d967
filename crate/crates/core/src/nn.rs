//! Minimal `f64` network layers with hand-written backward passes.
//!
//! Layers hold only weights; forward passes return whatever the matching
//! backward pass needs, so a trained model can be shared immutably while
//! gradients accumulate into a separate zeroed copy of the same structure.

use rand::Rng;

use crate::error::{ForgeError, Result};

/// Channel-major feature map `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Stacks maps with equal spatial size along the channel axis.
    pub fn concat(parts: &[&FeatureMap]) -> FeatureMap {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!((p.height, p.width), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&p.data);
        }
        FeatureMap {
            channels: parts.iter().map(|p| p.channels).sum(),
            height: h,
            width: w,
            data,
        }
    }

    /// Splits channels back into pieces of the given sizes (backward of `concat`).
    pub fn split(&self, sizes: &[usize]) -> Vec<FeatureMap> {
        let plane = self.plane();
        let mut offset = 0;
        sizes
            .iter()
            .map(|&c| {
                let data = self.data[offset * plane..(offset + c) * plane].to_vec();
                offset += c;
                FeatureMap {
                    channels: c,
                    height: self.height,
                    width: self.width,
                    data,
                }
            })
            .collect()
    }
}

/// Anything with trainable parameters, visited in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(p));
        out
    }

    fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if values.len() != expected {
            return Err(ForgeError::Shape(format!(
                "parameter vector has {} entries, model expects {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            p.copy_from_slice(&values[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |p| p.iter_mut().for_each(|v| *v = 0.0));
    }

    fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |p| s += p.iter().map(|v| v * v).sum::<f64>());
        s
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut(&mut |p| p.iter_mut().for_each(|v| *v *= k));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }
}

/// `C = A * B + beta * C`, with optional transposes, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds for either layout.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn init_uniform(rng: &mut impl Rng, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// What [`Conv2d::backward`] needs from the forward pass.
pub struct ConvCache {
    cols: Vec<f64>,
    in_height: usize,
    in_width: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: init_uniform(rng, out_channels * fan_in, fan_in, 1.0),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(height), o(width))
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let rows = self.in_channels * k * k;
        let mut cols = vec![0.0; rows * oh * ow];
        for c in 0..self.in_channels {
            let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = src[iy * x.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], height: usize, width: usize, oh: usize, ow: usize) -> FeatureMap {
        let k = self.kernel;
        let mut dx = FeatureMap::zeros(self.in_channels, height, width);
        let plane = height * width;
        for c in 0..self.in_channels {
            let dst = &mut dx.data[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < width as isize {
                                dst[iy * width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let mut y = FeatureMap::zeros(self.out_channels, oh, ow);
        for (o, chunk) in y.data.chunks_mut(oh * ow).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias[o]);
        }
        let kk = self.in_channels * self.kernel * self.kernel;
        gemm(self.out_channels, kk, oh * ow, &self.weight, false, &cols, false, 1.0, &mut y.data);
        let cache = ConvCache {
            cols,
            in_height: x.height,
            in_width: x.width,
        };
        (y, cache)
    }

    /// Accumulates weight gradients into `grads` (if given) and returns the
    /// input gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &FeatureMap,
        grads: Option<&mut Conv2d>,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let n = dy.plane();
        let kk = self.in_channels * self.kernel * self.kernel;
        if let Some(g) = grads {
            gemm(self.out_channels, n, kk, &dy.data, false, &cache.cols, true, 1.0, &mut g.weight);
            for (o, chunk) in dy.data.chunks(n).enumerate() {
                g.bias[o] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.out_channels, n, &self.weight, true, &dy.data, false, 0.0, &mut dcols);
        Some(self.col2im(&dcols, cache.in_height, cache.in_width, dy.height, dy.width))
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self::with_gain(inputs, outputs, 1.0, rng)
    }

    pub fn with_gain(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: init_uniform(rng, inputs * outputs, inputs, gain),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inputs, "dense input width");
        let mut y = self.bias.clone();
        gemm(self.outputs, self.inputs, 1, &self.weight, false, x, false, 1.0, &mut y);
        y
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], grads: Option<&mut Dense>) -> Vec<f64> {
        if let Some(g) = grads {
            gemm(self.outputs, 1, self.inputs, dy, false, x, false, 1.0, &mut g.weight);
            g.bias.iter_mut().zip(dy).for_each(|(b, d)| *b += d);
        }
        let mut dx = vec![0.0; self.inputs];
        gemm(self.inputs, self.outputs, 1, &self.weight, true, dy, false, 0.0, &mut dx);
        dx
    }
}

impl Params for Dense {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU `x * sigmoid(x)`, applied in place; returns the pre-activations.
pub fn silu_inplace(x: &mut [f64]) -> Vec<f64> {
    let pre = x.to_vec();
    x.iter_mut().for_each(|v| *v *= sigmoid(*v));
    pre
}

pub fn silu_backward(pre: &[f64], dy: &mut [f64]) {
    for (d, &x) in dy.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut y = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for yy in 0..h {
            for xx in 0..w {
                y.data[(c * h + yy) * w + xx] = x.data[(c * x.height + yy / 2) * x.width + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for yy in 0..dy.height {
            for xx in 0..dy.width {
                dx.data[(c * h + yy / 2) * w + xx / 2] += dy.data[(c * dy.height + yy) * dy.width + xx];
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane() as f64;
    x.data.chunks(x.plane()).map(|c| c.iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(dy: &[f64], height: usize, width: usize) -> FeatureMap {
    let n = (height * width) as f64;
    let mut dx = FeatureMap::zeros(dy.len(), height, width);
    for (c, chunk) in dx.data.chunks_mut(height * width).enumerate() {
        chunk.iter_mut().for_each(|v| *v = dy[c] / n);
    }
    dx
}

/// Per-channel average weighted by a spatial map `w` (one value per pixel).
pub fn weighted_avg_pool(x: &FeatureMap, w: &[f64]) -> Vec<f64> {
    let norm = w.iter().sum::<f64>() + 1e-6;
    x.data
        .chunks(x.plane())
        .map(|c| c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / norm)
        .collect()
}

pub fn weighted_avg_pool_backward(dy: &[f64], w: &[f64], height: usize, width: usize) -> FeatureMap {
    let norm = w.iter().sum::<f64>() + 1e-6;
    let mut dx = FeatureMap::zeros(dy.len(), height, width);
    for (c, chunk) in dx.data.chunks_mut(height * width).enumerate() {
        chunk.iter_mut().zip(w).for_each(|(v, b)| *v = dy[c] * b / norm);
    }
    dx
}

/// 2x2 mean pooling of a single plane with even sides.
pub fn avg_pool2(plane: &[f64], height: usize, width: usize) -> Vec<f64> {
    let (h, w) = (height / 2, width / 2);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = 2 * y * width + 2 * x;
            out[y * w + x] = 0.25 * (plane[i] + plane[i + 1] + plane[i + width] + plane[i + width + 1]);
        }
    }
    out
}

/// Adam with bias correction over a model's flattened parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update using `grads * grad_scale`.
    pub fn step<P: Params>(&mut self, model: &mut P, grads: &P, grad_scale: f64) {
        let g = grads.flat();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
            self.step = 0;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        model.visit_mut(&mut |p| {
            for w in p.iter_mut() {
                let gi = g[i] * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                i += 1;
            }
        });
    }
}

/// Scales `grads` so that its global L2 norm does not exceed `max_norm`.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = rand_map(&mut rng, 2, 7, 6);
        let (y, _) = conv.forward(&x);
        let (oh, ow) = conv.output_size(7, 6);
        assert_eq!((y.height, y.width), (oh, ow));
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                let wi = ((o * 2 + c) * 3 + ky) * 3 + kx;
                                s += conv.weight[wi] * x.data[(c * 7 + iy as usize) * 6 + ix as usize];
                            }
                        }
                    }
                    assert!((s - y.data[(o * oh + oy) * ow + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = rand_map(&mut rng, 2, 6, 5);
        let (y, cache) = conv.forward(&x);
        let r = rand_map(&mut rng, y.channels, y.height, y.width);
        let mut g = conv.clone();
        g.zero();
        let dx = conv.backward(&cache, &r, Some(&mut g), true).unwrap();
        let f = |conv: &Conv2d, x: &FeatureMap| dot(&conv.forward(x).0.data, &r.data);
        let h = 1e-6;
        for i in [0, 7, 19, x.data.len() - 1] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (f(&conv, &xp) - f(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        for i in [0, 5, conv.weight.len() - 1] {
            let mut cp = conv.clone();
            cp.weight[i] += h;
            let mut cm = conv.clone();
            cm.weight[i] -= h;
            let fd = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
            assert!((fd - g.weight[i]).abs() < 1e-7);
        }
        let fd_b = {
            let mut cp = conv.clone();
            cp.bias[1] += h;
            let mut cm = conv.clone();
            cm.bias[1] -= h;
            (f(&cp, &x) - f(&cm, &x)) / (2.0 * h)
        };
        assert!((fd_b - g.bias[1]).abs() < 1e-7);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::new(5, 3, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = [0.3, -0.7, 1.1];
        let mut g = d.clone();
        g.zero();
        let dx = d.backward(&x, &r, Some(&mut g));
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (dot(&d.forward(&xp), &r) - dot(&d.forward(&xm), &r)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        assert!((g.weight[5 + 2] - r[1] * x[2]).abs() < 1e-12);
    }

    #[test]
    fn silu_and_resampling_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, 2, 3, 4);
        let y = rand_map(&mut rng, 2, 6, 8);
        let lhs = dot(&upsample2(&x).data, &y.data);
        let rhs = dot(&x.data, &upsample2_backward(&y).data);
        assert!((lhs - rhs).abs() < 1e-12);

        let pooled = global_avg_pool(&x);
        let r = [0.5, -2.0];
        let back = global_avg_pool_backward(&r, 3, 4);
        assert!((dot(&pooled, &r) - dot(&x.data, &back.data)).abs() < 1e-12);

        let v = [0.7];
        let h = 1e-6;
        let mut d = [1.0];
        silu_backward(&v, &mut d);
        let s = |z: f64| z * sigmoid(z);
        assert!((d[0] - (s(0.7 + h) - s(0.7 - h)) / (2.0 * h)).abs() < 1e-8);
    }

    #[test]
    fn flat_roundtrip_and_adam_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Dense::new(3, 1, &mut rng);
        let flat = d.flat();
        let mut other = Dense::new(3, 1, &mut rng);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, d);
        assert!(other.load_flat(&flat[1..]).is_err());

        let x = [1.0, -0.5, 0.25];
        let loss = |d: &Dense| (d.forward(&x)[0] - 2.0).powi(2);
        let start = loss(&d);
        let mut opt = Adam::new(0.05);
        for _ in 0..200 {
            let y = d.forward(&x)[0];
            let mut g = d.clone();
            g.zero();
            d.backward(&x, &[2.0 * (y - 2.0)], Some(&mut g));
            opt.step(&mut d, &g, 1.0);
        }
        assert!(loss(&d) < start * 1e-3);
    }
}
