//! Dense tensors and the small set of layer primitives the networks need.

use crate::real::Real;

/// Row-major n-d tensor. Used for weights and generic payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// A channel-major (C×H×W) feature map for a single view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add(&self, other: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(self.data.len(), other.data.len());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        FeatureMap::from_vec(self.channels, self.height, self.width, data)
    }

    /// Stack along the channel axis.
    pub fn concat(parts: &[&FeatureMap<T>]) -> FeatureMap<T> {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            assert_eq!((p.height, p.width), (h, w));
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        FeatureMap::from_vec(channels, h, w, data)
    }

    pub fn crop(&self, height: usize, width: usize) -> FeatureMap<T> {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let i = out.idx(c, y, x);
                    out.data[i] = self.at(c, y, x);
                }
            }
        }
        out
    }

    /// Pad on the bottom/right by edge replication.
    pub fn pad_edge(&self, height: usize, width: usize) -> FeatureMap<T> {
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let i = out.idx(c, y, x);
                    out.data[i] = self.at(c, y.min(self.height - 1), x.min(self.width - 1));
                }
            }
        }
        out
    }
}

pub fn leaky_relu<T: Real>(x: T, slope: f64) -> T {
    if x.value() > 0.0 {
        x
    } else {
        x * slope
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * x.sigmoid()
}

pub const LEAKY_SLOPE: f64 = 0.01;
const NORM_EPS: f64 = 1e-5;

pub fn leaky_relu_map<T: Real>(f: &mut FeatureMap<T>) {
    for v in f.data.iter_mut() {
        *v = leaky_relu(*v, LEAKY_SLOPE);
    }
}

/// Per-channel zero-mean, unit-variance normalization with no running statistics.
pub fn instance_norm<T: Real>(f: &mut FeatureMap<T>) {
    let hw = f.height * f.width;
    let inv_n = 1.0 / hw as f64;
    for c in 0..f.channels {
        let plane = &mut f.data[c * hw..(c + 1) * hw];
        let mut mean = T::zero();
        for &v in plane.iter() {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in plane.iter() {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let inv_std = T::from_f64(1.0) / (var + T::from_f64(NORM_EPS)).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
    }
}

/// Normalize each row of a row-major `rows × dim` matrix (layer norm without affine).
pub fn layer_norm_rows<T: Real>(x: &[T], dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let inv_n = 1.0 / dim as f64;
    for row in x.chunks(dim) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let inv_std = T::from_f64(1.0) / (var + T::from_f64(NORM_EPS)).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv_std));
    }
    out
}

/// 2-D convolution with square kernels and "same"-style padding `k/2`.
///
/// `weight` has shape `[out, in, k, k]`; `bias`, when given, has shape `[out]`.
pub fn conv2d<T: Real>(
    input: &FeatureMap<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> FeatureMap<T> {
    let (co, ci, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    assert_eq!(weight.shape[3], k);
    assert_eq!(ci, input.channels, "conv input channels");
    let pad = k / 2;
    let (h, w) = (input.height, input.width);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let p = ho * wo;
    let rows = ci * k * k;

    let mut out = vec![T::zero(); co * p];
    if k == 1 && stride == 1 {
        T::gemm(co, ci, p, &weight.data, &input.data, &mut out);
    } else {
        let mut col = vec![T::zero(); rows * p];
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut col[r * p..(r + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &input.data[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        T::gemm(co, rows, p, &weight.data, &col, &mut out);
    }
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(p).enumerate() {
            let bc = b.data[c];
            for v in chunk {
                *v += bc;
            }
        }
    }
    FeatureMap::from_vec(co, ho, wo, out)
}

/// Bilinear resize with half-pixel centers (align-corners off), edge clamped.
pub fn resize_bilinear<T: Real>(input: &FeatureMap<T>, height: usize, width: usize) -> FeatureMap<T> {
    let (h, w) = (input.height, input.width);
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..height).map(|y| taps(y, sy, h)).collect();
    let xs: Vec<_> = (0..width).map(|x| taps(x, sx, w)).collect();
    let mut out = FeatureMap::zeros(input.channels, height, width);
    for c in 0..input.channels {
        let plane = input.plane(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                let i = out.idx(c, oy, ox);
                out.data[i] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2<T: Real>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (input.height * 2, input.width * 2);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                let i = out.idx(c, y, x);
                out.data[i] = input.at(c, y / 2, x / 2);
            }
        }
    }
    out
}

/// Mean over non-overlapping `factor×factor` blocks.
pub fn avg_pool<T: Real>(input: &FeatureMap<T>, factor: usize) -> FeatureMap<T> {
    let (h, w) = (input.height / factor, input.width / factor);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    let inv = 1.0 / (factor * factor) as f64;
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += input.at(c, y * factor + dy, x * factor + dx);
                    }
                }
                let i = out.idx(c, y, x);
                out.data[i] = acc * inv;
            }
        }
    }
    out
}

/// Transpose a row-major `rows × cols` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &FeatureMap<f64>, w: &Tensor<f64>, stride: usize) -> FeatureMap<f64> {
        let (co, ci, k) = (w.shape[0], w.shape[1], w.shape[2]);
        let pad = (k / 2) as isize;
        let ho = (input.height + 2 * (k / 2) - k) / stride + 1;
        let wo = (input.width + 2 * (k / 2) - k) / stride + 1;
        let mut out = FeatureMap::zeros(co, ho, wo);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < input.height && (ix as usize) < input.width {
                                    acc += w.data[((o * ci + c) * k + ky) * k + kx]
                                        * input.at(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let i = out.idx(o, oy, ox);
                    out.data[i] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let input = FeatureMap::from_vec(2, 5, 7, (0..70).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect());
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|i| ((i * 13) % 7) as f64 * 0.2 - 0.6).collect());
        for stride in [1, 2] {
            let got = conv2d(&input, &w, None, stride);
            let want = naive_conv(&input, &w, stride);
            assert_eq!((got.height, got.width), (want.height, want.width));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let f = FeatureMap::from_vec(1, 3, 4, (0..12).map(|i| i as f64).collect());
        assert_eq!(resize_bilinear(&f, 3, 4), f);
    }

    #[test]
    fn resize_preserves_constants_and_convexity() {
        let f = FeatureMap::from_vec(1, 2, 2, vec![0.25, 0.25, 0.25, 0.25]);
        let up = resize_bilinear(&f, 8, 8);
        assert!(up.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn instance_norm_of_constant_is_zero() {
        let mut f = FeatureMap::from_vec(1, 2, 2, vec![3.0; 4]);
        instance_norm(&mut f);
        assert!(f.data.iter().all(|&v| v == 0.0));
    }
}
