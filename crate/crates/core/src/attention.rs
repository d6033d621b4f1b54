//! Camera-aware attention.
//!
//! Every token `t` carries a block-diagonal transform
//! `G_t = diag(I_{d/8} ⊗ P_view(t), RoPE(x_t), RoPE(y_t))`. Queries are
//! mapped by `G_tᵀ` and keys/values by `G_u⁻¹`, so the attention logits
//! `q_tᵀ G_t G_u⁻¹ k_u` only see the relative camera transform between the
//! two tokens' views and their relative grid offset.

use nalgebra::{DMatrix, Matrix4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{build_projective, CameraView, ProjectiveMatrix};
use crate::real::Real;

pub const ROPE_BASE: f64 = 10_000.0;

/// Dense `dim×dim` rotary embedding: 2×2 rotations by `position·base^(−2k/dim)`.
pub fn rope_matrix(position: f64, dim: usize, base: f64) -> Result<DMatrix<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("rotary dimension must be even, got {dim}")));
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (k, (c, s)) in rope_angles(position, dim, base).into_iter().enumerate() {
        m[(2 * k, 2 * k)] = c;
        m[(2 * k, 2 * k + 1)] = -s;
        m[(2 * k + 1, 2 * k)] = s;
        m[(2 * k + 1, 2 * k + 1)] = c;
    }
    Ok(m)
}

fn rope_angles(position: f64, dim: usize, base: f64) -> Vec<(f64, f64)> {
    (0..dim / 2)
        .map(|k| {
            let theta = position * base.powf(-2.0 * k as f64 / dim as f64);
            (theta.cos(), theta.sin())
        })
        .collect()
}

/// Structured per-token transform `G_t`. Only the 4×4 projective block and
/// the rotary angles are stored; [`TokenTransform::dense`] materializes `G_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTransform {
    dim: usize,
    proj: Matrix4<f64>,
    proj_inv: Matrix4<f64>,
    rope_x: Vec<(f64, f64)>,
    rope_y: Vec<(f64, f64)>,
}

pub fn build_token_transform(
    coords: (f64, f64),
    projective: &ProjectiveMatrix,
    dim: usize,
) -> Result<TokenTransform> {
    if dim == 0 || !dim.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be divisible by 8, got {dim}"
        )));
    }
    let inv = projective.inverse()?;
    Ok(TokenTransform {
        dim,
        proj: *projective.matrix(),
        proj_inv: *inv.matrix(),
        rope_x: rope_angles(coords.0, dim / 4, ROPE_BASE),
        rope_y: rope_angles(coords.1, dim / 4, ROPE_BASE),
    })
}

impl TokenTransform {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `out = G_tᵀ · v`
    pub fn apply_transpose<T: Real>(&self, v: &[T], out: &mut [T]) {
        let half = self.dim / 2;
        for b in 0..half / 4 {
            let o = 4 * b;
            for r in 0..4 {
                let mut acc = T::zero();
                for c in 0..4 {
                    acc += v[o + c] * self.proj[(c, r)];
                }
                out[o + r] = acc;
            }
        }
        self.rotate_back(v, out);
    }

    /// `out = G_t⁻¹ · v`
    pub fn apply_inverse<T: Real>(&self, v: &[T], out: &mut [T]) {
        let half = self.dim / 2;
        for b in 0..half / 4 {
            let o = 4 * b;
            for r in 0..4 {
                let mut acc = T::zero();
                for c in 0..4 {
                    acc += v[o + c] * self.proj_inv[(r, c)];
                }
                out[o + r] = acc;
            }
        }
        self.rotate_back(v, out);
    }

    // The rotary block is orthogonal, so its transpose and inverse coincide.
    fn rotate_back<T: Real>(&self, v: &[T], out: &mut [T]) {
        let half = self.dim / 2;
        let quarter = self.dim / 4;
        for (offset, table) in [(half, &self.rope_x), (half + quarter, &self.rope_y)] {
            for (k, &(c, s)) in table.iter().enumerate() {
                let i = offset + 2 * k;
                let (a, b) = (v[i], v[i + 1]);
                out[i] = a * c + b * s;
                out[i + 1] = b * c - a * s;
            }
        }
    }

    pub fn proj_block(&self) -> DMatrix<f64> {
        let half = self.dim / 2;
        let mut m = DMatrix::zeros(half, half);
        for b in 0..half / 4 {
            for r in 0..4 {
                for c in 0..4 {
                    m[(4 * b + r, 4 * b + c)] = self.proj[(r, c)];
                }
            }
        }
        m
    }

    pub fn rope_block(&self) -> DMatrix<f64> {
        let half = self.dim / 2;
        let quarter = self.dim / 4;
        let mut m = DMatrix::zeros(half, half);
        for (offset, table) in [(0, &self.rope_x), (quarter, &self.rope_y)] {
            for (k, &(c, s)) in table.iter().enumerate() {
                let i = offset + 2 * k;
                m[(i, i)] = c;
                m[(i, i + 1)] = -s;
                m[(i + 1, i)] = s;
                m[(i + 1, i + 1)] = c;
            }
        }
        m
    }

    /// The full `d×d` matrix `G_t`.
    pub fn dense(&self) -> DMatrix<f64> {
        let half = self.dim / 2;
        let mut g = DMatrix::zeros(self.dim, self.dim);
        g.view_mut((0, 0), (half, half)).copy_from(&self.proj_block());
        g.view_mut((half, half), (half, half)).copy_from(&self.rope_block());
        g
    }
}

/// Per-view embeddings laid out token-major: `[view][y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(views: usize, height: usize, width: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != views * height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "token grid {views}×{height}×{width}×{dim} vs {} values",
                data.len()
            )));
        }
        if !dim.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be divisible by 8, got {dim}"
            )));
        }
        Ok(TokenGrid {
            views,
            height,
            width,
            dim,
            data,
        })
    }

    pub fn tokens_per_view(&self) -> usize {
        self.height * self.width
    }

    pub fn token_index(&self, view: usize, y: usize, x: usize) -> usize {
        (view * self.height + y) * self.width + x
    }

    pub fn token(&self, index: usize) -> &[T] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    fn same_shape(&self, other: &TokenGrid<T>) -> bool {
        (self.views, self.height, self.width, self.dim)
            == (other.views, other.height, other.width, other.dim)
    }

    fn gather(&self, indices: &[usize]) -> Vec<T> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.token(i));
        }
        out
    }
}

/// Transforms for every token of an `N×H×W` grid, in grid order. Token
/// coordinates are the patch-grid indices `(x, y)`.
pub fn grid_transforms(
    cameras: &[CameraView],
    height: usize,
    width: usize,
    dim: usize,
) -> Result<Vec<TokenTransform>> {
    let mut out = Vec::with_capacity(cameras.len() * height * width);
    for cam in cameras {
        let p = build_projective(cam);
        for y in 0..height {
            for x in 0..width {
                out.push(build_token_transform((x as f64, y as f64), &p, dim)?);
            }
        }
    }
    Ok(out)
}

/// Attention outputs and (optionally) the row-stochastic weight matrix.
pub struct AttentionResult<T> {
    pub output: Vec<T>,
    pub weights: Vec<T>,
}

/// Attention of `queries` (each with its own transform) over `keys`/`values`
/// (sharing per-token transforms). Sequences are row-major `n×d`.
pub fn gta_cross_attention<T: Real>(
    queries: &[T],
    query_transforms: &[&TokenTransform],
    keys: &[T],
    values: &[T],
    key_transforms: &[&TokenTransform],
    dim: usize,
) -> Result<AttentionResult<T>> {
    let nq = queries.len() / dim;
    let nk = keys.len() / dim;
    if queries.len() != nq * dim
        || keys.len() != nk * dim
        || values.len() != keys.len()
        || query_transforms.len() != nq
        || key_transforms.len() != nk
    {
        return Err(Error::ShapeMismatch("attention sequence lengths disagree".into()));
    }
    if query_transforms.iter().chain(key_transforms).any(|t| t.dim != dim) {
        return Err(Error::ShapeMismatch("transform dimension differs from embedding".into()));
    }
    if !queries.iter().chain(keys).chain(values).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("attention inputs"));
    }
    if nk == 0 {
        return Err(Error::EmptyReduction("attention over zero keys"));
    }

    let mut qp = vec![T::zero(); nq * dim];
    for (t, tf) in query_transforms.iter().enumerate() {
        tf.apply_transpose(&queries[t * dim..(t + 1) * dim], &mut qp[t * dim..(t + 1) * dim]);
    }
    // Keys are stored transposed (d×nk) so the score product is a plain gemm.
    let mut kp = vec![T::zero(); nk * dim];
    let mut vp = vec![T::zero(); nk * dim];
    for (u, tf) in key_transforms.iter().enumerate() {
        tf.apply_inverse(&keys[u * dim..(u + 1) * dim], &mut kp[u * dim..(u + 1) * dim]);
        tf.apply_inverse(&values[u * dim..(u + 1) * dim], &mut vp[u * dim..(u + 1) * dim]);
    }
    let kpt = crate::tensor::transpose(&kp, nk, dim);

    let mut scores = vec![T::zero(); nq * nk];
    T::gemm(nq, dim, nk, &qp, &kpt, &mut scores);
    let scale = 1.0 / (dim as f64).sqrt();
    for row in scores.chunks_mut(nk) {
        softmax_in_place(row, scale);
    }
    let mut output = vec![T::zero(); nq * dim];
    T::gemm(nq, nk, dim, &scores, &vp, &mut output);
    Ok(AttentionResult {
        output,
        weights: scores,
    })
}

/// Self-attention form: queries, keys and values index the same tokens.
pub fn gta_attention<T: Real>(
    queries: &[T],
    keys: &[T],
    values: &[T],
    transforms: &[&TokenTransform],
    dim: usize,
) -> Result<AttentionResult<T>> {
    gta_cross_attention(queries, transforms, keys, values, transforms, dim)
}

fn softmax_in_place<T: Real>(row: &mut [T], scale: f64) {
    let max = row
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x * scale - T::from_f64(max * scale)).exp();
        sum += *x;
    }
    let inv = T::from_f64(1.0) / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Token indices of each (optionally shifted) window, per view.
///
/// A token at `(y, x)` sits at `((y − shift) mod H, (x − shift) mod W)` in the
/// shifted frame; windows tile that frame. When the extent is not a multiple
/// of the window, the last row/column of windows is smaller, which is the
/// same as padding with tokens that are masked out.
pub fn window_partition(
    views: usize,
    height: usize,
    width: usize,
    window: usize,
    shift: usize,
) -> Result<Vec<Vec<usize>>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window size must be positive".into()));
    }
    let extent = height.min(width);
    if window > extent {
        return Err(Error::WindowTooLarge { window, extent });
    }
    let wy_count = height.div_ceil(window);
    let wx_count = width.div_ceil(window);
    let mut windows = vec![Vec::new(); views * wy_count * wx_count];
    for v in 0..views {
        for ys in 0..height {
            let y = (ys + shift) % height;
            for xs in 0..width {
                let x = (xs + shift) % width;
                let w = (v * wy_count + ys / window) * wx_count + xs / window;
                windows[w].push((v * height + y) * width + x);
            }
        }
    }
    Ok(windows)
}

/// Shifted-window self-attention applied independently within each view.
pub fn windowed_attention<T: Real>(
    queries: &TokenGrid<T>,
    keys: &TokenGrid<T>,
    values: &TokenGrid<T>,
    transforms: &[TokenTransform],
    window: usize,
    shift: usize,
) -> Result<TokenGrid<T>> {
    if !queries.same_shape(keys) || !queries.same_shape(values) {
        return Err(Error::ShapeMismatch("q/k/v grids differ".into()));
    }
    if transforms.len() != queries.views * queries.tokens_per_view() {
        return Err(Error::ShapeMismatch("one transform per token required".into()));
    }
    let windows = window_partition(queries.views, queries.height, queries.width, window, shift)?;
    let dim = queries.dim;
    let results: Vec<Result<Vec<T>>> = windows
        .par_iter()
        .map(|idx| {
            let tf: Vec<&TokenTransform> = idx.iter().map(|&i| &transforms[i]).collect();
            let r = gta_attention(
                &queries.gather(idx),
                &keys.gather(idx),
                &values.gather(idx),
                &tf,
                dim,
            )?;
            Ok(r.output)
        })
        .collect();
    let mut out = vec![T::zero(); queries.data.len()];
    for (idx, res) in windows.iter().zip(results) {
        let res = res?;
        for (k, &i) in idx.iter().enumerate() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&res[k * dim..(k + 1) * dim]);
        }
    }
    TokenGrid::new(queries.views, queries.height, queries.width, dim, out)
}

/// Cross-view attention: the tokens of view `i` inside a window attend to the
/// tokens of every other view inside the same window. With a single view
/// there is nothing to attend to and the queries are returned unchanged.
pub fn cross_view_attention<T: Real>(
    queries: &TokenGrid<T>,
    keys: &TokenGrid<T>,
    values: &TokenGrid<T>,
    transforms: &[TokenTransform],
    window: usize,
) -> Result<TokenGrid<T>> {
    if !queries.same_shape(keys) || !queries.same_shape(values) {
        return Err(Error::ShapeMismatch("q/k/v grids differ".into()));
    }
    if transforms.len() != queries.views * queries.tokens_per_view() {
        return Err(Error::ShapeMismatch("one transform per token required".into()));
    }
    let views = queries.views;
    if views < 2 {
        return Ok(queries.clone());
    }
    let windows = window_partition(views, queries.height, queries.width, window, 0)?;
    let per_view = windows.len() / views;
    let dim = queries.dim;
    let jobs: Vec<(usize, usize)> = (0..views)
        .flat_map(|v| (0..per_view).map(move |w| (v, w)))
        .collect();
    let results: Vec<Result<Vec<T>>> = jobs
        .par_iter()
        .map(|&(v, w)| {
            let q_idx = &windows[v * per_view + w];
            let kv_idx: Vec<usize> = (0..views)
                .filter(|&o| o != v)
                .flat_map(|o| windows[o * per_view + w].iter().copied())
                .collect();
            let q_tf: Vec<&TokenTransform> = q_idx.iter().map(|&i| &transforms[i]).collect();
            let kv_tf: Vec<&TokenTransform> = kv_idx.iter().map(|&i| &transforms[i]).collect();
            let r = gta_cross_attention(
                &queries.gather(q_idx),
                &q_tf,
                &keys.gather(&kv_idx),
                &values.gather(&kv_idx),
                &kv_tf,
                dim,
            )?;
            Ok(r.output)
        })
        .collect();
    let mut out = vec![T::zero(); queries.data.len()];
    for (&(v, w), res) in jobs.iter().zip(results) {
        let res = res?;
        for (k, &i) in windows[v * per_view + w].iter().enumerate() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&res[k * dim..(k + 1) * dim]);
        }
    }
    TokenGrid::new(views, queries.height, queries.width, dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Rotation3, Vector3};

    fn camera(seed: f64) -> CameraView {
        CameraView::new(
            Matrix3::new(0.9 + 0.1 * seed, 0.0, 0.5, 0.0, 1.0, 0.45, 0.0, 0.0, 1.0),
            Rotation3::from_euler_angles(0.1 * seed, -0.2, 0.05 * seed).into_inner(),
            Vector3::new(0.2 * seed, -0.1, 1.0 + seed),
            32,
            32,
        )
        .unwrap()
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let m = rope_matrix(0.0, 8, ROPE_BASE).unwrap();
        assert_eq!(m, DMatrix::identity(8, 8));
    }

    #[test]
    fn rope_dim_two_is_plain_rotation() {
        let m = rope_matrix(1.0, 2, ROPE_BASE).unwrap();
        let (c, s) = (1f64.cos(), 1f64.sin());
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[c, -s, s, c]));
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(rope_matrix(1.0, 3, ROPE_BASE).is_err());
        assert!(rope_matrix(1.0, 0, ROPE_BASE).is_err());
    }

    #[test]
    fn token_transform_identity_case() {
        let t = build_token_transform((0.0, 0.0), &ProjectiveMatrix::identity(), 16).unwrap();
        assert_eq!(t.dense(), DMatrix::identity(16, 16));
    }

    #[test]
    fn token_transform_base_case_has_one_projective_copy() {
        let p = build_projective(&camera(1.0));
        let t = build_token_transform((3.0, 1.0), &p, 8).unwrap();
        let proj = t.proj_block();
        assert_eq!(proj.shape(), (4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(proj[(r, c)], p.matrix()[(r, c)]);
            }
        }
    }

    #[test]
    fn structured_application_matches_dense() {
        let p = build_projective(&camera(0.5));
        let t = build_token_transform((2.0, 5.0), &p, 16).unwrap();
        let g = t.dense();
        let g_inv = g.clone().try_inverse().unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).cos()).collect();
        let dv = nalgebra::DVector::from_vec(v.clone());
        let mut a = vec![0.0; 16];
        t.apply_transpose(&v, &mut a);
        let want = g.transpose() * &dv;
        assert!(a.iter().zip(want.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        t.apply_inverse(&v, &mut a);
        let want = g_inv * &dv;
        assert!(a.iter().zip(want.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn rope_block_is_orthogonal() {
        let t = build_token_transform((7.0, 11.0), &ProjectiveMatrix::identity(), 32).unwrap();
        let r = t.rope_block();
        let err = (r.transpose() * &r - DMatrix::identity(16, 16)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn singleton_attention_returns_value() {
        let t = build_token_transform((0.0, 0.0), &ProjectiveMatrix::identity(), 8).unwrap();
        let q = vec![0.3; 8];
        let k = vec![-0.1; 8];
        let v: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let r = gta_attention(&q, &k, &v, &[&t], 8).unwrap();
        assert_eq!(r.output, v);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn attention_rejects_non_finite() {
        let t = build_token_transform((0.0, 0.0), &ProjectiveMatrix::identity(), 8).unwrap();
        let mut q = vec![0.3; 8];
        q[2] = f64::NAN;
        let err = gta_attention(&q, &q.clone(), &q.clone(), &[&t], 8);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn partition_covers_every_token_once() {
        for (h, w, win, shift) in [(8, 8, 4, 2), (6, 9, 4, 2), (5, 5, 5, 0)] {
            let parts = window_partition(2, h, w, win, shift).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..2 * h * w).collect::<Vec<_>>());
        }
        assert!(matches!(
            window_partition(1, 4, 8, 5, 0),
            Err(Error::WindowTooLarge { window: 5, extent: 4 })
        ));
    }

    #[test]
    fn single_view_cross_attention_passes_through() {
        let g = TokenGrid::new(1, 2, 2, 8, (0..32).map(|i| i as f64).collect()).unwrap();
        let tf = grid_transforms(&[camera(0.0)], 2, 2, 8).unwrap();
        let out = cross_view_attention(&g, &g, &g, &tf, 2).unwrap();
        assert_eq!(out, g);
    }
}
