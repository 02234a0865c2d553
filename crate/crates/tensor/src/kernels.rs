//! Slice-level numeric kernels shared by the autodiff graph and the
//! cache-backed inference path. Both routes must call the same kernels so
//! that their results agree bit for bit.

use crate::error::{invalid, Result};
use crate::float::Float;

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `start..start + len` of a row-major matrix with `stride` columns.
    pub fn col_block(data: &'a [T], rows: usize, stride: usize, start: usize, len: usize) -> Self {
        Self {
            data: &data[start.min(data.len())..],
            rows,
            cols: len,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Destination for [`gemm`]: `rows x cols` with the given strides.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn col_block(
        data: &'a mut [T],
        rows: usize,
        stride: usize,
        start: usize,
        len: usize,
    ) -> Self {
        let start = start.min(data.len());
        Self {
            data: &mut data[start..],
            rows,
            cols: len,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
///
/// Each output element is accumulated over the shared dimension in the same
/// order regardless of how many rows `a` has, which is what makes cached and
/// recomputed attention agree exactly.
pub fn gemm<T: Float>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: MatMut<'_, T>, alpha: T, beta: T) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.rows, a.rows, "gemm output rows");
    assert_eq!(c.cols, b.cols, "gemm output cols");
    assert!(a.span() <= a.data.len(), "gemm lhs out of bounds");
    assert!(b.span() <= b.data.len(), "gemm rhs out of bounds");
    let c_span = if c.rows == 0 || c.cols == 0 {
        0
    } else {
        (c.rows - 1) * c.rs + (c.cols - 1) * c.cs + 1
    };
    assert!(c_span <= c.data.len(), "gemm output out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: spans were checked above and `c` is a unique borrow, so it
    // cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major `[m,k] x [k,n]` into a fresh buffer.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        MatRef::row_major(a, m, k),
        MatRef::row_major(b, k, n),
        MatMut::row_major(&mut out, m, n),
        T::one(),
        T::zero(),
    );
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row of `x` (`rows x n`). Returns the per-row mean and
/// reciprocal standard deviation for the backward pass.
pub fn layer_norm_forward<T: Float>(
    x: &[T],
    n: usize,
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let inv_n = T::lit(1.0 / n as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = xr.iter().copied().sum::<T>() * inv_n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, (y, &v)) in yr.iter_mut().zip(xr).enumerate() {
            let mut z = (v - mean) * rstd;
            if let Some(g) = gamma {
                z *= g[j];
            }
            if let Some(b) = beta {
                z += b[j];
            }
            *y = z;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Float>(
    x: &[T],
    n: usize,
    gamma: Option<&[T]>,
    means: &[T],
    rstds: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let inv_n = T::lit(1.0 / n as f64);
    let mut dx = dx;
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for (r, (xr, dyr)) in x.chunks_exact(n).zip(dy.chunks_exact(n)).enumerate() {
        let (mean, rstd) = (means[r], rstds[r]);
        for j in 0..n {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = match gamma {
                Some(g) => dyr[j] * g[j],
                None => dyr[j],
            };
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..n {
                dg[j] += dyr[j] * xhat[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..n {
                db[j] += dyr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let m1 = dxhat.iter().copied().sum::<T>() * inv_n;
            let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
            let dxr = &mut dx[r * n..(r + 1) * n];
            for j in 0..n {
                dxr[j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
}

/// In-place softmax of one row; entries with `allow[j] == false` become 0.
pub fn softmax_row<T: Float>(row: &mut [T], allow: Option<&[bool]>) {
    let ok = |j: usize| allow.is_none_or(|a| a[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dx = p * (dy - <dy, p>)` for one softmax row, accumulated into `dx`.
pub fn softmax_row_backward<T: Float>(p: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = p.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &pj), &gj) in dx.iter_mut().zip(p).zip(dy) {
        *d += pj * (gj - dot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through one exponential; several times cheaper than the libm call.
#[inline]
pub fn tanh<T: Float>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// One output sample of a half-pixel-center linear resampler:
/// `out[o] = in[i0] + frac * (in[i1] - in[i0])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

/// Sampling taps for resizing an axis of length `src` to length `dst`
/// (no corner alignment, source coordinates clamped to the valid range).
pub fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear resize of a `C x h x w` buffer to `C x h2 x w2`.
pub fn resize_forward<T: Float>(
    x: &[T],
    c: usize,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
) -> Result<Vec<T>> {
    if h == 0 || w == 0 || h2 == 0 || w2 == 0 {
        return Err(invalid(format!(
            "resize needs positive extents, got {h}x{w} -> {h2}x{w2}"
        )));
    }
    let tx = linear_taps(w, w2);
    let ty = linear_taps(h, h2);
    let mut tmp = vec![T::zero(); c * h * w2];
    for ch in 0..c {
        for r in 0..h {
            let src = &x[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst = &mut tmp[(ch * h + r) * w2..(ch * h + r + 1) * w2];
            for (d, t) in dst.iter_mut().zip(&tx) {
                let (a, b) = (src[t.i0], src[t.i1]);
                *d = a + T::lit(t.frac) * (b - a);
            }
        }
    }
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for (r, t) in ty.iter().enumerate() {
            let a = &tmp[(ch * h + t.i0) * w2..(ch * h + t.i0 + 1) * w2];
            let b = &tmp[(ch * h + t.i1) * w2..(ch * h + t.i1 + 1) * w2];
            let f = T::lit(t.frac);
            let dst = &mut out[(ch * h2 + r) * w2..(ch * h2 + r + 1) * w2];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = av + f * (bv - av);
            }
        }
    }
    Ok(out)
}

/// Transpose of [`resize_forward`]; accumulates into `dx`.
pub fn resize_backward<T: Float>(
    dy: &[T],
    c: usize,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
    dx: &mut [T],
) {
    let tx = linear_taps(w, w2);
    let ty = linear_taps(h, h2);
    let mut dtmp = vec![T::zero(); c * h * w2];
    for ch in 0..c {
        for (r, t) in ty.iter().enumerate() {
            let f = T::lit(t.frac);
            let g = &dy[(ch * h2 + r) * w2..(ch * h2 + r + 1) * w2];
            for (j, &gv) in g.iter().enumerate() {
                dtmp[(ch * h + t.i0) * w2 + j] += (T::one() - f) * gv;
                dtmp[(ch * h + t.i1) * w2 + j] += f * gv;
            }
        }
    }
    for ch in 0..c {
        for r in 0..h {
            let g = &dtmp[(ch * h + r) * w2..(ch * h + r + 1) * w2];
            let row = (ch * h + r) * w;
            for (t, &gv) in tx.iter().zip(g) {
                let f = T::lit(t.frac);
                dx[row + t.i0] += (T::one() - f) * gv;
                dx[row + t.i1] += f * gv;
            }
        }
    }
}

/// Boolean attention mask: `allow[t * cols + s]` lets query `t` see key `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.allow[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, s: usize) -> bool {
        self.allow[t * self.cols + s]
    }
}

/// Shapes for a multi-head attention call over row-major `[len, dim]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub lq: usize,
    pub lk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn scale<T: Float>(&self) -> T {
        T::lit(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// Scaled dot-product attention, all heads. Writes `[lq, dim]` into `out`
/// and the `heads x lq x lk` probabilities into `probs`.
pub fn attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
    mask: Option<&AttnMask>,
    out: &mut [T],
    probs: &mut [T],
) {
    let dh = s.head_dim();
    let scale = s.scale::<T>();
    for h in 0..s.heads {
        let p = &mut probs[h * s.lq * s.lk..(h + 1) * s.lq * s.lk];
        gemm(
            MatRef::col_block(q, s.lq, s.dim, h * dh, dh),
            MatRef::col_block(k, s.lk, s.dim, h * dh, dh).t(),
            MatMut::row_major(p, s.lq, s.lk),
            scale,
            T::zero(),
        );
        for t in 0..s.lq {
            softmax_row(&mut p[t * s.lk..(t + 1) * s.lk], mask.map(|m| m.row(t)));
        }
        gemm(
            MatRef::row_major(p, s.lq, s.lk),
            MatRef::col_block(v, s.lk, s.dim, h * dh, dh),
            MatMut::col_block(out, s.lq, s.dim, h * dh, dh),
            T::one(),
            T::zero(),
        );
    }
}

/// Gradients of [`attention_forward`], accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = s.head_dim();
    let scale = s.scale::<T>();
    let mut dp = vec![T::zero(); s.lq * s.lk];
    let mut ds = vec![T::zero(); s.lq * s.lk];
    for h in 0..s.heads {
        let p = &probs[h * s.lq * s.lk..(h + 1) * s.lq * s.lk];
        gemm(
            MatRef::col_block(dout, s.lq, s.dim, h * dh, dh),
            MatRef::col_block(v, s.lk, s.dim, h * dh, dh).t(),
            MatMut::row_major(&mut dp, s.lq, s.lk),
            T::one(),
            T::zero(),
        );
        ds.fill(T::zero());
        for t in 0..s.lq {
            let r = t * s.lk..(t + 1) * s.lk;
            softmax_row_backward(&p[r.clone()], &dp[r.clone()], &mut ds[r]);
        }
        gemm(
            MatRef::row_major(&ds, s.lq, s.lk),
            MatRef::col_block(k, s.lk, s.dim, h * dh, dh),
            MatMut::col_block(dq, s.lq, s.dim, h * dh, dh),
            scale,
            T::one(),
        );
        gemm(
            MatRef::row_major(&ds, s.lq, s.lk).t(),
            MatRef::col_block(q, s.lq, s.dim, h * dh, dh),
            MatMut::col_block(dk, s.lk, s.dim, h * dh, dh),
            scale,
            T::one(),
        );
        gemm(
            MatRef::row_major(p, s.lq, s.lk).t(),
            MatRef::col_block(dout, s.lq, s.dim, h * dh, dh),
            MatMut::col_block(dv, s.lk, s.dim, h * dh, dh),
            T::one(),
            T::one(),
        );
    }
}

/// Attention over consecutive query blocks where block `b` (rows
/// `ends[b-1]..ends[b]`) sees exactly the keys `0..ends[b]`. Each block is
/// computed on its own key prefix, so its result never depends on later
/// rows. `q, k, v` are `[ends.last(), dim]`; returns the concatenated
/// per-block probabilities.
pub fn block_attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    heads: usize,
    ends: &[usize],
    out: &mut [T],
) -> Vec<T> {
    let mut probs = Vec::new();
    let mut start = 0;
    for &end in ends {
        let s = AttnShape {
            lq: end - start,
            lk: end,
            dim,
            heads,
        };
        let mut p = vec![T::zero(); heads * s.lq * s.lk];
        attention_forward(
            &q[start * dim..end * dim],
            &k[..end * dim],
            &v[..end * dim],
            s,
            None,
            &mut out[start * dim..end * dim],
            &mut p,
        );
        probs.extend_from_slice(&p);
        start = end;
    }
    probs
}

/// Gradients of [`block_attention_forward`], accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn block_attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    heads: usize,
    ends: &[usize],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (mut start, mut off) = (0, 0);
    for &end in ends {
        let s = AttnShape {
            lq: end - start,
            lk: end,
            dim,
            heads,
        };
        let n = heads * s.lq * s.lk;
        attention_backward(
            &q[start * dim..end * dim],
            &k[..end * dim],
            &v[..end * dim],
            s,
            &probs[off..off + n],
            &dout[start * dim..end * dim],
            &mut dq[start * dim..end * dim],
            &mut dk[..end * dim],
            &mut dv[..end * dim],
        );
        off += n;
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_has_zero_fraction() {
        for t in linear_taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.i0, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
    }

    #[test]
    fn gemm_matches_naive_with_strides() {
        let a: Vec<f64> = (0..12).map(|x| x as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        // a is 3x4, b is 4x3
        let c = matmul(&a, &b, 3, 4, 3);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|p| a[i * 4 + p] * b[p * 3 + j]).sum();
                assert!((c[i * 3 + j] - want).abs() < 1e-12);
            }
        }
        // a^T (4x3) times a (3x4)
        let mut out = vec![0.0; 16];
        gemm(
            MatRef::row_major(&a, 3, 4).t(),
            MatRef::row_major(&a, 3, 4),
            MatMut::row_major(&mut out, 4, 4),
            1.0,
            0.0,
        );
        for i in 0..4 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[p * 4 + i] * a[p * 4 + j]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_blocked_entries() {
        let mut row = [1.0f64, 2.0, 3.0];
        softmax_row(&mut row, Some(&[true, false, true]));
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gemm_rows_do_not_depend_on_row_count() {
        let k = 300;
        let n = 37;
        let a: Vec<f32> = (0..40 * k).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729) % 97) as f32 / 48.0 - 1.0).collect();
        let full = matmul(&a, &b, 40, k, n);
        let tail = matmul(&a[33 * k..], &b, 7, k, n);
        assert_eq!(&full[33 * n..], &tail[..]);
    }
}
