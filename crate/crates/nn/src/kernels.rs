//! Raw kernels over channel-major `[C, N, H, W]` buffers.

use crate::scalar::{matmul, Mat};
use crate::Scalar;

/// Spatial geometry of a batch of feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn of(shape: &[usize]) -> Self {
        assert_eq!(shape.len(), 4, "expected [C, N, H, W], got {shape:?}");
        Self { c: shape[0], n: shape[1], h: shape[2], w: shape[3] }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Column range `[lo, hi)` of destination pixels whose source `x + d` is in bounds.
fn valid_span(w: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds `k×k` same-padded patches into `[C*k*k, N*H*W]`.
pub(crate) fn im2col<S: Scalar>(x: &[S], d: Dims, k: usize, cols: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = d.h * d.w;
    let plane = d.plane();
    debug_assert_eq!(cols.len(), d.c * k * k * plane);
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(d.w, dx);
                for img in 0..d.n {
                    let src = &x[(ci * d.n + img) * hw..][..hw];
                    for y in 0..d.h {
                        let drow = &mut dst[(img * d.h + y) * d.w..][..d.w];
                        let sy = y as isize + dy;
                        // An empty span means the kernel offset misses the row entirely.
                        if sy < 0 || sy >= d.h as isize || x0 == x1 {
                            drow.fill(S::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * d.w..][..d.w];
                        drow[..x0].fill(S::zero());
                        let s0 = (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        drow[x1..].fill(S::zero());
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C*k*k, N*H*W]` columns back, accumulating into `dx`.
pub(crate) fn col2im<S: Scalar>(cols: &[S], d: Dims, k: usize, dx: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = d.h * d.w;
    let plane = d.plane();
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                let (x0, x1) = valid_span(d.w, ddx);
                for img in 0..d.n {
                    let dst = &mut dx[(ci * d.n + img) * hw..][..hw];
                    for y in 0..d.h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= d.h as isize || x0 == x1 {
                            continue;
                        }
                        let crow = &src[(img * d.h + y) * d.w..][..d.w];
                        let drow = &mut dst[sy as usize * d.w..][..d.w];
                        let s0 = (x0 as isize + ddx) as usize;
                        for (o, &g) in drow[s0..s0 + (x1 - x0)].iter_mut().zip(&crow[x0..x1]) {
                            *o = *o + g;
                        }
                    }
                }
            }
        }
    }
}

/// `y[Co, P] = w[Co, K] * x[K, P] + b[Co]`.
pub(crate) fn affine_rows<S: Scalar>(w: &[S], b: &[S], x: &[S], co: usize, k: usize, p: usize) -> Vec<S> {
    let mut y: Vec<S> = b.iter().flat_map(|&bias| std::iter::repeat_n(bias, p)).collect();
    matmul(S::one(), w, 0, Mat::row_major(co, k), x, 0, Mat::row_major(k, p), S::one(), &mut y, 0, Mat::row_major(co, p));
    y
}

/// Gradients of [`affine_rows`]. Accumulates into `dw`, `db`; returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_rows_backward<S: Scalar>(
    w: &[S],
    x: &[S],
    dy: &[S],
    co: usize,
    k: usize,
    p: usize,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
    want_dx: bool,
) -> Option<Vec<S>> {
    if let Some(dw) = dw {
        matmul(S::one(), dy, 0, Mat::row_major(co, p), x, 0, Mat::row_major(k, p).t(), S::one(), dw, 0, Mat::row_major(co, k));
    }
    if let Some(db) = db {
        for (g, row) in db.iter_mut().zip(dy.chunks(p)) {
            *g = *g + row.iter().copied().sum::<S>();
        }
    }
    want_dx.then(|| {
        let mut dx = vec![S::zero(); k * p];
        matmul(S::one(), w, 0, Mat::row_major(co, k).t(), dy, 0, Mat::row_major(co, p), S::zero(), &mut dx, 0, Mat::row_major(k, p));
        dx
    })
}

/// Per-(image, group) statistics for group normalization.
pub(crate) struct GroupStats<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

pub(crate) fn group_norm<S: Scalar>(x: &[S], d: Dims, groups: usize, gamma: &[S], beta: &[S], eps: S) -> (Vec<S>, GroupStats<S>) {
    let hw = d.h * d.w;
    let cpg = d.c / groups;
    let count = S::from_usize(cpg * hw).unwrap();
    let mut y = vec![S::zero(); x.len()];
    let mut mean = vec![S::zero(); d.n * groups];
    let mut rstd = vec![S::zero(); d.n * groups];
    for img in 0..d.n {
        for g in 0..groups {
            let chans = g * cpg..(g + 1) * cpg;
            let mut sum = S::zero();
            for c in chans.clone() {
                sum = sum + x[(c * d.n + img) * hw..][..hw].iter().copied().sum::<S>();
            }
            let mu = sum / count;
            let mut var = S::zero();
            for c in chans.clone() {
                for &v in &x[(c * d.n + img) * hw..][..hw] {
                    var = var + (v - mu) * (v - mu);
                }
            }
            let r = S::one() / (var / count + eps).sqrt();
            mean[img * groups + g] = mu;
            rstd[img * groups + g] = r;
            for c in chans {
                let off = (c * d.n + img) * hw;
                let (ga, be) = (gamma[c], beta[c]);
                for (o, &v) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = (v - mu) * r * ga + be;
                }
            }
        }
    }
    (y, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    d: Dims,
    groups: usize,
    gamma: &[S],
    stats: &GroupStats<S>,
    dgamma: Option<&mut [S]>,
    dbeta: Option<&mut [S]>,
    want_dx: bool,
) -> Option<Vec<S>> {
    let hw = d.h * d.w;
    let cpg = d.c / groups;
    let count = S::from_usize(cpg * hw).unwrap();
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = want_dx.then(|| vec![S::zero(); x.len()]);
    for img in 0..d.n {
        for g in 0..groups {
            let mu = stats.mean[img * groups + g];
            let r = stats.rstd[img * groups + g];
            // Sums of dxhat and dxhat * xhat over the group.
            let mut s1 = S::zero();
            let mut s2 = S::zero();
            for c in g * cpg..(g + 1) * cpg {
                let off = (c * d.n + img) * hw;
                let mut gsum = S::zero();
                let mut bsum = S::zero();
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * r;
                    gsum = gsum + dy[i] * xhat;
                    bsum = bsum + dy[i];
                }
                if let Some(dg) = dgamma.as_deref_mut() {
                    dg[c] = dg[c] + gsum;
                }
                if let Some(db) = dbeta.as_deref_mut() {
                    db[c] = db[c] + bsum;
                }
                s1 = s1 + bsum * gamma[c];
                s2 = s2 + gsum * gamma[c];
            }
            if let Some(dx) = dx.as_mut() {
                let m1 = s1 / count;
                let m2 = s2 / count;
                for (c, &gc) in gamma.iter().enumerate().skip(g * cpg).take(cpg) {
                    let off = (c * d.n + img) * hw;
                    for i in off..off + hw {
                        let xhat = (x[i] - mu) * r;
                        dx[i] = r * (dy[i] * gc - m1 - xhat * m2);
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn avg_pool2<S: Scalar>(x: &[S], d: Dims) -> Vec<S> {
    let (ho, wo) = (d.h / 2, d.w / 2);
    let quarter = S::lit(0.25);
    let mut y = vec![S::zero(); d.c * d.n * ho * wo];
    for (p, out) in y.chunks_mut(ho * wo).enumerate() {
        let src = &x[p * d.h * d.w..][..d.h * d.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * d.w + 2 * ox;
                out[oy * wo + ox] = (src[i] + src[i + 1] + src[i + d.w] + src[i + d.w + 1]) * quarter;
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward<S: Scalar>(dy: &[S], d: Dims) -> Vec<S> {
    let (ho, wo) = (d.h / 2, d.w / 2);
    let quarter = S::lit(0.25);
    let mut dx = vec![S::zero(); d.c * d.n * d.h * d.w];
    for (p, g) in dy.chunks(ho * wo).enumerate() {
        let dst = &mut dx[p * d.h * d.w..][..d.h * d.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * quarter;
                let i = 2 * oy * d.w + 2 * ox;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + d.w] = v;
                dst[i + d.w + 1] = v;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling; `d` describes the input.
pub(crate) fn upsample2<S: Scalar>(x: &[S], d: Dims) -> Vec<S> {
    let (ho, wo) = (d.h * 2, d.w * 2);
    let mut y = vec![S::zero(); d.c * d.n * ho * wo];
    for (p, out) in y.chunks_mut(ho * wo).enumerate() {
        let src = &x[p * d.h * d.w..][..d.h * d.w];
        for oy in 0..ho {
            for ox in 0..wo {
                out[oy * wo + ox] = src[(oy / 2) * d.w + ox / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<S: Scalar>(dy: &[S], d: Dims) -> Vec<S> {
    let (ho, wo) = (d.h * 2, d.w * 2);
    let mut dx = vec![S::zero(); d.c * d.n * d.h * d.w];
    for (p, g) in dy.chunks(ho * wo).enumerate() {
        let dst = &mut dx[p * d.h * d.w..][..d.h * d.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = (oy / 2) * d.w + ox / 2;
                dst[i] = dst[i] + g[oy * wo + ox];
            }
        }
    }
    dx
}

/// Space-to-depth by 2: `[C, N, H, W] -> [4C, N, H/2, W/2]`, sub-pixel `(sy, sx)`
/// lands in channel `4c + 2sy + sx`. With `inverse`, performs depth-to-space.
/// In both directions `d` describes the full-resolution `[C, N, H, W]` side.
pub(crate) fn pixel_unshuffle<S: Scalar>(x: &[S], d: Dims, inverse: bool) -> Vec<S> {
    let (ho, wo) = (d.h / 2, d.w / 2);
    let mut y = vec![S::zero(); x.len()];
    for c in 0..d.c {
        for img in 0..d.n {
            for sy in 0..2 {
                for sx in 0..2 {
                    let oc = 4 * c + 2 * sy + sx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let fine = ((c * d.n + img) * d.h + 2 * oy + sy) * d.w + 2 * ox + sx;
                            let coarse = ((oc * d.n + img) * ho + oy) * wo + ox;
                            if inverse {
                                y[fine] = x[coarse];
                            } else {
                                y[coarse] = x[fine];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Multi-image scaled dot-product attention over `[C, N, L]` buffers.
/// Returns the output `[C, N, L]` and the row-softmax probabilities `[N, L, L]`.
pub(crate) fn attention<S: Scalar>(q: &[S], k: &[S], v: &[S], c: usize, n: usize, l: usize) -> (Vec<S>, Vec<S>) {
    let scale = S::one() / S::from_usize(c).unwrap().sqrt();
    let ch = Mat { rows: c, cols: l, rs: (n * l) as isize, cs: 1 };
    let sq = Mat::row_major(l, l);
    let mut out = vec![S::zero(); c * n * l];
    let mut probs = vec![S::zero(); n * l * l];
    for img in 0..n {
        let off = img * l;
        let p = &mut probs[img * l * l..][..l * l];
        matmul(scale, q, off, ch.t(), k, off, ch, S::zero(), p, 0, sq);
        for row in p.chunks_mut(l) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        matmul(S::one(), v, off, ch, p, 0, sq.t(), S::zero(), &mut out, off, ch);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for [`attention`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    c: usize,
    n: usize,
    l: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let scale = S::one() / S::from_usize(c).unwrap().sqrt();
    let ch = Mat { rows: c, cols: l, rs: (n * l) as isize, cs: 1 };
    let sq = Mat::row_major(l, l);
    let mut dq = vec![S::zero(); c * n * l];
    let mut dk = vec![S::zero(); c * n * l];
    let mut dv = vec![S::zero(); c * n * l];
    let mut ds = vec![S::zero(); l * l];
    for img in 0..n {
        let off = img * l;
        let p = &probs[img * l * l..][..l * l];
        matmul(S::one(), dout, off, ch, p, 0, sq, S::zero(), &mut dv, off, ch);
        matmul(S::one(), dout, off, ch.t(), v, off, ch, S::zero(), &mut ds, 0, sq);
        for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
            let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<S>();
            for (g, &pv) in drow.iter_mut().zip(prow) {
                *g = pv * (*g - dot);
            }
        }
        matmul(scale, k, off, ch, &ds, 0, sq.t(), S::zero(), &mut dq, off, ch);
        matmul(scale, q, off, ch, &ds, 0, sq, S::zero(), &mut dk, off, ch);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], d: Dims, w: &[f64], co: usize, k: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; co * d.n * d.h * d.w];
        for o in 0..co {
            for img in 0..d.n {
                for yy in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = 0.0;
                        for ci in 0..d.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    let xv = x[((ci * d.n + img) * d.h + sy as usize) * d.w + sx as usize];
                                    acc += xv * w[((o * d.c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        y[((o * d.n + img) * d.h + yy) * d.w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let d = Dims { c: 3, n: 2, h: 5, w: 4 };
        let x: Vec<f64> = (0..d.c * d.plane()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let co = 2;
        let w: Vec<f64> = (0..co * d.c * 9).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let mut cols = vec![0.0; d.c * 9 * d.plane()];
        im2col(&x, d, 3, &mut cols);
        let y = affine_rows(&w, &[0.0, 0.0], &cols, co, d.c * 9, d.plane());
        assert_eq!(y, naive_conv(&x, d, &w, co, 3));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let d = Dims { c: 2, n: 2, h: 3, w: 5 };
        let x: Vec<f64> = (0..d.c * d.plane()).map(|i| (i as f64).sin()).collect();
        let r: Vec<f64> = (0..d.c * 9 * d.plane()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; r.len()];
        im2col(&x, d, 3, &mut cols);
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&r, d, 3, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pixel_shuffle_round_trips() {
        let d = Dims { c: 2, n: 3, h: 4, w: 6 };
        let x: Vec<f32> = (0..d.c * d.plane()).map(|i| i as f32).collect();
        let down = pixel_unshuffle(&x, d, false);
        let back = pixel_unshuffle(&down, d, true);
        assert_eq!(back, x);
    }

    #[test]
    fn attention_rows_are_probabilities() {
        let (c, n, l) = (4, 2, 5);
        let q: Vec<f64> = (0..c * n * l).map(|i| (i as f64 * 0.3).sin()).collect();
        let k: Vec<f64> = (0..c * n * l).map(|i| (i as f64 * 0.5).cos()).collect();
        let (_, p) = attention(&q, &k, &q, c, n, l);
        for row in p.chunks(l) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
