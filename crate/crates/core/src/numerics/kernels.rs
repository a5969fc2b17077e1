//! Raw slice kernels behind the tape ops. Shapes are validated by the caller.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `[C*kh*kw, B*Ho*Wo]` patch matrix.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = g.col_cols();
    let mut cols = vec![S::zero(); g.col_rows() * ncol];
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[(b * oh + oy) * ow..][..ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = g.col_cols();
    let mut x = vec![S::zero(); g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        let srow = &src[(b * oh + oy) * ow..][..ow];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, B*P]` -> `[B, O, P]`.
fn unfold_batch<S: Scalar>(src: &[S], o: usize, b: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for oc in 0..o {
        for bi in 0..b {
            out[(bi * o + oc) * p..][..p].copy_from_slice(&src[oc * b * p + bi * p..][..p]);
        }
    }
    out
}

/// `[B, O, P]` -> `[O, B*P]`.
fn fold_batch<S: Scalar>(src: &[S], o: usize, b: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for oc in 0..o {
        for bi in 0..b {
            out[oc * b * p + bi * p..][..p].copy_from_slice(&src[(bi * o + oc) * p..][..p]);
        }
    }
    out
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S]) -> Vec<S> {
    let p = g.out_h() * g.out_w();
    let k = g.col_rows();
    let n = g.col_cols();
    let y = if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        // 1x1 convolutions are a per-image matmul; skip the patch copy.
        let mut y = vec![S::zero(); g.batch * g.out_ch * p];
        for b in 0..g.batch {
            S::gemm(
                false,
                false,
                g.out_ch,
                p,
                k,
                S::one(),
                w,
                &x[b * k * p..][..k * p],
                S::zero(),
                &mut y[b * g.out_ch * p..][..g.out_ch * p],
            );
        }
        return y;
    } else {
        let cols = im2col(g, x);
        let mut y = vec![S::zero(); g.out_ch * n];
        S::gemm(false, false, g.out_ch, n, k, S::one(), w, &cols, S::zero(), &mut y);
        y
    };
    unfold_batch(&y, g.out_ch, g.batch, p)
}

/// Returns `(dx, dw)` for upstream gradient `dy` of shape `[B, O, Ho, Wo]`.
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dy: &[S],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let p = g.out_h() * g.out_w();
    let k = g.col_rows();
    let n = g.col_cols();
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        let mut dx = need_dx.then(|| vec![S::zero(); x.len()]);
        let mut dw = need_dw.then(|| vec![S::zero(); w.len()]);
        for b in 0..g.batch {
            let dyb = &dy[b * g.out_ch * p..][..g.out_ch * p];
            if let Some(dx) = dx.as_mut() {
                S::gemm(true, false, k, p, g.out_ch, S::one(), w, dyb, S::zero(), &mut dx[b * k * p..][..k * p]);
            }
            if let Some(dw) = dw.as_mut() {
                S::gemm(false, true, g.out_ch, k, p, S::one(), dyb, &x[b * k * p..][..k * p], S::one(), dw);
            }
        }
        return (dx, dw);
    }
    let dyf = fold_batch(dy, g.out_ch, g.batch, p);
    let dw = need_dw.then(|| {
        let cols = im2col(g, x);
        let mut dw = vec![S::zero(); w.len()];
        S::gemm(false, true, g.out_ch, k, n, S::one(), &dyf, &cols, S::zero(), &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![S::zero(); k * n];
        S::gemm(true, false, k, n, g.out_ch, S::one(), w, &dyf, S::zero(), &mut dcols);
        col2im(g, &dcols)
    });
    (dx, dw)
}

/// Per-(batch, group) statistics saved for the backward pass.
pub struct NormStats<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

/// Group normalisation over `[B, C, R]` with per-channel affine.
pub fn group_norm_forward<S: Scalar>(
    x: &[S],
    b: usize,
    c: usize,
    r: usize,
    groups: usize,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, NormStats<S>) {
    let cg = c / groups;
    let n = S::of((cg * r) as f64);
    let mut y = vec![S::zero(); x.len()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cg) * r;
            let seg = &x[off..off + cg * r];
            let mu = seg.iter().copied().sum::<S>() / n;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for j in 0..r {
                    let idx = off + ci * r + j;
                    y[idx] = (x[idx] - mu) * rs * gamma[ch] + beta[ch];
                }
            }
            mean.push(mu);
            rstd.push(rs);
        }
    }
    (y, NormStats { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    b: usize,
    c: usize,
    r: usize,
    groups: usize,
    gamma: &[S],
    stats: &NormStats<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let cg = c / groups;
    let n = S::of((cg * r) as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for bi in 0..b {
        for gi in 0..groups {
            let k = bi * groups + gi;
            let (mu, rs) = (stats.mean[k], stats.rstd[k]);
            let off = (bi * c + gi * cg) * r;
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for j in 0..r {
                    let idx = off + ci * r + j;
                    let xhat = (x[idx] - mu) * rs;
                    dgamma[ch] += dy[idx] * xhat;
                    dbeta[ch] += dy[idx];
                    let dxhat = dy[idx] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for j in 0..r {
                    let idx = off + ci * r + j;
                    let xhat = (x[idx] - mu) * rs;
                    let dxhat = dy[idx] * gamma[ch];
                    dx[idx] = rs / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax over rows of length `m`. `mask[g * m + j] == false` zeroes key `j`
/// for every row in group `g`, where rows are split evenly into groups.
pub fn softmax_forward<S: Scalar>(x: &[S], m: usize, mask: Option<&[bool]>) -> Vec<S> {
    let rows = x.len() / m;
    let groups = mask.map(|mk| mk.len() / m).unwrap_or(1);
    let per_group = rows / groups;
    let mut y = vec![S::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * m..(r + 1) * m];
        let keep = |j: usize| mask.map_or(true, |mk| mk[(r / per_group) * m + j]);
        let mx = (0..m)
            .filter(|&j| keep(j))
            .fold(S::neg_infinity(), |a, j| a.max(row[j]));
        let out = &mut y[r * m..(r + 1) * m];
        let mut z = S::zero();
        for j in 0..m {
            if keep(j) {
                out[j] = (row[j] - mx).exp();
                z += out[j];
            }
        }
        for v in out.iter_mut() {
            *v /= z;
        }
    }
    y
}

pub fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], m: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(m).zip(dy.chunks(m)).zip(dx.chunks_mut(m)) {
        let dot: S = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for j in 0..m {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// Nearest-neighbour upsampling of `[N, H, W]` planes by an integer factor.
pub fn upsample_nearest<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, f: usize) -> Vec<S> {
    let (oh, ow) = (h * f, w * f);
    let mut y = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut y[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / f) * w + ox / f];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward<S: Scalar>(
    dy: &[S],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<S> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / f) * w + ox / f] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let inner = rank - 1;
    let (inner_len, inner_stride) = (out_shape[inner], strides[inner]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(x[base + j * inner_stride]);
        }
        // advance the outer index (all axes except the innermost)
        let mut ax = inner;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let x: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let y = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_inverse_roundtrip() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(|v| v as f64).collect();
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &shape, &perm);
        let yshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let back = permute(&y, &yshape, &inverse_perm(&perm));
        assert_eq!(back, x);
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let x = vec![1.0f32, 2.0, 3.0, 0.5, 0.5, 9.0];
        let mask = vec![true, true, false];
        let y = softmax_forward(&x, 3, Some(&mask));
        assert_eq!(y[2], 0.0);
        assert_eq!(y[5], 0.0);
        assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
        assert!((y[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let dy = vec![1.0f32; 16];
        assert_eq!(upsample_nearest_backward(&dy, 1, 2, 2, 2), vec![4.0; 4]);
    }
}
