// Raw numeric kernels shared by the tape's forward and adjoint passes.

use super::{strides, Result, Tensor, TensorError};

/// `c = a·b + beta·c` where `a` is logically m×k and `b` is k×n.
/// `a_t`/`b_t` mean the operand is stored transposed (k×m / n×k row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical extents and
    // the strides address exactly those extents.
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

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For each linear index of `out`, the linear index of the element of `src`
/// it reads under numpy-style broadcasting. `src` must broadcast to `out`.
pub(crate) fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; nd];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[i + off] = src_strides[i];
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    if total == 0 {
        return map;
    }
    let mut idx = vec![0usize; nd];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..nd).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums `grad` (laid out as `out`) down to `target` by reversing broadcasting.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![0.0; n];
    if n == 1 {
        acc[0] = grad.iter().sum();
        return acc;
    }
    for (g, &j) in grad.iter().zip(broadcast_map(out, target).iter()) {
        acc[j] += g;
    }
    acc
}

pub(crate) fn check_perm(perm: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    if perm.len() != ndim {
        return Err(TensorError::invalid(
            "permute",
            format!("permutation {:?} for rank {}", perm, ndim),
        ));
    }
    for &p in perm {
        if p >= ndim || seen[p] {
            return Err(TensorError::invalid(
                "permute",
                format!("invalid permutation {:?}", perm),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let src = x.data();
    let mut data = Vec::with_capacity(total);
    if total > 0 {
        let mut idx = vec![0usize; nd];
        let mut pos = 0usize;
        for _ in 0..total {
            data.push(src[pos]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                pos += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                pos -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis extent, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    let src = x.data();
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, data)
}

pub(crate) fn narrow_backward(g: &[f64], in_shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(in_shape, axis);
    let mut out = vec![0.0; outer * ext * inner];
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    out
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no operands"))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(TensorError::invalid(
            "concat",
            format!("axis {} out of range for rank {}", axis, nd),
        ));
    }
    let mut total_axis = 0;
    for p in parts {
        let ok = p.ndim() == nd
            && (0..nd).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
        }
        total_axis += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * ext + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..ext {
                m = m.max(src[at(k)]);
            }
            let mut s = 0.0;
            for k in 0..ext {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..ext {
                out[at(k)] /= s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, g: &[f64], axis: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * ext + k) * inner + i;
            let mut dot = 0.0;
            for k in 0..ext {
                dot += g[at(k)] * yd[at(k)];
            }
            for k in 0..ext {
                out[at(k)] = yd[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn og(&self) -> usize {
        self.o / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
}

/// Columns for one sample and group: (cg·kh·kw) × (ho·wo).
fn im2col(x: &[f64], g: &ConvGeom, sample: usize, group: usize, cols: &mut [f64]) {
    let cg = g.cg();
    let hw = g.ho * g.wo;
    for ci in 0..cg {
        let ch = group * cg + ci;
        let plane = &x[(sample * g.c + ch) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, sample: usize, group: usize, dx: &mut [f64]) {
    let cg = g.cg();
    let hw = g.ho * g.wo;
    for ci in 0..cg {
        let ch = group * cg + ci;
        let plane = &mut dx[(sample * g.c + ch) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let og = g.og();
    let rows = g.col_rows();
    let mut out = vec![0.0; g.n * g.o * hw];
    let mut cols = vec![0.0; rows * hw];
    for s in 0..g.n {
        for grp in 0..g.groups {
            im2col(x, g, s, grp, &mut cols);
            let wg = &w[grp * og * rows..(grp + 1) * og * rows];
            let dst = &mut out[(s * g.o + grp * og) * hw..(s * g.o + (grp + 1) * og) * hw];
            gemm(og, rows, hw, wg, false, &cols, false, 0.0, dst);
        }
        if let Some(bias) = b {
            for oc in 0..g.o {
                let bv = bias[oc];
                for v in &mut out[(s * g.o + oc) * hw..(s * g.o + oc + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db) for the requested operands.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.ho * g.wo;
    let og = g.og();
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0; g.n * g.c * g.h * g.w]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; rows * hw];
    let mut dcols = vec![0.0; rows * hw];
    for s in 0..g.n {
        for grp in 0..g.groups {
            let dyg = &dy[(s * g.o + grp * og) * hw..(s * g.o + (grp + 1) * og) * hw];
            if let Some(dw) = dw.as_mut() {
                im2col(x, g, s, grp, &mut cols);
                let dwg = &mut dw[grp * og * rows..(grp + 1) * og * rows];
                gemm(og, hw, rows, dyg, false, &cols, true, 1.0, dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[grp * og * rows..(grp + 1) * og * rows];
                gemm(rows, og, hw, wg, true, dyg, false, 0.0, &mut dcols);
                col2im(&dcols, g, s, grp, dx);
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = vec![0.0; g.o];
        for s in 0..g.n {
            for oc in 0..g.o {
                db[oc] += dy[(s * g.o + oc) * hw..(s * g.o + oc + 1) * hw].iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = permute(&Tensor::from_parts(vec![m, k], a.clone()), &[1, 0]);
        let bt = permute(&Tensor::from_parts(vec![k, n], b.clone()), &[1, 0]);
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, at.data(), true, bt.data(), true, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(reduce_to(&[1.0; 6], &[2, 3], &[1, 3]), vec![2.0, 2.0, 2.0]);
    }
}
