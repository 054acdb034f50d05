//! Raw numeric kernels shared by forward and backward passes.

use crate::real::Real;

/// Row-major matrix view descriptor: element (i, j) lives at
/// `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn rm(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn rm_t(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last(m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || bv.last(k, n) < b.len(), "gemm: b out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    // SAFETY: bounds of every addressed element were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        in_hw: (usize, usize),
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Option<Self> {
        let span_h = in_hw.0 + 2 * pad.0;
        let span_w = in_hw.1 + 2 * pad.1;
        if span_h < k.0 || span_w < k.1 || stride.0 == 0 || stride.1 == 0 {
            return None;
        }
        Some(Self {
            channels,
            in_h: in_hw.0,
            in_w: in_hw.1,
            k_h: k.0,
            k_w: k.1,
            stride,
            pad,
            out_h: (span_h - k.0) / stride.0 + 1,
            out_w: (span_w - k.1) / stride.1 + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image `[channels, in_h, in_w]` into `[c*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.in_h + ih as usize) * g.in_w..][..g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
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

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.in_h + ih as usize) * g.in_w..][..g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index into an input of shape `inp`
/// broadcast to `out`.
pub(crate) fn broadcast_index_map(inp: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        let oi = i + rank - inp.len();
        strides[oi] = if inp[i] == 1 { 0 } else { acc };
        acc *= inp[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// How an input of a binary op maps onto the output.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Input equals the trailing block of the output (bias-style).
    Suffix(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub fn new(inp: &[usize], out: &[usize]) -> Self {
        if inp == out {
            return Bcast::Same;
        }
        let n: usize = inp.iter().product();
        let trimmed: Vec<usize> = {
            let first = inp.iter().position(|&d| d != 1).unwrap_or(inp.len());
            inp[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Suffix(n.max(1));
        }
        Bcast::Map(broadcast_index_map(inp, out))
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute axes of a row-major buffer.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let outer = if inner == 0 { 0 } else { total / inner };
    for _ in 0..outer {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn index_map_matches_manual() {
        let map = broadcast_index_map(&[2, 1, 3], &[2, 2, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
    }

    #[test]
    fn permute_2d_is_transpose() {
        let d: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let (s, p) = permute(&d, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(p, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, (5, 4), (3, 2), (2, 1), (1, 0)).unwrap();
        let img: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let cols_probe: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| (v as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&img, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&cols_probe, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
