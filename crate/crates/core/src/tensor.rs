//! Dense row-major n-dimensional arrays and the raw kernels shared by the
//! autograd tape and gradient-free code paths.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Gradients and graph membership live on the
/// [`Tape`](crate::autograd::Tape); a `Tensor` is only a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Axes reordered so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} invalid for shape {:?}",
                self.shape
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset(&out_shape, &src_strides, |off| data.push(self.data[off]));
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> std::ops::Index<&[usize]> for Tensor<T> {
    type Output = T;

    fn index(&self, index: &[usize]) -> &T {
        assert_eq!(index.len(), self.rank());
        let off = index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum::<usize>();
        &self.data[off]
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits, in row-major order of `shape`, the source offset given by `src_strides`.
pub(crate) fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    loop {
        for i in 0..shape[last] {
            f(off + i * src_strides[last]);
        }
        // advance the outer digits
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Result shape of broadcasting two shapes by the trailing-dimension rule.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides that read `shape` as if broadcast to `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Expands `t` to `out` by repetition.
pub(crate) fn expand<T: Scalar>(t: &Tensor<T>, out: &[usize]) -> Vec<T> {
    if t.shape() == out {
        return t.data().to_vec();
    }
    let st = broadcast_strides(t.shape(), out);
    let mut v = Vec::with_capacity(out.iter().product());
    for_each_offset(out, &st, |off| v.push(t.data()[off]));
    v
}

/// Sums a gradient of shape `from` down to `to` (the inverse of broadcasting).
pub(crate) fn sum_to_shape<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let n_to: usize = to.iter().product();
    let mut out = vec![T::zero(); n_to];
    // fast path: `to` is a suffix of `from`
    let pad = from.len() - to.len();
    if from[pad..] == *to {
        for chunk in grad.chunks(n_to.max(1)) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let st = broadcast_strides(to, from);
    let mut i = 0;
    for_each_offset(from, &st, |off| {
        out[off] += grad[i];
        i += 1;
    });
    out
}

/// Sampling plan of one axis for align-corners=false bilinear resampling:
/// per output index, the two source indices and their weights.
#[derive(Clone, Debug)]
pub(crate) struct LinearPlan<T> {
    pub taps: Vec<(usize, usize, T, T)>,
}

impl<T: Scalar> LinearPlan<T> {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let taps = (0..dst)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let frac = if i0 == i1 { 0.0 } else { x - i0 as f64 };
                (i0, i1, T::of(1.0 - frac), T::of(frac))
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resampling of the last two axes (align-corners=false).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (th, tw) = target;
    if x.rank() < 2 || th == 0 || tw == 0 || x.shape()[x.rank() - 2] == 0 || x.shape()[x.rank() - 1] == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilinear resize of {:?} to {target:?}",
            x.shape()
        )));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.len() / (h * w);
    let rows = LinearPlan::<T>::new(h, th);
    let cols = LinearPlan::<T>::new(w, tw);
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(r0, r1, wr0, wr1) in &rows.taps {
            for &(c0, c1, wc0, wc1) in &cols.taps {
                let top = src[r0 * w + c0] * wc0 + src[r0 * w + c1] * wc1;
                let bot = src[r1 * w + c0] * wc0 + src[r1 * w + c1] * wc1;
                out.push(top * wr0 + bot * wr1);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = th;
    shape[r - 1] = tw;
    Tensor::new(shape, out)
}

/// Average pooling of the last two axes by integer factors.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::InvalidArgument("avg_pool needs rank >= 2".into()));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot average-pool {h}x{w} to {th}x{tw}"
        )));
    }
    let (fh, fw) = (h / th, w / tw);
    let planes = x.len() / (h * w);
    let norm = T::of((fh * fw) as f64);
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..th {
            for j in 0..tw {
                let mut acc = T::zero();
                for di in 0..fh {
                    for dj in 0..fw {
                        acc += src[(i * fh + di) * w + j * fw + dj];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = th;
    shape[r - 1] = tw;
    Tensor::new(shape, out)
}

/// Separable Gaussian smoothing of the last two axes with reflected borders.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian sigma {sigma}")));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<T> = kernel.iter().map(|k| T::of(k / total)).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let planes = x.len() / (h * w);
    let mut out = x.data().to_vec();
    let mut tmp = vec![T::zero(); h * w];
    for p in 0..planes {
        let plane = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[i * w + reflect(j as isize + k as isize - radius, w)];
                }
                tmp[i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[reflect(i as isize + k as isize - radius, h) * w + j];
                }
                plane[i * w + j] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p[&[1, 1, 2]], t[&[1, 2, 1]]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        let err = broadcast_shape("add", &[2, 3], &[4]).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn sum_to_shape_inverts_expand() {
        let b = Tensor::<f64>::from_f64(vec![3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let e = expand(&b, &[2, 3, 4]);
        let s = sum_to_shape(&e, &[2, 3, 4], &[3, 1]);
        assert_eq!(s, vec![8.0, 16.0, 24.0]);
    }

    #[test]
    fn bilinear_constant_and_singleton() {
        let c = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.5);
        let up = bilinear_resize(&c, (16, 16)).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let one = Tensor::<f64>::full(vec![1, 1], 0.7);
        let up = bilinear_resize(&one, (5, 3)).unwrap();
        assert_eq!(up.shape(), &[5, 3]);
        assert!(up.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn bilinear_checkerboard_hand_values() {
        // src [[0,1],[1,0]] to 4x4: output coordinate o maps to (o+0.5)/2-0.5,
        // i.e. {-0.25 -> 0, 0.25, 0.75, 1.25 -> 1}; row/col weights are
        // {(1,0), (0.75,0.25), (0.25,0.75), (0,1)}.
        let src = Tensor::<f64>::from_f64(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = bilinear_resize(&src, (4, 4)).unwrap();
        let w = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for i in 0..4 {
            for j in 0..4 {
                let (r0, r1) = w[i];
                let (c0, c1) = w[j];
                let expect = r0 * (c0 * 0.0 + c1 * 1.0) + r1 * (c0 * 1.0 + c1 * 0.0);
                assert!((up[&[i, j]] - expect).abs() < 1e-15);
            }
        }
        assert_eq!(up[&[0, 0]], 0.0);
        assert_eq!(up[&[0, 3]], 1.0);
        assert_eq!(up[&[3, 0]], 1.0);
        assert_eq!(up[&[3, 3]], 0.0);
    }

    #[test]
    fn avg_pool_range() {
        let m = Tensor::<f32>::from_fn(vec![4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let p = avg_pool(&m, (2, 2)).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gaussian_preserves_constants() {
        let c = Tensor::<f64>::full(vec![6, 7], 2.0);
        let b = gaussian_blur(&c, 1.5).unwrap();
        assert!(b.max_abs_diff(&c) < 1e-12);
    }
}
