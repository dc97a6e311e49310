//! Dense row-major `f64` tensors and the raw kernels the tape is built on.
//!
//! Everything here is value-level: no gradient bookkeeping. The kernels are
//! shared by the forward pass and by the backward rules in [`crate::autodiff`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("zero-sized axis in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Normal samples with the given std, redrawn outside two standard deviations.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for axis of {d}");
                acc * d + i
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += s;
        }
    }
}

/// Batch layout of a (possibly broadcast) matrix product.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!("matmul needs rank >= 2, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return shape_err(format!("matmul inner dimensions differ: {a:?} x {b:?}"));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let lead = if ab.is_empty() {
        bb.to_vec()
    } else if bb.is_empty() || ab == bb {
        ab.to_vec()
    } else {
        return shape_err(format!("matmul batch dimensions incompatible: {a:?} x {b:?}"));
    };
    let batch = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        batch,
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        m,
        k,
        n,
        out_shape,
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.batch * m * n];
    for bi in 0..plan.batch {
        let ao = if plan.a_batched { bi * m * k } else { 0 };
        let bo = if plan.b_batched { bi * k * n } else { 0 };
        gemm_acc(
            &a.data[ao..ao + m * k],
            &b.data[bo..bo + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(plan.out_shape, out)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return shape_err(format!("invalid permutation {perm:?} for shape {:?}", x.shape));
    }
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x.data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a sliding window over a `[c, h, w]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_size(&self) -> Result<(usize, usize)> {
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
                return shape_err(format!("kernel {} does not fit input {n} with padding {}", self.kernel, self.padding));
            }
            if (padded - self.kernel) % self.stride != 0 {
                return shape_err(format!(
                    "non-integral output size: ({n} + 2*{} - {}) / {}",
                    self.padding, self.kernel, self.stride
                ));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(self.h)?, span(self.w)?))
    }
}

/// Unfolds `x` into `[c*k*k, oh*ow]` patch columns.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let cols = oh * ow;
    let mut out = vec![0.0; g.channels * k * k * cols];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c, h, w]` map, summing overlaps.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let n = oh * ow;
    let mut out = vec![0.0; g.channels * g.h * g.w];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Source taps for align-corners=false linear interpolation along one axis.
pub(crate) fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = src - i0 as f64;
            (i0, i1, lambda)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(g: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = gsrc[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    out
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let eye = Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap();
        let a = Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let b = Tensor::new([2, 2], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let z = matmul(&Tensor::zeros([2, 3]), &Tensor::ones([3, 4])).unwrap();
        assert_eq!(z, Tensor::zeros([2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (m, k, n) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let a = Tensor::rand_uniform([m, k], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform([k, n], -1.0, 1.0, &mut rng);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform([3, 2, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform([4, 5], -1.0, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        let a1 = Tensor::new([2, 4], a.data()[8..16].to_vec()).unwrap();
        let c1 = naive_matmul(&a1, &b);
        assert!(c1.data().iter().zip(&c.data()[10..20]).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn conv_geometry_rejects_fractional_output() {
        let g = ConvGeom { channels: 1, h: 6, w: 6, kernel: 3, stride: 2, padding: 0 };
        assert!(g.out_size().is_err());
        let g = ConvGeom { channels: 1, h: 5, w: 5, kernel: 3, stride: 2, padding: 0 };
        assert_eq!(g.out_size().unwrap(), (2, 2));
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
    }
}
