//! Dense `f64` tensors in NCHW layout and the forward/backward kernels the
//! network is built from.

use rayon::prelude::*;

use crate::data::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` for 4-D tensors.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, k: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn scaled(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks images into `[B, C, H, W]`.
    pub fn from_images(images: &[ImageBuffer]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.height(), img.width(), img.channels()) != (h, w, c) {
                return Err(Error::Shape(format!(
                    "batch images differ: {}x{}x{} vs {h}x{w}x{c}",
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get(y, x, ch));
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Stacks masks into `[B, 1, H, W]`.
    pub fn from_masks(masks: &[MaskBuffer]) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Shape("empty mask batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Shape("batch masks differ in size".into()));
            }
            data.extend_from_slice(m.data());
        }
        Tensor::new(vec![masks.len(), 1, h, w], data)
    }

    pub fn to_images(&self) -> Vec<ImageBuffer> {
        let (n, c, h, w) = self.dims4();
        (0..n)
            .map(|i| {
                let plane = &self.data[i * c * h * w..(i + 1) * c * h * w];
                let mut data = vec![0.0; c * h * w];
                for ch in 0..c {
                    for p in 0..h * w {
                        data[p * c + ch] = plane[ch * h * w + p];
                    }
                }
                ImageBuffer::new(h, w, c, data).expect("tensor has 1 or 3 channels")
            })
            .collect()
    }

    pub fn to_masks(&self) -> Vec<MaskBuffer> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(c, 1, "mask tensors have one channel");
        self.data
            .chunks(h * w)
            .take(n)
            .map(|d| MaskBuffer::new(h, w, d.to_vec()).expect("valid dims"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn down(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 2,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, dx: &mut [f64]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C[m×n] = beta·C + A[m×k]·B[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` and `b` (checked by the
    // callers' shape bookkeeping) and `c` is a dense row-major m×n buffer.
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

/// 2-D convolution. `weight` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4();
    let (cout, cin, kh, kw) = weight.dims4();
    if cin != c || kh != g.kernel || kw != g.kernel || bias.numel() != cout {
        return Err(Error::Shape(format!(
            "conv weight {:?} / bias {:?} incompatible with input {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let (ho, wo) = g.output_size(h, w);
    let kk = c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    out.data
        .par_chunks_mut(cout * p)
        .zip(x.data.par_chunks(c * h * w))
        .for_each(|(o, xs)| {
            let mut cols = vec![0.0; kk * p];
            im2col(xs, c, h, w, g, &mut cols);
            for (co, plane) in o.chunks_mut(p).enumerate() {
                plane.fill(bias.data[co]);
            }
            gemm(
                cout,
                kk,
                p,
                &weight.data,
                (kk as isize, 1),
                &cols,
                (p as isize, 1),
                1.0,
                o,
            );
        });
    Ok(out)
}

/// Per-sample weight and input gradients.
type SampleGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

/// Gradients of `conv2d` with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, c, h, w) = x.dims4();
    let (cout, _, _, _) = weight.dims4();
    let (_, _, ho, wo) = grad_out.dims4();
    let kk = c * g.kernel * g.kernel;
    let p = ho * wo;

    let per_sample: Vec<SampleGrads> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = &x.data[i * c * h * w..(i + 1) * c * h * w];
            let go = &grad_out.data[i * cout * p..(i + 1) * cout * p];
            let mut dw = None;
            if need_weight {
                let mut cols = vec![0.0; kk * p];
                im2col(xs, c, h, w, g, &mut cols);
                let mut acc = vec![0.0; cout * kk];
                // dW = dOut · colsᵀ
                gemm(cout, p, kk, go, (p as isize, 1), &cols, (1, p as isize), 0.0, &mut acc);
                dw = Some(acc);
            }
            let mut dx = None;
            if need_input {
                let mut dcols = vec![0.0; kk * p];
                // dCols = Wᵀ · dOut
                gemm(
                    kk,
                    cout,
                    p,
                    &weight.data,
                    (1, kk as isize),
                    go,
                    (p as isize, 1),
                    0.0,
                    &mut dcols,
                );
                let mut acc = vec![0.0; c * h * w];
                col2im(&dcols, c, h, w, g, &mut acc);
                dx = Some(acc);
            }
            (dx, dw)
        })
        .collect();

    let grad_input = need_input.then(|| {
        let mut data = Vec::with_capacity(n * c * h * w);
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx.as_ref().expect("computed"));
        }
        Tensor::new(x.shape.clone(), data).expect("shape")
    });
    let (grad_weight, grad_bias) = if need_weight {
        let mut dw = Tensor::zeros(weight.shape());
        for (_, s) in &per_sample {
            for (a, b) in dw.data.iter_mut().zip(s.as_ref().expect("computed")) {
                *a += b;
            }
        }
        let mut db = Tensor::zeros(&[cout]);
        for i in 0..n {
            for co in 0..cout {
                let plane = &grad_out.data[(i * cout + co) * p..(i * cout + co + 1) * p];
                db.data[co] += plane.iter().sum::<f64>();
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    (grad_input, grad_weight, grad_bias)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Normalized activations and inverse std-devs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> Result<(Tensor, GroupNormCache)> {
    let (n, c, h, w) = x.dims4();
    if groups == 0 || c % groups != 0 || gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "group norm with {groups} groups over {c} channels (gamma {:?})",
            gamma.shape()
        )));
    }
    let cg = c / groups;
    let len = cg * h * w;
    let mut normalized = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; n * groups];
    let mut out = Tensor::zeros(x.shape());
    for (gi, ((xs, ns), os)) in x
        .data
        .chunks(len)
        .zip(normalized.chunks_mut(len))
        .zip(out.data.chunks_mut(len))
        .enumerate()
    {
        let mean = xs.iter().sum::<f64>() / len as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        inv_std[gi] = rstd;
        let group = gi % groups;
        for (j, ((xv, nv), ov)) in xs.iter().zip(ns.iter_mut()).zip(os.iter_mut()).enumerate() {
            let ch = group * cg + j / (h * w);
            *nv = (xv - mean) * rstd;
            *ov = *nv * gamma.data[ch] + beta.data[ch];
        }
    }
    Ok((out, GroupNormCache { normalized, inv_std }))
}

pub fn group_norm_backward(
    cache: &GroupNormCache,
    shape: &[usize],
    gamma: &Tensor,
    groups: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (_, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cg = c / groups;
    let hw = h * w;
    let len = cg * hw;
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for (gi, ((dy, xh), dxs)) in grad_out
        .data
        .chunks(len)
        .zip(cache.normalized.chunks(len))
        .zip(dx.data.chunks_mut(len))
        .enumerate()
    {
        let group = gi % groups;
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..len {
            let ch = group * cg + j / hw;
            dgamma.data[ch] += dy[j] * xh[j];
            dbeta.data[ch] += dy[j];
            let dxh = dy[j] * gamma.data[ch];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= len as f64;
        mean_dxh_xh /= len as f64;
        let rstd = cache.inv_std[gi];
        for j in 0..len {
            let ch = group * cg + j / hw;
            let dxh = dy[j] * gamma.data[ch];
            dxs[j] = rstd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `x·σ(x)`
pub fn swish(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

pub fn swish_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * (s + v * s * (1.0 - s))
            })
            .collect(),
    }
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    for (src, dst) in x.data.chunks(h * w).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Tensor {
    let (n, c, h2, w2) = grad_out.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in grad_out.data.chunks(h2 * w2).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data[i * ca * h * w..(i + 1) * ca * h * w]);
        data.extend_from_slice(&b.data[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

pub fn split_channels(grad: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = grad.dims4();
    let cb = c - ca;
    let mut da = Vec::with_capacity(n * ca * h * w);
    let mut db = Vec::with_capacity(n * cb * h * w);
    for sample in grad.data.chunks(c * h * w) {
        da.extend_from_slice(&sample[..ca * h * w]);
        db.extend_from_slice(&sample[ca * h * w..]);
    }
    (
        Tensor::new(vec![n, ca, h, w], da).expect("shape"),
        Tensor::new(vec![n, cb, h, w], db).expect("shape"),
    )
}
