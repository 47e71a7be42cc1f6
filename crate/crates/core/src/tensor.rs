//! Dense row-major `f64` tensors and the numeric kernels shared by the tape.
//!
//! The free functions here (`matmul`, `conv2d`, `maxpool2d`, `softmax_ce`)
//! are pure single-sample operations with explicit backward companions.
//! The batched kernels in [`kernels`] are what the tape calls.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Row-major 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Adjoints of `matmul`: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad.shape() != [m, n] {
        return Err(Error::Dimension("matmul adjoint shape mismatch".into()));
    }
    let mut da = vec![0.0; m * k];
    kernels::gemm(m, n, k, grad.data(), (n, 1), b.data(), (1, n), 0.0, &mut da, (k, 1));
    let mut db = vec![0.0; k * n];
    kernels::gemm(k, m, n, a.data(), (1, k), grad.data(), (n, 1), 0.0, &mut db, (n, 1));
    Ok((
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    ))
}

fn conv_geometry(x: &Tensor, kernels: &Tensor) -> Result<kernels::ConvGeom> {
    let [c_in, h, w] = x.shape()[..] else {
        return Err(Error::Dimension(format!(
            "conv2d input must be c×h×w, got {:?}",
            x.shape()
        )));
    };
    let [c_out, kc, kh, kw] = kernels.shape()[..] else {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be c_out×c_in×kh×kw, got {:?}",
            kernels.shape()
        )));
    };
    if kc != c_in {
        return Err(Error::Dimension(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::Dimension(format!(
            "kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    Ok(kernels::ConvGeom {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
    })
}

/// Valid, stride-1 cross-correlation of one `c_in×h×w` image.
pub fn conv2d(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let g = conv_geometry(x, kernels)?;
    let mut out = vec![0.0; g.out_len()];
    g.forward(x.data(), kernels.data(), &mut out);
    Ok(Tensor::from_parts(vec![g.c_out, g.oh(), g.ow()], out))
}

/// Adjoints of `conv2d` with respect to the input and the kernels.
pub fn conv2d_backward(x: &Tensor, kernels: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(x, kernels)?;
    if grad.len() != g.out_len() {
        return Err(Error::Dimension("conv2d adjoint shape mismatch".into()));
    }
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernels.len()];
    g.backward(x.data(), kernels.data(), grad.data(), Some(&mut dx), Some(&mut dk));
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernels.shape().to_vec(), dk),
    ))
}

fn pool_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::Dimension(format!(
            "maxpool2d input must be c×h×w, got {:?}",
            x.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "maxpool2d needs even extents, got {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2d(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pool_dims(x)?;
    let (out, _) = kernels::maxpool_forward(x.data(), c, h, w);
    Ok(Tensor::from_parts(vec![c, h / 2, w / 2], out))
}

/// Routes each pooled adjoint to the first (row-major) maximal element of its window.
pub fn maxpool2d_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pool_dims(x)?;
    if grad.len() != c * (h / 2) * (w / 2) {
        return Err(Error::Dimension("maxpool2d adjoint shape mismatch".into()));
    }
    let (_, arg) = kernels::maxpool_forward(x.data(), c, h, w);
    let mut dx = vec![0.0; x.len()];
    for (g, &i) in grad.data().iter().zip(&arg) {
        dx[i] += g;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log Σ exp(z) − z[label]`, accurate when the label dominates.
pub(crate) fn ce_of(logits: &[f64], label: usize) -> f64 {
    let (top, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, z)| if z > acc.1 { (i, z) } else { acc });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, z)| (z - max).exp())
        .sum();
    (max - logits[label]) + rest.ln_1p()
}

fn check_label(classes: usize, label: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Dimension(format!(
            "softmax cross-entropy needs at least 2 classes, got {classes}"
        )));
    }
    if label >= classes {
        return Err(Error::Index(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `−log softmax(logits)[label]`.
pub fn softmax_ce(logits: &Tensor, label: usize) -> Result<f64> {
    check_label(logits.len(), label)?;
    Ok(ce_of(logits.data(), label))
}

/// Gradient of [`softmax_ce`]: `softmax(logits) − onehot(label)`.
pub fn softmax_ce_grad(logits: &Tensor, label: usize) -> Result<Tensor> {
    check_label(logits.len(), label)?;
    let mut p = softmax(logits.data());
    p[label] -= 1.0;
    Ok(Tensor::from_parts(logits.shape().to_vec(), p))
}

pub(crate) mod kernels {
    /// `c = alpha·a·b + beta·c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (usize, usize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let span = |r: usize, c: usize, rs: usize, cs: usize| {
            if r == 0 || c == 0 {
                0
            } else {
                (r - 1) * rs + (c - 1) * cs + 1
            }
        };
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
        assert!(c.len() >= span(m, n, rsc, csc));
        // SAFETY: the asserts above bound every index the kernel touches.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }

    /// Geometry of a valid, stride-1 convolution over a single image.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct ConvGeom {
        pub c_in: usize,
        pub h: usize,
        pub w: usize,
        pub c_out: usize,
        pub kh: usize,
        pub kw: usize,
    }

    impl ConvGeom {
        pub fn oh(&self) -> usize {
            self.h - self.kh + 1
        }
        pub fn ow(&self) -> usize {
            self.w - self.kw + 1
        }
        pub fn patch(&self) -> usize {
            self.c_in * self.kh * self.kw
        }
        pub fn positions(&self) -> usize {
            self.oh() * self.ow()
        }
        pub fn in_len(&self) -> usize {
            self.c_in * self.h * self.w
        }
        pub fn out_len(&self) -> usize {
            self.c_out * self.positions()
        }

        fn im2col(&self, x: &[f64], cols: &mut [f64]) {
            let (oh, ow, patch) = (self.oh(), self.ow(), self.patch());
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cols[(oy * ow + ox) * patch..][..patch];
                    let mut q = 0;
                    for c in 0..self.c_in {
                        let plane = &x[c * self.h * self.w..];
                        for ky in 0..self.kh {
                            let src = &plane[(oy + ky) * self.w + ox..][..self.kw];
                            row[q..q + self.kw].copy_from_slice(src);
                            q += self.kw;
                        }
                    }
                }
            }
        }

        fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
            let (oh, ow, patch) = (self.oh(), self.ow(), self.patch());
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &cols[(oy * ow + ox) * patch..][..patch];
                    let mut q = 0;
                    for c in 0..self.c_in {
                        let base = c * self.h * self.w;
                        for ky in 0..self.kh {
                            let dst = &mut dx[base + (oy + ky) * self.w + ox..][..self.kw];
                            for (d, s) in dst.iter_mut().zip(&row[q..q + self.kw]) {
                                *d += s;
                            }
                            q += self.kw;
                        }
                    }
                }
            }
        }

        /// One image: `x[c_in·h·w]` → `out[c_out·oh·ow]` (overwritten).
        pub fn forward(&self, x: &[f64], k: &[f64], out: &mut [f64]) {
            let (p, patch) = (self.positions(), self.patch());
            let mut cols = vec![0.0; p * patch];
            self.im2col(x, &mut cols);
            // out[o, p] = Σ_q cols[p, q] · k[o, q]
            gemm(p, patch, self.c_out, &cols, (patch, 1), k, (1, patch), 0.0, out, (1, p));
        }

        /// One image; accumulates into `dx` and `dk` when present.
        pub fn backward(
            &self,
            x: &[f64],
            k: &[f64],
            g: &[f64],
            dx: Option<&mut [f64]>,
            dk: Option<&mut [f64]>,
        ) {
            let (p, patch) = (self.positions(), self.patch());
            let mut cols = vec![0.0; p * patch];
            if let Some(dk) = dk {
                self.im2col(x, &mut cols);
                gemm(self.c_out, p, patch, g, (p, 1), &cols, (patch, 1), 1.0, dk, (patch, 1));
            }
            if let Some(dx) = dx {
                gemm(p, self.c_out, patch, g, (1, p), k, (patch, 1), 0.0, &mut cols, (patch, 1));
                self.col2im(&cols, dx);
            }
        }
    }

    /// 2×2/2 max pool over `planes` planes of `h×w`; returns values and flat argmax indices.
    pub fn maxpool_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        for c in 0..planes {
            let base = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
        (out, arg)
    }
}
