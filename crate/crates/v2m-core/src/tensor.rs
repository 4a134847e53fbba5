//! Dense row-major tensors and the deterministic kernels built on them.
//!
//! Every kernel accumulates in f64 regardless of the tensor's storage
//! precision and quantizes on store, so f32 tensors hold exactly the values
//! an f32 pipeline with f64 accumulators would produce. Reductions run in a
//! fixed left-to-right order per output element, which makes every kernel
//! bitwise reproducible across runs and worker counts.

use crate::error::{shape_err, Error, Result};

/// Element precision of a tensor's storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Rounds a value to this precision's representable set.
    #[inline(always)]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Dense n-dimensional array with row-major contiguous storage.
///
/// F32 tensors store f32-representable values widened into the f64 buffer;
/// [`DType::quantize`] is applied on every store so the two precisions share
/// one code path.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], dtype: DType, value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![dtype.quantize(value); len],
        }
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor {
            shape: vec![],
            dtype,
            data: vec![dtype.quantize(value)],
        }
    }

    pub fn from_vec(shape: &[usize], dtype: DType, mut data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(shape_err("from_vec", format!("{len} elements"), shape));
        }
        for v in &mut data {
            *v = dtype.quantize(*v);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
        })
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize, dtype: DType) -> Tensor {
        let mut t = Tensor::zeros(&[n, n], dtype);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must store only values
    /// already representable at the tensor's dtype (use [`DType::quantize`]).
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{} elements", self.data.len()),
                shape,
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = self.data.iter().map(|&v| dtype.quantize(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| self.dtype.quantize(f(v)))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Surfaces NaN/Inf as an error instead of propagating silently.
    pub fn validate_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, format!("{:?}", a.shape), &b.shape));
    }
    Ok(())
}

fn zip_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let dtype = a.dtype;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| dtype.quantize(f(x, y)))
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        dtype,
        data,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| c * x)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

#[inline(always)]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
#[inline(always)]
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus(a: &Tensor) -> Tensor {
    a.map(softplus_scalar)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

/// `x * sigmoid(x)`.
pub fn silu(a: &Tensor) -> Tensor {
    a.map(|x| x * sigmoid_scalar(x))
}

/// `y[..., o] = sum_i x[..., i] * w[i, o] + b[o]`, accumulated left to right
/// over `i` in f64.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.shape.len() != 2 {
        return Err(shape_err("linear", "rank-2 weight", &w.shape));
    }
    let (din, dout) = (w.shape[0], w.shape[1]);
    if x.shape.last().copied() != Some(din) {
        return Err(shape_err(
            "linear",
            format!("last extent {din}"),
            &x.shape,
        ));
    }
    if let Some(b) = b {
        if b.shape != [dout] {
            return Err(shape_err("linear", format!("bias [{dout}]"), &b.shape));
        }
    }
    let rows = x.data.len() / din;
    let mut out_shape = x.shape.clone();
    *out_shape.last_mut().unwrap() = dout;
    let dtype = x.dtype;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        let xr = &x.data[r * din..(r + 1) * din];
        let or = &mut out[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let mut acc = 0.0;
            for i in 0..din {
                acc += xr[i] * w.data[i * dout + o];
            }
            if let Some(b) = b {
                acc += b.data[o];
            }
            or[o] = dtype.quantize(acc);
        }
    }
    let t = Tensor {
        shape: out_shape,
        dtype,
        data: out,
    };
    t.validate_finite("linear")?;
    Ok(t)
}

/// Per-position standardization over the last axis, then affine with
/// gamma/beta. Uses the population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x
        .shape
        .last()
        .ok_or_else(|| shape_err("layer_norm", "rank >= 1", &x.shape))?;
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(shape_err("layer_norm", format!("gamma/beta [{d}]"), &gamma.shape));
    }
    let rows = x.data.len() / d;
    let dtype = x.dtype;
    let mut out = vec![0.0; x.data.len()];
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            out[r * d + i] = dtype.quantize(gamma.data[i] * xhat + beta.data[i]);
        }
    }
    let t = Tensor {
        shape: x.shape.clone(),
        dtype,
        data: out,
    };
    t.validate_finite("layer_norm")?;
    Ok(t)
}
