//! Symmetric per-tensor INT8 tensors and the reference integer kernels.
//!
//! Every GEMM in the encoder (QKV, QK^T, A·V, projection, FFN1, FFN2) goes
//! through [`gemm_q8`] or [`gemm_q8_subset`]. Accumulation is exact in `i32`;
//! rounding happens only in [`quantize`] and [`requantize`], both
//! round-half-to-even with saturation to `[-128, 127]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const Q_MIN: i32 = -128;
pub const Q_MAX: i32 = 127;

/// Largest inner dimension for which an `i32` accumulator of `i8 x i8`
/// products cannot overflow (128 * 128 * 2^17 = 2^31).
pub const MAX_INNER_DIM: usize = 1 << 17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("scale must be finite and > 0, got {0}")]
    InvalidScale(f64),
    #[error("non-finite input at element {index}")]
    NonFinite { index: usize },
    #[error("shape {shape:?} holds {expected} elements but data has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero dimension")]
    EmptyDim(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero points must be 0 for gemm_q8 (got {0} and {1})")]
    NonZeroZeroPoint(i32, i32),
    #[error("inner dimension {0} risks accumulator overflow")]
    InnerTooLarge(usize),
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), QuantError> {
    if shape.contains(&0) {
        return Err(QuantError::EmptyDim(shape.to_vec()));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(QuantError::LengthMismatch {
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<(), QuantError> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(QuantError::InvalidScale(scale))
    }
}

#[inline]
fn saturate(v: f64) -> i8 {
    v.clamp(Q_MIN as f64, Q_MAX as f64) as i8
}

/// INT8 payload with shape, per-tensor scale and zero point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f64,
    zero_point: i32,
}

impl QuantTensor {
    pub fn new(
        shape: Vec<usize>,
        data: Vec<i8>,
        scale: f64,
        zero_point: i32,
    ) -> Result<Self, QuantError> {
        check_shape(&shape, data.len())?;
        check_scale(scale)?;
        Ok(Self {
            shape,
            data,
            scale,
            zero_point,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize), QuantError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(QuantError::ShapeMismatch(format!(
                "expected a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let zp = self.zero_point as f64;
        self.data
            .iter()
            .map(|&q| (q as f64 - zp) * self.scale)
            .collect()
    }

    /// Copies the listed rows of a 2-D tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, QuantError> {
        let (n, c) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(QuantError::ShapeMismatch(format!(
                    "row {r} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&self.data[r * c..(r + 1) * c]);
        }
        Self::new(vec![rows.len(), c], data, self.scale, self.zero_point)
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self, QuantError> {
        let (n, c) = self.dims2()?;
        if start + width > c {
            return Err(QuantError::ShapeMismatch(format!(
                "column block {start}..{} exceeds {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&self.data[r * c + start..r * c + start + width]);
        }
        Self::new(vec![n, width], data, self.scale, self.zero_point)
    }

    pub fn transpose(&self) -> Result<Self, QuantError> {
        let (n, c) = self.dims2()?;
        let mut data = vec![0i8; n * c];
        for r in 0..n {
            for j in 0..c {
                data[j * n + r] = self.data[r * c + j];
            }
        }
        Self::new(vec![c, n], data, self.scale, self.zero_point)
    }

    /// Same tensor with the listed rows zeroed.
    pub fn with_zeroed_rows(&self, zero: impl Fn(usize) -> bool) -> Result<Self, QuantError> {
        let (n, c) = self.dims2()?;
        let mut out = self.clone();
        for r in (0..n).filter(|&r| zero(r)) {
            out.data[r * c..(r + 1) * c].fill(0);
        }
        Ok(out)
    }
}

/// 32-bit accumulator tensor; `scale` is the product of the operand scales.
#[derive(Debug, Clone, PartialEq)]
pub struct AccTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    scale: f64,
}

impl AccTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, scale: f64) -> Result<Self, QuantError> {
        check_shape(&shape, data.len())?;
        check_scale(scale)?;
        Ok(Self { shape, data, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&a| a as f64 * self.scale).collect()
    }
}

/// Quantizes one value: round-half-even of `x / scale + zero_point`, saturated.
#[inline]
pub fn quantize_value(x: f64, scale: f64, zero_point: i32) -> i8 {
    saturate((x / scale).round_ties_even() + zero_point as f64)
}

pub fn quantize(
    x: &[f64],
    shape: &[usize],
    scale: f64,
    zero_point: i32,
) -> Result<QuantTensor, QuantError> {
    check_scale(scale)?;
    check_shape(shape, x.len())?;
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    let data = x
        .iter()
        .map(|&v| quantize_value(v, scale, zero_point))
        .collect();
    QuantTensor::new(shape.to_vec(), data, scale, zero_point)
}

/// Max-abs calibration: the scale that maps the largest magnitude to 127.
/// An all-zero tensor gets scale 1.
pub fn max_abs_scale(values: impl IntoIterator<Item = f64>) -> f64 {
    let m = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        m / Q_MAX as f64
    } else {
        1.0
    }
}

fn gemm_operands(a: &QuantTensor, b: &QuantTensor) -> Result<(usize, usize, usize), QuantError> {
    if a.zero_point != 0 || b.zero_point != 0 {
        return Err(QuantError::NonZeroZeroPoint(a.zero_point, b.zero_point));
    }
    let (n, d) = a.dims2()?;
    let (d2, m) = b.dims2()?;
    if d != d2 {
        return Err(QuantError::ShapeMismatch(format!(
            "inner dimensions differ: [{n}x{d}] x [{d2}x{m}]"
        )));
    }
    if d > MAX_INNER_DIM {
        return Err(QuantError::InnerTooLarge(d));
    }
    Ok((n, d, m))
}

/// Exact integer `a [N x D] x b [D x M]`.
pub fn gemm_q8(a: &QuantTensor, b: &QuantTensor) -> Result<AccTensor, QuantError> {
    let (n, d, m) = gemm_operands(a, b)?;
    let mut acc = vec![0i32; n * m];
    for i in 0..n {
        let row = &mut acc[i * m..(i + 1) * m];
        for k in 0..d {
            let av = a.data[i * d + k] as i32;
            if av == 0 {
                continue;
            }
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as i32;
            }
        }
    }
    AccTensor::new(vec![n, m], acc, a.scale * b.scale)
}

/// Like [`gemm_q8`] but the inner dimension runs only over `inner` (ascending
/// indices into `a`'s columns and `b`'s rows). Rows of `b` outside the subset
/// are never read.
pub fn gemm_q8_subset(
    a: &QuantTensor,
    b: &QuantTensor,
    inner: &[usize],
) -> Result<AccTensor, QuantError> {
    let (n, d, m) = gemm_operands(a, b)?;
    if let Some(&bad) = inner.iter().find(|&&k| k >= d) {
        return Err(QuantError::ShapeMismatch(format!(
            "inner index {bad} out of range for dimension {d}"
        )));
    }
    let mut acc = vec![0i32; n * m];
    for i in 0..n {
        let row = &mut acc[i * m..(i + 1) * m];
        for &k in inner {
            let av = a.data[i * d + k] as i32;
            if av == 0 {
                continue;
            }
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as i32;
            }
        }
    }
    AccTensor::new(vec![n, m], acc, a.scale * b.scale)
}

pub fn requantize(acc: &AccTensor, out_scale: f64) -> Result<QuantTensor, QuantError> {
    check_scale(out_scale)?;
    let data = acc
        .data
        .iter()
        .map(|&a| quantize_value(a as f64 * acc.scale, out_scale, 0))
        .collect();
    QuantTensor::new(acc.shape.clone(), data, out_scale, 0)
}
