//! Forward kernels for the tape primitives. Shared by recording and replay.

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

/// True when `rhs` can be broadcast against `lhs`: its shape is a suffix of
/// `lhs`'s shape (the empty shape being the scalar case).
pub(crate) fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

pub(crate) fn elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if !broadcastable(a.shape(), b.shape()) {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let bd = b.data();
    let n = bd.len();
    let data = if n == a.len() {
        a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect()
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn mean(a: &Tensor) -> Tensor {
    let n = a.len();
    let value = if n == 0 { f64::NAN } else { a.sum() / n as f64 };
    Tensor::scalar(value)
}

/// Number of rows and row length when treating the last axis as the row.
pub(crate) fn rows(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        None => (1, 1),
        Some(&width) => {
            let total: usize = shape.iter().product();
            if width == 0 {
                (0, 0)
            } else {
                (total / width, width)
            }
        }
    }
}

pub(crate) fn softmax(a: &Tensor) -> Tensor {
    let (r, w) = rows(a.shape());
    let mut out = a.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * w..(i + 1) * w];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

pub(crate) fn gather(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (r, w) = rows(a.shape());
    if a.shape().is_empty() || r != indices.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "gather",
            lhs: a.shape().to_vec(),
            rhs: vec![indices.len()],
        });
    }
    let mut out = Vec::with_capacity(r);
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= w {
            return Err(NumericsError::IndexOutOfRange { index: idx, len: w });
        }
        out.push(a.data()[i * w + idx]);
    }
    let shape = a.shape()[..a.shape().len() - 1].to_vec();
    Ok(Tensor::from_parts(shape, out))
}
