//! Raw slice kernels shared by the graph ops and the standalone helpers.

use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::masking::IGNORE;
use crate::{Error, Result};

/// `out (m,n) += a (m,k) · b (k,n)`
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m,n) += a (m,k) · bᵀ` with `b` stored as `(n,k)`.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out (m,n) += aᵀ · b` with `a` stored as `(k,m)` and `b` as `(k,n)`.
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(S::NEG_INFINITY, S::max);
        let mut sum = S::ZERO;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

pub(crate) const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
pub(crate) const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact Gaussian-CDF GELU.
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    S::from_f64(0.5) * x * (S::ONE + (x * S::from_f64(INV_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = S::from_f64(0.5) * (S::ONE + (x * S::from_f64(INV_SQRT_2)).erf());
    let pdf = S::from_f64(INV_SQRT_2PI) * (-(x * x) * S::from_f64(0.5)).exp();
    cdf + x * pdf
}

/// Normalized rows and their reciprocal standard deviations.
pub(crate) fn normalize_rows<S: Scalar>(x: &[S], cols: usize, eps: f64) -> (Vec<S>, Vec<S>) {
    let mut xhat = vec![S::ZERO; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols);
    let n = S::from_f64(cols as f64);
    for (xr, hr) in x.chunks(cols).zip(xhat.chunks_mut(cols)) {
        let mut mean = S::ZERO;
        for &v in xr {
            mean += v;
        }
        mean = mean / n;
        let mut var = S::ZERO;
        for &v in xr {
            var += (v - mean) * (v - mean);
        }
        var = var / n;
        let r = S::ONE / (var + S::from_f64(eps)).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Masked cross-entropy summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Mean (or sum) of `-log softmax(logits)[label]` over contributing rows.
    pub loss: f64,
    /// Sum over contributing rows, independent of the reduction.
    pub total: f64,
    /// Number of rows whose label is not ignored.
    pub count: usize,
}

impl CrossEntropy {
    /// True when every row was ignored and the loss is the conventional zero.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Returns the per-row softmax and the summed negative log-likelihood.
pub(crate) fn ce_forward<S: Scalar>(
    logits: &[S],
    classes: usize,
    labels: &[i32],
) -> Result<(Vec<S>, f64, usize)> {
    let rows = logits.len() / classes.max(1);
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: vec![rows, classes],
            right: vec![labels.len()],
        });
    }
    let probs = softmax_rows(logits, classes);
    let mut total = 0.0;
    let mut count = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label < 0 || label as usize >= classes {
            return Err(Error::LabelRange { label, classes });
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(S::NEG_INFINITY, S::max).to_f64();
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v.to_f64() - max)).sum::<f64>());
        total += lse - row[label as usize].to_f64();
        count += 1;
    }
    Ok((probs, total, count))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (shape `(N, K)`), skipping rows labeled [`IGNORE`]. Zero when every
/// row is ignored.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[i32]) -> Result<CrossEntropy> {
    let (_, total, count) = ce_forward(logits.data(), logits.cols(), labels)?;
    Ok(CrossEntropy {
        loss: if count == 0 { 0.0 } else { total / count as f64 },
        total,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // a (2,3), b (3,2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut nn = [0.0f64; 4];
        mm_nn(&a, &b, &mut nn, 2, 3, 2);
        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = [0.0f64; 4];
        mm_nt(&a, &bt, &mut nt, 2, 3, 2);
        assert_eq!(nt, nn);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0f64; 4];
        mm_tn(&at, &b, &mut tn, 2, 3, 2);
        assert_eq!(tn, nn);
    }

    #[test]
    fn softmax_uniform_and_gelu_zero() {
        assert_eq!(softmax_rows(&[0.0f64; 4], 4), [0.25; 4]);
        assert_eq!(gelu(0.0f64), 0.0);
        let (xhat, _) = normalize_rows(&[3.0f64; 5], 5, 1e-12);
        assert!(xhat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_conventions() {
        let uniform = Tensor::<f64>::zeros(&[1, 4]);
        let ce = cross_entropy(&uniform, &[2]).unwrap();
        assert!((ce.loss - libm::log(4.0)).abs() < 1e-12);
        let ce = cross_entropy(&Tensor::<f64>::zeros(&[2, 4]), &[IGNORE, IGNORE]).unwrap();
        assert!(ce.is_empty() && ce.loss == 0.0);
        let logits = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let single = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 0.5]).unwrap();
        let two = cross_entropy(&logits, &[1, IGNORE]).unwrap();
        assert!((two.loss - cross_entropy(&single, &[1]).unwrap().loss).abs() < 1e-15);
        assert!(cross_entropy(&logits, &[3, 0]).is_err());
    }
}
