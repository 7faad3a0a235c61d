//! Untiled attention: the ground truth the tiled kernels are checked against.
//!
//! Forward is `S = scale·QKᵀ`, `P = softmax(S)` row-wise, `O = PV`. Backward
//! is the analytic chain rule through the same three steps, and
//! [`finite_diff_grad`] provides an independent numerical gradient.

use crate::error::{Error, Result};
use crate::tensor::{matmul, DenseTensor};

/// Step used by the finite-difference oracle in 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnParams {
    /// Multiplier applied to `QKᵀ` before the softmax.
    pub scale: f64,
}

impl Default for AttnParams {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl AttnParams {
    pub fn new(scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "softmax scale must be finite and > 0, got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    /// The customary `1/√C` scaling.
    pub fn inverse_sqrt(channels: usize) -> Self {
        Self {
            scale: 1.0 / (channels as f64).sqrt(),
        }
    }
}

/// Scores and attention weights retained from [`naive_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnIntermediates {
    pub scores: DenseTensor,
    pub weights: DenseTensor,
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax_rows(s: &DenseTensor) -> Result<DenseTensor> {
    let (rows, cols) = s.dims2()?;
    if let Some(index) = s.first_non_finite() {
        return Err(Error::NonFinite {
            op: "softmax_rows",
            index,
        });
    }
    let mut out = s.data().to_vec();
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    DenseTensor::from_vec(&[rows, cols], out)
}

fn check_qkv(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Result<()> {
    q.dims2()?;
    q.check_same_shape("attention(K)", k)?;
    q.check_same_shape("attention(V)", v)?;
    Ok(())
}

pub fn naive_forward(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    params: &AttnParams,
) -> Result<(DenseTensor, AttnIntermediates)> {
    check_qkv(q, k, v)?;
    let scores = matmul(q, &k.transpose()?)?.scaled(params.scale);
    let weights = softmax_rows(&scores)?;
    let out = matmul(&weights, v)?;
    Ok((out, AttnIntermediates { scores, weights }))
}

/// `dS_ij = P_ij (dP_ij − Σ_l P_il dP_il)`.
pub fn softmax_backward(p: &DenseTensor, dp: &DenseTensor) -> Result<DenseTensor> {
    let (rows, cols) = p.dims2()?;
    p.check_same_shape("softmax_backward", dp)?;
    let mut ds = vec![0.0; rows * cols];
    for ((out, pr), dpr) in ds
        .chunks_exact_mut(cols)
        .zip(p.data().chunks_exact(cols))
        .zip(dp.data().chunks_exact(cols))
    {
        let weighted: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for ((o, &pij), &dpij) in out.iter_mut().zip(pr).zip(dpr) {
            *o = pij * (dpij - weighted);
        }
    }
    DenseTensor::from_vec(&[rows, cols], ds)
}

/// Gradients of `⟨dO, O⟩` with respect to Q, K and V.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub dq: DenseTensor,
    pub dk: DenseTensor,
    pub dv: DenseTensor,
}

pub fn naive_backward(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cache: &AttnIntermediates,
    d_out: &DenseTensor,
    params: &AttnParams,
) -> Result<AttnGrads> {
    check_qkv(q, k, v)?;
    q.check_same_shape("naive_backward(dO)", d_out)?;
    let (l, _) = q.dims2()?;
    if cache.weights.shape() != [l, l] {
        return Err(Error::ShapeMismatch {
            op: "naive_backward(cache)",
            expected: vec![l, l],
            actual: cache.weights.shape().to_vec(),
        });
    }
    let p = &cache.weights;
    let dv = matmul(&p.transpose()?, d_out)?;
    let dp = matmul(d_out, &v.transpose()?)?;
    let ds = softmax_backward(p, &dp)?;
    let dq = matmul(&ds, k)?.scaled(params.scale);
    let dk = matmul(&ds.transpose()?, q)?.scaled(params.scale);
    Ok(AttnGrads { dq, dk, dv })
}

/// Central differences `(f(x+h·e) − f(x−h·e)) / 2h`, one element at a time.
pub fn finite_diff_grad<F>(f: F, x: &DenseTensor, h: f64) -> Result<DenseTensor>
where
    F: Fn(&DenseTensor) -> Result<f64>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Oracle(format!(
            "step must be finite and > 0, got {h}"
        )));
    }
    let mut grad = Vec::with_capacity(x.len());
    for (i, &xi) in x.data().iter().enumerate() {
        let plus = f(&x.with_element(i, xi + h))?;
        let minus = f(&x.with_element(i, xi - h))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at element {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    DenseTensor::from_vec(x.shape(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, Rng};

    fn rand(rng: &mut Rng, shape: &[usize]) -> DenseTensor {
        DenseTensor::fill_uniform(rng, shape, -1.0, 1.0).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let p = softmax_rows(&DenseTensor::zeros(&[3, 5]).unwrap()).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_ln3_row() {
        let s = DenseTensor::from_vec(&[1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax_rows(&s).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = Rng::new(9);
        let s = rand(&mut rng, &[6, 6]);
        let c = rng.uniform(-50.0, 50.0);
        let shifted = s.map(|x| x + c);
        let diff = max_abs_diff(&softmax_rows(&s).unwrap(), &softmax_rows(&shifted).unwrap());
        assert!(diff.unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_survives_large_scores() {
        let s = DenseTensor::from_vec(&[1, 2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_rows(&s).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let s = DenseTensor::from_vec(&[1, 3], vec![0.0, f64::NAN, 1.0]).unwrap();
        assert_eq!(
            softmax_rows(&s),
            Err(Error::NonFinite {
                op: "softmax_rows",
                index: 1
            })
        );
    }

    #[test]
    fn zero_keys_give_column_means() {
        let mut rng = Rng::new(2);
        let (q, v) = (rand(&mut rng, &[5, 3]), rand(&mut rng, &[5, 3]));
        let k = DenseTensor::zeros(&[5, 3]).unwrap();
        let (o, _) = naive_forward(&q, &k, &v, &AttnParams::default()).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..5).map(|l| v.at(l, c)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((o.at(i, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_passes_values_through() {
        let mut rng = Rng::new(4);
        let (q, k, v) = (
            rand(&mut rng, &[1, 4]),
            rand(&mut rng, &[1, 4]),
            rand(&mut rng, &[1, 4]),
        );
        let (o, cache) = naive_forward(&q, &k, &v, &AttnParams::default()).unwrap();
        assert_eq!(cache.weights.data(), &[1.0]);
        assert_eq!(o, v);
        let d_out = rand(&mut rng, &[1, 4]);
        let g = naive_backward(&q, &k, &v, &cache, &d_out, &AttnParams::default()).unwrap();
        assert_eq!(g.dv, d_out);
        assert!(g.dq.data().iter().chain(g.dk.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn output_within_value_hull() {
        let mut rng = Rng::new(8);
        let (q, k, v) = (
            rand(&mut rng, &[8, 4]),
            rand(&mut rng, &[8, 4]),
            rand(&mut rng, &[8, 4]),
        );
        let (o, _) = naive_forward(&q, &k, &v, &AttnParams::default()).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..8).map(|l| v.at(l, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..8 {
                assert!(o.at(i, c) >= lo - 1e-15 && o.at(i, c) <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn softmax_backward_trivial_cases() {
        let mut rng = Rng::new(1);
        let p = softmax_rows(&rand(&mut rng, &[4, 4])).unwrap();
        let zero = DenseTensor::zeros(&[4, 4]).unwrap();
        assert_eq!(softmax_backward(&p, &zero).unwrap(), zero);
        let row_const = DenseTensor::from_fn(&[4, 4], |i| (i / 4) as f64 * 0.3 - 0.5).unwrap();
        let ds = softmax_backward(&p, &row_const).unwrap();
        assert!(ds.data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        // For fixed S and upstream dP, d⟨dP, softmax(S)⟩/dS == softmax_backward(P, dP).
        let mut rng = Rng::new(6);
        let s = rand(&mut rng, &[6, 6]);
        let dp = rand(&mut rng, &[6, 6]);
        let p = softmax_rows(&s).unwrap();
        let analytic = softmax_backward(&p, &dp).unwrap();
        let numeric = finite_diff_grad(|x| softmax_rows(x)?.dot(&dp), &s, FD_STEP).unwrap();
        assert!(max_abs_diff(&analytic, &numeric).unwrap() <= 1e-6);
        for row in analytic.data().chunks(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let (q, k, v) = (
            rand(&mut rng, &[6, 3]),
            rand(&mut rng, &[6, 3]),
            rand(&mut rng, &[6, 3]),
        );
        let p = AttnParams::default();
        let (_, cache) = naive_forward(&q, &k, &v, &p).unwrap();
        let zero = DenseTensor::zeros(&[6, 3]).unwrap();
        let g = naive_backward(&q, &k, &v, &cache, &zero, &p).unwrap();
        assert_eq!(
            (g.dq.clone(), g.dk.clone(), g.dv.clone()),
            (zero.clone(), zero.clone(), zero)
        );
    }

    #[test]
    fn naive_backward_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let (q, k, v) = (
            rand(&mut rng, &[8, 4]),
            rand(&mut rng, &[8, 4]),
            rand(&mut rng, &[8, 4]),
        );
        let d_out = rand(&mut rng, &[8, 4]);
        for params in [AttnParams::default(), AttnParams::inverse_sqrt(4)] {
            let (_, cache) = naive_forward(&q, &k, &v, &params).unwrap();
            let g = naive_backward(&q, &k, &v, &cache, &d_out, &params).unwrap();
            let loss = |q: &DenseTensor, k: &DenseTensor, v: &DenseTensor| {
                naive_forward(q, k, v, &params)?.0.dot(&d_out)
            };
            let fq = finite_diff_grad(|x| loss(x, &k, &v), &q, FD_STEP).unwrap();
            let fk = finite_diff_grad(|x| loss(&q, x, &v), &k, FD_STEP).unwrap();
            let fv = finite_diff_grad(|x| loss(&q, &k, x), &v, FD_STEP).unwrap();
            assert!(max_abs_diff(&g.dq, &fq).unwrap() <= 1e-6);
            assert!(max_abs_diff(&g.dk, &fk).unwrap() <= 1e-6);
            assert!(max_abs_diff(&g.dv, &fv).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn finite_diff_polynomial_and_linear() {
        let x = DenseTensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.dot(t), &x, FD_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);

        let a = DenseTensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        for h in [0.25, 0.5, 1.0] {
            let g = finite_diff_grad(|t| t.dot(&a), &x, h).unwrap();
            assert_eq!(g, a);
        }
        for h in [1e-5, 1e-3, 0.1] {
            let g = finite_diff_grad(|t| t.dot(&a), &x, h).unwrap();
            assert!(max_abs_diff(&g, &a).unwrap() < 1e-10);
        }
    }

    #[test]
    fn finite_diff_errors() {
        let x = DenseTensor::zeros(&[2]).unwrap();
        assert!(matches!(
            finite_diff_grad(|t| Ok(t.sum()), &x, 0.0),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            finite_diff_grad(|t| Ok(1.0 / t.sum().abs().min(0.0)), &x, 1e-5),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = DenseTensor::zeros(&[4, 3]).unwrap();
        let b = DenseTensor::zeros(&[4, 2]).unwrap();
        assert!(matches!(
            naive_forward(&a, &b, &a, &AttnParams::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(AttnParams::new(0.0).is_err());
        assert!(AttnParams::new(f64::NAN).is_err());
    }
}
