//! Plain slice kernels shared by the graph and the cached inference path.

use super::{Result, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Row vector times matrix: `x[k] · b[k×n]`.
pub fn vecmat(x: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    matmul(x, b, 1, x.len(), n)
}

pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(TensorError::Dimension {
            op: "softmax",
            lhs: vec![0],
            rhs: vec![1],
        });
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(TensorError::Dimension {
            op: "log_softmax",
            lhs: vec![0],
            rhs: vec![1],
        });
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|&v| v - lse).collect())
}

/// Normalizes one row; returns `(output, normalized input, 1/std)`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((h, g), b)| h * g + b)
        .collect();
    (out, xhat, inv_std)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-700.0, 0.0, 3.5, 800.0] {
            let p = softmax(&[c, c, c]).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = [1.0f64, 2.0, 3.0];
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        let p = softmax(&x).unwrap();
        for (pi, xi) in p.iter().zip(x) {
            assert!((pi - xi.exp() / denom).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn layer_norm_reference_values() {
        let (y, _, _) = layer_norm(&[1.0; 4], &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS);
        assert_eq!(y, vec![0.0; 4]);
        let (y, _, _) = layer_norm(&[0.0, 2.0], &[1.0; 2], &[0.0; 2], LAYER_NORM_EPS);
        assert!((y[0] + 1.0).abs() < 1e-3 && (y[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
