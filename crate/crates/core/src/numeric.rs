//! Shared numerics: stable softmax / log-sum-exp used by inference, the
//! unrolled-gradient tape, and the synthetic generator.

/// `softmax(scores)` with max subtraction.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= z;
    }
    out
}

/// `ln sum_i exp(x_i)` with max subtraction.
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `ln softmax(scores)`, elementwise.
pub(crate) fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let z = logsumexp(scores);
    scores.iter().map(|s| s - z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_invariant_to_shifts_and_normalized() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_handles_large_magnitudes() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_softmax_matches_ln_of_softmax() {
        let s = [0.3, -1.2, 2.0, 0.0];
        let a = log_softmax(&s);
        let b = softmax(&s);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y.ln()).abs() < 1e-12);
        }
    }
}
