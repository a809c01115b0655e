use super::{NumError, Result};

/// `log Σ exp(v_i)` with the maximum shifted out.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(NumError::Empty("log_sum_exp"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumError::NonFinite("log_sum_exp"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(NumError::Empty("softmax"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(NumError::NonFinite("softmax"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|x| x - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-50.0, 0.0, 3.7, 1e3] {
            let p = softmax(&[c, c, c]).unwrap();
            for x in p {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        let a = -2.5;
        assert!((log_sum_exp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert_eq!(big, 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[]), Err(NumError::Empty("log_sum_exp")));
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
