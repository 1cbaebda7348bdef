use crate::scalar::Element;

use super::{DistMatrix, FusionError, GoldLabels};

/// Floor applied to probabilities before taking logs.
pub const DEFAULT_CLAMP: f64 = 1e-12;

fn check_gold<T: Element>(p: &DistMatrix<T>, gold: &GoldLabels) -> Result<(), FusionError> {
    if p.rows() != gold.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "{} distribution rows but {} gold labels",
            p.rows(),
            gold.len()
        )));
    }
    for (&id, &m) in gold.token_ids.iter().zip(&gold.loss_mask) {
        if m && id >= p.cols() {
            return Err(FusionError::OutOfVocab { id, vocab: p.cols() });
        }
    }
    Ok(())
}

fn check_pair<T: Element>(q: &DistMatrix<T>, p: &DistMatrix<T>, mask: &[bool]) -> Result<(), FusionError> {
    if q.shape() != p.shape() {
        return Err(FusionError::DimensionMismatch(format!(
            "shapes {:?} and {:?} differ",
            q.shape(),
            p.shape()
        )));
    }
    if mask.len() != q.rows() {
        return Err(FusionError::DimensionMismatch(format!(
            "{} rows but mask of length {}",
            q.rows(),
            mask.len()
        )));
    }
    Ok(())
}

/// `max(x, clamp_min)` that lets NaN through, unlike `f64::max`.
fn clamp_below(x: f64, clamp_min: f64) -> f64 {
    if x < clamp_min {
        clamp_min
    } else {
        x
    }
}

/// `−log max(P[i, gold_i], clamp_min)` for one row.
pub fn token_cross_entropy<T: Element>(p: &DistMatrix<T>, row: usize, gold: usize, clamp_min: f64) -> f64 {
    -clamp_below(p.get(row, gold).widen(), clamp_min).ln()
}

/// Mean negative log-likelihood of the gold tokens over masked-in rows; zero
/// when no row is masked in.
pub fn cross_entropy<T: Element>(
    p: &DistMatrix<T>,
    gold: &GoldLabels,
    clamp_min: f64,
) -> Result<f64, FusionError> {
    check_gold(p, gold)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&id, &m)) in gold.token_ids.iter().zip(&gold.loss_mask).enumerate() {
        if m {
            total += token_cross_entropy(p, i, id, clamp_min);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `KL(P ‖ Q)` for one row, with `0 · log 0 = 0` and `Q` clamped.
pub fn row_kl<T: Element>(q: &[T], p: &[T], clamp_min: f64) -> f64 {
    let mut total = 0.0;
    for (&qv, &pv) in q.iter().zip(p) {
        let pv = pv.widen();
        if pv > 0.0 {
            total += pv * (pv.ln() - clamp_below(qv.widen(), clamp_min).ln());
        }
    }
    total
}

/// Mean over masked-in rows of `KL(P ‖ Q)`: pulls the trainable `Q` toward the
/// teacher `P`.
pub fn kl_divergence<T: Element>(
    q: &DistMatrix<T>,
    p: &DistMatrix<T>,
    mask: &[bool],
    clamp_min: f64,
) -> Result<f64, FusionError> {
    check_pair(q, p, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        total += row_kl(q.row(i), p.row(i), clamp_min);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// The fusion objective: divergence of the target's distributions from the
/// fused teacher distributions.
pub fn fusion_loss<T: Element>(
    q: &DistMatrix<T>,
    p_fused: &DistMatrix<T>,
    mask: &[bool],
    clamp_min: f64,
) -> Result<f64, FusionError> {
    kl_divergence(q, p_fused, mask, clamp_min)
}

/// `λ · l_clm + (1 − λ) · l_fusion`.
pub fn combined_loss(l_clm: f64, l_fusion: f64, lambda: f64) -> Result<f64, FusionError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FusionError::InvalidLambda(lambda));
    }
    Ok(lambda * l_clm + (1.0 - lambda) * l_fusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        let p = DistMatrix::<f64>::one_hot(3, &[1, 2]).unwrap();
        assert_eq!(cross_entropy(&p, &GoldLabels::all(vec![1, 2]), DEFAULT_CLAMP).unwrap(), 0.0);

        let u = DistMatrix::<f64>::uniform(3, 4);
        let ce = cross_entropy(&u, &GoldLabels::all(vec![0, 1, 3]), DEFAULT_CLAMP).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        let none = GoldLabels::new(vec![0, 1, 3], vec![false; 3]).unwrap();
        assert_eq!(cross_entropy(&u, &none, DEFAULT_CLAMP).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = DistMatrix::<f64>::one_hot(2, &[0]).unwrap();
        let ce = cross_entropy(&p, &GoldLabels::all(vec![1]), 1e-12).unwrap();
        assert!((ce - 12.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nan_probabilities_are_not_clamped_away() {
        let p = DistMatrix::from_rows_unchecked(1, 2, vec![f64::NAN, f64::NAN]);
        assert!(cross_entropy(&p, &GoldLabels::all(vec![0]), DEFAULT_CLAMP).unwrap().is_nan());
        let t = DistMatrix::<f64>::uniform(1, 2);
        assert!(kl_divergence(&p, &t, &[true], DEFAULT_CLAMP).unwrap().is_nan());
    }

    #[test]
    fn cross_entropy_dimension_errors() {
        let u = DistMatrix::<f64>::uniform(2, 4);
        assert!(matches!(
            cross_entropy(&u, &GoldLabels::all(vec![0]), DEFAULT_CLAMP),
            Err(FusionError::DimensionMismatch(_))
        ));
        assert!(matches!(
            cross_entropy(&u, &GoldLabels::all(vec![0, 4]), DEFAULT_CLAMP),
            Err(FusionError::OutOfVocab { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let u = DistMatrix::<f64>::uniform(2, 2);
        assert_eq!(kl_divergence(&u, &u, &[true, true], DEFAULT_CLAMP).unwrap(), 0.0);
        let hot = DistMatrix::<f64>::one_hot(2, &[0, 1]).unwrap();
        let kl = kl_divergence(&u, &hot, &[true, true], DEFAULT_CLAMP).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert_eq!(fusion_loss(&u, &hot, &[false, false], DEFAULT_CLAMP).unwrap(), 0.0);
        assert!((fusion_loss(&u, &hot, &[true, false], DEFAULT_CLAMP).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&u, &hot, &[true], DEFAULT_CLAMP).is_err());
    }

    #[test]
    fn combined_examples() {
        assert!((combined_loss(1.0, 2.0, 0.9).unwrap() - 1.1).abs() < 1e-15);
        assert_eq!(combined_loss(1.0, 2.0, 1.0).unwrap(), 1.0);
        assert_eq!(combined_loss(1.0, 2.0, 0.0).unwrap(), 2.0);
        assert!(matches!(combined_loss(1.0, 2.0, 1.5), Err(FusionError::InvalidLambda(_))));
    }

    fn arb_rows(n: usize, v: usize) -> impl Strategy<Value = DistMatrix<f64>> {
        prop::collection::vec(-4.0f64..4.0, n * v).prop_map(move |z| DistMatrix::softmax(n, v, &z))
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(q in arb_rows(3, 5), p in arb_rows(3, 5)) {
            prop_assert!(kl_divergence(&q, &p, &[true; 3], DEFAULT_CLAMP).unwrap() >= -1e-15);
        }

        #[test]
        fn combined_is_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0, d in 0.0f64..1.0, lambda in 0.01f64..0.99) {
            let base = combined_loss(a, b, lambda).unwrap();
            prop_assert!(combined_loss(a + d, b, lambda).unwrap() >= base);
            prop_assert!(combined_loss(a, b + d, lambda).unwrap() >= base);
        }
    }
}
