//! Small numeric helpers shared across modules.

use rand::Rng;

/// Numerically stable logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(sum_i w_i * exp(x_i)) with max subtraction. Entries with w_i = 0 are skipped.
pub fn weighted_log_sum_exp(xs: &[f64], ws: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ws.len());
    let mut m = f64::NEG_INFINITY;
    for (x, w) in xs.iter().zip(ws) {
        if *w > 0.0 && *x > m {
            m = *x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for (x, w) in xs.iter().zip(ws) {
        if *w > 0.0 {
            sum += w * (x - m).exp();
        }
    }
    m + sum.ln()
}

/// Sample an index from an (unnormalized) non-negative weight vector.
pub fn sample_categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "categorical weights must have positive mass");
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, SeedableRng};

    #[test]
    fn logistic_matches_naive_form() {
        for z in [-30.0, -1.0, 0.0, 0.5, 20.0] {
            let naive = 1.0 / (1.0 + (-z as f64).exp());
            assert!((logistic(z) - naive).abs() < 1e-15);
        }
    }

    #[test]
    fn lse_skips_zero_weight_entries() {
        let v = weighted_log_sum_exp(&[1000.0, 0.0], &[0.0, 1.0]);
        assert!((v - 0.0).abs() < 1e-15);
    }

    #[test]
    fn categorical_respects_support() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let i = sample_categorical(&[0.0, 0.3, 0.7], &mut rng);
            assert!(i == 1 || i == 2);
        }
    }
}
