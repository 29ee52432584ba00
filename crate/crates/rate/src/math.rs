//! Log-space numeric helpers shared by the sampler and the oracles.

use rand::Rng;
pub use statrs::function::gamma::ln_gamma;

/// log of the rising factorial: sum_{l=0}^{n-1} ln(x + l).
///
/// Counts encountered here are small (bounded by document length), so a
/// direct sum is both exact enough and faster than two `ln_gamma` calls.
pub fn ln_rising(x: f64, n: u32) -> f64 {
    let mut acc = 0.0;
    for l in 0..n {
        acc += (x + l as f64).ln();
    }
    acc
}

/// ln Gamma(x + n) - ln Gamma(x) for potentially large integer n.
pub fn ln_rising_big(x: f64, n: u64) -> f64 {
    if n < 32 {
        ln_rising(x, n as u32)
    } else {
        ln_gamma(x + n as f64) - ln_gamma(x)
    }
}

/// Normalize a slice of log-weights into a probability vector.
pub fn log_weights_to_probs(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(m.is_finite(), "all categorical log-weights are -inf or NaN");
    let w: Vec<f64> = log_w.iter().map(|&lw| (lw - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Draw a category index from unnormalized log-weights.
pub fn sample_log_weights<R: Rng + ?Sized>(rng: &mut R, log_w: &[f64]) -> usize {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(m.is_finite(), "all categorical log-weights are -inf or NaN");
    let w: Vec<f64> = log_w.iter().map(|&lw| (lw - m).exp()).collect();
    let total: f64 = w.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite());
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rising_factorial_matches_gamma_ratio() {
        for &(x, n) in &[(0.01, 5u32), (1.5, 12), (30.0, 40), (0.3, 1), (2.0, 0)] {
            let direct = ln_rising(x, n);
            let via_gamma = ln_gamma(x + n as f64) - ln_gamma(x);
            assert_relative_eq!(direct, via_gamma, epsilon = 1e-10, max_relative = 1e-12);
        }
    }

    #[test]
    fn log_weight_sampling_is_shift_invariant() {
        let lw = [-1.0, -2.0, 0.5];
        let shifted: Vec<f64> = lw.iter().map(|x| x + 123.0).collect();
        let p1 = log_weights_to_probs(&lw);
        let p2 = log_weights_to_probs(&shifted);
        for (a, b) in p1.iter().zip(&p2) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(
                sample_log_weights(&mut r1, &lw),
                sample_log_weights(&mut r2, &shifted)
            );
        }
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let lw = [0.0f64, (2.0f64).ln(), (5.0f64).ln()];
        let probs = log_weights_to_probs(&lw);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_log_weights(&mut rng, &lw)] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            let sigma = (probs[i] * (1.0 - probs[i]) / n as f64).sqrt();
            assert!(
                (freq - probs[i]).abs() < 4.0 * sigma,
                "category {i}: freq {freq} vs prob {}",
                probs[i]
            );
        }
    }
}
