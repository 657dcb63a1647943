//! Dynamic time warping with squared pointwise cost.

use super::AnalysisError;

/// Alignment cost between two raw sequences: classic dynamic programming
/// over the full cost matrix (no band constraint), squared pointwise cost.
pub fn dtw_raw(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySequence);
    }
    let n = a.len();
    let m = b.len();
    // Rolling rows keep memory at O(m).
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let d = a[i - 1] - b[j - 1];
            let cost = d * d;
            curr[j] = cost + prev[j].min(curr[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// DTW between z-score-normalized copies of the sequences. Constant
/// sequences normalize to all zeros.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    dtw_raw(&zscore(a), &zscore(b))
}

fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return values.iter().map(|v| v - mean).collect();
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    /// Exhaustive enumeration of every monotone alignment path. Only viable
    /// for very short sequences; used as the independent oracle.
    pub fn dtw_brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
            let d = a[i] - b[j];
            let cost = d * d;
            if i == a.len() - 1 && j == b.len() - 1 {
                return cost;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            cost + best
        }
        go(a, b, 0, 0)
    }

    #[test]
    fn identity_distance_is_zero() {
        let a = [1.0, 4.0, 2.0, 8.0];
        assert_eq!(dtw_raw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn shifted_bump_aligns_exactly() {
        // The warp absorbs the one-step shift on the raw variant.
        assert_eq!(dtw_raw(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn shift_beats_pointwise_distance() {
        let bump = [0.0, 0.0, 1.0, 3.0, 1.0, 0.0, 0.0, 0.0];
        let shifted = [0.0, 0.0, 0.0, 1.0, 3.0, 1.0, 0.0, 0.0];
        let dtw = dtw_raw(&bump, &shifted).unwrap();
        let pointwise: f64 = bump
            .iter()
            .zip(&shifted)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(dtw < pointwise, "dtw {dtw} vs pointwise {pointwise}");
    }

    #[test]
    fn matches_brute_force_on_fuzzed_short_pairs() {
        let mut rng = crate::seeds::rng(3, "dtw-fuzz");
        for _ in 0..1000 {
            let la = rng.gen_range(1..=5);
            let lb = rng.gen_range(1..=5);
            let a: Vec<f64> = (0..la).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..lb).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let got = dtw_raw(&a, &b).unwrap();
            let want = dtw_brute_force(&a, &b);
            assert!(
                (got - want).abs() < 1e-9,
                "dp {got} vs brute force {want} on {a:?} / {b:?}"
            );
        }
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = crate::seeds::rng(4, "dtw-sym");
        for _ in 0..200 {
            let la = rng.gen_range(1..=6);
            let lb = rng.gen_range(1..=6);
            let a: Vec<f64> = (0..la).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..lb).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ab = dtw_raw(&a, &b).unwrap();
            let ba = dtw_raw(&b, &a).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(matches!(
            dtw_raw(&[], &[1.0]),
            Err(AnalysisError::EmptySequence)
        ));
    }
}
