//! Rank-based statistical tests. Friedman and Wilcoxon switch to exact
//! enumeration on small instances so they agree with brute-force oracles;
//! larger instances use the standard asymptotic approximations with tie
//! corrections.

use super::AnalysisError;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Assignments budget below which Friedman p-values are computed by exact
/// permutation enumeration ((k!)^n assignments).
const FRIEDMAN_EXACT_LIMIT: f64 = 2_000_000.0;
/// Wilcoxon switches to the exact 2^n sign-assignment distribution at or
/// below this many non-zero pairs.
const WILCOXON_EXACT_MAX_N: usize = 15;

/// Average (mid) ranks, 1-based, ties share the mean of their positions.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0; // 1-based positions i+1..=j+1
        for &orig in &idx[i..=j] {
            ranks[orig] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Tie term Σ(t³ − t) over tie groups of one ranked block.
fn tie_term(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        term += t * t * t - t;
        i = j + 1;
    }
    term
}

fn friedman_statistic(block_ranks: &[Vec<f64>], tie_total: f64, k: usize) -> f64 {
    let n = block_ranks.len() as f64;
    let kf = k as f64;
    let mut rank_sums = vec![0.0; k];
    for block in block_ranks {
        for (j, r) in block.iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let raw = 12.0 / (n * kf * (kf + 1.0)) * sum_sq - 3.0 * n * (kf + 1.0);
    let correction = 1.0 - tie_total / (n * kf * (kf * kf - 1.0));
    if correction <= 0.0 {
        0.0
    } else {
        raw / correction
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, remaining: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..remaining.len() {
            let v = remaining.remove(i);
            prefix.push(v);
            go(prefix, remaining, out);
            prefix.pop();
            remaining.insert(i, v);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..k).collect(), &mut out);
    out
}

fn friedman_exact_p(block_ranks: &[Vec<f64>], tie_total: f64, k: usize, observed: f64) -> f64 {
    let perms = permutations(k);
    let n = block_ranks.len();
    let mut rank_sums = vec![0.0; k];
    let mut hits = 0u64;
    let mut total = 0u64;

    fn recurse(
        level: usize,
        n: usize,
        k: usize,
        block_ranks: &[Vec<f64>],
        perms: &[Vec<usize>],
        rank_sums: &mut Vec<f64>,
        tie_total: f64,
        observed: f64,
        hits: &mut u64,
        total: &mut u64,
    ) {
        if level == n {
            let nf = n as f64;
            let kf = k as f64;
            let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
            let raw = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
            let correction = 1.0 - tie_total / (nf * kf * (kf * kf - 1.0));
            let stat = if correction <= 0.0 { 0.0 } else { raw / correction };
            if stat >= observed - 1e-9 {
                *hits += 1;
            }
            *total += 1;
            return;
        }
        for perm in perms {
            for (j, &src) in perm.iter().enumerate() {
                rank_sums[j] += block_ranks[level][src];
            }
            recurse(
                level + 1,
                n,
                k,
                block_ranks,
                perms,
                rank_sums,
                tie_total,
                observed,
                hits,
                total,
            );
            for (j, &src) in perm.iter().enumerate() {
                rank_sums[j] -= block_ranks[level][src];
            }
        }
    }

    recurse(
        0,
        n,
        k,
        block_ranks,
        &perms,
        &mut rank_sums,
        tie_total,
        observed,
        &mut hits,
        &mut total,
    );
    hits as f64 / total as f64
}

/// Friedman rank test over a `methods × scenarios` score matrix.
///
/// Returns the tie-corrected chi-square statistic and its p-value. Small
/// instances are solved by exact permutation enumeration; larger ones use the
/// chi-square approximation with `k − 1` degrees of freedom.
pub fn friedman_test(scores: &[Vec<f64>]) -> Result<(f64, f64), AnalysisError> {
    let k = scores.len();
    if k < 2 {
        return Err(AnalysisError::DegenerateInput(
            "need at least 2 methods".into(),
        ));
    }
    let n = scores[0].len();
    if n < 2 {
        return Err(AnalysisError::DegenerateInput(
            "need at least 2 scenarios".into(),
        ));
    }
    if scores.iter().any(|row| row.len() != n) {
        return Err(AnalysisError::LengthMismatch(n, 0));
    }

    // Blocks are scenarios: one vector of k method scores per scenario.
    let mut block_ranks = Vec::with_capacity(n);
    let mut tie_total = 0.0;
    let mut any_constant_block = false;
    for s in 0..n {
        let block: Vec<f64> = (0..k).map(|m| scores[m][s]).collect();
        if block.iter().all(|v| *v == block[0]) {
            any_constant_block = true;
        }
        tie_total += tie_term(&block);
        block_ranks.push(average_ranks(&block));
    }
    if any_constant_block && n < 3 {
        return Err(AnalysisError::DegenerateInput(
            "constant scenario with fewer than 3 scenarios".into(),
        ));
    }

    let stat = friedman_statistic(&block_ranks, tie_total, k);
    if stat == 0.0 {
        return Ok((0.0, 1.0));
    }

    let mut fact = 1.0;
    for i in 2..=k {
        fact *= i as f64;
    }
    let assignments = fact.powi(n as i32);
    let p = if assignments <= FRIEDMAN_EXACT_LIMIT {
        friedman_exact_p(&block_ranks, tie_total, k, stat)
    } else {
        let chi = ChiSquared::new((k - 1) as f64).expect("df >= 1");
        1.0 - chi.cdf(stat)
    };
    Ok((stat, p))
}

/// Sidedness of the Wilcoxon test, defined on differences `x − y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// x tends to exceed y.
    Greater,
    /// x tends to fall below y.
    Less,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// The statistic is W⁺, the rank sum of positive differences. Zero
/// differences are dropped; exact enumeration is used for n ≤ 15 and the
/// tie-corrected normal approximation beyond.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<(f64, f64), AnalysisError> {
    wilcoxon_signed_rank_with(x, y, Alternative::TwoSided)
}

pub fn wilcoxon_signed_rank_with(
    x: &[f64],
    y: &[f64],
    alt: Alternative,
) -> Result<(f64, f64), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(AnalysisError::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(AnalysisError::TooFewPairs(n));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let mean = n as f64 * (n as f64 + 1.0) / 4.0;

    let p = if n <= WILCOXON_EXACT_MAX_N {
        // Exact conditional distribution over all 2^n sign assignments of the
        // observed (possibly tied) ranks.
        let total = 1u64 << n;
        let mut hits = 0u64;
        for mask in 0..total {
            let mut w = 0.0;
            for (bit, r) in ranks.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    w += r;
                }
            }
            let hit = match alt {
                Alternative::Greater => w >= w_plus - 1e-12,
                Alternative::Less => w <= w_plus + 1e-12,
                Alternative::TwoSided => (w - mean).abs() >= (w_plus - mean).abs() - 1e-12,
            };
            if hit {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    } else {
        let tie = tie_term(&abs);
        let var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0 - tie / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = (w_plus - mean) / var.sqrt();
            let norm = Normal::new(0.0, 1.0).expect("unit normal");
            match alt {
                Alternative::Greater => 1.0 - norm.cdf(z),
                Alternative::Less => norm.cdf(z),
                Alternative::TwoSided => (2.0 * (1.0 - norm.cdf(z.abs()))).min(1.0),
            }
        }
    };
    Ok((w_plus, p))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::DegenerateInput(
            "need at least 2 observations".into(),
        ));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn friedman_identical_methods_scores_zero() {
        let scores = vec![vec![3.0, 5.0, 2.0, 7.0]; 3];
        let (stat, p) = friedman_test(&scores).unwrap();
        assert_eq!(stat, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn friedman_strict_dominance_is_significant() {
        // Method A strictly beats B on every one of 10 scenarios.
        let a: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        let b: Vec<f64> = (0..10).map(|i| 2.0 + i as f64).collect();
        let (_, p) = friedman_test(&[a, b].to_vec()).unwrap();
        assert!(p < 0.01, "p = {p}");
        // For k = 2 the exact test reduces to a sign test: 2 of 2^10
        // assignments reach the all-agree statistic.
        assert!((p - 2.0 / 1024.0).abs() < 1e-12, "p = {p}");
    }

    /// Independent oracle: direct enumeration recomputing ranks from scratch
    /// for every permuted matrix.
    fn friedman_oracle(scores: &[Vec<f64>]) -> (f64, f64) {
        let k = scores.len();
        let n = scores[0].len();
        let stat_of = |mat: &Vec<Vec<f64>>| -> f64 {
            let mut rank_sums = vec![0.0; k];
            let mut tie_total = 0.0;
            for s in 0..n {
                let block: Vec<f64> = (0..k).map(|m| mat[m][s]).collect();
                tie_total += tie_term(&block);
                for (m, r) in average_ranks(&block).iter().enumerate() {
                    rank_sums[m] += r;
                }
            }
            let nf = n as f64;
            let kf = k as f64;
            let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
            let raw = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
            let c = 1.0 - tie_total / (nf * kf * (kf * kf - 1.0));
            if c <= 0.0 {
                0.0
            } else {
                raw / c
            }
        };
        let observed = stat_of(&scores.to_vec());
        let perms = permutations(k);
        let mut hits = 0u64;
        let mut total = 0u64;
        let mut counter = vec![0usize; n];
        loop {
            let mut mat = vec![vec![0.0; n]; k];
            for s in 0..n {
                let perm = &perms[counter[s]];
                for m in 0..k {
                    mat[m][s] = scores[perm[m]][s];
                }
            }
            if stat_of(&mat) >= observed - 1e-9 {
                hits += 1;
            }
            total += 1;
            // increment mixed-radix counter
            let mut pos = 0;
            loop {
                if pos == n {
                    return (observed, hits as f64 / total as f64);
                }
                counter[pos] += 1;
                if counter[pos] < perms.len() {
                    break;
                }
                counter[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn friedman_matches_exhaustive_oracle_on_crafted_3x3() {
        let scores = vec![
            vec![1.0, 5.0, 3.0],
            vec![2.0, 4.0, 9.0],
            vec![3.0, 6.0, 1.0],
        ];
        let (stat, p) = friedman_test(&scores).unwrap();
        let (ostat, op) = friedman_oracle(&scores);
        assert!((stat - ostat).abs() < 1e-12);
        assert!((p - op).abs() < 0.01, "p {p} vs oracle {op}");
    }

    #[test]
    fn friedman_matches_oracle_on_fuzzed_small_instances() {
        let mut rng = crate::seeds::rng(5, "friedman-fuzz");
        for _ in 0..25 {
            let k = rng.gen_range(2..=3);
            let n = rng.gen_range(3..=6);
            let scores: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.gen_range(0..6) as f64).collect())
                .collect();
            match friedman_test(&scores) {
                Ok((stat, p)) => {
                    let (ostat, op) = friedman_oracle(&scores);
                    assert!((stat - ostat).abs() < 1e-9, "stat {stat} vs {ostat}");
                    if stat > 0.0 {
                        assert!((p - op).abs() < 1e-9, "p {p} vs oracle {op}");
                    }
                }
                Err(AnalysisError::DegenerateInput(_)) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn friedman_degenerate_input() {
        // A constant scenario with only two scenarios total.
        let scores = vec![vec![1.0, 4.0], vec![1.0, 5.0], vec![1.0, 6.0]];
        assert!(matches!(
            friedman_test(&scores),
            Err(AnalysisError::DegenerateInput(_))
        ));
    }

    #[test]
    fn wilcoxon_all_zero_differences() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x),
            Err(AnalysisError::AllZeroDifferences)
        ));
    }

    /// Brute-force oracle over sign assignments, independent implementation.
    fn wilcoxon_oracle_two_sided(x: &[f64], y: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(a, b)| a - b)
            .filter(|v| *v != 0.0)
            .collect();
        let n = d.len();
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&abs);
        let w_obs: f64 = d
            .iter()
            .zip(&ranks)
            .filter(|(v, _)| **v > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let mean = n as f64 * (n as f64 + 1.0) / 4.0;
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = ranks
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, r)| *r)
                .sum();
            if (w - mean).abs() >= (w_obs - mean).abs() - 1e-12 {
                hits += 1;
            }
        }
        (w_obs, hits as f64 / (1u64 << n) as f64)
    }

    #[test]
    fn wilcoxon_matches_enumeration_on_crafted_n6() {
        let x = vec![12.0, 9.0, 14.0, 8.0, 11.0, 10.0];
        let y = vec![10.0, 10.0, 10.0, 10.0, 10.0, 13.0];
        let (stat, p) = wilcoxon_signed_rank(&x, &y).unwrap();
        let (ostat, op) = wilcoxon_oracle_two_sided(&x, &y);
        assert_eq!(stat, ostat);
        assert!((p - op).abs() < 1e-12, "p {p} vs oracle {op}");
    }

    #[test]
    fn wilcoxon_fuzzed_against_oracle() {
        let mut rng = crate::seeds::rng(6, "wilcoxon-fuzz");
        for _ in 0..50 {
            let n = rng.gen_range(5..=8);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            match wilcoxon_signed_rank(&x, &y) {
                Ok((stat, p)) => {
                    let (ostat, op) = wilcoxon_oracle_two_sided(&x, &y);
                    assert!((stat - ostat).abs() < 1e-12);
                    assert!((p - op).abs() < 1e-12, "p {p} vs {op}");
                }
                Err(AnalysisError::AllZeroDifferences | AnalysisError::TooFewPairs(_)) => {}
                Err(e) => panic!("unexpected {e}"),
            }
        }
    }

    #[test]
    fn wilcoxon_constant_shift_hits_distribution_minimum() {
        let x = vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let y: Vec<f64> = x.iter().map(|v| v + 2.0).collect();
        // One-sided in the direction of the shift: minimum attainable p.
        let (_, p) = wilcoxon_signed_rank_with(&x, &y, Alternative::Less).unwrap();
        assert!((p - 1.0 / 64.0).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![10.0, 20.0, 25.0, 40.0, 80.0];
        assert!((spearman_rho(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = y.iter().rev().cloned().collect();
        assert!((spearman_rho(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_tied_fixture_matches_two_step_oracle() {
        let x = vec![1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 5.0, 9.0];
        let y = vec![4.0, 4.0, 7.0, 6.0, 2.0, 2.0, 8.0, 1.0];
        // Oracle: rank both by hand then apply the Pearson formula directly.
        let rx = average_ranks(&x);
        let ry = average_ranks(&y);
        let n = rx.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let num: f64 = rx
            .iter()
            .zip(&ry)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum();
        let den = (rx.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>()
            * ry.iter().map(|b| (b - my) * (b - my)).sum::<f64>())
        .sqrt();
        let want = num / den;
        let got = spearman_rho(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_input() {
        let x = vec![2.0, 2.0, 2.0, 2.0];
        let y = vec![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            spearman_rho(&x, &y),
            Err(AnalysisError::ConstantInput)
        ));
    }

    #[test]
    fn average_ranks_handles_ties() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }
}
