//! Correlation coefficients, rank-sum test and least-squares helpers.

use std::cmp::Ordering;

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error("non-finite value in input")]
    NonFinite,
}

fn check(x: &[f64], y: &[f64], needed: usize) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < needed {
        return Err(StatsError::TooShort {
            needed,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Undefined("constant series"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y, 2)?;
    pearson_unchecked(x, y)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y, 3)?;
    pearson_unchecked(&average_ranks(x), &average_ranks(y))
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        total += t * (t - 1) / 2;
        i = j;
    }
    total
}

fn distinct(sorted: &[f64]) -> usize {
    let mut n = 0;
    for (i, v) in sorted.iter().enumerate() {
        if i == 0 || *v != sorted[i - 1] {
            n += 1;
        }
    }
    n
}

// Counts strict inversions while merge-sorting.
fn sort_counting_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = sort_counting_inversions(&mut v[..mid], buf) + sort_counting_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            count += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    count
}

/// Concordant minus discordant pairs, in O(n log n).
pub fn concordance_difference(x: &[f64], y: &[f64]) -> i64 {
    let n = x.len() as u64;
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap_or(Ordering::Equal)
            .then(y[a].partial_cmp(&y[b]).unwrap_or(Ordering::Equal))
    });
    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();

    let tied_x = tie_pairs(&xs);
    let mut tied_both = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[j] == xs[i] && ys[j] == ys[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        tied_both += t * (t - 1) / 2;
        i = j;
    }
    let discordant = sort_counting_inversions(&mut ys, &mut Vec::with_capacity(idx.len()));
    let tied_y = tie_pairs(&ys);
    let pairs = n * n.saturating_sub(1) / 2;
    let untied = pairs + tied_both - tied_x - tied_y;
    untied as i64 - 2 * discordant as i64
}

/// Stuart–Kendall τ_c = 2m(C − D) / (n²(m − 1)), m = min(#distinct x, #distinct y).
pub fn kendall_tau_c(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y, 2)?;
    let mut sx = x.to_vec();
    let mut sy = y.to_vec();
    sx.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    sy.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let m = distinct(&sx).min(distinct(&sy)) as f64;
    if m < 2.0 {
        return Err(StatsError::Undefined("fewer than two distinct values"));
    }
    let n = x.len() as f64;
    let diff = concordance_difference(x, y) as f64;
    Ok((2.0 * m * diff / (n * n * (m - 1.0))).clamp(-1.0, 1.0))
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    check(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::Undefined("constant regressor"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Mean absolute deviation from the mean.
pub fn mean_absolute_deviation(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).abs()).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSumResult {
    /// Mann–Whitney U of the first sample.
    pub u: f64,
    /// One-sided p-value for "first sample tends to be larger".
    pub p_value: f64,
    pub exact: bool,
}

const EXACT_LIMIT: usize = 50;

/// One-sided Wilcoxon rank-sum (Mann–Whitney) test of `x` > `y`.
///
/// Exact null distribution for untied samples of at most 50 each; otherwise
/// the normal approximation with tie and continuity corrections.
pub fn rank_sum_greater(x: &[f64], y: &[f64]) -> Result<RankSumResult, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::TooShort {
            needed: 1,
            got: x.len().min(y.len()),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (nx, ny) = (x.len(), y.len());
    let joined: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = average_ranks(&joined);
    let rank_sum_x: f64 = ranks[..nx].iter().sum();
    let u = rank_sum_x - (nx * (nx + 1)) as f64 / 2.0;

    let mut sorted = joined.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let has_ties = distinct(&sorted) != sorted.len();

    if !has_ties && nx <= EXACT_LIMIT && ny <= EXACT_LIMIT {
        let dist = exact_u_distribution(nx, ny);
        let u_int = u.round() as usize;
        let p: f64 = dist[u_int..].iter().sum();
        return Ok(RankSumResult {
            u,
            p_value: p.min(1.0),
            exact: true,
        });
    }

    let (fx, fy) = (nx as f64, ny as f64);
    let n = fx + fy;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = fx * fy / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mu = fx * fy / 2.0;
    let p_value = if var <= 0.0 {
        if u > mu {
            0.0
        } else {
            1.0
        }
    } else {
        let z = (u - mu - 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        1.0 - normal.cdf(z)
    };
    Ok(RankSumResult {
        u,
        p_value,
        exact: false,
    })
}

/// Probability mass of U for sample sizes (m, n) under the null, indexed by U.
fn exact_u_distribution(m: usize, n: usize) -> Vec<f64> {
    // table[i][u]: P(U = u) for sizes (i, j) as j advances to n
    let max_u = m * n;
    let mut table: Vec<Vec<f64>> = (0..=m)
        .map(|_| {
            let mut v = vec![0.0; max_u + 1];
            v[0] = 1.0;
            v
        })
        .collect();
    for j in 1..=n {
        // sizes (0, j): U is always 0, row already correct
        for i in 1..=m {
            let total = (i + j) as f64;
            let (wi, wj) = (i as f64 / total, j as f64 / total);
            // largest element from x adds j to U; from y adds nothing
            let mut next = vec![0.0; max_u + 1];
            for u in 0..=i * j {
                let from_x = if u >= j { table[i - 1][u - j] } else { 0.0 };
                next[u] = wi * from_x + wj * table[i][u];
            }
            table[i] = next;
        }
    }
    table.swap_remove(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Ok(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]), Ok(-1.0));
        assert_eq!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::Undefined("constant series"))
        );
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooShort { .. })));
        // ties: ranks x = [1.5,1.5,3,4], y = [1,2,3,4]; hand computed r = 0.9486832980505138
        let r = spearman(&[5.0, 5.0, 7.0, 9.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(close(r, 0.9486832980505138), "{r}");
    }

    #[test]
    fn ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn tau_c_examples() {
        // C = 6, D = 0, m = 4: 2·4·6 / (16·3) = 1
        assert_eq!(kendall_tau_c(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]), Ok(1.0));
        assert_eq!(kendall_tau_c(&[1.0, 2.0, 3.0, 4.0], &[8.0, 6.0, 4.0, 2.0]), Ok(-1.0));
        assert!(kendall_tau_c(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        // x = [1,1,2,3], y = [1,2,2,3]: C = 4, D = 0, m = 3 → 2·3·4/(16·2) = 0.75
        assert!(close(kendall_tau_c(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.75));
    }

    #[test]
    fn pearson_and_fit() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 100.0 - v).collect();
        assert_eq!(pearson(&x, &y), Ok(-1.0));
        let (slope, intercept) = linear_fit(&x, &y).unwrap();
        assert!(close(slope, -1.0) && close(intercept, 100.0));
        assert_eq!(mean_absolute_deviation(&[5.0, 5.0, 5.0]), 0.0);
        assert_eq!(mean_absolute_deviation(&[1.0, 3.0]), 1.0);
    }

    #[test]
    fn exact_distribution_matches_enumeration() {
        // m = 2, n = 2: U ∈ {0,1,2,2,3,4} over the 6 arrangements
        let d = exact_u_distribution(2, 2);
        let expect = [1.0, 1.0, 2.0, 1.0, 1.0].map(|c| c / 6.0);
        for (a, b) in d.iter().zip(expect) {
            assert!(close(*a, b));
        }
        assert!(close(exact_u_distribution(7, 4).iter().sum::<f64>(), 1.0));
    }

    #[test]
    fn rank_sum_separated_samples() {
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let x: Vec<f64> = y.iter().map(|v| v + 50.0).collect();
        let r = rank_sum_greater(&x, &y).unwrap();
        assert!(r.exact);
        assert_eq!(r.u, 100.0);
        // only one of C(20,10) = 184756 arrangements is this extreme
        assert!(close(r.p_value, 1.0 / 184_756.0));
        let back = rank_sum_greater(&y, &x).unwrap();
        assert!(close(back.p_value, 1.0));
    }

    #[test]
    fn rank_sum_normal_approximation_with_ties() {
        let x = [3.0, 3.0, 4.0, 5.0, 5.0, 6.0];
        let y = [1.0, 2.0, 3.0, 3.0, 4.0, 4.0];
        let r = rank_sum_greater(&x, &y).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 0.05 && r.p_value > 0.0);
        let same = rank_sum_greater(&x, &x).unwrap();
        assert!(same.p_value > 0.4);
    }

    fn brute_tau_c(x: &[f64], y: &[f64]) -> Option<f64> {
        let n = x.len();
        let mut s = 0i64;
        for i in 0..n {
            for j in i + 1..n {
                let a = (x[i] - x[j]).signum() * (if x[i] == x[j] { 0.0 } else { 1.0 });
                let b = (y[i] - y[j]).signum() * (if y[i] == y[j] { 0.0 } else { 1.0 });
                s += (a * b) as i64;
            }
        }
        let count = |v: &[f64]| {
            let mut u: Vec<f64> = v.to_vec();
            u.sort_by(|a, b| a.partial_cmp(b).unwrap());
            u.dedup();
            u.len()
        };
        let m = count(x).min(count(y)) as f64;
        (m >= 2.0).then(|| 2.0 * m * s as f64 / ((n * n) as f64 * (m - 1.0)))
    }

    proptest! {
        #[test]
        fn tau_c_matches_pairwise_enumeration(
            pairs in prop::collection::vec((0u8..6, 0u8..6), 2..40)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            match (kendall_tau_c(&x, &y), brute_tau_c(&x, &y)) {
                (Ok(a), Some(b)) => prop_assert!((a - b).abs() < 1e-10),
                (Err(_), None) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn correlations_invariant_under_monotone_maps(
            pairs in prop::collection::vec((0u8..20, 0u8..20), 3..30)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let fx: Vec<f64> = x.iter().map(|v| (v / 3.0).exp()).collect();
            let fy: Vec<f64> = y.iter().map(|v| v * v * v + 2.0).collect();
            match (spearman(&x, &y), spearman(&fx, &fy)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
            match (kendall_tau_c(&x, &y), kendall_tau_c(&fx, &fy)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }
    }
}
