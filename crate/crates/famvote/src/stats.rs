//! Resampling statistics: percentile bootstrap CIs, paired bootstrap
//! significance, and the Mann-Whitney U test.
//!
//! All resampling uses ChaCha8 with one stream per resample index, so
//! results are identical under any parallel schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FamvoteError, Result};

/// Default bootstrap resample count.
pub const DEFAULT_RESAMPLES: usize = 2000;

/// Point estimate with a 95% percentile bootstrap interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub seed: u64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pearson correlation; zero-variance inputs yield 0.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "pearson needs equal-length vectors");
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Linear-interpolation percentile of a sorted slice, p in [0, 100].
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

fn resample_mean(values: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let n = values.len();
    let mut sum = 0.0;
    for _ in 0..n {
        sum += values[rng.gen_range(0..n)];
    }
    sum / n as f64
}

/// 95% percentile bootstrap CI of the mean of per-question scores.
pub fn bootstrap_ci(scores: &[f64], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if scores.is_empty() {
        return Err(FamvoteError::usage("bootstrap_ci needs a nonempty score vector"));
    }
    if resamples == 0 {
        return Err(FamvoteError::usage("bootstrap_ci needs at least one resample"));
    }
    let mut means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            resample_mean(scores, &mut rng)
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("resample means are finite"));
    Ok(BootstrapResult {
        point: mean(scores),
        ci_low: percentile_sorted(&means, 2.5),
        ci_high: percentile_sorted(&means, 97.5),
        resamples,
        seed,
    })
}

/// One-sided paired bootstrap p-value: the fraction of resamples where the
/// baseline `scores_b` outperforms the method `scores_a`. Ties count 0.5.
pub fn paired_bootstrap_p(
    scores_a: &[f64],
    scores_b: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if scores_a.is_empty() {
        return Err(FamvoteError::usage("paired_bootstrap_p needs nonempty vectors"));
    }
    if scores_a.len() != scores_b.len() {
        return Err(FamvoteError::usage(format!(
            "paired vectors differ in length: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if resamples == 0 {
        return Err(FamvoteError::usage("paired_bootstrap_p needs at least one resample"));
    }
    let n = scores_a.len();
    let total: f64 = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut sum_a = 0.0;
            let mut sum_b = 0.0;
            for _ in 0..n {
                let idx = rng.gen_range(0..n);
                sum_a += scores_a[idx];
                sum_b += scores_b[idx];
            }
            if sum_b > sum_a {
                1.0
            } else if sum_b == sum_a {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / resamples as f64)
}

/// U statistic for group a: #{(i,j): a_i > b_j} + 0.5 * #ties.
pub fn mann_whitney_u(group_a: &[f64], group_b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &a in group_a {
        for &b in group_b {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u
}

/// Exact null distribution path limit: both groups at most this large.
const EXACT_MAX_N: usize = 20;

/// Two-sided Mann-Whitney p-value.
///
/// For untied samples with max(n_a, n_b) <= 20 the exact null distribution
/// of U is computed by dynamic programming; otherwise the normal
/// approximation with tie correction applies. Fully tied data (zero
/// variance) returns 1.0.
pub fn mann_whitney_p(group_a: &[f64], group_b: &[f64]) -> Result<f64> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(FamvoteError::usage("mann_whitney_p needs nonempty groups"));
    }
    let has_ties = {
        let mut all: Vec<f64> = group_a.iter().chain(group_b.iter()).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        all.windows(2).any(|w| w[0] == w[1])
    };
    if !has_ties && group_a.len().max(group_b.len()) <= EXACT_MAX_N {
        return Ok(exact_two_sided_p(group_a, group_b));
    }
    Ok(normal_two_sided_p(group_a, group_b))
}

/// Exact two-sided p for untied samples via the U-count recurrence
/// c(n, m, u) = c(n-1, m, u-m) + c(n, m-1, u).
fn exact_two_sided_p(group_a: &[f64], group_b: &[f64]) -> f64 {
    let n = group_a.len();
    let m = group_b.len();
    let u_obs = mann_whitney_u(group_a, group_b);
    let max_u = n * m;
    // counts[i][u] = number of arrangements of i a's among the current m b's
    // with statistic u; build up m one b at a time.
    let mut counts = vec![vec![0f64; max_u + 1]; n + 1];
    counts[0][0] = 1.0;
    for row in counts.iter_mut().skip(1) {
        row[0] = 1.0;
    }
    for j in 1..=m {
        let mut next = vec![vec![0f64; max_u + 1]; n + 1];
        next[0][0] = 1.0;
        for i in 1..=n {
            for u in 0..=(i * j) {
                // Either the largest element is a b (statistic unchanged
                // from i a's, j-1 b's) or an a (each of the j b's below it
                // contributes 1).
                let from_b = counts[i][u];
                let from_a = if u >= j { next[i - 1][u - j] } else { 0.0 };
                next[i][u] = from_b + from_a;
            }
        }
        counts = next;
    }
    let total: f64 = counts[n].iter().sum();
    let u_int = u_obs.round() as usize;
    let p_le: f64 = counts[n][..=u_int.min(max_u)].iter().sum::<f64>() / total;
    let p_ge: f64 = counts[n][u_int.min(max_u)..].iter().sum::<f64>() / total;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_two_sided_p(group_a: &[f64], group_b: &[f64]) -> f64 {
    let n_a = group_a.len() as f64;
    let n_b = group_b.len() as f64;
    let n = n_a + n_b;
    let u = mann_whitney_u(group_a, group_b);
    let mean_u = n_a * n_b / 2.0;
    // Tie correction over the pooled sample.
    let mut all: Vec<f64> = group_a.iter().chain(group_b.iter()).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j] == all[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n_a * n_b / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let diff = u - mean_u;
    // Continuity correction toward the mean.
    let corrected = if diff > 0.5 {
        diff - 0.5
    } else if diff < -0.5 {
        diff + 0.5
    } else {
        0.0
    };
    let z = corrected / var.sqrt();
    (2.0 * normal_cdf(-z.abs())).min(1.0)
}
