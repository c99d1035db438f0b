//! Clustering over model correlation structure.
//!
//! Spectral clustering runs on the affinity `(corr + 1) / 2` through a
//! normalized graph Laplacian and seeded k-means; Ward linkage runs
//! agglomeratively on `1 - corr`. Agreement between a discovered
//! assignment and a reference partition is measured with the adjusted
//! Rand index and normalized mutual information.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{FamvoteError, Result};

/// Restarts used by the k-means stage of spectral clustering.
pub const KMEANS_RESTARTS: u64 = 50;

const KMEANS_MAX_ITER: usize = 100;

pub(crate) fn symmetric_dim(m: &DMatrix<f64>, tol: f64) -> Result<usize> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(FamvoteError::contract(format!(
            "correlation matrix must be square, got {rows}x{cols}"
        )));
    }
    for i in 0..rows {
        for j in (i + 1)..cols {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(FamvoteError::contract(format!(
                    "correlation matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(rows)
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k < 2 || k > m {
        return Err(FamvoteError::usage(format!(
            "cluster count k={k} must satisfy 2 <= k <= {m}"
        )));
    }
    Ok(())
}

/// Relabels cluster ids to first-appearance order so equal clusterings
/// compare equal regardless of internal label permutation.
fn canonical_labels(assign: &[usize]) -> Vec<usize> {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    assign
        .iter()
        .map(|&c| {
            *map.entry(c).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut best_d2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = centers.last().expect("at least one center");
        for (p, d) in best_d2.iter_mut().enumerate() {
            *d = d.min(dist2(&points[p], last));
        }
        let total: f64 = best_d2.iter().sum();
        let chosen = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (p, d) in best_d2.iter().enumerate() {
                acc += d;
                if acc >= target {
                    pick = p;
                    break;
                }
            }
            pick
        } else {
            // All remaining points coincide with a center.
            rng.gen_range(0..n)
        };
        centers.push(points[chosen].clone());
    }
    centers
}

fn lloyd(points: &[Vec<f64>], centers: &mut [Vec<f64>]) -> (Vec<usize>, f64) {
    let n = points.len();
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (p, point) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(point, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[p] != best {
                assign[p] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&p| assign[p] == c).collect();
            // An emptied cluster keeps its old center.
            if members.is_empty() {
                continue;
            }
            for (d, slot) in center.iter_mut().enumerate().take(dim) {
                *slot = members.iter().map(|&p| points[p][d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &c)| dist2(p, &centers[c]))
        .sum();
    (assign, inertia)
}

/// Seeded k-means with `KMEANS_RESTARTS` k-means++ restarts, keeping the
/// assignment with the lowest inertia (first restart wins ties).
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let mut centers = kmeans_pp_init(points, k, &mut rng);
        let (assign, inertia) = lloyd(points, &mut centers);
        if best.as_ref().is_none_or(|(bi, _)| inertia < *bi) {
            best = Some((inertia, assign));
        }
    }
    best.expect("at least one restart").1
}

/// Spectral clustering of a correlation matrix into `k` clusters.
///
/// Affinity is `(corr + 1) / 2`, which is nonnegative with unit diagonal,
/// so every node degree is at least one and the symmetric normalization
/// is always defined. Rows of the top-k eigenvector matrix are unit
/// normalized before the k-means stage.
pub fn spectral_clusters(corr: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let m = symmetric_dim(corr, 1e-9)?;
    check_k(k, m)?;
    let affinity = DMatrix::from_fn(m, m, |i, j| (corr[(i, j)] + 1.0) / 2.0);
    let degree: Vec<f64> = (0..m).map(|i| affinity.row(i).sum()).collect();
    let normalized =
        DMatrix::from_fn(m, m, |i, j| affinity[(i, j)] / (degree[i] * degree[j]).sqrt());
    let eig = SymmetricEigen::new(normalized);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let mut embedded = vec![vec![0.0; k]; m];
    for (col, &e) in order.iter().take(k).enumerate() {
        for (row, point) in embedded.iter_mut().enumerate() {
            point[col] = eig.eigenvectors[(row, e)];
        }
    }
    for point in &mut embedded {
        let norm = point.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in point.iter_mut() {
                *x /= norm;
            }
        }
    }
    Ok(canonical_labels(&kmeans(&embedded, k, seed)))
}

/// Ward-linkage agglomerative clustering on distance `1 - corr`.
///
/// Merge costs evolve by the Lance-Williams recurrence; ties pick the
/// lexicographically smallest cluster-index pair so the dendrogram is
/// deterministic.
pub fn ward_clusters(corr: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let m = symmetric_dim(corr, 1e-9)?;
    check_k(k, m)?;
    let mut d2 = vec![vec![0.0; m]; m];
    for (i, row) in d2.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (1.0 - corr[(i, j)]).max(0.0);
        }
    }
    let mut active = vec![true; m];
    let mut size = vec![1usize; m];
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut remaining = m;
    while remaining > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..m {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..m {
                if !active[j] {
                    continue;
                }
                if best.is_none_or(|(bd, _, _)| d2[i][j] < bd) {
                    best = Some((d2[i][j], i, j));
                }
            }
        }
        let (dij, i, j) = best.expect("more clusters than k implies a mergeable pair");
        for l in 0..m {
            if !active[l] || l == i || l == j {
                continue;
            }
            let (ni, nj, nl) = (size[i] as f64, size[j] as f64, size[l] as f64);
            let d = ((ni + nl) * d2[i][l] + (nj + nl) * d2[j][l] - nl * dij) / (ni + nj + nl);
            d2[i][l] = d;
            d2[l][i] = d;
        }
        active[j] = false;
        size[i] += size[j];
        let mut absorbed = std::mem::take(&mut members[j]);
        members[i].append(&mut absorbed);
        remaining -= 1;
    }
    let mut clusters: Vec<Vec<usize>> = (0..m)
        .filter(|&i| active[i])
        .map(|i| {
            let mut c = members[i].clone();
            c.sort_unstable();
            c
        })
        .collect();
    clusters.sort_by_key(|c| c[0]);
    let mut out = vec![0usize; m];
    for (cid, cluster) in clusters.iter().enumerate() {
        for &p in cluster {
            out[p] = cid;
        }
    }
    Ok(out)
}

struct Contingency {
    // Pair counts over unordered point pairs: together in both, together
    // only in a, together only in b, apart in both.
    tp: f64,
    fn_a: f64,
    fp_b: f64,
    tn: f64,
    rows: BTreeMap<usize, u64>,
    cols: BTreeMap<usize, u64>,
    cells: BTreeMap<(usize, usize), u64>,
    n: u64,
}

fn comb2(x: u64) -> u64 {
    x * x.saturating_sub(1) / 2
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    assert_eq!(a.len(), b.len(), "partitions must label the same points");
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let tp: u64 = cells.values().map(|&c| comb2(c)).sum();
    let together_a: u64 = rows.values().map(|&c| comb2(c)).sum();
    let together_b: u64 = cols.values().map(|&c| comb2(c)).sum();
    let n = a.len() as u64;
    let fn_a = together_a - tp;
    let fp_b = together_b - tp;
    let tn = comb2(n) - tp - fn_a - fp_b;
    Contingency {
        tp: tp as f64,
        fn_a: fn_a as f64,
        fp_b: fp_b as f64,
        tn: tn as f64,
        rows,
        cols,
        cells,
        n,
    }
}

/// Adjusted Rand index between two clusterings of the same points.
///
/// Label values are arbitrary; only the induced partitions matter.
/// Identical partitions score exactly 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let c = contingency(a, b);
    if c.fn_a == 0.0 && c.fp_b == 0.0 {
        return 1.0;
    }
    let numer = 2.0 * (c.tp * c.tn - c.fn_a * c.fp_b);
    let denom = (c.tp + c.fn_a) * (c.fn_a + c.tn) + (c.tp + c.fp_b) * (c.fp_b + c.tn);
    numer / denom
}

/// Normalized mutual information `2 I(a;b) / (H(a) + H(b))`.
///
/// Identical partitions (including two trivial one-cluster labelings)
/// score exactly 1; independence scores 0.
pub fn normalized_mutual_info(a: &[usize], b: &[usize]) -> f64 {
    let c = contingency(a, b);
    if c.fn_a == 0.0 && c.fp_b == 0.0 {
        return 1.0;
    }
    let n = c.n as f64;
    let entropy = |counts: &BTreeMap<usize, u64>| -> f64 {
        counts
            .values()
            .map(|&x| {
                let p = x as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&c.rows);
    let h_b = entropy(&c.cols);
    let mut info = 0.0;
    for (&(row, col), &v) in &c.cells {
        let joint = v as f64 / n;
        info += joint * ((n * v as f64) / (c.rows[&row] as f64 * c.cols[&col] as f64)).ln();
    }
    // H(a) + H(b) > 0 here: a joint zero-entropy pair is identical and
    // already returned 1 above.
    (2.0 * info / (h_a + h_b)).clamp(0.0, 1.0)
}
