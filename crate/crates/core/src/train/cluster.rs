//! K-Means and clustering agreement scores.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};

const MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seeds(x: &DenseMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.rows();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in closest.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // every point coincides with a seed; take the first unused index
            (0..n).find(|i| !seeds.contains(i)).unwrap_or(0)
        };
        seeds.push(next);
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    seeds
}

fn lloyd(x: &DenseMatrix, k: usize, seeds: &[usize]) -> KMeansResult {
    let (n, d) = x.shape();
    let mut centroids = DenseMatrix::from_fn(k, d, |c, j| x.get(seeds[c], j));
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = sq_dist(x.row(i), centroids.row(c));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if assignments[i] != best.1 {
                assignments[i] = best.1;
                changed = true;
            }
        }
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed at the point farthest from its current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(x.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(x.row(b), centroids.row(assignments[b]));
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                centroids.row_mut(c).copy_from_slice(x.row(far));
                assignments[far] = c;
                changed = true;
            } else {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(assignments[i]))).sum();
    KMeansResult {
        assignments,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins.
pub fn kmeans(x: &DenseMatrix, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > x.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} for {} points", x.rows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus_seeds(x, k, &mut rng);
        let run = lloyd(x, k, &seeds);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn contingency(a: &[usize], b: &[usize]) -> (HashMap<(usize, usize), f64>, HashMap<usize, f64>, HashMap<usize, f64>) {
    let mut joint = HashMap::new();
    let mut ra = HashMap::new();
    let mut rb = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ra.entry(x).or_insert(0.0) += 1.0;
        *rb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ra, rb)
}

/// Normalised mutual information (arithmetic-mean normalisation) and the
/// adjusted Rand index.
pub fn clustering_metrics(assignments: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if assignments.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.len() < 2 {
        return Err(Error::InvalidArgument("clustering metrics need at least 2 points".into()));
    }
    let n = assignments.len() as f64;
    let (joint, ra, rb) = contingency(assignments, labels);

    let entropy = |m: &HashMap<usize, f64>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&ra), entropy(&rb));
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let p = c / n;
            p * (c * n / (ra[&x] * rb[&y])).ln()
        })
        .sum();
    let nmi = if ha == 0.0 && hb == 0.0 {
        1.0
    } else {
        (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
    };

    let comb2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.values().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.values().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(n);
    let max_index = (sa + sb) / 2.0;
    let ari = if max_index == expected {
        1.0
    } else {
        (index - expected) / (max_index - expected)
    };
    Ok((nmi, ari))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_clouds(rng: &mut ChaCha8Rng) -> (DenseMatrix, Vec<usize>) {
        let noise = Normal::new(0.0, 0.3).unwrap();
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let x = DenseMatrix::from_fn(60, 3, |i, j| {
            let centre = if labels[i] == 0 { -5.0 } else { 5.0 };
            centre * (j == 0) as u8 as f64 + noise.sample(rng)
        });
        (x, labels)
    }

    #[test]
    fn separated_clouds_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, labels) = two_clouds(&mut rng);
        let r = kmeans(&x, 2, 10, 1).unwrap();
        let (nmi, ari) = clustering_metrics(&r.assignments, &labels).unwrap();
        assert!((nmi - 1.0).abs() < 1e-12 && (ari - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::uniform(7, 2, -1.0, 1.0, &mut rng);
        let r = kmeans(&x, 7, 3, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(kmeans(&x, 8, 1, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DenseMatrix::uniform(50, 4, -1.0, 1.0, &mut rng);
        assert_eq!(kmeans(&x, 4, 10, 42).unwrap(), kmeans(&x, 4, 10, 42).unwrap());
    }

    #[test]
    fn metric_identities() {
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let (nmi, ari) = clustering_metrics(&labels, &labels).unwrap();
        assert!((nmi - 1.0).abs() < 1e-12 && ari == 1.0);
        let permuted: Vec<usize> = labels.iter().map(|l| (l + 1) % 3).collect();
        let (nmi, ari) = clustering_metrics(&permuted, &labels).unwrap();
        assert!((nmi - 1.0).abs() < 1e-12 && (ari - 1.0).abs() < 1e-12);
        assert!(clustering_metrics(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn random_assignments_have_near_zero_ari() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let labels: Vec<usize> = (0..10_000).map(|i| i % 4).collect();
        let random: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let (_, ari) = clustering_metrics(&random, &labels).unwrap();
        assert!(ari.abs() < 0.02, "{ari}");
    }

    #[test]
    fn hand_computed_ari() {
        // contingency [[2, 0], [1, 1]]: index 1, row pairs 2, column pairs 3,
        // expected 2 * 3 / 6 = 1, max 2.5
        let (_, ari) = clustering_metrics(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!(ari.abs() < 1e-15, "{ari}");
        // [[2, 0], [0, 2]] with one point moved: [[2, 1], [0, 1]]
        let (_, ari) = clustering_metrics(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert!(ari.abs() < 1e-15, "{ari}");
        // six points, contingency [[2, 1], [0, 3]]: index 1 + 3 = 4, rows 3 + 3 = 6,
        // columns 1 + 6 = 7, expected 6 * 7 / 15 = 2.8, max 6.5
        let (_, ari) = clustering_metrics(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).unwrap();
        let expected = (4.0 - 2.8) / (6.5 - 2.8);
        assert!((ari - expected).abs() < 1e-12, "{ari} vs {expected}");
    }
}
