//! Lloyd's K-means with k-means++ seeding over location centroids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::aggregate::RegionMap;
use crate::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const REL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Vec<(f64, f64)>,
    pub inertia: f64,
    pub iterations: usize,
}

/// `ceil(N / 4)`, the fine-to-coarse ratio used for the reference grids.
pub fn default_k(n: usize) -> usize {
    n.div_ceil(4).max(1)
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn nearest(p: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, dist2(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus(points: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centers.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centers
}

pub fn kmeans(points: &[(f64, f64)], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("K = {k} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(points, k, &mut rng);
    let mut labels = vec![0; n];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        let mut new_inertia = 0.0;
        for (l, &p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centers);
            *l = c;
            new_inertia += d;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&l, &p) in labels.iter().zip(points) {
            sums[l].0 += p.0;
            sums[l].1 += p.1;
            sums[l].2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        // Reseed empty clusters at the point farthest from its center.
        for ci in 0..k {
            if sums[ci].2 == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(points[a], centers[labels[a]])
                            .total_cmp(&dist2(points[b], centers[labels[b]]))
                    })
                    .unwrap();
                centers[ci] = points[far];
                labels[far] = ci;
            }
        }
        let converged = inertia.is_finite()
            && (inertia - new_inertia).abs() <= REL_TOLERANCE * inertia.max(f64::MIN_POSITIVE);
        inertia = new_inertia;
        if converged || inertia == 0.0 {
            break;
        }
    }
    for (l, &p) in labels.iter_mut().zip(points) {
        *l = nearest(p, &centers).0;
    }
    // Coincident points can leave a cluster empty; give it one member of the
    // largest cluster.
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let largest = (0..k).max_by_key(|&c| counts[c]).unwrap();
        let donor = labels.iter().rposition(|&l| l == largest).unwrap();
        labels[donor] = empty;
        centers[empty] = points[donor];
    }
    let inertia = labels
        .iter()
        .zip(points)
        .map(|(&l, &p)| dist2(p, centers[l]))
        .sum();
    Ok(KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
    })
}

/// Groups locations into `k` regions by their centroids.
pub fn kmeans_partition(location_ids: &[String], centroids: &[(f64, f64)], k: usize, seed: u64) -> Result<RegionMap> {
    let res = kmeans(centroids, k, seed)?;
    RegionMap::from_labels(location_ids, &res.labels)
}
