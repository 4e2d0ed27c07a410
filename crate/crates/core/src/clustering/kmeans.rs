use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_points, squared_distance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 8,
            max_iterations: 100,
        }
    }
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    kmeans_with(points, k, seed, KMeansOptions::default())
}

pub fn kmeans_with(points: &[Vec<f64>], k: usize, seed: u64, options: KMeansOptions) -> Result<Clustering> {
    check_points("kmeans", points)?;
    if k == 0 || k > points.len() {
        return Err(Error::domain(
            "kmeans",
            format!("k = {k} outside 1..={} points", points.len()),
        ));
    }
    if options.restarts == 0 || options.max_iterations == 0 {
        return Err(Error::domain("kmeans", "restarts and iterations must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..options.restarts {
        let seeds = plus_plus_seeds(points, k, &mut rng);
        let run = lloyd(points, seeds, options.max_iterations);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// seed, the lowest unchosen index is taken.
fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut seeds = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[first])).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total has a positive entry")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        seeds.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[pick]));
        }
    }
    seeds
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as f64);
    }
    sums
}

fn inertia(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// Moves into each empty cluster the point farthest from its current
/// centroid, taken from a cluster that keeps at least one member.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &[Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[a]);
            if far.map_or(true, |(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with spare members");
        counts[assignment[i]] -= 1;
        assignment[i] = c;
        counts[c] = 1;
    }
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iterations: usize) -> Clustering {
    let k = centroids.len();
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_iterations {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, &centroids);
        let stable = next == assignment;
        assignment = next;
        if stable {
            break;
        }
        centroids = means(points, &assignment, k);
        trace.push(inertia(points, &assignment, &centroids));
    }
    let inertia = *trace.last().expect("one iteration ran");
    Clustering {
        k,
        assignment,
        centroids,
        inertia,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn six_points_on_a_line() {
        let c = kmeans(&line(&[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]), 2, 7).unwrap();
        assert!((c.inertia - 4.0).abs() < 1e-12);
        assert_eq!(c.assignment[0], c.assignment[2]);
        assert_eq!(c.assignment[3], c.assignment[5]);
        assert_ne!(c.assignment[0], c.assignment[3]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let pts = line(&[3.0, -1.0, 4.0, 1.5]);
        let c = kmeans(&pts, 4, 0).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn duplicated_groups_recovered() {
        let mut pts = vec![vec![1.0, 0.0]; 5];
        pts.extend(vec![vec![0.0, 1.0]; 4]);
        let c = kmeans(&pts, 2, 3).unwrap();
        assert_eq!(c.inertia, 0.0);
        assert!(c.assignment[..5].iter().all(|&a| a == c.assignment[0]));
        assert!(c.assignment[5..].iter().all(|&a| a == c.assignment[5]));
    }

    #[test]
    fn more_clusters_than_distinct_points() {
        let pts = vec![vec![1.0]; 4];
        let c = kmeans(&pts, 3, 1).unwrap();
        let mut used = c.assignment.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 3);
        assert_eq!(c.inertia, 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = line(&[0.0, 1.0]);
        assert!(kmeans(&pts, 3, 0).is_err());
        assert!(kmeans(&pts, 0, 0).is_err());
        assert!(kmeans(&[], 1, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let a = kmeans(&pts, 4, 11).unwrap();
        let b = kmeans(&pts, 4, 11).unwrap();
        assert_eq!(a, b);
    }
}
