use super::{check_points, kmeans, squared_distance};
use crate::error::{Error, Result};

/// Knee of an inertia curve, `inertias[k - 1]` being the inertia at `k`.
/// Picks the largest second difference over interior `k`; curves too short
/// or without a positive bend give 1.
pub fn elbow_from_inertias(inertias: &[f64]) -> usize {
    let k_max = inertias.len();
    let mut best = (1, 0.0);
    for k in 2..k_max {
        let bend = inertias[k - 2] - 2.0 * inertias[k - 1] + inertias[k];
        if bend > best.1 {
            best = (k, bend);
        }
    }
    best.0
}

pub fn elbow_k(points: &[Vec<f64>], k_max: usize, seed: u64) -> Result<usize> {
    check_points("elbow_k", points)?;
    let k_max = k_max.min(points.len());
    let mut inertias = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        inertias.push(kmeans(points, k, seed)?.inertia);
    }
    Ok(elbow_from_inertias(&inertias))
}

/// Mean silhouette coefficient; members of singleton clusters score 0.
pub fn silhouette_score(points: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    check_points("silhouette_score", points)?;
    if assignment.len() != points.len() {
        return Err(Error::domain("silhouette_score", "one cluster id per point required"));
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let n = points.len();
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assignment[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[assignment[j]] += squared_distance(&points[i], &points[j]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Scores closer than this count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// `k` in `2..=k_max` with the highest mean silhouette, ties to the smaller.
pub fn silhouette_k(points: &[Vec<f64>], k_max: usize, seed: u64) -> Result<usize> {
    check_points("silhouette_k", points)?;
    if points.len() < 3 {
        return Err(Error::domain("silhouette_k", format!("needs at least 3 points, got {}", points.len())));
    }
    let k_max = k_max.min(points.len());
    if k_max < 2 {
        return Err(Error::domain("silhouette_k", "k_max must be at least 2"));
    }
    let mut best = (2, f64::NEG_INFINITY);
    for k in 2..=k_max {
        let c = kmeans(points, k, seed)?;
        let s = silhouette_score(points, &c.assignment)?;
        if s > best.1 + TIE_TOLERANCE {
            best = (k, s);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..6 {
            let e = i as f64 * 0.01;
            pts.push(vec![e, 0.0]);
            pts.push(vec![10.0 + e, 10.0]);
        }
        pts
    }

    #[test]
    fn elbow_curve() {
        assert_eq!(elbow_from_inertias(&[100.0, 20.0, 18.0, 17.0, 16.0]), 2);
        assert_eq!(elbow_from_inertias(&[5.0, 1.0]), 1);
        assert_eq!(elbow_from_inertias(&[0.0; 5]), 1);
    }

    #[test]
    fn elbow_on_points() {
        assert_eq!(elbow_k(&vec![vec![0.5, 0.5]; 6], 5, 0).unwrap(), 1);
        assert_eq!(elbow_k(&blobs(), 5, 0).unwrap(), 2);
    }

    #[test]
    fn silhouette_two_blobs() {
        let pts = blobs();
        assert_eq!(silhouette_k(&pts, 5, 0).unwrap(), 2);
        let assignment: Vec<usize> = (0..12).map(|i| i % 2).collect();
        assert!(silhouette_score(&pts, &assignment).unwrap() > 0.99);
    }

    #[test]
    fn silhouette_equidistant_singletons() {
        let h = 3f64.sqrt() / 2.0;
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]];
        assert_eq!(silhouette_k(&pts, 3, 0).unwrap(), 2);
    }

    #[test]
    fn singleton_contributes_zero() {
        let pts = vec![vec![0.0], vec![0.1], vec![5.0]];
        let s = silhouette_score(&pts, &[0, 0, 1]).unwrap();
        // the pair scores (5 - 0.1) / 5 and (4.9 - 0.1) / 4.9; the singleton 0
        let expected = ((5.0 - 0.1) / 5.0 + (4.9 - 0.1) / 4.9) / 3.0;
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn silhouette_needs_three_points() {
        assert!(silhouette_k(&[vec![0.0], vec![1.0]], 2, 0).is_err());
    }
}
