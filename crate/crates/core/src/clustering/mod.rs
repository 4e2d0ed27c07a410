//! K-Means, minimum-cost assignment and choice of the number of clusters.

mod hungarian;
mod kmeans;
mod select;

pub use hungarian::{hungarian, match_rectangular, Matching};
pub use kmeans::{kmeans, kmeans_with, Clustering, KMeansOptions};
pub use select::{elbow_from_inertias, elbow_k, silhouette_k, silhouette_score};

use crate::error::{Error, Result};

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rejects empty, ragged or non-finite point sets and returns the dimension.
pub(crate) fn check_points(op: &'static str, points: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = points.first() else {
        return Err(Error::domain(op, "no points"));
    };
    let dim = first.len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::shape(op, format!("point {i} has dimension {} not {dim}", p.len())));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain(op, format!("point {i} is not finite")));
        }
    }
    Ok(dim)
}
