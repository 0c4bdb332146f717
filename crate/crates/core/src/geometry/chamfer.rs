use rand::seq::index;
use rand::Rng;

use super::kdtree::KdTree;
use super::PointSet;
use crate::error::{Error, Result};
use crate::scalar::{dist3, Scalar, Vec3};

/// Symmetric mean nearest-neighbour distance (not squared):
/// `0.5 * (mean_p min_q |p - q| + mean_q min_p |q - p|)`.
pub fn chamfer<T: Scalar>(p: &PointSet<T>, q: &PointSet<T>) -> Result<T> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let half = T::lit(0.5);
    Ok(half * (directed(&p.points, &q.points) + directed(&q.points, &p.points)))
}

fn directed<T: Scalar>(from: &[Vec3<T>], to: &[Vec3<T>]) -> T {
    let tree = KdTree::build(to);
    let mut sum = T::zero();
    for &a in from {
        let (j, _) = tree.nearest(a).expect("non-empty target");
        sum = sum + dist3(a, to[j]);
    }
    sum / T::from_count(from.len())
}

/// Uniform subsample to at most `max` points, preserving order.
pub fn subsample<T: Scalar, R: Rng>(set: &PointSet<T>, max: usize, rng: &mut R) -> PointSet<T> {
    if set.len() <= max {
        return set.clone();
    }
    let mut picked = index::sample(rng, set.len(), max).into_vec();
    picked.sort_unstable();
    set.select(&picked)
}
