//! 3D utilities: depth unprojection, Chamfer distance, RANSAC depth
//! alignment, and co-visibility driven view sampling.

mod chamfer;
mod covis;
mod kdtree;
mod ransac;

pub use chamfer::{chamfer, subsample};
pub use covis::{covisible_count, sample_view_cluster, scene_points, ViewCluster, MIN_COVISIBLE};
pub use kdtree::KdTree;
pub use ransac::{least_squares_fit, ransac_align, AlignmentModel, RansacConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::Mask;
use crate::scalar::{Scalar, Vec3};
use crate::scene_io::ViewRecord;

/// Source pixel of an unprojected point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelSource {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

/// World-frame points with optional per-point pixel provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet<T> {
    pub points: Vec<Vec3<T>>,
    /// Empty, or one entry per point.
    pub provenance: Vec<PixelSource>,
}

impl<T: Scalar> PointSet<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Self {
        PointSet {
            points,
            provenance: Vec::new(),
        }
    }

    pub fn with_provenance(points: Vec<Vec3<T>>, provenance: Vec<PixelSource>) -> Self {
        assert_eq!(points.len(), provenance.len(), "one provenance entry per point");
        PointSet { points, provenance }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    pub fn extend(&mut self, other: PointSet<T>) {
        let keep_prov = self.provenance.len() == self.points.len()
            && other.provenance.len() == other.points.len();
        self.points.extend(other.points);
        if keep_prov {
            self.provenance.extend(other.provenance);
        } else {
            self.provenance.clear();
        }
    }

    /// Keeps the points at the given (ascending) indices.
    pub fn select(&self, indices: &[usize]) -> PointSet<T> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let provenance = if self.provenance.len() == self.points.len() {
            indices.iter().map(|&i| self.provenance[i]).collect()
        } else {
            Vec::new()
        };
        PointSet { points, provenance }
    }
}

/// Unprojects every set pixel of `region` with positive depth into the
/// world frame, through the pixel center.
pub fn unproject<T: Scalar>(view_index: usize, view: &ViewRecord, region: &Mask) -> Result<PointSet<T>> {
    let cam = view.camera.cast::<T>();
    // fails early on singular intrinsics even for empty regions
    cam.pixel_ray(T::zero(), T::zero())?;
    let half = T::lit(0.5);
    let mut points = Vec::new();
    let mut provenance = Vec::new();
    for (x, y) in region.pixels() {
        let d = *view.depth.get(x, y);
        if d <= 0.0 {
            continue;
        }
        let p = cam.unproject(
            T::from_count(x) + half,
            T::from_count(y) + half,
            T::lit(f64::from(d)),
        )?;
        points.push(p);
        provenance.push(PixelSource {
            view: view_index,
            x,
            y,
        });
    }
    Ok(PointSet { points, provenance })
}
