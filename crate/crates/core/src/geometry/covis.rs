use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{unproject, PointSet};
use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::scalar::Scalar;
use crate::scene_io::SceneBundle;

/// A view joins a cluster only when it shares strictly more than this many
/// co-visible points with every view already selected.
pub const MIN_COVISIBLE: usize = 20;

fn visible<T: Scalar>(cam: &CameraParams<T>, p: [T; 3], width: usize, height: usize) -> bool {
    match cam.project(p) {
        Some((x, y, _)) => CameraParams::<T>::in_image(x, y, width, height),
        None => false,
    }
}

/// Points that project inside both images with positive depth in both
/// cameras. Occlusion is not modelled.
pub fn covisible_count<T: Scalar>(
    a: &CameraParams<T>,
    b: &CameraParams<T>,
    width: usize,
    height: usize,
    points: &PointSet<T>,
) -> usize {
    points
        .points
        .iter()
        .filter(|&&p| visible(a, p, width, height) && visible(b, p, width, height))
        .count()
}

/// Unprojects every `stride`-th pixel (in both axes) of every view.
pub fn scene_points<T: Scalar>(scene: &SceneBundle, stride: usize) -> Result<PointSet<T>> {
    let stride = stride.max(1);
    let mut all = PointSet::default();
    for (v, view) in scene.views.iter().enumerate() {
        let region = Mask::from_fn(scene.width, scene.height, |x, y| x % stride == 0 && y % stride == 0);
        all.extend(unproject::<T>(v, view, &region)?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewCluster {
    pub views: Vec<usize>,
    /// Set when fewer than the requested number of views could be added.
    pub incomplete: bool,
}

/// Greedy co-visibility clustering: a seeded random first view, then views
/// in index order that share more than [`MIN_COVISIBLE`] points with every
/// selected view, until `k` views are selected.
pub fn sample_view_cluster<T: Scalar>(
    scene: &SceneBundle,
    k: usize,
    seed: u64,
    points: &PointSet<T>,
) -> Result<ViewCluster> {
    let n = scene.num_views();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cluster size {k} must be in 1..={n}"
        )));
    }
    let cams: Vec<CameraParams<T>> = scene.views.iter().map(|v| v.camera.cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut views = vec![first];
    for cand in 0..n {
        if views.len() == k {
            break;
        }
        if cand == first {
            continue;
        }
        let ok = views.iter().all(|&s| {
            covisible_count(&cams[cand], &cams[s], scene.width, scene.height, points) > MIN_COVISIBLE
        });
        if ok {
            views.push(cand);
        }
    }
    let incomplete = views.len() < k;
    if incomplete {
        warn!("view cluster has {} of {k} requested views", views.len());
    }
    Ok(ViewCluster { views, incomplete })
}
