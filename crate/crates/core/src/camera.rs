//! Pinhole camera with world-to-camera extrinsics.
//!
//! Pixel `(u, v)` covers the continuous square `[u, u+1) x [v, v+1)`; its
//! center is `(u + 0.5, v + 0.5)`. Camera frame: x right, y down, z forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cross3, dot3, normalize3, sub3, Scalar, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams<T> {
    /// 3x3 intrinsics in pixels.
    pub intrinsics: [[T; 3]; 3],
    /// 3x4 world-to-camera `[R | t]`.
    pub extrinsics: [[T; 4]; 3],
}

impl<T: Scalar> CameraParams<T> {
    pub fn new(intrinsics: [[T; 3]; 3], extrinsics: [[T; 4]; 3]) -> Self {
        CameraParams {
            intrinsics,
            extrinsics,
        }
    }

    pub fn from_parts(fx: T, fy: T, cx: T, cy: T, rotation: [[T; 3]; 3], translation: Vec3<T>) -> Self {
        let z = T::zero();
        let mut extrinsics = [[z; 4]; 3];
        for r in 0..3 {
            extrinsics[r][..3].copy_from_slice(&rotation[r]);
            extrinsics[r][3] = translation[r];
        }
        CameraParams {
            intrinsics: [[fx, z, cx], [z, fy, cy], [z, z, T::one()]],
            extrinsics,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world's
    /// upward direction.
    pub fn look_at(fx: T, fy: T, cx: T, cy: T, eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Self {
        let forward = normalize3(sub3(target, eye));
        // image y points down, so camera-down is -up projected
        let right = normalize3(cross3(forward, up));
        let down = cross3(forward, right);
        let rotation = [right, down, forward];
        let t = [
            -dot3(right, eye),
            -dot3(down, eye),
            -dot3(forward, eye),
        ];
        Self::from_parts(fx, fy, cx, cy, rotation, t)
    }

    pub fn rotation(&self) -> [[T; 3]; 3] {
        let e = &self.extrinsics;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<T> {
        [self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [T::zero(); 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = -(r[0][k] * t[0] + r[1][k] * t[1] + r[2][k] * t[2]);
        }
        c
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        let e = &self.extrinsics;
        [
            e[0][0] * p[0] + e[0][1] * p[1] + e[0][2] * p[2] + e[0][3],
            e[1][0] * p[0] + e[1][1] * p[1] + e[1][2] * p[2] + e[1][3],
            e[2][0] * p[0] + e[2][1] * p[1] + e[2][2] * p[2] + e[2][3],
        ]
    }

    pub fn camera_to_world(&self, c: Vec3<T>) -> Vec3<T> {
        let r = self.rotation();
        let d = sub3(c, self.translation());
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Projects a world point to continuous pixel coordinates and camera
    /// depth. `None` when the point is not strictly in front of the camera.
    pub fn project(&self, p: Vec3<T>) -> Option<(T, T, T)> {
        let c = self.world_to_camera(p);
        if c[2] <= T::zero() {
            return None;
        }
        let k = &self.intrinsics;
        let x = c[0] / c[2];
        let y = c[1] / c[2];
        Some((k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2], c[2]))
    }

    /// Normalized camera ray `K^-1 [x, y, 1]` for continuous pixel coords.
    /// Its z component is 1, so scaling by depth yields the camera-frame point.
    pub fn pixel_ray(&self, x: T, y: T) -> Result<Vec3<T>> {
        let k = &self.intrinsics;
        let eps = T::lit(1e-12);
        if k[0][0].abs() < eps || k[1][1].abs() < eps || k[2][2].abs() < eps {
            return Err(Error::SingularIntrinsics);
        }
        // back-substitution on the upper-triangular K
        let w = T::one() / k[2][2];
        let yn = (y - k[1][2] * w) / k[1][1];
        let xn = (x - k[0][1] * yn - k[0][2] * w) / k[0][0];
        Ok([xn / w, yn / w, T::one()])
    }

    /// World point seen at continuous pixel `(x, y)` with camera depth `depth`.
    pub fn unproject(&self, x: T, y: T, depth: T) -> Result<Vec3<T>> {
        let ray = self.pixel_ray(x, y)?;
        Ok(self.camera_to_world([ray[0] * depth, ray[1] * depth, depth]))
    }

    /// True when `(x, y)` lies inside a `width x height` image.
    pub fn in_image(x: T, y: T, width: usize, height: usize) -> bool {
        x >= T::zero() && y >= T::zero() && x < T::from_count(width) && y < T::from_count(height)
    }

    /// Checks the camera invariants: upper-triangular intrinsics with
    /// positive focal entries, orthonormal rotation within `tol`.
    pub fn validate(&self, tol: T) -> std::result::Result<(), String> {
        let k = &self.intrinsics;
        let all = k.iter().flatten().chain(self.extrinsics.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err("non-finite camera entry".into());
        }
        if k[1][0] != T::zero() || k[2][0] != T::zero() || k[2][1] != T::zero() {
            return Err("intrinsics not upper-triangular".into());
        }
        if k[0][0] <= T::zero() || k[1][1] <= T::zero() {
            return Err("non-positive focal length".into());
        }
        if k[2][2] <= T::zero() {
            return Err("intrinsics [2][2] must be positive".into());
        }
        let r = self.rotation();
        for a in 0..3 {
            for b in 0..3 {
                let d = dot3(r[a], r[b]);
                let expect = if a == b { T::one() } else { T::zero() };
                if (d - expect).abs() > tol {
                    return Err(format!("rotation not orthonormal (R R^T [{a}][{b}] = {d})"));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CameraParams<U> {
        let c = |v: T| U::lit(v.as_f64());
        CameraParams {
            intrinsics: self.intrinsics.map(|r| r.map(c)),
            extrinsics: self.extrinsics.map(|r| r.map(c)),
        }
    }

    /// Re-expresses this camera in a world frame where `reference` becomes
    /// the identity pose.
    pub fn relative_to(&self, reference: &CameraParams<T>) -> CameraParams<T> {
        let r = self.rotation();
        let r0 = reference.rotation();
        let t0 = reference.translation();
        let t = self.translation();
        // R' = R R0^T, t' = t - R' t0
        let mut rr = [[T::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                rr[a][b] = r[a][0] * r0[b][0] + r[a][1] * r0[b][1] + r[a][2] * r0[b][2];
            }
        }
        let tt = [
            t[0] - dot3(rr[0], t0),
            t[1] - dot3(rr[1], t0),
            t[2] - dot3(rr[2], t0),
        ];
        let k = &self.intrinsics;
        let mut out = Self::from_parts(k[0][0], k[1][1], k[0][2], k[1][2], rr, tt);
        out.intrinsics = self.intrinsics;
        out
    }
}
