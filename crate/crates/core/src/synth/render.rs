//! Ray-cast rendering of axis-aligned boxes on a finite ground plane.

use image::{Rgb, RgbImage};

use crate::camera::CameraParams;
use crate::grid::Grid;
use crate::scalar::{add3, scale3, sub3, Vec3};

/// Axis-aligned box resting on the ground (`z = 0`) in the layout frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxShape {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
    pub color: [f64; 3],
}

/// What a pixel ray hits first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Sky,
    Ground,
    /// Index into the scene's box list.
    Object(usize),
}

/// One rendered view in the layout frame.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub surface: Grid<Surface>,
    /// Camera-frame depth, 0 for sky.
    pub depth: Grid<f64>,
    pub image: RgbImage,
}

const SKY: [f64; 3] = [0.74, 0.84, 0.95];

fn ray_box(origin: Vec3<f64>, dir: Vec3<f64>, b: &BoxShape) -> Option<(f64, usize, bool)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut negative = false;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < b.min[a] || origin[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - origin[a]) / dir[a];
        let t2 = (b.max[a] - origin[a]) / dir[a];
        let (lo, hi, neg) = if t1 < t2 { (t1, t2, true) } else { (t2, t1, false) };
        if lo > t_near {
            t_near = lo;
            axis = a;
            negative = neg;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis, negative))
}

fn shade(color: [f64; 3], axis: usize, negative: bool) -> [f64; 3] {
    let f = match (axis, negative) {
        (2, _) => 1.0,
        (0, true) => 0.62,
        (0, false) => 0.8,
        (1, true) => 0.7,
        _ => 0.88,
    };
    color.map(|c| c * f)
}

fn to_rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Renders `boxes` seen by `camera`; `ground_extent` bounds the ground
/// square `|x|, |y| <= extent`.
pub fn render(camera: &CameraParams<f64>, boxes: &[BoxShape], width: usize, height: usize, ground_extent: f64) -> Rendered {
    let eye = camera.center();
    let mut surface = Grid::filled(width, height, Surface::Sky);
    let mut depth = Grid::filled(width, height, 0.0);
    let mut image = RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let ray = camera
                .pixel_ray(x as f64 + 0.5, y as f64 + 0.5)
                .expect("synthetic intrinsics are regular");
            // direction whose parameter equals camera depth
            let dir = sub3(camera.camera_to_world(ray), eye);
            let mut best: Option<(f64, Surface, [f64; 3])> = None;
            if dir[2] < 0.0 {
                let t = -eye[2] / dir[2];
                let p = add3(eye, scale3(dir, t));
                if p[0].abs() <= ground_extent && p[1].abs() <= ground_extent {
                    let checker = ((p[0] / 0.25).floor() + (p[1] / 0.25).floor()) as i64 % 2 == 0;
                    let g = if checker { 0.42 } else { 0.5 };
                    best = Some((t, Surface::Ground, [g, g, g * 0.95]));
                }
            }
            for (k, b) in boxes.iter().enumerate() {
                if let Some((t, axis, neg)) = ray_box(eye, dir, b) {
                    if best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, Surface::Object(k), shade(b.color, axis, neg)));
                    }
                }
            }
            let (d, s, c) = best.unwrap_or((0.0, Surface::Sky, SKY));
            surface.set(x, y, s);
            depth.set(x, y, d);
            image.put_pixel(x as u32, y as u32, to_rgb(c));
        }
    }
    Rendered { surface, depth, image }
}
