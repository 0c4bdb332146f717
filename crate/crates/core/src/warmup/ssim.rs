//! SSIM with an 11x11 Gaussian window (sigma 1.5), zero padding, constants
//! for unit-range images.

use crate::grid::Grid;
use crate::scalar::Scalar;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn gaussian_kernel<T: Scalar>() -> Vec<T> {
    let half = (WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / s)).collect()
}

/// Separable "same" convolution with zero padding.
fn blur<T: Scalar>(src: &[T], w: usize, h: usize, k: &[T]) -> Vec<T> {
    let half = k.len() / 2;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - half as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc = acc + kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - half as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc = acc + kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all pixels and channels.
pub fn ssim<T: Scalar>(a: &Grid<[T; 3]>, b: &Grid<[T; 3]>) -> T {
    let (w, h) = a.dims();
    let k = gaussian_kernel::<T>();
    let c1 = T::lit(C1);
    let c2 = T::lit(C2);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for ch in 0..3 {
        let x: Vec<T> = a.as_slice().iter().map(|p| p[ch]).collect();
        let y: Vec<T> = b.as_slice().iter().map(|p| p[ch]).collect();
        let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(&y).map(|(&u, &v)| u * v).collect();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let sxx = blur(&xx, w, h, &k);
        let syy = blur(&yy, w, h, &k);
        let sxy = blur(&xy, w, h, &k);
        for i in 0..w * h {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            let num = (two * mx[i] * my[i] + c1) * (two * cxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            total = total + num / den;
        }
    }
    total / T::from_count(3 * w * h)
}
