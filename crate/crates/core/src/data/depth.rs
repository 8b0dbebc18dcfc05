//! Depth-to-color encoding by surface normals.
//!
//! Normals are `normalize(∂z/∂x, ∂z/∂y, 1)` in a frame with x to the right,
//! y down and z towards the viewer, with the depth gradients taken in metres
//! per metre (pixel differences divided by the pixel footprint). Each
//! component is mapped from `[-1, 1]` to `[0, 255]`, so a surface facing the
//! camera is `(128, 128, 255)`.

use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Metres covered by one pixel at roughly one metre from a VGA depth sensor.
pub const DEFAULT_PIXEL_SIZE: f64 = 0.002;

fn is_hole(v: f64) -> bool {
    !(v.is_finite() && v > 0.0)
}

/// Replaces every hole (zero, negative or non-finite depth) with the value
/// of its nearest valid pixel in 4-connected steps; ties go to the pixel
/// reached first in row-major breadth-first order.
pub fn fill_holes(depth: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = depth.dim();
    let mut out = depth.clone();
    let mut done = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for ((y, x), &v) in depth.indexed_iter() {
        if !is_hole(v) {
            done[(y, x)] = true;
            queue.push_back((y, x));
        }
    }
    if queue.is_empty() {
        return Err(Error::AllHoles);
    }
    while let Some((y, x)) = queue.pop_front() {
        let v = out[(y, x)];
        let neighbours = [
            (y.wrapping_sub(1), x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
            (y + 1, x),
        ];
        for (ny, nx) in neighbours {
            if ny < h && nx < w && !done[(ny, nx)] {
                done[(ny, nx)] = true;
                out[(ny, nx)] = v;
                queue.push_back((ny, nx));
            }
        }
    }
    Ok(out)
}

/// Central differences inside, one-sided differences on the border.
fn gradient(z: &Array2<f64>, y: usize, x: usize) -> (f64, f64) {
    let (h, w) = z.dim();
    let d = |a: f64, b: f64, span: f64| (a - b) / span;
    let gx = if w == 1 {
        0.0
    } else if x == 0 {
        d(z[(y, 1)], z[(y, 0)], 1.0)
    } else if x == w - 1 {
        d(z[(y, x)], z[(y, x - 1)], 1.0)
    } else {
        d(z[(y, x + 1)], z[(y, x - 1)], 2.0)
    };
    let gy = if h == 1 {
        0.0
    } else if y == 0 {
        d(z[(1, x)], z[(0, x)], 1.0)
    } else if y == h - 1 {
        d(z[(y, x)], z[(y - 1, x)], 1.0)
    } else {
        d(z[(y + 1, x)], z[(y - 1, x)], 2.0)
    };
    (gx, gy)
}

/// Unit surface normals `[H, W, 3]` of a hole-filled depth map.
pub fn surface_normals(depth: &Array2<f64>, pixel_size: f64) -> Result<Array2<[f64; 3]>> {
    if !(pixel_size.is_finite() && pixel_size > 0.0) {
        return Err(Error::InvalidValue(format!("pixel size must be positive, got {pixel_size}")));
    }
    let z = fill_holes(depth)?;
    let (h, w) = z.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let (gx, gy) = gradient(&z, y, x);
        let n = [gx / pixel_size, gy / pixel_size, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
        n.map(|c| c / len)
    }))
}

pub fn normal_to_rgb(n: [f64; 3]) -> [u8; 3] {
    n.map(|c| ((c + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Three-channel encoding of a depth map in metres (holes marked 0).
pub fn colorize_depth(depth: &Array2<f64>, pixel_size: f64) -> Result<RgbImage> {
    let normals = surface_normals(depth, pixel_size)?;
    let (h, w) = normals.dim();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(normal_to_rgb(normals[(y as usize, x as usize)]))
    }))
}
