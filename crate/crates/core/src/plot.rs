//! Bare-bones line plots rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const W: u32 = 360;
const H: u32 = 240;
const PAD: f64 = 24.0;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plots `(x, y)` pairs as a polyline with axes and a dashed `y = 0` guide.
pub fn line_plot(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, 0.0f64, 0.0f64);
    for (x, y) in &finite {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if finite.is_empty() {
        xmin = 0.0;
        xmax = 1.0;
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let px = |x: f64| (PAD + (x - xmin) / (xmax - xmin) * (f64::from(W) - 2.0 * PAD)).round() as i64;
    let py = |y: f64| (f64::from(H) - PAD - (y - ymin) / (ymax - ymin) * (f64::from(H) - 2.0 * PAD)).round() as i64;
    let axis = Rgb([90, 90, 90]);
    let bottom = H as i64 - PAD as i64;
    line(&mut img, (PAD as i64, bottom), (W as i64 - PAD as i64, bottom), axis);
    line(&mut img, (PAD as i64, PAD as i64), (PAD as i64, bottom), axis);
    let zero = py(0.0);
    for x in (PAD as i64..W as i64 - PAD as i64).step_by(6) {
        line(&mut img, (x, zero), (x + 2, zero), Rgb([180, 180, 180]));
    }
    let curve = Rgb([200, 40, 40]);
    for pair in finite.windows(2) {
        line(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), curve);
    }
    for (x, y) in &finite {
        let (cx, cy) = (px(*x), py(*y));
        line(&mut img, (cx - 2, cy), (cx + 2, cy), curve);
        line(&mut img, (cx, cy - 2), (cx, cy + 2), curve);
    }
    img.save(path.as_ref())?;
    Ok(())
}
