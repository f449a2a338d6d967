//! Procedural scenes for desk-scale training and tests.
//!
//! Each scene shares one illumination field and one palette saturation
//! across background and objects, so a region edited in isolation breaks
//! the scene's consistency along its mask boundary. Object masks are
//! dilated by [`RING`] pixels and therefore always include a thin ring of
//! background.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde_json::json;

use crate::error::Result;
use crate::image::{ImageGrid, RegionMask};
use crate::rng::rng_for;
use crate::sample_generator::Corpus;

const STREAM_SCENE: u64 = 0x5343_454E;

/// Dilation of object masks, in pixels.
const RING: usize = 2;

pub struct Scene {
    pub image: ImageGrid,
    /// Object masks with their face flag.
    pub masks: Vec<RegionMask>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
}

struct Object {
    shape: Shape,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    face: bool,
}

impl Object {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        match self.shape {
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }

    fn albedo(&self, y: f64, x: f64) -> [f64; 3] {
        if !self.face {
            return self.color;
        }
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let eye = |ex: f64| ((dx - ex).powi(2) + (dy + 0.3).powi(2)) < 0.03;
        let mouth = dy > 0.35 && dy < 0.5 && dx.abs() < 0.35;
        if eye(-0.35) || eye(0.35) {
            [0.12, 0.09, 0.08]
        } else if mouth {
            [0.55 * self.color[0], 0.35 * self.color[1], 0.35 * self.color[2]]
        } else {
            self.color
        }
    }
}

/// Renders scene `index` of a corpus seeded by `seed`.
pub fn synth_scene(seed: u64, index: u64, size: usize) -> Result<Scene> {
    let mut rng = rng_for(seed, STREAM_SCENE, index);
    let n = size as f64;
    let palette_sat = rng.gen_range(0.2..0.55);
    let base_light = rng.gen_range(0.6..0.95);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (lx, ly) = (angle.cos(), angle.sin());
    let horizon = rng.gen_range(0.3..0.7) * n;
    let sky = hsv(rng.gen(), palette_sat * rng.gen_range(0.5..1.0), rng.gen_range(0.55..0.85));
    let ground = hsv(rng.gen(), palette_sat * rng.gen_range(0.5..1.0), rng.gen_range(0.4..0.7));

    let count = rng.gen_range(2..=4);
    let with_face = rng.gen_bool(0.3);
    let mut objects = Vec::with_capacity(count);
    for k in 0..count {
        let face = with_face && k == count - 1;
        let rx = rng.gen_range(0.1..0.22) * n;
        let ry = if face { rx * rng.gen_range(1.1..1.35) } else { rng.gen_range(0.1..0.22) * n };
        let color = if face {
            hsv(rng.gen_range(0.04..0.09), rng.gen_range(0.3..0.5), rng.gen_range(0.6..0.85))
        } else {
            hsv(
                rng.gen(),
                (palette_sat * rng.gen_range(0.85..1.15)).clamp(0.05, 0.9),
                rng.gen_range(0.5..0.8),
            )
        };
        objects.push(Object {
            shape: if face || rng.gen_bool(0.6) { Shape::Ellipse } else { Shape::Rect },
            cx: rng.gen_range(rx + 1.0..n - rx - 1.0),
            cy: rng.gen_range(ry + 1.0..(n - ry - 1.0).max(ry + 1.5)),
            rx,
            ry,
            color,
            face,
        });
    }

    let grain: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let illum = |y: f64, x: f64| {
        base_light * (1.0 + 0.35 * (lx * (x / n - 0.5) + ly * (y / n - 0.5)))
    };
    let mut owner = vec![usize::MAX; size * size];
    let image = ImageGrid::from_fn(size, size, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = ((fy - horizon) / 3.0).tanh() * 0.5 + 0.5;
        let mut albedo = [0.0; 3];
        for c in 0..3 {
            albedo[c] = sky[c] * (1.0 - t) + ground[c] * t;
        }
        for (k, o) in objects.iter().enumerate() {
            if o.covers(fy, fx) {
                albedo = o.albedo(fy, fx);
                let shade = 1.0 + 0.15 * (lx * (fx - o.cx) / o.rx + ly * (fy - o.cy) / o.ry);
                albedo = albedo.map(|a| a * shade);
                owner[y * size + x] = k;
            }
        }
        let g = grain[y * size + x] * 0.025;
        let l = illum(fy, fx);
        albedo.map(|a| a * l + g)
    })?;

    let mut masks = Vec::new();
    for (k, o) in objects.iter().enumerate() {
        let visible = |y: usize, x: usize| owner[y * size + x] == k;
        let dilated = |y: usize, x: usize| {
            let ys = y.saturating_sub(RING)..=(y + RING).min(size - 1);
            ys.clone().any(|yy| (x.saturating_sub(RING)..=(x + RING).min(size - 1)).any(|xx| visible(yy, xx)))
        };
        let area = (0..size * size).filter(|i| owner[*i] == k).count() as f64 / (n * n);
        if area < 0.02 {
            continue;
        }
        if let Ok(m) = RegionMask::from_fn(size, size, o.face, |y, x| f64::from(u8::from(dilated(y, x)))) {
            masks.push(m);
        }
    }
    Ok(Scene { image, masks })
}

/// Writes `count` scenes in corpus layout and opens the result.
///
/// Every seventh image is listed without masks so consumers exercise the
/// synthetic-mask fallback.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Corpus> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut meta = fs::File::create(dir.join("meta.jsonl"))?;
    for i in 0..count {
        let scene = synth_scene(seed, i as u64, size)?;
        let name = format!("scene_{i:04}");
        scene.image.save(dir.join("images").join(format!("{name}.png")))?;
        if i % 7 == 6 || scene.masks.is_empty() {
            writeln!(meta, "{}", json!({"image": format!("{name}.png"), "mask": null, "contains_face": false}))?;
            continue;
        }
        for (k, m) in scene.masks.iter().enumerate() {
            let mask_name = format!("{name}_{k}.png");
            m.save(dir.join("masks").join(&mask_name))?;
            writeln!(
                meta,
                "{}",
                json!({"image": format!("{name}.png"), "mask": mask_name, "contains_face": m.contains_face()})
            )?;
        }
    }
    Corpus::open(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let a = synth_scene(7, 3, 32).unwrap();
        let b = synth_scene(7, 3, 32).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.masks, b.masks);
        assert_ne!(synth_scene(7, 4, 32).unwrap().image, a.image);
    }

    #[test]
    fn corpus_layout_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_synthetic_corpus(dir.path(), 8, 32, 1).unwrap();
        assert_eq!(corpus.images().len(), 8);
        assert!(corpus.entries.iter().any(|e| e.mask.is_none()));
        assert!(corpus.entries.iter().any(|e| e.mask.is_some()));
    }
}
