//! Procedural grayscale test scenes: a smooth background with a handful of
//! flat shapes, giving both large uniform regions and sharp edges.

use rand::Rng as _;

use crate::error::Result;
use crate::image::Image;
use crate::rng::SeedTree;

enum Shape {
    Rect {
        r0: f64,
        c0: f64,
        r1: f64,
        c1: f64,
    },
    Ellipse {
        cr: f64,
        cc: f64,
        ar: f64,
        ac: f64,
    },
    Bar {
        cr: f64,
        cc: f64,
        dir: (f64, f64),
        half_len: f64,
        half_width: f64,
    },
}

impl Shape {
    fn contains(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Ellipse { cr, cc, ar, ac } => ((r - cr) / ar).powi(2) + ((c - cc) / ac).powi(2) <= 1.0,
            Shape::Bar {
                cr,
                cc,
                dir,
                half_len,
                half_width,
            } => {
                let (dr, dc) = (r - cr, c - cc);
                let along = dr * dir.0 + dc * dir.1;
                let across = -dr * dir.1 + dc * dir.0;
                along.abs() <= half_len && across.abs() <= half_width
            }
        }
    }
}

/// A `size × size` scene in `[0.05, 0.95]`, deterministic in `seed`.
pub fn synthetic_scene(size: usize, seed: u64) -> Result<Image> {
    synthetic_scene_rect(size, size, seed)
}

pub fn synthetic_scene_rect(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = SeedTree::new(seed).child("scene").rng();
    let (h, w) = (height as f64, width as f64);
    let base = rng.random_range(0.3..0.6);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.03..0.08),
                rng.random_range(0.5..2.0) / h,
                rng.random_range(0.5..2.0) / w,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let n_shapes = rng.random_range(5..9);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let value = rng.random_range(0.05..0.95);
        let shape = match rng.random_range(0..3) {
            0 => {
                let (sh, sw) = (rng.random_range(0.15..0.4) * h, rng.random_range(0.15..0.4) * w);
                let (r0, c0) = (rng.random_range(0.0..h - sh), rng.random_range(0.0..w - sw));
                Shape::Rect {
                    r0,
                    c0,
                    r1: r0 + sh,
                    c1: c0 + sw,
                }
            }
            1 => Shape::Ellipse {
                cr: rng.random_range(0.15..0.85) * h,
                cc: rng.random_range(0.15..0.85) * w,
                ar: rng.random_range(0.08..0.22) * h,
                ac: rng.random_range(0.08..0.22) * w,
            },
            _ => {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Bar {
                    cr: rng.random_range(0.2..0.8) * h,
                    cc: rng.random_range(0.2..0.8) * w,
                    dir: (angle.sin(), angle.cos()),
                    half_len: rng.random_range(0.15..0.35) * h.min(w),
                    half_width: rng.random_range(0.8..2.5),
                }
            }
        };
        shapes.push((shape, value));
    }
    Image::from_fn(height, width, |(r, c)| {
        let (rf, cf) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut v = base;
        for &(amp, fr, fc, phase) in &waves {
            v += amp * (std::f64::consts::TAU * (fr * rf + fc * cf) + phase).cos();
        }
        for (shape, value) in &shapes {
            if shape.contains(rf, cf) {
                v = *value;
            }
        }
        v.clamp(0.05, 0.95)
    })
}
