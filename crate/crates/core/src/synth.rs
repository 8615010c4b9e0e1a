//! Deterministic synthetic images used as a small local training corpus.
//!
//! Each image layers a smooth background gradient, a few filled shapes with
//! their own gradients, periodic texture patches and sparse film grain, so
//! crops range from flat to hard to compress.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::RgbImage;

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
    /// Half-plane `nx·x + ny·y > d`.
    Plane { nx: f32, ny: f32, d: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
            Shape::Plane { nx, ny, d } => nx * x + ny * y > d,
        }
    }
}

enum Fill {
    Gradient { a: [f32; 3], b: [f32; 3], dx: f32, dy: f32 },
    Stripes { a: [f32; 3], b: [f32; 3], fx: f32, fy: f32 },
    Checker { a: [f32; 3], b: [f32; 3], cell: f32 },
}

impl Fill {
    fn at(&self, x: f32, y: f32, w: f32) -> [f32; 3] {
        match *self {
            Fill::Gradient { a, b, dx, dy } => lerp(a, b, ((x * dx + y * dy) / w).clamp(0.0, 1.0)),
            Fill::Stripes { a, b, fx, fy } => lerp(a, b, 0.5 + 0.5 * (x * fx + y * fy).sin()),
            Fill::Checker { a, b, cell } => {
                if ((x / cell).floor() as i64 + (y / cell).floor() as i64) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

fn random_fill(rng: &mut ChaCha8Rng) -> Fill {
    let (a, b) = (color(rng), color(rng));
    match rng.random_range(0..6) {
        0..=2 => Fill::Gradient {
            a,
            b,
            dx: rng.random_range(-1.0..1.0),
            dy: rng.random_range(-1.0..1.0),
        },
        3 | 4 => Fill::Stripes {
            a,
            b,
            fx: rng.random_range(-0.6..0.6),
            fy: rng.random_range(-0.6..0.6),
        },
        _ => Fill::Checker {
            a,
            b,
            cell: rng.random_range(3.0..16.0),
        },
    }
}

fn random_shape(rng: &mut ChaCha8Rng, w: f32, h: f32) -> Shape {
    match rng.random_range(0..3) {
        0 => {
            let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            Shape::Rect {
                x0,
                y0,
                x1: x0 + rng.random_range(16.0..(w / 2.0).max(17.0)),
                y1: y0 + rng.random_range(16.0..(h / 2.0).max(17.0)),
            }
        }
        1 => Shape::Disc {
            cx: rng.random_range(0.0..w),
            cy: rng.random_range(0.0..h),
            r: rng.random_range(8.0..(w / 4.0).max(9.0)),
        },
        _ => {
            let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (nx, ny) = (a.cos(), a.sin());
            let d = nx * rng.random_range(0.0..w) + ny * rng.random_range(0.0..h);
            Shape::Plane { nx, ny, d }
        }
    }
}

/// Generates one `width × height` image; identical seeds give identical bytes.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f32, height as f32);
    let background = Fill::Gradient {
        a: color(&mut rng),
        b: color(&mut rng),
        dx: rng.random_range(-1.0..1.0),
        dy: rng.random_range(-1.0..1.0),
    };
    let layers: Vec<(Shape, Fill)> = (0..rng.random_range(4..10))
        .map(|_| (random_shape(&mut rng, w, h), random_fill(&mut rng)))
        .collect();
    let grain_amp: f32 = rng.random_range(0.0..6.0);
    let mut px = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f32, y as f32);
            let mut c = background.at(fx, fy, w.max(h));
            for (shape, fill) in &layers {
                if shape.contains(fx, fy) {
                    c = fill.at(fx, fy, w.max(h));
                }
            }
            for v in c {
                let grain = if grain_amp > 0.0 { rng.random_range(-grain_amp..=grain_amp) } else { 0.0 };
                px.push((v + grain).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(width, height, px).expect("positive size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_distinct() {
        let a = synthetic_image(40, 30, 7);
        assert_eq!(a, synthetic_image(40, 30, 7));
        assert_ne!(a, synthetic_image(40, 30, 8));
        assert_eq!((a.width(), a.height()), (40, 30));
        for (w, h) in [(1, 1), (5, 64), (64, 3)] {
            assert_eq!(synthetic_image(w, h, 1).width(), w);
        }
    }
}
