//! Procedural textures and ellipse scenes with exact ground truth.

use rand::Rng;

use crate::data::{ImageBuffer, MaskBuffer};

/// Smooth value noise: a coarse random lattice upsampled bilinearly, plus
/// fine per-pixel grain, tinted by `base` ± `spread`.
pub fn procedural_texture<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    base: [f64; 3],
    spread: f64,
    rng: &mut R,
) -> ImageBuffer {
    let cell = 8usize;
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut img = ImageBuffer::filled(height, width, 3, 0.0);
    for y in 0..height {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let smooth = (at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx) * (1.0 - ty)
                + (at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx) * ty;
            let grain = (rng.random::<f64>() - 0.5) * 0.3;
            for (c, b) in base.iter().enumerate() {
                img.set(y, x, c, (b + spread * (smooth + grain)).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// An ellipse with centre `(cy, cx)`, semi-axes `a` (along x before rotation)
/// and `b`, rotated by `angle` radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Whether the pixel centre `(y+0.5, x+0.5)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

/// Pixel-centre rasterization of an ellipse union.
pub fn rasterize_ellipses(height: usize, width: usize, ellipses: &[Ellipse]) -> MaskBuffer {
    let mut mask = MaskBuffer::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            if ellipses.iter().any(|e| e.contains(y, x)) {
                mask.set(y, x, 1.0);
            }
        }
    }
    mask
}

const BACKGROUND: [f64; 3] = [0.22, 0.38, 0.18];
const OBJECT: [f64; 3] = [0.78, 0.70, 0.35];

/// Textured background with `n_objects` striped ellipses; the mask is the
/// exact union of the ellipses.
pub fn procedural_toy_scene<R: Rng + ?Sized>(
    canvas: usize,
    n_objects: usize,
    rng: &mut R,
) -> (ImageBuffer, MaskBuffer) {
    let mut image = procedural_texture(canvas, canvas, BACKGROUND, 0.12, rng);
    let lo = (canvas as f64 / 16.0).max(2.0);
    let hi = (canvas as f64 / 6.0).max(lo + 1.0);
    let ellipses: Vec<Ellipse> = (0..n_objects)
        .map(|_| Ellipse {
            cy: rng.random_range(0.0..canvas as f64),
            cx: rng.random_range(0.0..canvas as f64),
            a: rng.random_range(lo..hi),
            b: rng.random_range(lo..hi),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        })
        .collect();
    for e in &ellipses {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = rng.random_range(0.6..1.2);
        let shade = rng.random_range(-0.08..0.08);
        for y in 0..canvas {
            for x in 0..canvas {
                if !e.contains(y, x) {
                    continue;
                }
                let (s, c) = e.angle.sin_cos();
                let along = (x as f64 - e.cx) * c + (y as f64 - e.cy) * s;
                let stripe = 0.1 * (along * freq + phase).sin();
                let grain = (rng.random::<f64>() - 0.5) * 0.06;
                for (ch, base) in OBJECT.iter().enumerate() {
                    image.set(y, x, ch, (base + shade + stripe + grain).clamp(0.0, 1.0));
                }
            }
        }
    }
    let mask = rasterize_ellipses(canvas, canvas, &ellipses);
    (image, mask)
}
