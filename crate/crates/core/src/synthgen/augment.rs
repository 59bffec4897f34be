//! Joint image/mask augmentation. Geometric transforms move image and mask
//! together; photometric ones touch the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip: f64,
    pub vflip: f64,
    pub rotate90: f64,
    pub brightness_contrast: f64,
    pub blur: f64,
    pub crop_resize: f64,
    /// Additive brightness offset drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast gain drawn from `1 ± contrast`.
    pub contrast: f64,
    pub blur_sigma: (f64, f64),
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate90: 0.5,
            brightness_contrast: 0.5,
            blur: 0.5,
            crop_resize: 0.5,
            brightness: 0.15,
            contrast: 0.2,
            blur_sigma: (0.4, 1.0),
            crop_min_scale: 0.7,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rotate90: 0.0,
            brightness_contrast: 0.0,
            blur: 0.0,
            crop_resize: 0.0,
            ..Self::default()
        }
    }

    /// Only flips and quarter turns, each with probability `p`.
    pub fn geometric(p: f64) -> Self {
        Self {
            hflip: p,
            vflip: p,
            rotate90: p,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.hflip,
            self.vflip,
            self.rotate90,
            self.brightness_contrast,
            self.blur,
            self.crop_resize,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "augmentation probabilities must lie in [0,1]: {probs:?}"
            )));
        }
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0)
            || self.blur_sigma.0 <= 0.0
            || self.blur_sigma.0 > self.blur_sigma.1
        {
            return Err(Error::Config("invalid crop scale or blur sigma range".into()));
        }
        Ok(())
    }
}

fn remap_image(img: &ImageBuffer, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> ImageBuffer {
    let mut out = ImageBuffer::filled(h, w, img.channels(), 0.0).with_noised(img.is_noised());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            for c in 0..img.channels() {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    out
}

fn remap_mask(m: &MaskBuffer, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> MaskBuffer {
    let mut out = MaskBuffer::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            out.set(y, x, m.get(sy, sx));
        }
    }
    out
}

struct Pair {
    image: ImageBuffer,
    mask: Option<MaskBuffer>,
}

impl Pair {
    fn remap(&mut self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize) + Copy) {
        self.image = remap_image(&self.image, h, w, src);
        if let Some(m) = &self.mask {
            self.mask = Some(remap_mask(m, h, w, src));
        }
    }
}

pub fn hflip_image(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    remap_image(img, h, w, |y, x| (y, w - 1 - x))
}

pub fn hflip_mask(m: &MaskBuffer) -> MaskBuffer {
    let (h, w) = (m.height(), m.width());
    remap_mask(m, h, w, |y, x| (y, w - 1 - x))
}

fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let (h, w, ch) = (img.height() as isize, img.width() as isize, img.channels());
    let clampi = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * img.get(y as usize, clampi(x + k as isize - radius, w), c))
                    .sum();
                tmp.set(y as usize, x as usize, c, v);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp.get(clampi(y + k as isize - radius, h), x as usize, c))
                    .sum();
                out.set(y as usize, x as usize, c, v);
            }
        }
    }
    out
}

/// Applies each enabled transform with its probability. Masks stay binary
/// and images are clamped to `[0,1]`.
pub fn augment<R: Rng + ?Sized>(
    image: &ImageBuffer,
    mask: Option<&MaskBuffer>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (ImageBuffer, Option<MaskBuffer>) {
    let mut pair = Pair {
        image: image.clone(),
        mask: mask.cloned(),
    };
    let (h, w) = (image.height(), image.width());

    if rng.random_bool(policy.hflip) {
        pair.remap(h, w, |y, x| (y, w - 1 - x));
    }
    if rng.random_bool(policy.vflip) {
        pair.remap(h, w, |y, x| (h - 1 - y, x));
    }
    if rng.random_bool(policy.rotate90) {
        // Quarter turns need a square canvas to keep batch shapes; otherwise rotate by 180°.
        let turns = if h == w { rng.random_range(1..=3) } else { 2 };
        for _ in 0..turns {
            let (ch, cw) = (pair.image.height(), pair.image.width());
            // Clockwise: out(y, x) = in(ch-1-x, y), output is cw×ch.
            pair.remap(cw, ch, |y, x| (ch - 1 - x, y));
        }
    }
    if rng.random_bool(policy.crop_resize) {
        let s = rng.random_range(policy.crop_min_scale..=1.0);
        let (chh, cww) = (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1));
        let oy = rng.random_range(0..=h - chh);
        let ox = rng.random_range(0..=w - cww);
        let mut crop = ImageBuffer::filled(chh, cww, image.channels(), 0.0);
        for y in 0..chh {
            for x in 0..cww {
                for c in 0..image.channels() {
                    crop.set(y, x, c, pair.image.get(oy + y, ox + x, c));
                }
            }
        }
        pair.image = crop.resize(h, w);
        if let Some(m) = &pair.mask {
            let mut mc = MaskBuffer::zeros(chh, cww);
            for y in 0..chh {
                for x in 0..cww {
                    mc.set(y, x, m.get(oy + y, ox + x));
                }
            }
            pair.mask = Some(mc.resize(h, w));
        }
    }
    if rng.random_bool(policy.brightness_contrast) {
        let b = rng.random_range(-policy.brightness..=policy.brightness);
        let c = rng.random_range(1.0 - policy.contrast..=1.0 + policy.contrast);
        for v in pair.image.data_mut() {
            *v = (*v - 0.5) * c + 0.5 + b;
        }
    }
    if rng.random_bool(policy.blur) {
        let sigma = rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        pair.image = gaussian_blur(&pair.image, sigma);
    }
    pair.image.clamp_unit();
    (pair.image, pair.mask)
}

/// Per-channel gain and offset, used to emulate a photometric domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricShift {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl PhotometricShift {
    pub fn apply(&self, image: &ImageBuffer) -> ImageBuffer {
        let mut out = image.to_rgb();
        for y in 0..out.height() {
            for x in 0..out.width() {
                for c in 0..3 {
                    let v = out.get(y, x, c) * self.gain[c] + self.offset[c];
                    out.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}
