//! Synthesis of computationally annotated image-mask pairs.
//!
//! Objects are cut from a few annotated donor pairs (one patch per
//! 8-connected mask component) and pasted onto backgrounds with random
//! position, scale and rotation. The output mask is the exact union of the
//! pasted object masks.

pub mod augment;
pub mod toy;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_image, save_mask, write_manifest, DatasetManifest, ImageBuffer, ManifestRecord, MaskBuffer,
    RngState, Split,
};
use crate::error::{Error, Result};

pub use augment::{augment, AugmentPolicy, PhotometricShift};
pub use toy::{procedural_texture, procedural_toy_scene, rasterize_ellipses, Ellipse};

/// One connected object cut from a donor, cropped to its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPatch {
    pub image: ImageBuffer,
    pub mask: MaskBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DonorPair {
    pub tag: String,
    pub image: ImageBuffer,
    pub mask: MaskBuffer,
    pub objects: Vec<ObjectPatch>,
    /// The donor image with its objects filled in from surrounding background.
    pub background: ImageBuffer,
}

/// Labels 8-connected components of a binary mask; returns per-pixel labels
/// (0 = background) and the component count.
fn label_components(mask: &MaskBuffer) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] <= 0.5 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data()[q] > 0.5 && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Replaces object pixels by the mean of already-known neighbours, peeling
/// inward from the object boundary.
fn fill_objects(image: &ImageBuffer, mask: &MaskBuffer) -> ImageBuffer {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut out = image.clone();
    let mut known: Vec<bool> = mask.data().iter().map(|&v| v <= 0.5).collect();
    if !known.iter().any(|&k| k) {
        let mean: Vec<f64> = (0..ch)
            .map(|c| (0..h * w).map(|p| image.data()[p * ch + c]).sum::<f64>() / (h * w) as f64)
            .collect();
        for p in 0..h * w {
            out.data_mut()[p * ch..(p + 1) * ch].copy_from_slice(&mean);
        }
        return out;
    }
    loop {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if known[y * w + x] {
                    continue;
                }
                let mut acc = vec![0.0; ch];
                let mut n = 0;
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if known[ny * w + nx] {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += out.get(ny, nx, c);
                        }
                        n += 1;
                    }
                }
                if n > 0 {
                    updates.push((y, x, acc.into_iter().map(|a| a / n as f64).collect::<Vec<_>>()));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (y, x, v) in updates {
            for (c, val) in v.into_iter().enumerate() {
                out.set(y, x, c, val);
            }
            known[y * w + x] = true;
        }
    }
    out
}

/// Cuts one patch per connected component of `mask`.
pub fn extract_objects(tag: impl Into<String>, image: &ImageBuffer, mask: &MaskBuffer) -> Result<DonorPair> {
    if !mask.same_dims(image) {
        return Err(Error::Synth(format!(
            "donor mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    if !mask.is_binary() {
        return Err(Error::Synth("donor mask must be binary".into()));
    }
    let (labels, count) = label_components(mask);
    if count == 0 {
        return Err(Error::Synth("donor has no objects".into()));
    }
    let w = mask.width();
    let mut objects = Vec::with_capacity(count);
    for label in 1..=count {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for (p, _) in labels.iter().enumerate().filter(|(_, &l)| l == label) {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
        }
        let (ph, pw) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut patch = ImageBuffer::filled(ph, pw, image.channels(), 0.0);
        let mut pmask = MaskBuffer::zeros(ph, pw);
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..image.channels() {
                    patch.set(y, x, c, image.get(y0 + y, x0 + x, c));
                }
                if labels[(y0 + y) * w + x0 + x] == label {
                    pmask.set(y, x, 1.0);
                }
            }
        }
        objects.push(ObjectPatch {
            image: patch,
            mask: pmask,
        });
    }
    Ok(DonorPair {
        tag: tag.into(),
        image: image.clone(),
        mask: mask.clone(),
        background: fill_objects(image, mask),
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundSource {
    DonorBackground,
    ProceduralTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub canvas_size: usize,
    /// Inclusive range of pasted objects per image.
    pub objects_per_image: (usize, usize),
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rotation_range: (f64, f64),
    pub background: BackgroundSource,
    pub count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            objects_per_image: (3, 8),
            scale_range: (0.8, 1.2),
            rotation_range: (0.0, 360.0),
            background: BackgroundSource::DonorBackground,
            count: 100,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be ≥ 1".into()));
        }
        if self.canvas_size == 0 {
            return Err(Error::Config("canvas_size must be positive".into()));
        }
        let (k0, k1) = self.objects_per_image;
        let (s0, s1) = self.scale_range;
        let (r0, r1) = self.rotation_range;
        if k0 > k1 || !(s0 > 0.0 && s0 <= s1) || r0 > r1 || !r0.is_finite() || !r1.is_finite() {
            return Err(Error::Config(format!(
                "synthesis ranges must be non-empty: objects {k0}..={k1}, scale {s0}..={s1}, rotation {r0}..={r1}"
            )));
        }
        Ok(())
    }
}

/// Nearest-neighbour resize of a background to a square canvas.
fn fit_background(bg: &ImageBuffer, size: usize) -> ImageBuffer {
    let mut out = ImageBuffer::filled(size, size, bg.channels(), 0.0);
    for y in 0..size {
        let sy = (y * bg.height()) / size;
        for x in 0..size {
            let sx = (x * bg.width()) / size;
            for c in 0..bg.channels() {
                out.set(y, x, c, bg.get(sy, sx, c));
            }
        }
    }
    out
}

fn bilinear(sample: impl Fn(isize, isize) -> f64, u: f64, v: f64) -> f64 {
    let (x0, y0) = (u.floor(), v.floor());
    let (tx, ty) = (u - x0, v - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top = sample(y0, x0) * (1.0 - tx) + sample(y0, x0 + 1) * tx;
    let bot = sample(y0 + 1, x0) * (1.0 - tx) + sample(y0 + 1, x0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Pastes `patch` with its top-left bounding corner at integer `(oy, ox)`.
/// Blend weights come from bilinear sampling of the patch mask; pixels with
/// weight above 0.5 become mask-positive.
fn paste(
    canvas: &mut ImageBuffer,
    mask: &mut MaskBuffer,
    patch: &ObjectPatch,
    scale: f64,
    angle: f64,
    (oy, ox): (usize, usize),
    (bh, bw): (usize, usize),
) {
    let (ph, pw) = (patch.mask.height() as f64, patch.mask.width() as f64);
    let cy = oy as f64 + bh as f64 / 2.0;
    let cx = ox as f64 + bw as f64 / 2.0;
    let (s, c) = angle.sin_cos();
    let channels = canvas.channels();
    for y in oy..(oy + bh).min(canvas.height()) {
        for x in ox..(ox + bw).min(canvas.width()) {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            // Inverse rotation and scale into patch pixel-index coordinates.
            let u = (dx * c + dy * s) / scale + pw / 2.0 - 0.5;
            let v = (-dx * s + dy * c) / scale + ph / 2.0 - 0.5;
            let m = &patch.mask;
            let alpha = bilinear(
                |yy, xx| {
                    if yy < 0 || xx < 0 || yy >= m.height() as isize || xx >= m.width() as isize {
                        0.0
                    } else {
                        m.get(yy as usize, xx as usize)
                    }
                },
                u,
                v,
            );
            if alpha <= 0.0 {
                continue;
            }
            let img = &patch.image;
            for ch in 0..channels {
                let src_c = ch.min(img.channels() - 1);
                let val = bilinear(
                    |yy, xx| {
                        let yy = yy.clamp(0, img.height() as isize - 1) as usize;
                        let xx = xx.clamp(0, img.width() as isize - 1) as usize;
                        img.get(yy, xx, src_c)
                    },
                    u,
                    v,
                );
                let old = canvas.get(y, x, ch);
                canvas.set(y, x, ch, alpha * val + (1.0 - alpha) * old);
            }
            if alpha > 0.5 {
                mask.set(y, x, 1.0);
            }
        }
    }
}

/// Bounding box of a `ph×pw` patch after scaling and rotation.
fn transformed_extent(ph: usize, pw: usize, scale: f64, angle: f64) -> (usize, usize) {
    let (s, c) = angle.sin_cos();
    let (h, w) = (ph as f64 * scale, pw as f64 * scale);
    let bw = (w * c.abs() + h * s.abs() - 1e-9).ceil().max(1.0) as usize;
    let bh = (w * s.abs() + h * c.abs() - 1e-9).ceil().max(1.0) as usize;
    (bh, bw)
}

/// Composes one synthetic sample from `donors`.
pub fn composite_sample<R: Rng + ?Sized>(
    donors: &[DonorPair],
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<(ImageBuffer, MaskBuffer)> {
    spec.validate()?;
    if donors.iter().all(|d| d.objects.is_empty()) {
        return Err(Error::Synth("need at least one donor with an object".into()));
    }
    let size = spec.canvas_size;
    let largest = donors
        .iter()
        .flat_map(|d| &d.objects)
        .map(|o| o.mask.height().max(o.mask.width()))
        .max()
        .unwrap_or(0) as f64
        * spec.scale_range.1;
    if largest > size as f64 {
        return Err(Error::Synth(format!(
            "canvas {size} is smaller than the largest scaled patch ({largest:.1})"
        )));
    }
    let bg_donor = &donors[rng.random_range(0..donors.len())];
    let mut canvas = match spec.background {
        BackgroundSource::DonorBackground => fit_background(&bg_donor.background.to_rgb(), size),
        BackgroundSource::ProceduralTexture => {
            procedural_texture(size, size, [0.25, 0.35, 0.2], 0.12, rng)
        }
    };
    let mut mask = MaskBuffer::zeros(size, size);
    let k = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let with_objects: Vec<&DonorPair> = donors.iter().filter(|d| !d.objects.is_empty()).collect();
    for _ in 0..k {
        let donor = with_objects[rng.random_range(0..with_objects.len())];
        let patch = &donor.objects[rng.random_range(0..donor.objects.len())];
        let scale = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
        let degrees = rng.random_range(spec.rotation_range.0..=spec.rotation_range.1);
        let angle = degrees.to_radians();
        let (mut bh, mut bw) = transformed_extent(patch.mask.height(), patch.mask.width(), scale, angle);
        bh = bh.min(size);
        bw = bw.min(size);
        let oy = rng.random_range(0..=size - bh);
        let ox = rng.random_range(0..=size - bw);
        paste(&mut canvas, &mut mask, patch, scale, angle, (oy, ox), (bh, bw));
    }
    canvas.clamp_unit();
    Ok((canvas, mask))
}

fn ensure_dirs(out_dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

fn write_samples(
    out_dir: &Path,
    samples: Vec<(ImageBuffer, MaskBuffer, String)>,
    split: Split,
) -> Result<DatasetManifest> {
    let records = samples
        .into_par_iter()
        .enumerate()
        .map(|(i, (img, mask, tag))| {
            let image_path = out_dir.join("images").join(format!("{i:06}.png"));
            let mask_path = out_dir.join("masks").join(format!("{i:06}.png"));
            save_image(&img, &image_path)?;
            save_mask(&mask, &mask_path)?;
            Ok(ManifestRecord {
                image: image_path,
                mask: Some(mask_path),
                domain: tag,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(records);
    write_manifest(&manifest, out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Writes `spec.count` composites plus `manifest.txt` under `out_dir`.
///
/// Sample `i` draws from donor `i mod n` and is tagged with that donor's
/// tag; its randomness comes from `seed.child(i)`, so outputs do not depend
/// on scheduling.
pub fn generate_dataset(
    donors: &[DonorPair],
    spec: &SynthSpec,
    out_dir: impl AsRef<Path>,
    seed: RngState,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if donors.is_empty() {
        return Err(Error::Synth("no donors given".into()));
    }
    let out_dir = out_dir.as_ref();
    ensure_dirs(out_dir)?;
    let samples = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let donor = &donors[i % donors.len()];
            let mut rng = seed.child(i as u64).rng();
            let (img, mask) = composite_sample(std::slice::from_ref(donor), spec, &mut rng)?;
            Ok((img, mask, donor.tag.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_samples(out_dir, samples, Split::Train)
}

/// Procedural ellipse scenes written in the same layout as [`generate_dataset`].
pub fn generate_toy_dataset(
    canvas_size: usize,
    objects: (usize, usize),
    count: usize,
    domain: &str,
    split: Split,
    out_dir: impl AsRef<Path>,
    seed: RngState,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("count must be ≥ 1".into()));
    }
    let out_dir = out_dir.as_ref();
    ensure_dirs(out_dir)?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.child(i as u64).rng();
            let n = rng.random_range(objects.0..=objects.1);
            let (img, mask) = procedural_toy_scene(canvas_size, n, &mut rng);
            (img, mask, domain.to_string())
        })
        .collect();
    write_samples(out_dir, samples, split)
}
