//! Image and mask buffers, raster IO, dataset manifests and seeded RNG streams.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, ImageBuffer as RasterBuffer, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An `H×W×C` image stored row-major, channel-last, as 64-bit reals.
///
/// Loaded images lie in `[0,1]`. Diffusion outputs may leave that range and
/// carry `noised = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    noised: bool,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            noised: false,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_noised(&self) -> bool {
        self.noised
    }

    pub fn with_noised(mut self, noised: bool) -> Self {
        self.noised = noised;
        self
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// True when every element is finite and inside `[0,1]`.
    pub fn is_normalized(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> ImageBuffer {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = ImageBuffer::filled(height, width, self.channels, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bot = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    out.set(y, x, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    /// Grayscale images are replicated to three channels; colour images are returned as-is.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer::new(self.height, self.width, 3, data)
            .expect("valid dimensions")
            .with_noised(self.noised)
    }
}

/// An `H×W` single-channel map. Ground truth is `{0,1}`; predictions lie in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of pixels strictly above `0.5`.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Values above `threshold` become 1, the rest 0.
    pub fn binarize(&self, threshold: f64) -> MaskBuffer {
        MaskBuffer {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Nearest-neighbour resampling, which keeps binary masks binary.
    pub fn resize(&self, height: usize, width: usize) -> MaskBuffer {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = MaskBuffer::zeros(height, width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(
                    y,
                    x,
                    self.get(sy.min(self.height - 1), sx.min(self.width - 1)),
                );
            }
        }
        out
    }

    pub fn same_dims(&self, image: &ImageBuffer) -> bool {
        self.height == image.height() && self.width == image.width()
    }
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let reader = reader.with_guessed_format().map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    reader.decode().map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads a raster image, scaling 8- or 16-bit samples into `[0,1]`.
///
/// Grayscale files produce one channel, colour files three (alpha is dropped).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = open_raster(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let unsupported = |depth: &str| Error::Load {
        path: path.to_path_buf(),
        reason: format!("unsupported bit depth ({depth})"),
    };
    let (channels, data): (usize, Vec<f64>) = match &img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLumaA8(_) => (
            1,
            img.to_luma8()
                .as_raw()
                .iter()
                .map(|&v| v as f64 / 255.0)
                .collect(),
        ),
        DynamicImage::ImageLuma16(b) => {
            (1, b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageLumaA16(_) => (
            1,
            img.to_luma16()
                .as_raw()
                .iter()
                .map(|&v| v as f64 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgba8(_) => (
            3,
            img.to_rgb8()
                .as_raw()
                .iter()
                .map(|&v| v as f64 / 255.0)
                .collect(),
        ),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => (
            3,
            img.to_rgb16()
                .as_raw()
                .iter()
                .map(|&v| v as f64 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            return Err(unsupported("32-bit float"))
        }
        _ => return Err(unsupported("unknown")),
    };
    ImageBuffer::new(h, w, channels, data)
}

/// Loads a single-channel raster and binarizes it: values above 0.5 become 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskBuffer> {
    let path = path.as_ref();
    let img = open_raster(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "mask must be single-channel, found {:?}",
                    other.color()
                ),
            })
        }
    };
    Ok(MaskBuffer::new(h, w, data)?.binarize(0.5))
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG; values are clamped to `[0,1]` and rounded.
pub fn save_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let result = if image.channels() == 1 {
        GrayImage::from_raw(w, h, bytes).map(|b| b.save(path))
    } else {
        RgbImage::from_raw(w, h, bytes).map(|b| b.save(path))
    };
    match result {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("write failed: {e}"),
        }),
        None => Err(Error::Shape("buffer does not match dimensions".into())),
    }
}

/// Writes a mask as a single-channel PNG with `{0,255}` encoding.
pub fn save_mask(mask: &MaskBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    let buf: RasterBuffer<image::Luma<u8>, Vec<u8>> =
        GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
            .ok_or_else(|| Error::Shape("mask buffer does not match dimensions".into()))?;
    buf.save(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: format!("write failed: {e}"),
    })
}

/// Writes a row of images side by side as one RGB PNG.
pub fn save_grid(images: &[ImageBuffer], path: impl AsRef<Path>) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty grid".into()));
    };
    let (h, w) = (first.height(), first.width());
    let mut out = RgbImage::new((w * images.len()) as u32, h as u32);
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape("grid images must share dimensions".into()));
        }
        let rgb = img.to_rgb();
        for y in 0..h {
            for x in 0..w {
                let px = Rgb([
                    quantize(rgb.get(y, x, 0)),
                    quantize(rgb.get(y, x, 1)),
                    quantize(rgb.get(y, x, 2)),
                ]);
                out.put_pixel((i * w + x) as u32, y as u32, px);
            }
        }
    }
    let path = path.as_ref();
    out.save(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: format!("write failed: {e}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub domain: String,
    pub split: Split,
}

impl ManifestRecord {
    /// Records without a mask can only feed the reconstruction stream.
    pub fn is_reconstruction_only(&self) -> bool {
        self.mask.is_none()
    }

    /// Stable identifier used in reports: the image file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.display().to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn sorted(mut self) -> Self {
        self.records.sort();
        self
    }
}

fn check_field(value: &str, field: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::Data(format!(
            "manifest {field} '{value}' must be non-empty and free of tabs/newlines"
        )));
    }
    Ok(())
}

fn relative_to<'a>(path: &'a Path, base: &Path) -> &'a Path {
    path.strip_prefix(base).unwrap_or(path)
}

/// Writes one tab-separated record per line. Paths under the manifest's
/// directory are stored relative to it.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    for r in &manifest.records {
        let image = relative_to(&r.image, base).to_string_lossy().into_owned();
        let mask = r
            .mask
            .as_ref()
            .map(|m| relative_to(m, base).to_string_lossy().into_owned())
            .unwrap_or_else(|| "-".to_string());
        check_field(&image, "image path")?;
        check_field(&mask, "mask path")?;
        check_field(&r.domain, "domain tag")?;
        out.push_str(&format!(
            "image={image}\tmask={mask}\tdomain={}\tsplit={}\n",
            r.domain, r.split
        ));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads a manifest, resolving relative paths against its directory and
/// checking that every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let mut image = None;
        let mut mask = None;
        let mut domain = None;
        let mut split = None;
        for field in line.split('\t') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("field '{field}' is not key=value")))?;
            match key {
                "image" => image = Some(base.join(value)),
                "mask" => mask = Some((value != "-").then(|| base.join(value))),
                "domain" => domain = Some(value.to_string()),
                "split" => split = Some(value.parse::<Split>().map_err(|e| bad(e.to_string()))?),
                other => return Err(bad(format!("unknown field '{other}'"))),
            }
        }
        records.push(ManifestRecord {
            image: image.ok_or_else(|| bad("missing image".into()))?,
            mask: mask.ok_or_else(|| bad("missing mask".into()))?,
            domain: domain.ok_or_else(|| bad("missing domain".into()))?,
            split: split.ok_or_else(|| bad("missing split".into()))?,
        });
    }
    let missing: Vec<String> = records
        .iter()
        .flat_map(|r| std::iter::once(&r.image).chain(r.mask.as_ref()))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles { missing });
    }
    Ok(DatasetManifest { records })
}

/// A named, reproducible random stream: equal `(seed, stream)` pairs always
/// produce identical sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derives an independent sub-stream, e.g. one per sample index.
    pub fn child(&self, id: u64) -> RngState {
        RngState {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn write_gray(path: &Path, w: u32, h: u32, v: u8) {
        GrayImage::from_pixel(w, h, image::Luma([v])).save(path).unwrap();
    }

    #[test]
    fn white_black_and_mid_gray_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        write_gray(&p, 2, 2, 255);
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 1.0));
        write_gray(&p, 2, 2, 0);
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
        write_gray(&p, 2, 2, 128);
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert!((img.data()[0] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn colour_images_keep_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        RgbImage::from_pixel(3, 2, Rgb([255, 0, 51])).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 3, 3));
        assert_eq!(img.get(1, 2, 0), 1.0);
        assert_eq!(img.get(1, 2, 2), 0.2);
    }

    #[test]
    fn unreadable_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        fs::write(&p, b"not a png").unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("junk.png"), "{err}");
    }

    #[test]
    fn masks_binarize_at_half() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray(&p, 2, 2, 200);
        assert!(load_mask(&p).unwrap().data().iter().all(|&v| v == 1.0));
        write_gray(&p, 2, 2, 0);
        assert!(load_mask(&p).unwrap().data().iter().all(|&v| v == 0.0));
        let mut m = MaskBuffer::zeros(2, 3);
        m.set(0, 1, 1.0);
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn multichannel_mask_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        RgbImage::new(2, 2).save(&p).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_round_trip_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        write_gray(&img, 1, 1, 0);
        let manifest = DatasetManifest::new(vec![
            ManifestRecord {
                image: img.clone(),
                mask: Some(img.clone()),
                domain: "eta".into(),
                split: Split::Train,
            },
            ManifestRecord {
                image: img.clone(),
                mask: None,
                domain: "rho".into(),
                split: Split::Train,
            },
        ]);
        assert!(manifest.records[1].is_reconstruction_only());
        let mp = dir.path().join("manifest.txt");
        write_manifest(&manifest, &mp).unwrap();
        let text = fs::read_to_string(&mp).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "image=a.png\tmask=a.png\tdomain=eta\tsplit=train"
        );
        assert_eq!(read_manifest(&mp).unwrap(), manifest);

        fs::remove_file(&img).unwrap();
        match read_manifest(&mp) {
            Err(Error::MissingFiles { missing }) => assert!(missing[0].ends_with("a.png")),
            other => panic!("expected missing files, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("manifest.txt");
        write_manifest(&DatasetManifest::default(), &mp).unwrap();
        assert!(read_manifest(&mp).unwrap().is_empty());
    }

    #[test]
    fn rng_streams_reproduce() {
        let a = RngState::new(42, 3);
        let mut r1 = a.rng();
        let mut r2 = a.rng();
        for _ in 0..10_000 {
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
        assert_ne!(a.child(0), a.child(1));
        assert_ne!(
            a.child(0).rng().random::<u64>(),
            a.child(1).rng().random::<u64>()
        );
    }
}
