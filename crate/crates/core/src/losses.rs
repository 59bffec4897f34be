//! Segmentation and reconstruction losses.
//!
//! Each loss has a kernel returning its value together with the gradient, a
//! graph wrapper used during training, and a buffer-level entry point.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ImageBuffer, MaskBuffer, RngState};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::tensor::{ConvGeometry, Tensor};

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub mse: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 1.0,
            dice: 1.0,
            mse: 1.0,
            ssim: 1.0,
            perceptual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.bce, self.dice, self.mse, self.ssim, self.perceptual];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn segmentation_active(&self) -> bool {
        self.bce != 0.0 || self.dice != 0.0
    }

    pub fn reconstruction_active(&self) -> bool {
        self.mse != 0.0 || self.ssim != 0.0 || self.perceptual != 0.0
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn batch_of(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(1).max(1)
}

/// Mean binary cross-entropy over every pixel of the batch.
pub fn bce_kernel(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same(pred, target)?;
    let n = pred.numel() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((&p, &y), g) in pred.data().iter().zip(target.data()).zip(grad.data_mut()) {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            *g = -(y / q - (1.0 - y) / (1.0 - q)) / n;
        }
    }
    Ok((sum / n, grad))
}

/// Soft Dice loss, `1 − mean_j (2I_j + 2s)/(|y_j| + |ŷ_j| + 2s)` with smoothing `s`.
pub fn dice_kernel(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<(f64, Tensor)> {
    check_same(pred, target)?;
    let b = batch_of(pred);
    let per = pred.numel() / b;
    let mut grad = Tensor::zeros(pred.shape());
    let mut acc = 0.0;
    for j in 0..b {
        let p = &pred.data()[j * per..(j + 1) * per];
        let y = &target.data()[j * per..(j + 1) * per];
        let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + y.iter().sum::<f64>() + 2.0 * smooth;
        let numer = 2.0 * inter + 2.0 * smooth;
        acc += numer / denom;
        let g = &mut grad.data_mut()[j * per..(j + 1) * per];
        for (gi, &yi) in g.iter_mut().zip(y) {
            *gi = -((2.0 * yi * denom - numer) / (denom * denom)) / b as f64;
        }
    }
    Ok((1.0 - acc / b as f64, grad))
}

/// Mean squared error over every element; returns gradients for both inputs.
pub fn mse_kernel(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    check_same(a, b)?;
    let n = a.numel() as f64;
    let mut ga = Tensor::zeros(a.shape());
    let mut sum = 0.0;
    for ((&x, &y), g) in a.data().iter().zip(b.data()).zip(ga.data_mut()) {
        let d = x - y;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    let gb = ga.scaled(-1.0);
    Ok((sum / n, ga, gb))
}

/// Mean absolute error; the subgradient at zero difference is 0.
pub fn mae_kernel(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    check_same(a, b)?;
    let n = a.numel() as f64;
    let mut ga = Tensor::zeros(a.shape());
    let mut sum = 0.0;
    for ((&x, &y), g) in a.data().iter().zip(b.data()).zip(ga.data_mut()) {
        let d = x - y;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    let gb = ga.scaled(-1.0);
    Ok((sum / n, ga, gb))
}

/// Normalized 1-D Gaussian of `size` taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `(h−k+1)×(w−k+1)` map back to `h×w`.
fn filter_valid_adjoint(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..ho {
        for x in 0..wo {
            let v = src[y * wo + x];
            for i in 0..k {
                rows[(y + i) * wo + x] += taps[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..wo {
            let v = rows[y * wo + x];
            for i in 0..k {
                out[y * w + x + i] += taps[i] * v;
            }
        }
    }
    out
}

/// `1 − SSIM` with an 11×11 Gaussian window (σ = 1.5), averaged over valid
/// window positions and channels, then over the batch. Images smaller than
/// the window shrink it to the smaller image side.
pub fn ssim_kernel(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    check_same(a, b)?;
    let (n, c, h, w) = a.dims4();
    let k = SSIM_WINDOW.min(h).min(w);
    let taps = gaussian_taps(k, SSIM_SIGMA);
    let positions = (h - k + 1) * (w - k + 1);
    let norm = (n * c * positions) as f64;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let mut total = 0.0;
    let plane = h * w;
    for p in 0..n * c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(x, h, w, &taps);
        let mu_y = filter_valid(y, h, w, &taps);
        let e_xx = filter_valid(&xx, h, w, &taps);
        let e_yy = filter_valid(&yy, h, w, &taps);
        let e_xy = filter_valid(&xy, h, w, &taps);

        // Per-position coefficients of dS/dx_i = Σ_p w(i−p)·(A_p + 2x_i·B_p + y_i·C_p).
        let mut ax = vec![0.0; positions];
        let mut bx = vec![0.0; positions];
        let mut ay = vec![0.0; positions];
        let mut by = vec![0.0; positions];
        let mut cxy = vec![0.0; positions];
        for q in 0..positions {
            let (mx, my) = (mu_x[q], mu_y[q]);
            let vx = e_xx[q] - mx * mx;
            let vy = e_yy[q] - my * my;
            let cov = e_xy[q] - mx * my;
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * cov + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            let ds_dmx = s * (2.0 * my / n1 - 2.0 * mx / d1);
            let ds_dmy = s * (2.0 * mx / n1 - 2.0 * my / d1);
            let ds_dvar = -s / d2;
            let ds_dcov = 2.0 * s / n2;
            ax[q] = ds_dmx - 2.0 * mx * ds_dvar - my * ds_dcov;
            ay[q] = ds_dmy - 2.0 * my * ds_dvar - mx * ds_dcov;
            bx[q] = ds_dvar;
            by[q] = ds_dvar;
            cxy[q] = ds_dcov;
        }
        let spread = |m: &[f64]| filter_valid_adjoint(m, h, w, &taps);
        let (sax, sbx, say, sby, sc) = (spread(&ax), spread(&bx), spread(&ay), spread(&by), spread(&cxy));
        let gxa = &mut ga.data_mut()[p * plane..(p + 1) * plane];
        for i in 0..plane {
            gxa[i] = -(sax[i] + 2.0 * x[i] * sbx[i] + y[i] * sc[i]) / norm;
        }
        let gyb = &mut gb.data_mut()[p * plane..(p + 1) * plane];
        for i in 0..plane {
            gyb[i] = -(say[i] + 2.0 * y[i] * sby[i] + x[i] * sc[i]) / norm;
        }
    }
    Ok((1.0 - total / norm, ga, gb))
}

/// Distance used to compare perceptual feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDistance {
    /// Element-mean squared difference.
    #[default]
    Squared,
    /// Element-mean absolute difference.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorProvenance {
    PretrainedClassifier,
    FrozenRandom,
}

/// A frozen feature map `θ(·)` used by the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    /// Records the feature computation for `x` on `g`; weights enter as constants.
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var>;
    fn provenance(&self) -> ExtractorProvenance;
    /// Hex SHA-256 over the frozen weights.
    fn fingerprint(&self) -> String;
}

/// A stack of convolutions with swish activations between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPyramidExtractor {
    layers: Vec<(Tensor, Tensor, ConvGeometry)>,
    provenance: ExtractorProvenance,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x7e57_f00d;

impl ConvPyramidExtractor {
    /// Two stride-2 3×3 convolutions (3→8→16) with fixed random weights.
    pub fn frozen_random(seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut rng = RngState::new(seed, 0xfea7).rng();
        let widths = [3usize, 8, 16];
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (cin, cout) = (pair[0], pair[1]);
                let fan_in = (cin * 9) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                let w: Vec<f64> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
                (
                    Tensor::new(vec![cout, cin, 3, 3], w).expect("shape"),
                    Tensor::zeros(&[cout]),
                    ConvGeometry::down(3),
                )
            })
            .collect();
        Self {
            layers,
            provenance: ExtractorProvenance::FrozenRandom,
        }
    }

    /// Wraps externally supplied convolution weights, e.g. converted from a
    /// pretrained classifier's early stages.
    pub fn from_layers(
        layers: Vec<(Tensor, Tensor, ConvGeometry)>,
        provenance: ExtractorProvenance,
    ) -> Result<Self> {
        let mut cin = 3;
        for (w, b, geom) in &layers {
            let (cout, c, kh, kw) = w.dims4();
            if c != cin || kh != geom.kernel || kw != geom.kernel || b.numel() != cout {
                return Err(Error::Config(format!(
                    "extractor layer {:?} does not follow {cin} input channels",
                    w.shape()
                )));
            }
            cin = cout;
        }
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        Ok(Self { layers, provenance })
    }

    /// Loads layers `layer{i}.weight` / `layer{i}.bias` from a parameter store;
    /// every layer uses stride-2 3×3 convolutions.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (
                store.get(&format!("layer{i}.weight")),
                store.get(&format!("layer{i}.bias")),
            ) else {
                break;
            };
            let k = w.dims4().2;
            layers.push((w.clone(), b.clone(), ConvGeometry::down(k)));
        }
        Self::from_layers(layers, ExtractorProvenance::PretrainedClassifier)
    }
}

impl FeatureExtractor for ConvPyramidExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b, geom)) in self.layers.iter().enumerate() {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            h = g.conv2d(h, wv, bv, *geom)?;
            if i + 1 < self.layers.len() {
                h = g.swish(h);
            }
        }
        Ok(h)
    }

    fn provenance(&self) -> ExtractorProvenance {
        self.provenance
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (w, b, _) in &self.layers {
            for v in w.data().iter().chain(b.data()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

// Graph-level losses ------------------------------------------------------

fn grad_if(g: &Graph, v: Var, t: Tensor) -> Option<Tensor> {
    g.requires_grad(v).then_some(t)
}

pub fn bce(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let (v, grad) = bce_kernel(g.value(pred), g.value(target))?;
    let ga = grad_if(g, pred, grad);
    Ok(g.loss(pred, target, v, ga, None))
}

pub fn dice(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let (v, grad) = dice_kernel(g.value(pred), g.value(target), DICE_SMOOTH)?;
    let ga = grad_if(g, pred, grad);
    Ok(g.loss(pred, target, v, ga, None))
}

pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (v, ga, gb) = mse_kernel(g.value(a), g.value(b))?;
    let (ga, gb) = (grad_if(g, a, ga), grad_if(g, b, gb));
    Ok(g.loss(a, b, v, ga, gb))
}

pub fn ssim(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (v, ga, gb) = ssim_kernel(g.value(a), g.value(b))?;
    let (ga, gb) = (grad_if(g, a, ga), grad_if(g, b, gb));
    Ok(g.loss(a, b, v, ga, gb))
}

pub fn perceptual(
    g: &mut Graph,
    recon: Var,
    clean: Var,
    extractor: &dyn FeatureExtractor,
    distance: FeatureDistance,
) -> Result<Var> {
    let fr = extractor.features(g, recon)?;
    let fc = extractor.features(g, clean)?;
    let (v, ga, gb) = match distance {
        FeatureDistance::Squared => mse_kernel(g.value(fr), g.value(fc))?,
        FeatureDistance::Absolute => mae_kernel(g.value(fr), g.value(fc))?,
    };
    let (ga, gb) = (grad_if(g, fr, ga), grad_if(g, fc, gb));
    Ok(g.loss(fr, fc, v, ga, gb))
}

/// Segmentation loss nodes: `(bce, dice, weighted sum)`.
#[derive(Debug, Clone, Copy)]
pub struct SegTerms {
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

pub fn seg(g: &mut Graph, pred: Var, target: Var, w: &LossWeights) -> Result<SegTerms> {
    let b = bce(g, pred, target)?;
    let d = dice(g, pred, target)?;
    let total = g.weighted_sum(&[(b, w.bce), (d, w.dice)]);
    Ok(SegTerms {
        bce: b,
        dice: d,
        total,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RecTerms {
    pub mse: Var,
    pub ssim: Var,
    pub perceptual: Var,
    pub total: Var,
}

pub fn rec(
    g: &mut Graph,
    recon: Var,
    clean: Var,
    extractor: &dyn FeatureExtractor,
    distance: FeatureDistance,
    w: &LossWeights,
) -> Result<RecTerms> {
    let m = mse(g, recon, clean)?;
    let s = ssim(g, recon, clean)?;
    let p = perceptual(g, recon, clean, extractor, distance)?;
    let total = g.weighted_sum(&[(m, w.mse), (s, w.ssim), (p, w.perceptual)]);
    Ok(RecTerms {
        mse: m,
        ssim: s,
        perceptual: p,
        total,
    })
}

// Buffer-level entry points ----------------------------------------------

/// Component values of the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLoss {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecLoss {
    pub mse: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub fn bce_loss(pred: &[MaskBuffer], target: &[MaskBuffer]) -> Result<f64> {
    Ok(bce_kernel(&Tensor::from_masks(pred)?, &Tensor::from_masks(target)?)?.0)
}

pub fn dice_loss(pred: &[MaskBuffer], target: &[MaskBuffer]) -> Result<f64> {
    dice_loss_smoothed(pred, target, DICE_SMOOTH)
}

pub fn dice_loss_smoothed(pred: &[MaskBuffer], target: &[MaskBuffer], smooth: f64) -> Result<f64> {
    Ok(dice_kernel(&Tensor::from_masks(pred)?, &Tensor::from_masks(target)?, smooth)?.0)
}

pub fn seg_loss(pred: &[MaskBuffer], target: &[MaskBuffer], w: &LossWeights) -> Result<SegLoss> {
    let bce = bce_loss(pred, target)?;
    let dice = dice_loss(pred, target)?;
    Ok(SegLoss {
        bce,
        dice,
        total: w.bce * bce + w.dice * dice,
    })
}

pub fn mse_loss(recon: &[ImageBuffer], clean: &[ImageBuffer]) -> Result<f64> {
    Ok(mse_kernel(&Tensor::from_images(recon)?, &Tensor::from_images(clean)?)?.0)
}

pub fn ssim_loss(recon: &[ImageBuffer], clean: &[ImageBuffer]) -> Result<f64> {
    Ok(ssim_kernel(&Tensor::from_images(recon)?, &Tensor::from_images(clean)?)?.0)
}

pub fn perceptual_loss(
    recon: &[ImageBuffer],
    clean: &[ImageBuffer],
    extractor: &dyn FeatureExtractor,
    distance: FeatureDistance,
) -> Result<f64> {
    let to_rgb = |v: &[ImageBuffer]| v.iter().map(ImageBuffer::to_rgb).collect::<Vec<_>>();
    let mut g = Graph::new();
    let a = g.input(Tensor::from_images(&to_rgb(recon))?);
    let b = g.input(Tensor::from_images(&to_rgb(clean))?);
    let l = perceptual(&mut g, a, b, extractor, distance)?;
    Ok(g.value(l).item())
}

pub fn rec_loss(
    recon: &[ImageBuffer],
    clean: &[ImageBuffer],
    extractor: &dyn FeatureExtractor,
    w: &LossWeights,
) -> Result<RecLoss> {
    let mse = mse_loss(recon, clean)?;
    let ssim = ssim_loss(recon, clean)?;
    let perceptual = perceptual_loss(recon, clean, extractor, FeatureDistance::Squared)?;
    Ok(RecLoss {
        mse,
        ssim,
        perceptual,
        total: w.mse * mse + w.ssim * ssim + w.perceptual * perceptual,
    })
}

pub fn total_loss(seg: f64, rec: f64) -> f64 {
    seg + rec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(vals: &[f64], w: usize) -> MaskBuffer {
        MaskBuffer::new(vals.len() / w, w, vals.to_vec()).unwrap()
    }

    fn noise_image(seed: u64, h: usize, w: usize) -> ImageBuffer {
        use rand::Rng;
        let mut rng = RngState::new(seed, 0).rng();
        ImageBuffer::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn bce_anchors() {
        let half = mask(&[0.5; 4], 2);
        for t in [mask(&[0.0, 1.0, 1.0, 0.0], 2), mask(&[1.0; 4], 2)] {
            let v = bce_loss(std::slice::from_ref(&half), &[t]).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let v = bce_loss(&[mask(&[0.9], 1)], &[mask(&[1.0], 1)]).unwrap();
        assert!((v - 0.10536051565782628).abs() < 1e-12);
        let t = mask(&[0.0, 1.0, 1.0, 0.0], 2);
        let v = bce_loss(std::slice::from_ref(&t), std::slice::from_ref(&t)).unwrap();
        assert!(v > 0.0 && v < 2e-7);
    }

    #[test]
    fn dice_anchors() {
        let t = mask(&[0.0, 1.0, 1.0, 0.0], 2);
        assert!(dice_loss(std::slice::from_ref(&t), std::slice::from_ref(&t)).unwrap().abs() < 1e-15);
        let n = 16.0;
        let v = dice_loss(&[mask(&[1.0; 16], 4)], &[mask(&[0.0; 16], 4)]).unwrap();
        assert!((v - (1.0 - 2.0 / (n + 2.0))).abs() < 1e-15);
        let empty = mask(&[0.0; 4], 2);
        assert!(dice_loss(std::slice::from_ref(&empty), std::slice::from_ref(&empty)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn seg_loss_weighting() {
        let p = [mask(&[0.5; 4], 2)];
        let t = [mask(&[1.0, 0.0, 0.0, 0.0], 2)];
        let c = seg_loss(&p, &t, &LossWeights::default()).unwrap();
        assert!((c.total - (c.bce + c.dice)).abs() < 1e-15);
        let w = LossWeights { bce: 0.0, ..LossWeights::default() };
        assert_eq!(seg_loss(&p, &t, &w).unwrap().total, c.dice);
        let w = LossWeights { bce: 2.0, dice: 0.0, ..LossWeights::default() };
        assert!((seg_loss(&p, &t, &w).unwrap().total - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn mse_anchors() {
        let a = ImageBuffer::filled(3, 3, 3, 0.4);
        let b = ImageBuffer::filled(3, 3, 3, 0.5);
        assert_eq!(mse_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        assert!((mse_loss(&[a], &[b]).unwrap() - 0.01).abs() < 1e-15);
        let z = ImageBuffer::filled(2, 2, 3, 0.0);
        let o = ImageBuffer::filled(2, 2, 3, 1.0);
        assert_eq!(mse_loss(&[z], &[o]).unwrap(), 1.0);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = noise_image(1, 16, 16);
        let b = noise_image(2, 16, 16);
        assert!(ssim_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap().abs() < 1e-12);
        let ab = ssim_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let ba = ssim_loss(&[b], &[a]).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.0 && ab <= 2.0);
        let c = ImageBuffer::filled(12, 12, 3, 0.5);
        assert!(ssim_loss(std::slice::from_ref(&c), std::slice::from_ref(&c)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ssim_window_shrinks_for_small_images() {
        let a = noise_image(3, 4, 4);
        let b = noise_image(4, 4, 4);
        let v = ssim_loss(&[a], &[b]).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn ssim_adjoint_is_transpose() {
        let taps = gaussian_taps(5, 1.5);
        let (h, w) = (9, 7);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..(h - 4) * (w - 4)).map(|i| (i as f64 * 0.91).cos()).collect();
        let fx = filter_valid(&x, h, w, &taps);
        let aty = filter_valid_adjoint(&y, h, w, &taps);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn perceptual_properties() {
        let ex = ConvPyramidExtractor::frozen_random(DEFAULT_EXTRACTOR_SEED);
        let a = noise_image(5, 8, 8);
        let b = noise_image(6, 8, 8);
        let d = FeatureDistance::Squared;
        assert_eq!(perceptual_loss(std::slice::from_ref(&a), std::slice::from_ref(&a), &ex, d).unwrap(), 0.0);
        assert!(perceptual_loss(std::slice::from_ref(&a), std::slice::from_ref(&b), &ex, d).unwrap() > 0.0);
        assert_eq!(ex.fingerprint(), ConvPyramidExtractor::frozen_random(DEFAULT_EXTRACTOR_SEED).fingerprint());
        assert_eq!(ex.fingerprint().len(), 64);
        assert_eq!(ex.provenance(), ExtractorProvenance::FrozenRandom);
    }

    #[test]
    fn squared_feature_distance_is_quadratic() {
        let fa = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let fb = Tensor::zeros(&[1, 2, 2, 2]);
        let doubled = fa.scaled(2.0);
        let (l1, _, _) = mse_kernel(&fa, &fb).unwrap();
        let (l2, _, _) = mse_kernel(&doubled, &fb).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_combination() {
        let ex = ConvPyramidExtractor::frozen_random(1);
        let a = noise_image(7, 12, 12);
        let b = noise_image(8, 12, 12);
        let all = rec_loss(std::slice::from_ref(&a), std::slice::from_ref(&b), &ex, &LossWeights::default()).unwrap();
        assert!((all.total - (all.mse + all.ssim + all.perceptual)).abs() < 1e-12);
        let mse_only = LossWeights { ssim: 0.0, perceptual: 0.0, ..LossWeights::default() };
        assert_eq!(rec_loss(std::slice::from_ref(&a), std::slice::from_ref(&b), &ex, &mse_only).unwrap().total, all.mse);
        let same = rec_loss(std::slice::from_ref(&a), std::slice::from_ref(&a), &ex, &LossWeights::default()).unwrap();
        assert!(same.total.abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(0.5, 0.25), 0.75);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(bce_loss(&[mask(&[0.5; 4], 2)], &[mask(&[0.5; 6], 3)]).is_err());
        assert!(mse_loss(&[ImageBuffer::filled(2, 2, 3, 0.0)], &[ImageBuffer::filled(3, 2, 3, 0.0)]).is_err());
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights { ssim: -1.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
