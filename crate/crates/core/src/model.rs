//! Shared residual encoder with a mask decoder and an image decoder.
//!
//! Every encoder level runs `blocks_per_level` residual blocks, records the
//! result as a skip feature, then halves the resolution with a stride-2
//! convolution. Two residual blocks without identity shortcut form the
//! bottleneck. Each decoder mirrors the levels: nearest ×2 upsample, 3×3
//! convolution, channel concatenation with the matching skip feature, then
//! residual blocks. A norm/swish/conv head and a sigmoid produce the output.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{ImageBuffer, MaskBuffer, RngState};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub num_levels: usize,
    pub blocks_per_level: usize,
    pub norm_groups: usize,
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            num_levels: 6,
            blocks_per_level: 2,
            norm_groups: 8,
            image_size: 256,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks: 2 levels, width 4, 8×8 input.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            base_width: 4,
            num_levels: 2,
            blocks_per_level: 2,
            norm_groups: 2,
            image_size: 8,
        }
    }

    /// Four levels at width 8 on 64×64 inputs.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            base_width: 8,
            num_levels: 4,
            blocks_per_level: 2,
            norm_groups: 8,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_width == 0 || self.num_levels == 0 {
            return bad("in_channels, base_width and num_levels must be positive".into());
        }
        if self.blocks_per_level == 0 {
            return bad("blocks_per_level must be at least 1".into());
        }
        if self.norm_groups == 0 || !self.base_width.is_multiple_of(self.norm_groups) {
            return bad(format!(
                "base_width {} must be divisible by norm_groups {}",
                self.base_width, self.norm_groups
            ));
        }
        let divisor = self.divisor();
        if self.image_size < divisor || !self.image_size.is_multiple_of(divisor) {
            return bad(format!(
                "image_size {} must be a positive multiple of 2^num_levels = {divisor}",
                self.image_size
            ));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1usize << self.num_levels
    }

    /// Channel width of encoder level `level`: doubling per level, capped at 8× base.
    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level.min(3)).min(8 * self.base_width)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width(self.num_levels - 1)
    }

    /// Closed-form learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let norm = |c: usize| 2 * c;
        let block = |cin: usize, cout: usize, shortcut: bool| {
            conv(cin, cout, 3)
                + norm(cout)
                + conv(cout, cout, 3)
                + norm(cout)
                + if shortcut && cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let extra = self.blocks_per_level - 1;
        let mut total = conv(self.in_channels, self.width(0), 3);
        let mut prev = self.width(0);
        for l in 0..self.num_levels {
            let w = self.width(l);
            total += block(prev, w, true) + extra * block(w, w, true) + conv(w, w, 3);
            prev = w;
        }
        let wb = self.bottleneck_width();
        total += 2 * block(wb, wb, false);
        let decoder = |out: usize| {
            let mut n = 0;
            let mut ch = wb;
            for l in (0..self.num_levels).rev() {
                let w = self.width(l);
                n += conv(ch, ch, 3) + block(ch + w, w, true) + extra * block(w, w, true);
                ch = w;
            }
            n + norm(self.width(0)) + conv(self.width(0), out, 3)
        };
        total + decoder(1) + decoder(self.in_channels)
    }
}

/// Skip features per level (finest first) plus the bottleneck.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl FeaturePyramid {
    pub fn level_count(&self) -> usize {
        self.skips.len() + 1
    }
}

/// Which decoder a parameter belongs to, derived from its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Encoder,
    MaskDecoder,
    ImageDecoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    params: ParamStore,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let fan_in = (cin * k * k) as f64;
        let dist = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
        let w = (0..cout * cin * k * k)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        self.store.insert(
            format!("{name}.weight"),
            Tensor::new(vec![cout, cin, k, k], w).expect("shape"),
        );
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, shortcut: bool) {
        let he = std::f64::consts::SQRT_2;
        self.conv(&format!("{name}.conv1"), cin, cout, 3, he);
        self.norm(&format!("{name}.norm1"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, he);
        self.norm(&format!("{name}.norm2"), cout);
        if shortcut && cin != cout {
            self.conv(&format!("{name}.proj"), cin, cout, 1, 1.0);
        }
    }
}

impl Network {
    /// Fan-in scaled normal weights, zero biases, unit norm gains. The output
    /// heads are scaled down so initial logits sit near zero.
    pub fn new(config: ModelConfig, seed: RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: seed.rng(),
        };
        let he = std::f64::consts::SQRT_2;
        init.conv("enc.stem", config.in_channels, config.width(0), 3, 1.0);
        let mut prev = config.width(0);
        for l in 0..config.num_levels {
            let w = config.width(l);
            for b in 0..config.blocks_per_level {
                let cin = if b == 0 { prev } else { w };
                init.block(&format!("enc.l{l}.b{b}"), cin, w, true);
            }
            init.conv(&format!("enc.l{l}.down"), w, w, 3, he);
            prev = w;
        }
        let wb = config.bottleneck_width();
        init.block("enc.mid.b0", wb, wb, false);
        init.block("enc.mid.b1", wb, wb, false);
        for (prefix, out) in [("mask", 1), ("image", config.in_channels)] {
            let mut ch = wb;
            for l in (0..config.num_levels).rev() {
                let w = config.width(l);
                init.conv(&format!("{prefix}.l{l}.up"), ch, ch, 3, he);
                for b in 0..config.blocks_per_level {
                    let cin = if b == 0 { ch + w } else { w };
                    init.block(&format!("{prefix}.l{l}.b{b}"), cin, w, true);
                }
                ch = w;
            }
            init.norm(&format!("{prefix}.head.norm"), config.width(0));
            init.conv(&format!("{prefix}.head.conv"), config.width(0), out, 3, 0.1);
        }
        Ok(Self {
            config,
            params: store,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Network::new(config, RngState::new(0, 0))?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter '{name}'"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        // Keep the canonical parameter order.
        let mut ordered = ParamStore::new();
        for (name, _) in reference.params.iter() {
            ordered.insert(name, params.get(name).expect("checked").clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn branch_of(name: &str) -> Branch {
        if name.starts_with("mask.") {
            Branch::MaskDecoder
        } else if name.starts_with("image.") {
            Branch::ImageDecoder
        } else {
            Branch::Encoder
        }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param_named(&self.params, name)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, geom: ConvGeometry) -> Result<Var> {
        let w = self.p(g, &format!("{name}.weight"))?;
        let b = self.p(g, &format!("{name}.bias"))?;
        g.conv2d(x, w, b, geom)
    }

    fn norm_act(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{name}.gamma"))?;
        let beta = self.p(g, &format!("{name}.beta"))?;
        let n = g.group_norm(x, gamma, beta, self.config.norm_groups)?;
        Ok(g.swish(n))
    }

    /// `shortcut(x) + F(x)` with `F = [conv → group-norm → swish] × 2`; the
    /// shortcut is the identity or a 1×1 projection when widths differ. With
    /// `shortcut = false` the block returns `F(x)` alone.
    pub fn residual_block(&self, g: &mut Graph, x: Var, name: &str, shortcut: bool) -> Result<Var> {
        let h = self.conv(g, x, &format!("{name}.conv1"), ConvGeometry::same(3))?;
        let h = self.norm_act(g, h, &format!("{name}.norm1"))?;
        let h = self.conv(g, h, &format!("{name}.conv2"), ConvGeometry::same(3))?;
        let h = self.norm_act(g, h, &format!("{name}.norm2"))?;
        if !shortcut {
            return Ok(h);
        }
        let proj = format!("{name}.proj.weight");
        let skip = if self.params.get(&proj).is_some() {
            self.conv(g, x, &format!("{name}.proj"), ConvGeometry::same(1))?
        } else {
            x
        };
        g.add(skip, h)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let divisor = self.config.divisor();
        if h % divisor != 0 || w % divisor != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by {divisor} (2^{} levels)",
                self.config.num_levels
            )));
        }
        let mut h = self.conv(g, x, "enc.stem", ConvGeometry::same(3))?;
        let mut skips = Vec::with_capacity(self.config.num_levels);
        for l in 0..self.config.num_levels {
            for b in 0..self.config.blocks_per_level {
                h = self.residual_block(g, h, &format!("enc.l{l}.b{b}"), true)?;
            }
            skips.push(h);
            h = self.conv(g, h, &format!("enc.l{l}.down"), ConvGeometry::down(3))?;
        }
        h = self.residual_block(g, h, "enc.mid.b0", false)?;
        h = self.residual_block(g, h, "enc.mid.b1", false)?;
        Ok(FeaturePyramid {
            skips,
            bottleneck: h,
        })
    }

    fn decode(&self, g: &mut Graph, pyr: &FeaturePyramid, prefix: &str) -> Result<Var> {
        if pyr.skips.len() != self.config.num_levels {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, model has {}",
                pyr.skips.len(),
                self.config.num_levels
            )));
        }
        let mut h = pyr.bottleneck;
        for l in (0..self.config.num_levels).rev() {
            h = g.upsample2x(h);
            h = self.conv(g, h, &format!("{prefix}.l{l}.up"), ConvGeometry::same(3))?;
            h = g.concat(h, pyr.skips[l])?;
            for b in 0..self.config.blocks_per_level {
                h = self.residual_block(g, h, &format!("{prefix}.l{l}.b{b}"), true)?;
            }
        }
        let h = self.norm_act(g, h, &format!("{prefix}.head.norm"))?;
        let logits = self.conv(g, h, &format!("{prefix}.head.conv"), ConvGeometry::same(3))?;
        Ok(g.sigmoid(logits))
    }

    /// `[B, 1, H, W]` foreground probabilities.
    pub fn decode_mask(&self, g: &mut Graph, pyr: &FeaturePyramid) -> Result<Var> {
        self.decode(g, pyr, "mask")
    }

    /// `[B, C, H, W]` reconstructed image in `(0,1)`.
    pub fn decode_image(&self, g: &mut Graph, pyr: &FeaturePyramid) -> Result<Var> {
        self.decode(g, pyr, "image")
    }

    fn prepare(&self, images: &[ImageBuffer]) -> Result<Tensor> {
        let converted: Vec<ImageBuffer> = images
            .iter()
            .map(|i| {
                if self.config.in_channels == 3 {
                    i.to_rgb()
                } else {
                    i.clone()
                }
            })
            .collect();
        Tensor::from_images(&converted)
    }

    /// Inference-only mask prediction.
    pub fn predict_masks(&self, images: &[ImageBuffer]) -> Result<Vec<MaskBuffer>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let mut g = Graph::new();
            let x = g.input(self.prepare(chunk)?);
            let pyr = self.encode(&mut g, x)?;
            let m = self.decode_mask(&mut g, &pyr)?;
            out.extend(g.value(m).to_masks());
        }
        Ok(out)
    }

    /// Inference-only reconstruction.
    pub fn reconstruct(&self, images: &[ImageBuffer]) -> Result<Vec<ImageBuffer>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let mut g = Graph::new();
            let x = g.input(self.prepare(chunk)?);
            let pyr = self.encode(&mut g, x)?;
            let r = self.decode_image(&mut g, &pyr)?;
            out.extend(g.value(r).to_images());
        }
        Ok(out)
    }

    /// One encoder pass feeding both decoders.
    pub fn forward_both(&self, images: &[ImageBuffer]) -> Result<(Vec<MaskBuffer>, Vec<ImageBuffer>)> {
        let mut g = Graph::new();
        let x = g.input(self.prepare(images)?);
        let pyr = self.encode(&mut g, x)?;
        let m = self.decode_mask(&mut g, &pyr)?;
        let r = self.decode_image(&mut g, &pyr)?;
        Ok((g.value(m).to_masks(), g.value(r).to_images()))
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let mut meta = serde_json::json!({
            "kind": "network",
            "model_config": self.config,
        });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), metadata) {
            m.extend(extra);
        }
        Checkpoint {
            metadata: meta,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (format!("model.{n}"), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds a network from a checkpoint, refusing configurations that
    /// differ from `expected` when one is given.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ckpt.metadata
                .get("model_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no model_config in metadata".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {config:?} does not match requested {exp:?}"
                )));
            }
        }
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if let Some(n) = name.strip_prefix("model.") {
                store.insert(n, t.clone());
            }
        }
        Network::from_parts(config, store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
        use rand::Rng;
        let mut rng = RngState::new(seed, 7).rng();
        (0..n)
            .map(|_| {
                ImageBuffer::new(size, size, 3, (0..size * size * 3).map(|_| rng.random()).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn parameter_formula_matches_construction() {
        for cfg in [
            ModelConfig::tiny(),
            ModelConfig::desk(),
            ModelConfig { base_width: 8, ..ModelConfig::default() },
        ] {
            let net = Network::new(cfg, RngState::new(1, 0)).unwrap();
            assert_eq!(net.params().scalar_count(), cfg.parameter_count(), "{cfg:?}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.image_size = 6;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.norm_groups = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn widths_double_and_cap() {
        let c = ModelConfig::default();
        let widths: Vec<usize> = (0..6).map(|l| c.width(l)).collect();
        assert_eq!(widths, vec![32, 64, 128, 256, 256, 256]);
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let cfg = ModelConfig::tiny();
        let mut net = Network::new(cfg, RngState::new(2, 0)).unwrap();
        for name in ["enc.l0.b1.conv1.weight", "enc.l0.b1.conv2.weight"] {
            net.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::new(
            vec![1, 4, 8, 8],
            (0..256).map(|i| (i as f64 * 0.3).sin()).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = net.residual_block(&mut g, xv, "enc.l0.b1", true).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn widening_block_preserves_spatial_size() {
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: RngState::new(3, 0).rng(),
        };
        init.block("blk", 8, 16, true);
        let net = Network {
            config: ModelConfig::desk(),
            params: store,
        };
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 8, 16, 16], 0.1));
        let y = net.residual_block(&mut g, x, "blk", true).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig::desk();
        let net = Network::new(cfg, RngState::new(4, 0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_images(&random_images(1, 64, 1)).unwrap());
        let pyr = net.encode(&mut g, x).unwrap();
        assert_eq!(pyr.level_count(), cfg.num_levels + 1);
        for (l, s) in pyr.skips.iter().enumerate() {
            let (_, c, h, _) = g.value(*s).dims4();
            assert_eq!((c, h), (cfg.width(l), 64 >> l));
        }
        assert_eq!(&g.value(pyr.bottleneck).shape()[2..], &[4, 4]);
    }

    #[test]
    fn full_size_config_reaches_four_by_four() {
        // 256 / 2^6 with a narrow width to keep the test quick.
        let cfg = ModelConfig {
            base_width: 2,
            norm_groups: 2,
            ..ModelConfig::default()
        };
        let net = Network::new(cfg, RngState::new(5, 0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, 256, 256], 0.5));
        let pyr = net.encode(&mut g, x).unwrap();
        assert_eq!(&g.value(pyr.bottleneck).shape()[2..], &[4, 4]);
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let net = Network::new(ModelConfig::desk(), RngState::new(6, 0)).unwrap();
        let err = net.predict_masks(&random_images(1, 24, 2)).unwrap_err().to_string();
        assert!(err.contains("16"), "{err}");
    }

    #[test]
    fn decoders_output_shapes_and_ranges() {
        let net = Network::new(ModelConfig::desk(), RngState::new(7, 0)).unwrap();
        let imgs = random_images(2, 64, 3);
        let masks = net.predict_masks(&imgs).unwrap();
        assert_eq!((masks[0].height(), masks[0].width()), (64, 64));
        assert!(masks.iter().all(|m| m.data().iter().all(|&v| v > 0.0 && v < 1.0)));
        let recon = net.reconstruct(&imgs).unwrap();
        assert_eq!((recon[0].height(), recon[0].width(), recon[0].channels()), (64, 64, 3));
        let mean = recon[0].data().iter().sum::<f64>() / recon[0].data().len() as f64;
        assert!(mean > 0.3 && mean < 0.7, "{mean}");
        assert_eq!(net.reconstruct(&imgs).unwrap(), recon);
    }

    #[test]
    fn shared_encoder_pass_equals_separate_passes() {
        let net = Network::new(ModelConfig::tiny(), RngState::new(8, 0)).unwrap();
        let imgs = random_images(3, 8, 4);
        let (m, r) = net.forward_both(&imgs).unwrap();
        assert_eq!(m, net.predict_masks(&imgs).unwrap());
        assert_eq!(r, net.reconstruct(&imgs).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = ModelConfig::tiny();
        let net = Network::new(cfg, RngState::new(9, 0)).unwrap();
        let ckpt = net.to_checkpoint(serde_json::json!({"epoch": 2}));
        let bytes = ckpt.to_bytes();
        let back = Network::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), Some(&cfg)).unwrap();
        assert_eq!(back, net);
        let other = ModelConfig {
            num_levels: 3,
            image_size: 16,
            ..cfg
        };
        assert!(matches!(
            Network::from_checkpoint(&ckpt, Some(&other)),
            Err(Error::Checkpoint(_))
        ));
    }
}
