//! Dice / IoU scores and per-domain evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{load_image, load_mask, DatasetManifest, ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};
use crate::model::Network;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `(|P∩G|, |P|, |G|)` after binarizing the prediction at `threshold`.
fn counts(pred: &MaskBuffer, gt: &MaskBuffer, threshold: f64) -> Result<(usize, usize, usize)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&pv, &gv) in pred.data().iter().zip(gt.data()) {
        let pb = pv > threshold;
        let gb = gv > 0.5;
        p += pb as usize;
        g += gb as usize;
        inter += (pb && gb) as usize;
    }
    Ok((inter, p, g))
}

/// `2|P∩G| / (|P|+|G|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred: &MaskBuffer, gt: &MaskBuffer, threshold: f64) -> Result<f64> {
    let (i, p, g) = counts(pred, gt, threshold)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`, defined as 1 when both masks are empty.
pub fn iou_score(pred: &MaskBuffer, gt: &MaskBuffer, threshold: f64) -> Result<f64> {
    let (i, p, g) = counts(pred, gt, threshold)?;
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub domain: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSummary {
    pub domain: String,
    pub count: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub images: Vec<ImageScore>,
    pub domains: Vec<DomainSummary>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    /// Records skipped because they carry no mask.
    pub skipped: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    /// Aggregates per-image scores in the given order.
    pub fn from_scores(images: Vec<ImageScore>, threshold: f64, skipped: Vec<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("no evaluable records".into()));
        }
        let mut by_domain: BTreeMap<&str, Vec<&ImageScore>> = BTreeMap::new();
        for s in &images {
            by_domain.entry(&s.domain).or_default().push(s);
        }
        let domains = by_domain
            .into_iter()
            .map(|(d, v)| DomainSummary {
                domain: d.to_string(),
                count: v.len(),
                mean_dice: mean(v.iter().map(|s| s.dice)),
                mean_iou: mean(v.iter().map(|s| s.iou)),
            })
            .collect();
        Ok(Self {
            threshold,
            mean_dice: mean(images.iter().map(|s| s.dice)),
            mean_iou: mean(images.iter().map(|s| s.iou)),
            images,
            domains,
            skipped,
        })
    }

    fn header(&self) -> String {
        format!(
            "# threshold={} empty_vs_empty=1.0 skipped={}\n",
            self.threshold,
            self.skipped.len()
        )
    }

    /// Per-image CSV: `id,domain,dice,iou`.
    pub fn images_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("id,domain,dice,iou\n");
        for s in &self.images {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", s.id, s.domain, s.dice, s.iou);
        }
        out
    }

    /// Per-domain rows followed by an `overall` row.
    pub fn summary_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("domain,count,mean_dice,mean_iou\n");
        for d in &self.domains {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6}",
                d.domain, d.count, d.mean_dice, d.mean_iou
            );
        }
        let _ = writeln!(
            out,
            "overall,{},{:.6},{:.6}",
            self.images.len(),
            self.mean_dice,
            self.mean_iou
        );
        out
    }

    /// Writes `report.csv` and `report_summary.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.images_csv()),
            ("report_summary.csv", self.summary_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// One labelled image ready for scoring.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub domain: &'a str,
    pub image: &'a ImageBuffer,
    pub mask: &'a MaskBuffer,
}

/// Scores in-memory pairs; images must already match the network input size.
pub fn evaluate_items(
    network: &Network,
    items: &[EvalItem<'_>],
    threshold: f64,
    skipped: Vec<String>,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(items.len());
    for chunk in items.chunks(8) {
        let images: Vec<ImageBuffer> = chunk.iter().map(|it| it.image.clone()).collect();
        let preds = network.predict_masks(&images)?;
        for (pred, it) in preds.iter().zip(chunk) {
            scores.push(ImageScore {
                id: it.id.to_string(),
                domain: it.domain.to_string(),
                dice: dice_score(pred, it.mask, threshold)?,
                iou: iou_score(pred, it.mask, threshold)?,
            });
        }
    }
    EvalReport::from_scores(scores, threshold, skipped)
}

/// Runs the mask branch over every masked record and aggregates scores.
pub fn evaluate_dataset(network: &Network, manifest: &DatasetManifest, threshold: f64) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Data("no evaluable records".into()));
    }
    let size = network.config().image_size;
    let mut skipped = Vec::new();
    let mut loaded = Vec::new();
    for r in &manifest.records {
        match &r.mask {
            Some(m) => loaded.push((
                r.id(),
                r.domain.as_str(),
                load_image(&r.image)?.resize(size, size),
                load_mask(m)?.resize(size, size),
            )),
            None => skipped.push(r.id()),
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipping {} records without masks", skipped.len());
    }
    let items: Vec<EvalItem<'_>> = loaded
        .iter()
        .map(|(id, domain, image, mask)| EvalItem {
            id,
            domain,
            image,
            mask,
        })
        .collect();
    evaluate_items(network, &items, threshold, skipped)
}
