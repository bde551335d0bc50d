//! Keypoint evaluation: OKS, COCO-style AP/AR, PCK@α and the PCK-vs-α AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::KeypointSet;
use crate::synthdata::{parse_triplets, CocoFile};

pub const DEFAULT_KAPPA: f64 = 0.08;
pub const DEFAULT_PCK_ALPHA: f64 = 0.05;
pub const DEFAULT_MAX_DETS: usize = 20;
pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckNorm {
    /// Longer side of the ground-truth box.
    BboxMaxSide,
}

impl PckNorm {
    pub fn name(self) -> &'static str {
        match self {
            PckNorm::BboxMaxSide => "bbox_max_side",
        }
    }

    fn length(self, gt: &KeypointSet) -> f64 {
        match self {
            PckNorm::BboxMaxSide => gt.bbox[2].max(gt.bbox[3]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Per-keypoint OKS falloff `k_i`.
    pub kappa: Vec<f64>,
    pub oks_thresholds: Vec<f64>,
    pub pck_alpha: f64,
    pub pck_norm: PckNorm,
    /// PCK is integrated over `α ∈ [0, auc_max]` on a grid of `auc_step`.
    pub auc_max: f64,
    pub auc_step: f64,
    /// Medium band is `(lo, hi]` in squared pixels.
    pub medium_area: (f64, f64),
    /// Large band is `(large_min, ∞)`.
    pub large_min: f64,
    pub max_dets: usize,
}

impl EvalConfig {
    pub fn new(num_keypoints: usize) -> Self {
        EvalConfig {
            kappa: vec![DEFAULT_KAPPA; num_keypoints],
            oks_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            pck_alpha: DEFAULT_PCK_ALPHA,
            pck_norm: PckNorm::BboxMaxSide,
            auc_max: 0.5,
            auc_step: 0.01,
            medium_area: (32.0 * 32.0, 96.0 * 96.0),
            large_min: 96.0 * 96.0,
            max_dets: DEFAULT_MAX_DETS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kappa.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return bad("every kappa must be positive".into());
        }
        if self.oks_thresholds.is_empty() || self.oks_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("OKS thresholds must be non-empty and strictly increasing".into());
        }
        if !(self.pck_alpha > 0.0) {
            return bad(format!("pck alpha {} must be positive", self.pck_alpha));
        }
        if !(self.auc_step > 0.0 && self.auc_max > 0.0 && self.auc_step <= self.auc_max) {
            return bad(format!(
                "invalid AUC range [0, {}] step {}",
                self.auc_max, self.auc_step
            ));
        }
        let steps = self.auc_max / self.auc_step;
        if (steps - steps.round()).abs() > 1e-9 {
            return bad("AUC range must be a whole number of steps".into());
        }
        if self.max_dets == 0 {
            return bad("max_dets must be positive".into());
        }
        Ok(())
    }

    fn auc_grid(&self) -> Vec<f64> {
        let steps = (self.auc_max / self.auc_step).round() as usize;
        (0..=steps).map(|k| k as f64 * self.auc_step).collect()
    }
}

/// Object keypoint similarity of `pred` against `gt`.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, cfg: &EvalConfig) -> Result<f64> {
    if pred.len() != gt.len() || cfg.kappa.len() != gt.len() {
        return Err(Error::Validation(format!(
            "OKS over {} predicted, {} ground-truth keypoints and {} kappas",
            pred.len(),
            gt.len(),
            cfg.kappa.len()
        )));
    }
    let area = gt.bbox_area();
    if !(area > 0.0) {
        return Err(Error::Validation(
            "OKS undefined for a zero-area ground-truth box".into(),
        ));
    }
    let mut sum = 0.0;
    let mut labeled = 0usize;
    for i in 0..gt.len() {
        if gt.visibility[i] == 0 {
            continue;
        }
        let (dx, dy) = (
            pred.coords[i][0] - gt.coords[i][0],
            pred.coords[i][1] - gt.coords[i][1],
        );
        let k = cfg.kappa[i];
        sum += (-(dx * dx + dy * dy) / (2.0 * area * k * k)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::Validation(
            "OKS undefined: no labeled ground-truth keypoints".into(),
        ));
    }
    Ok(sum / labeled as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub kps: KeypointSet,
    pub score: f64,
}

/// Ground truth and detections of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage {
    pub image_id: u64,
    pub gts: Vec<KeypointSet>,
    pub dets: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Band {
    All,
    Medium,
    Large,
}

impl Band {
    fn contains(self, area: f64, cfg: &EvalConfig) -> bool {
        match self {
            Band::All => true,
            Band::Medium => area > cfg.medium_area.0 && area <= cfg.medium_area.1,
            Band::Large => area > cfg.large_min,
        }
    }
}

/// Area of the box spanned by a detection's keypoints.
pub fn keypoint_extent_area(kps: &KeypointSet) -> f64 {
    if kps.coords.is_empty() {
        return 0.0;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for c in &kps.coords {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    (x1 - x0) * (y1 - y0)
}

/// Result of greedy matching on one image at one OKS threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Matched detection index per ground truth.
    pub gt_match: Vec<Option<usize>>,
    /// Matched ground-truth index per detection, in the given detection order.
    pub det_match: Vec<Option<usize>>,
}

/// Detection indices in evaluation order: score descending, then index.
fn det_order(dets: &[Detection], max_dets: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order.truncate(max_dets);
    order
}

/// Greedy matching: each detection in score order takes the free ground
/// truth with the highest OKS at or above `threshold`, preferring
/// non-ignored ground truths and lower indices on ties.
pub fn greedy_match(
    oks: &[Vec<Option<f64>>],
    order: &[usize],
    gt_ignore: &[bool],
    threshold: f64,
) -> MatchResult {
    let ngt = gt_ignore.len();
    let mut gt_match = vec![None; ngt];
    let mut det_match = vec![None; oks.len()];
    let floor = threshold.min(1.0 - 1e-10);
    for &d in order {
        let mut best: Option<(u8, f64, usize)> = None;
        for g in 0..ngt {
            if gt_match[g].is_some() {
                continue;
            }
            let Some(o) = oks[d][g] else { continue };
            if o < floor {
                continue;
            }
            let class = if gt_ignore[g] { 1 } else { 2 };
            let better = match best {
                None => true,
                Some((bc, bo, _)) => class > bc || (class == bc && o > bo),
            };
            if better {
                best = Some((class, o, g));
            }
        }
        if let Some((_, _, g)) = best {
            gt_match[g] = Some(d);
            det_match[d] = Some(g);
        }
    }
    MatchResult {
        gt_match,
        det_match,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApAr {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `-1` when the band holds no ground truth.
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar: f64,
    /// Ground-truth instances without a labeled keypoint, ignored throughout.
    pub skipped_gts: usize,
}

struct Prepared<'a> {
    image: &'a EvalImage,
    order: Vec<usize>,
    oks: Vec<Vec<Option<f64>>>,
    gt_area: Vec<f64>,
    gt_unlabeled: Vec<bool>,
}

fn prepare<'a>(images: &'a [EvalImage], cfg: &EvalConfig) -> Result<Vec<Prepared<'a>>> {
    let mut sorted: Vec<&EvalImage> = images.iter().collect();
    sorted.sort_by_key(|im| im.image_id);
    if sorted.windows(2).any(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::Validation(
            "duplicate image ids in evaluation set".into(),
        ));
    }
    sorted
        .into_iter()
        .map(|image| {
            let mut oks_m = vec![vec![None; image.gts.len()]; image.dets.len()];
            let mut gt_unlabeled = vec![false; image.gts.len()];
            for (g, gt) in image.gts.iter().enumerate() {
                gt_unlabeled[g] = gt.labeled_count() == 0 || !(gt.bbox_area() > 0.0);
                if gt_unlabeled[g] {
                    continue;
                }
                for (d, det) in image.dets.iter().enumerate() {
                    oks_m[d][g] = Some(oks(&det.kps, gt, cfg)?);
                }
            }
            Ok(Prepared {
                image,
                order: det_order(&image.dets, cfg.max_dets),
                oks: oks_m,
                gt_area: image.gts.iter().map(KeypointSet::bbox_area).collect(),
                gt_unlabeled,
            })
        })
        .collect()
}

/// Precision averaged over the recall grid, and final recall, for one band and threshold.
fn band_threshold(
    prepared: &[Prepared],
    band: Band,
    threshold: f64,
    cfg: &EvalConfig,
) -> Option<(f64, f64)> {
    // (score, image rank, detection index, true positive)
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut npig = 0usize;
    for (rank, p) in prepared.iter().enumerate() {
        let gt_ignore: Vec<bool> = (0..p.gt_area.len())
            .map(|g| p.gt_unlabeled[g] || !band.contains(p.gt_area[g], cfg))
            .collect();
        npig += gt_ignore.iter().filter(|&&i| !i).count();
        let m = greedy_match(&p.oks, &p.order, &gt_ignore, threshold);
        for &d in &p.order {
            let ignored = match m.det_match[d] {
                Some(g) => gt_ignore[g],
                None => !band.contains(keypoint_extent_area(&p.image.dets[d].kps), cfg),
            };
            if !ignored {
                scored.push((p.image.dets[d].score, rank, d, m.det_match[d].is_some()));
            }
        }
    }
    if npig == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in &scored {
        if s.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npig as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&rc| rc < target);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    let final_recall = recall.last().copied().unwrap_or(0.0);
    Some((total / RECALL_POINTS as f64, final_recall))
}

fn band_summary(prepared: &[Prepared], band: Band, cfg: &EvalConfig) -> Option<Vec<(f64, f64)>> {
    cfg.oks_thresholds
        .iter()
        .map(|&t| band_threshold(prepared, band, t, cfg))
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        -1.0
    } else {
        s / n as f64
    }
}

/// COCO-style AP/AR sweep over the configured OKS thresholds.
pub fn coco_ap_ar(images: &[EvalImage], cfg: &EvalConfig) -> Result<ApAr> {
    cfg.validate()?;
    let prepared = prepare(images, cfg)?;
    let skipped_gts = prepared
        .iter()
        .map(|p| p.gt_unlabeled.iter().filter(|&&u| u).count())
        .sum();
    let all = band_summary(&prepared, Band::All, cfg);
    let at = |target: f64| -> f64 {
        match (
            &all,
            cfg.oks_thresholds
                .iter()
                .position(|&t| (t - target).abs() < 1e-9),
        ) {
            (Some(rows), Some(i)) => rows[i].0,
            _ => -1.0,
        }
    };
    let band_ap = |band| {
        band_summary(&prepared, band, cfg).map_or(-1.0, |rows| mean(rows.iter().map(|r| r.0)))
    };
    Ok(ApAr {
        ap: all
            .as_ref()
            .map_or(-1.0, |rows| mean(rows.iter().map(|r| r.0))),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_m: band_ap(Band::Medium),
        ap_l: band_ap(Band::Large),
        ar: all
            .as_ref()
            .map_or(-1.0, |rows| mean(rows.iter().map(|r| r.1))),
        skipped_gts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub value: f64,
    pub correct: usize,
    pub total: usize,
    /// Ground-truth instances with a zero-extent box.
    pub skipped: usize,
}

/// Pair each ground truth with the free detection of highest OKS; `None` if none is left.
fn pair_instances(image: &EvalImage, cfg: &EvalConfig) -> Result<Vec<Option<usize>>> {
    let mut used = vec![false; image.dets.len()];
    let mut out = Vec::with_capacity(image.gts.len());
    for gt in &image.gts {
        let mut best: Option<(f64, usize)> = None;
        if gt.labeled_count() > 0 && gt.bbox_area() > 0.0 {
            for (d, det) in image.dets.iter().enumerate() {
                if used[d] {
                    continue;
                }
                let o = oks(&det.kps, gt, cfg)?;
                if best.is_none_or(|(bo, _)| o > bo) {
                    best = Some((o, d));
                }
            }
        } else if let Some(d) = (0..image.dets.len()).find(|&d| !used[d]) {
            best = Some((0.0, d));
        }
        if let Some((_, d)) = best {
            used[d] = true;
        }
        out.push(best.map(|(_, d)| d));
    }
    Ok(out)
}

/// Fraction of labeled keypoints within `alpha · norm` of the ground truth (strict).
pub fn pck(images: &[EvalImage], alpha: f64, cfg: &EvalConfig) -> Result<PckResult> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!(
            "pck alpha {alpha} must be non-negative"
        )));
    }
    let mut res = PckResult {
        value: 0.0,
        correct: 0,
        total: 0,
        skipped: 0,
    };
    for image in images {
        let pairs = pair_instances(image, cfg)?;
        for (gt, det) in image.gts.iter().zip(pairs) {
            let norm = cfg.pck_norm.length(gt);
            if !(norm > 0.0) {
                res.skipped += 1;
                continue;
            }
            for i in 0..gt.len() {
                if gt.visibility[i] == 0 {
                    continue;
                }
                res.total += 1;
                if let Some(d) = det {
                    let p = image.dets[d].kps.coords[i];
                    let dist = (p[0] - gt.coords[i][0]).hypot(p[1] - gt.coords[i][1]);
                    if dist / norm < alpha {
                        res.correct += 1;
                    }
                }
            }
        }
    }
    res.value = if res.total == 0 {
        0.0
    } else {
        res.correct as f64 / res.total as f64
    };
    Ok(res)
}

/// Area under PCK(α) on the configured grid, normalised by the range width.
pub fn auc(images: &[EvalImage], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let curve = pck_curve(images, cfg)?;
    let area: f64 = curve
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    Ok(area / cfg.auc_max)
}

/// `(α, PCK@α)` over the AUC grid.
pub fn pck_curve(images: &[EvalImage], cfg: &EvalConfig) -> Result<Vec<(f64, f64)>> {
    cfg.auc_grid()
        .into_iter()
        .map(|a| Ok((a, pck(images, a, cfg)?.value)))
        .collect()
}

/// One predicted instance as stored in a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    /// Flat `x, y, v` triplets.
    pub keypoints: Vec<f64>,
    pub score: f64,
}

fn default_category() -> u64 {
    1
}

impl PredictionRecord {
    pub fn from_keypoints(image_id: u64, kps: &KeypointSet) -> Self {
        PredictionRecord {
            image_id,
            category_id: 1,
            keypoints: kps
                .coords
                .iter()
                .zip(&kps.visibility)
                .flat_map(|(c, &v)| [c[0], c[1], v as f64])
                .collect(),
            score: kps.instance_score(),
        }
    }

    pub fn to_detection(&self, species: &str) -> Result<Detection> {
        let (coords, vis) = parse_triplets(&self.keypoints)?;
        let bbox = crate::heatmap::bbox_around(&coords, 0.0);
        Ok(Detection {
            kps: KeypointSet::new(coords, vis, bbox, species)?,
            score: self.score,
        })
    }
}

/// Join predictions with ground truth by image id.
pub fn assemble(gt: &CocoFile, preds: &[PredictionRecord]) -> Result<Vec<EvalImage>> {
    let grouped = gt.instances()?;
    let species = gt.category().map(|c| c.name.clone()).unwrap_or_default();
    let mut images: Vec<EvalImage> = grouped
        .into_iter()
        .map(|(image_id, gts)| EvalImage {
            image_id,
            gts,
            dets: Vec::new(),
        })
        .collect();
    for p in preds {
        let slot = images
            .iter_mut()
            .find(|im| im.image_id == p.image_id)
            .ok_or_else(|| {
                Error::Validation(format!("prediction for unknown image {}", p.image_id))
            })?;
        slot.dets.push(p.to_detection(&species)?);
    }
    Ok(images)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub num_instances: usize,
    pub ap_ar: ApAr,
    pub pck: PckResult,
    pub auc: f64,
    pub config: EvalConfig,
}

pub fn evaluate(images: &[EvalImage], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    Ok(EvalReport {
        num_images: images.len(),
        num_instances: images.iter().map(|im| im.gts.len()).sum(),
        ap_ar: coco_ap_ar(images, cfg)?,
        pck: pck(images, cfg.pck_alpha, cfg)?,
        auc: auc(images, cfg)?,
        config: cfg.clone(),
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let a = &self.ap_ar;
        let rows = [
            ("AP", a.ap),
            ("AP50", a.ap50),
            ("AP75", a.ap75),
            ("AP_M", a.ap_m),
            ("AP_L", a.ap_l),
            ("AR", a.ar),
            (&*format!("PCK@{}", self.config.pck_alpha), self.pck.value),
            ("AUC", self.auc),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        let _ = writeln!(out, "pck_norm,{}", self.config.pck_norm.name());
        let kappa: Vec<String> = self.config.kappa.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(out, "kappa,{}", kappa.join(";"));
        let _ = writeln!(out, "skipped_oks_instances,{}", a.skipped_gts);
        let _ = writeln!(out, "skipped_pck_instances,{}", self.pck.skipped);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("evaluation report", e))
    }
}
