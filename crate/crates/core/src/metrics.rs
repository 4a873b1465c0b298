//! Proposal quality: IoU, binarization, average recall and AUC.
//!
//! Recall at an IoU threshold uses one-to-one matching between the top-n
//! proposals and the ground truths: a ground truth is covered when it is
//! matched to a distinct proposal with IoU at or above the threshold, and
//! the number covered is maximized (maximum bipartite matching).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// The ten IoU thresholds `0.50, 0.55, ..., 0.95`.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Proposal counts reported as AR@10, AR@100 and AR@1000.
pub const REPORTED_COUNTS: [usize; 3] = [10, 100, 1000];

/// Default binarization threshold for continuous masks.
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.2;

// Recall comparisons treat IoU values within this distance of a threshold
// as reaching it, so 0.70 passes t = 0.7 despite float rounding.
pub const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return shape_err("mask", format!("{}x{} mask with {} pixels", width, height, bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Copies this mask into an otherwise empty `width x height` canvas with
    /// its top-left corner at `(x0, y0)`, clipping at the canvas edge.
    pub fn placed(&self, x0: usize, y0: usize, width: usize, height: usize) -> BinaryMask {
        let mut out = BinaryMask::empty(width, height);
        for y in 0..self.height.min(height.saturating_sub(y0)) {
            for x in 0..self.width.min(width.saturating_sub(x0)) {
                out.bits[(y0 + y) * width + x0 + x] = self.get(x, y);
            }
        }
        out
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with exclusive upper corner.
    pub fn tight_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks have IoU 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return shape_err("iou", format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU of two boxes `(x0, y0, x1, y1)` with exclusive upper corners.
pub fn box_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let area = |r: (usize, usize, usize, usize)| (r.2.saturating_sub(r.0) * r.3.saturating_sub(r.1)) as f64;
    let ix = a.2.min(b.2).saturating_sub(a.0.max(b.0));
    let iy = a.3.min(b.3).saturating_sub(a.1.max(b.1));
    let inter = (ix * iy) as f64;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pixels at or above `threshold` become foreground.
pub fn binarize(mask: &[f64], width: usize, height: usize, threshold: f64) -> Result<BinaryMask> {
    BinaryMask::new(width, height, mask.iter().map(|&v| v >= threshold).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    pub score: f64,
}

/// Masks ordered by non-increasing score.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ProposalSet {
    items: Vec<ScoredMask>,
}

impl ProposalSet {
    /// Sorts by descending score; equal scores keep their input order.
    pub fn new(mut items: Vec<ScoredMask>) -> Self {
        items.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { items }
    }

    pub fn items(&self) -> &[ScoredMask] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// IoU of every proposal (rows) against every ground truth (columns).
pub fn iou_matrix(proposals: &ProposalSet, gts: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
    proposals.items.iter().map(|p| gts.iter().map(|g| iou(&p.mask, g)).collect()).collect()
}

/// Maximum number of ground truths coverable one-to-one by the first `n`
/// proposals at threshold `t`, given `ious[proposal][gt]`.
///
/// Ground truths are tried in the order given by `gt_order`; each tries its
/// candidate proposals best-IoU first, reassigning earlier matches along
/// augmenting paths when needed.
pub fn max_covered(ious: &[Vec<f64>], gt_order: &[usize], n: usize, t: f64) -> usize {
    let n = n.min(ious.len());
    let candidates: Vec<Vec<usize>> = gt_order
        .iter()
        .map(|&gi| {
            let mut c: Vec<usize> = (0..n).filter(|&p| ious[p][gi] + THRESHOLD_SLACK >= t).collect();
            c.sort_by(|&a, &b| ious[b][gi].total_cmp(&ious[a][gi]).then(a.cmp(&b)));
            c
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut covered = 0;
    for g in 0..gt_order.len() {
        let mut seen = vec![false; n];
        if augment(g, &candidates, &mut owner, &mut seen) {
            covered += 1;
        }
    }
    covered
}

fn augment(g: usize, candidates: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &p in &candidates[g] {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        if owner[p].is_none_or(|other| augment(other, candidates, owner, seen)) {
            owner[p] = Some(g);
            return true;
        }
    }
    false
}

/// Ground-truth indices by descending area (ties by index).
fn area_order(gts: &[BinaryMask]) -> Vec<usize> {
    let areas: Vec<usize> = gts.iter().map(BinaryMask::area).collect();
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    order
}

/// Recall of the top-`n` proposals at IoU threshold `t`. `None` when there
/// are no ground truths.
pub fn match_and_recall(proposals: &ProposalSet, gts: &[BinaryMask], n: usize, t: f64) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(None);
    }
    let ious = iou_matrix(proposals, gts)?;
    let covered = max_covered(&ious, &area_order(gts), n, t);
    Ok(Some(covered as f64 / gts.len() as f64))
}

/// Mean recall over [`IOU_THRESHOLDS`] using the top-`n` proposals.
pub fn average_recall(proposals: &ProposalSet, gts: &[BinaryMask], n: usize) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(None);
    }
    let ious = iou_matrix(proposals, gts)?;
    let order = area_order(gts);
    let total: usize = IOU_THRESHOLDS.iter().map(|&t| max_covered(&ious, &order, n, t)).sum();
    Ok(Some(total as f64 / (gts.len() * IOU_THRESHOLDS.len()) as f64))
}

/// Area limits separating small, medium and large objects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBuckets {
    /// Areas strictly below this are small.
    pub small_below: f64,
    /// Areas up to and including this are medium; above are large.
    pub medium_up_to: f64,
}

impl ScaleBuckets {
    /// The 32^2 / 96^2 limits, meant for 224-pixel patches.
    pub const FULL: ScaleBuckets = ScaleBuckets { small_below: 1024.0, medium_up_to: 9216.0 };

    /// The full-scale limits rescaled by `(width / 224)^2`.
    pub fn for_patch_width(width: usize) -> Self {
        let s = (width as f64 / 224.0) * (width as f64 / 224.0);
        Self { small_below: Self::FULL.small_below * s, medium_up_to: Self::FULL.medium_up_to * s }
    }

    pub fn bucket(&self, area: usize) -> Scale {
        let a = area as f64;
        if a < self.small_below {
            Scale::Small
        } else if a <= self.medium_up_to {
            Scale::Medium
        } else {
            Scale::Large
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Small,
    Medium,
    Large,
}

/// Proposal counts averaged into AUC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AucGrid {
    /// 10, 100 and 1000.
    #[default]
    Reported,
    /// Counts 10^(k/10) for k = 0..=30, rounded and deduplicated (28 values).
    Dense,
}

impl AucGrid {
    pub fn counts(self) -> Vec<usize> {
        match self {
            AucGrid::Reported => REPORTED_COUNTS.to_vec(),
            AucGrid::Dense => {
                let mut c: Vec<usize> = (0..=30).map(|k| libm::round(libm::pow(10.0, k as f64 / 10.0)) as usize).collect();
                c.dedup();
                c
            }
        }
    }
}

/// Recall at each IoU threshold for one proposal count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub count: usize,
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Average recall summary. Per-scale AUCs are `None` when no ground truth
/// falls in the bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ARReport {
    #[serde(rename = "AR10")]
    pub ar10: f64,
    #[serde(rename = "AR100")]
    pub ar100: f64,
    #[serde(rename = "AR1K")]
    pub ar1k: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "AUC_S")]
    pub auc_s: Option<f64>,
    #[serde(rename = "AUC_M")]
    pub auc_m: Option<f64>,
    #[serde(rename = "AUC_L")]
    pub auc_l: Option<f64>,
    pub ground_truths: usize,
    pub images: usize,
    pub scale_buckets: ScaleBuckets,
    pub auc_grid: AucGrid,
    pub recall_vs_iou: Vec<RecallCurve>,
}

/// One image: its proposals and ground truths.
pub struct ImageEval {
    ious: Vec<Vec<f64>>,
    areas: Vec<usize>,
}

impl ImageEval {
    pub fn new(proposals: &ProposalSet, gts: &[BinaryMask]) -> Result<Self> {
        Ok(Self { ious: iou_matrix(proposals, gts)?, areas: gts.iter().map(BinaryMask::area).collect() })
    }

    /// Best IoU achieved for each ground truth by any proposal.
    pub fn best_ious(&self) -> Vec<f64> {
        (0..self.areas.len())
            .map(|g| self.ious.iter().map(|row| row[g]).fold(0.0, f64::max))
            .collect()
    }

    fn covered(&self, keep: &dyn Fn(usize) -> bool, n: usize, t: f64) -> (usize, usize) {
        let mut order: Vec<usize> = (0..self.areas.len()).filter(|&g| keep(self.areas[g])).collect();
        order.sort_by(|&a, &b| self.areas[b].cmp(&self.areas[a]).then(a.cmp(&b)));
        (max_covered(&self.ious, &order, n, t), order.len())
    }
}

/// Recall at `(n, t)` pooled over images, restricted to ground truths whose
/// area satisfies `keep`. `None` when no ground truth qualifies.
fn pooled_recall(images: &[ImageEval], keep: &dyn Fn(usize) -> bool, n: usize, t: f64) -> Option<f64> {
    let (mut covered, mut total) = (0, 0);
    for im in images {
        let (c, g) = im.covered(keep, n, t);
        covered += c;
        total += g;
    }
    (total > 0).then(|| covered as f64 / total as f64)
}

fn pooled_ar(images: &[ImageEval], keep: &dyn Fn(usize) -> bool, n: usize) -> Option<f64> {
    let r: Option<Vec<f64>> = IOU_THRESHOLDS.iter().map(|&t| pooled_recall(images, keep, n, t)).collect();
    r.map(|r| r.iter().sum::<f64>() / r.len() as f64)
}

fn pooled_auc(images: &[ImageEval], keep: &dyn Fn(usize) -> bool, grid: AucGrid) -> Option<f64> {
    let counts = grid.counts();
    let ars: Option<Vec<f64>> = counts.iter().map(|&n| pooled_ar(images, keep, n)).collect();
    ars.map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

/// AUC over the grid's proposal counts (clipped to what is available).
pub fn auc(proposals: &ProposalSet, gts: &[BinaryMask], grid: AucGrid) -> Result<Option<f64>> {
    let im = ImageEval::new(proposals, gts)?;
    Ok(pooled_auc(core::slice::from_ref(&im), &|_| true, grid))
}

/// Full report over a set of images. Returns `None` when there are no
/// ground truths at all.
pub fn evaluate(images: &[ImageEval], buckets: ScaleBuckets, grid: AucGrid) -> Option<ARReport> {
    let all = |_: usize| true;
    let ar = |n| pooled_ar(images, &all, n);
    let recall_vs_iou = REPORTED_COUNTS
        .iter()
        .map(|&n| RecallCurve {
            count: n,
            thresholds: IOU_THRESHOLDS.to_vec(),
            recall: IOU_THRESHOLDS.iter().map(|&t| pooled_recall(images, &all, n, t).unwrap_or(0.0)).collect(),
        })
        .collect();
    let scale = |s: Scale| pooled_auc(images, &move |a| buckets.bucket(a) == s, grid);
    Some(ARReport {
        ar10: ar(10)?,
        ar100: ar(100)?,
        ar1k: ar(1000)?,
        auc: pooled_auc(images, &all, grid)?,
        auc_s: scale(Scale::Small),
        auc_m: scale(Scale::Medium),
        auc_l: scale(Scale::Large),
        ground_truths: images.iter().map(|i| i.areas.len()).sum(),
        images: images.len(),
        scale_buckets: buckets,
        auc_grid: grid,
        recall_vs_iou,
    })
}
