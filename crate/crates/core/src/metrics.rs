//! AP@0.5 / mAP, recall at a confidence, and the variance-level vs recall
//! correlation analysis.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scenes::GtBox;
use crate::variance::VarianceRecord;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// A scored prediction on one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub anchor_id: usize,
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

/// Ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGt {
    pub image_id: u64,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

fn sort_predictions(preds: &mut [&Prediction]) {
    preds.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.anchor_id.cmp(&b.anchor_id))
    });
}

/// Greedy matching in confidence order: each prediction claims the unclaimed
/// same-class ground truth on its image with the highest IoU, if that IoU is
/// at least `iou_thresh`. Returns TP flags in the sorted order and the total
/// ground-truth count of `class`.
fn match_class<'a>(
    preds: &'a [Prediction],
    gts: &[ImageGt],
    class: usize,
    iou_thresh: f64,
) -> (Vec<&'a Prediction>, Vec<bool>, usize) {
    let mut sorted: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    sort_predictions(&mut sorted);
    let index: HashMap<u64, usize> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id, i))
        .collect();
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let total = gts
        .iter()
        .map(|g| g.boxes.iter().filter(|b| b.class == class).count())
        .sum();
    let tp = sorted
        .iter()
        .map(|p| {
            let Some(&gi) = index.get(&p.image_id) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (bi, b) in gts[gi].boxes.iter().enumerate() {
                if b.class != class || claimed[gi][bi] {
                    continue;
                }
                let o = iou(&p.bbox, &b.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, v)| o > v) {
                    best = Some((bi, o));
                }
            }
            if let Some((bi, _)) = best {
                claimed[gi][bi] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (sorted, tp, total)
}

/// All-points interpolated AP of one class.
pub fn average_precision(
    preds: &[Prediction],
    gts: &[ImageGt],
    class: usize,
    iou_thresh: f64,
) -> PrCurve {
    let (sorted, tp, total) = match_class(preds, gts, class, iou_thresh);
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, (p, &t)) in sorted.iter().zip(&tp).enumerate() {
        hits += usize::from(t);
        points.push(PrPoint {
            recall: if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            },
            precision: hits as f64 / (k + 1) as f64,
            confidence: p.confidence,
        });
    }
    if total == 0 {
        return PrCurve { points, ap: 0.0 };
    }
    // area under the precision envelope
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].precision);
        let r_lo = if i == 0 { 0.0 } else { points[i - 1].recall };
        ap += (points[i].recall - r_lo) * envelope;
    }
    PrCurve { points, ap }
}

/// Per-class AP over the classes present in the ground truth, and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// Classes without ground truth, excluded from the mean.
    pub absent_classes: Vec<usize>,
}

pub fn mean_average_precision(
    preds: &[Prediction],
    gts: &[ImageGt],
    num_classes: usize,
    iou_thresh: f64,
) -> MapResult {
    let present: BTreeSet<usize> = gts
        .iter()
        .flat_map(|g| g.boxes.iter().map(|b| b.class))
        .collect();
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            present
                .contains(&c)
                .then(|| average_precision(preds, gts, c, iou_thresh).ap)
        })
        .collect();
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    MapResult {
        map: if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        },
        absent_classes: (0..num_classes).filter(|c| !present.contains(c)).collect(),
        per_class_ap,
    }
}

/// Matched ground truth over all ground truth, keeping only predictions with
/// confidence at least `conf`. Zero when there is no ground truth.
pub fn recall_at(
    preds: &[Prediction],
    gts: &[ImageGt],
    num_classes: usize,
    conf: f64,
    iou_thresh: f64,
) -> f64 {
    let kept: Vec<Prediction> = preds
        .iter()
        .filter(|p| p.confidence >= conf)
        .copied()
        .collect();
    let mut matched = 0;
    let mut total = 0;
    for c in 0..num_classes {
        let (_, tp, n) = match_class(&kept, gts, c, iou_thresh);
        matched += tp.iter().filter(|&&t| t).count();
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub vl_mid: f64,
    pub images: usize,
    pub recall: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub pearson_r: f64,
    pub r2: f64,
    /// Set when r is undefined (constant series) and reported as 0.
    pub degenerate: bool,
}

impl Fit {
    fn of(x: &[f64], y: &[f64]) -> Fit {
        match pearson(x, y) {
            Some(r) => Fit {
                pearson_r: r,
                r2: r * r,
                degenerate: false,
            },
            None => Fit {
                pearson_r: 0.0,
                r2: 0.0,
                degenerate: true,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub groups: Vec<GroupRow>,
    /// Indices of groups without images.
    pub empty_groups: Vec<usize>,
    /// Fit of group recall against group index (the headline number).
    pub pearson_r: f64,
    pub r2: f64,
    pub degenerate: bool,
    pub map_fit: Fit,
}

/// Group of a variance level in `(0, 1]` among `g` equal-width buckets.
pub fn vl_group(vl: f64, g: usize) -> usize {
    ((vl * g as f64).ceil() as usize).clamp(1, g) - 1
}

/// Buckets images by variance level, computes recall at `conf` and mAP per
/// bucket, and correlates both with the bucket index.
pub fn variance_group_correlation(
    records: &[VarianceRecord],
    preds: &[Prediction],
    gts: &[ImageGt],
    num_classes: usize,
    groups: usize,
    conf: f64,
    iou_thresh: f64,
) -> Result<Correlation> {
    if groups < 2 {
        return Err(Error::Domain {
            name: "G",
            value: groups as f64,
            expected: "at least 2 groups",
        });
    }
    for g in gts {
        if !records.iter().any(|r| r.id == g.image_id) {
            return Err(Error::Contract(format!(
                "image {} has no variance record",
                g.image_id
            )));
        }
    }
    let mut members: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); groups];
    for r in records {
        members[vl_group(r.vl, groups)].insert(r.id);
    }
    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for (gi, ids) in members.iter().enumerate() {
        if ids.is_empty() {
            empty.push(gi);
            continue;
        }
        let p: Vec<Prediction> = preds
            .iter()
            .filter(|p| ids.contains(&p.image_id))
            .copied()
            .collect();
        let g: Vec<ImageGt> = gts
            .iter()
            .filter(|g| ids.contains(&g.image_id))
            .cloned()
            .collect();
        rows.push(GroupRow {
            group: gi,
            vl_mid: (gi as f64 + 0.5) / groups as f64,
            images: ids.len(),
            recall: recall_at(&p, &g, num_classes, conf, iou_thresh),
            map: mean_average_precision(&p, &g, num_classes, iou_thresh).map,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.group as f64).collect();
    let recall = Fit::of(&x, &rows.iter().map(|r| r.recall).collect::<Vec<_>>());
    let map_fit = Fit::of(&x, &rows.iter().map(|r| r.map).collect::<Vec<_>>());
    Ok(Correlation {
        groups: rows,
        empty_groups: empty,
        pearson_r: recall.pearson_r,
        r2: recall.r2,
        degenerate: recall.degenerate,
        map_fit,
    })
}

/// Metrics report written by the evaluation stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map50: f64,
    pub recall_conf05: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Correlation>,
}

impl MetricsReport {
    pub fn new(preds: &[Prediction], gts: &[ImageGt], num_classes: usize) -> Self {
        let m = mean_average_precision(preds, gts, num_classes, 0.5);
        MetricsReport {
            per_class_ap: m.per_class_ap,
            map50: m.map,
            recall_conf05: recall_at(preds, gts, num_classes, 0.5, 0.5),
            correlation: None,
        }
    }
}

/// Group rows as CSV.
pub fn correlation_csv(c: &Correlation) -> String {
    let mut out = String::from("group,vl_mid,images,recall,map\n");
    for r in &c.groups {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.group, r.vl_mid, r.images, r.recall, r.map
        )
        .expect("string write");
    }
    out
}
