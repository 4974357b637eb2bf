use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::numerics::Tensor;

/// Upper bound on `tw`/`th` before exponentiation.
pub const DELTA_CLIP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// One square anchor of side `2 * stride` centred in every stride cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
}

impl AnchorGrid {
    pub fn new(height: usize, width: usize, stride: usize) -> Self {
        AnchorGrid {
            stride,
            cols: width / stride,
            rows: height / stride,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor `id` in row-major cell order.
    pub fn anchor(&self, id: usize) -> BBox {
        let s = self.stride as f64;
        let (row, col) = (id / self.cols, id % self.cols);
        BBox::from_center(
            (col as f64 + 0.5) * s,
            (row as f64 + 0.5) * s,
            2.0 * s,
            2.0 * s,
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, BBox)> + '_ {
        (0..self.len()).map(|id| (id, self.anchor(id)))
    }
}

/// Regression target of `target` relative to `anchor`: `(tx, ty, tw, th)`.
pub fn encode(target: &BBox, anchor: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = target.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`encode`] (before clipping).
pub fn apply_deltas(deltas: [f64; 4], anchor: &BBox) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].min(DELTA_CLIP).exp();
    let h = ah * deltas[3].min(DELTA_CLIP).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Head outputs of one image: `cls` is `[K+1, rows, cols]` (index 0 is
/// background), `reg` is `[4, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub cls: Tensor,
    pub reg: Tensor,
}

impl HeadOutputs {
    /// Splits batched `[N, K+1, r, c]` / `[N, 4, r, c]` outputs per image.
    pub fn split_batch(cls: &Tensor, reg: &Tensor) -> Vec<HeadOutputs> {
        let n = cls.shape()[0];
        let cls_len = cls.len() / n;
        let reg_len = reg.len() / n;
        (0..n)
            .map(|i| HeadOutputs {
                cls: Tensor::new(
                    cls.shape()[1..].to_vec(),
                    cls.data()[i * cls_len..(i + 1) * cls_len].to_vec(),
                )
                .expect("slice of a valid tensor"),
                reg: Tensor::new(
                    reg.shape()[1..].to_vec(),
                    reg.data()[i * reg_len..(i + 1) * reg_len].to_vec(),
                )
                .expect("slice of a valid tensor"),
            })
            .collect()
    }

    pub fn num_anchors(&self) -> usize {
        self.cls.shape()[1] * self.cls.shape()[2]
    }

    /// Foreground scores: softmax over `K+1` logits with the background entry dropped.
    pub fn scores(&self, anchor: usize) -> Vec<f64> {
        let k1 = self.cls.shape()[0];
        let a = self.num_anchors();
        let logits: Vec<f64> = (0..k1).map(|c| self.cls.data()[c * a + anchor]).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps[1..].iter().map(|e| e / total).collect()
    }

    pub fn deltas(&self, anchor: usize) -> [f64; 4] {
        let a = self.num_anchors();
        let d = self.reg.data();
        [
            d[anchor],
            d[a + anchor],
            d[2 * a + anchor],
            d[3 * a + anchor],
        ]
    }

    /// Decoded, image-clipped box of one anchor.
    pub fn decode_box(&self, anchors: &AnchorGrid, anchor: usize, width: f64, height: f64) -> BBox {
        apply_deltas(self.deltas(anchor), &anchors.anchor(anchor)).clip(width, height)
    }
}

/// One decoded detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Raw softmax foreground probabilities (background excluded, not renormalized).
    pub scores: Vec<f64>,
    pub confidence: f64,
    pub anchor_id: usize,
}

impl Detection {
    /// Index of the highest foreground score (lowest index on ties).
    pub fn class(&self) -> usize {
        argmax(&self.scores)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Detections with confidence at least `conf_thresh`, in anchor order.
pub fn decode(
    head: &HeadOutputs,
    anchors: &AnchorGrid,
    width: f64,
    height: f64,
    conf_thresh: f64,
) -> Vec<Detection> {
    (0..anchors.len())
        .filter_map(|a| {
            let scores = head.scores(a);
            let confidence = scores.iter().copied().fold(0.0, f64::max);
            if confidence < conf_thresh {
                return None;
            }
            let bbox = head.decode_box(anchors, a, width, height);
            bbox.is_valid().then_some(Detection {
                bbox,
                scores,
                confidence,
                anchor_id: a,
            })
        })
        .collect()
}

/// Greedy class-wise non-maximum suppression. Order: descending confidence,
/// ties broken by lower anchor id.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.anchor_id.cmp(&b.anchor_id))
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let class = d.class();
        let suppressed = kept
            .iter()
            .any(|k| k.class() == class && k.bbox.iou(&d.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> AnchorGrid {
        AnchorGrid::new(64, 64, 8)
    }

    fn det(bbox: BBox, conf: f64, anchor_id: usize) -> Detection {
        Detection {
            bbox,
            scores: vec![conf, 0.0, 0.0],
            confidence: conf,
            anchor_id,
        }
    }

    #[test]
    fn anchors_tile_the_image() {
        let g = grid();
        assert_eq!(g.len(), 64);
        assert_eq!(g.anchor(0), BBox::new(-4.0, -4.0, 12.0, 12.0));
        // cell (row 3, col 3) is centred at (28, 28); cell (3, 4) at (36, 28)
        assert_eq!(g.anchor(3 * 8 + 3).center(), (28.0, 28.0));
        assert_eq!(g.anchor(3 * 8 + 4).center(), (36.0, 28.0));
    }

    #[test]
    fn zero_deltas_return_the_anchor() {
        let anchor = BBox::from_center(32.0, 32.0, 16.0, 16.0);
        assert_eq!(
            apply_deltas([0.0; 4], &anchor),
            BBox::new(24.0, 24.0, 40.0, 40.0)
        );
    }

    #[test]
    fn log_two_width_delta_doubles_width() {
        let anchor = BBox::from_center(32.0, 32.0, 16.0, 16.0);
        let b = apply_deltas([0.0, 0.0, 2f64.ln(), 0.0], &anchor);
        for (got, want) in b.as_array().iter().zip([16.0, 24.0, 48.0, 40.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_quarter_confidence() {
        let g = grid();
        let head = HeadOutputs {
            cls: Tensor::zeros(&[4, 8, 8]),
            reg: Tensor::zeros(&[4, 8, 8]),
        };
        let all = decode(&head, &g, 64.0, 64.0, 0.0);
        assert!(all.iter().all(|d| (d.confidence - 0.25).abs() < 1e-15));
        assert!(decode(&head, &g, 64.0, 64.0, 0.3).is_empty());
    }

    #[test]
    fn nms_hand_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(vec![det(a, 0.8, 1), det(a, 0.9, 2)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let far = BBox::new(30.0, 30.0, 40.0, 40.0);
        assert_eq!(nms(vec![det(a, 0.8, 1), det(far, 0.9, 2)], 0.5).len(), 2);

        let third = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert_eq!(nms(vec![det(a, 0.8, 1), det(third, 0.9, 2)], 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_prefer_lower_anchor() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(vec![det(a, 0.5, 7), det(a, 0.5, 3)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].anchor_id, 3);
    }

    #[test]
    fn nms_keeps_overlapping_boxes_of_other_classes() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut other = det(a, 0.7, 2);
        other.scores = vec![0.0, 0.7, 0.0];
        assert_eq!(nms(vec![det(a, 0.9, 1), other], 0.5).len(), 2);
    }

    proptest! {
        #[test]
        fn encode_then_decode_is_identity(cx in 8.0f64..56.0, cy in 8.0f64..56.0,
                                          w in 4.0f64..30.0, h in 4.0f64..30.0,
                                          id in 0usize..64) {
            let target = BBox::from_center(cx, cy, w, h);
            let anchor = grid().anchor(id);
            let back = apply_deltas(encode(&target, &anchor), &anchor);
            for (p, q) in back.as_array().iter().zip(target.as_array()) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }
}
