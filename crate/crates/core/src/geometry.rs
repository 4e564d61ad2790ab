//! Axis-aligned boxes, IoU and greedy non-maximum suppression.
//!
//! Coordinates are continuous image-space reals: `(x1, y1)` is the top-left
//! corner and `(x2, y2)` the bottom-right. Nothing here rounds to a pixel grid.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer class identifier. Background is not a class and has no id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A box with strictly positive area and finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(invalid("non-positive area"));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Box from center, width and height.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        BBox::try_from(v).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A labelled, scored box. `iou_score` is the optional predicted-IoU output of
/// a detector's IoU head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: ClassId,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_score: Option<f64>,
}

impl ScoredBox {
    pub fn new(bbox: BBox, label: ClassId, score: f64) -> Result<Self> {
        check_unit(score)?;
        Ok(ScoredBox {
            bbox,
            label,
            score,
            iou_score: None,
        })
    }

    pub fn with_iou_score(mut self, iou_score: f64) -> Result<Self> {
        check_unit(iou_score)?;
        self.iou_score = Some(iou_score);
        Ok(self)
    }
}

pub(crate) fn check_unit(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::ScoreOutOfRange(v))
    }
}

/// Suppression priority: higher score first, then higher predicted IoU (a
/// missing IoU ranks below any present one), then lower insertion index.
pub fn priority_order(a: &ScoredBox, ai: usize, b: &ScoredBox, bi: usize) -> Ordering {
    let iou_key = |s: &ScoredBox| s.iou_score.unwrap_or(f64::NEG_INFINITY);
    b.score
        .total_cmp(&a.score)
        .then_with(|| iou_key(b).total_cmp(&iou_key(a)))
        .then_with(|| ai.cmp(&bi))
}

/// Greedy NMS returning surviving input indices in priority order.
pub fn nms_indices(boxes: &[ScoredBox], iou_threshold: f64, class_wise: bool) -> Vec<usize> {
    nms_indices_by(boxes, iou_threshold, class_wise, |a, ai, b, bi| {
        priority_order(a, ai, b, bi)
    })
}

/// Greedy NMS with a caller-supplied priority. `order(a, ai, b, bi)` must be a
/// total order where `Less` means `a` is visited before `b`.
pub fn nms_indices_by<F>(
    boxes: &[ScoredBox],
    iou_threshold: f64,
    class_wise: bool,
    order: F,
) -> Vec<usize>
where
    F: Fn(&ScoredBox, usize, &ScoredBox, usize) -> Ordering,
{
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&i, &j| order(&boxes[i], i, &boxes[j], j));

    let mut keep: Vec<usize> = Vec::new();
    for &i in &idx {
        let b = &boxes[i];
        let suppressed = keep.iter().any(|&k| {
            let kb = &boxes[k];
            (!class_wise || kb.label == b.label) && iou(&kb.bbox, &b.bbox) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Greedy NMS. Output is a subsequence of the input, ordered by priority.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, class_wise: bool) -> Vec<ScoredBox> {
    nms_indices(boxes, iou_threshold, class_wise)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

/// Standard (dx, dy, dw, dh) box-delta encoding of `target` relative to `base`.
pub fn encode_deltas(base: &BBox, target: &BBox) -> [f64; 4] {
    let (bx, by) = base.center();
    let (tx, ty) = target.center();
    [
        (tx - bx) / base.width(),
        (ty - by) / base.height(),
        (target.width() / base.width()).ln(),
        (target.height() / base.height()).ln(),
    ]
}

const MAX_LOG_SCALE: f64 = 4.0;

/// Inverse of [`encode_deltas`]. Log-scale deltas are clamped so the result
/// always satisfies the box invariants.
pub fn decode_deltas(base: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    let (bx, by) = base.center();
    let dw = deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let dh = deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    BBox::from_center(
        bx + deltas[0] * base.width(),
        by + deltas[1] * base.height(),
        base.width() * dw.exp(),
        base.height() * dh.exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sb(bx: BBox, label: u32, score: f64) -> ScoredBox {
        ScoredBox::new(bx, ClassId(label), score).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)), 0.0);
        // intersection 1, union 4 + 4 - 1 = 7
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        // touching edges do not intersect
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5, true).is_empty());
        let one = [sb(b(0.0, 0.0, 1.0, 1.0), 0, 0.3)];
        assert_eq!(nms(&one, 0.5, true), one.to_vec());

        let bx = b(0.0, 0.0, 10.0, 10.0);
        let out = nms(&[sb(bx, 1, 0.8), sb(bx, 1, 0.9)], 0.5, true);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        // different classes survive when class-wise, not otherwise
        let mixed = [sb(bx, 1, 0.8), sb(bx, 2, 0.9)];
        assert_eq!(nms(&mixed, 0.5, true).len(), 2);
        assert_eq!(nms(&mixed, 0.5, false).len(), 1);
    }

    #[test]
    fn nms_tie_breaks_on_iou_then_index() {
        let bx = b(0.0, 0.0, 10.0, 10.0);
        let low = sb(bx, 0, 0.5).with_iou_score(0.2).unwrap();
        let high = sb(bx, 0, 0.5).with_iou_score(0.9).unwrap();
        assert_eq!(nms_indices(&[low, high], 0.5, true), vec![1]);
        assert_eq!(nms_indices(&[sb(bx, 0, 0.5), sb(bx, 0, 0.5)], 0.5, true), vec![0]);
        // a present IoU beats a missing one
        assert_eq!(nms_indices(&[sb(bx, 0, 0.5), low], 0.5, true), vec![1]);
    }

    #[test]
    fn deltas_round_trip() {
        let base = b(10.0, 20.0, 30.0, 60.0);
        let target = b(12.0, 18.0, 35.0, 50.0);
        let back = decode_deltas(&base, &encode_deltas(&base, &target)).unwrap();
        for (x, y) in back.to_array().iter().zip(target.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_scale_invariant(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            for s in [0.5, 3.0] {
                let w = iou(&a.scaled(s).unwrap(), &c.scaled(s).unwrap());
                prop_assert!((w - v).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_idempotent_and_clean(
            raw in prop::collection::vec((arb_box(), 0u32..3, 0.0..1.0f64), 0..40),
            thr in 0.0..1.0f64,
        ) {
            let boxes: Vec<ScoredBox> = raw.into_iter().map(|(bx, l, s)| sb(bx, l, s)).collect();
            let once = nms(&boxes, thr, true);
            prop_assert_eq!(nms(&once, thr, true), once.clone());
            for (i, x) in once.iter().enumerate() {
                for y in &once[i + 1..] {
                    prop_assert!(x.score >= y.score);
                    if x.label == y.label {
                        prop_assert!(iou(&x.bbox, &y.bbox) <= thr);
                    }
                }
            }
        }
    }
}
