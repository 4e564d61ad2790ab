//! Detection evaluation: greedy matching, all-point interpolated AP, and
//! true/false-positive accounting of mined pools.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{iou, BBox, ClassId, ScoredBox};
use crate::offline::CandidatePool;

/// A ground-truth box. `implicit` marks objects that exist in an image but
/// carry no annotation in the training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: ClassId,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub implicit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub detection: usize,
    pub matched_gt: Option<usize>,
    pub is_tp: bool,
}

/// Greedy matching within one image. Detections are visited by descending
/// score (ties by input order); each takes the highest-IoU unmatched GT of
/// its class with IoU at least `iou_threshold`. Results are in visit order.
pub fn match_detections(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> Vec<MatchResult> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.label != det.label {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            MatchResult {
                detection: d,
                matched_gt: best.map(|(g, _)| g),
                is_tp: best.is_some(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// AP from detections ranked by descending score, given as TP flags.
/// Returns `None` when there is no ground truth (the class is excluded from
/// means).
pub fn average_precision(ranked_tp: &[bool], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, non-increasing in recall
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let ap = match interp {
        Interpolation::AllPoint => {
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recall
                        .iter()
                        .position(|&x| x >= r - 1e-12)
                        .map_or(0.0, |k| precision[k])
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

/// Detections and full ground truth of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: u64,
    pub detections: Vec<ScoredBox>,
    pub gts: Vec<GtBox>,
}

/// AP of one class over all images at one IoU threshold.
pub fn class_ap(images: &[EvalImage], class: ClassId, iou_threshold: f64, interp: Interpolation) -> Option<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let dets: Vec<ScoredBox> = img.detections.iter().filter(|d| d.label == class).copied().collect();
        let gts: Vec<GtBox> = img.gts.iter().filter(|g| g.label == class).copied().collect();
        n_gt += gts.len();
        for m in match_detections(&dets, &gts, iou_threshold) {
            scored.push((dets[m.detection].score, m.is_tp));
        }
    }
    // stable: equal scores keep image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let ranked: Vec<bool> = scored.into_iter().map(|(_, tp)| tp).collect();
    average_precision(&ranked, n_gt, interp)
}

pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap50: Option<f64>,
    /// Mean over IoU 0.50:0.95.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<ClassId, ClassAp>,
    /// Mean AP50 over the novel classes with ground truth.
    pub nap50: f64,
    /// Mean AP over IoU 0.50:0.95 for novel classes.
    pub nap: f64,
    /// Mean AP50 over base classes, when any were evaluated.
    pub bap50: Option<f64>,
    /// `(iou_threshold, novel mean AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
    pub novel_classes: Vec<ClassId>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(
    images: &[EvalImage],
    novel: &[ClassId],
    base: &[ClassId],
    interp: Interpolation,
    exec: Exec,
) -> ApReport {
    let classes: Vec<ClassId> = novel.iter().chain(base).copied().collect();
    let rows = exec.map(&classes, |&c| {
        let per_thr: Vec<Option<f64>> = COCO_IOU_THRESHOLDS
            .iter()
            .map(|&t| class_ap(images, c, t, interp))
            .collect();
        (c, per_thr)
    });

    let mut per_class = BTreeMap::new();
    let mut by_thr: Vec<Vec<f64>> = vec![Vec::new(); COCO_IOU_THRESHOLDS.len()];
    for (c, per_thr) in &rows {
        let ap50 = per_thr[0];
        let ap = if per_thr.iter().all(Option::is_some) {
            mean_of(per_thr.iter().flatten().copied())
        } else {
            None
        };
        per_class.insert(*c, ClassAp { ap50, ap });
        if novel.contains(c) {
            for (t, v) in per_thr.iter().enumerate() {
                if let Some(v) = v {
                    by_thr[t].push(*v);
                }
            }
        }
    }
    let per_threshold: Vec<(f64, f64)> = COCO_IOU_THRESHOLDS
        .iter()
        .zip(&by_thr)
        .map(|(&t, v)| (t, mean_of(v.iter().copied()).unwrap_or(0.0)))
        .collect();
    let nap50 = per_threshold[0].1;
    let nap = mean_of(novel.iter().filter_map(|c| per_class[c].ap)).unwrap_or(0.0);
    let bap50 = mean_of(base.iter().filter_map(|c| per_class[c].ap50));
    ApReport {
        per_class,
        nap50,
        nap,
        bap50,
        per_threshold,
        novel_classes: novel.to_vec(),
    }
}

impl fmt::Display for ApReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>6} {:>8} {:>8}", "class", "split", "AP50", "AP")?;
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        for (c, row) in &self.per_class {
            let split = if self.novel_classes.contains(c) { "novel" } else { "base" };
            writeln!(f, "{:>6} {:>6} {:>8} {:>8}", c, split, pct(row.ap50), pct(row.ap))?;
        }
        writeln!(f, "nAP50 {:.1}  nAP {:.1}", 100.0 * self.nap50, 100.0 * self.nap)?;
        if let Some(b) = self.bap50 {
            writeln!(f, "bAP50 {:.1}", 100.0 * b)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TpFp {
    pub tp: usize,
    pub fp: usize,
}

/// Count pool instances that hit (IoU >= 0.5) a same-class ground-truth box,
/// one hit per GT box. `gt` must contain every object, implicit ones
/// included.
pub fn pool_tp_count(pool: &CandidatePool, gt: &HashMap<u64, Vec<GtBox>>) -> BTreeMap<ClassId, TpFp> {
    let mut out: BTreeMap<ClassId, TpFp> = pool.classes.keys().map(|&c| (c, TpFp::default())).collect();
    let empty = Vec::new();
    for (&c, cp) in &pool.classes {
        let mut by_image: BTreeMap<u64, Vec<ScoredBox>> = BTreeMap::new();
        for inst in &cp.instances {
            let mut d = inst.detection;
            d.score = inst.score();
            by_image.entry(inst.image_id).or_default().push(d);
        }
        let counts = out.get_mut(&c).expect("initialised above");
        for (img, dets) in by_image {
            let gts: Vec<GtBox> = gt.get(&img).unwrap_or(&empty).iter().filter(|g| g.label == c).copied().collect();
            for m in match_detections(&dets, &gts, 0.5) {
                if m.is_tp {
                    counts.tp += 1;
                } else {
                    counts.fp += 1;
                }
            }
        }
    }
    out
}

pub fn total_tp(counts: &BTreeMap<ClassId, TpFp>) -> usize {
    counts.values().map(|c| c.tp).sum()
}
