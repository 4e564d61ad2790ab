//! Offline mining: detector inference over base images, score calibration
//! against self-supervised class prototypes, and class-wise adaptive
//! thresholds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::exec::Exec;
use crate::features::{build_prototypes, cosine_scores, roi_pool, ClassPrototype, FeatureMap, Shot};
use crate::geometry::{nms, BBox, ClassId, ScoredBox};
use crate::io::config::MiningConfig;

/// Per-box output of a detector's scoring head. `class_scores` is indexed by
/// class id, with one trailing background entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_scores: Vec<f64>,
    pub regressed: BBox,
    pub iou_score: Option<f64>,
}

/// Two-stage detector contract: a proposal stage and a scoring stage that
/// classifies, regresses and (optionally) predicts IoU for arbitrary boxes.
/// Implementations must be deterministic for a fixed model state.
pub trait Detector: Sync {
    type Image: Sync;

    fn propose(&self, image: &Self::Image) -> Vec<BBox>;

    fn score(&self, image: &Self::Image, boxes: &[BBox]) -> Vec<Prediction>;
}

/// Turn predictions into per-class detections for `classes`, dropping scores
/// below `score_floor`, then apply class-wise NMS.
pub fn predictions_to_detections(
    predictions: &[Prediction],
    classes: &[ClassId],
    score_floor: f64,
    nms_iou: f64,
) -> Vec<ScoredBox> {
    let mut dets = Vec::new();
    for p in predictions {
        for &c in classes {
            let s = p.class_scores[c.0 as usize];
            if s >= score_floor && s > 0.0 {
                dets.push(ScoredBox {
                    bbox: p.regressed,
                    label: c,
                    score: s.min(1.0),
                    iou_score: p.iou_score,
                });
            }
        }
    }
    nms(&dets, nms_iou, true)
}

/// Post-NMS detections of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<ScoredBox>,
}

/// Run `detector` over `images`. `ids[i]` is the id of `images[i]`.
pub fn run_detector<D: Detector>(
    detector: &D,
    images: &[D::Image],
    ids: &[u64],
    classes: &[ClassId],
    cfg: &MiningConfig,
    exec: Exec,
) -> Vec<ImageDetections> {
    exec.map_range(images.len(), |i| {
        let img = &images[i];
        let proposals = detector.propose(img);
        let preds = detector.score(img, &proposals);
        ImageDetections {
            image_id: ids[i],
            detections: predictions_to_detections(&preds, classes, cfg.score_floor, cfg.nms_iou),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInstance {
    pub image_id: u64,
    /// Position of the detection within its image's detection list.
    pub box_index: usize,
    pub detection: ScoredBox,
    pub raw_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated_score: Option<f64>,
    pub provenance: Provenance,
}

impl CandidateInstance {
    pub fn offline(image_id: u64, box_index: usize, detection: ScoredBox) -> Self {
        CandidateInstance {
            image_id,
            box_index,
            raw_score: detection.score,
            detection,
            calibrated_score: None,
            provenance: Provenance::Offline,
        }
    }

    /// The calibrated score when calibration ran, else the raw score.
    pub fn score(&self) -> f64 {
        self.calibrated_score.unwrap_or(self.raw_score)
    }

    pub fn label(&self) -> ClassId {
        self.detection.label
    }

    pub fn bbox(&self) -> &BBox {
        &self.detection.bbox
    }
}

/// Flatten per-image detections into candidates of the given classes.
pub fn gather_candidates(dets: &[ImageDetections], classes: &BTreeSet<ClassId>) -> Vec<CandidateInstance> {
    dets.iter()
        .flat_map(|img| {
            img.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| classes.contains(&d.label))
                .map(move |(j, d)| CandidateInstance::offline(img.image_id, j, *d))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassPool {
    /// Number of candidates the threshold was computed over.
    pub n_candidates: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// `None` when the class had no candidates.
    pub threshold: Option<f64>,
    pub instances: Vec<CandidateInstance>,
}

/// The offline pool: per novel class, the kept instances and the statistics
/// that selected them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidatePool {
    pub classes: BTreeMap<ClassId, ClassPool>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.classes.values().map(|c| c.instances.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instances(&self) -> impl Iterator<Item = &CandidateInstance> {
        self.classes.values().flat_map(|c| c.instances.iter())
    }

    /// Instances grouped by image id.
    pub fn by_image(&self) -> HashMap<u64, Vec<CandidateInstance>> {
        let mut out: HashMap<u64, Vec<CandidateInstance>> = HashMap::new();
        for inst in self.instances() {
            out.entry(inst.image_id).or_default().push(inst.clone());
        }
        out
    }

    /// Check that every instance clears its class threshold and that no class
    /// exceeds `max_per_class`.
    pub fn check_invariants(&self, max_per_class: Option<usize>) -> Result<()> {
        for (c, cp) in &self.classes {
            if let Some(n) = max_per_class {
                if cp.instances.len() > n {
                    return Err(Error::Config(format!("class {c} holds {} > {n} instances", cp.instances.len())));
                }
            }
            for inst in &cp.instances {
                if inst.label() != *c {
                    return Err(Error::Config(format!("instance labelled {} filed under class {c}", inst.label())));
                }
                match cp.threshold {
                    Some(t) if inst.score() >= t => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "class {c}: instance score {} below threshold {:?}",
                            inst.score(),
                            cp.threshold
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fixed-threshold mining: keep every candidate whose score is at least
/// `delta`. No calibration, no per-class cap.
pub fn mine_fixed(dets: &[ImageDetections], novel: &[ClassId], delta: f64) -> CandidatePool {
    let set: BTreeSet<ClassId> = novel.iter().copied().collect();
    let mut pool = CandidatePool::default();
    for &c in novel {
        pool.classes.insert(
            c,
            ClassPool {
                threshold: Some(delta),
                ..Default::default()
            },
        );
    }
    for cand in gather_candidates(dets, &set) {
        let cp = pool.classes.get_mut(&cand.label()).expect("class registered above");
        cp.n_candidates += 1;
        if cand.score() >= delta {
            cp.instances.push(cand);
        }
    }
    pool
}

/// `sqrt(clamp(a, 0, 1) * b)`: the geometric mean used both to calibrate with
/// cosine similarity and to correct with predicted IoU.
pub fn geometric_mean(a: f64, b: f64) -> f64 {
    (a.clamp(0.0, 1.0) * b.clamp(0.0, 1.0)).sqrt()
}

/// Source of per-image feature maps for calibration.
pub trait FeatureSource: Sync {
    fn feature_map(&self, image_id: u64) -> Option<&FeatureMap>;
}

impl FeatureSource for HashMap<u64, FeatureMap> {
    fn feature_map(&self, image_id: u64) -> Option<&FeatureMap> {
        self.get(&image_id)
    }
}

impl FeatureSource for BTreeMap<u64, FeatureMap> {
    fn feature_map(&self, image_id: u64) -> Option<&FeatureMap> {
        self.get(&image_id)
    }
}

/// Calibrate the novel-class candidates: the new score is the geometric mean
/// of the detector score and the candidate's cosine similarity to its own
/// class prototype. Candidates of other classes pass through untouched.
pub fn calibrate<F: FeatureSource + ?Sized>(
    candidates: Vec<CandidateInstance>,
    fmaps: &F,
    prototypes: &[ClassPrototype],
    novel: &BTreeSet<ClassId>,
    temperature: f64,
    pool_size: usize,
    exec: Exec,
) -> Result<Vec<CandidateInstance>> {
    let results = exec.map(&candidates, |cand| -> Result<CandidateInstance> {
        let mut cand = cand.clone();
        let label = cand.label();
        if !novel.contains(&label) {
            return Ok(cand);
        }
        let pos = prototypes
            .iter()
            .position(|p| p.class_id == label)
            .ok_or(Error::MissingPrototype(label))?;
        let fmap = fmaps
            .feature_map(cand.image_id)
            .ok_or(Error::MissingFeatures(cand.image_id))?;
        let emb = roi_pool(fmap, cand.bbox(), pool_size)
            .context_with(|| format!("image {} box {}", cand.image_id, cand.box_index))?;
        let cos = cosine_scores(&emb, prototypes, temperature)
            .context_with(|| format!("image {} box {}", cand.image_id, cand.box_index))?;
        cand.calibrated_score = Some(geometric_mean(cos[pos], cand.raw_score));
        Ok(cand)
    });
    results.into_iter().collect()
}

/// Priority for clamping: higher score, then lower image id, then lower box
/// index.
fn clamp_order(a: &CandidateInstance, b: &CandidateInstance) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.image_id.cmp(&b.image_id))
        .then(a.box_index.cmp(&b.box_index))
}

/// Mean and population standard deviation. The mean is accumulated as an
/// offset from the minimum so that identical values give exactly that value
/// and a zero deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = lo + values.iter().map(|v| v - lo).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Class-wise adaptive threshold `mean + alpha * std` over candidate scores,
/// keeping scores at or above it, then the top `max_per_class`.
pub fn adaptive_threshold(
    candidates: Vec<CandidateInstance>,
    classes: &[ClassId],
    alpha: f64,
    max_per_class: usize,
) -> CandidatePool {
    let mut grouped: BTreeMap<ClassId, Vec<CandidateInstance>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    for cand in candidates {
        if let Some(v) = grouped.get_mut(&cand.label()) {
            v.push(cand);
        }
    }

    let classes = grouped
        .into_iter()
        .map(|(c, cands)| {
            if cands.is_empty() {
                return (c, ClassPool::default());
            }
            let scores: Vec<f64> = cands.iter().map(|x| x.score()).collect();
            let (mean, std) = mean_std(&scores);
            let threshold = mean + alpha * std;
            let n_candidates = cands.len();
            let mut kept: Vec<CandidateInstance> = cands.into_iter().filter(|x| x.score() >= threshold).collect();
            kept.sort_by(clamp_order);
            kept.truncate(max_per_class);
            (
                c,
                ClassPool {
                    n_candidates,
                    mean: Some(mean),
                    std: Some(std),
                    threshold: Some(threshold),
                    instances: kept,
                },
            )
        })
        .collect();
    CandidatePool { classes }
}

/// Offline mining from precomputed detections: prototypes from the shots,
/// calibration (when enabled), then adaptive (or fixed) thresholding.
pub fn mine_offline_from_detections<F: FeatureSource + ?Sized>(
    dets: &[ImageDetections],
    fmaps: &F,
    shots: &[Shot<'_>],
    novel: &[ClassId],
    cfg: &MiningConfig,
    exec: Exec,
) -> Result<CandidatePool> {
    if !cfg.adaptive_threshold && !cfg.calibration {
        return Ok(mine_fixed(dets, novel, cfg.fixed_delta));
    }
    let set: BTreeSet<ClassId> = novel.iter().copied().collect();
    let mut candidates = gather_candidates(dets, &set);
    if cfg.calibration {
        let prototypes = build_prototypes(shots, novel, cfg.roi_pool_size).context_with(|| "building prototypes".into())?;
        candidates = calibrate(candidates, fmaps, &prototypes, &set, cfg.temperature, cfg.roi_pool_size, exec)
            .context_with(|| "calibrating candidates".into())?;
    }
    if cfg.adaptive_threshold {
        Ok(adaptive_threshold(candidates, novel, cfg.alpha, cfg.max_per_class))
    } else {
        let mut pool = CandidatePool::default();
        for &c in novel {
            let cands: Vec<_> = candidates.iter().filter(|x| x.label() == c).cloned().collect();
            pool.classes.insert(
                c,
                ClassPool {
                    n_candidates: cands.len(),
                    threshold: Some(cfg.fixed_delta),
                    instances: cands.into_iter().filter(|x| x.score() >= cfg.fixed_delta).collect(),
                    ..Default::default()
                },
            );
        }
        Ok(pool)
    }
}

/// Full offline pipeline: run the detector over the base images and mine.
#[allow(clippy::too_many_arguments)]
pub fn mine_offline<D: Detector, F: FeatureSource + ?Sized>(
    detector: &D,
    images: &[D::Image],
    ids: &[u64],
    fmaps: &F,
    shots: &[Shot<'_>],
    novel: &[ClassId],
    cfg: &MiningConfig,
    exec: Exec,
) -> Result<CandidatePool> {
    let dets = run_detector(detector, images, ids, novel, cfg, exec);
    mine_offline_from_detections(&dets, fmaps, shots, novel, cfg, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(score: f64, label: u32, x: f64) -> ScoredBox {
        ScoredBox::new(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), ClassId(label), score).unwrap()
    }

    fn cands(scores: &[f64]) -> Vec<CandidateInstance> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| CandidateInstance::offline(i as u64, 0, det(s, 0, 20.0 * i as f64)))
            .collect()
    }

    fn kept_scores(pool: &CandidatePool, c: u32) -> Vec<f64> {
        let mut v: Vec<f64> = pool.classes[&ClassId(c)].instances.iter().map(|x| x.score()).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn fixed_mining_examples() {
        let dets = vec![ImageDetections {
            image_id: 0,
            detections: vec![det(0.95, 0, 0.0), det(0.7, 0, 20.0), det(0.3, 0, 40.0)],
        }];
        assert_eq!(mine_fixed(&dets, &[ClassId(0)], 1.0).len(), 0);
        assert_eq!(mine_fixed(&dets, &[ClassId(0)], 0.0).len(), 3);
        let p = mine_fixed(&dets, &[ClassId(0)], 0.9);
        assert_eq!(kept_scores(&p, 0), vec![0.95]);
        assert!(mine_fixed(&[], &[ClassId(0)], 0.5).is_empty());
    }

    #[test]
    fn base_classes_are_not_mined() {
        let dets = vec![ImageDetections {
            image_id: 3,
            detections: vec![det(0.99, 1, 0.0), det(0.95, 0, 20.0)],
        }];
        let p = mine_fixed(&dets, &[ClassId(0)], 0.5);
        assert_eq!(p.len(), 1);
        assert_eq!(p.instances().next().unwrap().label(), ClassId(0));
    }

    #[test]
    fn geometric_mean_examples() {
        assert!((geometric_mean(1.0, 0.81) - 0.9).abs() < 1e-15);
        assert!((geometric_mean(0.37, 0.37) - 0.37).abs() < 1e-15);
        assert!((geometric_mean(0.5, 0.72) - 0.6).abs() < 1e-15);
        assert_eq!(geometric_mean(-0.4, 0.9), 0.0);
    }

    #[test]
    fn adaptive_threshold_examples() {
        let p = adaptive_threshold(cands(&[0.5, 0.5, 0.5]), &[ClassId(0)], 1.5, 300);
        let cp = &p.classes[&ClassId(0)];
        assert_eq!(cp.std, Some(0.0));
        assert_eq!(cp.threshold, Some(0.5));
        assert_eq!(cp.instances.len(), 3);

        let p = adaptive_threshold(cands(&[0.2, 0.4, 0.6]), &[ClassId(0)], 0.0, 300);
        assert!((p.classes[&ClassId(0)].threshold.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(kept_scores(&p, 0), vec![0.4, 0.6]);

        // mean 0.45, population variance (0.1225 + 0.0225 + 0.0025 + 0.2025) / 4
        let sigma = (0.35f64 / 4.0).sqrt();
        assert!((sigma - 0.2958).abs() < 1e-4);
        let p = adaptive_threshold(cands(&[0.1, 0.3, 0.5, 0.9]), &[ClassId(0)], 1.5, 300);
        let t = p.classes[&ClassId(0)].threshold.unwrap();
        assert!((t - (0.45 + 1.5 * sigma)).abs() < 1e-12);
        assert!((t - 0.8937).abs() < 1e-4);
        assert_eq!(kept_scores(&p, 0), vec![0.9]);
    }

    #[test]
    fn empty_class_is_recorded_without_threshold() {
        let p = adaptive_threshold(cands(&[0.5]), &[ClassId(0), ClassId(4)], 1.5, 300);
        let cp = &p.classes[&ClassId(4)];
        assert!(cp.instances.is_empty());
        assert_eq!(cp.threshold, None);
        p.check_invariants(Some(300)).unwrap();
    }

    #[test]
    fn clamp_keeps_top_n_with_deterministic_ties() {
        // all equal -> everything passes, clamp keeps lowest image ids
        let p = adaptive_threshold(cands(&[0.7; 6]), &[ClassId(0)], 1.5, 4);
        let ids: Vec<u64> = p.classes[&ClassId(0)].instances.iter().map(|x| x.image_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn raising_alpha_never_grows_the_kept_set(
            scores in prop::collection::vec(0.0..1.0f64, 1..60),
            a1 in -2.0..3.0f64,
            da in 0.0..2.0f64,
            n in 1usize..40,
        ) {
            let p1 = adaptive_threshold(cands(&scores), &[ClassId(0)], a1, n);
            let p2 = adaptive_threshold(cands(&scores), &[ClassId(0)], a1 + da, n);
            let k1: BTreeSet<u64> = p1.instances().map(|x| x.image_id).collect();
            let k2: BTreeSet<u64> = p2.instances().map(|x| x.image_id).collect();
            prop_assert!(k2.is_subset(&k1));
            p1.check_invariants(Some(n)).unwrap();
            p2.check_invariants(Some(n)).unwrap();
        }
    }
}
