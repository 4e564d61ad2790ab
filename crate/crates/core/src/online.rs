//! Online mining with an EMA teacher.
//!
//! Every iteration the teacher re-scores each training image, optionally with
//! the offline instances appended to its proposals, keeps the detections
//! that clear the online threshold, and merges them with the offline
//! instances through class-wise NMS. The survivors supervise one student
//! step, after which the teacher tracks the student by EMA.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::exec::Exec;
use crate::geometry::{nms_indices_by, BBox, ClassId, ScoredBox};
use crate::io::config::MiningConfig;
use crate::offline::{geometric_mean, CandidateInstance, CandidatePool, Detector, Provenance};
use crate::toy::rng::stream;

/// Flat trainable state of a learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub version: u64,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParameterVector { values, version: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `m * teacher + (1 - m) * student`, element-wise.
pub fn ema_update(teacher: &ParameterVector, student: &ParameterVector, momentum: f64) -> Result<ParameterVector> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("ema momentum must be in [0, 1], got {momentum}")));
    }
    let values = if momentum == 1.0 {
        teacher.values.clone()
    } else if momentum == 0.0 {
        student.values.clone()
    } else {
        teacher
            .values
            .iter()
            .zip(&student.values)
            .map(|(t, s)| momentum * t + (1.0 - momentum) * s)
            .collect()
    };
    Ok(ParameterVector {
        values,
        version: teacher.version + 1,
    })
}

/// Classification score corrected by the predicted IoU.
pub fn corrected_score(score: f64, predicted_iou: f64) -> f64 {
    geometric_mean(predicted_iou, score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MingleRecord {
    pub iteration: usize,
    pub n_online_kept: usize,
    pub n_offline_kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, l_reg: f64, l_iou: f64, iou_weight: f64) -> Self {
        LossBreakdown {
            l_cls,
            l_reg,
            l_iou,
            total: l_cls + l_reg + iou_weight * l_iou,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_cls.is_finite() && self.l_reg.is_finite() && self.l_iou.is_finite() && self.total.is_finite()
    }
}

/// Per-step optimisation settings handed to a learner.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub lr: f64,
    pub iou_weight: f64,
    /// Keys the learner's sampling noise for this step.
    pub salt: u64,
    pub exec: Exec,
}

/// An image together with the boxes it is supervised with this step.
pub struct Supervision<'a, I> {
    pub image: &'a I,
    pub targets: Vec<GtBox>,
}

/// A trainable detector whose whole state is one [`ParameterVector`].
pub trait Learner: Clone + Send + Sync {
    type Image: Sync;
    type Det<'a>: Detector<Image = Self::Image>
    where
        Self: 'a;

    fn params(&self) -> &ParameterVector;

    fn set_params(&mut self, params: ParameterVector) -> Result<()>;

    /// The detector view of the current state. `salt` keys any test-time
    /// noise; `iou_branch` controls whether predicted IoU is reported.
    fn detector(&self, salt: u64, iou_branch: bool) -> Self::Det<'_>;

    fn image_id(image: &Self::Image) -> u64;

    /// Human annotations of an image (never the implicit objects).
    fn annotations(image: &Self::Image) -> Vec<GtBox>;

    /// One SGD step on the batch; returns the losses before the update.
    fn train_step(&mut self, batch: &[Supervision<'_, Self::Image>], step: &StepConfig) -> Result<LossBreakdown>;
}

/// EMA teacher. Must be initialised from a student before it can mine.
#[derive(Debug, Clone)]
pub struct EmaTeacher<L> {
    model: Option<L>,
}

impl<L: Learner> Default for EmaTeacher<L> {
    fn default() -> Self {
        EmaTeacher { model: None }
    }
}

impl<L: Learner> EmaTeacher<L> {
    pub fn from_student(student: &L) -> Self {
        EmaTeacher {
            model: Some(student.clone()),
        }
    }

    pub fn is_warm(&self) -> bool {
        self.model.is_some()
    }

    pub fn model(&self) -> Result<&L> {
        self.model.as_ref().ok_or(Error::TeacherNotWarmed)
    }

    pub fn update(&mut self, student: &L, momentum: f64) -> Result<()> {
        let model = self.model.as_mut().ok_or(Error::TeacherNotWarmed)?;
        let next = ema_update(model.params(), student.params(), momentum)?;
        model.set_params(next)
    }
}

/// Teacher-side mining on one image followed by mingling with the offline
/// instances `offline` of that image. Returns the survivors (each tagged
/// with its provenance) and the kept counts.
pub fn mingle<D: Detector>(
    teacher: &D,
    image: &D::Image,
    image_id: u64,
    offline: &[CandidateInstance],
    novel: &[ClassId],
    cfg: &MiningConfig,
) -> (Vec<CandidateInstance>, MingleRecord) {
    let mut proposals = teacher.propose(image);
    if cfg.enhance_rpn {
        proposals.extend(offline.iter().map(|c| *c.bbox()));
    }
    let preds = teacher.score(image, &proposals);

    let mut merged: Vec<CandidateInstance> = Vec::new();
    for p in &preds {
        for &c in novel {
            let s = p.class_scores[c.0 as usize].clamp(0.0, 1.0);
            let score = match (cfg.iou_branch, p.iou_score) {
                (true, Some(iou)) => corrected_score(s, iou),
                _ => s,
            };
            if score >= cfg.online_delta && score > 0.0 {
                let det = ScoredBox {
                    bbox: p.regressed,
                    label: c,
                    score,
                    iou_score: p.iou_score,
                };
                merged.push(CandidateInstance {
                    image_id,
                    box_index: merged.len(),
                    detection: det,
                    raw_score: s,
                    calibrated_score: Some(score),
                    provenance: Provenance::Online,
                });
            }
        }
    }
    if cfg.enhance_rcnn {
        merged.extend(offline.iter().cloned());
    }

    // NMS on the effective scores; ties prefer online, then insertion order
    let boxes: Vec<ScoredBox> = merged
        .iter()
        .map(|c| ScoredBox {
            score: c.score(),
            ..c.detection
        })
        .collect();
    let online_first = |p: Provenance| if p == Provenance::Online { 0 } else { 1 };
    let keep = nms_indices_by(&boxes, cfg.nms_iou, true, |a, ai, b, bi| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| online_first(merged[ai].provenance).cmp(&online_first(merged[bi].provenance)))
            .then(ai.cmp(&bi))
    });

    let mut record = MingleRecord::default();
    let out: Vec<CandidateInstance> = keep
        .into_iter()
        .map(|i| {
            match merged[i].provenance {
                Provenance::Online => record.n_online_kept += 1,
                Provenance::Offline => record.n_offline_kept += 1,
            }
            merged[i].clone()
        })
        .collect();
    (out, record)
}

/// Online mining step of one image with an EMA teacher.
pub fn mine_online_step<L: Learner>(
    teacher: &EmaTeacher<L>,
    image: &L::Image,
    offline: &[CandidateInstance],
    novel: &[ClassId],
    cfg: &MiningConfig,
    salt: u64,
) -> Result<(Vec<CandidateInstance>, MingleRecord)> {
    let model = teacher.model()?;
    let det = model.detector(salt, cfg.iou_branch);
    Ok(mingle(&det, image, L::image_id(image), offline, novel, cfg))
}

fn pseudo_targets(instances: &[CandidateInstance]) -> impl Iterator<Item = GtBox> + '_ {
    instances.iter().map(|c| GtBox {
        bbox: *c.bbox(),
        label: c.label(),
        implicit: false,
    })
}

pub struct TrainOutcome<L> {
    pub student: L,
    pub teacher: L,
    pub mingle: Vec<MingleRecord>,
    pub losses: Vec<LossBreakdown>,
}

/// Re-train on the base images with the mined novel instances as ground
/// truth. With `cfg.online_mining` the pseudo ground truth is re-mined by the
/// EMA teacher every iteration; otherwise the offline pool is used as is.
pub fn train_loop<L: Learner>(
    initial: &L,
    base: &[L::Image],
    pool: &CandidatePool,
    novel: &[ClassId],
    cfg: &MiningConfig,
    exec: Exec,
) -> Result<TrainOutcome<L>> {
    let mut student = initial.clone();
    let mut teacher = EmaTeacher::from_student(initial);
    let offline = pool.by_image();
    let none: Vec<CandidateInstance> = Vec::new();
    let mut mingle_log = Vec::with_capacity(cfg.online_iters);
    let mut losses = Vec::with_capacity(cfg.online_iters);

    for it in 0..cfg.online_iters {
        let mut rng = stream(&[cfg.seed, 0x7EA, it as u64]);
        let batch: Vec<&L::Image> = if base.is_empty() {
            Vec::new()
        } else {
            (0..cfg.batch_scenes).map(|_| &base[rng.gen_range(0..base.len())]).collect()
        };
        let salt = stream(&[cfg.seed, 0x5A17, it as u64]).gen::<u64>();

        let mined: Vec<Result<(Vec<CandidateInstance>, MingleRecord)>> = exec.map(&batch, |img| {
            let h = offline.get(&L::image_id(img)).unwrap_or(&none);
            if cfg.online_mining {
                mine_online_step(&teacher, img, h, novel, cfg, salt)
            } else {
                Ok((
                    h.clone(),
                    MingleRecord {
                        n_offline_kept: h.len(),
                        ..Default::default()
                    },
                ))
            }
        });

        let mut record = MingleRecord {
            iteration: it,
            ..Default::default()
        };
        let mut sup = Vec::with_capacity(batch.len());
        for (img, m) in batch.iter().zip(mined) {
            let (pseudo, r) = m?;
            record.n_online_kept += r.n_online_kept;
            record.n_offline_kept += r.n_offline_kept;
            let mut targets = L::annotations(img);
            targets.extend(pseudo_targets(&pseudo));
            sup.push(Supervision { image: *img, targets });
        }

        let step = StepConfig {
            lr: cfg.lr_main,
            iou_weight: if cfg.iou_branch { cfg.iou_loss_weight } else { 0.0 },
            salt,
            exec,
        };
        let loss = student.train_step(&sup, &step).map_err(|e| e.context(format!("online iteration {it}")))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                what: "loss",
                iteration: it,
            });
        }
        teacher.update(&student, cfg.ema_momentum)?;
        mingle_log.push(record);
        losses.push(loss);
    }

    Ok(TrainOutcome {
        teacher: teacher.model()?.clone(),
        student,
        mingle: mingle_log,
        losses,
    })
}

/// Final fine-tuning on the clean shots at the fine-tuning learning rate.
pub fn finetune<L: Learner>(trained: &L, shots: &[L::Image], cfg: &MiningConfig, exec: Exec) -> Result<L> {
    let mut learner = trained.clone();
    if shots.is_empty() {
        return Ok(learner);
    }
    for it in 0..cfg.finetune_iters {
        let mut rng = stream(&[cfg.seed, 0xF17E, it as u64]);
        let batch: Vec<Supervision<'_, L::Image>> = (0..cfg.batch_scenes.min(shots.len()))
            .map(|_| {
                let img = &shots[rng.gen_range(0..shots.len())];
                Supervision {
                    image: img,
                    targets: L::annotations(img),
                }
            })
            .collect();
        let step = StepConfig {
            lr: cfg.lr_finetune,
            iou_weight: if cfg.iou_branch { cfg.iou_loss_weight } else { 0.0 },
            salt: rng.gen(),
            exec,
        };
        let loss = learner.train_step(&batch, &step).map_err(|e| e.context(format!("fine-tune iteration {it}")))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                what: "fine-tune loss",
                iteration: it,
            });
        }
    }
    Ok(learner)
}

/// Pseudo ground truth for a batch of images, keyed by image id.
pub fn offline_targets(pool: &CandidatePool) -> HashMap<u64, Vec<GtBox>> {
    pool.by_image()
        .into_iter()
        .map(|(k, v)| (k, pseudo_targets(&v).collect()))
        .collect()
}

/// Boxes of instances, convenient for building proposal sets.
pub fn boxes_of(instances: &[CandidateInstance]) -> Vec<BBox> {
    instances.iter().map(|c| *c.bbox()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec())
    }

    #[test]
    fn ema_examples() {
        let t = pv(&[1.0, 1.0]);
        let s = pv(&[0.0, 2.0]);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap().values, t.values);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap().values, s.values);
        let m = ema_update(&t, &s, 0.9).unwrap();
        assert!((m.values[0] - 0.9).abs() < 1e-12);
        assert!((m.values[1] - 1.1).abs() < 1e-12);
        assert_eq!(m.version, 1);
        assert!(matches!(
            ema_update(&t, &pv(&[1.0]), 0.5),
            Err(Error::LengthMismatch { teacher: 2, student: 1 })
        ));
    }

    #[test]
    fn corrected_score_examples() {
        assert_eq!(corrected_score(1.0, 1.0), 1.0);
        assert!((corrected_score(0.9, 0.4) - 0.6).abs() < 1e-15);
        assert_eq!(corrected_score(0.3, 0.7), geometric_mean(0.7, 0.3));
        assert_eq!(corrected_score(0.49, 1.0), 0.7);
    }

    #[test]
    fn loss_total_includes_weighted_iou() {
        let l = LossBreakdown::new(0.5, 0.25, 0.2, 0.5);
        assert!((l.total - 0.85).abs() < 1e-12);
        let l = LossBreakdown::new(0.5, 0.25, 0.2, 0.0);
        assert_eq!(l.total, 0.75);
    }

    proptest! {
        #[test]
        fn ema_is_convex(
            pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..20),
            m in 0.0..=1.0f64,
        ) {
            let t = pv(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let s = pv(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let n = ema_update(&t, &s, m).unwrap();
            for ((a, b), v) in pairs.iter().zip(&n.values) {
                prop_assert!(*v >= a.min(*b) && *v <= a.max(*b));
            }
        }

        #[test]
        fn iou_branch_caps_at_sqrt_score(s in 0.0..=1.0f64, q in 0.0..=1.0f64) {
            prop_assert!(corrected_score(s, q) <= s.sqrt());
            prop_assert_eq!(corrected_score(s, 1.0), s.sqrt());
            prop_assert!(s.sqrt() >= s);
        }
    }
}
