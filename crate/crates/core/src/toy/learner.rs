//! Linear two-stage toy detector on top of a frozen random projection.
//!
//! Heads: softmax classifier over the classes plus a trailing background
//! logit, a class-agnostic box-delta regressor and a sigmoid IoU predictor.
//! Losses are cross-entropy (mean over RoIs), smooth-L1 (summed over the four
//! deltas, mean over positives) and squared error on the IoU (mean over
//! positives). Gradients are closed form.

use std::sync::Arc;

use super::rng::{stream, Rng};
use super::world::{Scene, World};
use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::exec::Exec;
use crate::geometry::{decode_deltas, encode_deltas, iou, BBox};
use crate::io::files::ModelFile;
use crate::offline::{Detector, Prediction};
use crate::online::{Learner, LossBreakdown, ParameterVector, StepConfig, Supervision};

/// Proposals matched to a target at this IoU or above are positives.
pub const POSITIVE_IOU: f64 = 0.5;
const SMOOTH_L1_BETA: f64 = 1.0;

/// Offsets of each head inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Number of outputs of the classifier (classes + background).
    pub k: usize,
    pub dim: usize,
}

impl Layout {
    pub fn cls_w(&self) -> usize {
        0
    }
    pub fn cls_b(&self) -> usize {
        self.k * self.dim
    }
    pub fn reg_w(&self) -> usize {
        self.cls_b() + self.k
    }
    pub fn reg_b(&self) -> usize {
        self.reg_w() + 4 * self.dim
    }
    pub fn iou_w(&self) -> usize {
        self.reg_b() + 4
    }
    pub fn iou_b(&self) -> usize {
        self.iou_w() + self.dim
    }
    pub fn len(&self) -> usize {
        self.iou_b() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn background(&self) -> usize {
        self.k - 1
    }
}

/// One region of interest with its training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub x: Vec<f64>,
    /// Target class index; `layout.background()` for background.
    pub class: usize,
    pub deltas: Option<[f64; 4]>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probs: Vec<f64>,
    pub deltas: [f64; 4],
    pub iou: f64,
}

/// Losses with the gradient of each term kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_iou: f64,
    pub grad_cls: Vec<f64>,
    pub grad_reg: Vec<f64>,
    pub grad_iou: Vec<f64>,
}

impl LossParts {
    pub fn breakdown(&self, iou_weight: f64) -> LossBreakdown {
        LossBreakdown::new(self.l_cls, self.l_reg, self.l_iou, iou_weight)
    }

    pub fn gradient(&self, iou_weight: f64) -> Vec<f64> {
        self.grad_cls
            .iter()
            .zip(&self.grad_reg)
            .zip(&self.grad_iou)
            .map(|((c, r), i)| c + r + iou_weight * i)
            .collect()
    }
}

/// Unnormalised sums over a set of samples.
struct Partial {
    ce: f64,
    n: usize,
    reg: f64,
    iou: f64,
    npos: usize,
    g_cls: Vec<f64>,
    g_reg: Vec<f64>,
    g_iou: Vec<f64>,
}

impl Partial {
    fn zero(len: usize) -> Self {
        Partial {
            ce: 0.0,
            n: 0,
            reg: 0.0,
            iou: 0.0,
            npos: 0,
            g_cls: vec![0.0; len],
            g_reg: vec![0.0; len],
            g_iou: vec![0.0; len],
        }
    }

    fn add(&mut self, o: &Partial) {
        self.ce += o.ce;
        self.n += o.n;
        self.reg += o.reg;
        self.iou += o.iou;
        self.npos += o.npos;
        for (a, b) in self.g_cls.iter_mut().zip(&o.g_cls) {
            *a += b;
        }
        for (a, b) in self.g_reg.iter_mut().zip(&o.g_reg) {
            *a += b;
        }
        for (a, b) in self.g_iou.iter_mut().zip(&o.g_iou) {
            *a += b;
        }
    }

    fn finish(self) -> LossParts {
        let rn = if self.n > 0 { 1.0 / self.n as f64 } else { 0.0 };
        let rp = if self.npos > 0 { 1.0 / self.npos as f64 } else { 0.0 };
        LossParts {
            l_cls: self.ce * rn,
            l_reg: self.reg * rp,
            l_iou: self.iou * rp,
            grad_cls: self.g_cls.into_iter().map(|g| g * rn).collect(),
            grad_reg: self.g_reg.into_iter().map(|g| g * rp).collect(),
            grad_iou: self.g_iou.into_iter().map(|g| g * rp).collect(),
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < SMOOTH_L1_BETA {
        (0.5 * d * d / SMOOTH_L1_BETA, d / SMOOTH_L1_BETA)
    } else {
        (d.abs() - 0.5 * SMOOTH_L1_BETA, d.signum())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Forward pass of the heads on one feature vector.
pub fn forward(layout: &Layout, p: &[f64], x: &[f64]) -> Forward {
    let d = layout.dim;
    let logits: Vec<f64> = (0..layout.k)
        .map(|c| dot(&p[layout.cls_w() + c * d..][..d], x) + p[layout.cls_b() + c])
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.into_iter().map(|e| e / z).collect();
    let mut deltas = [0.0; 4];
    for (j, v) in deltas.iter_mut().enumerate() {
        *v = dot(&p[layout.reg_w() + j * d..][..d], x) + p[layout.reg_b() + j];
    }
    let iou = sigmoid(dot(&p[layout.iou_w()..][..d], x) + p[layout.iou_b()]);
    Forward { probs, deltas, iou }
}

fn accumulate(layout: &Layout, p: &[f64], samples: &[RoiSample]) -> Partial {
    let d = layout.dim;
    let mut acc = Partial::zero(layout.len());
    for s in samples {
        let f = forward(layout, p, &s.x);
        acc.n += 1;
        acc.ce -= f.probs[s.class].max(f64::MIN_POSITIVE).ln();
        for c in 0..layout.k {
            let g = f.probs[c] - if c == s.class { 1.0 } else { 0.0 };
            axpy(&mut acc.g_cls[layout.cls_w() + c * d..][..d], g, &s.x);
            acc.g_cls[layout.cls_b() + c] += g;
        }
        if let (Some(t), Some(q)) = (s.deltas, s.iou) {
            acc.npos += 1;
            for j in 0..4 {
                let (l, g) = smooth_l1(f.deltas[j] - t[j]);
                acc.reg += l;
                axpy(&mut acc.g_reg[layout.reg_w() + j * d..][..d], g, &s.x);
                acc.g_reg[layout.reg_b() + j] += g;
            }
            let e = f.iou - q;
            acc.iou += e * e;
            let g = 2.0 * e * f.iou * (1.0 - f.iou);
            axpy(&mut acc.g_iou[layout.iou_w()..][..d], g, &s.x);
            acc.g_iou[layout.iou_b()] += g;
        }
    }
    acc
}

/// Mean losses and their analytic gradients at parameters `p`.
pub fn loss_parts(layout: &Layout, p: &[f64], samples: &[RoiSample]) -> LossParts {
    accumulate(layout, p, samples).finish()
}

#[derive(Debug, Clone)]
pub struct ToyLearner {
    world: Arc<World>,
    layout: Layout,
    params: ParameterVector,
}

impl ToyLearner {
    /// All-zero weights.
    pub fn new(world: Arc<World>) -> Self {
        let layout = Layout {
            k: world.n_classes() + 1,
            dim: world.observation_dim(),
        };
        let params = ParameterVector::new(vec![0.0; layout.len()]);
        ToyLearner { world, layout, params }
    }

    /// Hand-set weights that read the class straight off the content block
    /// of the observation: class rows point at the class means, background
    /// wins whenever the overlap-scaled content is weak.
    pub fn oracle(world: Arc<World>, gain: f64) -> Self {
        let mut l = ToyLearner::new(world);
        let w = l.world.clone();
        let lay = l.layout;
        let obs = w.observation_dim();
        let p = &mut l.params.values;
        for (c, mean) in w.class_means.iter().enumerate() {
            let mut raw = vec![0.0; obs];
            raw[..mean.len()].copy_from_slice(mean);
            // the extractor is orthonormal: (P m) . (P x) = m . x
            let row = w.extractor.apply(&raw);
            for (i, v) in row.iter().enumerate() {
                p[lay.cls_w() + c * lay.dim + i] = gain * v;
            }
        }
        p[lay.cls_b() + lay.background()] = gain;
        l
    }

    pub fn from_model(world: Arc<World>, model: &ModelFile) -> Result<Self> {
        let mut l = ToyLearner::new(world);
        let (k, dim) = (model.outputs as usize, model.dim as usize);
        if (k, dim) != (l.layout.k, l.layout.dim) {
            return Err(Error::Format {
                path: Default::default(),
                message: format!(
                    "model has {k} outputs over {dim} features, world needs {} over {}",
                    l.layout.k, l.layout.dim
                ),
            });
        }
        l.set_params(model.params.clone())?;
        Ok(l)
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile {
            outputs: self.layout.k as u32,
            dim: self.layout.dim as u32,
            params: self.params.clone(),
        }
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn features(&self, scene: &Scene, bbox: &BBox, rng: &mut Rng) -> Vec<f64> {
        self.world.extractor.apply(&self.world.observe(scene, bbox, rng))
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        forward(&self.layout, &self.params.values, x)
    }

    /// Class probabilities of a box read off without test-time noise
    /// averaging; used for confusion statistics.
    pub fn classify(&self, scene: &Scene, bbox: &BBox, rng: &mut Rng) -> Forward {
        let x = self.features(scene, bbox, rng);
        self.forward(&x)
    }

    /// Training RoIs of one scene: its proposals plus the targets themselves,
    /// each assigned to the best-overlapping target.
    pub fn samples(&self, scene: &Scene, targets: &[GtBox], salt: u64) -> Vec<RoiSample> {
        let mut rng = stream(&[self.world.seed, scene.noise_seed, salt, 3]);
        let mut boxes = self.world.proposals(scene, &mut rng);
        boxes.extend(targets.iter().map(|t| t.bbox));
        boxes
            .iter()
            .map(|b| {
                let mut best: Option<(usize, f64)> = None;
                for (i, t) in targets.iter().enumerate() {
                    let q = iou(b, &t.bbox);
                    if best.is_none_or(|(_, bq)| q > bq) {
                        best = Some((i, q));
                    }
                }
                let x = self.features(scene, b, &mut rng);
                match best {
                    Some((i, q)) if q >= POSITIVE_IOU => RoiSample {
                        x,
                        class: targets[i].label.0 as usize,
                        deltas: Some(encode_deltas(b, &targets[i].bbox)),
                        iou: Some(q),
                    },
                    _ => RoiSample {
                        x,
                        class: self.layout.background(),
                        deltas: None,
                        iou: None,
                    },
                }
            })
            .collect()
    }

    /// Losses and gradients for a batch at the current parameters.
    pub fn batch_loss(&self, batch: &[Supervision<'_, Scene>], salt: u64, exec: Exec) -> LossParts {
        let partials = exec.map(batch, |s| {
            let samples = self.samples(s.image, &s.targets, salt);
            accumulate(&self.layout, &self.params.values, &samples)
        });
        let mut total = Partial::zero(self.layout.len());
        for p in &partials {
            total.add(p);
        }
        total.finish()
    }

    /// Zero the classifier row and bias of `class`.
    pub fn reset_class(&mut self, class: usize) {
        let lay = self.layout;
        let p = &mut self.params.values;
        p[lay.cls_w() + class * lay.dim..][..lay.dim].fill(0.0);
        p[lay.cls_b() + class] = 0.0;
    }
}

impl Learner for ToyLearner {
    type Image = Scene;
    type Det<'a> = ToyDetector<'a>;

    fn params(&self) -> &ParameterVector {
        &self.params
    }

    fn set_params(&mut self, params: ParameterVector) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    fn detector(&self, salt: u64, iou_branch: bool) -> ToyDetector<'_> {
        ToyDetector {
            learner: self,
            salt,
            iou_branch,
        }
    }

    fn image_id(image: &Scene) -> u64 {
        image.image_id
    }

    fn annotations(image: &Scene) -> Vec<GtBox> {
        image.annotations()
    }

    fn train_step(&mut self, batch: &[Supervision<'_, Scene>], step: &StepConfig) -> Result<LossBreakdown> {
        let parts = self.batch_loss(batch, step.salt, step.exec);
        let grad = parts.gradient(step.iou_weight);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                what: "gradient",
                iteration: i,
            });
        }
        if !batch.is_empty() {
            axpy(&mut self.params.values, -step.lr, &grad);
            self.params.version += 1;
        }
        Ok(parts.breakdown(step.iou_weight))
    }
}

/// Detector view of a [`ToyLearner`]. Test-time noise is keyed by the scene
/// and `salt`, so repeated calls are deterministic.
#[derive(Debug, Clone, Copy)]
pub struct ToyDetector<'a> {
    pub learner: &'a ToyLearner,
    pub salt: u64,
    pub iou_branch: bool,
}

impl Detector for ToyDetector<'_> {
    type Image = Scene;

    fn propose(&self, scene: &Scene) -> Vec<BBox> {
        let mut rng = stream(&[self.learner.world.seed, scene.noise_seed, self.salt, 1]);
        self.learner.world.proposals(scene, &mut rng)
    }

    fn score(&self, scene: &Scene, boxes: &[BBox]) -> Vec<Prediction> {
        let mut rng = stream(&[self.learner.world.seed, scene.noise_seed, self.salt, 2]);
        boxes
            .iter()
            .map(|b| {
                let f = self.learner.classify(scene, b, &mut rng);
                let regressed = decode_deltas(b, &f.deltas).map(|r| scene.clip(&r)).unwrap_or(*b);
                Prediction {
                    class_scores: f.probs,
                    regressed,
                    iou_score: self.iou_branch.then_some(f.iou),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::WorldConfig;
    use crate::toy::world::generate_world;

    fn world() -> Arc<World> {
        let cfg = WorldConfig {
            base_scenes: 20,
            test_scenes: 10,
            ..WorldConfig::default()
        };
        Arc::new(generate_world(11, &cfg, Exec::Sequential).unwrap())
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let w = world();
        let l = ToyLearner::new(w.clone());
        let det = l.detector(0, true);
        let scene = &w.test[0];
        let preds = det.score(scene, &det.propose(scene));
        let u = 1.0 / (w.n_classes() + 1) as f64;
        for p in preds {
            assert_eq!(p.class_scores.len(), w.n_classes() + 1);
            for s in p.class_scores {
                assert!((s - u).abs() < 1e-15);
            }
            assert_eq!(p.iou_score, Some(0.5));
        }
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let mut l = ToyLearner::new(world());
        let before = l.params().clone();
        let step = StepConfig {
            lr: 0.1,
            iou_weight: 0.5,
            salt: 0,
            exec: Exec::Sequential,
        };
        let loss = l.train_step(&[], &step).unwrap();
        assert_eq!(loss, LossBreakdown::default());
        assert_eq!(l.params(), &before);
    }

    #[test]
    fn perfect_predictions_have_minimal_loss() {
        let lay = Layout { k: 3, dim: 2 };
        let mut p = vec![0.0; lay.len()];
        // class 0 logit 40 on x = (1, 0); iou head saturated at 1
        p[lay.cls_w()] = 40.0;
        p[lay.iou_b()] = 40.0;
        let s = RoiSample {
            x: vec![1.0, 0.0],
            class: 0,
            deltas: Some([0.0; 4]),
            iou: Some(1.0),
        };
        let parts = loss_parts(&lay, &p, &[s]);
        assert!(parts.l_cls <= 1e-6);
        assert_eq!(parts.l_reg, 0.0);
        assert!(parts.l_iou <= 1e-6);
    }

    #[test]
    fn model_file_round_trip() {
        let w = world();
        let l = ToyLearner::oracle(w.clone(), 3.0);
        let back = ToyLearner::from_model(w.clone(), &ModelFile::decode(&l.to_model().encode()).unwrap()).unwrap();
        assert_eq!(back.params(), l.params());
        let mut wrong = l.to_model();
        wrong.dim += 1;
        assert!(ToyLearner::from_model(w, &wrong).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let w = world();
        let mut l = ToyLearner::oracle(w.clone(), 5.0);
        l.params.values[3] = 7.0;
        let det = l.detector(1, false);
        for scene in w.base.iter().take(5) {
            for p in det.score(scene, &det.propose(scene)) {
                assert!((p.class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn samples_assign_by_overlap() {
        let w = world();
        let l = ToyLearner::new(w.clone());
        let scene = w.base.iter().find(|s| !s.annotations().is_empty()).unwrap();
        let targets = scene.annotations();
        let samples = l.samples(scene, &targets, 9);
        // the targets themselves come last and are exact positives
        let tail = &samples[samples.len() - targets.len()..];
        for (s, t) in tail.iter().zip(&targets) {
            assert_eq!(s.class, t.label.0 as usize);
            assert_eq!(s.iou, Some(1.0));
        }
        assert!(samples.iter().any(|s| s.class == l.layout().background()));
        assert_eq!(samples, l.samples(scene, &targets, 9));
    }
}
