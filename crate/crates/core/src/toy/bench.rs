//! End-to-end toy pipeline and the ablation ladder.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::learner::ToyLearner;
use super::rng::stream;
use super::world::{generate_world, Scene, World};
use crate::error::Result;
use crate::eval::{evaluate, pool_tp_count, total_tp, ApReport, EvalImage, GtBox, Interpolation};
use crate::exec::Exec;
use crate::features::{FeatureMap, Shot};
use crate::geometry::ClassId;
use crate::io::config::{Config, MiningConfig};
use crate::offline::{mine_fixed, mine_offline_from_detections, run_detector, CandidatePool, ImageDetections};
use crate::online::{finetune, train_loop, Learner, MingleRecord, StepConfig, Supervision, TrainOutcome};

pub const MINING_SALT: u64 = 0;
pub const TEST_SALT: u64 = 0x7E57;

/// Supervised SGD on `scenes` with their human annotations.
pub fn train_supervised(
    learner: &mut ToyLearner,
    scenes: &[Scene],
    lr: f64,
    iters: usize,
    cfg: &MiningConfig,
    phase: u64,
    exec: Exec,
) -> Result<()> {
    if scenes.is_empty() {
        return Ok(());
    }
    for it in 0..iters {
        let mut rng = stream(&[cfg.seed, phase, it as u64]);
        let batch: Vec<Supervision<'_, Scene>> = (0..cfg.batch_scenes)
            .map(|_| {
                let s = &scenes[rng.gen_range(0..scenes.len())];
                Supervision {
                    image: s,
                    targets: s.annotations(),
                }
            })
            .collect();
        let step = StepConfig {
            lr,
            iou_weight: cfg.iou_loss_weight,
            salt: rng.gen(),
            exec,
        };
        learner.train_step(&batch, &step).map_err(|e| e.context(format!("phase {phase:#x} iteration {it}")))?;
    }
    Ok(())
}

/// Base training on the annotated base scenes. Implicit novel objects are
/// unlabelled and therefore learned as background.
pub fn train_base(world: &Arc<World>, cfg: &MiningConfig, exec: Exec) -> Result<ToyLearner> {
    let mut l = ToyLearner::new(world.clone());
    train_supervised(&mut l, &world.base, cfg.lr_main, cfg.base_iters, cfg, 0xBA5E, exec)?;
    Ok(l)
}

/// Few-shot stage: fresh novel classifier rows, then training on the
/// balanced K-shot set of every class.
pub fn train_fsod(base: &ToyLearner, cfg: &MiningConfig, exec: Exec) -> Result<ToyLearner> {
    let mut l = base.clone();
    let world = l.world().clone();
    for c in &world.novel_classes {
        l.reset_class(c.0 as usize);
    }
    train_supervised(&mut l, &world.shots, cfg.lr_fsod, cfg.fsod_iters, cfg, 0xF500, exec)?;
    Ok(l)
}

pub fn all_classes(world: &World) -> Vec<ClassId> {
    world.base_classes.iter().chain(&world.novel_classes).copied().collect()
}

pub fn detect(learner: &ToyLearner, scenes: &[Scene], classes: &[ClassId], salt: u64, cfg: &MiningConfig, exec: Exec) -> Vec<ImageDetections> {
    let ids: Vec<u64> = scenes.iter().map(|s| s.image_id).collect();
    run_detector(&learner.detector(salt, cfg.iou_branch), scenes, &ids, classes, cfg, exec)
}

/// Evaluate on the test scenes.
pub fn evaluate_learner(learner: &ToyLearner, cfg: &MiningConfig, exec: Exec) -> ApReport {
    let world = learner.world();
    let dets = detect(learner, &world.test, &all_classes(world), TEST_SALT, cfg, exec);
    let images: Vec<EvalImage> = dets
        .into_iter()
        .zip(&world.test)
        .map(|(d, s)| EvalImage {
            image_id: d.image_id,
            detections: d.detections,
            gts: s.ground_truth(),
        })
        .collect();
    evaluate(&images, &world.novel_classes, &world.base_classes, Interpolation::AllPoint, exec)
}

/// Self-supervised maps of the base scenes and the novel shots.
pub fn feature_maps(world: &World, exec: Exec) -> HashMap<u64, FeatureMap> {
    let scenes: Vec<&Scene> = world.base.iter().chain(&world.shots).collect();
    let maps = exec.map(&scenes, |s| world.ssl_map(s));
    scenes.iter().map(|s| s.image_id).zip(maps).collect()
}

/// Novel-class shots referencing maps in `fmaps`.
pub fn novel_shots<'a>(world: &World, fmaps: &'a HashMap<u64, FeatureMap>) -> Vec<Shot<'a>> {
    world
        .shots
        .iter()
        .flat_map(|s| s.objects.iter().map(move |o| (s.image_id, o)))
        .filter(|(_, o)| world.is_novel(o.class))
        .map(|(id, o)| Shot {
            fmap: &fmaps[&id],
            bbox: o.bbox,
            class_id: o.class,
        })
        .collect()
}

/// Every base-scene object, implicit ones included, keyed by image.
pub fn full_ground_truth(world: &World) -> HashMap<u64, Vec<GtBox>> {
    world.base.iter().map(|s| (s.image_id, s.ground_truth())).collect()
}

/// Fraction of objects whose own box is classified as background.
pub fn background_rate<'a>(learner: &ToyLearner, objects: impl Iterator<Item = (&'a Scene, usize)>) -> f64 {
    let bg = learner.layout().background();
    let (mut n, mut hits) = (0usize, 0usize);
    for (scene, i) in objects {
        let mut rng = stream(&[learner.world().seed, scene.noise_seed, 0xC0F, i as u64]);
        let f = learner.classify(scene, &scene.objects[i].bbox, &mut rng);
        let arg = f
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k);
        n += 1;
        if arg == Some(bg) {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Implicit novel objects of the base scenes read as background.
    pub implicit_novel: f64,
    /// Base objects of the test scenes read as background.
    pub held_out_base: f64,
}

pub fn confusion(learner: &ToyLearner) -> Confusion {
    let w = learner.world().clone();
    let implicit = w
        .base
        .iter()
        .flat_map(|s| (0..s.objects.len()).filter(|&i| !s.objects[i].annotated).map(move |i| (s, i)));
    let held_out = w
        .test
        .iter()
        .flat_map(|s| (0..s.objects.len()).filter(|&i| !w.is_novel(s.objects[i].class)).map(move |i| (s, i)));
    Confusion {
        implicit_novel: background_rate(learner, implicit),
        held_out_base: background_rate(learner, held_out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub size: usize,
    pub tp: usize,
    pub fp: usize,
}

pub fn summarize_pool(pool: &CandidatePool, gt: &HashMap<u64, Vec<GtBox>>) -> PoolSummary {
    let counts = pool_tp_count(pool, gt);
    PoolSummary {
        size: pool.len(),
        tp: total_tp(&counts),
        fp: counts.values().map(|c| c.fp).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub name: String,
    pub nap50: f64,
    pub nap: f64,
    pub bap50: Option<f64>,
    pub pool: Option<PoolSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub shots: usize,
    pub confusion: Confusion,
    pub rungs: Vec<Rung>,
    /// Per-iteration kept counts of the online rung with the IoU branch.
    pub mingle: Vec<MingleRecord>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}  K={}", self.seed, self.shots)?;
        writeln!(
            f,
            "background rate: implicit novel {:.3}, held-out base {:.3}",
            self.confusion.implicit_novel, self.confusion.held_out_base
        )?;
        writeln!(f, "{:<28} {:>7} {:>7} {:>7} {:>6} {:>6}", "rung", "nAP50", "nAP", "bAP50", "TP", "FP")?;
        for r in &self.rungs {
            let (tp, fp) = r.pool.map_or(("-".into(), "-".into()), |p| (p.tp.to_string(), p.fp.to_string()));
            writeln!(
                f,
                "{:<28} {:>7.1} {:>7.1} {:>7} {:>6} {:>6}",
                r.name,
                100.0 * r.nap50,
                100.0 * r.nap,
                r.bap50.map_or("-".into(), |b| format!("{:.1}", 100.0 * b)),
                tp,
                fp
            )?;
        }
        Ok(())
    }
}

/// Offline pools of the ladder, from one set of detections.
pub struct Pools {
    pub fixed: CandidatePool,
    pub adaptive: CandidatePool,
    pub calibrated: CandidatePool,
}

pub fn mine_pools(fsod: &ToyLearner, cfg: &MiningConfig, exec: Exec) -> Result<Pools> {
    let world = fsod.world().clone();
    let dets = detect(fsod, &world.base, &world.novel_classes, MINING_SALT, cfg, exec);
    let fmaps = feature_maps(&world, exec);
    let shots = novel_shots(&world, &fmaps);
    let fixed = mine_fixed(&dets, &world.novel_classes, cfg.fixed_delta);
    let adaptive = mine_offline_from_detections(
        &dets,
        &fmaps,
        &shots,
        &world.novel_classes,
        &MiningConfig {
            calibration: false,
            adaptive_threshold: true,
            ..cfg.clone()
        },
        exec,
    )?;
    let calibrated = mine_offline_from_detections(
        &dets,
        &fmaps,
        &shots,
        &world.novel_classes,
        &MiningConfig {
            calibration: true,
            adaptive_threshold: true,
            ..cfg.clone()
        },
        exec,
    )?;
    Ok(Pools {
        fixed,
        adaptive,
        calibrated,
    })
}

fn rung(name: &str, learner: &ToyLearner, cfg: &MiningConfig, pool: Option<PoolSummary>, exec: Exec) -> Rung {
    let r = evaluate_learner(learner, cfg, exec);
    Rung {
        name: name.into(),
        nap50: r.nap50,
        nap: r.nap,
        bap50: r.bap50,
        pool,
    }
}

fn retrain(
    fsod: &ToyLearner,
    pool: &CandidatePool,
    cfg: &MiningConfig,
    online: bool,
    iou_branch: bool,
    exec: Exec,
) -> Result<TrainOutcome<ToyLearner>> {
    let world = fsod.world().clone();
    let cfg = MiningConfig {
        online_mining: online,
        iou_branch,
        ..cfg.clone()
    };
    train_loop(fsod, &world.base, pool, &world.novel_classes, &cfg, exec)
}

/// The ablation ladder on one seed.
pub fn run_benchmark(config: &Config, exec: Exec) -> Result<BenchReport> {
    let cfg = &config.mining;
    let world = Arc::new(generate_world(cfg.seed, &config.world, exec)?);
    let base = train_base(&world, cfg, exec)?;
    let confusion = confusion(&base);
    let fsod = train_fsod(&base, cfg, exec)?;
    let gt = full_ground_truth(&world);
    let pools = mine_pools(&fsod, cfg, exec)?;

    let plain = MiningConfig {
        iou_branch: false,
        ..cfg.clone()
    };
    let mut rungs = vec![rung("baseline", &fsod, &plain, None, exec)];

    let ladder: [(&str, &CandidatePool); 3] = [
        ("fixed threshold", &pools.fixed),
        ("adaptive threshold", &pools.adaptive),
        ("co-mining calibration", &pools.calibrated),
    ];
    for (name, pool) in ladder {
        let out = retrain(&fsod, pool, cfg, false, false, exec)?;
        rungs.push(rung(name, &out.student, &plain, Some(summarize_pool(pool, &gt)), exec));
    }

    let calibrated = Some(summarize_pool(&pools.calibrated, &gt));
    let out = retrain(&fsod, &pools.calibrated, cfg, true, false, exec)?;
    rungs.push(rung("online mingling", &out.student, &plain, calibrated, exec));

    let out = retrain(&fsod, &pools.calibrated, cfg, true, true, exec)?;
    rungs.push(rung("iou branch", &out.student, &plain, calibrated, exec));

    let tuned = finetune(&out.student, &world.shots, cfg, exec)?;
    rungs.push(rung("fine-tune", &tuned, &plain, calibrated, exec));

    Ok(BenchReport {
        seed: cfg.seed,
        shots: config.world.shots,
        confusion,
        rungs,
        mingle: out.mingle,
    })
}

/// Pool TP counts without and with calibration, keyed by the variant name.
pub fn calibration_gain(config: &Config, exec: Exec) -> Result<BTreeMap<&'static str, PoolSummary>> {
    let cfg = &config.mining;
    let world = Arc::new(generate_world(cfg.seed, &config.world, exec)?);
    let fsod = train_fsod(&train_base(&world, cfg, exec)?, cfg, exec)?;
    let gt = full_ground_truth(&world);
    let pools = mine_pools(&fsod, cfg, exec)?;
    Ok(BTreeMap::from([
        ("fixed", summarize_pool(&pools.fixed, &gt)),
        ("adaptive", summarize_pool(&pools.adaptive, &gt)),
        ("calibrated", summarize_pool(&pools.calibrated, &gt)),
    ]))
}
