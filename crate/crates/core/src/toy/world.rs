//! Synthetic detection world.
//!
//! Scenes are abstract: each object has a box, a class and a latent feature
//! vector drawn around its class centre on the unit sphere. There are no
//! pixels. Detector features and self-supervised feature maps are both
//! derived from the latents through fixed random projections, each with its
//! own independent noise.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::rng::{normal, normals, stream, unit_vector, Rng};
use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::exec::Exec;
use crate::features::FeatureMap;
use crate::geometry::{encode_deltas, iou, BBox, ClassId};
use crate::io::config::WorldConfig;

pub const SHOT_ID_BASE: u64 = 1_000_000;
pub const TEST_ID_BASE: u64 = 2_000_000;

/// Probability that a test-scene object is drawn from a novel class.
const TEST_NOVEL_RATE: f64 = 0.4;
/// Norm of the constant background vector in self-supervised feature space.
const SSL_BACKGROUND_LEVEL: f64 = 0.6;
/// Gain applied to the box-offset block of observations.
const OFFSET_GAIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Shot,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassId,
    pub latent: Vec<f64>,
    /// False for novel objects in base scenes: present but never labelled.
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub split: Split,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<Object>,
    pub noise_seed: u64,
}

impl Scene {
    pub fn annotations(&self) -> Vec<GtBox> {
        self.objects
            .iter()
            .filter(|o| o.annotated)
            .map(|o| GtBox {
                bbox: o.bbox,
                label: o.class,
                implicit: false,
            })
            .collect()
    }

    /// Every object, implicit ones flagged.
    pub fn ground_truth(&self) -> Vec<GtBox> {
        self.objects
            .iter()
            .map(|o| GtBox {
                bbox: o.bbox,
                label: o.class,
                implicit: !o.annotated,
            })
            .collect()
    }

    pub fn implicit_count(&self) -> usize {
        self.objects.iter().filter(|o| !o.annotated).count()
    }

    /// Clip a box to the scene, keeping a minimum extent of one pixel.
    pub fn clip(&self, b: &BBox) -> BBox {
        let x1 = b.x1().clamp(0.0, self.width - 1.0);
        let y1 = b.y1().clamp(0.0, self.height - 1.0);
        let x2 = b.x2().clamp(x1 + 1.0, self.width);
        let y2 = b.y2().clamp(y1 + 1.0, self.height);
        BBox::new(x1, y1, x2, y2).expect("clipped box is non-degenerate")
    }
}

/// A matrix with orthonormal columns, `rows x cols`, `rows >= cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Projection {
    pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        assert!(rows >= cols);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while columns.len() < cols {
            let mut v = normals(rng, rows);
            for c in &columns {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                columns.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            for i in 0..rows {
                data[i * cols + j] = c[i];
            }
        }
        Projection { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, v) in self.data.chunks_exact(self.cols).zip(y) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a * v);
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub class_means: Vec<Vec<f64>>,
    pub base_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
    pub base: Vec<Scene>,
    /// `shots` annotated single-object scenes per class, base and novel.
    pub shots: Vec<Scene>,
    pub test: Vec<Scene>,
    /// Frozen detector backbone: raw observation -> learner features.
    pub extractor: Projection,
    ssl_projection: Projection,
    ssl_background: Vec<f64>,
}

impl World {
    pub fn n_classes(&self) -> usize {
        self.base_classes.len() + self.novel_classes.len()
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        c.0 as usize >= self.base_classes.len()
    }

    /// Raw observation length: content, box offsets and their magnitudes.
    pub fn observation_dim(&self) -> usize {
        self.config.latent_dim + 8
    }

    /// Novel-class shot scenes only.
    pub fn novel_shots(&self) -> Vec<Scene> {
        self.shots
            .iter()
            .filter(|s| s.objects.iter().any(|o| self.is_novel(o.class)))
            .cloned()
            .collect()
    }

    pub fn all_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.base.iter().chain(&self.shots).chain(&self.test)
    }

    pub fn scene(&self, image_id: u64) -> Option<&Scene> {
        let idx = |base: u64, v: &'_ [Scene]| -> Option<usize> {
            let i = image_id.checked_sub(base)? as usize;
            (i < v.len()).then_some(i)
        };
        if image_id >= TEST_ID_BASE {
            idx(TEST_ID_BASE, &self.test).map(|i| &self.test[i])
        } else if image_id >= SHOT_ID_BASE {
            idx(SHOT_ID_BASE, &self.shots).map(|i| &self.shots[i])
        } else {
            idx(0, &self.base).map(|i| &self.base[i])
        }
    }

    /// What the detector backbone sees for `bbox`: the best-overlapping
    /// object's latent scaled by the overlap, the noisy offsets to that
    /// object, and their magnitudes.
    pub fn observe(&self, scene: &Scene, bbox: &BBox, rng: &mut Rng) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let best = scene
            .objects
            .iter()
            .map(|o| (o, iou(bbox, &o.bbox)))
            .filter(|(_, q)| *q > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1));

        let mut raw = Vec::with_capacity(d + 8);
        let noise_scale = cfg.feature_noise / (d as f64).sqrt();
        match best {
            Some((o, q)) => {
                for z in &o.latent {
                    raw.push(cfg.feature_gain * (q * z + noise_scale * normal(rng)));
                }
                let t = encode_deltas(bbox, &o.bbox);
                for v in t {
                    raw.push(OFFSET_GAIN * (v + cfg.offset_noise * normal(rng)));
                }
            }
            None => {
                for _ in 0..d {
                    raw.push(cfg.feature_gain * noise_scale * normal(rng));
                }
                for _ in 0..4 {
                    raw.push(OFFSET_GAIN * 0.3 * normal(rng));
                }
            }
        }
        for k in 0..4 {
            let v = raw[d + k].abs();
            raw.push(v);
        }
        raw
    }

    /// Toy region proposals: jittered copies of every object box plus
    /// uniformly placed background boxes.
    pub fn proposals(&self, scene: &Scene, rng: &mut Rng) -> Vec<BBox> {
        let cfg = &self.config;
        let j = cfg.proposal_jitter;
        let mut out = Vec::with_capacity(scene.objects.len() * cfg.proposals_per_object + cfg.background_proposals);
        for o in &scene.objects {
            let (cx, cy) = o.bbox.center();
            let (w, h) = (o.bbox.width(), o.bbox.height());
            for _ in 0..cfg.proposals_per_object {
                let b = BBox::from_center(
                    cx + j * w * normal(rng),
                    cy + j * h * normal(rng),
                    w * (j * normal(rng)).exp(),
                    h * (j * normal(rng)).exp(),
                )
                .expect("jittered box has positive size");
                out.push(scene.clip(&b));
            }
        }
        for _ in 0..cfg.background_proposals {
            let w = rng.gen_range(cfg.min_object_px * 0.5..=cfg.max_object_px);
            let h = rng.gen_range(cfg.min_object_px * 0.5..=cfg.max_object_px);
            let x = rng.gen_range(0.0..=(scene.width - w).max(0.0));
            let y = rng.gen_range(0.0..=(scene.height - h).max(0.0));
            out.push(scene.clip(&BBox::new(x, y, x + w, y + h).expect("positive size")));
        }
        out
    }

    /// Self-supervised feature map of a scene. Cells whose centre falls in an
    /// object carry the projected latent plus noise; the rest carry a
    /// constant background vector plus noise.
    pub fn ssl_map(&self, scene: &Scene) -> FeatureMap {
        let cfg = &self.config;
        let stride = cfg.ssl_stride_px;
        let cols = (scene.width / stride).ceil().max(1.0) as usize;
        let rows = (scene.height / stride).ceil().max(1.0) as usize;
        let c = cfg.ssl_channels;
        let projected: Vec<Vec<f64>> = scene.objects.iter().map(|o| self.ssl_projection.apply(&o.latent)).collect();
        let mut rng = stream(&[self.seed, scene.noise_seed, 0x551]);
        let noise = cfg.ssl_noise / (c as f64).sqrt();
        let mut data = Vec::with_capacity(rows * cols * c);
        for r in 0..rows {
            let py = (r as f64 + 0.5) * stride;
            for col in 0..cols {
                let px = (col as f64 + 0.5) * stride;
                let owner = scene
                    .objects
                    .iter()
                    .rposition(|o| px >= o.bbox.x1() && px < o.bbox.x2() && py >= o.bbox.y1() && py < o.bbox.y2());
                let base = match owner {
                    Some(i) => &projected[i],
                    None => &self.ssl_background,
                };
                for v in base {
                    data.push((v + noise * normal(&mut rng)) as f32);
                }
            }
        }
        FeatureMap::new(rows, cols, c, stride as f32, data).expect("generated map is well-formed")
    }
}

fn place_objects(
    cfg: &WorldConfig,
    classes: &[ClassId],
    class_means: &[Vec<f64>],
    annotated: &[bool],
    rng: &mut Rng,
) -> Vec<Object> {
    let mut objects: Vec<Object> = Vec::new();
    for (&class, &annot) in classes.iter().zip(annotated) {
        for _attempt in 0..50 {
            let w = rng.gen_range(cfg.min_object_px..=cfg.max_object_px);
            let h = rng.gen_range(cfg.min_object_px..=cfg.max_object_px);
            let x = rng.gen_range(0.0..=(cfg.scene_extent_px - w));
            let y = rng.gen_range(0.0..=(cfg.scene_extent_px - h));
            let b = BBox::new(x, y, x + w, y + h).expect("positive size");
            if objects.iter().all(|o| iou(&o.bbox, &b) < 0.05) {
                objects.push(Object {
                    bbox: b,
                    class,
                    latent: sample_latent(&class_means[class.0 as usize], cfg.class_spread, rng),
                    annotated: annot,
                });
                break;
            }
        }
    }
    objects
}

fn sample_latent(mean: &[f64], spread: f64, rng: &mut Rng) -> Vec<f64> {
    let d = mean.len() as f64;
    let v: Vec<f64> = mean.iter().map(|m| m + spread / d.sqrt() * normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Deterministically generate a world from `seed`.
pub fn generate_world(seed: u64, cfg: &WorldConfig, exec: Exec) -> Result<World> {
    cfg.validate()?;
    if cfg.base_scenes == 0 || cfg.test_scenes == 0 {
        return Err(Error::InfeasibleWorld("base and test sets must be non-empty".into()));
    }
    if cfg.ssl_channels < cfg.latent_dim + 1 {
        return Err(Error::InfeasibleWorld(format!(
            "ssl_channels ({}) must exceed latent_dim ({})",
            cfg.ssl_channels, cfg.latent_dim
        )));
    }
    let n_base = cfg.base_classes;
    let n_classes = n_base + cfg.novel_classes;
    let base_classes: Vec<ClassId> = (0..n_base as u32).map(ClassId).collect();
    let novel_classes: Vec<ClassId> = (n_base as u32..n_classes as u32).map(ClassId).collect();

    let mut g = stream(&[seed, 0xC1A55]);
    let shared = unit_vector(&mut g, cfg.latent_dim);
    let class_means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let v = unit_vector(&mut g, cfg.latent_dim);
            if c < n_base {
                return v;
            }
            let v: Vec<f64> = v.iter().zip(&shared).map(|(a, b)| a + cfg.novel_affinity * b).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let obs_dim = cfg.latent_dim + 8;
    let extractor = Projection::random_orthonormal(obs_dim, obs_dim, &mut g);
    let ssl_projection = Projection::random_orthonormal(cfg.ssl_channels, cfg.latent_dim, &mut g);
    let ssl_background: Vec<f64> = unit_vector(&mut g, cfg.ssl_channels)
        .into_iter()
        .map(|v| v * SSL_BACKGROUND_LEVEL)
        .collect();

    let mixed_scene = |split: Split, image_id: u64, idx: usize, novel_rate: f64| -> Scene {
        let mut rng = stream(&[seed, split as u64, idx as u64]);
        let n = rng.gen_range(1..=cfg.max_objects_per_scene);
        let mut classes = Vec::with_capacity(n);
        let mut annotated = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.gen_bool(novel_rate) {
                classes.push(novel_classes[rng.gen_range(0..novel_classes.len())]);
                annotated.push(split == Split::Test);
            } else {
                classes.push(base_classes[rng.gen_range(0..n_base)]);
                annotated.push(true);
            }
        }
        let objects = place_objects(cfg, &classes, &class_means, &annotated, &mut rng);
        Scene {
            image_id,
            split,
            width: cfg.scene_extent_px,
            height: cfg.scene_extent_px,
            objects,
            noise_seed: rng.gen(),
        }
    };

    let base = exec.map_range(cfg.base_scenes, |i| {
        mixed_scene(Split::Base, i as u64, i, cfg.co_occurrence_rate)
    });
    let test = exec.map_range(cfg.test_scenes, |i| {
        mixed_scene(Split::Test, TEST_ID_BASE + i as u64, i, TEST_NOVEL_RATE)
    });
    let shots = exec.map_range(n_classes * cfg.shots, |i| {
        let class = ClassId((i / cfg.shots) as u32);
        let mut rng = stream(&[seed, Split::Shot as u64, i as u64]);
        let objects = place_objects(cfg, &[class], &class_means, &[true], &mut rng);
        Scene {
            image_id: SHOT_ID_BASE + i as u64,
            split: Split::Shot,
            width: cfg.scene_extent_px,
            height: cfg.scene_extent_px,
            objects,
            noise_seed: rng.gen(),
        }
    });
    if let Some(s) = shots.iter().find(|s| s.objects.is_empty()) {
        return Err(Error::InfeasibleWorld(format!("could not place the object of shot scene {}", s.image_id)));
    }

    Ok(World {
        config: cfg.clone(),
        seed,
        class_means,
        base_classes,
        novel_classes,
        base,
        shots,
        test,
        extractor,
        ssl_projection,
        ssl_background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            base_scenes: 60,
            test_scenes: 20,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(7, &small(), Exec::Parallel).unwrap();
        let b = generate_world(7, &small(), Exec::Sequential).unwrap();
        assert_eq!(a.base, b.base);
        assert_eq!(a.test, b.test);
        assert_eq!(a.shots, b.shots);
        let c = generate_world(8, &small(), Exec::Sequential).unwrap();
        assert_ne!(a.base, c.base);
    }

    #[test]
    fn zero_rate_has_no_implicit_objects() {
        let cfg = WorldConfig {
            co_occurrence_rate: 0.0,
            ..small()
        };
        let w = generate_world(1, &cfg, Exec::Sequential).unwrap();
        assert_eq!(w.base.iter().map(Scene::implicit_count).sum::<usize>(), 0);
    }

    #[test]
    fn implicit_objects_are_exactly_novel_objects_in_base_scenes() {
        let w = generate_world(3, &small(), Exec::Sequential).unwrap();
        for s in &w.base {
            for o in &s.objects {
                assert_eq!(o.annotated, !w.is_novel(o.class));
            }
        }
        for s in w.test.iter().chain(&w.shots) {
            assert!(s.objects.iter().all(|o| o.annotated));
        }
        assert_eq!(w.shots.len(), 20 * w.config.shots);
        assert_eq!(w.novel_shots().len(), 5 * w.config.shots);
    }

    #[test]
    fn latents_are_unit_norm_and_projection_orthonormal() {
        let w = generate_world(5, &small(), Exec::Sequential).unwrap();
        for o in w.base.iter().flat_map(|s| &s.objects) {
            let n: f64 = o.latent.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let x: Vec<f64> = (0..w.observation_dim()).map(|i| i as f64 - 3.0).collect();
        let y = w.extractor.apply(&x);
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let ny: f64 = y.iter().map(|v| v * v).sum();
        assert!((nx - ny).abs() < 1e-9);
    }

    #[test]
    fn ssl_map_shape() {
        let w = generate_world(5, &small(), Exec::Sequential).unwrap();
        let m = w.ssl_map(&w.base[0]);
        assert_eq!((m.height(), m.width(), m.channels()), (16, 16, w.config.ssl_channels));
        assert_eq!(m, w.ssl_map(&w.base[0]));
    }

    #[test]
    fn scene_lookup_by_id() {
        let w = generate_world(5, &small(), Exec::Sequential).unwrap();
        assert_eq!(w.scene(3).unwrap().image_id, 3);
        assert_eq!(w.scene(SHOT_ID_BASE + 2).unwrap().image_id, SHOT_ID_BASE + 2);
        assert_eq!(w.scene(TEST_ID_BASE + 19).unwrap().image_id, TEST_ID_BASE + 19);
        assert!(w.scene(TEST_ID_BASE + 20).is_none());
        assert!(w.scene(999).is_none());
    }
}
