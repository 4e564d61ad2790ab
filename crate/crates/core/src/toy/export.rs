//! Writing a toy world out in the miner's input formats.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::bench::{detect, MINING_SALT};
use super::learner::ToyLearner;
use super::world::World;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{FeatureMap, Shot};
use crate::io::config::MiningConfig;
use crate::io::dump::{ClassEntry, ClassSplit, DetectionDump, DumpImage, ShotRecord};
use crate::io::fmap;

pub fn class_entries(world: &World) -> Vec<ClassEntry> {
    let base = world.base_classes.iter().map(|&id| ClassEntry {
        id,
        name: format!("base{:02}", id.0),
        split: ClassSplit::Base,
    });
    let novel = world.novel_classes.iter().map(|&id| ClassEntry {
        id,
        name: format!("novel{:02}", id.0 as usize - world.base_classes.len()),
        split: ClassSplit::Novel,
    });
    base.chain(novel).collect()
}

/// Detections of `learner` over the base scenes, with the human annotations
/// as `gts`.
pub fn detection_dump(learner: &ToyLearner, cfg: &MiningConfig, exec: Exec) -> DetectionDump {
    let world = learner.world();
    let classes: Vec<_> = world.base_classes.iter().chain(&world.novel_classes).copied().collect();
    let dets = detect(learner, &world.base, &classes, MINING_SALT, cfg, exec);
    let mut dump = DetectionDump::new(class_entries(world));
    dump.images = dets
        .into_iter()
        .zip(&world.base)
        .map(|(d, s)| DumpImage {
            image_id: s.image_id,
            width: s.width,
            height: s.height,
            detections: d.detections,
            gts: s.annotations(),
        })
        .collect();
    dump
}

/// Every base-scene object, implicit ones included, and no detections.
pub fn ground_truth_dump(world: &World) -> DetectionDump {
    let mut dump = DetectionDump::new(class_entries(world));
    dump.images = world
        .base
        .iter()
        .map(|s| DumpImage {
            image_id: s.image_id,
            width: s.width,
            height: s.height,
            detections: Vec::new(),
            gts: s.ground_truth(),
        })
        .collect();
    dump
}

pub fn novel_shot_records(world: &World) -> Vec<ShotRecord> {
    world
        .shots
        .iter()
        .flat_map(|s| {
            s.objects.iter().filter(|o| world.is_novel(o.class)).map(|o| ShotRecord {
                image_id: s.image_id,
                bbox: o.bbox,
                label: o.class,
            })
        })
        .collect()
}

pub fn fmap_path(dir: &Path, image_id: u64) -> PathBuf {
    dir.join(format!("{image_id}.fmap"))
}

/// Write the self-supervised maps of the base scenes and novel shots.
pub fn write_feature_maps(world: &World, dir: &Path, exec: Exec) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes: Vec<_> = world.base.iter().collect();
    scenes.extend(world.shots.iter().filter(|s| s.objects.iter().any(|o| world.is_novel(o.class))));
    let written = exec.map(&scenes, |s| fmap::write(&fmap_path(dir, s.image_id), &world.ssl_map(s)));
    written.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(scenes.len())
}

/// Load `<dir>/<image_id>.fmap` for every id.
pub fn read_feature_maps(dir: &Path, ids: impl IntoIterator<Item = u64>, exec: Exec) -> Result<HashMap<u64, FeatureMap>> {
    let ids: Vec<u64> = ids.into_iter().collect();
    let maps = exec.map(&ids, |&id| fmap::read(&fmap_path(dir, id)));
    ids.into_iter()
        .zip(maps)
        .map(|(id, m)| m.map(|m| (id, m)))
        .collect()
}

pub fn shots_from_records<'a>(records: &[ShotRecord], fmaps: &'a HashMap<u64, FeatureMap>) -> Result<Vec<Shot<'a>>> {
    records
        .iter()
        .map(|r| {
            Ok(Shot {
                fmap: fmaps.get(&r.image_id).ok_or(Error::MissingFeatures(r.image_id))?,
                bbox: r.bbox,
                class_id: r.label,
            })
        })
        .collect()
}
