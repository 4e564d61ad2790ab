use std::collections::HashMap;
use std::sync::Arc;

use iminer::eval::pool_tp_count;
use iminer::io::config::{Config, WorldConfig};
use iminer::io::dump::{load_shots, save_shots, DetectionDump};
use iminer::offline::{mine_offline_from_detections, CandidateInstance, CandidatePool, ClassPool};
use iminer::online::{finetune, train_loop, Learner};
use iminer::toy::bench::{detect, evaluate_learner, feature_maps, full_ground_truth, mine_pools, train_base, train_fsod};
use iminer::toy::export::{
    detection_dump, ground_truth_dump, novel_shot_records, read_feature_maps, shots_from_records, write_feature_maps,
};
use iminer::toy::{generate_world, ToyLearner, World};
use iminer::{Exec, ScoredBox};

fn small() -> Config {
    let mut c = Config::default();
    c.world.base_scenes = 80;
    c.world.test_scenes = 40;
    c.mining.base_iters = 300;
    c.mining.fsod_iters = 150;
    c.mining.online_iters = 80;
    c.mining.finetune_iters = 40;
    c
}

fn world(cfg: &Config) -> Arc<World> {
    Arc::new(generate_world(cfg.mining.seed, &cfg.world, Exec::Parallel).unwrap())
}

#[test]
fn noiseless_oracle_detects_everything() {
    let mut cfg = Config::default();
    cfg.world = WorldConfig {
        test_scenes: 60,
        class_spread: 0.0,
        feature_noise: 0.0,
        offset_noise: 0.0,
        proposal_jitter: 0.0,
        ..cfg.world
    };
    let w = world(&cfg);
    let oracle = ToyLearner::oracle(w, 2.0);
    let r = evaluate_learner(&oracle, &cfg.mining, Exec::Parallel);
    assert_eq!(r.nap50, 1.0, "{r:?}");
    assert_eq!(r.bap50, Some(1.0));
}

#[test]
fn planted_pool_of_implicit_objects_is_all_true_positives() {
    let cfg = small();
    let w = world(&cfg);
    let mut pool = CandidatePool::default();
    for &c in &w.novel_classes {
        pool.classes.insert(c, ClassPool::default());
    }
    let mut planted = 0;
    for s in &w.base {
        for (i, o) in s.objects.iter().enumerate().filter(|(_, o)| !o.annotated) {
            let d = ScoredBox::new(o.bbox, o.class, 1.0).unwrap();
            pool.classes.get_mut(&o.class).unwrap().instances.push(CandidateInstance::offline(s.image_id, i, d));
            planted += 1;
        }
    }
    assert!(planted > 0);
    let counts = pool_tp_count(&pool, &full_ground_truth(&w));
    assert_eq!(counts.values().map(|c| c.tp).sum::<usize>(), planted);
    assert_eq!(counts.values().map(|c| c.fp).sum::<usize>(), 0);

    // annotations alone never contain the implicit objects
    let annotated: HashMap<u64, _> = w.base.iter().map(|s| (s.image_id, s.annotations())).collect();
    assert_eq!(pool_tp_count(&pool, &annotated).values().map(|c| c.tp).sum::<usize>(), 0);
}

#[test]
fn implicit_count_matches_co_occurrence_rate() {
    let mut cfg = Config::default();
    cfg.world.base_scenes = 2000;
    let w = world(&cfg);
    let n: usize = w.base.iter().map(|s| s.objects.len()).sum();
    let k: usize = w.base.iter().map(|s| s.implicit_count()).sum();
    let p = cfg.world.co_occurrence_rate;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    // 99% two-sided
    let z = (k as f64 - n as f64 * p) / sd;
    assert!(z.abs() < 2.576, "{k} implicit of {n}, z = {z:.2}");
}

#[test]
fn sequential_and_parallel_agree() {
    let cfg = small();
    let m = &cfg.mining;
    let a = generate_world(m.seed, &cfg.world, Exec::Sequential).unwrap();
    let b = generate_world(m.seed, &cfg.world, Exec::Parallel).unwrap();
    assert_eq!(a.base, b.base);
    assert_eq!(a.test, b.test);
    let w = Arc::new(a);

    let base_s = train_base(&w, m, Exec::Sequential).unwrap();
    let base_p = train_base(&w, m, Exec::Parallel).unwrap();
    assert_eq!(base_s.params(), base_p.params());

    let fsod = train_fsod(&base_p, m, Exec::Parallel).unwrap();
    let classes = w.novel_classes.clone();
    assert_eq!(
        detect(&fsod, &w.base, &classes, 0, m, Exec::Sequential),
        detect(&fsod, &w.base, &classes, 0, m, Exec::Parallel)
    );
    let ps = mine_pools(&fsod, m, Exec::Sequential).unwrap();
    let pp = mine_pools(&fsod, m, Exec::Parallel).unwrap();
    assert_eq!(ps.calibrated, pp.calibrated);

    let os = train_loop(&fsod, &w.base, &pp.calibrated, &w.novel_classes, m, Exec::Sequential).unwrap();
    let op = train_loop(&fsod, &w.base, &pp.calibrated, &w.novel_classes, m, Exec::Parallel).unwrap();
    assert_eq!(os.mingle, op.mingle);
    assert_eq!(os.student.params(), op.student.params());
    let fs = finetune(&os.student, &w.shots, m, Exec::Sequential).unwrap();
    let fp = finetune(&op.student, &w.shots, m, Exec::Parallel).unwrap();
    assert_eq!(fs.params(), fp.params());
}

#[test]
fn mining_from_exported_files_matches_in_memory() {
    let cfg = small();
    let m = &cfg.mining;
    let w = world(&cfg);
    let fsod = train_fsod(&train_base(&w, m, Exec::Parallel).unwrap(), m, Exec::Parallel).unwrap();
    let expected = mine_pools(&fsod, m, Exec::Parallel).unwrap().calibrated;

    let dir = tempfile::tempdir().unwrap();
    let fdir = dir.path().join("fmaps");
    detection_dump(&fsod, m, Exec::Parallel).save(&dir.path().join("d.json")).unwrap();
    save_shots(&dir.path().join("shots.json"), &novel_shot_records(&w)).unwrap();
    write_feature_maps(&w, &fdir, Exec::Parallel).unwrap();

    let dump = DetectionDump::load(&dir.path().join("d.json")).unwrap();
    let records = load_shots(&dir.path().join("shots.json")).unwrap();
    let ids = dump.images.iter().map(|i| i.image_id).chain(records.iter().map(|r| r.image_id));
    let fmaps = read_feature_maps(&fdir, ids, Exec::Parallel).unwrap();
    let in_memory = feature_maps(&w, Exec::Parallel);
    for (id, map) in &fmaps {
        assert_eq!(map, &in_memory[id]);
    }
    let shots = shots_from_records(&records, &fmaps).unwrap();
    let mined = mine_offline_from_detections(&dump.detections(), &fmaps, &shots, &dump.novel_classes(), m, Exec::Parallel).unwrap();
    // the dump carries every class, so box indices differ; everything else matches
    let strip = |p: &CandidatePool| {
        let mut p = p.clone();
        for c in p.classes.values_mut() {
            for i in &mut c.instances {
                i.box_index = 0;
            }
        }
        p
    };
    assert_eq!(strip(&mined), strip(&expected));
    assert!(!mined.is_empty());
}

#[test]
fn ground_truth_dump_flags_implicit_objects() {
    let cfg = small();
    let w = world(&cfg);
    let gt = ground_truth_dump(&w);
    gt.validate().unwrap();
    let implicit = gt.images.iter().flat_map(|i| &i.gts).filter(|g| g.implicit).count();
    assert_eq!(implicit, w.base.iter().map(|s| s.implicit_count()).sum::<usize>());
    for g in gt.images.iter().flat_map(|i| &i.gts) {
        assert_eq!(g.implicit, w.is_novel(g.label));
    }
}

#[test]
fn missing_feature_map_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_feature_maps(dir.path(), [3u64], Exec::Sequential).unwrap_err();
    assert!(err.to_string().contains("3.fmap"), "{err}");
    assert!(!err.is_validation());
}
