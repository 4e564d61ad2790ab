use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use iminer::eval::{pool_tp_count, total_tp};
use iminer::exec::{init_thread_pool, Exec};
use iminer::io::config::Config;
use iminer::io::dump::{load_shots, save_shots, DetectionDump};
use iminer::io::files::{load_pool, save_pool, write_stats, ModelFile, WorldManifest};
use iminer::offline::{mine_offline_from_detections, CandidatePool};
use iminer::online::{finetune, train_loop};
use iminer::toy::bench::{evaluate_learner, run_benchmark, train_base, train_fsod};
use iminer::toy::export::{
    detection_dump, ground_truth_dump, novel_shot_records, read_feature_maps, shots_from_records, write_feature_maps,
};
use iminer::toy::{generate_world, ToyLearner, World};

#[derive(Parser)]
#[command(name = "iminer", version, about = "Pseudo-label mining for few-shot detection")]
struct Cli {
    /// Print the effective config, marking assumed defaults, and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a candidate pool from a detection dump and feature maps.
    MineOffline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        detections: PathBuf,
        /// Directory of `<image_id>.fmap` files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        shots: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-student training with online mining, then fine-tuning.
    MineOnline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        /// World directory written by `gen-world`.
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: PathBuf,
    },
    /// Evaluate a model on the test scenes of a world.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full ablation ladder on a toy world.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Count true and false positives of a pool against full ground truth.
    AuditPool {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Generate a toy world and the trained few-shot detector's outputs.
    GenWorld {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.mining.seed = s;
    }
    Ok(cfg)
}

fn manifest_path(world: &Path) -> PathBuf {
    if world.is_dir() {
        world.join("world.json")
    } else {
        world.to_path_buf()
    }
}

/// Regenerate the world recorded in a manifest.
fn load_world(world: &Path, exec: Exec) -> Result<(Arc<World>, Config, PathBuf)> {
    let path = manifest_path(world);
    let manifest = WorldManifest::load(&path)?;
    let cfg = manifest.config().with_context(|| format!("{}: embedded config", path.display()))?;
    let w = generate_world(manifest.seed, &cfg.world, exec)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Arc::new(w), cfg, dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_pool(pool: &CandidatePool) {
    println!("{:>6} {:>10} {:>10} {:>10} {:>6} {:>6}", "class", "mean", "std", "delta", "cands", "kept");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for (c, p) in &pool.classes {
        println!(
            "{:>6} {:>10} {:>10} {:>10} {:>6} {:>6}",
            c.0,
            opt(p.mean),
            opt(p.std),
            opt(p.threshold),
            p.n_candidates,
            p.instances.len()
        );
    }
    println!("total kept: {}", pool.len());
}

fn run(cli: Cli, exec: Exec) -> Result<()> {
    match cli.command {
        Command::MineOffline {
            config,
            detections,
            features,
            shots,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            if cli.print_config {
                print!("{}", cfg.render());
                return Ok(());
            }
            let dump = DetectionDump::load(&detections)?;
            let records = load_shots(&shots)?;
            let novel = dump.novel_classes();
            let ids = dump
                .images
                .iter()
                .map(|i| i.image_id)
                .chain(records.iter().map(|r| r.image_id))
                .collect::<std::collections::BTreeSet<_>>();
            let fmaps = read_feature_maps(&features, ids, exec)?;
            let shots = shots_from_records(&records, &fmaps)?;
            let pool = mine_offline_from_detections(&dump.detections(), &fmaps, &shots, &novel, &cfg.mining, exec)?;
            print_pool(&pool);
            save_pool(&out, &pool)?;
        }
        Command::MineOnline {
            config,
            pool,
            world,
            out,
            stats,
        } => {
            let (world, world_cfg, dir) = load_world(&world, exec)?;
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => world_cfg,
            };
            if cli.print_config {
                print!("{}", cfg.render());
                return Ok(());
            }
            let pool = load_pool(&pool)?;
            let model = ModelFile::load(&dir.join("fsod_model.bin"))?;
            let initial = ToyLearner::from_model(world.clone(), &model)?;
            let m = &cfg.mining;
            let outcome = train_loop(&initial, &world.base, &pool, &world.novel_classes, m, exec)?;
            write_stats(&stats, &outcome.mingle, &outcome.losses)?;
            let student = if m.finetune {
                finetune(&outcome.student, &world.shots, m, exec)?
            } else {
                outcome.student
            };
            student.to_model().save(&out)?;
            let online: usize = outcome.mingle.iter().map(|r| r.n_online_kept).sum();
            let offline: usize = outcome.mingle.iter().map(|r| r.n_offline_kept).sum();
            println!(
                "{} iterations, kept {online} online and {offline} offline instances",
                outcome.mingle.len()
            );
            if let Some(l) = outcome.losses.last() {
                println!("final loss {:.4} (cls {:.4}, reg {:.4}, iou {:.4})", l.total, l.l_cls, l.l_reg, l.l_iou);
            }
        }
        Command::Evaluate { model, world, out } => {
            let (world, cfg, _) = load_world(&world, exec)?;
            if cli.print_config {
                print!("{}", cfg.render());
                return Ok(());
            }
            let learner = ToyLearner::from_model(world, &ModelFile::load(&model)?)?;
            let report = evaluate_learner(&learner, &cfg.mining, exec);
            println!(
                "nAP50 {:.1}  nAP {:.1}  bAP50 {}",
                100.0 * report.nap50,
                100.0 * report.nap,
                report.bap50.map_or("-".into(), |b| format!("{:.1}", 100.0 * b))
            );
            write_json(&out, &report)?;
        }
        Command::Bench { config, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            if cli.print_config {
                print!("{}", cfg.render());
                return Ok(());
            }
            let start = std::time::Instant::now();
            let report = run_benchmark(&cfg, exec)?;
            print!("{report}");
            println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
        }
        Command::AuditPool { pool, gt } => {
            if cli.print_config {
                print!("{}", Config::default().render());
                return Ok(());
            }
            let pool = load_pool(&pool)?;
            let gt = DetectionDump::load(&gt)?.ground_truth();
            let counts = pool_tp_count(&pool, &gt);
            println!("{:>6} {:>6} {:>6} {:>6} {:>9}", "class", "kept", "tp", "fp", "precision");
            for (c, n) in &counts {
                let kept = n.tp + n.fp;
                let prec = if kept == 0 { "-".into() } else { format!("{:.3}", n.tp as f64 / kept as f64) };
                println!("{:>6} {:>6} {:>6} {:>6} {:>9}", c.0, kept, n.tp, n.fp, prec);
            }
            let fp: usize = counts.values().map(|n| n.fp).sum();
            println!("total tp {} fp {}", total_tp(&counts), fp);
        }
        Command::GenWorld { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            if cli.print_config {
                print!("{}", cfg.render());
                return Ok(());
            }
            let m = &cfg.mining;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let world = Arc::new(generate_world(m.seed, &cfg.world, exec)?);
            WorldManifest::new(m.seed, &cfg).save(&out.join("world.json"))?;
            let base = train_base(&world, m, exec)?;
            let fsod = train_fsod(&base, m, exec)?;
            base.to_model().save(&out.join("base_model.bin"))?;
            fsod.to_model().save(&out.join("fsod_model.bin"))?;
            detection_dump(&fsod, m, exec).save(&out.join("detections.json"))?;
            ground_truth_dump(&world).save(&out.join("gt.json"))?;
            save_shots(&out.join("shots.json"), &novel_shot_records(&world))?;
            let n_maps = write_feature_maps(&world, &out.join("fmaps"), exec)?;
            let implicit: usize = world.base.iter().map(|s| s.implicit_count()).sum();
            println!(
                "{} base, {} shot and {} test scenes; {implicit} implicit novel objects; {n_maps} feature maps",
                world.base.len(),
                world.shots.len(),
                world.test.len()
            );
            let r = evaluate_learner(&fsod, m, exec);
            println!("few-shot detector nAP50 {:.1}", 100.0 * r.nap50);
        }
    }
    Ok(())
}

fn threads_from_env() -> Result<usize, String> {
    match std::env::var("IMINER_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("IMINER_THREADS must be a non-negative integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    init_thread_pool(threads);
    let exec = if threads == 1 { Exec::Sequential } else { Exec::Parallel };
    match run(cli, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already render their own sources
            let mut msg = Vec::new();
            let mut validation = false;
            for c in e.chain() {
                msg.push(c.to_string());
                if let Some(ie) = c.downcast_ref::<iminer::Error>() {
                    validation = ie.is_validation();
                    break;
                }
            }
            eprintln!("error: {}", msg.join(": "));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
