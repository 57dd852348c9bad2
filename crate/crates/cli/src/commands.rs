use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pointtpa::autodiff::{read_checkpoint, write_checkpoint, Parameter, Tape};
use pointtpa::backbone::{BuildMode, Model};
use pointtpa::config::RunConfig;
use pointtpa::data::{generate_dataset, read_cloud, write_ptbin, PointCloud, SceneSpec};
use pointtpa::dpp::{routing_entropy, weight_similarity};
use pointtpa::sfc;
use pointtpa::sng::GroupLayout;
use pointtpa::train::{self, Split, GRADCHECK_PERTURB};
use pointtpa::Error;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::{Command, ConfigArg};

/// Sizes the global thread pool from `PTPA_THREADS`, if set. A pool that
/// already exists (an earlier in-process run) is kept.
pub fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PTPA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| format!("PTPA_THREADS must be a positive integer, got {raw:?}"))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Gen { spec, out, count, seed, points } => gen(&spec, &out, count, seed, points),
        Command::Pretrain { config, out, loss_log } => pretrain(&load_config(&config)?, out, loss_log),
        Command::Train { config, init, out, steps, loss_log, scenes } => {
            train_cmd(&load_config(&config)?, init, out, steps, loss_log, scenes)
        }
        Command::Eval { config, ckpt, scenes, out } => eval(&load_config(&config)?, &ckpt, scenes, out),
        Command::Gradcheck { config, seed } => gradcheck(&load_config(&config)?, seed),
        Command::Inspect { config, scene, stage, out } => inspect(&load_config(&config)?, &scene, stage, out),
        Command::WeightsSim { config, ckpt, scene, site, out, entropy_out } => {
            weights_sim(&load_config(&config)?, &ckpt, &scene, site, out, entropy_out)
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    match &arg.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_params(path: &Path) -> Result<Vec<Parameter>, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

/// Scene files of a directory, sorted by name.
fn read_scene_dir(dir: &Path) -> Result<Vec<PointCloud>, Error> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ptbin" | "ptxt")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .ptbin or .ptxt scenes", dir.display())));
    }
    paths.iter().map(|p| read_cloud(p)).collect()
}

fn scenes_or_split(cfg: &RunConfig, dir: Option<PathBuf>, split: Split) -> Result<Vec<PointCloud>, Error> {
    match dir {
        Some(d) => read_scene_dir(&d),
        None => train::generate_split(cfg, split),
    }
}

/// A fine-tuning model with `path` loaded. When `strict`, the checkpoint
/// must cover every parameter of the model.
fn load_model(cfg: &RunConfig, path: &Path, strict: bool) -> Result<Model, Error> {
    let params = read_params(path)?;
    let mut model = Model::build(&cfg.backbone, &cfg.peft, cfg.train.seed, BuildMode::Finetune)?;
    model.load(&params).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if strict {
        let have: BTreeSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let missing: Vec<&str> =
            model.store.iter().map(|(_, p)| p.name.as_str()).filter(|n| !have.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("{}: checkpoint lacks {}", path.display(), missing.join(", "))));
        }
    }
    Ok(model)
}

fn gen(spec: &str, out: &Path, count: usize, seed: u64, points: Option<usize>) -> Result<u8, Error> {
    let mut cfg = RunConfig::default();
    cfg.data.points = points;
    let spec: SceneSpec = cfg.scene_spec(spec)?;
    let k = spec.num_classes();
    let scenes = generate_dataset(&spec, count, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::with_capacity(count);
    let mut total = vec![0usize; k];
    for (i, cloud) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.ptbin");
        let bytes = write_ptbin(cloud);
        let digest = format!("{:x}", Sha256::digest(&bytes));
        write_file(&out.join(&name), &bytes)?;
        let hist = cloud.class_histogram(k);
        total.iter_mut().zip(&hist).for_each(|(t, h)| *t += h);
        files.push(json!({ "file": name, "points": cloud.len(), "sha256": digest, "class_counts": hist }));
    }
    let n: usize = total.iter().sum();
    let freq: Vec<f64> = total.iter().map(|&c| c as f64 / n.max(1) as f64).collect();
    let manifest = json!({
        "spec": spec.name,
        "seed": seed,
        "count": count,
        "class_names": spec.class_names,
        "files": files,
        "class_counts": total,
        "class_frequencies": freq,
    });
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json") + "\n")?;
    eprintln!("wrote {count} scenes to {}", out.display());
    Ok(0)
}

fn pretrain(cfg: &RunConfig, out: Option<PathBuf>, loss_log: Option<PathBuf>) -> Result<u8, Error> {
    let scenes = train::generate_split(cfg, Split::Pretrain)?;
    let t = &cfg.train;
    let pre = train::pretrain_backbone(&cfg.backbone, &cfg.peft, &scenes, t.pretrain_epochs, t.pretrain_lr, t.momentum, t.seed)?;
    let out = out.unwrap_or_else(|| cfg.io.pretrained.clone());
    write_file(&out, write_checkpoint(&pre.frozen_backbone()))?;
    if let Some(p) = loss_log {
        write_file(&p, loss_csv(&pre.losses))?;
    }
    let last = pre.losses.last().copied().unwrap_or(f64::NAN);
    eprintln!("pretrained {} steps, final loss {last:.4}; wrote {}", pre.losses.len(), out.display());
    Ok(0)
}

fn train_cmd(
    cfg: &RunConfig,
    init: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: Option<usize>,
    loss_log: Option<PathBuf>,
    scenes: Option<PathBuf>,
) -> Result<u8, Error> {
    let init = init.unwrap_or_else(|| cfg.io.pretrained.clone());
    let mut model = load_model(cfg, &init, false)?;
    let scenes = scenes_or_split(cfg, scenes, Split::Train)?;
    let mut t = cfg.train.clone();
    if let Some(s) = steps {
        t.steps = s;
    }
    let losses = train::finetune(&mut model, &scenes, &t, |_, _| {})?;
    let out = out.unwrap_or_else(|| cfg.io.checkpoint.clone());
    write_file(&out, write_checkpoint(model.store.iter().map(|(_, p)| p)))?;
    write_file(&loss_log.unwrap_or_else(|| cfg.io.loss_log.clone()), loss_csv(&losses))?;
    eprintln!("trained {} steps; wrote {}", losses.len(), out.display());
    Ok(0)
}

fn eval(cfg: &RunConfig, ckpt: &Path, scenes: Option<PathBuf>, out: Option<PathBuf>) -> Result<u8, Error> {
    let model = load_model(cfg, ckpt, true)?;
    let scenes = scenes_or_split(cfg, scenes, Split::Val)?;
    let (_, metrics) = train::evaluate(&model, &scenes)?;
    let out = out.unwrap_or_else(|| cfg.io.metrics.clone());
    write_file(&out, serde_json::to_string_pretty(&metrics).expect("json") + "\n")?;
    eprintln!("mIoU {:.4}  mAcc {:.4}  allAcc {:.4}; wrote {}", metrics.miou, metrics.macc, metrics.allacc, out.display());
    Ok(0)
}

fn gradcheck(cfg: &RunConfig, seed: u64) -> Result<u8, Error> {
    let report = train::gradcheck(cfg, seed, GRADCHECK_PERTURB)?;
    let width = report.params.iter().map(|p| p.name.len()).max().unwrap_or(9).max(9);
    println!("{:<width$} {:>7} {:>12} {:>12} {:>12}  status", "parameter", "numel", "max_rel_err", "max_abs_err", "max_abs_grad");
    for p in &report.params {
        let status = if p.max_rel_err < report.tolerance { "ok" } else { "FAIL" };
        println!(
            "{:<width$} {:>7} {:>12.3e} {:>12.3e} {:>12.3e}  {status}",
            p.name, p.numel, p.max_rel_err, p.max_abs_err, p.max_abs_grad
        );
    }
    let failed = report.failures().count();
    println!("{} parameters, {failed} failed, worst relative error {:.3e}", report.params.len(), report.worst());
    Ok(if failed == 0 { 0 } else { 2 })
}

fn inspect(cfg: &RunConfig, scene: &Path, stage: usize, out: Option<PathBuf>) -> Result<u8, Error> {
    let cloud = read_cloud(scene)?;
    let model = Model::build(&cfg.backbone, &cfg.peft, cfg.train.seed, BuildMode::Finetune)?;
    let coords = model.stage_coords(&cloud.coords, stage)?;
    let sng = model.stage_sng(stage)?;
    let layout = GroupLayout::new(sfc::serialize(&coords, sng.curve, sng.order_bits)?, sng.grouping)?;
    let mut csv = String::from("point_index,group_index,slot_index,curve_code\n");
    for (i, (g, slot, code)) in layout.assignments().into_iter().enumerate() {
        let _ = writeln!(csv, "{i},{g},{slot},{code}");
    }
    emit(out.as_deref(), &csv)?;
    Ok(0)
}

fn weights_sim(
    cfg: &RunConfig,
    ckpt: &Path,
    scene: &Path,
    site: usize,
    out: Option<PathBuf>,
    entropy_out: Option<PathBuf>,
) -> Result<u8, Error> {
    let model = load_model(cfg, ckpt, true)?;
    let Some((block, _)) = model.dpp_site(site) else {
        return Err(Error::Config(format!("no dynamic site at stage {site}")));
    };
    let cloud = read_cloud(scene)?;
    let mut tape = Tape::inference();
    let fwd = model.forward(&mut tape, &cloud)?;
    let trace = fwd
        .sites
        .iter()
        .find(|t| t.stage == site && t.block == block)
        .map(|t| &t.trace)
        .expect("every DPP site reports a trace");
    let sim = weight_similarity(tape.value(trace.weights()));
    let m = sim.rows();
    let mut csv = (0..m).map(|j| j.to_string()).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for i in 0..m {
        let row: Vec<String> = sim.row(i).iter().map(|v| format!("{v:.9}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    emit(out.as_deref(), &csv)?;
    let mut ent = String::from("group,entropy\n");
    for (g, h) in routing_entropy(tape.value(trace.routing)).iter().enumerate() {
        let _ = writeln!(ent, "{g},{h:.9}");
    }
    match entropy_out {
        Some(p) => write_file(&p, ent)?,
        None => eprint!("{ent}"),
    }
    Ok(0)
}
