//! Subcommand bodies. Each returns a [`CliError`] whose kind picks the exit code.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use sparse_recursion::analysis::{export_routing_stats, export_trajectories};
use sparse_recursion::checkpoint::Checkpoint;
use sparse_recursion::diffusion::{self, make_dataset, sample, DiffusionSchedule, DitModel, SampleOptions};
use sparse_recursion::frozenlake::{
    evaluate_gate, evaluate_plans, generate_maps, make_rollouts, split_maps, train_planner, GateEval, LakeMap,
    LakeModel, Outcome, PlanReport, Rollout,
};
use sparse_recursion::numerics::TensorError;
use sparse_recursion::verify::{gradient_suite, OpReport, SUITE};

use crate::config::{RunConfig, Task};
use crate::pgm;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration.
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Reads and validates a config file. `task` overrides the file's task key.
pub fn load_config(path: &Path, task: Option<Task>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg =
        RunConfig::parse_unchecked(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    if let Some(t) = task {
        cfg.task = t;
    }
    cfg.validate().map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

/// Reads a checkpoint and the run configuration stored in its header.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = Checkpoint::read(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let cfg = RunConfig::parse(&ckpt.header)
        .map_err(|e| anyhow!("checkpoint {} has an invalid config header: {e}", path.display()))?;
    Ok((cfg, ckpt))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing json")?;
    text.push('\n');
    write_file(path, text)
}

/// Appends one JSON object per line; the first I/O error is kept and
/// surfaced after training stops.
struct NdjsonLog {
    out: BufWriter<fs::File>,
    error: Option<std::io::Error>,
}

impl NdjsonLog {
    fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(NdjsonLog { out: BufWriter::new(file), error: None })
    }

    fn push<T: Serialize>(&mut self, rec: &T) -> std::result::Result<(), TensorError> {
        let line = serde_json::to_string(rec).expect("log records serialize");
        if let Err(e) = writeln!(self.out, "{line}") {
            let msg = e.to_string();
            self.error = Some(e);
            return Err(TensorError::invalid("log", msg));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(anyhow!(e).context("writing training log").into());
        }
        self.out.flush().context("writing training log")?;
        Ok(())
    }
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
}

/// Runs the training the config asks for and writes `config.txt`,
/// `train_log.ndjson` and `checkpoint.ckpt` (plus periodic checkpoints) to `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    match cfg.task {
        Task::Diffusion => train_diffusion(cfg, out),
        Task::Frozenlake => frozenlake_train(cfg, None, out),
    }
}

fn save_checkpoint<M: sparse_recursion::nn::Module + Clone>(cfg: &RunConfig, model: &M, path: &Path) -> Result<()> {
    Checkpoint::from_module(cfg.to_string(), model)
        .write(path)
        .with_context(|| format!("cannot write checkpoint {}", path.display()))?;
    Ok(())
}

fn periodic_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("checkpoint_{step:06}.ckpt"))
}

fn train_diffusion(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    write_file(&out.join("config.txt"), cfg.to_string())?;
    let data = make_dataset(
        cfg.dataset,
        cfg.dataset_size,
        cfg.classes,
        cfg.channels,
        cfg.image_size,
        cfg.image_size,
        cfg.seed,
    )
    .context("building dataset")?;
    let schedule = DiffusionSchedule::linear(cfg.diffusion_steps).context("building schedule")?;
    let mut model = DitModel::init(&cfg.dit(), cfg.seed).context("initializing model")?;
    let mut log = NdjsonLog::create(&out.join("train_log.ndjson"))?;
    let mut ckpt_err = None;
    let records = diffusion::train(&mut model, &data, &schedule, &cfg.train(), &mut |rec, m| {
        log.push(rec)?;
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 && rec.step < cfg.steps {
            if let Err(e) = save_checkpoint(cfg, m, &periodic_path(out, rec.step)) {
                let msg = e.to_string();
                ckpt_err = Some(e);
                return Err(TensorError::invalid("checkpoint", msg));
            }
        }
        Ok(())
    });
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    log.finish()?;
    let records = records.context("training")?;
    let checkpoint = out.join("checkpoint.ckpt");
    save_checkpoint(cfg, &model, &checkpoint)?;
    Ok(TrainSummary { checkpoint, steps: records.len(), final_loss: records.last().map_or(f64::NAN, |r| r.loss) })
}

fn diffusion_model(path: &Path) -> Result<(RunConfig, DitModel)> {
    let (cfg, ckpt) = load_checkpoint(path)?;
    if cfg.task != Task::Diffusion {
        return Err(usage(format!("{} is not a diffusion checkpoint", path.display())));
    }
    let mut model = DitModel::init(&cfg.dit(), cfg.seed).context("rebuilding model")?;
    ckpt.load_into(&mut model).with_context(|| format!("checkpoint {} does not match its config", path.display()))?;
    Ok((cfg, model))
}

#[derive(Debug, Serialize)]
pub struct SampleManifest {
    pub checkpoint: String,
    pub class: usize,
    pub n: usize,
    pub seed: u64,
    pub latent_steps: usize,
    pub files: Vec<String>,
}

/// Draws `n` images of `class` and writes `sample_XXX.pgm` files (channels
/// stacked vertically) plus `manifest.json` to `out`.
pub fn cmd_sample(
    checkpoint: &Path,
    class: usize,
    n: usize,
    seed: u64,
    latent_steps: Option<usize>,
    out: &Path,
) -> Result<SampleManifest> {
    if n == 0 {
        return Err(usage("n must be >= 1"));
    }
    if latent_steps == Some(0) {
        return Err(usage("latent steps must be >= 1"));
    }
    let (cfg, model) = diffusion_model(checkpoint)?;
    if class >= cfg.classes {
        return Err(usage(format!("class {class} out of range: the model has {} classes", cfg.classes)));
    }
    let schedule = DiffusionSchedule::linear(cfg.diffusion_steps).context("building schedule")?;
    let opts = SampleOptions { latent_steps, ..SampleOptions::new(seed) };
    let samples = sample(&model, &schedule, &vec![class; n], &opts).context("sampling")?;
    create_dir(out)?;
    let side = cfg.image_size;
    let len = cfg.channels * side * side;
    let mut files = Vec::with_capacity(n);
    for (i, img) in samples.images.chunks(len).enumerate() {
        let name = format!("sample_{i:03}.pgm");
        write_file(&out.join(&name), pgm::encode(img, side, side * cfg.channels, -1.0, 1.0))?;
        files.push(name);
    }
    let manifest = SampleManifest {
        checkpoint: checkpoint.display().to_string(),
        class,
        n,
        seed,
        latent_steps: latent_steps.unwrap_or(cfg.latent_steps),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Runs the finite-difference suite, printing one line per op. Any breach is
/// a runtime error naming the failing ops.
pub fn cmd_gradcheck(seed: u64, corrupt: Option<&str>, w: &mut dyn Write) -> Result<Vec<OpReport>> {
    if let Some(op) = corrupt {
        if !SUITE.contains(&op) {
            return Err(usage(format!("unknown op {op:?}; expected one of {}", SUITE.join(", "))));
        }
    }
    let reports = gradient_suite(seed, corrupt).context("gradient suite")?;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(w, "{:<16} max_rel_err={:.3e} {verdict}", r.op, r.max_rel_err).context("writing report")?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if !failed.is_empty() {
        return Err(anyhow!("gradient check failed for: {}", failed.join(", ")).into());
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyzeMode {
    Trajectories,
    Routing,
}

/// Samples `n` images (classes cycling) with tracing and exports either the
/// per-image PCA trajectories (CSV) or the routing statistics (JSON).
pub fn cmd_analyze(
    checkpoint: &Path,
    mode: AnalyzeMode,
    out: &Path,
    n: usize,
    seed: u64,
    buckets: usize,
) -> Result<usize> {
    if n == 0 || buckets == 0 {
        return Err(usage("n and buckets must be >= 1"));
    }
    let (cfg, model) = diffusion_model(checkpoint)?;
    let schedule = DiffusionSchedule::linear(cfg.diffusion_steps).context("building schedule")?;
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    let opts = SampleOptions { trace: true, ..SampleOptions::new(seed) };
    let samples = sample(&model, &schedule, &labels, &opts).context("sampling")?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let count = match mode {
        AnalyzeMode::Trajectories => export_trajectories(&samples.traces, out)
            .with_context(|| format!("exporting trajectories to {}", out.display()))?,
        AnalyzeMode::Routing => export_routing_stats(&samples.traces, buckets, cfg.diffusion_steps, out)
            .with_context(|| format!("exporting routing stats to {}", out.display()))?
            .entries
            .len(),
    };
    Ok(count)
}

/// Distinct maps from the config, split into training and held-out sets.
pub fn lake_maps(cfg: &RunConfig) -> Result<(Vec<LakeMap>, Vec<LakeMap>)> {
    let maps =
        generate_maps(cfg.grid, cfg.maps, cfg.hole_density, cfg.max_holes, cfg.seed).context("generating maps")?;
    Ok(split_maps(&maps, cfg.holdout_fraction, cfg.seed).context("splitting maps")?)
}

fn write_maps(dir: &Path, maps: &[LakeMap]) -> Result<()> {
    create_dir(dir)?;
    for (i, m) in maps.iter().enumerate() {
        write_file(&dir.join(format!("map_{i:03}.txt")), m.to_string())?;
    }
    Ok(())
}

/// Reads every `*.txt` map in `dir`, in file-name order.
pub fn read_maps(dir: &Path) -> Result<Vec<LakeMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read map directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(anyhow!("no .txt maps in {}", dir.display()).into());
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(LakeMap::parse(&text).with_context(|| format!("invalid map {}", p.display()))?)
        })
        .collect()
}

/// Writes `maps/train/` and `maps/holdout/` under `out`.
pub fn frozenlake_gen(cfg: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    let (train, held) = lake_maps(cfg)?;
    write_maps(&out.join("maps").join("train"), &train)?;
    write_maps(&out.join("maps").join("holdout"), &held)?;
    Ok((train.len(), held.len()))
}

fn step_cap(cfg: &RunConfig) -> usize {
    4 * cfg.grid * cfg.grid
}

fn lake_rollouts(cfg: &RunConfig, maps: &[LakeMap], stream: u64) -> Result<Vec<Rollout>> {
    Ok(make_rollouts(maps, cfg.rollouts_per_map, cfg.epsilon, step_cap(cfg), cfg.cell_px, cfg.seed ^ (stream << 32))
        .context("building rollouts")?)
}

/// Trains the planner on the maps in `maps_dir` (or freshly generated ones,
/// which are then written under `out/maps`).
pub fn frozenlake_train(cfg: &RunConfig, maps_dir: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    write_file(&out.join("config.txt"), cfg.to_string())?;
    let train_maps = match maps_dir {
        Some(dir) => read_maps(dir)?,
        None => {
            let (train, held) = lake_maps(cfg)?;
            write_maps(&out.join("maps").join("train"), &train)?;
            write_maps(&out.join("maps").join("holdout"), &held)?;
            train
        }
    };
    if let Some(m) = train_maps.iter().find(|m| m.size != cfg.grid) {
        return Err(usage(format!("map of size {} does not match grid = {}", m.size, cfg.grid)));
    }
    let rollouts = lake_rollouts(cfg, &train_maps, 1)?;
    let mut model = LakeModel::init(&cfg.lake(), cfg.seed).context("initializing model")?;
    let mut log = NdjsonLog::create(&out.join("train_log.ndjson"))?;
    let mut ckpt_err = None;
    let records = train_planner(&mut model, &rollouts, &cfg.lake_train(), &mut |rec, m| {
        log.push(rec)?;
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 && rec.step < cfg.steps {
            if let Err(e) = save_checkpoint(cfg, m, &periodic_path(out, rec.step)) {
                let msg = e.to_string();
                ckpt_err = Some(e);
                return Err(TensorError::invalid("checkpoint", msg));
            }
        }
        Ok(())
    });
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    log.finish()?;
    let records = records.context("training")?;
    let checkpoint = out.join("checkpoint.ckpt");
    save_checkpoint(cfg, &model, &checkpoint)?;
    let final_loss = records.last().map_or(f64::NAN, |r| r.gate_loss + r.frame_loss);
    Ok(TrainSummary { checkpoint, steps: records.len(), final_loss })
}

#[derive(Debug, Serialize)]
pub struct PlanManifestEntry {
    pub map: String,
    pub actions: Vec<String>,
    pub outcome: Outcome,
    pub frames: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct LakeEval {
    pub gate: GateEval,
    pub plans: PlanReport,
}

/// Evaluates the gate on held-out rollouts and plans every held-out map,
/// writing `eval.json` and decoded frames with `plans/manifest.json`.
pub fn frozenlake_eval(checkpoint: &Path, maps_dir: Option<&Path>, out: &Path) -> Result<LakeEval> {
    let (cfg, ckpt) = load_checkpoint(checkpoint)?;
    if cfg.task != Task::Frozenlake {
        return Err(usage(format!("{} is not a frozenlake checkpoint", checkpoint.display())));
    }
    let mut model = LakeModel::init(&cfg.lake(), cfg.seed).context("rebuilding model")?;
    ckpt.load_into(&mut model)
        .with_context(|| format!("checkpoint {} does not match its config", checkpoint.display()))?;
    let maps = match maps_dir {
        Some(dir) => read_maps(dir)?,
        None => lake_maps(&cfg)?.1,
    };
    if let Some(m) = maps.iter().find(|m| m.size != cfg.grid) {
        return Err(usage(format!("map of size {} does not match grid = {}", m.size, cfg.grid)));
    }
    let gate = evaluate_gate(&model, &lake_rollouts(&cfg, &maps, 2)?).context("evaluating gate")?;
    let (plans, decoded) = evaluate_plans(&model, &maps).context("planning")?;
    let plan_dir = out.join("plans");
    create_dir(&plan_dir)?;
    let side = cfg.grid * cfg.cell_px;
    let mut manifest = Vec::with_capacity(maps.len());
    for (i, (m, p)) in maps.iter().zip(&decoded).enumerate() {
        let mut frames = Vec::with_capacity(p.frames.len());
        for (j, f) in p.frames.iter().enumerate() {
            let name = format!("map_{i:03}_frame_{j:03}.pgm");
            write_file(&plan_dir.join(&name), pgm::encode(f, side, side, -1.0, 1.0))?;
            frames.push(name);
        }
        manifest.push(PlanManifestEntry {
            map: m.to_string(),
            actions: p.actions.iter().map(|a| format!("{a:?}").to_lowercase()).collect(),
            outcome: p.outcome,
            frames,
        });
    }
    write_json(&plan_dir.join("manifest.json"), &manifest)?;
    let eval = LakeEval { gate, plans };
    write_json(&out.join("eval.json"), &eval)?;
    Ok(eval)
}
