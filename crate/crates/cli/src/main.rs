use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forge_core::critic::{parse_grid, realism_sweep, write_sweep_csv, write_sweep_plot, RealismCritic};
use forge_core::edit_ops::{EditOp, EditPermutation, EditRecipe};
use forge_core::estimator::{export_param_distribution, ParamEstimator};
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::objective::ObjectiveMode;
use forge_core::pipeline::{default_offsets, edit_region, optimality_heatmap, replay, EditPlan, Heatmap, Models, Strategy};
use forge_core::saliency::{load_backend, Direction};
use forge_core::sample_generator::Corpus;
use forge_core::synth::write_synthetic_corpus;
use forge_core::ForgeError;
use forge_service::error::{Result, ServiceError};
use forge_service::jobs::{run_job, JobKind, JobSink, JobSpec};
use forge_service::session::{create_session, step_session, undo_session};
use forge_service::store::Store;
use forge_service::ForgeConfig;
use serde::Serialize;
use serde_json::{json, Value};
use uuid::Uuid;

#[derive(Parser)]
#[command(name = "forge", version, about = "Saliency-guided region editing with a realism critic")]
struct Cli {
    /// TOML or JSON config with [models], [saliency], [objective] and [server].
    #[arg(long, global = true, env = "FORGE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpora for experiments without real photos.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Realism training data.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Realism critic training, scoring and sweeps.
    Critic {
        #[command(subcommand)]
        cmd: CriticCmd,
    },
    /// Parameter estimator training and inference.
    Estimator {
        #[command(subcommand)]
        cmd: EstimatorCmd,
    },
    /// Predicts a saliency map.
    Saliency {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Where to write the map as grayscale PNG.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimates edit parameters with the configured models.
    Estimate {
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long, value_parser = parse_direction)]
        direction: Direction,
        #[arg(long)]
        perm: Option<String>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Edits one region and writes the image and its plan.
    Edit(EditArgs),
    /// Re-applies a plan to its source image.
    Replay {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Realism change around an edit's parameters.
    Heatmap {
        #[command(flatten)]
        edit: EditArgs,
        /// Two operators: rows then columns.
        #[arg(long, default_value = "exposure,saturation")]
        ops: String,
        /// Comma-separated offsets added to both parameters.
        #[arg(long)]
        offsets: Option<String>,
        /// Output prefix for `.json` and `.png`.
        #[arg(long)]
        heatmap_out: PathBuf,
    },
    /// Realism change of one operator over a grid of values.
    Sweep(SweepArgs),
    /// Runs the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        objective: ObjectiveArgs,
    },
    /// Editing sessions in the local store.
    Session {
        #[command(subcommand)]
        cmd: SessionCmd,
    },
    /// Training and dataset jobs.
    Job {
        #[command(subcommand)]
        cmd: JobCmd,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Gen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        count_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        shard_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CriticCmd {
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 0.2)]
        heldout_fraction: f64,
        /// Data sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
    },
    Score {
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum EstimatorCmd {
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        critic: PathBuf,
        #[arg(long, value_parser = parse_direction)]
        direction: Direction,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_items: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        heldout_fraction: f64,
        /// Synthetic mask seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        objective: ObjectiveArgs,
    },
    Infer {
        #[command(flatten)]
        region: RegionArgs,
        /// Comma-separated operator order.
        #[arg(long)]
        perm: Option<String>,
        #[arg(long)]
        model: PathBuf,
    },
    /// Histograms of estimated parameters over a corpus.
    ExportDist {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SessionCmd {
    New {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Step {
        id: Uuid,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        face: bool,
        #[arg(long, value_parser = parse_direction)]
        direction: Direction,
        #[arg(long, default_value = "random", value_parser = parse_strategy)]
        strategy: Strategy,
        /// Where to write the edited image.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        objective: ObjectiveArgs,
    },
    Undo {
        id: Uuid,
    },
    Show {
        id: Uuid,
        /// Writes the current image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Writes the active plan.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum JobCmd {
    /// Runs a job in the foreground.
    Run {
        #[arg(long, value_parser = parse_kind)]
        kind: JobKind,
        /// JSON job config.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lists jobs recorded by the service.
    List,
    Show {
        id: Uuid,
    },
}

#[derive(Args)]
struct RegionArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// The region contains a face.
    #[arg(long)]
    face: bool,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long, value_parser = parse_direction)]
    direction: Direction,
    #[arg(long, default_value = "random", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edited image path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plan path; defaults to the image path with a `.plan.json` extension.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    objective: ObjectiveArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_parser = parse_op)]
    op: EditOp,
    /// `lo:hi:n`, geometric for positive ranges, or a comma list.
    #[arg(long)]
    grid: String,
    /// Output prefix for `.csv` and `.png`.
    #[arg(long)]
    out: PathBuf,
}

/// Checkpoint overrides for the models named in the config.
#[derive(Args, Default)]
struct ModelArgs {
    #[arg(long)]
    critic: Option<PathBuf>,
    #[arg(long)]
    attenuate: Option<PathBuf>,
    #[arg(long)]
    amplify: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ObjectiveArgs {
    #[arg(long)]
    b_r: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    w_attenuate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    w_amplify: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ObjectiveMode>,
    #[arg(long)]
    critic_updates_per_step: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight initialization and shuffling seed.
    #[arg(long)]
    model_seed: Option<u64>,
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    s.parse().map_err(|e: ForgeError| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: ForgeError| e.to_string())
}

fn parse_op(s: &str) -> std::result::Result<EditOp, String> {
    s.parse().map_err(|e: ForgeError| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ObjectiveMode, String> {
    s.parse().map_err(|e: ForgeError| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<JobKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown job kind `{s}` (dataset_gen, critic_train, estimator_train)"))
}

impl TrainArgs {
    fn overrides(&self) -> Value {
        let mut v = json!({});
        let mut set = |k: &str, x: Option<Value>| {
            if let Some(x) = x {
                v[k] = x;
            }
        };
        set("epochs", self.epochs.map(|x| json!(x)));
        set("learning_rate", self.learning_rate.map(|x| json!(x)));
        set("resolution", self.resolution.map(|x| json!(x)));
        set("batch_size", self.batch_size.map(|x| json!(x)));
        set("seed", self.model_seed.map(|x| json!(x)));
        v
    }
}

impl ObjectiveArgs {
    fn apply(&self, config: &mut ForgeConfig) -> Result<()> {
        let o = &mut config.objective;
        if let Some(v) = self.b_r {
            o.b_r = v;
        }
        if let Some(v) = self.w_attenuate {
            o.w_attenuate = v;
        }
        if let Some(v) = self.w_amplify {
            o.w_amplify = v;
        }
        if let Some(v) = self.mode {
            o.mode = v;
        }
        if let Some(v) = self.critic_updates_per_step {
            o.critic_updates_per_step = v;
        }
        Ok(o.validate()?)
    }
}

impl ModelArgs {
    fn apply(&self, config: &mut ForgeConfig) {
        let m = &mut config.models;
        for (slot, flag) in [(&mut m.critic, &self.critic), (&mut m.attenuate, &self.attenuate), (&mut m.amplify, &self.amplify)] {
            if let Some(p) = flag {
                *slot = Some(absolute(p));
            }
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

struct Ctx {
    config: ForgeConfig,
}

impl Ctx {
    fn models(&self, models: &ModelArgs, objective: &ObjectiveArgs) -> Result<Models> {
        let mut config = self.config.clone();
        models.apply(&mut config);
        objective.apply(&mut config)?;
        Ok(config.load_models()?)
    }

    fn critic(&self, model: &Option<PathBuf>) -> Result<RealismCritic> {
        let path = match model {
            Some(p) => p.clone(),
            None => self
                .config
                .models
                .critic
                .as_ref()
                .map(|p| self.config.resolve(p))
                .ok_or_else(|| ForgeError::Config("pass --model or set [models].critic".into()))?,
        };
        Ok(RealismCritic::load(path)?)
    }

    fn store(&self) -> Result<Store> {
        Store::open(self.config.home())
    }
}

fn print(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(ForgeError::from)?);
    Ok(())
}

fn load_region(r: &RegionArgs) -> Result<(ImageGrid, RegionMask)> {
    let img = ImageGrid::load(&r.image)?;
    let mask = RegionMask::load(&r.mask, r.face)?;
    mask.ensure_matches(&img)?;
    Ok((img, mask))
}

fn parse_perm(perm: &Option<String>) -> Result<EditPermutation> {
    Ok(match perm {
        Some(s) => s.parse()?,
        None => EditPermutation::canonical(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(ForgeError::from)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value).map_err(ForgeError::from)?).map_err(ForgeError::from)?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct LogSink;

impl JobSink for LogSink {
    fn progress(&mut self, fraction: f64) {
        log::debug!("progress {:.1}%", 100.0 * fraction);
    }

    fn log(&mut self, line: String) {
        log::info!("{line}");
    }
}

fn run_spec(kind: JobKind, config: Value, out: Option<PathBuf>) -> Result<()> {
    let spec = JobSpec::parse(kind, &config)?;
    let out_dir = out.unwrap_or_else(|| spec.out_dir(PathBuf::from(format!("{kind:?}").to_lowercase())));
    let artifacts = run_job(&spec, &out_dir, &mut LogSink)?;
    print(&json!({ "artifacts": artifacts }))
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let (img, mask) = load_region(&a.region)?;
    let critic = ctx.critic(&a.model)?;
    let grid = parse_grid(&a.grid)?;
    let points = realism_sweep(&img, &mask, a.op, &grid, &critic)?;
    let (csv, png) = (with_suffix(&a.out, ".csv"), with_suffix(&a.out, ".png"));
    write_sweep_csv(&points, &csv)?;
    write_sweep_plot(&points, &png)?;
    print(&json!({ "points": points.len(), "csv": csv, "plot": png }))
}

fn edit(ctx: &Ctx, a: &EditArgs) -> Result<(ImageGrid, RegionMask, EditPlan, ImageGrid, Models)> {
    let (img, mask) = load_region(&a.region)?;
    let models = ctx.models(&a.models, &a.objective)?;
    let mut plan = EditPlan::new(&img, a.seed);
    let (step, edited) = edit_region(&img, &mask, a.direction, a.strategy, &models, plan.step_seed(0))?;
    plan.push(step, &mask, &edited);
    Ok((img, mask, plan, edited, models))
}

/// Diverging blue-white-red rendering of a heatmap, one block per cell.
fn heatmap_png(h: &Heatmap, path: &Path) -> Result<()> {
    const CELL: u32 = 32;
    let n = h.offsets.len() as u32;
    let scale = h.cells.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let img = image::RgbImage::from_fn(n * CELL, n * CELL, |x, y| {
        let (i, j) = ((y / CELL) as usize, (x / CELL) as usize);
        match h.cells[i][j] {
            None => image::Rgb([128, 128, 128]),
            Some(v) => {
                let t = (v / scale).clamp(-1.0, 1.0);
                let fade = (255.0 * (1.0 - t.abs())).round() as u8;
                if t >= 0.0 {
                    image::Rgb([255, fade, fade])
                } else {
                    image::Rgb([fade, fade, 255])
                }
            }
        }
    });
    img.save(path).map_err(ForgeError::Image)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ForgeConfig::load(p)?,
        None => ForgeConfig::default(),
    };
    let ctx = Ctx { config };
    match cli.command {
        Command::Corpus { cmd: CorpusCmd::Synth { out, count, size, seed } } => {
            let corpus = write_synthetic_corpus(&out, count, size, seed)?;
            print(&json!({ "root": corpus.root, "images": corpus.images().len(), "entries": corpus.entries.len() }))
        }
        Command::Dataset { cmd: DatasetCmd::Gen { corpus, count_per_class, seed, shard_size, out } } => run_spec(
            JobKind::DatasetGen,
            json!({ "corpus": corpus, "count_per_class": count_per_class, "seed": seed, "shard_size": shard_size }),
            Some(out),
        ),
        Command::Critic { cmd } => match cmd {
            CriticCmd::Train { corpus, out, samples_per_class, heldout_fraction, seed, train } => run_spec(
                JobKind::CriticTrain,
                json!({
                    "corpus": corpus, "samples_per_class": samples_per_class,
                    "heldout_fraction": heldout_fraction, "seed": seed, "critic": train.overrides(),
                }),
                Some(out),
            ),
            CriticCmd::Score { region, model } => {
                let (img, mask) = load_region(&region)?;
                let r = ctx.critic(&model)?.score(&img, &mask)?;
                print(&json!({ "r": r.0 }))
            }
            CriticCmd::Sweep(a) => sweep(&ctx, &a),
        },
        Command::Estimator { cmd } => match cmd {
            EstimatorCmd::Train { corpus, critic, direction, out, max_items, heldout_fraction, seed, train, objective } => {
                let mut config = ctx.config.clone();
                objective.apply(&mut config)?;
                run_spec(
                    JobKind::EstimatorTrain,
                    json!({
                        "corpus": corpus, "critic": critic, "direction": direction, "max_items": max_items,
                        "heldout_fraction": heldout_fraction, "seed": seed, "estimator": train.overrides(),
                        "objective": config.objective, "saliency": config.saliency,
                    }),
                    Some(out),
                )
            }
            EstimatorCmd::Infer { region, perm, model } => {
                let (img, mask) = load_region(&region)?;
                let perm = parse_perm(&perm)?;
                let params = ParamEstimator::load(&model)?.estimate(&img, &mask, &perm)?;
                print(&EditRecipe { perm, params })
            }
            EstimatorCmd::ExportDist { corpus, model, bins, seed, out } => {
                let items = Corpus::open(&corpus)?.region_items(seed)?;
                let dist = export_param_distribution(&ParamEstimator::load(&model)?, &items, bins, seed)?;
                dist.write_csv(&out)?;
                print(&json!({ "samples": dist.samples, "csv": out }))
            }
        },
        Command::Saliency { image, mask, out } => {
            let img = ImageGrid::load(&image)?;
            let map = load_backend(&ctx.config.saliency)?.predict(&img)?;
            let masked = match &mask {
                Some(p) => {
                    let m = RegionMask::load(p, false)?;
                    m.ensure_matches(&img)?;
                    Some(map.masked_mean(&m))
                }
                None => None,
            };
            if let Some(out) = &out {
                map.save(out)?;
            }
            print(&json!({ "mean": map.mean(), "masked_mean": masked, "map": out }))
        }
        Command::Estimate { region, direction, perm, models } => {
            let (img, mask) = load_region(&region)?;
            let models = ctx.models(&models, &ObjectiveArgs::default())?;
            let perm = parse_perm(&perm)?;
            let params = models.estimator(direction)?.estimate(&img, &mask, &perm)?;
            print(&EditRecipe { perm, params })
        }
        Command::Edit(a) => {
            let (_, _, plan, edited, _) = edit(&ctx, &a)?;
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("edited.png"));
            edited.save(&out)?;
            let plan_path = a.plan.clone().unwrap_or_else(|| out.with_extension("plan.json"));
            write_json(&plan_path, &plan)?;
            let step = &plan.steps[0];
            print(&json!({
                "image": out, "plan": plan_path, "image_hash": plan.final_hash,
                "order": step.perm, "params": step.params, "s": step.s, "delta_r": step.delta_r, "loss": step.loss,
            }))
        }
        Command::Replay { plan, image, out } => {
            let text = fs::read_to_string(&plan).map_err(|e| ForgeError::Load { path: plan.clone(), reason: e.to_string() })?;
            let plan = EditPlan::from_json(&text)?;
            let img = replay(&plan, &ImageGrid::load(&image)?)?;
            img.save(&out)?;
            print(&json!({ "image": out, "image_hash": img.content_hash(), "steps": plan.steps.len() }))
        }
        Command::Heatmap { edit: a, ops, offsets, heatmap_out } => {
            let (img, mask, plan, edited, models) = edit(&ctx, &a)?;
            if let Some(out) = &a.out {
                edited.save(out)?;
            }
            let parsed: Vec<EditOp> = ops.split(',').map(|s| s.trim().parse()).collect::<forge_core::Result<_>>()?;
            let [row, col] = parsed[..] else {
                return Err(ForgeError::InvalidParameter(format!("--ops needs exactly two operators, got `{ops}`")).into());
            };
            let offsets = match &offsets {
                Some(s) => s
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| ForgeError::InvalidParameter(format!("offset `{v}`: {e}"))))
                    .collect::<forge_core::Result<Vec<_>>>()?,
                None => default_offsets(),
            };
            let h = optimality_heatmap(&img, &mask, &plan.steps[0], (row, col), &offsets, &models.critic)?;
            let (json_path, png_path) = (with_suffix(&heatmap_out, ".json"), with_suffix(&heatmap_out, ".png"));
            write_json(&json_path, &h)?;
            heatmap_png(&h, &png_path)?;
            print(&json!({
                "center": h.center(), "center_in_top_quartile": h.center_in_top_quartile(),
                "json": json_path, "plot": png_path,
            }))
        }
        Command::Sweep(a) => sweep(&ctx, &a),
        Command::Serve { bind, models, objective } => {
            let mut config = ctx.config.clone();
            models.apply(&mut config);
            objective.apply(&mut config)?;
            if let Some(b) = bind {
                config.server.bind = b;
            }
            let runtime = tokio::runtime::Runtime::new().map_err(ForgeError::from)?;
            runtime.block_on(forge_service::api::serve(config))
        }
        Command::Session { cmd } => {
            let store = ctx.store()?;
            match cmd {
                SessionCmd::New { image, seed } => {
                    let session = create_session(&store, &ImageGrid::load(&image)?, seed)?;
                    print(&session.view(&store)?)
                }
                SessionCmd::Step { id, mask, face, direction, strategy, out, models, objective } => {
                    let mask = RegionMask::load(&mask, face)?;
                    let models = ctx.models(&models, &objective)?;
                    let outcome = step_session(&store, id, &mask, direction, strategy, &models)?;
                    if let Some(out) = &out {
                        outcome.after.save(out)?;
                    }
                    print(&json!({
                        "s": outcome.step.s, "delta_r": outcome.step.delta_r,
                        "image_hash": outcome.after.content_hash(), "session": outcome.session.view(&store)?,
                    }))
                }
                SessionCmd::Undo { id } => print(&undo_session(&store, id)?.view(&store)?),
                SessionCmd::Show { id, image, plan } => {
                    let session = store.session(id)?;
                    let current = session.current_image(&store)?;
                    if let Some(p) = &image {
                        current.save(p)?;
                    }
                    if let Some(p) = &plan {
                        write_json(p, &session.active_plan(&current))?;
                    }
                    print(&session.view(&store)?)
                }
            }
        }
        Command::Job { cmd } => match cmd {
            JobCmd::Run { kind, spec, out } => {
                let text = fs::read_to_string(&spec).map_err(|e| ForgeError::Load { path: spec.clone(), reason: e.to_string() })?;
                let config: Value = serde_json::from_str(&text).map_err(ForgeError::from)?;
                run_spec(kind, config, out)
            }
            JobCmd::List => print(&ctx.store()?.jobs()),
            JobCmd::Show { id } => print(&ctx.store()?.job(id)?),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            match e {
                ServiceError::Core(ForgeError::Io(_) | ForgeError::Divergence(_)) | ServiceError::Internal(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
