//! `vitok` command line: dataset generation, training, evaluation, benchmarks
//! and the loss/regularizer ablation grids. Every command writes under
//! `--out` and stamps its outputs with the hash of the resolved config.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vitok::autoencoder::{self, load_reconstructor, Autoencoder, Reconstructor, Regularizer};
use vitok::flowgen::{generate_images, FlowState};
use vitok::imagedata::{generate_synthetic, load_image, save_image};
use vitok::losses::{ExtractorConfig, FrozenExtractor, LossWeights, PRESETS};
use vitok::metrics::{bench_latency, eval_reconstruction, AttentionMode, EvalReport, ExtractorSet};
use vitok::naflex::PackedImage;
use vitok::trainer::{train_autoencoder, train_flow, StepLog, TrainOutputs};
use vitok::{rng, Image32};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "vitok", version, about = "Native-resolution ViT tokenizer experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; missing keys take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output of the command.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Training seed (overrides the file and VTK_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory written by `gen-data`; synthesized from [data] when absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as PPM files plus a manifest.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the autoencoder.
    TrainAe {
        #[arg(long)]
        steps: Option<usize>,
        /// Named loss preset.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        regularizer: Option<String>,
    },
    /// Train the flow model on latents of a trained autoencoder.
    TrainFlow {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruct the dataset and report quality.
    Reconstruct {
        #[arg(long)]
        ae: PathBuf,
        /// Sliding-window radius in tokens (full attention when absent).
        #[arg(long)]
        window_radius: Option<usize>,
    },
    /// Generate images with the flow model and the autoencoder decoder.
    Sample {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint (autoencoder or identity stub).
    Eval {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        window_radius: Option<usize>,
        #[arg(long, value_parser = ["json", "csv", "both"], default_value = "both")]
        format: String,
    },
    /// Reconstruction latency per resolution and attention mode.
    Bench {
        /// Checkpoint to time; a freshly initialized [model] when absent.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "full,swa")]
        attention: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long)]
        window_radius: Option<usize>,
    },
    /// Train and evaluate one autoencoder per loss preset.
    AblateLoss {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and evaluate one autoencoder per latent regularizer.
    AblateReg {
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Parses `argv` (including the program name), runs the command and maps
/// the outcome to an exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    data: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<V: Serialize>(&self, name: &str, value: &V) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    fn dataset(&self) -> Result<Vec<(Image32, usize)>> {
        match &self.data {
            Some(dir) => load_dataset(dir),
            None => Ok(generate_synthetic(&self.cfg.data)?),
        }
    }

    fn eval_images(&self) -> Result<Vec<Image32>> {
        Ok(self.dataset()?.into_iter().take(self.cfg.eval.max_images).map(|(img, _)| img).collect())
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.common.seed {
        cfg.train.seed = s;
    }
    apply_overrides(&mut cfg, &cli.command)?;
    cfg.validate()?;
    let hash = cfg.hash()?;
    fs::create_dir_all(&cli.common.out).with_context(|| format!("creating {}", cli.common.out.display()))?;
    let ctx = Ctx {
        cfg,
        hash,
        out: cli.common.out.clone(),
        data: cli.common.data.clone(),
    };
    fs::write(ctx.path("config.toml"), format!("# config_hash = \"{}\"\n{}", ctx.hash, ctx.cfg.to_toml()?))?;
    log::info!("config hash {}", ctx.hash);
    match cli.command {
        Command::GenData { .. } => gen_data(&ctx),
        Command::TrainAe { .. } => train_ae(&ctx).map(|_| ()),
        Command::TrainFlow { ae, .. } => train_flow_cmd(&ctx, &ae),
        Command::Reconstruct { ae, .. } => reconstruct(&ctx, &ae),
        Command::Sample { ae, flow, count, .. } => sample(&ctx, &ae, &flow, count),
        Command::Eval { ae, format, .. } => {
            let report = evaluate(&ctx, load_reconstructor::<f32>(&ae)?.as_ref())?;
            write_outputs(&ctx, &report, "report", &format)
        }
        Command::Bench { ae, attention, .. } => bench(&ctx, ae.as_deref(), &attention),
        Command::AblateLoss { .. } => ablate_loss(&ctx),
        Command::AblateReg { .. } => ablate_reg(&ctx),
    }
}

/// Flags win over file values.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData { count } => {
            if let Some(c) = count {
                cfg.data.count = *c;
            }
        }
        Command::TrainAe { steps, preset, regularizer } => {
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
            }
            if let Some(p) = preset {
                let w = LossWeights::preset(p)?;
                cfg.loss.w_char = w.w_char;
                cfg.loss.w_ssim = w.w_ssim;
                cfg.loss.w_perc = w.w_perc;
            }
            if let Some(r) = regularizer {
                let r = Regularizer::parse(r)?;
                cfg.model.regularizer = r;
                cfg.model.reg_param = r.default_param();
            }
        }
        Command::TrainFlow { steps, .. } => {
            if let Some(s) = steps {
                cfg.flow.steps = *s;
            }
        }
        Command::Reconstruct { window_radius, .. } | Command::Eval { window_radius, .. } => {
            if window_radius.is_some() {
                cfg.eval.window = *window_radius;
            }
        }
        Command::Sample { cfg_scale, steps, .. } => {
            if let Some(s) = cfg_scale {
                cfg.flow.sample.cfg_scale = *s;
            }
            if let Some(s) = steps {
                cfg.flow.sample.steps = *s;
            }
        }
        Command::Bench { resolutions, window_radius, .. } => {
            if let Some(r) = resolutions {
                cfg.eval.resolutions = r.clone();
            }
            if let Some(r) = window_radius {
                cfg.eval.swa_radius = *r;
            }
        }
        Command::AblateLoss { steps } | Command::AblateReg { steps } => {
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    images: Vec<ManifestEntry>,
}

/// Reads a directory written by `gen-data`.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Image32, usize)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    manifest
        .images
        .iter()
        .map(|e| Ok((load_image::<f32>(&dir.join(&e.file)).with_context(|| format!("loading {}", e.file))?, e.label)))
        .collect()
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.path("data");
    fs::create_dir_all(&dir)?;
    let data = generate_synthetic::<f32>(&ctx.cfg.data)?;
    let mut images = Vec::with_capacity(data.len());
    for (i, (img, label)) in data.iter().enumerate() {
        let file = format!("img_{i:05}.ppm");
        save_image(img, &dir.join(&file))?;
        images.push(ManifestEntry { file, label: *label });
    }
    let manifest = Manifest {
        config_hash: ctx.hash.clone(),
        images,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("wrote {} images to {}", data.len(), dir.display());
    Ok(())
}

fn loss_extractor(ctx: &Ctx, weights: &LossWeights) -> Result<Option<FrozenExtractor<f32>>> {
    if weights.w_perc == 0.0 {
        return Ok(None);
    }
    Ok(Some(FrozenExtractor::new(ExtractorConfig::desk(ctx.cfg.eval.extractor_seed))?))
}

/// Re-saves a checkpoint with the config hash recorded in its header.
fn stamp_checkpoint(ck: &mut vitok::checkpoint::Checkpoint, hash: &str) {
    ck.config["config_hash"] = json!(hash);
}

fn train_ae_in(ctx: &Ctx, dir: &Path, model: &vitok::autoencoder::ModelConfig, weights: &LossWeights) -> Result<(Autoencoder<f32>, Vec<StepLog>)> {
    fs::create_dir_all(dir)?;
    let images: Vec<Image32> = ctx.dataset()?.into_iter().map(|(img, _)| img).collect();
    let mut ae = Autoencoder::<f32>::init(model.clone(), ctx.cfg.train.seed)?;
    let extractor = loss_extractor(ctx, weights)?;
    let mut log = fs::File::create(dir.join("train_ae.jsonl"))?;
    let logs = {
        let mut outputs = TrainOutputs {
            log: Some(&mut log),
            checkpoint_dir: Some(dir),
        };
        train_autoencoder(&mut ae, &images, &ctx.cfg.train, weights, extractor.as_ref(), &mut outputs)?
    };
    log.flush()?;
    let mut ck = ae.to_checkpoint();
    stamp_checkpoint(&mut ck, &ctx.hash);
    ck.save(&dir.join("ae_final.vtkf"))?;
    Ok((ae, logs))
}

fn train_ae(ctx: &Ctx) -> Result<Autoencoder<f32>> {
    let (ae, logs) = train_ae_in(ctx, &ctx.out, &ctx.cfg.model, &ctx.cfg.loss)?;
    if let Some(last) = logs.last() {
        log::info!("final loss {:.6} after {} steps", last.loss_total, last.step);
    }
    Ok(ae)
}

fn train_flow_cmd(ctx: &Ctx, ae_path: &Path) -> Result<()> {
    let ae = Autoencoder::<f32>::load(ae_path)?;
    let mut fcfg = ctx.cfg.flow.model.clone();
    fcfg.latent_channels = ae.cfg.latent_channels;
    fcfg.class_count = ctx.cfg.data.class_count;
    let data = ctx.dataset()?;
    let max_label = data.iter().map(|&(_, l)| l).max().unwrap_or(0);
    fcfg.class_count = fcfg.class_count.max(max_label + 1);
    let mut latents = Vec::with_capacity(data.len());
    for (img, label) in &data {
        let packed = PackedImage::pack(img, ae.cfg.patch, ctx.cfg.eval.budget)?;
        let z = autoencoder::encode(&packed, &ae.params, &ae.cfg)?;
        let (z, _) = autoencoder::regularize_latent::<f32, rng::StreamRng>(&z, &ae.cfg, None)?;
        latents.push((z, *label));
    }
    let mut tcfg = ctx.cfg.train.clone();
    tcfg.total_steps = ctx.cfg.flow.steps;
    tcfg.peak_lr = ctx.cfg.flow.peak_lr;
    tcfg.batch_size = ctx.cfg.flow.batch_size;
    let mut state = FlowState::<f32>::init(fcfg, ctx.cfg.train.seed ^ FLOW_SEED_SALT)?;
    let mut log = fs::File::create(ctx.path("train_flow.jsonl"))?;
    {
        let mut outputs = TrainOutputs {
            log: Some(&mut log),
            checkpoint_dir: Some(&ctx.out),
        };
        train_flow(&mut state, &latents, &tcfg, &mut outputs)?;
    }
    let mut ck = state.to_checkpoint();
    stamp_checkpoint(&mut ck, &ctx.hash);
    ck.save(&ctx.path("flow_final.vtkf"))?;
    Ok(())
}

/// Keeps flow initialization independent of autoencoder initialization.
const FLOW_SEED_SALT: u64 = 0xF10E;

fn evaluate(ctx: &Ctx, model: &dyn Reconstructor<f32>) -> Result<EvalReport> {
    let images = ctx.eval_images()?;
    let extractors = ExtractorSet::standard(ctx.cfg.eval.extractor_seed)?;
    Ok(eval_reconstruction(model, &images, &ctx.cfg.eval.options(), &extractors, &ctx.hash)?)
}

fn reconstruct(ctx: &Ctx, ae_path: &Path) -> Result<()> {
    let model = load_reconstructor::<f32>(ae_path)?;
    let dir = ctx.path("recon");
    fs::create_dir_all(&dir)?;
    let opts = ctx.cfg.eval.options();
    for (i, img) in ctx.eval_images()?.iter().enumerate() {
        let img = match opts.center_crop {
            Some(s) => img.center_crop(s)?,
            None => img.clone(),
        };
        let packed = PackedImage::pack(&img, model.patch_size(), opts.budget)?;
        let (canvas, _) = model.reconstruct(&packed, opts.window)?;
        let out = autoencoder::canvas_to_image(&canvas)?.crop(0, 0, packed.grid.resized_h, packed.grid.resized_w)?;
        save_image(&out, &dir.join(format!("recon_{i:05}.ppm")))?;
    }
    let report = evaluate(ctx, model.as_ref())?;
    write_outputs(ctx, &report, "report", "both")
}

fn sample(ctx: &Ctx, ae_path: &Path, flow_path: &Path, count: usize) -> Result<()> {
    anyhow::ensure!(count >= 1, "--count must be at least 1");
    let ae = Autoencoder::<f32>::load(ae_path)?;
    let state = FlowState::<f32>::load(flow_path)?;
    let labels: Vec<usize> = (0..count).map(|i| i % state.cfg.class_count).collect();
    let (gh, gw) = ctx.cfg.flow.sample_grid;
    let images = generate_images(&ae, &state, &labels, gh, gw, &ctx.cfg.flow.sample, ctx.cfg.train.seed)?;
    let dir = ctx.path("samples");
    fs::create_dir_all(&dir)?;
    for (i, img) in images.iter().enumerate() {
        save_image(img, &dir.join(format!("sample_{i:05}_c{}.ppm", labels[i])))?;
    }
    let mut frechet = BTreeMap::new();
    if images.len() >= 2 {
        let reference = ctx.eval_images()?;
        if reference.len() >= 2 {
            frechet = ExtractorSet::standard(ctx.cfg.eval.extractor_seed)?.frechet(&reference, &images)?;
        }
    }
    ctx.write_json(
        "sample_report.json",
        &json!({"config_hash": ctx.hash, "count": images.len(), "labels": labels, "frechet": frechet}),
    )
}

fn parse_modes(names: &[String], radius: usize) -> Result<Vec<AttentionMode>> {
    names
        .iter()
        .map(|n| match n.trim() {
            "full" => Ok(AttentionMode::Full),
            "swa" => Ok(AttentionMode::Swa(radius)),
            other => bail!("unknown attention mode {other:?} (expected full or swa)"),
        })
        .collect()
}

fn bench(ctx: &Ctx, ae: Option<&Path>, attention: &[String]) -> Result<()> {
    let modes = parse_modes(attention, ctx.cfg.eval.swa_radius)?;
    let model: Box<dyn Reconstructor<f32>> = match ae {
        Some(p) => load_reconstructor(p)?,
        None => Box::new(Autoencoder::<f32>::init(ctx.cfg.model.clone(), ctx.cfg.train.seed)?),
    };
    let rows = bench_latency(model.as_ref(), &ctx.cfg.eval.resolutions, &modes, &ctx.cfg.eval.bench_options())?;
    let mut report = EvalReport::empty(&ctx.hash);
    report.latency_ms = rows;
    write_outputs(ctx, &report, "bench", "both")
}

/// One line of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub latent_std: f64,
    pub final_loss: f64,
    pub frechet: BTreeMap<String, f64>,
    pub config_hash: String,
}

fn ablation_row(ctx: &Ctx, name: &str, model: &vitok::autoencoder::ModelConfig, weights: &LossWeights) -> Result<AblationRow> {
    let dir = ctx.path(&name.replace(['+', '/'], "_"));
    let (ae, logs) = train_ae_in(ctx, &dir, model, weights)?;
    let report = evaluate(ctx, &ae)?;
    write_report(&report, &dir.join("report.json"), ReportFormat::Json)?;
    Ok(AblationRow {
        name: name.to_string(),
        psnr_db: report.psnr_db,
        ssim: report.ssim,
        latent_std: report.latent_std,
        final_loss: logs.last().map_or(f64::NAN, |l| l.loss_total),
        frechet: report.frechet,
        config_hash: ctx.hash.clone(),
    })
}

fn ablate_loss(ctx: &Ctx) -> Result<()> {
    let mut rows = Vec::new();
    for name in PRESETS {
        let preset = LossWeights::preset(name)?;
        let weights = LossWeights {
            w_char: preset.w_char,
            w_ssim: preset.w_ssim,
            w_perc: preset.w_perc,
            ..ctx.cfg.loss.clone()
        };
        log::info!("ablate-loss: {name}");
        rows.push(ablation_row(ctx, name, &ctx.cfg.model, &weights)?);
    }
    write_table(ctx, "ablate_loss", &rows)
}

fn ablate_reg(ctx: &Ctx) -> Result<()> {
    let mut rows = Vec::new();
    for reg in Regularizer::ALL {
        let mut model = ctx.cfg.model.clone();
        model.regularizer = reg;
        model.reg_param = reg.default_param();
        log::info!("ablate-reg: {}", reg.name());
        rows.push(ablation_row(ctx, reg.name(), &model, &ctx.cfg.loss)?);
    }
    write_table(ctx, "ablate_reg", &rows)
}

fn write_table(ctx: &Ctx, stem: &str, rows: &[AblationRow]) -> Result<()> {
    ctx.write_json(&format!("{stem}.json"), &rows)?;
    let keys: Vec<String> = rows.first().map(|r| r.frechet.keys().cloned().collect()).unwrap_or_default();
    let mut text = String::from("name,psnr_db,ssim,latent_std,final_loss,config_hash");
    for k in &keys {
        text.push_str(&format!(",frechet_{k}"));
    }
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{},{},{},{},{},{}", r.name, r.psnr_db, r.ssim, r.latent_std, r.final_loss, r.config_hash));
        for k in &keys {
            text.push_str(&format!(",{}", r.frechet.get(k).copied().unwrap_or(f64::NAN)));
        }
        text.push('\n');
    }
    fs::write(ctx.path(&format!("{stem}.csv")), text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Serializes `report`; identical reports give identical bytes.
pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()? + "\n",
        ReportFormat::Csv => report.to_csv()?,
    };
    fs::write(path, text).with_context(|| format!("writing report {}", path.display()))
}

fn write_outputs(ctx: &Ctx, report: &EvalReport, stem: &str, format: &str) -> Result<()> {
    if format != "csv" {
        write_report(report, &ctx.path(&format!("{stem}.json")), ReportFormat::Json)?;
    }
    if format != "json" {
        write_report(report, &ctx.path(&format!("{stem}.csv")), ReportFormat::Csv)?;
    }
    Ok(())
}
