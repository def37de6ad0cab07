//! Command-line entry points: synth, degrade, train, infer, eval and
//! inspect-kernel.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve, PhaseSelection, RunConfig};
use crate::degradation::{degrade_clip, draw_sigma, BlurKernel, DegradationSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, side_by_side, EvalOptions, ModelRestorer, PredictionDir, Restorer};
use crate::io::{
    frame_name, read_clip, read_gt_clips, read_testset, write_clip, write_dataset, write_png,
    DatasetManifest,
};
use crate::kernel_estimation::{estimate_kernel, kernel_heatmap};
use crate::model::{restore_window, window_indices};
use crate::synthetic::{generate_clips, SceneTemplate};
use crate::training::{Checkpoint, CsvLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "bsvsr", version, about = "Blind video super-resolution toolkit")]
pub struct Cli {
    /// Config file with dotted keys; defaults to $BSVSR_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the small desk-scale defaults.
    #[arg(long, global = true)]
    pub toy: bool,
    /// Override one key, e.g. `--set model.channels=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic GT clips into `paths.dataset`.
    Synth(SynthArgs),
    /// Blur and downsample every GT clip of the dataset.
    Degrade(DegradeArgs),
    /// Train and write `paths.checkpoint`.
    Train(TrainArgs),
    /// Super-resolve every frame of the clip in `paths.input`.
    Infer(InferArgs),
    /// Score a checkpoint (or stored predictions) on the dataset.
    Eval(EvalArgs),
    /// Dump the kernel estimated for one LR frame.
    InspectKernel(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Fixed blur width for every clip.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["kernel", "full"])]
    pub phase: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score frames stored as `<dir>/<clip>/frame_NNNN.png` instead of
    /// running a checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn push<T: ToString>(out: &mut Vec<String>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn push_path(out: &mut Vec<String>, key: &str, value: &Option<PathBuf>) {
    if let Some(v) = value {
        // Quoted so TOML keeps it a string.
        out.push(format!("{key}={}", toml::Value::String(v.display().to_string())));
    }
}

impl Cli {
    /// `--set` overrides followed by the command's own flags.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        match &self.command {
            Command::Synth(a) => {
                push(&mut o, "synth.clips", &a.clips);
                push(&mut o, "synth.seed", &a.seed);
                push_path(&mut o, "paths.dataset", &a.dataset);
            }
            Command::Degrade(a) => {
                push(&mut o, "degrade.sigma_min", &a.sigma);
                push(&mut o, "degrade.sigma_max", &a.sigma);
                push(&mut o, "degrade.kernel_size", &a.kernel_size);
                push(&mut o, "degrade.scale", &a.scale);
                push_path(&mut o, "paths.dataset", &a.dataset);
            }
            Command::Train(a) => {
                push(&mut o, "job.phase", &a.phase);
                push(&mut o, "train.seed", &a.seed);
                push_path(&mut o, "paths.dataset", &a.dataset);
                push_path(&mut o, "paths.checkpoint", &a.checkpoint);
                push_path(&mut o, "paths.output", &a.output);
                if a.resume {
                    o.push("job.resume=true".into());
                }
            }
            Command::Infer(a) => {
                push_path(&mut o, "paths.checkpoint", &a.checkpoint);
                push_path(&mut o, "paths.input", &a.input);
                push_path(&mut o, "paths.output", &a.output);
            }
            Command::Eval(a) => {
                push_path(&mut o, "paths.checkpoint", &a.checkpoint);
                push_path(&mut o, "paths.dataset", &a.dataset);
                push_path(&mut o, "paths.output", &a.output);
                push(&mut o, "job.crop", &a.crop);
            }
            Command::InspectKernel(a) => {
                push_path(&mut o, "paths.checkpoint", &a.checkpoint);
                push_path(&mut o, "paths.input", &a.input);
                push(&mut o, "job.frame", &a.frame);
                push_path(&mut o, "paths.output", &a.output);
            }
        }
        o
    }

    pub fn config(&self) -> Result<RunConfig> {
        resolve(self.toy, self.config.as_deref(), &self.overrides())
    }
}

/// Execute a parsed command line and return the effective config.
pub fn run(cli: &Cli) -> Result<RunConfig> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg)?,
        Command::Degrade(_) => cmd_degrade(&cfg)?,
        Command::Train(_) => cmd_train(&cfg)?,
        Command::Infer(_) => cmd_infer(&cfg)?,
        Command::Eval(a) => cmd_eval(&cfg, a.predictions.as_deref())?,
        Command::InspectKernel(_) => cmd_inspect_kernel(&cfg)?,
    }
    Ok(cfg)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    let template = SceneTemplate {
        height: s.height,
        width: s.width,
        frames: s.frames,
        ..SceneTemplate::default()
    };
    let clips = generate_clips(s.clips, &template, s.seed)?;
    write_dataset(&cfg.paths.dataset, &clips, Some(s.seed))?;
    cfg.write_effective(&cfg.paths.dataset)?;
    println!("wrote {} clips to {}", clips.len(), cfg.paths.dataset.display());
    Ok(())
}

pub fn cmd_degrade(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.dataset;
    let d = &cfg.degrade;
    let mut manifest = DatasetManifest::load(dir)?;
    let gt = read_gt_clips(dir)?;
    for (i, (entry, clip)) in manifest.clips.iter_mut().zip(&gt).enumerate() {
        let sigma = draw_sigma(d.sigma_min, d.sigma_max, d.seed, i as u64);
        let spec = DegradationSpec::new(BlurKernel::gaussian(d.kernel_size, sigma)?, d.scale)?;
        let lr = degrade_clip(clip, &spec)?;
        let rel = format!("lr/{}", entry.name);
        write_clip(&dir.join(&rel), &lr)?;
        entry.lr = Some(rel);
        entry.sigma = Some(sigma);
        entry.kernel_size = Some(d.kernel_size);
    }
    manifest.scale = Some(d.scale);
    manifest.save(dir)?;
    cfg.write_effective(dir)?;
    println!("degraded {} clips in {}", gt.len(), dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_effective(out)?;
    let data = read_gt_clips(&cfg.paths.dataset)?;
    let ckpt_path = &cfg.paths.checkpoint;
    let state = if cfg.job.resume && ckpt_path.exists() {
        let mut ck = Checkpoint::<f32>::load_for(ckpt_path, cfg.model())?;
        ck.config = cfg.train.clone();
        ck
    } else {
        Checkpoint::<f32>::fresh(cfg.train.clone())?
    };
    let log_path = out.join("train_log.csv");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = CsvLog::new(log_file);
    let mut trainer = Trainer::new(state, &data)?;
    let save = |t: &Trainer<'_, f32>| -> Result<()> {
        if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        t.state.save(ckpt_path)
    };
    while (trainer.state.kernel_steps as usize) < cfg.train.phase1_steps {
        log.write(&trainer.kernel_step()?)?;
    }
    save(&trainer)?;
    if cfg.job.phase == PhaseSelection::Full {
        let per_epoch = cfg.train.steps_per_epoch as u64;
        while (trainer.state.joint_steps as usize) < cfg.train.phase2_steps() {
            log.write(&trainer.joint_step()?)?;
            if trainer.state.joint_steps % per_epoch == 0 {
                save(&trainer)?;
            }
        }
        save(&trainer)?;
    }
    let s = &trainer.state;
    println!(
        "trained {} kernel and {} joint steps; checkpoint {}",
        s.kernel_steps,
        s.joint_steps,
        ckpt_path.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(crate::model::Bsvsr, Checkpoint<f32>)> {
    let ck = Checkpoint::<f32>::load(&cfg.paths.checkpoint)?;
    let model = ck.model()?;
    Ok((model, ck))
}

fn clip_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into())
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let (model, ck) = load_model(cfg)?;
    let clip = read_clip(&cfg.paths.input)?;
    let provider = ck.config.flow.provider();
    let dir = cfg.paths.output.join(clip_name(&cfg.paths.input));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stats_path = dir.join("attention.csv");
    let mut stats = csv::Writer::from_path(&stats_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", stats_path.display())))?;
    let csv_err = |e: csv::Error| Error::Parse(format!("attention csv: {e}"));
    stats
        .write_record(["frame", "prev", "centre", "next", "sigma_fit"])
        .map_err(csv_err)?;
    for t in 0..clip.len() {
        let idx = window_indices(t, clip.len(), model.config.frames);
        let win: Vec<_> = idx.iter().map(|&i| &clip.frames()[i]).collect();
        let r = restore_window(&model, &ck.params, &win, provider.as_ref())?;
        write_png(&dir.join(frame_name(t)), &r.sr)?;
        let mut row = vec![t.to_string()];
        row.extend(r.attention_mass.iter().map(|m| format!("{m:.6}")));
        row.push(format!("{:.4}", r.kernel.fit_gaussian_sigma()));
        stats.write_record(&row).map_err(csv_err)?;
    }
    stats.flush().map_err(|e| Error::io(&stats_path, e))?;
    cfg.write_effective(&dir)?;
    println!("wrote {} frames to {}", clip.len(), dir.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, predictions: Option<&Path>) -> Result<()> {
    let set = read_testset(&cfg.paths.dataset)?;
    let out = &cfg.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let loaded;
    let model_restorer;
    let pred_restorer;
    let (restorer, frames): (&dyn Restorer, usize) = match predictions {
        Some(dir) => {
            pred_restorer = PredictionDir { dir: dir.to_path_buf() };
            (&pred_restorer, cfg.model().frames)
        }
        None => {
            loaded = load_model(cfg)?;
            if loaded.0.config.scale != set.scale {
                return Err(Error::invalid(format!(
                    "checkpoint scale {} does not match dataset scale {}",
                    loaded.0.config.scale, set.scale
                )));
            }
            model_restorer = ModelRestorer {
                name: "bsvsr".into(),
                model: &loaded.0,
                params: &loaded.1.params,
                provider: loaded.1.config.flow.provider(),
            };
            (&model_restorer, loaded.0.config.frames)
        }
    };
    let options = EvalOptions {
        crop: cfg.job.crop,
        frames,
    };
    let report = evaluate(&[restorer], &set, &options)?;
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    let text = report.to_text();
    let txt_path = out.join("report.txt");
    fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    if cfg.job.side_by_side {
        let dir = out.join("side_by_side");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let baseline = crate::evaluation::BicubicBaseline { scale: set.scale };
        for c in &set.clips {
            let t = c.lr.len() / 2;
            let idx = window_indices(t, c.lr.len(), frames);
            let win: Vec<_> = idx.iter().map(|&i| &c.lr.frames()[i]).collect();
            let bic = baseline.restore(&c.name, t, &win)?;
            let sr = restorer.restore(&c.name, t, &win)?;
            let panel = side_by_side(&[&bic, &sr, &c.gt.frames()[t]])?;
            write_png(&dir.join(format!("{}.png", c.name)), &panel)?;
        }
    }
    cfg.write_effective(out)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_inspect_kernel(cfg: &RunConfig) -> Result<()> {
    let (model, ck) = load_model(cfg)?;
    let clip = read_clip(&cfg.paths.input)?;
    let frame = clip.frames().get(cfg.job.frame).ok_or_else(|| {
        Error::config(
            "job.frame",
            format!("clip has {} frames, asked for {}", clip.len(), cfg.job.frame),
        )
    })?;
    let kernel = estimate_kernel(&model.estimator, &ck.params, frame)?;
    let out = &cfg.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sigma = kernel.fit_gaussian_sigma();
    let txt = out.join("kernel.txt");
    fs::write(&txt, kernel.to_text()).map_err(|e| Error::io(&txt, e))?;
    write_png(&out.join("kernel.png"), &kernel_heatmap(&kernel, cfg.job.cell))?;
    cfg.write_effective(out)?;
    println!("fitted sigma {sigma:.4}; kernel written to {}", txt.display());
    Ok(())
}

/// Map an error to the process exit code: 2 for usage and configuration
/// problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}
