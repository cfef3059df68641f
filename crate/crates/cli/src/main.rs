mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use portrait_core::avatar::{generate_dataset, load_sequence, Dataset};
use portrait_core::camera::{
    spin_trajectory, spiral_trajectory, static_trajectory, CameraPose, Intrinsics, SpinParams, SpiralParams,
    Trajectory, DEFAULT_FOV_DEG, WORLD_UP,
};
use portrait_core::eval::{evaluate_sequence, EvalReport};
use portrait_core::image_io;
use portrait_model::model::{Ablation, ModelConfig, PortraitModel};
use portrait_model::params::CheckpointManifest;
use portrait_model::pipeline::{self, SamplePool, Trainer};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "portrait", version, about = "Controllable portrait video generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural multi-kind dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `paths.data` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the progressive training schedule (or one stage of it).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage number (1-based) or `all`.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Animate a reference image with a driving sequence and camera path.
    Animate {
        /// Checkpoint manifest (`ckpt_stage{k}.json`).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ref_image: PathBuf,
        /// Dataset sequence directory supplying expressions and head poses.
        #[arg(long)]
        driving_seq: PathBuf,
        /// Trajectory JSON; defaults to the driving sequence's cameras.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a camera trajectory JSON.
    Trajectory {
        #[arg(long, value_enum)]
        kind: TrajArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        resolution: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated sequences against a reference dataset.
    Eval {
        /// Directory mirroring the dataset layout (`<kind>/<id>/frames/*.png`
        /// or `<kind>/<id>/*.png`).
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference_dataset: PathBuf,
        /// Report JSON path; a CSV summary row is appended next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        label: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    C1,
    C2,
    C3,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::C1 => Ablation::C1,
            AblationArg::C2 => Ablation::C2,
            AblationArg::C3 => Ablation::C3,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrajArg {
    Spin,
    Spiral,
    Static,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// One JSON object on one line: `{"error": kind, "message": ...}`.
fn error_line(e: &anyhow::Error) -> String {
    use portrait_core::Error as CoreError;
    use portrait_model::ModelError;
    let mut kind = "other";
    for cause in e.chain() {
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            kind = match m {
                ModelError::Incompatible(_) => "incompatible",
                ModelError::Config(_) => "config",
                ModelError::Shape { .. } => "shape",
                ModelError::NonFinite { .. } => "diverged",
                ModelError::Io { .. } => "io",
                ModelError::Json { .. } => "schema",
                ModelError::Core(_) | ModelError::Tensor(_) => continue,
            };
            break;
        }
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            kind = match c {
                CoreError::Schema { .. } | CoreError::Json { .. } => "schema",
                CoreError::Io { .. } | CoreError::Image { .. } => "io",
                CoreError::DirectoryNotEmpty(_) => "exists",
                CoreError::Shape { .. } => "shape",
                _ => "invalid",
            };
            break;
        }
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            kind = "config";
            break;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            kind = "io";
            break;
        }
    }
    let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    json!({ "error": kind, "message": message }).to_string()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, force } => gen_data(&config, out, force),
        Command::Train {
            config,
            data,
            out,
            stage,
            ablation,
        } => train(&config, data, out, &stage, ablation.map(Ablation::from)),
        Command::Animate {
            ckpt,
            ref_image,
            driving_seq,
            trajectory,
            steps,
            seed,
            out,
        } => animate(&ckpt, &ref_image, &driving_seq, trajectory.as_deref(), steps, seed, &out),
        Command::Trajectory {
            kind,
            seed,
            frames,
            resolution,
            out,
        } => trajectory(kind, seed, frames, resolution, &out),
        Command::Eval {
            generated,
            reference_dataset,
            out,
            label,
        } => eval(&generated, &reference_dataset, &out, &label),
    }
}

fn gen_data(config: &Path, out: Option<PathBuf>, force: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.data.as_ref().context("config has no [data] section")?;
    let root = out.or_else(|| cfg.paths.data.clone()).context("no output directory (--out or paths.data)")?;
    let ds = generate_dataset(data, &root, force)?;
    println!("{}", json!({ "dataset": root, "sequences": ds.entries.len() }));
    Ok(())
}

fn train(
    config: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    stage: &str,
    ablation: Option<Ablation>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = data.or_else(|| cfg.paths.data.clone()).context("no dataset (--data or paths.data)")?;
    let out = out.or_else(|| cfg.paths.out.clone()).context("no run directory (--out or paths.out)")?;
    let ablation = ablation.unwrap_or(cfg.schedule.ablation);
    let model_cfg = ModelConfig { ablation, ..cfg.model };
    let mut stages = cfg.stages()?;
    pipeline::apply_ablation(&mut stages, ablation);
    let (first, last) = if stage == "all" {
        (0, stages.len())
    } else {
        let k: usize = stage
            .parse()
            .map_err(|_| config::ConfigError(format!("--stage must be a stage number or `all`, got {stage:?}")))?;
        if k == 0 || k > stages.len() {
            bail!(config::ConfigError(format!("--stage {k} outside 1..={}", stages.len())));
        }
        (k - 1, k)
    };
    let ds = Dataset::open(&data)?;
    let pool = SamplePool::from_dataset(&ds)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut saved = cfg.clone();
    saved.schedule.ablation = ablation;
    fs::write(out.join("run_config.toml"), toml::to_string_pretty(&saved)?)?;
    let trainer = Trainer::new(model_cfg, cfg.train)?;
    let manifest = pipeline::run_schedule(&trainer, &stages[..last], first, &pool, &out, Some(data))?;
    println!("{}", json!({ "run": out, "checkpoints": manifest.checkpoints }));
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<PortraitModel> {
    let man = CheckpointManifest::read(ckpt)?;
    let cfg: ModelConfig = serde_json::from_value(man.extra.get("model").cloned().context("checkpoint has no model config")?)
        .context("checkpoint model config")?;
    let model = PortraitModel::cpu(cfg)?;
    model.load(ckpt)?;
    Ok(model)
}

fn animate(
    ckpt: &Path,
    ref_image: &Path,
    driving: &Path,
    traj: Option<&Path>,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let reference = image_io::to_f32(image_io::read_png(ref_image)?.view());
    let drv = load_sequence(driving)?;
    let trajectory = match traj {
        Some(p) => Trajectory::read(p)?,
        None => drv.trajectory.clone(),
    };
    let anim = pipeline::animate(&model, reference.view(), &drv, &trajectory, steps, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let frames = anim.frames.dim().0;
    for i in 0..frames {
        let f = anim.frames.index_axis(ndarray::Axis(0), i);
        image_io::write_png(&out.join(format!("{i:05}.png")), image_io::to_u8(f).view())?;
    }
    let meta = json!({
        "checkpoint": ckpt,
        "ref_image": ref_image,
        "driving_seq": driving,
        "trajectory": traj,
        "steps": steps,
        "seed": seed,
        "frames": frames,
        "model": model.config(),
    });
    fs::write(out.join("animation.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("{}", json!({ "out": out, "frames": frames }));
    Ok(())
}

fn trajectory(kind: TrajArg, seed: u64, frames: usize, resolution: u32, out: &Path) -> Result<()> {
    let intrinsics = Intrinsics::from_fov(DEFAULT_FOV_DEG, resolution, resolution)?;
    let traj = match kind {
        TrajArg::Spin => spin_trajectory(
            seed,
            &SpinParams {
                frames,
                intrinsics,
                ..SpinParams::default()
            },
        )?,
        TrajArg::Spiral => spiral_trajectory(
            seed,
            &SpiralParams {
                frames,
                intrinsics,
                ..SpiralParams::default()
            },
        )?,
        TrajArg::Static => {
            let pose = CameraPose::look_at(Vector3::new(0.0, 0.0, -0.32), Vector3::zeros(), WORLD_UP)?;
            static_trajectory(pose, frames, intrinsics)?
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    traj.write(out)?;
    println!("{}", json!({ "trajectory": out, "frames": traj.len() }));
    Ok(())
}

fn generated_frames(dir: &Path, n: usize) -> Result<Option<ndarray::Array4<f32>>> {
    let frames_dir = if dir.join("frames").is_dir() { dir.join("frames") } else { dir.to_path_buf() };
    if !frames_dir.join("00000.png").is_file() {
        return Ok(None);
    }
    let mut imgs = Vec::new();
    for i in 0..n {
        let p = frames_dir.join(format!("{i:05}.png"));
        if !p.is_file() {
            break;
        }
        imgs.push(image_io::to_f32(image_io::read_png(&p)?.view()));
    }
    let views: Vec<_> = imgs.iter().map(|a| a.view()).collect();
    Ok(Some(ndarray::stack(ndarray::Axis(0), &views).context("generated frames differ in size")?))
}

fn eval(generated: &Path, reference: &Path, out: &Path, label: &str) -> Result<()> {
    let ds = Dataset::open(reference)?;
    let mut evals = Vec::new();
    for entry in &ds.entries {
        let rel = entry.dir.strip_prefix(&ds.root).unwrap_or(&entry.dir);
        let Some(frames) = generated_frames(&generated.join(rel), entry.meta.frames)? else {
            continue;
        };
        let truth = load_sequence(&entry.dir)?.window(0, frames.dim().0)?;
        evals.push(evaluate_sequence(&rel.display().to_string(), frames.view(), &truth)?);
    }
    if evals.is_empty() {
        bail!(config::ConfigError(format!(
            "no generated sequences under {} match {}",
            generated.display(),
            reference.display()
        )));
    }
    let report = EvalReport::aggregate(label, evals)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write_json(out)?;
    report.append_csv(&out.with_extension("csv"))?;
    println!("{}", serde_json::to_string(&json!({
        "report": out,
        "sequences": report.sequences.len(),
        "psnr_db": if report.psnr_db.is_finite() { json!(report.psnr_db) } else { json!("inf") },
        "ssim": report.ssim,
    }))?);
    Ok(())
}
