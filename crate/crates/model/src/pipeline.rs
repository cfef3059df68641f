//! Progressive multi-stage training, dataset mixing, checkpointing and
//! inference helpers.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array4, ArrayView3, Axis};
use portrait_core::avatar::{Dataset, IdentityParams, HeadPose, Rig, SequenceKind, SequenceSample};
use portrait_core::camera::Trajectory;
use portrait_core::codec::{self, TEMPORAL_FACTOR};
use portrait_core::eval::{evaluate_sequence, EvalReport};
use portrait_core::image_io;
use portrait_core::rasterizer::render;
use portrait_core::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::model::{Ablation, Conditions, Example, ExpressionInput, ModelConfig, PortraitModel};

pub type Mixture = BTreeMap<SequenceKind, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub mixture: Mixture,
    pub frames: usize,
    pub iterations: usize,
    pub lr: f64,
    #[serde(default)]
    pub resume_from: Option<String>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mixture.values().sum();
        if (sum - 1.0).abs() > 1e-9 || self.mixture.values().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(ModelError::Config(format!("stage {}: mixture ratios must be in [0, 1] and sum to 1, got {sum}", self.name)));
        }
        if self.frames % TEMPORAL_FACTOR != 1 {
            return Err(ModelError::Config(format!("stage {}: frames {} must be 1 mod 4", self.name, self.frames)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!("stage {}: lr must be positive", self.name)));
        }
        Ok(())
    }
}

const STAGE_FRAMES: [usize; 4] = [13, 25, 49, 81];
const STAGE_ITERS: [f64; 4] = [20000.0, 20000.0, 20000.0, 30000.0];
const STAGE_LR: [f64; 4] = [1e-4, 1e-4, 5e-5, 2e-5];

fn mixture(entries: &[(SequenceKind, f64)]) -> Mixture {
    entries.iter().copied().collect()
}

/// The four-stage curriculum with iteration counts multiplied by `scale`.
pub fn default_schedule(scale: f64) -> Result<Vec<StageConfig>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(ModelError::Config(format!("schedule scale {scale} outside (0, 1]")));
    }
    use SequenceKind::*;
    let late = mixture(&[(PhoneLike, 0.2), (StudioLike, 0.2), (ViewSweep, 0.3), (DynamicSweep, 0.3)]);
    let mixes = [
        mixture(&[(PhoneLike, 1.0)]),
        mixture(&[(PhoneLike, 0.6), (StudioLike, 0.4)]),
        late.clone(),
        late,
    ];
    Ok(mixes
        .into_iter()
        .enumerate()
        .map(|(i, m)| StageConfig {
            name: format!("stage{}", i + 1),
            mixture: m,
            frames: STAGE_FRAMES[i],
            iterations: (STAGE_ITERS[i] * scale).round() as usize,
            lr: STAGE_LR[i],
            resume_from: (i > 0).then(|| format!("stage{i}")),
        })
        .collect())
}

/// C1 drops dynamic_sweep; stages that used it switch to
/// phone 0.2 / studio 0.4 / view_sweep 0.4. Other toggles leave mixtures alone.
pub fn apply_ablation(stages: &mut [StageConfig], ablation: Ablation) {
    if ablation != Ablation::C1 {
        return;
    }
    use SequenceKind::*;
    for s in stages {
        if s.mixture.get(&DynamicSweep).copied().unwrap_or(0.0) > 0.0 {
            s.mixture = mixture(&[(PhoneLike, 0.2), (StudioLike, 0.4), (ViewSweep, 0.4)]);
        }
    }
}

/// I.i.d. categorical draws over kinds, then uniform within the kind.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    rng: ChaCha8Rng,
    cumulative: Vec<(SequenceKind, f64)>,
    sizes: BTreeMap<SequenceKind, usize>,
}

impl MixtureSampler {
    pub fn new(seed: u64, mixture: &Mixture, sizes: &BTreeMap<SequenceKind, usize>) -> Result<Self> {
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (&kind, &r) in mixture {
            if r <= 0.0 {
                continue;
            }
            if sizes.get(&kind).copied().unwrap_or(0) == 0 {
                return Err(ModelError::Config(format!("mixture needs {kind} sequences but the dataset has none")));
            }
            acc += r;
            cumulative.push((kind, acc));
        }
        if cumulative.is_empty() {
            return Err(ModelError::Config("mixture has no positive ratios".into()));
        }
        Ok(MixtureSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cumulative,
            sizes: sizes.clone(),
        })
    }

    pub fn draw(&mut self) -> (SequenceKind, usize) {
        let total = self.cumulative.last().map_or(1.0, |c| c.1);
        let u = self.rng.random::<f64>() * total;
        let kind = self
            .cumulative
            .iter()
            .find(|(_, c)| u < *c)
            .unwrap_or_else(|| self.cumulative.last().expect("non-empty"))
            .0;
        let idx = self.rng.random_range(0..self.sizes[&kind]);
        (kind, idx)
    }
}

impl Iterator for MixtureSampler {
    type Item = (SequenceKind, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.draw())
    }
}

/// In-memory sequences grouped by kind.
#[derive(Debug, Clone, Default)]
pub struct SamplePool {
    pub by_kind: BTreeMap<SequenceKind, Vec<SequenceSample>>,
}

impl SamplePool {
    pub fn from_samples(samples: impl IntoIterator<Item = SequenceSample>) -> Self {
        let mut by_kind: BTreeMap<SequenceKind, Vec<SequenceSample>> = BTreeMap::new();
        for s in samples {
            by_kind.entry(s.kind).or_default().push(s);
        }
        SamplePool { by_kind }
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Ok(Self::from_samples(ds.load_all()?))
    }

    pub fn sizes(&self) -> BTreeMap<SequenceKind, usize> {
        self.by_kind.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    pub fn get(&self, kind: SequenceKind, idx: usize) -> &SequenceSample {
        &self.by_kind[&kind][idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Consecutive non-finite log entries before aborting.
    pub nan_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            grad_clip: 1.0,
            log_every: 50,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
            nan_patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub log: Vec<LogEntry>,
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_paths(run_dir: &Path, stage_index: usize) -> (PathBuf, PathBuf) {
    (
        run_dir.join(format!("ckpt_stage{stage_index}.bin")),
        run_dir.join(format!("ckpt_stage{stage_index}.json")),
    )
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &PortraitModel, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    for v in model.params().vars() {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for v in model.params().vars() {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn append_metrics(path: &Path, rows: &[LogEntry]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ModelError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| ModelError::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| ModelError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<LogEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ModelError::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| ModelError::io(path, std::io::Error::other(e))))
        .collect()
}

/// Owns the model and runs optimizer steps over stages.
pub struct Trainer {
    pub model: PortraitModel,
    pub train: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train: TrainConfig) -> Result<Self> {
        if train.batch_size == 0 || train.log_every == 0 {
            return Err(ModelError::Config("batch_size and log_every must be positive".into()));
        }
        Ok(Trainer {
            model: PortraitModel::new(model_cfg, DType::F32, Device::Cpu)?,
            train,
        })
    }

    pub fn optimizer(&self, lr: f64) -> Result<AdamW> {
        Ok(AdamW::new(
            self.model.params().vars(),
            ParamsAdamW {
                lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
                weight_decay: self.train.weight_decay,
            },
        )?)
    }

    /// One clipped optimizer step. A non-finite loss skips the update and
    /// is reported as `NaN`.
    pub fn step<R: Rng>(&self, opt: &mut AdamW, batch: &[&Example], rng: &mut R, step: usize) -> Result<f64> {
        let loss = match self.model.loss(batch, rng, step) {
            Ok(l) => l,
            Err(ModelError::NonFinite { .. }) => return Ok(f64::NAN),
            Err(e) => return Err(e),
        };
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let mut grads = loss.backward()?;
        let norm = clip_grad_norm(&self.model, &mut grads, self.train.grad_clip)?;
        if !norm.is_finite() {
            return Ok(f64::NAN);
        }
        opt.step(&grads)?;
        Ok(value)
    }

    /// Draws a batch of random `frames`-long windows via the mixture sampler.
    pub fn draw_batch<R: Rng>(
        &self,
        sampler: &mut MixtureSampler,
        pool: &SamplePool,
        frames: usize,
        rng: &mut R,
    ) -> Result<Vec<Example>> {
        (0..self.train.batch_size)
            .map(|_| {
                let (kind, idx) = sampler.draw();
                let s = pool.get(kind, idx);
                if s.len() < frames {
                    return Err(ModelError::Config(format!(
                        "{kind} sequence has {} frames, stage needs {frames}",
                        s.len()
                    )));
                }
                let start = rng.random_range(0..=s.len() - frames);
                Example::from_sample(self.model.config(), &s.window(start, frames)?)
            })
            .collect()
    }

    /// Trains one stage. With `run_dir`, appends metrics and writes
    /// `ckpt_stage{k}` when done (or `ckpt_stage{k}_aborted` on divergence).
    pub fn run_stage(
        &self,
        stage_index: usize,
        stage: &StageConfig,
        pool: &SamplePool,
        run_dir: Option<&Path>,
    ) -> Result<StageOutcome> {
        stage.validate()?;
        let tc = &self.train;
        let mut sampler = MixtureSampler::new(
            derive_seed(tc.seed, &format!("mixture/{}", stage.name), 0),
            &stage.mixture,
            &pool.sizes(),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &format!("train/{}", stage.name), 0));
        let mut opt = self.optimizer(stage.lr)?;
        let mut log = Vec::new();
        let mut window = Vec::new();
        let mut nan_logs = 0;
        let mut final_loss = None;
        for step in 1..=stage.iterations {
            let batch = self.draw_batch(&mut sampler, pool, stage.frames, &mut rng)?;
            let refs: Vec<&Example> = batch.iter().collect();
            let loss = self.step(&mut opt, &refs, &mut rng, step)?;
            window.push(loss);
            final_loss = Some(loss);
            if step % tc.log_every == 0 || step == stage.iterations {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                window.clear();
                let entry = LogEntry {
                    step,
                    stage: stage.name.clone(),
                    loss: mean,
                    lr: stage.lr,
                };
                log::info!("{} step {step} loss {mean:.5}", stage.name);
                if let Some(dir) = run_dir {
                    append_metrics(&dir.join("metrics.csv"), std::slice::from_ref(&entry))?;
                }
                log.push(entry);
                nan_logs = if mean.is_finite() { 0 } else { nan_logs + 1 };
                if nan_logs >= tc.nan_patience {
                    let saved = match run_dir {
                        Some(dir) => {
                            let blob = dir.join(format!("ckpt_stage{stage_index}_aborted.bin"));
                            let man = dir.join(format!("ckpt_stage{stage_index}_aborted.json"));
                            self.model.save(&blob, &man, serde_json::json!({ "stage": stage, "step": step }))?;
                            man.display().to_string()
                        }
                        None => "not saved (no run directory)".into(),
                    };
                    return Err(ModelError::NonFinite {
                        step,
                        detail: format!("{nan_logs} consecutive non-finite loss logs; state: {saved}"),
                    });
                }
            }
        }
        let checkpoint = match run_dir {
            Some(dir) => {
                let (blob, man) = checkpoint_paths(dir, stage_index);
                self.model
                    .save(&blob, &man, serde_json::json!({ "stage": stage, "steps": stage.iterations }))?;
                Some(man)
            }
            None => None,
        };
        Ok(StageOutcome {
            steps: stage.iterations,
            final_loss,
            log,
            checkpoint,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stages: Vec<StageConfig>,
    pub git_describe: String,
    pub data_root: Option<PathBuf>,
    pub metrics: String,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| ModelError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| ModelError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| ModelError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| ModelError::json(&path, e))
    }
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Runs stages `first..` of `stages` (0-based), chaining each from the
/// previous stage's checkpoint in `run_dir`.
pub fn run_schedule(
    trainer: &Trainer,
    stages: &[StageConfig],
    first: usize,
    pool: &SamplePool,
    run_dir: &Path,
    data_root: Option<PathBuf>,
) -> Result<RunManifest> {
    fs::create_dir_all(run_dir).map_err(|e| ModelError::io(run_dir, e))?;
    let mut manifest = RunManifest {
        model: *trainer.model.config(),
        train: trainer.train,
        stages: stages.to_vec(),
        git_describe: git_describe(),
        data_root,
        metrics: "metrics.csv".into(),
        checkpoints: Vec::new(),
    };
    for k in 1..=first {
        let (_, man) = checkpoint_paths(run_dir, k);
        if man.exists() {
            manifest.checkpoints.push(file_name(&man));
        }
    }
    manifest.write(run_dir)?;
    for (i, stage) in stages.iter().enumerate().skip(first) {
        let k = i + 1;
        if k > 1 {
            let (_, prev) = checkpoint_paths(run_dir, k - 1);
            if !prev.exists() {
                return Err(ModelError::Config(format!(
                    "stage {k} resumes from {} which does not exist",
                    prev.display()
                )));
            }
            trainer.model.load(&prev)?;
        }
        let out = trainer.run_stage(k, stage, pool, Some(run_dir))?;
        if let Some(c) = out.checkpoint {
            manifest.checkpoints.push(file_name(&c));
        }
        manifest.write(run_dir)?;
    }
    Ok(manifest)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Body-mesh normal maps of `identity` under `head_poses`, seen through
/// `traj`, quantized like the dataset's stored maps.
pub fn driving_normal_maps(identity: &IdentityParams, head_poses: &[HeadPose], traj: &Trajectory) -> Result<Array4<f32>> {
    let rig = Rig::new(identity)?;
    let intr = traj.intrinsics;
    let (h, w) = (intr.height as usize, intr.width as usize);
    let mut out = Array4::zeros((traj.len(), h, w, 3));
    for (i, (pose, cam)) in head_poses.iter().zip(&traj.poses).enumerate() {
        let nm = render(&rig.body_mesh(pose), cam, &intr)?.normal_map;
        out.index_axis_mut(Axis(0), i)
            .assign(&image_io::to_f32(image_io::to_u8(nm.view()).view()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Animation {
    /// `T × H × W × 3` in `[0, 1]`.
    pub frames: Array4<f32>,
    pub latent: codec::LatentVideo,
}

/// Largest `T ≡ 1 (mod 4)` not exceeding `n`.
pub fn usable_frames(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        n - (n - 1) % TEMPORAL_FACTOR
    }
}

/// Animates `ref_image` with the expressions and head poses of `driving`,
/// seen through `traj`. The driving identity's body mesh provides the normal
/// maps, so pointing `driving` at another identity gives cross-reenactment.
/// Both inputs are truncated to the longest common `T ≡ 1 (mod 4)`.
pub fn animate(
    model: &PortraitModel,
    ref_image: ArrayView3<'_, f32>,
    driving: &SequenceSample,
    traj: &Trajectory,
    steps: usize,
    seed: u64,
) -> Result<Animation> {
    let cfg = model.config();
    let t = usable_frames(driving.len().min(traj.len()));
    if t == 0 {
        return Err(ModelError::Config("driving sequence or trajectory is empty".into()));
    }
    let (h, w, _) = ref_image.dim();
    let mut traj = traj.window(0, t)?;
    if (traj.intrinsics.height as usize, traj.intrinsics.width as usize) != (h, w) {
        traj.intrinsics = traj.intrinsics.scaled(w as u32, h as u32)?;
    }
    let drv = driving.window(0, t)?;
    let expression = if cfg.ablation.uses_landmarks() {
        let lm = crate::conditioning::landmark_track_from(&drv.identity, &traj, &drv.expressions, &drv.head_poses)?;
        ExpressionInput::Landmarks(lm.normalized())
    } else {
        ExpressionInput::Codes(ndarray::Array2::from_shape_fn((t, cfg.expression_dim), |(i, k)| {
            drv.expressions[i].values[k]
        }))
    };
    let normals = if cfg.ablation.uses_normals() {
        Some(driving_normal_maps(&drv.identity, &drv.head_poses, &traj)?)
    } else {
        None
    };
    let cond = Conditions::build(cfg, ref_image, normals.as_ref().map(|n| n.view()), &traj, expression)?;
    let latent = model.sample(&cond, steps, seed)?;
    let frames = codec::decode(&latent)?.mapv(|v| v.clamp(0.0, 1.0));
    Ok(Animation { frames, latent })
}

/// Self-reenactment on each sample (reference = first frame, driving and
/// cameras = the sample itself) scored against ground truth.
pub fn evaluate_model(
    model: &PortraitModel,
    label: &str,
    samples: &[SequenceSample],
    steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut evals = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let t = usable_frames(s.len());
        let s = s.window(0, t)?;
        let anim = animate(model, s.frame_f32(0).view(), &s, &s.trajectory, steps, derive_seed(seed, "eval", i as u64))?;
        evals.push(evaluate_sequence(&format!("{}_{i}", s.kind), anim.frames.view(), &s)?);
    }
    Ok(EvalReport::aggregate(label, evals)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use portrait_core::avatar::generate_sequence;

    #[test]
    fn schedule_matches_curriculum() {
        let s = default_schedule(1.0).unwrap();
        assert_eq!(s.iter().map(|x| x.frames).collect::<Vec<_>>(), vec![13, 25, 49, 81]);
        assert_eq!(s.iter().map(|x| x.iterations).collect::<Vec<_>>(), vec![20000, 20000, 20000, 30000]);
        assert_eq!(s.iter().map(|x| x.lr).collect::<Vec<_>>(), vec![1e-4, 1e-4, 5e-5, 2e-5]);
        use SequenceKind::*;
        assert_eq!(s[0].mixture, mixture(&[(PhoneLike, 1.0)]));
        assert_eq!(s[1].mixture, mixture(&[(PhoneLike, 0.6), (StudioLike, 0.4)]));
        let late = mixture(&[(PhoneLike, 0.2), (StudioLike, 0.2), (ViewSweep, 0.3), (DynamicSweep, 0.3)]);
        assert_eq!(s[2].mixture, late);
        assert_eq!(s[3].mixture, late);
        assert_eq!(s[0].resume_from, None);
        assert_eq!(s[3].resume_from.as_deref(), Some("stage3"));
        for st in &s {
            st.validate().unwrap();
        }
        let small = default_schedule(0.01).unwrap();
        assert_eq!(small.iter().map(|x| x.iterations).collect::<Vec<_>>(), vec![200, 200, 200, 300]);
        assert!(default_schedule(0.0).is_err());
        assert!(default_schedule(1.5).is_err());
    }

    #[test]
    fn c1_removes_dynamic_sweep() {
        let mut s = default_schedule(1.0).unwrap();
        apply_ablation(&mut s, Ablation::C1);
        use SequenceKind::*;
        assert_eq!(s[0].mixture, mixture(&[(PhoneLike, 1.0)]));
        assert_eq!(s[2].mixture, mixture(&[(PhoneLike, 0.2), (StudioLike, 0.4), (ViewSweep, 0.4)]));
        let sizes: BTreeMap<_, _> = SequenceKind::ALL.iter().map(|k| (*k, 3)).collect();
        let mut m = MixtureSampler::new(1, &s[3].mixture, &sizes).unwrap();
        assert!((0..10_000).all(|_| m.draw().0 != DynamicSweep));
    }

    #[test]
    fn invalid_stages_rejected() {
        let mut s = default_schedule(1.0).unwrap().remove(0);
        s.frames = 12;
        assert!(s.validate().is_err());
        let mut s = default_schedule(1.0).unwrap().remove(1);
        s.mixture.insert(SequenceKind::ViewSweep, 0.1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn sampler_ratios_and_determinism() {
        let s = default_schedule(1.0).unwrap();
        let sizes: BTreeMap<_, _> = SequenceKind::ALL.iter().map(|k| (*k, 5)).collect();
        let draws: Vec<_> = MixtureSampler::new(42, &s[2].mixture, &sizes).unwrap().take(20_000).collect();
        for (kind, want) in &s[2].mixture {
            let got = draws.iter().filter(|d| d.0 == *kind).count() as f64 / 20_000.0;
            assert!((got - want).abs() < 0.02, "{kind}: {got}");
        }
        assert!(draws.iter().all(|d| d.1 < 5));
        let again: Vec<_> = MixtureSampler::new(42, &s[2].mixture, &sizes).unwrap().take(20_000).collect();
        assert_eq!(draws, again);
        let phone: Vec<_> = MixtureSampler::new(1, &s[0].mixture, &sizes).unwrap().take(1000).collect();
        assert!(phone.iter().all(|d| d.0 == SequenceKind::PhoneLike));
        let mut only_phone = BTreeMap::new();
        only_phone.insert(SequenceKind::PhoneLike, 2);
        assert!(MixtureSampler::new(0, &s[1].mixture, &only_phone).is_err());
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            depth: 1,
            dim: 16,
            heads: 2,
            controller_width: 8,
            controller_heads: 2,
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_pool() -> SamplePool {
        let samples = SequenceKind::ALL.iter().enumerate().map(|(i, k)| {
            let id = IdentityParams::sample(i as u64);
            generate_sequence(*k, &id, 100 + i as u64, 9, 16).unwrap()
        });
        SamplePool::from_samples(samples)
    }

    fn tiny_stage(iterations: usize) -> StageConfig {
        let mut s = default_schedule(1.0).unwrap().remove(2);
        s.frames = 5;
        s.iterations = iterations;
        s.lr = 1e-3;
        s
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            log_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let tr = Trainer::new(tiny_model(), train_cfg()).unwrap();
        let init = tr.model.params().flat_f32().unwrap();
        let out = tr.run_stage(1, &tiny_stage(0), &tiny_pool(), Some(dir.path())).unwrap();
        assert_eq!(out.steps, 0);
        let fresh = Trainer::new(tiny_model(), train_cfg()).unwrap();
        fresh.model.load(&out.checkpoint.unwrap()).unwrap();
        assert_eq!(fresh.model.params().flat_f32().unwrap(), init);
    }

    #[test]
    fn stage_runs_are_deterministic_and_logged() {
        let pool = tiny_pool();
        let dir = tempfile::tempdir().unwrap();
        let a = Trainer::new(tiny_model(), train_cfg()).unwrap();
        let oa = a.run_stage(1, &tiny_stage(4), &pool, Some(dir.path())).unwrap();
        let b = Trainer::new(tiny_model(), train_cfg()).unwrap();
        let ob = b.run_stage(1, &tiny_stage(4), &pool, None).unwrap();
        assert_eq!(oa.final_loss, ob.final_loss);
        assert!(oa.final_loss.unwrap().is_finite());
        assert_eq!(a.model.params().flat_f32().unwrap(), b.model.params().flat_f32().unwrap());
        let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(rows, oa.log);
    }

    #[test]
    fn schedule_chains_checkpoints_bitwise() {
        let pool = tiny_pool();
        let dir = tempfile::tempdir().unwrap();
        let mut s1 = tiny_stage(2);
        s1.name = "stage1".into();
        let mut s2 = tiny_stage(0);
        s2.name = "stage2".into();
        let tr = Trainer::new(tiny_model(), train_cfg()).unwrap();
        let man = run_schedule(&tr, &[s1, s2], 0, &pool, dir.path(), None).unwrap();
        assert_eq!(man.checkpoints, vec!["ckpt_stage1.json", "ckpt_stage2.json"]);
        let after1 = Trainer::new(tiny_model(), train_cfg()).unwrap();
        after1.model.load(&dir.path().join("ckpt_stage1.json")).unwrap();
        let after2 = Trainer::new(tiny_model(), train_cfg()).unwrap();
        after2.model.load(&dir.path().join("ckpt_stage2.json")).unwrap();
        assert_eq!(after1.model.params().flat_f32().unwrap(), after2.model.params().flat_f32().unwrap());
        assert_eq!(RunManifest::read(dir.path()).unwrap(), man);
    }

    #[test]
    fn divergence_aborts_with_saved_state() {
        let pool = tiny_pool();
        let dir = tempfile::tempdir().unwrap();
        let tr = Trainer::new(tiny_model(), TrainConfig { log_every: 1, ..train_cfg() }).unwrap();
        for v in tr.model.params().vars() {
            v.set(&(v.as_tensor().ones_like().unwrap() * f64::NAN).unwrap()).unwrap();
        }
        let err = tr.run_stage(1, &tiny_stage(10), &pool, Some(dir.path())).unwrap_err();
        assert!(matches!(err, ModelError::NonFinite { step: 3, .. }), "{err}");
        assert!(dir.path().join("ckpt_stage1_aborted.json").exists());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let tr = Trainer::new(tiny_model(), train_cfg()).unwrap();
        tr.model.params().randomize(3, 0.5).unwrap();
        let pool = tiny_pool();
        let mut sampler = MixtureSampler::new(0, &tiny_stage(1).mixture, &pool.sizes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = tr.draw_batch(&mut sampler, &pool, 5, &mut rng).unwrap();
        let refs: Vec<&Example> = batch.iter().collect();
        let mut g = tr.model.loss(&refs, &mut rng, 0).unwrap().backward().unwrap();
        let before = clip_grad_norm(&tr.model, &mut g, 1e-3).unwrap();
        assert!(before > 1e-3);
        let after = clip_grad_norm(&tr.model, &mut g, f64::INFINITY).unwrap();
        assert!((after - 1e-3).abs() < 1e-6, "{after}");
    }

    #[test]
    fn animate_static_camera_dynamic_driver() {
        let cfg = tiny_model();
        let model = PortraitModel::new(cfg, DType::F32, Device::Cpu).unwrap();
        let id = IdentityParams::sample(8);
        let phone = generate_sequence(SequenceKind::PhoneLike, &id, 3, 9, 16).unwrap();
        let other = generate_sequence(SequenceKind::DynamicSweep, &IdentityParams::sample(9), 4, 5, 16).unwrap();
        let anim = animate(&model, phone.frame_f32(0).view(), &other, &phone.trajectory, 2, 0).unwrap();
        assert_eq!(anim.frames.dim(), (5, 16, 16, 3));
        assert!(anim.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(usable_frames(7), 5);
        assert_eq!(usable_frames(100), 97);
        assert_eq!(usable_frames(1), 1);
    }

    #[test]
    fn driving_normals_match_dataset_maps() {
        let id = IdentityParams::sample(2);
        let s = generate_sequence(SequenceKind::DynamicSweep, &id, 5, 5, 16).unwrap();
        let n = driving_normal_maps(&s.identity, &s.head_poses, &s.trajectory).unwrap();
        assert_eq!(n, s.normals_f32());
    }
}
