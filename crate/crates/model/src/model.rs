//! The full conditioned velocity model: condition assembly, expression or
//! landmark controller, timestep embeddings and the DiT.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::Linear;
use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use portrait_core::avatar::{SequenceSample, EXPRESSION_DIM, NUM_FIDUCIALS};
use portrait_core::camera::{Intrinsics, Trajectory};
use portrait_core::codec::{self, latent_channels, latent_len, LatentVideo, DEFAULT_SPATIAL_FACTOR};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    chunk_expression, frame_timestep_embeddings, fuse_conditions, landmark_track, video_ray_maps, BundleLayout,
    ExpressionEncoder, LandmarkEncoder, TimestepEmbedder, DEFAULT_CONTROLLER_WIDTH,
};
use crate::diffusion::{self, make_training_pair, TimeSampling, VelocityField};
use crate::dit::{DiT, DiTConfig};
use crate::error::{ModelError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No dynamic_sweep data.
    C1,
    /// No normal-map channels.
    C2,
    /// Landmarks instead of expression codes.
    C3,
}

impl Ablation {
    pub fn uses_normals(self) -> bool {
        self != Ablation::C2
    }

    pub fn uses_landmarks(self) -> bool {
        self == Ablation::C3
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::C1 => "c1",
            Ablation::C2 => "c2",
            Ablation::C3 => "c3",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Ablation::None),
            "c1" => Ok(Ablation::C1),
            "c2" => Ok(Ablation::C2),
            "c3" => Ok(Ablation::C3),
            other => Err(ModelError::Config(format!("unknown ablation {other:?} (none|c1|c2|c3)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seed: u64,
    pub spatial_factor: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub controller_width: usize,
    pub controller_heads: usize,
    pub expression_dim: usize,
    pub ablation: Ablation,
    pub ref_channel_group: bool,
    pub time_sampling: TimeSampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            spatial_factor: DEFAULT_SPATIAL_FACTOR,
            depth: 6,
            dim: 192,
            heads: 6,
            patch: 2,
            mlp_ratio: 4,
            controller_width: DEFAULT_CONTROLLER_WIDTH,
            controller_heads: 4,
            expression_dim: EXPRESSION_DIM,
            ablation: Ablation::None,
            ref_channel_group: false,
            time_sampling: TimeSampling::Uniform,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        latent_channels(self.spatial_factor)
    }

    pub fn layout(&self) -> BundleLayout {
        BundleLayout {
            latent_channels: self.latent_channels(),
            normals: self.ablation.uses_normals(),
            ref_channel_group: self.ref_channel_group,
        }
    }

    pub fn dit(&self) -> DiTConfig {
        DiTConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            patch: self.patch,
            c_in: self.layout().channels(),
            c_out: self.latent_channels(),
            cond_dim: self.dim,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpressionInput {
    /// `T × d_e` codes.
    Codes(Array2<f64>),
    /// `T × K × 3` normalized landmarks with validity flag.
    Landmarks(Array3<f64>),
}

impl ExpressionInput {
    pub fn frames(&self) -> usize {
        match self {
            ExpressionInput::Codes(c) => c.nrows(),
            ExpressionInput::Landmarks(l) => l.dim().0,
        }
    }
}

/// Everything the model sees besides the noisy latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `h × w × c` clean reference latent.
    pub ref_latent: Array3<f64>,
    /// `l × h × w × c` encoded normal maps, absent under ablation C2.
    pub normals: Option<Array4<f64>>,
    /// `l × h × w × 6` video-slot ray maps.
    pub rays: Array4<f64>,
    pub intrinsics: Intrinsics,
    pub expression: ExpressionInput,
}

impl Conditions {
    /// `traj` supplies per-frame cameras; rays are relative to its first pose.
    pub fn build(
        cfg: &ModelConfig,
        ref_image: ArrayView3<'_, f32>,
        normal_maps: Option<ArrayView4<'_, f32>>,
        traj: &Trajectory,
        expression: ExpressionInput,
    ) -> Result<Self> {
        let s = cfg.spatial_factor;
        let (h, w, _) = ref_image.dim();
        let t = traj.len();
        if expression.frames() != t {
            return Err(ModelError::shape("expression frames", t, expression.frames()));
        }
        match (&expression, cfg.ablation.uses_landmarks()) {
            (ExpressionInput::Codes(c), false) if c.ncols() != cfg.expression_dim => {
                return Err(ModelError::shape("expression codes", cfg.expression_dim, c.ncols()));
            }
            (ExpressionInput::Landmarks(_), false) | (ExpressionInput::Codes(_), true) => {
                return Err(ModelError::Config(format!(
                    "expression input kind does not match ablation {}",
                    cfg.ablation
                )));
            }
            _ => {}
        }
        if (traj.intrinsics.height as usize, traj.intrinsics.width as usize) != (h, w) {
            return Err(ModelError::shape(
                "reference image",
                (traj.intrinsics.height, traj.intrinsics.width),
                (h, w),
            ));
        }
        let ref_latent = codec::encode_image(ref_image, s)?.data.index_axis_move(Axis(0), 0);
        let normals = if cfg.ablation.uses_normals() {
            let n = normal_maps.ok_or_else(|| ModelError::shape("normal_latents", "normal maps", "missing"))?;
            if n.dim().0 != t {
                return Err(ModelError::shape("normal maps frames", t, n.dim().0));
            }
            Some(codec::encode(n, s)?.data)
        } else {
            None
        };
        let rays = video_ray_maps(traj, &traj.poses[0], h / s, w / s)?;
        Ok(Conditions {
            frames: t,
            height: h,
            width: w,
            ref_latent,
            normals,
            rays,
            intrinsics: traj.intrinsics,
            expression,
        })
    }

    pub fn latent_dim(&self, s: usize) -> (usize, usize, usize, usize) {
        (latent_len(self.frames), self.height / s, self.width / s, latent_channels(s))
    }
}

pub fn expression_input(cfg: &ModelConfig, sample: &SequenceSample) -> Result<ExpressionInput> {
    Ok(if cfg.ablation.uses_landmarks() {
        ExpressionInput::Landmarks(landmark_track(sample)?.normalized())
    } else {
        let d = EXPRESSION_DIM;
        ExpressionInput::Codes(Array2::from_shape_fn((sample.len(), d), |(i, k)| {
            sample.expressions[i].values[k]
        }))
    })
}

/// A training example: conditions plus the clean video latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub cond: Conditions,
    pub z: Array4<f64>,
}

impl Example {
    /// Self-reenactment: the sample's first frame is the reference image.
    pub fn from_sample(cfg: &ModelConfig, sample: &SequenceSample) -> Result<Self> {
        let frames = sample.frames_f32();
        let normals = sample.normals_f32();
        let cond = Conditions::build(
            cfg,
            frames.index_axis(Axis(0), 0),
            Some(normals.view()),
            &sample.trajectory,
            expression_input(cfg, sample)?,
        )?;
        let z = codec::encode(frames.view(), cfg.spatial_factor)?.data;
        Ok(Example { cond, z })
    }
}

#[derive(Debug, Clone)]
enum ExpressionPath {
    Codes(ExpressionEncoder),
    Landmarks(LandmarkEncoder),
}

#[derive(Debug, Clone)]
pub struct PortraitModel {
    cfg: ModelConfig,
    params: ParamStore,
    dit: DiT,
    temb: TimestepEmbedder,
    chunk_proj: Linear,
    expr: ExpressionPath,
}

fn stack_tensor<D: ndarray::Dimension>(
    items: &[&ndarray::Array<f64, D>],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = items[0].shape().to_vec();
    let mut v = Vec::with_capacity(items.len() * items[0].len());
    for a in items {
        if a.shape() != shape.as_slice() {
            return Err(ModelError::shape("batch item", &shape, a.shape()));
        }
        v.extend(a.iter().copied());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Ok(Tensor::from_vec(v, full, device)?.to_dtype(dtype)?)
}

impl PortraitModel {
    pub fn new(cfg: ModelConfig, dtype: DType, device: Device) -> Result<Self> {
        let mut p = ParamStore::new(cfg.seed, dtype, device);
        let dit = DiT::new(&mut p, "dit", cfg.dit())?;
        let temb = TimestepEmbedder::new(&mut p, "temb", cfg.dim)?;
        let cw = cfg.controller_width;
        let chunk_proj = p.linear("controller.chunk_proj", 4 * cw, cfg.dim, false, false)?;
        let expr = if cfg.ablation.uses_landmarks() {
            ExpressionPath::Landmarks(LandmarkEncoder::new(&mut p, "landmarks", cw, cfg.controller_heads)?)
        } else {
            ExpressionPath::Codes(ExpressionEncoder::new(
                &mut p,
                "controller.expr",
                cfg.expression_dim,
                cw,
                cfg.controller_heads,
            )?)
        };
        Ok(PortraitModel {
            cfg,
            params: p,
            dit,
            temb,
            chunk_proj,
            expr,
        })
    }

    /// `f32` parameters on the CPU, as used for training and inference.
    pub fn cpu(cfg: ModelConfig) -> Result<Self> {
        Self::new(cfg, DType::F32, Device::Cpu)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dit_mut(&mut self) -> &mut DiT {
        &mut self.dit
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    /// Velocity prediction `(B, l, h, w, c)` for a batch of noisy latents.
    pub fn forward(&self, z_t: &[&Array4<f64>], t: &[f64], conds: &[&Conditions]) -> Result<Tensor> {
        let b = conds.len();
        if b == 0 || z_t.len() != b || t.len() != b {
            return Err(ModelError::shape("batch", b, (z_t.len(), t.len())));
        }
        let layout = self.cfg.layout();
        let mut bundles = Vec::with_capacity(b);
        for (z, c) in z_t.iter().zip(conds) {
            let fused = fuse_conditions(
                layout,
                c.ref_latent.view(),
                z.view(),
                c.normals.as_ref().map(|n| n.view()),
                c.rays.view(),
                &c.intrinsics,
            )?;
            bundles.push(fused.stack);
        }
        let bundle_refs: Vec<&Array4<f64>> = bundles.iter().collect();
        let bundle = stack_tensor(&bundle_refs, self.dtype(), self.device())?;

        let features = match &self.expr {
            ExpressionPath::Codes(enc) => {
                let codes: Vec<&Array2<f64>> = conds
                    .iter()
                    .map(|c| match &c.expression {
                        ExpressionInput::Codes(x) => Ok(x),
                        _ => Err(ModelError::Config("model expects expression codes".into())),
                    })
                    .collect::<Result<_>>()?;
                enc.forward(&stack_tensor(&codes, self.dtype(), self.device())?)?
            }
            ExpressionPath::Landmarks(enc) => {
                let lms: Vec<&Array3<f64>> = conds
                    .iter()
                    .map(|c| match &c.expression {
                        ExpressionInput::Landmarks(x) if x.dim().1 == NUM_FIDUCIALS => Ok(x),
                        _ => Err(ModelError::Config("model expects landmark tracks".into())),
                    })
                    .collect::<Result<_>>()?;
                enc.forward(&stack_tensor(&lms, self.dtype(), self.device())?)?
            }
        };
        let chunked = chunk_expression(&features)?;
        let emb = frame_timestep_embeddings(&self.temb, &self.chunk_proj, t, &chunked)?;
        self.dit.forward(&bundle, &emb.per_frame)
    }

    pub fn predict(&self, z_t: &Array4<f64>, t: f64, cond: &Conditions) -> Result<Array4<f64>> {
        let out = self.forward(&[z_t], &[t], &[cond])?;
        let v = out.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Array4::from_shape_vec(z_t.dim(), v).map_err(|e| ModelError::shape("prediction", z_t.dim(), e.to_string()))?)
    }

    /// Flow-matching loss over video slots for one batch. Noise and flow
    /// times are drawn from `rng`.
    pub fn loss<R: Rng>(&self, batch: &[&Example], rng: &mut R, step: usize) -> Result<Tensor> {
        let s = self.cfg.spatial_factor;
        let mut z_ts = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for ex in batch {
            let t = self.cfg.time_sampling.sample(rng);
            let dim = ex.cond.latent_dim(s);
            if ex.z.dim() != dim {
                return Err(ModelError::shape("clean latent", dim, ex.z.dim()));
            }
            let eps = diffusion::gaussian(dim, rng.random());
            let pair = make_training_pair(ex.z.clone(), eps, t)?;
            z_ts.push(pair.z_t);
            targets.push(pair.v_target);
            ts.push(t);
        }
        let zr: Vec<&Array4<f64>> = z_ts.iter().collect();
        let conds: Vec<&Conditions> = batch.iter().map(|e| &e.cond).collect();
        let pred = self.forward(&zr, &ts, &conds)?;
        let tr: Vec<&Array4<f64>> = targets.iter().collect();
        let target = stack_tensor(&tr, self.dtype(), self.device())?;
        diffusion::mse(&pred, &target, step)
    }

    /// Euler sampling from seeded noise; returns the clean latent estimate.
    pub fn sample(&self, cond: &Conditions, steps: usize, seed: u64) -> Result<LatentVideo> {
        let s = self.cfg.spatial_factor;
        let field = ConditionedField { model: self, cond };
        let data = diffusion::sample(&field, cond.latent_dim(s), steps, seed)?;
        Ok(LatentVideo::new(data, cond.frames, cond.height, cond.width, s)?)
    }

    pub fn save(&self, blob: &Path, manifest: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "model": self.cfg });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        self.params.save(blob, manifest, meta)
    }

    /// Loads a checkpoint written by a model with the same configuration
    /// (the seed may differ).
    pub fn load(&self, manifest: &Path) -> Result<serde_json::Value> {
        let m = crate::params::CheckpointManifest::read(manifest)?;
        if let Some(saved) = m.extra.get("model") {
            let mut saved: ModelConfig = serde_json::from_value(saved.clone())
                .map_err(|e| ModelError::Incompatible(format!("checkpoint model config: {e}")))?;
            saved.seed = self.cfg.seed;
            if saved != self.cfg {
                return Err(ModelError::Incompatible(format!(
                    "checkpoint was trained with ablation {} and dims {:?}, model has ablation {} and dims {:?}",
                    saved.ablation,
                    (saved.depth, saved.dim, saved.spatial_factor),
                    self.cfg.ablation,
                    (self.cfg.depth, self.cfg.dim, self.cfg.spatial_factor)
                )));
            }
        }
        Ok(self.params.load(manifest)?.extra)
    }
}

pub struct ConditionedField<'a> {
    pub model: &'a PortraitModel,
    pub cond: &'a Conditions,
}

impl VelocityField for ConditionedField<'_> {
    fn velocity(&self, z_t: &Array4<f64>, t: f64) -> Result<Array4<f64>> {
        self.model.predict(z_t, t, self.cond)
    }
}
