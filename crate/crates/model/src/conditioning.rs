//! Condition fusion and the expression controller.
//!
//! Per-slot channel stacks are assembled on the host in `f64` (`ndarray`)
//! and converted to tensors by the model; the learned pieces (expression
//! encoder, timestep MLP, landmark encoder) are candle modules.

use std::ops::Range;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use portrait_core::avatar::{ExpressionParams, HeadPose, IdentityParams, Rig, SequenceSample, NUM_FIDUCIALS};
use portrait_core::camera::{plucker_ray_map, relative_pose, CameraPose, Intrinsics, Trajectory};
use portrait_core::codec::TEMPORAL_FACTOR;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{layer_norm, sinusoid_tensor, SelfAttention};
use crate::params::ParamStore;

pub const DEFAULT_CONTROLLER_WIDTH: usize = 64;
pub const TIMESTEP_FREQ_DIM: usize = 256;
/// Flow time in `[0, 1]` is multiplied by this before the sinusoid.
pub const TIMESTEP_SCALE: f64 = 1000.0;
pub const RAY_CHANNELS: usize = 6;

/// Number of latent video slots (= expression chunks) for `t` frames.
pub fn num_chunks(t: usize) -> usize {
    t.div_ceil(TEMPORAL_FACTOR)
}

fn check_frames(t: usize) -> Result<()> {
    if t == 0 || t % TEMPORAL_FACTOR != 1 {
        return Err(ModelError::shape("expression frames", "T ≡ 1 (mod 4)", t));
    }
    Ok(())
}

/// Per-frame expression codes, `T × d_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTrack {
    codes: Array2<f64>,
}

impl ExpressionTrack {
    pub fn new(codes: Array2<f64>) -> Result<Self> {
        check_frames(codes.nrows())?;
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Config("expression codes must be finite".into()));
        }
        Ok(ExpressionTrack { codes })
    }

    pub fn from_params(params: &[ExpressionParams]) -> Result<Self> {
        let d = portrait_core::avatar::EXPRESSION_DIM;
        let codes = Array2::from_shape_fn((params.len(), d), |(i, k)| params[i].values[k]);
        Self::new(codes)
    }

    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }
}

fn pre_norm_block(x: &Tensor, att: &SelfAttention) -> Result<Tensor> {
    Ok((x + att.forward(&layer_norm(x)?)?)?)
}

/// Linear lift, sinusoidal temporal encoding, then two pre-norm residual
/// self-attention blocks over the whole track. Output projections start at
/// zero, so at initialization the output is exactly lift + position code.
#[derive(Debug, Clone)]
pub struct ExpressionEncoder {
    lift: Linear,
    blocks: Vec<SelfAttention>,
    width: usize,
}

impl ExpressionEncoder {
    pub fn new(p: &mut ParamStore, name: &str, d_e: usize, width: usize, heads: usize) -> Result<Self> {
        if width % heads != 0 || width % 2 != 0 {
            return Err(ModelError::Config(format!("controller width {width} must be even and divisible by {heads}")));
        }
        let lift = p.linear(&format!("{name}.lift"), d_e, width, true, false)?;
        let blocks = (0..2)
            .map(|i| SelfAttention::new(p, &format!("{name}.block{i}"), width, heads, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpressionEncoder { lift, blocks, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Lift plus position code, before any attention.
    pub fn embed(&self, codes: &Tensor) -> Result<Tensor> {
        let (_, t, _) = codes.dims3()?;
        let pos: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = sinusoid_tensor(&pos, self.width, codes.dtype(), codes.device())?;
        Ok(self.lift.forward(codes)?.broadcast_add(&pe)?)
    }

    /// `(B, T, d_e)` → `(B, T, C)`.
    pub fn forward(&self, codes: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(codes)?;
        for b in &self.blocks {
            x = pre_norm_block(&x, b)?;
        }
        Ok(x)
    }
}

/// `(B, T, C)` → `(B, (T+3)/4, 4C)`. Chunk 0 is frame 0 repeated four
/// times; chunk `j ≥ 1` concatenates frames `4j−3 ..= 4j`.
pub fn chunk_expression(features: &Tensor) -> Result<Tensor> {
    let (b, t, c) = features.dims3()?;
    check_frames(t)?;
    let first = features.narrow(1, 0, 1)?;
    let first = Tensor::cat(&[&first, &first, &first, &first], 2)?;
    if t == 1 {
        return Ok(first);
    }
    let rest = features
        .narrow(1, 1, t - 1)?
        .contiguous()?
        .reshape((b, (t - 1) / TEMPORAL_FACTOR, TEMPORAL_FACTOR * c))?;
    Ok(Tensor::cat(&[&first, &rest], 1)?)
}

/// Sinusoid of the scaled flow time through a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    fc1: Linear,
    fc2: Linear,
}

impl TimestepEmbedder {
    pub fn new(p: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(TimestepEmbedder {
            fc1: p.linear(&format!("{name}.fc1"), TIMESTEP_FREQ_DIM, dim, true, false)?,
            fc2: p.linear(&format!("{name}.fc2"), dim, dim, true, false)?,
        })
    }

    /// One row per batch item.
    pub fn forward(&self, t: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        let scaled: Vec<f64> = t.iter().map(|v| v * TIMESTEP_SCALE).collect();
        let f = sinusoid_tensor(&scaled, TIMESTEP_FREQ_DIM, dtype, device)?;
        Ok(self.fc2.forward(&candle_nn::ops::silu(&self.fc1.forward(&f)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TimestepEmbeddings {
    /// `(B, D)`.
    pub base: Tensor,
    /// `(B, l+1, D)`; row 0 is the reference slot.
    pub per_frame: Tensor,
}

/// `t_i = t + e_i` for video slots, `t` alone for the reference slot.
/// `chunk_proj` maps `4C → D` without bias.
pub fn frame_timestep_embeddings(
    temb: &TimestepEmbedder,
    chunk_proj: &Linear,
    t: &[f64],
    chunked: &Tensor,
) -> Result<TimestepEmbeddings> {
    let (b, _, _) = chunked.dims3()?;
    if t.len() != b {
        return Err(ModelError::shape("timesteps", b, t.len()));
    }
    let base = temb.forward(t, chunked.dtype(), chunked.device())?;
    let base1 = base.unsqueeze(1)?;
    let e = chunk_proj.forward(chunked)?;
    let per_frame = Tensor::cat(&[&base1, &e.broadcast_add(&base1)?], 1)?;
    Ok(TimestepEmbeddings { base, per_frame })
}

/// Channel layout of a condition bundle:
/// `[latent c | normal c (optional) | ray 6 | reference group c (optional)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleLayout {
    pub latent_channels: usize,
    pub normals: bool,
    pub ref_channel_group: bool,
}

impl BundleLayout {
    pub fn latent(&self) -> Range<usize> {
        0..self.latent_channels
    }

    pub fn normal(&self) -> Option<Range<usize>> {
        let c = self.latent_channels;
        self.normals.then_some(c..2 * c)
    }

    pub fn ray(&self) -> Range<usize> {
        let start = self.latent_channels * if self.normals { 2 } else { 1 };
        start..start + RAY_CHANNELS
    }

    pub fn reference(&self) -> Option<Range<usize>> {
        let start = self.ray().end;
        self.ref_channel_group.then_some(start..start + self.latent_channels)
    }

    pub fn channels(&self) -> usize {
        self.reference().map_or(self.ray().end, |r| r.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// `(l+1, h, w, C_in)`; slot 0 is the reference slot.
    pub stack: Array4<f64>,
    pub layout: BundleLayout,
}

/// Identity-camera ray map at latent resolution.
pub fn identity_rays(intr: &Intrinsics, h: usize, w: usize) -> Result<Array3<f64>> {
    Ok(plucker_ray_map(&CameraPose::identity(), intr, h, w)?.data)
}

/// Assembles the fused input. `rays` covers video slots only; slot 0 gets the
/// identity-camera map. `normals` must be present iff the layout asks for it.
pub fn fuse_conditions(
    layout: BundleLayout,
    ref_latent: ArrayView3<'_, f64>,
    noisy: ArrayView4<'_, f64>,
    normals: Option<ArrayView4<'_, f64>>,
    rays: ArrayView4<'_, f64>,
    intr: &Intrinsics,
) -> Result<ConditionBundle> {
    let (l, h, w, c) = noisy.dim();
    if c != layout.latent_channels {
        return Err(ModelError::shape("noisy_latents channels", layout.latent_channels, c));
    }
    if ref_latent.dim() != (h, w, c) {
        return Err(ModelError::shape("ref_latent", (h, w, c), ref_latent.dim()));
    }
    match (&normals, layout.normals) {
        (Some(n), true) if n.dim() != (l, h, w, c) => {
            return Err(ModelError::shape("normal_latents", (l, h, w, c), n.dim()));
        }
        (None, true) => return Err(ModelError::shape("normal_latents", (l, h, w, c), "missing")),
        (Some(_), false) => return Err(ModelError::shape("normal_latents", "absent (normals disabled)", "present")),
        _ => {}
    }
    if rays.dim() != (l, h, w, RAY_CHANNELS) {
        return Err(ModelError::shape("ray_maps", (l, h, w, RAY_CHANNELS), rays.dim()));
    }
    let mut stack = Array4::zeros((l + 1, h, w, layout.channels()));
    let lat = layout.latent();
    stack.slice_mut(s![0, .., .., lat.clone()]).assign(&ref_latent);
    stack.slice_mut(s![1.., .., .., lat]).assign(&noisy);
    if let (Some(n), Some(r)) = (normals, layout.normal()) {
        stack.slice_mut(s![1.., .., .., r]).assign(&n);
    }
    let ray = layout.ray();
    stack.slice_mut(s![0, .., .., ray.clone()]).assign(&identity_rays(intr, h, w)?);
    stack.slice_mut(s![1.., .., .., ray]).assign(&rays);
    if let Some(r) = layout.reference() {
        stack.slice_mut(s![0, .., .., r]).assign(&ref_latent);
    }
    Ok(ConditionBundle { stack, layout })
}

/// Source frame whose camera conditions video slot `j`: the last frame the
/// codec packs into that slot.
pub fn slot_camera_frame(j: usize) -> usize {
    TEMPORAL_FACTOR * j
}

/// `(l, h, w, 6)` ray maps for the video slots of a `T`-frame trajectory,
/// relative to `reference`.
pub fn video_ray_maps(traj: &Trajectory, reference: &CameraPose, h: usize, w: usize) -> Result<Array4<f64>> {
    check_frames(traj.len())?;
    let l = num_chunks(traj.len());
    let mut out = Array4::zeros((l, h, w, RAY_CHANNELS));
    for j in 0..l {
        let rel = relative_pose(&traj.poses[slot_camera_frame(j)], reference)?;
        out.index_axis_mut(Axis(0), j)
            .assign(&plucker_ray_map(&rel, &traj.intrinsics, h, w)?.data);
    }
    Ok(out)
}

/// Projected fiducials per frame: `(T, K, 3)` holding pixel `u`, `v` and a
/// validity flag (1 if in front of the camera and inside the image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTrack {
    pub width: u32,
    pub height: u32,
    pub points: Vec<[[f64; 3]; NUM_FIDUCIALS]>,
}

impl LandmarkTrack {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Coordinates mapped to `[-1, 1]`; invalid points become `(0, 0, 0)`.
    pub fn normalized(&self) -> Array3<f64> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        Array3::from_shape_fn((self.points.len(), NUM_FIDUCIALS, 3), |(t, k, c)| {
            let [u, v, ok] = self.points[t][k];
            match (ok > 0.5, c) {
                (false, _) => 0.0,
                (true, 0) => u / w * 2.0 - 1.0,
                (true, 1) => v / h * 2.0 - 1.0,
                (true, _) => 1.0,
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("landmark track serializes")
    }
}

pub fn landmark_track_from(
    identity: &IdentityParams,
    traj: &Trajectory,
    expressions: &[ExpressionParams],
    head_poses: &[HeadPose],
) -> Result<LandmarkTrack> {
    let n = traj.len();
    if expressions.len() != n || head_poses.len() != n {
        return Err(ModelError::shape("landmark annotations", n, expressions.len().min(head_poses.len())));
    }
    let rig = Rig::new(identity)?;
    let intr = traj.intrinsics;
    let (w, h) = (f64::from(intr.width), f64::from(intr.height));
    let points = (0..n)
        .map(|i| {
            let kp = rig.keypoints(&expressions[i], &head_poses[i]);
            let mut row = [[0.0; 3]; NUM_FIDUCIALS];
            for (k, p) in kp.points.iter().enumerate() {
                if let Some((u, v)) = intr.project(&traj.poses[i].transform_point(p)) {
                    let inside = (0.0..w).contains(&u) && (0.0..h).contains(&v);
                    row[k] = [u, v, if inside { 1.0 } else { 0.0 }];
                }
            }
            row
        })
        .collect();
    Ok(LandmarkTrack {
        width: intr.width,
        height: intr.height,
        points,
    })
}

pub fn landmark_track(sample: &SequenceSample) -> Result<LandmarkTrack> {
    landmark_track_from(&sample.identity, &sample.trajectory, &sample.expressions, &sample.head_poses)
}

/// Alternating spatial (across points) and temporal (across frames)
/// attention, mean-pooled over points.
#[derive(Debug, Clone)]
pub struct LandmarkEncoder {
    lift: Linear,
    spatial: Vec<SelfAttention>,
    temporal: Vec<SelfAttention>,
    width: usize,
}

impl LandmarkEncoder {
    pub fn new(p: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        let lift = p.linear(&format!("{name}.lift"), 3, width, true, false)?;
        let mut spatial = Vec::new();
        let mut temporal = Vec::new();
        for i in 0..2 {
            spatial.push(SelfAttention::new(p, &format!("{name}.spatial{i}"), width, heads, true)?);
            temporal.push(SelfAttention::new(p, &format!("{name}.temporal{i}"), width, heads, true)?);
        }
        Ok(LandmarkEncoder {
            lift,
            spatial,
            temporal,
            width,
        })
    }

    /// `(B, T, K, 3)` normalized landmarks → `(B, T, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, k, _) = x.dims4()?;
        let c = self.width;
        let pos: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = sinusoid_tensor(&pos, c, x.dtype(), x.device())?.reshape((1, t, 1, c))?;
        let mut h = self.lift.forward(x)?.broadcast_add(&pe)?;
        for (sa, ta) in self.spatial.iter().zip(&self.temporal) {
            h = pre_norm_block(&h.reshape((b * t, k, c))?, sa)?.reshape((b, t, k, c))?;
            let ht = h.permute((0, 2, 1, 3))?.contiguous()?.reshape((b * k, t, c))?;
            h = pre_norm_block(&ht, ta)?
                .reshape((b, k, t, c))?
                .permute((0, 2, 1, 3))?
                .contiguous()?;
        }
        Ok(h.mean(D::Minus2)?)
    }
}
