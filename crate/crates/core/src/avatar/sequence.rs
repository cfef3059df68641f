//! Synthetic training clips: four capture styles that differ in which of
//! camera, expression and head pose move.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExpressionParams, HeadPose, IdentityParams, Rig, EXPRESSION_DIM};
use crate::camera::{
    orbit_position, spin_trajectory, spiral_trajectory, static_trajectory, CameraPose, Intrinsics,
    SpinParams, SpiralParams, Trajectory, DEFAULT_FOV_DEG, WORLD_UP,
};
use crate::codec::DEFAULT_SPATIAL_FACTOR;
use crate::error::{Error, Result};
use crate::image_io;
use crate::rasterizer::render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    PhoneLike,
    StudioLike,
    ViewSweep,
    DynamicSweep,
}

impl SequenceKind {
    pub const ALL: [SequenceKind; 4] = [
        SequenceKind::PhoneLike,
        SequenceKind::StudioLike,
        SequenceKind::ViewSweep,
        SequenceKind::DynamicSweep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SequenceKind::PhoneLike => "phone_like",
            SequenceKind::StudioLike => "studio_like",
            SequenceKind::ViewSweep => "view_sweep",
            SequenceKind::DynamicSweep => "dynamic_sweep",
        }
    }
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SequenceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg("kind", format!("unknown sequence kind `{s}`")))
    }
}

/// Ornstein-Uhlenbeck parameters for the expression and head-pose signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub theta: f64,
    pub sigma: f64,
    /// Centered moving-average window applied after the random walk.
    pub smooth_window: usize,
    pub max_yaw: f64,
    pub max_pitch: f64,
    pub max_roll: f64,
    pub max_neck_offset: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            theta: 0.15,
            sigma: 0.12,
            smooth_window: 5,
            max_yaw: 0.45,
            max_pitch: 0.25,
            max_roll: 0.15,
            max_neck_offset: 0.008,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOptions {
    pub frames: usize,
    pub resolution: u32,
    pub spatial_factor: usize,
    pub distance_range: (f64, f64),
    /// Half-width of the uniform look-at jitter, meters.
    pub look_at_jitter: f64,
    pub studio_max_yaw_deg: f64,
    pub studio_max_elevation_deg: f64,
    pub dynamics: DynamicsConfig,
}

impl SequenceOptions {
    pub fn new(frames: usize, resolution: u32) -> Self {
        SequenceOptions {
            frames,
            resolution,
            spatial_factor: DEFAULT_SPATIAL_FACTOR,
            distance_range: (0.25, 0.40),
            look_at_jitter: 0.01,
            studio_max_yaw_deg: 60.0,
            studio_max_elevation_deg: 10.0,
            dynamics: DynamicsConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % 4 != 1 {
            return Err(Error::shape("T", "T = 1 (mod 4)", self.frames));
        }
        if self.resolution == 0 || self.resolution as usize % self.spatial_factor != 0 {
            return Err(Error::shape(
                "resolution",
                format!("a positive multiple of {}", self.spatial_factor),
                self.resolution,
            ));
        }
        Ok(())
    }
}

/// One rendered clip and its ground-truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub kind: SequenceKind,
    pub seed: u64,
    pub identity: IdentityParams,
    /// `T × H × W × 3` color frames.
    pub frames: Array4<u8>,
    /// `T × H × W × 3` camera-space normal maps of the body mesh.
    pub normal_maps: Array4<u8>,
    pub trajectory: Trajectory,
    pub expressions: Vec<ExpressionParams>,
    pub head_poses: Vec<HeadPose>,
    pub look_at: [f64; 3],
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expressions.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w, _) = self.frames.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t % 4 != 1 {
            return Err(Error::shape("T", "T = 1 (mod 4)", t));
        }
        let lens = [
            self.frames.dim().0,
            self.normal_maps.dim().0,
            self.trajectory.len(),
            self.head_poses.len(),
        ];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::shape("sequence lengths", t, format!("{lens:?}")));
        }
        if self.frames.dim() != self.normal_maps.dim() {
            return Err(Error::shape(
                "normal_maps",
                format!("{:?}", self.frames.dim()),
                format!("{:?}", self.normal_maps.dim()),
            ));
        }
        Ok(())
    }

    pub fn frame_f32(&self, i: usize) -> Array3<f32> {
        image_io::to_f32(self.frames.index_axis(Axis(0), i))
    }

    pub fn frames_f32(&self) -> Array4<f32> {
        self.frames.mapv(|v| f32::from(v) / 255.0)
    }

    pub fn normals_f32(&self) -> Array4<f32> {
        self.normal_maps.mapv(|v| f32::from(v) / 255.0)
    }

    /// Sub-clip of `len` frames starting at `start`; `len` must be `1 (mod 4)`.
    pub fn window(&self, start: usize, len: usize) -> Result<SequenceSample> {
        if len % 4 != 1 {
            return Err(Error::shape("window length", "T = 1 (mod 4)", len));
        }
        if start + len > self.len() {
            return Err(Error::arg(
                "window",
                format!("{start}+{len} exceeds sequence length {}", self.len()),
            ));
        }
        let r = start..start + len;
        Ok(SequenceSample {
            kind: self.kind,
            seed: self.seed,
            identity: self.identity.clone(),
            frames: self.frames.slice(s![r.clone(), .., .., ..]).to_owned(),
            normal_maps: self.normal_maps.slice(s![r.clone(), .., .., ..]).to_owned(),
            trajectory: self.trajectory.window(start, len)?,
            expressions: self.expressions[r.clone()].to_vec(),
            head_poses: self.head_poses[r].to_vec(),
            look_at: self.look_at,
        })
    }
}

/// Mean-reverting random walk in `[lo, hi]`, smoothed then clamped.
fn ou_signal(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, dyn_: &DynamicsConfig) -> Vec<f64> {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut x = rng.random_range(-1.0..=1.0);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        raw.push(x);
        let noise: f64 = rng.sample(StandardNormal);
        x += -dyn_.theta * x + dyn_.sigma * noise;
    }
    let w = dyn_.smooth_window.max(1) / 2;
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(w), (i + w).min(n - 1));
            let m = raw[a..=b].iter().sum::<f64>() / (b - a + 1) as f64;
            (mid + half * m).clamp(lo, hi)
        })
        .collect()
}

fn expression_track(rng: &mut ChaCha8Rng, n: usize, dyn_: &DynamicsConfig) -> Vec<ExpressionParams> {
    let channels: Vec<Vec<f64>> = (0..EXPRESSION_DIM).map(|_| ou_signal(rng, n, 0.0, 1.0, dyn_)).collect();
    (0..n)
        .map(|i| ExpressionParams {
            values: std::array::from_fn(|k| channels[k][i]),
        })
        .collect()
}

fn pose_track(rng: &mut ChaCha8Rng, n: usize, dyn_: &DynamicsConfig) -> Vec<HeadPose> {
    let yaw = ou_signal(rng, n, -dyn_.max_yaw, dyn_.max_yaw, dyn_);
    let pitch = ou_signal(rng, n, -dyn_.max_pitch, dyn_.max_pitch, dyn_);
    let roll = ou_signal(rng, n, -dyn_.max_roll, dyn_.max_roll, dyn_);
    let o = dyn_.max_neck_offset;
    let off: Vec<Vec<f64>> = (0..3).map(|_| ou_signal(rng, n, -o, o, dyn_)).collect();
    (0..n)
        .map(|i| HeadPose {
            yaw: yaw[i],
            pitch: pitch[i],
            roll: roll[i],
            neck_offset: [off[0][i], off[1][i], off[2][i]],
        })
        .collect()
}

fn frozen_state(rng: &mut ChaCha8Rng, dyn_: &DynamicsConfig) -> (ExpressionParams, HeadPose) {
    let e = ExpressionParams {
        values: std::array::from_fn(|_| rng.random_range(0.0..=1.0)),
    };
    let o = dyn_.max_neck_offset;
    let p = HeadPose {
        yaw: rng.random_range(-dyn_.max_yaw..=dyn_.max_yaw),
        pitch: rng.random_range(-dyn_.max_pitch..=dyn_.max_pitch),
        roll: rng.random_range(-dyn_.max_roll..=dyn_.max_roll),
        neck_offset: std::array::from_fn(|_| rng.random_range(-o..=o)),
    };
    (e, p)
}

/// Spin or spiral, decided by a fair coin from `rng`.
fn sweep(rng: &mut ChaCha8Rng, opts: &SequenceOptions, look_at: Vector3<f64>, intr: Intrinsics) -> Result<Trajectory> {
    let traj_seed: u64 = rng.random();
    if rng.random_bool(0.5) {
        let p = SpinParams {
            frames: opts.frames,
            distance_range: opts.distance_range,
            look_at,
            intrinsics: intr,
            ..SpinParams::default()
        };
        spin_trajectory(traj_seed, &p)
    } else {
        let p = SpiralParams {
            frames: opts.frames,
            distance_range: opts.distance_range,
            look_at,
            intrinsics: intr,
            ..SpiralParams::default()
        };
        spiral_trajectory(traj_seed, &p)
    }
}

pub fn generate_sequence(
    kind: SequenceKind,
    identity: &IdentityParams,
    seed: u64,
    frames: usize,
    resolution: u32,
) -> Result<SequenceSample> {
    generate_sequence_with(kind, identity, seed, &SequenceOptions::new(frames, resolution))
}

pub fn generate_sequence_with(
    kind: SequenceKind,
    identity: &IdentityParams,
    seed: u64,
    opts: &SequenceOptions,
) -> Result<SequenceSample> {
    opts.validate()?;
    let rig = Rig::new(identity)?;
    let n = opts.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = Intrinsics::from_fov(DEFAULT_FOV_DEG, opts.resolution, opts.resolution)?;
    let j = opts.look_at_jitter;
    let look_at = Vector3::from_fn(|_, _| rng.random_range(-j..=j));
    let (dlo, dhi) = opts.distance_range;

    let trajectory = match kind {
        SequenceKind::PhoneLike => {
            let d = rng.random_range(dlo..=dhi);
            let pose = CameraPose::look_at(look_at + Vector3::new(0.0, 0.0, -d), look_at, WORLD_UP)?;
            static_trajectory(pose, n, intr)?
        }
        SequenceKind::StudioLike => {
            let y = opts.studio_max_yaw_deg.to_radians();
            let e = opts.studio_max_elevation_deg.to_radians();
            let eye = orbit_position(
                &look_at,
                rng.random_range(-y..=y),
                rng.random_range(-e..=e),
                rng.random_range(dlo..=dhi),
            );
            static_trajectory(CameraPose::look_at(eye, look_at, WORLD_UP)?, n, intr)?
        }
        SequenceKind::ViewSweep | SequenceKind::DynamicSweep => sweep(&mut rng, opts, look_at, intr)?,
    };

    let (expressions, head_poses) = match kind {
        SequenceKind::ViewSweep => {
            let (e, p) = frozen_state(&mut rng, &opts.dynamics);
            (vec![e; n], vec![p; n])
        }
        _ => (
            expression_track(&mut rng, n, &opts.dynamics),
            pose_track(&mut rng, n, &opts.dynamics),
        ),
    };

    let res = opts.resolution as usize;
    let rendered: Vec<(Array3<u8>, Array3<u8>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cam = &trajectory.poses[i];
            let color = render(&rig.mesh(&expressions[i], &head_poses[i]), cam, &intr)?;
            let normal = render(&rig.body_mesh(&head_poses[i]), cam, &intr)?;
            Ok((image_io::to_u8(color.color.view()), image_io::to_u8(normal.normal_map.view())))
        })
        .collect::<Result<_>>()?;
    let mut frames = Array4::zeros((n, res, res, 3));
    let mut normal_maps = Array4::zeros((n, res, res, 3));
    for (i, (c, nm)) in rendered.into_iter().enumerate() {
        frames.index_axis_mut(Axis(0), i).assign(&c);
        normal_maps.index_axis_mut(Axis(0), i).assign(&nm);
    }

    Ok(SequenceSample {
        kind,
        seed,
        identity: identity.clone(),
        frames,
        normal_maps,
        trajectory,
        expressions,
        head_poses,
        look_at: [look_at.x, look_at.y, look_at.z],
    })
}

/// True when `seed` would make a sweep sequence use a spin path.
pub fn sweep_is_spin(seed: u64, opts: &SequenceOptions) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = opts.look_at_jitter;
    let _: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-j..=j));
    let _: u64 = rng.random();
    rng.random_bool(0.5)
}
