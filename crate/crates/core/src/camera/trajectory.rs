use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CameraPose, Intrinsics, MonotoneCubic, DEFAULT_FOV_DEG, WORLD_UP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Spin,
    Spiral,
    Static,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spin" => Ok(TrajectoryKind::Spin),
            "spiral" => Ok(TrajectoryKind::Spiral),
            "static" => Ok(TrajectoryKind::Static),
            other => Err(Error::arg("kind", format!("unknown trajectory kind `{other}`"))),
        }
    }
}

impl TrajectoryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryKind::Spin => "spin",
            TrajectoryKind::Spiral => "spiral",
            TrajectoryKind::Static => "static",
        }
    }
}

/// One camera pose per frame plus the shared intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord")]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub intrinsics: Intrinsics,
    pub poses: Vec<CameraPose>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    kind: TrajectoryKind,
    intrinsics: Intrinsics,
    poses: Vec<CameraPose>,
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        Trajectory::new(r.kind, r.intrinsics, r.poses)
    }
}

impl Trajectory {
    pub fn new(kind: TrajectoryKind, intrinsics: Intrinsics, poses: Vec<CameraPose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::arg("poses", "trajectory must contain at least one pose"));
        }
        intrinsics.validate()?;
        for p in &poses {
            p.validate()?;
        }
        Ok(Trajectory {
            kind,
            intrinsics,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Sub-trajectory of `len` frames starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Trajectory> {
        if len == 0 || start + len > self.poses.len() {
            return Err(Error::shape(
                "trajectory window",
                format!("{start}+{len} <= {}", self.poses.len()),
                start + len,
            ));
        }
        Trajectory::new(self.kind, self.intrinsics, self.poses[start..start + len].to_vec())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Camera position at `distance` from `look_at`, `yaw` radians around the
/// vertical axis (0 = in front of the subject, which faces `-z`) and
/// `elevation` radians above the horizontal plane.
pub fn orbit_position(look_at: &Vector3<f64>, yaw: f64, elevation: f64, distance: f64) -> Vector3<f64> {
    let (se, ce) = elevation.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    look_at + distance * Vector3::new(ce * sy, -se, -ce * cy)
}

/// `(yaw, elevation, distance)` of a camera center relative to `look_at`,
/// inverse of [`orbit_position`].
pub fn view_angles(pose: &CameraPose, look_at: &Vector3<f64>) -> (f64, f64, f64) {
    let rel = pose.center() - look_at;
    let distance = rel.norm();
    let yaw = rel.x.atan2(-rel.z);
    let elevation = (-rel.y / distance).clamp(-1.0, 1.0).asin();
    (yaw, elevation, distance)
}

pub fn static_trajectory(pose: CameraPose, frames: usize, intrinsics: Intrinsics) -> Result<Trajectory> {
    if frames == 0 {
        return Err(Error::arg("frames", "must be at least 1"));
    }
    Trajectory::new(TrajectoryKind::Static, intrinsics, vec![pose; frames])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinParams {
    pub frames: usize,
    /// Camera-to-target distance bounds in meters.
    pub distance_range: (f64, f64),
    pub max_elevation_deg: f64,
    pub look_at: Vector3<f64>,
    /// Major/minor axis ratio range of the oval.
    pub axis_ratio_range: (f64, f64),
    pub intrinsics: Intrinsics,
}

impl Default for SpinParams {
    fn default() -> Self {
        SpinParams {
            frames: 100,
            distance_range: (0.25, 0.40),
            max_elevation_deg: 5.0,
            look_at: Vector3::zeros(),
            axis_ratio_range: (1.0, 1.3),
            intrinsics: Intrinsics::from_fov(DEFAULT_FOV_DEG, 64, 64).expect("valid default"),
        }
    }
}

fn check_distance_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::arg(
            "distance_range",
            format!("need 0 < min <= max, got ({lo}, {hi})"),
        ));
    }
    Ok(())
}

/// Keeps samples strictly inside `[lo, hi]` so rounding in later
/// trigonometry cannot step outside the bounds.
fn shrink((lo, hi): (f64, f64)) -> (f64, f64) {
    let pad = (hi - lo) * 1e-9;
    (lo + pad, hi - pad)
}

/// Closed oval orbit around `look_at` with bounded distance and elevation.
pub fn spin_trajectory(seed: u64, params: &SpinParams) -> Result<Trajectory> {
    if params.frames == 0 {
        return Err(Error::arg("frames", "must be at least 1"));
    }
    check_distance_range(params.distance_range)?;
    let (rlo, rhi) = params.axis_ratio_range;
    if !(rlo >= 1.0 && rlo <= rhi) {
        return Err(Error::arg("axis_ratio_range", "need 1 <= lo <= hi"));
    }
    if !(params.max_elevation_deg >= 0.0 && params.max_elevation_deg < 90.0) {
        return Err(Error::arg("max_elevation_deg", "must lie in [0, 90)"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dmin, dmax) = shrink(params.distance_range);
    let ratio = rng.random_range(rlo..=rhi).min(dmax / dmin);
    let minor = rng.random_range(dmin..=dmax / ratio);
    let major = (ratio * minor).min(dmax);
    let axis_angle = rng.random_range(0.0..PI);
    let start = rng.random_range(0.0..TAU);
    let direction = if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let max_el = params.max_elevation_deg.to_radians() * (1.0 - 1e-9);
    let amplitude = rng.random_range(0.0..=1.0) * max_el;
    let cycles = f64::from(rng.random_range(1u32..=2));
    let phase = rng.random_range(0.0..TAU);

    let n = params.frames as f64;
    let poses = (0..params.frames)
        .map(|k| {
            let s = k as f64 / n;
            let yaw = start + direction * TAU * s;
            let (sa, ca) = (yaw - axis_angle).sin_cos();
            let radius = (major * minor / ((minor * ca).powi(2) + (major * sa).powi(2)).sqrt())
                .clamp(dmin, dmax);
            let elevation = amplitude * (cycles * TAU * s + phase).sin();
            let eye = orbit_position(&params.look_at, yaw, elevation, radius);
            CameraPose::look_at(eye, params.look_at, WORLD_UP)
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(TrajectoryKind::Spin, params.intrinsics, poses)
}

/// How frames are distributed along a spiral path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spacing {
    /// Equal arc length between consecutive cameras.
    #[default]
    ArcLength,
    /// Equal steps in the knot parameter; with `frames == n_seeds` every
    /// frame lands on an anchor.
    Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpiralParams {
    pub frames: usize,
    pub n_seeds: usize,
    pub yaw_range_deg: (f64, f64),
    pub distance_range: (f64, f64),
    pub max_elevation_deg: f64,
    pub look_at: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub spacing: Spacing,
}

impl Default for SpiralParams {
    fn default() -> Self {
        SpiralParams {
            frames: 100,
            n_seeds: 4,
            yaw_range_deg: (-90.0, 90.0),
            distance_range: (0.25, 0.40),
            max_elevation_deg: 5.0,
            look_at: Vector3::zeros(),
            intrinsics: Intrinsics::from_fov(DEFAULT_FOV_DEG, 64, 64).expect("valid default"),
            spacing: Spacing::ArcLength,
        }
    }
}

/// Smooth camera path through randomly sampled anchors, interpolated in
/// `(yaw, elevation, distance)` around the look-at point.
#[derive(Debug, Clone)]
pub struct SpiralPath {
    look_at: Vector3<f64>,
    yaw: MonotoneCubic,
    elevation: MonotoneCubic,
    distance: MonotoneCubic,
    anchors: Vec<Vector3<f64>>,
}

impl SpiralPath {
    pub fn anchors(&self) -> &[Vector3<f64>] {
        &self.anchors
    }

    /// Parameter range is `[0, anchors - 1]`; integer values hit anchors.
    pub fn position(&self, u: f64) -> Vector3<f64> {
        orbit_position(
            &self.look_at,
            self.yaw.eval(u),
            self.elevation.eval(u),
            self.distance.eval(u),
        )
    }

    fn params(&self, frames: usize, spacing: Spacing) -> Vec<f64> {
        let last = (self.anchors.len() - 1) as f64;
        if frames == 1 {
            return vec![0.0];
        }
        match spacing {
            Spacing::Parameter => (0..frames)
                .map(|i| i as f64 * last / (frames - 1) as f64)
                .collect(),
            Spacing::ArcLength => {
                let dense = 256 * (self.anchors.len() - 1);
                let us: Vec<f64> = (0..=dense).map(|i| i as f64 * last / dense as f64).collect();
                let mut cum = vec![0.0];
                for w in us.windows(2) {
                    let step = (self.position(w[1]) - self.position(w[0])).norm();
                    cum.push(cum.last().unwrap() + step);
                }
                let total = *cum.last().unwrap();
                if total == 0.0 {
                    return (0..frames)
                        .map(|i| i as f64 * last / (frames - 1) as f64)
                        .collect();
                }
                let mut seg = 0;
                (0..frames)
                    .map(|i| {
                        let target = total * i as f64 / (frames - 1) as f64;
                        while seg + 1 < dense && cum[seg + 1] < target {
                            seg += 1;
                        }
                        let span = cum[seg + 1] - cum[seg];
                        let f = if span > 0.0 {
                            ((target - cum[seg]) / span).clamp(0.0, 1.0)
                        } else {
                            0.0
                        };
                        us[seg] + f * (us[seg + 1] - us[seg])
                    })
                    .collect()
            }
        }
    }
}

fn check_spiral(params: &SpiralParams) -> Result<()> {
    if params.n_seeds < 2 {
        return Err(Error::arg("n_seeds", "need at least 2 anchors"));
    }
    if params.frames == 0 {
        return Err(Error::arg("frames", "must be at least 1"));
    }
    let (lo, hi) = params.yaw_range_deg;
    if !(lo < hi) {
        return Err(Error::arg("yaw_range_deg", format!("need lo < hi, got ({lo}, {hi})")));
    }
    if !(params.max_elevation_deg >= 0.0 && params.max_elevation_deg < 90.0) {
        return Err(Error::arg("max_elevation_deg", "must lie in [0, 90)"));
    }
    check_distance_range(params.distance_range)
}

/// Samples the anchors for `seed` and fits the interpolating path.
pub fn spiral_path(seed: u64, params: &SpiralParams) -> Result<SpiralPath> {
    check_spiral(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ylo, yhi) = shrink((
        params.yaw_range_deg.0.to_radians(),
        params.yaw_range_deg.1.to_radians(),
    ));
    let (dlo, dhi) = shrink(params.distance_range);
    let max_el = params.max_elevation_deg.to_radians() * (1.0 - 1e-9);

    let mut yaws: Vec<f64> = (0..params.n_seeds)
        .map(|_| rng.random_range(ylo..=yhi))
        .collect();
    // Sweep in one direction so the path winds around the subject.
    yaws.sort_by(f64::total_cmp);
    if rng.random_bool(0.5) {
        yaws.reverse();
    }
    let elevations: Vec<f64> = (0..params.n_seeds)
        .map(|_| rng.random_range(-max_el..=max_el))
        .collect();
    let distances: Vec<f64> = (0..params.n_seeds)
        .map(|_| rng.random_range(dlo..=dhi))
        .collect();

    let anchors = (0..params.n_seeds)
        .map(|k| orbit_position(&params.look_at, yaws[k], elevations[k], distances[k]))
        .collect();
    Ok(SpiralPath {
        look_at: params.look_at,
        yaw: MonotoneCubic::new(&yaws),
        elevation: MonotoneCubic::new(&elevations),
        distance: MonotoneCubic::new(&distances),
        anchors,
    })
}

pub fn spiral_trajectory(seed: u64, params: &SpiralParams) -> Result<Trajectory> {
    let path = spiral_path(seed, params)?;
    let poses = path
        .params(params.frames, params.spacing)
        .into_iter()
        .map(|u| CameraPose::look_at(path.position(u), params.look_at, WORLD_UP))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(TrajectoryKind::Spiral, params.intrinsics, poses)
}
