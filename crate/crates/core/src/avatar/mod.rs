//! Procedural head-and-torso avatar: identity parameters, linear blendshape
//! expressions, a rigid neck joint, and analytic fiducial keypoints.
//!
//! The subject faces `-z` with `-y` up. "Left" means the subject's left,
//! which is `+x` and lands on the image right for a frontal camera.

pub mod color;
pub mod dataset;
pub mod sequence;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::euler_rotation;
use crate::error::{Error, Result};
use crate::rasterizer::TriMesh;

pub use dataset::{generate_dataset, load_sequence, Dataset, DatasetConfig, KindCount};
pub use sequence::{generate_sequence, SequenceKind, SequenceSample};

pub const EXPRESSION_DIM: usize = 6;
pub const EXPRESSION_NAMES: [&str; EXPRESSION_DIM] = [
    "left_eye_open",
    "right_eye_open",
    "mouth_open",
    "mouth_width",
    "left_brow_raise",
    "right_brow_raise",
];
pub const LEFT_EYE_OPEN: usize = 0;
pub const RIGHT_EYE_OPEN: usize = 1;
pub const MOUTH_OPEN: usize = 2;
pub const MOUTH_WIDTH: usize = 3;
pub const LEFT_BROW_RAISE: usize = 4;
pub const RIGHT_BROW_RAISE: usize = 5;

pub const NUM_FIDUCIALS: usize = 8;
pub const FIDUCIAL_NAMES: [&str; NUM_FIDUCIALS] = [
    "left_eye",
    "right_eye",
    "left_lid",
    "right_lid",
    "mouth_left",
    "mouth_right",
    "nose_tip",
    "lower_lip",
];
pub const LEFT_EYE: usize = 0;
pub const RIGHT_EYE: usize = 1;
pub const LEFT_LID: usize = 2;
pub const RIGHT_LID: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureColors {
    pub brow: [f32; 3],
    pub eye: [f32; 3],
    pub mouth: [f32; 3],
    pub torso: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IdentityRecord")]
pub struct IdentityParams {
    pub seed: u64,
    /// Ellipsoid semi-axes `(x, y, z)` in meters.
    pub head_radii: [f64; 3],
    pub skin_color: [f32; 3],
    pub feature_colors: FeatureColors,
    /// Full box extents `(x, y, z)` in meters.
    pub torso_size: [f64; 3],
}

#[derive(Deserialize)]
struct IdentityRecord {
    seed: u64,
    head_radii: [f64; 3],
    skin_color: [f32; 3],
    feature_colors: FeatureColors,
    torso_size: [f64; 3],
}

impl TryFrom<IdentityRecord> for IdentityParams {
    type Error = Error;

    fn try_from(r: IdentityRecord) -> Result<Self> {
        let id = IdentityParams {
            seed: r.seed,
            head_radii: r.head_radii,
            skin_color: r.skin_color,
            feature_colors: r.feature_colors,
            torso_size: r.torso_size,
        };
        id.validate()?;
        Ok(id)
    }
}

fn low_saturation(rng: &mut ChaCha8Rng, hue: (f32, f32), sat: (f32, f32), val: (f32, f32)) -> [f32; 3] {
    color::hsv_to_rgb(
        rng.random_range(hue.0..=hue.1),
        rng.random_range(sat.0..=sat.1),
        rng.random_range(val.0..=val.1),
    )
}

impl IdentityParams {
    /// Samples a random identity. Every color stays below the fiducial
    /// saturation threshold so the palette remains unambiguous.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_radii = [
            rng.random_range(0.080..=0.090),
            rng.random_range(0.105..=0.115),
            rng.random_range(0.090..=0.100),
        ];
        let skin_color = low_saturation(&mut rng, (15.0, 40.0), (0.15, 0.4), (0.55, 0.9));
        let feature_colors = FeatureColors {
            brow: low_saturation(&mut rng, (10.0, 40.0), (0.2, 0.45), (0.12, 0.3)),
            eye: low_saturation(&mut rng, (180.0, 260.0), (0.0, 0.3), (0.04, 0.12)),
            mouth: low_saturation(&mut rng, (350.0, 370.0), (0.3, 0.45), (0.2, 0.32)),
            torso: low_saturation(&mut rng, (0.0, 360.0), (0.05, 0.4), (0.3, 0.7)),
        };
        let torso_size = [
            rng.random_range(0.20..=0.26),
            rng.random_range(0.14..=0.18),
            rng.random_range(0.10..=0.13),
        ];
        IdentityParams {
            seed,
            head_radii,
            skin_color,
            feature_colors,
            torso_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_radii.iter().chain(&self.torso_size).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::arg("identity", "radii and torso sizes must be positive"));
        }
        let fc = &self.feature_colors;
        let colors = [self.skin_color, fc.brow, fc.eye, fc.mouth, fc.torso];
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::arg("identity", "colors must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "[f64; EXPRESSION_DIM]", into = "[f64; EXPRESSION_DIM]")]
pub struct ExpressionParams {
    pub values: [f64; EXPRESSION_DIM],
}

impl TryFrom<[f64; EXPRESSION_DIM]> for ExpressionParams {
    type Error = Error;

    fn try_from(values: [f64; EXPRESSION_DIM]) -> Result<Self> {
        ExpressionParams::new(values)
    }
}

impl From<ExpressionParams> for [f64; EXPRESSION_DIM] {
    fn from(e: ExpressionParams) -> Self {
        e.values
    }
}

impl ExpressionParams {
    pub fn new(values: [f64; EXPRESSION_DIM]) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(
                "expression",
                format!("{} = {} is outside [0, 1]", EXPRESSION_NAMES[k], values[k]),
            ));
        }
        Ok(ExpressionParams { values })
    }

    pub fn neutral() -> Self {
        ExpressionParams::default()
    }

    /// Mean of the two eye-open components.
    pub fn eye_open(&self) -> f64 {
        0.5 * (self.values[LEFT_EYE_OPEN] + self.values[RIGHT_EYE_OPEN])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "HeadPoseRecord", into = "HeadPoseRecord")]
pub struct HeadPose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub neck_offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct HeadPoseRecord {
    yaw: f64,
    pitch: f64,
    roll: f64,
    neck_offset: [f64; 3],
}

impl TryFrom<HeadPoseRecord> for HeadPose {
    type Error = Error;

    fn try_from(r: HeadPoseRecord) -> Result<Self> {
        HeadPose::new(r.yaw, r.pitch, r.roll, r.neck_offset)
    }
}

impl From<HeadPose> for HeadPoseRecord {
    fn from(p: HeadPose) -> Self {
        HeadPoseRecord {
            yaw: p.yaw,
            pitch: p.pitch,
            roll: p.roll,
            neck_offset: p.neck_offset,
        }
    }
}

impl HeadPose {
    pub fn new(yaw: f64, pitch: f64, roll: f64, neck_offset: [f64; 3]) -> Result<Self> {
        use std::f64::consts::{FRAC_PI_2, PI};
        if !(yaw.abs() <= PI && pitch.abs() <= FRAC_PI_2 && roll.abs() <= PI) {
            return Err(Error::arg(
                "head_pose",
                format!("angles out of range: yaw {yaw}, pitch {pitch}, roll {roll}"),
            ));
        }
        if neck_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("head_pose", "neck offset must be finite"));
        }
        Ok(HeadPose {
            yaw,
            pitch,
            roll,
            neck_offset,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.yaw == 0.0 && self.pitch == 0.0 && self.roll == 0.0 && self.neck_offset == [0.0; 3]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_rotation(self.yaw, self.pitch, self.roll)
    }
}

/// World-space fiducial positions and outward normals, indexed like
/// [`FIDUCIAL_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints3D {
    pub points: [Vector3<f64>; NUM_FIDUCIALS],
    pub normals: [Vector3<f64>; NUM_FIDUCIALS],
}

impl Keypoints3D {
    pub fn get(&self, name: &str) -> Option<Vector3<f64>> {
        FIDUCIAL_NAMES.iter().position(|n| *n == name).map(|k| self.points[k])
    }

    /// Distance from eye center to lid apex for eye `0` (left) or `1` (right).
    pub fn aperture(&self, eye: usize) -> f64 {
        (self.points[LEFT_LID + eye] - self.points[LEFT_EYE + eye]).norm()
    }
}

/// Geometric constants of the rig, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub eye_aperture_min: f64,
    pub eye_aperture_slope: f64,
    pub brow_raise: f64,
    pub mouth_half_width: f64,
    pub mouth_width_slope: f64,
    pub mouth_half_height: f64,
    pub mouth_open_slope: f64,
    pub marker_radius: f64,
    pub feature_lift: f64,
    pub marker_lift: f64,
    pub lat_segments: usize,
    pub lon_segments: usize,
    pub disc_segments: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            eye_aperture_min: 0.012,
            eye_aperture_slope: 0.012,
            brow_raise: 0.008,
            mouth_half_width: 0.018,
            mouth_width_slope: 0.008,
            mouth_half_height: 0.002,
            mouth_open_slope: 0.012,
            marker_radius: 0.0055,
            feature_lift: 0.0015,
            marker_lift: 0.003,
            lat_segments: 14,
            lon_segments: 20,
            disc_segments: 10,
        }
    }
}

type Blend = Vec<(u32, Vector3<f64>)>;

#[derive(Debug, Clone)]
struct FiducialAnchor {
    base: Vector3<f64>,
    normal: Vector3<f64>,
    shapes: Vec<(usize, Vector3<f64>)>,
}

/// Precomputed avatar: base mesh, sparse blendshapes and fiducial anchors.
#[derive(Debug, Clone)]
pub struct Rig {
    pub config: RigConfig,
    pub identity: IdentityParams,
    base: TriMesh,
    blendshapes: [Blend; EXPRESSION_DIM],
    /// Vertices `0..head_vertices` articulate with the neck; the rest is torso.
    head_vertices: usize,
    body: TriMesh,
    body_head_vertices: usize,
    fiducials: Vec<FiducialAnchor>,
    pivot: Vector3<f64>,
}

/// Tangent frame `(t_u, t_v)` with `t_u` along `+x` and `t_v` along `+y`
/// (down) for a front-facing normal.
fn tangent_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let t_u = n.cross(&Vector3::y()).normalize();
    let t_v = t_u.cross(n);
    (t_u, t_v)
}

struct Builder {
    mesh: TriMesh,
    blend: [Blend; EXPRESSION_DIM],
}

impl Builder {
    fn vertex(&mut self, p: Vector3<f64>, n: Vector3<f64>, c: [f32; 3]) -> u32 {
        self.mesh.vertices.push(p);
        self.mesh.vertex_normals.push(n);
        self.mesh.vertex_colors.push(c);
        (self.mesh.vertices.len() - 1) as u32
    }

    /// Adds a face wound so that its geometric normal agrees with `outward`.
    fn face(&mut self, f: [u32; 3], outward: &Vector3<f64>) {
        let v = &self.mesh.vertices;
        let (a, b, c) = (v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]);
        if (b - a).cross(&(c - a)).dot(outward) < 0.0 {
            self.mesh.faces.push([f[0], f[2], f[1]]);
        } else {
            self.mesh.faces.push(f);
        }
    }

    fn shape(&mut self, k: usize, vertex: u32, d: Vector3<f64>) {
        if d != Vector3::zeros() {
            self.blend[k].push((vertex, d));
        }
    }

    /// Flat elliptical patch on the tangent plane at `anchor`. Semi-axes are
    /// `a` along `t_u` and `b` along `t_v`; `da`/`db` grow them linearly with
    /// one expression component and `shift` translates the whole patch.
    #[allow(clippy::too_many_arguments)]
    fn disc(
        &mut self,
        anchor: &Vector3<f64>,
        n: &Vector3<f64>,
        center_offset: Vector3<f64>,
        (a, b): (f64, f64),
        da: Option<(usize, f64)>,
        db: Option<(usize, f64)>,
        shift: &[(usize, Vector3<f64>)],
        color: [f32; 3],
        segments: usize,
    ) -> u32 {
        let (t_u, t_v) = tangent_frame(n);
        let center = anchor + center_offset;
        let ci = self.vertex(center, *n, color);
        for &(k, d) in shift {
            self.shape(k, ci, d);
        }
        let first = ci + 1;
        for s in 0..segments {
            let th = std::f64::consts::TAU * s as f64 / segments as f64;
            let (sn, cs) = th.sin_cos();
            let snap = |x: f64| if x.abs() < 1e-12 { 0.0 } else { x };
            let (sn, cs) = (snap(sn), snap(cs));
            let vi = self.vertex(center + t_u * (a * cs) + t_v * (b * sn), *n, color);
            for &(k, d) in shift {
                self.shape(k, vi, d);
            }
            if let Some((k, rate)) = da {
                self.shape(k, vi, t_u * (rate * cs));
            }
            if let Some((k, rate)) = db {
                self.shape(k, vi, t_v * (rate * sn));
            }
        }
        for s in 0..segments as u32 {
            let next = first + (s + 1) % segments as u32;
            self.face([ci, first + s, next], n);
        }
        ci
    }
}

fn ellipsoid(b: &mut Builder, r: [f64; 3], color: [f32; 3], lat: usize, lon: usize) {
    let normal_at = |p: &Vector3<f64>| Vector3::new(p.x / (r[0] * r[0]), p.y / (r[1] * r[1]), p.z / (r[2] * r[2])).normalize();
    let point = |i: usize, j: usize| {
        let phi = std::f64::consts::PI * i as f64 / lat as f64;
        let lam = std::f64::consts::TAU * j as f64 / lon as f64;
        Vector3::new(r[0] * phi.sin() * lam.sin(), -r[1] * phi.cos(), -r[2] * phi.sin() * lam.cos())
    };
    let top = point(0, 0);
    let bottom = point(lat, 0);
    let t = b.vertex(top, normal_at(&top), color);
    let mut rings = Vec::with_capacity(lat - 1);
    for i in 1..lat {
        let ring: Vec<u32> = (0..lon)
            .map(|j| {
                let p = point(i, j);
                b.vertex(p, normal_at(&p), color)
            })
            .collect();
        rings.push(ring);
    }
    let bt = b.vertex(bottom, normal_at(&bottom), color);
    let centroid = |b: &Builder, f: [u32; 3]| {
        f.iter().map(|&i| b.mesh.vertices[i as usize]).sum::<Vector3<f64>>() / 3.0
    };
    for j in 0..lon {
        let jn = (j + 1) % lon;
        let f = [t, rings[0][j], rings[0][jn]];
        let c = centroid(b, f);
        b.face(f, &c);
        let last = &rings[lat - 2];
        let f = [bt, last[jn], last[j]];
        let c = centroid(b, f);
        b.face(f, &c);
        for i in 0..lat - 2 {
            let (u, d) = (&rings[i], &rings[i + 1]);
            for f in [[u[j], d[j], d[jn]], [u[j], d[jn], u[jn]]] {
                let c = centroid(b, f);
                b.face(f, &c);
            }
        }
    }
}

fn surface_point(r: [f64; 3], x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
    let q = 1.0 - (x / r[0]).powi(2) - (y / r[1]).powi(2);
    let p = Vector3::new(x, y, -r[2] * q.max(0.0).sqrt());
    let n = Vector3::new(p.x / (r[0] * r[0]), p.y / (r[1] * r[1]), p.z / (r[2] * r[2])).normalize();
    (p, n)
}

const NOSE_ANCHOR: (f64, f64) = (0.0, 0.012);
const NOSE_HEIGHT: f64 = 0.02;

fn nose(b: &mut Builder, r: [f64; 3], color: [f32; 3]) -> Vector3<f64> {
    let (p, n) = surface_point(r, NOSE_ANCHOR.0, NOSE_ANCHOR.1);
    let (t_u, t_v) = tangent_frame(&n);
    let base = p - n * 0.002;
    let corners = [
        base - t_u * 0.011 - t_v * 0.013,
        base + t_u * 0.011 - t_v * 0.013,
        base + t_u * 0.011 + t_v * 0.013,
        base - t_u * 0.011 + t_v * 0.013,
    ];
    let apex = p + n * NOSE_HEIGHT + t_v * 0.004;
    for k in 0..4 {
        let (a, c) = (corners[k], corners[(k + 1) % 4]);
        let fn_ = (c - a).cross(&(apex - a));
        let outward = (a + c + apex) / 3.0 - base;
        let fnn = if fn_.dot(&outward) < 0.0 { -fn_ } else { fn_ }.normalize();
        let i = [
            b.vertex(a, fnn, color),
            b.vertex(c, fnn, color),
            b.vertex(apex, fnn, color),
        ];
        b.face(i, &fnn);
    }
    apex
}

fn torso(b: &mut Builder, id: &IdentityParams) {
    let [sx, sy, sz] = id.torso_size;
    let center = Vector3::new(0.0, id.head_radii[1] + 0.02 + sy / 2.0, 0.01);
    let h = Vector3::new(sx / 2.0, sy / 2.0, sz / 2.0);
    let color = id.feature_colors.torso;
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut n = Vector3::zeros();
            n[axis] = sign;
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut quad = [0u32; 4];
            for (q, (su, sv)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].into_iter().enumerate() {
                let mut p = center;
                p[axis] += sign * h[axis];
                p[u] += su * h[u];
                p[v] += sv * h[v];
                quad[q] = b.vertex(p, n, color);
            }
            b.face([quad[0], quad[1], quad[2]], &n);
            b.face([quad[0], quad[2], quad[3]], &n);
        }
    }
}

impl Rig {
    pub fn new(identity: &IdentityParams) -> Result<Self> {
        Rig::with_config(identity, RigConfig::default())
    }

    pub fn with_config(identity: &IdentityParams, config: RigConfig) -> Result<Self> {
        identity.validate()?;
        if config.lat_segments < 3 || config.lon_segments < 3 || config.disc_segments < 3 {
            return Err(Error::arg("rig", "tessellation too coarse"));
        }
        let r = identity.head_radii;
        let fc = identity.feature_colors;
        let mut b = Builder {
            mesh: TriMesh::default(),
            blend: Default::default(),
        };
        ellipsoid(&mut b, r, identity.skin_color, config.lat_segments, config.lon_segments);
        let apex = nose(&mut b, r, identity.skin_color);
        let body_core = b.mesh.clone();

        let seg = config.disc_segments;
        let mut fiducials: Vec<Option<FiducialAnchor>> = vec![None; NUM_FIDUCIALS];
        let mut anchor = |k: usize, base: Vector3<f64>, normal: Vector3<f64>, shapes: Vec<(usize, Vector3<f64>)>| {
            fiducials[k] = Some(FiducialAnchor { base, normal, shapes });
        };

        for (side, sx) in [(0usize, 1.0f64), (1, -1.0)] {
            let (p, n) = surface_point(r, sx * 0.035, -0.015);
            let (_, t_v) = tangent_frame(&n);
            let eye_k = LEFT_EYE_OPEN + side;
            let brow_k = LEFT_BROW_RAISE + side;
            b.disc(&p, &n, n * config.feature_lift, (0.013, 0.003), None, Some((eye_k, 0.009)), &[], fc.eye, seg);
            b.disc(
                &p,
                &n,
                -t_v * 0.036 + n * config.feature_lift,
                (0.015, 0.003),
                None,
                None,
                &[(brow_k, -t_v * config.brow_raise)],
                fc.brow,
                seg,
            );
            let eye_c = p + n * config.marker_lift;
            let rad = (config.marker_radius, config.marker_radius);
            b.disc(&p, &n, n * config.marker_lift, rad, None, None, &[], color::fiducial_color(LEFT_EYE + side), seg);
            let lid_shift = [(eye_k, -t_v * config.eye_aperture_slope)];
            let lid_off = -t_v * config.eye_aperture_min + n * config.marker_lift;
            b.disc(&p, &n, lid_off, rad, None, None, &lid_shift, color::fiducial_color(LEFT_LID + side), seg);
            anchor(LEFT_EYE + side, eye_c, n, vec![]);
            anchor(LEFT_LID + side, p + lid_off, n, lid_shift.to_vec());
        }

        let (mp, mn) = surface_point(r, 0.0, 0.045);
        let (mu, mv) = tangent_frame(&mn);
        b.disc(
            &mp,
            &mn,
            mn * config.feature_lift,
            (config.mouth_half_width, config.mouth_half_height),
            Some((MOUTH_WIDTH, config.mouth_width_slope)),
            Some((MOUTH_OPEN, config.mouth_open_slope)),
            &[],
            fc.mouth,
            seg,
        );
        let rad = (config.marker_radius, config.marker_radius);
        let corner = config.mouth_half_width + config.marker_radius;
        for (k, sx) in [(4usize, 1.0f64), (5, -1.0)] {
            let off = mu * (sx * corner) + mn * config.marker_lift;
            let shift = [(MOUTH_WIDTH, mu * (sx * config.mouth_width_slope))];
            b.disc(&mp, &mn, off, rad, None, None, &shift, color::fiducial_color(k), seg);
            anchor(k, mp + off, mn, shift.to_vec());
        }
        let lip_off = mv * (config.mouth_half_height + config.marker_radius) + mn * config.marker_lift;
        let lip_shift = [(MOUTH_OPEN, mv * config.mouth_open_slope)];
        b.disc(&mp, &mn, lip_off, rad, None, None, &lip_shift, color::fiducial_color(7), seg);
        anchor(7, mp + lip_off, mn, lip_shift.to_vec());

        let (_, nn) = surface_point(r, NOSE_ANCHOR.0, NOSE_ANCHOR.1);
        let tip_off = nn * config.feature_lift;
        b.disc(&apex, &nn, tip_off, rad, None, None, &[], color::fiducial_color(6), seg);
        anchor(6, apex + tip_off, nn, vec![]);

        let head_vertices = b.mesh.vertices.len();
        torso(&mut b, identity);

        let mut body = Builder {
            mesh: body_core,
            blend: Default::default(),
        };
        let body_head_vertices = body.mesh.vertices.len();
        torso(&mut body, identity);

        let fiducials = fiducials.into_iter().map(|f| f.expect("all fiducials placed")).collect();
        Ok(Rig {
            config,
            identity: identity.clone(),
            base: b.mesh,
            blendshapes: b.blend,
            head_vertices,
            body: body.mesh,
            body_head_vertices,
            fiducials,
            pivot: Vector3::new(0.0, r[1], 0.0),
        })
    }

    pub fn neck_pivot(&self) -> Vector3<f64> {
        self.pivot
    }

    pub fn base_mesh(&self) -> &TriMesh {
        &self.base
    }

    /// Sparse blendshape of expression component `k` as (vertex, displacement).
    pub fn blendshape(&self, k: usize) -> &[(u32, Vector3<f64>)] {
        &self.blendshapes[k]
    }

    /// Vertex indices whose position depends on component `k`.
    pub fn support(&self, k: usize) -> Vec<u32> {
        let mut s: Vec<u32> = self.blendshapes[k].iter().map(|(i, _)| *i).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `max_v ‖B_k[v]‖` for component `k`.
    pub fn blendshape_sup_norm(&self, k: usize) -> f64 {
        let mut acc = vec![Vector3::zeros(); self.base.vertices.len()];
        for (i, d) in &self.blendshapes[k] {
            acc[*i as usize] += d;
        }
        acc.iter().map(|d| d.norm()).fold(0.0, f64::max)
    }

    fn articulate(&self, pose: &HeadPose, p: &Vector3<f64>) -> Vector3<f64> {
        let off = Vector3::from(pose.neck_offset);
        self.pivot + pose.rotation() * (p - self.pivot) + off
    }

    pub fn mesh(&self, expr: &ExpressionParams, pose: &HeadPose) -> TriMesh {
        let mut m = self.base.clone();
        for (k, shape) in self.blendshapes.iter().enumerate() {
            let e = expr.values[k];
            if e == 0.0 {
                continue;
            }
            for (i, d) in shape {
                m.vertices[*i as usize] += d * e;
            }
        }
        if !pose.is_zero() {
            let rot = pose.rotation();
            for i in 0..self.head_vertices {
                m.vertices[i] = self.articulate(pose, &m.vertices[i]);
                m.vertex_normals[i] = rot * m.vertex_normals[i];
            }
        }
        m
    }

    /// Head ellipsoid, nose and torso only: the surface rendered into normal maps.
    pub fn body_mesh(&self, pose: &HeadPose) -> TriMesh {
        let mut m = self.body.clone();
        if !pose.is_zero() {
            let rot = pose.rotation();
            for i in 0..self.body_head_vertices {
                m.vertices[i] = self.articulate(pose, &m.vertices[i]);
                m.vertex_normals[i] = rot * m.vertex_normals[i];
            }
        }
        m
    }

    pub fn keypoints(&self, expr: &ExpressionParams, pose: &HeadPose) -> Keypoints3D {
        let mut points = [Vector3::zeros(); NUM_FIDUCIALS];
        let mut normals = [Vector3::zeros(); NUM_FIDUCIALS];
        let rot = pose.rotation();
        for (k, f) in self.fiducials.iter().enumerate() {
            let mut p = f.base;
            for (c, d) in &f.shapes {
                p += d * expr.values[*c];
            }
            if pose.is_zero() {
                points[k] = p;
                normals[k] = f.normal;
            } else {
                points[k] = self.articulate(pose, &p);
                normals[k] = rot * f.normal;
            }
        }
        Keypoints3D { points, normals }
    }
}

pub fn build_mesh(id: &IdentityParams, expr: &ExpressionParams, pose: &HeadPose) -> Result<TriMesh> {
    Ok(Rig::new(id)?.mesh(expr, pose))
}

pub fn keypoints(id: &IdentityParams, expr: &ExpressionParams, pose: &HeadPose) -> Result<Keypoints3D> {
    Ok(Rig::new(id)?.keypoints(expr, pose))
}
