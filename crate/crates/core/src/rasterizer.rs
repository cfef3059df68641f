//! Z-buffered perspective triangle rasterizer.
//!
//! Produces color, camera-space normal maps, depth and coverage masks. Pixel
//! centers sit at half-integers and edges follow the top-left fill rule, so a
//! pixel shared by two adjacent triangles is drawn exactly once.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::camera::{CameraPose, Intrinsics};
use crate::error::{Error, Result};

/// Triangles closer than this to the camera plane are dropped.
pub const NEAR_PLANE: f64 = 1e-3;

pub const BACKGROUND_COLOR: [f32; 3] = [0.22, 0.22, 0.25];

/// Normal-map value of "no geometry": the zero vector under `(n + 1) / 2`.
pub const BACKGROUND_NORMAL: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_colors: Vec<[f32; 3]>,
    pub vertex_normals: Vec<Vector3<f64>>,
}

impl TriMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.vertex_colors.len() != n || self.vertex_normals.len() != n {
            return Err(Error::shape(
                "mesh attributes",
                format!("{n} colors and normals"),
                format!(
                    "{} colors, {} normals",
                    self.vertex_colors.len(),
                    self.vertex_normals.len()
                ),
            ));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::arg("faces", format!("face {f:?} indexes past {n} vertices")));
        }
        if let Some(k) = self
            .vertex_normals
            .iter()
            .position(|v| (v.norm() - 1.0).abs() > 1e-4)
        {
            return Err(Error::arg("vertex_normals", format!("normal {k} is not unit length")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Appends `other`, re-indexing its faces.
    pub fn append(&mut self, other: &TriMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.vertex_colors.extend_from_slice(&other.vertex_colors);
        self.vertex_normals.extend_from_slice(&other.vertex_normals);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `H × W × 3` in `[0, 1]`.
    pub color: Array3<f32>,
    /// `H × W × 3`, camera-space normals encoded as `(n + 1) / 2`.
    pub normal_map: Array3<f32>,
    /// Camera-space depth, `+inf` where nothing was drawn.
    pub depth: Array2<f64>,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f32; 3],
    /// Fraction of the vertex color kept on surfaces facing away from the light.
    pub ambient: f32,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: BACKGROUND_COLOR,
            ambient: 0.35,
        }
    }
}

pub fn encode_normal(n: &Vector3<f64>) -> [f32; 3] {
    [
        ((n.x + 1.0) * 0.5) as f32,
        ((n.y + 1.0) * 0.5) as f32,
        ((n.z + 1.0) * 0.5) as f32,
    ]
}

pub fn decode_normal(c: [f32; 3]) -> Vector3<f64> {
    Vector3::new(
        f64::from(c[0]) * 2.0 - 1.0,
        f64::from(c[1]) * 2.0 - 1.0,
        f64::from(c[2]) * 2.0 - 1.0,
    )
}

/// 8-bit quantization of a `[0, 1]` channel value.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize_u8(v: u8) -> f32 {
    f32::from(v) / 255.0
}

pub fn render(mesh: &TriMesh, pose: &CameraPose, intrinsics: &Intrinsics) -> Result<RenderOutput> {
    render_with(mesh, pose, intrinsics, &RenderSettings::default())
}

struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
}

fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Top-left rule for an edge `a → b` whose interior lies on the positive side.
fn is_top_left(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let dy = b.y - a.y;
    let dx = b.x - a.x;
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

pub fn render_with(
    mesh: &TriMesh,
    pose: &CameraPose,
    intrinsics: &Intrinsics,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    mesh.validate()?;
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);

    let mut color = Array3::zeros((h, w, 3));
    let mut normal_map = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                color[[r, c, k]] = settings.background[k];
                normal_map[[r, c, k]] = BACKGROUND_NORMAL[k];
            }
        }
    }
    let mut depth = Array2::from_elem((h, w), f64::INFINITY);

    let cam_pos: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| pose.transform_point(p)).collect();
    let cam_nrm: Vec<Vector3<f64>> = mesh
        .vertex_normals
        .iter()
        .map(|n| pose.transform_vector(n))
        .collect();

    for face in &mesh.faces {
        let mut idx = face.map(|i| i as usize);
        let (p0, p1, p2) = (cam_pos[idx[0]], cam_pos[idx[1]], cam_pos[idx[2]]);
        if p0.z <= NEAR_PLANE || p1.z <= NEAR_PLANE || p2.z <= NEAR_PLANE {
            continue;
        }
        let face_normal = (p1 - p0).cross(&(p2 - p0));
        let fn_norm = face_normal.norm();
        // Back-facing (or edge-on) as seen from the camera center.
        if !(fn_norm > 0.0) || face_normal.dot(&p0) >= 0.0 {
            continue;
        }
        let centroid = (p0 + p1 + p2) / 3.0;
        let lambert = (face_normal / fn_norm).dot(&(-centroid.normalize())).max(0.0) as f32;
        let shade = settings.ambient + (1.0 - settings.ambient) * lambert;

        let project = |p: &Vector3<f64>| ScreenVertex {
            x: intrinsics.fx * p.x / p.z + intrinsics.cx,
            y: intrinsics.fy * p.y / p.z + intrinsics.cy,
            inv_z: 1.0 / p.z,
        };
        let mut sv = [project(&p0), project(&p1), project(&p2)];
        let mut area = edge(&sv[0], &sv[1], sv[2].x, sv[2].y);
        if area == 0.0 {
            continue;
        }
        if area < 0.0 {
            sv.swap(1, 2);
            idx.swap(1, 2);
            area = -area;
        }

        let min_x = sv.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
        let max_x = sv.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = sv.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let max_y = sv.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x >= w as f64 || min_y >= h as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)) as isize;
        let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)) as isize;
        if x1 < x0 as isize || y1 < y0 as isize {
            continue;
        }

        let tl = [
            is_top_left(&sv[1], &sv[2]),
            is_top_left(&sv[2], &sv[0]),
            is_top_left(&sv[0], &sv[1]),
        ];
        let cols = idx.map(|i| mesh.vertex_colors[i]);
        let nrms = idx.map(|i| cam_nrm[i]);

        for py in y0..=y1 as usize {
            let fy = py as f64 + 0.5;
            for px in x0..=x1 as usize {
                let fx = px as f64 + 0.5;
                let wts = [
                    edge(&sv[1], &sv[2], fx, fy),
                    edge(&sv[2], &sv[0], fx, fy),
                    edge(&sv[0], &sv[1], fx, fy),
                ];
                let inside = wts
                    .iter()
                    .zip(tl)
                    .all(|(&e, top_left)| e > 0.0 || (e == 0.0 && top_left));
                if !inside {
                    continue;
                }
                let l = wts.map(|e| e / area);
                let inv_z = l[0] * sv[0].inv_z + l[1] * sv[1].inv_z + l[2] * sv[2].inv_z;
                let z = 1.0 / inv_z;
                if !(z < depth[[py, px]]) {
                    continue;
                }
                depth[[py, px]] = z;
                // Perspective-correct weights.
                let pc = [
                    l[0] * sv[0].inv_z * z,
                    l[1] * sv[1].inv_z * z,
                    l[2] * sv[2].inv_z * z,
                ];
                let n = (nrms[0] * pc[0] + nrms[1] * pc[1] + nrms[2] * pc[2]).normalize();
                let enc = encode_normal(&n);
                for k in 0..3 {
                    let c = (pc[0] as f32) * cols[0][k]
                        + (pc[1] as f32) * cols[1][k]
                        + (pc[2] as f32) * cols[2][k];
                    color[[py, px, k]] = (c * shade).clamp(0.0, 1.0);
                    normal_map[[py, px, k]] = enc[k];
                }
            }
        }
    }

    let mask = depth.mapv(|d| d < f64::INFINITY);
    Ok(RenderOutput {
        color,
        normal_map,
        depth,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn quad(z: f64, half: f64, color: [f32; 3]) -> TriMesh {
        // Faces the camera at the origin: outward normal (0, 0, -1).
        let vertices = vec![
            Vector3::new(-half, -half, z),
            Vector3::new(half, -half, z),
            Vector3::new(half, half, z),
            Vector3::new(-half, half, z),
        ];
        let n = Vector3::new(0.0, 0.0, -1.0);
        TriMesh {
            vertices,
            faces: vec![[0, 2, 1], [0, 3, 2]],
            vertex_colors: vec![color; 4],
            vertex_normals: vec![n; 4],
        }
    }

    fn intr(size: u32) -> Intrinsics {
        Intrinsics::from_fov(60.0, size, size).unwrap()
    }

    #[test]
    fn empty_mesh_is_background() {
        let out = render(&TriMesh::default(), &CameraPose::identity(), &intr(8)).unwrap();
        assert!(out.mask.iter().all(|m| !m));
        assert!(out.normal_map.iter().all(|&v| v == 0.5));
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn head_on_square_has_constant_normal() {
        let out = render(&quad(1.0, 0.2, [1.0; 3]), &CameraPose::identity(), &intr(16)).unwrap();
        let covered = out.mask.iter().filter(|&&m| m).count();
        assert!(covered > 0);
        for r in 0..16 {
            for c in 0..16 {
                let px = [out.normal_map[[r, c, 0]], out.normal_map[[r, c, 1]], out.normal_map[[r, c, 2]]];
                if out.mask[[r, c]] {
                    assert_eq!(px, [0.5, 0.5, 0.0]);
                    assert!((out.depth[[r, c]] - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(px, BACKGROUND_NORMAL);
                }
            }
        }
    }

    #[test]
    fn back_faces_are_culled() {
        let mut m = quad(1.0, 0.2, [1.0; 3]);
        for f in &mut m.faces {
            f.swap(1, 2);
        }
        let out = render(&m, &CameraPose::identity(), &intr(16)).unwrap();
        assert!(out.mask.iter().all(|x| !x));
    }

    #[test]
    fn adjacent_triangles_cover_each_pixel_once() {
        // Count fragments by rendering each triangle separately; with the
        // top-left rule the shared diagonal must not double count.
        let m = quad(1.0, 0.3, [1.0; 3]);
        let full = render(&m, &CameraPose::identity(), &intr(20)).unwrap();
        let mut hits = Array2::<u32>::zeros((20, 20));
        for f in &m.faces {
            let single = TriMesh { faces: vec![*f], ..m.clone() };
            let o = render(&single, &CameraPose::identity(), &intr(20)).unwrap();
            hits += &o.mask.mapv(u32::from);
        }
        assert!(hits.iter().all(|&h| h <= 1));
        assert_eq!(hits.mapv(|h| h == 1), full.mask);
    }

    #[test]
    fn invalid_mesh_is_rejected() {
        let mut m = quad(1.0, 0.2, [1.0; 3]);
        m.faces.push([0, 1, 9]);
        assert!(render(&m, &CameraPose::identity(), &intr(8)).is_err());
        let mut m = quad(1.0, 0.2, [1.0; 3]);
        m.vertex_normals[0] *= 2.0;
        assert!(render(&m, &CameraPose::identity(), &intr(8)).is_err());
    }

    #[test]
    fn normal_code_round_trip_8bit() {
        for &(x, y) in &[(0.3, -0.2), (-0.9, 0.1), (0.0, 0.0), (0.57, 0.57)] {
            let z: f64 = -(1.0f64 - x * x - y * y).sqrt();
            let n = Vector3::new(x, y, z);
            let q = encode_normal(&n).map(quantize_u8).map(dequantize_u8);
            let back = decode_normal(q);
            for k in 0..3 {
                assert!((back[k] - n[k]).abs() <= 1.0 / 255.0 + 1e-7);
            }
            assert!((back.norm() - 1.0).abs() < 2e-2);
        }
    }

    proptest! {
        #[test]
        fn normal_code_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let n = Vector3::new(x, y, z);
            prop_assume!(n.norm() > 1e-3);
            let n = n.normalize();
            let back = decode_normal(encode_normal(&n).map(quantize_u8).map(dequantize_u8));
            for k in 0..3 {
                prop_assert!((back[k] - n[k]).abs() <= 1.0 / 255.0 + 1e-7);
            }
        }
    }

    #[test]
    fn translation_equivariance_in_exact_arithmetic() {
        // Dyadic coordinates and an axis-aligned camera keep every transform
        // exact, so the render must match bit for bit.
        let mut m = quad(0.5, 0.125, [0.25, 0.5, 0.75]);
        m.append(&quad(0.75, 0.1875, [0.5, 0.5, 0.5]));
        let rot = Matrix3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        // Camera at (-0.25, 0, 0.0625) looking along world +x.
        let center = Vector3::new(-0.25, 0.0, 0.0625);
        let pose = CameraPose::new(rot, -(rot * center)).unwrap();
        let mut world = m.clone();
        // Rotate mesh into the camera's field of view: map camera z to world x.
        let rt = rot.transpose();
        world.vertices = m.vertices.iter().map(|p| rt * p + center).collect();
        world.vertex_normals = m.vertex_normals.iter().map(|n| rt * n).collect();
        let base = render(&world, &pose, &intr(24)).unwrap();
        assert!(base.mask.iter().any(|&v| v));

        let delta = Vector3::new(0.375, -0.125, 1.5);
        let mut moved = world.clone();
        moved.vertices.iter_mut().for_each(|p| *p += delta);
        let moved_pose = CameraPose::new(rot, -(rot * (center + delta))).unwrap();
        let out = render(&moved, &moved_pose, &intr(24)).unwrap();
        assert_eq!(out, base);
    }
}
