use nalgebra::Vector3;
use ndarray::Array3;

use super::{CameraPose, Intrinsics};
use crate::error::{Error, Result};

/// Per-pixel Plücker coordinates: channels 0..3 hold the unit ray direction
/// `d`, channels 3..6 the moment `m = o × d` about the reference origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub data: Array3<f64>,
}

impl RayMap {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn direction(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            self.data[[row, col, 0]],
            self.data[[row, col, 1]],
            self.data[[row, col, 2]],
        )
    }

    pub fn moment(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            self.data[[row, col, 3]],
            self.data[[row, col, 4]],
            self.data[[row, col, 5]],
        )
    }

    /// Largest `max(|⟨d, m⟩|, |‖d‖ - 1|)` over the map.
    pub fn max_constraint_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.height() {
            for c in 0..self.width() {
                let d = self.direction(r, c);
                let m = self.moment(r, c);
                worst = worst.max(d.dot(&m).abs()).max((d.norm() - 1.0).abs());
            }
        }
        worst
    }

    pub fn to_f32(&self) -> Array3<f32> {
        self.data.mapv(|v| v as f32)
    }
}

/// Builds the ray map for a camera whose pose relative to the reference
/// camera is `relative` (reference coordinates → this camera's coordinates).
///
/// Pixels are sampled at the cell centers of an `out_h × out_w` grid spanning
/// the full image plane described by `intrinsics`.
pub fn plucker_ray_map(
    relative: &CameraPose,
    intrinsics: &Intrinsics,
    out_h: usize,
    out_w: usize,
) -> Result<RayMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("out_h/out_w", "ray map grid must be at least 1x1"));
    }
    intrinsics.validate()?;
    relative.validate()?;

    let rt = relative.rotation.transpose();
    let origin = -(rt * relative.translation);
    let sx = f64::from(intrinsics.width) / out_w as f64;
    let sy = f64::from(intrinsics.height) / out_h as f64;

    let mut data = Array3::zeros((out_h, out_w, 6));
    for r in 0..out_h {
        let v = (r as f64 + 0.5) * sy;
        for c in 0..out_w {
            let u = (c as f64 + 0.5) * sx;
            let d = (rt * intrinsics.back_project(u, v)).normalize();
            let m = origin.cross(&d);
            for k in 0..3 {
                data[[r, c, k]] = d[k];
                data[[r, c, 3 + k]] = m[k];
            }
        }
    }
    Ok(RayMap { data })
}
