//! Reconstruction metrics and analytic controllability probes.

use std::fs::OpenOptions;
use std::path::Path;

use nalgebra::Vector2;
use ndarray::{Array2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::avatar::color::classify_fiducial;
use crate::avatar::{
    ExpressionParams, HeadPose, IdentityParams, Rig, SequenceSample, LEFT_EYE, LEFT_LID, NUM_FIDUCIALS,
    RIGHT_EYE, RIGHT_LID,
};
use crate::camera::Trajectory;
use crate::error::{Error, Result};
use crate::rasterizer::{quantize_u8, render, BACKGROUND_COLOR};

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape("metric inputs", format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`;
/// `+inf` for identical inputs.
pub fn psnr(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let n = a.len().max(1) as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean PSNR over frames.
pub fn psnr_video(a: ArrayView4<'_, f32>, b: ArrayView4<'_, f32>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let t = a.dim().0;
    let mut acc = 0.0;
    for i in 0..t {
        acc += psnr(a.index_axis(Axis(0), i), b.index_axis(Axis(0), i))?;
    }
    Ok(acc / t.max(1) as f64)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering with the SSIM window.
fn filter(img: &Array2<f64>, w: &[f64; SSIM_WIN]) -> Array2<f64> {
    let (h, wd) = img.dim();
    let (oh, ow) = (h + 1 - SSIM_WIN, wd + 1 - SSIM_WIN);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..SSIM_WIN).map(|k| w[k] * img[[r, c + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..SSIM_WIN).map(|k| w[k] * rows[[r + k, c]]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), valid
/// convolution, averaged over positions and channels.
pub fn ssim(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let (h, w, ch) = a.dim();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::shape("ssim image", format!("at least {SSIM_WIN}x{SSIM_WIN}"), format!("{h}x{w}")));
    }
    let win = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for k in 0..ch {
        let x = a.index_axis(Axis(2), k).mapv(f64::from);
        let y = b.index_axis(Axis(2), k).mapv(f64::from);
        let mx = filter(&x, &win);
        let my = filter(&y, &win);
        let sxx = filter(&(&x * &x), &win) - &mx * &mx;
        let syy = filter(&(&y * &y), &win) - &my * &my;
        let sxy = filter(&(&x * &y), &win) - &mx * &my;
        let mut acc = 0.0;
        for ((((&mx, &my), &sxx), &syy), &sxy) in mx.iter().zip(&my).zip(&sxx).zip(&syy).zip(&sxy) {
            acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

pub fn ssim_video(a: ArrayView4<'_, f32>, b: ArrayView4<'_, f32>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let t = a.dim().0;
    let mut acc = 0.0;
    for i in 0..t {
        acc += ssim(a.index_axis(Axis(0), i), b.index_axis(Axis(0), i))?;
    }
    Ok(acc / t.max(1) as f64)
}

/// Per-fiducial centroid `(u, v)` of the largest 4-connected blob of its color.
pub fn detect_fiducials(frame: ArrayView3<'_, f32>) -> [Option<Vector2<f64>>; NUM_FIDUCIALS] {
    let (h, w, _) = frame.dim();
    let labels = Array2::from_shape_fn((h, w), |(r, c)| {
        classify_fiducial([frame[[r, c, 0]], frame[[r, c, 1]], frame[[r, c, 2]]])
    });
    let mut seen = Array2::from_elem((h, w), false);
    let mut best: [(usize, Vector2<f64>); NUM_FIDUCIALS] = [(0, Vector2::zeros()); NUM_FIDUCIALS];
    let mut stack = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            let Some(k) = labels[[r0, c0]] else { continue };
            if seen[[r0, c0]] {
                continue;
            }
            seen[[r0, c0]] = true;
            stack.push((r0, c0));
            let (mut n, mut sum) = (0usize, Vector2::zeros());
            while let Some((r, c)) = stack.pop() {
                n += 1;
                sum += Vector2::new(c as f64 + 0.5, r as f64 + 0.5);
                let nbrs = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (rr, cc) in nbrs {
                    if rr < h && cc < w && !seen[[rr, cc]] && labels[[rr, cc]] == Some(k) {
                        seen[[rr, cc]] = true;
                        stack.push((rr, cc));
                    }
                }
            }
            if n > best[k].0 {
                best[k] = (n, sum / n as f64);
            }
        }
    }
    best.map(|(n, c)| (n > 0).then_some(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraProbe {
    /// Mean pixel distance over detected visible fiducials; `None` if failed.
    pub mean_px_error: Option<f64>,
    pub visible: usize,
    pub detected: usize,
    pub failed: bool,
}

/// Minimum cosine between a fiducial normal and the view direction for the
/// fiducial to count as visible.
const FACING_COS: f64 = 0.2;

/// Compares fiducial centroids segmented from `frames` to the analytic
/// projection of the avatar keypoints through `trajectory`.
///
/// A fiducial counts as visible in a frame when it faces the camera, projects
/// inside the image and is the front-most surface at its projected pixel in a
/// ground-truth render. The probe fails when more than half the visible
/// fiducials go undetected.
pub fn camera_probe(
    frames: ArrayView4<'_, f32>,
    trajectory: &Trajectory,
    identity: &IdentityParams,
    expressions: &[ExpressionParams],
    head_poses: &[HeadPose],
) -> Result<CameraProbe> {
    let (t, h, w, _) = frames.dim();
    let intr = trajectory.intrinsics;
    if (intr.height as usize, intr.width as usize) != (h, w) {
        return Err(Error::shape("frame size", format!("{}x{}", intr.height, intr.width), format!("{h}x{w}")));
    }
    if trajectory.len() != t || expressions.len() != t || head_poses.len() != t {
        return Err(Error::shape("probe annotations", t, trajectory.len().min(expressions.len()).min(head_poses.len())));
    }
    let rig = Rig::new(identity)?;
    let (mut visible, mut detected, mut err) = (0usize, 0usize, 0.0f64);
    for i in 0..t {
        let cam = &trajectory.poses[i];
        let kp = rig.keypoints(&expressions[i], &head_poses[i]);
        let gt = render(&rig.mesh(&expressions[i], &head_poses[i]), cam, &intr)?;
        let found = detect_fiducials(frames.index_axis(Axis(0), i));
        for k in 0..NUM_FIDUCIALS {
            let pc = cam.transform_point(&kp.points[k]);
            let nc = cam.transform_vector(&kp.normals[k]);
            if nc.dot(&(-pc.normalize())) < FACING_COS {
                continue;
            }
            let Some((u, v)) = intr.project(&pc) else { continue };
            if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                continue;
            }
            let (r, c) = (v as usize, u as usize);
            let px = [0, 1, 2].map(|ch| quantize_u8(gt.color[[r, c, ch]]) as f32 / 255.0);
            if classify_fiducial(px) != Some(k) {
                continue;
            }
            visible += 1;
            if let Some(centroid) = found[k] {
                detected += 1;
                err += (centroid - Vector2::new(u, v)).norm();
            }
        }
    }
    let failed = visible == 0 || 2 * detected < visible;
    Ok(CameraProbe {
        mean_px_error: (!failed).then(|| err / detected as f64),
        visible,
        detected,
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum ProbeOutcome {
    Value(f64),
    NotApplicable,
    Failed,
}

impl ProbeOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            ProbeOutcome::Value(v) => Some(*v),
            _ => None,
        }
    }
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Eyelid aperture in a frame, normalized by the inter-ocular distance so
/// it is insensitive to camera distance.
pub fn measure_aperture(frame: ArrayView3<'_, f32>) -> Option<f64> {
    let f = detect_fiducials(frame);
    let eyes = f[LEFT_EYE].zip(f[RIGHT_EYE])?;
    let iod = (eyes.0 - eyes.1).norm();
    let mut ap = Vec::new();
    for (e, l) in [(LEFT_EYE, LEFT_LID), (RIGHT_EYE, RIGHT_LID)] {
        if let (Some(e), Some(l)) = (f[e], f[l]) {
            ap.push((l - e).norm());
        }
    }
    (!ap.is_empty() && iod > 0.0).then(|| ap.iter().sum::<f64>() / ap.len() as f64 / iod)
}

/// Spearman correlation between measured eyelid aperture and the driving
/// eye-open signal.
pub fn expression_probe(frames: ArrayView4<'_, f32>, driving: &[ExpressionParams]) -> Result<ProbeOutcome> {
    let t = frames.dim().0;
    if driving.len() != t {
        return Err(Error::shape("driving expressions", t, driving.len()));
    }
    let signal: Vec<f64> = driving.iter().map(|e| e.eye_open()).collect();
    if signal.iter().all(|&v| v == signal[0]) {
        return Ok(ProbeOutcome::NotApplicable);
    }
    let (mut drive, mut meas) = (Vec::new(), Vec::new());
    for (i, s) in signal.iter().enumerate() {
        if let Some(a) = measure_aperture(frames.index_axis(Axis(0), i)) {
            drive.push(*s);
            meas.push(a);
        }
    }
    if 2 * meas.len() < t || meas.len() < 3 {
        return Ok(ProbeOutcome::Failed);
    }
    Ok(match spearman(&drive, &meas) {
        Some(r) => ProbeOutcome::Value(r),
        None if drive.iter().all(|&v| v == drive[0]) => ProbeOutcome::NotApplicable,
        None => ProbeOutcome::Value(0.0),
    })
}

const HIST_BINS: usize = 8;

fn color_histogram(frames: &[ArrayView3<'_, f32>]) -> Option<Vec<f64>> {
    let mut hist = vec![0.0; HIST_BINS * HIST_BINS * HIST_BINS];
    let mut n = 0usize;
    for f in frames {
        let (h, w, _) = f.dim();
        for r in 0..h {
            for c in 0..w {
                let px = [f[[r, c, 0]], f[[r, c, 1]], f[[r, c, 2]]];
                if (0..3).all(|k| (px[k] - BACKGROUND_COLOR[k]).abs() <= 0.06) {
                    continue;
                }
                let bin = |v: f32| ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                hist[(bin(px[0]) * HIST_BINS + bin(px[1])) * HIST_BINS + bin(px[2])] += 1.0;
                n += 1;
            }
        }
    }
    (n > 0).then(|| hist.into_iter().map(|v| v / n as f64).collect())
}

/// Total-variation distance between foreground color histograms of the
/// generated frames and the reference image; 1 when either is empty.
pub fn identity_hist_dist(frames: ArrayView4<'_, f32>, reference: ArrayView3<'_, f32>) -> f64 {
    let views: Vec<_> = frames.outer_iter().collect();
    match (color_histogram(&views), color_histogram(&[reference])) {
        (Some(p), Some(q)) => 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
        _ => 1.0,
    }
}

mod inf_float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub name: String,
    #[serde(with = "inf_float")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub camera: CameraProbe,
    pub expression: ProbeOutcome,
    pub identity_hist_dist: f64,
}

/// Scores generated frames against the ground-truth sequence they re-enact.
pub fn evaluate_sequence(name: &str, generated: ArrayView4<'_, f32>, truth: &SequenceSample) -> Result<SequenceEval> {
    let gt = truth.frames_f32();
    Ok(SequenceEval {
        name: name.to_string(),
        psnr_db: psnr_video(generated, gt.view())?,
        ssim: ssim_video(generated, gt.view())?,
        camera: camera_probe(generated, &truth.trajectory, &truth.identity, &truth.expressions, &truth.head_poses)?,
        expression: expression_probe(generated, &truth.expressions)?,
        identity_hist_dist: identity_hist_dist(generated, gt.index_axis(Axis(0), 0)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    #[serde(with = "inf_float")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub cam_reproj_px: Option<f64>,
    pub cam_probe_failures: usize,
    pub expr_spearman: Option<f64>,
    pub identity_hist_dist: f64,
    pub sequences: Vec<SequenceEval>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn aggregate(label: &str, sequences: Vec<SequenceEval>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::arg("sequences", "nothing to aggregate"));
        }
        Ok(EvalReport {
            label: label.to_string(),
            psnr_db: mean(sequences.iter().map(|s| s.psnr_db)).unwrap_or(0.0),
            ssim: mean(sequences.iter().map(|s| s.ssim)).unwrap_or(0.0),
            cam_reproj_px: mean(sequences.iter().filter_map(|s| s.camera.mean_px_error)),
            cam_probe_failures: sequences.iter().filter(|s| s.camera.failed).count(),
            expr_spearman: mean(sequences.iter().filter_map(|s| s.expression.value())),
            identity_hist_dist: mean(sequences.iter().map(|s| s.identity_hist_dist)).unwrap_or(1.0),
            sequences,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Appends one summary row, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let psnr = if self.psnr_db.is_infinite() { "inf".to_string() } else { self.psnr_db.to_string() };
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        if fresh {
            w.write_record(["label", "psnr_db", "ssim", "cam_reproj_px", "cam_probe_failures", "expr_spearman", "identity_hist_dist"])
                .map_err(csv_err)?;
        }
        w.write_record([
            self.label.clone(),
            psnr,
            self.ssim.to_string(),
            opt(self.cam_reproj_px),
            self.cam_probe_failures.to_string(),
            opt(self.expr_spearman),
            self.identity_hist_dist.to_string(),
        ])
        .map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
