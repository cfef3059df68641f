//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Custom harness (see Cargo.toml).
//!
//! Criterion 7 (controllability) needs hours of training; it runs only when
//! `PORTRAIT_ACCEPT_CONTROL=1` and otherwise prints a NOT RUN line.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array3, Array4, Axis};
use portrait_core::avatar::{generate_sequence, IdentityParams, SequenceKind, SequenceSample};
use portrait_core::camera::{
    euler_rotation, plucker_ray_map, relative_pose, spin_trajectory, view_angles, CameraPose, Intrinsics,
    SpinParams, DEFAULT_FOV_DEG,
};
use portrait_core::codec::{self, channel_index, frame_slot, latent_len, slot_frames};
use portrait_core::eval::psnr_video;
use portrait_core::seed::derive_seed;
use portrait_model::conditioning::{
    chunk_expression, frame_timestep_embeddings, fuse_conditions, identity_rays, slot_camera_frame, BundleLayout,
    TimestepEmbedder,
};
use portrait_model::diffusion::{gaussian, sample as flow_sample};
use portrait_model::dit::{DiT, DiTConfig};
use portrait_model::layers::{adaln_modulate, NORM_EPS};
use portrait_model::model::{Ablation, Example, ModelConfig, PortraitModel};
use portrait_model::params::ParamStore;
use portrait_model::pipeline::{
    checkpoint_paths, default_schedule, evaluate_model, run_schedule, MixtureSampler, SamplePool, StageConfig,
    TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
    let pi = std::f64::consts::PI;
    let r = euler_rotation(
        rng.random_range(-pi..pi),
        rng.random_range(-pi / 2.0..pi / 2.0),
        rng.random_range(-pi..pi),
    );
    let t = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    CameraPose::new(r, t).unwrap()
}

// 1. Geometry ---------------------------------------------------------------

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_dm, mut worst_norm, mut worst_px) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let pose = random_pose(&mut rng);
        let (w, h) = (rng.random_range(8..128u32), rng.random_range(8..128u32));
        let intr = ok(Intrinsics::from_fov(rng.random_range(30.0..100.0), w, h))?;
        let (gh, gw) = (rng.random_range(1..9usize), rng.random_range(1..9usize));
        let map = ok(plucker_ray_map(&pose, &intr, gh, gw))?;
        let (r, c) = (rng.random_range(0..gh), rng.random_range(0..gw));
        let d = map.direction(r, c);
        let m = map.moment(r, c);
        worst_dm = worst_dm.max(d.dot(&m).abs());
        worst_norm = worst_norm.max((d.norm() - 1.0).abs());
        // Independent oracle: the moment is taken about the camera center,
        // and a point one unit along the ray projects onto the cell center.
        let o = pose.center();
        worst_px = worst_px.max((m - o.cross(&d)).norm());
        let p = pose.transform_point(&(o + d));
        let (u, v) = intr.project(&p).ok_or("ray point behind camera")?;
        let want = Vector2::new(
            (c as f64 + 0.5) * f64::from(w) / gw as f64,
            (r as f64 + 0.5) * f64::from(h) / gh as f64,
        );
        worst_px = worst_px.max((Vector2::new(u, v) - want).norm());
    }
    ensure!(worst_dm < 1e-6, "max |<d,m>| = {worst_dm:e}");
    ensure!(worst_norm < 1e-6, "max ||d||-1 = {worst_norm:e}");
    ensure!(worst_px < 1e-6, "ray moment/reprojection oracle error {worst_px:e}");

    let mut worst_group = 0.0f64;
    for _ in 0..1000 {
        let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        let aa = ok(relative_pose(&a, &a))?;
        let ab = ok(relative_pose(&a, &b))?;
        let ba = ok(relative_pose(&b, &a))?;
        let bc = ok(relative_pose(&b, &c))?;
        let ac = ok(relative_pose(&a, &c))?;
        worst_group = worst_group
            .max(aa.distance_to_identity())
            .max(ab.compose(&ba).distance_to_identity())
            .max(ab.compose(&bc).compose(&ac.inverse()).distance_to_identity());
        // Relative pose maps reference-camera coordinates to driving-camera ones.
        let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
        let via = ab.transform_point(&b.transform_point(&x));
        worst_group = worst_group.max((via - a.transform_point(&x)).norm());
    }
    ensure!(worst_group < 1e-9, "group law violation {worst_group:e}");

    let params = SpinParams::default();
    let (mut dmin, mut dmax, mut emax) = (f64::INFINITY, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let traj = ok(spin_trajectory(seed, &params))?;
        for pose in &traj.poses {
            let (_, elev, dist) = view_angles(pose, &params.look_at);
            dmin = dmin.min(dist);
            dmax = dmax.max(dist);
            emax = emax.max(elev.abs().to_degrees());
        }
    }
    ensure!(dmin >= 0.25 && dmax <= 0.40, "spin distance range [{dmin}, {dmax}]");
    ensure!(emax <= 5.0, "spin |elevation| up to {emax} deg");
    Ok(format!(
        "|<d,m>| {worst_dm:.1e}, ||d||-1 {worst_norm:.1e}, group {worst_group:.1e}, spin d [{dmin:.3}, {dmax:.3}] m, |elev| <= {emax:.2} deg"
    ))
}

// 2. Codec ------------------------------------------------------------------

fn codec_suite() -> Outcome {
    let table = [(1, 1), (5, 2), (13, 4), (25, 7), (49, 13), (81, 21)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (t, l) in table {
        ensure!(latent_len(t) == l && (t + 3) / 4 == l, "latent_len({t}) = {}", latent_len(t));
        let video = Array4::from_shape_simple_fn((t, 32, 32, 3), || rng.random::<f32>());
        let lat = ok(codec::encode(video.view(), 4))?;
        ensure!(lat.data.dim() == (l, 8, 8, 192), "T={t}: latent shape {:?}", lat.data.dim());
        let back = ok(codec::decode(&lat))?;
        ensure!(back == video, "T={t}: round trip not bit-exact");
    }
    // Locality: every pixel of a small video lands in exactly one latent entry.
    let (t, h, w, sf) = (5, 8, 8, 4);
    let blank = ok(codec::encode(Array4::<f32>::zeros((t, h, w, 3)).view(), sf))?.data;
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut v = Array4::<f32>::zeros((t, h, w, 3));
                    v[[f, y, x, ch]] = 0.75;
                    let lat = ok(codec::encode(v.view(), sf))?;
                    let nz: Vec<_> = lat.data.indexed_iter().filter(|(i, v)| **v != blank[*i]).collect();
                    let (slot, tau) = frame_slot(f);
                    let want = (slot, y / sf, x / sf, channel_index(sf, tau, y % sf, x % sf, ch));
                    ensure!(
                        nz.len() == 1 && nz[0].0 == want && *nz[0].1 == 0.5,
                        "pixel ({f},{y},{x},{ch}) touches {:?}",
                        nz.iter().map(|(i, _)| *i).collect::<Vec<_>>()
                    );
                }
            }
        }
    }
    Ok("round trips bit-exact, T->l table matches, 960/960 pixels map to one entry".into())
}

// 3. Architecture -----------------------------------------------------------

fn tiny_dit(c_in: usize, c_out: usize) -> DiTConfig {
    DiTConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        patch: 2,
        c_in,
        c_out,
        cond_dim: 8,
        mlp_ratio: 2,
    }
}

fn small_sample(kind: SequenceKind, identity: u64, frames: usize, res: u32, seed: u64) -> SequenceSample {
    generate_sequence(kind, &IdentityParams::sample(identity), seed, frames, res).unwrap()
}

fn architecture() -> Outcome {
    // AdaLN vs a two-pass oracle.
    let (b, n, d) = (3, 7, 32);
    let z = randn(&[b, n, d], 30);
    let gamma = randn(&[b, 1, d], 31);
    let beta = randn(&[b, 1, d], 32);
    let got = flat(&ok(adaln_modulate(&z, &gamma, &beta))?);
    let (zv, gv, bv) = (flat(&z), flat(&gamma), flat(&beta));
    let mut worst = 0.0f64;
    for i in 0..b {
        for j in 0..n {
            let row = &zv[(i * n + j) * d..(i * n + j + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            for k in 0..d {
                let want = gv[i * d + k] * (row[k] - mean) / (var + NORM_EPS).sqrt() + bv[i * d + k];
                worst = worst.max((got[(i * n + j) * d + k] - want).abs());
            }
        }
    }
    ensure!(worst < 1e-5, "AdaLN deviates from oracle by {worst:e}");

    // Zero-initialized full model predicts exactly zero.
    let cfg = ModelConfig::default();
    let model = ok(PortraitModel::new(cfg, DType::F32, Device::Cpu))?;
    let ex = ok(Example::from_sample(&cfg, &small_sample(SequenceKind::DynamicSweep, 3, 5, 16, 4)))?;
    let zt = gaussian(ex.z.dim(), 5);
    let v = ok(model.predict(&zt, 0.7, &ex.cond))?;
    ensure!(v.iter().all(|x| *x == 0.0), "zero-init prediction is not exactly zero");

    // Per-slot modulation isolation with attention disabled.
    let mut p = ParamStore::new(0, DType::F64, Device::Cpu);
    let mut net = ok(DiT::new(&mut p, "dit", tiny_dit(5, 3)))?;
    ok(p.randomize(9, 0.5))?;
    net.set_attention(false);
    let x = randn(&[1, 4, 4, 4, 5], 3);
    let t = randn(&[1, 4, 8], 4);
    let y0 = ok(net.forward(&x, &t))?;
    for j in 1..4 {
        let mut rows = t.get(0).unwrap().to_vec2::<f64>().unwrap();
        rows[j][0] += 0.7;
        let t2 = Tensor::new(rows, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let y = ok(net.forward(&x, &t2))?;
        for slot in 0..3 {
            let same = flat(&y0.get(0).unwrap().get(slot).unwrap()) == flat(&y.get(0).unwrap().get(slot).unwrap());
            ensure!(same == (slot + 1 != j), "perturbing t_{j} changed output slot {}: {}", slot + 1, !same);
        }
    }

    // Chunk/slot alignment for every T <= 81.
    for t in (1..=81).filter(|t| t % 4 == 1) {
        let feats: Vec<f64> = (0..t).map(|f| f as f64).collect();
        let tensor = Tensor::from_vec(feats, (1, t, 1), &Device::Cpu).unwrap();
        let chunks = ok(chunk_expression(&tensor))?.get(0).unwrap().to_vec2::<f64>().unwrap();
        ensure!(chunks.len() == latent_len(t), "T={t}: {} chunks", chunks.len());
        for (j, row) in chunks.iter().enumerate() {
            let frames = slot_frames(j);
            let expect: Vec<f64> = if j == 0 { vec![0.0; 4] } else { frames.iter().map(|f| *f as f64).collect() };
            ensure!(*row == expect, "T={t} chunk {j}: {row:?}");
            for f in &frames {
                ensure!(frame_slot(*f).0 == j, "frame {f} not in slot {j}");
            }
            ensure!(frames.contains(&slot_camera_frame(j)), "camera frame of slot {j} outside its frames");
        }
    }

    // Reference-slot asymmetry.
    let layout = BundleLayout {
        latent_channels: 12,
        normals: true,
        ref_channel_group: false,
    };
    let intr = ok(Intrinsics::from_fov(DEFAULT_FOV_DEG, 16, 16))?;
    let (l, h, w) = (3, 4, 4);
    let refl = Array3::from_elem((h, w, 12), 0.3);
    let noisy = Array4::from_elem((l, h, w, 12), -0.2);
    let normals = Array4::from_elem((l, h, w, 12), 0.9);
    let rays = Array4::from_elem((l, h, w, 6), 0.5);
    let bundle = ok(fuse_conditions(layout, refl.view(), noisy.view(), Some(normals.view()), rays.view(), &intr))?;
    let slot0 = bundle.stack.index_axis(Axis(0), 0);
    ensure!(slot0.slice(s![.., .., 12..24]).iter().all(|v| *v == 0.0), "reference slot has non-zero normals");
    ensure!(
        slot0.slice(s![.., .., 24..30]) == ok(identity_rays(&intr, h, w))?,
        "reference slot rays are not the identity camera"
    );
    let mut p = ParamStore::new(1, DType::F64, Device::Cpu);
    let temb = ok(TimestepEmbedder::new(&mut p, "t", 8))?;
    let proj = ok(p.linear("proj", 4 * 5, 8, false, false))?;
    ok(p.randomize(2, 0.5))?;
    let chunked = ok(chunk_expression(&randn(&[2, 9, 5], 8)))?;
    let emb = ok(frame_timestep_embeddings(&temb, &proj, &[0.2, 0.9], &chunked))?;
    ensure!(
        flat(&emb.per_frame.narrow(1, 0, 1).unwrap().squeeze(1).unwrap()) == flat(&emb.base),
        "per_frame[0] differs from the base embedding"
    );
    Ok(format!("AdaLN err {worst:.1e}; zero init exact; slot isolation, alignment and reference slot hold"))
}

// 4. Gradient check ---------------------------------------------------------

fn gradient_check() -> Outcome {
    let mut p = ParamStore::new(0, DType::F64, Device::Cpu);
    let cfg = DiTConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        patch: 1,
        c_in: 3,
        c_out: 2,
        cond_dim: 4,
        mlp_ratio: 2,
    };
    let net = ok(DiT::new(&mut p, "dit", cfg))?;
    let count = p.num_scalars();
    ensure!(count <= 1000, "{count} parameters");
    ok(p.randomize(21, 0.4))?;
    let x = randn(&[1, 2, 2, 2, 3], 5);
    let t = randn(&[1, 2, 4], 6);
    let target = randn(&[1, 1, 2, 2, 2], 7);
    let loss = |net: &DiT| -> Tensor { (net.forward(&x, &t).unwrap() - &target).unwrap().sqr().unwrap().mean_all().unwrap() };
    let grads = ok(loss(&net).backward())?;
    let vars: Vec<(String, Var)> = p.named().map(|(n, v)| (n.clone(), v.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let base = flat(var.as_tensor());
        let i = rng.random_range(0..base.len());
        let g = flat(grads.get(var.as_tensor()).ok_or("missing gradient")?)[i];
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            loss(&net).to_scalar::<f64>().unwrap()
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu).unwrap()).unwrap();
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-7);
        ensure!(rel < 1e-3, "{name}[{i}]: analytic {g} vs numeric {fd}");
        worst = worst.max(rel);
    }
    Ok(format!("{count} params, worst relative error {worst:.1e} over 20 coordinates"))
}

// 5. Oracle sampler ---------------------------------------------------------

fn oracle_sampler() -> Outcome {
    let shape = (4, 8, 8, 192);
    let truth = gaussian(shape, 10);
    let seed = 11;
    let v = &gaussian(shape, seed) - &truth;
    let oracle = |_: &Array4<f64>, _t: f64| Ok(v.clone());
    let mut report = Vec::new();
    for steps in [1, 4, 50] {
        let out = ok(flow_sample(&oracle, shape, steps, seed))?;
        let err = (&out - &truth).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ensure!(err < 1e-12, "steps {steps}: max error {err:e}");
        report.push(format!("{steps}: {err:.1e}"));
    }
    Ok(format!("max error by step count {}", report.join(", ")))
}

// 6. Overfit run ------------------------------------------------------------

fn overfit() -> Outcome {
    const MAX_STEPS: usize = 2000;
    const TARGET_DB: f64 = 25.0;
    let sample = small_sample(SequenceKind::DynamicSweep, 5, 13, 32, 17);
    let cfg = ModelConfig {
        seed: 3,
        ..ModelConfig::default()
    };
    ensure!(cfg.depth == 6 && cfg.dim == 192, "model is not depth 6 / dim 192");
    let train = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let trainer = ok(Trainer::new(cfg, train))?;
    let ex = ok(Example::from_sample(&cfg, &sample))?;
    let batch: Vec<&Example> = vec![&ex; train.batch_size];
    let truth = sample.frames_f32();
    let mut opt = ok(trainer.optimizer(1e-3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(3, "overfit", 0));
    let mut losses = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    for step in 1..=MAX_STEPS {
        // Linear decay to a tenth of the peak over the budget.
        let lr = 1e-3 * (1.0 - 0.9 * (step - 1) as f64 / MAX_STEPS as f64);
        candle_nn::Optimizer::set_learning_rate(&mut opt, lr);
        let loss = ok(trainer.step(&mut opt, &batch, &mut rng, step))?;
        ensure!(loss.is_finite(), "non-finite loss at step {step}");
        losses.push(loss);
        if step % 250 == 0 || step == MAX_STEPS {
            let lat = ok(trainer.model.sample(&ex.cond, 25, 0))?;
            let frames = ok(codec::decode(&lat))?.mapv(|v| v.clamp(0.0, 1.0));
            let db = ok(psnr_video(frames.view(), truth.view()))?;
            let smooth = losses[losses.len().saturating_sub(50)..].iter().sum::<f64>() / 50f64.min(losses.len() as f64);
            println!("    overfit step {step}: loss(50) {smooth:.5}, PSNR {db:.2} dB");
            best = best.max(db);
            if db >= TARGET_DB {
                reached = Some((step, db));
                break;
            }
        }
    }
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    match reached {
        Some((step, db)) => Ok(format!("PSNR {db:.2} dB at step {step}; loss(50) {head:.4} -> {tail:.4}")),
        None => Err(format!("best PSNR {best:.2} dB < {TARGET_DB} after {MAX_STEPS} steps; loss(50) {head:.4} -> {tail:.4}")),
    }
}

// 7. Controllability run ----------------------------------------------------

fn controllability() -> Outcome {
    let train_ids = 56u64;
    let held_out = 8u64;
    let frames = 81;
    let res = 64;
    let mut samples = Vec::new();
    for kind in SequenceKind::ALL {
        for id in 0..train_ids {
            samples.push(small_sample(kind, id, frames, res, derive_seed(2024, kind.as_str(), id)));
        }
    }
    let pool = SamplePool::from_samples(samples);
    let eval: Vec<SequenceSample> = (train_ids..train_ids + held_out)
        .map(|id| small_sample(SequenceKind::DynamicSweep, id, frames, res, derive_seed(2024, "heldout", id)))
        .collect();
    let stages = ok(default_schedule(0.05))?;
    let mut results = BTreeMap::new();
    for ablation in [Ablation::None, Ablation::C2, Ablation::C3] {
        let dir = ok(tempfile::tempdir())?;
        let cfg = ModelConfig {
            ablation,
            ..ModelConfig::default()
        };
        let trainer = ok(Trainer::new(cfg, TrainConfig::default()))?;
        ok(run_schedule(&trainer, &stages, 0, &pool, dir.path(), None))?;
        let rep = ok(evaluate_model(&trainer.model, ablation.as_str(), &eval, 20, 0))?;
        println!(
            "    {ablation}: camera {:?} px, expression spearman {:?}",
            rep.cam_reproj_px, rep.expr_spearman
        );
        results.insert(ablation.as_str(), (rep.cam_reproj_px, rep.expr_spearman));
    }
    let (cam, spear) = results["none"];
    let cam = cam.ok_or("camera probe failed on every held-out sequence")?;
    let spear = spear.ok_or("expression probe undefined")?;
    ensure!(cam <= 3.0, "camera reprojection {cam:.2} px > 3");
    ensure!(spear >= 0.8, "expression spearman {spear:.3} < 0.8");
    let c2 = results["c2"].0.unwrap_or(f64::INFINITY);
    ensure!(c2 > cam, "C2 camera error {c2:.2} not worse than {cam:.2}");
    let c3 = results["c3"].1.unwrap_or(f64::NEG_INFINITY);
    ensure!(c3 < spear, "C3 spearman {c3:.3} not below {spear:.3}");
    Ok(format!("camera {cam:.2} px, spearman {spear:.3}, C2 {c2:.2} px, C3 {c3:.3}"))
}

// 8. Pipeline ---------------------------------------------------------------

fn pipeline() -> Outcome {
    use SequenceKind::*;
    let stages = ok(default_schedule(1.0))?;
    let late: BTreeMap<SequenceKind, f64> =
        [(PhoneLike, 0.2), (StudioLike, 0.2), (ViewSweep, 0.3), (DynamicSweep, 0.3)].into_iter().collect();
    let want: [(Vec<(SequenceKind, f64)>, usize, usize, f64); 4] = [
        (vec![(PhoneLike, 1.0)], 13, 20_000, 1e-4),
        (vec![(PhoneLike, 0.6), (StudioLike, 0.4)], 25, 20_000, 1e-4),
        (late.clone().into_iter().collect(), 49, 20_000, 5e-5),
        (late.clone().into_iter().collect(), 81, 30_000, 2e-5),
    ];
    ensure!(stages.len() == 4, "{} stages", stages.len());
    for (s, (mix, frames, iters, lr)) in stages.iter().zip(want) {
        let mix: BTreeMap<_, _> = mix.into_iter().collect();
        ensure!(
            s.mixture == mix && s.frames == frames && s.iterations == iters && s.lr == lr,
            "stage {} = {:?}",
            s.name,
            (&s.mixture, s.frames, s.iterations, s.lr)
        );
    }

    let sizes: BTreeMap<SequenceKind, usize> = SequenceKind::ALL.iter().map(|k| (*k, 10)).collect();
    let mut sampler = ok(MixtureSampler::new(5, &late, &sizes))?;
    let draws = 20_000;
    let mut counts: BTreeMap<SequenceKind, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sampler.draw().0).or_default() += 1;
    }
    let mut worst = 0.0f64;
    for (k, r) in &late {
        let emp = counts.get(k).copied().unwrap_or(0) as f64 / draws as f64;
        worst = worst.max((emp - r).abs());
    }
    ensure!(worst <= 0.02, "mixture ratio off by {worst:.4}");

    // Chaining: a differently seeded trainer resuming stage 2 with zero
    // iterations must write exactly the stage-1 weights.
    let cfg = ModelConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        controller_width: 8,
        controller_heads: 2,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 1,
        log_every: 1,
        ..TrainConfig::default()
    };
    let pool = SamplePool::from_samples([small_sample(PhoneLike, 0, 5, 16, 1)]);
    let chain = vec![
        StageConfig {
            name: "stage1".into(),
            mixture: [(PhoneLike, 1.0)].into_iter().collect(),
            frames: 5,
            iterations: 2,
            lr: 1e-3,
            resume_from: None,
        },
        StageConfig {
            name: "stage2".into(),
            mixture: [(PhoneLike, 1.0)].into_iter().collect(),
            frames: 5,
            iterations: 0,
            lr: 1e-3,
            resume_from: Some("stage1".into()),
        },
    ];
    let dir = ok(tempfile::tempdir())?;
    let first = ok(Trainer::new(cfg, train))?;
    ok(run_schedule(&first, &chain[..1], 0, &pool, dir.path(), None))?;
    let second = ok(Trainer::new(ModelConfig { seed: 77, ..cfg }, train))?;
    ensure!(
        ok(second.model.params().flat_f32())? != ok(first.model.params().flat_f32())?,
        "fresh trainer already matches stage-1 weights"
    );
    ok(run_schedule(&second, &chain, 1, &pool, dir.path(), None))?;
    let (b1, _) = checkpoint_paths(dir.path(), 1);
    let (b2, _) = checkpoint_paths(dir.path(), 2);
    ensure!(ok(std::fs::read(&b1))? == ok(std::fs::read(&b2))?, "stage-2 weights differ from stage 1");
    ensure!(
        ok(second.model.params().flat_f32())? == ok(first.model.params().flat_f32())?,
        "resumed parameters differ from stage-1 parameters"
    );
    Ok(format!("ratios within {worst:.4}; schedule exact; chaining bitwise"))
}

// Harness -------------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let control = std::env::var("PORTRAIT_ACCEPT_CONTROL").is_ok_and(|v| v == "1");
    let criteria = [
        Criterion { id: 1, name: "geometry", limit: Duration::from_secs(30), run: geometry },
        Criterion { id: 2, name: "codec", limit: Duration::from_secs(10), run: codec_suite },
        Criterion { id: 3, name: "architecture", limit: Duration::from_secs(60), run: architecture },
        Criterion { id: 4, name: "gradient check", limit: Duration::from_secs(60), run: gradient_check },
        Criterion { id: 5, name: "oracle sampler", limit: Duration::from_secs(5), run: oracle_sampler },
        Criterion { id: 6, name: "overfit run", limit: Duration::from_secs(6 * 3600), run: overfit },
        Criterion { id: 7, name: "controllability run", limit: Duration::from_secs(8 * 3600), run: controllability },
        Criterion { id: 8, name: "pipeline", limit: Duration::from_secs(30), run: pipeline },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        if c.id == 7 && !control {
            println!("NOT RUN criterion {} ({}): set PORTRAIT_ACCEPT_CONTROL=1", c.id, c.name);
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        let out = match out {
            Ok(msg) if took > c.limit => Err(format!("{msg}; runtime {took:.1?} over {:?}", c.limit)),
            other => other,
        };
        match out {
            Ok(msg) => println!("PASS criterion {} ({}) [{took:.1?}]: {msg}", c.id, c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({}) [{took:.1?}]: {msg}", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
