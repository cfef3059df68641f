//! On-disk dataset: `<root>/<kind>/<seq_id>/{meta,camera,expression,headpose}.json`
//! plus `frames/%05d.png` and `normals/%05d.png`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sequence::{generate_sequence_with, SequenceOptions};
use super::{ExpressionParams, HeadPose, IdentityParams, SequenceKind, SequenceSample};
use crate::camera::{Trajectory, TrajectoryKind};
use crate::error::{Error, Result};
use crate::image_io::{read_png, write_png};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindCount {
    pub kind: SequenceKind,
    pub identities: usize,
    pub sequences_per_identity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root_seed: u64,
    pub frames: usize,
    pub resolution: u32,
    /// First identity index; held-out splits use a disjoint range.
    #[serde(default)]
    pub identity_offset: u64,
    pub counts: Vec<KindCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub kind: SequenceKind,
    pub identity_index: u64,
    pub sequence_index: usize,
    pub seed: u64,
    pub root_seed: u64,
    pub frames: usize,
    pub resolution: u32,
    pub trajectory_kind: TrajectoryKind,
    pub look_at: [f64; 3],
    pub identity: IdentityParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub dir: PathBuf,
    pub meta: SequenceMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

pub fn identity_seed(root_seed: u64, identity_index: u64) -> u64 {
    derive_seed(root_seed, "identity", identity_index)
}

pub fn sequence_seed(root_seed: u64, kind: SequenceKind, identity_index: u64, j: usize) -> u64 {
    derive_seed(root_seed, &format!("{kind}/{identity_index}"), j as u64)
}

fn sequence_id(identity_index: u64, j: usize) -> String {
    format!("id{identity_index:05}_{j:03}")
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes one sequence into `dir`, which must not exist yet.
pub fn write_sequence(dir: &Path, sample: &SequenceSample, meta: &SequenceMeta) -> Result<()> {
    for sub in ["frames", "normals"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    write_json(&dir.join("meta.json"), meta)?;
    write_json(&dir.join("camera.json"), &sample.trajectory)?;
    write_json(&dir.join("expression.json"), &sample.expressions)?;
    write_json(&dir.join("headpose.json"), &sample.head_poses)?;
    for i in 0..sample.len() {
        let name = format!("{i:05}.png");
        write_png(&dir.join("frames").join(&name), sample.frames.index_axis(Axis(0), i))?;
        write_png(&dir.join("normals").join(&name), sample.normal_maps.index_axis(Axis(0), i))?;
    }
    Ok(())
}

fn schema(path: &Path, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_stack(dir: &Path, n: usize, res: usize) -> Result<Array4<u8>> {
    let mut out = Array4::zeros((n, res, res, 3));
    for i in 0..n {
        let p = dir.join(format!("{i:05}.png"));
        let img = read_png(&p)?;
        if img.dim() != (res, res, 3) {
            return Err(schema(&p, format!("expected {res}x{res} RGB, got {:?}", img.dim())));
        }
        out.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(out)
}

pub fn load_sequence(dir: &Path) -> Result<SequenceSample> {
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    let trajectory: Trajectory = read_json(&dir.join("camera.json"))?;
    let expressions: Vec<ExpressionParams> = read_json(&dir.join("expression.json"))?;
    let head_poses: Vec<HeadPose> = read_json(&dir.join("headpose.json"))?;
    let n = meta.frames;
    if trajectory.len() != n || expressions.len() != n || head_poses.len() != n {
        return Err(schema(dir, format!("annotation lengths disagree with meta.frames = {n}")));
    }
    let res = meta.resolution as usize;
    let sample = SequenceSample {
        kind: meta.kind,
        seed: meta.seed,
        identity: meta.identity.clone(),
        frames: read_stack(&dir.join("frames"), n, res)?,
        normal_maps: read_stack(&dir.join("normals"), n, res)?,
        trajectory,
        expressions,
        head_poses,
        look_at: meta.look_at,
    };
    sample.validate()?;
    Ok(sample)
}

/// Generates every sequence named by `config` under `root`.
///
/// Each sequence derives its seed from `(root_seed, kind, identity, index)`,
/// so the bytes written do not depend on worker scheduling.
pub fn generate_dataset(config: &DatasetConfig, root: &Path, force: bool) -> Result<Dataset> {
    if is_nonempty_dir(root)? {
        if !force {
            return Err(Error::DirectoryNotEmpty(root.to_path_buf()));
        }
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let opts = SequenceOptions::new(config.frames, config.resolution);

    let mut jobs = Vec::new();
    for kc in &config.counts {
        for i in 0..kc.identities as u64 {
            let idx = config.identity_offset + i;
            for j in 0..kc.sequences_per_identity {
                jobs.push((kc.kind, idx, j));
            }
        }
    }
    let entries = jobs
        .into_par_iter()
        .map(|(kind, idx, j)| {
            let identity = IdentityParams::sample(identity_seed(config.root_seed, idx));
            let seed = sequence_seed(config.root_seed, kind, idx, j);
            let sample = generate_sequence_with(kind, &identity, seed, &opts)?;
            let meta = SequenceMeta {
                kind,
                identity_index: idx,
                sequence_index: j,
                seed,
                root_seed: config.root_seed,
                frames: config.frames,
                resolution: config.resolution,
                trajectory_kind: sample.trajectory.kind,
                look_at: sample.look_at,
                identity,
            };
            let dir = root.join(kind.as_str()).join(sequence_id(idx, j));
            write_sequence(&dir, &sample, &meta)?;
            Ok(DatasetEntry { dir, meta })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&root.join("dataset.json"), config)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
    })
}

impl Dataset {
    /// Indexes an existing dataset directory, sorted by kind then id.
    pub fn open(root: &Path) -> Result<Dataset> {
        let mut entries = Vec::new();
        for kind in SequenceKind::ALL {
            let kdir = root.join(kind.as_str());
            if !kdir.is_dir() {
                continue;
            }
            let mut dirs: Vec<PathBuf> = fs::read_dir(&kdir)
                .map_err(|e| Error::io(&kdir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for dir in dirs {
                let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
                if meta.kind != kind {
                    return Err(schema(&dir, format!("meta kind {} under {kind}/", meta.kind)));
                }
                entries.push(DatasetEntry { dir, meta });
            }
        }
        if entries.is_empty() {
            return Err(schema(root, "no sequences found"));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn of_kind(&self, kind: SequenceKind) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.meta.kind == kind).collect()
    }

    pub fn load_all(&self) -> Result<Vec<SequenceSample>> {
        self.entries.par_iter().map(|e| load_sequence(&e.dir)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::sequence::sweep_is_spin;

    fn small(kind: SequenceKind, ids: usize, per: usize) -> DatasetConfig {
        DatasetConfig {
            root_seed: 42,
            frames: 5,
            resolution: 8,
            identity_offset: 0,
            counts: vec![KindCount {
                kind,
                identities: ids,
                sequences_per_identity: per,
            }],
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn counts_layout_and_reload() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        let ds = generate_dataset(&small(SequenceKind::ViewSweep, 4, 2), &root, false).unwrap();
        assert_eq!(ds.entries.len(), 8);
        let opened = Dataset::open(&root).unwrap();
        assert_eq!(opened.entries.len(), 8);
        for e in &opened.entries {
            for f in ["meta.json", "camera.json", "expression.json", "headpose.json", "frames/00004.png", "normals/00000.png"] {
                assert!(e.dir.join(f).is_file(), "{f} missing in {:?}", e.dir);
            }
        }
        let e = &opened.entries[3];
        let loaded = load_sequence(&e.dir).unwrap();
        let regenerated = generate_sequence_with(
            e.meta.kind,
            &e.meta.identity,
            e.meta.seed,
            &SequenceOptions::new(5, 8),
        )
        .unwrap();
        assert_eq!(loaded, regenerated);
    }

    #[test]
    fn regeneration_is_byte_identical_and_guarded() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let cfg = DatasetConfig {
            counts: vec![
                KindCount { kind: SequenceKind::PhoneLike, identities: 2, sequences_per_identity: 1 },
                KindCount { kind: SequenceKind::DynamicSweep, identities: 2, sequences_per_identity: 1 },
            ],
            ..small(SequenceKind::PhoneLike, 0, 0)
        };
        generate_dataset(&cfg, &a, false).unwrap();
        generate_dataset(&cfg, &b, false).unwrap();
        assert_eq!(tree_bytes(&a), tree_bytes(&b));
        assert!(matches!(generate_dataset(&cfg, &a, false), Err(Error::DirectoryNotEmpty(_))));
        generate_dataset(&cfg, &a, true).unwrap();
        assert_eq!(tree_bytes(&a), tree_bytes(&b));
    }

    #[test]
    fn spin_spiral_split_is_balanced() {
        // 128 sweep trajectories; 99% binomial interval around 64 is [50, 78].
        let opts = SequenceOptions::new(5, 8);
        let spins = (0..64u64)
            .flat_map(|idx| (0..2).map(move |j| (idx, j)))
            .filter(|&(idx, j)| sweep_is_spin(sequence_seed(7, SequenceKind::ViewSweep, idx, j), &opts))
            .count();
        assert!((50..=78).contains(&spins), "{spins} spins out of 128");
    }

    #[test]
    fn corrupt_annotations_are_schema_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        let ds = generate_dataset(&small(SequenceKind::PhoneLike, 1, 1), &root, false).unwrap();
        let dir = &ds.entries[0].dir;
        fs::write(dir.join("expression.json"), "[[0,0,0,0,0,3]]").unwrap();
        assert!(load_sequence(dir).is_err());
    }
}
