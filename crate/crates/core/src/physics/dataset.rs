//! Dataset directories: `manifest.json` plus one little-endian `f64` blob per
//! split. Each trajectory in a blob is `[frames][N][3]` positions, then
//! `[frames][N][3]` velocities, then `[N][d]` attributes.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_trajectory_strided, sample_charged_of_type, sample_initial_gravity, GenerationConfig,
    ParticleGraph, SystemKind, SystemState, Trajectory,
};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Give up on a trajectory slot after this many rejected samples.
const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    fn set(&mut self, split: Split, value: usize) {
        match split {
            Split::Train => self.train = value,
            Split::Valid => self.valid = value,
            Split::Test => self.test = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub system_kind: SystemKind,
    pub n_bodies: usize,
    pub attr_dim: usize,
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub frames: usize,
    pub counts: SplitCounts,
    pub softening: f64,
    pub strength: f64,
    pub seed: u64,
    pub position_cap: f64,
    /// Samples thrown away (blow-up past the cap or a singular encounter).
    pub rejected: SplitCounts,
}

impl DatasetManifest {
    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            system: self.system_kind,
            n_bodies: self.n_bodies,
            n_train: self.counts.train,
            n_valid: self.counts.valid,
            n_test: self.counts.test,
            total_steps: self.steps,
            stride: self.stride,
            dt: self.dt,
            seed: self.seed,
            softening: self.softening,
            interaction_strength: self.strength,
            position_cap: self.position_cap,
        }
    }

    /// Time between stored frames.
    pub fn frame_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Trajectory>,
    pub valid: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Trajectory] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Generates every split in memory. Trajectory `k` of a split draws from its
/// own ChaCha stream keyed by (seed, split, k), so the result does not depend
/// on how the work is scheduled.
pub fn generate_dataset(config: &GenerationConfig) -> Result<Dataset> {
    config.validate()?;
    let law = config.force_law();
    let mut rejected = SplitCounts::default();
    let mut splits: Vec<Vec<Trajectory>> = Vec::with_capacity(3);
    let counts = SplitCounts {
        train: config.n_train,
        valid: config.n_valid,
        test: config.n_test,
    };
    for split in Split::ALL {
        let made: Vec<(Trajectory, usize)> = (0..counts.get(split))
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((split.stream() << 40) | k as u64);
                for attempt in 0..MAX_RESAMPLES {
                    let init = match config.system {
                        SystemKind::Charged => sample_charged_of_type(config, k, &mut rng)?,
                        SystemKind::Gravity => sample_initial_gravity(config, &mut rng)?,
                    };
                    match generate_trajectory_strided(&init, &law, config.total_steps, config.dt, config.stride) {
                        Ok(t) if within_cap(&t, config.position_cap) => return Ok((t, attempt)),
                        Ok(_) | Err(Error::Integration { .. }) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::config(format!(
                    "{} trajectory {k}: {MAX_RESAMPLES} consecutive samples rejected",
                    split.name()
                )))
            })
            .collect::<Result<_>>()?;
        rejected.set(split, made.iter().map(|(_, r)| r).sum());
        splits.push(made.into_iter().map(|(t, _)| t).collect());
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            system_kind: config.system,
            n_bodies: config.n_bodies,
            attr_dim: 1,
            dt: config.dt,
            steps: config.total_steps,
            stride: config.stride,
            frames: config.total_steps / config.stride + 1,
            counts,
            softening: config.softening,
            strength: config.interaction_strength,
            seed: config.seed,
            position_cap: config.position_cap,
            rejected,
        },
        train,
        valid,
        test,
    })
}

fn within_cap(t: &Trajectory, cap: f64) -> bool {
    t.states.iter().all(|s| s.max_position_norm() <= cap)
}

/// Generates and writes a dataset directory (created if missing).
pub fn build_dataset(config: &GenerationConfig, dir: &Path) -> Result<Dataset> {
    let data = generate_dataset(config)?;
    write_dataset(&data, dir)?;
    Ok(data)
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.bin", split.name()));
        let mut bytes = Vec::new();
        for t in data.split(split) {
            encode_trajectory(t, &mut bytes);
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn encode_trajectory(t: &Trajectory, out: &mut Vec<u8>) {
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for s in &t.states {
        s.positions.iter().flatten().for_each(|&x| put(x));
    }
    for s in &t.states {
        s.velocities.iter().flatten().for_each(|&x| put(x));
    }
    t.states[0].graph.attributes().iter().for_each(|&x| put(x));
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format {
            path: manifest_path,
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = dir.join(format!("{}.bin", split.name()));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        splits.push(decode_split(&bytes, &manifest, manifest.counts.get(split), &path)?);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest,
        train,
        valid,
        test,
    })
}

fn decode_split(bytes: &[u8], m: &DatasetManifest, count: usize, path: &Path) -> Result<Vec<Trajectory>> {
    let per_state = m.n_bodies * 3;
    let per_traj = 2 * m.frames * per_state + m.n_bodies * m.attr_dim;
    if bytes.len() != count * per_traj * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} bytes for {count} trajectories, found {}",
                count * per_traj * 8,
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let to_points = |s: &[f64]| -> Vec<Vec3> { s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let mut out = Vec::with_capacity(count);
    for chunk in values.chunks_exact(per_traj) {
        let (pos, rest) = chunk.split_at(m.frames * per_state);
        let (vel, attrs) = rest.split_at(m.frames * per_state);
        let graph = Arc::new(ParticleGraph::complete(attrs.to_vec(), m.attr_dim)?);
        let states = pos
            .chunks_exact(per_state)
            .zip(vel.chunks_exact(per_state))
            .map(|(p, v)| SystemState {
                positions: to_points(p),
                velocities: to_points(v),
                graph: graph.clone(),
            })
            .collect();
        out.push(Trajectory {
            states,
            dt_ground_truth: m.dt,
            stride: m.stride,
            system_kind: m.system_kind,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SystemKind) -> GenerationConfig {
        GenerationConfig {
            n_train: 4,
            n_valid: 2,
            n_test: 3,
            total_steps: 40,
            stride: 10,
            seed: 7,
            ..GenerationConfig::new(kind, 5)
        }
    }

    #[test]
    fn manifest_records_config() {
        let cfg = small(SystemKind::Charged);
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.manifest.n_bodies, 5);
        assert_eq!(d.manifest.dt, 0.001);
        assert_eq!(d.manifest.counts, SplitCounts { train: 4, valid: 2, test: 3 });
        assert_eq!(d.manifest.frames, 5);
        assert_eq!(d.manifest.softening, 0.01);
        assert_eq!(d.manifest.generation_config(), cfg);
        assert_eq!(d.train.len(), 4);
        assert!(d.test.iter().all(|t| t.states.len() == 5));
    }

    #[test]
    fn splits_use_distinct_streams() {
        let d = generate_dataset(&small(SystemKind::Gravity)).unwrap();
        assert_ne!(d.train[0].states[0].positions, d.valid[0].states[0].positions);
        assert_ne!(d.train[0].states[0].positions, d.test[0].states[0].positions);
        assert_ne!(d.train[0].states[0].positions, d.train[1].states[0].positions);
    }

    #[test]
    fn charged_types_cycle_by_index() {
        let d = generate_dataset(&small(SystemKind::Charged)).unwrap();
        for (k, t) in d.train.iter().enumerate() {
            let positives = t.states[0].graph.attributes().iter().filter(|&&c| c > 0.0).count();
            assert_eq!(positives, super::super::CHARGED_POSITIVE_COUNTS[k % 3]);
        }
    }

    #[test]
    fn disk_round_trip_is_bit_exact_and_deterministic() {
        let cfg = small(SystemKind::Gravity);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let written = build_dataset(&cfg, a.path()).unwrap();
        build_dataset(&cfg, b.path()).unwrap();
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded, written);
        for name in ["manifest.json", "train.bin", "valid.bin", "test.bin"] {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between runs");
        }
    }

    #[test]
    fn truncated_split_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small(SystemKind::Gravity), dir.path()).unwrap();
        let p = dir.path().join("valid.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_directory_reports_path() {
        let err = load_dataset(Path::new("/nonexistent/pingo-data")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/pingo-data"));
    }
}
