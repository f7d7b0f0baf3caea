//! Expert parameter trajectories and their `MDWT` container.
//!
//! Layout: magic "MDWT", then `u32` version, snapshot dimension and snapshot
//! count, then the snapshots as little-endian `f32`. Metadata lives in a JSON
//! sidecar at `<path>.json`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sidecar_path, Reader, Writer, FORMAT_VERSION};
use crate::error::{contract, io_err, Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"MDWT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub epochs: usize,
    pub encoder: String,
    pub param_shapes: Vec<[usize; 2]>,
    /// Free-form description of the loss configuration.
    pub loss: String,
    /// Snapshots per epoch boundary (`true`) or per optimizer step.
    pub per_epoch: bool,
}

/// Flat parameter snapshots of one expert run, stored at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    snapshots: Vec<Vec<f64>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta) -> Self {
        Self {
            snapshots: Vec::new(),
            meta,
        }
    }

    /// Appends a snapshot, rounded to `f32`.
    pub fn push(&mut self, flat: &[f64]) -> Result<()> {
        if let Some(first) = self.snapshots.first() {
            if first.len() != flat.len() {
                return contract(format!(
                    "snapshot of {} values, trajectory holds {}",
                    flat.len(),
                    first.len()
                ));
            }
        }
        if flat.is_empty() {
            return contract("empty snapshot");
        }
        self.snapshots.push(flat.iter().map(|&v| v as f32 as f64).collect());
        Ok(())
    }

    pub fn snapshots(&self) -> &[Vec<f64>] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(TRAJECTORY_MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.u32(self.dim());
        w.u32(self.len());
        for s in &self.snapshots {
            w.f32s(s);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], meta: TrajectoryMeta) -> Result<Self> {
        let mut r = Reader::new(bytes, TRAJECTORY_MAGIC)?;
        let version = r.u32("version")?;
        if version as u32 != FORMAT_VERSION {
            return r.err(format!("unsupported version {version}"));
        }
        let dim = r.u32("snapshot dimension")?;
        let count = r.u32("snapshot count")?;
        if dim == 0 && count > 0 {
            return r.err("zero snapshot dimension");
        }
        let snapshots = (0..count)
            .map(|_| r.f32s(dim, "snapshot"))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { snapshots, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.encode()).map_err(io_err(path))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&self.meta)?).map_err(io_err(&side))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        let side = sidecar_path(path);
        let meta = match fs::read_to_string(&side) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TrajectoryMeta::default(),
            Err(e) => return Err(Error::Io { path: side, source: e }),
        };
        Self::decode(&bytes, meta)
    }
}

/// A sampled matching segment.
#[derive(Clone, Debug, PartialEq)]
pub struct StartPoint {
    pub trajectory: usize,
    pub epoch: usize,
    pub start: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws a trajectory and a start epoch `≤ max_start_epoch` uniformly and
/// returns that snapshot with the one `t1` steps later.
pub fn sample_start(
    trajectories: &[Trajectory],
    max_start_epoch: usize,
    t1: usize,
    rng: &mut impl Rng,
) -> Result<StartPoint> {
    if trajectories.is_empty() {
        return contract("no expert trajectories");
    }
    if t1 == 0 {
        return contract("expert step count must be at least 1");
    }
    let shortest = trajectories.iter().map(|t| t.len()).min().unwrap_or(0);
    if shortest == 0 || max_start_epoch + t1 > shortest - 1 {
        return contract(format!(
            "max start epoch {max_start_epoch} + {t1} exceeds the shortest trajectory ({} epochs)",
            shortest.saturating_sub(1)
        ));
    }
    let trajectory = rng.random_range(0..trajectories.len());
    let epoch = rng.random_range(0..=max_start_epoch);
    let snaps = trajectories[trajectory].snapshots();
    Ok(StartPoint {
        trajectory,
        epoch,
        start: snaps[epoch].clone(),
        target: snaps[epoch + t1].clone(),
    })
}
