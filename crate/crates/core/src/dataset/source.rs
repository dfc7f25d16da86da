//! On-disk dataset roots: MNIST IDX files, and the rotated-digit pose set derived from them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    build_digit_neighbor_graph, build_pose_neighbor_graph, generate_rotated_digit_poses, load_mnist_idx,
    load_pose_dataset, resize_images, save_pose_dataset, LabeledImageSet, PoseExpansion, SemanticNeighborGraph,
};
use crate::error::{Error, Result};

/// Side length every model input is resized to.
pub const MODEL_SIDE: usize = 32;

/// Pose classes, in degrees, ordered so adjacent labels are adjacent poses.
pub const POSE_ANGLES_DEG: [f64; 7] = [-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0];

/// Seed for generating the pose set; fixed so every run sees the same images.
const POSE_SEED: u64 = 0x5057_5345;

pub const ENV_DATA_DIR: &str = "ATNL_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Poses,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "poses" => Ok(Self::Poses),
            _ => Err(Error::InvalidArgument(format!("unknown dataset {s:?} (expected mnist or poses)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Poses => "poses",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn mnist_files(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// `$ATNL_DATA_DIR`, falling back to `data/mnist` under the working directory.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(ENV_DATA_DIR).map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from)
}

/// Whether `dir` holds all four MNIST IDX files.
pub fn mnist_available(dir: &Path) -> bool {
    [Split::Train, Split::Test].iter().all(|s| {
        let (i, l) = s.mnist_files();
        dir.join(i).is_file() && dir.join(l).is_file()
    })
}

/// Raw MNIST split at its stored resolution.
pub fn load_mnist_split(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let (images, labels) = split.mnist_files();
    load_mnist_idx(dir.join(images), dir.join(labels))
}

/// A split resized to model resolution, with the neighbor graph for its label space.
///
/// The pose set is generated from the matching MNIST split on first use (one random pose
/// per image) and cached under `<dir>/poses/<split>/`.
pub fn load_split(kind: DatasetKind, dir: &Path, split: Split) -> Result<(LabeledImageSet, SemanticNeighborGraph)> {
    match kind {
        DatasetKind::Mnist => {
            let set = resize_images(&load_mnist_split(dir, split)?, MODEL_SIDE)?;
            Ok((set, build_digit_neighbor_graph()))
        }
        DatasetKind::Poses => {
            let cache = dir.join("poses").join(split.name());
            let (set, angles) = match load_pose_dataset(&cache) {
                Ok(found) => found,
                Err(Error::Io { .. }) => {
                    let base = resize_images(&load_mnist_split(dir, split)?, MODEL_SIDE)?;
                    let seed = POSE_SEED + matches!(split, Split::Test) as u64;
                    let set = generate_rotated_digit_poses(&base, &POSE_ANGLES_DEG, PoseExpansion::RandomAngle, seed)?;
                    save_pose_dataset(&set, &POSE_ANGLES_DEG, &cache)?;
                    (set, POSE_ANGLES_DEG.to_vec())
                }
                Err(e) => return Err(e),
            };
            let set = resize_images(&set, MODEL_SIDE)?;
            Ok((set, build_pose_neighbor_graph(&angles)?))
        }
    }
}

/// Human-readable class names for reports.
pub fn class_names(kind: DatasetKind, class_count: usize) -> Vec<String> {
    match kind {
        DatasetKind::Mnist => (0..class_count).map(|c| c.to_string()).collect(),
        DatasetKind::Poses => (0..class_count)
            .map(|c| POSE_ANGLES_DEG.get(c).map_or_else(|| c.to_string(), |a| format!("{a}deg")))
            .collect(),
    }
}
