//! Labeled image sets, IDX persistence, semantic neighbor graphs, and the
//! class-balanced batch schedule used for online triplet mining.

mod graph;
mod idx;
mod sampler;
mod source;
mod transform;

pub use graph::{build_digit_neighbor_graph, build_pose_neighbor_graph, SemanticNeighborGraph};
pub use idx::{
    load_mnist_idx, load_pose_dataset, parse_idx_images, parse_idx_labels, save_labeled_idx,
    save_pose_dataset, write_idx_images, write_idx_labels, IdxImages, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use sampler::{make_balanced_batches, Batch, BalancedSampler};
pub use source::{
    class_names, default_data_dir, load_mnist_split, load_split, mnist_available, DatasetKind, Split, ENV_DATA_DIR,
    MODEL_SIDE, POSE_ANGLES_DEG,
};
pub use transform::{
    bilinear_sample, generate_rotated_digit_poses, resize_image, resize_images, rotate_image,
    PoseExpansion,
};

use crate::error::{Error, Result};

/// Square grayscale images with integer class labels. Intensities live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Vec<f32>,
    labels: Vec<usize>,
    class_count: usize,
    side: usize,
}

impl LabeledImageSet {
    /// Builds a set from row-major pixel data, `labels.len()` images of `side * side` each.
    pub fn new(images: Vec<f32>, labels: Vec<usize>, class_count: usize, side: usize) -> Result<Self> {
        if images.len() != labels.len() * side * side {
            return Err(Error::Shape(format!(
                "{} pixels cannot hold {} images of side {side}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            side,
        })
    }

    pub fn empty(class_count: usize, side: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            class_count,
            side,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels_per_image(&self) -> usize {
        self.side * self.side
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// All pixels, image-major.
    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        (0..self.len()).map(move |i| (self.image(i), self.labels[i]))
    }

    /// Copies the images at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            class_count: self.class_count,
            side: self.side,
        }
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Appends one image, clamping intensities into `[0, 1]`.
    pub fn push(&mut self, image: &[f32], label: usize) -> Result<()> {
        if image.len() != self.pixels_per_image() {
            return Err(Error::Shape(format!(
                "image of {} pixels pushed into a set of side {}",
                image.len(),
                self.side
            )));
        }
        if label >= self.class_count {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside [0, {})",
                self.class_count
            )));
        }
        self.images
            .extend(image.iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
        self.labels.push(label);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &LabeledImageSet) -> Result<()> {
        if other.side != self.side || other.class_count != self.class_count {
            return Err(Error::Shape(format!(
                "cannot merge side {} / {} classes into side {} / {} classes",
                other.side, other.class_count, self.side, self.class_count
            )));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_sets() {
        assert!(LabeledImageSet::new(vec![0.0; 7], vec![0, 1], 2, 2).is_err());
        assert!(LabeledImageSet::new(vec![0.0; 8], vec![0, 2], 2, 2).is_err());
        assert!(LabeledImageSet::new(vec![1.5; 4], vec![0], 2, 2).is_err());
        let s = LabeledImageSet::new(vec![0.25; 8], vec![0, 1], 2, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.image(1), &[0.25; 4]);
        assert_eq!(s.class_indices(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn subset_and_push() {
        let mut s = LabeledImageSet::new((0..12).map(|v| v as f32 / 12.0).collect(), vec![0, 1, 0], 2, 2).unwrap();
        let sub = s.subset(&[2, 0]);
        assert_eq!(sub.labels(), &[0, 0]);
        assert_eq!(sub.image(0), s.image(2));
        s.push(&[2.0, -1.0, 0.5, 0.5], 1).unwrap();
        assert_eq!(s.image(3), &[1.0, 0.0, 0.5, 0.5]);
        assert!(s.push(&[0.0; 3], 0).is_err());
    }
}
