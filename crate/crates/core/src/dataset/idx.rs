//! Big-endian IDX containers (the MNIST distribution format).
//!
//! Images: magic `0x00000803`, dims `[count, rows, cols]`, one unsigned byte per pixel.
//! Labels: magic `0x00000801`, dims `[count]`, one unsigned byte per label.

use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic number {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("images: dimension product overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "images: truncated payload, header promises {expected} bytes but {} remain",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic number {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "labels: truncated payload, header promises {count} bytes but {} remain",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label IDX pair, scaling each byte to `byte / 255`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "image file holds {} items but label file holds {}",
            images.count,
            labels.len()
        )));
    }
    if images.rows != images.cols {
        return Err(Error::Format(format!(
            "non-square images ({}x{}) are not supported",
            images.rows, images.cols
        )));
    }
    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    LabeledImageSet::new(
        images.pixels.iter().map(|&b| f32::from(b) / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        class_count,
        images.rows,
    )
}

fn pixel_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_idx_images(path: impl AsRef<Path>, side: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let per = side * side;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Shape(format!(
            "{} bytes is not a whole number of {side}x{side} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / per) as u32, side as u32, side as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a set as an IDX pair, quantizing intensities to bytes.
pub fn save_labeled_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let labels = set
        .labels()
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))
        })
        .collect::<Result<Vec<u8>>>()?;
    let pixels: Vec<u8> = set.pixels().iter().map(|&v| pixel_byte(v)).collect();
    write_idx_images(images_path, set.side(), &pixels)?;
    write_idx_labels(labels_path, &labels)
}

const POSE_IMAGES: &str = "poses-images-idx3-ubyte";
const POSE_LABELS: &str = "poses-labels-idx1-ubyte";
const POSE_ANGLES: &str = "poses-angles.txt";

/// Persists a pose set in IDX layout plus `poses-angles.txt` (`label<TAB>degrees` per line).
pub fn save_pose_dataset(set: &LabeledImageSet, angles: &[f64], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if angles.len() != set.class_count() {
        return Err(Error::Shape(format!(
            "{} angles for a set with {} classes",
            angles.len(),
            set.class_count()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_labeled_idx(set, dir.join(POSE_IMAGES), dir.join(POSE_LABELS))?;
    let sidecar: String = angles
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{i}\t{a}\n"))
        .collect();
    let path = dir.join(POSE_ANGLES);
    fs::write(&path, sidecar).map_err(|e| Error::io(path, e))
}

pub fn load_pose_dataset(dir: impl AsRef<Path>) -> Result<(LabeledImageSet, Vec<f64>)> {
    let dir = dir.as_ref();
    let path = dir.join(POSE_ANGLES);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut angles = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut parts = line.split('\t');
        let (Some(idx), Some(deg), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("{POSE_ANGLES}:{}: expected `label<TAB>degrees`", lineno + 1)));
        };
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{POSE_ANGLES}:{}: bad label {idx:?}", lineno + 1)))?;
        if idx != angles.len() {
            return Err(Error::Format(format!("{POSE_ANGLES}:{}: labels must be listed in order", lineno + 1)));
        }
        angles.push(
            deg.trim()
                .parse()
                .map_err(|_| Error::Format(format!("{POSE_ANGLES}:{}: bad angle {deg:?}", lineno + 1)))?,
        );
    }
    let set = load_mnist_idx(dir.join(POSE_IMAGES), dir.join(POSE_LABELS))?;
    if set.class_count() > angles.len() {
        return Err(Error::Format(format!(
            "labels reach {} but the sidecar lists {} angles",
            set.class_count() - 1,
            angles.len()
        )));
    }
    let set = LabeledImageSet::new(set.pixels().to_vec(), set.labels().to_vec(), angles.len(), set.side())?;
    Ok((set, angles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_minimal_files() {
        let mut img = header(0x803, &[2, 2, 2]);
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let parsed = parse_idx_images(&img).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 2, 2));
        assert_eq!(parsed.pixels, vec![0, 255, 51, 102, 1, 2, 3, 4]);

        let mut lab = header(0x801, &[2]);
        lab.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut img = header(0x802, &[1, 1, 1]);
        img.push(0);
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));

        let mut img = header(0x803, &[2, 2, 2]);
        img.extend_from_slice(&[0; 7]);
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));

        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Format(_))));
        let lab = header(0x801, &[3]);
        assert!(matches!(parse_idx_labels(&lab), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        write_idx_images(&ip, 2, &[0; 8]).unwrap();
        write_idx_labels(&lp, &[1, 2, 3]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Format(_))));
        assert!(matches!(load_mnist_idx(dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn pose_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = LabeledImageSet::new(vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.6, 0.8], vec![0, 2], 3, 2).unwrap();
        let angles = [-30.0, 0.0, 30.0];
        save_pose_dataset(&set, &angles, dir.path()).unwrap();
        let (back, a) = load_pose_dataset(dir.path()).unwrap();
        assert_eq!(a, angles);
        assert_eq!(back.labels(), set.labels());
        assert_eq!(back.class_count(), 3);
        for (x, y) in back.pixels().iter().zip(set.pixels()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }
}
