use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::training::TrainingConfig;

/// Pixel width of the white separators between grid tiles.
pub const GUTTER: usize = 2;

/// `index,label,z_0,...` with every component to 9 significant digits.
pub fn write_embeddings_csv(path: &Path, emb: &EmbeddingTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::from("index,label");
    for j in 0..emb.d_z {
        line += &format!(",z_{j}");
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{line}").map_err(io)?;
    for r in &emb.rows {
        line = format!("{},{}", r.index, r.label);
        for v in r.z.iter() {
            line += &format!(",{v:.8e}");
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Lays `tiles` (each `side * side`, values in `[0, 1]`) out row-major, `columns` per row.
pub fn grid_image(tiles: &[Vec<f32>], side: usize, columns: usize) -> Result<(usize, usize, Vec<u8>)> {
    if tiles.is_empty() || columns == 0 || side == 0 {
        return Err(Error::InvalidArgument("image grid needs at least one tile and one column".into()));
    }
    if let Some(t) = tiles.iter().find(|t| t.len() != side * side) {
        return Err(Error::Shape(format!("tile of {} pixels, expected {}", t.len(), side * side)));
    }
    let cols = columns.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let width = cols * side + (cols - 1) * GUTTER;
    let height = rows * side + (rows - 1) * GUTTER;
    let mut buf = vec![255u8; width * height];
    for (i, tile) in tiles.iter().enumerate() {
        let (x0, y0) = ((i % cols) * (side + GUTTER), (i / cols) * (side + GUTTER));
        for y in 0..side {
            for x in 0..side {
                buf[(y0 + y) * width + x0 + x] = (tile[y * side + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok((width, height, buf))
}

/// Writes an 8-bit grayscale PNG grid; see [`grid_image`].
pub fn write_png_grid(path: &Path, tiles: &[Vec<f32>], side: usize, columns: usize) -> Result<()> {
    let (width, height, buf) = grid_image(tiles, side, columns)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("png encoding of {}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&buf).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Reads an 8-bit grayscale or RGB(A) PNG as intensities in `[0, 1]`; returns `(side, pixels)`.
pub fn read_png_image(path: &Path) -> Result<(usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::Format(format!("png decoding of {}: {e}", path.display()));
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.width != info.height {
        return Err(Error::Shape(format!("{} is {}x{}, expected a square image", path.display(), info.width, info.height)));
    }
    let channels = info.color_type.samples();
    let pixels = buf[..info.buffer_size()]
        .chunks(channels)
        .map(|px| {
            let gray = if channels >= 3 {
                (u32::from(px[0]) + u32::from(px[1]) + u32::from(px[2])) as f32 / 3.0
            } else {
                f32::from(px[0])
            };
            gray / 255.0
        })
        .collect();
    Ok((info.width as usize, pixels))
}

/// `{experiment, config, seed, per_class, aggregate}` metrics document.
#[derive(Debug, Clone, Serialize)]
pub struct JsonReport {
    pub experiment: String,
    pub config: TrainingConfig,
    pub seed: u64,
    pub per_class: serde_json::Value,
    pub aggregate: serde_json::Value,
}

pub fn write_json_report(path: &Path, report: &JsonReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
