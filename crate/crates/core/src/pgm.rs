//! Binary portable graymap (P5) grids, writable without any imaging
//! dependency. Images are tiled with one-pixel separators and affinely
//! mapped to 0-255 per grid; the map is recorded so it can be inverted.

use crate::props::GRID;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const SEPARATOR_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraymapInfo {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    /// Pixel value mapped to 0.
    pub min: f64,
    /// Pixel value mapped to 255.
    pub max: f64,
}

/// Writes `images` as a `cols`-wide P5 grid. Output dimensions are
/// `44*cols + (cols-1)` by `44*rows + (rows-1)`; missing trailing cells
/// are left black.
pub fn write_grid(
    path: impl AsRef<Path>,
    images: &[Array2<f32>],
    cols: usize,
) -> std::io::Result<GraymapInfo> {
    assert!(cols > 0, "grid needs at least one column");
    assert!(!images.is_empty(), "grid needs at least one image");
    let rows = images.len().div_ceil(cols);
    let width = GRID * cols + (cols - 1);
    let height = GRID * rows + (rows - 1);

    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for img in images {
        for &v in img.iter() {
            min = min.min(v as f64);
            max = max.max(v as f64);
        }
    }
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let map = |v: f32| ((v as f64 - min) * scale).round().clamp(0.0, 255.0) as u8;

    let mut pixels = vec![SEPARATOR_GRAY; width * height];
    for (k, img) in images.iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        let top = gr * (GRID + 1);
        let left = gc * (GRID + 1);
        for ((r, c), &v) in img.indexed_iter() {
            pixels[(top + r) * width + left + c] = map(v);
        }
    }
    // blank any unused trailing cells
    for k in images.len()..rows * cols {
        let (gr, gc) = (k / cols, k % cols);
        let top = gr * (GRID + 1);
        let left = gc * (GRID + 1);
        for r in 0..GRID {
            for c in 0..GRID {
                pixels[(top + r) * width + left + c] = 0;
            }
        }
    }

    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(GraymapInfo {
        file: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        rows,
        cols,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_header(bytes: &[u8]) -> (usize, usize, usize, usize) {
        // returns (width, height, maxval, header_len)
        let text = String::from_utf8_lossy(&bytes[..40.min(bytes.len())]);
        let mut parts = text.split_ascii_whitespace();
        assert_eq!(parts.next().unwrap(), "P5");
        let w: usize = parts.next().unwrap().parse().unwrap();
        let h: usize = parts.next().unwrap().parse().unwrap();
        let m: usize = parts.next().unwrap().parse().unwrap();
        // header is "P5\n{w} {h}\n{m}\n"
        let header = format!("P5\n{w} {h}\n{m}\n");
        (w, h, m, header.len())
    }

    #[test]
    fn grid_dimensions_and_payload() {
        let dir = std::env::temp_dir().join("zdc_pgm_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.pgm");
        let images: Vec<Array2<f32>> = (0..5)
            .map(|k| Array2::from_elem((GRID, GRID), k as f32))
            .collect();
        let info = write_grid(&path, &images, 3).unwrap();
        assert_eq!((info.rows, info.cols), (2, 3));
        assert_eq!(info.min, 0.0);
        assert_eq!(info.max, 4.0);

        let bytes = std::fs::read(&path).unwrap();
        let (w, h, m, header_len) = parse_header(&bytes);
        assert_eq!(w, GRID * 3 + 2);
        assert_eq!(h, GRID * 2 + 1);
        assert_eq!(m, 255);
        assert_eq!(bytes.len(), header_len + w * h);

        let px = &bytes[header_len..];
        // image 0 maps to 0, image 4 to 255
        assert_eq!(px[0], 0);
        let top = GRID + 1;
        let left = GRID + 1;
        assert_eq!(px[top * w + left], 255); // image 4 at grid (1, 1)
        // separator column between image 0 and image 1
        assert_eq!(px[GRID], SEPARATOR_GRAY);
        // unused cell (1, 2) is black
        assert_eq!(px[top * w + 2 * (GRID + 1)], 0);
    }

    #[test]
    fn constant_images_map_to_zero() {
        let dir = std::env::temp_dir().join("zdc_pgm_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("flat.pgm");
        let images = vec![Array2::from_elem((GRID, GRID), 7.0f32)];
        let info = write_grid(&path, &images, 1).unwrap();
        assert_eq!(info.min, info.max);
        let bytes = std::fs::read(&path).unwrap();
        let (_, _, _, header_len) = parse_header(&bytes);
        assert!(bytes[header_len..].iter().all(|&b| b == 0));
    }
}
