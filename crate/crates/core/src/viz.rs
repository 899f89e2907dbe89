//! Heatmaps from interpretation maps, superimposed on input images.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;
pub const BLEND: f64 = 0.5;
pub const COLORMAP: &str = "viridis";

/// Rendering choices recorded next to every image written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderMetadata {
    pub k: usize,
    pub colormap: String,
    pub blend: f64,
    pub interpolation: String,
    pub normalization: String,
}

impl RenderMetadata {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            colormap: COLORMAP.to_string(),
            blend: BLEND,
            interpolation: "bilinear, half-pixel centers".to_string(),
            normalization: "min-max; constant maps become zero".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSource {
    pub sample_id: String,
    pub method: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[height, width]` in `[0, 1]`.
    pub values: Array2<f64>,
    /// Per-location max over the chosen channels, before resizing.
    pub grid: Array2<f64>,
    pub channels: Vec<usize>,
    pub source: HeatmapSource,
}

/// Sum over spatial locations of every channel of `[h, w, d]` maps.
pub fn score_maps(z: ArrayView3<'_, f64>) -> Array1<f64> {
    z.sum_axis(Axis(0)).sum_axis(Axis(0))
}

/// Indices of the `k` highest scores, highest first, lower index on ties.
pub fn top_k_channels(scores: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn max_combine(z: ArrayView3<'_, f64>, channels: &[usize]) -> Array2<f64> {
    let (h, w, _) = z.dim();
    Array2::from_shape_fn((h, w), |(u, v)| {
        channels
            .iter()
            .map(|&c| z[[u, v, c]])
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, x - lo as f64)
}

/// Bilinear resize with pixel centers at half-integer coordinates and
/// edge clamping.
pub fn resize_bilinear(grid: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    let rows: Vec<_> = (0..height).map(|y| source_coord(y, gh, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, gw, width)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn min_max_normalize(mut values: Array2<f64>) -> Array2<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        values.fill(0.0);
    } else {
        values.mapv_inplace(|v| (v - lo) / (hi - lo));
    }
    values
}

/// Top-`k` channels by score, per-location max, resize to `size`
/// (`(height, width)`), min-max normalize.
pub fn compose_heatmap(z: ArrayView3<'_, f64>, k: usize, size: (usize, usize), source: HeatmapSource) -> Result<Heatmap> {
    let (h, w, d) = z.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("k must lie in 1..={d}, got {k}")));
    }
    if h == 0 || w == 0 || size.0 == 0 || size.1 == 0 {
        return Err(Error::invalid("empty map or target size"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("interpretation maps".into()));
    }
    let channels = top_k_channels(&score_maps(z), k);
    let grid = max_combine(z, &channels);
    let values = min_max_normalize(resize_bilinear(grid.view(), size.0, size.1));
    Ok(Heatmap {
        values,
        grid,
        channels,
        source,
    })
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `0.5 * image + 0.5 * h * colormap(h)` per pixel.
pub fn blend(heatmap: &Heatmap, image: &RgbImage) -> Result<RgbImage> {
    let (h, w) = heatmap.values.dim();
    if image.height() as usize != h || image.width() as usize != w {
        return Err(Error::Shape(format!(
            "heatmap is {w}x{h} but the image is {}x{}",
            image.width(),
            image.height()
        )));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let value = heatmap.values[[y as usize, x as usize]];
        let color = colorous::VIRIDIS.eval_continuous(value);
        let base = image.get_pixel(x, y).0;
        let mix = |b: u8, c: u8| to_u8((1.0 - BLEND) * f64::from(b) + BLEND * value * f64::from(c));
        Rgb([mix(base[0], color.r), mix(base[1], color.g), mix(base[2], color.b)])
    }))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Reads an RGB image, blends the heatmap over it and writes a PNG.
pub fn overlay(heatmap: &Heatmap, image_path: &Path, out_path: &Path) -> Result<()> {
    let img = read_rgb(image_path)?;
    save_png(&blend(heatmap, &img)?, out_path)
}

/// Mid-gray stand-in for samples without a raw image.
pub fn placeholder_image(height: usize, width: usize) -> RgbImage {
    RgbImage::from_pixel(width as u32, height as u32, Rgb([128, 128, 128]))
}

/// Tiles laid out row by row with a white `gap` between them; each cell is
/// as large as the largest tile.
pub fn compose_grid(rows: &[Vec<RgbImage>], gap: u32) -> RgbImage {
    let cell_w = rows.iter().flatten().map(|t| t.width()).max().unwrap_or(0);
    let cell_h = rows.iter().flatten().map(|t| t.height()).max().unwrap_or(0);
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0) as u32;
    let width = ncols * cell_w + (ncols + 1) * gap;
    let height = rows.len() as u32 * cell_h + (rows.len() as u32 + 1) * gap;
    let mut out = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let x0 = gap + c as u32 * (cell_w + gap);
            let y0 = gap + r as u32 * (cell_h + gap);
            image::imageops::replace(&mut out, tile, i64::from(x0), i64::from(y0));
        }
    }
    out
}
