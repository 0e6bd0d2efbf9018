//! Tiled inference on images of arbitrary size.
//!
//! An image is cut into non-overlapping square tiles (right and bottom
//! remainders filled by mirror reflection), each tile is colour-matched to the
//! training distribution and segmented, and the per-tile masks are stitched
//! back and cropped to the original size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dataset::rgb_input;
use crate::error::{Error, Result};
use crate::grid::{round_half_up, Grid};
use crate::labeler::{colorize, mask_to_binary_image, LabelMask, Palette, TerrainClass};
use crate::netpbm::Rgb;
use crate::nnet::{argmax_channels, UNet};
use crate::worldgen::TerrainImage;

pub const DEFAULT_TILE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid<T> {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Size of the image that was tiled.
    pub width: usize,
    pub height: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
    /// Row-major.
    pub tiles: Vec<Grid<T>>,
}

impl<T> TileGrid<T> {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Mirror index with period `2n`: `… 2 1 0 | 0 1 2 … n-1 | n-1 n-2 …`.
fn reflect(i: usize, n: usize) -> usize {
    let j = i % (2 * n);
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

pub fn tile_image<T: Copy>(img: &Grid<T>, tile_size: usize) -> Result<TileGrid<T>> {
    if tile_size == 0 {
        return Err(Error::arg("tile size must be positive"));
    }
    let (w, h) = img.dims();
    if w == 0 || h == 0 {
        return Err(Error::arg("cannot tile an empty image"));
    }
    let cols = w.div_ceil(tile_size);
    let rows = h.div_ceil(tile_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = (c * tile_size, r * tile_size);
            tiles.push(Grid::from_fn(tile_size, tile_size, |x, y| {
                *img.get(reflect(x0 + x, w), reflect(y0 + y, h))
            }));
        }
    }
    Ok(TileGrid {
        tile_size,
        rows,
        cols,
        width: w,
        height: h,
        pad_right: cols * tile_size - w,
        pad_bottom: rows * tile_size - h,
        tiles,
    })
}

/// Places `tiles` row-major on the grid geometry and crops the padding.
pub fn stitch<T: Copy, U>(grid: &TileGrid<U>, tiles: &[Grid<T>]) -> Result<Grid<T>> {
    if tiles.len() != grid.rows * grid.cols {
        return Err(Error::arg(format!(
            "{} tiles given for a {}x{} grid",
            tiles.len(),
            grid.rows,
            grid.cols
        )));
    }
    let t = grid.tile_size;
    if let Some(bad) = tiles.iter().find(|m| m.dims() != (t, t)) {
        return Err(Error::shape(format!("tile is {}x{}, expected {t}x{t}", bad.width(), bad.height())));
    }
    Ok(Grid::from_fn(grid.width, grid.height, |x, y| {
        *tiles[(y / t) * grid.cols + x / t].get(x % t, y % t)
    }))
}

/// Per-channel mean and (population) standard deviation, in 0..255 units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ColorStats {
    /// Identity-like stats: mid grey, unit spread.
    fn default() -> Self {
        Self { mean: [127.5; 3], std: [1.0; 3] }
    }
}

impl ColorStats {
    pub fn of_pixels<'a>(pixels: impl IntoIterator<Item = &'a Rgb>) -> Result<Self> {
        let mut n = 0u64;
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for px in pixels {
            n += 1;
            for c in 0..3 {
                let v = px[c] as u64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        if n == 0 {
            return Err(Error::arg("colour statistics of zero pixels"));
        }
        // integer sums keep the result independent of pixel order
        let nf = n as f64;
        let mut out = Self { mean: [0.0; 3], std: [0.0; 3] };
        for c in 0..3 {
            let mean = sum[c] as f64 / nf;
            let var = (sq[c] as f64 * nf - (sum[c] as f64).powi(2)) / (nf * nf);
            out.mean[c] = mean;
            out.std[c] = var.max(0.0).sqrt();
        }
        Ok(out)
    }

    pub fn of_images<'a>(images: impl IntoIterator<Item = &'a TerrainImage>) -> Result<Self> {
        Self::of_pixels(images.into_iter().flat_map(|g| g.as_slice()))
    }

    pub fn is_degenerate(&self) -> bool {
        self.std.iter().any(|&s| !(s > 0.0))
    }
}

/// Affine per-channel remap of `src` statistics onto `reference`.
/// A channel with zero source spread is only mean-shifted.
pub fn color_normalize(tile: &TerrainImage, src: &ColorStats, reference: &ColorStats) -> TerrainImage {
    let mut scale = [1.0; 3];
    for c in 0..3 {
        if src.std[c] > 0.0 {
            scale[c] = reference.std[c] / src.std[c];
        }
    }
    tile.map(|px| {
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = (px[c] as f64 - src.mean[c]) * scale[c] + reference.mean[c];
            out[c] = round_half_up(v, 255.0) as u8;
        }
        out
    })
}

/// Where the source statistics for colour matching come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// One set of statistics over the whole input image.
    #[default]
    Image,
    /// Statistics of each tile separately.
    Tile,
    /// No colour matching.
    None,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::Image => "image",
            NormMode::Tile => "tile",
            NormMode::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [NormMode::Image, NormMode::Tile, NormMode::None].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilerConfig {
    pub tile_size: usize,
    pub norm: NormMode,
    /// Run tiles on the worker pool.
    pub parallel: bool,
}

impl Default for TilerConfig {
    fn default() -> Self {
        Self { tile_size: DEFAULT_TILE_SIZE, norm: NormMode::Image, parallel: true }
    }
}

impl TilerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::arg("tiler.tile_size must be positive"));
        }
        Ok(())
    }
}

fn segment_tile(model: &UNet<f32>, tile: &TerrainImage) -> Result<LabelMask> {
    let logits = model.predict(&rgb_input(tile)?)?;
    let (_, _, h, w) = logits.dims4()?;
    let idx = argmax_channels(&logits)?;
    Grid::from_vec(w, h, idx.into_iter().map(|i| TerrainClass::ALL[i as usize]).collect())
}

/// Segments every tile after colour matching toward `reference`.
/// `image_stats` is used as the source statistics in [`NormMode::Image`].
pub fn infer_tiles(
    model: &UNet<f32>,
    grid: &TileGrid<Rgb>,
    reference: &ColorStats,
    image_stats: &ColorStats,
    cfg: &TilerConfig,
) -> Result<Vec<LabelMask>> {
    if model.config.in_channels != 3 {
        return Err(Error::arg(format!(
            "tiled inference needs an RGB model, this one takes {} channels",
            model.config.in_channels
        )));
    }
    let m = model.config.spatial_multiple();
    if grid.tile_size % m != 0 {
        return Err(Error::shape(format!("tile size {} is not divisible by {m}", grid.tile_size)));
    }
    let run = |tile: &TerrainImage| -> Result<LabelMask> {
        let normalized = match cfg.norm {
            NormMode::None => tile.clone(),
            NormMode::Image => color_normalize(tile, image_stats, reference),
            NormMode::Tile => color_normalize(tile, &ColorStats::of_images([tile])?, reference),
        };
        segment_tile(model, &normalized)
    };
    #[cfg(feature = "parallel")]
    if cfg.parallel {
        return grid.tiles.par_iter().map(run).collect();
    }
    grid.tiles.iter().map(run).collect()
}

/// Full pipeline: tile, colour-match, segment, stitch.
pub fn segment_image(
    model: &UNet<f32>,
    img: &TerrainImage,
    reference: &ColorStats,
    cfg: &TilerConfig,
) -> Result<LabelMask> {
    cfg.validate()?;
    let grid = tile_image(img, cfg.tile_size)?;
    let image_stats = ColorStats::of_images([img])?;
    let masks = infer_tiles(model, &grid, reference, &image_stats, cfg)?;
    stitch(&grid, &masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MosaicStyle {
    /// Every class in its segmentation colour.
    Full,
    /// One class in its colour, everything else black.
    Binary(TerrainClass),
}

pub fn colorize_mosaic(mask: &LabelMask, style: MosaicStyle) -> TerrainImage {
    match style {
        MosaicStyle::Full => colorize(mask, Palette::Segmentation),
        MosaicStyle::Binary(c) => mask_to_binary_image(mask, c),
    }
}
