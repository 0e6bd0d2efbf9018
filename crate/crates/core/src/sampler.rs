//! Latitude-corrected patch sampling.
//!
//! The world is equirectangular, so a pixel at latitude φ covers only cos φ
//! of the ground width it covers at the equator. Crops are therefore taken
//! `1/cos φ` times wider than tall and squeezed back to a square by
//! horizontal area averaging, which keeps ground features the same pixel size
//! at every latitude.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labeler::{pseudo_label, LabelMask, LabelerConfig, PatchGrids, TerrainClass};
use crate::rng::{derive, stream, Rng, TAG_LABEL, TAG_SAMPLER};
use crate::worldgen::{hillshade, render_terrain, HeightField, Sun, TerrainImage, WorldRaster};

/// Attempts allowed to find a crop that fits the world.
const MAX_CENTER_DRAWS: usize = 1000;
/// Overall draw budget per requested patch.
const DRAWS_PER_PATCH: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_patches: usize,
    pub base: usize,
    pub lat_max: f64,
    pub ocean_reject_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_patches: 5000, base: 64, lat_max: 80.0, ocean_reject_threshold: 0.9, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ocean_reject_threshold > 0.0 && self.ocean_reject_threshold <= 1.0) {
            return Err(Error::arg("sampler.ocean_reject_threshold must lie in (0, 1]"));
        }
        if self.base < 16 || self.base % 2 != 0 {
            return Err(Error::arg("sampler.base must be even and at least 16"));
        }
        if !(self.lat_max > 0.0 && self.lat_max < 90.0) {
            return Err(Error::arg("sampler.lat_max must lie in (0, 90)"));
        }
        Ok(())
    }
}

/// Horizontal stretch needed at latitude `lat`: `1 / cos(lat)`.
pub fn rescale_factor(lat: f64, lat_max: f64) -> Result<f64> {
    if !(lat_max < 90.0) {
        return Err(Error::arg(format!("lat_max must be below 90, got {lat_max}")));
    }
    if !(lat.abs() <= lat_max) {
        return Err(Error::arg(format!("latitude {lat} outside ±{lat_max}")));
    }
    // exact at the common special angles
    if lat == 0.0 {
        return Ok(1.0);
    }
    if lat.abs() == 60.0 {
        return Ok(2.0);
    }
    Ok(1.0 / lat.to_radians().cos())
}

/// Crop of the world before labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatch {
    pub heights: Grid<f64>,
    pub moisture: Grid<f64>,
    pub center_lat: f64,
    pub center_lon: f64,
    pub rescale_factor: f64,
    /// Source columns covered by the crop before resampling.
    pub crop_width: usize,
    pub x0: usize,
    pub y0: usize,
}

/// Area-averaging horizontal resample of every row to `out_w` columns.
pub fn resample_rows_area(g: &Grid<f64>, out_w: usize) -> Grid<f64> {
    let in_w = g.width();
    if in_w == out_w {
        return g.clone();
    }
    let scale = in_w as f64 / out_w as f64;
    Grid::from_fn(out_w, g.height(), |x, y| {
        let (lo, hi) = (x as f64 * scale, (x + 1) as f64 * scale);
        let mut acc = 0.0;
        let mut i = lo.floor() as usize;
        while (i as f64) < hi && i < in_w {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            acc += overlap * g.get(i, y);
            i += 1;
        }
        acc / scale
    })
}

/// Nearest-neighbour horizontal resample, for categorical grids.
pub fn resample_rows_nearest<T: Copy>(g: &Grid<T>, out_w: usize) -> Grid<T> {
    let scale = g.width() as f64 / out_w as f64;
    Grid::from_fn(out_w, g.height(), |x, y| {
        let src = (((x as f64 + 0.5) * scale).floor() as usize).min(g.width() - 1);
        *g.get(src, y)
    })
}

/// Crops the `base`-row window starting at row `y0` and column `x0`, with
/// width chosen from the window's centre latitude, and resamples it to
/// `base`×`base`.
pub fn crop_patch(world: &WorldRaster, y0: usize, x0: usize, base: usize, lat_max: f64) -> Result<RawPatch> {
    if y0 + base > world.height() {
        return Err(Error::arg(format!("rows {y0}..{} exceed world height {}", y0 + base, world.height())));
    }
    let center_lat = world.row_to_lat(y0 as f64 + (base as f64 - 1.0) / 2.0);
    let factor = rescale_factor(center_lat, lat_max)?;
    let crop_width = (base as f64 * factor).round() as usize;
    if x0 + crop_width > world.width() {
        return Err(Error::arg(format!(
            "crop of width {crop_width} at column {x0} exceeds world width {}",
            world.width()
        )));
    }
    let heights = world.height_field.elevation.crop(x0, y0, crop_width, base)?;
    let moisture = world.moisture.crop(x0, y0, crop_width, base)?;
    Ok(RawPatch {
        heights: resample_rows_area(&heights, base),
        moisture: resample_rows_area(&moisture, base),
        center_lat,
        center_lon: world.col_to_lon(x0 as f64 + (crop_width as f64 - 1.0) / 2.0),
        rescale_factor: factor,
        crop_width,
        x0,
        y0,
    })
}

/// Draws a crop position uniformly over the positions where the crop fits.
pub fn sample_raw(world: &WorldRaster, rng: &mut Rng, cfg: &SamplerConfig) -> Result<RawPatch> {
    let base = cfg.base;
    if world.height() < base {
        return Err(Error::Exhaustion { draws: 0, reason: format!("world height {} below patch size {base}", world.height()) });
    }
    for _ in 0..MAX_CENTER_DRAWS {
        let y0 = rng.random_range(0..=world.height() - base);
        let center_lat = world.row_to_lat(y0 as f64 + (base as f64 - 1.0) / 2.0);
        let Ok(factor) = rescale_factor(center_lat, cfg.lat_max) else { continue };
        let crop_width = (base as f64 * factor).round() as usize;
        if crop_width > world.width() {
            continue;
        }
        let x0 = rng.random_range(0..=world.width() - crop_width);
        return crop_patch(world, y0, x0, base, cfg.lat_max);
    }
    Err(Error::Exhaustion { draws: MAX_CENTER_DRAWS, reason: "no crop position fits the world".into() })
}

/// A labelled, rendered training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub terrain: TerrainImage,
    /// Metres.
    pub height: Grid<f64>,
    pub mask: LabelMask,
    pub center_lat: f64,
    pub center_lon: f64,
    pub rescale_factor: f64,
    /// Seed of the labelling stream (threshold jitter and k-means).
    pub source_seed: u64,
}

/// Labels and renders a raw crop.
pub fn finish_patch(raw: RawPatch, cell_size: f64, sun: Sun, labeler: &LabelerConfig, label_seed: u64) -> Result<Patch> {
    let grids = PatchGrids { heights: &raw.heights, moisture: &raw.moisture, center_lat: raw.center_lat };
    let mask = pseudo_label(grids, labeler, &mut crate::rng::rng_from(label_seed))?;
    let field = HeightField::new(raw.heights, cell_size)?;
    let shade = hillshade(&field, sun.azimuth, sun.altitude)?;
    let terrain = render_terrain(&field, &mask, &shade)?;
    Ok(Patch {
        terrain,
        height: field.elevation,
        mask,
        center_lat: raw.center_lat,
        center_lon: raw.center_lon,
        rescale_factor: raw.rescale_factor,
        source_seed: label_seed,
    })
}

/// Seed of one patch's labelling stream: a sampler draw keyed by the
/// labeler's own seed.
fn label_seed(labeler: &LabelerConfig, rng: &mut Rng) -> u64 {
    derive(labeler.seed, &[TAG_LABEL, rng.random::<u64>()])
}

/// Draws one crop and labels it.
pub fn sample_patch(world: &WorldRaster, rng: &mut Rng, cfg: &SamplerConfig, labeler: &LabelerConfig, sun: Sun) -> Result<Patch> {
    let raw = sample_raw(world, rng, cfg)?;
    let label_seed = label_seed(labeler, rng);
    finish_patch(raw, world.height_field.cell_size, sun, labeler, label_seed)
}

/// True when more than `threshold` of the pixels are water.
pub fn is_ocean_only(mask: &LabelMask, threshold: f64) -> bool {
    if mask.is_empty() {
        return false;
    }
    let water = mask.as_slice().iter().filter(|&&c| c == TerrainClass::Water).count();
    water as f64 / mask.len() as f64 > threshold
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    pub rescale_factor: f64,
    pub label_jitter_seed: u64,
}

impl ManifestEntry {
    pub fn for_patch(index: usize, p: &Patch) -> Self {
        Self {
            index,
            center_lat: p.center_lat,
            center_lon: p.center_lon,
            rescale_factor: p.rescale_factor,
            label_jitter_seed: p.source_seed,
        }
    }
}

/// Draws accepted patches one at a time and hands each to `sink`.
///
/// Patch `i` uses its own random stream derived from `(cfg.seed, i)`, so the
/// result does not depend on how many draws earlier patches rejected.
pub fn for_each_patch(
    world: &WorldRaster,
    cfg: &SamplerConfig,
    labeler: &LabelerConfig,
    sun: Sun,
    mut sink: impl FnMut(Patch, ManifestEntry) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    labeler.validate()?;
    let budget = cfg.n_patches.saturating_mul(DRAWS_PER_PATCH);
    let mut draws = 0usize;
    for index in 0..cfg.n_patches {
        let mut rng = stream(cfg.seed, &[TAG_SAMPLER, index as u64]);
        loop {
            if draws >= budget {
                return Err(Error::Exhaustion {
                    draws,
                    reason: format!("only {index} of {} patches passed the ocean filter", cfg.n_patches),
                });
            }
            draws += 1;
            let raw = sample_raw(world, &mut rng, cfg)?;
            let label_seed = label_seed(labeler, &mut rng);
            // an all-sea crop labels as all water; skip the clustering
            if cfg.ocean_reject_threshold < 1.0 && raw.heights.as_slice().iter().all(|&e| e <= 0.0) {
                continue;
            }
            let patch = finish_patch(raw, world.height_field.cell_size, sun, labeler, label_seed)?;
            if is_ocean_only(&patch.mask, cfg.ocean_reject_threshold) {
                continue;
            }
            let entry = ManifestEntry::for_patch(index, &patch);
            sink(patch, entry)?;
            break;
        }
    }
    Ok(())
}

/// Collects `cfg.n_patches` accepted patches in memory.
pub fn build_dataset(
    world: &WorldRaster,
    cfg: &SamplerConfig,
    labeler: &LabelerConfig,
    sun: Sun,
) -> Result<Vec<(Patch, ManifestEntry)>> {
    let mut out = Vec::with_capacity(cfg.n_patches);
    for_each_patch(world, cfg, labeler, sun, |p, e| {
        out.push((p, e));
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::worldgen::{synth_world, WorldConfig};

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_factor(0.0, 80.0).unwrap(), 1.0);
        assert_eq!(rescale_factor(60.0, 80.0).unwrap(), 2.0);
        assert_eq!(rescale_factor(-60.0, 80.0).unwrap(), 2.0);
        let at80 = 1.0 / (80.0f64 * std::f64::consts::PI / 180.0).cos();
        assert!((rescale_factor(80.0, 80.0).unwrap() - at80).abs() < 1e-12);
        assert!((at80 - 5.758_770_483_143_634).abs() < 1e-12);
        assert!(rescale_factor(81.0, 80.0).is_err());
        for lat in [-79.0, -33.3, 12.5, 45.0, 70.0] {
            let f = rescale_factor(lat, 80.0).unwrap();
            assert!((f - 1.0 / lat.to_radians().cos()).abs() < 1e-9);
        }
    }

    fn flat_world(w: usize, h: usize, lat_max: f64, f: impl Fn(usize, usize) -> f64) -> WorldRaster {
        let field = HeightField::new(Grid::from_fn(w, h, f), 1000.0).unwrap();
        WorldRaster::new(field, Grid::filled(w, h, 0.5), lat_max).unwrap()
    }

    #[test]
    fn equator_crop_is_raw() {
        let world = flat_world(200, 320, 80.0, |x, y| (x * 1000 + y) as f64);
        let base = 64;
        let y0 = 160 - base / 2;
        let p = crop_patch(&world, y0, 17, base, 80.0).unwrap();
        assert_eq!(p.center_lat, 0.0);
        assert_eq!(p.crop_width, base);
        assert_eq!(p.heights, world.height_field.elevation.crop(17, y0, base, base).unwrap());
    }

    #[test]
    fn sixty_degree_crop_is_double_width() {
        let world = flat_world(300, 320, 80.0, |x, _| x as f64);
        // row 39.5 is latitude 60 with half-degree rows
        let p = crop_patch(&world, 8, 10, 64, 80.0).unwrap();
        assert!((p.center_lat - 60.0).abs() < 1e-12);
        assert_eq!(p.crop_width, 128);
        assert_eq!(p.heights.width(), 64);
        // pixel j averages source columns 10+2j and 11+2j
        for j in 0..64 {
            assert!((p.heights.get(j, 0) - (10.0 + 2.0 * j as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn area_resample_preserves_mean() {
        let g = Grid::from_fn(37, 2, |x, y| ((x * 7 + y * 3) % 11) as f64);
        let r = resample_rows_area(&g, 16);
        for y in 0..2 {
            let a: f64 = (0..37).map(|x| g.get(x, y)).sum::<f64>() / 37.0;
            let b: f64 = (0..16).map(|x| r.get(x, y)).sum::<f64>() / 16.0;
            assert!((a - b).abs() < 1e-12);
        }
        let labels = Grid::from_fn(8, 1, |x, _| x as u8);
        assert_eq!(resample_rows_nearest(&labels, 4).as_slice(), &[1, 3, 5, 7]);
    }

    #[test]
    fn ocean_fraction_filter() {
        let water = Grid::filled(64, 64, TerrainClass::Water);
        assert!(is_ocean_only(&water, 0.9));
        assert!(!is_ocean_only(&Grid::filled(64, 64, TerrainClass::Grassland), 0.9));
        let mut m = Grid::filled(64, 64, TerrainClass::Grassland);
        for i in 0..3687 {
            m.as_mut_slice()[i] = TerrainClass::Water;
        }
        assert!(is_ocean_only(&m, 0.9));
        m.as_mut_slice()[3686] = TerrainClass::Grassland;
        assert!(!is_ocean_only(&m, 0.9)); // 3686/4096 = 0.8999
    }

    fn small_world() -> WorldRaster {
        synth_world(&WorldConfig { seed: 3, width: 256, height: 128, ..WorldConfig::default() }).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let world = small_world();
        let cfg = SamplerConfig { base: 16, ..SamplerConfig::default() };
        let lab = LabelerConfig::default();
        let a = sample_patch(&world, &mut rng_from(5), &cfg, &lab, Sun::default()).unwrap();
        let b = sample_patch(&world, &mut rng_from(5), &cfg, &lab, Sun::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.terrain.dims(), (16, 16));
        assert_eq!(a.mask.dims(), (16, 16));
        assert!((a.rescale_factor - 1.0 / a.center_lat.to_radians().cos()).abs() < 1e-9);
    }

    #[test]
    fn dataset_respects_filter_and_count() {
        let world = small_world();
        let cfg = SamplerConfig { base: 16, n_patches: 6, seed: 9, ..SamplerConfig::default() };
        let set = build_dataset(&world, &cfg, &LabelerConfig::default(), Sun::default()).unwrap();
        assert_eq!(set.len(), 6);
        for (i, (p, e)) in set.iter().enumerate() {
            assert_eq!(e.index, i);
            assert!(!is_ocean_only(&p.mask, 0.9));
        }
    }

    #[test]
    fn all_ocean_world_exhausts() {
        let world = flat_world(64, 64, 80.0, |_, _| -500.0);
        let cfg = SamplerConfig { base: 16, n_patches: 1, ..SamplerConfig::default() };
        let err = build_dataset(&world, &cfg, &LabelerConfig::default(), Sun::default()).unwrap_err();
        assert!(matches!(err, Error::Exhaustion { draws: 10_000, .. }), "{err:?}");
    }
}
