//! Training examples and the on-disk dataset layout.
//!
//! ```text
//! world.meta  world_terrain.ppm  world_height.pgm
//! manifest.txt
//! terrain_00000.ppm  height_00000.pgm  labels_00000.pgm
//! …
//! ```
//!
//! Patch heights are encoded against the world's elevation range recorded in
//! `world.meta`, so one sidecar decodes all of them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labeler::{mask_from_u8, mask_to_u8, LabelMask, LabelerConfig};
use crate::netpbm::{read_gray16, read_gray8, read_rgb, write_atomic, write_gray16, write_gray8, write_rgb};
use crate::nnet::Tensor;
use crate::sampler::{for_each_patch, ManifestEntry, Patch, SamplerConfig};
use crate::worldgen::{
    encode_height_range, height_to_image, hillshade, render_terrain, world_labels, EncodedHeight, TerrainImage,
    WorldConfig, WorldMeta, WorldRaster,
};

/// Elevation divisor for the optional height input channel.
pub const HEIGHT_SCALE: f64 = 6000.0;

pub const MANIFEST: &str = "manifest.txt";
pub const WORLD_META: &str = "world.meta";
pub const WORLD_TERRAIN: &str = "world_terrain.ppm";
pub const WORLD_HEIGHT: &str = "world_height.pgm";

pub fn terrain_name(i: usize) -> String {
    format!("terrain_{i:05}.ppm")
}

pub fn height_name(i: usize) -> String {
    format!("height_{i:05}.pgm")
}

pub fn labels_name(i: usize) -> String {
    format!("labels_{i:05}.pgm")
}

/// One image/height/label triple as the network sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub terrain: TerrainImage,
    /// Metres.
    pub height: Grid<f64>,
    pub mask: LabelMask,
}

impl Example {
    pub fn from_patch(p: &Patch) -> Self {
        Self { terrain: p.terrain.clone(), height: p.height.clone(), mask: p.mask.clone() }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.terrain.dims()
    }

    /// Class indices, row-major.
    pub fn labels(&self) -> Vec<u8> {
        mask_to_u8(&self.mask).into_vec()
    }

    /// `1×C×H×W` input: RGB/255, plus height/6000 when `channels == 4`.
    pub fn input(&self, channels: usize) -> Result<Tensor<f32>> {
        match channels {
            3 => rgb_input(&self.terrain),
            4 => {
                if !self.height.same_dims(&self.terrain) {
                    return Err(Error::shape("height grid and terrain image differ in size"));
                }
                let (w, h) = self.dims();
                let mut data = rgb_planes(&self.terrain);
                data.extend(self.height.as_slice().iter().map(|&e| (e / HEIGHT_SCALE) as f32));
                Tensor::from_vec(&[1, 4, h, w], data)
            }
            c => Err(Error::arg(format!("unsupported input channel count {c}"))),
        }
    }
}

fn rgb_planes(img: &TerrainImage) -> Vec<f32> {
    let mut data = Vec::with_capacity(3 * img.len());
    for c in 0..3 {
        data.extend(img.as_slice().iter().map(|px| px[c] as f32 / 255.0));
    }
    data
}

/// `1×3×H×W` tensor of an RGB image scaled to `[0, 1]`.
pub fn rgb_input(img: &TerrainImage) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[1, 3, img.height(), img.width()], rgb_planes(img))
}

pub fn manifest_header() -> &'static str {
    "# index\tcenter_lat\tcenter_lon\trescale_factor\tlabel_jitter_seed\n"
}

pub fn manifest_line(e: &ManifestEntry) -> String {
    format!("{}\t{}\t{}\t{}\t{}\n", e.index, e.center_lat, e.center_lon, e.rescale_factor, e.label_jitter_seed)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Config { line, message: format!("manifest: bad {what}") };
        let f: Vec<&str> = content.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Config { line, message: format!("manifest: expected 5 fields, found {}", f.len()) });
        }
        out.push(ManifestEntry {
            index: f[0].parse().map_err(|_| bad("index"))?,
            center_lat: f[1].parse().map_err(|_| bad("center_lat"))?,
            center_lon: f[2].parse().map_err(|_| bad("center_lon"))?,
            rescale_factor: f[3].parse().map_err(|_| bad("rescale_factor"))?,
            label_jitter_seed: f[4].parse().map_err(|_| bad("label_jitter_seed"))?,
        });
    }
    Ok(out)
}

pub fn world_meta(world: &WorldRaster, seed: u64) -> WorldMeta {
    let (lo, hi) = world.height_field.min_max();
    WorldMeta {
        min_elevation: lo,
        max_elevation: hi,
        lat_extent: (-world.lat_max, world.lat_max),
        lon_extent: (-180.0, 180.0),
        seed,
    }
}

/// Writes the world preview render, its encoded heights and the sidecar.
pub fn write_world(dir: &Path, world: &WorldRaster, cfg: &WorldConfig, labeler: &LabelerConfig) -> Result<WorldMeta> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = world_labels(world, &labeler.thresholds)?;
    let sun = cfg.sun();
    let shade = hillshade(&world.height_field, sun.azimuth, sun.altitude)?;
    write_rgb(dir.join(WORLD_TERRAIN), &render_terrain(&world.height_field, &labels, &shade)?)?;
    let encoded = height_to_image(&world.height_field)?;
    write_gray16(dir.join(WORLD_HEIGHT), &encoded.image)?;
    let meta = world_meta(world, cfg.seed);
    write_atomic(dir.join(WORLD_META), meta.to_text().as_bytes())?;
    Ok(meta)
}

/// Samples, labels and writes `sampler.n_patches` patches plus the manifest.
/// Returns the manifest entries.
pub fn write_dataset(
    dir: &Path,
    world: &WorldRaster,
    world_cfg: &WorldConfig,
    sampler: &SamplerConfig,
    labeler: &LabelerConfig,
) -> Result<Vec<ManifestEntry>> {
    let meta = write_world(dir, world, world_cfg, labeler)?;
    let mut manifest = String::from(manifest_header());
    let mut entries = Vec::with_capacity(sampler.n_patches);
    for_each_patch(world, sampler, labeler, world_cfg.sun(), |patch, entry| {
        let i = entry.index;
        write_rgb(dir.join(terrain_name(i)), &patch.terrain)?;
        let enc = encode_height_range(&patch.height, meta.min_elevation, meta.max_elevation)?;
        write_gray16(dir.join(height_name(i)), &enc.image)?;
        write_gray8(dir.join(labels_name(i)), &mask_to_u8(&patch.mask))?;
        manifest.push_str(&manifest_line(&entry));
        entries.push(entry);
        Ok(())
    })?;
    write_atomic(dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub meta: WorldMeta,
    pub manifest: Vec<ManifestEntry>,
    /// In manifest order.
    pub examples: Vec<Example>,
}

pub fn load_example(dir: &Path, index: usize, meta: &WorldMeta) -> Result<Example> {
    let terrain = read_rgb(dir.join(terrain_name(index)))?;
    let image = read_gray16(dir.join(height_name(index)))?;
    let height =
        EncodedHeight { image, min_elevation: meta.min_elevation, max_elevation: meta.max_elevation }.decode();
    let mask = mask_from_u8(&read_gray8(dir.join(labels_name(index)))?)?;
    if !terrain.same_dims(&height) || !terrain.same_dims(&mask) {
        return Err(Error::shape(format!("patch {index}: terrain, height and labels differ in size")));
    }
    Ok(Example { terrain, height, mask })
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let meta = WorldMeta::parse(&read(WORLD_META)?)?;
    let manifest = parse_manifest(&read(MANIFEST)?)?;
    if manifest.is_empty() {
        return Err(Error::arg(format!("{} lists no patches", dir.join(MANIFEST).display())));
    }
    let examples = manifest.iter().map(|e| load_example(dir, e.index, &meta)).collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { dir: dir.to_path_buf(), meta, manifest, examples })
}

/// Human-readable summary of label frequencies.
pub fn class_histogram(examples: &[Example]) -> [usize; crate::labeler::N_CLASSES] {
    let mut h = [0; crate::labeler::N_CLASSES];
    for e in examples {
        for c in e.mask.as_slice() {
            h[c.index()] += 1;
        }
    }
    h
}

pub fn format_histogram(h: &[usize]) -> String {
    let mut s = String::new();
    for (c, n) in crate::labeler::TerrainClass::ALL.iter().zip(h) {
        let _ = write!(s, "{}={} ", c.name(), n);
    }
    s.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::TerrainClass;

    #[test]
    fn manifest_round_trip() {
        let e = ManifestEntry {
            index: 3,
            center_lat: -12.345678901234,
            center_lon: 170.1,
            rescale_factor: 1.0234567890123457,
            label_jitter_seed: u64::MAX,
        };
        let text = format!("{}{}", manifest_header(), manifest_line(&e));
        assert_eq!(parse_manifest(&text).unwrap(), vec![e]);
        assert!(matches!(parse_manifest("1\t2\n"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn inputs_are_planar() {
        let terrain = Grid::from_vec(2, 1, vec![[255, 0, 51], [0, 255, 0]]).unwrap();
        let ex = Example {
            terrain,
            height: Grid::from_vec(2, 1, vec![6000.0, -3000.0]).unwrap(),
            mask: Grid::filled(2, 1, TerrainClass::Water),
        };
        let t = ex.input(3).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
        let t4 = ex.input(4).unwrap();
        assert_eq!(&t4.data()[6..], &[1.0, -0.5]);
        assert!(ex.input(5).is_err());
    }

    #[test]
    fn write_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let wc = WorldConfig { seed: 3, width: 256, height: 128, ..Default::default() };
        let world = crate::worldgen::synth_world(&wc).unwrap();
        let sc = SamplerConfig { n_patches: 3, base: 32, seed: 5, ..Default::default() };
        let lc = LabelerConfig::default();
        let entries = write_dataset(dir.path(), &world, &wc, &sc, &lc).unwrap();
        assert_eq!(entries.len(), 3);
        for i in 0..3 {
            for name in [terrain_name(i), height_name(i), labels_name(i)] {
                assert!(dir.path().join(name).exists());
            }
        }
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest, entries);
        let patches = crate::sampler::build_dataset(&world, &sc, &lc, wc.sun()).unwrap();
        let span = loaded.meta.max_elevation - loaded.meta.min_elevation;
        for (ex, (p, _)) in loaded.examples.iter().zip(&patches) {
            assert_eq!(ex.terrain, p.terrain);
            assert_eq!(ex.mask, p.mask);
            for (a, b) in ex.height.as_slice().iter().zip(p.height.as_slice()) {
                assert!((a - b).abs() <= span / 65535.0);
            }
        }
    }
}
