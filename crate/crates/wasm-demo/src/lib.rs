//! Browser bindings. Images cross the boundary as RGBA byte buffers ready for
//! `ImageData`.

use terrain_twin::grid::Grid;
use terrain_twin::labeler::{colorize, LabelMask, LabelerConfig, Palette, Thresholds};
use terrain_twin::netpbm::Rgb;
use terrain_twin::rng::derive;
use terrain_twin::sampler::{crop_patch, finish_patch, rescale_factor};
use terrain_twin::worldgen::{hillshade, render_terrain, synth_world, Sun, WorldConfig, WorldRaster};
use wasm_bindgen::prelude::*;

fn js_err(e: terrain_twin::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Grid<Rgb>) -> Vec<u8> {
    img.as_slice().iter().flat_map(|&[r, g, b]| [r, g, b, 255]).collect()
}

/// A synthesised world with its rule-table preview labels.
#[wasm_bindgen]
pub struct World {
    cfg: WorldConfig,
    raster: WorldRaster,
    labels: LabelMask,
}

#[wasm_bindgen]
impl World {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, width: usize, height: usize) -> Result<World, JsError> {
        let cfg = WorldConfig { seed, width, height, ..Default::default() };
        let raster = synth_world(&cfg).map_err(js_err)?;
        let labels = terrain_twin::worldgen::world_labels(&raster, &Thresholds::default()).map_err(js_err)?;
        Ok(World { cfg, raster, labels })
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    /// Hillshaded terrain colours under the given sun, as RGBA.
    pub fn render(&self, azimuth: f64, altitude: f64) -> Result<Vec<u8>, JsError> {
        let shade = hillshade(&self.raster.height_field, azimuth, altitude).map_err(js_err)?;
        Ok(rgba(&render_terrain(&self.raster.height_field, &self.labels, &shade).map_err(js_err)?))
    }

    /// Crops, rescales and pseudo-labels the patch centred on `(lat, lon)`.
    pub fn sample(&self, lat: f64, lon: f64, base: usize, azimuth: f64, altitude: f64) -> Result<PatchView, JsError> {
        let r = &self.raster;
        let lat_max = self.cfg.lat_max;
        let factor = rescale_factor(lat, lat_max).map_err(js_err)?;
        let crop_width = (base as f64 * factor).round() as usize;
        if base > r.height() || crop_width > r.width() {
            return Err(JsError::new(&format!("a {base}px patch at latitude {lat} does not fit this world")));
        }
        let centre = |pos: f64, size: usize, limit: usize| {
            (pos - (size as f64 - 1.0) / 2.0).round().clamp(0.0, (limit - size) as f64) as usize
        };
        let y0 = centre(r.lat_to_row(lat), base, r.height());
        let x0 = centre((lon + 180.0) / 360.0 * r.width() as f64 - 0.5, crop_width, r.width());
        let raw = crop_patch(r, y0, x0, base, lat_max).map_err(js_err)?;
        let labeler = LabelerConfig::default();
        let seed = derive(self.cfg.seed, &[y0 as u64, x0 as u64]);
        let sun = Sun { azimuth, altitude };
        let patch = finish_patch(raw, self.raster.height_field.cell_size, sun, &labeler, seed).map_err(js_err)?;
        let counts = patch.mask.as_slice().iter().fold([0u32; 7], |mut c, k| {
            c[k.index()] += 1;
            c
        });
        Ok(PatchView {
            size: base,
            terrain: rgba(&patch.terrain),
            mask: rgba(&colorize(&patch.mask, Palette::Segmentation)),
            x0,
            y0,
            crop_width,
            factor,
            center_lat: patch.center_lat,
            counts: counts.to_vec(),
        })
    }
}

/// One sampled patch and where it came from.
#[wasm_bindgen]
pub struct PatchView {
    size: usize,
    terrain: Vec<u8>,
    mask: Vec<u8>,
    x0: usize,
    y0: usize,
    crop_width: usize,
    factor: f64,
    center_lat: f64,
    counts: Vec<u32>,
}

#[wasm_bindgen]
impl PatchView {
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn terrain(&self) -> Vec<u8> {
        self.terrain.clone()
    }
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
    pub fn x0(&self) -> usize {
        self.x0
    }
    pub fn y0(&self) -> usize {
        self.y0
    }
    /// Width of the world crop before it was squeezed to `size` columns.
    pub fn crop_width(&self) -> usize {
        self.crop_width
    }
    pub fn factor(&self) -> f64 {
        self.factor
    }
    pub fn center_lat(&self) -> f64 {
        self.center_lat
    }
    /// Pixels per class, in class order.
    pub fn counts(&self) -> Vec<u32> {
        self.counts.clone()
    }
}

/// Class names in class order, comma separated.
#[wasm_bindgen]
pub fn class_names() -> String {
    terrain_twin::TerrainClass::ALL.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}

/// Class colours of the segmentation palette as packed `0xRRGGBB`.
#[wasm_bindgen]
pub fn class_colors() -> Vec<u32> {
    terrain_twin::TerrainClass::ALL
        .iter()
        .map(|&c| {
            let [r, g, b] = Palette::Segmentation.color(c);
            (r as u32) << 16 | (g as u32) << 8 | b as u32
        })
        .collect()
}
