//! Synthetic world rasters: fractal value-noise elevation, an independent
//! moisture field, Horn-style hillshading and palette rendering.

use crate::error::{Error, Result};
use crate::grid::{round_half_up, Grid};
use crate::labeler::{classify_pixels, pixel_features, LabelMask, TerrainClass, Thresholds};
use crate::netpbm::Rgb;
use crate::rng::{derive, mix64, TAG_HEIGHT, TAG_MOISTURE};

pub const ELEVATION_MIN: f64 = -4000.0;
pub const ELEVATION_MAX: f64 = 6000.0;

/// Lattice cells spanned by the lowest octave along the longer side.
const BASE_CELLS: f64 = 4.0;
const MOISTURE_CELLS: f64 = 3.0;
const MOISTURE_OCTAVES: u32 = 2;
const MOISTURE_STRETCH: f64 = 1.6;

/// Ambient fraction of the palette colour kept in full shadow.
pub const AMBIENT: f64 = 0.4;

pub type TerrainImage = Grid<Rgb>;

#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    /// Metres, sea level = 0.
    pub elevation: Grid<f64>,
    /// Metres per pixel at the equator.
    pub cell_size: f64,
}

impl HeightField {
    pub fn new(elevation: Grid<f64>, cell_size: f64) -> Result<Self> {
        if elevation.width() < 2 || elevation.height() < 2 {
            return Err(Error::arg("height field must be at least 2x2"));
        }
        if elevation.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("height field contains non-finite values"));
        }
        Ok(Self { elevation, cell_size })
    }

    pub fn width(&self) -> usize {
        self.elevation.width()
    }

    pub fn height(&self) -> usize {
        self.elevation.height()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.elevation
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub octaves: u32,
    pub persistence: f64,
    pub sea_level_bias: f64,
    pub cell_size: f64,
}

/// Uniform value in `[0, 1)` attached to an integer lattice point.
#[inline]
pub fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64((ix as u64).wrapping_mul(0x9E37_79B1) ^ mix64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothstep-interpolated value noise at a continuous lattice coordinate.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ix, iy) = (x0 as i64, y0 as i64);
    let (u, v) = (smoothstep(x - x0), smoothstep(y - y0));
    let a = lattice_value(seed, ix, iy);
    let b = lattice_value(seed, ix + 1, iy);
    let c = lattice_value(seed, ix, iy + 1);
    let d = lattice_value(seed, ix + 1, iy + 1);
    let top = a + (b - a) * u;
    let bottom = c + (d - c) * u;
    top + (bottom - top) * v
}

/// Octave-summed value noise normalised back to `[0, 1)`.
fn fractal(
    stream: u64,
    seed: u64,
    width: usize,
    height: usize,
    octaves: u32,
    persistence: f64,
    cells: f64,
) -> Grid<f64> {
    let period = width.max(height) as f64 / cells;
    let layers: Vec<(u64, f64, f64)> = (0..octaves)
        .map(|k| {
            (derive(seed, &[stream, k as u64]), persistence.powi(k as i32), (1u64 << k) as f64 / period)
        })
        .collect();
    let norm: f64 = layers.iter().map(|l| l.1).sum();
    Grid::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        layers.iter().map(|&(s, amp, freq)| amp * value_noise(s, px * freq, py * freq)).sum::<f64>() / norm
    })
}

/// Fractal value-noise terrain remapped to `[ELEVATION_MIN, ELEVATION_MAX]`.
/// `sea_level_bias` is added to the normalised noise before remapping, so
/// positive values raise land and negative values flood it.
pub fn synth_height(p: &HeightParams) -> Result<HeightField> {
    if p.width < 2 || p.height < 2 {
        return Err(Error::arg(format!("world must be at least 2x2, got {}x{}", p.width, p.height)));
    }
    if p.octaves == 0 || p.octaves > 24 {
        return Err(Error::arg(format!("octaves must be in 1..=24, got {}", p.octaves)));
    }
    if !(p.persistence > 0.0 && p.persistence < 1.0) {
        return Err(Error::arg(format!("persistence must be in (0, 1), got {}", p.persistence)));
    }
    if !(p.cell_size > 0.0) {
        return Err(Error::arg("cell_size must be positive"));
    }
    let noise = fractal(TAG_HEIGHT, p.seed, p.width, p.height, p.octaves, p.persistence, BASE_CELLS);
    let elevation = noise.map(|&v| ELEVATION_MIN + (ELEVATION_MAX - ELEVATION_MIN) * (v + p.sea_level_bias).clamp(0.0, 1.0));
    HeightField::new(elevation, p.cell_size)
}

/// Low-frequency moisture in `[0, 1]`, drawn from a seed stream independent
/// of the elevation octaves and contrast-stretched about 0.5.
pub fn synth_moisture(seed: u64, width: usize, height: usize) -> Result<Grid<f64>> {
    if width < 2 || height < 2 {
        return Err(Error::arg(format!("moisture grid must be at least 2x2, got {width}x{height}")));
    }
    let noise = fractal(TAG_MOISTURE, seed, width, height, MOISTURE_OCTAVES, 0.5, MOISTURE_CELLS);
    Ok(noise.map(|&v| (0.5 + MOISTURE_STRETCH * (v - 0.5)).clamp(0.0, 1.0)))
}

/// Elevation derivative per pixel along x (east) and y (south). Interior
/// pixels use central differences, border pixels one-sided differences.
pub fn gradient_at(g: &Grid<f64>, x: usize, y: usize) -> (f64, f64) {
    fn diff(len: usize, i: usize, at: impl Fn(usize) -> f64) -> f64 {
        if len < 2 {
            0.0
        } else if i == 0 {
            at(1) - at(0)
        } else if i == len - 1 {
            at(i) - at(i - 1)
        } else {
            (at(i + 1) - at(i - 1)) / 2.0
        }
    }
    let dx = diff(g.width(), x, |i| *g.get(i, y));
    let dy = diff(g.height(), y, |j| *g.get(x, j));
    (dx, dy)
}

/// Illumination in `[0, 1]` for a sun at `azimuth` (degrees clockwise from
/// north) and `sun_altitude` (degrees above the horizon).
pub fn hillshade(h: &HeightField, azimuth: f64, sun_altitude: f64) -> Result<Grid<f64>> {
    if !(0.0..360.0).contains(&azimuth) {
        return Err(Error::arg(format!("azimuth must be in [0, 360), got {azimuth}")));
    }
    if !(sun_altitude > 0.0 && sun_altitude <= 90.0) {
        return Err(Error::arg(format!("sun altitude must be in (0, 90], got {sun_altitude}")));
    }
    if !(h.cell_size > 0.0) {
        return Err(Error::arg(format!("cell_size must be positive, got {}", h.cell_size)));
    }
    let zenith = (90.0 - sun_altitude).to_radians();
    let (cos_z, sin_z) = (zenith.cos(), zenith.sin());
    let az = azimuth.to_radians();
    Ok(Grid::from_fn(h.width(), h.height(), |x, y| {
        let (dx, dy) = gradient_at(&h.elevation, x, y);
        let (dzdx, dzdy) = (dx / h.cell_size, dy / h.cell_size);
        let slope = dzdx.hypot(dzdy).atan();
        // downhill direction as a compass bearing: east = -dz/dx, north = +dz/dy
        let aspect = (-dzdx).atan2(dzdy);
        (cos_z * slope.cos() + sin_z * slope.sin() * (az - aspect).cos()).clamp(0.0, 1.0)
    }))
}

/// Palette colour scaled by `AMBIENT + (1 - AMBIENT) * shade`; water is
/// always drawn unshaded.
pub fn render_terrain(h: &HeightField, mask: &LabelMask, shade: &Grid<f64>) -> Result<TerrainImage> {
    if !h.elevation.same_dims(mask) || !mask.same_dims(shade) {
        return Err(Error::arg("render_terrain inputs differ in size"));
    }
    Ok(Grid::from_fn(mask.width(), mask.height(), |x, y| {
        let class = *mask.get(x, y);
        let s = if class == TerrainClass::Water { 1.0 } else { shade.get(x, y).clamp(0.0, 1.0) };
        let k = AMBIENT + (1.0 - AMBIENT) * s;
        class.terrain_color().map(|c| round_half_up(c as f64 * k, 255.0) as u8)
    }))
}

/// Elevation encoded as 16-bit intensity with the range needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedHeight {
    pub image: Grid<u16>,
    pub min_elevation: f64,
    pub max_elevation: f64,
}

impl EncodedHeight {
    pub fn decode(&self) -> Grid<f64> {
        let span = self.max_elevation - self.min_elevation;
        self.image.map(|&v| self.min_elevation + span * v as f64 / 65535.0)
    }
}

/// Linear map of `[min, max]` over the field onto `[0, 65535]`.
pub fn height_to_image(h: &HeightField) -> Result<EncodedHeight> {
    let (lo, hi) = h.min_max();
    encode_height_range(&h.elevation, lo, hi)
}

/// Linear map of `[lo, hi]` onto `[0, 65535]`, clamping values outside.
pub fn encode_height_range(g: &Grid<f64>, lo: f64, hi: f64) -> Result<EncodedHeight> {
    if !(lo < hi) {
        return Err(Error::DegenerateRange(format!("elevation range [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    let image = g.map(|&e| round_half_up((e - lo) / span * 65535.0, 65535.0) as u16);
    Ok(EncodedHeight { image, min_elevation: lo, max_elevation: hi })
}

/// Sun position used for hillshading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sun {
    pub azimuth: f64,
    pub altitude: f64,
}

impl Default for Sun {
    fn default() -> Self {
        Self { azimuth: 315.0, altitude: 45.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub octaves: u32,
    pub persistence: f64,
    pub sea_level_bias: f64,
    pub cell_size: f64,
    pub lat_max: f64,
    pub sun_azimuth: f64,
    pub sun_altitude: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 2048,
            height: 1024,
            octaves: 6,
            persistence: 0.5,
            sea_level_bias: -0.1,
            cell_size: 500.0,
            lat_max: 80.0,
            sun_azimuth: 315.0,
            sun_altitude: 45.0,
        }
    }
}

impl WorldConfig {
    pub fn sun(&self) -> Sun {
        Sun { azimuth: self.sun_azimuth, altitude: self.sun_altitude }
    }

    pub fn height_params(&self) -> HeightParams {
        HeightParams {
            seed: self.seed,
            width: self.width,
            height: self.height,
            octaves: self.octaves,
            persistence: self.persistence,
            sea_level_bias: self.sea_level_bias,
            cell_size: self.cell_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat_max > 0.0 && self.lat_max < 90.0) {
            return Err(Error::arg("world.lat_max must be in (0, 90)"));
        }
        if !(0.0..360.0).contains(&self.sun_azimuth) || !(self.sun_altitude > 0.0 && self.sun_altitude <= 90.0) {
            return Err(Error::arg("sun position out of range"));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::arg("world must be at least 2x2"));
        }
        Ok(())
    }
}

/// Equirectangular world: row 0 is `+lat_max`, columns span -180..180.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldRaster {
    pub height_field: HeightField,
    pub moisture: Grid<f64>,
    pub lat_max: f64,
}

impl WorldRaster {
    pub fn new(height_field: HeightField, moisture: Grid<f64>, lat_max: f64) -> Result<Self> {
        if !height_field.elevation.same_dims(&moisture) {
            return Err(Error::shape("moisture and height differ in size"));
        }
        if !(lat_max > 0.0 && lat_max < 90.0) {
            return Err(Error::arg("lat_max must be in (0, 90)"));
        }
        Ok(Self { height_field, moisture, lat_max })
    }

    pub fn width(&self) -> usize {
        self.height_field.width()
    }

    pub fn height(&self) -> usize {
        self.height_field.height()
    }

    /// Degrees per pixel row.
    pub fn lat_step(&self) -> f64 {
        2.0 * self.lat_max / self.height() as f64
    }

    /// Latitude of the centre of `row` (fractional rows allowed).
    pub fn row_to_lat(&self, row: f64) -> f64 {
        self.lat_max - (row + 0.5) * self.lat_step()
    }

    pub fn lat_to_row(&self, lat: f64) -> f64 {
        (self.lat_max - lat) / self.lat_step() - 0.5
    }

    pub fn col_to_lon(&self, col: f64) -> f64 {
        -180.0 + (col + 0.5) * 360.0 / self.width() as f64
    }
}

pub fn synth_world(cfg: &WorldConfig) -> Result<WorldRaster> {
    cfg.validate()?;
    let height_field = synth_height(&cfg.height_params())?;
    let moisture = synth_moisture(cfg.seed, cfg.width, cfg.height)?;
    WorldRaster::new(height_field, moisture, cfg.lat_max)
}

/// Per-pixel rule-table labels for the whole world, using each row's own
/// latitude. This is a preview; patches are labelled by clustering instead.
pub fn world_labels(world: &WorldRaster, t: &Thresholds) -> Result<LabelMask> {
    let mut features = pixel_features(&world.height_field.elevation, &world.moisture, 0.0)?;
    for y in 0..features.height() {
        let lat = (world.row_to_lat(y as f64).abs() / 90.0).clamp(0.0, 1.0);
        for x in 0..features.width() {
            features.get_mut(x, y)[2] = lat;
        }
    }
    Ok(classify_pixels(&features, t))
}

/// Sidecar metadata written next to encoded height images.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldMeta {
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub lat_extent: (f64, f64),
    pub lon_extent: (f64, f64),
    pub seed: u64,
}

impl WorldMeta {
    pub fn to_text(&self) -> String {
        format!(
            "min_elevation = {}\nmax_elevation = {}\nlat_extent = {} {}\nlon_extent = {} {}\nseed = {}\n",
            self.min_elevation,
            self.max_elevation,
            self.lat_extent.0,
            self.lat_extent.1,
            self.lon_extent.0,
            self.lon_extent.1,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = crate::config::parse_kv(text)?;
        let get = |key: &str| {
            entries
                .iter()
                .find(|e| e.key == key)
                .map(|e| e.value.as_str())
                .ok_or_else(|| Error::Config { line: 0, message: format!("missing key {key}") })
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Config { line: 0, message: format!("bad number for {key}") })
        };
        let pair = |key: &str| -> Result<(f64, f64)> {
            let v: Vec<f64> = get(key)?.split_whitespace().filter_map(|s| s.parse().ok()).collect();
            match v[..] {
                [a, b] => Ok((a, b)),
                _ => Err(Error::Config { line: 0, message: format!("{key} needs two numbers") }),
            }
        };
        Ok(Self {
            min_elevation: num("min_elevation")?,
            max_elevation: num("max_elevation")?,
            lat_extent: pair("lat_extent")?,
            lon_extent: pair("lon_extent")?,
            seed: get("seed")?.parse().map_err(|_| Error::Config { line: 0, message: "bad seed".into() })?,
        })
    }
}
