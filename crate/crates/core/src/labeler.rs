//! Pseudo-labelling of terrain patches.
//!
//! Pixels are described by a small feature vector (elevation, relative slope,
//! latitude, moisture), clustered with k-means, and each cluster is mapped to
//! a terrain class by a fixed rule table over its centroid. A majority filter
//! then merges specks into coherent regions.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::netpbm::Rgb;
use crate::rng::Rng;
use crate::worldgen::{gradient_at, TerrainImage, ELEVATION_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum TerrainClass {
    #[default]
    Water = 0,
    Grassland = 1,
    Forest = 2,
    Hills = 3,
    Desert = 4,
    Mountain = 5,
    Tundra = 6,
}

pub const N_CLASSES: usize = 7;

impl TerrainClass {
    pub const ALL: [TerrainClass; N_CLASSES] = [
        TerrainClass::Water,
        TerrainClass::Grassland,
        TerrainClass::Forest,
        TerrainClass::Hills,
        TerrainClass::Desert,
        TerrainClass::Mountain,
        TerrainClass::Tundra,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TerrainClass::Water => "water",
            TerrainClass::Grassland => "grassland",
            TerrainClass::Forest => "forest",
            TerrainClass::Hills => "hills",
            TerrainClass::Desert => "desert",
            TerrainClass::Mountain => "mountain",
            TerrainClass::Tundra => "tundra",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(name))
    }

    /// Colour used when rendering the terrain map.
    pub fn terrain_color(self) -> Rgb {
        TERRAIN_PALETTE[self.index()]
    }

    /// Pure colour used in segmentation masks.
    pub fn mask_color(self) -> Rgb {
        MASK_PALETTE[self.index() + 1]
    }
}

/// Terrain-map colours, in class order.
pub const TERRAIN_PALETTE: [Rgb; N_CLASSES] = [
    [17, 141, 215],
    [225, 227, 155],
    [127, 173, 123],
    [185, 122, 87],
    [230, 200, 181],
    [150, 150, 150],
    [193, 190, 175],
];

/// Segmentation-mask colours: background first, then the classes in order.
pub const MASK_PALETTE: [Rgb; N_CLASSES + 1] = [
    [0, 0, 0],
    [0, 0, 255],
    [0, 255, 0],
    [0, 255, 255],
    [255, 0, 0],
    [255, 255, 0],
    [255, 0, 255],
    [255, 255, 255],
];

pub const BACKGROUND: Rgb = MASK_PALETTE[0];

pub type LabelMask = Grid<TerrainClass>;

/// Which colour table a colourised mask uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    TerrainRender,
    Segmentation,
}

impl Palette {
    pub fn color(self, class: TerrainClass) -> Rgb {
        match self {
            Palette::TerrainRender => class.terrain_color(),
            Palette::Segmentation => class.mask_color(),
        }
    }

    fn lookup(self, rgb: Rgb) -> Option<TerrainClass> {
        TerrainClass::ALL.into_iter().find(|&c| self.color(c) == rgb)
    }
}

pub fn mask_to_u8(mask: &LabelMask) -> Grid<u8> {
    mask.map(|c| *c as u8)
}

pub fn mask_from_u8(grid: &Grid<u8>) -> Result<LabelMask> {
    if let Some((i, v)) = grid.as_slice().iter().enumerate().find(|(_, &v)| v as usize >= N_CLASSES) {
        return Err(Error::arg(format!(
            "label {v} at pixel ({}, {}) is not a class index",
            i % grid.width(),
            i / grid.width()
        )));
    }
    Ok(grid.map(|&v| TerrainClass::ALL[v as usize]))
}

/// Cut-offs of the cluster classification rule table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Relative slope (0..1) at which terrain counts as hilly.
    pub slope_hill: f64,
    pub slope_mountain: f64,
    /// Metres.
    pub elev_high: f64,
    pub moisture_dry: f64,
    pub moisture_wet: f64,
    /// Degrees.
    pub tundra_lat: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            slope_hill: 0.15,
            slope_mountain: 0.45,
            elev_high: 1500.0,
            moisture_dry: 0.25,
            moisture_wet: 0.65,
            tundra_lat: 66.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.slope_hill,
            self.slope_mountain,
            self.elev_high,
            self.moisture_dry,
            self.moisture_wet,
            self.tundra_lat,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("thresholds must be finite"));
        }
        if self.slope_hill >= self.slope_mountain {
            return Err(Error::arg("slope_hill must be below slope_mountain"));
        }
        if self.moisture_dry >= self.moisture_wet {
            return Err(Error::arg("moisture_dry must be below moisture_wet"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelerConfig {
    pub k: usize,
    pub kmeans_iters: usize,
    pub thresholds: Thresholds,
    pub jitter_frac: f64,
    pub mode_window: usize,
    pub mode_passes: usize,
    pub seed: u64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            k: 7,
            kmeans_iters: 20,
            thresholds: Thresholds::default(),
            jitter_frac: 0.10,
            mode_window: 5,
            mode_passes: 1,
            seed: 0,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if self.k == 0 {
            return Err(Error::arg("labeler.k must be at least 1"));
        }
        if !(self.jitter_frac > 0.0 && self.jitter_frac < 0.5) {
            return Err(Error::arg("labeler.jitter_frac must lie in (0, 0.5)"));
        }
        if self.mode_window < 3 || self.mode_window % 2 == 0 {
            return Err(Error::arg("labeler.mode_window must be odd and at least 3"));
        }
        Ok(())
    }
}

/// Per-pixel feature vector: `[elevation, slope, latitude, moisture]`.
pub type Feature = [f64; 4];

/// Computes per-pixel features for a patch.
///
/// Elevation is divided by 6000 m and clamped to [-1, 1]; slope magnitude is
/// divided by the patch's 99th percentile (nearest rank) and clamped to
/// [0, 1]. When fewer than 1% of pixels have any slope the percentile is zero
/// and the maximum is used instead. Latitude is `|center_lat| / 90`.
pub fn pixel_features(heights: &Grid<f64>, moisture: &Grid<f64>, center_lat: f64) -> Result<Grid<Feature>> {
    if !heights.same_dims(moisture) {
        return Err(Error::shape("heights and moisture differ in size"));
    }
    let slopes = Grid::from_fn(heights.width(), heights.height(), |x, y| {
        let (dx, dy) = gradient_at(heights, x, y);
        dx.hypot(dy)
    });
    let mut scale = percentile_nearest_rank(slopes.as_slice(), 0.99);
    if scale <= 0.0 {
        scale = slopes.as_slice().iter().copied().fold(0.0, f64::max);
    }
    let lat = (center_lat.abs() / 90.0).clamp(0.0, 1.0);
    Ok(Grid::from_fn(heights.width(), heights.height(), |x, y| {
        let e = (heights.get(x, y) / ELEVATION_MAX).clamp(-1.0, 1.0);
        let s = if scale > 0.0 { (slopes.get(x, y) / scale).clamp(0.0, 1.0) } else { 0.0 };
        let m = moisture.get(x, y).clamp(0.0, 1.0);
        [e, s, lat, m]
    }))
}

fn percentile_nearest_rank(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Feature>,
    /// Number of clusters actually used; below the requested `k` when the
    /// input has fewer distinct points.
    pub k_used: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
}

#[inline]
fn dist2(a: &Feature, b: &Feature) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[Feature]) -> usize {
    let mut keys: Vec<[u64; 4]> = points.iter().map(|p| p.map(|v| (v + 0.0).to_bits())).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Ties in the assignment step go to the lowest cluster index. An empty
/// cluster is moved onto the point farthest from its own centroid.
pub fn kmeans(points: &[Feature], k: usize, iters: usize, rng: &mut Rng) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if points.is_empty() {
        return Err(Error::arg("k-means needs at least one point"));
    }
    let k = k.min(count_distinct(points));

    // k-means++ seeding
    let mut centroids: Vec<Feature> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &d) in nearest.iter().enumerate() {
            if d > 0.0 {
                chosen = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        // distinct count >= k guarantees some point has positive distance
        let c = points[chosen.expect("a point off the current centroids")];
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist2(p, &c));
        }
        centroids.push(c);
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut objective = Vec::with_capacity(iters);
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut sse = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, dist2(p, c)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if *a != best {
                *a = best;
                changed = true;
            }
            sse += d;
        }
        objective.push(sse);
        if !changed && objective.len() > 1 {
            break;
        }

        let mut sums = vec![[0.0; 4]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .zip(&assignments)
                    .map(|(p, &a)| dist2(p, &centroids[a]))
                    .enumerate()
                    .fold((0, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                    .0;
                centroids[j] = points[far];
            }
        }
    }
    Ok(KMeans { assignments, centroids, k_used: k, objective })
}

/// Maps a cluster centroid to a terrain class using the first matching rule.
pub fn classify_centroid(c: &Feature, t: &Thresholds) -> TerrainClass {
    let [e, s, lat, m] = *c;
    if e <= 0.0 {
        TerrainClass::Water
    } else if lat * 90.0 >= t.tundra_lat {
        TerrainClass::Tundra
    } else if s >= t.slope_mountain && e * ELEVATION_MAX >= t.elev_high {
        TerrainClass::Mountain
    } else if s >= t.slope_hill {
        TerrainClass::Hills
    } else if m <= t.moisture_dry {
        TerrainClass::Desert
    } else if m >= t.moisture_wet {
        TerrainClass::Forest
    } else {
        TerrainClass::Grassland
    }
}

/// Scales every cut-off by an independent factor drawn from
/// `[1 - jitter_frac, 1 + jitter_frac]`, then restores the ordering
/// constraints by swapping if the jitter inverted them.
pub fn jitter_thresholds(t: &Thresholds, jitter_frac: f64, rng: &mut Rng) -> Result<Thresholds> {
    if !(0.0..0.5).contains(&jitter_frac) {
        return Err(Error::arg("jitter_frac must lie in [0, 0.5)"));
    }
    let mut draw = |v: f64| v * (1.0 + jitter_frac * (2.0 * rng.random::<f64>() - 1.0));
    let mut out = Thresholds {
        slope_hill: draw(t.slope_hill),
        slope_mountain: draw(t.slope_mountain),
        elev_high: draw(t.elev_high),
        moisture_dry: draw(t.moisture_dry),
        moisture_wet: draw(t.moisture_wet),
        tundra_lat: draw(t.tundra_lat),
    };
    if out.slope_hill > out.slope_mountain {
        std::mem::swap(&mut out.slope_hill, &mut out.slope_mountain);
    }
    if out.moisture_dry > out.moisture_wet {
        std::mem::swap(&mut out.moisture_dry, &mut out.moisture_wet);
    }
    Ok(out)
}

/// Majority filter over a square window, truncated at the borders. Ties go
/// to the smallest class index.
pub fn mode_filter(mask: &LabelMask, window: usize, passes: usize) -> Result<LabelMask> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::arg(format!("mode filter window must be odd and >= 3, got {window}")));
    }
    let r = window / 2;
    let (w, h) = mask.dims();
    let mut current = mask.clone();
    for _ in 0..passes {
        current = Grid::from_fn(w, h, |x, y| {
            let mut votes = [0u32; N_CLASSES];
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    votes[current.get(xx, yy).index()] += 1;
                }
            }
            let best = (0..N_CLASSES).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
            TerrainClass::ALL[best]
        });
    }
    Ok(current)
}

/// Raw grids a patch is labelled from.
#[derive(Debug, Clone, Copy)]
pub struct PatchGrids<'a> {
    pub heights: &'a Grid<f64>,
    pub moisture: &'a Grid<f64>,
    pub center_lat: f64,
}

/// Full pseudo-labelling pipeline for one patch: features, k-means, centroid
/// classification under jittered thresholds, then the mode filter.
pub fn pseudo_label(raw: PatchGrids<'_>, cfg: &LabelerConfig, rng: &mut Rng) -> Result<LabelMask> {
    let features = pixel_features(raw.heights, raw.moisture, raw.center_lat)?;
    if features.is_empty() {
        return Ok(Grid::filled(features.width(), features.height(), TerrainClass::Water));
    }
    let thresholds = jitter_thresholds(&cfg.thresholds, cfg.jitter_frac, rng)?;
    let km = kmeans(features.as_slice(), cfg.k, cfg.kmeans_iters, rng)?;
    let classes: Vec<TerrainClass> = km.centroids.iter().map(|c| classify_centroid(c, &thresholds)).collect();
    let labels = km.assignments.iter().map(|&a| classes[a]).collect();
    let mask = Grid::from_vec(features.width(), features.height(), labels)?;
    mode_filter(&mask, cfg.mode_window, cfg.mode_passes)
}

/// Classifies every pixel directly by the rule table, without clustering.
/// Used for whole-world previews where clustering would be too coarse.
pub fn classify_pixels(features: &Grid<Feature>, t: &Thresholds) -> LabelMask {
    features.map(|f| classify_centroid(f, t))
}

pub fn colorize(mask: &LabelMask, palette: Palette) -> TerrainImage {
    mask.map(|&c| palette.color(c))
}

/// Paints pixels of `class` in its segmentation colour and everything else
/// black.
pub fn mask_to_binary_image(mask: &LabelMask, class: TerrainClass) -> TerrainImage {
    mask.map(|&c| if c == class { class.mask_color() } else { BACKGROUND })
}

/// Inverse of [`mask_to_binary_image`]: `true` where the class colour is.
pub fn decode_binary_image(img: &TerrainImage, class: TerrainClass) -> Result<Grid<bool>> {
    let target = class.mask_color();
    let mut out = Grid::filled(img.width(), img.height(), false);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = *img.get(x, y);
            if px == target {
                out.set(x, y, true);
            } else if px != BACKGROUND {
                return Err(unknown_color(x, y, px));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`colorize`].
pub fn decode_mask_rgb(img: &TerrainImage, palette: Palette) -> Result<LabelMask> {
    let mut labels = Vec::with_capacity(img.len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = *img.get(x, y);
            labels.push(palette.lookup(px).ok_or_else(|| unknown_color(x, y, px))?);
        }
    }
    Grid::from_vec(img.width(), img.height(), labels)
}

fn unknown_color(x: usize, y: usize, [r, g, b]: Rgb) -> Error {
    Error::UnknownColor { x, y, r, g, b }
}
