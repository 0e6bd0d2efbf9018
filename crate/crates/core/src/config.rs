//! Plain-text `key = value` configuration.

use crate::error::{Error, Result};
use crate::labeler::LabelerConfig;
use crate::nnet::UNetConfig;
use crate::sampler::SamplerConfig;
use crate::tiler::{NormMode, TilerConfig};
use crate::trainer::{Optimizer, TrainConfig};
use crate::worldgen::WorldConfig;

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config { line, message: format!("expected `key = value`, got {content:?}") })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config { line, message: "empty key".into() });
        }
        out.push(Entry { line, key: key.to_string(), value: value.trim().to_string() });
    }
    Ok(out)
}

/// Every tunable of the pipeline. Resolution order: defaults, then a config
/// file, then command-line overrides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppConfig {
    pub world: WorldConfig,
    pub sampler: SamplerConfig,
    pub labeler: LabelerConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub tiler: TilerConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}, expected true or false")),
    }
}

impl AppConfig {
    /// `(key, value)` for every setting, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (w, s, l, t, u, r, ti) =
            (&self.world, &self.sampler, &self.labeler, &self.labeler.thresholds, &self.unet, &self.train, &self.tiler);
        vec![
            ("world.seed", w.seed.to_string()),
            ("world.width", w.width.to_string()),
            ("world.height", w.height.to_string()),
            ("world.octaves", w.octaves.to_string()),
            ("world.persistence", w.persistence.to_string()),
            ("world.sea_level_bias", w.sea_level_bias.to_string()),
            ("world.cell_size", w.cell_size.to_string()),
            ("world.lat_max", w.lat_max.to_string()),
            ("world.sun_azimuth", w.sun_azimuth.to_string()),
            ("world.sun_altitude", w.sun_altitude.to_string()),
            ("sampler.n_patches", s.n_patches.to_string()),
            ("sampler.base", s.base.to_string()),
            ("sampler.lat_max", s.lat_max.to_string()),
            ("sampler.ocean_reject_threshold", s.ocean_reject_threshold.to_string()),
            ("sampler.seed", s.seed.to_string()),
            ("labeler.k", l.k.to_string()),
            ("labeler.kmeans_iters", l.kmeans_iters.to_string()),
            ("labeler.slope_hill", t.slope_hill.to_string()),
            ("labeler.slope_mountain", t.slope_mountain.to_string()),
            ("labeler.elev_high", t.elev_high.to_string()),
            ("labeler.moisture_dry", t.moisture_dry.to_string()),
            ("labeler.moisture_wet", t.moisture_wet.to_string()),
            ("labeler.tundra_lat", t.tundra_lat.to_string()),
            ("labeler.jitter_frac", l.jitter_frac.to_string()),
            ("labeler.mode_window", l.mode_window.to_string()),
            ("labeler.mode_passes", l.mode_passes.to_string()),
            ("labeler.seed", l.seed.to_string()),
            ("unet.in_channels", u.in_channels.to_string()),
            ("unet.n_classes", u.n_classes.to_string()),
            ("unet.depth", u.depth.to_string()),
            ("unet.base_filters", u.base_filters.to_string()),
            ("unet.dropout_p", u.dropout_p.to_string()),
            ("train.max_epochs", r.max_epochs.to_string()),
            ("train.batch_size", r.batch_size.to_string()),
            ("train.learning_rate", r.learning_rate.to_string()),
            ("train.val_every", r.val_every.to_string()),
            ("train.val_fraction", r.val_fraction.to_string()),
            ("train.optimizer", r.optimizer.name().to_string()),
            ("train.beta1", r.beta1.to_string()),
            ("train.beta2", r.beta2.to_string()),
            ("train.adam_eps", r.adam_eps.to_string()),
            ("train.seed", r.seed.to_string()),
            ("train.early_stop_patience", r.early_stop_patience.map_or_else(|| "none".to_string(), |p| p.to_string())),
            ("tiler.tile_size", ti.tile_size.to_string()),
            ("tiler.norm", ti.norm.name().to_string()),
            ("tiler.parallel", ti.parallel.to_string()),
        ]
    }

    /// Sets one key; the error is a message without location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value;
        let (w, s, l, u, r, ti) =
            (&mut self.world, &mut self.sampler, &mut self.labeler, &mut self.unet, &mut self.train, &mut self.tiler);
        match key {
            "world.seed" => w.seed = parse(key, v)?,
            "world.width" => w.width = parse(key, v)?,
            "world.height" => w.height = parse(key, v)?,
            "world.octaves" => w.octaves = parse(key, v)?,
            "world.persistence" => w.persistence = parse(key, v)?,
            "world.sea_level_bias" => w.sea_level_bias = parse(key, v)?,
            "world.cell_size" => w.cell_size = parse(key, v)?,
            "world.lat_max" => w.lat_max = parse(key, v)?,
            "world.sun_azimuth" => w.sun_azimuth = parse(key, v)?,
            "world.sun_altitude" => w.sun_altitude = parse(key, v)?,
            "sampler.n_patches" => s.n_patches = parse(key, v)?,
            "sampler.base" => s.base = parse(key, v)?,
            "sampler.lat_max" => s.lat_max = parse(key, v)?,
            "sampler.ocean_reject_threshold" => s.ocean_reject_threshold = parse(key, v)?,
            "sampler.seed" => s.seed = parse(key, v)?,
            "labeler.k" => l.k = parse(key, v)?,
            "labeler.kmeans_iters" => l.kmeans_iters = parse(key, v)?,
            "labeler.slope_hill" => l.thresholds.slope_hill = parse(key, v)?,
            "labeler.slope_mountain" => l.thresholds.slope_mountain = parse(key, v)?,
            "labeler.elev_high" => l.thresholds.elev_high = parse(key, v)?,
            "labeler.moisture_dry" => l.thresholds.moisture_dry = parse(key, v)?,
            "labeler.moisture_wet" => l.thresholds.moisture_wet = parse(key, v)?,
            "labeler.tundra_lat" => l.thresholds.tundra_lat = parse(key, v)?,
            "labeler.jitter_frac" => l.jitter_frac = parse(key, v)?,
            "labeler.mode_window" => l.mode_window = parse(key, v)?,
            "labeler.mode_passes" => l.mode_passes = parse(key, v)?,
            "labeler.seed" => l.seed = parse(key, v)?,
            "unet.in_channels" => u.in_channels = parse(key, v)?,
            "unet.n_classes" => u.n_classes = parse(key, v)?,
            "unet.depth" => u.depth = parse(key, v)?,
            "unet.base_filters" => u.base_filters = parse(key, v)?,
            "unet.dropout_p" => u.dropout_p = parse(key, v)?,
            "train.max_epochs" => r.max_epochs = parse(key, v)?,
            "train.batch_size" => r.batch_size = parse(key, v)?,
            "train.learning_rate" => r.learning_rate = parse(key, v)?,
            "train.val_every" => r.val_every = parse(key, v)?,
            "train.val_fraction" => r.val_fraction = parse(key, v)?,
            "train.optimizer" => {
                r.optimizer = Optimizer::from_name(v).ok_or_else(|| format!("unknown optimizer {v:?} (adam or sgd)"))?
            }
            "train.beta1" => r.beta1 = parse(key, v)?,
            "train.beta2" => r.beta2 = parse(key, v)?,
            "train.adam_eps" => r.adam_eps = parse(key, v)?,
            "train.seed" => r.seed = parse(key, v)?,
            "train.early_stop_patience" => {
                r.early_stop_patience = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "tiler.tile_size" => ti.tile_size = parse(key, v)?,
            "tiler.norm" => {
                ti.norm = NormMode::from_name(v).ok_or_else(|| format!("unknown norm mode {v:?} (image, tile or none)"))?
            }
            "tiler.parallel" => ti.parallel = parse_bool(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` file; errors name the offending line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in parse_kv(text)? {
            self.set(&e.key, &e.value).map_err(|message| Error::Config { line: e.line, message })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::arg(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim()).map_err(Error::Argument)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sampler.validate()?;
        self.labeler.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        self.tiler.validate()?;
        if self.sampler.base % self.unet.spatial_multiple() != 0 {
            return Err(Error::arg(format!(
                "sampler.base {} is not divisible by 2^unet.depth = {}",
                self.sampler.base,
                self.unet.spatial_multiple()
            )));
        }
        Ok(())
    }

    /// The resolved configuration as a file that [`AppConfig::apply_text`]
    /// reads back to the same value.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let e = parse_kv("# c\n\n a = 1 # trailing\nb=two words\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].line, e[0].key.as_str(), e[0].value.as_str()), (3, "a", "1"));
        assert_eq!(e[1].value, "two words");
        assert!(matches!(parse_kv("ok = 1\nbroken\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse_kv(" = 3"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn text_round_trip_is_idempotent() {
        let mut c = AppConfig::default();
        c.apply_text("train.learning_rate = 0.000123\ntrain.early_stop_patience = 4\ntiler.norm = tile\n").unwrap();
        let text = c.to_text();
        let mut d = AppConfig::default();
        d.apply_text(&text).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.to_text(), text);
        assert_eq!(AppConfig::default().entries().len(), parse_kv(&text).unwrap().len());
    }

    #[test]
    fn every_key_is_settable() {
        let c = AppConfig::default();
        let mut d = AppConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_reports_line() {
        let mut c = AppConfig::default();
        let err = c.apply_text("world.seed = 1\n\nworld.colour = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = c.apply_text("train.batch_size = many\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let mut c = AppConfig::default();
        c.apply_text("train.batch_size = 8\ntrain.max_epochs = 30\n").unwrap();
        c.apply_overrides(&["train.batch_size=4"]).unwrap();
        assert_eq!((c.train.batch_size, c.train.max_epochs, c.train.val_every), (4, 30, 10));
        assert!(c.apply_overrides(&["nonsense"]).is_err());
        assert!(c.apply_overrides(&["no.such=1"]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = AppConfig::default();
        assert!(c.validate().is_ok());
        c.set("train.val_fraction", "1.5").unwrap();
        assert!(c.validate().is_err());
        let mut c = AppConfig::default();
        c.set("unet.depth", "7").unwrap();
        assert!(c.validate().is_err());
    }
}
