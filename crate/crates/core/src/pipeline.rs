//! End-to-end commands on directories of files: generate a dataset, train,
//! evaluate, run tiled inference. The command-line tool is a thin wrapper
//! around these.

use std::path::{Path, PathBuf};

use crate::config::AppConfig;
use crate::dataset::{load_dataset, write_dataset, Example};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, write_report, MetricsReport};
use crate::labeler::{mask_to_u8, LabelMask, TerrainClass};
use crate::netpbm::{read_rgb, write_atomic, write_gray8, write_rgb};
use crate::nnet::gradcheck::{run_suite, GradCheck};
use crate::sampler::ManifestEntry;
use crate::tiler::{colorize_mosaic, segment_image, ColorStats, MosaicStyle};
use crate::trainer::{split_dataset, train_from, Checkpoint, TrainLog, TrainOutcome};
use crate::worldgen::synth_world;

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Receives human-readable progress lines.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn write_config(dir: &Path, cfg: &AppConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(dir.join(CONFIG_FILE), cfg.to_text().as_bytes())
}

/// Synthesises the world and writes the patch dataset into `out`.
pub fn run_gen(cfg: &AppConfig, out: &Path, progress: Progress<'_>) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    progress(&format!("synthesising {}x{} world (seed {})", cfg.world.width, cfg.world.height, cfg.world.seed));
    let world = synth_world(&cfg.world)?;
    progress(&format!("sampling {} patches of {}px (seed {})", cfg.sampler.n_patches, cfg.sampler.base, cfg.sampler.seed));
    let entries = write_dataset(out, &world, &cfg.world, &cfg.sampler, &cfg.labeler)?;
    write_config(out, cfg)?;
    progress(&format!("wrote {} patches to {}", entries.len(), out.display()));
    Ok(entries)
}

/// Train/validation partition of a loaded dataset.
pub fn split_examples<'a>(examples: &'a [Example], val_fraction: f64, seed: u64) -> Result<(Vec<&'a Example>, Vec<&'a Example>)> {
    let (ti, vi) = split_dataset(examples.len(), val_fraction, seed)?;
    Ok((ti.iter().map(|&i| &examples[i]).collect(), vi.iter().map(|&i| &examples[i]).collect()))
}

fn check_examples(examples: &[Example], cfg: &crate::nnet::UNetConfig) -> Result<()> {
    let m = cfg.spatial_multiple();
    if let Some((i, e)) = examples.iter().enumerate().find(|(_, e)| e.dims().0 % m != 0 || e.dims().1 % m != 0) {
        return Err(Error::shape(format!(
            "patch {i} is {}x{}, not divisible by 2^depth = {m}",
            e.dims().0,
            e.dims().1
        )));
    }
    Ok(())
}

/// Keeps the header and the records of epochs `<= epoch` of an existing log.
fn truncate_log(text: &str, epoch: usize) -> String {
    let mut out = String::from(TrainLog::HEADER);
    for line in text.lines().skip(1) {
        let e: Option<usize> = line.split('\t').next().and_then(|s| s.parse().ok());
        if e.is_some_and(|e| e <= epoch) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Trains on the dataset in `data`, writing `train_log.tsv`, `last.ckpt`
/// (every epoch) and `best.ckpt` (whenever validation loss improves) to `out`.
///
/// With `resume`, training continues from that checkpoint, its seed and its
/// architecture, up to `train.max_epochs` total epochs; log records after the
/// checkpoint's epoch are dropped first.
pub fn run_train(
    cfg: &AppConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    progress: Progress<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(data)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);

    let (state, mut log_text) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.config != cfg.unet {
                progress(&format!("using the checkpoint's architecture {:?}", ck.model.config));
            }
            let prior = std::fs::read_to_string(&log_path).unwrap_or_default();
            progress(&format!("resuming from {} at epoch {} (seed {})", p.display(), ck.epoch, ck.seed));
            let text = truncate_log(&prior, ck.epoch);
            (ck, text)
        }
        None => {
            let (tr, _) = split_examples(&ds.examples, cfg.train.val_fraction, cfg.train.seed)?;
            let stats = ColorStats::of_images(tr.iter().map(|e| &e.terrain))?;
            (Checkpoint::fresh(&cfg.unet, &cfg.train, stats)?, String::from(TrainLog::HEADER))
        }
    };
    check_examples(&ds.examples, &state.model.config)?;
    let (tr, va) = split_examples(&ds.examples, cfg.train.val_fraction, state.seed)?;
    progress(&format!(
        "{} training / {} validation patches, {} parameters, seed {}",
        tr.len(),
        va.len(),
        state.model.n_params(),
        state.seed
    ));
    write_config(out, cfg)?;
    write_atomic(&log_path, log_text.as_bytes())?;

    let outcome = train_from(state, &tr, &va, &cfg.train, |r| {
        log_text.push_str(&r.train.tsv_line());
        let mut line = format!("epoch {:>4}  train loss {:.4} acc {:.4}", r.train.epoch, r.train.loss, r.train.accuracy);
        if let Some(v) = r.val {
            log_text.push_str(&v.tsv_line());
            line.push_str(&format!("  | val loss {:.4} acc {:.4} mean jaccard {:.4}", v.loss, v.accuracy, v.mean_jaccard));
        }
        write_atomic(&log_path, log_text.as_bytes())?;
        r.state.save(out.join(LAST_CHECKPOINT))?;
        if r.improved {
            r.state.save(out.join(BEST_CHECKPOINT))?;
            line.push_str("  (best)");
        }
        progress(&line);
        Ok(())
    })?;
    if outcome.stopped_early {
        progress(&format!("stopped early after epoch {}", outcome.last.epoch));
    }
    Ok(outcome)
}

/// Evaluates a checkpoint on the validation split of `data` (or on every
/// patch with `all`) and writes the report files to `out`.
pub fn run_eval(
    cfg: &AppConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    all: bool,
    plot: bool,
    progress: Progress<'_>,
) -> Result<MetricsReport> {
    let ck = Checkpoint::load(model)?;
    let ds = load_dataset(data)?;
    check_examples(&ds.examples, &ck.model.config)?;
    let examples: Vec<Example> = if all {
        ds.examples
    } else {
        let (_, va) = split_examples(&ds.examples, cfg.train.val_fraction, ck.seed)?;
        va.into_iter().cloned().collect()
    };
    progress(&format!("evaluating {} patches (model epoch {})", examples.len(), ck.epoch));
    let report = evaluate(&ck.model, &examples)?;
    write_report(out, &report, plot)?;
    for c in &report.classes {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        progress(&format!("{:<10} auc {:>7}  jaccard {:>7}", c.class.name(), fmt(c.auc), fmt(c.jaccard)));
    }
    progress(&format!(
        "pixel accuracy {:.4}, mean auc {:.4}, mean jaccard {:.4}",
        report.pixel_accuracy,
        report.mean_auc(),
        report.mean_jaccard()
    ));
    Ok(report)
}

/// Output files of [`run_infer`].
#[derive(Debug, Clone)]
pub struct InferOutput {
    pub mask: LabelMask,
    pub files: Vec<PathBuf>,
}

/// Tiled segmentation of a P6 image; writes `<name>_mask.pgm`,
/// `<name>_mask.ppm` and, with `binary`, `<name>_<class>.ppm`.
pub fn run_infer(
    cfg: &AppConfig,
    model: &Path,
    image: &Path,
    out: &Path,
    binary: bool,
    progress: Progress<'_>,
) -> Result<InferOutput> {
    cfg.tiler.validate()?;
    let ck = Checkpoint::load(model)?;
    let img = read_rgb(image)?;
    progress(&format!(
        "segmenting {}x{} image in {}px tiles (colour matching: {})",
        img.width(),
        img.height(),
        cfg.tiler.tile_size,
        cfg.tiler.norm.name()
    ));
    let mask = segment_image(&ck.model, &img, &ck.color_stats, &cfg.tiler)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut files = vec![out.join(format!("{name}_mask.pgm")), out.join(format!("{name}_mask.ppm"))];
    write_gray8(&files[0], &mask_to_u8(&mask))?;
    write_rgb(&files[1], &colorize_mosaic(&mask, MosaicStyle::Full))?;
    if binary {
        for c in TerrainClass::ALL {
            let p = out.join(format!("{name}_{}.ppm", c.name()));
            write_rgb(&p, &colorize_mosaic(&mask, MosaicStyle::Binary(c)))?;
            files.push(p);
        }
    }
    for f in &files {
        progress(&format!("wrote {}", f.display()));
    }
    Ok(InferOutput { mask, files })
}

/// Runs the finite-difference gradient suite.
pub fn run_gradcheck(seed: u64, progress: Progress<'_>) -> Result<Vec<GradCheck>> {
    let results = run_suite(seed)?;
    for r in &results {
        progress(&format!(
            "{:<6} {:<40} {:>6} entries  max rel err {:.3e}{}",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_error,
            if r.skipped > 0 { format!("  ({} at kinks skipped)", r.skipped) } else { String::new() }
        ));
    }
    Ok(results)
}
