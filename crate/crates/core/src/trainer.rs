//! Minibatch training with periodic held-out validation, Adam/SGD, and a
//! byte-stable checkpoint format.
//!
//! Every random draw (split, per-epoch shuffle, dropout masks) comes from a
//! stream derived from `(seed, purpose, epoch/step, …)`, so the seed plus the
//! epoch and step counters are the whole random state: a run resumed from a
//! checkpoint continues exactly where the uninterrupted run would be.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::evalkit::Confusion;
use crate::labeler::N_CLASSES;
use crate::netpbm::write_atomic;
use crate::nnet::{argmax_channels, init_params, softmax_ce, Real, UNet, UNetConfig};
use crate::rng::{stream, TAG_DROPOUT, TAG_SHUFFLE, TAG_SPLIT};
use crate::tiler::ColorStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Optimizer::Adam),
            "sgd" => Some(Optimizer::Sgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_every: usize,
    pub val_fraction: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validation rounds without improvement before stopping.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 300,
            batch_size: 16,
            learning_rate: 1e-4,
            val_every: 10,
            val_fraction: 0.2,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("train.batch_size must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::arg("train.val_fraction must lie in (0, 1)"));
        }
        if self.val_every == 0 {
            return Err(Error::arg("train.val_every must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("train.learning_rate must be finite and non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::arg("adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::arg("adam epsilon must be positive"));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::arg("train.early_stop_patience must be positive when set"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Deterministic shuffled split of `0..n` into sorted (train, val) ids.
pub fn split_dataset(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 patches to split, have {n}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::arg("validation fraction must lie in (0, 1)"));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::arg(format!("fraction {val_fraction} of {n} patches leaves one side empty")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream(seed, &[TAG_SPLIT]));
    let mut val = ids[..n_val].to_vec();
    let mut train = ids[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, hp: &AdamParams) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape(format!(
            "adam: {n} params, {} grads, {} first and {} second moments",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::arg("adam step counter starts at 1"));
    }
    let bc1 = 1.0 - hp.beta1.powf(t as f64);
    let bc2 = 1.0 - hp.beta2.powf(t as f64);
    for i in 0..n {
        let g = grads[i].f64();
        let mi = hp.beta1 * m[i].f64() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v[i].f64() + (1.0 - hp.beta2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let step = hp.lr * (mi / bc1) / ((vi / bc2).sqrt() + hp.eps);
        params[i] = T::of(params[i].f64() - step);
    }
    Ok(())
}

pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!("sgd: {} params, {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p = T::of(p.f64() - lr * g.f64());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: Split,
    /// Mean per-image cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    /// Mean over classes present in truth or prediction.
    pub mean_jaccard: f64,
    pub class_jaccard: [Option<f64>; N_CLASSES],
}

impl LogRecord {
    fn new(epoch: usize, split: Split, loss: f64, conf: &Confusion) -> Self {
        Self {
            epoch,
            split,
            loss,
            accuracy: conf.accuracy(),
            mean_jaccard: conf.mean_jaccard(),
            class_jaccard: std::array::from_fn(|c| conf.jaccard(c)),
        }
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            self.epoch,
            self.split.name(),
            self.loss,
            self.accuracy,
            self.mean_jaccard
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tsplit\tloss\taccuracy\tmean_jaccard\n";

    pub fn validation(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.split == Split::Val)
    }

    pub fn training(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        for r in &self.records {
            s.push_str(&r.tsv_line());
        }
        s
    }
}

/// Model, optimizer state and training counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Colour statistics of the training images, used by tiled inference.
    pub color_stats: ColorStats,
    pub best_val_loss: Option<f64>,
    /// Validation rounds since the best one.
    pub stale_rounds: usize,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRSU";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn fresh(unet: &UNetConfig, cfg: &TrainConfig, color_stats: ColorStats) -> Result<Self> {
        let model = init_params::<f32>(unet, cfg.seed)?;
        let n = model.n_params();
        Ok(Self {
            model,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            epoch: 0,
            step: 0,
            seed: cfg.seed,
            optimizer: cfg.optimizer,
            color_stats,
            best_val_loss: None,
            stale_rounds: 0,
        })
    }

    fn header(&self) -> String {
        let c = &self.model.config;
        let s = &self.color_stats;
        let mut h = String::new();
        let _ = writeln!(h, "architecture = unet");
        let _ = writeln!(h, "in_channels = {}", c.in_channels);
        let _ = writeln!(h, "n_classes = {}", c.n_classes);
        let _ = writeln!(h, "depth = {}", c.depth);
        let _ = writeln!(h, "base_filters = {}", c.base_filters);
        let _ = writeln!(h, "dropout_p = {}", c.dropout_p);
        let _ = writeln!(h, "n_params = {}", self.model.n_params());
        let _ = writeln!(h, "epoch = {}", self.epoch);
        let _ = writeln!(h, "step = {}", self.step);
        let _ = writeln!(h, "seed = {}", self.seed);
        let _ = writeln!(h, "optimizer = {}", self.optimizer.name());
        let _ = writeln!(h, "color_mean = {} {} {}", s.mean[0], s.mean[1], s.mean[2]);
        let _ = writeln!(h, "color_std = {} {} {}", s.std[0], s.std[1], s.std[2]);
        match self.best_val_loss {
            Some(v) => writeln!(h, "best_val_loss = {v}"),
            None => writeln!(h, "best_val_loss = none"),
        }
        .expect("writing to a String");
        let _ = writeln!(h, "stale_rounds = {}", self.stale_rounds);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let n = self.model.n_params();
        let mut out = Vec::with_capacity(12 + header.len() + 12 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for arr in [&self.model.params, &self.adam_m, &self.adam_v] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |len: usize| {
            if bytes.len() < len {
                Err(Error::Truncated { expected: len, actual: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(format!("{:?}, expected \"MRSU\"", String::from_utf8_lossy(&bytes[..4]))));
        }
        need(12)?;
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = word(8) as usize;
        need(12 + header_len)?;
        let header = std::str::from_utf8(&bytes[12..12 + header_len])
            .map_err(|_| Error::Header("header is not UTF-8".into()))?;
        let mut ckpt = Self::parse_header(header)?;
        let n = ckpt.model.n_params();
        let body = 12 + header_len;
        let total = body + 12 * n;
        need(total)?;
        if bytes.len() > total {
            return Err(Error::Header(format!("{} trailing bytes after the arrays", bytes.len() - total)));
        }
        let floats = |k: usize| -> Vec<f32> {
            bytes[body + 4 * n * k..body + 4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        ckpt.model.params = floats(0);
        ckpt.adam_m = floats(1);
        ckpt.adam_v = floats(2);
        Ok(ckpt)
    }

    fn parse_header(text: &str) -> Result<Self> {
        let entries = crate::config::parse_kv(text).map_err(|e| Error::Header(e.to_string()))?;
        let get = |key: &str| -> Result<&str> {
            entries
                .iter()
                .find(|e| e.key == key)
                .map(|e| e.value.as_str())
                .ok_or_else(|| Error::Header(format!("missing key {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Header(format!("bad value for {key}: {v:?}")))
        }
        let field = |key: &str| -> Result<usize> { num(key, get(key)?) };
        let triple = |key: &str| -> Result<[f64; 3]> {
            let v: Vec<f64> = get(key)?.split_whitespace().map(|s| num(key, s)).collect::<Result<_>>()?;
            v.try_into().map_err(|_| Error::Header(format!("{key} needs three numbers")))
        };
        if get("architecture")? != "unet" {
            return Err(Error::Header(format!("unknown architecture {:?}", get("architecture")?)));
        }
        let config = UNetConfig {
            in_channels: field("in_channels")?,
            n_classes: field("n_classes")?,
            depth: field("depth")?,
            base_filters: field("base_filters")?,
            dropout_p: num("dropout_p", get("dropout_p")?)?,
        };
        config.validate().map_err(|e| Error::Header(e.to_string()))?;
        let model = init_params::<f32>(&config, 0)?;
        let n = field("n_params")?;
        if n != model.n_params() {
            return Err(Error::Header(format!("n_params {n} does not match the architecture ({})", model.n_params())));
        }
        let opt_name = get("optimizer")?;
        let optimizer =
            Optimizer::from_name(opt_name).ok_or_else(|| Error::Header(format!("unknown optimizer {opt_name:?}")))?;
        let best_val_loss = match get("best_val_loss")? {
            "none" => None,
            v => Some(num("best_val_loss", v)?),
        };
        Ok(Self {
            model,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            epoch: field("epoch")?,
            step: num("step", get("step")?)?,
            seed: num("seed", get("seed")?)?,
            optimizer,
            color_stats: ColorStats { mean: triple("color_mean")?, std: triple("color_std")? },
            best_val_loss,
            stale_rounds: field("stale_rounds")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// What a training epoch reports to the caller.
#[derive(Debug)]
pub struct EpochReport<'a> {
    pub train: &'a LogRecord,
    pub val: Option<&'a LogRecord>,
    /// State after the epoch.
    pub state: &'a Checkpoint,
    /// This epoch's validation loss is the best so far.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// State at the lowest validation loss seen in this run.
    pub best: Option<Checkpoint>,
    pub log: TrainLog,
    pub stopped_early: bool,
}

struct SampleResult {
    grads: Vec<f32>,
    loss: f64,
    conf: Confusion,
}

fn sample_gradient(model: &UNet<f32>, ex: &Example, seed: u64, step: u64, slot: usize) -> Result<SampleResult> {
    let x = ex.input(model.config.in_channels)?;
    let labels = ex.labels();
    let mut rng = stream(seed, &[TAG_DROPOUT, step, slot as u64]);
    let (logits, trace) = model.forward(&x, true, &mut rng)?;
    let (loss, grad) = softmax_ce(&logits, &labels)?;
    let mut conf = Confusion::default();
    conf.add_labels(&labels, &argmax_channels(&logits)?);
    let grads = model.backward(&trace, &grad)?;
    Ok(SampleResult { grads, loss: loss as f64, conf })
}

fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Inference-mode loss and confusion over `examples`.
pub fn validate(model: &UNet<f32>, examples: &[&Example]) -> Result<(f64, Confusion)> {
    let per = map_ordered(examples, |_, ex| {
        let logits = model.predict(&ex.input(model.config.in_channels)?)?;
        let labels = ex.labels();
        let (loss, _) = softmax_ce(&logits, &labels)?;
        let mut conf = Confusion::default();
        conf.add_labels(&labels, &argmax_channels(&logits)?);
        Ok((loss as f64, conf))
    })?;
    let mut conf = Confusion::default();
    let mut loss = 0.0;
    for (l, c) in &per {
        loss += l;
        conf.merge(c);
    }
    Ok((loss / per.len().max(1) as f64, conf))
}

/// Continues training `state` up to `cfg.max_epochs` total epochs.
///
/// `val` may be empty, in which case no validation happens. The shuffle and
/// dropout streams use `state.seed`.
pub fn train_from(
    mut state: Checkpoint,
    train: &[&Example],
    val: &[&Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("no training examples"));
    }
    let n = state.model.n_params();
    if state.adam_m.len() != n || state.adam_v.len() != n {
        return Err(Error::shape("optimizer moments do not match the model"));
    }
    let mut log = TrainLog::default();
    let mut best = None;
    let mut stopped_early = false;
    let seed = state.seed;
    let hp = cfg.adam();

    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch as u64]));

        let mut epoch_loss = 0.0;
        let mut epoch_conf = Confusion::default();
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.step + 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| train[i]).collect();
            let model = &state.model;
            let results = map_ordered(&batch, |slot, ex| sample_gradient(model, ex, seed, step, slot))?;

            // fixed-order reduction keeps the step bit-reproducible
            let mut grads = vec![0.0f32; n];
            let mut batch_loss = 0.0;
            for r in &results {
                for (g, s) in grads.iter_mut().zip(&r.grads) {
                    *g += *s;
                }
                batch_loss += r.loss;
                epoch_conf.merge(&r.conf);
            }
            let inv = 1.0 / results.len() as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
            let mean_loss = batch_loss / results.len() as f64;
            if !mean_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step: step as usize, loss: mean_loss });
            }
            epoch_loss += batch_loss;

            match state.optimizer {
                Optimizer::Adam => {
                    adam_step(&mut state.model.params, &grads, &mut state.adam_m, &mut state.adam_v, step, &hp)?
                }
                Optimizer::Sgd => sgd_step(&mut state.model.params, &grads, cfg.learning_rate)?,
            }
            if state.model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, step: step as usize, loss: mean_loss });
            }
            state.step = step;
        }
        state.epoch = epoch;
        log.records.push(LogRecord::new(epoch, Split::Train, epoch_loss / train.len() as f64, &epoch_conf));

        let mut improved = false;
        if !val.is_empty() && epoch % cfg.val_every == 0 {
            let (loss, conf) = validate(&state.model, val)?;
            log.records.push(LogRecord::new(epoch, Split::Val, loss, &conf));
            if state.best_val_loss.is_none_or(|b| loss < b) {
                state.best_val_loss = Some(loss);
                state.stale_rounds = 0;
                improved = true;
            } else {
                state.stale_rounds += 1;
            }
        }
        if improved {
            best = Some(state.clone());
        }
        let (train_rec, val_rec) = match log.records.as_slice() {
            [.., t, v] if v.split == Split::Val && v.epoch == epoch => (t, Some(v)),
            [.., t] => (t, None),
            [] => unreachable!("a record was just pushed"),
        };
        on_epoch(&EpochReport { train: train_rec, val: val_rec, state: &state, improved })?;
        if cfg.early_stop_patience.is_some_and(|p| state.stale_rounds >= p) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { last: state, best, log, stopped_early })
}

/// Splits `examples`, initialises a model and trains it from scratch.
pub fn train(examples: &[Example], unet: &UNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_ids, val_ids) = split_dataset(examples.len(), cfg.val_fraction, cfg.seed)?;
    let train_set: Vec<&Example> = train_ids.iter().map(|&i| &examples[i]).collect();
    let val_set: Vec<&Example> = val_ids.iter().map(|&i| &examples[i]).collect();
    let stats = ColorStats::of_images(train_set.iter().map(|e| &e.terrain))?;
    let state = Checkpoint::fresh(unet, cfg, stats)?;
    train_from(state, &train_set, &val_set, cfg, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::labeler::TerrainClass;
    use crate::rng::rng_from;
    use rand::Rng as _;

    #[test]
    fn split_examples() {
        let (t, v) = split_dataset(10, 0.2, 4).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(split_dataset(10, 0.2, 4).unwrap(), (t.clone(), v.clone()));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(3, 0.1, 0).is_err());
        assert!(split_dataset(1, 0.5, 0).is_err());
    }

    #[test]
    fn adam_zero_gradient() {
        let hp = AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = vec![0.5f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, t, &hp).unwrap();
        }
        assert_eq!(p, [0.5, -2.0]);
        assert_eq!((m, v), (vec![0.0; 2], vec![0.0; 2]));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let hp = AdamParams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &hp).unwrap();
        assert!((p[0] - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-18);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let hp = AdamParams { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let (mut x, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        let (mut rx, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10u64 {
            let g = x[0];
            adam_step(&mut x, &[g], &mut m, &mut v, t, &hp).unwrap();
            // textbook form
            let rg = rx;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rx -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-12, "step {t}: {} vs {rx}", x[0]);
        }
        assert!(adam_step(&mut x, &[1.0, 2.0], &mut m, &mut v, 11, &hp).is_err());
    }

    fn toy_examples(n: usize, size: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let mask = Grid::from_fn(size, size, |_, _| TerrainClass::ALL[rng.random_range(0..3)]);
                Example {
                    terrain: mask.map(|c| c.terrain_color()),
                    height: Grid::filled(size, size, 0.0),
                    mask,
                }
            })
            .collect()
    }

    fn small_net() -> UNetConfig {
        UNetConfig { depth: 1, base_filters: 4, ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let ex = toy_examples(6, 8, 1);
        let cfg = TrainConfig { max_epochs: 3, batch_size: 4, learning_rate: 0.0, val_every: 1, seed: 2, ..Default::default() };
        let out = train(&ex, &small_net(), &cfg).unwrap();
        let init = init_params::<f32>(&small_net(), 2).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.last.model.params), bits(&init.params));
        assert_eq!(out.last.step, 6);
    }

    #[test]
    fn validation_cadence() {
        let ex = toy_examples(5, 8, 3);
        let cfg = TrainConfig { max_epochs: 7, batch_size: 2, val_every: 3, learning_rate: 1e-3, ..Default::default() };
        let out = train(&ex, &small_net(), &cfg).unwrap();
        let epochs: Vec<usize> = out.log.validation().map(|r| r.epoch).collect();
        assert_eq!(epochs, [3, 6]);
        assert_eq!(out.log.training().count(), 7);
        assert!(out.best.is_some());
        assert_eq!(out.log.to_tsv().lines().count(), 1 + 7 + 2);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ex = toy_examples(6, 8, 5);
        let net = UNetConfig { dropout_p: 0.3, ..small_net() };
        let full = TrainConfig { max_epochs: 4, batch_size: 4, val_every: 2, learning_rate: 1e-2, seed: 11, ..Default::default() };
        let a = train(&ex, &net, &full).unwrap();
        let half = TrainConfig { max_epochs: 2, ..full.clone() };
        let b = train(&ex, &net, &half).unwrap();
        let restored = Checkpoint::from_bytes(&b.last.to_bytes()).unwrap();
        let (ti, vi) = split_dataset(ex.len(), full.val_fraction, full.seed).unwrap();
        let tr: Vec<&Example> = ti.iter().map(|&i| &ex[i]).collect();
        let va: Vec<&Example> = vi.iter().map(|&i| &ex[i]).collect();
        let c = train_from(restored, &tr, &va, &full, |_| Ok(())).unwrap();
        assert_eq!(c.last.to_bytes(), a.last.to_bytes());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut ck = Checkpoint::fresh(&small_net(), &TrainConfig::default(), ColorStats { mean: [1.5, 2.0, 0.1], std: [3.0, 1e-7, 9.25] }).unwrap();
        ck.best_val_loss = Some(0.123456789012345);
        ck.adam_m[3] = 0.25;
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Version { found: 9, expected: 1 })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Header(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let ex = toy_examples(4, 8, 9);
        let cfg = TrainConfig { max_epochs: 2, batch_size: 2, val_every: 1, ..Default::default() };
        let (ti, _) = split_dataset(4, 0.25, 0).unwrap();
        let tr: Vec<&Example> = ti.iter().map(|&i| &ex[i]).collect();
        let mut state = Checkpoint::fresh(&small_net(), &cfg, ColorStats::default()).unwrap();
        state.model.params[0] = f32::NAN;
        let err = train_from(state, &tr, &[], &cfg, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, step: 1, .. }), "{err}");
    }

    #[test]
    fn early_stop_after_patience() {
        let ex = toy_examples(5, 8, 2);
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 4,
            val_every: 1,
            learning_rate: 0.0,
            early_stop_patience: Some(2),
            ..Default::default()
        };
        let out = train(&ex, &small_net(), &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.last.epoch, 3);
    }
}
