//! Segmentation metrics: one-vs-rest ROC/AUC per class, Jaccard index,
//! confusion matrices, and a report writer.

use std::fmt::Write as _;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labeler::{LabelMask, TerrainClass, N_CLASSES};
use crate::netpbm::{write_rgb, Rgb};
use crate::nnet::{softmax, softmax_ce, UNet};

/// One ROC vertex. `tp`/`fp` are the counts scored at or above `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// `+∞` for the origin.
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: u64,
    pub negatives: u64,
}

/// One-vs-rest ROC over the distinct scores in descending order; equal
/// scores enter together as one step.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::arg(format!("score {s} is not comparable")));
    }
    let positives = truth.iter().filter(|&&t| t).count() as u64;
    let negatives = truth.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateClass(format!("{positives} positives and {negatives} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY, tp: 0, fp: 0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / n, tpr: tp as f64 / p, threshold, tp, fp });
    }
    Ok(RocCurve { points, positives, negatives })
}

/// Trapezoidal area under the curve, accumulated in integer counts so it
/// equals the pair-counting statistic exactly up to the final division.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut twice_area: u128 = 0;
    for w in curve.points.windows(2) {
        twice_area += (w[1].fp - w[0].fp) as u128 * (w[0].tp + w[1].tp) as u128;
    }
    twice_area as f64 / (2.0 * curve.positives as f64 * curve.negatives as f64)
}

fn check_dims(pred: &LabelMask, truth: &LabelMask) -> Result<()> {
    if !pred.same_dims(truth) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(())
}

/// Intersection over union of the pixels labelled `cls`; 1 when neither
/// mask contains the class.
pub fn jaccard(pred: &LabelMask, truth: &LabelMask, cls: TerrainClass) -> Result<f64> {
    check_dims(pred, truth)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        let (a, b) = (p == cls, t == cls);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Rows are truth, columns prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion(pub [[u64; N_CLASSES]; N_CLASSES]);

impl Confusion {
    pub fn add(&mut self, truth: usize, pred: usize) {
        self.0[truth][pred] += 1;
    }

    pub fn add_labels(&mut self, truth: &[u8], pred: &[u8]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t as usize, p as usize);
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                self.0[t][p] += other.0[t][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [u64; N_CLASSES] {
        self.0.map(|r| r.iter().sum())
    }

    pub fn col_sums(&self) -> [u64; N_CLASSES] {
        std::array::from_fn(|p| self.0.iter().map(|r| r[p]).sum())
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..N_CLASSES).map(|c| self.0[c][c]).sum::<u64>() as f64 / total as f64
    }

    /// `None` when the class is absent from both truth and prediction.
    pub fn jaccard(&self, c: usize) -> Option<f64> {
        let inter = self.0[c][c];
        let union = self.row_sums()[c] + self.col_sums()[c] - inter;
        (union > 0).then(|| inter as f64 / union as f64)
    }

    /// Mean over classes that occur in truth or prediction.
    pub fn mean_jaccard(&self) -> f64 {
        let present: Vec<f64> = (0..N_CLASSES).filter_map(|c| self.jaccard(c)).collect();
        if present.is_empty() {
            return 1.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<Confusion> {
    check_dims(pred, truth)?;
    let mut m = Confusion::default();
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        m.add(t.index(), p.index());
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: TerrainClass,
    /// `None` when the pooled truth has no positive or no negative pixel.
    pub roc: Option<RocCurve>,
    pub auc: Option<f64>,
    /// `None` when the class is absent from truth and prediction.
    pub jaccard: Option<f64>,
    pub truth_pixels: u64,
    pub predicted_pixels: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Per image: mean AUC over its non-degenerate classes.
    pub image_macro_auc: Vec<Option<f64>>,
    pub confusion: Confusion,
    pub pixel_accuracy: f64,
    pub mean_loss: f64,
}

impl MetricsReport {
    /// Mean pooled AUC over classes with a defined curve.
    pub fn mean_auc(&self) -> f64 {
        mean(self.classes.iter().filter_map(|c| c.auc))
    }

    pub fn mean_jaccard(&self) -> f64 {
        self.confusion.mean_jaccard()
    }

    pub fn mean_image_macro_auc(&self) -> f64 {
        mean(self.image_macro_auc.iter().flatten().copied())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores and labels of one image: `probs[c]` is the class-`c` probability
/// plane, row-major.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub probs: Vec<Vec<f32>>,
    pub truth: Vec<u8>,
    pub pred: Vec<u8>,
    pub loss: f64,
}

fn score_example(model: &UNet<f32>, ex: &Example) -> Result<ScoredImage> {
    let logits = model.predict(&ex.input(model.config.in_channels)?)?;
    let truth = ex.labels();
    let (loss, _) = softmax_ce(&logits, &truth)?;
    let p = softmax(&logits)?;
    let hw = truth.len();
    let probs: Vec<Vec<f32>> = (0..N_CLASSES).map(|c| p.data()[c * hw..(c + 1) * hw].to_vec()).collect();
    let pred = (0..hw)
        .map(|i| {
            // first maximum wins, matching argmax_channels
            let mut best = 0;
            for c in 1..N_CLASSES {
                if probs[c][i] > probs[best][i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(ScoredImage { probs, truth, pred, loss: loss as f64 })
}

/// Pools per-image scores into a report.
pub fn report_from_scores(images: &[ScoredImage]) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::arg("no images to evaluate"));
    }
    let mut conf = Confusion::default();
    for im in images {
        conf.add_labels(&im.truth, &im.pred);
    }
    let mut classes = Vec::with_capacity(N_CLASSES);
    for class in TerrainClass::ALL {
        let c = class.index();
        let scores: Vec<f64> = images.iter().flat_map(|im| im.probs[c].iter().map(|&v| v as f64)).collect();
        let truth: Vec<bool> = images.iter().flat_map(|im| im.truth.iter().map(|&t| t as usize == c)).collect();
        let roc = match roc_curve(&scores, &truth) {
            Ok(r) => Some(r),
            Err(Error::DegenerateClass(_)) => None,
            Err(e) => return Err(e),
        };
        classes.push(ClassMetrics {
            class,
            auc: roc.as_ref().map(auc),
            roc,
            jaccard: conf.jaccard(c),
            truth_pixels: conf.row_sums()[c],
            predicted_pixels: conf.col_sums()[c],
        });
    }
    let image_macro_auc = images
        .iter()
        .map(|im| {
            let aucs: Vec<f64> = (0..N_CLASSES)
                .filter_map(|c| {
                    let scores: Vec<f64> = im.probs[c].iter().map(|&v| v as f64).collect();
                    let truth: Vec<bool> = im.truth.iter().map(|&t| t as usize == c).collect();
                    roc_curve(&scores, &truth).ok().map(|r| auc(&r))
                })
                .collect();
            (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
        })
        .collect();
    let mean_loss = images.iter().map(|im| im.loss).sum::<f64>() / images.len() as f64;
    Ok(MetricsReport { classes, image_macro_auc, pixel_accuracy: conf.accuracy(), confusion: conf, mean_loss })
}

/// Inference-mode evaluation of `model` on `examples`.
pub fn evaluate(model: &UNet<f32>, examples: &[Example]) -> Result<MetricsReport> {
    #[cfg(feature = "parallel")]
    let scored: Result<Vec<_>> = examples.par_iter().map(|ex| score_example(model, ex)).collect();
    #[cfg(not(feature = "parallel"))]
    let scored: Result<Vec<_>> = examples.iter().map(|ex| score_example(model, ex)).collect();
    report_from_scores(&scored?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

/// `metrics.tsv`: one row per class, summary as trailing comments.
pub fn metrics_tsv(r: &MetricsReport) -> String {
    let mut s = String::from("class\ttruth_pixels\tpredicted_pixels\tauc\tjaccard\n");
    for c in &r.classes {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            c.class.name(),
            c.truth_pixels,
            c.predicted_pixels,
            fmt_opt(c.auc),
            fmt_opt(c.jaccard)
        );
    }
    let _ = writeln!(s, "# pixel_accuracy = {:.6}", r.pixel_accuracy);
    let _ = writeln!(s, "# mean_auc = {:.6}", r.mean_auc());
    let _ = writeln!(s, "# mean_jaccard = {:.6}", r.mean_jaccard());
    let _ = writeln!(s, "# mean_image_macro_auc = {:.6}", r.mean_image_macro_auc());
    let _ = writeln!(s, "# mean_loss = {:.6}", r.mean_loss);
    s
}

pub fn confusion_tsv(m: &Confusion) -> String {
    let mut s = String::from("truth\\pred");
    for c in TerrainClass::ALL {
        let _ = write!(s, "\t{}", c.name());
    }
    s.push('\n');
    for t in TerrainClass::ALL {
        s.push_str(t.name());
        for p in 0..N_CLASSES {
            let _ = write!(s, "\t{}", m.0[t.index()][p]);
        }
        s.push('\n');
    }
    s
}

pub fn roc_tsv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr\ttpr\tthreshold\n");
    for p in &curve.points {
        let _ = writeln!(s, "{}\t{}\t{}", p.fpr, p.tpr, p.threshold);
    }
    s
}

/// Square line plot of a ROC curve: white background, grey chance diagonal,
/// curve in `color`.
pub fn plot_roc(curve: &RocCurve, size: usize, color: Rgb) -> Grid<Rgb> {
    let size = size.max(8);
    let mut img = Grid::filled(size, size, [255u8, 255, 255]);
    let last = (size - 1) as f64;
    let to_px = |fpr: f64, tpr: f64| (fpr * last, last - tpr * last);
    let line = |img: &mut Grid<Rgb>, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb| {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = ((x0 + t * (x1 - x0)).round() as usize, (y0 + t * (y1 - y0)).round() as usize);
            img.set(x.min(size - 1), y.min(size - 1), c);
        }
    };
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), [180, 180, 180]);
    for w in curve.points.windows(2) {
        line(&mut img, to_px(w[0].fpr, w[0].tpr), to_px(w[1].fpr, w[1].tpr), color);
    }
    img
}

/// Writes `metrics.tsv`, `confusion.tsv`, `roc_<class>.tsv` and, with
/// `plot`, `roc_<class>.ppm` into `dir`.
pub fn write_report(dir: &Path, r: &MetricsReport, plot: bool) -> Result<()> {
    use crate::netpbm::write_atomic;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(dir.join("metrics.tsv"), metrics_tsv(r).as_bytes())?;
    write_atomic(dir.join("confusion.tsv"), confusion_tsv(&r.confusion).as_bytes())?;
    for c in &r.classes {
        let Some(roc) = &c.roc else { continue };
        write_atomic(dir.join(format!("roc_{}.tsv", c.class.name())), roc_tsv(roc).as_bytes())?;
        if plot {
            // tundra's mask colour is white; draw it black instead
            let color = if c.class.mask_color() == [255, 255, 255] { [0, 0, 0] } else { c.class.mask_color() };
            write_rgb(dir.join(format!("roc_{}.ppm", c.class.name())), &plot_roc(roc, 256, color))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_params, UNetConfig};
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng as _;
    use TerrainClass::*;

    fn pts(c: &RocCurve) -> Vec<(f64, f64)> {
        c.points.iter().map(|p| (p.fpr, p.tpr)).collect()
    }

    #[test]
    fn four_pixel_example() {
        let c = roc_curve(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert_eq!(pts(&c), [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 0.75);
    }

    #[test]
    fn separated_reversed_and_tied() {
        let truth = [true, true, false, false];
        let c = roc_curve(&[0.9, 0.8, 0.2, 0.1], &truth).unwrap();
        assert!(pts(&c).contains(&(0.0, 1.0)));
        assert_eq!(auc(&c), 1.0);
        assert_eq!(auc(&roc_curve(&[0.1, 0.2, 0.8, 0.9], &truth).unwrap()), 0.0);
        let flat = roc_curve(&[0.5; 4], &truth).unwrap();
        assert_eq!(pts(&flat), [(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&flat), 0.5);
    }

    #[test]
    fn degenerate_truth() {
        assert!(matches!(roc_curve(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateClass(_))));
        assert!(matches!(roc_curve(&[0.1, 0.2], &[false, false]), Err(Error::DegenerateClass(_))));
        assert!(matches!(roc_curve(&[0.1], &[true, false]), Err(Error::Shape(_))));
    }

    #[test]
    fn jaccard_examples() {
        let truth = Grid::from_vec(3, 1, vec![Water, Forest, Forest]).unwrap();
        let pred = Grid::from_vec(3, 1, vec![Forest, Forest, Water]).unwrap();
        assert!((jaccard(&pred, &truth, Forest).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&truth, &truth, Forest).unwrap(), 1.0);
        assert_eq!(jaccard(&pred, &truth, Desert).unwrap(), 1.0);
        let a = Grid::filled(2, 2, Water);
        let b = Grid::filled(2, 2, Hills);
        assert_eq!(jaccard(&a, &b, Water).unwrap(), 0.0);
        assert!(matches!(jaccard(&a, &Grid::filled(1, 2, Water), Water), Err(Error::Shape(_))));
    }

    #[test]
    fn confusion_example() {
        let pred = Grid::from_vec(2, 2, vec![Water, Grassland, Grassland, Grassland]).unwrap();
        let truth = Grid::from_vec(2, 2, vec![Water, Water, Grassland, Grassland]).unwrap();
        let m = confusion(&pred, &truth).unwrap();
        assert_eq!((m.0[0][0], m.0[0][1], m.0[1][1]), (1, 1, 2));
        assert_eq!(m.total(), 4);
        assert_eq!(m.accuracy(), 0.75);
        let d = confusion(&truth, &truth).unwrap();
        assert_eq!(d.row_sums(), [2, 2, 0, 0, 0, 0, 0]);
        assert_eq!(d.jaccard(3), None);
        assert_eq!(d.mean_jaccard(), 1.0);
    }

    fn pair_count(scores: &[f64], truth: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if truth[i] && !truth[j] {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pairs(v in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64 / 5.0).collect();
            let truth: Vec<bool> = v.iter().map(|p| p.1).collect();
            if let Ok(c) = roc_curve(&scores, &truth) {
                prop_assert!((auc(&c) - pair_count(&scores, &truth)).abs() < 1e-12);
                let first = c.points[0];
                let last = *c.points.last().unwrap();
                prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
                prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
                for w in c.points.windows(2) {
                    prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
                }
                // strictly increasing transforms leave AUC unchanged
                let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
                prop_assert_eq!(auc(&roc_curve(&warped, &truth).unwrap()), auc(&c));
            }
        }

        #[test]
        fn jaccard_symmetric(a in prop::collection::vec(0usize..7, 16), b in prop::collection::vec(0usize..7, 16)) {
            let ga = Grid::from_vec(4, 4, a.iter().map(|&i| TerrainClass::ALL[i]).collect()).unwrap();
            let gb = Grid::from_vec(4, 4, b.iter().map(|&i| TerrainClass::ALL[i]).collect()).unwrap();
            for c in TerrainClass::ALL {
                let j = jaccard(&ga, &gb, c).unwrap();
                prop_assert_eq!(j, jaccard(&gb, &ga, c).unwrap());
                prop_assert!((0.0..=1.0).contains(&j));
            }
        }
    }

    fn random_examples(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| Example {
                terrain: Grid::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]),
                height: Grid::filled(8, 8, 0.0),
                mask: Grid::from_fn(8, 8, |_, _| TerrainClass::ALL[rng.random_range(0..7)]),
            })
            .collect()
    }

    #[test]
    fn zero_model_is_uninformative() {
        let mut model = init_params::<f32>(&UNetConfig { depth: 1, base_filters: 4, ..Default::default() }, 0).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let r = evaluate(&model, &random_examples(20, 3)).unwrap();
        for c in &r.classes {
            assert!((c.auc.unwrap() - 0.5).abs() <= 0.02);
        }
        assert!((r.mean_loss - 7f64.ln()).abs() < 1e-6);
        let total: u64 = r.confusion.row_sums().iter().sum();
        assert_eq!(total, 20 * 64);
    }

    #[test]
    fn self_consistent_truth() {
        let model = init_params::<f32>(&UNetConfig { depth: 1, base_filters: 4, ..Default::default() }, 5).unwrap();
        let mut exs = random_examples(4, 9);
        for ex in &mut exs {
            let s = score_example(&model, ex).unwrap();
            ex.mask = Grid::from_vec(8, 8, s.pred.iter().map(|&p| TerrainClass::ALL[p as usize]).collect()).unwrap();
        }
        let r = evaluate(&model, &exs).unwrap();
        assert_eq!(r.pixel_accuracy, 1.0);
        assert!(r.classes.iter().all(|c| c.jaccard.is_none_or(|j| j == 1.0)));
        let mut hist = [0u64; N_CLASSES];
        for ex in &exs {
            for c in ex.mask.as_slice() {
                hist[c.index()] += 1;
            }
        }
        assert_eq!(r.confusion.row_sums(), hist);
    }

    #[test]
    fn report_files() {
        let model = init_params::<f32>(&UNetConfig { depth: 1, base_filters: 4, ..Default::default() }, 1).unwrap();
        let r = evaluate(&model, &random_examples(3, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r, true).unwrap();
        let m = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
        assert_eq!(m.lines().filter(|l| !l.starts_with('#')).count(), 1 + N_CLASSES);
        assert!(dir.path().join("roc_water.tsv").exists());
        let img = crate::netpbm::read_rgb(dir.path().join("roc_water.ppm")).unwrap();
        assert_eq!(img.dims(), (256, 256));
    }
}
