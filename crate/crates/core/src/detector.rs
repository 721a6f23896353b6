//! Vehicle detectors.
//!
//! [`ToyDetectorModel`] scores fixed anchor boxes with a logistic model over
//! pooled cell statistics, which keeps its gradient closed form:
//!
//! ```text
//! φ(a)  = per-cell channel means ++ per-cell means of squared channels (optional)
//! s(a)  = σ(w_k · φ(a) + b_k)            k = anchor size of a
//! ```
//!
//! [`external_detect`] exchanges files with a detector running elsewhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::compositor::BuiltScene;
use crate::geometry::{BBox, Rgb};
use crate::scalar::Scalar;
use crate::scene::{Image, ImageGrad};

/// Class id attached to vehicle detections.
pub const CAR_CLASS: u32 = 2;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("need at least {need} {what} training examples, got {got}")]
    TooFewExamples {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("training loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("detections[{index}].{field}: {message}")]
    Field {
        index: usize,
        field: &'static str,
        message: String,
    },
    #[error("detections file: {0}")]
    Malformed(String),
    #[error("timed out after {0:?} waiting for {1}")]
    Timeout(Duration, PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub score: T,
    pub class_id: u32,
}

impl<T: Scalar> Detection<T> {
    pub fn is_valid(&self) -> bool {
        self.bbox.is_valid() && self.score >= T::zero() && self.score <= T::one()
    }
}

/// Result of [`DifferentiableDetector::detect_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectGrad<T> {
    /// Highest score among anchors overlapping the target at IoU ≥ 0.5; 0 if none.
    pub score: T,
    /// `d score / d image`.
    pub grad: ImageGrad<T>,
    /// False when no anchor overlaps the target enough; score and gradient are then zero.
    pub matched: bool,
    pub anchor: Option<BBox<T>>,
}

pub trait Detector<T: Scalar>: Sync {
    fn name(&self) -> &str;
    /// Detections above the detector's threshold after NMS, by descending score.
    fn detect(&self, image: &Image<T>) -> Vec<Detection<T>>;
}

pub trait DifferentiableDetector<T: Scalar>: Detector<T> {
    fn detect_grad(&self, image: &Image<T>, target: &BBox<T>) -> DetectGrad<T>;
}

/// IoU threshold for an anchor to count as matching a target in [`DetectGrad`].
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDetectorConfig {
    /// Anchor step in pixels.
    pub stride: usize,
    /// Anchor `[width, height]` in pixels.
    pub sizes: Vec<[usize; 2]>,
    /// Cells per side of the pooling grid.
    pub grid: usize,
    /// Add per-cell means of squared intensities to the features.
    pub squares: bool,
    pub iterations: usize,
    pub l2: f64,
    /// Anchors at IoU ≥ this with the ground truth are positives.
    pub positive_iou: f64,
    /// Anchors below this IoU are negatives.
    pub negative_iou: f64,
    /// Negative anchors sampled from each training image.
    pub negatives_per_image: usize,
    /// Rounds of refitting with the top-scoring background anchors added.
    pub mining_rounds: usize,
    /// Hard negatives taken from each image per round.
    pub mined_per_image: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        let mut sizes = Vec::new();
        for s in [12usize, 18, 26, 38, 56, 80, 116, 168, 240] {
            sizes.push([s, s]);
            sizes.push([s * 8 / 5, s]);
            sizes.push([s, s * 8 / 5]);
        }
        ToyDetectorConfig {
            stride: 4,
            sizes,
            grid: 3,
            squares: true,
            iterations: 300,
            l2: 1e-3,
            positive_iou: 0.6,
            negative_iou: 0.3,
            negatives_per_image: 64,
            mining_rounds: 2,
            mined_per_image: 16,
            score_threshold: 0.5,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

/// Training diagnostics kept with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Full-batch loss before each step, one trace per anchor size.
    pub loss_traces: Vec<Vec<f64>>,
    /// Training images with a detection at IoU ≥ 0.5.
    pub recall: f64,
    /// Negative images with any detection.
    pub false_alarm_rate: f64,
    pub positives_per_size: Vec<usize>,
    pub underfit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ToyDetectorModel<T> {
    pub stride: usize,
    pub sizes: Vec<[usize; 2]>,
    pub grid: usize,
    pub squares: bool,
    /// One weight vector per anchor size.
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<T>,
    pub score_threshold: T,
    pub nms_iou: T,
    pub seed: u64,
    pub training: Option<TrainingReport>,
}

/// Per-pixel prefix sums of each channel and, optionally, each squared channel.
struct Integral<T> {
    width: usize,
    planes: usize,
    data: Vec<T>,
}

impl<T: Scalar> Integral<T> {
    fn new(image: &Image<T>, squares: bool) -> Self {
        let (w, h) = image.dims();
        let planes = if squares { 6 } else { 3 };
        let stride = w + 1;
        let mut data = vec![T::zero(); (w + 1) * (h + 1) * planes];
        for y in 0..h {
            let mut row = [T::zero(); 6];
            for x in 0..w {
                let c = image.get(x, y).channels();
                for k in 0..3 {
                    row[k] += c[k];
                    if squares {
                        row[3 + k] += c[k] * c[k];
                    }
                }
                for (p, r) in row.iter().enumerate().take(planes) {
                    let above = data[(y * stride + x + 1) * planes + p];
                    data[((y + 1) * stride + x + 1) * planes + p] = above + *r;
                }
            }
        }
        Integral {
            width: w,
            planes,
            data,
        }
    }

    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize, plane: usize) -> T {
        let s = self.width + 1;
        let at = |x: usize, y: usize| self.data[(y * s + x) * self.planes + plane];
        at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Anchor {
    size: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Anchor {
    fn bbox<T: Scalar>(&self) -> BBox<T> {
        BBox::new(
            T::from_usize_lossy(self.x0),
            T::from_usize_lossy(self.y0),
            T::from_usize_lossy(self.x0 + self.w),
            T::from_usize_lossy(self.y0 + self.h),
        )
    }
}

fn cell_edges(start: usize, len: usize, grid: usize) -> Vec<usize> {
    (0..=grid).map(|c| start + c * len / grid).collect()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn anchors_for(sizes: &[[usize; 2]], stride: usize, width: usize, height: usize) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (k, &[w, h]) in sizes.iter().enumerate() {
        if w > width || h > height {
            continue;
        }
        for y0 in (0..=height - h).step_by(stride) {
            for x0 in (0..=width - w).step_by(stride) {
                out.push(Anchor {
                    size: k,
                    x0,
                    y0,
                    w,
                    h,
                });
            }
        }
    }
    out
}

fn feature_len(grid: usize, squares: bool) -> usize {
    grid * grid * if squares { 6 } else { 3 }
}

fn features<T: Scalar>(ii: &Integral<T>, a: &Anchor, grid: usize, out: &mut Vec<T>) {
    out.clear();
    let xs = cell_edges(a.x0, a.w, grid);
    let ys = cell_edges(a.y0, a.h, grid);
    for plane in 0..ii.planes {
        for cy in 0..grid {
            for cx in 0..grid {
                let area = T::from_usize_lossy((xs[cx + 1] - xs[cx]) * (ys[cy + 1] - ys[cy]));
                out.push(ii.sum(xs[cx], ys[cy], xs[cx + 1], ys[cy + 1], plane) / area);
            }
        }
    }
}

/// Greedy non-maximum suppression. Input order breaks score ties.
pub fn nms<T: Scalar>(mut detections: Vec<Detection<T>>, iou: T) -> Vec<Detection<T>> {
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<Detection<T>> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| k.bbox.iou_unchecked(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

impl<T: Scalar> ToyDetectorModel<T> {
    fn check(&self) -> Result<(), DetectorError> {
        let d = feature_len(self.grid, self.squares);
        if self.stride == 0 || self.grid == 0 {
            return Err(DetectorError::Config("stride and grid must be positive".into()));
        }
        if self.sizes.iter().any(|s| s[0] < self.grid || s[1] < self.grid) {
            return Err(DetectorError::Config("anchor sides must be at least the grid size".into()));
        }
        if self.weights.len() != self.sizes.len() || self.biases.len() != self.sizes.len() {
            return Err(DetectorError::Config("one weight vector and bias per anchor size".into()));
        }
        if self.weights.iter().any(|w| w.len() != d) {
            return Err(DetectorError::Config(format!("weight vectors must have length {d}")));
        }
        if self
            .weights
            .iter()
            .flatten()
            .chain(&self.biases)
            .any(|v| !v.is_finite())
        {
            return Err(DetectorError::Config("weights must be finite".into()));
        }
        Ok(())
    }

    fn anchors(&self, width: usize, height: usize) -> Vec<Anchor> {
        anchors_for(&self.sizes, self.stride, width, height)
    }

    fn score(&self, ii: &Integral<T>, a: &Anchor, buf: &mut Vec<T>) -> T {
        features(ii, a, self.grid, buf);
        let z = self.weights[a.size]
            .iter()
            .zip(buf.iter())
            .fold(self.biases[a.size], |acc, (w, f)| acc + *w * *f);
        sigmoid(z)
    }

    /// Every anchor's box and score before thresholding and NMS.
    pub fn anchor_scores(&self, image: &Image<T>) -> Vec<(BBox<T>, T)> {
        let ii = Integral::new(image, self.squares);
        let mut buf = Vec::new();
        self.anchors(image.width(), image.height())
            .iter()
            .map(|a| (a.bbox(), self.score(&ii, a, &mut buf)))
            .collect()
    }

    /// Detections scoring at least `threshold`, after NMS.
    pub fn detect_with_threshold(&self, image: &Image<T>, threshold: T) -> Vec<Detection<T>> {
        let candidates = self
            .anchor_scores(image)
            .into_iter()
            .filter(|(_, s)| *s >= threshold)
            .map(|(bbox, score)| Detection {
                bbox,
                score,
                class_id: CAR_CLASS,
            })
            .collect();
        nms(candidates, self.nms_iou)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("model serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: Self =
            serde_json::from_str(&text).map_err(|e| DetectorError::Malformed(e.to_string()))?;
        model.check()?;
        Ok(model)
    }
}

impl<T: Scalar> Detector<T> for ToyDetectorModel<T> {
    fn name(&self) -> &str {
        "toy"
    }

    fn detect(&self, image: &Image<T>) -> Vec<Detection<T>> {
        self.detect_with_threshold(image, self.score_threshold)
    }
}

impl<T: Scalar> DifferentiableDetector<T> for ToyDetectorModel<T> {
    fn detect_grad(&self, image: &Image<T>, target: &BBox<T>) -> DetectGrad<T> {
        let (w, h) = image.dims();
        let ii = Integral::new(image, self.squares);
        let mut buf = Vec::new();
        let mut best: Option<(Anchor, T)> = None;
        for a in self.anchors(w, h) {
            if a.bbox::<T>().iou_unchecked(target) < T::lit(MATCH_IOU) {
                continue;
            }
            let s = self.score(&ii, &a, &mut buf);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((a, s));
            }
        }
        let mut grad = Image::black(w, h);
        let Some((a, s)) = best else {
            return DetectGrad {
                score: T::zero(),
                grad,
                matched: false,
                anchor: None,
            };
        };
        let ds = s * (T::one() - s);
        let weights = &self.weights[a.size];
        let cells = self.grid * self.grid;
        let xs = cell_edges(a.x0, a.w, self.grid);
        let ys = cell_edges(a.y0, a.h, self.grid);
        for cy in 0..self.grid {
            for cx in 0..self.grid {
                let cell = cy * self.grid + cx;
                let area = T::from_usize_lossy((xs[cx + 1] - xs[cx]) * (ys[cy + 1] - ys[cy]));
                let lin: [T; 3] = std::array::from_fn(|c| ds * weights[c * cells + cell] / area);
                let quad: [T; 3] = std::array::from_fn(|c| {
                    if self.squares {
                        ds * weights[(3 + c) * cells + cell] * T::lit(2.0) / area
                    } else {
                        T::zero()
                    }
                });
                for y in ys[cy]..ys[cy + 1] {
                    for x in xs[cx]..xs[cx + 1] {
                        let p = image.get(x, y).channels();
                        grid_set(&mut grad, x, y, |c| lin[c] + quad[c] * p[c]);
                    }
                }
            }
        }
        DetectGrad {
            score: s,
            grad,
            matched: true,
            anchor: Some(a.bbox()),
        }
    }
}

fn grid_set<T: Scalar>(img: &mut Image<T>, x: usize, y: usize, f: impl Fn(usize) -> T) {
    img.set(x, y, Rgb::new(f(0), f(1), f(2)));
}

struct Sample<T> {
    x: Vec<T>,
    positive: bool,
}

/// Trains one logistic model per anchor size by full-batch gradient descent on
/// standardized features, then folds the standardization into the weights.
///
/// Positives are anchors at IoU ≥ `positive_iou` with the ground truth, plus
/// the best anchor of each size when it reaches IoU 0.5. Negatives are seeded
/// samples of anchors below `negative_iou` in positive images and of all
/// anchors in negative images. Each class carries half the total weight.
/// After each fit, the `mined_per_image` highest-scoring background anchors of
/// every image join the negatives and the model is refit, `mining_rounds` times.
///
/// The step is `1/L` for an estimate `L` of the loss's smoothness constant,
/// halved whenever a step would raise the loss, so each trace is
/// non-increasing.
pub fn train_toy_detector<T: Scalar>(
    positives: &[(Image<T>, BBox<T>)],
    negatives: &[Image<T>],
    config: &ToyDetectorConfig,
) -> Result<ToyDetectorModel<T>, DetectorError> {
    if positives.len() < 10 {
        return Err(DetectorError::TooFewExamples {
            what: "positive",
            need: 10,
            got: positives.len(),
        });
    }
    if negatives.len() < 10 {
        return Err(DetectorError::TooFewExamples {
            what: "negative",
            need: 10,
            got: negatives.len(),
        });
    }
    let dim = feature_len(config.grid, config.squares);
    let mut model = ToyDetectorModel {
        stride: config.stride,
        sizes: config.sizes.clone(),
        grid: config.grid,
        squares: config.squares,
        weights: vec![vec![T::zero(); dim]; config.sizes.len()],
        biases: vec![T::zero(); config.sizes.len()],
        score_threshold: T::lit(config.score_threshold),
        nms_iou: T::lit(config.nms_iou),
        seed: config.seed,
        training: None,
    };
    model.check()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut per_size: Vec<Vec<Sample<T>>> = (0..config.sizes.len()).map(|_| Vec::new()).collect();
    let mut buf = Vec::new();
    let mut push = |ii: &Integral<T>, a: &Anchor, positive: bool, per_size: &mut Vec<Vec<Sample<T>>>| {
        features(ii, a, config.grid, &mut buf);
        per_size[a.size].push(Sample {
            x: buf.clone(),
            positive,
        });
    };

    for (image, gt) in positives {
        let ii = Integral::new(image, config.squares);
        let anchors = model.anchors(image.width(), image.height());
        let ious: Vec<T> = anchors.iter().map(|a| a.bbox::<T>().iou_unchecked(gt)).collect();
        let mut best: BTreeMap<usize, (usize, T)> = BTreeMap::new();
        let mut negative_pool = Vec::new();
        for (i, (a, &iou)) in anchors.iter().zip(&ious).enumerate() {
            if iou >= T::lit(config.positive_iou) {
                push(&ii, a, true, &mut per_size);
            } else if iou >= T::lit(MATCH_IOU) {
                let e = best.entry(a.size).or_insert((i, iou));
                if iou > e.1 {
                    *e = (i, iou);
                }
            } else if iou < T::lit(config.negative_iou) {
                negative_pool.push(i);
            }
        }
        for (size, (i, _)) in best {
            let has_strong = anchors
                .iter()
                .zip(&ious)
                .any(|(a, iou)| a.size == size && *iou >= T::lit(config.positive_iou));
            if !has_strong {
                push(&ii, &anchors[i], true, &mut per_size);
            }
        }
        negative_pool.shuffle(&mut rng);
        for &i in negative_pool.iter().take(config.negatives_per_image) {
            push(&ii, &anchors[i], false, &mut per_size);
        }
    }
    for image in negatives {
        let ii = Integral::new(image, config.squares);
        let mut anchors = model.anchors(image.width(), image.height());
        anchors.shuffle(&mut rng);
        for a in anchors.iter().take(config.negatives_per_image) {
            push(&ii, a, false, &mut per_size);
        }
    }

    let mut loss_traces = Vec::new();
    let mut positives_per_size = Vec::new();
    for round in 0..=config.mining_rounds {
        loss_traces.clear();
        positives_per_size.clear();
        for (k, samples) in per_size.iter().enumerate() {
            let n_pos = samples.iter().filter(|s| s.positive).count();
            positives_per_size.push(n_pos);
            if n_pos == 0 {
                // Never seen a vehicle at this size: keep it silent.
                model.biases[k] = T::lit(-8.0);
                loss_traces.push(Vec::new());
                continue;
            }
            let (w, b, trace) = fit_logistic(samples, dim, config.iterations, config.l2)?;
            model.weights[k] = w.into_iter().map(T::lit).collect();
            model.biases[k] = T::lit(b);
            loss_traces.push(trace);
        }
        if round == config.mining_rounds {
            break;
        }
        // Hard negatives: the highest-scoring background anchors of each image.
        let images = positives
            .iter()
            .map(|(i, gt)| (i, Some(gt)))
            .chain(negatives.iter().map(|i| (i, None)));
        for (image, gt) in images {
            let ii = Integral::new(image, config.squares);
            let mut scored: Vec<(T, Anchor)> = model
                .anchors(image.width(), image.height())
                .into_iter()
                .filter(|a| gt.is_none_or(|g| a.bbox::<T>().iou_unchecked(g) < T::lit(config.negative_iou)))
                .map(|a| (model.score(&ii, &a, &mut buf), a))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            for (_, a) in scored.iter().take(config.mined_per_image) {
                features(&ii, a, config.grid, &mut buf);
                per_size[a.size].push(Sample {
                    x: buf.clone(),
                    positive: false,
                });
            }
        }
    }

    let threshold = model.score_threshold;
    let recall = positives
        .iter()
        .filter(|(image, gt)| {
            model
                .detect_with_threshold(image, threshold)
                .iter()
                .any(|d| d.bbox.iou_unchecked(gt) >= T::lit(MATCH_IOU))
        })
        .count() as f64
        / positives.len() as f64;
    let false_alarm_rate = negatives
        .iter()
        .filter(|image| !model.detect_with_threshold(image, threshold).is_empty())
        .count() as f64
        / negatives.len() as f64;
    let underfit = recall < 0.9 || false_alarm_rate > 0.5;
    if underfit {
        log::warn!(
            "toy detector underfit: training recall {recall:.3}, false alarms on {:.1}% of negative images",
            100.0 * false_alarm_rate
        );
    }
    model.training = Some(TrainingReport {
        loss_traces,
        recall,
        false_alarm_rate,
        positives_per_size,
        underfit,
    });
    Ok(model)
}

/// Weighted, L2-regularized logistic regression. Returns raw-space weights,
/// bias and the loss trace.
fn fit_logistic<T: Scalar>(
    samples: &[Sample<T>],
    dim: usize,
    iterations: usize,
    l2: f64,
) -> Result<(Vec<f64>, f64, Vec<f64>), DetectorError> {
    let n = samples.len();
    let n_pos = samples.iter().filter(|s| s.positive).count();
    let n_neg = n - n_pos;
    let class_weight = |positive: bool| match (n_pos, n_neg) {
        (_, 0) | (0, _) => 1.0 / n as f64,
        _ if positive => 0.5 / n_pos as f64,
        _ => 0.5 / n_neg as f64,
    };

    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(&s.x) {
            *m += x.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; dim];
    for s in samples {
        for j in 0..dim {
            let d = s.x[j].to_f64_lossy() - mean[j];
            std[j] += d * d;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-9 {
            *s = 1.0;
        }
    }
    // Rows of standardized features with a trailing 1 for the bias.
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut r: Vec<f64> = (0..dim)
                .map(|j| (s.x[j].to_f64_lossy() - mean[j]) / std[j])
                .collect();
            r.push(1.0);
            r
        })
        .collect();
    let c: Vec<f64> = samples.iter().map(|s| class_weight(s.positive)).collect();
    let y: Vec<f64> = samples.iter().map(|s| if s.positive { 1.0 } else { 0.0 }).collect();

    // Largest eigenvalue of Σ c_i r_i r_iᵀ by power iteration.
    let mut v = vec![1.0; dim + 1];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut next = vec![0.0; dim + 1];
        for (r, ci) in rows.iter().zip(&c) {
            let proj: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() * ci;
            for (nx, ri) in next.iter_mut().zip(r) {
                *nx += proj * ri;
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.into_iter().map(|x| x / norm).collect();
    }
    let smooth = 0.25 * lambda * 1.05 + l2;
    let mut lr = 1.0 / smooth;

    let loss_of = |theta: &[f64]| -> f64 {
        let data: f64 = rows
            .iter()
            .zip(&c)
            .zip(&y)
            .map(|((r, ci), yi)| {
                let z: f64 = r.iter().zip(theta).map(|(a, b)| a * b).sum();
                ci * (softplus(z) - yi * z)
            })
            .sum();
        data + 0.5 * l2 * theta[..dim].iter().map(|t| t * t).sum::<f64>()
    };

    let mut theta = vec![0.0; dim + 1];
    let mut loss = loss_of(&theta);
    let mut trace = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        if !loss.is_finite() {
            return Err(DetectorError::NonFiniteLoss { iteration });
        }
        trace.push(loss);
        let mut g = vec![0.0; dim + 1];
        for ((r, ci), yi) in rows.iter().zip(&c).zip(&y) {
            let z: f64 = r.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let e = ci * (sigmoid(z) - yi);
            for (gj, rj) in g.iter_mut().zip(r) {
                *gj += e * rj;
            }
        }
        for j in 0..dim {
            g[j] += l2 * theta[j];
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gj)| t - lr * gj).collect();
            let cand_loss = loss_of(&cand);
            if cand_loss <= loss {
                theta = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !loss.is_finite() {
        return Err(DetectorError::NonFiniteLoss {
            iteration: trace.len(),
        });
    }

    let weights: Vec<f64> = (0..dim).map(|j| theta[j] / std[j]).collect();
    let bias = theta[dim] - (0..dim).map(|j| theta[j] * mean[j] / std[j]).sum::<f64>();
    Ok((weights, bias, trace))
}

/// Trains on built scenes: composites with a visible vehicle are positives and
/// every background is a negative. Anchor sizes that do not fit the image are
/// dropped from `config` first.
pub fn train_on_scenes<T: Scalar>(
    scenes: &[BuiltScene<T>],
    config: &ToyDetectorConfig,
) -> Result<ToyDetectorModel<T>, DetectorError> {
    let positives: Vec<(Image<T>, BBox<T>)> = scenes
        .iter()
        .filter_map(|s| s.instance.ground_truth_box.map(|b| (s.composite.clone(), b)))
        .collect();
    let negatives: Vec<Image<T>> = scenes.iter().map(|s| s.instance.background.clone()).collect();
    let mut config = config.clone();
    if let Some(s) = scenes.first() {
        let (w, h) = s.composite.dims();
        config.sizes.retain(|a| a[0] <= w && a[1] <= h);
    }
    train_toy_detector(&positives, &negatives, &config)
}

/// Where an external detector picks up images and leaves its answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalAdapter {
    pub exchange_dir: PathBuf,
    /// How long to wait for the detections file; zero means it must already exist.
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    #[serde(with = "duration_ms")]
    pub poll: Duration,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl ExternalAdapter {
    pub fn new(exchange_dir: impl Into<PathBuf>) -> Self {
        ExternalAdapter {
            exchange_dir: exchange_dir.into(),
            timeout: Duration::ZERO,
            poll: Duration::from_millis(50),
        }
    }

    /// `<exchange_dir>/<image file name>.detections.json`.
    pub fn detections_path(&self, image_file: &Path) -> PathBuf {
        let name = image_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.exchange_dir.join(format!("{name}.detections.json"))
    }
}

/// Places `image_file` in the exchange directory (unless already there) and
/// reads the detector's answer, waiting up to the adapter's timeout.
pub fn external_detect(
    adapter: &ExternalAdapter,
    image_file: &Path,
) -> Result<Vec<Detection<f64>>, DetectorError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DetectorError::Io { path, source }
    };
    std::fs::create_dir_all(&adapter.exchange_dir).map_err(io(&adapter.exchange_dir))?;
    if let Some(name) = image_file.file_name() {
        let staged = adapter.exchange_dir.join(name);
        let same = match (staged.canonicalize(), image_file.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same {
            std::fs::copy(image_file, &staged).map_err(io(image_file))?;
        }
    }
    let answer = adapter.detections_path(image_file);
    let started = Instant::now();
    while !answer.exists() {
        if started.elapsed() >= adapter.timeout {
            return Err(DetectorError::Timeout(adapter.timeout, answer));
        }
        std::thread::sleep(adapter.poll);
    }
    let text = std::fs::read_to_string(&answer).map_err(io(&answer))?;
    parse_detections(&text)
}

/// Parses `[{"box": [x0, y0, x1, y1], "score": s, "class_id": c}, ...]`.
pub fn parse_detections(text: &str) -> Result<Vec<Detection<f64>>, DetectorError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DetectorError::Malformed(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| DetectorError::Malformed("expected a JSON array".into()))?;
    items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let field = |field: &'static str, message: &str| DetectorError::Field {
                index,
                field,
                message: message.to_string(),
            };
            let obj = item
                .as_object()
                .ok_or_else(|| DetectorError::Malformed(format!("detections[{index}] is not an object")))?;
            let coords = obj
                .get("box")
                .ok_or_else(|| field("box", "missing"))?
                .as_array()
                .filter(|a| a.len() == 4)
                .ok_or_else(|| field("box", "expected [x0, y0, x1, y1]"))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| field("box", "coordinates must be numbers")))
                .collect::<Result<Vec<f64>, _>>()?;
            let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]);
            if !bbox.is_valid() {
                return Err(field("box", "needs positive width and height"));
            }
            let score = obj
                .get("score")
                .ok_or_else(|| field("score", "missing"))?
                .as_f64()
                .ok_or_else(|| field("score", "expected a number"))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(field("score", "must lie in [0, 1]"));
            }
            let class_id = match obj.get("class_id") {
                None => CAR_CLASS,
                Some(v) => v
                    .as_u64()
                    .and_then(|c| u32::try_from(c).ok())
                    .ok_or_else(|| field("class_id", "expected a non-negative integer"))?,
            };
            Ok(Detection {
                bbox,
                score,
                class_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(sizes: Vec<[usize; 2]>, grid: usize, squares: bool, seed: u64) -> ToyDetectorModel<f64> {
        let dim = feature_len(grid, squares);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        ToyDetectorModel {
            stride: 2,
            weights: (0..sizes.len())
                .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect(),
            biases: vec![-0.3; sizes.len()],
            sizes,
            grid,
            squares,
            score_threshold: 0.5,
            nms_iou: 0.5,
            seed,
            training: None,
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h)
            .map(|_| Rgb::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        Image::from_pixels(w, h, px).unwrap()
    }

    #[test]
    fn features_are_cell_means() {
        let img = noise(9, 6, 1);
        let ii = Integral::new(&img, true);
        let a = Anchor {
            size: 0,
            x0: 2,
            y0: 1,
            w: 6,
            h: 4,
        };
        let mut f = Vec::new();
        features(&ii, &a, 2, &mut f);
        // Top-left cell covers x 2..5, y 1..3, red channel.
        let mut r = 0.0;
        let mut r2 = 0.0;
        for y in 1..3 {
            for x in 2..5 {
                r += img.get(x, y).r;
                r2 += img.get(x, y).r * img.get(x, y).r;
            }
        }
        assert!((f[0] - r / 6.0).abs() < 1e-12);
        assert!((f[12] - r2 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_local_and_matches_fd() {
        let m = model(vec![[8, 8], [12, 10]], 2, true, 3);
        let img = noise(24, 20, 4);
        let target = BBox::new(6.0, 4.0, 16.0, 13.0);
        let g = m.detect_grad(&img, &target);
        assert!(g.matched);
        let anchor = g.anchor.unwrap();
        for y in 0..20 {
            for x in 0..24 {
                let inside = (x as f64) >= anchor.x0
                    && (x as f64) < anchor.x1
                    && (y as f64) >= anchor.y0
                    && (y as f64) < anchor.y1;
                if !inside {
                    assert_eq!(g.grad.get(x, y), Rgb::black());
                }
            }
        }
        let eps = 1e-4;
        for (x, y) in [(8, 6), (anchor.x0 as usize, anchor.y0 as usize)] {
            for c in 0..3 {
                let mut plus = img.clone();
                let mut minus = img.clone();
                let mut p = plus.get(x, y);
                *p.channel_mut(c) += eps;
                plus.set(x, y, p);
                let mut q = minus.get(x, y);
                *q.channel_mut(c) -= eps;
                minus.set(x, y, q);
                let fd = (m.detect_grad(&plus, &target).score - m.detect_grad(&minus, &target).score) / (2.0 * eps);
                let an = g.grad.get(x, y).channel(c);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-6), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn no_matching_anchor() {
        let m = model(vec![[8, 8]], 2, false, 1);
        let g = m.detect_grad(&noise(16, 16, 2), &BBox::new(0.0, 0.0, 2.0, 2.0));
        assert!(!g.matched);
        assert_eq!(g.score, 0.0);
        assert!(g.grad.pixels().iter().all(|p| *p == Rgb::black()));
    }

    #[test]
    fn detect_sorted_and_nms_idempotent() {
        let m = model(vec![[6, 6], [10, 8]], 2, true, 5);
        let img = noise(30, 24, 6);
        let dets = m.detect_with_threshold(&img, 0.0);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(nms(dets.clone(), 0.5), dets);
        let pre = m.anchor_scores(&img);
        let target = BBox::new(4.0, 4.0, 14.0, 12.0);
        let best = pre
            .iter()
            .filter(|(b, _)| b.iou_unchecked(&target) >= 0.5)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(m.detect_grad(&img, &target).score, best);
    }

    #[test]
    fn blank_image_negative_bias() {
        let mut m = model(vec![[6, 6]], 2, true, 7);
        m.weights[0].iter_mut().for_each(|w| *w = 0.0);
        m.biases[0] = -3.0;
        assert!(m.detect(&Image::black(20, 20)).is_empty());
    }

    fn bright_square(seed: u64) -> (Image<f64>, BBox<f64>) {
        let mut img = noise(40, 40, seed).clone();
        for p in img.pixels_mut() {
            *p = *p * 0.3;
        }
        let off = (seed % 4) as usize * 4;
        for y in 8 + off..24 + off {
            for x in 10..26 {
                img.set(x, y, Rgb::new(0.9, 0.2, 0.2));
            }
        }
        (img, BBox::from_f64(10.0, (8 + off) as f64, 26.0, (24 + off) as f64))
    }

    fn config() -> ToyDetectorConfig {
        ToyDetectorConfig {
            sizes: vec![[16, 16], [24, 24]],
            stride: 2,
            iterations: 150,
            ..Default::default()
        }
    }

    #[test]
    fn trains_deterministically_with_monotone_loss() {
        let pos: Vec<_> = (0..12).map(bright_square).collect();
        let neg: Vec<_> = (0..12)
            .map(|s| {
                let mut i = noise(40, 40, 100 + s);
                i.pixels_mut().iter_mut().for_each(|p| *p = *p * 0.3);
                i
            })
            .collect();
        let a = train_toy_detector(&pos, &neg, &config()).unwrap();
        let b = train_toy_detector(&pos, &neg, &config()).unwrap();
        assert_eq!(a, b);
        let report = a.training.as_ref().unwrap();
        assert!(!report.underfit, "{report:?}");
        assert!(report.recall >= 0.9);
        for trace in &report.loss_traces {
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        }
        let (img, gt) = &pos[0];
        assert!(a.detect(img).iter().any(|d| d.bbox.iou_unchecked(gt) >= 0.5));
    }

    #[test]
    fn degenerate_training_flags_underfit() {
        let neg: Vec<_> = (0..12).map(|s| noise(40, 40, 200 + s)).collect();
        let pos: Vec<_> = neg
            .iter()
            .map(|i| (i.clone(), BBox::from_f64(8.0, 8.0, 24.0, 24.0)))
            .collect();
        let m = train_toy_detector(&pos, &neg, &config()).unwrap();
        assert!(m.training.unwrap().underfit);
    }

    #[test]
    fn too_few_examples() {
        let pos: Vec<_> = (0..3).map(bright_square).collect();
        assert!(matches!(
            train_toy_detector(&pos, &[], &config()),
            Err(DetectorError::TooFewExamples { what: "positive", .. })
        ));
    }

    #[test]
    fn parse_examples() {
        let d = parse_detections(r#"[{"box":[10,10,50,40],"score":0.9,"class_id":2}]"#).unwrap();
        assert_eq!(
            d,
            vec![Detection {
                bbox: BBox::new(10.0, 10.0, 50.0, 40.0),
                score: 0.9,
                class_id: 2
            }]
        );
        assert!(parse_detections("[]").unwrap().is_empty());
        let err = parse_detections(r#"[{"box":[10,10,50,40],"score":"high","class_id":2}]"#).unwrap_err();
        assert!(matches!(err, DetectorError::Field { field: "score", .. }));
        assert!(err.to_string().contains("score"));
    }

    #[test]
    fn external_roundtrip_and_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("frame.png");
        noise(4, 4, 1).save_png(&src).unwrap();
        let adapter = ExternalAdapter::new(dir.path().join("exchange"));
        assert!(matches!(external_detect(&adapter, &src), Err(DetectorError::Timeout(..))));
        std::fs::write(
            adapter.detections_path(&src),
            r#"[{"box":[0,0,2,2],"score":0.4,"class_id":2}]"#,
        )
        .unwrap();
        assert_eq!(external_detect(&adapter, &src).unwrap().len(), 1);
        assert!(dir.path().join("exchange/frame.png").exists());
    }

    #[test]
    fn model_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(vec![[6, 6]], 3, true, 9);
        m.save(dir.path().join("m.json")).unwrap();
        assert_eq!(ToyDetectorModel::<f64>::load(dir.path().join("m.json")).unwrap(), m);
    }
}
