//! Segmentation metrics: confusion counts, Dice, IoU, pixel-level ratios and
//! categorical cross-entropy.
//!
//! All functions take channels-last arrays of any rank whose last axis holds
//! the class channels. Ratios whose numerator and denominator are both zero
//! score 1, so classes that are absent and never predicted count as perfect.

use ndarray::{ArrayView, ArrayView2, CowArray, Dimension, Ix2};
use thiserror::Error;

/// Smoothing constant for Dice.
pub const DICE_EPS: f64 = 1e-6;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Channel indices of the tumour sub-regions after label remapping.
pub const NECROTIC: usize = 1;
pub const EDEMA: usize = 2;
pub const ENHANCING: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: target {target:?} vs prediction {prediction:?}")]
    ShapeMismatch { target: Vec<usize>, prediction: Vec<usize> },
    #[error("target is not one-hot at pixel {0}")]
    InvalidTarget(usize),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
}

/// How probabilities become hard predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// One class per pixel; ties go to the lowest index.
    Argmax,
    /// Each channel independently positive when `p >= t`.
    Threshold(f64),
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Per-class confusion counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            classes: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.add(b);
        }
    }

    /// Counts summed over the given classes.
    pub fn summed<I: IntoIterator<Item = usize>>(&self, classes: I) -> ClassCounts {
        let mut total = ClassCounts::default();
        for c in classes {
            total.add(&self.classes[c]);
        }
        total
    }

    pub fn summed_all(&self) -> ClassCounts {
        self.summed(0..self.classes.len())
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn as_pixels<'a, D: Dimension>(a: &'a ArrayView<'a, f64, D>) -> CowArray<'a, f64, Ix2> {
    let k = a.shape().last().copied().unwrap_or(0);
    let n = a.len().checked_div(k).unwrap_or(0);
    a.to_shape((n, k)).expect("reshape to (pixels, classes)")
}

fn check_shapes<D: Dimension>(
    target: &ArrayView<'_, f64, D>,
    probs: &ArrayView<'_, f64, D>,
) -> Result<(), MetricError> {
    if target.shape() != probs.shape() || target.ndim() == 0 {
        return Err(MetricError::ShapeMismatch {
            target: target.shape().to_vec(),
            prediction: probs.shape().to_vec(),
        });
    }
    Ok(())
}

fn target_class(row: ndarray::ArrayView1<'_, f64>, pixel: usize) -> Result<usize, MetricError> {
    let mut class = None;
    for (c, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if class.is_some() {
                return Err(MetricError::InvalidTarget(pixel));
            }
            class = Some(c);
        } else if v != 0.0 {
            return Err(MetricError::InvalidTarget(pixel));
        }
    }
    class.ok_or(MetricError::InvalidTarget(pixel))
}

/// Index of the largest channel; the first maximum wins.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Argmax decisions as a one-hot array of the same shape.
pub fn hard_one_hot<D: Dimension>(probs: ArrayView<'_, f64, D>) -> ndarray::Array<f64, D> {
    let mut out = ndarray::Array::zeros(probs.raw_dim());
    let k = probs.shape().last().copied().unwrap_or(0);
    if k == 0 {
        return out;
    }
    let flat = as_pixels(&probs);
    let dst = out.as_slice_mut().expect("fresh array");
    for (i, row) in flat.rows().into_iter().enumerate() {
        dst[i * k + argmax(row)] = 1.0;
    }
    out
}

pub fn confusion_counts<D: Dimension>(
    target: ArrayView<'_, f64, D>,
    probs: ArrayView<'_, f64, D>,
    decision: Decision,
) -> Result<ConfusionCounts, MetricError> {
    check_shapes(&target, &probs)?;
    let t = as_pixels(&target);
    let p = as_pixels(&probs);
    let k = t.ncols();
    let mut counts = ConfusionCounts::new(k);
    for (i, (trow, prow)) in t.rows().into_iter().zip(p.rows()).enumerate() {
        let truth = target_class(trow, i)?;
        match decision {
            Decision::Argmax => {
                let pred = argmax(prow);
                for (c, cc) in counts.classes.iter_mut().enumerate() {
                    match (truth == c, pred == c) {
                        (true, true) => cc.tp += 1,
                        (false, true) => cc.fp += 1,
                        (true, false) => cc.fn_ += 1,
                        (false, false) => cc.tn += 1,
                    }
                }
            }
            Decision::Threshold(th) => {
                for (c, cc) in counts.classes.iter_mut().enumerate() {
                    match (truth == c, prow[c] >= th) {
                        (true, true) => cc.tp += 1,
                        (false, true) => cc.fp += 1,
                        (true, false) => cc.fn_ += 1,
                        (false, false) => cc.tn += 1,
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Channels a Dice score is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    /// Every channel, pooled.
    All,
    Necrotic,
    Edema,
    Enhancing,
}

impl ClassFilter {
    fn channels(self, num_classes: usize) -> std::ops::Range<usize> {
        match self {
            ClassFilter::All => 0..num_classes,
            ClassFilter::Necrotic => NECROTIC..NECROTIC + 1,
            ClassFilter::Edema => EDEMA..EDEMA + 1,
            ClassFilter::Enhancing => ENHANCING..ENHANCING + 1,
        }
    }
}

/// Running sums behind the soft Dice: `sum(t * p)`, `sum(t^2)`, `sum(p^2)` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDiceSums {
    pub intersection: Vec<f64>,
    pub target_sq: Vec<f64>,
    pub pred_sq: Vec<f64>,
}

impl SoftDiceSums {
    pub fn new(num_classes: usize) -> Self {
        SoftDiceSums {
            intersection: vec![0.0; num_classes],
            target_sq: vec![0.0; num_classes],
            pred_sq: vec![0.0; num_classes],
        }
    }

    fn accumulate(&mut self, t: &ArrayView2<'_, f64>, p: &ArrayView2<'_, f64>) {
        for (trow, prow) in t.rows().into_iter().zip(p.rows()) {
            for c in 0..trow.len() {
                let (tv, pv) = (trow[c], prow[c]);
                self.intersection[c] += tv * pv;
                self.target_sq[c] += tv * tv;
                self.pred_sq[c] += pv * pv;
            }
        }
    }

    pub fn dice(&self, filter: ClassFilter, eps: f64) -> f64 {
        let ch = filter.channels(self.intersection.len());
        let inter: f64 = self.intersection[ch.clone()].iter().sum();
        let tsq: f64 = self.target_sq[ch.clone()].iter().sum();
        let psq: f64 = self.pred_sq[ch].iter().sum();
        (2.0 * inter + eps) / (tsq + psq + eps)
    }
}

/// Soft Dice `(2 sum(t p) + eps) / (sum(t^2) + sum(p^2) + eps)` over the filtered channels.
pub fn dice<D: Dimension>(
    target: ArrayView<'_, f64, D>,
    probs: ArrayView<'_, f64, D>,
    filter: ClassFilter,
    eps: f64,
) -> Result<f64, MetricError> {
    check_shapes(&target, &probs)?;
    let t = as_pixels(&target);
    let p = as_pixels(&probs);
    let mut sums = SoftDiceSums::new(t.ncols());
    sums.accumulate(&t.view(), &p.view());
    Ok(sums.dice(filter, eps))
}

/// Hard Dice `(2 TP + eps) / (2 TP + FP + FN + eps)` from argmax counts.
pub fn hard_dice(counts: &ConfusionCounts, filter: ClassFilter, eps: f64) -> f64 {
    let c = counts.summed(filter.channels(counts.classes.len()));
    (2.0 * c.tp as f64 + eps) / ((2 * c.tp + c.fp + c.fn_) as f64 + eps)
}

/// Per-class IoU `TP / (TP + FP + FN)`, 1 for an empty union.
pub fn class_iou(c: &ClassCounts) -> f64 {
    ratio(c.tp as f64, (c.tp + c.fp + c.fn_) as f64)
}

pub fn mean_iou_from_counts(counts: &ConfusionCounts) -> f64 {
    let k = counts.classes.len();
    counts.classes.iter().map(class_iou).sum::<f64>() / k as f64
}

/// Mean over classes of the argmax-decided IoU.
pub fn mean_iou<D: Dimension>(target: ArrayView<'_, f64, D>, probs: ArrayView<'_, f64, D>) -> Result<f64, MetricError> {
    Ok(mean_iou_from_counts(&confusion_counts(target, probs, Decision::Argmax)?))
}

/// Micro-averaged pixel ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn pixel_metrics(counts: &ConfusionCounts) -> PixelMetrics {
    let c = counts.summed_all();
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    PixelMetrics {
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        precision: ratio(tp, tp + fp),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    }
}

/// Sum over pixels of `-sum_c t_c ln(clip(p_c))`.
fn cross_entropy_sum(t: &ArrayView2<'_, f64>, p: &ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for (trow, prow) in t.rows().into_iter().zip(p.rows()) {
        for (tv, pv) in trow.iter().zip(prow.iter()) {
            if *tv != 0.0 {
                total -= tv * pv.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln();
            }
        }
    }
    total
}

/// Mean per-pixel categorical cross-entropy.
pub fn categorical_cross_entropy<D: Dimension>(
    target: ArrayView<'_, f64, D>,
    probs: ArrayView<'_, f64, D>,
) -> Result<f64, MetricError> {
    check_shapes(&target, &probs)?;
    let t = as_pixels(&target);
    let p = as_pixels(&probs);
    Ok(ratio(cross_entropy_sum(&t.view(), &p.view()), t.nrows() as f64).max(0.0))
}

/// Column names of [`MetricValues`], in the fixed report order.
pub const METRIC_NAMES: [&str; 10] = [
    "loss",
    "accuracy",
    "mean_iou",
    "precision",
    "sensitivity",
    "specificity",
    "dice",
    "dice_necrotic",
    "dice_edema",
    "dice_enhancing",
];

/// The ten reported quantities for one dataset partition.
///
/// `accuracy` is the fraction of pixels whose argmax class matches the
/// target; `precision`, `sensitivity` and `specificity` are micro-averaged
/// over classes with each channel thresholded at 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricValues {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub dice: f64,
    pub dice_necrotic: f64,
    pub dice_edema: f64,
    pub dice_enhancing: f64,
}

impl MetricValues {
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.loss,
            self.accuracy,
            self.mean_iou,
            self.precision,
            self.sensitivity,
            self.specificity,
            self.dice,
            self.dice_necrotic,
            self.dice_edema,
            self.dice_enhancing,
        ]
    }

    pub fn from_array(v: [f64; 10]) -> Self {
        MetricValues {
            loss: v[0],
            accuracy: v[1],
            mean_iou: v[2],
            precision: v[3],
            sensitivity: v[4],
            specificity: v[5],
            dice: v[6],
            dice_necrotic: v[7],
            dice_edema: v[8],
            dice_enhancing: v[9],
        }
    }

    pub fn get(&self, name: &str) -> Result<f64, MetricError> {
        METRIC_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.to_array()[i])
            .ok_or_else(|| MetricError::UnknownMetric(name.to_string()))
    }
}

/// Whether Dice values are computed from probabilities or argmax decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceMode {
    Soft,
    Hard,
}

impl DiceMode {
    pub fn name(self) -> &'static str {
        match self {
            DiceMode::Soft => "soft",
            DiceMode::Hard => "hard",
        }
    }
}

impl std::str::FromStr for DiceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "soft" => Ok(DiceMode::Soft),
            "hard" => Ok(DiceMode::Hard),
            other => Err(format!("unknown decision mode '{other}' (expected soft or hard)")),
        }
    }
}

/// Pixel-pooled accumulation of every metric across batches.
///
/// Counts are integers and the floating sums are added batch by batch in the
/// order batches arrive.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    pub argmax: ConfusionCounts,
    pub threshold: ConfusionCounts,
    pub soft: SoftDiceSums,
    pub cross_entropy: f64,
    pub pixels: u64,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize) -> Self {
        MetricAccumulator {
            argmax: ConfusionCounts::new(num_classes),
            threshold: ConfusionCounts::new(num_classes),
            soft: SoftDiceSums::new(num_classes),
            cross_entropy: 0.0,
            pixels: 0,
        }
    }

    pub fn add<D: Dimension>(
        &mut self,
        target: ArrayView<'_, f64, D>,
        probs: ArrayView<'_, f64, D>,
    ) -> Result<(), MetricError> {
        let argmax = confusion_counts(target.view(), probs.view(), Decision::Argmax)?;
        let threshold = confusion_counts(target.view(), probs.view(), Decision::Threshold(0.5))?;
        let t = as_pixels(&target);
        let p = as_pixels(&probs);
        self.argmax.merge(&argmax);
        self.threshold.merge(&threshold);
        self.soft.accumulate(&t.view(), &p.view());
        self.cross_entropy += cross_entropy_sum(&t.view(), &p.view());
        self.pixels += t.nrows() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.argmax.merge(&other.argmax);
        self.threshold.merge(&other.threshold);
        for c in 0..self.soft.intersection.len() {
            self.soft.intersection[c] += other.soft.intersection[c];
            self.soft.target_sq[c] += other.soft.target_sq[c];
            self.soft.pred_sq[c] += other.soft.pred_sq[c];
        }
        self.cross_entropy += other.cross_entropy;
        self.pixels += other.pixels;
    }

    pub fn dice_values(&self, mode: DiceMode) -> [f64; 4] {
        let filters = [ClassFilter::All, ClassFilter::Necrotic, ClassFilter::Edema, ClassFilter::Enhancing];
        filters.map(|f| match mode {
            DiceMode::Soft => self.soft.dice(f, DICE_EPS),
            DiceMode::Hard => hard_dice(&self.argmax, f, DICE_EPS),
        })
    }

    /// Hard Dice of one channel.
    pub fn hard_class_dice(&self, class: usize) -> f64 {
        let c = &self.argmax.classes[class];
        (2.0 * c.tp as f64 + DICE_EPS) / ((2 * c.tp + c.fp + c.fn_) as f64 + DICE_EPS)
    }

    pub fn finalize(&self, mode: DiceMode) -> MetricValues {
        let px = pixel_metrics(&self.threshold);
        let [dice, necrotic, edema, enhancing] = self.dice_values(mode);
        let correct: u64 = self.argmax.classes.iter().map(|c| c.tp).sum();
        MetricValues {
            loss: ratio(self.cross_entropy, self.pixels as f64).max(0.0),
            accuracy: ratio(correct as f64, self.pixels as f64),
            mean_iou: mean_iou_from_counts(&self.argmax),
            precision: px.precision,
            sensitivity: px.sensitivity,
            specificity: px.specificity,
            dice,
            dice_necrotic: necrotic,
            dice_edema: edema,
            dice_enhancing: enhancing,
        }
    }
}
