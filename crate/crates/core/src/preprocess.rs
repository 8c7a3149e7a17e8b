//! Per-slice preprocessing: window extraction, resizing, min-max
//! normalisation, label remapping and one-hot encoding.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use thiserror::Error;

use crate::volume_io::{self, CaseRef, LabelVolume, Modality, VolumeError};

/// Number of segmentation classes after remapping (background, NCR/NET, ED, ET).
pub const NUM_CLASSES: usize = 4;

/// Default model input size.
pub const DEFAULT_SIZE: (usize, usize) = (128, 128);

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("slice window {start}..{end} does not fit a volume of depth {depth}")]
    WindowOutOfBounds { start: usize, end: usize, depth: usize },
    #[error("slice index {index} lies outside window {start}..{end}")]
    IndexOutsideWindow { index: usize, start: usize, end: usize },
    #[error("invalid resize target {0:?}")]
    InvalidTarget((usize, usize)),
    #[error("empty slice")]
    EmptySlice,
    #[error("invalid label value {0} (allowed: 0, 1, 2, 4)")]
    InvalidLabel(i64),
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("case {case_id}: in-plane shape {found:?} of {what} differs from {expected:?}")]
    ShapeMismatch {
        case_id: String,
        what: String,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Contiguous range of axial slices taken from each volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceWindow {
    pub start: usize,
    pub length: usize,
}

impl Default for SliceWindow {
    /// 100 slices starting at 22, centred in a 155-slice volume.
    fn default() -> Self {
        SliceWindow { start: 22, length: 100 }
    }
}

impl SliceWindow {
    pub fn new(start: usize, length: usize) -> Self {
        SliceWindow { start, length }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices().contains(&index)
    }

    pub fn check_fits(&self, depth: usize) -> Result<(), PreprocessError> {
        if self.length == 0 || self.end() > depth {
            return Err(PreprocessError::WindowOutOfBounds {
                start: self.start,
                end: self.end(),
                depth,
            });
        }
        Ok(())
    }
}

/// How a slice is interpolated when resized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Bilinear, for intensities.
    Continuous,
    /// Nearest neighbour, for labels.
    Label,
}

/// Returns the axial slices `window.start..window.end()` of a `[x, y, slice]` grid.
pub fn extract_slices<T: Clone>(
    volume: ArrayView3<'_, T>,
    window: SliceWindow,
) -> Result<Vec<Array2<T>>, PreprocessError> {
    window.check_fits(volume.len_of(Axis(2)))?;
    Ok(window
        .indices()
        .map(|z| volume.index_axis(Axis(2), z).to_owned())
        .collect())
}

/// Source coordinate of output pixel `i` when mapping `src` pixels onto `dst`
/// pixels with pixel centres aligned.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    x.min(src - 1)
}

/// Resizes a slice to `target`. Label mode only ever copies input values.
pub fn resize_slice<T>(
    slice: ArrayView2<'_, T>,
    target: (usize, usize),
    mode: ResizeMode,
) -> Result<Array2<T>, PreprocessError>
where
    T: Copy + Into<f64> + FromF64,
{
    let (h, w) = slice.dim();
    if h == 0 || w == 0 {
        return Err(PreprocessError::EmptySlice);
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(PreprocessError::InvalidTarget(target));
    }
    let (th, tw) = target;
    let out = match mode {
        ResizeMode::Label => Array2::from_shape_fn(target, |(i, j)| {
            slice[[nearest_index(i, h, th), nearest_index(j, w, tw)]]
        }),
        ResizeMode::Continuous => {
            let axis = |n: usize, src: usize, dst: usize| -> (usize, usize, f64) {
                let x = source_coord(n, src, dst).clamp(0.0, (src - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, x - lo as f64)
            };
            Array2::from_shape_fn(target, |(i, j)| {
                let (y0, y1, fy) = axis(i, h, th);
                let (x0, x1, fx) = axis(j, w, tw);
                let v = |y: usize, x: usize| -> f64 { slice[[y, x]].into() };
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                T::from_f64(top * (1.0 - fy) + bottom * fy)
            })
        }
    };
    Ok(out)
}

/// Conversion back from the interpolation domain.
pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for u8 {
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// `(x - min) / (max - min)`; a constant slice maps to zeros.
pub fn normalize_minmax(slice: ArrayView2<'_, f64>) -> Array2<f64> {
    let (min, max) = slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return Array2::zeros(slice.dim());
    }
    slice.mapv(|v| ((v - min) / range).clamp(0.0, 1.0))
}

/// Maps BraTS labels {0, 1, 2, 4} onto contiguous classes {0, 1, 2, 3}.
pub fn remap_labels(labels: ArrayView2<'_, u8>) -> Result<Array2<u8>, PreprocessError> {
    let mut out = Array2::zeros(labels.dim());
    for (dst, &v) in out.iter_mut().zip(labels.iter()) {
        *dst = match v {
            0..=2 => v,
            4 => 3,
            other => return Err(PreprocessError::InvalidLabel(other as i64)),
        };
    }
    Ok(out)
}

/// Inverse of [`remap_labels`]: class 3 becomes label 4.
pub fn inverse_remap(classes: ArrayView2<'_, u8>) -> Result<Array2<u8>, PreprocessError> {
    let mut out = Array2::zeros(classes.dim());
    for (dst, &c) in out.iter_mut().zip(classes.iter()) {
        *dst = match c {
            0..=2 => c,
            3 => 4,
            other => {
                return Err(PreprocessError::ClassOutOfRange {
                    class: other as usize,
                    num_classes: NUM_CLASSES,
                })
            }
        };
    }
    Ok(out)
}

/// `(h, w, num_classes)` indicator array with `out[y, x, c] = 1` iff `labels[y, x] == c`.
pub fn one_hot(labels: ArrayView2<'_, u8>, num_classes: usize) -> Result<Array3<f64>, PreprocessError> {
    let (h, w) = labels.dim();
    let mut out = Array3::zeros((h, w, num_classes));
    for ((y, x), &c) in labels.indexed_iter() {
        let c = c as usize;
        if c >= num_classes {
            return Err(PreprocessError::ClassOutOfRange { class: c, num_classes });
        }
        out[[y, x, c]] = 1.0;
    }
    Ok(out)
}

/// Settings of the per-slice chain shared by training, evaluation and inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub size: (usize, usize),
    pub window: SliceWindow,
    /// Input channels, in order.
    pub modalities: Vec<Modality>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            size: DEFAULT_SIZE,
            window: SliceWindow::default(),
            modalities: vec![Modality::Flair, Modality::T1ce],
        }
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `(h, w, channels)` in `[0, 1]`.
    pub input: Array3<f64>,
    /// `(h, w, NUM_CLASSES)` one-hot.
    pub target: Array3<f64>,
    pub case_id: String,
    pub slice_index: usize,
}

/// Input channels of one slice: resized, then min-max normalised.
pub fn prepare_input(
    volumes: &[Array2<f64>],
    size: (usize, usize),
) -> Result<Array3<f64>, PreprocessError> {
    let mut input = Array3::zeros((size.0, size.1, volumes.len()));
    for (c, slice) in volumes.iter().enumerate() {
        let resized = resize_slice(slice.view(), size, ResizeMode::Continuous)?;
        input
            .slice_mut(s![.., .., c])
            .assign(&normalize_minmax(resized.view()));
    }
    Ok(input)
}

/// One-hot target of one label slice: nearest-neighbour resize, remap, encode.
pub fn prepare_target(
    labels: ArrayView2<'_, u8>,
    size: (usize, usize),
) -> Result<Array3<f64>, PreprocessError> {
    let resized = resize_slice(labels, size, ResizeMode::Label)?;
    one_hot(remap_labels(resized.view())?.view(), NUM_CLASSES)
}

/// Volumes of one case held in memory so successive slices avoid re-reading files.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub case_id: String,
    pub inputs: Vec<volume_io::Volume>,
    pub labels: Option<LabelVolume>,
}

impl LoadedCase {
    /// Loads the configured modalities and, when `with_labels`, the segmentation.
    pub fn load(
        case: &CaseRef,
        config: &PreprocessConfig,
        with_labels: bool,
    ) -> Result<Self, PreprocessError> {
        let inputs = config
            .modalities
            .iter()
            .map(|&m| volume_io::load_modality(case, m))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = if with_labels {
            Some(volume_io::load_segmentation(case)?)
        } else {
            None
        };
        let loaded = LoadedCase {
            case_id: case.case_id.clone(),
            inputs,
            labels,
        };
        loaded.check_shapes()?;
        Ok(loaded)
    }

    fn check_shapes(&self) -> Result<(), PreprocessError> {
        let Some(first) = self.inputs.first() else {
            return Ok(());
        };
        let expected = first.shape();
        let others = self
            .inputs
            .iter()
            .map(|v| (v.modality.to_string(), v.shape()))
            .chain(self.labels.iter().map(|l| ("segmentation".to_string(), l.shape())));
        for (what, found) in others {
            if found != expected {
                return Err(PreprocessError::ShapeMismatch {
                    case_id: self.case_id.clone(),
                    what,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.inputs
            .first()
            .map(|v| v.shape())
            .or_else(|| self.labels.as_ref().map(|l| l.shape()))
            .unwrap_or((0, 0, 0))
    }

    /// Preprocessed input channels of slice `index`.
    pub fn input_slice(&self, index: usize, size: (usize, usize)) -> Result<Array3<f64>, PreprocessError> {
        let depth = self.shape().2;
        SliceWindow::new(index, 1).check_fits(depth)?;
        let raw: Vec<Array2<f64>> = self
            .inputs
            .iter()
            .map(|v| v.data.index_axis(Axis(2), index).mapv(f64::from))
            .collect();
        prepare_input(&raw, size)
    }

    /// Full sample for slice `index`; requires labels to be loaded.
    pub fn sample(
        &self,
        index: usize,
        config: &PreprocessConfig,
    ) -> Result<SliceSample, PreprocessError> {
        if !config.window.contains(index) {
            return Err(PreprocessError::IndexOutsideWindow {
                index,
                start: config.window.start,
                end: config.window.end(),
            });
        }
        config.window.check_fits(self.shape().2)?;
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| VolumeError::SegmentationMissing(self.case_id.clone()))?;
        let input = self.input_slice(index, config.size)?;
        let target = prepare_target(labels.data().index_axis(Axis(2), index), config.size)?;
        Ok(SliceSample {
            input,
            target,
            case_id: self.case_id.clone(),
            slice_index: index,
        })
    }
}

/// Loads `case` and builds the sample for `slice_index`.
pub fn build_sample(
    case: &CaseRef,
    slice_index: usize,
    config: &PreprocessConfig,
) -> Result<SliceSample, PreprocessError> {
    LoadedCase::load(case, config, true)?.sample(slice_index, config)
}
