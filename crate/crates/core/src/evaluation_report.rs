//! Dataset-level evaluation, comparison tables and whole-volume prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use thiserror::Error;

use crate::data_pipeline::{BatchGenerator, Partition, PipelineError, SliceId};
use crate::metrics::{self, DiceMode, MetricAccumulator, MetricError, MetricValues, METRIC_NAMES};
use crate::preprocess::{self, LoadedCase, PreprocessConfig, PreprocessError, ResizeMode, NUM_CLASSES};
use crate::unet::{ModelError, Segmenter};
use crate::volume_io::{self, CaseRef, LabelVolume, VolumeError};

/// Slices per forward pass during whole-volume prediction.
const PREDICT_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no cases to evaluate")]
    NoCases,
    #[error("reports disagree on {0}; columns are not comparable")]
    InconsistentColumns(String),
    #[error("segmenter output for {slice}: expected shape {expected:?}, found {found:?}")]
    OutputShape {
        slice: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Data(#[from] PipelineError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("could not write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Evaluation summary of one partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dataset_label: String,
    pub partition: Partition,
    /// Dice columns follow `decision_mode`.
    pub values: MetricValues,
    /// Soft Dice (all, necrotic, edema, enhancing), reported whatever the mode.
    pub soft_dice: [f64; 4],
    pub n_cases: usize,
    pub n_slices: usize,
    pub decision_mode: DiceMode,
}

fn slice_name(id: Option<&SliceId>) -> String {
    id.map(|p| format!("{} slice {}", p.case_id, p.slice_index))
        .unwrap_or_default()
}

/// Streams every window slice of `cases` through `segmenter` in case-id order,
/// pooling metrics over all pixels. Returns the accumulator and slice count.
pub fn accumulate<S: Segmenter + ?Sized>(
    segmenter: &S,
    cases: &[CaseRef],
    config: &PreprocessConfig,
    batch_size: usize,
) -> Result<(MetricAccumulator, usize), EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let mut sorted = cases.to_vec();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut acc = MetricAccumulator::new(NUM_CLASSES);
    let mut slices = 0;
    for batch in BatchGenerator::new(&sorted, config, batch_size, false, 0)? {
        let batch = batch?;
        let probs = segmenter.segment(batch.inputs.view(), &batch.provenance)?;
        if probs.shape() != batch.targets.shape() {
            return Err(EvalError::OutputShape {
                slice: slice_name(batch.provenance.first()),
                expected: batch.targets.shape().to_vec(),
                found: probs.shape().to_vec(),
            });
        }
        acc.add(batch.targets.view(), probs.view())?;
        slices += batch.len();
    }
    Ok((acc, slices))
}

/// Evaluates `segmenter` on `cases` without shuffling.
pub fn evaluate<S: Segmenter + ?Sized>(
    segmenter: &S,
    cases: &[CaseRef],
    config: &PreprocessConfig,
    dataset_label: &str,
    partition: Partition,
    decision_mode: DiceMode,
    batch_size: usize,
) -> Result<MetricsReport, EvalError> {
    let (acc, n_slices) = accumulate(segmenter, cases, config, batch_size)?;
    Ok(MetricsReport {
        dataset_label: dataset_label.to_string(),
        partition,
        values: acc.finalize(decision_mode),
        soft_dice: acc.dice_values(DiceMode::Soft),
        n_cases: cases.len(),
        n_slices,
        decision_mode,
    })
}

const SOFT_DICE_COLUMNS: [&str; 4] = [
    "soft_dice",
    "soft_dice_necrotic",
    "soft_dice_edema",
    "soft_dice_enhancing",
];

/// Header of the machine-readable report rows.
pub fn report_columns() -> Vec<&'static str> {
    let mut cols = vec!["dataset", "partition", "decision_mode", "n_cases", "n_slices"];
    cols.extend(METRIC_NAMES);
    cols.extend(SOFT_DICE_COLUMNS);
    cols
}

fn report_row(r: &MetricsReport) -> Vec<String> {
    let mut row = vec![
        r.dataset_label.clone(),
        r.partition.name().to_string(),
        r.decision_mode.name().to_string(),
        r.n_cases.to_string(),
        r.n_slices.to_string(),
    ];
    row.extend(r.values.to_array().iter().map(|v| v.to_string()));
    row.extend(r.soft_dice.iter().map(|v| v.to_string()));
    row
}

/// Reports as CSV text, one row per report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = report_columns().join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&report_row(r).join(","));
        out.push('\n');
    }
    out
}

pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), EvalError> {
    fs::write(path, reports_to_csv(reports)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Human-readable summary of one report.
pub fn render_report(r: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} / {} ({} cases, {} slices, {} dice)",
        r.dataset_label,
        r.partition.name(),
        r.n_cases,
        r.n_slices,
        r.decision_mode.name()
    );
    for (name, v) in METRIC_NAMES.iter().zip(r.values.to_array()) {
        let _ = writeln!(out, "  {name:<20} {v:.6}");
    }
    for (name, v) in SOFT_DICE_COLUMNS.iter().zip(r.soft_dice) {
        let _ = writeln!(out, "  {name:<20} {v:.6}");
    }
    out
}

/// Reports side by side with the best entry of each metric flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub reports: Vec<MetricsReport>,
    /// `best[row][col]` over [`METRIC_NAMES`]; highest wins except for loss.
    pub best: Vec<[bool; 10]>,
}

/// Aligns reports that share a decision mode.
pub fn compare_reports(reports: &[MetricsReport]) -> Result<ComparisonTable, EvalError> {
    let Some(first) = reports.first() else {
        return Err(EvalError::NoCases);
    };
    if let Some(other) = reports.iter().find(|r| r.decision_mode != first.decision_mode) {
        return Err(EvalError::InconsistentColumns(format!(
            "decision mode ({} vs {})",
            first.decision_mode.name(),
            other.decision_mode.name()
        )));
    }
    let mut best = vec![[false; 10]; reports.len()];
    for (col, name) in METRIC_NAMES.iter().enumerate() {
        let values: Vec<f64> = reports.iter().map(|r| r.values.to_array()[col]).collect();
        let target = if *name == "loss" {
            values.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        for (row, v) in values.iter().enumerate() {
            best[row][col] = *v == target;
        }
    }
    Ok(ComparisonTable {
        reports: reports.to_vec(),
        best,
    })
}

impl ComparisonTable {
    /// Fixed-width text table; best entries carry a trailing `*`.
    pub fn render_text(&self) -> String {
        let label = |r: &MetricsReport| format!("{}/{}", r.dataset_label, r.partition.name());
        let width = self
            .reports
            .iter()
            .map(|r| label(r).len())
            .max()
            .unwrap_or(0)
            .max("dataset".len());
        let mut out = format!("{:<width$}", "dataset");
        for name in METRIC_NAMES {
            let _ = write!(out, " {name:>15}");
        }
        out.push('\n');
        for (r, flags) in self.reports.iter().zip(&self.best) {
            let _ = write!(out, "{:<width$}", label(r));
            for (v, flag) in r.values.to_array().iter().zip(flags) {
                let cell = format!("{v:.4}{}", if *flag { "*" } else { " " });
                let _ = write!(out, " {cell:>15}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        reports_to_csv(&self.reports)
    }
}

/// Segments every window slice of `case` and returns a label volume at the
/// native resolution in the original label encoding. Slices outside the
/// window are background.
pub fn predict_case<S: Segmenter + ?Sized>(
    segmenter: &S,
    case: &CaseRef,
    config: &PreprocessConfig,
) -> Result<LabelVolume, EvalError> {
    let loaded = LoadedCase::load(case, config, false)?;
    let (h, w, d) = loaded.shape();
    config.window.check_fits(d)?;
    let (sh, sw) = config.size;
    let mut out = Array3::<u8>::zeros((h, w, d));
    let indices: Vec<usize> = config.window.indices().collect();
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let mut inputs = Array4::zeros((chunk.len(), sh, sw, config.modalities.len()));
        let mut provenance = Vec::with_capacity(chunk.len());
        for (b, &z) in chunk.iter().enumerate() {
            inputs
                .slice_mut(s![b, .., .., ..])
                .assign(&loaded.input_slice(z, config.size)?);
            provenance.push(SliceId {
                case_id: case.case_id.clone(),
                slice_index: z,
            });
        }
        let probs = segmenter.segment(inputs.view(), &provenance)?;
        let expected = [chunk.len(), sh, sw, NUM_CLASSES];
        if probs.shape() != expected {
            return Err(EvalError::OutputShape {
                slice: slice_name(provenance.first()),
                expected: expected.to_vec(),
                found: probs.shape().to_vec(),
            });
        }
        for (b, &z) in chunk.iter().enumerate() {
            let p = probs.index_axis(Axis(0), b);
            let classes =
                Array2::from_shape_fn((sh, sw), |(i, j)| metrics::argmax(p.slice(s![i, j, ..])) as u8);
            let labels = preprocess::inverse_remap(classes.view())?;
            let native = preprocess::resize_slice(labels.view(), (h, w), ResizeMode::Label)?;
            out.slice_mut(s![.., .., z]).assign(&native);
        }
    }
    Ok(LabelVolume::new(out)?)
}

/// Path of the prediction file for `case_id` inside `out_dir`.
pub fn prediction_path(out_dir: &Path, case_id: &str) -> PathBuf {
    out_dir.join(format!("{case_id}_pred.nii.gz"))
}

/// Writes `labels` as `<case_id>_pred.nii.gz` and returns its path.
pub fn write_prediction(out_dir: &Path, case_id: &str, labels: &LabelVolume) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path = prediction_path(out_dir, case_id);
    volume_io::write_labels(&path, labels)?;
    Ok(path)
}

/// Voxel count of each label in {0, 1, 2, 4}.
pub fn label_counts(labels: &LabelVolume) -> [(u8, usize); 4] {
    volume_io::VALID_LABELS.map(|l| (l, labels.data().iter().filter(|&&v| v == l).count()))
}
