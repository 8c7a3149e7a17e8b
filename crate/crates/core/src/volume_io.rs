//! Discovery and loading of BraTS-layout cases.
//!
//! A dataset root holds one directory per case, and each case directory holds
//! NIfTI-1 files named `<case_id>_<suffix>.nii` or `<case_id>_<suffix>.nii.gz`
//! where the suffix is one of `flair`, `t1`, `t1ce`, `t2` or `seg`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Zip};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use nifti::writer::WriterOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Label values that may appear in a BraTS segmentation.
pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

/// Slices per volume in genuine BraTS cases.
pub const BRATS_DEPTH: usize = 155;

/// Standard in-plane size of BraTS volumes.
pub const BRATS_IN_PLANE: usize = 240;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no cases found under {0}")]
    EmptyDataset(PathBuf),
    #[error("case {case_id} has no {modality} volume")]
    ModalityMissing { case_id: String, modality: Modality },
    #[error("case {0} has no segmentation")]
    SegmentationMissing(String),
    #[error("invalid label value {0} (allowed: 0, 1, 2, 4)")]
    InvalidLabel(i64),
    #[error("corrupt volume file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("invalid synthetic shape {0:?}: every dimension must be at least 8")]
    InvalidShape((usize, usize, usize)),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// MRI sequence of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Flair,
    T1,
    T1ce,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1ce, Modality::T2];

    /// File-name suffix used by the BraTS distributions.
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T1ce => "T1CE",
            Modality::T2 => "T2",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1" => Ok(Modality::T1),
            "t1ce" => Ok(Modality::T1ce),
            "t2" => Ok(Modality::T2),
            other => Err(format!("unknown modality '{other}'")),
        }
    }
}

/// A case found on disk, with the resolved path of every file it provides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRef {
    pub case_id: String,
    pub root_path: PathBuf,
    modalities: BTreeMap<Modality, PathBuf>,
    segmentation: Option<PathBuf>,
}

impl CaseRef {
    pub fn available_modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.modalities.keys().copied()
    }

    pub fn has_modality(&self, modality: Modality) -> bool {
        self.modalities.contains_key(&modality)
    }

    pub fn has_segmentation(&self) -> bool {
        self.segmentation.is_some()
    }

    pub fn modality_path(&self, modality: Modality) -> Option<&Path> {
        self.modalities.get(&modality).map(PathBuf::as_path)
    }

    pub fn segmentation_path(&self) -> Option<&Path> {
        self.segmentation.as_deref()
    }

    /// Scans a single case directory. Returns `None` when it holds no
    /// recognised modality file.
    pub fn from_dir(dir: &Path) -> Result<Option<CaseRef>, VolumeError> {
        let case_id = match dir.file_name().and_then(|n| n.to_str()) {
            Some(name) if !name.is_empty() => name.to_string(),
            _ => return Ok(None),
        };
        let entries = fs::read_dir(dir).map_err(|source| VolumeError::IoFailure {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut modalities = BTreeMap::new();
        let mut segmentation = None;
        for entry in entries {
            let entry = entry.map_err(|source| VolumeError::IoFailure {
                path: dir.to_path_buf(),
                source,
            })?;
            let path = entry.path();
            if !path.is_file() {
                continue;
            }
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            match parse_file_suffix(&case_id, name) {
                Some(FileKind::Modality(m)) => {
                    modalities.entry(m).or_insert(path);
                }
                Some(FileKind::Segmentation) => {
                    segmentation.get_or_insert(path);
                }
                None => {}
            }
        }
        if modalities.is_empty() {
            return Ok(None);
        }
        Ok(Some(CaseRef {
            case_id,
            root_path: dir.to_path_buf(),
            modalities,
            segmentation,
        }))
    }
}

enum FileKind {
    Modality(Modality),
    Segmentation,
}

fn parse_file_suffix(case_id: &str, file_name: &str) -> Option<FileKind> {
    let stem = file_name
        .strip_suffix(".nii.gz")
        .or_else(|| file_name.strip_suffix(".nii"))?;
    let suffix = stem.strip_prefix(case_id)?.strip_prefix('_')?;
    if suffix.eq_ignore_ascii_case("seg") {
        return Some(FileKind::Segmentation);
    }
    suffix.parse().ok().map(FileKind::Modality)
}

/// One modality's scalar grid, indexed `[x, y, slice]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub modality: Modality,
}

impl Volume {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn depth(&self) -> usize {
        self.data.dim().2
    }
}

/// Integer labels indexed `[x, y, slice]`, restricted to [`VALID_LABELS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u8>,
}

impl LabelVolume {
    /// Validates every value against the BraTS label set.
    pub fn new(data: Array3<u8>) -> Result<Self, VolumeError> {
        if let Some(&bad) = data.iter().find(|v| !VALID_LABELS.contains(v)) {
            return Err(VolumeError::InvalidLabel(bad as i64));
        }
        Ok(LabelVolume { data })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u8> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn depth(&self) -> usize {
        self.data.dim().2
    }
}

/// Lists every case under `root` in lexicographic `case_id` order.
pub fn discover_cases(root: &Path) -> Result<Vec<CaseRef>, VolumeError> {
    if !root.is_dir() {
        return Err(VolumeError::MissingRoot(root.to_path_buf()));
    }
    let entries = fs::read_dir(root).map_err(|source| VolumeError::IoFailure {
        path: root.to_path_buf(),
        source,
    })?;
    let mut cases = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| VolumeError::IoFailure {
            path: root.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.is_dir() {
            if let Some(case) = CaseRef::from_dir(&path)? {
                cases.push(case);
            }
        }
    }
    if cases.is_empty() {
        return Err(VolumeError::EmptyDataset(root.to_path_buf()));
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}

fn read_grid(path: &Path) -> Result<Array3<f32>, VolumeError> {
    let corrupt = |reason: String| VolumeError::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let object = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| corrupt(e.to_string()))?;
    let array = object
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| corrupt(e.to_string()))?;
    let array = match array.ndim() {
        3 => array,
        // Singleton trailing dimensions (e.g. a time axis of length 1) are tolerated.
        n if n > 3 && array.shape()[3..].iter().all(|&d| d == 1) => {
            let dims = array.shape()[..3].to_vec();
            array
                .into_shape_with_order(dims)
                .map_err(|e| corrupt(e.to_string()))?
        }
        n => return Err(corrupt(format!("expected a 3D volume, found {n} dimensions"))),
    };
    array
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| corrupt(e.to_string()))
}

pub fn load_modality(case: &CaseRef, modality: Modality) -> Result<Volume, VolumeError> {
    let path = case
        .modality_path(modality)
        .ok_or_else(|| VolumeError::ModalityMissing {
            case_id: case.case_id.clone(),
            modality,
        })?;
    let data = read_grid(path)?;
    if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(VolumeError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("intensity {bad} outside the non-negative range"),
        });
    }
    Ok(Volume { data, modality })
}

pub fn load_segmentation(case: &CaseRef) -> Result<LabelVolume, VolumeError> {
    let path = case
        .segmentation_path()
        .ok_or_else(|| VolumeError::SegmentationMissing(case.case_id.clone()))?;
    let raw = read_grid(path)?;
    let mut labels = Array3::<u8>::zeros(raw.dim());
    for (dst, &v) in labels.iter_mut().zip(raw.iter()) {
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(VolumeError::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("non-integer label value {v}"),
            });
        }
        let as_int = v as i64;
        if !(0..=255).contains(&as_int) || !VALID_LABELS.contains(&(as_int as u8)) {
            return Err(VolumeError::InvalidLabel(as_int));
        }
        *dst = as_int as u8;
    }
    LabelVolume::new(labels)
}

/// Writes a label volume in NIfTI-1 layout; the path decides compression.
pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<(), VolumeError> {
    WriterOptions::new(path)
        .write_nifti(labels.data())
        .map_err(|e| nifti_write_error(path, e))
}

/// Writes an intensity volume in NIfTI-1 layout as 16-bit unsigned integers.
/// Values are rounded and clamped to the 16-bit range.
pub fn write_intensities(path: &Path, data: &Array3<f32>) -> Result<(), VolumeError> {
    let raw = data.mapv(|v| v.round().clamp(0.0, u16::MAX as f32) as u16);
    WriterOptions::new(path)
        .write_nifti(&raw)
        .map_err(|e| nifti_write_error(path, e))
}

fn nifti_write_error(path: &Path, e: nifti::NiftiError) -> VolumeError {
    match e {
        nifti::NiftiError::Io(source) => VolumeError::IoFailure {
            path: path.to_path_buf(),
            source,
        },
        other => VolumeError::IoFailure {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    }
}

/// Mean (FLAIR, T1CE) intensity per label for the synthetic fixtures.
fn synthetic_intensity(label: u8, in_brain: bool) -> (f32, f32) {
    if !in_brain {
        return (0.0, 0.0);
    }
    match label {
        1 => (500.0, 150.0),
        2 => (900.0, 450.0),
        4 => (700.0, 1200.0),
        _ => (300.0, 400.0),
    }
}

/// Case identifier used for the fixture generated from `seed`.
pub fn synthetic_case_id(seed: u64) -> String {
    format!("Synth_{seed:05}")
}

/// Generates a synthetic BraTS-layout case under `out_dir/<case_id>/` with
/// FLAIR, T1CE and segmentation volumes.
///
/// The tumour is a set of concentric ellipsoids: a necrotic core (1) inside an
/// enhancing shell (4) inside an edema shell (2), all inside an elliptical
/// "brain" of background tissue. The ellipsoid centre sits on a voxel and the
/// radii are at least `0.27 * dim` along each axis, so all four labels exist
/// for any dimension of 8 or more.
pub fn generate_synthetic_case(
    seed: u64,
    out_dir: &Path,
    shape: (usize, usize, usize),
) -> Result<CaseRef, VolumeError> {
    let (h, w, d) = shape;
    if h < 8 || w < 8 || d < 8 {
        return Err(VolumeError::InvalidShape(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, dim: usize| -> f64 {
        let span = (dim / 16) as i64;
        if span == 0 {
            0.0
        } else {
            rand::Rng::random_range(rng, -span..=span) as f64
        }
    };
    let centre = [
        (h / 2) as f64 + jitter(&mut rng, h),
        (w / 2) as f64 + jitter(&mut rng, w),
        (d / 2) as f64 + jitter(&mut rng, d),
    ];
    let mut radii = [0.0f64; 3];
    for (r, dim) in radii.iter_mut().zip([h, w, d]) {
        *r = 0.3 * dim as f64 * rand::Rng::random_range(&mut rng, 0.9..1.1);
    }
    let brain_radii = [0.45 * h as f64, 0.45 * w as f64];

    let mut labels = Array3::<u8>::zeros(shape);
    let mut brain = Array3::<bool>::from_elem(shape, false);
    Zip::indexed(&mut labels)
        .and(&mut brain)
        .for_each(|(x, y, z), label, in_brain| {
            let bx = (x as f64 - (h / 2) as f64) / brain_radii[0];
            let by = (y as f64 - (w / 2) as f64) / brain_radii[1];
            *in_brain = bx * bx + by * by <= 1.0;
            let p = [x as f64, y as f64, z as f64];
            let dist2: f64 = (0..3)
                .map(|k| ((p[k] - centre[k]) / radii[k]).powi(2))
                .sum();
            *label = if dist2 <= 0.35f64.powi(2) {
                1
            } else if dist2 <= 0.6f64.powi(2) {
                4
            } else if dist2 <= 1.0 {
                2
            } else {
                0
            };
            if *label != 0 {
                *in_brain = true;
            }
        });

    let noise = Normal::new(0.0f32, 30.0).expect("valid normal parameters");
    let mut flair = Array3::<f32>::zeros(shape);
    let mut t1ce = Array3::<f32>::zeros(shape);
    for (((f, t), &label), &in_brain) in flair
        .iter_mut()
        .zip(t1ce.iter_mut())
        .zip(labels.iter())
        .zip(brain.iter())
    {
        let (mf, mt) = synthetic_intensity(label, in_brain);
        if in_brain {
            *f = (mf + noise.sample(&mut rng)).round().max(0.0);
            *t = (mt + noise.sample(&mut rng)).round().max(0.0);
        }
    }

    let case_id = synthetic_case_id(seed);
    let case_dir = out_dir.join(&case_id);
    fs::create_dir_all(&case_dir).map_err(|source| VolumeError::IoFailure {
        path: case_dir.clone(),
        source,
    })?;
    let file = |suffix: &str| case_dir.join(format!("{case_id}_{suffix}.nii.gz"));
    write_intensities(&file("flair"), &flair)?;
    write_intensities(&file("t1ce"), &t1ce)?;
    write_labels(&file("seg"), &LabelVolume::new(labels)?)?;

    CaseRef::from_dir(&case_dir)?.ok_or_else(|| VolumeError::CorruptFile {
        path: case_dir,
        reason: "generated case could not be rediscovered".into(),
    })
}
