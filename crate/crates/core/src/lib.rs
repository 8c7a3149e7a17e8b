//! Brain-tumour segmentation on axial MRI slices with a 2D U-Net.
//!
//! The pipeline reads BraTS-style NIfTI cases, turns a window of axial slices
//! into normalised two-channel inputs with one-hot targets, trains a U-Net
//! with Adam and reports pixel-pooled overlap metrics.

pub mod data_pipeline;
pub mod evaluation_report;
pub mod metrics;
pub mod preprocess;
pub mod trainer;
pub mod unet;
pub mod volume_io;

use thiserror::Error;

/// Any failure raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Volume(#[from] volume_io::VolumeError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Pipeline(#[from] data_pipeline::PipelineError),
    #[error(transparent)]
    Model(#[from] unet::ModelError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] evaluation_report::EvalError),
}

/// Coarse failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad or missing input data.
    Data,
    /// Failure while computing or writing results.
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        if self.volume_cause().is_some() {
            return ErrorKind::Data;
        }
        use evaluation_report::EvalError as E;
        use trainer::TrainError as T;
        match self {
            Error::Volume(_) | Error::Preprocess(_) | Error::Pipeline(_) => ErrorKind::Data,
            Error::Train(T::Data(_) | T::EmptyPartition(_) | T::MalformedLog { .. }) => ErrorKind::Data,
            Error::Train(T::Eval(e)) | Error::Eval(e) => match e {
                E::NoCases | E::Data(_) | E::Preprocess(_) | E::Volume(_) => ErrorKind::Data,
                _ => ErrorKind::Runtime,
            },
            Error::Model(unet::ModelError::Checkpoint { .. }) => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }

    /// Innermost volume error, if the failure came from reading a case.
    pub fn volume_cause(&self) -> Option<&volume_io::VolumeError> {
        use data_pipeline::PipelineError as P;
        use evaluation_report::EvalError as E;
        use preprocess::PreprocessError as R;
        use trainer::TrainError as T;
        fn pre(e: &R) -> Option<&volume_io::VolumeError> {
            match e {
                R::Volume(v) => Some(v),
                _ => None,
            }
        }
        fn pipe(e: &P) -> Option<&volume_io::VolumeError> {
            match e {
                P::Sample { source, .. } => pre(source),
                _ => None,
            }
        }
        fn eval(e: &E) -> Option<&volume_io::VolumeError> {
            match e {
                E::Data(p) => pipe(p),
                E::Preprocess(p) => pre(p),
                E::Volume(v) => Some(v),
                _ => None,
            }
        }
        fn train(e: &T) -> Option<&volume_io::VolumeError> {
            match e {
                T::Data(p) => pipe(p),
                T::Eval(e) => eval(e),
                T::Batch { source, .. } => train(source),
                _ => None,
            }
        }
        match self {
            Error::Volume(v) => Some(v),
            Error::Preprocess(p) => pre(p),
            Error::Pipeline(p) => pipe(p),
            Error::Train(t) => train(t),
            Error::Eval(e) => eval(e),
            _ => None,
        }
    }

    /// Short machine-readable name of the failure.
    pub fn code(&self) -> &'static str {
        use volume_io::VolumeError as V;
        if let Some(v) = self.volume_cause() {
            return match v {
                V::MissingRoot(..) => "MissingRoot",
                V::EmptyDataset(..) => "EmptyDataset",
                V::ModalityMissing { .. } => "ModalityMissing",
                V::SegmentationMissing(..) => "SegmentationMissing",
                V::InvalidLabel(..) => "InvalidLabel",
                V::CorruptFile { .. } => "CorruptFile",
                V::InvalidShape(..) => "InvalidShape",
                V::IoFailure { .. } => "IoFailure",
            };
        }
        match self {
            Error::Model(unet::ModelError::Checkpoint { .. }) => "CorruptCheckpoint",
            Error::Model(unet::ModelError::ConfigInvalid(_)) => "ConfigInvalid",
            Error::Model(unet::ModelError::ShapeMismatch { .. }) => "ShapeMismatch",
            Error::Train(trainer::TrainError::CallbackWrite { .. }) => "DiskFull",
            Error::Train(trainer::TrainError::InvalidHyperparameters(_)) => "ConfigInvalid",
            Error::Eval(evaluation_report::EvalError::InconsistentColumns(_)) => "InconsistentColumns",
            e if e.kind() == ErrorKind::Data => "DataError",
            _ => "RuntimeError",
        }
    }
}
