//! Case-level dataset splitting and the lazy batch generator.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::preprocess::{LoadedCase, PreprocessConfig, PreprocessError, SliceSample, NUM_CLASSES};
use crate::volume_io::CaseRef;

/// The 68 / 20 / 12 train / validation / test ratio.
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.68, 0.20, 0.12);

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("at least 3 cases are needed to split, found {0}")]
    TooFewCases(usize),
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("no cases to iterate")]
    NoCases,
    #[error("case {case_id}, slice {slice_index}: {source}")]
    Sample {
        case_id: String,
        slice_index: usize,
        #[source]
        source: Box<PreprocessError>,
    },
}

/// Disjoint train / validation / test partitions of a case list.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CaseRef>,
    pub validation: Vec<CaseRef>,
    pub test: Vec<CaseRef>,
    pub seed: u64,
}

/// Which partition of a [`DatasetSplit`] to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" | "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition '{other}'")),
        }
    }
}

impl DatasetSplit {
    pub fn partition(&self, partition: Partition) -> &[CaseRef] {
        match partition {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Partition sizes for `n` cases: floors for train and validation, the rest to test.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize), PipelineError> {
    let (rt, rv, rs) = ratios;
    let valid = [rt, rv, rs].iter().all(|r| r.is_finite() && *r > 0.0)
        && ((rt + rv + rs) - 1.0).abs() <= 1e-9;
    if !valid {
        return Err(PipelineError::BadRatios(ratios));
    }
    // The epsilon absorbs representation error such as 0.2 * 335 = 66.99999...
    let floor = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let n_train = floor(rt);
    let n_val = floor(rv);
    Ok((n_train, n_val, n - n_train - n_val))
}

/// Seeded shuffle of `cases`, then cut into partitions by [`split_sizes`].
pub fn split_cases(
    cases: &[CaseRef],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, PipelineError> {
    let (n_train, n_val, _) = split_sizes(cases.len(), ratios)?;
    if cases.len() < 3 {
        return Err(PipelineError::TooFewCases(cases.len()));
    }
    let mut shuffled = cases.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
        seed,
    })
}

/// Identifies the slice a sample came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SliceId {
    pub case_id: String,
    pub slice_index: usize,
}

/// A stack of samples. Arrays are `(batch, h, w, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array4<f64>,
    pub targets: Array4<f64>,
    pub provenance: Vec<SliceId>,
}

impl Batch {
    /// Stacks samples that share one spatial size and channel count.
    pub fn from_samples(samples: &[SliceSample]) -> Batch {
        let first = &samples[0];
        let (h, w, c) = first.input.dim();
        let k = first.target.dim().2;
        let mut inputs = Array4::zeros((samples.len(), h, w, c));
        let mut targets = Array4::zeros((samples.len(), h, w, k));
        for (i, sample) in samples.iter().enumerate() {
            inputs.slice_mut(s![i, .., .., ..]).assign(&sample.input);
            targets.slice_mut(s![i, .., .., ..]).assign(&sample.target);
        }
        Batch {
            inputs,
            targets,
            provenance: samples
                .iter()
                .map(|s| SliceId {
                    case_id: s.case_id.clone(),
                    slice_index: s.slice_index,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Lazily yields every (case, in-window slice) pair exactly once as batches.
///
/// With `shuffle`, the case order and then the slice order inside each case
/// are permuted, so each case's volumes are read once per epoch and only one
/// case is held in memory. Without it, cases keep their given order and slices
/// ascend. Samples are built only when the batch holding them is requested.
pub struct BatchGenerator {
    cases: Vec<CaseRef>,
    config: PreprocessConfig,
    batch_size: usize,
    order: Vec<(usize, usize)>,
    cursor: usize,
    loaded: Option<(usize, LoadedCase)>,
    built: Arc<AtomicUsize>,
}

impl BatchGenerator {
    pub fn new(
        cases: &[CaseRef],
        config: &PreprocessConfig,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        if batch_size == 0 {
            return Err(PipelineError::ZeroBatchSize);
        }
        if cases.is_empty() {
            return Err(PipelineError::NoCases);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut case_order: Vec<usize> = (0..cases.len()).collect();
        if shuffle {
            case_order.shuffle(&mut rng);
        }
        let mut order = Vec::with_capacity(cases.len() * config.window.length);
        for case_idx in case_order {
            let mut slices: Vec<usize> = config.window.indices().collect();
            if shuffle {
                slices.shuffle(&mut rng);
            }
            order.extend(slices.into_iter().map(|z| (case_idx, z)));
        }
        Ok(BatchGenerator {
            cases: cases.to_vec(),
            config: config.clone(),
            batch_size,
            order,
            cursor: 0,
            loaded: None,
            built: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Number of batches one full pass yields.
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn num_samples(&self) -> usize {
        self.order.len()
    }

    /// Shared counter of samples constructed so far.
    pub fn built_counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.built)
    }

    fn build(&mut self, case_idx: usize, slice_index: usize) -> Result<SliceSample, PipelineError> {
        let case = &self.cases[case_idx];
        let annotate = |source: PreprocessError| PipelineError::Sample {
            case_id: case.case_id.clone(),
            slice_index,
            source: Box::new(source),
        };
        if self.loaded.as_ref().map(|(i, _)| *i) != Some(case_idx) {
            self.loaded = None;
            let loaded = LoadedCase::load(case, &self.config, true).map_err(annotate)?;
            self.loaded = Some((case_idx, loaded));
        }
        let (_, loaded) = self.loaded.as_ref().expect("case loaded above");
        let sample = loaded.sample(slice_index, &self.config).map_err(annotate)?;
        self.built.fetch_add(1, Ordering::Relaxed);
        Ok(sample)
    }
}

impl Iterator for BatchGenerator {
    type Item = Result<Batch, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            self.loaded = None;
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut samples = Vec::with_capacity(end - self.cursor);
        for i in self.cursor..end {
            let (case_idx, z) = self.order[i];
            match self.build(case_idx, z) {
                Ok(sample) => samples.push(sample),
                Err(e) => {
                    self.cursor = self.order.len();
                    return Some(Err(e));
                }
            }
        }
        self.cursor = end;
        debug_assert!(samples.iter().all(|s| s.target.dim().2 == NUM_CLASSES));
        Some(Ok(Batch::from_samples(&samples)))
    }
}

/// Convenience wrapper matching the generator's constructor.
pub fn batch_generator(
    cases: &[CaseRef],
    config: &PreprocessConfig,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchGenerator, PipelineError> {
    BatchGenerator::new(cases, config, batch_size, shuffle, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_cases(n: usize) -> Vec<CaseRef> {
        let dir = tempfile::tempdir().unwrap();
        (0..n)
            .map(|i| {
                let case_dir = dir.path().join(format!("case{i:04}"));
                std::fs::create_dir(&case_dir).unwrap();
                std::fs::write(case_dir.join(format!("case{i:04}_flair.nii")), b"").unwrap();
                CaseRef::from_dir(&case_dir).unwrap().unwrap()
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        // 0.68 * 10 = 6.8 -> 6, 0.2 * 10 = 2, remainder 2.
        assert_eq!(split_sizes(10, DEFAULT_SPLIT_RATIOS).unwrap(), (6, 2, 2));
        // 0.68 * 335 = 227.8 -> 227, 0.2 * 335 = 67, remainder 41.
        assert_eq!(split_sizes(335, DEFAULT_SPLIT_RATIOS).unwrap(), (227, 67, 41));
    }

    #[test]
    fn bad_ratios_and_small_sets() {
        assert!(matches!(split_sizes(10, (0.5, 0.5, 0.5)), Err(PipelineError::BadRatios(_))));
        assert!(matches!(split_sizes(10, (0.8, 0.2, 0.0)), Err(PipelineError::BadRatios(_))));
        let cases = fake_cases(2);
        assert!(matches!(
            split_cases(&cases, DEFAULT_SPLIT_RATIOS, 0),
            Err(PipelineError::TooFewCases(2))
        ));
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let cases = fake_cases(10);
        let a = split_cases(&cases, DEFAULT_SPLIT_RATIOS, 42).unwrap();
        let b = split_cases(&cases, DEFAULT_SPLIT_RATIOS, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes(), (6, 2, 2));
        let mut ids: Vec<_> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .map(|c| c.case_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn generator_rejects_degenerate_arguments() {
        let cases = fake_cases(1);
        let config = PreprocessConfig::default();
        assert!(matches!(
            BatchGenerator::new(&cases, &config, 0, false, 0),
            Err(PipelineError::ZeroBatchSize)
        ));
        assert!(matches!(
            BatchGenerator::new(&[], &config, 1, false, 0),
            Err(PipelineError::NoCases)
        ));
    }

    #[test]
    fn generator_batch_counts() {
        let config = PreprocessConfig::default();
        let gen = BatchGenerator::new(&fake_cases(1), &config, 1, false, 0).unwrap();
        assert_eq!(gen.num_batches(), 100);
        let config = PreprocessConfig {
            window: crate::preprocess::SliceWindow::new(0, 5),
            ..PreprocessConfig::default()
        };
        let gen = BatchGenerator::new(&fake_cases(2), &config, 3, true, 9).unwrap();
        assert_eq!(gen.num_batches(), 4);
    }

    #[test]
    fn load_errors_carry_provenance() {
        let config = PreprocessConfig::default();
        let mut gen = BatchGenerator::new(&fake_cases(1), &config, 1, false, 0).unwrap();
        match gen.next() {
            Some(Err(PipelineError::Sample { case_id, slice_index, .. })) => {
                assert_eq!(case_id, "case0000");
                assert_eq!(slice_index, 22);
            }
            other => panic!("expected a sample error, got {other:?}"),
        }
        assert!(gen.next().is_none());
    }
}
