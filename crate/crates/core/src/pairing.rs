//! Paired views for training.
//!
//! * precomputed pairs: two row-aligned embedding files, one per view
//! * embedding augmentation: both views synthesized from one file with
//!   independent Gaussian noise and coordinate dropout
//! * class batch-mean: view 2 of row `i` is the mean of the batch rows that
//!   share its label (itself included)
//! * dual stream: two modalities, one head each
//!
//! Batches come from a fresh permutation each epoch. A trailing batch with
//! fewer than two rows is dropped; all other rows are used exactly once.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, shape_err, validation_err, Error, Result};
use crate::evalkit::LabelSet;
use crate::hashcoder::HeadId;
use crate::numkit::{DenseMatrix, Rng};

pub const DEFAULT_NOISE_FRACTION: f64 = 0.1;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    PrecomputedPairs,
    EmbeddingAugmentation,
    ClassBatchMean,
    DualStream,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::PrecomputedPairs => "precomputed",
            PairingMode::EmbeddingAugmentation => "augmentation",
            PairingMode::ClassBatchMean => "class-mean",
            PairingMode::DualStream => "dual-stream",
        })
    }
}

impl FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" | "precomputed" => Ok(PairingMode::PrecomputedPairs),
            "augment" | "augmentation" => Ok(PairingMode::EmbeddingAugmentation),
            "class-mean" | "sup" => Ok(PairingMode::ClassBatchMean),
            "dual" | "dual-stream" => Ok(PairingMode::DualStream),
            other => Err(config_err!("unknown pairing mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingConfig {
    pub mode: PairingMode,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Also perturb view 1 in class batch-mean mode. Off by default.
    pub augment_view1: bool,
}

impl PairingConfig {
    pub fn new(mode: PairingMode) -> Self {
        Self {
            mode,
            noise_sigma: 0.0,
            dropout_rate: if mode == PairingMode::EmbeddingAugmentation {
                DEFAULT_DROPOUT
            } else {
                0.0
            },
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            augment_view1: false,
        }
    }

    /// Augmentation defaults scaled to the data: σ = 0.1 · RMS entry.
    pub fn augmentation_for(embeddings: &DenseMatrix) -> Self {
        Self {
            noise_sigma: default_noise_sigma(embeddings),
            ..Self::new(PairingMode::EmbeddingAugmentation)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err!("noise sigma must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!("dropout rate must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2"));
        }
        if self.mode == PairingMode::EmbeddingAugmentation && self.noise_sigma == 0.0 && self.dropout_rate == 0.0 {
            return Err(config_err!(
                "embedding augmentation needs a positive noise sigma or dropout rate"
            ));
        }
        Ok(())
    }

    fn augments(&self) -> bool {
        self.noise_sigma > 0.0 || self.dropout_rate > 0.0
    }
}

/// `DEFAULT_NOISE_FRACTION` times the root-mean-square embedding entry.
pub fn default_noise_sigma(embeddings: &DenseMatrix) -> f64 {
    let n = embeddings.as_slice().len().max(1) as f64;
    let ms = embeddings.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
    DEFAULT_NOISE_FRACTION * ms.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub view1: DenseMatrix,
    pub view2: DenseMatrix,
    pub labels: Option<LabelSet>,
    pub head_assignment: (HeadId, HeadId),
    /// Source rows, in batch order.
    pub indices: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.view1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One epoch's batches of row indices.
pub fn epoch_batches(rows: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(rows);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_indices(indices: &[usize], rows: usize) -> Result<()> {
    if indices.len() < 2 {
        return Err(Error::BatchSize(format!(
            "a pair batch needs at least 2 rows, got {}",
            indices.len()
        )));
    }
    if let Some(i) = indices.iter().find(|&&i| i >= rows) {
        return Err(shape_err!("row {i} out of range for {rows} rows"));
    }
    Ok(())
}

/// Gaussian noise then coordinate dropout, drawn row by row.
fn augment(rows: &mut DenseMatrix, sigma: f64, dropout: f64, rng: &mut Rng) {
    for v in rows.as_mut_slice() {
        if sigma > 0.0 {
            *v += sigma * rng.normal();
        }
        if dropout > 0.0 && rng.bernoulli(dropout) {
            *v = 0.0;
        }
    }
}

/// Unsupervised pairs: from a second aligned file when given, otherwise two
/// independent augmentations of the same rows.
pub fn make_unsupervised_batch(
    embeddings: &DenseMatrix,
    paired: Option<&DenseMatrix>,
    indices: &[usize],
    cfg: &PairingConfig,
    rng: &mut Rng,
) -> Result<PairBatch> {
    check_indices(indices, embeddings.rows())?;
    let source = embeddings.select_rows(indices);
    let (view1, view2) = match (cfg.mode, paired) {
        (PairingMode::PrecomputedPairs, Some(second)) => {
            if second.rows() != embeddings.rows() {
                return Err(validation_err!(
                    "paired files have {} and {} rows",
                    embeddings.rows(),
                    second.rows()
                ));
            }
            if second.cols() != embeddings.cols() {
                return Err(shape_err!(
                    "paired views must share a dimension ({} vs {})",
                    embeddings.cols(),
                    second.cols()
                ));
            }
            (source, second.select_rows(indices))
        }
        (PairingMode::PrecomputedPairs, None) => {
            return Err(config_err!("precomputed pairing needs a second view file"))
        }
        (PairingMode::EmbeddingAugmentation, _) => {
            let mut v1 = source.clone();
            let mut v2 = source;
            if cfg.augments() {
                augment(&mut v1, cfg.noise_sigma, cfg.dropout_rate, rng);
                augment(&mut v2, cfg.noise_sigma, cfg.dropout_rate, rng);
            }
            (v1, v2)
        }
        (mode, _) => return Err(config_err!("{mode:?} is not an unsupervised pairing mode")),
    };
    Ok(PairBatch {
        view1,
        view2,
        labels: None,
        head_assignment: (HeadId::First, HeadId::First),
        indices: indices.to_vec(),
    })
}

/// Supervised pairs: view 2 is the within-batch class mean of view 1.
pub fn make_supervised_batch(
    embeddings: &DenseMatrix,
    labels: Option<&LabelSet>,
    indices: &[usize],
    cfg: &PairingConfig,
    rng: &mut Rng,
) -> Result<PairBatch> {
    let labels = labels.ok_or_else(|| config_err!("supervised pairing needs labels"))?;
    if labels.len() != embeddings.rows() {
        return Err(validation_err!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        ));
    }
    let classes = labels
        .single_labels()
        .ok_or_else(|| config_err!("supervised pairing is defined for single-label data only"))?;
    check_indices(indices, embeddings.rows())?;
    let mut view1 = embeddings.select_rows(indices);
    if cfg.augment_view1 && cfg.augments() {
        augment(&mut view1, cfg.noise_sigma, cfg.dropout_rate, rng);
    }
    let batch_classes: Vec<u32> = indices.iter().map(|&i| classes[i]).collect();
    let dim = view1.cols();
    let mut view2 = DenseMatrix::zeros(indices.len(), dim);
    let mut distinct = batch_classes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    for c in distinct {
        let members: Vec<usize> = (0..indices.len()).filter(|&r| batch_classes[r] == c).collect();
        let mut mean = vec![0.0; dim];
        for &r in &members {
            for (m, v) in mean.iter_mut().zip(view1.row(r)) {
                *m += v;
            }
        }
        let n = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        for &r in &members {
            view2.row_mut(r).copy_from_slice(&mean);
        }
    }
    Ok(PairBatch {
        view1,
        view2,
        labels: Some(labels.select_rows(indices)),
        head_assignment: (HeadId::First, HeadId::First),
        indices: indices.to_vec(),
    })
}

/// Cross-modal pairs: same row of two streams, one head per stream.
pub fn make_dualstream_batch(
    stream_a: &DenseMatrix,
    stream_b: &DenseMatrix,
    indices: &[usize],
    dual_head: bool,
) -> Result<PairBatch> {
    if !dual_head {
        return Err(config_err!("dual-stream pairing needs a dual-head model"));
    }
    if stream_a.rows() != stream_b.rows() {
        return Err(validation_err!(
            "streams have {} and {} rows",
            stream_a.rows(),
            stream_b.rows()
        ));
    }
    check_indices(indices, stream_a.rows())?;
    Ok(PairBatch {
        view1: stream_a.select_rows(indices),
        view2: stream_b.select_rows(indices),
        labels: None,
        head_assignment: (HeadId::First, HeadId::Second),
        indices: indices.to_vec(),
    })
}

/// Training data bound to a pairing mode.
#[derive(Debug, Clone, Copy)]
pub enum PairSource<'a> {
    Precomputed {
        first: &'a DenseMatrix,
        second: &'a DenseMatrix,
    },
    Augmented {
        embeddings: &'a DenseMatrix,
    },
    ClassMean {
        embeddings: &'a DenseMatrix,
        labels: &'a LabelSet,
    },
    DualStream {
        first: &'a DenseMatrix,
        second: &'a DenseMatrix,
    },
}

impl<'a> PairSource<'a> {
    pub fn mode(&self) -> PairingMode {
        match self {
            PairSource::Precomputed { .. } => PairingMode::PrecomputedPairs,
            PairSource::Augmented { .. } => PairingMode::EmbeddingAugmentation,
            PairSource::ClassMean { .. } => PairingMode::ClassBatchMean,
            PairSource::DualStream { .. } => PairingMode::DualStream,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            PairSource::Precomputed { first, .. }
            | PairSource::DualStream { first, .. }
            | PairSource::Augmented { embeddings: first }
            | PairSource::ClassMean { embeddings: first, .. } => first.rows(),
        }
    }

    /// Input dimensions of view 1 and view 2.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            PairSource::Precomputed { first, second } | PairSource::DualStream { first, second } => {
                (first.cols(), second.cols())
            }
            PairSource::Augmented { embeddings } | PairSource::ClassMean { embeddings, .. } => {
                (embeddings.cols(), embeddings.cols())
            }
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, PairSource::DualStream { .. })
    }

    /// Checks the source against the config before any training work.
    pub fn validate(&self, cfg: &PairingConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.mode != self.mode() {
            return Err(config_err!(
                "config mode {:?} does not match data for {:?}",
                cfg.mode,
                self.mode()
            ));
        }
        if self.rows() < 2 {
            return Err(validation_err!("need at least 2 training rows, got {}", self.rows()));
        }
        match self {
            PairSource::Precomputed { first, second } => {
                if first.rows() != second.rows() {
                    return Err(validation_err!(
                        "paired files have {} and {} rows",
                        first.rows(),
                        second.rows()
                    ));
                }
                if first.cols() != second.cols() {
                    return Err(shape_err!("paired views must share a dimension"));
                }
            }
            PairSource::DualStream { first, second } => {
                if first.rows() != second.rows() {
                    return Err(validation_err!(
                        "streams have {} and {} rows",
                        first.rows(),
                        second.rows()
                    ));
                }
            }
            PairSource::ClassMean { embeddings, labels } => {
                if labels.len() != embeddings.rows() {
                    return Err(validation_err!(
                        "{} labels for {} embeddings",
                        labels.len(),
                        embeddings.rows()
                    ));
                }
                if labels.single_labels().is_none() {
                    return Err(config_err!("supervised pairing is defined for single-label data only"));
                }
            }
            PairSource::Augmented { .. } => {}
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize], cfg: &PairingConfig, dual_head: bool, rng: &mut Rng) -> Result<PairBatch> {
        match *self {
            PairSource::Precomputed { first, second } => {
                make_unsupervised_batch(first, Some(second), indices, cfg, rng)
            }
            PairSource::Augmented { embeddings } => make_unsupervised_batch(embeddings, None, indices, cfg, rng),
            PairSource::ClassMean { embeddings, labels } => {
                make_supervised_batch(embeddings, Some(labels), indices, cfg, rng)
            }
            PairSource::DualStream { first, second } => make_dualstream_batch(first, second, indices, dual_head),
        }
    }
}
