//! Seeded mini-batch training of a [`CosineHead`].

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{class_weights, cross_entropy, ClassWeights};
use super::optim::{sgd_step, TrainConfig, Velocity};
use super::{CosineHead, HeadError, HeadGradients, Scalar};

/// Which source a training sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Clean,
    Noisy,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Clean => "clean",
            SplitTag::Noisy => "noisy",
        })
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(SplitTag::Clean),
            "noisy" => Ok(SplitTag::Noisy),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

/// Feature rows with observed labels, true labels, per-sample loss weights
/// and clean/noisy tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    ids: Vec<String>,
    d_in: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
    true_labels: Vec<usize>,
    sample_weights: Vec<f64>,
    split: Vec<SplitTag>,
}

impl LabeledEmbeddings {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ids: Vec<String>,
        d_in: usize,
        features: Vec<f32>,
        labels: Vec<usize>,
        true_labels: Vec<usize>,
        sample_weights: Vec<f64>,
        split: Vec<SplitTag>,
    ) -> Result<Self, HeadError> {
        let n = ids.len();
        if d_in == 0 {
            return Err(HeadError::InvalidConfig(
                "feature dimension must be positive".into(),
            ));
        }
        for (what, len) in [
            ("features", features.len() / d_in),
            ("labels", labels.len()),
            ("true labels", true_labels.len()),
            ("sample weights", sample_weights.len()),
            ("split tags", split.len()),
        ] {
            if len != n {
                return Err(HeadError::ShapeMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        if features.len() != n * d_in {
            return Err(HeadError::ShapeMismatch {
                what: "features",
                expected: n * d_in,
                actual: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(HeadError::NonFinite("features"));
        }
        if let Some(&w) = sample_weights
            .iter()
            .find(|w| !(w.is_finite() && **w > 0.0))
        {
            return Err(HeadError::InvalidWeight(w));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(crate::embstore::EmbedError::DuplicateId(dup.clone()).into());
        }
        Ok(Self {
            ids,
            d_in,
            features,
            labels,
            true_labels,
            sample_weights,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn sample_weights(&self) -> &[f64] {
        &self.sample_weights
    }

    pub fn split_tags(&self) -> &[SplitTag] {
        &self.split
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.d_in);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            d_in: self.d_in,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            sample_weights: indices.iter().map(|&i| self.sample_weights[i]).collect(),
            split: indices.iter().map(|&i| self.split[i]).collect(),
        }
    }

    /// Only the clean-tagged rows.
    pub fn clean_only(&self) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.split[i] == SplitTag::Clean)
            .collect();
        self.select(&keep)
    }

    /// Sets the loss weight of every clean-tagged row to `weight` and every
    /// other row to 1.
    pub fn with_clean_weight(&self, weight: f64) -> Result<Self, HeadError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(HeadError::InvalidWeight(weight));
        }
        let mut out = self.clone();
        for (w, tag) in out.sample_weights.iter_mut().zip(&out.split) {
            *w = if *tag == SplitTag::Clean { weight } else { 1.0 };
        }
        Ok(out)
    }

    /// Observed-label counts over `num_classes` classes.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<u64>, HeadError> {
        let mut counts = vec![0u64; num_classes];
        for &label in &self.labels {
            *counts.get_mut(label).ok_or(HeadError::LabelOutOfRange {
                label,
                classes: num_classes,
            })? += 1;
        }
        Ok(counts)
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().copied().max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    /// 0 is the state before any update.
    pub epoch: usize,
    /// Mean weighted loss over the epoch's samples.
    pub train_loss: f64,
    /// Mean unweighted loss over the full validation set after the epoch.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
    /// Mean weighted loss of the very first mini-batch, before its update.
    pub first_batch_loss: Option<f64>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<&EpochLoss> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Scalar> {
    pub head: CosineHead<T>,
    pub trace: LossTrace,
    pub class_weights: ClassWeights,
}

/// Class weights the trainer uses for `data`.
///
/// A class absent from the data contributes no loss terms; it is counted as
/// a singleton so the weight vector stays defined.
pub fn training_class_weights(
    data: &LabeledEmbeddings,
    num_classes: usize,
) -> Result<ClassWeights, HeadError> {
    let counts: Vec<u64> = data
        .class_counts(num_classes)?
        .into_iter()
        .map(|c| c.max(1))
        .collect();
    class_weights(&counts)
}

/// Sample order of every epoch for a given seed.
pub fn epoch_orders(n: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Mean unweighted cross-entropy over `data` (true labels are not used;
/// callers pass validation sets whose observed labels are correct).
pub fn mean_unweighted_loss<T: Scalar>(
    head: &CosineHead<T>,
    data: &LabeledEmbeddings,
) -> Result<f64, HeadError> {
    if data.is_empty() {
        return Err(HeadError::EmptyData);
    }
    let prep = head.prepare()?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let fwd = head.forward_prepared(&prep, data.feature(i))?;
        total += cross_entropy(&fwd.logits, data.labels[i])?;
    }
    Ok(total / data.len() as f64)
}

/// Mean weighted loss over `data` under `class_w`.
pub fn mean_weighted_loss<T: Scalar>(
    head: &CosineHead<T>,
    data: &LabeledEmbeddings,
    class_w: &ClassWeights,
) -> Result<f64, HeadError> {
    if data.is_empty() {
        return Err(HeadError::EmptyData);
    }
    let prep = head.prepare()?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let fwd = head.forward_prepared(&prep, data.feature(i))?;
        total +=
            super::weighted_ce_loss(&fwd.logits, data.labels[i], class_w, data.sample_weights[i])?;
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch SGD over `data`, validating on `val` after every epoch.
///
/// Batch gradients are averaged over the batch. The run is a pure function
/// of its inputs and `config.seed`.
pub fn train<T: Scalar>(
    head: CosineHead<T>,
    data: &LabeledEmbeddings,
    val: &LabeledEmbeddings,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, HeadError> {
    config.validate()?;
    if data.is_empty() || val.is_empty() {
        return Err(HeadError::EmptyData);
    }
    for set in [data, val] {
        if set.d_in() != head.d_in() {
            return Err(HeadError::ShapeMismatch {
                what: "feature dimension",
                expected: head.d_in(),
                actual: set.d_in(),
            });
        }
        if let Some(label) = set.max_label().filter(|&l| l >= head.num_classes()) {
            return Err(HeadError::LabelOutOfRange {
                label,
                classes: head.num_classes(),
            });
        }
    }

    let class_w = training_class_weights(data, head.num_classes())?;
    let mut head = head;
    let mut trace = LossTrace {
        epochs: vec![EpochLoss {
            epoch: 0,
            train_loss: mean_weighted_loss(&head, data, &class_w)?,
            val_loss: mean_unweighted_loss(&head, val)?,
        }],
        first_batch_loss: None,
    };
    let mut velocity = Velocity::zeros(&head);

    for (e, order) in epoch_orders(data.len(), config.epochs, config.seed)
        .into_iter()
        .enumerate()
    {
        let epoch = e + 1;
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let prep = head.prepare()?;
            let mut grads = HeadGradients::zeros(&head);
            let mut batch_total = 0.0;
            for &i in batch {
                let x = data.feature(i);
                let label = data.labels[i];
                let fwd = head.forward_prepared(&prep, x)?;
                let sample_w = data.sample_weights[i];
                let loss = super::weighted_ce_loss(&fwd.logits, label, &class_w, sample_w)?;
                batch_total += loss;
                head.accumulate_backward(
                    &prep,
                    &fwd,
                    x,
                    label,
                    sample_w * class_w.as_slice()[label],
                    &mut grads,
                )?;
            }
            if !batch_total.is_finite() {
                return Err(HeadError::NonFiniteLoss { epoch, batch: b });
            }
            let batch_mean = batch_total / batch.len() as f64;
            if trace.first_batch_loss.is_none() {
                trace.first_batch_loss = Some(batch_mean);
            }
            epoch_total += batch_total;
            grads.scale_by(1.0 / batch.len() as f64);
            sgd_step(&mut head, &grads, &mut velocity, config)?;
        }
        trace.epochs.push(EpochLoss {
            epoch,
            train_loss: epoch_total / data.len() as f64,
            val_loss: mean_unweighted_loss(&head, val)?,
        });
    }
    Ok(TrainOutcome {
        head,
        trace,
        class_weights: class_w,
    })
}
