//! Logit scale, class weighting and the weighted cross-entropy.

use super::HeadError;

/// Fixed AdaCos scale `sqrt(2) * ln(C - 1)`; needs at least three classes
/// to be positive.
pub fn fixed_adacos_scale(num_classes: usize) -> Result<f64, HeadError> {
    if num_classes < 3 {
        return Err(HeadError::TooFewClasses(num_classes));
    }
    Ok(std::f64::consts::SQRT_2 * ((num_classes - 1) as f64).ln())
}

/// How raw per-class weights are derived from sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeightRule {
    /// `1 / ln(count + 1)`; defined for every count >= 1.
    #[default]
    InverseLogCountPlusOne,
    /// `1 / ln(count)`; only defined for counts >= 2.
    InverseLogCount,
}

/// Per-class loss weights with mean exactly 1 (up to rounding).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    /// All-ones weights, i.e. plain cross-entropy.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.weights.get(class).copied()
    }
}

pub fn class_weights(class_counts: &[u64]) -> Result<ClassWeights, HeadError> {
    class_weights_with(class_counts, ClassWeightRule::default())
}

/// Inverse-log-count class weights, rescaled to mean 1.
pub fn class_weights_with(
    class_counts: &[u64],
    rule: ClassWeightRule,
) -> Result<ClassWeights, HeadError> {
    if class_counts.is_empty() {
        return Err(HeadError::EmptyData);
    }
    let min_count = match rule {
        ClassWeightRule::InverseLogCountPlusOne => 1,
        ClassWeightRule::InverseLogCount => 2,
    };
    if let Some((class, &count)) = class_counts
        .iter()
        .enumerate()
        .find(|(_, &c)| c < min_count)
    {
        return Err(HeadError::InvalidCount { class, count });
    }
    if class_counts.iter().all(|&c| c == class_counts[0]) {
        return Ok(ClassWeights::uniform(class_counts.len()));
    }
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&c| match rule {
            ClassWeightRule::InverseLogCountPlusOne => 1.0 / (c as f64 + 1.0).ln(),
            ClassWeightRule::InverseLogCount => 1.0 / (c as f64).ln(),
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights {
        weights: raw.into_iter().map(|w| w / mean).collect(),
    })
}

/// `-ln softmax(logits)[label]` via max-subtracted log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, HeadError> {
    if label >= logits.len() {
        return Err(HeadError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(HeadError::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    Ok((max - logits[label]) + sum.ln())
}

/// Softmax probabilities, max-subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `sample_w * class_w[label] * CE(logits, label)`.
pub fn weighted_ce_loss(
    logits: &[f64],
    label: usize,
    class_w: &ClassWeights,
    sample_w: f64,
) -> Result<f64, HeadError> {
    let nll = cross_entropy(logits, label)?;
    let cw = class_w.get(label).ok_or(HeadError::LabelOutOfRange {
        label,
        classes: class_w.len(),
    })?;
    check_weight(sample_w)?;
    Ok(sample_w * (cw * nll))
}

pub(crate) fn check_weight(w: f64) -> Result<(), HeadError> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(HeadError::InvalidWeight(w))
    }
}
