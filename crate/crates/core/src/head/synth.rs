//! Synthetic labeled feature sets standing in for clean and noisy landmark
//! training data.
//!
//! Class centers are uniform on the unit sphere. The first
//! `ceil(clean_fraction * num_classes)` classes form the clean view: their
//! samples are tagged [`SplitTag::Clean`] and never relabeled. Label noise is
//! applied to exactly `round(label_noise_fraction * n_noisy)` of the
//! remaining samples, each moved to a uniformly drawn wrong class.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::train::{LabeledEmbeddings, SplitTag};
use super::HeadError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub d_in: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub noise_sigma: f64,
    pub label_noise_fraction: f64,
    /// Fraction of classes forming the clean view.
    pub clean_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 50,
            d_in: 32,
            samples_min: 10,
            samples_max: 30,
            noise_sigma: 0.05,
            label_noise_fraction: 0.0,
            clean_fraction: 0.4,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn clean_classes(&self) -> usize {
        (self.clean_fraction * self.num_classes as f64).ceil() as usize
    }

    fn validate(&self) -> Result<(), HeadError> {
        let bad = |msg: String| Err(HeadError::InvalidConfig(msg));
        if self.num_classes < 3 {
            return Err(HeadError::TooFewClasses(self.num_classes));
        }
        if self.d_in == 0 {
            return bad("feature dimension must be positive".into());
        }
        if self.samples_min == 0 || self.samples_min > self.samples_max {
            return bad(format!(
                "samples per class range [{}, {}] is empty or starts at zero",
                self.samples_min, self.samples_max
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise_fraction) {
            return bad(format!(
                "label noise fraction must lie in [0, 1), got {}",
                self.label_noise_fraction
            ));
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction <= 1.0) {
            return bad(format!(
                "clean fraction must lie in (0, 1], got {}",
                self.clean_fraction
            ));
        }
        if self.clean_classes() < 3 {
            return bad(format!(
                "clean view would hold {} classes, at least 3 needed",
                self.clean_classes()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub samples: LabeledEmbeddings,
    pub num_classes: usize,
    /// Classes `0..clean_classes` form the clean view.
    pub clean_classes: usize,
    /// `num_classes x d_in` unit class centers.
    pub centers: Vec<f32>,
}

pub fn gen_synthetic(config: &SynthConfig) -> Result<SyntheticData, HeadError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_in;

    let mut centers = Vec::with_capacity(config.num_classes * d);
    for _ in 0..config.num_classes {
        let v = loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        centers.extend(v.into_iter().map(|x| x as f32));
    }

    let counts: Vec<usize> = (0..config.num_classes)
        .map(|_| rng.random_range(config.samples_min..=config.samples_max))
        .collect();
    let total: usize = counts.iter().sum();
    let clean_classes = config.clean_classes();

    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let mut ids = Vec::with_capacity(total);
    let mut features = Vec::with_capacity(total * d);
    let mut true_labels = Vec::with_capacity(total);
    let mut split = Vec::with_capacity(total);
    for (class, &count) in counts.iter().enumerate() {
        let center = &centers[class * d..(class + 1) * d];
        for _ in 0..count {
            ids.push(format!("s{:06}", ids.len()));
            if config.noise_sigma == 0.0 {
                features.extend_from_slice(center);
            } else {
                features.extend(
                    center
                        .iter()
                        .map(|&c| (f64::from(c) + noise.sample(&mut rng)) as f32),
                );
            }
            true_labels.push(class);
            split.push(if class < clean_classes {
                SplitTag::Clean
            } else {
                SplitTag::Noisy
            });
        }
    }

    let mut labels = true_labels.clone();
    let noisy: Vec<usize> = (0..total)
        .filter(|&i| split[i] == SplitTag::Noisy)
        .collect();
    let flips = (config.label_noise_fraction * noisy.len() as f64).round() as usize;
    if flips > 0 {
        let mut chosen = sample(&mut rng, noisy.len(), flips).into_vec();
        chosen.sort_unstable();
        for pick in chosen {
            let i = noisy[pick];
            let wrong = rng.random_range(0..config.num_classes - 1);
            labels[i] = if wrong >= true_labels[i] {
                wrong + 1
            } else {
                wrong
            };
        }
    }

    let samples = LabeledEmbeddings::new(
        ids,
        d,
        features,
        labels,
        true_labels,
        vec![1.0; total],
        split,
    )?;
    Ok(SyntheticData {
        samples,
        num_classes: config.num_classes,
        clean_classes,
        centers,
    })
}
