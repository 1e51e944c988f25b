//! Cosine-softmax metric-learning head and its trainer.
//!
//! The head maps a `d_in` feature vector through a bias-free linear layer to
//! `d_emb` dims, L2-normalizes the result, and scores it against
//! L2-normalized class prototypes:
//!
//! ```text
//! z = x · proj            e = z / |z|
//! logit_c = s · <e, w_c / |w_c|>
//! ```
//!
//! No margin is applied to the target class. All arithmetic runs in f64;
//! the parameter storage type is generic so the same code serves the f32
//! model and f64 replicas used for finite-difference checks.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod train;

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::embstore::{EmbedError, EmbeddingSet};

pub use loss::{
    class_weights, class_weights_with, cross_entropy, fixed_adacos_scale, softmax,
    weighted_ce_loss, ClassWeightRule, ClassWeights,
};
pub use optim::{sgd_step, TrainConfig, Velocity};
pub use synth::{gen_synthetic, SynthConfig, SyntheticData};
pub use train::{train, EpochLoss, LabeledEmbeddings, LossTrace, SplitTag, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("need at least 3 classes, got {0}")]
    TooFewClasses(usize),
    #[error("projected feature vector has zero norm")]
    ZeroProjection,
    #[error("prototype of class {0} has zero norm")]
    ZeroPrototype(usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{what}: expected {expected} values, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid weight {0}")]
    InvalidWeight(f64),
    #[error("class {class} has invalid count {count}")]
    InvalidCount { class: usize, count: u64 },
    #[error("invalid scale {0}")]
    InvalidScale(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyData,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Parameter storage type.
pub trait Scalar: Copy + Debug + PartialEq + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead<T: Scalar = f32> {
    d_in: usize,
    d_emb: usize,
    num_classes: usize,
    /// `d_in x d_emb`, row-major.
    proj: Vec<T>,
    /// `C x d_emb`, row-major.
    prototypes: Vec<T>,
    scale: f64,
}

fn gaussian_fill<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<T> {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
}

impl<T: Scalar> CosineHead<T> {
    pub fn from_parts(
        d_in: usize,
        d_emb: usize,
        proj: Vec<T>,
        prototypes: Vec<T>,
        scale: f64,
    ) -> Result<Self, HeadError> {
        if d_in == 0 || d_emb == 0 {
            return Err(HeadError::InvalidConfig(
                "dimensions must be positive".into(),
            ));
        }
        if proj.len() != d_in * d_emb {
            return Err(HeadError::ShapeMismatch {
                what: "proj",
                expected: d_in * d_emb,
                actual: proj.len(),
            });
        }
        if !prototypes.len().is_multiple_of(d_emb) {
            return Err(HeadError::ShapeMismatch {
                what: "prototypes",
                expected: (prototypes.len() / d_emb + 1) * d_emb,
                actual: prototypes.len(),
            });
        }
        let num_classes = prototypes.len() / d_emb;
        if num_classes < 3 {
            return Err(HeadError::TooFewClasses(num_classes));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(HeadError::InvalidScale(scale));
        }
        if proj
            .iter()
            .chain(&prototypes)
            .any(|v| !v.to_f64().is_finite())
        {
            return Err(HeadError::NonFinite("parameters"));
        }
        Ok(Self {
            d_in,
            d_emb,
            num_classes,
            proj,
            prototypes,
            scale,
        })
    }

    /// Seeded Gaussian init, std `1/sqrt(fan_in)`; scale from fixed AdaCos.
    pub fn init(
        d_in: usize,
        d_emb: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, HeadError> {
        let scale = fixed_adacos_scale(num_classes)?;
        if d_in == 0 || d_emb == 0 {
            return Err(HeadError::InvalidConfig(
                "dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = gaussian_fill(&mut rng, d_in * d_emb, d_in);
        let prototypes = gaussian_fill(&mut rng, num_classes * d_emb, d_emb);
        Self::from_parts(d_in, d_emb, proj, prototypes, scale)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn proj(&self) -> &[T] {
        &self.proj
    }

    pub fn prototypes(&self) -> &[T] {
        &self.prototypes
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.proj, &mut self.prototypes)
    }

    /// Same parameters in another storage type.
    pub fn cast<U: Scalar>(&self) -> CosineHead<U> {
        CosineHead {
            d_in: self.d_in,
            d_emb: self.d_emb,
            num_classes: self.num_classes,
            proj: self.proj.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            prototypes: self
                .prototypes
                .iter()
                .map(|v| U::from_f64(v.to_f64()))
                .collect(),
            scale: self.scale,
        }
    }

    /// Keeps `proj`, draws fresh prototypes for `new_num_classes` and
    /// recomputes the scale.
    pub fn reinit_classifier(&self, new_num_classes: usize, seed: u64) -> Result<Self, HeadError> {
        let scale = fixed_adacos_scale(new_num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = gaussian_fill(&mut rng, new_num_classes * self.d_emb, self.d_emb);
        Self::from_parts(self.d_in, self.d_emb, self.proj.clone(), prototypes, scale)
    }

    pub(crate) fn prepare(&self) -> Result<Prepared, HeadError> {
        let mut unit = Vec::with_capacity(self.prototypes.len());
        let mut norms = Vec::with_capacity(self.num_classes);
        for (c, row) in self.prototypes.chunks_exact(self.d_emb).enumerate() {
            let norm = row
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(HeadError::ZeroPrototype(c));
            }
            unit.extend(row.iter().map(|v| v.to_f64() / norm));
            norms.push(norm);
        }
        Ok(Prepared {
            unit_prototypes: unit,
            prototype_norms: norms,
        })
    }

    fn check_input(&self, x: &[f32]) -> Result<(), HeadError> {
        if x.len() != self.d_in {
            return Err(HeadError::ShapeMismatch {
                what: "feature vector",
                expected: self.d_in,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Unit embedding and cosine logits for one feature vector.
    pub fn forward(&self, x: &[f32]) -> Result<Forward, HeadError> {
        self.check_input(x)?;
        self.forward_prepared(&self.prepare()?, x)
    }

    pub(crate) fn forward_prepared(
        &self,
        prep: &Prepared,
        x: &[f32],
    ) -> Result<Forward, HeadError> {
        let mut z = vec![0.0f64; self.d_emb];
        for (&xi, row) in x.iter().zip(self.proj.chunks_exact(self.d_emb)) {
            let xi = f64::from(xi);
            for (zj, pij) in z.iter_mut().zip(row) {
                *zj += xi * pij.to_f64();
            }
        }
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !z_norm.is_finite() {
            return Err(HeadError::NonFinite("projection"));
        }
        if z_norm == 0.0 {
            return Err(HeadError::ZeroProjection);
        }
        let embedding: Vec<f64> = z.iter().map(|v| v / z_norm).collect();
        let cosines: Vec<f64> = prep
            .unit_prototypes
            .chunks_exact(self.d_emb)
            .map(|w| dot(&embedding, w))
            .collect();
        let logits = cosines.iter().map(|c| self.scale * c).collect();
        Ok(Forward {
            embedding,
            cosines,
            logits,
            projection_norm: z_norm,
        })
    }

    /// Analytic gradients of `weighted_ce_loss` for one sample.
    pub fn backward(
        &self,
        x: &[f32],
        label: usize,
        class_w: &ClassWeights,
        sample_w: f64,
    ) -> Result<HeadGradients, HeadError> {
        self.check_input(x)?;
        let cw = class_w.get(label).ok_or(HeadError::LabelOutOfRange {
            label,
            classes: class_w.len(),
        })?;
        loss::check_weight(sample_w)?;
        let prep = self.prepare()?;
        let fwd = self.forward_prepared(&prep, x)?;
        let mut grads = HeadGradients::zeros(self);
        self.accumulate_backward(&prep, &fwd, x, label, sample_w * cw, &mut grads)?;
        Ok(grads)
    }

    /// Adds `d(weight * CE)/d(params)` into `grads`.
    pub(crate) fn accumulate_backward(
        &self,
        prep: &Prepared,
        fwd: &Forward,
        x: &[f32],
        label: usize,
        weight: f64,
        grads: &mut HeadGradients,
    ) -> Result<(), HeadError> {
        if label >= self.num_classes {
            return Err(HeadError::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        let d = self.d_emb;
        let probs = softmax(&fwd.logits);
        // dL/dlogit_c, then dL/dcos_c = s * that.
        let dcos: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| {
                let target = if c == label { 1.0 } else { 0.0 };
                self.scale * (weight * (p - target))
            })
            .collect();

        // Through the prototype normalization: for u = w/|w|,
        // dL/dw = (g - <g,u> u) / |w| with g = dcos_c * e, <g,u> = dcos_c * cos_c.
        let mut g_emb = vec![0.0f64; d];
        for (c, &gc) in dcos.iter().enumerate() {
            let unit = &prep.unit_prototypes[c * d..(c + 1) * d];
            let inv_norm = 1.0 / prep.prototype_norms[c];
            let cos = fwd.cosines[c];
            let out = &mut grads.prototypes[c * d..(c + 1) * d];
            for j in 0..d {
                out[j] += gc * (fwd.embedding[j] - cos * unit[j]) * inv_norm;
                g_emb[j] += gc * unit[j];
            }
        }

        // Through the embedding normalization, then the linear layer.
        let radial = dot(&g_emb, &fwd.embedding);
        let inv_z = 1.0 / fwd.projection_norm;
        let g_z: Vec<f64> = g_emb
            .iter()
            .zip(&fwd.embedding)
            .map(|(g, e)| (g - radial * e) * inv_z)
            .collect();
        for (&xi, row) in x.iter().zip(grads.proj.chunks_exact_mut(d)) {
            let xi = f64::from(xi);
            for (out, gz) in row.iter_mut().zip(&g_z) {
                *out += xi * gz;
            }
        }
        Ok(())
    }
}

/// Embeds each row of `features` (`n x d_in`, row-major) into a normalized set.
pub fn extract_embeddings<T: Scalar>(
    head: &CosineHead<T>,
    features: &[f32],
    ids: Vec<String>,
) -> Result<EmbeddingSet, HeadError> {
    let expected = ids.len() * head.d_in;
    if features.len() != expected {
        return Err(HeadError::ShapeMismatch {
            what: "feature matrix",
            expected,
            actual: features.len(),
        });
    }
    let prep = head.prepare()?;
    let mut data = Vec::with_capacity(ids.len() * head.d_emb);
    for x in features.chunks_exact(head.d_in) {
        let fwd = head.forward_prepared(&prep, x)?;
        data.extend(fwd.embedding.iter().map(|&v| v as f32));
    }
    Ok(EmbeddingSet::with_flag(ids, head.d_emb, data, true)?)
}

/// Embeds every row of a feature set, keeping its ids.
pub fn embed_set<T: Scalar>(
    head: &CosineHead<T>,
    features: &EmbeddingSet,
) -> Result<EmbeddingSet, HeadError> {
    if features.dim() != head.d_in {
        return Err(HeadError::ShapeMismatch {
            what: "feature dimension",
            expected: head.d_in,
            actual: features.dim(),
        });
    }
    extract_embeddings(head, features.data(), features.ids().to_vec())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized prototypes, computed once per parameter state.
pub(crate) struct Prepared {
    unit_prototypes: Vec<f64>,
    prototype_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
    pub cosines: Vec<f64>,
    /// `scale * cosines`.
    pub logits: Vec<f64>,
    pub projection_norm: f64,
}

impl Forward {
    pub fn argmax(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &l)| {
                if l > best.1 {
                    (c, l)
                } else {
                    best
                }
            })
            .0
    }
}

/// Gradients shaped like the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub proj: Vec<f64>,
    pub prototypes: Vec<f64>,
}

impl HeadGradients {
    pub fn zeros<T: Scalar>(head: &CosineHead<T>) -> Self {
        Self {
            proj: vec![0.0; head.proj.len()],
            prototypes: vec![0.0; head.prototypes.len()],
        }
    }

    pub fn scale_by(&mut self, factor: f64) {
        for g in self.proj.iter_mut().chain(self.prototypes.iter_mut()) {
            *g *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.proj
            .iter()
            .chain(&self.prototypes)
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Head with d_in = d_emb = 2, identity projection and explicit prototypes.
    fn planar_head(prototypes: Vec<f64>, scale: f64) -> CosineHead<f64> {
        CosineHead::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0], prototypes, scale).unwrap()
    }

    #[test]
    fn parallel_and_orthogonal_prototypes() {
        let head = planar_head(vec![2.0, 0.0, 0.0, 5.0, -1.0, 0.0], 4.0);
        let fwd = head.forward(&[3.0, 0.0]).unwrap();
        assert_eq!(fwd.logits[0], 4.0);
        assert_eq!(fwd.logits[1], 0.0);
        assert_eq!(fwd.logits[2], -4.0);
        assert_eq!(fwd.argmax(), 0);
    }

    #[test]
    fn zero_inputs_are_errors() {
        let head = planar_head(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0], 1.0);
        assert_eq!(head.forward(&[0.0, 0.0]), Err(HeadError::ZeroProjection));
        let bad = planar_head(vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0], 1.0);
        assert_eq!(bad.forward(&[1.0, 0.0]), Err(HeadError::ZeroPrototype(1)));
        assert!(matches!(
            head.forward(&[1.0]),
            Err(HeadError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invariants_on_construction() {
        assert_eq!(
            CosineHead::<f32>::from_parts(1, 1, vec![1.0], vec![1.0, 1.0], 1.0),
            Err(HeadError::TooFewClasses(2))
        );
        assert!(CosineHead::<f32>::from_parts(1, 1, vec![1.0], vec![1.0; 3], 0.0).is_err());
        assert!(CosineHead::<f32>::from_parts(1, 1, vec![f32::NAN], vec![1.0; 3], 1.0).is_err());
        assert!(CosineHead::<f32>::init(4, 2, 2, 0).is_err());
    }

    #[test]
    fn zero_weight_gives_zero_gradients() {
        let head = CosineHead::<f64>::init(6, 4, 5, 3).unwrap();
        let x = [0.1, -0.4, 0.9, 0.3, -0.2, 0.5];
        let grads = head
            .backward(&x, 2, &ClassWeights::uniform(5), 0.0)
            .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        // Embedding coincides with prototype 0, others point away; a large
        // scale drives the softmax to a one-hot.
        let head = planar_head(vec![1.0, 0.0, -1.0, 0.0, -1.0, 0.0], 64.0);
        let grads = head
            .backward(&[1.0, 0.0], 0, &ClassWeights::uniform(3), 1.0)
            .unwrap();
        assert!(grads.max_abs() < 1e-6, "{}", grads.max_abs());
    }

    #[test]
    fn reinit_keeps_projection() {
        let head = CosineHead::<f32>::init(5, 3, 4, 11).unwrap();
        let same = head.reinit_classifier(4, 99).unwrap();
        assert_eq!(same.proj(), head.proj());
        assert_ne!(same.prototypes(), head.prototypes());
        assert_eq!(same.scale(), head.scale());
        assert_eq!(
            head.reinit_classifier(7, 5).unwrap(),
            head.reinit_classifier(7, 5).unwrap()
        );
        assert_eq!(
            head.reinit_classifier(2, 5),
            Err(HeadError::TooFewClasses(2))
        );

        let small = CosineHead::<f32>::from_parts(
            1,
            1,
            vec![1.0],
            vec![1.0; 81313],
            fixed_adacos_scale(81313).unwrap(),
        )
        .unwrap();
        let big = small.reinit_classifier(203_094, 1).unwrap();
        assert!((small.scale() - 15.989).abs() < 1e-3);
        assert!((big.scale() - 17.284).abs() < 1e-3);
    }

    #[test]
    fn extract_embeddings_contract() {
        let head = CosineHead::<f32>::init(3, 2, 3, 1).unwrap();
        let empty = extract_embeddings(&head, &[], Vec::new()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.dim(), 2);

        let features = [0.2, 0.4, -0.1, 0.2, 0.4, -0.1, 1.0, 0.0, 0.3];
        let ids = vec!["a".to_string(), "b".into(), "c".into()];
        let set = extract_embeddings(&head, &features, ids).unwrap();
        assert!(set.is_normalized());
        assert_eq!(set.row(0), set.row(1));
        for row in set.rows() {
            assert!((crate::embstore::row_norm(row) - 1.0).abs() < 1e-5);
        }
    }
}
