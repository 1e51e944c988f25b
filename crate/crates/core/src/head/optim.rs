//! SGD with momentum and L2 weight decay.

use super::{CosineHead, HeadError, HeadGradients, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(HeadError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HeadError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(HeadError::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(HeadError::InvalidConfig(
                "batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum buffers, shaped like the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub proj: Vec<f64>,
    pub prototypes: Vec<f64>,
}

impl Velocity {
    pub fn zeros<T: Scalar>(head: &CosineHead<T>) -> Self {
        Self {
            proj: vec![0.0; head.proj().len()],
            prototypes: vec![0.0; head.prototypes().len()],
        }
    }
}

/// One update of every parameter:
///
/// ```text
/// g' = g + weight_decay * theta
/// v  = momentum * v + g'
/// theta -= learning_rate * v
/// ```
pub fn sgd_step<T: Scalar>(
    head: &mut CosineHead<T>,
    grads: &HeadGradients,
    velocity: &mut Velocity,
    config: &TrainConfig,
) -> Result<(), HeadError> {
    let (proj, prototypes) = head.params_mut();
    for (what, params, g, v) in [
        ("proj", proj, &grads.proj, &mut velocity.proj),
        (
            "prototypes",
            prototypes,
            &grads.prototypes,
            &mut velocity.prototypes,
        ),
    ] {
        if g.len() != params.len() || v.len() != params.len() {
            return Err(HeadError::ShapeMismatch {
                what,
                expected: params.len(),
                actual: if g.len() != params.len() {
                    g.len()
                } else {
                    v.len()
                },
            });
        }
    }
    let (proj, prototypes) = head.params_mut();
    update(proj, &grads.proj, &mut velocity.proj, config);
    update(
        prototypes,
        &grads.prototypes,
        &mut velocity.prototypes,
        config,
    );
    Ok(())
}

fn update<T: Scalar>(params: &mut [T], grads: &[f64], velocity: &mut [f64], config: &TrainConfig) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let theta = p.to_f64();
        let g = g + config.weight_decay * theta;
        *v = config.momentum * *v + g;
        *p = T::from_f64(theta - config.learning_rate * *v);
    }
}
