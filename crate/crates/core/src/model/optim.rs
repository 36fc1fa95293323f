use super::params::{Gradient, ParameterSet};
use super::ModelError;

/// One plain SGD step: `params - lr * (grad + extra)`.
pub fn sgd_step(
    params: &ParameterSet,
    grad: &Gradient,
    lr: f64,
    extra: Option<&Gradient>,
) -> Result<ParameterSet, ModelError> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(ModelError::LearningRate(lr));
    }
    params.check_congruent(grad)?;
    if let Some(extra) = extra {
        params.check_congruent(extra)?;
    }
    let mut out = params.clone();
    out.add_scaled(grad, -lr);
    if let Some(extra) = extra {
        out.add_scaled(extra, -lr);
    }
    Ok(out)
}

/// Heavy-ball momentum over [`sgd_step`]: `v = mu * v + g`, `params -= lr * v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    mu: f64,
    velocity: Option<Gradient>,
}

impl Momentum {
    pub fn new(mu: f64) -> Self {
        Self { mu, velocity: None }
    }

    /// Apply one step in place. `grad` already includes any extra terms.
    pub fn step(&mut self, params: &mut ParameterSet, grad: &Gradient, lr: f64) -> Result<(), ModelError> {
        if self.mu == 0.0 {
            *params = sgd_step(params, grad, lr, None)?;
            return Ok(());
        }
        let velocity = match self.velocity.take() {
            Some(mut v) => {
                v.check_congruent(grad)?;
                for (vv, g) in v.values_mut().zip(grad.values()) {
                    *vv = self.mu * *vv + g;
                }
                v
            }
            None => grad.clone(),
        };
        *params = sgd_step(params, &velocity, lr, None)?;
        self.velocity = Some(velocity);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerParams;
    use crate::tensor::Tensor;

    fn set(w: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![LayerParams {
            id: "fc1".into(),
            weight: Tensor::new(vec![1, w.len()], w.to_vec()).unwrap(),
            bias: Tensor::zeros(&[1]),
        }])
        .unwrap()
    }

    #[test]
    fn step_arithmetic() {
        let out = sgd_step(&set(&[1.0, 1.0]), &set(&[1.0, 2.0]), 0.1, None).unwrap();
        assert_eq!(out.layers()[0].weight.data(), &[0.9, 0.8]);
    }

    #[test]
    fn zero_gradient_and_zero_extra_are_identities() {
        let p = set(&[0.3, -2.0]);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.5, None).unwrap(), p);
        let g = set(&[1.0, -1.0]);
        let zero_rho = p.zeros_like();
        assert_eq!(sgd_step(&p, &g, 0.5, Some(&zero_rho)).unwrap(), sgd_step(&p, &g, 0.5, None).unwrap());
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let p = set(&[1.0]);
        assert!(sgd_step(&p, &p, 0.0, None).is_err());
        assert!(sgd_step(&p, &p, f64::NAN, None).is_err());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = set(&[0.0]);
        let g = set(&[1.0]);
        let mut opt = Momentum::new(0.9);
        opt.step(&mut p, &g, 1.0).unwrap();
        opt.step(&mut p, &g, 1.0).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p.layers()[0].weight.data()[0] + 2.9).abs() < 1e-12);
    }
}
