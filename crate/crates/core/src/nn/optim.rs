use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Grads, Model, ParamRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn adamw(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            learning_rate,
            ..Default::default()
        }
    }

    /// Zero learning rates are accepted here (they make a run a no-op);
    /// experiment configs demand a strictly positive rate.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
    steps: i32,
}

/// Per-parameter AdamW moments; empty for SGD.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    moments: BTreeMap<ParamRef, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Applies one update to every parameter that has a gradient.
///
/// Gradients for parameters the model does not mark trainable are rejected,
/// so frozen matrices are never written.
pub fn optimizer_step(model: &mut Model, grads: &Grads, config: &OptimizerConfig, state: &mut OptimizerState) -> Result<()> {
    config.validate()?;
    for (p, g) in grads {
        if !model.is_trainable(*p) {
            return Err(Error::config("grads", format!("{p} is not a trainable parameter")));
        }
        let param = model.param(*p).expect("trainable implies present");
        if param.shape() != g.shape() {
            return Err(Error::dim(
                "optimizer_step",
                format!("{p} {:?}", param.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }

    let lr = config.learning_rate;
    for (p, g) in grads {
        let param = model.param_mut(*p).expect("validated above");
        match config.kind {
            OptimizerKind::Sgd => {
                for (w, gv) in param.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gv;
                }
            }
            OptimizerKind::Adamw => {
                let mom = state.moments.entry(*p).or_insert_with(|| Moments {
                    m: Matrix::zeros(g.rows(), g.cols()),
                    v: Matrix::zeros(g.rows(), g.cols()),
                    steps: 0,
                });
                mom.steps += 1;
                let bc1 = 1.0 - config.beta1.powi(mom.steps);
                let bc2 = 1.0 - config.beta2.powi(mom.steps);
                let decay = 1.0 - lr * config.weight_decay;
                let data = param.data_mut();
                let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
                for i in 0..data.len() {
                    let gv = g.data()[i];
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gv;
                    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gv * gv;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] *= decay;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::AdaptedLayer;
    use crate::nn::{LossKind, Role, RoleSet};

    fn scalar(w: f64) -> Model {
        let mut layer = AdaptedLayer::plain(0, Matrix::from_rows(&[&[w]]));
        layer.trainable = RoleSet::of(&[Role::Base]);
        Model::mlp(vec![layer], LossKind::Mse).unwrap()
    }

    fn grad(v: f64) -> Grads {
        let mut g = Grads::new();
        g.insert(ParamRef::new(0, Role::Base), Matrix::from_rows(&[&[v]]));
        g
    }

    fn weight(model: &Model) -> f64 {
        model.param(ParamRef::new(0, Role::Base)).unwrap()[(0, 0)]
    }

    #[test]
    fn sgd_step() {
        let mut model = scalar(1.0);
        optimizer_step(&mut model, &grad(2.0), &OptimizerConfig::sgd(0.1), &mut OptimizerState::new()).unwrap();
        assert!((weight(&model) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_bit_exact() {
        for cfg in [OptimizerConfig::sgd(0.0), OptimizerConfig::adamw(0.0)] {
            let mut model = scalar(0.123456789);
            let before = model.clone();
            let mut state = OptimizerState::new();
            for _ in 0..3 {
                optimizer_step(&mut model, &grad(5.0), &cfg, &mut state).unwrap();
            }
            assert_eq!(weight(&model).to_bits(), weight(&before).to_bits());
        }
    }

    /// Scalar AdamW written out from the recursion, independent of the
    /// matrix implementation.
    fn adamw_reference(mut p: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * wd * p;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn adamw_first_step() {
        let mut model = scalar(1.0);
        optimizer_step(&mut model, &grad(1.0), &OptimizerConfig::adamw(1e-3), &mut OptimizerState::new()).unwrap();
        let expected = adamw_reference(1.0, &[1.0], 1e-3, 0.0);
        assert!((weight(&model) - expected).abs() < 1e-15);
        // m̂ = v̂ = 1 on the first step: a decrease of lr/(1 + eps)
        assert!((1.0 - weight(&model) - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_reference_over_steps() {
        let grads = [1.0, -0.5, 2.0, 0.25, -3.0];
        let cfg = OptimizerConfig {
            weight_decay: 0.01,
            ..OptimizerConfig::adamw(1e-2)
        };
        let mut model = scalar(0.7);
        let mut state = OptimizerState::new();
        for g in grads {
            optimizer_step(&mut model, &grad(g), &cfg, &mut state).unwrap();
        }
        assert!((weight(&model) - adamw_reference(0.7, &grads, 1e-2, 0.01)).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = scalar(1.0);
        let mut g = Grads::new();
        g.insert(ParamRef::new(0, Role::Base), Matrix::zeros(2, 1));
        let err = optimizer_step(&mut model, &g, &OptimizerConfig::sgd(0.1), &mut OptimizerState::new());
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn frozen_grads_rejected() {
        let mut model = scalar(1.0);
        model.layers_mut()[0].trainable = RoleSet::EMPTY;
        let before = model.clone();
        let err = optimizer_step(&mut model, &grad(1.0), &OptimizerConfig::sgd(0.1), &mut OptimizerState::new());
        assert!(err.is_err());
        assert_eq!(model, before);
    }
}
