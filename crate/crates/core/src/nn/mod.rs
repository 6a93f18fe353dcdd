//! Minimal dense neural-network engine with hand-written backpropagation.
//!
//! Each forward pass records an explicit tape of per-layer caches that the
//! matching backward pass consumes. The model zoo is small and fixed: a tanh
//! MLP of adapted layers and a single-head self-attention block whose query
//! and value projections carry the adapters.

mod attention;
mod model;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use attention::{attention_block_forward, AttentionBlock};
pub use model::{finite_diff_gradient, Architecture, Model};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

use rand::RngCore;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Reborrows an optional RNG for one call.
pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Which matrix of a layer a parameter is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Base,
    IndividualA,
    IndividualB,
    RowA,
    RowB,
    Mixer,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Base,
        Role::IndividualA,
        Role::IndividualB,
        Role::RowA,
        Role::RowB,
        Role::Mixer,
    ];

    /// Tag used in the text container.
    pub fn tag(self) -> &'static str {
        match self {
            Role::Base => "W0",
            Role::IndividualA => "A_L",
            Role::IndividualB => "B_L",
            Role::RowA => "A_R",
            Role::RowB => "B_R",
            Role::Mixer => "G",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| Error::Payload(format!("unknown role `{s}`")))
    }
}

/// Small set of roles, used for trainable and shared sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct RoleSet(u8);

impl RoleSet {
    pub const EMPTY: RoleSet = RoleSet(0);

    pub fn of(roles: &[Role]) -> Self {
        RoleSet(roles.iter().fold(0, |acc, r| acc | r.bit()))
    }

    pub fn contains(self, role: Role) -> bool {
        self.0 & role.bit() != 0
    }

    pub fn insert(&mut self, role: Role) {
        self.0 |= role.bit();
    }

    pub fn remove(&mut self, role: Role) {
        self.0 &= !role.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Role> {
        Role::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

/// Identifies one matrix in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamRef {
    pub layer: usize,
    pub role: Role,
}

impl ParamRef {
    pub fn new(layer: usize, role: Role) -> Self {
        ParamRef { layer, role }
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}:{}", self.layer, self.role)
    }
}

/// Gradients keyed by parameter, iterated in a stable order.
pub type Grads = BTreeMap<ParamRef, Matrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean softmax cross-entropy over examples.
    CrossEntropy,
    /// `1/(2n) Σ ‖ŷ − y‖²`.
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(indices)),
        }
    }
}

/// Inputs plus targets. For sequence models each example spans
/// `tokens_per_example` consecutive input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
    pub tokens_per_example: usize,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        Self::with_tokens(inputs, targets, 1)
    }

    pub fn with_tokens(inputs: Matrix, targets: Targets, tokens_per_example: usize) -> Result<Self> {
        if tokens_per_example == 0 || inputs.rows() != targets.len() * tokens_per_example {
            return Err(Error::dim(
                "Batch",
                format!("{} input rows", targets.len() * tokens_per_example),
                inputs.rows(),
            ));
        }
        Ok(Batch {
            inputs,
            targets,
            tokens_per_example,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sub-batch of the given examples, in the given order.
    pub fn select(&self, examples: &[usize]) -> Batch {
        let t = self.tokens_per_example;
        let rows: Vec<usize> = examples
            .iter()
            .flat_map(|&e| e * t..(e + 1) * t)
            .collect();
        Batch {
            inputs: self.inputs.select_rows(&rows),
            targets: self.targets.select(examples),
            tokens_per_example: t,
        }
    }
}

/// Loss value and gradient with respect to the model output.
pub(crate) fn loss_and_grad(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let n = output.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_n = 1.0 / n as f64;
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            let mut grad = Matrix::zeros(n, output.cols());
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= output.cols() {
                    return Err(Error::dim("cross-entropy label", output.cols(), label));
                }
                let probs = softmax(output.row(i));
                loss -= probs[label].max(f64::MIN_POSITIVE).ln();
                let g = grad.row_mut(i);
                for (gj, p) in g.iter_mut().zip(&probs) {
                    *gj = p * inv_n;
                }
                g[label] -= inv_n;
            }
            Ok((loss * inv_n, grad))
        }
        (LossKind::Mse, Targets::Values(values)) => {
            if values.shape() != output.shape() {
                return Err(Error::dim(
                    "mse targets",
                    format!("{:?}", output.shape()),
                    format!("{:?}", values.shape()),
                ));
            }
            let diff = output.sub(values)?;
            let loss = 0.5 * inv_n * diff.frobenius_sq();
            Ok((loss, diff.scale(inv_n)))
        }
        _ => Err(Error::config("loss", "loss kind does not match target type")),
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(output: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| argmax(output.row(*i)) == label)
        .count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0 + 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_hand_value() {
        let (loss, grad) = loss_and_grad(
            LossKind::Mse,
            &Matrix::from_rows(&[&[0.0]]),
            &Targets::Values(Matrix::from_rows(&[&[1.0]])),
        )
        .unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad, Matrix::from_rows(&[&[-1.0]]));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, _) = loss_and_grad(
            LossKind::CrossEntropy,
            &Matrix::zeros(2, 4),
            &Targets::Classes(vec![0, 3]),
        )
        .unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn role_tags_round_trip() {
        for role in Role::ALL {
            assert_eq!(role.tag().parse::<Role>().unwrap(), role);
        }
        assert!("X".parse::<Role>().is_err());
    }

    #[test]
    fn batch_select_keeps_token_blocks() {
        let inputs = Matrix::from_rows(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let b = Batch::with_tokens(inputs, Targets::Classes(vec![5, 7]), 2).unwrap();
        let s = b.select(&[1]);
        assert_eq!(s.inputs, Matrix::from_rows(&[&[2.0], &[3.0]]));
        assert_eq!(s.targets, Targets::Classes(vec![7]));
    }
}
