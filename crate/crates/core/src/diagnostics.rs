//! Displacement traces, contraction fits, the convex theory mode and the
//! finite-difference gradient suite.

use std::fmt::{self, Write as _};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    run_federation, FederationConfig, FixedAlpha, LoraConfig, ModelBlueprint, ModelSpec, RoundSchedule, Strategy,
    Surrogate,
};
use crate::lora::{AdaptedLayer, LoraAdapter, Mixer};
use crate::matrix::Matrix;
use crate::nn::{finite_diff_gradient, AttentionBlock, Batch, LossKind, Model, OptimizerConfig, ParamRef, Role, RoleSet, Targets};
use crate::seed;
use crate::synth::{build_federation_data, ClientDataset, DataSizes, HeterogeneityConfig, HeterogeneityLevel};

/// `‖Z_k^{t+1} − Z_k^t‖` for one client, with the round's maximum alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub client: usize,
    pub displacement: f64,
    pub delta_max: f64,
    /// NaN until filled by the caller.
    pub train_loss: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    /// A one-client trace with the given `Δᵗ` sequence.
    pub fn from_deltas(deltas: &[f64]) -> Self {
        ConvergenceTrace {
            rows: deltas
                .iter()
                .enumerate()
                .map(|(t, &d)| TraceRow {
                    round: t,
                    client: 0,
                    displacement: d,
                    delta_max: d,
                    train_loss: f64::NAN,
                    eval_metric: f64::NAN,
                })
                .collect(),
        }
    }

    /// `Δᵗ` per round, in round order.
    pub fn deltas(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for row in &self.rows {
            match out.last_mut() {
                Some((r, d)) if *r == row.round => *d = d.max(row.displacement),
                _ => out.push((row.round, row.displacement)),
            }
        }
        out.sort_by_key(|(r, _)| *r);
        out.into_iter().map(|(_, d)| d).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,client,displacement,delta_max,train_loss,eval_metric\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.round, r.client, r.displacement, r.delta_max, r.train_loss, r.eval_metric
            );
        }
        s
    }
}

/// Per-client displacement between two snapshot sets. Each client snapshot is
/// its concatenated trainable set, matrix by matrix.
pub fn record_displacements(prev: &[Vec<Matrix>], next: &[Vec<Matrix>], round: usize) -> Result<Vec<TraceRow>> {
    if prev.len() != next.len() {
        return Err(Error::Diagnostics(format!(
            "snapshot sets cover {} and {} clients",
            prev.len(),
            next.len()
        )));
    }
    let mut rows = Vec::with_capacity(prev.len());
    for (client, (a, b)) in prev.iter().zip(next).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Diagnostics(format!(
                "client {client}: {} vs {} parameter matrices",
                a.len(),
                b.len()
            )));
        }
        let mut sq = 0.0;
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            if x.shape() != y.shape() {
                return Err(Error::Diagnostics(format!(
                    "client {client}, matrix {i}: shape {:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            sq += x.data().iter().zip(y.data()).map(|(p, q)| (q - p) * (q - p)).sum::<f64>();
        }
        rows.push(TraceRow {
            round,
            client,
            displacement: sq.sqrt(),
            delta_max: 0.0,
            train_loss: f64::NAN,
            eval_metric: f64::NAN,
        });
    }
    let max = rows.iter().map(|r| r.displacement).fold(0.0, f64::max);
    for r in &mut rows {
        r.delta_max = max;
    }
    Ok(rows)
}

/// Least-squares fit of `Δᵗ ≈ c + β·Δᵗ⁻¹` over `t ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionFit {
    pub beta: f64,
    pub intercept: f64,
    /// `ε` implied by the recursion `Δᵗ ≤ 2ε + βΔᵗ⁻¹`, i.e. `c/2`.
    pub epsilon: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub points: usize,
    /// Zero-variance regressor; `beta` is reported as 0.
    pub degenerate: bool,
}

impl ContractionFit {
    /// Fixed point `c / (1 − β)` of the fitted recursion, when `β < 1`.
    pub fn limit(&self) -> Option<f64> {
        (self.beta < 1.0).then(|| self.intercept / (1.0 - self.beta))
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "beta_hat: {}", self.beta);
        let _ = writeln!(s, "intercept: {}", self.intercept);
        let _ = writeln!(s, "epsilon_hat: {}", self.epsilon);
        let _ = writeln!(s, "residual_rms: {}", self.residual);
        let _ = writeln!(s, "points: {}", self.points);
        match self.limit() {
            Some(l) => {
                let _ = writeln!(s, "limit: {l}");
            }
            None => s.push_str("limit: none\n"),
        }
        if self.degenerate {
            s.push_str("note: zero-variance regressor, beta_hat set to 0\n");
        }
        s
    }
}

pub fn fit_contraction(trace: &ConvergenceTrace) -> Result<ContractionFit> {
    let deltas = trace.deltas();
    if deltas.len() < 4 {
        return Err(Error::Diagnostics(format!(
            "contraction fit needs at least 4 rounds, got {}",
            deltas.len()
        )));
    }
    if let Some(t) = deltas.iter().position(|d| !d.is_finite()) {
        return Err(Error::Diagnostics(format!("non-finite displacement at round {t}")));
    }
    let xs = &deltas[1..deltas.len() - 1];
    let ys = &deltas[2..];
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();

    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let degenerate = sxx <= (f64::EPSILON * scale).powi(2) * n;
    let (beta, intercept) = if degenerate { (0.0, my) } else { (sxy / sxx, my - sxy / sxx * mx) };
    let residual = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - beta * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ContractionFit {
        beta,
        intercept,
        epsilon: intercept / 2.0,
        residual,
        points: xs.len(),
        degenerate,
    })
}

/// Convex surrogate: one adapted linear layer per client, `A` frozen to
/// `[I_r | 0]`, fixed individual weight, L2 on `B`, plain full-batch descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryModeConfig {
    pub surrogate: bool,
    pub l2: f64,
    /// Fixed individual-branch weight.
    pub alpha: f64,
    pub frozen_a: bool,
    pub clients: usize,
    pub rounds: usize,
    /// Full-batch gradient steps per round.
    pub local_steps: usize,
    pub rank: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub train: usize,
    pub eval: usize,
    /// Defaults to `1/μ̂`.
    pub learning_rate: Option<f64>,
    /// Rounds excluded from the monotonicity check.
    pub burn_in: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for TheoryModeConfig {
    fn default() -> Self {
        TheoryModeConfig {
            surrogate: true,
            l2: 0.1,
            alpha: 0.8,
            frozen_a: true,
            clients: 4,
            rounds: 30,
            local_steps: 10,
            rank: 4,
            input_dim: 16,
            classes: 4,
            train: 200,
            eval: 100,
            learning_rate: None,
            burn_in: 3,
            seed: 0,
            jobs: 1,
        }
    }
}

impl TheoryModeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.surrogate {
            return Err(Error::config("surrogate", "theory mode runs only on the convex surrogate"));
        }
        if !self.frozen_a {
            return Err(Error::config("frozen_a", "a trainable A makes the surrogate nonconvex"));
        }
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return Err(Error::config("l2", "must be positive for strong convexity"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1]"));
        }
        if self.clients < 2 {
            return Err(Error::RowUndefined(self.clients));
        }
        if self.rounds < 4 {
            return Err(Error::config("rounds", "the contraction fit needs at least 4 rounds"));
        }
        for (key, v) in [
            ("local_steps", self.local_steps),
            ("rank", self.rank),
            ("input_dim", self.input_dim),
            ("classes", self.classes),
            ("train", self.train),
            ("eval", self.eval),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.rank > self.input_dim.min(self.classes) {
            return Err(Error::InvalidRank {
                rank: self.rank,
                d: self.input_dim,
                l: self.classes,
            });
        }
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config("learning_rate", "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        Strategy::FixedWeight(FixedAlpha::Value(self.alpha))
    }

    pub fn blueprint(&self) -> ModelBlueprint {
        ModelBlueprint {
            spec: ModelSpec::Mlp { hidden: Vec::new() },
            lora: LoraConfig {
                rank: self.rank,
                alpha: self.rank as f64,
                dropout: 0.0,
            },
            input_dim: self.input_dim,
            outputs: self.classes,
            tokens_per_example: 1,
            classification: true,
            surrogate: Some(Surrogate { l2: self.l2 }),
        }
    }

    pub fn data(&self) -> Result<Vec<ClientDataset>> {
        let mut het = HeterogeneityConfig::new(HeterogeneityLevel::High, self.clients);
        het.template.input_dim = self.input_dim;
        het.template.outputs = self.classes;
        build_federation_data(
            &het,
            DataSizes {
                train: self.train,
                eval: self.eval,
            },
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    Fail { reasons: Vec<String>, round: Option<usize> },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => f.write_str("PASS"),
            Verdict::Fail { reasons, round } => {
                f.write_str("FAIL")?;
                if let Some(r) = round {
                    write!(f, " at round {r}")?;
                }
                if !reasons.is_empty() {
                    write!(f, ": {}", reasons.join("; "))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TheoryReport {
    pub trace: ConvergenceTrace,
    pub fit: Option<ContractionFit>,
    /// Smoothness bound of the surrogate objective.
    pub mu_hat: f64,
    pub learning_rate: f64,
    /// `[round][client]` objective at every local step.
    pub step_losses: Vec<Vec<Vec<f64>>>,
    pub verdict: Verdict,
}

impl TheoryReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "verdict: {}", self.verdict);
        let _ = writeln!(s, "mu_hat: {}", self.mu_hat);
        let _ = writeln!(s, "learning_rate: {}", self.learning_rate);
        let deltas = self.trace.deltas();
        if let (Some(first), Some(last)) = (deltas.first(), deltas.last()) {
            let _ = writeln!(s, "delta_first: {first}");
            let _ = writeln!(s, "delta_last: {last}");
        }
        if let Some(fit) = &self.fit {
            s.push_str(&fit.report());
        }
        s
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn power_iteration(m: &Matrix, max_iters: usize, tol: f64) -> Result<f64> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::dim("power iteration", "square matrix", format!("{:?}", m.shape())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = Matrix::from_vec(n, 1, vec![1.0 / (n as f64).sqrt(); n])?;
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let w = m.matmul(&v)?;
        let norm = w.frobenius();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        v = w.scale(1.0 / norm);
        let done = (next - lambda).abs() <= tol * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    Ok(lambda)
}

/// Upper bound on the curvature of client `k`'s surrogate objective in `B`:
/// `(α·s)²·½·λ_max(UᵀU/n) + λ`, with `u_i = A x_i` and `½` bounding the
/// softmax cross-entropy Hessian.
pub fn surrogate_smoothness(model: &Model, inputs: &Matrix, alpha: f64) -> Result<f64> {
    let layer = model
        .layers()
        .into_iter()
        .find(|l| l.is_adapted())
        .ok_or_else(|| Error::Diagnostics("surrogate has no adapted layer".into()))?;
    let adapter = layer.individual.as_ref().expect("adapted layer");
    let u = inputs.matmul_t(&adapter.a)?;
    let gram = u.t_matmul(&u)?.scale(1.0 / inputs.rows().max(1) as f64);
    let top = power_iteration(&gram, 10_000, 1e-14)?;
    Ok((alpha * adapter.scale).powi(2) * 0.5 * top + model.l2())
}

pub fn theory_mode_run(config: &TheoryModeConfig) -> Result<TheoryReport> {
    config.validate()?;
    let data = config.data()?;
    theory_mode_run_with_data(config, data)
}

/// Theory mode on caller-supplied client data.
pub fn theory_mode_run_with_data(config: &TheoryModeConfig, data: Vec<ClientDataset>) -> Result<TheoryReport> {
    config.validate()?;
    if data.len() != config.clients {
        return Err(Error::config("clients", format!("{} datasets for {} clients", data.len(), config.clients)));
    }
    let blueprint = config.blueprint();
    let strategy = config.strategy();
    let mut mu_hat = 0.0f64;
    for d in &data {
        let model = blueprint.build(strategy, config.clients, config.seed, d.client)?;
        mu_hat = mu_hat.max(surrogate_smoothness(&model, &d.train.inputs, config.alpha)?);
    }
    let learning_rate = config.learning_rate.unwrap_or(1.0 / mu_hat);
    let batch_size = data.iter().map(|d| d.train.len()).max().unwrap_or(1);

    let fed = FederationConfig {
        strategy,
        schedule: RoundSchedule {
            rounds: config.rounds,
            local_epochs: config.local_steps,
            batch_size,
            eval_every: 1,
        },
        optimizer: OptimizerConfig::sgd(learning_rate),
        blueprint,
        seed: config.seed,
        jobs: config.jobs,
    };
    let out = match run_federation(&fed, data) {
        Ok(out) => out,
        Err(Error::Client { round, source, .. }) if matches!(*source, Error::NonFinite { .. }) => {
            return Ok(TheoryReport {
                trace: ConvergenceTrace::default(),
                fit: None,
                mu_hat,
                learning_rate,
                step_losses: Vec::new(),
                verdict: Verdict::Fail {
                    reasons: vec![format!("diverged: {source}")],
                    round: Some(round),
                },
            });
        }
        Err(e) => return Err(e),
    };

    let fit = fit_contraction(&out.trace)?;
    let verdict = judge(&out.trace.deltas(), &fit, config.burn_in);
    Ok(TheoryReport {
        trace: out.trace,
        fit: Some(fit),
        mu_hat,
        learning_rate,
        step_losses: out.step_losses,
        verdict,
    })
}

fn judge(deltas: &[f64], fit: &ContractionFit, burn_in: usize) -> Verdict {
    let mut reasons = Vec::new();
    let mut round = None;
    if !(fit.beta < 1.0) {
        reasons.push(format!("beta_hat {} is not below 1", fit.beta));
    }
    let first = deltas[0];
    let tol = 1e-9 * first;
    for t in (burn_in + 1).max(1)..deltas.len() {
        if deltas[t] > deltas[t - 1] + tol {
            reasons.push(format!("displacement grew at round {t}"));
            round = Some(t);
            break;
        }
    }
    let last = deltas[deltas.len() - 1];
    if !(last < first / 10.0) {
        reasons.push(format!("final displacement {last} is not below {}", first / 10.0));
    }
    if reasons.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail { reasons, round }
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

/// Models covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZooModel {
    /// Two FedALT layers with random adapters, RoW, mixers and trainable bases.
    FedAltMlp,
    /// Fixed-weight layer followed by a plain trainable head.
    FixedMlp,
    /// Attention block with adapters on q and v.
    AttentionQv,
    /// Single-adapter regression network.
    Regression,
    /// Plain network with trainable base weights only.
    BaseMlp,
}

impl ZooModel {
    pub const ALL: [ZooModel; 5] = [
        ZooModel::FedAltMlp,
        ZooModel::FixedMlp,
        ZooModel::AttentionQv,
        ZooModel::Regression,
        ZooModel::BaseMlp,
    ];
}

impl fmt::Display for ZooModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZooModel::FedAltMlp => "fedalt-mlp",
            ZooModel::FixedMlp => "fixed-mlp",
            ZooModel::AttentionQv => "attention-qv",
            ZooModel::Regression => "regression",
            ZooModel::BaseMlp => "base-mlp",
        })
    }
}

fn random_adapter(d: usize, l: usize, r: usize, rng: &mut impl Rng) -> LoraAdapter {
    LoraAdapter {
        a: Matrix::random_normal(r, d, 0.5, rng),
        b: Matrix::random_normal(l, r, 0.5, rng),
        scale: rng.random_range(0.5..2.0),
    }
}

fn random_fedalt(id: usize, d: usize, l: usize, rng: &mut impl Rng) -> Result<AdaptedLayer> {
    let r = rng.random_range(1..=d.min(l));
    let base = Matrix::random_normal(l, d, 0.5, rng);
    let individual = random_adapter(d, l, r, rng);
    let row = random_adapter(d, l, r, rng);
    let mixer = Mixer {
        g: Matrix::random_normal(2, d, 1.0, rng),
        owner: 0,
    };
    let mut layer = AdaptedLayer::fedalt(id, base, individual, row, mixer)?;
    layer.trainable = RoleSet::of(&Role::ALL);
    Ok(layer)
}

fn trainable_plain(id: usize, d: usize, l: usize, rng: &mut impl Rng) -> AdaptedLayer {
    let mut layer = AdaptedLayer::plain(id, Matrix::random_normal(l, d, 0.5, rng));
    layer.trainable = RoleSet::of(&[Role::Base]);
    layer
}

fn random_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Targets {
    Targets::Classes((0..n).map(|_| rng.random_range(0..classes)).collect())
}

/// A randomized member of the zoo with a matching random batch.
pub fn zoo_model(kind: ZooModel, seed: u64) -> Result<(Model, Batch)> {
    let mut rng = seed::rng(seed, kind as u64);
    let d = rng.random_range(2..=5);
    let h = rng.random_range(2..=5);
    let c = rng.random_range(2..=4);
    let n = rng.random_range(3..=6);
    match kind {
        ZooModel::FedAltMlp => {
            let layers = vec![random_fedalt(0, d, h, &mut rng)?, random_fedalt(1, h, c, &mut rng)?];
            let model = Model::mlp(layers, LossKind::CrossEntropy)?;
            let x = Matrix::random_normal(n, d, 1.0, &mut rng);
            Ok((model, Batch::new(x, random_labels(n, c, &mut rng))?))
        }
        ZooModel::FixedMlp => {
            let r = rng.random_range(1..=d.min(h));
            let alpha = rng.random_range(0.0..=1.0);
            let base = Matrix::random_normal(h, d, 0.5, &mut rng);
            let individual = random_adapter(d, h, r, &mut rng);
            let row = random_adapter(d, h, r, &mut rng);
            let mut first = AdaptedLayer::fixed(0, base, individual, row, alpha)?;
            first.trainable = RoleSet::of(&[Role::Base, Role::IndividualA, Role::IndividualB, Role::RowA, Role::RowB]);
            let layers = vec![first, trainable_plain(1, h, c, &mut rng)];
            let model = Model::mlp(layers, LossKind::CrossEntropy)?.with_l2(rng.random_range(0.0..0.5));
            let x = Matrix::random_normal(n, d, 1.0, &mut rng);
            Ok((model, Batch::new(x, random_labels(n, c, &mut rng))?))
        }
        ZooModel::AttentionQv => {
            let seq = rng.random_range(1..=3);
            let block = AttentionBlock {
                query: random_fedalt(0, d, d, &mut rng)?,
                key: trainable_plain(1, d, d, &mut rng),
                value: random_fedalt(2, d, d, &mut rng)?,
            };
            let head = trainable_plain(3, d, c, &mut rng);
            let model = Model::attention(block, head, seq, LossKind::CrossEntropy)?;
            let x = Matrix::random_normal(n * seq, d, 1.0, &mut rng);
            Ok((model, Batch::with_tokens(x, random_labels(n, c, &mut rng), seq)?))
        }
        ZooModel::Regression => {
            let r = rng.random_range(1..=d.min(h));
            let base = Matrix::random_normal(h, d, 0.5, &mut rng);
            let mut first = AdaptedLayer::single(0, base, random_adapter(d, h, r, &mut rng))?;
            first.trainable.insert(Role::Base);
            let layers = vec![first, trainable_plain(1, h, c, &mut rng)];
            let model = Model::mlp(layers, LossKind::Mse)?;
            let x = Matrix::random_normal(n, d, 1.0, &mut rng);
            let y = Matrix::random_normal(n, c, 1.0, &mut rng);
            Ok((model, Batch::new(x, Targets::Values(y))?))
        }
        ZooModel::BaseMlp => {
            let layers = vec![trainable_plain(0, d, h, &mut rng), trainable_plain(1, h, c, &mut rng)];
            let model = Model::mlp(layers, LossKind::CrossEntropy)?;
            let x = Matrix::random_normal(n, d, 1.0, &mut rng);
            Ok((model, Batch::new(x, random_labels(n, c, &mut rng))?))
        }
    }
}

/// `‖g − f‖ / max(‖g‖, ‖f‖, 1e-8)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.frobenius().max(numeric.frobenius()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub model: ZooModel,
    pub seed: u64,
    pub param: ParamRef,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub models_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADIENT_TOLERANCE
    }

    /// Roles that received at least one check.
    pub fn roles_covered(&self) -> RoleSet {
        let mut set = RoleSet::EMPTY;
        for e in &self.entries {
            set.insert(e.param.role);
        }
        set
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Backprop against central differences for every trainable matrix.
pub fn check_model_gradients(model: &Model, batch: &Batch) -> Result<Vec<(ParamRef, f64)>> {
    let (_, grads) = model.backprop(batch, None)?;
    model
        .trainable_refs()
        .into_iter()
        .map(|p| {
            let numeric = finite_diff_gradient(model, batch, p, FD_STEP)?;
            let analytic = grads
                .get(&p)
                .ok_or_else(|| Error::Diagnostics(format!("no gradient for {p}")))?;
            Ok((p, relative_error(analytic, &numeric)))
        })
        .collect()
}

/// Runs every zoo model at every seed.
pub fn gradient_check_suite(models: &[ZooModel], seeds: &[u64]) -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    let mut models_checked = 0;
    for &kind in models {
        for &s in seeds {
            let (model, batch) = zoo_model(kind, s)?;
            for (param, rel_error) in check_model_gradients(&model, &batch)? {
                entries.push(GradCheckEntry {
                    model: kind,
                    seed: s,
                    param,
                    rel_error,
                });
            }
            models_checked += 1;
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        models_checked,
    })
}
