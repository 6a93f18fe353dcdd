//! Synthetic heterogeneous client tasks.
//!
//! Every task is a frozen random teacher. Teachers mix a component shared by
//! all tasks (the "world") with a task-specific component, and the
//! label-permuted kind additionally relabels classes. Clients assigned the
//! same task share its teacher; the heterogeneity level controls how many
//! distinct tasks the clients cover.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Container;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{argmax, Batch, Targets};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TeacherMlpRegression,
    LinearClassification,
    LabelPermutedClassification,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::TeacherMlpRegression)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    pub input_dim: usize,
    /// Classes for classification, output width for regression.
    pub outputs: usize,
    pub teacher_seed: u64,
    /// Seed of the component shared by all tasks.
    pub world_seed: u64,
    /// Weight of the task-specific component, in `[0, 1]`.
    pub specificity: f64,
    pub noise_std: f64,
    pub tokens_per_example: usize,
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.outputs == 0 || (self.kind.is_classification() && self.outputs < 2) {
            return Err(Error::config("outputs", "need at least 2 classes or 1 regression output"));
        }
        if self.tokens_per_example == 0 {
            return Err(Error::config("tokens_per_example", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.specificity) {
            return Err(Error::config("specificity", "must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    /// `label = perm[argmax(W·x + noise)]`.
    Linear { weights: Matrix, permutation: Vec<usize> },
    /// `y = V·tanh(U·x) + noise`.
    Mlp { hidden: Matrix, output: Matrix },
}

impl Teacher {
    /// Binary teacher whose label is `[w·x > 0]`.
    pub fn binary(w: &[f64]) -> Self {
        let mut weights = Matrix::zeros(2, w.len());
        weights.row_mut(1).copy_from_slice(w);
        Teacher::Linear {
            weights,
            permutation: vec![0, 1],
        }
    }

    /// Replaces the label permutation of a linear teacher.
    pub fn with_permutation(self, permutation: Vec<usize>) -> Self {
        match self {
            Teacher::Linear { weights, .. } => Teacher::Linear { weights, permutation },
            other => other,
        }
    }

    /// Flattened teacher parameters (permutation excluded).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Teacher::Linear { weights, .. } => weights.data().to_vec(),
            Teacher::Mlp { hidden, output } => hidden.data().iter().chain(output.data()).copied().collect(),
        }
    }
}

/// A frozen teacher plus the sampling recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub teacher: Teacher,
}

fn jitter(values: &mut [f64], noise: f64, rng: &mut impl Rng) {
    if noise > 0.0 {
        for v in values {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise * z;
        }
    }
}

fn blend<R: Rng>(rows: usize, cols: usize, specificity: f64, world: &mut R, own: &mut R) -> Matrix {
    let shared = Matrix::random_normal(rows, cols, 1.0, world);
    let specific = Matrix::random_normal(rows, cols, 1.0, own);
    let mut m = shared.scale((1.0 - specificity).sqrt());
    m.axpy(specificity.sqrt(), &specific).expect("same shape");
    m
}

pub fn make_task(spec: TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut world = seed::rng(spec.world_seed, stream::WORLD);
    let mut own = seed::rng(spec.teacher_seed, 0);
    let d = spec.input_dim;
    let teacher = match spec.kind {
        TaskKind::LinearClassification | TaskKind::LabelPermutedClassification => {
            // unit-variance logits for x ~ N(0, I)
            let weights = blend(spec.outputs, d, spec.specificity, &mut world, &mut own).scale(1.0 / (d as f64).sqrt());
            let mut permutation: Vec<usize> = (0..spec.outputs).collect();
            if spec.kind == TaskKind::LabelPermutedClassification {
                let mut perm_rng = seed::rng(spec.teacher_seed, 1);
                permutation.shuffle(&mut perm_rng);
            }
            Teacher::Linear { weights, permutation }
        }
        TaskKind::TeacherMlpRegression => {
            let width = 2 * d;
            let hidden = blend(width, d, spec.specificity, &mut world, &mut own).scale(1.0 / (d as f64).sqrt());
            let output = blend(spec.outputs, width, spec.specificity, &mut world, &mut own).scale(1.0 / (width as f64).sqrt());
            Teacher::Mlp { hidden, output }
        }
    };
    Ok(Task { spec, teacher })
}

impl Task {
    /// Labels or values for pooled inputs (one row per example).
    fn label(&self, pooled: &Matrix, rng: &mut impl Rng) -> Result<Targets> {
        let noise = self.spec.noise_std;
        match &self.teacher {
            Teacher::Linear { weights, permutation } => {
                let mut logits = pooled.matmul_t(weights)?;
                jitter(logits.data_mut(), noise, rng);
                let labels = (0..logits.rows()).map(|i| permutation[argmax(logits.row(i))]).collect();
                Ok(Targets::Classes(labels))
            }
            Teacher::Mlp { hidden, output } => {
                let mut y = pooled.matmul_t(hidden)?.map(f64::tanh).matmul_t(output)?;
                jitter(y.data_mut(), noise, rng);
                Ok(Targets::Values(y))
            }
        }
    }

    /// Draws `n` i.i.d. examples with `N(0, I)` tokens. For multi-token
    /// examples the teacher sees the token mean rescaled to unit variance.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Batch> {
        let t = self.spec.tokens_per_example;
        let d = self.spec.input_dim;
        let inputs = Matrix::random_normal(n * t, d, 1.0, rng);
        let mut pooled = Matrix::zeros(n, d);
        let s = 1.0 / (t as f64).sqrt();
        for e in 0..n {
            for k in 0..t {
                for (p, v) in pooled.row_mut(e).iter_mut().zip(inputs.row(e * t + k)) {
                    *p += v * s;
                }
            }
        }
        let targets = self.label(&pooled, rng)?;
        Batch::with_tokens(inputs, targets, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeterogeneityLevel {
    High,
    Mild,
    Low,
}

impl std::str::FromStr for HeterogeneityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(HeterogeneityLevel::High),
            "mild" => Ok(HeterogeneityLevel::Mild),
            "low" => Ok(HeterogeneityLevel::Low),
            _ => Err(Error::config("het", format!("unknown level `{s}` (high, mild, low)"))),
        }
    }
}

/// Task family and shape shared by every client of a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskTemplate {
    pub classification: bool,
    pub input_dim: usize,
    pub outputs: usize,
    pub specificity: f64,
    pub noise_std: f64,
    pub tokens_per_example: usize,
}

impl Default for TaskTemplate {
    fn default() -> Self {
        TaskTemplate {
            classification: true,
            input_dim: 16,
            outputs: 4,
            specificity: 0.5,
            noise_std: 0.1,
            tokens_per_example: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityConfig {
    pub level: HeterogeneityLevel,
    pub clients: usize,
    pub template: TaskTemplate,
}

impl HeterogeneityConfig {
    pub fn new(level: HeterogeneityLevel, clients: usize) -> Self {
        HeterogeneityConfig {
            level,
            clients,
            template: TaskTemplate::default(),
        }
    }

    /// Distinct tasks for this level: all clients, three quarters of them, or two.
    pub fn task_count(&self) -> Result<usize> {
        let k = self.clients;
        if k == 0 {
            return Err(Error::config("clients", "need at least one client"));
        }
        match self.level {
            HeterogeneityLevel::High => Ok(k),
            HeterogeneityLevel::Mild if k >= 3 => Ok(((3 * k + 2) / 4).min(k - 1)),
            HeterogeneityLevel::Low if k >= 2 => Ok(2),
            level => Err(Error::config("het", format!("level {level:?} needs more than {k} clients"))),
        }
    }

    /// Task index of every client.
    pub fn assignment(&self) -> Result<Vec<usize>> {
        let tasks = self.task_count()?;
        Ok((0..self.clients).map(|k| k % tasks).collect())
    }

    fn task_kind(&self, task: usize) -> TaskKind {
        if !self.template.classification {
            TaskKind::TeacherMlpRegression
        } else if task % 2 == 0 {
            TaskKind::LinearClassification
        } else {
            TaskKind::LabelPermutedClassification
        }
    }

    pub fn tasks(&self, seed: u64) -> Result<Vec<Task>> {
        let t = &self.template;
        (0..self.task_count()?)
            .map(|j| {
                make_task(TaskSpec {
                    id: j,
                    kind: self.task_kind(j),
                    input_dim: t.input_dim,
                    outputs: t.outputs,
                    teacher_seed: seed::derive_seed(seed, stream::TASK + j as u64),
                    world_seed: seed,
                    specificity: t.specificity,
                    noise_std: t.noise_std,
                    tokens_per_example: t.tokens_per_example,
                })
            })
            .collect()
    }
}

/// Per-client example counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub eval: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes { train: 600, eval: 300 }
    }
}

impl DataSizes {
    /// Splits the default 8-client total evenly over `clients`.
    pub fn for_clients(clients: usize) -> Self {
        let base = DataSizes::default();
        DataSizes {
            train: base.train * 8 / clients.max(1),
            eval: base.eval * 8 / clients.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client: usize,
    pub task: usize,
    pub train: Batch,
    pub eval: Batch,
}

impl ClientDataset {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset", self.client, 0);
        c.meta.insert("task".into(), self.task.to_string());
        c.meta.insert("tokens_per_example".into(), self.train.tokens_per_example.to_string());
        for (name, batch) in [("train", &self.train), ("eval", &self.eval)] {
            c.push(0, format!("X_{name}"), batch.inputs.clone());
            let y = match &batch.targets {
                Targets::Classes(labels) => {
                    c.meta.insert("targets".into(), "classes".into());
                    Matrix::from_vec(labels.len(), 1, labels.iter().map(|&l| l as f64).collect()).expect("n x 1")
                }
                Targets::Values(v) => {
                    c.meta.insert("targets".into(), "values".into());
                    v.clone()
                }
            };
            c.push(0, format!("Y_{name}"), y);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = |k: &str| c.meta.get(k).ok_or_else(|| Error::Payload(format!("dataset missing meta `{k}`")));
        let task: usize = meta("task")?.parse().map_err(|_| Error::Payload("bad task id".into()))?;
        let tokens: usize = meta("tokens_per_example")?
            .parse()
            .map_err(|_| Error::Payload("bad tokens_per_example".into()))?;
        let classes = match meta("targets")?.as_str() {
            "classes" => true,
            "values" => false,
            other => return Err(Error::Payload(format!("unknown target type `{other}`"))),
        };
        let get = |role: &str| c.get(0, role).ok_or_else(|| Error::Payload(format!("dataset missing `{role}`")));
        let batch = |name: &str| -> Result<Batch> {
            let x = get(&format!("X_{name}"))?.clone();
            let y = get(&format!("Y_{name}"))?;
            let targets = if classes {
                Targets::Classes(y.data().iter().map(|&v| v as usize).collect())
            } else {
                Targets::Values(y.clone())
            };
            Batch::with_tokens(x, targets, tokens)
        };
        Ok(ClientDataset {
            client: c.client,
            task,
            train: batch("train")?,
            eval: batch("eval")?,
        })
    }
}

/// Draws every client's train and eval sets from its own seeded stream.
pub fn build_federation_data(het: &HeterogeneityConfig, sizes: DataSizes, seed: u64) -> Result<Vec<ClientDataset>> {
    if sizes.train == 0 || sizes.eval == 0 {
        return Err(Error::config("sizes", "train and eval sizes must be positive"));
    }
    let tasks = het.tasks(seed)?;
    let assignment = het.assignment()?;
    assignment
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let mut rng = seed::rng(seed, stream::CLIENT_DATA + k as u64);
            let train = tasks[j].sample(sizes.train, &mut rng)?;
            let eval = tasks[j].sample(sizes.eval, &mut rng)?;
            Ok(ClientDataset {
                client: k,
                task: j,
                train,
                eval,
            })
        })
        .collect()
}

/// Mean pairwise Euclidean distance between the teachers of all clients.
pub fn mean_pairwise_teacher_distance(het: &HeterogeneityConfig, seed: u64) -> Result<f64> {
    let tasks = het.tasks(seed)?;
    let params: Vec<Vec<f64>> = het.assignment()?.iter().map(|&j| tasks[j].teacher.params()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..params.len() {
        for j in i + 1..params.len() {
            total += params[i]
                .iter()
                .zip(&params[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn spec(kind: TaskKind, seed: u64) -> TaskSpec {
        TaskSpec {
            id: 0,
            kind,
            input_dim: 6,
            outputs: 3,
            teacher_seed: seed,
            world_seed: 99,
            specificity: 0.5,
            noise_std: 0.0,
            tokens_per_example: 1,
        }
    }

    #[test]
    fn binary_teacher_labels_by_sign() {
        let w = [0.5, -1.0, 2.0];
        let task = Task {
            spec: TaskSpec {
                outputs: 2,
                input_dim: 3,
                ..spec(TaskKind::LinearClassification, 0)
            },
            teacher: Teacher::binary(&w),
        };
        let batch = task.sample(50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let Targets::Classes(labels) = &batch.targets else { panic!() };
        for (i, &label) in labels.iter().enumerate() {
            let dot: f64 = batch.inputs.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
            assert_eq!(label, usize::from(dot > 0.0));
        }
    }

    #[test]
    fn same_seed_same_first_batch() {
        let task = make_task(spec(TaskKind::LabelPermutedClassification, 5)).unwrap();
        let a = task.sample(10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = task.sample(10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(make_task(spec(TaskKind::LabelPermutedClassification, 5)).unwrap(), task);
    }

    #[test]
    fn identity_permutation_equals_base_kind() {
        let base = make_task(spec(TaskKind::LinearClassification, 8)).unwrap();
        let permuted = make_task(spec(TaskKind::LabelPermutedClassification, 8)).unwrap();
        let identity = Task {
            teacher: permuted.teacher.clone().with_permutation(vec![0, 1, 2]),
            ..permuted
        };
        let a = base.sample(200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = identity.sample(200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_nonpositive_dims() {
        assert!(make_task(TaskSpec {
            input_dim: 0,
            ..spec(TaskKind::LinearClassification, 0)
        })
        .is_err());
        assert!(make_task(TaskSpec {
            outputs: 0,
            ..spec(TaskKind::TeacherMlpRegression, 0)
        })
        .is_err());
    }

    #[test]
    fn high_has_one_task_per_client() {
        let data = build_federation_data(&HeterogeneityConfig::new(HeterogeneityLevel::High, 8), DataSizes { train: 10, eval: 5 }, 1).unwrap();
        let tasks: BTreeSet<usize> = data.iter().map(|c| c.task).collect();
        assert_eq!(tasks.len(), 8);
    }

    #[test]
    fn low_uses_two_teachers() {
        let het = HeterogeneityConfig::new(HeterogeneityLevel::Low, 8);
        let tasks = het.tasks(3).unwrap();
        let seeds: BTreeSet<u64> = het.assignment().unwrap().iter().map(|&j| tasks[j].spec.teacher_seed).collect();
        assert_eq!(seeds.len(), 2);
    }

    #[test]
    fn mild_has_six_tasks_for_eight_clients() {
        let het = HeterogeneityConfig::new(HeterogeneityLevel::Mild, 8);
        assert_eq!(het.task_count().unwrap(), 6);
        let assigned: BTreeSet<usize> = het.assignment().unwrap().into_iter().collect();
        assert_eq!(assigned.len(), 6);
    }

    #[test]
    fn invalid_level_client_combinations() {
        assert!(HeterogeneityConfig::new(HeterogeneityLevel::Mild, 2).task_count().is_err());
        assert!(HeterogeneityConfig::new(HeterogeneityLevel::Low, 1).task_count().is_err());
        assert!(HeterogeneityConfig::new(HeterogeneityLevel::High, 0).task_count().is_err());
    }

    #[test]
    fn scaled_sizes_keep_total() {
        for k in [8, 16, 24] {
            let s = DataSizes::for_clients(k);
            assert_eq!(s.train * k, 4800);
            assert_eq!(s.eval * k, 2400);
        }
        assert_eq!(DataSizes::for_clients(16), DataSizes { train: 300, eval: 150 });
    }

    #[test]
    fn reproducible_and_disjoint() {
        let het = HeterogeneityConfig::new(HeterogeneityLevel::Mild, 4);
        let sizes = DataSizes { train: 40, eval: 20 };
        let a = build_federation_data(&het, sizes, 11).unwrap();
        let b = build_federation_data(&het, sizes, 11).unwrap();
        assert_eq!(a, b);
        for c in &a {
            for i in 0..c.train.inputs.rows() {
                for j in 0..c.eval.inputs.rows() {
                    assert_ne!(c.train.inputs.row(i), c.eval.inputs.row(j));
                }
            }
        }
    }

    #[test]
    fn heterogeneity_is_monotone() {
        let dist = |level| mean_pairwise_teacher_distance(&HeterogeneityConfig::new(level, 8), 0).unwrap();
        let (high, mild, low) = (
            dist(HeterogeneityLevel::High),
            dist(HeterogeneityLevel::Mild),
            dist(HeterogeneityLevel::Low),
        );
        assert!(high > mild && mild > low, "{high} {mild} {low}");
    }

    #[test]
    fn dataset_container_round_trip() {
        let mut het = HeterogeneityConfig::new(HeterogeneityLevel::High, 2);
        het.template.tokens_per_example = 3;
        let data = build_federation_data(&het, DataSizes { train: 4, eval: 2 }, 5).unwrap();
        let text = data[1].to_container().encode();
        let back = ClientDataset::from_container(&Container::decode(&text).unwrap()).unwrap();
        assert_eq!(back, data[1]);
    }
}
