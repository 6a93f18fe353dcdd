use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Container;
use crate::error::{Error, Result};
use crate::federation::aggregate::{subtract_self, AdapterPairs, Payload, PayloadKind};
use crate::federation::Strategy;
use crate::lora::{lora_init_with, AdaptedLayer, LayerMode, LoraAdapter, Mixer};
use crate::matrix::Matrix;
use crate::nn::{
    optimizer_step, AttentionBlock, LossKind, Model, OptimizerConfig, OptimizerState, ParamRef, Role, RoleSet,
};
use crate::seed::{self, stream};
use crate::synth::ClientDataset;

/// Backbone shape. Adapters sit on every hidden layer of the MLP (or on the
/// single layer when there are no hidden layers), and on the query and value
/// projections of the attention model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp { hidden: Vec<usize> },
    Attn,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp { hidden: vec![32, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.0,
        }
    }
}

/// Convex surrogate used to check the contraction argument: the adapter `A`
/// is frozen to `[I_r | 0]`, only `B` trains, and an L2 term makes the
/// objective strongly convex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub l2: f64,
}

/// Everything needed to build a client's model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlueprint {
    pub spec: ModelSpec,
    pub lora: LoraConfig,
    pub input_dim: usize,
    pub outputs: usize,
    pub tokens_per_example: usize,
    pub classification: bool,
    pub surrogate: Option<Surrogate>,
}

fn base_matrix(rows: usize, cols: usize, seed: u64, layer: usize) -> Matrix {
    let mut rng = seed::rng(seed, stream::BASE_MODEL + layer as u64);
    Matrix::random_normal(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng)
}

impl ModelBlueprint {
    /// Builds client `client`'s model. The frozen base and the individual
    /// adapter initialization come from `seed` alone, so every client starts
    /// from the same point.
    pub fn build(&self, strategy: Strategy, clients: usize, seed: u64, client: usize) -> Result<Model> {
        let rank = strategy.rank_override().unwrap_or(self.lora.rank);
        let scale = self.lora.alpha / rank as f64;
        let mode = strategy.layer_mode(clients);
        let trainable = match self.surrogate {
            Some(_) => RoleSet::of(&[Role::IndividualB]),
            None => strategy.trainable_roles(),
        };

        let adapted = |id: usize, base: Matrix| -> Result<AdaptedLayer> {
            let (l, d) = base.shape();
            let mut init_rng = seed::rng(seed, stream::ADAPTER_INIT + id as u64);
            let mut individual = lora_init_with(d, l, rank, scale, &mut init_rng)?;
            if self.surrogate.is_some() {
                individual.a = Matrix::zeros(rank, d);
                for i in 0..rank {
                    individual.a[(i, i)] = 1.0;
                }
            }
            let mut layer = match mode {
                LayerMode::Single => AdaptedLayer::single(id, base, individual)?,
                LayerMode::FedAlt | LayerMode::Fixed(_) => {
                    let row = if matches!(strategy, Strategy::RowUpdate { .. }) {
                        // a zero RoW pair would sit at a saddle and never move
                        let mut row_rng = seed::rng(seed, stream::ROW_INIT + id as u64);
                        lora_init_with(d, l, rank, scale, &mut row_rng)?
                    } else {
                        LoraAdapter::zeros(d, l, rank, scale)
                    };
                    match mode {
                        LayerMode::Fixed(alpha) => AdaptedLayer::fixed(id, base, individual, row, alpha)?,
                        _ => AdaptedLayer::fedalt(id, base, individual, row, Mixer::zeros(d, client))?,
                    }
                }
                LayerMode::Plain => unreachable!("strategies always adapt"),
            };
            layer.trainable = trainable;
            layer.dropout = self.lora.dropout;
            Ok(layer)
        };

        let loss = if self.classification { LossKind::CrossEntropy } else { LossKind::Mse };
        let model = match &self.spec {
            ModelSpec::Mlp { hidden } => {
                let mut widths = vec![self.input_dim];
                widths.extend(hidden);
                widths.push(self.outputs);
                let last = widths.len() - 2;
                let mut layers = Vec::with_capacity(widths.len() - 1);
                for id in 0..=last {
                    let base = base_matrix(widths[id + 1], widths[id], seed, id);
                    if id < last || hidden.is_empty() {
                        layers.push(adapted(id, base)?);
                    } else {
                        layers.push(AdaptedLayer::plain(id, base));
                    }
                }
                Model::mlp(layers, loss)?
            }
            ModelSpec::Attn => {
                let d = self.input_dim;
                let block = AttentionBlock {
                    query: adapted(0, base_matrix(d, d, seed, 0))?,
                    key: AdaptedLayer::plain(1, base_matrix(d, d, seed, 1)),
                    value: adapted(2, base_matrix(d, d, seed, 2))?,
                };
                let head = AdaptedLayer::plain(3, base_matrix(self.outputs, d, seed, 3));
                Model::attention(block, head, self.tokens_per_example, loss)?
            }
        };
        Ok(match self.surrogate {
            Some(s) => model.with_l2(s.l2),
            None => model,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundSchedule {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        RoundSchedule {
            rounds: 20,
            local_epochs: 5,
            batch_size: 32,
            eval_every: 1,
        }
    }
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// One client: model, private data, optimizer state and its own RNG stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: Model,
    pub data: ClientDataset,
    pub optimizer: OptimizerState,
    pub strategy: Strategy,
    pub participants: usize,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct LocalRoundReport {
    pub upload: Payload,
    /// Objective value at every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss over the final local epoch.
    pub last_epoch_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientEval {
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
}

impl ClientState {
    pub fn new(model: Model, data: ClientDataset, strategy: Strategy, participants: usize, seed: u64) -> Self {
        let id = data.client;
        ClientState {
            id,
            model,
            data,
            optimizer: OptimizerState::new(),
            strategy,
            participants,
            rng: seed::rng(seed, stream::CLIENT_TRAIN + id as u64),
        }
    }

    /// Replaces the shared matrices with a server broadcast.
    pub fn receive(&mut self, payload: &Payload) -> Result<()> {
        if payload.kind != PayloadKind::Broadcast || payload.strategy != self.strategy || payload.client != self.id {
            return Err(Error::Payload(format!(
                "client {} ({}) cannot apply a {:?} payload for client {} ({})",
                self.id, self.strategy, payload.kind, payload.client, payload.strategy
            )));
        }
        payload.validate()?;

        if self.strategy == Strategy::GlobalAvgRow {
            let mut global = AdapterPairs::new();
            let mut own = AdapterPairs::new();
            for (p, a) in &payload.matrices {
                if p.role != Role::IndividualA {
                    continue;
                }
                let b = &payload.matrices[&ParamRef::new(p.layer, Role::IndividualB)];
                global.insert(p.layer, (a.clone(), b.clone()));
                let layer = self.layer(p.layer)?;
                let ind = layer.individual.as_ref().expect("adapted layer");
                own.insert(p.layer, (ind.a.clone(), ind.b.clone()));
            }
            for (layer, (a, b)) in subtract_self(&global, &own, payload.participants) {
                self.set(ParamRef::new(layer, Role::RowA), a)?;
                self.set(ParamRef::new(layer, Role::RowB), b)?;
            }
            return Ok(());
        }

        for (p, m) in &payload.matrices {
            self.set(*p, m.clone())?;
        }
        Ok(())
    }

    fn layer(&self, id: usize) -> Result<&AdaptedLayer> {
        self.model
            .layer(id)
            .ok_or_else(|| Error::Payload(format!("client {} has no layer {id}", self.id)))
    }

    fn set(&mut self, p: ParamRef, value: Matrix) -> Result<()> {
        let id = self.id;
        let slot = self
            .model
            .param_mut(p)
            .ok_or_else(|| Error::Payload(format!("client {id} has no parameter {p}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("broadcast", format!("{p} {:?}", slot.shape()), format!("{:?}", value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// The strategy's shared set, read from the current model.
    pub fn upload(&self, round: usize) -> Payload {
        let roles = self.strategy.upload_roles();
        let mut matrices = BTreeMap::new();
        for layer in self.model.layers() {
            if !layer.is_adapted() {
                continue;
            }
            for role in roles.iter() {
                if let Some(m) = layer.param(role) {
                    matrices.insert(ParamRef::new(layer.id, role), m.clone());
                }
            }
        }
        Payload {
            kind: PayloadKind::Upload,
            strategy: self.strategy,
            client: self.id,
            round,
            participants: self.participants,
            matrices,
        }
    }

    /// Every adapter-side matrix (both branches and the mixer) of this client.
    /// Local state only; never sent to the server.
    pub fn checkpoint(&self, round: usize) -> Container {
        let mut c = Container::new("checkpoint", self.id, round);
        c.meta.insert("strategy".into(), self.strategy.to_string());
        for layer in self.model.layers() {
            for role in layer.roles() {
                if role != Role::Base {
                    c.push(layer.id, role.tag(), layer.param(role).expect("role present").clone());
                }
            }
        }
        c
    }

    /// Current trainable parameters in a fixed order.
    pub fn snapshot(&self) -> Vec<Matrix> {
        self.model
            .trainable_refs()
            .into_iter()
            .map(|p| self.model.param(p).expect("trainable exists").clone())
            .collect()
    }

    pub fn evaluate(&self) -> Result<ClientEval> {
        let (train_loss, train_accuracy) = self.model.evaluate(&self.data.train)?;
        let (eval_loss, eval_accuracy) = self.model.evaluate(&self.data.eval)?;
        Ok(ClientEval {
            train_loss,
            train_accuracy,
            eval_loss,
            eval_accuracy,
        })
    }
}

/// Applies an optional broadcast, trains for the scheduled epochs and
/// returns the upload.
pub fn client_local_round(
    client: &mut ClientState,
    payload: Option<&Payload>,
    schedule: &RoundSchedule,
    opt: &OptimizerConfig,
    round: usize,
) -> Result<LocalRoundReport> {
    schedule.validate()?;
    if let Some(p) = payload {
        client.receive(p)?;
    }
    let n = client.data.train.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let dropout = client.model.layers().iter().any(|l| l.dropout > 0.0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step_losses = Vec::new();
    let mut last_epoch_loss = 0.0;
    for _ in 0..schedule.local_epochs {
        order.shuffle(&mut client.rng);
        let mut epoch_total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let batch = client.data.train.select(chunk);
            let rng: Option<&mut dyn RngCore> = if dropout { Some(&mut client.rng) } else { None };
            let (loss, grads) = client.model.backprop(&batch, rng)?;
            optimizer_step(&mut client.model, &grads, opt, &mut client.optimizer)?;
            step_losses.push(loss);
            epoch_total += loss;
            steps += 1;
        }
        last_epoch_loss = epoch_total / steps as f64;
    }
    Ok(LocalRoundReport {
        upload: client.upload(round),
        step_losses,
        last_epoch_loss,
    })
}
