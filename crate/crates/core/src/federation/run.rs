use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::diagnostics::{record_displacements, ConvergenceTrace};
use crate::error::{Error, Result};
use crate::federation::aggregate::{aggregate, Payload};
use crate::federation::client::{client_local_round, ClientState, ModelBlueprint, RoundSchedule};
use crate::federation::Strategy;
use crate::nn::OptimizerConfig;
use crate::synth::ClientDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub schedule: RoundSchedule,
    pub optimizer: OptimizerConfig,
    pub blueprint: ModelBlueprint,
    pub seed: u64,
    /// Worker threads for the client phase of each round.
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub strategy: Strategy,
    pub round: usize,
    pub client: usize,
    pub split: Split,
    pub loss: f64,
    /// `None` for regression tasks.
    pub accuracy: Option<f64>,
}

/// Server state: the strategy, the round counter and the last round of
/// uploads. It never holds client data or (outside the averaged-mixer
/// ablation) mixers.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub strategy: Strategy,
    pub clients: usize,
    pub round: usize,
    pub uploads: BTreeMap<usize, Payload>,
}

impl ServerState {
    pub fn new(strategy: Strategy, clients: usize) -> Self {
        ServerState {
            strategy,
            clients,
            round: 0,
            uploads: BTreeMap::new(),
        }
    }

    pub fn receive(&mut self, upload: Payload) -> Result<()> {
        if upload.client >= self.clients {
            return Err(Error::Payload(format!("unknown client {}", upload.client)));
        }
        self.uploads.insert(upload.client, upload);
        Ok(())
    }

    /// Barrier: aggregates once every client has uploaded.
    pub fn aggregate(&mut self) -> Result<BTreeMap<usize, Payload>> {
        self.round += 1;
        let out = aggregate(self.strategy, &self.uploads, self.clients, self.round)?;
        self.uploads.clear();
        Ok(out)
    }
}

#[derive(Debug)]
pub struct FederationOutput {
    pub metrics: Vec<MetricsRow>,
    pub trace: ConvergenceTrace,
    pub clients: Vec<ClientState>,
    /// Broadcasts of the final round, as sent.
    pub final_broadcasts: BTreeMap<usize, Payload>,
    /// `[round][client]` optimizer-step losses.
    pub step_losses: Vec<Vec<Vec<f64>>>,
}

pub fn build_clients(config: &FederationConfig, data: Vec<ClientDataset>) -> Result<Vec<ClientState>> {
    let k = data.len();
    data.into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d.client != i {
                return Err(Error::config("data", format!("dataset {i} belongs to client {}", d.client)));
            }
            let model = config.blueprint.build(config.strategy, k, config.seed, i)?;
            Ok(ClientState::new(model, d, config.strategy, k, config.seed))
        })
        .collect()
}

/// Runs the full round loop: parallel local training, upload through the
/// wire codec, aggregation barrier, broadcast, evaluation.
///
/// Broadcasts of round `t` are applied at the end of round `t`, so
/// evaluation and the displacement trace see each client as it will start
/// round `t + 1`.
pub fn run_federation(config: &FederationConfig, data: Vec<ClientDataset>) -> Result<FederationOutput> {
    config.schedule.validate()?;
    config.optimizer.validate()?;
    let k = data.len();
    if k == 0 {
        return Err(Error::config("clients", "need at least one client"));
    }
    config.strategy.validate(k)?;

    let mut clients = build_clients(config, data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;

    let mut server = ServerState::new(config.strategy, k);
    let mut metrics = Vec::new();
    let mut trace = ConvergenceTrace::default();
    let mut step_losses = Vec::with_capacity(config.schedule.rounds);
    let mut final_broadcasts = BTreeMap::new();
    let mut previous: Vec<_> = clients.iter().map(ClientState::snapshot).collect();

    for round in 1..=config.schedule.rounds {
        let reports: Vec<_> = pool.install(|| {
            clients
                .par_iter_mut()
                .map(|c| client_local_round(c, None, &config.schedule, &config.optimizer, round))
                .collect()
        });
        let mut round_losses = Vec::with_capacity(k);
        for (client, report) in reports.into_iter().enumerate() {
            let report = report.map_err(|e| Error::Client {
                client,
                round,
                source: Box::new(e),
            })?;
            server.receive(report.upload.transmit()?)?;
            round_losses.push(report.step_losses);
        }
        step_losses.push(round_losses);

        let broadcasts = server.aggregate()?;
        for (client, payload) in &broadcasts {
            let received = payload.transmit()?;
            clients[*client].receive(&received).map_err(|e| Error::Client {
                client: *client,
                round,
                source: Box::new(e),
            })?;
        }
        final_broadcasts = broadcasts;

        let evals: Vec<_> = pool.install(|| clients.par_iter().map(ClientState::evaluate).collect());
        let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
        let current: Vec<_> = clients.iter().map(ClientState::snapshot).collect();
        let mut rows = record_displacements(&previous, &current, round - 1)?;
        for (row, ev) in rows.iter_mut().zip(&evals) {
            row.train_loss = ev.train_loss;
            row.eval_metric = ev.eval_accuracy.unwrap_or(ev.eval_loss);
        }
        trace.rows.extend(rows);
        previous = current;

        if round % config.schedule.eval_every == 0 || round == config.schedule.rounds {
            for (client, ev) in evals.iter().enumerate() {
                for (split, loss, accuracy) in [
                    (Split::Train, ev.train_loss, ev.train_accuracy),
                    (Split::Eval, ev.eval_loss, ev.eval_accuracy),
                ] {
                    metrics.push(MetricsRow {
                        seed: config.seed,
                        strategy: config.strategy,
                        round,
                        client,
                        split,
                        loss,
                        accuracy,
                    });
                }
            }
        }
    }

    Ok(FederationOutput {
        metrics,
        trace,
        clients,
        final_broadcasts,
        step_losses,
    })
}
