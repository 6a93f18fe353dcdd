//! Clients, server, aggregation strategies and the round loop.

mod aggregate;
mod client;
mod run;
mod strategy;

pub use aggregate::{
    aggregate, compute_row, compute_row_via_global, subtract_self, AdapterPairs, Payload, PayloadKind,
};
pub use client::{
    client_local_round, ClientEval, ClientState, LocalRoundReport, LoraConfig, ModelBlueprint, ModelSpec,
    RoundSchedule, Surrogate,
};
pub use run::{build_clients, run_federation, FederationConfig, FederationOutput, MetricsRow, ServerState, Split};
pub use strategy::{FixedAlpha, Strategy};
