use fedalt::experiment::ExperimentConfig;
use fedalt::federation::{build_clients, client_local_round, run_federation, FederationOutput, FixedAlpha, PayloadKind};
use fedalt::nn::Role;
use fedalt::synth::{build_federation_data, DataSizes};
use fedalt::{Error, Strategy};

fn config(clients: usize, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        clients,
        data: Some(DataSizes { train: 40, eval: 20 }),
        ..Default::default()
    };
    c.schedule.rounds = rounds;
    c.schedule.local_epochs = 2;
    c.schedule.batch_size = 10;
    c
}

fn run(c: &ExperimentConfig, strategy: Strategy, seed: u64, jobs: usize) -> FederationOutput {
    let mut fc = c.federation(strategy, seed);
    fc.jobs = jobs;
    let data = build_federation_data(&c.heterogeneity(), c.data_sizes(), seed).unwrap();
    run_federation(&fc, data).unwrap()
}

#[test]
fn job_count_does_not_change_results() {
    let c = config(5, 3);
    for strategy in [Strategy::FedAlt, Strategy::FedIt, Strategy::RowUpdate { rank: 4 }] {
        let a = run(&c, strategy, 1, 1);
        let b = run(&c, strategy, 1, 4);
        assert_eq!(a.metrics, b.metrics, "{strategy}");
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    }
}

#[test]
fn local_only_sends_nothing() {
    let c = config(3, 2);
    let out = run(&c, Strategy::LocalOnly, 0, 1);
    assert!(out.final_broadcasts.is_empty());
    let fc = c.federation(Strategy::LocalOnly, 0);
    let mut clients = build_clients(&fc, build_federation_data(&c.heterogeneity(), c.data_sizes(), 0).unwrap()).unwrap();
    let rep = client_local_round(&mut clients[0], None, &fc.schedule, &fc.optimizer, 1).unwrap();
    assert!(rep.upload.matrices.is_empty());
}

#[test]
fn upload_schemas() {
    let c = config(3, 1);
    let cases = [
        (Strategy::FedAlt, vec![Role::IndividualA, Role::IndividualB]),
        (Strategy::FedIt, vec![Role::IndividualA, Role::IndividualB]),
        (Strategy::Ffa, vec![Role::IndividualB]),
        (Strategy::FedSa, vec![Role::IndividualA]),
        (Strategy::RowUpdate { rank: 4 }, vec![Role::RowA, Role::RowB]),
        (Strategy::FixedWeight(FixedAlpha::InverseClients), vec![Role::IndividualA, Role::IndividualB]),
        (Strategy::AvgMixer, vec![Role::IndividualA, Role::IndividualB, Role::Mixer]),
    ];
    for (strategy, roles) in cases {
        let fc = c.federation(strategy, 2);
        let mut clients = build_clients(&fc, build_federation_data(&c.heterogeneity(), c.data_sizes(), 2).unwrap()).unwrap();
        let up = client_local_round(&mut clients[1], None, &fc.schedule, &fc.optimizer, 1).unwrap().upload;
        assert_eq!(up.kind, PayloadKind::Upload);
        assert_eq!(up.client, 1);
        let layers: std::collections::BTreeSet<usize> = up.matrices.keys().map(|p| p.layer).collect();
        assert!(!layers.is_empty());
        for layer in layers {
            let got: Vec<Role> = up.matrices.keys().filter(|p| p.layer == layer).map(|p| p.role).collect();
            assert_eq!(got, roles, "{strategy} layer {layer}");
        }
    }
}

#[test]
fn global_mean_route_tracks_direct_row() {
    let c = config(4, 3);
    let a = run(&c, Strategy::FedAlt, 5, 1);
    let b = run(&c, Strategy::GlobalAvgRow, 5, 1);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!((x.round, x.client, x.split), (y.round, y.client, y.split));
        assert!((x.loss - y.loss).abs() < 1e-8, "{} vs {}", x.loss, y.loss);
    }
}

#[test]
fn broadcast_for_wrong_client_rejected() {
    let c = config(3, 1);
    let out = run(&c, Strategy::FedAlt, 0, 1);
    let mut clients = out.clients;
    let wrong = out.final_broadcasts[&1].clone();
    assert!(matches!(clients[0].receive(&wrong), Err(Error::Payload(_))));
}

#[test]
fn metrics_cover_every_client_and_split() {
    let c = config(3, 4);
    let out = run(&c, Strategy::FedAlt, 0, 1);
    assert_eq!(out.metrics.len(), 4 * 3 * 2);
    assert!(out.metrics.iter().all(|r| r.accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))));
    assert_eq!(out.trace.deltas().len(), 4);
    assert_eq!(out.step_losses.len(), 4);
}
