use std::thread;
use std::time::{Duration, Instant};

use fedgvi::client::ClientState;
use fedgvi::exp_family::NatGaussian;
use fedgvi::harness::config::{Experiment, RunConfig};
use fedgvi::harness::experiments::{federate, prior_for, shards_for};
use fedgvi::harness::run_experiment;
use fedgvi::server::ServerState;
use fedgvi::transport::{channel_pair, run_federation, Coordinator, Endpoint, TransportKind};
use fedgvi::wire::{decode, encode, RoundMessage};
use fedgvi::FedGviError;

fn clutter(transport: &str, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::defaults(Experiment::Clutter);
    cfg.transport = transport.into();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn socket_and_channel_runs_write_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = clutter("inproc", &dir.path().join("inproc"));
    let b = clutter("socket", &dir.path().join("socket"));
    run_experiment(Experiment::Clutter, &a).unwrap();
    run_experiment(Experiment::Clutter, &b).unwrap();
    let ra = std::fs::read_to_string(a.out.join("results.csv")).unwrap();
    let rb = std::fs::read_to_string(b.out.join("results.csv")).unwrap();
    assert!(ra.lines().count() > 1);
    assert_eq!(ra, rb);
}

#[test]
fn posteriors_agree_bit_for_bit_across_transports() {
    let cfg = RunConfig::defaults(Experiment::Clutter);
    let prior = prior_for(&cfg, 3).unwrap();
    for method in &cfg.methods {
        let shards = shards_for(Experiment::Clutter, &cfg, method, 3).unwrap();
        let a = federate(&cfg, &TransportKind::InProcess, &prior, &shards, method).unwrap();
        let b = federate(&cfg, &TransportKind::Socket { port: 0 }, &prior, &shards, method).unwrap();
        assert_eq!(a.server.round, b.server.round, "{}", method.name);
        let (pa, pb) = (&a.server.posterior, &b.server.posterior);
        assert_eq!(pa.shift().as_slice(), pb.shift().as_slice());
        assert_eq!(pa.precision().to_row_major(), pb.precision().to_row_major());
    }
}

#[test]
fn no_clients_leaves_the_prior() {
    let cfg = RunConfig::defaults(Experiment::Clutter);
    let prior = prior_for(&cfg, 0).unwrap();
    for kind in [TransportKind::InProcess, TransportKind::Socket { port: 0 }] {
        let server = ServerState::new(prior.clone(), cfg.server.clone()).unwrap();
        let run = run_federation(&kind, server, Vec::new(), 10, Duration::from_secs(1)).unwrap();
        assert!(run.clients.is_empty());
        assert_eq!(run.server.posterior.nat_distance(&prior).unwrap(), 0.0);
    }
}

#[test]
fn silent_client_times_out_and_everyone_is_aborted() {
    let cfg = RunConfig::defaults(Experiment::Clutter);
    let method = &cfg.methods[1];
    let shards = shards_for(Experiment::Clutter, &cfg, method, 0).unwrap();
    let prior = prior_for(&cfg, 0).unwrap();
    let server = ServerState::new(prior.clone(), cfg.server.clone()).unwrap();

    let (s_live, mut c_live) = channel_pair();
    let live = ClientState::new(0, shards[0].clone(), cfg.client_config(method).unwrap(), true).unwrap();
    let live = thread::spawn(move || fedgvi::transport::run_client(&mut c_live, live));

    // registers, then never answers a broadcast
    let (s_mute, mut c_mute) = channel_pair();
    c_mute
        .send(&RoundMessage::Update {
            client_id: 1,
            round: 0,
            delta_precision: vec![0.0],
            delta_shift: vec![0.0],
        })
        .unwrap();

    let ends: Vec<Box<dyn Endpoint>> = vec![Box::new(s_live), Box::new(s_mute)];
    let mut coord = Coordinator::register(server, ends, Duration::from_millis(200)).unwrap();
    assert_eq!(coord.client_ids(), vec![0, 1]);
    let started = Instant::now();
    let err = coord.run_round().unwrap_err();
    assert!(matches!(err, FedGviError::Timeout { client_id: 1 }), "{err:?}");
    assert!(started.elapsed() < Duration::from_secs(5));
    // no commit happened
    assert_eq!(coord.server.round, 0);
    assert_eq!(coord.server.posterior.nat_distance(&prior).unwrap(), 0.0);
    drop(coord);

    // the muted client saw the broadcast and then the abort
    let mut seen = Vec::new();
    while let Ok(fedgvi::transport::Received::Message(m)) = c_mute.recv(Some(Duration::from_millis(200))) {
        seen.push(m);
    }
    assert!(matches!(seen.first(), Some(RoundMessage::Broadcast { round: 1, .. })));
    assert!(matches!(seen.last(), Some(RoundMessage::Abort { .. })));
    // the live client kept its site untouched
    let state = live.join().unwrap().unwrap();
    assert_eq!(state.site.round_updated, 0);
}

#[test]
fn duplicate_registration_is_rejected() {
    let prior = NatGaussian::standard(1);
    let server = ServerState::new(prior, Default::default()).unwrap();
    let mut ends: Vec<Box<dyn Endpoint>> = Vec::new();
    let mut keep = Vec::new();
    for _ in 0..2 {
        let (s, mut c) = channel_pair();
        c.send(&RoundMessage::Update {
            client_id: 4,
            round: 0,
            delta_precision: vec![0.0],
            delta_shift: vec![0.0],
        })
        .unwrap();
        ends.push(Box::new(s));
        keep.push(c);
    }
    let err = Coordinator::register(server, ends, Duration::from_secs(1)).err().unwrap();
    assert!(matches!(err, FedGviError::DuplicateClient(4)), "{err:?}");
}

#[test]
fn ack_frame_layout() {
    let frame = encode(&RoundMessage::Ack).unwrap();
    let hex: String = frame.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(&hex[..22], "0b00000046475649010003");
    let crc = crc32fast::hash(&frame[4..11]).to_le_bytes();
    assert_eq!(&frame[11..], &crc);
    assert_eq!(decode(&frame).unwrap(), RoundMessage::Ack);
}
