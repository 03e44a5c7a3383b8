use super::*;
use crate::capacity::CapacityDistribution;
use crate::piece_strategy::PieceStrategy;

fn tiny(peers: usize, pieces: usize) -> SimConfig {
    let mut c = SimConfig::homogeneous_coalition(0.0, 1.0, pieces, 10.0, 4);
    c.arrivals = Arrivals::FlashCrowd { peers, window: 0.0 };
    c.duration = 100.0;
    c.steady_window = (0.0, 100.0);
    c
}

fn audited(cfg: SimConfig) -> SimResult {
    let mut sim = Simulator::new(cfg).unwrap();
    while sim.step() {
        if let Err(e) = sim.audit() {
            panic!("t = {}: {e}", sim.now());
        }
    }
    sim.finish()
}

#[test]
fn no_arrivals_no_completions() {
    let r = run(&tiny(0, 5)).unwrap();
    assert!(r.completions.is_empty());
    assert_eq!(r.arrivals, 0);
}

#[test]
fn lone_peer_hand_trace() {
    // t=0 arrival, seed has a free slot: piece at rate 1 done at t=1,
    // second piece requested at once, done at t=2, peer leaves.
    let r = audited(tiny(1, 2));
    assert_eq!(r.completions.len(), 1);
    let c = &r.completions[0];
    assert_eq!(c.arrival, 0.0);
    assert!((c.completion - 2.0).abs() < 1e-12);
    assert_eq!(r.empty_pd, vec![1, 1]);
}

#[test]
fn two_peers_share_the_seed() {
    // seed splits 1 piece/s over both: each gets its single piece at t=2
    let mut cfg = tiny(2, 1);
    cfg.seed_slots = Some(2);
    let r = audited(cfg);
    assert_eq!(r.completions.len(), 2);
    for c in &r.completions {
        assert!((c.completion - 2.0).abs() < 1e-12);
    }
}

#[test]
fn bad_config_fails_before_running() {
    let mut cfg = tiny(1, 2);
    cfg.rechoke_interval = -1.0;
    assert!(Simulator::new(cfg).is_err());
}

#[test]
fn identical_configs_give_identical_results() {
    let mut cfg = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 20, 10.0, 4);
    cfg.duration = 600.0;
    cfg.steady_window = (300.0, 600.0);
    cfg.rng_seed = 42;
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    cfg.rng_seed = 43;
    let c = run(&cfg).unwrap();
    assert_ne!(format!("{a:?}"), format!("{c:?}"));
}

#[test]
fn coalition_run_keeps_invariants() {
    let mut cfg = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 20, 10.0, 3);
    cfg.duration = 400.0;
    cfg.steady_window = (200.0, 400.0);
    let r = audited(cfg);
    assert!(!r.completions.is_empty());
    for c in &r.completions {
        assert!(c.download_time() >= 20.0 / 0.5 - 1e-9 || c.download_time() > 0.0);
    }
}

#[test]
fn mixed_swarm_keeps_invariants() {
    let mut cfg = SimConfig::homogeneous_coalition(0.5, 0.5, 30, 10.0, 5);
    cfg.capacity = CapacitySource::Empirical(CapacityDistribution::anchors());
    cfg.membership = Membership::Random { p_join: 0.5 };
    cfg.duration = 500.0;
    cfg.steady_window = (250.0, 500.0);
    cfg.rng_seed = 7;
    let r = audited(cfg);
    assert!(r.completions.iter().any(|c| c.coalition.is_none()));
    assert!(r.completions.iter().any(|c| c.coalition == Some(1)));
}

#[test]
fn dynamic_two_coalitions_keep_invariants() {
    let mut policy = CoalitionPolicy::new(0.5, 1, 0.5);
    policy.split_percentile = Some(50.0);
    let mut cfg = SimConfig::homogeneous_coalition(0.5, 0.5, 30, 10.0, 5);
    cfg.capacity = CapacitySource::Empirical(CapacityDistribution::anchors());
    cfg.membership = Membership::Dynamic(policy);
    cfg.duration = 500.0;
    cfg.steady_window = (250.0, 500.0);
    cfg.rng_seed = 3;
    let r = audited(cfg);
    let sizes: BTreeSet<GroupId> = r.coalition_sizes.iter().map(|s| s.coalition).collect();
    assert_eq!(sizes, BTreeSet::from([0, 1, 2]));
}

#[test]
fn peer_balance_flash_crowd_keeps_invariants() {
    let mut cfg = tiny(10, 40);
    cfg.seed_slots = Some(10);
    cfg.member_strategy = PieceStrategy::PeerBalance;
    cfg.rechoke_interval = 5.0;
    cfg.capacity = CapacitySource::Fixed { pieces_per_sec: 0.2 };
    cfg.duration = 60.0;
    cfg.steady_window = (0.0, 60.0);
    let r = audited(cfg);
    assert!(!r.empty_pd.is_empty());
    let mut last = 0;
    for s in &r.distinct {
        assert!(s.distinct >= last);
        last = s.distinct;
    }
}

#[test]
fn everyone_outside_uses_tit_for_tat() {
    let mut cfg = SimConfig::homogeneous_coalition(0.5, 0.5, 20, 10.0, 5);
    cfg.membership = Membership::None;
    cfg.duration = 400.0;
    cfg.steady_window = (200.0, 400.0);
    let r = audited(cfg);
    assert!(!r.completions.is_empty());
    assert!(r.coalition_sizes.iter().all(|s| s.coalition == 0));
}

#[test]
fn event_order_breaks_ties_by_kind_then_peer() {
    let mk = |time, kind, seq| SimEvent { time, kind, seq };
    let a = mk(1.0, EventKind::Rechoke(2), 9);
    let b = mk(1.0, EventKind::Rechoke(5), 1);
    let c = mk(1.0, EventKind::Arrival, 10);
    let d = mk(0.5, EventKind::MeasurementTick, 11);
    let mut v = vec![a, b, c, d];
    v.sort();
    assert_eq!(
        v.iter().map(|e| e.kind).collect::<Vec<_>>(),
        vec![EventKind::MeasurementTick, EventKind::Arrival, EventKind::Rechoke(2), EventKind::Rechoke(5)]
    );
}
