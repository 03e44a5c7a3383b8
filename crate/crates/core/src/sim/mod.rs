//! Deterministic discrete-event swarm simulator.
//!
//! Transfers are fluid: each uploader splits its capacity equally among
//! its live transfers, and completion events are rescheduled whenever that
//! split changes. Node `0` is the seed.

pub mod choking;
pub mod config;
pub mod ledger;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coalition::{decide, Action, CoalitionPolicy, RateWindow};
use crate::error::ConfigError;
use crate::piece_strategy::{select_piece, Bitfield, GroupId, PieceMatrix};

pub use config::{Arrivals, CapacitySource, Membership, SimConfig};
pub use ledger::{Credit, Due, Transfer, TransferId, TransferLedger};

pub type NodeId = u32;

pub const SEED: NodeId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    TransferComplete { id: TransferId, generation: u64 },
    Arrival,
    Rechoke(NodeId),
    Optimistic(NodeId),
    SeedRechoke,
    MembershipDecision(NodeId),
    MeasurementTick,
}

impl EventKind {
    fn rank(&self) -> (u8, u64) {
        match *self {
            Self::TransferComplete { id, .. } => (0, id),
            Self::Arrival => (1, 0),
            Self::Rechoke(p) => (2, p.into()),
            Self::Optimistic(p) => (3, p.into()),
            Self::SeedRechoke => (4, 0),
            Self::MembershipDecision(p) => (5, p.into()),
            Self::MeasurementTick => (6, 0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    seq: u64,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub peer: NodeId,
    pub arrival: f64,
    pub completion: f64,
    pub coalition: Option<GroupId>,
    pub capacity: f64,
}

impl CompletionRecord {
    pub fn download_time(&self) -> f64 {
        self.completion - self.arrival
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub t: f64,
    pub queue: usize,
    pub count: usize,
}

/// Coalition `0` counts peers outside every coalition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeSample {
    pub t: f64,
    pub coalition: GroupId,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistinctSample {
    pub t: f64,
    pub distinct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub steady_window: (f64, f64),
    pub arrivals: usize,
    pub events: u64,
    /// Every completion, in completion order.
    pub completions: Vec<CompletionRecord>,
    pub occupancy: Vec<OccupancySample>,
    pub coalition_sizes: Vec<SizeSample>,
    /// Distinct pieces held by present peers.
    pub distinct: Vec<DistinctSample>,
    /// Peers with an empty `P \ D` set, counted at each request to the seed.
    pub empty_pd: Vec<usize>,
}

impl SimResult {
    /// Completions of peers that arrived and finished inside the steady window.
    pub fn steady(&self) -> impl Iterator<Item = &CompletionRecord> {
        let (a, b) = self.steady_window;
        self.completions
            .iter()
            .filter(move |c| c.arrival >= a && c.completion <= b)
    }

    pub fn steady_download_times(&self) -> Vec<f64> {
        self.steady().map(CompletionRecord::download_time).collect()
    }

    pub fn mean_steady_download_time(&self) -> Option<f64> {
        let xs = self.steady_download_times();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Mean share of present peers inside `coalition` over the window.
    pub fn membership_fraction(&self, coalition: GroupId) -> Option<f64> {
        let (a, b) = self.steady_window;
        let mut totals: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for s in self.coalition_sizes.iter().filter(|s| s.t >= a && s.t <= b) {
            let e = totals.entry(s.t.to_bits()).or_default();
            e.1 += s.size;
            if s.coalition == coalition {
                e.0 += s.size;
            }
        }
        let fr: Vec<f64> = totals
            .values()
            .filter(|(_, all)| *all > 0)
            .map(|(m, all)| *m as f64 / *all as f64)
            .collect();
        (!fr.is_empty()).then(|| fr.iter().sum::<f64>() / fr.len() as f64)
    }

    /// Size series of one coalition.
    pub fn size_series(&self, coalition: GroupId) -> Vec<(f64, usize)> {
        self.coalition_sizes
            .iter()
            .filter(|s| s.coalition == coalition)
            .map(|s| (s.t, s.size))
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Node {
    capacity: f64,
    coalition: Option<GroupId>,
    /// Partially downloaded pieces with the work left on each.
    partial: BTreeMap<usize, f64>,
    in_flight: BTreeSet<usize>,
    unchoke: BTreeSet<NodeId>,
    optimistic: Option<NodeId>,
    unchoked_by: BTreeSet<NodeId>,
    received: BTreeMap<NodeId, f64>,
    downloaded: f64,
    window: RateWindow,
    arrival: f64,
}

impl Node {
    fn new(capacity: f64, coalition: Option<GroupId>, arrival: f64) -> Self {
        Self {
            capacity,
            coalition,
            partial: BTreeMap::new(),
            in_flight: BTreeSet::new(),
            unchoke: BTreeSet::new(),
            optimistic: None,
            unchoked_by: BTreeSet::new(),
            received: BTreeMap::new(),
            downloaded: 0.0,
            window: RateWindow::new(arrival),
            arrival,
        }
    }
}

const DONE_EPS: f64 = 1e-9;

pub struct Simulator {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: f64,
    queue: BinaryHeap<Reverse<SimEvent>>,
    seq: u64,
    nodes: BTreeMap<NodeId, Node>,
    matrix: PieceMatrix,
    seed_bits: Bitfield,
    ledger: TransferLedger,
    members: BTreeMap<GroupId, BTreeSet<NodeId>>,
    dirty: BTreeSet<NodeId>,
    next_id: NodeId,
    policy: Option<CoalitionPolicy>,
    result: SimResult,
}

/// Runs a configuration to completion.
pub fn run(config: &SimConfig) -> Result<SimResult, ConfigError> {
    let mut sim = Simulator::new(config.clone())?;
    while sim.step() {}
    Ok(sim.finish())
}

impl Simulator {
    pub fn new(mut cfg: SimConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        cfg.capacity = cfg.capacity.resolved();
        let policy = match &cfg.membership {
            Membership::Dynamic(p) => Some(p.clone()),
            _ => None,
        };
        let mut members = BTreeMap::new();
        for g in coalition_ids(&cfg.membership) {
            members.insert(g, BTreeSet::new());
        }
        let mut nodes = BTreeMap::new();
        nodes.insert(SEED, Node::new(cfg.seed_capacity, None, 0.0));
        let mut sim = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            now: 0.0,
            queue: BinaryHeap::new(),
            seq: 0,
            nodes,
            matrix: PieceMatrix::new(cfg.pieces),
            seed_bits: Bitfield::full(cfg.pieces),
            ledger: TransferLedger::new(),
            members,
            dirty: BTreeSet::new(),
            next_id: 1,
            policy,
            result: SimResult {
                steady_window: cfg.steady_window,
                arrivals: 0,
                events: 0,
                completions: Vec::new(),
                occupancy: Vec::new(),
                coalition_sizes: Vec::new(),
                distinct: Vec::new(),
                empty_pd: Vec::new(),
            },
            cfg,
        };
        match sim.cfg.arrivals.clone() {
            Arrivals::Poisson { rate } => {
                if rate > 0.0 {
                    let t = exp_sample(&mut sim.rng, rate);
                    sim.push(t, EventKind::Arrival);
                }
            }
            Arrivals::FlashCrowd { peers, window } => {
                let mut ts: Vec<f64> = (0..peers).map(|_| sim.rng.gen::<f64>() * window).collect();
                ts.sort_by(f64::total_cmp);
                for t in ts {
                    sim.push(t, EventKind::Arrival);
                }
            }
        }
        sim.push(0.0, EventKind::SeedRechoke);
        sim.push(0.0, EventKind::MeasurementTick);
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn population(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn matrix(&self) -> &PieceMatrix {
        &self.matrix
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn unchoke_set(&self, peer: NodeId) -> Option<&BTreeSet<NodeId>> {
        self.nodes.get(&peer).map(|n| &n.unchoke)
    }

    pub fn coalition_of(&self, peer: NodeId) -> Option<GroupId> {
        self.nodes.get(&peer).and_then(|n| n.coalition)
    }

    pub fn finish(self) -> SimResult {
        self.result
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(SimEvent {
            time,
            kind,
            seq: self.seq,
        }));
    }

    /// Processes one event. Returns `false` once the horizon is reached.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.queue.pop() else {
            return false;
        };
        if ev.time > self.cfg.duration {
            self.queue.clear();
            return false;
        }
        self.now = ev.time;
        self.result.events += 1;
        match ev.kind {
            EventKind::TransferComplete { id, generation } => self.on_complete(id, generation),
            EventKind::Arrival => self.on_arrival(),
            EventKind::Rechoke(p) => {
                if self.nodes.contains_key(&p) {
                    self.rechoke(p);
                    self.push(self.now + self.cfg.rechoke_interval, EventKind::Rechoke(p));
                }
            }
            EventKind::Optimistic(p) => {
                if self.nodes.contains_key(&p) {
                    self.optimistic(p);
                    self.push(self.now + self.cfg.optimistic(), EventKind::Optimistic(p));
                }
            }
            EventKind::SeedRechoke => {
                self.seed_rechoke();
                self.push(self.now + self.cfg.seed_rechoke, EventKind::SeedRechoke);
            }
            EventKind::MembershipDecision(p) => {
                if self.nodes.contains_key(&p) {
                    self.membership_decision(p);
                }
            }
            EventKind::MeasurementTick => {
                self.measure();
                self.push(self.now + self.cfg.sample_interval, EventKind::MeasurementTick);
            }
        }
        self.flush();
        true
    }

    fn bits(&self, id: NodeId) -> &Bitfield {
        if id == SEED {
            &self.seed_bits
        } else {
            self.matrix.bits(id)
        }
    }

    /// `u` holds a piece `d` lacks.
    fn interested(&self, d: NodeId, u: NodeId) -> bool {
        self.bits(u).has_any_beyond(self.bits(d))
    }

    fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied().filter(|&id| id != SEED)
    }

    fn credit(&mut self, c: Credit) {
        if c.amount <= 0.0 {
            return;
        }
        if let Some(n) = self.nodes.get_mut(&c.downloader) {
            n.downloaded += c.amount;
            *n.received.entry(c.uploader).or_default() += c.amount;
        }
    }

    /// Reallocates every uploader whose transfer set changed.
    fn flush(&mut self) {
        let dirty = std::mem::take(&mut self.dirty);
        let mut credits = Vec::new();
        for u in dirty {
            let Some(cap) = self.nodes.get(&u).map(|n| n.capacity) else {
                continue;
            };
            let dues = self.ledger.reallocate_rates(u, cap, self.now, &mut credits);
            for d in dues {
                self.push(
                    d.at,
                    EventKind::TransferComplete {
                        id: d.id,
                        generation: d.generation,
                    },
                );
            }
        }
        for c in credits {
            self.credit(c);
        }
    }

    fn on_arrival(&mut self) {
        let t = self.now;
        if let Arrivals::Poisson { rate } = self.cfg.arrivals {
            let next = t + exp_sample(&mut self.rng, rate);
            self.push(next, EventKind::Arrival);
        }
        let capacity = match &self.cfg.capacity {
            CapacitySource::Fixed { pieces_per_sec } => *pieces_per_sec,
            CapacitySource::Empirical(d) => d.sample_pieces_per_sec(&mut self.rng),
            CapacitySource::Anchors => unreachable!("resolved at construction"),
        };
        let coalition = self.initial_coalition(capacity);
        let id = self.next_id;
        self.next_id += 1;
        self.result.arrivals += 1;
        self.nodes.insert(id, Node::new(capacity, coalition, t));
        self.matrix.insert_peer(id, coalition);
        if let Some(g) = coalition {
            self.members.entry(g).or_default().insert(id);
        }
        self.rechoke(id);
        self.push(t + self.cfg.rechoke_interval, EventKind::Rechoke(id));
        self.push(t + self.cfg.optimistic(), EventKind::Optimistic(id));
        if let Some(p) = &self.policy {
            let first = t + p.decision_start as f64 * self.cfg.rechoke_interval;
            self.push(first, EventKind::MembershipDecision(id));
        }
        self.seed_fill();
    }

    fn initial_coalition(&mut self, capacity: f64) -> Option<GroupId> {
        match self.cfg.membership.clone() {
            Membership::None => None,
            Membership::All => Some(1),
            Membership::Random { p_join } => (self.rng.gen::<f64>() < p_join).then_some(1),
            Membership::Percentile { q_low, q_high } => {
                if capacity < self.cfg.capacity.quantile(q_low) {
                    Some(1)
                } else if q_high.is_some_and(|q| capacity > self.cfg.capacity.quantile(q)) {
                    Some(2)
                } else {
                    None
                }
            }
            Membership::Dynamic(p) => {
                if self.rng.gen::<f64>() >= p.q_init {
                    return None;
                }
                match p.split_percentile {
                    Some(x) if capacity >= self.cfg.capacity.quantile(x) => Some(2),
                    _ => Some(1),
                }
            }
        }
    }

    /// Starts a transfer on an idle unchoked pair if `d` wants something `u` has.
    fn try_start(&mut self, u: NodeId, d: NodeId) {
        if self.ledger.pair(u, d).is_some() {
            return;
        }
        let Some(dn) = self.nodes.get(&d) else {
            return;
        };
        if !self.nodes.get(&u).is_some_and(|n| n.unchoke.contains(&d)) {
            return;
        }
        let strategy = if dn.coalition.is_some() {
            self.cfg.member_strategy
        } else {
            self.cfg.outsider_strategy
        };
        let up_bits = if u == SEED {
            &self.seed_bits
        } else {
            self.matrix.bits(u)
        };
        let choice = select_piece(
            strategy,
            &self.matrix,
            d,
            up_bits,
            &dn.in_flight,
            &dn.partial,
            &mut self.rng,
        );
        let Some(piece) = choice else {
            return;
        };
        if u == SEED {
            let empty = self
                .nodes
                .iter()
                .filter(|(&id, n)| id != SEED && n.partial.len() == n.in_flight.len())
                .count();
            self.result.empty_pd.push(empty);
        }
        let dn = self.nodes.get_mut(&d).expect("present");
        let remaining = *dn.partial.entry(piece).or_insert(1.0);
        dn.in_flight.insert(piece);
        self.matrix.claim(d, piece);
        self.ledger.start(u, d, piece, remaining, self.now);
        self.dirty.insert(u);
    }

    /// Drops a live transfer; the downloader keeps its partial progress.
    fn cancel(&mut self, id: TransferId) -> NodeId {
        let (t, credit) = self.ledger.remove(id, self.now);
        self.credit(credit);
        self.dirty.insert(t.uploader);
        let blocks = self.cfg.blocks_per_piece as f64;
        if let Some(dn) = self.nodes.get_mut(&t.downloader) {
            dn.in_flight.remove(&t.piece);
            let kept = ((1.0 - t.remaining) * blocks + DONE_EPS).floor() / blocks;
            if kept <= 0.0 {
                dn.partial.remove(&t.piece);
                self.matrix.release(t.downloader, t.piece);
            } else {
                dn.partial.insert(t.piece, 1.0 - kept);
            }
        }
        t.downloader
    }

    /// Lets `d` try every uploader currently unchoking it.
    fn retry_downloader(&mut self, d: NodeId) {
        let Some(ups) = self.nodes.get(&d).map(|n| n.unchoked_by.clone()) else {
            return;
        };
        for u in ups {
            self.try_start(u, d);
        }
    }

    fn apply_unchoke(&mut self, u: NodeId, new: BTreeSet<NodeId>) {
        let old = std::mem::take(&mut self.nodes.get_mut(&u).expect("present").unchoke);
        let mut choked = Vec::new();
        for &d in old.difference(&new) {
            if let Some(id) = self.ledger.pair(u, d) {
                choked.push(self.cancel(id));
            }
            if let Some(n) = self.nodes.get_mut(&d) {
                n.unchoked_by.remove(&u);
            }
        }
        for &d in new.difference(&old) {
            self.nodes.get_mut(&d).expect("present").unchoked_by.insert(u);
        }
        let targets: Vec<NodeId> = new.iter().copied().collect();
        self.nodes.get_mut(&u).expect("present").unchoke = new;
        for d in targets {
            self.try_start(u, d);
        }
        for d in choked {
            self.retry_downloader(d);
        }
        self.dirty.insert(u);
    }

    fn members_of(&self, g: GroupId) -> Vec<NodeId> {
        self.members.get(&g).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    /// Peers interested in `u`, with what each sent `u` last interval.
    fn tft_candidates(&self, u: NodeId) -> Vec<(NodeId, f64)> {
        let un = &self.nodes[&u];
        self.peers()
            .filter(|&x| x != u && self.interested(x, u))
            .map(|x| (x, un.received.get(&x).copied().unwrap_or(0.0)))
            .collect()
    }

    fn settle_incoming(&mut self, u: NodeId) {
        for id in self.ledger.of_downloader(u) {
            let c = self.ledger.settle(id, self.now);
            self.credit(c);
        }
    }

    fn rechoke(&mut self, u: NodeId) {
        let k = self.cfg.unchoke_slots;
        let coalition = self.nodes[&u].coalition;
        let new: BTreeSet<NodeId> = match coalition {
            Some(g) => {
                let members = self.members_of(g);
                choking::rechoke_random(u, &members, k, &mut self.rng)
                    .into_iter()
                    .collect()
            }
            None => {
                self.settle_incoming(u);
                let cands = self.tft_candidates(u);
                let mut set: BTreeSet<NodeId> =
                    choking::rechoke_tit_for_tat(&cands, k - 1).into_iter().collect();
                let keep = self.nodes[&u]
                    .optimistic
                    .filter(|o| !set.contains(o) && cands.iter().any(|(c, _)| c == o));
                let opt = match keep {
                    Some(o) => Some(o),
                    None => {
                        let pool: Vec<NodeId> =
                            cands.iter().map(|c| c.0).filter(|c| !set.contains(c)).collect();
                        choking::draw_optimistic(&pool, &mut self.rng)
                    }
                };
                set.extend(opt);
                self.nodes.get_mut(&u).expect("present").optimistic = opt;
                set
            }
        };
        self.nodes.get_mut(&u).expect("present").received.clear();
        self.apply_unchoke(u, new);
    }

    fn optimistic(&mut self, u: NodeId) {
        if self.nodes[&u].coalition.is_some() {
            return;
        }
        let un = &self.nodes[&u];
        let regular: BTreeSet<NodeId> = un
            .unchoke
            .iter()
            .copied()
            .filter(|&x| Some(x) != un.optimistic)
            .collect();
        let pool: Vec<NodeId> = self
            .peers()
            .filter(|&x| x != u && !regular.contains(&x) && self.interested(x, u))
            .collect();
        let opt = choking::draw_optimistic(&pool, &mut self.rng);
        let mut set = regular;
        set.extend(opt);
        self.nodes.get_mut(&u).expect("present").optimistic = opt;
        self.apply_unchoke(u, set);
    }

    fn seed_rechoke(&mut self) {
        let interested: Vec<NodeId> = self.peers().filter(|&d| self.interested(d, SEED)).collect();
        let set = choking::seed_rechoke(&interested, self.cfg.seed_slot_count(), &mut self.rng);
        self.apply_unchoke(SEED, set.into_iter().collect());
    }

    /// Hands free seed slots to random interested peers.
    fn seed_fill(&mut self) {
        let current = &self.nodes[&SEED].unchoke;
        let free = self.cfg.seed_slot_count().saturating_sub(current.len());
        if free == 0 {
            return;
        }
        let pool: Vec<NodeId> = self
            .peers()
            .filter(|d| !current.contains(d) && self.interested(*d, SEED))
            .collect();
        let extra = choking::seed_rechoke(&pool, free, &mut self.rng);
        if extra.is_empty() {
            return;
        }
        let mut set = current.clone();
        set.extend(extra);
        self.apply_unchoke(SEED, set);
    }

    fn on_complete(&mut self, id: TransferId, generation: u64) {
        if self.ledger.get(id).is_none_or(|t| t.generation != generation) {
            return;
        }
        let (t, credit) = self.ledger.remove(id, self.now);
        self.credit(credit);
        self.dirty.insert(t.uploader);
        let d = t.downloader;
        let dn = self.nodes.get_mut(&d).expect("present");
        dn.partial.remove(&t.piece);
        dn.in_flight.remove(&t.piece);
        self.matrix.add_piece(d, t.piece);
        if self.matrix.bits(d).is_complete() {
            self.depart(d);
            return;
        }
        self.try_start(t.uploader, d);
        let targets: Vec<NodeId> = self.nodes[&d].unchoke.iter().copied().collect();
        for x in targets {
            self.try_start(d, x);
        }
    }

    fn depart(&mut self, d: NodeId) {
        let node = self.nodes[&d].clone();
        self.result.completions.push(CompletionRecord {
            peer: d,
            arrival: node.arrival,
            completion: self.now,
            coalition: node.coalition,
            capacity: node.capacity,
        });
        let mut orphans = Vec::new();
        for id in self.ledger.of_uploader(d) {
            orphans.push(self.cancel(id));
        }
        for id in self.ledger.of_downloader(d) {
            self.cancel(id);
        }
        for u in &node.unchoked_by {
            if let Some(un) = self.nodes.get_mut(u) {
                un.unchoke.remove(&d);
                if un.optimistic == Some(d) {
                    un.optimistic = None;
                }
            }
        }
        for x in &node.unchoke {
            if let Some(xn) = self.nodes.get_mut(x) {
                xn.unchoked_by.remove(&d);
            }
        }
        self.nodes.remove(&d);
        self.matrix.remove_peer(d);
        if let Some(g) = node.coalition {
            self.members.get_mut(&g).expect("known coalition").remove(&d);
        }
        self.dirty.remove(&d);
        for x in orphans {
            self.retry_downloader(x);
        }
        if node.unchoked_by.contains(&SEED) {
            self.seed_fill();
        }
    }

    /// Bytes received so far, including progress not yet settled.
    fn cumulative(&self, p: NodeId) -> f64 {
        let pending: f64 = self
            .ledger
            .of_downloader(p)
            .into_iter()
            .map(|id| self.ledger.pending(id, self.now))
            .sum();
        self.nodes[&p].downloaded + pending
    }

    fn window_rate(&self, p: NodeId, span: f64) -> f64 {
        self.nodes[&p].window.rate(self.now, self.cumulative(p), span)
    }

    fn membership_decision(&mut self, u: NodeId) {
        let policy = self.policy.clone().expect("dynamic membership");
        let span = policy.r as f64 * self.cfg.rechoke_interval;
        self.push(self.now + span, EventKind::MembershipDecision(u));
        let own = self.window_rate(u, span);
        let mut rates: Vec<(GroupId, f64)> = Vec::new();
        for (&g, ms) in &self.members {
            if ms.is_empty() {
                continue;
            }
            let raw = ms.iter().map(|&m| self.window_rate(m, span)).sum::<f64>() / ms.len() as f64;
            rates.push((g, policy.perceived(raw)));
        }
        let best = rates
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let current = self.nodes[&u]
            .coalition
            .map(|g| (g, rates.iter().find(|r| r.0 == g).map_or(0.0, |r| r.1)));
        match decide(own, current, best) {
            Action::Stay => {}
            Action::Join(g) => self.set_membership(u, Some(g)),
            Action::Leave => self.set_membership(u, None),
        }
    }

    fn set_membership(&mut self, u: NodeId, new: Option<GroupId>) {
        let old = self.nodes[&u].coalition;
        if old == new {
            return;
        }
        if let Some(g) = old {
            self.members.get_mut(&g).expect("known coalition").remove(&u);
        }
        if let Some(g) = new {
            self.members.entry(g).or_default().insert(u);
        }
        self.matrix.set_group(u, new);
        let un = self.nodes.get_mut(&u).expect("present");
        un.coalition = new;
        un.optimistic = None;
        // former partners stop serving a peer that left their coalition
        if old.is_some() {
            let ups: Vec<NodeId> = self.nodes[&u].unchoked_by.iter().copied().collect();
            for x in ups {
                if x != SEED && self.nodes[&x].coalition == old {
                    let mut set = self.nodes[&x].unchoke.clone();
                    set.remove(&u);
                    self.apply_unchoke(x, set);
                }
            }
        }
        self.rechoke(u);
        self.retry_downloader(u);
    }

    fn measure(&mut self) {
        let t = self.now;
        let mut hist = vec![0usize; self.cfg.pieces + 1];
        for p in self.peers() {
            hist[self.matrix.bits(p).count()] += 1;
        }
        for (queue, &count) in hist.iter().enumerate() {
            if count > 0 {
                self.result.occupancy.push(OccupancySample { t, queue, count });
            }
        }
        let outside = self.peers().filter(|p| self.nodes[p].coalition.is_none()).count();
        self.result.coalition_sizes.push(SizeSample {
            t,
            coalition: 0,
            size: outside,
        });
        for (&g, ms) in &self.members {
            self.result.coalition_sizes.push(SizeSample {
                t,
                coalition: g,
                size: ms.len(),
            });
        }
        self.result.distinct.push(DistinctSample {
            t,
            distinct: self.matrix.distinct_pieces(None),
        });
        if let Some(p) = &self.policy {
            let span = p.r as f64 * self.cfg.rechoke_interval;
            let ids: Vec<NodeId> = self.peers().collect();
            for id in ids {
                let c = self.cumulative(id);
                self.nodes.get_mut(&id).expect("present").window.record(t, c, span);
            }
        }
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn audit(&self) -> Result<(), String> {
        let k = self.cfg.unchoke_slots;
        for (&id, n) in &self.nodes {
            let limit = if id == SEED { self.cfg.seed_slot_count() } else { k };
            if n.unchoke.len() > limit {
                return Err(format!("node {id} unchokes {} > {limit}", n.unchoke.len()));
            }
            if !n.in_flight.iter().all(|p| n.partial.contains_key(p)) {
                return Err(format!("peer {id}: D not inside P"));
            }
            if id != SEED && !n.partial.keys().eq(self.matrix.claimed_by(id)) {
                return Err(format!("peer {id}: claims differ from partial pieces"));
            }
            if id != SEED && n.partial.keys().any(|&p| self.matrix.has(id, p)) {
                return Err(format!("peer {id}: owned piece still partial"));
            }
            for &d in &n.unchoke {
                if !self.nodes.get(&d).is_some_and(|x| x.unchoked_by.contains(&id)) {
                    return Err(format!("unchoke index broken {id}->{d}"));
                }
            }
            let incoming = self.ledger.of_downloader(id).len();
            if incoming != n.in_flight.len() {
                return Err(format!("peer {id}: {incoming} transfers, {} in flight", n.in_flight.len()));
            }
            let ids = self.ledger.of_uploader(id);
            if !ids.is_empty() {
                let total: f64 = ids.iter().map(|t| self.ledger.get(*t).unwrap().rate).sum();
                if (total - n.capacity).abs() > 1e-9 * n.capacity.max(1.0) {
                    return Err(format!("uploader {id}: rates sum {total} != {}", n.capacity));
                }
            }
        }
        for (_, t) in self.ledger.iter() {
            let u = &self.nodes[&t.uploader];
            let d = &self.nodes[&t.downloader];
            if !u.unchoke.contains(&t.downloader) {
                return Err(format!("transfer from choking {}", t.uploader));
            }
            if !self.bits(t.uploader).contains(t.piece) || self.bits(t.downloader).contains(t.piece) {
                return Err(format!("transfer of piece {} not wanted", t.piece));
            }
            if !d.in_flight.contains(&t.piece) {
                return Err("transfer piece missing from D".into());
            }
            if t.remaining < -DONE_EPS {
                return Err("negative remaining work".into());
            }
            if u.coalition.is_some() && t.uploader != SEED && u.coalition != d.coalition {
                return Err(format!("member {} uploads to outsider {}", t.uploader, t.downloader));
            }
        }
        let (all, _) = self.matrix.recount();
        if all.as_slice() != self.matrix.replication() {
            return Err("replication counters drifted".into());
        }
        Ok(())
    }
}

fn coalition_ids(m: &Membership) -> Vec<GroupId> {
    match m {
        Membership::None => vec![],
        Membership::All | Membership::Random { .. } => vec![1],
        Membership::Percentile { q_high, .. } => {
            if q_high.is_some() {
                vec![1, 2]
            } else {
                vec![1]
            }
        }
        Membership::Dynamic(p) => {
            if p.split_percentile.is_some() {
                vec![1, 2]
            } else {
                vec![1]
            }
        }
    }
}

fn exp_sample<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

#[cfg(test)]
mod tests;
