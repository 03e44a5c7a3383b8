//! Piece selection and coalition data-availability metrics.
//!
//! The ownership matrix is kept as one bitfield per peer plus incrementally
//! maintained replication counters, both swarm-wide and per coalition.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fixed-length set of piece indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitfield {
    words: Vec<u64>,
    len: usize,
    ones: usize,
}

impl Bitfield {
    pub fn new(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
            ones: 0,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut b = Self::new(len);
        for i in 0..len {
            b.insert(i);
        }
        b
    }

    pub fn from_indices(len: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut b = Self::new(len);
        for i in idx {
            b.insert(i);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of set bits.
    pub fn count(&self) -> usize {
        self.ones
    }

    pub fn is_complete(&self) -> bool {
        self.ones == self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Returns `true` if the bit was newly set.
    pub fn insert(&mut self, i: usize) -> bool {
        assert!(i < self.len, "piece {i} out of range");
        let (w, m) = (i / 64, 1u64 << (i % 64));
        if self.words[w] & m != 0 {
            return false;
        }
        self.words[w] |= m;
        self.ones += 1;
        true
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let t = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + t)
            })
        })
    }

    /// Pieces in `self` that `other` lacks.
    pub fn difference<'a>(&'a self, other: &'a Bitfield) -> impl Iterator<Item = usize> + 'a {
        self.words
            .iter()
            .zip(&other.words)
            .enumerate()
            .flat_map(|(w, (&a, &b))| {
                let mut bits = a & !b;
                std::iter::from_fn(move || {
                    if bits == 0 {
                        return None;
                    }
                    let t = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(w * 64 + t)
                })
            })
    }

    /// Whether `self` holds any piece `other` lacks.
    pub fn has_any_beyond(&self, other: &Bitfield) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & !b != 0)
    }
}

/// Peer identifier inside a piece matrix.
pub type PeerKey = u32;
/// Coalition identifier.
pub type GroupId = u32;

#[derive(Debug, Clone)]
struct Row {
    bits: Bitfield,
    group: Option<GroupId>,
    /// Pieces started but not yet owned.
    claims: BTreeSet<usize>,
}

/// Piece ownership matrix `V` with replication counters.
#[derive(Debug, Clone)]
pub struct PieceMatrix {
    pieces: usize,
    rows: BTreeMap<PeerKey, Row>,
    replication: Vec<u32>,
    group_replication: BTreeMap<GroupId, Vec<u32>>,
    group_members: BTreeMap<GroupId, BTreeSet<PeerKey>>,
    claims: Vec<u32>,
    group_claims: BTreeMap<GroupId, Vec<u32>>,
}

/// Population over which rarity is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every peer in the swarm (all peers are neighbours).
    Swarm,
    /// Members of the downloader's coalition; falls back to the swarm for
    /// peers outside any coalition.
    Coalition,
}

impl PieceMatrix {
    pub fn new(pieces: usize) -> Self {
        Self {
            pieces,
            rows: BTreeMap::new(),
            replication: vec![0; pieces],
            group_replication: BTreeMap::new(),
            group_members: BTreeMap::new(),
            claims: vec![0; pieces],
            group_claims: BTreeMap::new(),
        }
    }

    /// Builds a matrix from a piece-by-peer 0/1 table (rows are pieces,
    /// columns are peers `0..`), all peers in coalition `0`.
    pub fn from_table(table: &[Vec<u8>]) -> Self {
        let pieces = table.len();
        let peers = table.first().map_or(0, Vec::len);
        let mut m = Self::new(pieces);
        for p in 0..peers {
            m.insert_peer(p as PeerKey, Some(0));
            for (b, row) in table.iter().enumerate() {
                if row[p] != 0 {
                    m.add_piece(p as PeerKey, b);
                }
            }
        }
        m
    }

    pub fn pieces(&self) -> usize {
        self.pieces
    }

    pub fn insert_peer(&mut self, peer: PeerKey, group: Option<GroupId>) {
        let row = Row {
            bits: Bitfield::new(self.pieces),
            group,
            claims: BTreeSet::new(),
        };
        assert!(self.rows.insert(peer, row).is_none(), "peer {peer} already present");
        if let Some(g) = group {
            self.join_counts(g, peer);
        }
    }

    pub fn remove_peer(&mut self, peer: PeerKey) {
        let Some(row) = self.rows.remove(&peer) else {
            return;
        };
        for b in row.bits.iter() {
            self.replication[b] -= 1;
        }
        for &b in &row.claims {
            self.claims[b] -= 1;
        }
        if let Some(g) = row.group {
            let counts = self.group_replication.get_mut(&g).expect("group tracked");
            for b in row.bits.iter() {
                counts[b] -= 1;
            }
            let claims = self.group_claims.get_mut(&g).expect("group tracked");
            for &b in &row.claims {
                claims[b] -= 1;
            }
            self.group_members.get_mut(&g).expect("group tracked").remove(&peer);
        }
    }

    fn join_counts(&mut self, g: GroupId, peer: PeerKey) {
        let pieces = self.pieces;
        let counts = self
            .group_replication
            .entry(g)
            .or_insert_with(|| vec![0; pieces]);
        let row = &self.rows[&peer];
        for b in row.bits.iter() {
            counts[b] += 1;
        }
        let claims = self.group_claims.entry(g).or_insert_with(|| vec![0; pieces]);
        for &b in &row.claims {
            claims[b] += 1;
        }
        self.group_members.entry(g).or_default().insert(peer);
    }

    /// Moves a peer between coalitions, keeping the counters consistent.
    pub fn set_group(&mut self, peer: PeerKey, group: Option<GroupId>) {
        let old = self.rows[&peer].group;
        if old == group {
            return;
        }
        if let Some(g) = old {
            let counts = self.group_replication.get_mut(&g).expect("group tracked");
            for b in self.rows[&peer].bits.iter() {
                counts[b] -= 1;
            }
            let claims = self.group_claims.get_mut(&g).expect("group tracked");
            for &b in &self.rows[&peer].claims {
                claims[b] -= 1;
            }
            self.group_members.get_mut(&g).expect("group tracked").remove(&peer);
        }
        self.rows.get_mut(&peer).expect("peer present").group = group;
        if let Some(g) = group {
            self.join_counts(g, peer);
        }
    }

    /// Records that `peer` has started fetching `piece`.
    pub fn claim(&mut self, peer: PeerKey, piece: usize) {
        let row = self.rows.get_mut(&peer).expect("peer present");
        if row.bits.contains(piece) || !row.claims.insert(piece) {
            return;
        }
        self.claims[piece] += 1;
        if let Some(g) = row.group {
            self.group_claims.get_mut(&g).expect("group tracked")[piece] += 1;
        }
    }

    /// Drops a claim without granting the piece.
    pub fn release(&mut self, peer: PeerKey, piece: usize) {
        let Some(row) = self.rows.get_mut(&peer) else {
            return;
        };
        if !row.claims.remove(&piece) {
            return;
        }
        self.claims[piece] -= 1;
        if let Some(g) = row.group {
            self.group_claims.get_mut(&g).expect("group tracked")[piece] -= 1;
        }
    }

    pub fn add_piece(&mut self, peer: PeerKey, piece: usize) {
        self.release(peer, piece);
        let row = self.rows.get_mut(&peer).expect("peer present");
        if row.bits.insert(piece) {
            self.replication[piece] += 1;
            if let Some(g) = row.group {
                self.group_replication.get_mut(&g).expect("group tracked")[piece] += 1;
            }
        }
    }

    pub fn has(&self, peer: PeerKey, piece: usize) -> bool {
        self.rows.get(&peer).is_some_and(|r| r.bits.contains(piece))
    }

    pub fn bits(&self, peer: PeerKey) -> &Bitfield {
        &self.rows[&peer].bits
    }

    /// Pieces `peer` has started but does not own.
    pub fn claimed_by(&self, peer: PeerKey) -> &BTreeSet<usize> {
        &self.rows[&peer].claims
    }

    pub fn group_of(&self, peer: PeerKey) -> Option<GroupId> {
        self.rows.get(&peer).and_then(|r| r.group)
    }

    pub fn peers(&self) -> impl Iterator<Item = PeerKey> + '_ {
        self.rows.keys().copied()
    }

    /// Pieces owned per peer.
    pub fn per_peer_counts(&self) -> BTreeMap<PeerKey, usize> {
        self.rows.iter().map(|(p, r)| (*p, r.bits.count())).collect()
    }

    /// Swarm-wide copy count of each piece.
    pub fn replication(&self) -> &[u32] {
        &self.replication
    }

    /// Copy counts restricted to one coalition.
    pub fn group_replication(&self, group: GroupId) -> Option<&[u32]> {
        self.group_replication.get(&group).map(Vec::as_slice)
    }

    pub fn group_members(&self, group: GroupId) -> impl Iterator<Item = PeerKey> + '_ {
        self.group_members.get(&group).into_iter().flatten().copied()
    }

    /// Copy counts seen by `downloader` under `scope`.
    pub fn counts_for(&self, downloader: PeerKey, scope: Scope) -> &[u32] {
        match (scope, self.group_of(downloader)) {
            (Scope::Coalition, Some(g)) => &self.group_replication[&g],
            _ => &self.replication,
        }
    }

    /// Outstanding claims seen by `downloader` under `scope`.
    pub fn claims_for(&self, downloader: PeerKey, scope: Scope) -> &[u32] {
        match (scope, self.group_of(downloader)) {
            (Scope::Coalition, Some(g)) => &self.group_claims[&g],
            _ => &self.claims,
        }
    }

    /// Peers over which `downloader` looks for the poorest member.
    fn scope_peers(&self, downloader: PeerKey, scope: Scope) -> Vec<PeerKey> {
        match (scope, self.group_of(downloader)) {
            (Scope::Coalition, Some(g)) => self.group_members(g).collect(),
            _ => self.peers().collect(),
        }
    }

    /// Distinct pieces present among `scope` peers (all peers if `None`).
    pub fn distinct_pieces(&self, group: Option<GroupId>) -> usize {
        let counts = match group {
            Some(g) => match self.group_replication.get(&g) {
                Some(c) => c.as_slice(),
                None => return 0,
            },
            None => &self.replication,
        };
        counts.iter().filter(|&&c| c > 0).count()
    }

    /// Recomputes every counter from the bitfields (consistency check).
    pub fn recount(&self) -> (Vec<u32>, BTreeMap<GroupId, Vec<u32>>) {
        let mut all = vec![0; self.pieces];
        let mut groups: BTreeMap<GroupId, Vec<u32>> = BTreeMap::new();
        for row in self.rows.values() {
            for b in row.bits.iter() {
                all[b] += 1;
                if let Some(g) = row.group {
                    groups.entry(g).or_insert_with(|| vec![0; self.pieces])[b] += 1;
                }
            }
        }
        for g in self.group_replication.keys() {
            groups.entry(*g).or_insert_with(|| vec![0; self.pieces]);
        }
        (all, groups)
    }
}

/// Piece-selection rule for a group of peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceStrategy {
    Random,
    /// Rarest-first with copies counted over the whole swarm.
    RarestFirst,
    /// Rarest-first with copies counted inside the downloader's coalition.
    CoalitionRarestFirst,
    PeerBalance,
}

/// Pieces `uploader_has` that the downloader neither owns nor is fetching.
pub fn eligible_pieces(
    matrix: &PieceMatrix,
    downloader: PeerKey,
    uploader_has: &Bitfield,
    in_flight: &BTreeSet<usize>,
) -> Vec<usize> {
    uploader_has
        .difference(matrix.bits(downloader))
        .filter(|b| !in_flight.contains(b))
        .collect()
}

/// Partially downloaded eligible piece with the least remaining work, if
/// any. Ties go to the lowest index.
pub fn pick_partial(eligible: &[usize], partial: &BTreeMap<usize, f64>) -> Option<usize> {
    eligible
        .iter()
        .filter_map(|b| partial.get(b).map(|rem| (*b, *rem)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(b, _)| b)
}

/// Eligible pieces of minimum copy count under `scope`.
pub fn rarest_set(
    matrix: &PieceMatrix,
    downloader: PeerKey,
    eligible: &[usize],
    scope: Scope,
) -> Vec<usize> {
    let counts = matrix.counts_for(downloader, scope);
    let Some(min) = eligible.iter().map(|&b| counts[b]).min() else {
        return Vec::new();
    };
    eligible.iter().copied().filter(|&b| counts[b] == min).collect()
}

/// Rarest-first selection. Partially downloaded pieces the downloader is
/// not currently fetching come first; otherwise a uniformly random piece of
/// minimum copy count.
pub fn select_rarest_first<R: Rng + ?Sized>(
    matrix: &PieceMatrix,
    downloader: PeerKey,
    uploader_has: &Bitfield,
    in_flight: &BTreeSet<usize>,
    partial: &BTreeMap<usize, f64>,
    scope: Scope,
    rng: &mut R,
) -> Option<usize> {
    let eligible = eligible_pieces(matrix, downloader, uploader_has, in_flight);
    if let Some(b) = pick_partial(&eligible, partial) {
        return Some(b);
    }
    rarest_set(matrix, downloader, &eligible, scope)
        .choose(rng)
        .copied()
}

/// Peer-Balance Rarest-First. Among the coalition-rarest eligible pieces,
/// partial ones come first; otherwise pieces fewest members are fetching,
/// and among those the one whose poorest missing coalition peer owns the
/// fewest pieces. Ties on that count go to the lowest piece index.
pub fn select_peer_balance(
    matrix: &PieceMatrix,
    downloader: PeerKey,
    uploader_has: &Bitfield,
    in_flight: &BTreeSet<usize>,
    partial: &BTreeMap<usize, f64>,
) -> Option<usize> {
    let eligible = eligible_pieces(matrix, downloader, uploader_has, in_flight);
    let rarest = rarest_set(matrix, downloader, &eligible, Scope::Coalition);
    if let Some(b) = pick_partial(&rarest, partial) {
        return Some(b);
    }
    peer_balance_choice(matrix, downloader, &eligible)
}

/// The double minimization on its own, without the partial-piece rule.
pub fn peer_balance_choice(
    matrix: &PieceMatrix,
    downloader: PeerKey,
    eligible: &[usize],
) -> Option<usize> {
    let mut rarest = rarest_set(matrix, downloader, eligible, Scope::Coalition);
    // pieces other members are already fetching go last
    let claims = matrix.claims_for(downloader, Scope::Coalition);
    if let Some(least) = rarest.iter().map(|&b| claims[b]).min() {
        rarest.retain(|&b| claims[b] == least);
    }
    if rarest.len() <= 1 {
        return rarest.first().copied();
    }
    let mut poorest_first: Vec<(usize, PeerKey)> = matrix
        .scope_peers(downloader, Scope::Coalition)
        .into_iter()
        .map(|p| (matrix.bits(p).count(), p))
        .collect();
    poorest_first.sort_unstable();
    // m_b: piece count of the poorest peer missing b (B + 1 if nobody misses it)
    let sentinel = matrix.pieces() + 1;
    rarest
        .into_iter()
        .map(|b| {
            let m = poorest_first
                .iter()
                .find(|(_, p)| !matrix.has(*p, b))
                .map_or(sentinel, |(c, _)| *c);
            (m, b)
        })
        .min()
        .map(|(_, b)| b)
}

/// Dispatches to the configured strategy.
pub fn select_piece<R: Rng + ?Sized>(
    strategy: PieceStrategy,
    matrix: &PieceMatrix,
    downloader: PeerKey,
    uploader_has: &Bitfield,
    in_flight: &BTreeSet<usize>,
    partial: &BTreeMap<usize, f64>,
    rng: &mut R,
) -> Option<usize> {
    match strategy {
        PieceStrategy::Random => {
            let eligible = eligible_pieces(matrix, downloader, uploader_has, in_flight);
            pick_partial(&eligible, partial).or_else(|| eligible.choose(rng).copied())
        }
        PieceStrategy::RarestFirst => select_rarest_first(
            matrix, downloader, uploader_has, in_flight, partial, Scope::Swarm, rng,
        ),
        PieceStrategy::CoalitionRarestFirst => select_rarest_first(
            matrix, downloader, uploader_has, in_flight, partial, Scope::Coalition, rng,
        ),
        PieceStrategy::PeerBalance => {
            select_peer_balance(matrix, downloader, uploader_has, in_flight, partial)
        }
    }
}

/// Best-case distinct-piece count when the seed only ever uploads new
/// pieces: `min(floor(u_s t), B)`.
pub fn availability_upper_bound(seed_capacity: f64, pieces: usize, t: f64) -> usize {
    if t <= 0.0 {
        return 0;
    }
    ((seed_capacity * t).floor() as usize).min(pieces)
}

/// Time at which the best case has disseminated every piece.
pub fn best_case_horizon(seed_capacity: f64, pieces: usize) -> f64 {
    pieces as f64 / seed_capacity
}

/// One sample of the availability trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilitySample {
    pub t: f64,
    pub n_c: usize,
    pub n_d: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityTrace {
    pub samples: Vec<AvailabilitySample>,
    pub t_star: f64,
    pub avg_loss: f64,
    pub e_pd: Option<f64>,
}

/// Availability loss `L(t) = (N_c - N_d) / N_c` at each sample in
/// `(0, t_star]`, and its time average by the trapezoidal rule.
///
/// `distinct` holds `(t, N_d(t))` pairs in increasing time. Samples at
/// `t = 0` (where `N_c = 0`) take `L = 0`.
pub fn availability_loss(
    distinct: &[(f64, usize)],
    seed_capacity: f64,
    pieces: usize,
    t_star: f64,
) -> (Vec<AvailabilitySample>, f64) {
    let samples: Vec<AvailabilitySample> = distinct
        .iter()
        .filter(|(t, _)| *t <= t_star + 1e-9)
        .map(|&(t, n_d)| {
            let n_c = availability_upper_bound(seed_capacity, pieces, t);
            let loss = if n_c == 0 {
                0.0
            } else {
                (n_c.saturating_sub(n_d)) as f64 / n_c as f64
            };
            AvailabilitySample { t, n_c, n_d, loss }
        })
        .collect();
    (samples.clone(), time_average(&samples, t_star))
}

fn time_average(samples: &[AvailabilitySample], t_star: f64) -> f64 {
    if samples.len() < 2 || t_star <= 0.0 {
        return samples.first().map_or(0.0, |s| s.loss);
    }
    let area: f64 = samples
        .windows(2)
        .map(|w| 0.5 * (w[0].loss + w[1].loss) * (w[1].t - w[0].t))
        .sum();
    let span = samples.last().unwrap().t - samples[0].t;
    if span > 0.0 {
        area / span
    } else {
        samples[0].loss
    }
}

/// Mean number of empty `P \ D` sets over the seed-request instants.
pub fn track_empty_pd(samples: &[usize]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    Some(samples.iter().sum::<usize>() as f64 / samples.len() as f64)
}
