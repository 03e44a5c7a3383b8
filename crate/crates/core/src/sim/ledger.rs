//! Fluid piece transfers under equal-split upload capacity.

use std::collections::{BTreeMap, BTreeSet};

use super::NodeId;

pub type TransferId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub uploader: NodeId,
    pub downloader: NodeId,
    pub piece: usize,
    /// Work left, in pieces.
    pub remaining: f64,
    pub rate: f64,
    /// Time `remaining` was last brought up to date.
    pub since: f64,
    /// Bumped on every rate change; stale completion events carry an old one.
    pub generation: u64,
}

/// Progress credited to a downloader from an uploader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Credit {
    pub uploader: NodeId,
    pub downloader: NodeId,
    pub amount: f64,
}

/// A completion that must be (re)scheduled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Due {
    pub id: TransferId,
    pub generation: u64,
    pub at: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TransferLedger {
    live: BTreeMap<TransferId, Transfer>,
    by_uploader: BTreeMap<NodeId, BTreeSet<TransferId>>,
    by_downloader: BTreeMap<NodeId, BTreeSet<TransferId>>,
    by_pair: BTreeMap<(NodeId, NodeId), TransferId>,
    next: TransferId,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn get(&self, id: TransferId) -> Option<&Transfer> {
        self.live.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TransferId, &Transfer)> {
        self.live.iter()
    }

    pub fn pair(&self, uploader: NodeId, downloader: NodeId) -> Option<TransferId> {
        self.by_pair.get(&(uploader, downloader)).copied()
    }

    pub fn of_uploader(&self, uploader: NodeId) -> Vec<TransferId> {
        self.by_uploader
            .get(&uploader)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn of_downloader(&self, downloader: NodeId) -> Vec<TransferId> {
        self.by_downloader
            .get(&downloader)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn uploader_count(&self, uploader: NodeId) -> usize {
        self.by_uploader.get(&uploader).map_or(0, BTreeSet::len)
    }

    /// Opens a transfer at rate zero; the caller reallocates the uploader.
    pub fn start(
        &mut self,
        uploader: NodeId,
        downloader: NodeId,
        piece: usize,
        remaining: f64,
        now: f64,
    ) -> TransferId {
        assert!(
            !self.by_pair.contains_key(&(uploader, downloader)),
            "pair {uploader}->{downloader} already busy"
        );
        let id = self.next;
        self.next += 1;
        self.live.insert(
            id,
            Transfer {
                uploader,
                downloader,
                piece,
                remaining,
                rate: 0.0,
                since: now,
                generation: 0,
            },
        );
        self.by_uploader.entry(uploader).or_default().insert(id);
        self.by_downloader.entry(downloader).or_default().insert(id);
        self.by_pair.insert((uploader, downloader), id);
        id
    }

    /// Advances one transfer to `now` at its current rate.
    pub fn settle(&mut self, id: TransferId, now: f64) -> Credit {
        let t = self.live.get_mut(&id).expect("live transfer");
        let amount = (t.rate * (now - t.since)).min(t.remaining).max(0.0);
        t.remaining -= amount;
        t.since = now;
        Credit {
            uploader: t.uploader,
            downloader: t.downloader,
            amount,
        }
    }

    /// Settles and drops a transfer.
    pub fn remove(&mut self, id: TransferId, now: f64) -> (Transfer, Credit) {
        let credit = self.settle(id, now);
        let t = self.live.remove(&id).expect("live transfer");
        drop_index(&mut self.by_uploader, t.uploader, id);
        drop_index(&mut self.by_downloader, t.downloader, id);
        self.by_pair.remove(&(t.uploader, t.downloader));
        (t, credit)
    }

    /// Equal split: settles every transfer of `uploader` at its old rate,
    /// then gives each `capacity / count` and returns the new completion
    /// times.
    pub fn reallocate_rates(
        &mut self,
        uploader: NodeId,
        capacity: f64,
        now: f64,
        credits: &mut Vec<Credit>,
    ) -> Vec<Due> {
        let ids = self.of_uploader(uploader);
        if ids.is_empty() {
            return Vec::new();
        }
        let rate = capacity / ids.len() as f64;
        ids.into_iter()
            .map(|id| {
                credits.push(self.settle(id, now));
                let t = self.live.get_mut(&id).expect("live transfer");
                t.rate = rate;
                t.generation += 1;
                Due {
                    id,
                    generation: t.generation,
                    at: now + t.remaining / rate,
                }
            })
            .collect()
    }

    /// Progress since the last settlement, not yet credited.
    pub fn pending(&self, id: TransferId, now: f64) -> f64 {
        let t = &self.live[&id];
        (t.rate * (now - t.since)).min(t.remaining).max(0.0)
    }
}

fn drop_index(index: &mut BTreeMap<NodeId, BTreeSet<TransferId>>, key: NodeId, id: TransferId) {
    if let Some(s) = index.get_mut(&key) {
        s.remove(&id);
        if s.is_empty() {
            index.remove(&key);
        }
    }
}
