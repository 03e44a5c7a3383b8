//! Combinatorial probabilities for a single uploader/downloader pair under
//! random choking.
//!
//! Queue indices double as piece counts: a peer in queue `i` owns exactly
//! `i` pieces. All functions here are pure.

use serde::{Deserialize, Serialize};

use crate::binom::{ln_choose_real, LnFactorials};
use crate::error::ModelError;

/// Expected occupancy and departure rate of each download stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueProfile {
    /// Expected number of peers holding exactly `i` pieces, `i = 0..B`.
    pub n_bar: Vec<f64>,
    /// Total transition rate out of queue `j` (1/seconds).
    pub d_bar: Vec<f64>,
}

impl QueueProfile {
    pub fn new(n_bar: Vec<f64>, d_bar: Vec<f64>) -> Self {
        debug_assert_eq!(n_bar.len(), d_bar.len());
        Self { n_bar, d_bar }
    }

    /// Number of queues, i.e. the file size in pieces.
    pub fn pieces(&self) -> usize {
        self.n_bar.len()
    }

    /// Expected number of leechers in the system.
    pub fn population(&self) -> f64 {
        self.n_bar.iter().sum()
    }
}

/// Number of complete-piece slots an uploader in queue `j` fits into one
/// unchoke period: `max(1, floor(min(delta_t, 1/d_bar_j) * u_bar_j))`.
pub fn slots_per_interval(delta_t: f64, u_bar_j: f64, d_bar_j: f64) -> usize {
    slot_ratio(delta_t, u_bar_j, d_bar_j).floor() as usize
}

/// Unfloored slot count `max(1, min(delta_t, 1/d_bar_j) * u_bar_j)`.
pub fn slot_ratio(delta_t: f64, u_bar_j: f64, d_bar_j: f64) -> f64 {
    let effective = if d_bar_j > 0.0 {
        delta_t.min(1.0 / d_bar_j)
    } else {
        delta_t
    };
    let raw = effective * u_bar_j;
    if raw.is_finite() && raw >= 1.0 {
        raw
    } else {
        1.0
    }
}

/// Probability that a downloader with `i` uniformly placed pieces is
/// interested in an uploader with `j` uniformly placed pieces.
pub fn prob_interested_first_slot(i: usize, j: usize, pieces: usize) -> f64 {
    first_slot(&LnFactorials::new(pieces), i, j, pieces)
}

fn first_slot(lf: &LnFactorials, i: usize, j: usize, pieces: usize) -> f64 {
    if i < j {
        return 1.0;
    }
    let covered = ratio(
        lf,
        &[(pieces as i64 - j as i64, i as i64 - j as i64)],
        &[(pieces as i64, i as i64)],
    );
    (1.0 - covered).clamp(0.0, 1.0)
}

/// Probability that `j`'s pieces missing from `i` number exactly `m`,
/// for independent uniform placements. This is the term subtracted at each
/// step of the slot recursion (`m = slot - 1`).
fn exact_gap_prob(lf: &LnFactorials, i: usize, j: usize, pieces: usize, m: usize) -> f64 {
    let (i, j, b, m) = (i as i64, j as i64, pieces as i64, m as i64);
    ratio(
        lf,
        &[(b, m), (b - m, j - m), (b - j, i - (j - m))],
        &[(b, i), (b, j)],
    )
}

/// `prod C(num) / prod C(den)` in log space; zero if any numerator
/// coefficient has an impossible argument.
fn ratio(lf: &LnFactorials, num: &[(i64, i64)], den: &[(i64, i64)]) -> f64 {
    let mut acc = 0.0;
    for &(n, k) in num {
        match lf.ln_choose(n, k) {
            Some(v) => acc += v,
            None => return 0.0,
        }
    }
    for &(n, k) in den {
        match lf.ln_choose(n, k) {
            Some(v) => acc -= v,
            None => return 0.0,
        }
    }
    acc.exp()
}

/// Interest probabilities for slots `1..=slots`. Element `l - 1` holds the
/// value for slot `l`.
pub fn interest_by_slot(i: usize, j: usize, pieces: usize, slots: usize) -> Vec<f64> {
    interest_by_slot_with(&LnFactorials::new(pieces), i, j, pieces, slots)
}

/// As [`interest_by_slot`], reusing a factorial table covering `pieces`.
pub fn interest_by_slot_with(
    lf: &LnFactorials,
    i: usize,
    j: usize,
    pieces: usize,
    slots: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(slots);
    let mut prev = 1.0;
    for slot in 1..=slots {
        if slot > j {
            out.push(0.0);
            continue;
        }
        let next = if slot == 1 {
            first_slot(lf, i, j, pieces)
        } else {
            (prev - exact_gap_prob(lf, i, j, pieces, slot - 1)).clamp(0.0, prev)
        };
        out.push(next);
        prev = next;
    }
    out
}

/// Interest probability given the downloader occupies slot `slot` of the
/// uploader's unchoke period.
pub fn prob_interested_at_slot(i: usize, j: usize, pieces: usize, slot: usize) -> f64 {
    if slot == 0 || slot > j {
        return 0.0;
    }
    interest_by_slot(i, j, pieces, slot)[slot - 1]
}

/// Interest probability averaged over a uniformly chosen slot.
pub fn prob_interested(i: usize, j: usize, pieces: usize, slots: usize) -> f64 {
    prob_interested_with(&LnFactorials::new(pieces), i, j, pieces, slots)
}

pub fn prob_interested_with(
    lf: &LnFactorials,
    i: usize,
    j: usize,
    pieces: usize,
    slots: usize,
) -> f64 {
    let slots = slots.max(1);
    // slots beyond j contribute zero
    let live = slots.min(j);
    let sum: f64 = interest_by_slot_with(lf, i, j, pieces, live).iter().sum();
    (sum / slots as f64).clamp(0.0, 1.0)
}

/// Probability that an out-connection of an uploader in queue `j` carries
/// data: the occupancy-weighted mean interest over all leecher queues.
pub fn out_connection_active_prob(
    profile: &QueueProfile,
    j: usize,
    slots: usize,
) -> Result<f64, ModelError> {
    let total = profile.population();
    if !(total > 0.0) {
        return Err(ModelError::DegeneratePopulation {
            what: "sum of queue occupancies",
            value: total,
        });
    }
    let b = profile.pieces();
    let lf = LnFactorials::new(b);
    let weighted: f64 = profile
        .n_bar
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0.0)
        .map(|(i, n)| n * prob_interested_with(&lf, i, j, b, slots))
        .sum();
    Ok((weighted / total).clamp(0.0, 1.0))
}

/// Binomial probability mass `C(n, w) p^w (1-p)^(n-w)` with a real-valued
/// `n`; zero when `w > n`.
pub fn binomial_mass(n: f64, w: u64, p: f64) -> f64 {
    let Some(ln_c) = ln_choose_real(n, w) else {
        return 0.0;
    };
    let rest = n - w as f64;
    let success = if w == 0 { 1.0 } else { p.powf(w as f64) };
    let failure = if rest == 0.0 { 1.0 } else { (1.0 - p).powf(rest) };
    ln_c.exp() * success * failure
}

/// Expected per-connection upload rate when each of `k` slots is active
/// independently with probability `eta` and capacity is split equally.
pub fn per_connection_upload_rate(upload_capacity: f64, k: usize, eta: f64) -> f64 {
    let eta = eta.clamp(0.0, 1.0);
    (1..=k as u64)
        .map(|w| upload_capacity / w as f64 * binomial_mass(k as f64, w, eta))
        .sum::<f64>()
        .clamp(0.0, upload_capacity)
}

/// Probability that a given peer lands in one of `k` uniformly drawn
/// unchoke slots out of `population` candidates: `1 - (1 - 1/N)^k`.
pub fn prob_unchoked(population: f64, k: usize) -> Result<f64, ModelError> {
    if !(population >= 1.0) {
        return Err(ModelError::DegeneratePopulation {
            what: "leecher population",
            value: population,
        });
    }
    let p = 1.0 / population;
    if p >= 1.0 {
        return Ok(1.0);
    }
    Ok((-(k as f64 * (-p).ln_1p()).exp_m1()).clamp(0.0, 1.0))
}

/// `P(S_ij) = P(A_ij) P(B_ij)`.
pub fn prob_connection_active(
    i: usize,
    j: usize,
    unchoke_slots: usize,
    profile: &QueueProfile,
    slots: usize,
) -> Result<f64, ModelError> {
    let unchoked = prob_unchoked(profile.population(), unchoke_slots)?;
    Ok(unchoked * prob_interested(i, j, profile.pieces(), slots))
}
