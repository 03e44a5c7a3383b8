//! Flow-balance fixed point over the chain of download stages.
//!
//! Queue `i` holds peers owning exactly `i` pieces. A peer leaves queue `i`
//! at total rate `U` (the swarm-average per-connection upload rate) and
//! lands in queue `i + w` where `w` is its number of concurrently active
//! in-connections, drawn from a truncated binomial.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::binom::LnFactorials;
use crate::error::ModelError;
use crate::params::ModelParams;
use crate::prob_kernels::{
    binomial_mass, per_connection_upload_rate, prob_interested_with, prob_unchoked, slot_ratio,
    QueueProfile,
};

/// Solved steady state of the coalition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteadyState {
    pub params: ModelParams,
    pub profile: QueueProfile,
    /// `gamma[i][w - 1]` is the rate from queue `i` to queue `i + w`.
    pub gamma: Vec<Vec<f64>>,
    /// `jump_prob[i][w - 1] = P(W_i = w)`.
    pub jump_prob: Vec<Vec<f64>>,
    /// Per-connection upload rate of an uploader in queue `j` (zero for `j = 0`).
    pub u_bar_per_queue: Vec<f64>,
    pub u_bar_global: f64,
    pub n_up: f64,
    /// Probability that an in-connection of a peer in queue `i` is active.
    pub s_active: Vec<f64>,
    /// Upper bound on concurrent in-connections per queue.
    pub w_bound: Vec<usize>,
    /// Unfloored slots per unchoke period per uploader queue.
    pub slots: Vec<f64>,
    /// Out-connection activity per uploader queue.
    pub eta: Vec<f64>,
    /// Largest relative change of the final fixed-point step.
    pub residual: f64,
    pub iterations: usize,
}

impl SteadyState {
    /// `gamma_{i,j}`; zero for `j <= i` or outside the jump support.
    pub fn gamma_at(&self, i: usize, j: usize) -> f64 {
        if j <= i || i >= self.gamma.len() {
            return 0.0;
        }
        self.gamma[i].get(j - i - 1).copied().unwrap_or(0.0)
    }

    /// Total departure rate of queue `i`.
    pub fn departure_rate(&self, i: usize) -> f64 {
        self.gamma[i].iter().sum()
    }

    /// Largest flow-balance violation, relative to the arrival rate.
    pub fn flow_balance_residual(&self) -> f64 {
        let b = self.params.pieces;
        let lambda = self.params.arrival_rate;
        let n = &self.profile.n_bar;
        let mut inflow = vec![0.0; b + 1];
        inflow[0] = lambda;
        for i in 0..b {
            for (w, g) in self.gamma[i].iter().enumerate() {
                inflow[i + w + 1] += g * n[i];
            }
        }
        (0..b)
            .map(|i| (inflow[i] - n[i] * self.departure_rate(i)).abs() / lambda)
            .fold(0.0, f64::max)
    }
}

/// Expected remaining completion time from each queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionTimes {
    pub t_remaining: Vec<f64>,
}

impl CompletionTimes {
    /// Expected download time of a newly arrived peer.
    pub fn t0(&self) -> f64 {
        self.t_remaining[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rechoke_interval: f64,
    pub unchoke_slots: usize,
    /// `None` when the solve failed; see `error`.
    pub t0: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<SweepPoint>,
    pub best: SweepPoint,
    pub ties: Vec<SweepPoint>,
}

/// `N_up`: leechers able to upload, i.e. everyone outside queue 0.
pub fn uploader_population(profile: &QueueProfile) -> f64 {
    profile.n_bar.iter().skip(1).sum()
}

/// Occupancy-weighted mean of `P(S_ij)` over uploader queues `j >= 1`.
/// `s_ij_row[j]` is read for `j = 1..B`; entry 0 is ignored.
pub fn in_connection_active_prob(
    profile: &QueueProfile,
    s_ij_row: &[f64],
) -> Result<f64, ModelError> {
    let n_up = uploader_population(profile);
    if !(n_up > 0.0) {
        return Err(ModelError::DegeneratePopulation {
            what: "uploader population",
            value: n_up,
        });
    }
    let weighted: f64 = profile
        .n_bar
        .iter()
        .zip(s_ij_row)
        .skip(1)
        .map(|(n, s)| n * s)
        .sum();
    Ok((weighted / n_up).clamp(0.0, 1.0))
}

/// `P(W = w)` for `w = 1..=w_bound`: binomial `(n_up, p)` masses with
/// `w = 0` dropped and everything above the bound cut, renormalized.
pub fn concurrency_distribution(
    n_up: f64,
    p_active: f64,
    w_bound: usize,
) -> Result<Vec<f64>, ModelError> {
    let raw: Vec<f64> = (1..=w_bound as u64)
        .map(|w| binomial_mass(n_up, w, p_active))
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(ModelError::ZeroConcurrency);
    }
    Ok(raw.into_iter().map(|m| m / total).collect())
}

/// `gamma_{i,i+w} = U * P(W_i = w)`; the distribution is already normalized.
pub fn transition_rates(u_bar_global: f64, dist: &[f64]) -> Vec<f64> {
    dist.iter().map(|p| u_bar_global * p).collect()
}

/// Iteration variables: occupancies, departure rates and per-uploader rates.
#[derive(Clone)]
struct Iterate {
    n_bar: Vec<f64>,
    d_bar: Vec<f64>,
    u_bar: Vec<f64>,
}

struct Kernel {
    gamma: Vec<Vec<f64>>,
    jump_prob: Vec<Vec<f64>>,
    u_bar: Vec<f64>,
    u_bar_global: f64,
    n_up: f64,
    s_active: Vec<f64>,
    w_bound: Vec<usize>,
    slots: Vec<f64>,
    eta: Vec<f64>,
}

/// Memoized interest columns `P(B_ij), i = 0..B`, keyed by uploader queue
/// and integer slot count.
struct InterestCache {
    lf: LnFactorials,
    columns: BTreeMap<(usize, usize), Vec<f64>>,
}

impl InterestCache {
    fn new(pieces: usize) -> Self {
        Self {
            lf: LnFactorials::new(pieces),
            columns: BTreeMap::new(),
        }
    }

    fn column(&mut self, j: usize, slots: usize) -> &[f64] {
        let b = self.lf.max();
        let lf = &self.lf;
        self.columns.entry((j, slots)).or_insert_with(|| {
            (0..b).map(|i| prob_interested_with(lf, i, j, b, slots)).collect()
        })
    }

    /// Interest column for a fractional slot count: linear blend of the two
    /// neighbouring integer counts. Keeps the fixed-point map continuous.
    fn blended(&mut self, j: usize, slots: f64) -> Vec<f64> {
        let lo = slots.floor() as usize;
        let frac = slots - lo as f64;
        let low = self.column(j, lo).to_vec();
        if frac == 0.0 {
            return low;
        }
        let high = self.column(j, lo + 1);
        low.iter()
            .zip(high)
            .map(|(a, b)| (1.0 - frac) * a + frac * b)
            .collect()
    }
}

fn evaluate(
    params: &ModelParams,
    it: &Iterate,
    cache: &mut InterestCache,
) -> Result<Kernel, ModelError> {
    let b = params.pieces;
    let k = params.unchoke_slots;
    let profile = QueueProfile::new(it.n_bar.clone(), it.d_bar.clone());
    let population = profile.population();
    if !(population > 0.0) {
        return Err(ModelError::DegeneratePopulation {
            what: "sum of queue occupancies",
            value: population,
        });
    }
    // with fewer than one expected competitor the only candidate is always picked
    let unchoked = prob_unchoked(population.max(1.0), k)?;
    let n_up = uploader_population(&profile);

    let mut slots = vec![1.0; b];
    let mut eta = vec![0.0; b];
    let mut u_bar = vec![0.0; b];
    // s_ij[i][j] for uploader queues j >= 1
    let mut s_ij = vec![vec![0.0; b]; b];
    for j in 1..b {
        slots[j] = slot_ratio(params.rechoke_interval, it.u_bar[j], it.d_bar[j]);
        let col = cache.blended(j, slots[j]);
        let weighted: f64 = it.n_bar.iter().zip(&col).map(|(n, p)| n * p).sum();
        eta[j] = (weighted / population).clamp(0.0, 1.0);
        u_bar[j] = per_connection_upload_rate(params.upload_capacity, k, eta[j]);
        for (i, p) in col.iter().enumerate() {
            s_ij[i][j] = unchoked * p;
        }
    }

    let (u_bar_global, s_active) = if n_up > 0.0 {
        let u: f64 = (1..b).map(|j| it.n_bar[j] * u_bar[j]).sum::<f64>() / n_up;
        let s = (0..b)
            .map(|i| in_connection_active_prob(&profile, &s_ij[i]))
            .collect::<Result<Vec<_>, _>>()?;
        (u, s)
    } else {
        // no peer can upload yet (B = 1, or queue 0 holds everyone):
        // every slot of a notional uploader is busy
        (per_connection_upload_rate(params.upload_capacity, k, 1.0), vec![1.0; b])
    };

    let cap = (population - 1.0).floor().max(1.0) as usize;
    let mut gamma = Vec::with_capacity(b);
    let mut jump_prob = Vec::with_capacity(b);
    let mut w_bound = Vec::with_capacity(b);
    for i in 0..b {
        let bound = (b - i).min(cap).max(1);
        let dist = if n_up > 0.0 {
            concurrency_distribution(n_up.max(1.0), s_active[i], bound)
                .map_err(|_| ModelError::NoProgress { queue: i })?
        } else {
            let mut d = vec![0.0; bound];
            d[0] = 1.0;
            d
        };
        gamma.push(transition_rates(u_bar_global, &dist));
        jump_prob.push(dist);
        w_bound.push(bound);
    }

    Ok(Kernel {
        gamma,
        jump_prob,
        u_bar,
        u_bar_global,
        n_up,
        s_active,
        w_bound,
        slots,
        eta,
    })
}

/// Occupancies balancing flow for a fixed set of transition rates. The chain
/// only moves forward, so this is a forward substitution.
fn balance(lambda: f64, gamma: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let b = gamma.len();
    let d_bar: Vec<f64> = gamma.iter().map(|row| row.iter().sum()).collect();
    let mut inflow = vec![0.0; b + 1];
    inflow[0] = lambda;
    let mut n_bar = vec![0.0; b];
    for i in 0..b {
        if !(d_bar[i] > 0.0) {
            return Err(ModelError::NoProgress { queue: i });
        }
        n_bar[i] = inflow[i] / d_bar[i];
        for (w, g) in gamma[i].iter().enumerate() {
            inflow[i + w + 1] += g * n_bar[i];
        }
    }
    Ok((n_bar, d_bar))
}

fn max_rel_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                (a - b).abs() / scale
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Solves the steady state by damped fixed-point iteration.
pub fn solve(params: &ModelParams) -> Result<SteadyState, ModelError> {
    params.validate()?;
    let b = params.pieces;
    let u_p = params.upload_capacity;
    let k = params.unchoke_slots as f64;
    let mut it = Iterate {
        n_bar: vec![params.arrival_rate / u_p; b],
        d_bar: vec![u_p; b],
        u_bar: vec![u_p / k; b],
    };
    let mut cache = InterestCache::new(b);
    let mut residual = f64::INFINITY;

    for iteration in 1..=params.max_iter {
        let kernel = evaluate(params, &it, &mut cache)?;
        let (n_new, d_new) = balance(params.arrival_rate, &kernel.gamma)?;
        residual = max_rel_change(&it.n_bar, &n_new)
            .max(max_rel_change(&it.d_bar, &d_new))
            .max(max_rel_change(&it.u_bar[1..], &kernel.u_bar[1..]));

        if residual <= params.tol {
            return Ok(SteadyState {
                params: params.clone(),
                profile: QueueProfile::new(n_new, d_new),
                gamma: kernel.gamma,
                jump_prob: kernel.jump_prob,
                u_bar_per_queue: kernel.u_bar,
                u_bar_global: kernel.u_bar_global,
                n_up: kernel.n_up,
                s_active: kernel.s_active,
                w_bound: kernel.w_bound,
                slots: kernel.slots,
                eta: kernel.eta,
                residual,
                iterations: iteration,
            });
        }

        let a = params.damping;
        let mix = |old: &mut [f64], new: &[f64]| {
            for (o, n) in old.iter_mut().zip(new) {
                *o = (1.0 - a) * *o + a * n;
            }
        };
        mix(&mut it.n_bar, &n_new);
        mix(&mut it.d_bar, &d_new);
        mix(&mut it.u_bar, &kernel.u_bar);
    }

    Err(ModelError::NotConverged {
        iterations: params.max_iter,
        residual,
    })
}

/// Backward dynamic program for the expected remaining download time.
pub fn completion_time(state: &SteadyState) -> Result<CompletionTimes, ModelError> {
    let b = state.params.pieces;
    let mut t = vec![0.0; b + 1];
    for i in (0..b).rev() {
        let out = state.departure_rate(i);
        if !(out > 0.0) {
            return Err(ModelError::NoProgress { queue: i });
        }
        let onward: f64 = state.jump_prob[i]
            .iter()
            .enumerate()
            .map(|(w, p)| p * t[i + w + 1])
            .sum();
        t[i] = 1.0 / out + onward;
    }
    t.truncate(b);
    Ok(CompletionTimes { t_remaining: t })
}

/// Solves the model on every `(rechoke_interval, unchoke_slots)` pair and
/// reports the one with the smallest expected completion time.
pub fn sweep(
    base: &ModelParams,
    rechoke_intervals: &[f64],
    unchoke_slots: &[usize],
) -> Result<SweepResult, ModelError> {
    if rechoke_intervals.is_empty() || unchoke_slots.is_empty() {
        return Err(ModelError::InvalidParams("sweep lists must be nonempty".into()));
    }
    let mut grid = Vec::new();
    for &dt in rechoke_intervals {
        for &k in unchoke_slots {
            let params = base.clone().with_choking(dt, k);
            let outcome = solve(&params).and_then(|s| completion_time(&s));
            grid.push(match outcome {
                Ok(times) => SweepPoint {
                    rechoke_interval: dt,
                    unchoke_slots: k,
                    t0: Some(times.t0()),
                    error: None,
                },
                Err(e) => SweepPoint {
                    rechoke_interval: dt,
                    unchoke_slots: k,
                    t0: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let best_t0 = grid
        .iter()
        .filter_map(|p| p.t0)
        .min_by(f64::total_cmp)
        .ok_or(ModelError::SweepFailed)?;
    let mut minimal = grid
        .iter()
        .filter(|p| p.t0.is_some_and(|t| (t - best_t0).abs() <= 1e-12 * best_t0))
        .cloned();
    let best = minimal.next().expect("minimum exists");
    let ties = minimal.collect();
    Ok(SweepResult { grid, best, ties })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(b: usize, dt: f64, k: usize) -> ModelParams {
        ModelParams {
            pieces: b,
            ..ModelParams::baseline().with_choking(dt, k)
        }
    }

    fn toy_state(b: usize, gamma: Vec<Vec<f64>>) -> SteadyState {
        let jump_prob = gamma
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(|g| g / s).collect()
            })
            .collect();
        SteadyState {
            params: params(b, 10.0, 4),
            profile: QueueProfile::new(vec![1.0; b], vec![0.0; b]),
            w_bound: gamma.iter().map(Vec::len).collect(),
            gamma,
            jump_prob,
            u_bar_per_queue: vec![0.0; b],
            u_bar_global: 0.0,
            n_up: 0.0,
            s_active: vec![0.0; b],
            slots: vec![1.0; b],
            eta: vec![0.0; b],
            residual: 0.0,
            iterations: 0,
        }
    }

    #[test]
    fn uploader_population_examples() {
        let all_zero = QueueProfile::new(vec![4.0, 0.0, 0.0], vec![0.0; 3]);
        assert_eq!(uploader_population(&all_zero), 0.0);
        let p = QueueProfile::new(vec![2.0, 3.0, 5.0], vec![0.0; 3]);
        assert_eq!(uploader_population(&p), 8.0);
    }

    #[test]
    fn in_connection_examples() {
        let p = QueueProfile::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]);
        assert_relative_eq!(in_connection_active_prob(&p, &[0.9, 0.3, 0.3, 0.3]).unwrap(), 0.3);
        let single = QueueProfile::new(vec![1.0, 0.0, 2.0, 0.0], vec![0.0; 4]);
        assert_relative_eq!(in_connection_active_prob(&single, &[0.0, 0.7, 0.25, 0.1]).unwrap(), 0.25);
        // two populated uploader queues: (1 * 0.2 + 3 * 0.6) / 4 = 0.5
        let two = QueueProfile::new(vec![5.0, 1.0, 0.0, 3.0], vec![0.0; 4]);
        assert_relative_eq!(in_connection_active_prob(&two, &[0.0, 0.2, 0.9, 0.6]).unwrap(), 0.5);
        assert!(in_connection_active_prob(&QueueProfile::new(vec![1.0, 0.0], vec![0.0; 2]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn concurrency_examples() {
        assert!(matches!(concurrency_distribution(5.0, 1.0, 3), Err(ModelError::ZeroConcurrency)));
        assert!(concurrency_distribution(5.0, 0.0, 3).is_err());
        let d = concurrency_distribution(2.0, 0.5, 2).unwrap();
        assert_relative_eq!(d[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(d[1], 1.0 / 3.0, epsilon = 1e-12);
        let d = concurrency_distribution(10.0, 0.1, 10).unwrap();
        assert_relative_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // fractional n_up is fine
        let d = concurrency_distribution(7.3, 0.2, 5).unwrap();
        assert_relative_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn transition_rate_examples() {
        let g = transition_rates(0.1, &[2.0 / 3.0, 1.0 / 3.0]);
        assert_relative_eq!(g[0], 1.0 / 15.0, epsilon = 1e-15);
        assert_relative_eq!(g[1], 1.0 / 30.0, epsilon = 1e-15);
        assert_relative_eq!(g[0] / 0.1, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(transition_rates(0.25, &[1.0]), vec![0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let dist: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let u = rng.gen_range(0.01..3.0);
            let g = transition_rates(u, &dist);
            assert!((g.iter().sum::<f64>() - u).abs() < 1e-9);
        }
    }

    #[test]
    fn single_piece_chain_collapses() {
        let p = params(1, 10.0, 4);
        let s = solve(&p).unwrap();
        let g = s.gamma_at(0, 1);
        assert!(g > 0.0);
        assert_relative_eq!(s.profile.n_bar[0], p.arrival_rate / g, epsilon = 1e-12);
        let t = completion_time(&s).unwrap();
        assert_relative_eq!(t.t0(), 1.0 / g, epsilon = 1e-12);
    }

    #[test]
    fn two_piece_dp_closed_form() {
        let (a, b, c) = (0.3, 0.1, 0.25);
        let s = toy_state(2, vec![vec![a, b], vec![c]]);
        let t = completion_time(&s).unwrap();
        assert_relative_eq!(t.t_remaining[1], 1.0 / c);
        assert_relative_eq!(t.t0(), 1.0 / (a + b) + a / (a + b) / c, epsilon = 1e-12);

        // two-stage Markov jump process
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = -(1.0 - rng.gen::<f64>()).ln() / (a + b);
            if rng.gen::<f64>() < a / (a + b) {
                x += -(1.0 - rng.gen::<f64>()).ln() / c;
            }
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - t.t0()).abs() < 3.0 * se, "{mean} vs {}", t.t0());
    }

    #[test]
    fn stuck_queue_is_reported() {
        let s = toy_state(2, vec![vec![0.3, 0.1], vec![0.0]]);
        assert_eq!(completion_time(&s), Err(ModelError::NoProgress { queue: 1 }));
    }

    #[test]
    fn baseline_converges_with_invariants() {
        let s = solve(&ModelParams::baseline()).unwrap();
        assert!(s.residual <= s.params.tol);
        assert!(s.flow_balance_residual() <= 1e-9);
        for (i, row) in s.jump_prob.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!((s.departure_rate(i) - s.u_bar_global).abs() <= 1e-9);
            let pop: f64 = s.profile.population();
            let cap = (pop - 1.0).floor().max(1.0) as usize;
            assert_eq!(s.w_bound[i], (60 - i).min(cap).max(1));
        }
        for i in 0..60 {
            for j in 0..=60 {
                let g = s.gamma_at(i, j);
                assert!(g >= 0.0);
                if j <= i {
                    assert_eq!(g, 0.0);
                }
            }
        }
        let n_up: f64 = s.profile.n_bar[1..].iter().sum();
        assert_relative_eq!(n_up, uploader_population(&s.profile));
        assert!(n_up > 0.0);
        let t = completion_time(&s).unwrap();
        assert!(t.t0() >= 120.0);
    }

    #[test]
    fn sweep_single_entry_and_empty() {
        let r = sweep(&ModelParams::baseline(), &[10.0], &[4]).unwrap();
        assert_eq!(r.grid.len(), 1);
        assert_eq!(r.best, r.grid[0]);
        assert!(r.ties.is_empty());
        assert!(sweep(&ModelParams::baseline(), &[], &[4]).is_err());
    }

    #[test]
    fn sweep_records_failures() {
        let base = ModelParams {
            max_iter: 1,
            ..ModelParams::baseline()
        };
        assert_eq!(sweep(&base, &[10.0], &[3, 4]), Err(ModelError::SweepFailed));
    }
}
