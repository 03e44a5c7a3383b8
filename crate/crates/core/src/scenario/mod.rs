//! Scenario files, experiment orchestration and result tables.

mod stats;
mod table;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::capacity::CapacityDistribution;
use crate::coalition::{coefficient_of_variation, CoalitionPolicy};
use crate::error::{ConfigError, ScenarioError};
use crate::params::ModelParams;
use crate::piece_strategy::{availability_loss, best_case_horizon, track_empty_pd, PieceStrategy};
use crate::sim::{self, CapacitySource, Membership, SimConfig, SimResult};
use crate::steady_state::{completion_time, solve, sweep};

pub use stats::{mean, percentile_sorted, summarize, Summary};
pub use table::{Emit, Failure, Report, Table};

/// A scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: Option<String>,
    /// Seeds `0..replications` unless `seeds` is given.
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// `percentile,kbps` file replacing the simulation's capacity source.
    #[serde(default)]
    pub capacity_csv: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub experiment: Experiment,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    ModelValidate,
    Sweep,
    SwarmImpact,
    Availability,
    Dynamics,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ModelValidate => "model_validate",
            Self::Sweep => "sweep",
            Self::SwarmImpact => "swarm_impact",
            Self::Availability => "availability",
            Self::Dynamics => "dynamics",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Experiment {
    /// Model completion time per slot count, optionally against simulation.
    ModelValidate {
        model: ModelParams,
        #[serde(default)]
        unchoke_slots: Vec<usize>,
        #[serde(default)]
        sim: Option<SimConfig>,
    },
    Sweep {
        model: ModelParams,
        rechoke_intervals: Vec<f64>,
        unchoke_slots: Vec<usize>,
    },
    /// Steady-state completion times under several membership rules.
    SwarmImpact {
        sim: SimConfig,
        #[serde(default)]
        variants: Vec<Variant>,
    },
    /// Flash-crowd availability loss over a peer-capacity sweep.
    Availability {
        sim: SimConfig,
        capacities: Vec<f64>,
        strategies: Vec<PieceStrategy>,
        #[serde(default)]
        t_star: Option<f64>,
    },
    /// Dynamic membership over a policy grid.
    Dynamics {
        sim: SimConfig,
        betas: Vec<f64>,
        patience: Vec<u32>,
        q_init: Vec<f64>,
        #[serde(default = "yes")]
        single: bool,
        /// Each value adds two-coalition runs split at that percentile.
        #[serde(default)]
        split_percentiles: Vec<f64>,
        #[serde(default)]
        decision_start: Option<u32>,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub membership: Membership,
}

impl Experiment {
    pub fn kind(&self) -> Kind {
        match self {
            Self::ModelValidate { .. } => Kind::ModelValidate,
            Self::Sweep { .. } => Kind::Sweep,
            Self::SwarmImpact { .. } => Kind::SwarmImpact,
            Self::Availability { .. } => Kind::Availability,
            Self::Dynamics { .. } => Kind::Dynamics,
        }
    }

    fn sim_mut(&mut self) -> Option<&mut SimConfig> {
        match self {
            Self::ModelValidate { sim, .. } => sim.as_mut(),
            Self::Sweep { .. } => None,
            Self::SwarmImpact { sim, .. }
            | Self::Availability { sim, .. }
            | Self::Dynamics { sim, .. } => Some(sim),
        }
    }
}

impl ScenarioSpec {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            name: None,
            replications: 1,
            seeds: None,
            capacity_csv: None,
            output: None,
            experiment,
        }
    }

    /// Parses a TOML scenario. Relative capacity paths resolve against
    /// `base`.
    pub fn from_toml(text: &str, origin: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut spec: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        if let Some(path) = spec.capacity_csv.take() {
            let path = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path,
            };
            let dist = CapacityDistribution::load(&path)?;
            spec.set_capacity(dist)?;
            spec.capacity_csv = Some(path);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string(), path.parent())
    }

    fn set_capacity(&mut self, dist: CapacityDistribution) -> Result<(), ConfigError> {
        match self.experiment.sim_mut() {
            Some(sim) => {
                sim.capacity = CapacitySource::Empirical(dist);
                Ok(())
            }
            None => Err(ConfigError::Invalid(
                "capacity_csv given but the scenario has no simulation".into(),
            )),
        }
    }

    pub fn kind(&self) -> Kind {
        self.experiment.kind()
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind().as_str().into())
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds
            .clone()
            .unwrap_or_else(|| (0..self.replications as u64).collect())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.replications < 1 {
            return bad("replications must be at least 1");
        }
        if self.seeds.as_ref().is_some_and(Vec::is_empty) {
            return bad("seed list is empty");
        }
        let model_err = |e: crate::error::ModelError| ConfigError::Invalid(e.to_string());
        match &self.experiment {
            Experiment::ModelValidate {
                model,
                unchoke_slots,
                sim,
            } => {
                model.validate().map_err(model_err)?;
                if unchoke_slots.contains(&0) {
                    return bad("unchoke_slots entries must be at least 1");
                }
                if let Some(s) = sim {
                    s.validate()?;
                }
            }
            Experiment::Sweep {
                model,
                rechoke_intervals,
                unchoke_slots,
            } => {
                model.validate().map_err(model_err)?;
                if rechoke_intervals.is_empty() || unchoke_slots.is_empty() {
                    return bad("sweep lists must be nonempty");
                }
            }
            Experiment::SwarmImpact { sim, variants } => {
                sim.validate()?;
                for v in variants {
                    let mut c = sim.clone();
                    c.membership = v.membership.clone();
                    c.validate()?;
                }
            }
            Experiment::Availability {
                sim,
                capacities,
                strategies,
                t_star,
            } => {
                sim.validate()?;
                if capacities.is_empty() || strategies.is_empty() {
                    return bad("availability needs capacities and strategies");
                }
                if capacities.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                    return bad("capacities must be positive");
                }
                if t_star.is_some_and(|t| !(t > 0.0)) {
                    return bad("t_star must be positive");
                }
            }
            Experiment::Dynamics {
                sim,
                betas,
                patience,
                q_init,
                single,
                split_percentiles,
                ..
            } => {
                sim.validate()?;
                if betas.is_empty() || patience.is_empty() || q_init.is_empty() {
                    return bad("dynamics grid lists must be nonempty");
                }
                if !single && split_percentiles.is_empty() {
                    return bad("dynamics has no coalition layout");
                }
                for p in dynamics_policies(&self.experiment) {
                    p.policy.validate()?;
                }
            }
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Runs every sub-experiment of `spec` for `seeds` (the spec's own seeds
/// if `None`). Failed sub-runs are listed in the report.
pub fn run_scenario(spec: &ScenarioSpec, seeds: Option<&[u64]>) -> Result<Report, ScenarioError> {
    spec.validate()?;
    let seeds = seeds.map_or_else(|| spec.seeds(), <[u64]>::to_vec);
    if seeds.is_empty() {
        return Err(ConfigError::Invalid("seed list is empty".into()).into());
    }
    let mut report = Report {
        kind: spec.kind().as_str().into(),
        name: spec.name(),
        seeds: seeds.clone(),
        failures: Vec::new(),
        headline: Map::new(),
        tables: Vec::new(),
    };
    match &spec.experiment {
        Experiment::ModelValidate {
            model,
            unchoke_slots,
            sim,
        } => model_validate(&mut report, model, unchoke_slots, sim.as_ref(), &seeds),
        Experiment::Sweep {
            model,
            rechoke_intervals,
            unchoke_slots,
        } => model_sweep(&mut report, model, rechoke_intervals, unchoke_slots)?,
        Experiment::SwarmImpact { sim, variants } => swarm_impact(&mut report, sim, variants, &seeds),
        Experiment::Availability {
            sim,
            capacities,
            strategies,
            t_star,
        } => availability(&mut report, sim, capacities, strategies, *t_star, &seeds),
        Experiment::Dynamics { sim, .. } => {
            dynamics(&mut report, sim, &dynamics_policies(&spec.experiment), &seeds)
        }
    }
    Ok(report)
}

fn num(x: f64) -> Value {
    json!(x)
}

fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

fn summary_cells(s: Option<Summary>) -> Vec<Value> {
    match s {
        Some(s) => vec![json!(s.count), num(s.mean), num(s.median), num(s.q25), num(s.q75)],
        None => vec![json!(0), Value::Null, Value::Null, Value::Null, Value::Null],
    }
}

const SUMMARY_COLS: [&str; 5] = ["count", "mean", "median", "q25", "q75"];

fn with_summary(lead: &[&str], tail: &[&str]) -> Vec<String> {
    lead.iter()
        .chain(SUMMARY_COLS.iter())
        .chain(tail.iter())
        .map(|s| s.to_string())
        .collect()
}

fn completions_table(lead: &[&str]) -> Table {
    let mut cols = lead.to_vec();
    cols.extend([
        "seed",
        "peer",
        "arrival",
        "completion",
        "download_time",
        "coalition",
        "capacity",
        "steady",
    ]);
    Table::new("completions", &cols)
}

fn push_completions(t: &mut Table, lead: &[Value], seed: u64, r: &SimResult) {
    let (a, b) = r.steady_window;
    for c in &r.completions {
        let mut row = lead.to_vec();
        row.extend([
            json!(seed),
            json!(c.peer),
            num(c.arrival),
            num(c.completion),
            num(c.download_time()),
            json!(c.coalition.unwrap_or(0)),
            num(c.capacity),
            json!(c.arrival >= a && c.completion <= b),
        ]);
        t.push(row);
    }
}

fn model_validate(
    report: &mut Report,
    model: &ModelParams,
    unchoke_slots: &[usize],
    sim: Option<&SimConfig>,
    seeds: &[u64],
) {
    let ks: Vec<usize> = if unchoke_slots.is_empty() {
        vec![model.unchoke_slots]
    } else {
        unchoke_slots.to_vec()
    };
    let mut profile = Table::new("completion_times", &["k", "stage", "t_remaining"]);
    let mut completions = completions_table(&["k"]);
    let mut seed_means = Table::new("seed_means", &["k", "seed", "mean"]);
    let cols = with_summary(&["k", "model_t0", "residual", "iterations"], &["rel_error"]);
    let mut summary = Table::new("summary", &cols);
    for &k in &ks {
        let params = model.clone().with_choking(model.rechoke_interval, k);
        let solved = solve(&params).and_then(|s| completion_time(&s).map(|c| (s, c)));
        let (t0, residual, iterations) = match &solved {
            Ok((s, c)) => {
                for (i, t) in c.t_remaining.iter().enumerate() {
                    profile.push(vec![json!(k), json!(i), num(*t)]);
                }
                (Some(c.t0()), Some(s.residual), Some(s.iterations))
            }
            Err(e) => {
                report.failures.push(Failure {
                    label: format!("model k={k}"),
                    seed: None,
                    error: e.to_string(),
                });
                (None, None, None)
            }
        };
        let mut pooled = Vec::new();
        if let Some(base) = sim {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.unchoke_slots = k;
                cfg.rechoke_interval = model.rechoke_interval;
                cfg.rng_seed = seed;
                match sim::run(&cfg) {
                    Ok(r) => {
                        push_completions(&mut completions, &[json!(k)], seed, &r);
                        let xs = r.steady_download_times();
                        seed_means.push(vec![json!(k), json!(seed), opt(mean(&xs))]);
                        pooled.extend(xs);
                    }
                    Err(e) => report.failures.push(Failure {
                        label: format!("sim k={k}"),
                        seed: Some(seed),
                        error: e.to_string(),
                    }),
                }
            }
        }
        let s = summarize(&pooled).ok();
        let rel = match (t0, s) {
            (Some(m), Some(s)) => Some(m / s.mean - 1.0),
            _ => None,
        };
        let mut row = vec![json!(k), opt(t0), opt(residual), json!(iterations)];
        row.extend(summary_cells(s));
        row.push(opt(rel));
        summary.push(row);
    }
    report.tables.push(summary);
    report.tables.push(profile);
    if sim.is_some() {
        report.tables.push(seed_means);
        report.tables.push(completions);
    }
}

fn model_sweep(
    report: &mut Report,
    model: &ModelParams,
    rechoke_intervals: &[f64],
    unchoke_slots: &[usize],
) -> Result<(), ScenarioError> {
    let result = sweep(model, rechoke_intervals, unchoke_slots)?;
    let mut t = Table::new("summary", &["rechoke_interval", "k", "t0", "error"]);
    for p in &result.grid {
        if let Some(e) = &p.error {
            report.failures.push(Failure {
                label: format!("dt={} k={}", p.rechoke_interval, p.unchoke_slots),
                seed: None,
                error: e.clone(),
            });
        }
        t.push(vec![
            num(p.rechoke_interval),
            json!(p.unchoke_slots),
            opt(p.t0),
            p.error.clone().map_or(Value::Null, Value::String),
        ]);
    }
    report.headline.insert("best".into(), serde_json::to_value(&result.best).expect("serializable"));
    report.headline.insert("ties".into(), serde_json::to_value(&result.ties).expect("serializable"));
    report.tables.push(t);
    Ok(())
}

fn swarm_impact(report: &mut Report, base: &SimConfig, variants: &[Variant], seeds: &[u64]) {
    let variants = if variants.is_empty() {
        vec![Variant {
            name: "base".into(),
            membership: base.membership.clone(),
        }]
    } else {
        variants.to_vec()
    };
    let mut completions = completions_table(&["variant"]);
    let mut occupancy = Table::new("occupancy", &["variant", "seed", "t", "queue", "count"]);
    let mut sizes = Table::new("coalition_size", &["variant", "seed", "t", "coalition", "size"]);
    let mut seed_means = Table::new("seed_means", &["variant", "seed", "mean"]);
    let mut summary = Table::new("summary", &with_summary(&["variant"], &[]));
    for v in &variants {
        let name = json!(v.name);
        let mut pooled = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.membership = v.membership.clone();
            cfg.rng_seed = seed;
            match sim::run(&cfg) {
                Ok(r) => {
                    push_completions(&mut completions, &[name.clone()], seed, &r);
                    for o in &r.occupancy {
                        occupancy.push(vec![name.clone(), json!(seed), num(o.t), json!(o.queue), json!(o.count)]);
                    }
                    for s in &r.coalition_sizes {
                        sizes.push(vec![name.clone(), json!(seed), num(s.t), json!(s.coalition), json!(s.size)]);
                    }
                    let xs = r.steady_download_times();
                    seed_means.push(vec![name.clone(), json!(seed), opt(mean(&xs))]);
                    pooled.extend(xs);
                }
                Err(e) => report.failures.push(Failure {
                    label: v.name.clone(),
                    seed: Some(seed),
                    error: e.to_string(),
                }),
            }
        }
        let mut row = vec![name];
        row.extend(summary_cells(summarize(&pooled).ok()));
        summary.push(row);
    }
    report.tables.extend([summary, seed_means, completions, occupancy, sizes]);
}

fn strategy_name(s: PieceStrategy) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn availability(
    report: &mut Report,
    base: &SimConfig,
    capacities: &[f64],
    strategies: &[PieceStrategy],
    t_star: Option<f64>,
    seeds: &[u64],
) {
    let t_star = t_star.unwrap_or_else(|| best_case_horizon(base.seed_capacity, base.pieces));
    let mut trace = Table::new("availability", &["strategy", "capacity", "seed", "t", "n_c", "n_d", "loss"]);
    let mut runs = Table::new(
        "runs",
        &["strategy", "capacity", "seed", "avg_loss", "max_loss", "e_pd"],
    );
    let mut summary = Table::new("summary", &["strategy", "capacity", "runs", "avg_loss", "e_pd"]);
    for &strategy in strategies {
        let sname = strategy_name(strategy);
        for &cap in capacities {
            let (mut losses, mut epds) = (Vec::new(), Vec::new());
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.capacity = CapacitySource::Fixed { pieces_per_sec: cap };
                cfg.member_strategy = strategy;
                cfg.outsider_strategy = strategy;
                cfg.rng_seed = seed;
                let r = match sim::run(&cfg) {
                    Ok(r) => r,
                    Err(e) => {
                        report.failures.push(Failure {
                            label: format!("{sname} capacity={cap}"),
                            seed: Some(seed),
                            error: e.to_string(),
                        });
                        continue;
                    }
                };
                let distinct: Vec<(f64, usize)> = r.distinct.iter().map(|d| (d.t, d.distinct)).collect();
                let (samples, avg) = availability_loss(&distinct, base.seed_capacity, base.pieces, t_star);
                for s in &samples {
                    trace.push(vec![
                        json!(sname),
                        num(cap),
                        json!(seed),
                        num(s.t),
                        json!(s.n_c),
                        json!(s.n_d),
                        num(s.loss),
                    ]);
                }
                let max_loss = samples.iter().map(|s| s.loss).fold(0.0, f64::max);
                let e_pd = track_empty_pd(&r.empty_pd);
                runs.push(vec![json!(sname), num(cap), json!(seed), num(avg), num(max_loss), opt(e_pd)]);
                losses.push(avg);
                epds.extend(e_pd);
            }
            summary.push(vec![
                json!(sname),
                num(cap),
                json!(losses.len()),
                opt(mean(&losses)),
                opt(mean(&epds)),
            ]);
        }
    }
    report.headline.insert("t_star".into(), num(t_star));
    report.tables.extend([summary, runs, trace]);
}

/// One point of a dynamics grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsPoint {
    pub policy: CoalitionPolicy,
}

impl DynamicsPoint {
    pub fn coalitions(&self) -> Vec<u32> {
        if self.policy.split_percentile.is_some() {
            vec![1, 2]
        } else {
            vec![1]
        }
    }
}

/// Expands a dynamics experiment into its grid, layouts outermost, then
/// β, r and q_init.
pub fn dynamics_policies(exp: &Experiment) -> Vec<DynamicsPoint> {
    let Experiment::Dynamics {
        betas,
        patience,
        q_init,
        single,
        split_percentiles,
        decision_start,
        ..
    } = exp
    else {
        return Vec::new();
    };
    let layouts: Vec<Option<f64>> = single
        .then_some(None)
        .into_iter()
        .chain(split_percentiles.iter().map(|&p| Some(p)))
        .collect();
    let mut out = Vec::new();
    for split in layouts {
        for &beta in betas {
            for &r in patience {
                for &q in q_init {
                    let mut policy = CoalitionPolicy::new(beta, r, q);
                    policy.split_percentile = split;
                    if let Some(d) = *decision_start {
                        policy.decision_start = d;
                    }
                    out.push(DynamicsPoint { policy });
                }
            }
        }
    }
    out
}

/// Membership fraction over the steady window and the largest size
/// coefficient of variation over the final quarter of the run, across the
/// coalitions of `point`.
pub fn dynamics_stats(point: &DynamicsPoint, r: &SimResult, duration: f64) -> (Option<f64>, f64) {
    let groups = point.coalitions();
    let fractions: Vec<f64> = groups.iter().filter_map(|&g| r.membership_fraction(g)).collect();
    let fraction = (!fractions.is_empty()).then(|| fractions.iter().sum());
    let from = 0.75 * duration;
    let cov = groups
        .iter()
        .map(|&g| {
            let xs: Vec<f64> = r
                .size_series(g)
                .into_iter()
                .filter(|(t, _)| *t >= from)
                .map(|(_, n)| n as f64)
                .collect();
            coefficient_of_variation(&xs)
        })
        .fold(0.0, f64::max);
    (fraction, cov)
}

fn dynamics(report: &mut Report, base: &SimConfig, points: &[DynamicsPoint], seeds: &[u64]) {
    let lead = ["beta", "r", "q_init", "split"];
    let mut sizes = Table::new("coalition_size", &[&lead[..], &["seed", "t", "coalition", "size"]].concat());
    let mut runs = Table::new("runs", &[&lead[..], &["seed", "fraction", "cov"]].concat());
    let mut summary = Table::new("summary", &[&lead[..], &["runs", "fraction", "max_cov"]].concat());
    for pt in points {
        let p = &pt.policy;
        let key = vec![num(p.beta), json!(p.r), num(p.q_init), opt(p.split_percentile)];
        let (mut fracs, mut worst) = (Vec::new(), 0.0f64);
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.membership = Membership::Dynamic(p.clone());
            cfg.rng_seed = seed;
            let r = match sim::run(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    report.failures.push(Failure {
                        label: format!("beta={} r={} q_init={}", p.beta, p.r, p.q_init),
                        seed: Some(seed),
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            for s in &r.coalition_sizes {
                let mut row = key.clone();
                row.extend([json!(seed), num(s.t), json!(s.coalition), json!(s.size)]);
                sizes.push(row);
            }
            let (fraction, cov) = dynamics_stats(pt, &r, cfg.duration);
            let mut row = key.clone();
            row.extend([json!(seed), opt(fraction), num(cov)]);
            runs.push(row);
            fracs.extend(fraction);
            worst = worst.max(cov);
        }
        let mut row = key;
        row.extend([json!(fracs.len()), opt(mean(&fracs)), num(worst)]);
        summary.push(row);
    }
    report.tables.extend([summary, runs, sizes]);
}
