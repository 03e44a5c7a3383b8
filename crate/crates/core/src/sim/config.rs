use serde::{Deserialize, Serialize};

use crate::capacity::CapacityDistribution;
use crate::coalition::CoalitionPolicy;
use crate::error::ConfigError;
use crate::piece_strategy::PieceStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Arrivals {
    /// Poisson arrivals at `rate` peers per second.
    Poisson { rate: f64 },
    /// `peers` arrivals placed uniformly at random in `[0, window]`.
    FlashCrowd { peers: usize, window: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CapacitySource {
    Fixed { pieces_per_sec: f64 },
    Empirical(CapacityDistribution),
    /// The built-in anchor distribution.
    Anchors,
}

impl CapacitySource {
    /// Capacity at a percentile, in pieces per second.
    pub fn quantile(&self, pct: f64) -> f64 {
        match self {
            Self::Fixed { pieces_per_sec } => *pieces_per_sec,
            Self::Empirical(d) => d.to_pieces_per_sec(d.quantile_kbps(pct)),
            Self::Anchors => Self::Empirical(CapacityDistribution::anchors()).quantile(pct),
        }
    }

    /// Replaces `Anchors` by the distribution it names.
    pub fn resolved(self) -> Self {
        match self {
            Self::Anchors => Self::Empirical(CapacityDistribution::anchors()),
            other => other,
        }
    }
}

/// How arriving peers are assigned to coalitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Membership {
    /// Nobody cooperates.
    None,
    /// Everyone joins coalition 1.
    All,
    /// Each arrival joins coalition 1 with probability `p_join`.
    Random { p_join: f64 },
    /// Capacity below the `q_low` percentile joins coalition 1; otherwise,
    /// capacity above the `q_high` percentile joins coalition 2.
    Percentile {
        q_low: f64,
        #[serde(default)]
        q_high: Option<f64>,
    },
    /// Better-response membership decisions.
    Dynamic(CoalitionPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub arrivals: Arrivals,
    pub pieces: usize,
    pub seed_capacity: f64,
    pub seed_rechoke: f64,
    /// Peers the seed serves at once; defaults to `unchoke_slots`.
    #[serde(default)]
    pub seed_slots: Option<usize>,
    pub rechoke_interval: f64,
    pub unchoke_slots: usize,
    /// Defaults to three rechoke intervals.
    #[serde(default)]
    pub optimistic_interval: Option<f64>,
    pub duration: f64,
    pub steady_window: (f64, f64),
    pub capacity: CapacitySource,
    pub membership: Membership,
    #[serde(default = "default_member_strategy")]
    pub member_strategy: PieceStrategy,
    #[serde(default = "default_outsider_strategy")]
    pub outsider_strategy: PieceStrategy,
    /// Granularity at which progress on a choked piece is kept; anything
    /// short of a whole block is discarded.
    #[serde(default = "default_blocks")]
    pub blocks_per_piece: u32,
    /// Spacing of occupancy, size and availability samples.
    #[serde(default = "default_sample")]
    pub sample_interval: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_member_strategy() -> PieceStrategy {
    PieceStrategy::CoalitionRarestFirst
}

fn default_outsider_strategy() -> PieceStrategy {
    PieceStrategy::RarestFirst
}

fn default_blocks() -> u32 {
    16
}

fn default_sample() -> f64 {
    10.0
}

impl SimConfig {
    /// Homogeneous swarm in which every peer joins a single coalition.
    pub fn homogeneous_coalition(
        arrival_rate: f64,
        capacity: f64,
        pieces: usize,
        rechoke_interval: f64,
        unchoke_slots: usize,
    ) -> Self {
        Self {
            arrivals: Arrivals::Poisson { rate: arrival_rate },
            pieces,
            seed_capacity: capacity,
            seed_rechoke: 10.0,
            seed_slots: None,
            rechoke_interval,
            unchoke_slots,
            optimistic_interval: None,
            duration: 4000.0,
            steady_window: (3000.0, 4000.0),
            capacity: CapacitySource::Fixed {
                pieces_per_sec: capacity,
            },
            membership: Membership::All,
            member_strategy: default_member_strategy(),
            outsider_strategy: default_outsider_strategy(),
            blocks_per_piece: default_blocks(),
            sample_interval: default_sample(),
            rng_seed: 0,
        }
    }

    pub fn optimistic(&self) -> f64 {
        self.optimistic_interval.unwrap_or(3.0 * self.rechoke_interval)
    }

    pub fn seed_slot_count(&self) -> usize {
        self.seed_slots.unwrap_or(self.unchoke_slots)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match &self.arrivals {
            Arrivals::Poisson { rate } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return bad(format!("arrival rate must be nonnegative, got {rate}"));
                }
            }
            Arrivals::FlashCrowd { window, .. } => {
                if !(*window >= 0.0 && window.is_finite()) {
                    return bad(format!("flash-crowd window must be nonnegative, got {window}"));
                }
            }
        }
        if self.pieces == 0 {
            return bad("pieces must be at least 1".into());
        }
        if self.unchoke_slots == 0 {
            return bad("unchoke_slots must be at least 1".into());
        }
        if self.blocks_per_piece == 0 {
            return bad("blocks_per_piece must be at least 1".into());
        }
        if self.seed_slot_count() == 0 {
            return bad("seed_slots must be at least 1".into());
        }
        positive("seed_capacity", self.seed_capacity)?;
        positive("seed_rechoke", self.seed_rechoke)?;
        positive("rechoke_interval", self.rechoke_interval)?;
        positive("optimistic_interval", self.optimistic())?;
        positive("duration", self.duration)?;
        positive("sample_interval", self.sample_interval)?;
        let (a, b) = self.steady_window;
        if !(0.0 <= a && a <= b && b <= self.duration) {
            return bad(format!("steady window ({a}, {b}) not inside [0, {}]", self.duration));
        }
        match &self.capacity {
            CapacitySource::Fixed { pieces_per_sec } => positive("peer capacity", *pieces_per_sec)?,
            CapacitySource::Empirical(d) => d.validate()?,
            CapacitySource::Anchors => {}
        }
        match &self.membership {
            Membership::Random { p_join } if !(0.0..=1.0).contains(p_join) => {
                return bad(format!("p_join {p_join} outside [0, 1]"));
            }
            Membership::Percentile { q_low, q_high } => {
                for q in std::iter::once(q_low).chain(q_high) {
                    if !(0.0..=100.0).contains(q) {
                        return bad(format!("percentile {q} outside [0, 100]"));
                    }
                }
            }
            Membership::Dynamic(p) => p.validate()?,
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_validates() {
        let c = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 60, 10.0, 4);
        c.validate().unwrap();
        assert_eq!(c.optimistic(), 30.0);
        assert_eq!(c.seed_slot_count(), 4);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 60, 10.0, 4);
        c.steady_window = (3000.0, 5000.0);
        assert!(c.validate().is_err());
        let mut c = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 60, 10.0, 4);
        c.seed_capacity = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 60, 10.0, 4);
        c.membership = Membership::Random { p_join: 1.5 };
        assert!(c.validate().is_err());
        let mut c = SimConfig::homogeneous_coalition(1.0 / 3.0, 0.5, 0, 10.0, 4);
        c.pieces = 0;
        assert!(c.validate().is_err());
    }
}
