//! Cooperation-aware better-response membership decisions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::piece_strategy::GroupId;

/// Parameters of the dynamic membership strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoalitionPolicy {
    /// Non-cooperation discount in `[0, 1]`.
    pub beta: f64,
    /// Patience factor: decisions every `r` rechoke intervals.
    pub r: u32,
    /// Probability that a newly arrived peer starts inside a coalition.
    pub q_init: f64,
    /// Delay before the first decision, in rechoke intervals.
    #[serde(default = "default_start")]
    pub decision_start: u32,
    /// With two coalitions: initial members below this capacity percentile
    /// go to coalition 1, the rest to coalition 2.
    #[serde(default)]
    pub split_percentile: Option<f64>,
}

fn default_start() -> u32 {
    3
}

impl CoalitionPolicy {
    pub fn new(beta: f64, r: u32, q_init: f64) -> Self {
        Self {
            beta,
            r,
            q_init,
            decision_start: default_start(),
            split_percentile: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ConfigError::Invalid(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.r < 1 {
            return Err(ConfigError::Invalid("patience factor r must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.q_init) {
            return Err(ConfigError::Invalid(format!("q_init {} outside [0, 1]", self.q_init)));
        }
        if let Some(p) = self.split_percentile {
            if !(0.0..=100.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("split percentile {p} outside [0, 100]")));
            }
        }
        Ok(())
    }

    /// Coalition rate as seen by a deciding peer.
    pub fn perceived(&self, raw: f64) -> f64 {
        (1.0 - self.beta) * raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "coalition")]
pub enum Action {
    Join(GroupId),
    Stay,
    Leave,
}

/// One membership decision. Coalition rates must already be discounted.
///
/// `best` is the coalition with the maximum perceived rate, if any
/// coalition has members. A peer outside every coalition that does not
/// join, and a member switching nowhere, both report `Stay`.
pub fn decide(
    own_rate: f64,
    current: Option<(GroupId, f64)>,
    best: Option<(GroupId, f64)>,
) -> Action {
    match (current, best) {
        (None, Some((id, max))) if own_rate < max => Action::Join(id),
        (None, _) => Action::Stay,
        (Some((_, mine)), _) if own_rate >= mine => Action::Stay,
        (Some((cur, _)), Some((id, max))) if id != cur && own_rate < max => Action::Join(id),
        (Some((cur, _)), Some((id, _))) if id == cur => Action::Leave,
        (Some(_), _) => Action::Stay,
    }
}

/// Cumulative download snapshots of one peer, for trailing-window rates.
#[derive(Debug, Clone, Default)]
pub struct RateWindow {
    snaps: VecDeque<(f64, f64)>,
}

impl RateWindow {
    pub fn new(start: f64) -> Self {
        let mut snaps = VecDeque::new();
        snaps.push_back((start, 0.0));
        Self { snaps }
    }

    /// Records the cumulative amount downloaded at time `t`, keeping only
    /// what a window of `span` seconds can still need.
    pub fn record(&mut self, t: f64, cumulative: f64, span: f64) {
        self.snaps.push_back((t, cumulative));
        while self.snaps.len() > 2 && self.snaps[1].0 <= t - span {
            self.snaps.pop_front();
        }
    }

    /// Average rate over `[now - span, now]`. Young windows are normalized
    /// by the history actually available.
    pub fn rate(&self, now: f64, cumulative: f64, span: f64) -> f64 {
        let from = now - span;
        let Some(&(t0, c0)) = self
            .snaps
            .iter()
            .rev()
            .find(|(t, _)| *t <= from + 1e-9)
            .or(self.snaps.front())
        else {
            return 0.0;
        };
        let elapsed = now - t0;
        if elapsed <= 0.0 {
            0.0
        } else {
            (cumulative - c0) / elapsed
        }
    }
}

/// Coefficient of variation of a series (0 for a constant or empty one).
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Decision table written out clause by clause.
    fn table(member: Option<u32>, own: f64, mine: f64, best: u32, max: f64) -> Action {
        match member {
            None => {
                if own < max {
                    Action::Join(best)
                } else {
                    Action::Stay
                }
            }
            Some(c) => {
                if own >= mine {
                    Action::Stay
                } else if c == best {
                    Action::Leave
                } else if own < max {
                    Action::Join(best)
                } else {
                    Action::Stay
                }
            }
        }
    }

    #[test]
    fn truth_table_matches() {
        let levels = [0.0, 1.0, 2.0, 3.0];
        for member in [None, Some(1), Some(2)] {
            for best in [1, 2] {
                for &own in &levels {
                    for &mine in &levels {
                        for &max in &levels {
                            if member == Some(best) && mine != max {
                                continue;
                            }
                            if member.is_some() && mine > max {
                                continue;
                            }
                            let got = decide(own, member.map(|c| (c, mine)), Some((best, max)));
                            assert_eq!(got, table(member, own, mine, best, max));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn full_discount_never_attracts() {
        let p = CoalitionPolicy::new(1.0, 1, 0.0);
        assert_eq!(p.perceived(5.0), 0.0);
        assert_eq!(decide(0.0, None, Some((1, p.perceived(5.0)))), Action::Stay);
        assert_eq!(decide(0.1, Some((1, 0.0)), Some((1, 0.0))), Action::Stay);
    }

    #[test]
    fn member_at_or_above_average_stays() {
        assert_eq!(decide(2.0, Some((1, 2.0)), Some((1, 2.0))), Action::Stay);
        assert_eq!(decide(1.0, Some((1, 2.0)), Some((1, 2.0))), Action::Leave);
        assert_eq!(decide(1.0, Some((1, 2.0)), Some((2, 3.0))), Action::Join(2));
    }

    #[test]
    fn no_coalitions_no_moves() {
        assert_eq!(decide(1.0, None, None), Action::Stay);
    }

    #[test]
    fn policy_validation() {
        assert!(CoalitionPolicy::new(0.5, 10, 0.1).validate().is_ok());
        assert!(CoalitionPolicy::new(1.5, 10, 0.1).validate().is_err());
        assert!(CoalitionPolicy::new(0.5, 0, 0.1).validate().is_err());
        assert!(CoalitionPolicy::new(0.5, 1, -0.1).validate().is_err());
    }

    #[test]
    fn window_rates() {
        let mut w = RateWindow::new(0.0);
        // constant 2 pieces/s, snapshots every 10 s
        for i in 1..=10 {
            let t = 10.0 * i as f64;
            w.record(t, 2.0 * t, 30.0);
        }
        assert!((w.rate(100.0, 200.0, 30.0) - 2.0).abs() < 1e-12);
        // young window: 5 s of history at 1 piece/s
        let w = RateWindow::new(100.0);
        assert!((w.rate(105.0, 5.0, 30.0) - 1.0).abs() < 1e-12);
        // rate change inside the window only counts the window
        let mut w = RateWindow::new(0.0);
        w.record(10.0, 10.0, 10.0);
        w.record(20.0, 10.0, 10.0);
        assert_eq!(w.rate(20.0, 10.0, 10.0), 0.0);
    }

    #[test]
    fn cov_examples() {
        assert_eq!(coefficient_of_variation(&[3.0, 3.0, 3.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-12);
        assert_eq!(coefficient_of_variation(&[]), 0.0);
    }
}
