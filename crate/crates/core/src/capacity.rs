//! Empirical upload-capacity distributions given as percentile breakpoints.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const DEFAULT_PIECE_KIB: f64 = 256.0;

/// Breakpoints quoted for a measured swarm (KBps), with an assumed tail.
pub const ANCHOR_CSV: &str = "percentile,kbps
0,42.96
50,77.40
70,112.87
90,391.45
95,500
99,2500
100,12000
";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub percentile: f64,
    pub kbps: f64,
}

/// Piecewise-linear inverse CDF over `(percentile, KBps)` breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityDistribution {
    pub breakpoints: Vec<Breakpoint>,
    #[serde(default = "default_piece")]
    pub piece_kib: f64,
}

fn default_piece() -> f64 {
    DEFAULT_PIECE_KIB
}

impl CapacityDistribution {
    pub fn new(breakpoints: Vec<Breakpoint>, piece_kib: f64) -> Result<Self, ConfigError> {
        let d = Self {
            breakpoints,
            piece_kib,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn anchors() -> Self {
        Self::from_reader(ANCHOR_CSV.as_bytes(), "<anchors>").expect("built-in anchors parse")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bp = &self.breakpoints;
        if bp.is_empty() {
            return Err(ConfigError::Invalid("capacity distribution has no breakpoints".into()));
        }
        if !(self.piece_kib > 0.0) {
            return Err(ConfigError::Invalid("piece size must be positive".into()));
        }
        for b in bp {
            if !(0.0..=100.0).contains(&b.percentile) {
                return Err(ConfigError::Invalid(format!("percentile {} outside [0, 100]", b.percentile)));
            }
            if !(b.kbps > 0.0) || !b.kbps.is_finite() {
                return Err(ConfigError::Invalid(format!("capacity {} must be positive", b.kbps)));
            }
        }
        for w in bp.windows(2) {
            if w[1].percentile <= w[0].percentile {
                return Err(ConfigError::Invalid(format!(
                    "percentiles must be strictly increasing ({} then {})",
                    w[0].percentile, w[1].percentile
                )));
            }
            if w[1].kbps < w[0].kbps {
                return Err(ConfigError::Invalid(format!(
                    "capacities must be nondecreasing ({} then {})",
                    w[0].kbps, w[1].kbps
                )));
            }
        }
        Ok(())
    }

    /// Parses `percentile,kbps` CSV.
    pub fn from_reader<R: Read>(reader: R, name: &str) -> Result<Self, ConfigError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| parse_err(name, &e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["percentile", "kbps"] {
            return Err(ConfigError::Parse {
                path: name.into(),
                line: 1,
                msg: "expected header `percentile,kbps`".into(),
            });
        }
        let mut bps = Vec::new();
        for row in rdr.deserialize::<Breakpoint>() {
            bps.push(row.map_err(|e| parse_err(name, &e))?);
        }
        Self::new(bps, DEFAULT_PIECE_KIB)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(f, &path.display().to_string())
    }

    /// Capacity at percentile `p` in KBps, flat outside the breakpoints.
    pub fn quantile_kbps(&self, p: f64) -> f64 {
        let bp = &self.breakpoints;
        let first = bp[0];
        let last = bp[bp.len() - 1];
        if p <= first.percentile {
            return first.kbps;
        }
        if p >= last.percentile {
            return last.kbps;
        }
        let i = bp.partition_point(|b| b.percentile <= p);
        let (a, b) = (bp[i - 1], bp[i]);
        a.kbps + (b.kbps - a.kbps) * (p - a.percentile) / (b.percentile - a.percentile)
    }

    /// Fraction of mass at or below `kbps` (inverse of [`quantile_kbps`]).
    ///
    /// [`quantile_kbps`]: Self::quantile_kbps
    pub fn cdf(&self, kbps: f64) -> f64 {
        let bp = &self.breakpoints;
        if kbps < bp[0].kbps {
            return 0.0;
        }
        let mut p = bp[0].percentile;
        for w in bp.windows(2) {
            let (a, b) = (w[0], w[1]);
            if kbps >= b.kbps {
                p = b.percentile;
            } else if kbps >= a.kbps && b.kbps > a.kbps {
                p = a.percentile + (b.percentile - a.percentile) * (kbps - a.kbps) / (b.kbps - a.kbps);
                break;
            }
        }
        if kbps >= bp[bp.len() - 1].kbps {
            p = 100.0;
        }
        p / 100.0
    }

    pub fn sample_kbps<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile_kbps(rng.gen::<f64>() * 100.0)
    }

    pub fn to_pieces_per_sec(&self, kbps: f64) -> f64 {
        kbps / self.piece_kib
    }

    pub fn sample_pieces_per_sec<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.to_pieces_per_sec(self.sample_kbps(rng))
    }
}

fn parse_err(name: &str, e: &csv::Error) -> ConfigError {
    ConfigError::Parse {
        path: name.into(),
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bp(p: f64, k: f64) -> Breakpoint {
        Breakpoint { percentile: p, kbps: k }
    }

    #[test]
    fn single_breakpoint_is_constant() {
        let d = CapacityDistribution::new(vec![bp(50.0, 80.0)], 256.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(d.sample_kbps(&mut rng), 80.0);
        }
    }

    #[test]
    fn two_point_median() {
        let d = CapacityDistribution::new(vec![bp(0.0, 100.0), bp(100.0, 200.0)], 256.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut xs: Vec<f64> = (0..100_000).map(|_| d.sample_kbps(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[50_000] - 150.0).abs() < 1.0);
    }

    #[test]
    fn anchor_ninetieth_percentile() {
        let d = CapacityDistribution::anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs: Vec<f64> = (0..100_000).map(|_| d.sample_kbps(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let p90 = xs[90_000];
        assert!((p90 / 391.45 - 1.0).abs() < 0.02, "p90 {p90}");
        assert!(xs[0] >= 42.96);
    }

    #[test]
    fn ks_distance_small() {
        let d = CapacityDistribution::anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| d.sample_kbps(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = d.cdf(x);
                (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn quantile_and_cdf_invert() {
        let d = CapacityDistribution::anchors();
        for p in [0.0, 10.0, 50.0, 65.0, 90.0, 99.0] {
            let q = d.quantile_kbps(p);
            assert!((d.cdf(q) * 100.0 - p).abs() < 1e-9, "p {p}");
        }
    }

    #[test]
    fn parse_errors_carry_line() {
        let bad = "percentile,kbps\n0,10\n50,abc\n";
        match CapacityDistribution::from_reader(bad.as_bytes(), "x.csv") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let header = "pct,kbps\n0,10\n";
        assert!(matches!(
            CapacityDistribution::from_reader(header.as_bytes(), "x.csv"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn non_monotone_rejected() {
        assert!(CapacityDistribution::new(vec![bp(10.0, 5.0), bp(5.0, 6.0)], 256.0).is_err());
        assert!(CapacityDistribution::new(vec![bp(10.0, 5.0), bp(20.0, 4.0)], 256.0).is_err());
        assert!(CapacityDistribution::new(vec![], 256.0).is_err());
    }

    #[test]
    fn unit_conversion() {
        let d = CapacityDistribution::anchors();
        assert!((d.to_pieces_per_sec(256.0) - 1.0).abs() < 1e-12);
    }
}
