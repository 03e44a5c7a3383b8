use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Scalar inputs of the steady-state coalition model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Poisson arrival rate of peers (peers/second).
    pub arrival_rate: f64,
    /// Upload capacity of every peer (pieces/second).
    pub upload_capacity: f64,
    /// Number of pieces in the file.
    pub pieces: usize,
    /// Re-choking interval (seconds).
    pub rechoke_interval: f64,
    /// Unchoke slots per interval.
    pub unchoke_slots: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_damping() -> f64 {
    0.5
}

fn default_tol() -> f64 {
    1e-9
}

fn default_max_iter() -> usize {
    20_000
}

impl ModelParams {
    /// Baseline coalition used throughout the validation runs: B = 60,
    /// 20 peers/minute, 0.5 pieces/s, 10 s re-choking, 4 slots.
    pub fn baseline() -> Self {
        Self {
            arrival_rate: 20.0 / 60.0,
            upload_capacity: 0.5,
            pieces: 60,
            rechoke_interval: 10.0,
            unchoke_slots: 4,
            damping: default_damping(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }

    pub fn with_choking(mut self, rechoke_interval: f64, unchoke_slots: usize) -> Self {
        self.rechoke_interval = rechoke_interval;
        self.unchoke_slots = unchoke_slots;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidParams(msg.to_string()));
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return bad("arrival_rate must be positive");
        }
        if !(self.upload_capacity > 0.0 && self.upload_capacity.is_finite()) {
            return bad("upload_capacity must be positive");
        }
        if self.pieces == 0 {
            return bad("pieces must be at least 1");
        }
        if !(self.rechoke_interval > 0.0 && self.rechoke_interval.is_finite()) {
            return bad("rechoke_interval must be positive");
        }
        if self.unchoke_slots == 0 {
            return bad("unchoke_slots must be at least 1");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_is_valid() {
        ModelParams::baseline().validate().unwrap();
    }

    #[test]
    fn rejects_each_bad_field() {
        let base = ModelParams::baseline();
        let cases: Vec<Box<dyn Fn(&mut ModelParams)>> = vec![
            Box::new(|p| p.arrival_rate = 0.0),
            Box::new(|p| p.upload_capacity = -1.0),
            Box::new(|p| p.pieces = 0),
            Box::new(|p| p.rechoke_interval = 0.0),
            Box::new(|p| p.unchoke_slots = 0),
            Box::new(|p| p.damping = 1.5),
            Box::new(|p| p.damping = 0.0),
            Box::new(|p| p.tol = 0.0),
            Box::new(|p| p.max_iter = 0),
        ];
        for mutate in cases {
            let mut p = base.clone();
            mutate(&mut p);
            assert!(matches!(p.validate(), Err(ModelError::InvalidParams(_))));
        }
    }
}
