use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::FobaLimits;
use crate::gates::{SplitScore, MAX_TMAX};
use crate::model::TaskKind;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    /// Depth of the initial complete tree; it starts with `2^depth` experts.
    pub depth: u32,
    /// Equal-width bins per dimension of the split grid.
    pub tmax: usize,
    /// Experts whose responsibility mass falls below this are eliminated.
    pub eps_shrink: f64,
    /// Relative objective change that ends training.
    pub delta_term: f64,
    pub max_iters: usize,
    /// Free parameters per gate.
    pub d_beta: f64,
    /// Gate probability every gate starts with.
    pub init_gate_prob: f64,
    pub split_score: SplitScore,
    pub foba: FobaLimits,
    /// At most `i64::MAX` so that it survives TOML.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Regression,
            depth: 3,
            tmax: 64,
            eps_shrink: 0.0,
            delta_term: 5e-9,
            max_iters: 200,
            d_beta: 1.0,
            init_gate_prob: 0.8,
            split_score: SplitScore::NegEntropy,
            foba: FobaLimits::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Shrinkage threshold as a fraction of the training-set size.
    pub fn with_eps_fraction(mut self, fraction: f64, n: usize) -> Self {
        self.eps_shrink = fraction * n as f64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.depth == 0 || self.depth > 16 {
            return fail(format!("depth {} not in 1..=16", self.depth));
        }
        if !(2..=MAX_TMAX).contains(&self.tmax) {
            return fail(format!("tmax {} not in 2..={MAX_TMAX}", self.tmax));
        }
        if !(self.eps_shrink >= 0.0) || !self.eps_shrink.is_finite() {
            return fail(format!("eps_shrink {} must be a finite nonnegative number", self.eps_shrink));
        }
        if !(self.delta_term > 0.0 && self.delta_term < 1.0) {
            return fail(format!("delta_term {} not in (0, 1)", self.delta_term));
        }
        if !(self.d_beta >= 0.0) || !self.d_beta.is_finite() {
            return fail(format!("d_beta {} must be a finite nonnegative number", self.d_beta));
        }
        if !(self.init_gate_prob > 0.0 && self.init_gate_prob < 1.0) {
            return fail(format!("init_gate_prob {} not in (0, 1)", self.init_gate_prob));
        }
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if self.foba.max_steps == 0 {
            return fail("foba.max_steps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_values() {
        for bad in [
            TrainConfig { depth: 0, ..Default::default() },
            TrainConfig { tmax: 1, ..Default::default() },
            TrainConfig { delta_term: 1.0, ..Default::default() },
            TrainConfig { eps_shrink: -1.0, ..Default::default() },
            TrainConfig { init_gate_prob: 1.0, ..Default::default() },
            TrainConfig { seed: u64::MAX, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn eps_fraction_scales_with_n() {
        let c = TrainConfig::default().with_eps_fraction(0.03, 1000);
        assert!((c.eps_shrink - 30.0).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig { seed: 42, ..Default::default() };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
    }
}
