//! Experiment plans: which datasets, variants, seeds, and grids to run.

use d2sdk_core::data::{s4_benchmark, BenchmarkSpec};
use d2sdk_core::model::{ModelConfig, Variant};
use d2sdk_core::trainer::OptimConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan has no seeds")]
    NoSeeds,
    #[error("plan has no held-out domains")]
    NoHeldOut,
    #[error("held-out domain {id} is not in the dataset")]
    UnknownHeldOut { id: usize },
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("val_fraction must lie strictly between 0 and 1, got {0}")]
    BadValFraction(f64),
    #[error("mixed-target fraction must lie in [0, 1], got {0}")]
    BadMixedFraction(f64),
    #[error("mixed-target pair ({0}, {1}) must name two distinct dataset domains")]
    BadMixedPair(usize, usize),
    #[error("sweep grid {0} is empty")]
    EmptyGrid(&'static str),
    #[error("config file error")]
    Io(#[from] std::io::Error),
    #[error("config parse error")]
    Parse(#[from] serde_json::Error),
}

/// Everything the orchestrator needs for one experiment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Seeds the benchmark's domain distortions (scales, biases).
    pub data_seed: u64,
    /// One training round per seed; each round re-derives prototypes,
    /// samples, splits, and parameter init from its seed.
    pub seeds: Vec<u64>,
    /// Domains to hold out, one leave-one-domain-out column each.
    pub held_out: Vec<usize>,
    /// Variant names; see [`Variant::parse`].
    pub variants: Vec<String>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub val_fraction: f64,
    /// Samples per class per domain; None keeps the benchmark default.
    pub n_per_class: Option<usize>,
    /// λ sensitivity grid.
    pub lambda_grid: Vec<f64>,
    /// Encoder/decoder depth grid.
    pub l_grid: Vec<usize>,
    pub heads_grid: Vec<usize>,
    /// Desk-scaled stand-in for the reference widths {512, 1024, 2048, 4096}.
    pub d_ff_grid: Vec<usize>,
    /// Source domains whose mixture forms the composite target.
    pub mixed_pair: (usize, usize),
    pub mixed_fraction: f64,
    /// Worker threads for independent runs; 0 means all available cores.
    pub workers: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            data_seed: 0,
            seeds: (0..5).collect(),
            held_out: vec![0, 1, 2, 3],
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            model: ModelConfig::default(),
            optim: OptimConfig {
                epochs: 40,
                ..OptimConfig::default()
            },
            val_fraction: 0.1,
            n_per_class: None,
            lambda_grid: vec![0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01],
            l_grid: vec![2, 3, 4, 5],
            heads_grid: vec![2, 4, 8, 16],
            d_ff_grid: vec![32, 64, 128, 256],
            mixed_pair: (0, 1),
            mixed_fraction: 0.5,
            workers: 0,
        }
    }
}

impl ExperimentPlan {
    /// The reference protocol: ten rounds of the full 80-epoch schedule.
    pub fn paper_faithful() -> Self {
        ExperimentPlan {
            seeds: (0..10).collect(),
            optim: OptimConfig::default(),
            ..ExperimentPlan::default()
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, PlanError> {
        let body = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&body)?)
    }

    /// The generating benchmark this plan runs against.
    pub fn benchmark(&self) -> BenchmarkSpec {
        let mut bench = s4_benchmark(self.data_seed);
        if let Some(n) = self.n_per_class {
            bench.n_per_class = n;
        }
        bench
    }

    pub fn parsed_variants(&self) -> Result<Vec<Variant>, PlanError> {
        self.variants
            .iter()
            .map(|s| Variant::parse(s).ok_or_else(|| PlanError::UnknownVariant(s.clone())))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.seeds.is_empty() {
            return Err(PlanError::NoSeeds);
        }
        if self.held_out.is_empty() {
            return Err(PlanError::NoHeldOut);
        }
        let bench = self.benchmark();
        for &id in &self.held_out {
            if !bench.domains.iter().any(|d| d.id == id) {
                return Err(PlanError::UnknownHeldOut { id });
            }
        }
        self.parsed_variants()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(PlanError::BadValFraction(self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.mixed_fraction) {
            return Err(PlanError::BadMixedFraction(self.mixed_fraction));
        }
        let (a, b) = self.mixed_pair;
        let exists = |id| bench.domains.iter().any(|d: &d2sdk_core::data::DomainSpec| d.id == id);
        if a == b || !exists(a) || !exists(b) {
            return Err(PlanError::BadMixedPair(a, b));
        }
        for (name, empty) in [
            ("lambda_grid", self.lambda_grid.is_empty()),
            ("l_grid", self.l_grid.is_empty()),
            ("heads_grid", self.heads_grid.is_empty()),
            ("d_ff_grid", self.d_ff_grid.is_empty()),
        ] {
            if empty {
                return Err(PlanError::EmptyGrid(name));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_is_valid() {
        ExperimentPlan::default().validate().unwrap();
        ExperimentPlan::paper_faithful().validate().unwrap();
        assert_eq!(ExperimentPlan::paper_faithful().seeds.len(), 10);
        assert_eq!(ExperimentPlan::paper_faithful().optim.epochs, 80);
        assert_eq!(ExperimentPlan::default().optim.epochs, 40);
    }

    #[test]
    fn invalid_fields_are_caught() {
        let mut p = ExperimentPlan::default();
        p.seeds.clear();
        assert!(matches!(p.validate(), Err(PlanError::NoSeeds)));
        let p = ExperimentPlan { held_out: vec![7], ..ExperimentPlan::default() };
        assert!(matches!(
            p.validate(),
            Err(PlanError::UnknownHeldOut { id: 7 })
        ));
        let mut p = ExperimentPlan::default();
        p.variants.push("NotAVariant".into());
        assert!(matches!(p.validate(), Err(PlanError::UnknownVariant(_))));
        let p = ExperimentPlan { mixed_pair: (2, 2), ..ExperimentPlan::default() };
        assert!(matches!(p.validate(), Err(PlanError::BadMixedPair(2, 2))));
        let mut p = ExperimentPlan::default();
        p.lambda_grid.clear();
        assert!(matches!(p.validate(), Err(PlanError::EmptyGrid("lambda_grid"))));
    }

    #[test]
    fn plan_round_trips_through_json() {
        let p = ExperimentPlan::default();
        let s = serde_json::to_string(&p).unwrap();
        let back: ExperimentPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn partial_config_files_fill_defaults() {
        let partial = r#"{"seeds": [1, 2], "optim": {"epochs": 3}}"#;
        let p: ExperimentPlan = serde_json::from_str(partial).unwrap();
        assert_eq!(p.seeds, vec![1, 2]);
        assert_eq!(p.optim.epochs, 3);
        assert_eq!(p.optim.batch_size, 32);
        assert_eq!(p.held_out, vec![0, 1, 2, 3]);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        for bad in [
            r#"{"epoch": 3}"#,
            r#"{"model": {"dff": 16}}"#,
            r#"{"optim": {"epochs": 3, "lr": 0.1}}"#,
        ] {
            assert!(serde_json::from_str::<ExperimentPlan>(bad).is_err());
        }
    }
}
