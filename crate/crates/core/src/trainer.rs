//! The SGD training loop: step-decayed learning rate, deterministic
//! shuffling, per-epoch evaluation, and policy-tagged checkpoints.
//!
//! One run is strictly sequential and fully determined by (config,
//! bundle, seed): the train pool is first put into canonical order so the
//! trajectory depends on data content rather than record order, then
//! shuffled by a seed-derived stream each epoch. Target-domain data is
//! only ever read through the bundle's purpose-tagged accessor, and only
//! with the Reporting purpose, so the protocol hygiene of every run is
//! auditable from its access log.

use crate::checkpoint::{self, Checkpoint, RngState};
use crate::data::{sort_canonical, AccessPurpose, DatasetBundle, DomainSample};
use crate::model::{compute_loss, forward, infer, ModelConfig, ModelError, ModelParams};
use crate::params::{derive_rng, Forward, ParamError, ParamRegistry, ParamSession};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: total={total}, domain={domain}, global={global}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        total: f64,
        domain: f64,
        global: f64,
    },
    #[error("dataset has no source domains")]
    NoSources,
    #[error("model has {expected} experts but bundle has {got} source domains")]
    ExpertMismatch { expected: usize, got: usize },
    #[error("sample feature length {got} does not match configured input dim {expected}")]
    FeatureLength { got: usize, expected: usize },
}

/// Optimizer schedule. Defaults: lr 0.001 decayed by 0.1 after 80% of
/// 80 epochs, batch size 32, momentum 0.9, no weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    /// The decayed rate applies from epoch ceil(fraction · epochs) on.
    pub decay_at_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Draw each batch round-robin across source domains instead of from
    /// the undifferentiated pool.
    pub stratified: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.001,
            batch_size: 32,
            epochs: 80,
            decay_factor: 0.1,
            decay_at_fraction: 0.8,
            momentum: 0.9,
            weight_decay: 0.0,
            stratified: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(TrainError::Config(format!(
                "lr0 must be finite and ≥ 0, got {}",
                self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be ≥ 1".into()));
        }
        if !(self.decay_at_fraction > 0.0 && self.decay_at_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "decay_at_fraction must lie in (0, 1], got {}",
                self.decay_at_fraction
            )));
        }
        if !self.decay_factor.is_finite() || self.decay_factor <= 0.0 {
            return Err(TrainError::Config(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(TrainError::Config(format!(
                "weight_decay must be finite and ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// First epoch index that uses the decayed rate.
    pub fn decay_boundary(&self) -> usize {
        // The tiny guard keeps products like 0.8·epochs from landing an
        // ulp above the intended integer and ceiling one epoch too far.
        (self.decay_at_fraction * self.epochs as f64 - 1e-9).ceil() as usize
    }
}

/// Piecewise-constant step schedule: lr0 before the decay boundary,
/// lr0 · decay_factor from the boundary on.
pub fn lr_at(epoch: usize, oc: &OptimConfig) -> f64 {
    if epoch < oc.decay_boundary() {
        oc.lr0
    } else {
        oc.lr0 * oc.decay_factor
    }
}

/// One SGD-with-momentum update over every parameter:
/// v ← momentum·v + g + weight_decay·w, then w ← w − lr·v; grads are
/// zeroed afterwards.
pub fn sgd_step(reg: &mut ParamRegistry, oc: &OptimConfig, lr: f64) {
    let ids: Vec<_> = reg.ids().collect();
    for id in ids {
        let (value, grad, momentum) = reg.momentum_mut(id);
        let w = value.data_mut();
        for j in 0..w.len() {
            let g = grad[j] + oc.weight_decay * w[j];
            momentum[j] = oc.momentum * momentum[j] + g;
            w[j] -= lr * momentum[j];
        }
    }
    reg.zero_grads();
}

/// Model-selection policies for picking which epoch's weights to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    LastEpoch,
    ValidationBest,
    /// Oracle selection on the target test set; reporting only.
    TestBest,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::LastEpoch, Policy::ValidationBest, Policy::TestBest];

    pub fn name(self) -> &'static str {
        match self {
            Policy::LastEpoch => "last-epoch",
            Policy::ValidationBest => "validation-best",
            Policy::TestBest => "test-best",
        }
    }
}

/// One line of the structured training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_domain: f64,
    pub train_global: f64,
    pub val_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
}

/// A checkpoint tagged with the policy that chose it and the metric value
/// that made it the best.
#[derive(Debug, Clone)]
pub struct PolicyCheckpoint {
    pub policy: Policy,
    pub epoch: usize,
    pub metric: f64,
    pub checkpoint: Checkpoint,
}

/// Everything a finished run yields: the per-epoch log plus the
/// checkpoints each selection policy would keep.
#[derive(Debug)]
pub struct TrainRunOutput {
    pub records: Vec<EpochRecord>,
    pub last: Checkpoint,
    pub best_val: PolicyCheckpoint,
    /// Present only when the run tracked target accuracy per epoch.
    pub best_test: Option<PolicyCheckpoint>,
}

/// Mutable loop state, carried across epochs.
#[derive(Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub rng: rand_chacha::ChaCha8Rng,
    pub best_val: Option<(usize, f64)>,
    pub best_test: Option<(usize, f64)>,
}

/// Mean classification accuracy of the configured variant over `samples`.
pub fn accuracy(
    cfg: &ModelConfig,
    reg: &ParamRegistry,
    mp: &ModelParams,
    samples: &[DomainSample],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(1024) {
        let x = batch_inputs(cfg, chunk)?;
        let preds = infer(cfg, reg, mp, &x)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, s)| **p == s.y)
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn batch_inputs(cfg: &ModelConfig, rows: &[DomainSample]) -> Result<Tensor, TrainError> {
    let mut flat = Vec::with_capacity(rows.len() * cfg.d_in);
    for r in rows {
        if r.x.len() != cfg.d_in {
            return Err(TrainError::FeatureLength {
                got: r.x.len(),
                expected: cfg.d_in,
            });
        }
        flat.extend_from_slice(&r.x);
    }
    Ok(Tensor::new(vec![rows.len(), cfg.d_in], flat)?)
}

/// The epoch's visit order over the train pool. Pooled mode shuffles all
/// indices together; stratified mode shuffles within each domain and then
/// interleaves domains round-robin.
fn epoch_order(
    pool: &[DomainSample],
    oc: &OptimConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    if !oc.stratified {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(rng);
        return idx;
    }
    let max_z = pool.iter().map(|s| s.z).max().unwrap_or(0);
    let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); max_z + 1];
    for (i, s) in pool.iter().enumerate() {
        by_domain[s.z].push(i);
    }
    for dom in &mut by_domain {
        dom.shuffle(rng);
    }
    let mut order = Vec::with_capacity(pool.len());
    let mut cursors = vec![0usize; by_domain.len()];
    while order.len() < pool.len() {
        for (dom, cursor) in by_domain.iter().zip(&mut cursors) {
            if *cursor < dom.len() {
                order.push(dom[*cursor]);
                *cursor += 1;
            }
        }
    }
    order
}

/// Train the configured variant on the bundle's source domains.
///
/// Per epoch: shuffle the pooled source train rows, step SGD over batches
/// of `batch_size`, then evaluate source-validation accuracy and, when
/// `track_test` is set, target accuracy (a Reporting-purpose read feeding
/// the test-best diagnostic only). Emits the last-epoch checkpoint and
/// the running best per policy. Aborts on any non-finite loss.
pub fn train_run(
    cfg: &ModelConfig,
    oc: &OptimConfig,
    reg: &mut ParamRegistry,
    mp: &ModelParams,
    bundle: &DatasetBundle,
    seed: u64,
    track_test: bool,
) -> Result<TrainRunOutput, TrainError> {
    cfg.validate()?;
    oc.validate()?;
    if bundle.num_sources() == 0 {
        return Err(TrainError::NoSources);
    }
    if bundle.num_sources() != cfg.k {
        return Err(TrainError::ExpertMismatch {
            expected: cfg.k,
            got: bundle.num_sources(),
        });
    }
    let mut pool = bundle.train_samples();
    sort_canonical(&mut pool);
    let val = bundle.val_samples();

    let mut state = TrainState {
        epoch: 0,
        rng: derive_rng(seed, "train.shuffle"),
        best_val: None,
        best_test: None,
    };
    let mut records = Vec::with_capacity(oc.epochs);
    let mut best_val_ckpt: Option<PolicyCheckpoint> = None;
    let mut best_test_ckpt: Option<PolicyCheckpoint> = None;

    for epoch in 0..oc.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, oc);
        let order = epoch_order(&pool, oc, &mut state.rng);
        let mut sum_total = 0.0;
        let mut sum_domain = 0.0;
        let mut sum_global = 0.0;
        for (batch_no, batch_idx) in order.chunks(oc.batch_size).enumerate() {
            let rows: Vec<DomainSample> =
                batch_idx.iter().map(|&i| pool[i].clone()).collect();
            let x = batch_inputs(cfg, &rows)?;
            let y: Vec<usize> = rows.iter().map(|r| r.y).collect();
            let z: Vec<usize> = rows.iter().map(|r| r.z).collect();

            let mut tape = Tape::new();
            let mut sess = ParamSession::new();
            let mut fx = Forward::new(&mut tape, reg, &mut sess);
            let xid = fx.tape.leaf(x, false);
            let out = forward(&mut fx, cfg, mp, xid)?;
            let parts = compute_loss(&mut fx, &out, &y, &z, cfg.lambda)?;
            let total = tape.scalar_value(parts.total)?;
            let domain = tape.scalar_value(parts.domain)?;
            let global = tape.scalar_value(parts.global)?;
            if !total.is_finite() || !domain.is_finite() || !global.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    total,
                    domain,
                    global,
                });
            }
            tape.backward(parts.total)?;
            sess.harvest(&tape, reg);
            sgd_step(reg, oc, lr);

            let w = rows.len() as f64;
            sum_total += total * w;
            sum_domain += domain * w;
            sum_global += global * w;
        }
        let n = pool.len() as f64;
        let val_acc = accuracy(cfg, reg, mp, &val)?;
        let test_acc = if track_test {
            Some(accuracy(cfg, reg, mp, bundle.target(AccessPurpose::Reporting))?)
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            lr,
            train_total: sum_total / n,
            train_domain: sum_domain / n,
            train_global: sum_global / n,
            val_acc,
            test_acc,
        });

        if state.best_val.is_none_or(|(_, best)| val_acc > best) {
            state.best_val = Some((epoch, val_acc));
            best_val_ckpt = Some(PolicyCheckpoint {
                policy: Policy::ValidationBest,
                epoch,
                metric: val_acc,
                checkpoint: checkpoint::capture(
                    reg,
                    cfg,
                    oc,
                    epoch,
                    Policy::ValidationBest.name(),
                    RngState::capture(seed, &state.rng),
                ),
            });
        }
        if let Some(test_acc) = test_acc {
            if state.best_test.is_none_or(|(_, best)| test_acc > best) {
                state.best_test = Some((epoch, test_acc));
                best_test_ckpt = Some(PolicyCheckpoint {
                    policy: Policy::TestBest,
                    epoch,
                    metric: test_acc,
                    checkpoint: checkpoint::capture(
                        reg,
                        cfg,
                        oc,
                        epoch,
                        Policy::TestBest.name(),
                        RngState::capture(seed, &state.rng),
                    ),
                });
            }
        }
    }

    let last = checkpoint::capture(
        reg,
        cfg,
        oc,
        oc.epochs - 1,
        Policy::LastEpoch.name(),
        RngState::capture(seed, &state.rng),
    );
    Ok(TrainRunOutput {
        records,
        last,
        best_val: best_val_ckpt.expect("epochs ≥ 1 guarantees a best-val epoch"),
        best_test: best_test_ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_lodo_split, s4_benchmark, BenchmarkSpec};
    use crate::model::init_model;

    fn tiny_bench() -> BenchmarkSpec {
        BenchmarkSpec {
            n_per_class: 8,
            ..s4_benchmark(0)
        }
    }

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            k: 3,
            d_in: 16,
            ..ModelConfig::micro()
        }
    }

    fn tiny_oc(epochs: usize) -> OptimConfig {
        OptimConfig {
            epochs,
            batch_size: 16,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn lr_schedule_boundary_and_constant_cases() {
        let oc = OptimConfig::default();
        assert_eq!(lr_at(0, &oc), 0.001);
        assert_eq!(lr_at(63, &oc), 0.001);
        assert!((lr_at(64, &oc) - 0.0001).abs() < 1e-18);
        assert!((lr_at(79, &oc) - 0.0001).abs() < 1e-18);
        let constant = OptimConfig {
            decay_at_fraction: 1.0,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(79, &constant), 0.001);
        let drops: Vec<bool> = (0..80).map(|e| lr_at(e, &oc) < oc.lr0).collect();
        assert_eq!(drops.iter().filter(|&&d| d).count(), 16);
        assert!(drops.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sgd_two_momentum_steps_match_closed_form() {
        let mut reg = ParamRegistry::new();
        let id = reg
            .add("backbone.w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let oc = OptimConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            lr0: 0.1,
            ..OptimConfig::default()
        };
        let g = [0.5, -1.0];
        reg.accumulate_grad(id, &g);
        sgd_step(&mut reg, &oc, 0.1);
        reg.accumulate_grad(id, &g);
        sgd_step(&mut reg, &oc, 0.1);
        for (j, (&w, &gj)) in reg.value(id).data().iter().zip(&g).enumerate() {
            let init = [1.0, -2.0][j];
            let expect = init - 0.1 * (gj + 1.9 * gj);
            assert!((w - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn vanilla_sgd_and_zero_grad_cases() {
        let mut reg = ParamRegistry::new();
        let id = reg
            .add("global.w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let oc = OptimConfig {
            momentum: 0.0,
            ..OptimConfig::default()
        };
        reg.accumulate_grad(id, &[1.0, 2.0]);
        sgd_step(&mut reg, &oc, 0.5);
        assert_eq!(reg.value(id).data(), &[2.5, 3.0]);
        assert!(reg.grad(id).iter().all(|&g| g == 0.0));
        sgd_step(&mut reg, &oc, 0.5);
        assert_eq!(reg.value(id).data(), &[2.5, 3.0]);
    }

    #[test]
    fn weight_decay_enters_the_velocity() {
        let mut reg = ParamRegistry::new();
        let id = reg
            .add("global.w", Tensor::new(vec![1], vec![2.0]).unwrap())
            .unwrap();
        let oc = OptimConfig {
            momentum: 0.0,
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        sgd_step(&mut reg, &oc, 1.0);
        assert!((reg.value(id).data()[0] - (2.0 - 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_run_leaves_parameters_at_init() {
        let cfg = micro_cfg();
        let bench = tiny_bench();
        let bundle = make_lodo_split(&bench, 3, 0.1, 5).unwrap();
        let (mut reg, mp) = init_model(&cfg).unwrap();
        let before = reg.flatten_values();
        let oc = OptimConfig {
            lr0: 0.0,
            ..tiny_oc(1)
        };
        let out = train_run(&cfg, &oc, &mut reg, &mp, &bundle, 1, false).unwrap();
        assert_eq!(reg.flatten_values(), before);
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn two_identical_runs_are_bit_identical() {
        let cfg = micro_cfg();
        let bench = tiny_bench();
        let run = || {
            let bundle = make_lodo_split(&bench, 0, 0.1, 5).unwrap();
            let (mut reg, mp) = init_model(&cfg).unwrap();
            train_run(&cfg, &tiny_oc(2), &mut reg, &mp, &bundle, 3, true).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.records, b.records);
        assert_eq!(
            a.last.to_json().unwrap(),
            b.last.to_json().unwrap()
        );
        assert_eq!(
            a.best_val.checkpoint.to_json().unwrap(),
            b.best_val.checkpoint.to_json().unwrap()
        );
    }

    #[test]
    fn loss_trajectory_ignores_record_order() {
        let cfg = micro_cfg();
        let bench = tiny_bench();
        let train = |bundle: &DatasetBundle| {
            let (mut reg, mp) = init_model(&cfg).unwrap();
            train_run(&cfg, &tiny_oc(2), &mut reg, &mp, bundle, 9, false).unwrap()
        };
        let bundle = make_lodo_split(&bench, 1, 0.1, 5).unwrap();
        let mut shuffled = make_lodo_split(&bench, 1, 0.1, 5).unwrap();
        // Swap two train rows in place; the train/val membership is
        // unchanged because both positions are train indices.
        let (i, j) = {
            let s = &shuffled.sources[0];
            (s.train_idx[0], s.train_idx[1])
        };
        shuffled.sources[0].samples.swap(i, j);
        let a = train(&bundle);
        let b = train(&shuffled);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn lambda_one_step_on_single_domain_batch_moves_only_that_head() {
        let cfg = ModelConfig {
            lambda: 1.0,
            ..micro_cfg()
        };
        let bench = tiny_bench();
        let bundle = make_lodo_split(&bench, 3, 0.1, 5).unwrap();
        let (mut reg, mp) = init_model(&cfg).unwrap();
        let before: Vec<Vec<f64>> = mp
            .experts
            .iter()
            .map(|e| reg.value(e.head_w).data().to_vec())
            .collect();
        // One batch drawn entirely from source domain 0.
        let rows: Vec<DomainSample> = bundle.sources[0]
            .train_idx
            .iter()
            .take(8)
            .map(|&i| bundle.sources[0].samples[i].clone())
            .collect();
        let x = batch_inputs(&cfg, &rows).unwrap();
        let y: Vec<usize> = rows.iter().map(|r| r.y).collect();
        let z: Vec<usize> = rows.iter().map(|r| r.z).collect();
        let mut tape = Tape::new();
        let mut sess = ParamSession::new();
        let mut fx = Forward::new(&mut tape, &reg, &mut sess);
        let xid = fx.tape.leaf(x, false);
        let out = forward(&mut fx, &cfg, &mp, xid).unwrap();
        let parts = compute_loss(&mut fx, &out, &y, &z, cfg.lambda).unwrap();
        tape.backward(parts.total).unwrap();
        sess.harvest(&tape, &mut reg);
        sgd_step(&mut reg, &OptimConfig::default(), 0.01);
        for (k, e) in mp.experts.iter().enumerate() {
            let now = reg.value(e.head_w).data();
            if k == 0 {
                assert_ne!(now, &before[k][..], "expert 0 head should move");
            } else {
                assert_eq!(now, &before[k][..], "expert {k} head should not move");
            }
        }
    }

    #[test]
    fn training_never_reads_target_without_tracking() {
        let cfg = micro_cfg();
        let bench = tiny_bench();
        let bundle = make_lodo_split(&bench, 2, 0.1, 5).unwrap();
        let (mut reg, mp) = init_model(&cfg).unwrap();
        let out = train_run(&cfg, &tiny_oc(2), &mut reg, &mp, &bundle, 4, false).unwrap();
        assert_eq!(bundle.access_log.count(AccessPurpose::Gradient), 0);
        assert_eq!(bundle.access_log.count(AccessPurpose::Selection), 0);
        assert_eq!(bundle.access_log.count(AccessPurpose::Reporting), 0);
        assert!(out.best_test.is_none());
        assert!(out.records.iter().all(|r| r.test_acc.is_none()));
    }

    #[test]
    fn tracked_runs_only_report_and_test_best_dominates() {
        let cfg = micro_cfg();
        let bench = tiny_bench();
        let bundle = make_lodo_split(&bench, 2, 0.1, 5).unwrap();
        let (mut reg, mp) = init_model(&cfg).unwrap();
        let out = train_run(&cfg, &tiny_oc(3), &mut reg, &mp, &bundle, 4, true).unwrap();
        assert_eq!(bundle.access_log.count(AccessPurpose::Gradient), 0);
        assert_eq!(bundle.access_log.count(AccessPurpose::Selection), 0);
        assert_eq!(bundle.access_log.count(AccessPurpose::Reporting), 3);
        let best = out.best_test.unwrap();
        let last_test = out.records.last().unwrap().test_acc.unwrap();
        let val_epoch_test = out.records[out.best_val.epoch].test_acc.unwrap();
        assert!(best.metric >= last_test);
        assert!(best.metric >= val_epoch_test);
    }

    #[test]
    fn bad_configs_are_rejected_before_training() {
        let cfg = micro_cfg();
        let bench = tiny_bench();
        let bundle = make_lodo_split(&bench, 0, 0.1, 5).unwrap();
        let (mut reg, mp) = init_model(&cfg).unwrap();
        let bad = OptimConfig {
            batch_size: 0,
            ..OptimConfig::default()
        };
        assert!(matches!(
            train_run(&cfg, &bad, &mut reg, &mp, &bundle, 0, false),
            Err(TrainError::Config(_))
        ));
        let wrong_k = ModelConfig {
            k: 2,
            ..micro_cfg()
        };
        let (mut reg2, mp2) = init_model(&wrong_k).unwrap();
        assert!(matches!(
            train_run(&wrong_k, &OptimConfig::default(), &mut reg2, &mp2, &bundle, 0, false),
            Err(TrainError::ExpertMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn stratified_batches_cycle_domains() {
        let pool = vec![
            DomainSample { x: vec![0.0], y: 0, z: 0 },
            DomainSample { x: vec![1.0], y: 0, z: 0 },
            DomainSample { x: vec![2.0], y: 0, z: 1 },
            DomainSample { x: vec![3.0], y: 0, z: 1 },
            DomainSample { x: vec![4.0], y: 0, z: 2 },
            DomainSample { x: vec![5.0], y: 0, z: 2 },
        ];
        let oc = OptimConfig {
            stratified: true,
            ..OptimConfig::default()
        };
        let mut rng = derive_rng(0, "train.shuffle");
        let order = epoch_order(&pool, &oc, &mut rng);
        let domains: Vec<usize> = order.iter().map(|&i| pool[i].z).collect();
        assert_eq!(domains, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(order.len(), 6);
    }
}
