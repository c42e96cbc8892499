//! Experiment execution: expands a plan into run specifications, trains
//! each one, and fans independent runs out across worker threads with a
//! deterministic merge.

use crate::plan::{ExperimentPlan, PlanError};
use crate::report::{ExperimentReport, ReportError, RunRecord};
use d2sdk_core::data::{
    make_class_prototypes, make_lodo_split, make_mixed_target_split, mix_domains, sample_domain,
    AccessPurpose, BenchmarkSpec, DataError, DatasetBundle,
};
use d2sdk_core::gradcheck::{gradient_check, GradCheckConfig, GradCheckError, GradCheckReport};
use d2sdk_core::model::{
    compute_loss, forward, init_model, ModelConfig, ModelError, Variant,
};
use d2sdk_core::params::{Forward, ParamSession};
use d2sdk_core::tensor::{Tape, Tensor, TensorError};
use d2sdk_core::trainer::{train_run, OptimConfig, TrainError};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("run produced no epochs")]
    EmptyRun,
    #[error("epoch {epoch} is missing a tracked target accuracy")]
    MissingTestAcc { epoch: usize },
}

/// What the held-out target of a run is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    /// Leave this domain out; the others become sources.
    HeldOut(usize),
    /// All domains stay sources; the target mixes domains `a` and `b`.
    Mixed { a: usize, b: usize, fraction: f64 },
}

/// One fully resolved training run. `model.k`, `n_c`, `d_in`, and `seed`
/// are overwritten from the data before training.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub label: String,
    pub target: TargetKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub val_fraction: f64,
}

fn make_bundle(bench: &BenchmarkSpec, spec: &RunSpec) -> Result<DatasetBundle, DataError> {
    match spec.target {
        TargetKind::HeldOut(id) => make_lodo_split(bench, id, spec.val_fraction, spec.seed),
        TargetKind::Mixed { a, b, fraction } => {
            make_mixed_target_split(bench, a, b, fraction, spec.val_fraction, spec.seed)
        }
    }
}

/// Train one run and distill it into a [`RunRecord`]. All three policy
/// accuracies come from the per-epoch log of the same run, so the oracle
/// policy dominates the others by construction.
pub fn run_one(bench: &BenchmarkSpec, spec: &RunSpec) -> Result<RunRecord, RunnerError> {
    let bundle = make_bundle(bench, spec)?;
    let mut cfg = spec.model.clone();
    cfg.k = bundle.num_sources();
    cfg.n_c = bench.n_c;
    cfg.d_in = bench.d_in;
    cfg.seed = spec.seed;
    let (mut reg, mp) = init_model(&cfg)?;
    let out = train_run(&cfg, &spec.optim, &mut reg, &mp, &bundle, spec.seed, true)?;
    let last = out.records.last().ok_or(RunnerError::EmptyRun)?;
    let test_at = |epoch: usize| {
        out.records
            .iter()
            .find(|r| r.epoch == epoch)
            .and_then(|r| r.test_acc)
            .ok_or(RunnerError::MissingTestAcc { epoch })
    };
    let best_test = out
        .best_test
        .as_ref()
        .ok_or(RunnerError::MissingTestAcc { epoch: 0 })?;
    Ok(RunRecord {
        label: spec.label.clone(),
        held_out: bundle.target_domain_id,
        seed: spec.seed,
        last_epoch_acc: test_at(last.epoch)?,
        validation_best_acc: test_at(out.best_val.epoch)?,
        test_best_acc: best_test.metric,
        best_val_epoch: out.best_val.epoch,
        best_test_epoch: best_test.epoch,
        final_val_acc: last.val_acc,
        target_gradient_reads: bundle.access_log.count(AccessPurpose::Gradient),
        target_selection_reads: bundle.access_log.count(AccessPurpose::Selection),
        target_reporting_reads: bundle.access_log.count(AccessPurpose::Reporting),
    })
}

fn effective_workers(requested: usize, jobs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let n = if requested == 0 { available } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Run every spec, fanning out over `workers` threads (0 = all cores).
/// Results are merged by spec index, so the output order and content are
/// identical for any worker count.
pub fn execute(
    bench: &BenchmarkSpec,
    specs: &[RunSpec],
    workers: usize,
) -> Result<Vec<RunRecord>, RunnerError> {
    let slots: Vec<Mutex<Option<Result<RunRecord, RunnerError>>>> =
        specs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let n_workers = effective_workers(workers, specs.len());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= specs.len() {
                    break;
                }
                let result = run_one(bench, &specs[idx]);
                *slots[idx].lock().expect("no poisoned run slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("no poisoned run slot")
                .expect("every slot is filled before the scope ends")
        })
        .collect()
}

fn base_model(plan: &ExperimentPlan, variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..plan.model.clone()
    }
}

fn push_spec(
    specs: &mut Vec<RunSpec>,
    plan: &ExperimentPlan,
    label: &str,
    target: TargetKind,
    seed: u64,
    model: ModelConfig,
) {
    specs.push(RunSpec {
        label: label.to_string(),
        target,
        seed,
        model,
        optim: plan.optim.clone(),
        val_fraction: plan.val_fraction,
    });
}

/// Variants × held-out domains × seeds.
pub fn lodo_specs(plan: &ExperimentPlan) -> Result<Vec<RunSpec>, PlanError> {
    let variants = plan.parsed_variants()?;
    let mut specs = Vec::new();
    for variant in &variants {
        for &held in &plan.held_out {
            for &seed in &plan.seeds {
                push_spec(
                    &mut specs,
                    plan,
                    variant.name(),
                    TargetKind::HeldOut(held),
                    seed,
                    base_model(plan, *variant),
                );
            }
        }
    }
    Ok(specs)
}

/// Variants × seeds against the plan's mixed target.
pub fn mixed_specs(plan: &ExperimentPlan) -> Result<Vec<RunSpec>, PlanError> {
    let variants = plan.parsed_variants()?;
    let target = TargetKind::Mixed {
        a: plan.mixed_pair.0,
        b: plan.mixed_pair.1,
        fraction: plan.mixed_fraction,
    };
    let mut specs = Vec::new();
    for variant in &variants {
        for &seed in &plan.seeds {
            push_spec(
                &mut specs,
                plan,
                variant.name(),
                target,
                seed,
                base_model(plan, *variant),
            );
        }
    }
    Ok(specs)
}

/// The full model across the λ grid, labeled "lambda=…".
pub fn lambda_specs(plan: &ExperimentPlan) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &lambda in &plan.lambda_grid {
        let model = ModelConfig {
            lambda,
            ..base_model(plan, Variant::Full)
        };
        for &held in &plan.held_out {
            for &seed in &plan.seeds {
                push_spec(
                    &mut specs,
                    plan,
                    &format!("lambda={lambda}"),
                    TargetKind::HeldOut(held),
                    seed,
                    model.clone(),
                );
            }
        }
    }
    specs
}

/// One-at-a-time sweep over encoder depth, head count, and feed-forward
/// width, everything else at the plan's model defaults.
pub fn transformer_specs(plan: &ExperimentPlan) -> Vec<RunSpec> {
    let mut points: Vec<(String, ModelConfig)> = Vec::new();
    for &l in &plan.l_grid {
        points.push((format!("L={l}"), ModelConfig { l, ..base_model(plan, Variant::Full) }));
    }
    for &num_heads in &plan.heads_grid {
        points.push((
            format!("heads={num_heads}"),
            ModelConfig { num_heads, ..base_model(plan, Variant::Full) },
        ));
    }
    for &d_ff in &plan.d_ff_grid {
        points.push((
            format!("d_ff={d_ff}"),
            ModelConfig { d_ff, ..base_model(plan, Variant::Full) },
        ));
    }
    let mut specs = Vec::new();
    for (label, model) in &points {
        for &held in &plan.held_out {
            for &seed in &plan.seeds {
                push_spec(
                    &mut specs,
                    plan,
                    label,
                    TargetKind::HeldOut(held),
                    seed,
                    model.clone(),
                );
            }
        }
    }
    specs
}

fn run_report(
    title: &str,
    plan: &ExperimentPlan,
    specs: Vec<RunSpec>,
    mut notes: Vec<String>,
) -> Result<ExperimentReport, RunnerError> {
    let start = Instant::now();
    let bench = plan.benchmark();
    let records = execute(&bench, &specs, plan.workers)?;
    notes.push(format!(
        "{} runs over {} seeds; init and data splits are re-derived from each round's seed",
        records.len(),
        plan.seeds.len()
    ));
    Ok(ExperimentReport::new(
        title,
        plan.clone(),
        records,
        notes,
        start.elapsed().as_secs_f64(),
    ))
}

/// Leave-one-domain-out comparison of every planned variant.
pub fn run_lodo(plan: &ExperimentPlan) -> Result<ExperimentReport, RunnerError> {
    plan.validate()?;
    run_report("leave-one-domain-out", plan, lodo_specs(plan)?, vec![])
}

/// Component ablation: convex mixture, encoder-only, decoder-without-
/// memory, and the full model, on the same splits.
pub fn run_ablation(plan: &ExperimentPlan) -> Result<ExperimentReport, RunnerError> {
    let mut plan = plan.clone();
    plan.variants = ["ConvExp", "TEExp", "TD", "Full"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    plan.validate()?;
    run_report("component ablation", &plan, lodo_specs(&plan)?, vec![])
}

/// Mixed-target evaluation: sources unchanged, target drawn from a
/// mixture of two source domains.
pub fn run_mixed(plan: &ExperimentPlan) -> Result<ExperimentReport, RunnerError> {
    plan.validate()?;
    let notes = vec![format!(
        "target mixes domains {} and {} at fraction {}",
        plan.mixed_pair.0, plan.mixed_pair.1, plan.mixed_fraction
    )];
    run_report("mixed-domain target", plan, mixed_specs(plan)?, notes)
}

/// Sensitivity of the full model to the loss weight λ.
pub fn run_lambda_sweep(plan: &ExperimentPlan) -> Result<ExperimentReport, RunnerError> {
    plan.validate()?;
    run_report("lambda sweep", plan, lambda_specs(plan), vec![])
}

/// Sensitivity to encoder depth, head count, and feed-forward width.
pub fn run_transformer_sweep(plan: &ExperimentPlan) -> Result<ExperimentReport, RunnerError> {
    plan.validate()?;
    let notes = vec![format!(
        "d_ff grid {:?} scales the reference grid [512, 1024, 2048, 4096] down to desk size",
        plan.d_ff_grid
    )];
    run_report("transformer sweep", plan, transformer_specs(plan), notes)
}

/// Checkpoint-selection comparison: the aggregate blocks contrast
/// last-epoch, validation-best, and oracle test-best selection, and the
/// gap table quantifies what the oracle would gain.
pub fn run_selection_report(plan: &ExperimentPlan) -> Result<ExperimentReport, RunnerError> {
    plan.validate()?;
    let notes = vec![
        "last-epoch: deploy the final weights".to_string(),
        "validation-best: deploy the best source-validation epoch".to_string(),
        "test-best: oracle upper bound, reported but never used for selection".to_string(),
    ];
    run_report("selection policies", plan, lodo_specs(plan)?, notes)
}

/// Write the benchmark's domains (and the plan's mixed target) as text
/// files under `dir`; returns the paths written.
pub fn generate_data(plan: &ExperimentPlan, dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    plan.validate()?;
    let bench = plan.benchmark();
    let protos =
        make_class_prototypes(bench.n_c, bench.d_in, bench.separation, plan.data_seed)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for spec in &bench.domains {
        let samples = sample_domain(spec, &protos, bench.n_per_class, plan.data_seed)?;
        let meta = format!(
            "domain {} rotation_deg {} noise_std {} n_c {} d_in {}",
            spec.id, spec.rotation_deg, spec.noise_std, bench.n_c, bench.d_in
        );
        let path = dir.join(format!("domain_{}.txt", spec.id));
        let file = std::fs::File::create(&path)?;
        d2sdk_core::data::export_samples(std::io::BufWriter::new(file), &meta, &samples)?;
        written.push(path);
    }
    let (a, b) = plan.mixed_pair;
    let spec_of = |id: usize| {
        bench
            .domains
            .iter()
            .find(|d| d.id == id)
            .cloned()
            .ok_or(DataError::UnknownDomain { id })
    };
    let mixed = mix_domains(spec_of(a)?, spec_of(b)?, plan.mixed_fraction)?;
    let mixed_id = bench.domains.iter().map(|d| d.id).max().unwrap_or(0) + 1;
    let (samples, _) = mixed.sample(
        &protos,
        bench.n_per_class * bench.n_c,
        mixed_id,
        plan.data_seed,
    )?;
    let meta = format!(
        "mixed target of domains {a} and {b} fraction {} n_c {} d_in {}",
        plan.mixed_fraction, bench.n_c, bench.d_in
    );
    let path = dir.join(format!("mixed_{a}x{b}.txt"));
    let file = std::fs::File::create(&path)?;
    d2sdk_core::data::export_samples(std::io::BufWriter::new(file), &meta, &samples)?;
    written.push(path);
    Ok(written)
}

/// Outcome of one variant's micro-configuration gradient check.
#[derive(Debug)]
pub struct GradCheckOutcome {
    pub variant: Variant,
    pub n_params: usize,
    pub report: GradCheckReport,
}

/// Inputs at a well-conditioned probe point; central differences at
/// h = 1e-4 carry curvature-driven truncation error, so the probe avoids
/// inputs that leave layer-norm variances degenerate at init.
fn probe_inputs(cfg: &ModelConfig, batch: usize) -> (Tensor, Vec<usize>, Vec<usize>) {
    let data: Vec<f64> = (0..batch * cfg.d_in)
        .map(|i| (0.7 * (i as f64 + 1.0)).sin() * 2.0)
        .collect();
    let x = Tensor::new(vec![batch, cfg.d_in], data).expect("shape matches data");
    let y: Vec<usize> = (0..batch).map(|i| (i * 3) % cfg.n_c).collect();
    let z: Vec<usize> = (0..batch).map(|i| i % cfg.k).collect();
    (x, y, z)
}

/// Verify the combined-loss gradient of each variant at the micro
/// configuration against central finite differences over every parameter.
pub fn grad_check_micro(variants: &[Variant]) -> Result<Vec<GradCheckOutcome>, RunnerError> {
    let mut outcomes = Vec::new();
    for &variant in variants {
        let cfg = ModelConfig {
            variant,
            seed: 2,
            ..ModelConfig::micro()
        };
        cfg.validate()?;
        let (reg0, mp) = init_model(&cfg)?;
        let (x, y, z) = probe_inputs(&cfg, 2);
        let theta0 = reg0.flatten_values();
        let f = |theta: &[f64]| {
            let mut reg = reg0.clone();
            reg.load_values(theta).expect("theta length is fixed");
            let mut tape = Tape::new();
            let mut sess = ParamSession::new();
            let mut fx = Forward::new(&mut tape, &reg, &mut sess);
            let xid = fx.tape.leaf(x.clone(), false);
            let out = forward(&mut fx, &cfg, &mp, xid).expect("validated micro config");
            let parts =
                compute_loss(&mut fx, &out, &y, &z, cfg.lambda).expect("validated micro config");
            let loss = tape.scalar_value(parts.total)?;
            tape.backward(parts.total)?;
            let mut grad_reg = reg0.clone();
            sess.harvest(&tape, &mut grad_reg);
            Ok((loss, grad_reg.flatten_grads()))
        };
        let report = gradient_check(f, &theta0, &GradCheckConfig::default())?;
        outcomes.push(GradCheckOutcome {
            variant,
            n_params: theta0.len(),
            report,
        });
    }
    Ok(outcomes)
}
