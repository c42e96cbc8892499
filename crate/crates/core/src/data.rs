//! Synthetic multi-domain classification data with controllable domain
//! shift, plus the leave-one-domain-out bundling used by training.
//!
//! Every domain applies an affine distortion to a shared set of class
//! prototypes: rotate the first two coordinates, scale per coordinate,
//! translate, then add isotropic Gaussian noise. Mixed domains draw each
//! sample from one of two parent specs, modeling a target that merges two
//! source distributions.
//!
//! Target-domain rows live behind a purpose-tagged accessor so the
//! evaluation protocol can prove which decisions ever touched them.

use crate::params::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("unknown domain id {id}")]
    UnknownDomain { id: usize },
    #[error("could not place {placed} of {requested} prototypes at separation {separation} within {attempts} attempts")]
    PrototypePlacement {
        requested: usize,
        placed: usize,
        separation: f64,
        attempts: usize,
    },
    #[error("fraction must lie in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("val_fraction must lie strictly between 0 and 1, got {0}")]
    BadValFraction(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// One source or target distribution: an affine distortion of the shared
/// prototypes plus isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// Degrees; rotates coordinates 0 and 1, identity on the rest.
    pub rotation_deg: f64,
    /// Per-coordinate multiplier, length D_in, entries nonzero.
    pub scale: Vec<f64>,
    /// Per-coordinate additive shift, length D_in.
    pub bias: Vec<f64>,
    /// Standard deviation of the additive Gaussian noise, σ ≥ 0.
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(DataError::InvalidSpec(format!(
                "noise_std must be finite and ≥ 0, got {}",
                self.noise_std
            )));
        }
        if self.scale.len() != self.bias.len() {
            return Err(DataError::InvalidSpec(format!(
                "scale length {} != bias length {}",
                self.scale.len(),
                self.bias.len()
            )));
        }
        if self.scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(DataError::InvalidSpec(
                "scale entries must be finite and nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// One labeled input row.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub x: Vec<f64>,
    /// Class id in [0, N_C).
    pub y: usize,
    /// Domain label: the expert index for source rows, the domain id for
    /// target rows.
    pub z: usize,
}

/// Why target-domain rows are being read. Gradient and Selection reads
/// are protocol violations for the honest training policies; Reporting
/// reads feed the test-best diagnostic and final tables only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessPurpose {
    Gradient,
    Selection,
    Reporting,
}

/// Per-purpose counters over target-domain reads.
#[derive(Debug, Default)]
pub struct TargetAccessLog {
    gradient: Cell<u64>,
    selection: Cell<u64>,
    reporting: Cell<u64>,
}

impl TargetAccessLog {
    fn bump(&self, purpose: AccessPurpose) {
        let cell = match purpose {
            AccessPurpose::Gradient => &self.gradient,
            AccessPurpose::Selection => &self.selection,
            AccessPurpose::Reporting => &self.reporting,
        };
        cell.set(cell.get() + 1);
    }

    pub fn count(&self, purpose: AccessPurpose) -> u64 {
        match purpose {
            AccessPurpose::Gradient => self.gradient.get(),
            AccessPurpose::Selection => self.selection.get(),
            AccessPurpose::Reporting => self.reporting.get(),
        }
    }
}

/// One source domain's rows and its train/validation partition.
#[derive(Debug, Clone)]
pub struct SourceDomain {
    pub domain_id: usize,
    /// Position of this domain among the sources; equals the z stored on
    /// its samples and indexes the matching expert branch.
    pub expert_index: usize,
    pub samples: Vec<DomainSample>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Sources with their splits plus an access-instrumented target test set.
#[derive(Debug)]
pub struct DatasetBundle {
    pub sources: Vec<SourceDomain>,
    target: Vec<DomainSample>,
    pub target_domain_id: usize,
    pub access_log: TargetAccessLog,
    /// Total number of source samples.
    pub n_s: usize,
}

impl DatasetBundle {
    /// The target test rows. Every read passes through here and bumps the
    /// counter for its declared purpose.
    pub fn target(&self, purpose: AccessPurpose) -> &[DomainSample] {
        self.access_log.bump(purpose);
        &self.target
    }

    /// Number of target rows; does not count as a data read.
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn train_samples(&self) -> Vec<DomainSample> {
        self.sources
            .iter()
            .flat_map(|s| s.train_idx.iter().map(|&i| s.samples[i].clone()))
            .collect()
    }

    pub fn val_samples(&self) -> Vec<DomainSample> {
        self.sources
            .iter()
            .flat_map(|s| s.val_idx.iter().map(|&i| s.samples[i].clone()))
            .collect()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }
}

/// A generating recipe: the domain roster plus the prototype geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub domains: Vec<DomainSpec>,
    pub n_c: usize,
    pub d_in: usize,
    /// Minimum pairwise prototype distance.
    pub separation: f64,
    pub n_per_class: usize,
}

/// The default four-domain benchmark: rotations {0°, 25°, 50°, 75°},
/// per-domain scales from [0.8, 1.25], biases from ±0.3, σ = 0.15,
/// 5 classes, 200 samples per class per domain, 16 input dims.
pub fn s4_benchmark(seed: u64) -> BenchmarkSpec {
    let d_in = 16;
    let scale_dist = Uniform::new_inclusive(0.8, 1.25).expect("uniform bounds");
    let bias_dist = Uniform::new_inclusive(-0.3, 0.3).expect("uniform bounds");
    let domains = [0.0, 25.0, 50.0, 75.0]
        .into_iter()
        .enumerate()
        .map(|(id, rotation_deg)| {
            let mut rng = derive_rng(seed, &format!("data.s4.{id}"));
            DomainSpec {
                id,
                rotation_deg,
                scale: (0..d_in).map(|_| scale_dist.sample(&mut rng)).collect(),
                bias: (0..d_in).map(|_| bias_dist.sample(&mut rng)).collect(),
                noise_std: 0.15,
            }
        })
        .collect();
    BenchmarkSpec {
        domains,
        n_c: 5,
        d_in,
        separation: 2.0,
        n_per_class: 200,
    }
}

/// N_C points on the sphere of radius `separation`, rejection-checked so
/// every pair is at least `separation` apart.
pub fn make_class_prototypes(
    n_c: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DataError> {
    if separation <= 0.0 || !separation.is_finite() {
        return Err(DataError::InvalidSpec(format!(
            "separation must be positive and finite, got {separation}"
        )));
    }
    let mut rng = derive_rng(seed, "data.prototypes");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n_c);
    let max_attempts = 100_000;
    let mut attempts = 0;
    while protos.len() < n_c {
        if attempts >= max_attempts {
            return Err(DataError::PrototypePlacement {
                requested: n_c,
                placed: protos.len(),
                separation,
                attempts,
            });
        }
        attempts += 1;
        let raw: Vec<f64> = (0..d_in).map(|_| normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let candidate: Vec<f64> = raw.iter().map(|v| v / norm * separation).collect();
        let ok = protos.iter().all(|p| {
            let d2: f64 = p
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= separation
        });
        if ok {
            protos.push(candidate);
        }
    }
    Ok(protos)
}

/// The noise-free image of a prototype under a domain's distortion:
/// scale ⊙ rotate(prototype) + bias.
pub fn transform_prototype(spec: &DomainSpec, prototype: &[f64]) -> Vec<f64> {
    let mut out = prototype.to_vec();
    if out.len() >= 2 {
        let theta = spec.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let (x0, x1) = (out[0], out[1]);
        out[0] = cos * x0 - sin * x1;
        out[1] = sin * x0 + cos * x1;
    }
    for (j, v) in out.iter_mut().enumerate() {
        *v = spec.scale[j] * *v + spec.bias[j];
    }
    out
}

/// Exactly `n_per_class` rows per class: x = scale ⊙ rotate(c_y) + bias + ε,
/// ε ~ 𝒩(0, σ²I). Rows carry z = spec.id.
pub fn sample_domain(
    spec: &DomainSpec,
    prototypes: &[Vec<f64>],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<DomainSample>, DataError> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(DataError::InvalidSpec("n_per_class must be ≥ 1".into()));
    }
    let mut rng = derive_rng(seed, &format!("data.domain.{}", spec.id));
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("validated σ"))
    } else {
        None
    };
    let mut out = Vec::with_capacity(prototypes.len() * n_per_class);
    for (y, proto) in prototypes.iter().enumerate() {
        let center = transform_prototype(spec, proto);
        for _ in 0..n_per_class {
            let x: Vec<f64> = match &noise {
                Some(n) => center.iter().map(|&c| c + n.sample(&mut rng)).collect(),
                None => center.clone(),
            };
            out.push(DomainSample { x, y, z: spec.id });
        }
    }
    Ok(out)
}

/// A target that merges two parent distributions: each sample comes from
/// `a` with probability `fraction`, else from `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedDomain {
    pub a: DomainSpec,
    pub b: DomainSpec,
    pub fraction: f64,
}

pub fn mix_domains(a: DomainSpec, b: DomainSpec, fraction: f64) -> Result<MixedDomain, DataError> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(DataError::BadFraction(fraction));
    }
    a.validate()?;
    b.validate()?;
    Ok(MixedDomain { a, b, fraction })
}

impl MixedDomain {
    /// Draw `n_samples` rows with classes cycling round-robin and
    /// provenance Bernoulli(fraction). Rows carry z = `target_id`.
    /// Returns the rows and how many came from parent `a`.
    pub fn sample(
        &self,
        prototypes: &[Vec<f64>],
        n_samples: usize,
        target_id: usize,
        seed: u64,
    ) -> Result<(Vec<DomainSample>, usize), DataError> {
        let mut rng = derive_rng(seed, &format!("data.mix.{}x{}", self.a.id, self.b.id));
        let noise_a = noise_dist(&self.a)?;
        let noise_b = noise_dist(&self.b)?;
        let mut out = Vec::with_capacity(n_samples);
        let mut from_a = 0usize;
        for i in 0..n_samples {
            let y = i % prototypes.len();
            let use_a = rng.random::<f64>() < self.fraction;
            let (spec, noise) = if use_a {
                from_a += 1;
                (&self.a, &noise_a)
            } else {
                (&self.b, &noise_b)
            };
            let center = transform_prototype(spec, &prototypes[y]);
            let x: Vec<f64> = match noise {
                Some(n) => center.iter().map(|&c| c + n.sample(&mut rng)).collect(),
                None => center,
            };
            out.push(DomainSample { x, y, z: target_id });
        }
        Ok((out, from_a))
    }
}

fn noise_dist(spec: &DomainSpec) -> Result<Option<Normal<f64>>, DataError> {
    spec.validate()?;
    Ok(if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("validated σ"))
    } else {
        None
    })
}

/// Canonical order: by (z, y, then x lexicographically). Training sorts
/// pools this way before the seeded shuffle, so the loss trajectory
/// depends only on content, never on record order.
pub fn sort_canonical(samples: &mut [DomainSample]) {
    samples.sort_by(|a, b| {
        a.z.cmp(&b.z).then(a.y.cmp(&b.y)).then_with(|| {
            for (u, v) in a.x.iter().zip(&b.x) {
                match u.partial_cmp(v) {
                    Some(std::cmp::Ordering::Equal) | None => continue,
                    Some(other) => return other,
                }
            }
            std::cmp::Ordering::Equal
        })
    });
}

fn split_source(
    domain_id: usize,
    expert_index: usize,
    mut samples: Vec<DomainSample>,
    val_fraction: f64,
    seed: u64,
) -> SourceDomain {
    for s in &mut samples {
        s.z = expert_index;
    }
    let n = samples.len();
    let val_count = (val_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, &format!("data.split.{domain_id}"));
    idx.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = idx[..val_count].to_vec();
    let mut train_idx: Vec<usize> = idx[val_count..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    SourceDomain {
        domain_id,
        expert_index,
        samples,
        train_idx,
        val_idx,
    }
}

/// Leave-one-domain-out bundle: every domain except `held_out` becomes a
/// source with a train/validation split; `held_out` becomes the test-only
/// target.
pub fn make_lodo_split(
    bench: &BenchmarkSpec,
    held_out: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(DataError::BadValFraction(val_fraction));
    }
    if !bench.domains.iter().any(|d| d.id == held_out) {
        return Err(DataError::UnknownDomain { id: held_out });
    }
    let protos = make_class_prototypes(bench.n_c, bench.d_in, bench.separation, seed)?;
    let mut source_specs: Vec<&DomainSpec> =
        bench.domains.iter().filter(|d| d.id != held_out).collect();
    source_specs.sort_by_key(|d| d.id);
    let sources = source_specs
        .iter()
        .enumerate()
        .map(|(expert_index, spec)| {
            let samples = sample_domain(spec, &protos, bench.n_per_class, seed)?;
            Ok(split_source(spec.id, expert_index, samples, val_fraction, seed))
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let target_spec = bench
        .domains
        .iter()
        .find(|d| d.id == held_out)
        .expect("checked above");
    let target = sample_domain(target_spec, &protos, bench.n_per_class, seed)?;
    let n_s = sources.iter().map(|s| s.samples.len()).sum();
    Ok(DatasetBundle {
        sources,
        target,
        target_domain_id: held_out,
        access_log: TargetAccessLog::default(),
        n_s,
    })
}

/// All domains stay sources; the target is a fresh mixture of the two
/// named source specs at `fraction`. The mixed target takes the next free
/// domain id.
pub fn make_mixed_target_split(
    bench: &BenchmarkSpec,
    mix_a: usize,
    mix_b: usize,
    fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(DataError::BadValFraction(val_fraction));
    }
    let spec_of = |id: usize| {
        bench
            .domains
            .iter()
            .find(|d| d.id == id)
            .cloned()
            .ok_or(DataError::UnknownDomain { id })
    };
    let mixed = mix_domains(spec_of(mix_a)?, spec_of(mix_b)?, fraction)?;
    let protos = make_class_prototypes(bench.n_c, bench.d_in, bench.separation, seed)?;
    let mut source_specs: Vec<&DomainSpec> = bench.domains.iter().collect();
    source_specs.sort_by_key(|d| d.id);
    let sources = source_specs
        .iter()
        .enumerate()
        .map(|(expert_index, spec)| {
            let samples = sample_domain(spec, &protos, bench.n_per_class, seed)?;
            Ok(split_source(spec.id, expert_index, samples, val_fraction, seed))
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let target_id = bench.domains.iter().map(|d| d.id).max().unwrap_or(0) + 1;
    let n_target = bench.n_per_class * bench.n_c;
    let (target, _) = mixed.sample(&protos, n_target, target_id, seed)?;
    let n_s = sources.iter().map(|s| s.samples.len()).sum();
    Ok(DatasetBundle {
        sources,
        target,
        target_domain_id: target_id,
        access_log: TargetAccessLog::default(),
        n_s,
    })
}

/// Write samples as text: '#'-prefixed header lines echoing `meta`, then
/// one record per line: domain id, class id, D_in floats, all fields
/// space-separated, floats at 17 significant digits.
pub fn export_samples<W: Write>(
    mut w: W,
    meta: &str,
    samples: &[DomainSample],
) -> Result<(), DataError> {
    for line in meta.lines() {
        writeln!(w, "# {line}")?;
    }
    for s in samples {
        write!(w, "{} {}", s.z, s.y)?;
        for v in &s.x {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Inverse of [`export_samples`]: returns the header (without '#'
/// markers) and the records.
pub fn import_samples<R: BufRead>(r: R) -> Result<(String, Vec<DomainSample>), DataError> {
    let mut meta = String::new();
    let mut samples = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            meta.push_str(rest.trim_start());
            meta.push('\n');
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let parse_usize = |f: Option<&str>, what: &str| {
            f.ok_or_else(|| DataError::Parse {
                line: line_num,
                detail: format!("missing {what}"),
            })?
            .parse::<usize>()
            .map_err(|e| DataError::Parse {
                line: line_num,
                detail: format!("bad {what}: {e}"),
            })
        };
        let z = parse_usize(fields.next(), "domain id")?;
        let y = parse_usize(fields.next(), "class id")?;
        let x = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| DataError::Parse {
                    line: line_num,
                    detail: format!("bad float: {e}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if x.is_empty() {
            return Err(DataError::Parse {
                line: line_num,
                detail: "record has no feature values".into(),
            });
        }
        samples.push(DomainSample { x, y, z });
    }
    Ok((meta, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn identity_spec(id: usize, d_in: usize) -> DomainSpec {
        DomainSpec {
            id,
            rotation_deg: 0.0,
            scale: vec![1.0; d_in],
            bias: vec![0.0; d_in],
            noise_std: 0.0,
        }
    }

    #[test]
    fn prototypes_respect_separation_and_seed() {
        let p = make_class_prototypes(2, 4, 2.0, 7).unwrap();
        let d: f64 = p[0]
            .iter()
            .zip(&p[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d >= 2.0);
        assert_eq!(p, make_class_prototypes(2, 4, 2.0, 7).unwrap());
        assert_ne!(p, make_class_prototypes(2, 4, 2.0, 8).unwrap());
    }

    #[test]
    fn default_prototype_geometry_min_distance() {
        let bench = s4_benchmark(0);
        let p = make_class_prototypes(bench.n_c, bench.d_in, bench.separation, 0).unwrap();
        let mut min_d = f64::INFINITY;
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                let d: f64 = p[i]
                    .iter()
                    .zip(&p[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_d = min_d.min(d);
            }
        }
        assert!(min_d >= bench.separation, "min pairwise distance {min_d}");
    }

    #[test]
    fn identity_domain_reproduces_prototypes() {
        let protos = make_class_prototypes(3, 5, 1.5, 1).unwrap();
        let spec = identity_spec(0, 5);
        let samples = sample_domain(&spec, &protos, 2, 42).unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            assert_eq!(s.x, protos[s.y]);
            assert_eq!(s.z, 0);
        }
    }

    #[test]
    fn labels_are_exactly_balanced() {
        let protos = make_class_prototypes(5, 16, 2.0, 1).unwrap();
        let bench = s4_benchmark(3);
        let samples = sample_domain(&bench.domains[2], &protos, 50, 9).unwrap();
        let mut counts = [0usize; 5];
        for s in &samples {
            counts[s.y] += 1;
        }
        assert_eq!(counts, [50; 5]);
    }

    #[test]
    fn empirical_class_means_match_transformed_prototypes() {
        let protos = make_class_prototypes(2, 4, 2.0, 5).unwrap();
        let spec = DomainSpec {
            id: 1,
            rotation_deg: 30.0,
            scale: vec![1.1, 0.9, 1.0, 1.2],
            bias: vec![0.1, -0.2, 0.0, 0.3],
            noise_std: 0.15,
        };
        let n = 10_000;
        let samples = sample_domain(&spec, &protos, n, 11).unwrap();
        let tol = 3.0 * spec.noise_std / (n as f64).sqrt();
        for (y, proto) in protos.iter().enumerate() {
            let center = transform_prototype(&spec, proto);
            let mut mean = [0.0; 4];
            for s in samples.iter().filter(|s| s.y == y) {
                for (m, v) in mean.iter_mut().zip(&s.x) {
                    *m += v;
                }
            }
            for (j, m) in mean.iter_mut().enumerate() {
                *m /= n as f64;
                assert!(
                    (*m - center[j]).abs() < tol,
                    "class {y} coord {j}: mean {m} vs center {}",
                    center[j]
                );
            }
        }
    }

    #[test]
    fn rotation_ninety_degrees_swaps_first_two_coords() {
        let spec = DomainSpec {
            id: 0,
            rotation_deg: 90.0,
            scale: vec![1.0; 3],
            bias: vec![0.0; 3],
            noise_std: 0.0,
        };
        let out = transform_prototype(&spec, &[1.0, 0.0, 5.0]);
        assert!((out[0] - 0.0).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);
        assert_eq!(out[2], 5.0);
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let bench = s4_benchmark(4);
        let a = make_lodo_split(&bench, 2, 0.1, 99).unwrap();
        let b = make_lodo_split(&bench, 2, 0.1, 99).unwrap();
        for (sa, sb) in a.sources.iter().zip(&b.sources) {
            assert_eq!(sa.samples, sb.samples);
            assert_eq!(sa.train_idx, sb.train_idx);
            assert_eq!(sa.val_idx, sb.val_idx);
        }
        assert_eq!(
            a.target(AccessPurpose::Reporting),
            b.target(AccessPurpose::Reporting)
        );
    }

    #[test]
    fn lodo_split_structure() {
        let bench = s4_benchmark(0);
        let bundle = make_lodo_split(&bench, 1, 0.1, 0).unwrap();
        assert_eq!(bundle.num_sources(), 3);
        assert_eq!(bundle.target_domain_id, 1);
        let ids: Vec<usize> = bundle.sources.iter().map(|s| s.domain_id).collect();
        assert_eq!(ids, vec![0, 2, 3]);
        for (k, s) in bundle.sources.iter().enumerate() {
            assert_eq!(s.expert_index, k);
            assert!(s.samples.iter().all(|smp| smp.z == k));
            let n = s.samples.len();
            assert_eq!(s.val_idx.len(), (0.1 * n as f64).round() as usize);
            let train: HashSet<usize> = s.train_idx.iter().copied().collect();
            let val: HashSet<usize> = s.val_idx.iter().copied().collect();
            assert!(train.is_disjoint(&val));
            assert_eq!(train.len() + val.len(), n);
        }
        assert_eq!(bundle.n_s, 3000);
        assert_eq!(bundle.target_len(), 1000);
        assert!(matches!(
            make_lodo_split(&bench, 9, 0.1, 0),
            Err(DataError::UnknownDomain { id: 9 })
        ));
    }

    #[test]
    fn access_log_counts_by_purpose() {
        let bench = s4_benchmark(0);
        let bundle = make_lodo_split(&bench, 0, 0.1, 0).unwrap();
        assert_eq!(bundle.access_log.count(AccessPurpose::Gradient), 0);
        let _ = bundle.target(AccessPurpose::Reporting);
        let _ = bundle.target(AccessPurpose::Reporting);
        let _ = bundle.target(AccessPurpose::Selection);
        assert_eq!(bundle.access_log.count(AccessPurpose::Reporting), 2);
        assert_eq!(bundle.access_log.count(AccessPurpose::Selection), 1);
        assert_eq!(bundle.access_log.count(AccessPurpose::Gradient), 0);
    }

    #[test]
    fn mixed_domain_extremes_and_provenance_counts() {
        let protos = make_class_prototypes(2, 4, 2.0, 3).unwrap();
        let a = identity_spec(0, 4);
        let mut b = identity_spec(1, 4);
        b.bias = vec![100.0; 4];
        let only_a = mix_domains(a.clone(), b.clone(), 1.0).unwrap();
        let (rows, from_a) = only_a.sample(&protos, 50, 9, 0).unwrap();
        assert_eq!(from_a, 50);
        assert!(rows.iter().all(|s| s.x[0] < 50.0 && s.z == 9));
        let only_b = mix_domains(a.clone(), b.clone(), 0.0).unwrap();
        let (rows, from_a) = only_b.sample(&protos, 50, 9, 0).unwrap();
        assert_eq!(from_a, 0);
        assert!(rows.iter().all(|s| s.x[0] > 50.0));
        let half = mix_domains(a, b, 0.5).unwrap();
        let (_, from_a) = half.sample(&protos, 10_000, 9, 1).unwrap();
        let sigma = (10_000.0f64 * 0.25).sqrt();
        assert!(
            (from_a as f64 - 5000.0).abs() < 4.0 * sigma,
            "from_a = {from_a}"
        );
        assert!(matches!(
            mix_domains(identity_spec(0, 4), identity_spec(1, 4), 1.5),
            Err(DataError::BadFraction(_))
        ));
    }

    #[test]
    fn mixed_target_bundle_keeps_all_sources() {
        let bench = s4_benchmark(1);
        let bundle = make_mixed_target_split(&bench, 0, 1, 0.5, 0.1, 7).unwrap();
        assert_eq!(bundle.num_sources(), 4);
        assert_eq!(bundle.target_domain_id, 4);
        assert_eq!(bundle.target_len(), 1000);
        assert!(bundle
            .target(AccessPurpose::Reporting)
            .iter()
            .all(|s| s.z == 4));
    }

    #[test]
    fn nearest_prototype_is_perfect_without_noise() {
        let bench = s4_benchmark(2);
        let protos = make_class_prototypes(bench.n_c, bench.d_in, bench.separation, 2).unwrap();
        let mut spec = bench.domains[3].clone();
        spec.noise_std = 0.0;
        let samples = sample_domain(&spec, &protos, 20, 5).unwrap();
        let centers: Vec<Vec<f64>> = protos
            .iter()
            .map(|p| transform_prototype(&spec, p))
            .collect();
        for s in &samples {
            let pred = centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&s.x).map(|(u, v)| (u - v) * (u - v)).sum();
                    let db: f64 = b.iter().zip(&s.x).map(|(u, v)| (u - v) * (u - v)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            assert_eq!(pred, s.y);
        }
    }

    #[test]
    fn canonical_sort_is_content_deterministic() {
        let mut a = vec![
            DomainSample { x: vec![2.0, 1.0], y: 1, z: 0 },
            DomainSample { x: vec![1.0, 3.0], y: 0, z: 1 },
            DomainSample { x: vec![1.0, 2.0], y: 1, z: 0 },
            DomainSample { x: vec![0.5, 9.0], y: 0, z: 0 },
        ];
        let mut b = a.clone();
        b.reverse();
        sort_canonical(&mut a);
        sort_canonical(&mut b);
        assert_eq!(a, b);
        assert_eq!(a[0].x, vec![0.5, 9.0]);
        assert_eq!(a[1].x, vec![1.0, 2.0]);
        assert_eq!(a[3].z, 1);
    }

    #[test]
    fn export_import_round_trip_is_lossless() {
        let bench = s4_benchmark(6);
        let protos = make_class_prototypes(bench.n_c, bench.d_in, bench.separation, 6).unwrap();
        let samples = sample_domain(&bench.domains[0], &protos, 3, 6).unwrap();
        let mut buf = Vec::new();
        export_samples(&mut buf, "spec: s4 seed=6\nheld_out: none", &samples).unwrap();
        let (meta, back) = import_samples(buf.as_slice()).unwrap();
        assert_eq!(meta, "spec: s4 seed=6\nheld_out: none\n");
        assert_eq!(back, samples);
    }

    #[test]
    fn import_rejects_malformed_records() {
        let bad = b"0 not_a_class 1.0 2.0\n".as_slice();
        assert!(matches!(
            import_samples(bad),
            Err(DataError::Parse { line: 1, .. })
        ));
        let empty_features = b"0 1\n".as_slice();
        assert!(matches!(
            import_samples(empty_features),
            Err(DataError::Parse { line: 1, .. })
        ));
    }
}
