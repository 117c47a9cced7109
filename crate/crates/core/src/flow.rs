//! Discretized particle flow that transports an initial ensemble towards the
//! distribution of the fully observed data.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::Serialize;

use crate::dataset::{partition_by_pattern, Direction, MaskedDataset, PatternGroup, Standardizer};
use crate::error::{Error, Result};
use crate::evaluate::standardized_energy;
use crate::kernel::{median_heuristic, Bandwidth};
use crate::rng::{self, Stream};
use crate::velocity::{ensemble_velocities, DEFAULT_TIKHONOV_EPS};

pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_EARLY_STOP_EPS: f64 = 0.01;
pub const DEFAULT_TRACE_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaChoice {
    MedianHeuristic,
    Fixed(Bandwidth),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub eta: f64,
    /// Maximum number of steps T.
    pub steps: usize,
    pub sigma: SigmaChoice,
    pub tikhonov_eps: f64,
    pub early_stop_eps: f64,
    pub standardize: bool,
    /// Number of generated particles; `None` means one per input row.
    pub n_tilde: Option<usize>,
    pub seed: u64,
    /// Record per-step trace records and ensemble snapshots.
    pub trace: bool,
    /// Snapshot cadence in steps when tracing.
    pub trace_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            steps: DEFAULT_STEPS,
            sigma: SigmaChoice::MedianHeuristic,
            tikhonov_eps: DEFAULT_TIKHONOV_EPS,
            early_stop_eps: DEFAULT_EARLY_STOP_EPS,
            standardize: true,
            n_tilde: None,
            seed: 0,
            trace: false,
            trace_every: DEFAULT_TRACE_EVERY,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.tikhonov_eps >= 0.0) {
            return bad(format!("tikhonov_eps must be nonnegative, got {}", self.tikhonov_eps));
        }
        if !(self.early_stop_eps >= 0.0) {
            return bad(format!("early_stop_eps must be nonnegative, got {}", self.early_stop_eps));
        }
        if self.n_tilde == Some(0) {
            return bad("n_tilde must be positive".into());
        }
        if self.trace_every == 0 {
            return bad("trace_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub particles: Array2<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub rho: f64,
    pub grad_norm: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FlowReport {
    pub steps_run: usize,
    pub stopped_early: bool,
    /// `(step, eta)` at the start and after every halving.
    pub eta_history: Vec<(usize, f64)>,
    pub relative_change_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub kernel_underflow_count: usize,
    /// Bandwidth used, in the coordinates the flow ran in.
    pub sigma: f64,
    pub trace: Vec<TraceRecord>,
}

/// Ensemble state captured during a traced run, in original coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub particles: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    /// ñ × d generated sample in original coordinates.
    pub generated: Array2<f64>,
    pub report: FlowReport,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub eta: f64,
    pub sigma: Bandwidth,
    pub tikhonov_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Mean velocity norm over mean particle norm.
    pub rho: f64,
    /// Mean per-particle velocity norm.
    pub grad_norm: f64,
    pub underflow_count: usize,
}

/// Builds the initial ensemble by filling each masked cell with a uniform draw
/// from the observed values of its column.
///
/// With `n_tilde == n` particle i starts from row i; otherwise rows are first
/// resampled with replacement.
pub fn initialize_marginal<R: Rng>(
    ds: &MaskedDataset,
    n_tilde: usize,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    if n_tilde == 0 {
        return Err(Error::InvalidArgument("n_tilde must be positive".into()));
    }
    let (n, d) = (ds.nrows(), ds.ncols());
    let observed: Vec<Vec<f64>> = (0..d).map(|j| ds.observed_column(j)).collect();
    if let Some(j) = observed.iter().position(Vec::is_empty) {
        return Err(Error::FullyMissingColumn {
            col: j,
            name: ds.column_names()[j].clone(),
        });
    }
    let source: Vec<usize> = if n_tilde == n {
        (0..n).collect()
    } else {
        (0..n_tilde).map(|_| rng.random_range(0..n)).collect()
    };
    let values = ds.raw_values();
    let mut particles = Array2::zeros((n_tilde, d));
    for (p, &i) in source.iter().enumerate() {
        for j in 0..d {
            particles[[p, j]] = if ds.is_missing(i, j) {
                let pool = &observed[j];
                pool[rng.random_range(0..pool.len())]
            } else {
                values[[i, j]]
            };
        }
    }
    Ok(ParticleEnsemble { particles, step: 0 })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Advances every particle by `eta` times its velocity, all velocities being
/// evaluated against the frozen current ensemble.
pub fn step(
    ensemble: &ParticleEnsemble,
    groups: &[PatternGroup],
    params: StepParams,
) -> Result<(ParticleEnsemble, StepDiagnostics)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no pattern groups".into()));
    }
    let x = ensemble.particles.view();
    let (n_tilde, d) = x.dim();
    if let Some(g) = groups.iter().find(|g| g.pattern.d() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: g.pattern.d(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("ensemble at step {}", ensemble.step)));
    }
    let (velocities, underflow_count) =
        ensemble_velocities(groups, x, params.sigma, params.tikhonov_eps)?;

    let mut next = ensemble.particles.clone();
    let mut vel_norm_sum = 0.0;
    let mut pos_norm_sum = 0.0;
    for (mut row, v) in next.rows_mut().into_iter().zip(velocities.rows()) {
        vel_norm_sum += l2(v.as_slice().expect("standard layout"));
        pos_norm_sum += l2(row.as_slice().expect("standard layout"));
        row.scaled_add(params.eta, &v);
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "update at step {} produced a non-finite particle",
            ensemble.step
        )));
    }
    let grad_norm = vel_norm_sum / n_tilde as f64;
    let pos_norm = pos_norm_sum / n_tilde as f64;
    let rho = if pos_norm > 0.0 {
        grad_norm / pos_norm
    } else if grad_norm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok((
        ParticleEnsemble {
            particles: next,
            step: ensemble.step + 1,
        },
        StepDiagnostics {
            rho,
            grad_norm,
            underflow_count,
        },
    ))
}

/// Runs the full generation pipeline on a masked dataset.
///
/// Standardize (optional), initialize from column marginals, resolve σ, then
/// iterate [`step`] for at most `steps` iterations. The run stops after the
/// first step whose relative change falls below `early_stop_eps`; the step
/// size is halved for all later steps whenever the mean velocity norm grows.
pub fn run(ds: &MaskedDataset, config: &FlowConfig) -> Result<FlowOutput> {
    config.validate()?;
    let standardizer = if config.standardize {
        Some(Standardizer::fit(ds)?)
    } else {
        None
    };
    let work = match &standardizer {
        Some(s) => s.apply_dataset(ds, Direction::Forward)?,
        None => ds.clone(),
    };
    let groups = partition_by_pattern(&work);
    if groups.is_empty() {
        return Err(Error::InvalidArgument("every row is fully missing".into()));
    }
    let n_tilde = config.n_tilde.unwrap_or(ds.nrows());
    let mut init_rng = rng::stream(config.seed, Stream::Initialization);
    let mut ensemble = initialize_marginal(&work, n_tilde, &mut init_rng)?;

    let sigma = match config.sigma {
        SigmaChoice::Fixed(b) => b,
        SigmaChoice::MedianHeuristic => median_heuristic(ensemble.particles.view(), config.seed)?,
    };

    let to_original = |x: &Array2<f64>| -> Result<Array2<f64>> {
        match &standardizer {
            Some(s) => s.apply_matrix(x.view(), Direction::Inverse),
            None => Ok(x.clone()),
        }
    };

    let mut report = FlowReport {
        eta_history: vec![(0, config.eta)],
        sigma: sigma.sigma(),
        ..FlowReport::default()
    };
    let mut snapshots = Vec::new();
    if config.trace {
        snapshots.push(Snapshot {
            step: 0,
            particles: to_original(&ensemble.particles)?,
        });
    }

    let mut eta = config.eta;
    let mut prev_grad: Option<f64> = None;
    for t in 0..config.steps {
        let params = StepParams {
            eta,
            sigma,
            tikhonov_eps: config.tikhonov_eps,
        };
        let (next, diag) = match step(&ensemble, &groups, params) {
            Ok(r) => r,
            Err(e @ (Error::NonFinite(_) | Error::Singular { .. })) => {
                return Err(Error::FlowAborted {
                    step: t,
                    reason: e.to_string(),
                    report: Box::new(report),
                });
            }
            Err(e) => return Err(e),
        };
        ensemble = next;
        report.steps_run += 1;
        report.relative_change_history.push(diag.rho);
        report.grad_norm_history.push(diag.grad_norm);
        report.kernel_underflow_count += diag.underflow_count;
        if config.trace {
            report.trace.push(TraceRecord {
                step: t,
                rho: diag.rho,
                grad_norm: diag.grad_norm,
                eta,
            });
            if ensemble.step % config.trace_every == 0 {
                snapshots.push(Snapshot {
                    step: ensemble.step,
                    particles: to_original(&ensemble.particles)?,
                });
            }
        }
        if diag.rho < config.early_stop_eps {
            report.stopped_early = true;
            break;
        }
        if prev_grad.is_some_and(|g| diag.grad_norm > g) {
            eta *= 0.5;
            report.eta_history.push((t + 1, eta));
        }
        prev_grad = Some(diag.grad_norm);
    }

    let generated = to_original(&ensemble.particles)?;
    if config.trace && snapshots.last().is_none_or(|s| s.step != ensemble.step) {
        snapshots.push(Snapshot {
            step: ensemble.step,
            particles: generated.clone(),
        });
    }
    Ok(FlowOutput {
        generated,
        report,
        snapshots,
    })
}

/// Standardized energy distance between each snapshot and a complete held-out sample.
pub fn objective_trace(snapshots: &[Snapshot], heldout: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    snapshots
        .iter()
        .map(|s| standardized_energy(s.particles.view(), heldout).map(|r| r.e2))
        .collect()
}

/// Mean absolute per-coordinate difference between two equally shaped matrices.
pub fn mean_abs_displacement(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    total / a.len() as f64
}

/// Reorders ensemble rows (used to check that particle order does not matter).
pub fn permute_rows(x: ArrayView2<'_, f64>, perm: &[usize]) -> Array2<f64> {
    x.select(Axis(0), perm)
}
