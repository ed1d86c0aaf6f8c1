//! Measure-family side of the calculus: volatility controls, path
//! simulation, stochastic integrals, and supremum-over-controls estimators.
//!
//! Every admissible law drives the canonical path by `dB = sigma dW` with
//! `sigma` valued in the band, so expectations under the sublinear operator
//! are approached from below by maximizing sample means over a finite family
//! of controls. The feedback (bang-bang) control reads the curvature of a
//! solved conditional surface and attains the supremum for cylindrical
//! payoffs; constant and scheduled controls quantify the gap.

pub mod rng;

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::cylinder::ConditionalSurface;
use crate::error::{Error, Result};
use crate::model::VolatilityBand;

/// Fixed reduction block: per-block sums are computed sequentially and blocks
/// are folded in index order, so results do not depend on the thread count.
const REDUCE_BLOCK: usize = 4096;

/// Allowed fraction of paths excluded for leaving stored grid domains.
pub const EXCLUDED_PATH_LIMIT: f64 = 1e-3;

/// Simulation geometry and seed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimParams {
    pub n_paths: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl SimParams {
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(Error::InvalidInput(
                "n_paths and n_steps must be positive".into(),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// One admissible volatility policy with values in the band.
#[derive(Clone)]
pub enum VolatilityControl {
    /// `sigma(t) = sigma` throughout.
    Constant(f64),
    /// Piecewise constant on equal subintervals of `[0, T]`.
    Schedule(Vec<f64>),
    /// Bang-bang policy: `sigma_max` where the interpolated curvature of the
    /// surface is nonnegative, `sigma_min` otherwise.
    Feedback(Arc<ConditionalSurface>),
}

impl VolatilityControl {
    fn validate(&self, band: &VolatilityBand) -> Result<()> {
        let check = |sigma: f64| -> Result<()> {
            if !band.contains_sigma(sigma) {
                return Err(Error::InvalidInput(format!(
                    "control volatility {sigma} outside band [{}, {}]",
                    band.sigma_min(),
                    band.sigma_max()
                )));
            }
            Ok(())
        };
        match self {
            Self::Constant(sigma) => check(*sigma),
            Self::Schedule(sigmas) => {
                if sigmas.is_empty() {
                    return Err(Error::InvalidInput("empty volatility schedule".into()));
                }
                sigmas.iter().try_for_each(|&s| check(s))
            }
            Self::Feedback(surface) => {
                if !surface.has_slabs() {
                    return Err(Error::MissingSlabs(
                        "feedback control needs a surface built with keep_slabs".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// A labeled control inside a family; the index doubles as the RNG stream id.
#[derive(Clone)]
pub struct ControlEntry {
    pub label: String,
    pub control: VolatilityControl,
}

/// Finite family of controls over which estimators take their maximum.
#[derive(Clone, Default)]
pub struct ControlSet {
    entries: Vec<ControlEntry>,
}

impl ControlSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, control: VolatilityControl) {
        self.entries.push(ControlEntry {
            label: label.into(),
            control,
        });
    }

    pub fn entries(&self) -> &[ControlEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `count` constant controls on an even grid across the band.
    pub fn with_constant_grid(mut self, band: &VolatilityBand, count: usize) -> Self {
        if count == 1 || band.is_degenerate() {
            self.push(
                format!("const:{}", band.sigma_max()),
                VolatilityControl::Constant(band.sigma_max()),
            );
            return self;
        }
        for i in 0..count {
            let sigma = band.sigma_min()
                + (band.sigma_max() - band.sigma_min()) * i as f64 / (count - 1) as f64;
            self.push(format!("const:{sigma}"), VolatilityControl::Constant(sigma));
        }
        self
    }

    /// Every bang-bang schedule on `intervals` equal subintervals.
    pub fn with_bang_bang_schedules(mut self, band: &VolatilityBand, intervals: usize) -> Self {
        if band.is_degenerate() || intervals == 0 {
            return self;
        }
        for mask in 0..(1u32 << intervals) {
            let sigmas: Vec<f64> = (0..intervals)
                .map(|j| {
                    if (mask >> j) & 1 == 1 {
                        band.sigma_max()
                    } else {
                        band.sigma_min()
                    }
                })
                .collect();
            let tag: String = (0..intervals)
                .map(|j| if (mask >> j) & 1 == 1 { '+' } else { '-' })
                .collect();
            self.push(format!("sched:{tag}"), VolatilityControl::Schedule(sigmas));
        }
        self
    }

    pub fn with_feedback(
        mut self,
        label: impl Into<String>,
        surface: Arc<ConditionalSurface>,
    ) -> Self {
        self.push(label, VolatilityControl::Feedback(surface));
        self
    }
}

/// Simulated paths of the canonical process and its quadratic variation
/// under one control, with full seed provenance.
///
/// Per path, `qv` increments are exactly `(applied sigma)^2 dt`, so the
/// quadratic-variation density stays in the variance band by construction.
pub struct PathBundle {
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    seed: u64,
    control_id: u64,
    control_label: String,
    b: Vec<f64>,
    qv: Vec<f64>,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn control_id(&self) -> u64 {
        self.control_id
    }

    pub fn control_label(&self) -> &str {
        &self.control_label
    }

    pub fn path_b(&self, p: usize) -> &[f64] {
        let stride = self.n_steps + 1;
        &self.b[p * stride..(p + 1) * stride]
    }

    pub fn path_qv(&self, p: usize) -> &[f64] {
        let stride = self.n_steps + 1;
        &self.qv[p * stride..(p + 1) * stride]
    }

    /// One row per path: terminal level, terminal quadratic variation, and an
    /// optional per-path functional value.
    pub fn write_csv<W: Write>(&self, values: Option<&[f64]>, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "path,terminal_b,terminal_qv,value")?;
        for p in 0..self.n_paths {
            let b = self.path_b(p)[self.n_steps];
            let qv = self.path_qv(p)[self.n_steps];
            match values {
                Some(v) => writeln!(out, "{p},{b},{qv},{}", v[p])?,
                None => writeln!(out, "{p},{b},{qv},")?,
            }
        }
        Ok(())
    }
}

/// Euler simulation of `dB = sigma dW` under one control.
///
/// The normal draw for `(path, step)` comes from the counter generator keyed
/// by `(seed, control_id, path, step)`, so bundles are reproducible bit for
/// bit regardless of the parallel schedule.
pub fn simulate(
    entry: &ControlEntry,
    control_id: u64,
    band: &VolatilityBand,
    params: &SimParams,
) -> Result<PathBundle> {
    params.validate()?;
    entry.control.validate(band)?;
    let dt = params.dt();
    let sqrt_dt = dt.sqrt();
    let stride = params.n_steps + 1;

    // Partition marks for feedback prefix tracking, validated once.
    let feedback_marks = match &entry.control {
        VolatilityControl::Feedback(surface) => Some(surface.partition_steps(params.n_steps, dt)?),
        _ => None,
    };

    let mut b = vec![0.0f64; params.n_paths * stride];
    let mut qv = vec![0.0f64; params.n_paths * stride];

    b.par_chunks_mut(stride)
        .zip(qv.par_chunks_mut(stride))
        .enumerate()
        .try_for_each(|(p, (bp, qp))| -> Result<()> {
            let mut stage = 0usize;
            let mut prefix: Vec<f64> = Vec::new();
            for k in 0..params.n_steps {
                let sigma = match &entry.control {
                    VolatilityControl::Constant(s) => *s,
                    VolatilityControl::Schedule(sigmas) => {
                        let idx = (k * sigmas.len()) / params.n_steps;
                        sigmas[idx]
                    }
                    VolatilityControl::Feedback(surface) => {
                        let marks = feedback_marks.as_ref().unwrap();
                        let n = surface.n_increments();
                        while stage + 1 < n && k >= marks[stage + 1] {
                            prefix.push(bp[marks[stage + 1]] - bp[marks[stage]]);
                            stage += 1;
                        }
                        let local_t = (k - marks[stage]) as f64 * dt;
                        let y = bp[k] - bp[marks[stage]];
                        let curv = surface.read_clamped(stage, &prefix, local_t, y)?.curvature;
                        if curv >= 0.0 {
                            band.sigma_max()
                        } else {
                            band.sigma_min()
                        }
                    }
                };
                let g = rng::standard_normal(params.seed, control_id, p as u64, k as u64);
                bp[k + 1] = bp[k] + sigma * sqrt_dt * g;
                qp[k + 1] = qp[k] + sigma * sigma * dt;
            }
            Ok(())
        })?;

    Ok(PathBundle {
        n_paths: params.n_paths,
        n_steps: params.n_steps,
        dt,
        seed: params.seed,
        control_id,
        control_label: entry.label.clone(),
        b,
        qv,
    })
}

/// Adapted step integrand: the value for step `k` sees the path history
/// through `k` only (enforced by slicing).
pub trait Integrand: Sync {
    fn at(&self, b_hist: &[f64], qv_hist: &[f64], dt: f64) -> f64;
}

impl<F: Fn(&[f64], &[f64], f64) -> f64 + Sync> Integrand for F {
    fn at(&self, b_hist: &[f64], qv_hist: &[f64], dt: f64) -> f64 {
        self(b_hist, qv_hist, dt)
    }
}

/// Left-endpoint stochastic integral `sum_k eta_k (B_{k+1} - B_k)` per path.
pub fn ito_integral(bundle: &PathBundle, integrand: &dyn Integrand) -> Vec<f64> {
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let b = bundle.path_b(p);
            let qv = bundle.path_qv(p);
            let mut acc = 0.0;
            for k in 0..bundle.n_steps {
                acc += integrand.at(&b[..=k], &qv[..=k], bundle.dt) * (b[k + 1] - b[k]);
            }
            acc
        })
        .collect()
}

/// Integral against the quadratic variation, `sum_k eta_k (qv_{k+1} - qv_k)`.
pub fn qv_integral(bundle: &PathBundle, integrand: &dyn Integrand) -> Vec<f64> {
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let b = bundle.path_b(p);
            let qv = bundle.path_qv(p);
            let mut acc = 0.0;
            for k in 0..bundle.n_steps {
                acc += integrand.at(&b[..=k], &qv[..=k], bundle.dt) * (qv[k + 1] - qv[k]);
            }
            acc
        })
        .collect()
}

/// Per-path evaluator; `Err(OutOfDomain)` excludes the path from the average.
pub trait PathFunctional: Sync {
    fn eval(&self, b: &[f64], qv: &[f64], dt: f64) -> Result<f64>;
}

impl<F: Fn(&[f64], &[f64], f64) -> Result<f64> + Sync> PathFunctional for F {
    fn eval(&self, b: &[f64], qv: &[f64], dt: f64) -> Result<f64> {
        self(b, qv, dt)
    }
}

/// Sample statistics of one control's estimate.
#[derive(Debug, Clone, Serialize)]
pub struct ControlEstimate {
    pub label: String,
    pub mean: f64,
    pub std_error: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

/// Maximum of per-control sample means: a statistical lower bound (up to
/// discretization bias) for the sublinear expectation of the functional.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub value: f64,
    pub std_error: f64,
    pub best_control: String,
    pub n_controls: usize,
    pub seed: u64,
    pub excluded_fraction: f64,
    pub per_control: Vec<ControlEstimate>,
}

fn estimate_one(
    functional: &dyn PathFunctional,
    entry: &ControlEntry,
    control_id: u64,
    band: &VolatilityBand,
    params: &SimParams,
) -> Result<ControlEstimate> {
    let bundle = simulate(entry, control_id, band, params)?;
    // Fixed-size blocks, folded in index order: thread-count independent.
    let blocks: Vec<(f64, f64, usize, usize)> = (0..bundle.n_paths)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_BLOCK)
        .map(|chunk| {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            let mut used = 0usize;
            let mut excluded = 0usize;
            for &p in chunk {
                match functional.eval(bundle.path_b(p), bundle.path_qv(p), bundle.dt) {
                    Ok(v) => {
                        sum += v;
                        sumsq += v * v;
                        used += 1;
                    }
                    Err(Error::OutOfDomain(_)) => excluded += 1,
                    Err(other) => return Err(other),
                }
            }
            Ok((sum, sumsq, used, excluded))
        })
        .collect::<Result<_>>()?;

    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (s, s2, u, e) in blocks {
        sum += s;
        sumsq += s2;
        used += u;
        excluded += e;
    }
    if used == 0 {
        return Err(Error::ExcludedPaths {
            fraction: 1.0,
            limit: EXCLUDED_PATH_LIMIT,
        });
    }
    let mean = sum / used as f64;
    let var = if used > 1 {
        ((sumsq - sum * sum / used as f64) / (used - 1) as f64).max(0.0)
    } else {
        0.0
    };
    Ok(ControlEstimate {
        label: entry.label.clone(),
        mean,
        std_error: (var / used as f64).sqrt(),
        n_used: used,
        n_excluded: excluded,
    })
}

/// Estimate `sup_P E_P[functional]` over the control family.
///
/// Controls run sequentially (one bundle in memory at a time); paths within a
/// control run in parallel.
pub fn sup_expect(
    functional: &dyn PathFunctional,
    controls: &ControlSet,
    band: &VolatilityBand,
    params: &SimParams,
) -> Result<EstimateReport> {
    if controls.is_empty() {
        return Err(Error::InvalidInput("empty control set".into()));
    }
    let mut per_control = Vec::with_capacity(controls.len());
    for (id, entry) in controls.entries().iter().enumerate() {
        per_control.push(estimate_one(functional, entry, id as u64, band, params)?);
    }
    let mut best = 0usize;
    for (i, est) in per_control.iter().enumerate() {
        if est.mean > per_control[best].mean {
            best = i;
        }
    }
    let total_excluded: usize = per_control.iter().map(|e| e.n_excluded).sum();
    let total = controls.len() * params.n_paths;
    Ok(EstimateReport {
        value: per_control[best].mean,
        std_error: per_control[best].std_error,
        best_control: per_control[best].label.clone(),
        n_controls: controls.len(),
        seed: params.seed,
        excluded_fraction: total_excluded as f64 / total as f64,
        per_control,
    })
}

/// Estimate the running-maximum evaluation `E[sup_t E_t(xi)]` for the payoff
/// held by `surface`.
///
/// The per-path functional is the maximum over the simulation grid of the
/// conditional process; paths leaving the stored domains are excluded, and
/// the excluded fraction must stay below [`EXCLUDED_PATH_LIMIT`].
pub fn gevaluation(
    surface: &ConditionalSurface,
    controls: &ControlSet,
    band: &VolatilityBand,
    params: &SimParams,
) -> Result<EstimateReport> {
    let functional = |b: &[f64], _qv: &[f64], dt: f64| -> Result<f64> {
        let xs = surface.conditional_process(b, dt)?;
        Ok(xs.into_iter().fold(f64::NEG_INFINITY, f64::max))
    };
    let report = sup_expect(&functional, controls, band, params)?;
    if report.excluded_fraction >= EXCLUDED_PATH_LIMIT {
        return Err(Error::ExcludedPaths {
            fraction: report.excluded_fraction,
            limit: EXCLUDED_PATH_LIMIT,
        });
    }
    Ok(report)
}

/// Path event for capacity estimation.
pub trait PathEvent: Sync {
    fn occurs(&self, b: &[f64], qv: &[f64], dt: f64) -> bool;
}

impl<F: Fn(&[f64], &[f64], f64) -> bool + Sync> PathEvent for F {
    fn occurs(&self, b: &[f64], qv: &[f64], dt: f64) -> bool {
        self(b, qv, dt)
    }
}

/// Lower bound of the capacity `sup_P P(A)` by the maximum empirical
/// frequency over the control family, with binomial standard errors.
pub fn capacity_estimate(
    event: &dyn PathEvent,
    controls: &ControlSet,
    band: &VolatilityBand,
    params: &SimParams,
) -> Result<EstimateReport> {
    let functional = |b: &[f64], qv: &[f64], dt: f64| -> Result<f64> {
        Ok(if event.occurs(b, qv, dt) { 1.0 } else { 0.0 })
    };
    let mut report = sup_expect(&functional, controls, band, params)?;
    // Replace the sample-variance error with the exact binomial form.
    for est in &mut report.per_control {
        let p = est.mean;
        est.std_error = (p * (1.0 - p) / est.n_used as f64).sqrt();
    }
    let best = report
        .per_control
        .iter()
        .find(|e| e.label == report.best_control)
        .expect("best control present");
    report.std_error = best.std_error;
    Ok(report)
}

/// The integrand norm `{ sup_P E_P[(int eta^2 ds)^{p/2}] }^{1/p}`.
pub fn hp_norm(
    integrand: &dyn Integrand,
    p: f64,
    controls: &ControlSet,
    band: &VolatilityBand,
    params: &SimParams,
) -> Result<f64> {
    if p < 1.0 {
        return Err(Error::ExponentConstraint(format!(
            "hp_norm needs p >= 1, got {p}"
        )));
    }
    let functional = |b: &[f64], qv: &[f64], dt: f64| -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..b.len() - 1 {
            let eta = integrand.at(&b[..=k], &qv[..=k], dt);
            acc += eta * eta * dt;
        }
        Ok(acc.powf(p / 2.0))
    };
    let report = sup_expect(&functional, controls, band, params)?;
    Ok(report.value.powf(1.0 / p))
}
