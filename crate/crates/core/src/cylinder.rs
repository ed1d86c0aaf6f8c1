//! Backward nested evaluation of cylindrical payoffs.
//!
//! A payoff `xi = phi(D_1, ..., D_n)` over a partition is evaluated stage by
//! stage: the stage-n grid samples `phi`, and each earlier stage solves the
//! nonlinear heat equation in the next increment variable, one solve per
//! tensor-grid node of the observed prefix. Stage 0 is the scalar expectation,
//! intermediate stages are the conditional-expectation surfaces, and the
//! per-interval value slabs extend the conditional process to times between
//! partition points.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gpde::{solve_gheat, GridFunction, SolverConfig, ValueSlab};
use crate::model::{PayoffExpr, TimePartition, VolatilityBand};

/// Tensor-grid layout for the conditional stages.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StageConfig {
    /// Odd node count per increment axis.
    pub points_per_axis: usize,
    /// Axis half-width in units of `sigma_max sqrt(increment duration)`.
    pub half_width_scale: f64,
    /// Hard cap on the number of increments (tensor grids grow geometrically).
    pub max_increments: usize,
    /// Retain the per-interval value slabs needed by path-level reads.
    pub keep_slabs: bool,
    /// Upper bound on retained slab memory.
    pub slab_budget_bytes: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            points_per_axis: 61,
            half_width_scale: 6.0,
            max_increments: 3,
            keep_slabs: true,
            slab_budget_bytes: 3 << 30,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_axis < 3 || self.points_per_axis.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "stage points_per_axis must be odd and >= 3, got {}",
                self.points_per_axis
            )));
        }
        if self.half_width_scale.is_nan() || self.half_width_scale <= 0.0 {
            return Err(Error::InvalidInput(
                "stage half_width_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// A copy with roughly halved node spacing on every axis.
    pub fn refined(&self) -> Self {
        Self {
            points_per_axis: 2 * (self.points_per_axis - 1) + 1,
            ..*self
        }
    }
}

/// One increment axis of a stage tensor grid.
#[derive(Debug, Clone, Copy)]
pub struct StageAxis {
    pub half_width: f64,
    pub points: usize,
}

impl StageAxis {
    fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points - 1) as f64
    }

    fn coord(&self, idx: usize) -> f64 {
        -self.half_width + idx as f64 * self.spacing()
    }

    /// Cell index and local weight; strict mode errors outside the axis.
    fn locate(&self, x: f64, strict: bool) -> Result<(usize, f64)> {
        if strict && x.abs() > self.half_width {
            return Err(Error::OutOfDomain(format!(
                "|{x}| beyond stage half-width {}",
                self.half_width
            )));
        }
        let s = (x + self.half_width) / self.spacing();
        let cell = s.floor().clamp(0.0, (self.points - 2) as f64);
        // Weight left unclamped outside the axis: linear extension from the edge cell.
        Ok((cell as usize, s - cell))
    }
}

/// Values of one conditional stage on its tensor grid (row-major, first axis slowest).
#[derive(Debug, Clone)]
pub struct StageGrid {
    axes: Vec<StageAxis>,
    values: Vec<f64>,
}

impl StageGrid {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[StageAxis] {
        &self.axes
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.points).product::<usize>().max(1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coordinates of the node with row-major flat index `flat`.
    pub fn node_coords(&self, mut flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (j, axis) in self.axes.iter().enumerate().rev() {
            out[j] = axis.coord(flat % axis.points);
            flat /= axis.points;
        }
        out
    }

    fn weights(&self, coords: &[f64], strict: bool) -> Result<(Vec<(usize, f64)>, ())> {
        if coords.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                coords.len()
            )));
        }
        let mut cells = Vec::with_capacity(self.dim());
        for (axis, &x) in self.axes.iter().zip(coords) {
            cells.push(axis.locate(x, strict)?);
        }
        Ok((cells, ()))
    }

    fn combine(&self, cells: &[(usize, f64)], mut read: impl FnMut(usize) -> f64) -> f64 {
        let dim = self.dim();
        if dim == 0 {
            return read(0);
        }
        let corners = 1usize << dim;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for (j, &(cell, w)) in cells.iter().enumerate() {
                let hi = (corner >> j) & 1 == 1;
                weight *= if hi { w } else { 1.0 - w };
                flat = flat * self.axes[j].points + cell + hi as usize;
            }
            if weight != 0.0 {
                acc += weight * read(flat);
            }
        }
        acc
    }

    /// Multilinear interpolation; errors outside the grid.
    pub fn interp(&self, coords: &[f64]) -> Result<f64> {
        let (cells, ()) = self.weights(coords, true)?;
        Ok(self.combine(&cells, |flat| self.values[flat]))
    }

    /// Multilinear interpolation extended linearly beyond the edges.
    pub fn interp_extrapolate(&self, coords: &[f64]) -> f64 {
        let (cells, ()) = self
            .weights(coords, false)
            .expect("coordinate arity checked by caller");
        self.combine(&cells, |flat| self.values[flat])
    }
}

/// Output of [`backward_eval`]: stage grids `psi_0 ..= psi_n` plus the
/// per-interval slab families realizing the conditional process.
pub struct ConditionalSurface {
    partition: TimePartition,
    band: VolatilityBand,
    solver: SolverConfig,
    stage_cfg: StageConfig,
    growth_degree: u32,
    stages: Vec<StageGrid>,
    /// `slabs[i]` covers `[t_i, t_{i+1}]`, one slab per stage-`i` node.
    slabs: Vec<Option<Vec<ValueSlab>>>,
}

/// Interpolated solution data at one path state.
#[derive(Debug, Clone, Copy)]
pub struct SlabRead {
    pub value: f64,
    pub slope: f64,
    pub curvature: f64,
}

impl ConditionalSurface {
    pub fn partition(&self) -> &TimePartition {
        &self.partition
    }

    pub fn band(&self) -> &VolatilityBand {
        &self.band
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn stage_config(&self) -> &StageConfig {
        &self.stage_cfg
    }

    pub fn growth_degree(&self) -> u32 {
        self.growth_degree
    }

    /// The scalar `psi_0`, i.e. the sublinear expectation of the payoff.
    pub fn expectation(&self) -> f64 {
        self.stages[0].values()[0]
    }

    pub fn n_increments(&self) -> usize {
        self.partition.n_increments()
    }

    pub fn stage_grid(&self, i: usize) -> &StageGrid {
        &self.stages[i]
    }

    pub fn has_slabs(&self) -> bool {
        self.slabs.iter().all(|s| s.is_some())
    }

    /// Conditional expectation at stage `i` given the observed increments.
    pub fn conditional_at(&self, i: usize, observed: &[f64]) -> Result<f64> {
        if i >= self.stages.len() {
            return Err(Error::TooManyStages {
                got: i,
                max: self.n_increments(),
            });
        }
        self.stages[i].interp(observed)
    }

    /// Interpolated `(u, u_x, u_xx)` for interval `i` at prefix `(x_1..x_i)`,
    /// local time `t - t_i`, and displacement `y = B_t - B_{t_i}`.
    pub fn slab_read(&self, i: usize, prefix: &[f64], local_t: f64, y: f64) -> Result<SlabRead> {
        let slabs = self.slabs[i]
            .as_ref()
            .ok_or_else(|| Error::MissingSlabs(format!("interval {i} was built without slabs")))?;
        let grid = &self.stages[i];
        let (cells, ()) = grid.weights(prefix, true)?;
        let mut value = 0.0;
        let mut slope = 0.0;
        let mut curvature = 0.0;
        let dim = grid.dim();
        let corners = 1usize << dim;
        for corner in 0..corners {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for (j, &(cell, w)) in cells.iter().enumerate() {
                let hi = (corner >> j) & 1 == 1;
                weight *= if hi { w } else { 1.0 - w };
                flat = flat * grid.axes[j].points + cell + hi as usize;
            }
            if weight == 0.0 {
                continue;
            }
            let (u, ux, uxx) = slabs[flat].derivatives_at(local_t, y)?;
            value += weight * u;
            slope += weight * ux;
            curvature += weight * uxx;
        }
        Ok(SlabRead {
            value,
            slope,
            curvature,
        })
    }

    /// Slab read with every coordinate clamped into the stored domain.
    ///
    /// Used where excursions outside the grids must not fail: feedback
    /// controls (which only need a curvature sign) and norm diagnostics.
    pub fn read_clamped(&self, i: usize, prefix: &[f64], local_t: f64, y: f64) -> Result<SlabRead> {
        let slabs = self.slabs[i]
            .as_ref()
            .ok_or_else(|| Error::MissingSlabs(format!("interval {i} was built without slabs")))?;
        let grid = &self.stages[i];
        let clamped: Vec<f64> = prefix
            .iter()
            .zip(grid.axes())
            .map(|(&x, a)| x.clamp(-a.half_width, a.half_width))
            .collect();
        let (cells, ()) = grid.weights(&clamped, true)?;
        let sample = &slabs[0];
        let t = local_t.clamp(0.0, sample.duration());
        let yy = y.clamp(-sample.usable_half_width(), sample.usable_half_width());
        let mut read = SlabRead {
            value: 0.0,
            slope: 0.0,
            curvature: 0.0,
        };
        let dim = grid.dim();
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for (j, &(cell, w)) in cells.iter().enumerate() {
                let hi = (corner >> j) & 1 == 1;
                weight *= if hi { w } else { 1.0 - w };
                flat = flat * grid.axes[j].points + cell + hi as usize;
            }
            if weight == 0.0 {
                continue;
            }
            let (u, ux, uxx) = slabs[flat].derivatives_at(t, yy)?;
            read.value += weight * u;
            read.slope += weight * ux;
            read.curvature += weight * uxx;
        }
        Ok(read)
    }

    /// Step indices of the partition points on a uniform path grid, checking
    /// that the path grid refines the partition.
    pub fn partition_steps(&self, n_steps: usize, dt: f64) -> Result<Vec<usize>> {
        let horizon = self.partition.horizon();
        let scale = horizon.max(1.0);
        if ((n_steps as f64) * dt - horizon).abs() > 1e-9 * scale {
            return Err(Error::ShapeMismatch(format!(
                "path grid spans {} but the partition horizon is {horizon}",
                n_steps as f64 * dt
            )));
        }
        self.partition
            .times()
            .iter()
            .map(|&t| {
                let k = (t / dt).round();
                if (k * dt - t).abs() > 1e-9 * scale {
                    return Err(Error::ShapeMismatch(format!(
                        "partition point {t} does not lie on the path grid (dt = {dt})"
                    )));
                }
                Ok(k as usize)
            })
            .collect()
    }

    /// Interpolated `(u, u_x, u_xx)` at every step of one simulated path.
    ///
    /// `b_path[k]` is the path level at `t = k dt`. Fails with `OutOfDomain`
    /// when the path leaves the stored grids; callers exclude and count such
    /// paths.
    pub fn reads_along_path(&self, b_path: &[f64], dt: f64) -> Result<Vec<SlabRead>> {
        let n_steps = b_path.len() - 1;
        let marks = self.partition_steps(n_steps, dt)?;
        let n = self.n_increments();
        let mut prefix: Vec<f64> = Vec::with_capacity(n);
        let mut stage = 0usize;
        let mut out = Vec::with_capacity(b_path.len());
        for (k, &b) in b_path.iter().enumerate() {
            while stage + 1 < n && k >= marks[stage + 1] {
                prefix.push(b_path[marks[stage + 1]] - b_path[marks[stage]]);
                stage += 1;
            }
            let local_t = (k - marks[stage]) as f64 * dt;
            let y = b - b_path[marks[stage]];
            out.push(self.slab_read(stage, &prefix, local_t, y)?);
        }
        Ok(out)
    }

    /// The conditional process along one simulated path.
    pub fn conditional_process(&self, b_path: &[f64], dt: f64) -> Result<Vec<f64>> {
        Ok(self
            .reads_along_path(b_path, dt)?
            .into_iter()
            .map(|r| r.value)
            .collect())
    }
}

fn stage_axes(
    partition: &TimePartition,
    band: &VolatilityBand,
    cfg: &StageConfig,
) -> Vec<StageAxis> {
    (1..=partition.n_increments())
        .map(|j| StageAxis {
            half_width: cfg.half_width_scale
                * band.sigma_max()
                * partition.increment_duration(j).sqrt(),
            points: cfg.points_per_axis,
        })
        .collect()
}

/// Evaluate a cylindrical payoff given as a plain function of the increments.
///
/// `growth_degree` sizes the solver domains exactly as for [`PayoffExpr`]s.
pub fn backward_eval_fn(
    payoff: &(dyn Fn(&[f64]) -> f64 + Sync),
    growth_degree: u32,
    partition: &TimePartition,
    band: &VolatilityBand,
    solver: &SolverConfig,
    stage_cfg: &StageConfig,
) -> Result<ConditionalSurface> {
    solver.validate()?;
    stage_cfg.validate()?;
    let n = partition.n_increments();
    if n > stage_cfg.max_increments {
        return Err(Error::TooManyStages {
            got: n,
            max: stage_cfg.max_increments,
        });
    }

    let axes = stage_axes(partition, band, stage_cfg);

    // Terminal stage: the payoff sampled on its tensor grid.
    let mut stages: Vec<Option<StageGrid>> = vec![None; n + 1];
    let mut slabs: Vec<Option<Vec<ValueSlab>>> = (0..n).map(|_| None).collect();
    {
        let grid = StageGrid {
            axes: axes.clone(),
            values: Vec::new(),
        };
        let count = grid.node_count();
        let values: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|flat| payoff(&grid.node_coords(flat)))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("payoff values on the stage grid".into()));
        }
        stages[n] = Some(StageGrid {
            axes: axes.clone(),
            values,
        });
    }

    for i in (0..n).rev() {
        let tau = partition.increment_duration(i + 1);
        let half_width = solver.resolved_half_width(band, tau, growth_degree);
        let prefix_axes: Vec<StageAxis> = axes[..i].to_vec();
        let prefix_grid = StageGrid {
            axes: prefix_axes.clone(),
            values: Vec::new(),
        };
        let count = prefix_grid.node_count();

        let next_stage = stages[i + 1].take().expect("later stage built first");
        let keep = stage_cfg.keep_slabs;
        if keep {
            // Rough projection of retained memory before launching the solves.
            let dx = 2.0 * half_width / (solver.nx - 1) as f64;
            let dt = solver.cfl_factor * dx * dx / band.var_max();
            let slices = (tau / dt).ceil() as usize + 1;
            let projected = count * slices * solver.nx * 3 * std::mem::size_of::<f64>();
            if projected > stage_cfg.slab_budget_bytes {
                return Err(Error::InvalidInput(format!(
                    "retaining interval-{i} slabs needs ~{} MiB (budget {} MiB); \
                     disable keep_slabs or coarsen the grids",
                    projected >> 20,
                    stage_cfg.slab_budget_bytes >> 20
                )));
            }
        }

        let solved: Result<Vec<(f64, Option<ValueSlab>)>> = (0..count)
            .into_par_iter()
            .map(|flat| {
                let prefix = prefix_grid.node_coords(flat);
                let mut point = prefix.clone();
                point.push(0.0);
                let last = point.len() - 1;
                let terminal = GridFunction::sample(half_width, solver.nx, |y| {
                    point_value(payoff, &next_stage, i + 1 == n, &point[..last], y)
                })?;
                let slab = solve_gheat(&terminal, tau, band, solver)?;
                let value = slab.initial_center();
                Ok((value, keep.then_some(slab)))
            })
            .collect();
        let solved = solved?;

        let values: Vec<f64> = solved.iter().map(|(v, _)| *v).collect();
        if keep {
            slabs[i] = Some(solved.into_iter().map(|(_, s)| s.unwrap()).collect());
        }
        stages[i] = Some(StageGrid {
            axes: prefix_axes,
            values,
        });
        stages[i + 1] = Some(next_stage);
    }

    Ok(ConditionalSurface {
        partition: partition.clone(),
        band: *band,
        solver: *solver,
        stage_cfg: *stage_cfg,
        growth_degree,
        stages: stages.into_iter().map(Option::unwrap).collect(),
        slabs,
    })
}

fn point_value(
    payoff: &(dyn Fn(&[f64]) -> f64 + Sync),
    next_stage: &StageGrid,
    next_is_terminal: bool,
    prefix: &[f64],
    y: f64,
) -> f64 {
    let mut point = Vec::with_capacity(prefix.len() + 1);
    point.extend_from_slice(prefix);
    point.push(y);
    if next_is_terminal {
        // The payoff itself is available: sample it exactly instead of
        // interpolating the stored grid.
        payoff(&point)
    } else {
        next_stage.interp_extrapolate(&point)
    }
}

/// Backward nested evaluation of a parsed payoff.
pub fn backward_eval(
    payoff: &PayoffExpr,
    band: &VolatilityBand,
    solver: &SolverConfig,
    stage_cfg: &StageConfig,
) -> Result<ConditionalSurface> {
    backward_eval_fn(
        &|x: &[f64]| payoff.eval(x),
        payoff.growth_degree(),
        payoff.partition(),
        band,
        solver,
        stage_cfg,
    )
}

/// The expectation extrapolated over two joint (solver, stage) resolutions.
///
/// Both discretizations have leading error `O(h^2)`, so the standard
/// three-point combination removes it. Used where scalar expectations need
/// more accuracy than a single resolution provides.
pub fn expectation_refined(
    payoff: &PayoffExpr,
    band: &VolatilityBand,
    solver: &SolverConfig,
    stage_cfg: &StageConfig,
) -> Result<(f64, f64)> {
    let coarse = backward_eval(payoff, band, solver, stage_cfg)?.expectation();
    let fine = backward_eval(payoff, band, &solver.refined(), &stage_cfg.refined())?.expectation();
    let value = fine + (fine - coarse) / 3.0;
    let grid_error = (fine - coarse).abs() / 3.0;
    Ok((value, grid_error))
}
