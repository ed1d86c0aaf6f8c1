//! Versioned experiment configuration.
//!
//! Every field has a default, and the resolved configuration (defaults
//! filled in) is echoed into each report so runs are self-describing.

use serde::{Deserialize, Serialize};

use gcalc::cylinder::StageConfig;
use gcalc::gpde::{BoundaryRule, SolverConfig};
use gcalc::model::{TimePartition, VolatilityBand};
use gcalc::paths::SimParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub band: BandConfig,
    pub partition: Vec<f64>,
    pub payoffs: Vec<String>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub stage: StageSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub controls: ControlsSection,
    #[serde(default)]
    pub exponents: ExponentsSection,
    /// Checks run by `verify`: any of "martingale", "k-moment-bound",
    /// "maximal-inequality", "capacity-bound", "pair-estimates".
    #[serde(default = "default_checks")]
    pub checks: Vec<String>,
    /// Stage index and observed increments for the `conditional` command.
    #[serde(default)]
    pub conditional: Option<ConditionalSection>,
    /// Number of full decomposition paths retained per control.
    #[serde(default = "default_sample_paths")]
    pub sample_paths: usize,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_checks() -> Vec<String> {
    vec![
        "martingale".into(),
        "k-moment-bound".into(),
        "maximal-inequality".into(),
        "capacity-bound".into(),
    ]
}

fn default_sample_paths() -> usize {
    2
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub nx: usize,
    pub cfl_factor: f64,
    pub half_width: Option<f64>,
    pub boundary: BoundaryRule,
    pub richardson: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            nx: d.nx,
            cfl_factor: d.cfl_factor,
            half_width: d.half_width,
            boundary: d.boundary,
            richardson: d.richardson,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub points_per_axis: usize,
    pub half_width_scale: f64,
    pub max_increments: usize,
    pub keep_slabs: bool,
}

impl Default for StageSection {
    fn default() -> Self {
        let d = StageConfig::default();
        Self {
            points_per_axis: d.points_per_axis,
            half_width_scale: d.half_width_scale,
            max_increments: d.max_increments,
            keep_slabs: d.keep_slabs,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            n_steps: 500,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsSection {
    /// Constant controls on an even grid across the band.
    pub constants: usize,
    /// Bang-bang schedules on this many equal subintervals (all sign
    /// patterns); 0 disables schedules.
    pub schedule_intervals: usize,
    /// Include the curvature-driven bang-bang policy for each payoff.
    pub feedback: bool,
    /// Include the policy driven by the negated payoff's surface.
    pub antifeedback: bool,
}

impl Default for ControlsSection {
    fn default() -> Self {
        Self {
            constants: 5,
            schedule_intervals: 4,
            feedback: true,
            antifeedback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExponentsSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for ExponentsSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: 1.5,
            delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalSection {
    pub stage: usize,
    pub observed: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("config: cannot read {}: {e}", path.display()))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| format!("config: invalid JSON: {e}"))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "config: schema_version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation; error messages carry field paths.
    pub fn validate(&self) -> Result<(), String> {
        self.band().map_err(|e| format!("band: {e}"))?;
        let partition = self
            .time_partition()
            .map_err(|e| format!("partition: {e}"))?;
        if self.payoffs.is_empty() {
            return Err("payoffs: at least one payoff required".into());
        }
        for (i, text) in self.payoffs.iter().enumerate() {
            gcalc::model::PayoffExpr::parse(text, &partition)
                .map_err(|e| format!("payoffs[{i}] (`{text}`): {e}"))?;
        }
        self.solver_config()
            .validate()
            .map_err(|e| format!("solver: {e}"))?;
        self.stage_config()
            .validate()
            .map_err(|e| format!("stage: {e}"))?;
        if partition.n_increments() > self.stage.max_increments {
            return Err(format!(
                "partition: {} increments exceed stage.max_increments = {}",
                partition.n_increments(),
                self.stage.max_increments
            ));
        }
        if self.sim.n_paths == 0 || self.sim.n_steps == 0 {
            return Err("sim: n_paths and n_steps must be positive".into());
        }
        // Every partition point must land on the simulation grid.
        let dt = partition.horizon() / self.sim.n_steps as f64;
        for &t in partition.times() {
            let k = (t / dt).round();
            if (k * dt - t).abs() > 1e-9 * partition.horizon().max(1.0) {
                return Err(format!(
                    "sim.n_steps: partition point {t} does not lie on the \
                     simulation grid (dt = {dt})"
                ));
            }
        }
        if self.controls.constants == 0
            && self.controls.schedule_intervals == 0
            && !self.controls.feedback
            && !self.controls.antifeedback
        {
            return Err("controls: the control family is empty".into());
        }
        if self.controls.schedule_intervals > 8 {
            return Err("controls.schedule_intervals: at most 8 (2^n schedules)".into());
        }
        if let Some(c) = &self.conditional {
            if c.stage > partition.n_increments() {
                return Err(format!(
                    "conditional.stage: {} exceeds the number of increments {}",
                    c.stage,
                    partition.n_increments()
                ));
            }
            if c.observed.len() != c.stage {
                return Err(format!(
                    "conditional.observed: expected {} values for stage {}, got {}",
                    c.stage,
                    c.stage,
                    c.observed.len()
                ));
            }
        }
        for check in &self.checks {
            if !matches!(
                check.as_str(),
                "martingale"
                    | "k-moment-bound"
                    | "maximal-inequality"
                    | "capacity-bound"
                    | "pair-estimates"
            ) {
                return Err(format!("checks: unknown check `{check}`"));
            }
        }
        Ok(())
    }

    pub fn band(&self) -> gcalc::Result<VolatilityBand> {
        VolatilityBand::new(self.band.sigma_min, self.band.sigma_max)
    }

    pub fn time_partition(&self) -> gcalc::Result<TimePartition> {
        TimePartition::new(self.partition.clone())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            nx: self.solver.nx,
            cfl_factor: self.solver.cfl_factor,
            half_width: self.solver.half_width,
            boundary: self.solver.boundary,
            richardson: self.solver.richardson,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            points_per_axis: self.stage.points_per_axis,
            half_width_scale: self.stage.half_width_scale,
            max_increments: self.stage.max_increments,
            keep_slabs: self.stage.keep_slabs,
            ..StageConfig::default()
        }
    }

    pub fn sim_params(&self, horizon: f64) -> SimParams {
        SimParams {
            n_paths: self.sim.n_paths,
            n_steps: self.sim.n_steps,
            horizon,
            seed: self.sim.seed,
        }
    }
}
