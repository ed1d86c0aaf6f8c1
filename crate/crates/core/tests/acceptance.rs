//! Acceptance suite: one test per criterion, each ending in a printed
//! `criterion NN (...): PASS` line. Tolerances are pinned here, next to the
//! assertions they gate.
//!
//! Statistical checks run on fixed seeds, with thresholds placed several
//! standard errors away so reruns are deterministic and portable. Criteria
//! run one at a time behind a gate: two carry wall-clock budgets, so each
//! must measure the machine to itself.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use gcalc::cylinder::{
    backward_eval, backward_eval_fn, expectation_refined, ConditionalSurface, StageConfig,
};
use gcalc::decomp::{decompose, mean_uncertainty, VerifyContext};
use gcalc::gpde::{gnormal_expect, SolverConfig};
use gcalc::model::{series_constant, PayoffExpr, TimePartition, VolatilityBand};
use gcalc::paths::{
    capacity_estimate, gevaluation, ito_integral, simulate, sup_expect, ControlEntry, ControlSet,
    PathFunctional, SimParams, VolatilityControl,
};
use gcalc::Result;

const SEED: u64 = 0x5EED_CA1C;

static GATE: Mutex<()> = Mutex::new(());

fn run_alone() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn band() -> VolatilityBand {
    VolatilityBand::new(1.0, 2.0).unwrap()
}

fn partition(times: &[f64]) -> TimePartition {
    TimePartition::new(times.to_vec()).unwrap()
}

fn parse(text: &str, times: &[f64]) -> PayoffExpr {
    PayoffExpr::parse(text, &partition(times)).unwrap()
}

fn solver(nx: usize) -> SolverConfig {
    SolverConfig {
        nx,
        ..SolverConfig::default()
    }
}

fn stage(points: usize) -> StageConfig {
    StageConfig {
        points_per_axis: points,
        ..StageConfig::default()
    }
}

fn stage_light(points: usize) -> StageConfig {
    StageConfig {
        points_per_axis: points,
        keep_slabs: false,
        ..StageConfig::default()
    }
}

fn schedule(pattern: &str, band: &VolatilityBand) -> VolatilityControl {
    VolatilityControl::Schedule(
        pattern
            .chars()
            .map(|c| {
                if c == '+' {
                    band.sigma_max()
                } else {
                    band.sigma_min()
                }
            })
            .collect(),
    )
}

/// Constants, two alternating schedules, and both feedback policies.
fn family(
    band: &VolatilityBand,
    n_const: usize,
    feedback: Option<Arc<ConditionalSurface>>,
    anti: Option<Arc<ConditionalSurface>>,
) -> ControlSet {
    let mut set = ControlSet::new().with_constant_grid(band, n_const);
    set.push("sched:+-+-", schedule("+-+-", band));
    set.push("sched:-+-+", schedule("-+-+", band));
    if let Some(s) = feedback {
        set = set.with_feedback("feedback", s);
    }
    if let Some(s) = anti {
        set = set.with_feedback("antifeedback", s);
    }
    set
}

/// Terminal-payoff functional: evaluates the payoff on the path increments.
fn payoff_functional(payoff: PayoffExpr) -> impl PathFunctional {
    move |b: &[f64], _qv: &[f64], dt: f64| -> Result<f64> {
        let times = payoff.partition().times();
        let mut increments = Vec::with_capacity(times.len() - 1);
        let mut prev = 0usize;
        for t in &times[1..] {
            let k = (t / dt).round() as usize;
            increments.push(b[k] - b[prev]);
            prev = k;
        }
        Ok(payoff.eval(&increments))
    }
}

/// The payoff suite shared by criteria 2, 3, and 6: convex, concave,
/// kinked, and mixed-curvature cases; the last one spans two increments.
/// Columns: text, partition, closed-form value if known, reconstruction steps.
///
/// Mixed curvature comes from smooth quartics (curvature changes sign at
/// |x| = 1) rather than hard caps: a cap's kink produces an unresolvable
/// boundary layer in the value surface right before the horizon, which is
/// exactly what the bounded-payoff criteria (7 and 8) probe separately
/// without a pathwise reconstruction requirement. Step counts size the
/// simulation grid so the O(sqrt(dt)) residual sits several deviations
/// inside 1% of each payoff's scale; kinked payoffs need the finest grids.
fn oracle_suite() -> Vec<(&'static str, Vec<f64>, Option<f64>, usize)> {
    let sqrt_2_over_pi = (2.0 / std::f64::consts::PI).sqrt();
    vec![
        ("B(1)", vec![0.0, 1.0], Some(0.0), 8_000),
        ("B(1)^2", vec![0.0, 1.0], Some(4.0), 8_000),
        ("-(B(1)^2)", vec![0.0, 1.0], Some(-1.0), 8_000),
        ("B(1)^4", vec![0.0, 1.0], Some(48.0), 8_000),
        (
            "abs(B(1))",
            vec![0.0, 1.0],
            Some(2.0 * sqrt_2_over_pi),
            30_000,
        ),
        (
            "-(abs(B(1)))",
            vec![0.0, 1.0],
            Some(-sqrt_2_over_pi),
            30_000,
        ),
        (
            "max(B(1), 0)",
            vec![0.0, 1.0],
            Some(2.0 * 0.5 * sqrt_2_over_pi),
            30_000,
        ),
        ("B(1)^4 - 6 * B(1)^2", vec![0.0, 1.0], None, 8_000),
        ("6 * B(1)^2 - B(1)^4", vec![0.0, 1.0], None, 8_000),
        ("D(1) * D(2)", vec![0.0, 0.5, 1.0], Some(0.0), 8_000),
    ]
}

fn surfaces_for(
    payoff: &PayoffExpr,
    band: &VolatilityBand,
    solver_cfg: &SolverConfig,
    stage_cfg: &StageConfig,
) -> (Arc<ConditionalSurface>, Arc<ConditionalSurface>) {
    let surface = Arc::new(backward_eval(payoff, band, solver_cfg, stage_cfg).unwrap());
    let anti = Arc::new(backward_eval(&payoff.negated(), band, solver_cfg, stage_cfg).unwrap());
    (surface, anti)
}

// ---------------------------------------------------------------------------
// 1. Closed-form expectations through the solver.
// ---------------------------------------------------------------------------
#[test]
fn c01_closed_form_expectations() {
    let _alone = run_alone();
    let band = band();
    let cfg = SolverConfig {
        richardson: true,
        ..solver(401)
    };
    let cases = [("B(1)^2", 4.0), ("-(B(1)^2)", -1.0), ("B(1)^4", 48.0)];
    for (text, exact) in cases {
        let payoff = parse(text, &[0.0, 1.0]);
        let start = Instant::now();
        let (value, _grid_err) =
            expectation_refined(&payoff, &band, &cfg, &stage_light(21)).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        let rel = (value - exact).abs() / exact.abs();
        assert!(
            rel < 0.005,
            "{text}: value {value} vs {exact} (rel {rel:.2e})"
        );
        assert!(elapsed < 10.0, "{text}: took {elapsed:.2}s");
    }
    println!("criterion 01 (closed-form expectations via the solver): PASS");
}

// ---------------------------------------------------------------------------
// 2. Monte Carlo with the bang-bang feedback control agrees with the solver.
// ---------------------------------------------------------------------------
#[test]
fn c02_oracle_agreement_solver_vs_monte_carlo() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(401);
    let params = SimParams {
        n_paths: 100_000,
        n_steps: 500,
        horizon: 1.0,
        seed: SEED,
    };
    for (text, times, closed_form, _) in oracle_suite() {
        let start = Instant::now();
        let payoff = parse(text, &times);
        let stage_cfg = stage(61);
        let (pde, grid_err) =
            expectation_refined(&payoff, &band, &solver_cfg, &stage_light(61)).unwrap();
        if let Some(exact) = closed_form {
            let tol = 0.005 * exact.abs().max(1.0);
            assert!(
                (pde - exact).abs() < tol,
                "{text}: solver {pde} vs exact {exact}"
            );
        }
        let (surface, anti) = surfaces_for(&payoff, &band, &solver_cfg, &stage_cfg);
        let controls = ControlSet::new()
            .with_constant_grid(&band, 5)
            .with_bang_bang_schedules(&band, 4)
            .with_feedback("feedback", surface)
            .with_feedback("antifeedback", anti);
        let report = sup_expect(
            &payoff_functional(payoff.clone()),
            &controls,
            &band,
            &params,
        )
        .unwrap();
        let tol = (3.0 * report.std_error).max(0.01 * pde.abs().max(1.0)) + grid_err;
        assert!(
            (report.value - pde).abs() <= tol,
            "{text}: MC {} vs solver {pde} (tol {tol:.4}, best {})",
            report.value,
            report.best_control
        );
        let elapsed = start.elapsed().as_secs_f64();
        assert!(elapsed < 120.0, "{text}: took {elapsed:.1}s");
    }
    println!("criterion 02 (Monte Carlo vs solver oracle agreement, 10 payoffs): PASS");
}

// ---------------------------------------------------------------------------
// 3. Pathwise decomposition identity under every control.
// ---------------------------------------------------------------------------
#[test]
fn c03_decomposition_identity() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(401);
    let n_paths = 1_000usize;
    for (text, times, _, n_steps) in oracle_suite() {
        let payoff = parse(text, &times);
        let (surface, anti) = surfaces_for(&payoff, &band, &solver_cfg, &stage(61));
        let controls = family(&band, 3, Some(surface.clone()), Some(anti));
        // Payoff scale: largest magnitude over the +-6 sigma_max sqrt(T) range.
        let scale = surface
            .stage_grid(surface.n_increments())
            .values()
            .iter()
            .fold(1.0f64, |m, v| m.max(v.abs()));
        let tol_rec = 0.01 * scale;
        let params = SimParams {
            n_paths,
            n_steps,
            horizon: 1.0,
            seed: SEED ^ 3,
        };
        let mut min_k_mean = f64::INFINITY;
        let mut min_k_se = 0.0;
        for (id, entry) in controls.entries().iter().enumerate() {
            let bundle = simulate(entry, id as u64, &band, &params).unwrap();
            let set = decompose(&surface, &bundle, 2).unwrap();
            let ok = set
                .summaries
                .iter()
                .filter(|s| s.max_reconstruction_error <= tol_rec)
                .count();
            let frac = ok as f64 / set.summaries.len() as f64;
            assert!(
                frac >= 0.999,
                "{text} under {}: {:.4} of paths within {tol_rec:.3}",
                entry.label,
                frac
            );
            for s in &set.summaries {
                assert!(
                    s.min_k_increment >= -1e-12,
                    "{text}: dK = {}",
                    s.min_k_increment
                );
            }
            for p in &set.sample_paths {
                assert_eq!(p.k[0], 0.0, "{text}: K_0 != 0");
            }
            // The symmetric part is mean-zero under every control (both
            // orientations), the martingale property of int Z dB.
            let (m_mean, m_se) = set.mean_of(|s| s.m_terminal - s.x0);
            assert!(
                m_mean.abs() <= 3.0 * m_se + 0.005 * scale,
                "{text} under {}: symmetric part mean {m_mean} (se {m_se})",
                entry.label
            );
            let (k_mean, k_se) = set.mean_of(|s| s.k_terminal);
            if k_mean < min_k_mean {
                min_k_mean = k_mean;
                min_k_se = k_se;
            }
        }
        // -K is a martingale in the sublinear sense: the supremum over
        // controls of E(-K_T) vanishes, attained near the optimal policy.
        assert!(
            min_k_mean >= -1e-9 && min_k_mean <= 3.0 * min_k_se + 0.01 * scale,
            "{text}: min control K mean {min_k_mean} (se {min_k_se})"
        );
    }
    println!("criterion 03 (pathwise decomposition identity, K monotone): PASS");
}

// ---------------------------------------------------------------------------
// 4. Mean-uncertainty identity E(xi) + E(-xi) = E(K_T).
// ---------------------------------------------------------------------------
#[test]
fn c04_mean_uncertainty_identity() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(401);
    let params = SimParams {
        n_paths: 4_000,
        n_steps: 4_000,
        horizon: 1.0,
        seed: SEED ^ 4,
    };
    let cases = [
        ("B(1)^2", Some(3.0)),
        ("B(1)^4", Some(45.0)),
        ("abs(B(1))", Some((2.0f64 / std::f64::consts::PI).sqrt())),
        (
            "max(B(1), 0)",
            Some(0.5 * (2.0f64 / std::f64::consts::PI).sqrt()),
        ),
        ("clamp(B(1)^2, 0, 9)", None),
    ];
    for (text, closed_form) in cases {
        let payoff = parse(text, &[0.0, 1.0]);
        let mu = {
            let coarse = mean_uncertainty(&payoff, &band, &solver_cfg, &stage_light(21)).unwrap();
            let fine =
                mean_uncertainty(&payoff, &band, &solver_cfg.refined(), &stage_light(21)).unwrap();
            fine + (fine - coarse) / 3.0
        };
        if let Some(exact) = closed_form {
            assert!(
                (mu - exact).abs() < 0.01 * exact.max(0.3),
                "{text}: mu {mu} vs {exact}"
            );
        }
        let (surface, anti) = surfaces_for(&payoff, &band, &solver_cfg, &stage(61));
        let controls = family(&band, 3, Some(surface.clone()), Some(anti));
        let mut best = f64::NEG_INFINITY;
        for (id, entry) in controls.entries().iter().enumerate() {
            let bundle = simulate(entry, id as u64, &band, &params).unwrap();
            let set = decompose(&surface, &bundle, 0).unwrap();
            best = best.max(set.mean_of(|s| s.k_terminal).0);
        }
        let rel = (best - mu).abs() / mu.abs().max(0.1);
        assert!(
            rel < 0.03,
            "{text}: sup-control K mean {best} vs uncertainty {mu} ({rel:.3})"
        );
    }
    println!("criterion 04 (mean-uncertainty identity on 5 payoffs): PASS");
}

// ---------------------------------------------------------------------------
// 5. Symmetric payoffs decompose with no increasing part.
// ---------------------------------------------------------------------------
#[test]
fn c05_symmetric_representation() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(301);
    let params = SimParams {
        n_paths: 2_000,
        n_steps: 2_000,
        horizon: 1.0,
        seed: SEED ^ 5,
    };

    // xi = B_1 and the identically-zero payoff (the canonical quadratic
    // identity written as a payoff collapses to zero; its pathwise content is
    // checked in criterion 10).
    for text in ["B(1)", "B(1) - B(1)"] {
        let payoff = parse(text, &[0.0, 1.0]);
        let mu = mean_uncertainty(&payoff, &band, &solver_cfg, &stage_light(21)).unwrap();
        assert!(mu.abs() <= 1e-3, "{text}: mean uncertainty {mu}");
        let surface = Arc::new(backward_eval(&payoff, &band, &solver_cfg, &stage(41)).unwrap());
        let controls = family(&band, 2, Some(surface.clone()), None);
        for (id, entry) in controls.entries().iter().enumerate() {
            let bundle = simulate(entry, id as u64, &band, &params).unwrap();
            let set = decompose(&surface, &bundle, 1).unwrap();
            for s in &set.summaries {
                assert!(s.k_terminal.abs() <= 1e-3, "{text}: K_T = {}", s.k_terminal);
                assert!(s.max_reconstruction_error <= 1e-3, "{text}");
            }
        }
    }

    // The stochastic-integral side: M = int B dB (Z = B, eta = 0) is
    // symmetric, so the construction check holds for (Z, eta) and (-Z, -eta)
    // alike (both means vanish under every control).
    let controls = family(&band, 3, None, None);
    let ctx_solver = solver(201);
    let ctx_stage = stage_light(21);
    let ctx = VerifyContext::new(&band, &ctx_solver, &ctx_stage, &controls, &params);
    let level = |b: &[f64], _: &[f64], _: f64| *b.last().unwrap();
    let neg_level = |b: &[f64], _: &[f64], _: f64| -*b.last().unwrap();
    let zero = |_: &[f64], _: &[f64], _: f64| 0.0;
    let report = ctx
        .martingale_construction(&level, &zero, "int B dB")
        .unwrap();
    assert!(report.holds, "{report:?}");
    let report = ctx
        .martingale_construction(&neg_level, &zero, "-int B dB")
        .unwrap();
    assert!(report.holds, "{report:?}");
    println!("criterion 05 (symmetric representation, K identically zero): PASS");
}

// ---------------------------------------------------------------------------
// 6. Running-maximum norm bound (the maximal-inequality substitute).
// ---------------------------------------------------------------------------
#[test]
fn c06_doob_substitute_bound() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(301);
    let stage_cfg = stage(41);
    let params = SimParams {
        n_paths: 20_000,
        n_steps: 250,
        horizon: 1.0,
        seed: SEED ^ 6,
    };

    let c = series_constant(4.0 / 3.0, 1e-7).unwrap();
    assert!(
        c.value() >= 3.59 && c.value() <= 3.62,
        "series constant {} outside [3.59, 3.62]",
        c.value()
    );

    for (text, times, _, _) in oracle_suite() {
        let payoff = parse(text, &times);
        // Controls include the bang-bang policy for |xi| so the running
        // maximum reaches the terminal conditional value.
        let abs_payoff = payoff.abs();
        let (surface_abs, anti_abs) = surfaces_for(&abs_payoff, &band, &solver_cfg, &stage_cfg);
        let controls = family(&band, 3, Some(surface_abs), Some(anti_abs));
        let ctx = VerifyContext::new(&band, &solver_cfg, &stage_cfg, &controls, &params);
        let report = ctx.maximal_inequality(&payoff, 1.0, 1.0, 1.5).unwrap();
        assert!(report.holds, "{text}: {report:?}");
        assert_eq!(report.constants["gamma_star"], 3.0, "{text}");
        let c_used = report.constants["series_constant"];
        assert!((3.59..=3.62).contains(&c_used), "{text}: C = {c_used}");
        // Lower-bound sanity: the evaluation estimate dominates the plain
        // expectation up to noise.
        let pde_abs = report.constants["pde_abs_alpha"];
        let se = report.constants["gev_std_error"];
        assert!(
            report.lhs >= pde_abs - 3.0 * se - 0.01 * pde_abs.abs().max(1.0),
            "{text}: evaluation {} below expectation {pde_abs}",
            report.lhs
        );
    }
    println!("criterion 06 (maximal-inequality bound on 10 payoffs): PASS");
}

// ---------------------------------------------------------------------------
// 7. Moment bound for the increasing part of bounded payoffs.
// ---------------------------------------------------------------------------
#[test]
fn c07_k_moment_bound() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(401);
    let stage_cfg = stage(41);
    let params = SimParams {
        n_paths: 3_000,
        n_steps: 2_000,
        horizon: 1.0,
        seed: SEED ^ 7,
    };
    let payoffs = [
        "clamp(B(1)^2, 0, 3)",
        "clamp(abs(B(1)), 0, 2)",
        "clamp(B(1)^4, 0, 20)",
        "clamp(1 - B(1)^2, 0, 1)",
        "clamp(max(B(1), 0), 0, 1.5)",
        "clamp(B(1), -2, 2)",
    ];
    for text in payoffs {
        let payoff = parse(text, &[0.0, 1.0]);
        let (surface, anti) = surfaces_for(&payoff, &band, &solver_cfg, &stage_cfg);
        let controls = family(&band, 3, Some(surface), Some(anti));
        let ctx = VerifyContext::new(&band, &solver_cfg, &stage_cfg, &controls, &params);
        let report = ctx.k_moment_bound(&payoff, 2.0, 1.5).unwrap();
        assert!(report.holds, "{text}: {report:?}");
        assert!(
            report.lhs <= report.rhs,
            "{text}: lhs {} rhs {}",
            report.lhs,
            report.rhs
        );
    }
    println!("criterion 07 (K-moment bound on 6 bounded payoffs): PASS");
}

// ---------------------------------------------------------------------------
// 8. Capacity-equivalence proof inequality on bump payoffs.
// ---------------------------------------------------------------------------
#[test]
fn c08_capacity_equivalence_inequality() {
    let _alone = run_alone();
    let band = band();
    let solver_cfg = solver(301);
    let stage_cfg = stage(41);
    let params = SimParams {
        n_paths: 10_000,
        n_steps: 250,
        horizon: 1.0,
        seed: SEED ^ 8,
    };
    let bumps = [
        "clamp(1 - B(1)^2, 0, 1)",
        "clamp(1 - abs(B(1)), 0, 1)",
        "clamp(B(1)^2, 0, 1)",
        "clamp(0.5 + B(1), 0, 1)",
        "clamp(abs(B(1)) - 0.5, 0, 1)",
    ];
    // The constant assembled from the criterion-6 ingredients.
    let gamma = 1.5f64;
    let c_series = series_constant(2.0 / gamma, 1e-7).unwrap().value();
    let expected_c = (3.0 * (1.0 + 14f64.powf(1.0 / gamma) * c_series)).powi(2);
    for text in bumps {
        let payoff = parse(text, &[0.0, 1.0]);
        let (surface, anti) = surfaces_for(&payoff, &band, &solver_cfg, &stage_cfg);
        let controls = family(&band, 3, Some(surface), Some(anti));
        let ctx = VerifyContext::new(&band, &solver_cfg, &stage_cfg, &controls, &params);
        let report = ctx.capacity_bound(&payoff, gamma).unwrap();
        assert!(report.holds, "{text}: {report:?}");
        let c_used = report.constants["capacity_constant"];
        assert!(
            (c_used - expected_c).abs() < 1e-3 * expected_c,
            "{text}: constant {c_used} vs {expected_c}"
        );
    }
    println!("criterion 08 (capacity-equivalence inequality on 5 bumps): PASS");
}

// ---------------------------------------------------------------------------
// 9. Conditional-expectation property suite and the scaling identity.
// ---------------------------------------------------------------------------
#[test]
fn c09_conditional_property_suite() {
    let _alone = run_alone();
    let band = band();
    const REL_TOL: f64 = 1e-3;

    // Deterministic pseudo-random coefficients.
    let mut state = SEED ^ 9;
    let mut unit = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };

    // (i) Monotonicity: adding a nonnegative payoff raises every stage node.
    for _ in 0..3 {
        let (a, b) = (1.0 + unit(), 2.0 * unit());
        let times = [0.0, 0.5, 1.0];
        let base = parse(&format!("{a} * D(1) * D(2) - {b} * B(0.5)"), &times);
        let lift = parse(
            &format!(
                "{a} * D(1) * D(2) - {b} * B(0.5) + clamp(D(2)^2, 0, {})",
                1.0 + 3.0 * unit()
            ),
            &times,
        );
        let s_lo = backward_eval(&base, &band, &solver(201), &stage_light(31)).unwrap();
        let s_hi = backward_eval(&lift, &band, &solver(201), &stage_light(31)).unwrap();
        for i in 0..=2 {
            for (x, y) in s_lo
                .stage_grid(i)
                .values()
                .iter()
                .zip(s_hi.stage_grid(i).values())
            {
                assert!(*x <= y + REL_TOL, "monotonicity at stage {i}");
            }
        }
    }

    // (iii) Conditional subadditivity: psi^X - psi^Y <= psi^{X-Y} nodewise.
    {
        let times = [0.0, 0.5, 1.0];
        let x = parse("D(1) * D(2) + abs(B(1))", &times);
        let y = parse("clamp(B(0.5), -2, 2) - D(2)^2", &times);
        let sx = backward_eval(&x, &band, &solver(201), &stage_light(31)).unwrap();
        let sy = backward_eval(&y, &band, &solver(201), &stage_light(31)).unwrap();
        let sd = backward_eval(
            &x.difference(&y).unwrap(),
            &band,
            &solver(201),
            &stage_light(31),
        )
        .unwrap();
        for i in 0..=2 {
            for ((vx, vy), vd) in sx
                .stage_grid(i)
                .values()
                .iter()
                .zip(sy.stage_grid(i).values())
                .zip(sd.stage_grid(i).values())
            {
                assert!(
                    vx - vy <= vd + REL_TOL * vd.abs().max(1.0),
                    "subadditivity at stage {i}: {} > {}",
                    vx - vy,
                    vd
                );
            }
        }
    }

    // (ii) Constants pass through every stage unchanged.
    for _ in 0..2 {
        let c = 10.0 * unit() - 5.0;
        let payoff = PayoffExpr::constant(c, partition(&[0.0, 0.4, 0.7, 1.0])).unwrap();
        let s = backward_eval(&payoff, &band, &solver(101), &stage_light(11)).unwrap();
        for i in 0..=3 {
            for v in s.stage_grid(i).values() {
                assert!(
                    (v - c).abs() <= REL_TOL * c.abs().max(1.0),
                    "constant stage {i}"
                );
            }
        }
    }

    // (iv) Conditional factorization: psi_1(x) = x^+ E[phi] + x^- E[-phi]
    // for xi = D(1) phi(D(2)).
    {
        let times = [0.0, 0.5, 1.0];
        let cfg = SolverConfig {
            half_width: Some(24.0),
            ..solver(301)
        };
        for phi_text in ["D(2)^2", "clamp(D(2), -1, 2)"] {
            let payoff = parse(&format!("D(1) * ({phi_text})"), &times);
            let s = backward_eval(&payoff, &band, &cfg, &stage_light(41)).unwrap();
            let phi = parse(phi_text, &times);
            let phi_fn = {
                let phi = phi.clone();
                move |y: f64| phi.eval(&[0.0, y])
            };
            let plus = gnormal_expect(&phi_fn, 2, 0.5, &band, &cfg).unwrap();
            let minus = gnormal_expect(|y| -phi_fn(y), 2, 0.5, &band, &cfg).unwrap();
            let grid = s.stage_grid(1);
            for (flat, value) in grid.values().iter().enumerate() {
                let x = grid.node_coords(flat)[0];
                let expected = x.max(0.0) * plus + (-x).max(0.0) * minus;
                assert!(
                    (value - expected).abs() <= REL_TOL * expected.abs().max(1.0),
                    "factorization at x = {x}: {value} vs {expected}"
                );
            }
        }
    }

    // (v) Tower property: re-running from psi_2 as a terminal payoff
    // reproduces the earlier stages.
    {
        let times = [0.0, 0.3, 0.65, 1.0];
        let payoff = parse("clamp(D(1) * D(2), -3, 3) + 0.5 * D(3)^2 - B(0.3)", &times);
        let cfg = solver(201);
        let st = stage_light(21);
        let full = backward_eval(&payoff, &band, &cfg, &st).unwrap();
        let grid2 = full.stage_grid(2).clone();
        let sub = partition(&[0.0, 0.3, 0.65]);
        let rerun = backward_eval_fn(
            &|x: &[f64]| grid2.interp_extrapolate(x),
            payoff.growth_degree(),
            &sub,
            &band,
            &cfg,
            &st,
        )
        .unwrap();
        let e0 = full.expectation();
        let r0 = rerun.expectation();
        assert!(
            (e0 - r0).abs() <= REL_TOL * e0.abs().max(1.0),
            "tower psi_0: {e0} vs {r0}"
        );
        for (a, b) in full
            .stage_grid(1)
            .values()
            .iter()
            .zip(rerun.stage_grid(1).values())
        {
            assert!((a - b).abs() <= REL_TOL * a.abs().max(1.0), "tower psi_1");
        }
    }

    // (vi) Payoffs of later increments have constant earlier stages.
    {
        let times = [0.0, 0.25, 0.5, 1.0];
        let payoff = parse("D(3)^2 - min(D(3), 1)", &times);
        assert!(payoff.depends_only_after_stage(2));
        let s = backward_eval(&payoff, &band, &solver(201), &stage_light(15)).unwrap();
        for i in [1usize, 2] {
            let vals = s.stage_grid(i).values();
            for v in vals {
                assert!((v - vals[0]).abs() <= 1e-9, "stage {i} not constant");
            }
        }
    }

    // Distributional scaling: a D1 + b D2 matches sqrt(a^2+b^2) D1' over one
    // interval of the same length.
    for _ in 0..3 {
        let (a, b, c) = (0.5 + unit(), 0.5 + unit(), unit() - 0.5);
        let two = parse(
            &format!("({a} * D(1) + {b} * D(2) + {c})^2"),
            &[0.0, 0.5, 1.0],
        );
        let s2 = backward_eval(&two, &band, &solver(301), &stage_light(201)).unwrap();
        let lam = (a * a + b * b).sqrt();
        let one = parse(&format!("({lam} * D(1) + {c})^2"), &[0.0, 0.5]);
        let s1 = backward_eval(&one, &band, &solver(301), &stage_light(61)).unwrap();
        let rel = (s2.expectation() - s1.expectation()).abs() / s1.expectation().abs();
        assert!(
            rel <= REL_TOL,
            "scaling: {} vs {} (rel {rel:.2e})",
            s2.expectation(),
            s1.expectation()
        );
    }

    println!("criterion 09 (conditional property suite + scaling identity): PASS");
}

// ---------------------------------------------------------------------------
// 10. Path-layer invariants.
// ---------------------------------------------------------------------------
#[test]
fn c10_path_layer_invariants() {
    let _alone = run_alone();
    let band = band();
    let params = SimParams {
        n_paths: 2_000,
        n_steps: 500,
        horizon: 1.0,
        seed: SEED ^ 10,
    };

    // (a) Quadratic-variation density stays in the variance band exactly and
    // the process is nondecreasing, under constants, schedules, and feedback.
    let payoff = parse("min(B(1)^2, 16)", &[0.0, 1.0]);
    let surface = Arc::new(backward_eval(&payoff, &band, &solver(201), &stage(41)).unwrap());
    let controls = family(&band, 3, Some(surface), None);
    for (id, entry) in controls.entries().iter().enumerate() {
        let bundle = simulate(entry, id as u64, &band, &params).unwrap();
        for p in (0..bundle.n_paths()).step_by(97) {
            let qv = bundle.path_qv(p);
            assert_eq!(qv[0], 0.0);
            for k in 0..bundle.n_steps() {
                let density = (qv[k + 1] - qv[k]) / bundle.dt();
                assert!(qv[k + 1] >= qv[k], "qv not monotone");
                assert!(
                    density >= band.var_min() - 1e-9 && density <= band.var_max() + 1e-9,
                    "density {density} outside band"
                );
            }
        }
    }

    // (b) Quadratic-variation identity: qv_T vs B_T^2 - 2 int B dB. The
    // discrete gap is the QV fluctuation with standard deviation
    // var sqrt(2 dt T); its mean over paths must vanish at the 1% scale and
    // every path must stay inside a generous multiple of that deviation.
    let entry = ControlEntry {
        label: "const:2".into(),
        control: VolatilityControl::Constant(2.0),
    };
    let bundle = simulate(&entry, 0, &band, &params).unwrap();
    let level = |b_hist: &[f64], _: &[f64], _: f64| *b_hist.last().unwrap();
    let integrals = ito_integral(&bundle, &level);
    let qv_t = band.var_max() * params.horizon;
    let envelope = 6.0 * band.var_max() * (2.0 * bundle.dt() * params.horizon).sqrt();
    let mut mean_gap = 0.0;
    for (p, int_b) in integrals.iter().enumerate() {
        let b = bundle.path_b(p);
        let bt = b[bundle.n_steps()];
        let gap = bundle.path_qv(p)[bundle.n_steps()] - (bt * bt - 2.0 * int_b);
        assert!(
            gap.abs() <= envelope,
            "path {p}: gap {gap} beyond envelope {envelope}"
        );
        mean_gap += gap;
    }
    mean_gap /= bundle.n_paths() as f64;
    assert!(
        mean_gap.abs() <= 0.01 * qv_t,
        "mean identity gap {mean_gap}"
    );

    // (c) Martingale construction for the three reference integrand pairs.
    let controls = family(&band, 3, None, None);
    let sv = solver(201);
    let st = stage_light(21);
    let ctx = VerifyContext::new(&band, &sv, &st, &controls, &params);
    let zero = |_: &[f64], _: &[f64], _: f64| 0.0;
    let one = |_: &[f64], _: &[f64], _: f64| 1.0;
    let minus_one = |_: &[f64], _: &[f64], _: f64| -1.0;
    for (z, eta, label) in [
        (
            &zero as &dyn gcalc::paths::Integrand,
            &one as &dyn gcalc::paths::Integrand,
            "Z=0, eta=1",
        ),
        (&one, &zero, "Z=1, eta=0"),
        (&zero, &minus_one, "Z=0, eta=-1"),
    ] {
        let report = ctx.martingale_construction(z, eta, label).unwrap();
        assert!(report.holds, "{label}: {report:?}");
    }

    // Capacity sanity: symmetric event and the sure event.
    let controls = ControlSet::new().with_constant_grid(&band, 2);
    let positive = |b: &[f64], _: &[f64], _: f64| *b.last().unwrap() > 0.0;
    let report = capacity_estimate(&positive, &controls, &band, &params).unwrap();
    assert!((report.value - 0.5).abs() < 3.0 * report.std_error + 0.01);
    let omega = |_: &[f64], _: &[f64], _: f64| true;
    assert_eq!(
        capacity_estimate(&omega, &controls, &band, &params)
            .unwrap()
            .value,
        1.0
    );

    println!("criterion 10 (path-layer invariants): PASS");
}

// ---------------------------------------------------------------------------
// Evaluation lower bound behaves like an expectation dominator (extra check
// supporting criterion 6's gevaluation plumbing).
// ---------------------------------------------------------------------------
#[test]
fn gevaluation_dominates_terminal_expectation() {
    let _alone = run_alone();
    let band = band();
    let payoff = parse("B(1)^2", &[0.0, 1.0]);
    let (surface, anti) = surfaces_for(&payoff, &band, &solver(301), &stage(41));
    let controls = family(&band, 3, Some(surface.clone()), Some(anti));
    let params = SimParams {
        n_paths: 10_000,
        n_steps: 250,
        horizon: 1.0,
        seed: SEED ^ 11,
    };
    let report = gevaluation(&surface, &controls, &band, &params).unwrap();
    assert!(report.excluded_fraction < 1e-3);
    // E[sup_t X_t] >= E[X_T] = solver value, up to noise.
    assert!(
        report.value >= 4.0 - 3.0 * report.std_error - 0.05,
        "value {}",
        report.value
    );
    println!("gevaluation lower-bound check: PASS");
}
