//! Projected gradient descent over device gains.
//!
//! The decision vector stacks per-device inertia gains then damping gains.
//! Inertia is box-constrained per device; damping lives in the intersection
//! of a box and the budget half-space `Σ d̃ ≤ d_sum`, onto which the
//! Euclidean projection is computed by bisection on the budget multiplier.
//! The line search treats unstable closed loops as infinite cost, so every
//! accepted iterate is stabilizing; with the H2 norm growing unboundedly
//! toward the instability boundary, a non-increasing cost sequence stays
//! stable throughout.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{close_loop, gains_to_feedback, Allocation, ViMode};
use crate::error::{Error, Result};
use crate::exec;
use crate::h2::{h2_gradient, h2_norm_squared, HURWITZ_MARGIN};
use crate::linalg::spectral_abscissa;
use crate::netmodel::LinearSystem;

/// Physical and structural bounds on the gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// Total damping budget: `Σ d̃_k ≤ d_sum`.
    pub d_sum: f64,
    /// Per-device damping caps `P_max,k / |ω|_max`.
    pub d_caps: Vec<f64>,
    /// Per-device inertia caps `P_max,k / |ω̇|_max`.
    pub m_caps: Vec<f64>,
    /// Lower bound on inertia; must be positive for grid-forming devices
    /// (their feedback involves 1/m̃), zero for grid-following.
    pub m_floor: f64,
}

impl ConstraintSet {
    /// Same caps for every device.
    pub fn uniform(n: usize, d_sum: f64, d_cap: f64, m_cap: f64, m_floor: f64) -> Result<Self> {
        let cons = ConstraintSet {
            d_sum,
            d_caps: vec![d_cap; n],
            m_caps: vec![m_cap; n],
            m_floor,
        };
        cons.validate()?;
        Ok(cons)
    }

    /// Derive the caps from converter power ratings and a priori estimates
    /// of the worst-case frequency deviation and RoCoF.
    pub fn from_ratings(
        p_max: &[f64],
        omega_max: f64,
        rocof_max: f64,
        d_sum: f64,
        m_floor: f64,
    ) -> Result<Self> {
        if !(omega_max > 0.0) || !(rocof_max > 0.0) {
            return Err(Error::InfeasibleConstraints(
                "omega_max and rocof_max must be positive".into(),
            ));
        }
        let cons = ConstraintSet {
            d_sum,
            d_caps: p_max.iter().map(|p| p / omega_max).collect(),
            m_caps: p_max.iter().map(|p| p / rocof_max).collect(),
            m_floor,
        };
        cons.validate()?;
        Ok(cons)
    }

    pub fn len(&self) -> usize {
        self.m_caps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_caps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_caps.len() != self.m_caps.len() {
            return Err(Error::InfeasibleConstraints(
                "cap vectors must have equal length".into(),
            ));
        }
        if !(self.d_sum > 0.0) {
            return Err(Error::InfeasibleConstraints("d_sum must be positive".into()));
        }
        if self.d_caps.iter().chain(&self.m_caps).any(|c| !(*c > 0.0)) {
            return Err(Error::InfeasibleConstraints("caps must be positive".into()));
        }
        if self.m_floor < 0.0 {
            return Err(Error::InfeasibleConstraints(
                "m_floor must be nonnegative".into(),
            ));
        }
        if self.m_caps.iter().any(|&c| self.m_floor > c) {
            return Err(Error::InfeasibleConstraints(
                "m_floor exceeds an inertia cap".into(),
            ));
        }
        Ok(())
    }

    /// Largest constraint violation of a gain pair, for feasibility audits.
    pub fn violation(&self, m: &[f64], d: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..self.len() {
            v = v.max(self.m_floor - m[i]);
            v = v.max(m[i] - self.m_caps[i]);
            v = v.max(-d[i]);
            v = v.max(d[i] - self.d_caps[i]);
        }
        v.max(d.iter().sum::<f64>() - self.d_sum)
    }
}

/// Euclidean projection onto the constraint set: per-coordinate clamping
/// for the inertia box, and bisection on the budget multiplier for the
/// damping box ∩ half-space.
pub fn project_constraints(alloc: &Allocation, cons: &ConstraintSet) -> Result<Allocation> {
    cons.validate()?;
    if alloc.len() != cons.len() {
        return Err(Error::Dimension(format!(
            "allocation has {} entries, constraints cover {}",
            alloc.len(),
            cons.len()
        )));
    }
    let m: Vec<f64> = alloc
        .entries
        .iter()
        .zip(&cons.m_caps)
        .map(|(e, &cap)| e.m_virt.clamp(cons.m_floor, cap))
        .collect();
    let d0: Vec<f64> = alloc.entries.iter().map(|e| e.d_virt).collect();
    let d = project_damping(&d0, &cons.d_caps, cons.d_sum);
    let buses: Vec<String> = alloc.entries.iter().map(|e| e.bus.clone()).collect();
    Ok(Allocation::from_gains(&buses, &m, &d))
}

fn project_damping(d0: &[f64], caps: &[f64], budget: f64) -> Vec<f64> {
    let clamp_at = |shift: f64| -> Vec<f64> {
        d0.iter()
            .zip(caps)
            .map(|(&d, &c)| (d - shift).clamp(0.0, c))
            .collect()
    };
    let box_only = clamp_at(0.0);
    if box_only.iter().sum::<f64>() <= budget {
        return box_only;
    }
    // Σ clamp(d0 − λ) is non-increasing in λ; bracket [0, max d0] always
    // straddles the budget once the box-only sum exceeds it.
    let mut lo = 0.0;
    let mut hi = d0.iter().cloned().fold(0.0, f64::max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if clamp_at(mid).iter().sum::<f64>() > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clamp_at(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmijoParams {
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        ArmijoParams {
            initial_step: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Stop once `‖x − proj(x − ∇)‖` drops below this.
    pub tolerance: f64,
    pub armijo: ArmijoParams,
    /// ℓ1 weight γ; linear in the gains on the nonnegative feasible set.
    pub l1_weight: f64,
    /// Multistart count used by the CLI when no explicit seed list is given.
    pub restarts: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iters: 300,
            tolerance: 1e-6,
            armijo: ArmijoParams::default(),
            l1_weight: 0.0,
            restarts: 1,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        let a = &self.armijo;
        if !(a.shrink > 0.0 && a.shrink < 1.0) {
            return Err(Error::Invalid("Armijo shrink must lie in (0, 1)".into()));
        }
        if !(a.sufficient_decrease > 0.0 && a.sufficient_decrease <= 0.5) {
            return Err(Error::Invalid(
                "sufficient-decrease coefficient must lie in (0, 0.5]".into(),
            ));
        }
        if !(a.initial_step > 0.0) {
            return Err(Error::Invalid("initial step must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        if self.l1_weight < 0.0 {
            return Err(Error::Invalid("l1 weight must be nonnegative".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Invalid("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Stationary,
    MaxIterations,
    /// Backtracking shrank the step below 1e-14 without progress; the
    /// result carries the last iterate.
    StepCollapse,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ActiveConstraints {
    pub m_at_floor: Vec<String>,
    pub m_at_cap: Vec<String>,
    pub d_at_zero: Vec<String>,
    pub d_at_cap: Vec<String>,
    pub budget_active: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub allocation: Allocation,
    /// Accepted total costs (H2² plus ℓ1 term), one entry per accepted
    /// iterate including the initial point; non-increasing by construction.
    pub cost_trace: Vec<f64>,
    pub h2_norm_squared: f64,
    /// Terminal projected-gradient mapping norm `‖x − proj(x − ∇)‖`.
    pub projected_gradient_norm: f64,
    pub active_constraints: ActiveConstraints,
    pub iterations: usize,
    pub wall_time: Duration,
    pub stop_reason: StopReason,
    /// Largest constraint violation observed over all accepted iterates.
    pub max_feasibility_violation: f64,
    /// Largest closed-loop spectral abscissa over all accepted iterates;
    /// negative certifies stability along the whole path.
    pub max_accepted_abscissa: f64,
    /// Multistart seed that produced this run, when applicable.
    pub seed: Option<u64>,
}

impl OptimizationResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("trace never empty")
    }
}

struct Objective<'a> {
    sys: &'a LinearSystem,
    cons: &'a ConstraintSet,
    gamma: f64,
    buses: Vec<String>,
}

impl<'a> Objective<'a> {
    fn alloc(&self, x: &DVector<f64>) -> Allocation {
        let n = self.buses.len();
        Allocation::from_gains(
            &self.buses,
            x.as_slice()[..n].as_ref(),
            x.as_slice()[n..].as_ref(),
        )
    }

    fn pack(&self, alloc: &Allocation) -> DVector<f64> {
        let n = alloc.len();
        let mut x = DVector::zeros(2 * n);
        for (i, e) in alloc.entries.iter().enumerate() {
            x[i] = e.m_virt;
            x[n + i] = e.d_virt;
        }
        x
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let projected = project_constraints(&self.alloc(x), self.cons).expect("validated set");
        self.pack(&projected)
    }

    /// Total cost and closed-loop abscissa; `None` when the candidate is
    /// not stabilizing (infinite cost to the line search).
    fn eval(&self, x: &DVector<f64>) -> Result<Option<(f64, f64, f64)>> {
        let alloc = self.alloc(x);
        let k = gains_to_feedback(&alloc, self.sys.mode)?;
        let cl = close_loop(self.sys, &k)?;
        let abscissa = spectral_abscissa(&cl.a);
        if abscissa >= -HURWITZ_MARGIN {
            return Ok(None);
        }
        let h2 = h2_norm_squared(&cl)?;
        let cost = h2 + self.gamma * x.sum();
        Ok(Some((cost, h2, abscissa)))
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let alloc = self.alloc(x);
        let k = gains_to_feedback(&alloc, self.sys.mode)?;
        let report = h2_gradient(self.sys, &k)?;
        let n = self.buses.len();
        let mut g = DVector::from_element(2 * n, self.gamma);
        for i in 0..n {
            g[i] += report.physical[2 * i];
            g[n + i] += report.physical[2 * i + 1];
        }
        Ok(g)
    }
}

fn active_constraints(x: &DVector<f64>, cons: &ConstraintSet, buses: &[String]) -> ActiveConstraints {
    let n = buses.len();
    let tol = 1e-9;
    let mut out = ActiveConstraints::default();
    for i in 0..n {
        let (m, d) = (x[i], x[n + i]);
        if (m - cons.m_floor).abs() <= tol * cons.m_floor.max(1.0) {
            out.m_at_floor.push(buses[i].clone());
        }
        if (cons.m_caps[i] - m).abs() <= tol * cons.m_caps[i].max(1.0) {
            out.m_at_cap.push(buses[i].clone());
        }
        if d.abs() <= tol {
            out.d_at_zero.push(buses[i].clone());
        }
        if (cons.d_caps[i] - d).abs() <= tol * cons.d_caps[i].max(1.0) {
            out.d_at_cap.push(buses[i].clone());
        }
    }
    let total_d: f64 = (0..n).map(|i| x[n + i]).sum();
    out.budget_active = (cons.d_sum - total_d).abs() <= tol * cons.d_sum.max(1.0);
    out
}

/// Minimize `‖G‖₂² + γ‖(m̃, d̃)‖₁` over the constraint set by projected
/// gradient descent with Armijo backtracking and a Barzilai–Borwein
/// initial step. The initial allocation must be feasible after projection
/// and stabilizing.
pub fn optimize(
    sys: &LinearSystem,
    cons: &ConstraintSet,
    opts: &OptimizerOptions,
    init: &Allocation,
) -> Result<OptimizationResult> {
    opts.validate()?;
    cons.validate()?;
    if cons.len() != sys.n_devices() {
        return Err(Error::Dimension(format!(
            "constraints cover {} devices, system has {}",
            cons.len(),
            sys.n_devices()
        )));
    }
    if sys.mode == ViMode::Forming && !(cons.m_floor > 0.0) {
        return Err(Error::InfeasibleConstraints(
            "grid-forming optimization requires a positive inertia floor".into(),
        ));
    }
    let started = Instant::now();
    let obj = Objective {
        sys,
        cons,
        gamma: opts.l1_weight,
        buses: sys.device_buses.clone(),
    };

    let mut x = obj.project(&obj.pack(init));
    let (mut cost, mut h2, mut abscissa) = obj.eval(&x)?.ok_or(Error::NoStableInit)?;
    let mut grad = obj.gradient(&x)?;

    let mut cost_trace = vec![cost];
    let mut max_violation = cons.violation(
        &x.as_slice()[..cons.len()],
        &x.as_slice()[cons.len()..],
    );
    let mut max_abscissa = abscissa;
    let mut step_seed = opts.armijo.initial_step;
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        let pg = (&x - obj.project(&(&x - &grad))).norm();
        if pg <= opts.tolerance {
            stop_reason = StopReason::Stationary;
            break;
        }

        let mut step = step_seed;
        let mut accepted = None;
        while step >= 1e-14 {
            let cand = obj.project(&(&x - &grad * step));
            let inner = grad.dot(&(&cand - &x));
            if let Some((c_cost, c_h2, c_abs)) = obj.eval(&cand)? {
                if c_cost <= cost + opts.armijo.sufficient_decrease * inner {
                    accepted = Some((cand, c_cost, c_h2, c_abs));
                    break;
                }
            }
            step *= opts.armijo.shrink;
        }
        let Some((cand, c_cost, c_h2, c_abs)) = accepted else {
            stop_reason = StopReason::StepCollapse;
            break;
        };

        let new_grad = obj.gradient(&cand)?;
        let s = &cand - &x;
        let y = &new_grad - &grad;
        let sy = s.dot(&y);
        step_seed = if sy > 0.0 {
            (s.dot(&s) / sy).clamp(1e-10, 1e6)
        } else {
            opts.armijo.initial_step
        };

        x = cand;
        cost = c_cost;
        h2 = c_h2;
        abscissa = c_abs;
        grad = new_grad;
        cost_trace.push(cost);
        iterations += 1;
        max_abscissa = max_abscissa.max(abscissa);
        max_violation = max_violation.max(cons.violation(
            &x.as_slice()[..cons.len()],
            &x.as_slice()[cons.len()..],
        ));
        debug_assert!(max_violation <= 1e-10, "infeasible iterate: {max_violation}");
    }

    let projected_gradient_norm = (&x - obj.project(&(&x - &grad))).norm();
    Ok(OptimizationResult {
        allocation: obj.alloc(&x),
        cost_trace,
        h2_norm_squared: h2,
        projected_gradient_norm,
        active_constraints: active_constraints(&x, cons, &sys.device_buses),
        iterations,
        wall_time: started.elapsed(),
        stop_reason,
        max_feasibility_violation: max_violation,
        max_accepted_abscissa: max_abscissa,
        seed: None,
    })
}

/// Documented default initial guess: the zero allocation for grid-following
/// (stable whenever the device-free system is), a feasible uniform
/// allocation for grid-forming. Stability-checked.
pub fn default_init(sys: &LinearSystem, cons: &ConstraintSet) -> Result<Allocation> {
    cons.validate()?;
    let buses = sys.device_buses.clone();
    let n = buses.len();
    let alloc = match sys.mode {
        ViMode::Following => Allocation::zeros(&buses),
        ViMode::Forming => {
            let m: Vec<f64> = cons.m_caps.iter().map(|&c| (0.5 * c).max(cons.m_floor)).collect();
            let d: Vec<f64> = cons
                .d_caps
                .iter()
                .map(|&c| c.min(0.9 * cons.d_sum / n.max(1) as f64))
                .collect();
            Allocation::from_gains(&buses, &m, &d)
        }
    };
    let alloc = project_constraints(&alloc, cons)?;
    ensure_stabilizing(sys, &alloc)?;
    Ok(alloc)
}

fn ensure_stabilizing(sys: &LinearSystem, alloc: &Allocation) -> Result<()> {
    let k = gains_to_feedback(alloc, sys.mode)?;
    let cl = close_loop(sys, &k)?;
    let abscissa = spectral_abscissa(&cl.a);
    if abscissa >= -HURWITZ_MARGIN {
        return Err(Error::NoStableInit);
    }
    Ok(())
}

/// Draw a random feasible, stabilizing allocation from a seeded generator.
pub fn random_feasible_init(
    sys: &LinearSystem,
    cons: &ConstraintSet,
    seed: u64,
) -> Result<Allocation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buses = sys.device_buses.clone();
    for _ in 0..32 {
        let m: Vec<f64> = cons
            .m_caps
            .iter()
            .map(|&cap| cons.m_floor + rng.gen::<f64>() * (cap - cons.m_floor))
            .collect();
        let d: Vec<f64> = cons
            .d_caps
            .iter()
            .map(|&cap| rng.gen::<f64>() * cap)
            .collect();
        let alloc = project_constraints(&Allocation::from_gains(&buses, &m, &d), cons)?;
        if ensure_stabilizing(sys, &alloc).is_ok() {
            return Ok(alloc);
        }
    }
    Err(Error::NoStableInit)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultistartRun {
    pub seed: u64,
    pub outcome: std::result::Result<OptimizationResult, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultistartReport {
    pub best: OptimizationResult,
    pub runs: Vec<MultistartRun>,
    /// Max − min of the final costs over successful runs.
    pub cost_spread: f64,
}

/// Independent optimizations from randomized feasible initializations, one
/// per seed; runs execute in parallel under the `parallel` feature.
/// Per-run failures are reported without aborting the batch.
pub fn multistart(
    sys: &LinearSystem,
    cons: &ConstraintSet,
    opts: &OptimizerOptions,
    seeds: &[u64],
) -> Result<MultistartReport> {
    multistart_with(sys, cons, opts, seeds, false)
}

/// Sequential variant of [`multistart`]; same results in the same order,
/// kept callable for benchmarking the parallel speedup.
pub fn multistart_seq(
    sys: &LinearSystem,
    cons: &ConstraintSet,
    opts: &OptimizerOptions,
    seeds: &[u64],
) -> Result<MultistartReport> {
    multistart_with(sys, cons, opts, seeds, true)
}

fn multistart_with(
    sys: &LinearSystem,
    cons: &ConstraintSet,
    opts: &OptimizerOptions,
    seeds: &[u64],
    sequential: bool,
) -> Result<MultistartReport> {
    if seeds.is_empty() {
        return Err(Error::Invalid("multistart needs at least one seed".into()));
    }
    let job = |seed: u64| {
        let outcome = random_feasible_init(sys, cons, seed)
            .and_then(|init| optimize(sys, cons, opts, &init))
            .map(|mut r| {
                r.seed = Some(seed);
                r
            })
            .map_err(|e| e.to_string());
        MultistartRun { seed, outcome }
    };
    let runs: Vec<MultistartRun> = if sequential {
        exec::map_seq(seeds.to_vec(), &job)
    } else {
        exec::map(seeds.to_vec(), &job)
    };

    let successes: Vec<&OptimizationResult> =
        runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    if successes.is_empty() {
        return Err(Error::NoStableInit);
    }
    let best = successes
        .iter()
        .min_by(|a, b| {
            (a.final_cost(), a.seed)
                .partial_cmp(&(b.final_cost(), b.seed))
                .expect("finite costs")
        })
        .expect("nonempty")
        .to_owned()
        .clone();
    let lo = successes.iter().map(|r| r.final_cost()).fold(f64::INFINITY, f64::min);
    let hi = successes
        .iter()
        .map(|r| r.final_cost())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(MultistartReport {
        best,
        runs,
        cost_spread: hi - lo,
    })
}

/// Uniform allocation with the same gain totals, projected for feasibility;
/// the comparison point for the optimized-beats-uniform check.
pub fn uniform_with_totals(
    buses: &[String],
    cons: &ConstraintSet,
    total_inertia: f64,
    total_damping: f64,
) -> Result<Allocation> {
    let n = buses.len().max(1) as f64;
    let alloc = Allocation::from_gains(
        buses,
        &vec![total_inertia / n; buses.len()],
        &vec![total_damping / n; buses.len()],
    );
    project_constraints(&alloc, cons)
}
