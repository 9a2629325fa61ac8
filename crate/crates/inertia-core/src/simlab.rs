//! Time-domain simulation, frequency-stability metrics, linearization
//! error studies, and scenario comparison.
//!
//! Both the linear closed loop and the sine-coupled nonlinear model run
//! through the same fixed-step RK4 driver. Each trajectory records, per
//! machine, the frequency, the raw RoCoF (the exact state derivative,
//! disturbance included), and a low-pass-filtered RoCoF integrated
//! alongside the states; device injections and all raw states are kept
//! for reporting.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::devices::{
    close_loop, gains_to_feedback, Allocation, ClosedLoop, DeviceSet, GainMatrix, ViMode,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::h2::h2_norm_squared;
use crate::netmodel::{
    assemble_open_loop, LinearSystem, NetworkModel, NonlinearModel, PerformanceWeights,
};
use crate::optimizer::{default_init, optimize, ConstraintSet, OptimizationResult, OptimizerOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultShape {
    Step,
    Impulse,
}

/// A single active-power fault at a disturbance port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub bus: String,
    /// Power step in per unit; negative for a load increase.
    pub magnitude: f64,
    #[serde(default = "default_shape")]
    pub shape: FaultShape,
    #[serde(default)]
    pub start: f64,
}

fn default_shape() -> FaultShape {
    FaultShape::Step
}

impl FaultSpec {
    pub fn step(bus: &str, magnitude: f64) -> Self {
        FaultSpec {
            bus: bus.into(),
            magnitude,
            shape: FaultShape::Step,
            start: 0.0,
        }
    }

    pub fn impulse(bus: &str, magnitude: f64) -> Self {
        FaultSpec {
            bus: bus.into(),
            magnitude,
            shape: FaultShape::Impulse,
            start: 0.0,
        }
    }

    fn port_index(&self, port_buses: &[String]) -> Result<usize> {
        if self.magnitude == 0.0 {
            return Err(Error::Invalid("fault magnitude must be nonzero".into()));
        }
        if self.start < 0.0 {
            return Err(Error::Invalid("fault start time must be nonnegative".into()));
        }
        port_buses
            .iter()
            .position(|b| b == &self.bus)
            .ok_or_else(|| {
                Error::Invalid(format!("bus {} is not a disturbance port", self.bus))
            })
    }
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub dt: f64,
    pub horizon: f64,
    /// RoCoF low-pass filter time constant T_f in seconds.
    pub rocof_filter: f64,
    /// Metrics integration horizon τ in seconds.
    pub tau: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-3,
            horizon: 20.0,
            rocof_filter: 0.1,
            tau: 20.0,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Invalid("dt must be positive".into()));
        }
        if self.horizon < 10.0 * self.dt {
            return Err(Error::Invalid("horizon must cover at least 10 steps".into()));
        }
        if !(self.rocof_filter > 0.0) {
            return Err(Error::Invalid("RoCoF filter time constant must be positive".into()));
        }
        if !(self.tau > 0.0) || self.tau > self.horizon {
            return Err(Error::Invalid("tau must lie in (0, horizon]".into()));
        }
        Ok(())
    }
}

/// Recorded simulation output on a strictly increasing time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub machine_buses: Vec<String>,
    pub device_buses: Vec<String>,
    /// Per machine: frequency deviation ω in rad/s.
    pub omega: Vec<Vec<f64>>,
    /// Per machine: exact ω̇ including the disturbance input.
    pub rocof_raw: Vec<Vec<f64>>,
    /// Per machine: first-order low-pass of the raw RoCoF.
    pub rocof_filtered: Vec<Vec<f64>>,
    /// Per machine: governor power injection.
    pub p_gov: Vec<Vec<f64>>,
    /// Per device: injected power (positive into the grid).
    pub p_vi: Vec<Vec<f64>>,
    /// Every raw state under its semantic label.
    pub states: Vec<(String, Vec<f64>)>,
    pub fault: FaultSpec,
}

impl Trajectory {
    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }
}

/// Shared RK4 driver. `eval` returns the state derivative and the device
/// injections at one point; the RoCoF filter states are integrated
/// alongside on the same grid.
fn integrate_trajectory<F>(
    eval: F,
    n_states: usize,
    speed_indices: &[usize],
    governor_indices: &[usize],
    state_names: Vec<String>,
    machine_buses: Vec<String>,
    device_buses: Vec<String>,
    fault: &FaultSpec,
    jump: Option<DVector<f64>>,
    opts: &SimOptions,
) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>)>,
{
    opts.validate()?;
    let dt = opts.dt;
    let steps = (opts.horizon / dt).round() as usize;
    let jump_index = (fault.start / dt).round() as usize;
    let n_m = speed_indices.len();
    let n_dev = device_buses.len();
    let tf = opts.rocof_filter;

    let mut x = DVector::<f64>::zeros(n_states);
    let mut z = DVector::<f64>::zeros(n_m);

    let mut times = Vec::with_capacity(steps + 1);
    let mut omega = vec![Vec::with_capacity(steps + 1); n_m];
    let mut rocof_raw = vec![Vec::with_capacity(steps + 1); n_m];
    let mut rocof_filtered = vec![Vec::with_capacity(steps + 1); n_m];
    let mut p_gov = vec![Vec::with_capacity(steps + 1); n_m];
    let mut p_vi = vec![Vec::with_capacity(steps + 1); n_dev];
    let mut states: Vec<(String, Vec<f64>)> = state_names
        .into_iter()
        .map(|n| (n, Vec::with_capacity(steps + 1)))
        .collect();

    for i in 0..=steps {
        let t = i as f64 * dt;
        if let Some(j) = &jump {
            if i == jump_index {
                x += j;
            }
        }
        let (dx, inj) = eval(t, &x)?;
        times.push(t);
        for (k, &si) in speed_indices.iter().enumerate() {
            omega[k].push(x[si]);
            rocof_raw[k].push(dx[si]);
            rocof_filtered[k].push(z[k]);
        }
        for (k, &gi) in governor_indices.iter().enumerate() {
            p_gov[k].push(x[gi]);
        }
        for (d, v) in p_vi.iter_mut().zip(&inj) {
            d.push(*v);
        }
        for (j, (_, col)) in states.iter_mut().enumerate() {
            col.push(x[j]);
        }
        if x.amax() > 1e6 {
            return Err(Error::Divergent { t });
        }
        if i == steps {
            break;
        }

        // RK4 on the augmented state (x, z).
        let dz = |dx: &DVector<f64>, z: &DVector<f64>| -> DVector<f64> {
            DVector::from_fn(n_m, |k, _| (dx[speed_indices[k]] - z[k]) / tf)
        };
        let k1x = dx;
        let k1z = dz(&k1x, &z);
        let (k2x, _) = eval(t + 0.5 * dt, &(&x + &k1x * (0.5 * dt)))?;
        let k2z = dz(&k2x, &(&z + &k1z * (0.5 * dt)));
        let (k3x, _) = eval(t + 0.5 * dt, &(&x + &k2x * (0.5 * dt)))?;
        let k3z = dz(&k3x, &(&z + &k2z * (0.5 * dt)));
        let (k4x, _) = eval(t + dt, &(&x + &k3x * dt))?;
        let k4z = dz(&k4x, &(&z + &k3z * dt));
        x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
        z += (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (dt / 6.0);
    }

    Ok(Trajectory {
        times,
        machine_buses,
        device_buses,
        omega,
        rocof_raw,
        rocof_filtered,
        p_gov,
        p_vi,
        states,
        fault: fault.clone(),
    })
}

/// Simulate the linear loop closed by `gains` (or the open loop as-is when
/// `None`, which equals zero feedback).
pub fn simulate_linear(
    sys: &LinearSystem,
    gains: Option<&GainMatrix>,
    fault: &FaultSpec,
    opts: &SimOptions,
) -> Result<Trajectory> {
    let port = fault.port_index(&sys.port_buses)?;
    let a_cl = match gains {
        Some(k) => close_loop(sys, k)?.a,
        None => sys.a.clone(),
    };
    let g_col = sys.g.column(port).clone_owned() * fault.magnitude;
    let p_vi_map = sys.p_vi_map().clone();
    let speed: Vec<usize> = (0..sys.n_machines()).map(|k| sys.speed_index(k)).collect();
    let gov: Vec<usize> = (0..sys.n_machines()).map(|k| sys.governor_index(k)).collect();

    let step_input = fault.shape == FaultShape::Step;
    let start = fault.start;
    let eval = move |t: f64, x: &DVector<f64>| -> Result<(DVector<f64>, Vec<f64>)> {
        let mut dx = &a_cl * x;
        if step_input && t >= start {
            dx += &g_col;
        }
        let inj = (&p_vi_map * x).iter().copied().collect();
        Ok((dx, inj))
    };

    let jump = match fault.shape {
        FaultShape::Impulse => Some(sys.g.column(port).clone_owned() * fault.magnitude),
        FaultShape::Step => None,
    };
    integrate_trajectory(
        eval,
        sys.n_states(),
        &speed,
        &gov,
        sys.state_names(),
        sys.machine_buses.clone(),
        sys.device_buses.clone(),
        fault,
        jump,
        opts,
    )
    .map_err(|e| match e {
        Error::Divergent { .. } => {
            let a_cl = match gains {
                Some(k) => close_loop(sys, k).expect("validated above").a,
                None => sys.a.clone(),
            };
            Error::Unstable {
                abscissa: crate::linalg::spectral_abscissa(&a_cl),
            }
        }
        other => other,
    })
}

/// Simulate the nonlinear model with the device gains from `alloc`.
/// Impulse faults jump the initial state along the linearization's
/// disturbance direction.
pub fn simulate_nonlinear(
    model: &NetworkModel,
    devices: &DeviceSet,
    mode: ViMode,
    alloc: &Allocation,
    fault: &FaultSpec,
    opts: &SimOptions,
) -> Result<Trajectory> {
    let nl = NonlinearModel::new(model, devices, mode, alloc)?;
    let port = fault.port_index(nl.port_buses())?;
    let n_p = nl.n_ports();
    let speed: Vec<usize> = (0..nl.n_machines()).map(|k| nl.speed_index(k)).collect();
    let gov: Vec<usize> = (0..nl.n_machines()).map(|k| nl.governor_index(k)).collect();

    let jump = match fault.shape {
        FaultShape::Impulse => {
            let weights = PerformanceWeights {
                omega: 1.0,
                rocof: 1.0,
                p_gov: 1.0,
                p_vi: 1.0,
            };
            let sys = assemble_open_loop(model, devices, &weights, mode)?;
            Some(sys.g.column(port).clone_owned() * fault.magnitude)
        }
        FaultShape::Step => None,
    };

    let step_input = fault.shape == FaultShape::Step;
    let start = fault.start;
    let magnitude = fault.magnitude;
    let eval = |t: f64, x: &DVector<f64>| -> Result<(DVector<f64>, Vec<f64>)> {
        let mut eta = DVector::<f64>::zeros(n_p);
        if step_input && t >= start {
            eta[port] = magnitude;
        }
        nl.eval(x, &eta)
    };

    integrate_trajectory(
        eval,
        nl.n_states(),
        &speed,
        &gov,
        nl.state_names(),
        nl.machine_buses(),
        nl.device_buses().to_vec(),
        fault,
        jump,
        opts,
    )
}

/// Frequency-stability indicators of one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-machine frequency nadir |ω|_∞ (signed minimum, load-increase
    /// convention), rad/s.
    pub nadir: Vec<f64>,
    /// Per-machine max |ω̇|_∞ of the filtered RoCoF, rad/s².
    pub max_rocof: Vec<f64>,
    /// Per-device peak |P_VI|_∞, pu.
    pub peak_p_vi: Vec<f64>,
    /// Per-machine peak governor injection |P_G|_∞, pu.
    pub peak_p_gov: Vec<f64>,
    /// max_t |Σ_k P_VI,k(t)|.
    pub agg_peak_p_vi: f64,
    /// max_t |Σ_k P_G,k(t)|.
    pub agg_peak_p_gov: f64,
    pub energy_omega: f64,
    pub energy_rocof: f64,
    pub energy_p_vi: f64,
    pub energy_p_gov: f64,
    /// J_τ: the r-weighted sum of the four energies.
    pub weighted_cost: f64,
    /// H2 norm (not squared) of the scenario's linear model, when known.
    pub h2_norm: Option<f64>,
}

impl MetricsReport {
    pub fn with_h2(mut self, h2_norm: f64) -> Self {
        self.h2_norm = Some(h2_norm);
        self
    }

    pub fn max_nadir(&self) -> f64 {
        self.nadir.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_max_rocof(&self) -> f64 {
        self.max_rocof.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_peak_p_vi(&self) -> Option<f64> {
        self.peak_p_vi.iter().cloned().fold(None, |acc, v| {
            Some(acc.map_or(v, |a: f64| a.max(v)))
        })
    }

    pub fn max_peak_p_gov(&self) -> f64 {
        self.peak_p_gov.iter().cloned().fold(0.0, f64::max)
    }
}

fn trapezoid_energy(times: &[f64], upto: usize, sq_sum: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 1..=upto {
        acc += 0.5 * (times[i] - times[i - 1]) * (sq_sum(i - 1) + sq_sum(i));
    }
    acc
}

/// Compute all indicators over `[0, tau]`; maxima are taken over the grid,
/// energies by trapezoidal quadrature. The filtered RoCoF feeds the peak
/// metric; energies use the raw derivative.
pub fn metrics(traj: &Trajectory, weights: &PerformanceWeights, tau: f64) -> Result<MetricsReport> {
    let end = traj.end_time();
    let dt_last = if traj.times.len() > 1 {
        traj.times[1] - traj.times[0]
    } else {
        0.0
    };
    if tau > end + 0.5 * dt_last {
        return Err(Error::Invalid(format!(
            "tau {tau} exceeds the simulated horizon {end}"
        )));
    }
    let upto = traj
        .times
        .iter()
        .rposition(|&t| t <= tau + 0.5 * dt_last)
        .unwrap_or(0);

    // Load-increase convention: for positive steps, measure the upward
    // excursion instead.
    let sign = if traj.fault.magnitude > 0.0 { -1.0 } else { 1.0 };
    let peak_abs = |series: &Vec<f64>| {
        series[..=upto]
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    };

    let nadir: Vec<f64> = traj
        .omega
        .iter()
        .map(|w| {
            w[..=upto]
                .iter()
                .map(|v| sign * v)
                .fold(f64::INFINITY, f64::min)
                .abs()
        })
        .collect();
    let max_rocof: Vec<f64> = traj.rocof_filtered.iter().map(peak_abs).collect();
    let peak_p_vi: Vec<f64> = traj.p_vi.iter().map(peak_abs).collect();
    let peak_p_gov: Vec<f64> = traj.p_gov.iter().map(peak_abs).collect();

    let agg_peak = |series: &Vec<Vec<f64>>| -> f64 {
        (0..=upto)
            .map(|i| series.iter().map(|s| s[i]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    };
    let agg_peak_p_vi = agg_peak(&traj.p_vi);
    let agg_peak_p_gov = agg_peak(&traj.p_gov);

    let sum_sq = |series: &Vec<Vec<f64>>, i: usize| -> f64 {
        series.iter().map(|s| s[i] * s[i]).sum()
    };
    let energy_omega = trapezoid_energy(&traj.times, upto, |i| sum_sq(&traj.omega, i));
    let energy_rocof = trapezoid_energy(&traj.times, upto, |i| sum_sq(&traj.rocof_raw, i));
    let energy_p_vi = trapezoid_energy(&traj.times, upto, |i| sum_sq(&traj.p_vi, i));
    let energy_p_gov = trapezoid_energy(&traj.times, upto, |i| sum_sq(&traj.p_gov, i));
    let weighted_cost = weights.omega * energy_omega
        + weights.rocof * energy_rocof
        + weights.p_vi * energy_p_vi
        + weights.p_gov * energy_p_gov;

    Ok(MetricsReport {
        nadir,
        max_rocof,
        peak_p_vi,
        peak_p_gov,
        agg_peak_p_vi,
        agg_peak_p_gov,
        energy_omega,
        energy_rocof,
        energy_p_vi,
        energy_p_gov,
        weighted_cost,
        h2_norm: None,
    })
}

/// Sample grid of a linearization-error study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyGrid {
    pub ports: Vec<String>,
    pub magnitudes: Vec<f64>,
}

impl StudyGrid {
    /// All model ports with symmetric step magnitudes up to ±`max_step`.
    pub fn symmetric(model: &NetworkModel, max_step: f64, levels: usize) -> Self {
        let mut magnitudes = Vec::new();
        for i in 1..=levels {
            let m = max_step * i as f64 / levels as f64;
            magnitudes.push(-m);
            magnitudes.push(m);
        }
        StudyGrid {
            ports: model.disturbances.iter().map(|p| p.bus.clone()).collect(),
            magnitudes,
        }
    }
}

pub const STUDY_METRICS: [&str; 4] = ["nadir", "max_rocof", "peak_p_vi", "peak_p_gov"];

/// Signed relative errors (in percent) of one study sample; `None` when
/// the nonlinear reference is below the denominator guard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySample {
    pub port: String,
    pub magnitude: f64,
    pub nadir_err: Option<f64>,
    pub max_rocof_err: Option<f64>,
    pub peak_p_vi_err: Option<f64>,
    pub peak_p_gov_err: Option<f64>,
    pub diverged: bool,
}

impl StudySample {
    pub fn errors(&self) -> [Option<f64>; 4] {
        [
            self.nadir_err,
            self.max_rocof_err,
            self.peak_p_vi_err,
            self.peak_p_gov_err,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub samples: Vec<StudySample>,
    /// One `(metric, bins)` entry per study metric, 5%-wide bins.
    pub histograms: Vec<(String, Vec<HistogramBin>)>,
    /// Number of samples whose nonlinear simulation diverged.
    pub diverged: usize,
}

impl StudyReport {
    /// Fraction of defined per-metric errors within ±`band` percent.
    pub fn fraction_within(&self, band: f64) -> f64 {
        let mut total = 0usize;
        let mut inside = 0usize;
        for s in &self.samples {
            for e in s.errors().into_iter().flatten() {
                total += 1;
                if e.abs() <= band {
                    inside += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            inside as f64 / total as f64
        }
    }
}

const STUDY_DENOMINATOR_GUARD: f64 = 1e-9;
const STUDY_BIN_WIDTH: f64 = 5.0;

fn relative_error_pct(lin: f64, nonlin: f64) -> Option<f64> {
    if nonlin.abs() < STUDY_DENOMINATOR_GUARD {
        None
    } else {
        Some(100.0 * (lin - nonlin) / nonlin)
    }
}

fn build_histogram(values: &[f64]) -> Vec<HistogramBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo_edge = (values.iter().cloned().fold(f64::INFINITY, f64::min) / STUDY_BIN_WIDTH).floor()
        * STUDY_BIN_WIDTH;
    let hi_edge = (values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / STUDY_BIN_WIDTH)
        .ceil()
        * STUDY_BIN_WIDTH;
    let n_bins = (((hi_edge - lo_edge) / STUDY_BIN_WIDTH).round() as usize).max(1);
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            lo: lo_edge + i as f64 * STUDY_BIN_WIDTH,
            hi: lo_edge + (i + 1) as f64 * STUDY_BIN_WIDTH,
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = (((v - lo_edge) / STUDY_BIN_WIDTH).floor() as usize).min(n_bins - 1);
        bins[idx].count += 1;
    }
    bins
}

/// Run linear and nonlinear step responses over `grid` and histogram the
/// per-metric relative errors. Samples run in parallel under the
/// `parallel` feature; divergent nonlinear samples are excluded and
/// counted.
pub fn linearization_error_study(
    model: &NetworkModel,
    devices: &DeviceSet,
    mode: ViMode,
    alloc: &Allocation,
    weights: &PerformanceWeights,
    grid: &StudyGrid,
    opts: &SimOptions,
) -> Result<StudyReport> {
    linearization_error_study_with(model, devices, mode, alloc, weights, grid, opts, false)
}

/// Sequential variant of [`linearization_error_study`], kept callable for
/// benchmarking the parallel speedup.
pub fn linearization_error_study_seq(
    model: &NetworkModel,
    devices: &DeviceSet,
    mode: ViMode,
    alloc: &Allocation,
    weights: &PerformanceWeights,
    grid: &StudyGrid,
    opts: &SimOptions,
) -> Result<StudyReport> {
    linearization_error_study_with(model, devices, mode, alloc, weights, grid, opts, true)
}

#[allow(clippy::too_many_arguments)]
fn linearization_error_study_with(
    model: &NetworkModel,
    devices: &DeviceSet,
    mode: ViMode,
    alloc: &Allocation,
    weights: &PerformanceWeights,
    grid: &StudyGrid,
    opts: &SimOptions,
    sequential: bool,
) -> Result<StudyReport> {
    let sys = assemble_open_loop(model, devices, weights, mode)?;
    let k = gains_to_feedback(alloc, mode)?;
    let cases: Vec<(String, f64)> = grid
        .ports
        .iter()
        .flat_map(|p| grid.magnitudes.iter().map(move |&m| (p.clone(), m)))
        .collect();

    let job = |(port, magnitude): (String, f64)| -> Result<StudySample> {
        let fault = FaultSpec::step(&port, magnitude);
        let lin_traj = simulate_linear(&sys, Some(&k), &fault, opts)?;
        let lin = metrics(&lin_traj, weights, opts.tau)?;
        match simulate_nonlinear(model, devices, mode, alloc, &fault, opts) {
            Ok(nl_traj) => {
                let non = metrics(&nl_traj, weights, opts.tau)?;
                Ok(StudySample {
                    port,
                    magnitude,
                    nadir_err: relative_error_pct(lin.max_nadir(), non.max_nadir()),
                    max_rocof_err: relative_error_pct(lin.max_max_rocof(), non.max_max_rocof()),
                    peak_p_vi_err: match (lin.max_peak_p_vi(), non.max_peak_p_vi()) {
                        (Some(l), Some(n)) => relative_error_pct(l, n),
                        _ => None,
                    },
                    peak_p_gov_err: relative_error_pct(lin.max_peak_p_gov(), non.max_peak_p_gov()),
                    diverged: false,
                })
            }
            Err(Error::Divergent { .. }) | Err(Error::Numerical(_)) => Ok(StudySample {
                port,
                magnitude,
                nadir_err: None,
                max_rocof_err: None,
                peak_p_vi_err: None,
                peak_p_gov_err: None,
                diverged: true,
            }),
            Err(other) => Err(other),
        }
    };
    let outcomes: Vec<Result<StudySample>> = if sequential {
        exec::map_seq(cases, &job)
    } else {
        exec::map(cases, &job)
    };

    let mut samples = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        samples.push(o?);
    }
    let diverged = samples.iter().filter(|s| s.diverged).count();
    let histograms = STUDY_METRICS
        .iter()
        .enumerate()
        .map(|(mi, name)| {
            let values: Vec<f64> = samples.iter().filter_map(|s| s.errors()[mi]).collect();
            (name.to_string(), build_histogram(&values))
        })
        .collect();
    Ok(StudyReport {
        samples,
        histograms,
        diverged,
    })
}

/// One column of the scenario comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioColumn {
    pub name: String,
    pub metrics: MetricsReport,
    pub total_inertia: Option<f64>,
    pub total_damping: Option<f64>,
    pub allocation: Option<Allocation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<ScenarioColumn>,
    /// Base power (MVA) and nominal frequency (Hz) used only to render
    /// the human-readable table.
    pub base_mva: f64,
    pub base_frequency_hz: f64,
}

/// Row labels of the rendered comparison, in order.
pub const COMPARISON_ROWS: [&str; 8] = [
    "sum_inertia [MW s^2/rad]",
    "sum_damping [MW s/rad]",
    "max_rocof [Hz/s]",
    "nadir [mHz]",
    "peak_p_vi [MW]",
    "agg_peak_p_vi [MW]",
    "agg_peak_p_gov [MW]",
    "h2_norm [-]",
];

impl ComparisonTable {
    /// Aligned text table with quantities converted to MW / Hz at the
    /// model base; per-unit values live in the serialized form.
    pub fn render_text(&self) -> String {
        let s_base = self.base_mva;
        let to_hz = 1.0 / (2.0 * std::f64::consts::PI);
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["metric".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        rows.push(header);
        for (ri, label) in COMPARISON_ROWS.iter().enumerate() {
            let mut row = vec![label.to_string()];
            for c in &self.columns {
                let m = &c.metrics;
                let v = match ri {
                    0 => c.total_inertia.map(|v| v * s_base),
                    1 => c.total_damping.map(|v| v * s_base),
                    2 => Some(m.max_max_rocof() * to_hz),
                    3 => Some(m.max_nadir() * to_hz * 1000.0),
                    4 => m.max_peak_p_vi().map(|v| v * s_base),
                    5 => {
                        if c.allocation.is_some() {
                            Some(m.agg_peak_p_vi * s_base)
                        } else {
                            None
                        }
                    }
                    6 => Some(m.agg_peak_p_gov * s_base),
                    7 => m.h2_norm,
                    _ => unreachable!(),
                };
                row.push(fmt(v));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(c, cell)| format!("{cell:>w$}", w = widths[c]))
                    .collect::<Vec<_>>()
                    .join("  ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Optimize both device implementations, simulate the fault on the
/// nonlinear model for each configuration and the device-free baseline,
/// and tabulate the indicators side by side.
#[allow(clippy::too_many_arguments)]
pub fn compare_scenarios(
    model: &NetworkModel,
    devices: &DeviceSet,
    weights: &PerformanceWeights,
    cons: &ConstraintSet,
    opts: &OptimizerOptions,
    fault: &FaultSpec,
    sim: &SimOptions,
) -> Result<ComparisonTable> {
    let no_devices = DeviceSet::empty();
    let base_sys = assemble_open_loop(model, &no_devices, weights, ViMode::Following)?;
    let base_h2 = h2_norm_squared(&ClosedLoop {
        a: base_sys.a.clone(),
        g: base_sys.g.clone(),
        c_perf: base_sys.c_perf.clone(),
    })?;
    let base_traj = simulate_nonlinear(
        model,
        &no_devices,
        ViMode::Following,
        &Allocation::default(),
        fault,
        sim,
    )?;
    let mut columns = vec![ScenarioColumn {
        name: "no-vi".into(),
        metrics: metrics(&base_traj, weights, sim.tau)?.with_h2(base_h2.sqrt()),
        total_inertia: None,
        total_damping: None,
        allocation: None,
    }];

    for mode in [ViMode::Following, ViMode::Forming] {
        let (column, _) = optimized_column(model, devices, weights, cons, opts, fault, sim, mode)?;
        columns.push(column);
    }
    Ok(ComparisonTable {
        columns,
        base_mva: model.base.mva,
        base_frequency_hz: model.base.frequency_hz,
    })
}

/// Constraint set adapted to one mode: grid-following admits a zero
/// inertia floor, grid-forming needs a positive one.
pub fn constraints_for_mode(cons: &ConstraintSet, mode: ViMode) -> ConstraintSet {
    let mut c = cons.clone();
    c.m_floor = match mode {
        ViMode::Following => 0.0,
        ViMode::Forming => {
            if c.m_floor > 0.0 {
                c.m_floor
            } else {
                1e-3
            }
        }
    };
    c
}

#[allow(clippy::too_many_arguments)]
fn optimized_column(
    model: &NetworkModel,
    devices: &DeviceSet,
    weights: &PerformanceWeights,
    cons: &ConstraintSet,
    opts: &OptimizerOptions,
    fault: &FaultSpec,
    sim: &SimOptions,
    mode: ViMode,
) -> Result<(ScenarioColumn, OptimizationResult)> {
    let sys = assemble_open_loop(model, devices, weights, mode)?;
    let mode_cons = constraints_for_mode(cons, mode);
    let init = default_init(&sys, &mode_cons)?;
    let result = optimize(&sys, &mode_cons, opts, &init)?;
    let traj = simulate_nonlinear(model, devices, mode, &result.allocation, fault, sim)?;
    let column = ScenarioColumn {
        name: mode.to_string(),
        metrics: metrics(&traj, weights, sim.tau)?.with_h2(result.h2_norm_squared.sqrt()),
        total_inertia: Some(result.allocation.total_inertia()),
        total_damping: Some(result.allocation.total_damping()),
        allocation: Some(result.allocation.clone()),
    };
    Ok((column, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::h2::h2_norm_squared;
    use approx::assert_relative_eq;

    fn long_opts() -> SimOptions {
        SimOptions {
            dt: 1e-3,
            horizon: 40.0,
            rocof_filter: 0.1,
            tau: 40.0,
        }
    }

    /// Single machine, step ΔP = −0.1 on M = 2, D = 0.5, no governor:
    /// ω(t) = −0.2 (1 − e^{−t/4}).
    #[test]
    fn single_machine_step_analytic() {
        let model = fixtures::single_machine(2.0, 0.5, 0.0);
        let sys = crate::netmodel::assemble_open_loop(
            &model,
            &crate::devices::DeviceSet::empty(),
            &fixtures::default_weights(),
            ViMode::Following,
        )
        .unwrap();
        let fault = FaultSpec::step("1", -0.1);
        let traj = simulate_linear(&sys, None, &fault, &long_opts()).unwrap();
        for (i, &t) in traj.times.iter().enumerate().step_by(500) {
            let expected = -0.2 * (1.0 - (-0.25 * t).exp());
            assert!(
                (traj.omega[0][i] - expected).abs() < 1e-8,
                "t={t}: {} vs {expected}",
                traj.omega[0][i]
            );
        }
        // Raw RoCoF peaks at t = 0⁺ with ΔP/M = 0.05.
        assert_relative_eq!(traj.rocof_raw[0][0], -0.05, epsilon = 1e-12);
        let report = metrics(&traj, &fixtures::default_weights(), 40.0).unwrap();
        assert_relative_eq!(report.nadir[0], 0.2, max_relative = 1e-4);
        let raw_peak = traj.rocof_raw[0].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert_relative_eq!(raw_peak, 0.05, max_relative = 1e-9);
    }

    /// Same machine under an impulse: ω(t) = −0.05 e^{−t/4} and
    /// E_{∞,ω} = 0.005.
    #[test]
    fn single_machine_impulse_analytic() {
        let model = fixtures::single_machine(2.0, 0.5, 0.0);
        let sys = crate::netmodel::assemble_open_loop(
            &model,
            &crate::devices::DeviceSet::empty(),
            &fixtures::default_weights(),
            ViMode::Following,
        )
        .unwrap();
        let fault = FaultSpec::impulse("1", -0.1);
        let traj = simulate_linear(&sys, None, &fault, &long_opts()).unwrap();
        for (i, &t) in traj.times.iter().enumerate().step_by(700) {
            let expected = -0.05 * (-0.25 * t).exp();
            assert!((traj.omega[0][i] - expected).abs() < 1e-9);
        }
        let report = metrics(&traj, &fixtures::default_weights(), 40.0).unwrap();
        assert!((report.energy_omega - 0.005).abs() < 1e-8);
    }

    #[test]
    fn linear_and_nonlinear_agree_for_small_steps() {
        let model = fixtures::three_bus();
        let devices = fixtures::three_bus_devices();
        for mode in [ViMode::Following, ViMode::Forming] {
            let alloc = fixtures::feasible_allocation(&devices, mode);
            let sys = fixtures::three_bus_system(mode);
            let k = crate::devices::gains_to_feedback(&alloc, mode).unwrap();
            let fault = FaultSpec::step("1", 1e-3);
            let opts = SimOptions::default();
            let lin = simulate_linear(&sys, Some(&k), &fault, &opts).unwrap();
            let non = simulate_nonlinear(&model, &devices, mode, &alloc, &fault, &opts).unwrap();
            let mut worst = 0.0f64;
            for k in 0..lin.omega.len() {
                for i in 0..lin.times.len() {
                    worst = worst.max((lin.omega[k][i] - non.omega[k][i]).abs());
                }
            }
            for d in 0..lin.p_vi.len() {
                for i in 0..lin.times.len() {
                    worst = worst.max((lin.p_vi[d][i] - non.p_vi[d][i]).abs());
                }
            }
            assert!(worst < 1e-5, "{mode}: max deviation {worst}");
        }
    }

    #[test]
    fn metrics_zero_trajectory() {
        let traj = Trajectory {
            times: (0..11).map(|i| i as f64 * 0.1).collect(),
            machine_buses: vec!["1".into()],
            device_buses: vec![],
            omega: vec![vec![0.0; 11]],
            rocof_raw: vec![vec![0.0; 11]],
            rocof_filtered: vec![vec![0.0; 11]],
            p_gov: vec![vec![0.0; 11]],
            p_vi: vec![],
            states: vec![],
            fault: FaultSpec::step("1", -0.1),
        };
        let report = metrics(&traj, &fixtures::default_weights(), 1.0).unwrap();
        assert_eq!(report.nadir[0], 0.0);
        assert_eq!(report.energy_omega, 0.0);
        assert_eq!(report.weighted_cost, 0.0);
        assert_eq!(report.agg_peak_p_vi, 0.0);
    }

    /// J from `metrics` equals an independently assembled quadrature of
    /// the weighted integrand.
    #[test]
    fn weighted_cost_matches_direct_quadrature() {
        let sys = fixtures::three_bus_system(ViMode::Following);
        let devices = fixtures::three_bus_devices();
        let alloc = fixtures::feasible_allocation(&devices, ViMode::Following);
        let k = crate::devices::gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let fault = FaultSpec::step("1", -0.2);
        let opts = SimOptions::default();
        let traj = simulate_linear(&sys, Some(&k), &fault, &opts).unwrap();
        let w = fixtures::default_weights();
        let report = metrics(&traj, &w, opts.tau).unwrap();

        let integrand = |i: usize| -> f64 {
            let s2 = |xs: &Vec<Vec<f64>>| xs.iter().map(|s| s[i] * s[i]).sum::<f64>();
            w.omega * s2(&traj.omega)
                + w.rocof * s2(&traj.rocof_raw)
                + w.p_gov * s2(&traj.p_gov)
                + w.p_vi * s2(&traj.p_vi)
        };
        let mut direct = 0.0;
        for i in 1..traj.times.len() {
            direct += 0.5 * (traj.times[i] - traj.times[i - 1]) * (integrand(i - 1) + integrand(i));
        }
        assert_relative_eq!(report.weighted_cost, direct, max_relative = 1e-8);
    }

    /// Summing simulated impulse energies of the performance output over
    /// all ports reproduces the squared H2 norm.
    #[test]
    fn impulse_energy_consistency_with_h2() {
        for mode in [ViMode::Following, ViMode::Forming] {
            let devices = fixtures::three_bus_devices();
            let sys = fixtures::three_bus_system(mode);
            let alloc = fixtures::feasible_allocation(&devices, mode);
            let k = crate::devices::gains_to_feedback(&alloc, mode).unwrap();
            let cl = crate::devices::close_loop(&sys, &k).unwrap();
            let h2 = h2_norm_squared(&cl).unwrap();

            let opts = long_opts();
            let mut total = 0.0;
            for port in sys.port_buses.clone() {
                let fault = FaultSpec::impulse(&port, 1.0);
                let traj = simulate_linear(&sys, Some(&k), &fault, &opts).unwrap();
                // Reconstruct y_p = C_p x from the recorded states.
                let n = sys.n_states();
                let yp_sq = |i: usize| -> f64 {
                    let x = DVector::from_fn(n, |j, _| traj.states[j].1[i]);
                    (&cl.c_perf * x).norm_squared()
                };
                for i in 1..traj.times.len() {
                    total +=
                        0.5 * (traj.times[i] - traj.times[i - 1]) * (yp_sq(i - 1) + yp_sq(i));
                }
            }
            assert_relative_eq!(total, h2, max_relative = 1e-4);
        }
    }

    /// A first-order low-pass cannot amplify peaks.
    #[test]
    fn filtered_rocof_peak_below_raw() {
        let sys = fixtures::three_bus_system(ViMode::Following);
        let fault = FaultSpec::step("1", -0.2);
        let traj = simulate_linear(&sys, None, &fault, &SimOptions::default()).unwrap();
        for k in 0..traj.omega.len() {
            let raw = traj.rocof_raw[k].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let filt = traj.rocof_filtered[k]
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(filt <= raw + 1e-12, "machine {k}: {filt} > {raw}");
        }
    }

    #[test]
    fn energies_monotone_in_tau() {
        let sys = fixtures::three_bus_system(ViMode::Following);
        let fault = FaultSpec::step("1", -0.2);
        let traj = simulate_linear(&sys, None, &fault, &SimOptions::default()).unwrap();
        let w = fixtures::default_weights();
        let mut last = 0.0;
        for tau in [2.0, 5.0, 10.0, 15.0, 20.0] {
            let r = metrics(&traj, &w, tau).unwrap();
            assert!(r.energy_omega + 1e-15 >= last);
            last = r.energy_omega;
        }
    }

    /// Grid-independence: halving dt moves every reported metric by less
    /// than 1e-3 relative.
    #[test]
    fn metrics_grid_independent() {
        let sys = fixtures::three_bus_system(ViMode::Following);
        let devices = fixtures::three_bus_devices();
        let alloc = fixtures::feasible_allocation(&devices, ViMode::Following);
        let k = crate::devices::gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let fault = FaultSpec::step("2", -0.2);
        let w = fixtures::default_weights();
        let coarse = {
            let o = SimOptions::default();
            metrics(&simulate_linear(&sys, Some(&k), &fault, &o).unwrap(), &w, o.tau).unwrap()
        };
        let fine = {
            let o = SimOptions {
                dt: 5e-4,
                ..SimOptions::default()
            };
            metrics(&simulate_linear(&sys, Some(&k), &fault, &o).unwrap(), &w, o.tau).unwrap()
        };
        let pairs = [
            (coarse.nadir[0], fine.nadir[0]),
            (coarse.max_rocof[0], fine.max_rocof[0]),
            (coarse.energy_omega, fine.energy_omega),
            (coarse.energy_rocof, fine.energy_rocof),
            (coarse.weighted_cost, fine.weighted_cost),
            (coarse.peak_p_vi[0], fine.peak_p_vi[0]),
        ];
        for (c, f) in pairs {
            assert!(
                (c - f).abs() <= 1e-3 * f.abs().max(1e-12),
                "dt sensitivity: {c} vs {f}"
            );
        }
    }

    #[test]
    fn study_errors_vanish_in_small_signal_limit() {
        let model = fixtures::three_bus();
        let devices = fixtures::three_bus_devices();
        let mode = ViMode::Forming;
        let alloc = fixtures::feasible_allocation(&devices, mode);
        let grid = StudyGrid {
            ports: vec!["1".into()],
            magnitudes: vec![1e-3],
        };
        let report = linearization_error_study(
            &model,
            &devices,
            mode,
            &alloc,
            &fixtures::default_weights(),
            &grid,
            &SimOptions::default(),
        )
        .unwrap();
        for s in &report.samples {
            for e in s.errors().into_iter().flatten() {
                assert!(e.abs() < 0.5, "error {e}% at magnitude 1e-3");
            }
        }
    }

    /// Desk-scale analog of the concentration band: with steps up to
    /// ±0.25 pu, at least 80% of the defined errors stay within ±10%.
    #[test]
    fn study_concentration_band() {
        let model = fixtures::three_bus();
        let devices = fixtures::three_bus_devices();
        let mode = ViMode::Following;
        let alloc = fixtures::feasible_allocation(&devices, mode);
        let grid = StudyGrid::symmetric(&model, 0.25, 5);
        let report = linearization_error_study(
            &model,
            &devices,
            mode,
            &alloc,
            &fixtures::default_weights(),
            &grid,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(report.diverged, 0);
        assert!(
            report.fraction_within(10.0) >= 0.8,
            "only {:.0}% within the ±10% band",
            100.0 * report.fraction_within(10.0)
        );
        for (_, bins) in &report.histograms {
            let total: usize = bins.iter().map(|b| b.count).sum();
            assert!(total > 0);
            for b in bins {
                assert_relative_eq!(b.hi - b.lo, 5.0, epsilon = 1e-12);
            }
        }
    }

    /// Signed nadir deviations for ± steps at a linearly responding port
    /// are nearly antisymmetric (odd-order error dominance).
    #[test]
    fn study_sign_antisymmetry() {
        let model = fixtures::three_bus();
        let devices = fixtures::three_bus_devices();
        let mode = ViMode::Forming;
        let alloc = fixtures::feasible_allocation(&devices, mode);
        let grid = StudyGrid {
            ports: vec!["1".into()],
            magnitudes: vec![-0.2, 0.2],
        };
        let report = linearization_error_study(
            &model,
            &devices,
            mode,
            &alloc,
            &fixtures::default_weights(),
            &grid,
            &SimOptions::default(),
        )
        .unwrap();
        let neg = report.samples[0].nadir_err.unwrap();
        let pos = report.samples[1].nadir_err.unwrap();
        let scale = neg.abs().max(pos.abs()).max(1e-12);
        assert!(
            (neg + pos).abs() <= 0.2 * scale.max(0.5),
            "errors not antisymmetric: {neg} vs {pos}"
        );
    }

    #[test]
    fn comparison_table_shape_and_direction() {
        let model = fixtures::three_bus();
        let devices = fixtures::three_bus_devices();
        let cons = crate::optimizer::ConstraintSet::uniform(1, 0.42, 0.04, 0.0185, 1e-3).unwrap();
        let fault = FaultSpec::step("1", -0.2);
        let table = compare_scenarios(
            &model,
            &devices,
            &fixtures::default_weights(),
            &cons,
            &OptimizerOptions::default(),
            &fault,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(table.columns.len(), 3);
        assert_eq!(table.columns[0].name, "no-vi");
        assert!(table.columns[0].total_inertia.is_none());
        assert!(table.columns[0].allocation.is_none());
        assert!(table.columns[0].metrics.peak_p_vi.is_empty());

        let h2_base = table.columns[0].metrics.h2_norm.unwrap();
        for col in &table.columns[1..] {
            assert!(col.metrics.h2_norm.unwrap() <= h2_base);
            assert!(col.total_inertia.unwrap() >= 0.0);
        }

        let text = table.render_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + COMPARISON_ROWS.len());
        for (line, label) in lines[1..].iter().zip(COMPARISON_ROWS.iter()) {
            assert!(line.trim_start().starts_with(label.split(' ').next().unwrap()));
        }
        // The no-VI column renders dashes for device quantities.
        assert!(lines[1].contains('-'));
    }
}
