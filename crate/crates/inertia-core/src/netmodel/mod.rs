//! Declarative network description, operating point, and the linearized
//! swing-network model.
//!
//! The physical model is a balanced, per-unit, angle-domain network: machine
//! buses carry rotor angle, speed, and a first-order droop governor; passive
//! buses are algebraic and eliminated by Kron reduction; candidate buses may
//! host virtual-inertia devices. Line power flows are `b_ij sin(θ_i − θ_j)`
//! in the nonlinear model and their tangent at the operating point in the
//! linearization. The uniform angle-shift mode is removed by expressing all
//! angles relative to machine 1.

mod assemble;
mod nonlinear;

pub use assemble::{assemble_open_loop, LinearSystem, StateVar};
pub use nonlinear::{nonlinear_rhs, NonlinearModel};

pub(crate) use assemble::Layout;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusKind {
    Machine,
    ViCandidate,
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    /// Nominal net power injection, per unit (generation positive).
    #[serde(default)]
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: String,
    pub to: String,
    /// Line susceptance, per unit, strictly positive.
    pub susceptance: f64,
}

/// Synchronous machine surrogate: swing dynamics plus a first-order
/// droop governor `T_g ġ = -g - R⁻¹ ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Machine {
    pub bus: String,
    /// Inertia constant M, s²/(rad·pu).
    pub inertia: f64,
    /// Damping D, s/(rad·pu).
    pub damping: f64,
    /// Governor droop gain R⁻¹, pu/(rad/s). Zero disables primary control.
    #[serde(default)]
    pub droop_gain: f64,
    /// Governor time constant T_g in seconds.
    #[serde(default = "default_governor_tc")]
    pub governor_time_constant: f64,
}

fn default_governor_tc() -> f64 {
    0.5
}

fn default_strength() -> f64 {
    1.0
}

/// Where disturbances act and with what relative strength π.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbancePort {
    pub bus: String,
    #[serde(default = "default_strength")]
    pub strength: f64,
}

/// Base quantities used only when converting reports to MW / Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseValues {
    pub mva: f64,
    pub frequency_hz: f64,
}

impl Default for BaseValues {
    fn default() -> Self {
        BaseValues {
            mva: 1000.0,
            frequency_hz: 50.0,
        }
    }
}

/// The physical description of the study system. All quantities are per
/// unit except `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub machines: Vec<Machine>,
    #[serde(default)]
    pub disturbances: Vec<DisturbancePort>,
    #[serde(default)]
    pub base: BaseValues,
}

impl NetworkModel {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Index of a bus id, or a schema error naming the reference.
    pub fn bus_index(&self, id: &str) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::schema(format!("bus {id}"), "unknown bus id"))
    }

    pub fn bus_index_map(&self) -> HashMap<&str, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect()
    }

    /// Machine hosted at bus index `bus`, if any.
    pub fn machine_at(&self, bus: usize) -> Option<usize> {
        let id = &self.buses[bus].id;
        self.machines.iter().position(|m| &m.bus == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(Error::schema("buses", "at least one bus is required"));
        }
        if !(self.base.mva > 0.0) {
            return Err(Error::schema("base.mva", "base MVA must be positive"));
        }
        if !(self.base.frequency_hz > 0.0) {
            return Err(Error::schema(
                "base.frequency_hz",
                "nominal frequency must be positive",
            ));
        }
        let mut seen = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if b.id.is_empty() {
                return Err(Error::schema(format!("buses[{i}].id"), "empty bus id"));
            }
            if seen.insert(b.id.as_str(), i).is_some() {
                return Err(Error::schema(
                    format!("buses[{i}].id"),
                    format!("duplicate bus id {}", b.id),
                ));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if !(l.susceptance > 0.0) {
                return Err(Error::schema(
                    format!("lines[{i}].susceptance"),
                    "susceptance must be positive",
                ));
            }
            if l.from == l.to {
                return Err(Error::schema(
                    format!("lines[{i}]"),
                    "line endpoints must differ",
                ));
            }
            for (end, id) in [("from", &l.from), ("to", &l.to)] {
                if !seen.contains_key(id.as_str()) {
                    return Err(Error::schema(
                        format!("lines[{i}].{end}"),
                        format!("unknown bus id {id}"),
                    ));
                }
            }
        }
        if self.machines.is_empty() {
            return Err(Error::schema("machines", "at least one machine is required"));
        }
        let mut machine_buses = HashMap::new();
        for (i, m) in self.machines.iter().enumerate() {
            let Some(&bi) = seen.get(m.bus.as_str()) else {
                return Err(Error::schema(
                    format!("machines[{i}].bus"),
                    format!("unknown bus id {}", m.bus),
                ));
            };
            if self.buses[bi].kind != BusKind::Machine {
                return Err(Error::schema(
                    format!("machines[{i}].bus"),
                    format!("bus {} is not of kind machine", m.bus),
                ));
            }
            if machine_buses.insert(bi, i).is_some() {
                return Err(Error::schema(
                    format!("machines[{i}].bus"),
                    format!("more than one machine at bus {}", m.bus),
                ));
            }
            if !(m.inertia > 0.0) {
                return Err(Error::schema(
                    format!("machines[{i}].inertia"),
                    "inertia must be positive",
                ));
            }
            if m.damping < 0.0 {
                return Err(Error::schema(
                    format!("machines[{i}].damping"),
                    "damping must be nonnegative",
                ));
            }
            if m.droop_gain < 0.0 {
                return Err(Error::schema(
                    format!("machines[{i}].droop_gain"),
                    "droop gain must be nonnegative",
                ));
            }
            if !(m.governor_time_constant > 0.0) {
                return Err(Error::schema(
                    format!("machines[{i}].governor_time_constant"),
                    "governor time constant must be positive",
                ));
            }
        }
        for (i, b) in self.buses.iter().enumerate() {
            if b.kind == BusKind::Machine && !machine_buses.contains_key(&i) {
                return Err(Error::schema(
                    format!("buses[{i}]"),
                    format!("machine bus {} has no machine record", b.id),
                ));
            }
        }
        let mut port_buses = HashMap::new();
        for (i, d) in self.disturbances.iter().enumerate() {
            let Some(&bi) = seen.get(d.bus.as_str()) else {
                return Err(Error::schema(
                    format!("disturbances[{i}].bus"),
                    format!("unknown bus id {}", d.bus),
                ));
            };
            if !(d.strength > 0.0) {
                return Err(Error::schema(
                    format!("disturbances[{i}].strength"),
                    "disturbance strength must be positive",
                ));
            }
            if port_buses.insert(bi, i).is_some() {
                return Err(Error::schema(
                    format!("disturbances[{i}].bus"),
                    format!("duplicate disturbance port at bus {}", d.bus),
                ));
            }
        }
        if !self.is_connected() {
            return Err(Error::DisconnectedGraph);
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.buses.len();
        if n == 0 {
            return false;
        }
        let idx = self.bus_index_map();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            let (i, j) = (idx[l.from.as_str()], idx[l.to.as_str()]);
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Line endpoints as bus indices with raw susceptances.
    pub(crate) fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        let idx = self.bus_index_map();
        self.lines
            .iter()
            .map(|l| (idx[l.from.as_str()], idx[l.to.as_str()], l.susceptance))
            .collect()
    }
}

/// Parse and validate a network document.
pub fn load_network(text: &str) -> Result<NetworkModel> {
    let model: NetworkModel =
        serde_json::from_str(text).map_err(|e| Error::schema("network", e.to_string()))?;
    model.validate()?;
    Ok(model)
}

/// Nominal operating point from a DC power-flow solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Bus angles in radians; the first machine's bus is the reference (0).
    pub angles: Vec<f64>,
    /// Per-line flows `b_ij (θ_i − θ_j)`, ordered as `model.lines`.
    pub flows: Vec<f64>,
}

/// Weighted graph Laplacian over `n` nodes.
pub fn bus_laplacian(n: usize, edges: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for &(i, j, w) in edges {
        l[(i, i)] += w;
        l[(j, j)] += w;
        l[(i, j)] -= w;
        l[(j, i)] -= w;
    }
    l
}

/// Solve the DC power flow `L θ = p` with the first machine bus as angle
/// reference and slack; the slack absorbs any injection residual.
pub fn equilibrium(model: &NetworkModel) -> Result<OperatingPoint> {
    model.validate()?;
    let n = model.n_buses();
    let reference = model.bus_index(&model.machines[0].bus)?;
    let l = bus_laplacian(n, &model.edge_list());

    let others: Vec<usize> = (0..n).filter(|&i| i != reference).collect();
    let mut angles = vec![0.0; n];
    if !others.is_empty() {
        let l_red = l.select_rows(&others).select_columns(&others);
        let p_red = DVector::from_iterator(others.len(), others.iter().map(|&i| model.buses[i].power));
        let theta = l_red
            .lu()
            .solve(&p_red)
            .ok_or_else(|| Error::Singular("reduced Laplacian (disconnected network)".into()))?;
        for (k, &i) in others.iter().enumerate() {
            angles[i] = theta[k];
        }
    }
    let idx = model.bus_index_map();
    let flows = model
        .lines
        .iter()
        .map(|line| {
            let (i, j) = (idx[line.from.as_str()], idx[line.to.as_str()]);
            line.susceptance * (angles[i] - angles[j])
        })
        .collect();
    Ok(OperatingPoint { angles, flows })
}

/// Result of eliminating algebraic nodes from a Laplacian.
#[derive(Debug, Clone)]
pub struct KronReduction {
    /// Schur complement `L_rr − L_re L_ee⁻¹ L_er`, rows/columns in the order
    /// of the `retained` argument.
    pub reduced: DMatrix<f64>,
    /// Maps injections at all original nodes onto the retained nodes:
    /// `p_retained_effective = injection_map · p_full`.
    pub injection_map: DMatrix<f64>,
}

/// Eliminate all nodes not listed in `retained` by Schur complement.
pub fn kron_reduce(l: &DMatrix<f64>, retained: &[usize]) -> Result<KronReduction> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::Dimension("kron_reduce expects a square matrix".into()));
    }
    let mut is_retained = vec![false; n];
    for &r in retained {
        if r >= n {
            return Err(Error::Dimension(format!("retained index {r} out of range")));
        }
        if is_retained[r] {
            return Err(Error::Dimension(format!("retained index {r} repeated")));
        }
        is_retained[r] = true;
    }
    let eliminated: Vec<usize> = (0..n).filter(|&i| !is_retained[i]).collect();

    let nr = retained.len();
    if eliminated.is_empty() {
        let mut injection_map = DMatrix::zeros(nr, n);
        for (row, &r) in retained.iter().enumerate() {
            injection_map[(row, r)] = 1.0;
        }
        return Ok(KronReduction {
            reduced: l.select_rows(retained).select_columns(retained),
            injection_map,
        });
    }

    let l_rr = l.select_rows(retained).select_columns(retained);
    let l_re = l.select_rows(retained).select_columns(&eliminated);
    let l_er = l.select_rows(&eliminated).select_columns(retained);
    let l_ee = l.select_rows(&eliminated).select_columns(&eliminated);

    let lu = l_ee.lu();
    let x = lu
        .solve(&l_er)
        .ok_or_else(|| Error::Singular("eliminated block in Kron reduction".into()))?;
    let reduced = &l_rr - &l_re * &x;

    // p_eff = p_r − L_re L_ee⁻¹ p_e
    let spread = lu
        .solve(&DMatrix::identity(eliminated.len(), eliminated.len()))
        .ok_or_else(|| Error::Singular("eliminated block in Kron reduction".into()))?;
    let carry = -&l_re * spread;
    let mut injection_map = DMatrix::zeros(nr, n);
    for (row, &r) in retained.iter().enumerate() {
        injection_map[(row, r)] = 1.0;
    }
    for (col, &e) in eliminated.iter().enumerate() {
        for row in 0..nr {
            injection_map[(row, e)] = carry[(row, col)];
        }
    }
    Ok(KronReduction {
        reduced,
        injection_map,
    })
}

/// Nonnegative penalties on the four performance channels; square roots
/// scale the corresponding performance-output rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerformanceWeights {
    /// r_ω on generator frequency deviations.
    pub omega: f64,
    /// r_ω̇ on generator RoCoF.
    pub rocof: f64,
    /// r_G on governor power injections.
    pub p_gov: f64,
    /// r_VI on virtual-inertia power injections.
    pub p_vi: f64,
}

impl PerformanceWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.omega, self.rocof, self.p_gov, self.p_vi];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Invalid(
                "performance weights must be finite and nonnegative".into(),
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Invalid(
                "at least one performance weight must be positive".into(),
            ));
        }
        Ok(())
    }
}
