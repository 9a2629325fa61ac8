//! Nonlinear companion of the assembled linearization: identical state
//! vector and dynamics except that line flows are sinusoidal and the PLL
//! synchronization input is `sin(θ̂ − θ_bus)`.
//!
//! Working in deviations from the operating point keeps the equilibrium
//! exact: a line carries `b (sin(θ⁰_ij + Δ_ij) − sin(θ⁰_ij))`, which
//! vanishes at zero deviation regardless of how θ⁰ was computed. Algebraic
//! bus angles are solved by Newton iteration at every evaluation, so the
//! right-hand side stays a pure function of its arguments.

use nalgebra::{DMatrix, DVector};

use crate::devices::{Allocation, DeviceSet, PllParams, ViMode};
use crate::error::{Error, Result};

use super::{equilibrium, BusKind, Layout, NetworkModel};

/// Deviation power flow over a line: `b (sin(θ⁰_diff + Δ) − sin(θ⁰_diff))`.
pub fn sine_flow(susceptance: f64, op_diff: f64, deviation_diff: f64) -> f64 {
    susceptance * ((op_diff + deviation_diff).sin() - op_diff.sin())
}

#[derive(Debug, Clone)]
enum NlDevice {
    Following {
        bus_node: usize,
        pll: PllParams,
        m_virt: f64,
        d_virt: f64,
    },
    Forming {
        bus_node: usize,
        node: usize,
        coupling: f64,
        m_virt: f64,
        d_virt: f64,
    },
}

/// Nonlinear closed-loop model sharing the assembled state labeling.
#[derive(Debug, Clone)]
pub struct NonlinearModel {
    layout: Layout,
    /// Per node: (neighbor node, susceptance, θ⁰ self − θ⁰ neighbor).
    neighbors: Vec<Vec<(usize, f64, f64)>>,
    machines: Vec<super::Machine>,
    machine_node: Vec<usize>,
    devices: Vec<NlDevice>,
    /// Disturbance ports as (node, strength), in model order.
    ports: Vec<(usize, f64)>,
    /// Algebraic nodes (every bus without a machine), in solve order.
    alg_nodes: Vec<usize>,
    alg_pos: Vec<Option<usize>>,
    device_buses: Vec<String>,
    port_buses: Vec<String>,
}

impl NonlinearModel {
    pub fn new(
        model: &NetworkModel,
        devices: &DeviceSet,
        mode: ViMode,
        alloc: &Allocation,
    ) -> Result<Self> {
        model.validate()?;
        devices.validate()?;
        if alloc.len() != devices.len() {
            return Err(Error::Dimension(format!(
                "allocation has {} entries for {} devices",
                alloc.len(),
                devices.len()
            )));
        }
        let idx = model.bus_index_map();
        let n_b = model.n_buses();
        let forming = mode == ViMode::Forming;
        let n_nodes = n_b + if forming { devices.len() } else { 0 };

        let op = equilibrium(model)?;
        let mut theta0 = op.angles.clone();

        let mut neighbors: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n_nodes];
        let add_edge = |nbrs: &mut Vec<Vec<(usize, f64, f64)>>, i: usize, j: usize, b: f64, t0: &[f64]| {
            nbrs[i].push((j, b, t0[i] - t0[j]));
            nbrs[j].push((i, b, t0[j] - t0[i]));
        };
        let edges = model.edge_list();
        // theta0 extended for forming nodes (they sit at the host angle).
        if forming {
            for p in &devices.devices {
                theta0.push(op.angles[idx[p.bus.as_str()]]);
            }
        }
        for (i, j, b) in edges {
            add_edge(&mut neighbors, i, j, b, &theta0);
        }

        let mut nl_devices = Vec::with_capacity(devices.len());
        for (i, (p, entry)) in devices.devices.iter().zip(&alloc.entries).enumerate() {
            if entry.bus != p.bus {
                return Err(Error::Dimension(format!(
                    "allocation entry {} is for bus {}, device sits at {}",
                    i, entry.bus, p.bus
                )));
            }
            let Some(&bus_node) = idx.get(p.bus.as_str()) else {
                return Err(Error::schema(
                    format!("devices[{i}].bus"),
                    format!("unknown bus id {}", p.bus),
                ));
            };
            if model.buses[bus_node].kind != BusKind::ViCandidate {
                return Err(Error::schema(
                    format!("devices[{i}].bus"),
                    format!("bus {} is not a vi-candidate bus", p.bus),
                ));
            }
            if forming {
                if !(entry.m_virt > 0.0) {
                    return Err(Error::Invalid(
                        "inertia must be positive for grid-forming".into(),
                    ));
                }
                let node = n_b + i;
                add_edge(&mut neighbors, bus_node, node, p.coupling, &theta0);
                nl_devices.push(NlDevice::Forming {
                    bus_node,
                    node,
                    coupling: p.coupling,
                    m_virt: entry.m_virt,
                    d_virt: entry.d_virt,
                });
            } else {
                if entry.m_virt < 0.0 || entry.d_virt < 0.0 {
                    return Err(Error::Invalid("gains must be nonnegative".into()));
                }
                nl_devices.push(NlDevice::Following {
                    bus_node,
                    pll: p.pll,
                    m_virt: entry.m_virt,
                    d_virt: entry.d_virt,
                });
            }
        }

        let machine_node: Vec<usize> = model
            .machines
            .iter()
            .map(|m| idx[m.bus.as_str()])
            .collect();
        let ports: Vec<(usize, f64)> = model
            .disturbances
            .iter()
            .map(|p| (idx[p.bus.as_str()], p.strength))
            .collect();

        // Every bus without a machine is algebraic; forming internal nodes
        // are dynamic states.
        let mut alg_pos = vec![None; n_nodes];
        let mut alg_nodes = Vec::new();
        for node in 0..n_b {
            if !machine_node.contains(&node) {
                alg_pos[node] = Some(alg_nodes.len());
                alg_nodes.push(node);
            }
        }

        Ok(NonlinearModel {
            layout: Layout::new(model.machines.len(), devices.len(), mode),
            neighbors,
            machines: model.machines.clone(),
            machine_node,
            devices: nl_devices,
            ports,
            alg_nodes,
            alg_pos,
            device_buses: devices.buses(),
            port_buses: model.disturbances.iter().map(|p| p.bus.clone()).collect(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.layout.n_states
    }

    pub fn n_ports(&self) -> usize {
        self.ports.len()
    }

    pub fn speed_index(&self, machine: usize) -> usize {
        self.layout.speed(machine)
    }

    pub fn governor_index(&self, machine: usize) -> usize {
        self.layout.governor(machine)
    }

    pub fn device_state_index(&self, device: usize, local: usize) -> usize {
        self.layout.device(device, local)
    }

    pub fn machine_buses(&self) -> Vec<String> {
        self.machines.iter().map(|m| m.bus.clone()).collect()
    }

    pub fn device_buses(&self) -> &[String] {
        &self.device_buses
    }

    pub fn port_buses(&self) -> &[String] {
        &self.port_buses
    }

    pub fn n_machines(&self) -> usize {
        self.machines.len()
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.layout.labels().iter().map(|l| l.to_string()).collect()
    }

    /// Angle deviation (relative frame) of a dynamic node.
    fn dynamic_angle(&self, node: usize, x: &DVector<f64>) -> Option<f64> {
        if let Some(k) = self.machine_node.iter().position(|&m| m == node) {
            return Some(match self.layout.rel_angle(k) {
                Some(i) => x[i],
                None => 0.0,
            });
        }
        for (i, d) in self.devices.iter().enumerate() {
            if let NlDevice::Forming { node: f, .. } = d {
                if *f == node {
                    return Some(x[self.layout.device(i, 0)]);
                }
            }
        }
        None
    }

    /// Injections at algebraic nodes from device lags and disturbances.
    fn algebraic_injections(&self, x: &DVector<f64>, eta: &DVector<f64>) -> Vec<f64> {
        let mut p = vec![0.0; self.alg_nodes.len()];
        for (i, d) in self.devices.iter().enumerate() {
            if let NlDevice::Following { bus_node, .. } = d {
                // Lag state holds absorbed power.
                p[self.alg_pos[*bus_node].unwrap()] -= x[self.layout.device(i, 3)];
            }
        }
        for (j, &(node, strength)) in self.ports.iter().enumerate() {
            if let Some(pos) = self.alg_pos[node] {
                p[pos] += strength * eta[j];
            }
        }
        p
    }

    /// Newton solve of the algebraic power balances under sine coupling.
    fn solve_algebraic(&self, x: &DVector<f64>, eta: &DVector<f64>) -> Result<Vec<f64>> {
        let nv = self.alg_nodes.len();
        if nv == 0 {
            return Ok(Vec::new());
        }
        let p = self.algebraic_injections(x, eta);
        let mut theta = vec![0.0; nv];
        let angle_of = |node: usize, theta: &[f64], x: &DVector<f64>| -> f64 {
            match self.alg_pos[node] {
                Some(pos) => theta[pos],
                None => self.dynamic_angle(node, x).expect("node is dynamic"),
            }
        };

        for _ in 0..50 {
            let mut residual = DVector::<f64>::zeros(nv);
            let mut jac = DMatrix::<f64>::zeros(nv, nv);
            for (row, &v) in self.alg_nodes.iter().enumerate() {
                let tv = theta[row];
                let mut r = p[row];
                for &(u, b, d0) in &self.neighbors[v] {
                    let tu = angle_of(u, &theta, x);
                    r -= sine_flow(b, d0, tv - tu);
                    let slope = b * (d0 + tv - tu).cos();
                    jac[(row, row)] -= slope;
                    if let Some(col) = self.alg_pos[u] {
                        jac[(row, col)] += slope;
                    }
                }
                residual[row] = r;
            }
            if residual.amax() < 1e-12 {
                return Ok(theta);
            }
            let step = jac
                .lu()
                .solve(&(-&residual))
                .ok_or_else(|| Error::Singular("algebraic network Jacobian".into()))?;
            for (t, s) in theta.iter_mut().zip(step.iter()) {
                *t += s;
            }
        }
        Err(Error::Numerical(
            "algebraic network solve did not converge".into(),
        ))
    }

    /// Net deviation power leaving a dynamic node.
    fn node_outflow(&self, node: usize, own_angle: f64, theta: &[f64], x: &DVector<f64>) -> f64 {
        self.neighbors[node]
            .iter()
            .map(|&(u, b, d0)| {
                let tu = match self.alg_pos[u] {
                    Some(pos) => theta[pos],
                    None => self.dynamic_angle(u, x).expect("node is dynamic"),
                };
                sine_flow(b, d0, own_angle - tu)
            })
            .sum()
    }

    /// State derivative and per-device injected power at one point.
    pub fn eval(&self, x: &DVector<f64>, eta: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>)> {
        if x.len() != self.layout.n_states {
            return Err(Error::Dimension(format!(
                "state has {} entries, model has {}",
                x.len(),
                self.layout.n_states
            )));
        }
        if eta.len() != self.ports.len() {
            return Err(Error::Dimension(format!(
                "disturbance vector has {} entries for {} ports",
                eta.len(),
                self.ports.len()
            )));
        }
        let theta = self.solve_algebraic(x, eta)?;
        let lay = &self.layout;
        let mut dx = DVector::<f64>::zeros(lay.n_states);
        let omega_ref = x[lay.speed(0)];

        for (k, machine) in self.machines.iter().enumerate() {
            let node = self.machine_node[k];
            let own = match lay.rel_angle(k) {
                Some(i) => x[i],
                None => 0.0,
            };
            if let Some(i) = lay.rel_angle(k) {
                dx[i] = x[lay.speed(k)] - omega_ref;
            }
            let mut acc = -machine.damping * x[lay.speed(k)]
                - self.node_outflow(node, own, &theta, x)
                + x[lay.governor(k)];
            for (j, &(pnode, strength)) in self.ports.iter().enumerate() {
                if pnode == node {
                    acc += strength * eta[j];
                }
            }
            dx[lay.speed(k)] = acc / machine.inertia;
            dx[lay.governor(k)] = (-x[lay.governor(k)]
                - machine.droop_gain * x[lay.speed(k)])
                / machine.governor_time_constant;
        }

        let mut p_vi = vec![0.0; self.devices.len()];
        for (i, d) in self.devices.iter().enumerate() {
            match d {
                NlDevice::Following {
                    bus_node,
                    pll,
                    m_virt,
                    d_virt,
                } => {
                    let o = lay.device(i, 0);
                    let theta_bus = theta[self.alg_pos[*bus_node].unwrap()];
                    let v_q = (x[o] - theta_bus).sin();
                    let omega_hat_dot =
                        (-x[o + 1] - pll.k_p * v_q - pll.k_i * x[o + 2]) / pll.tau;
                    dx[o] = x[o + 1] - omega_ref;
                    dx[o + 1] = omega_hat_dot;
                    dx[o + 2] = v_q;
                    // Set-point in the absorbed direction; the lag tracks it.
                    let setpoint = d_virt * x[o + 1] + m_virt * omega_hat_dot;
                    dx[o + 3] = (-x[o + 3] + setpoint) / pll.tau_foll;
                    p_vi[i] = -x[o + 3];
                }
                NlDevice::Forming {
                    bus_node,
                    node,
                    coupling,
                    m_virt,
                    d_virt,
                } => {
                    let o = lay.device(i, 0);
                    let theta_bus = theta[self.alg_pos[*bus_node].unwrap()];
                    let injection = sine_flow(*coupling, 0.0, x[o] - theta_bus);
                    dx[o] = x[o + 1] - omega_ref;
                    dx[o + 1] = (-d_virt * x[o + 1] - injection) / m_virt;
                    p_vi[i] = injection;
                    let _ = node;
                }
            }
        }
        Ok((dx, p_vi))
    }

    pub fn rhs(&self, x: &DVector<f64>, eta: &DVector<f64>) -> Result<DVector<f64>> {
        self.eval(x, eta).map(|(dx, _)| dx)
    }
}

/// One-shot evaluation of the nonlinear dynamics; builds the model and
/// evaluates at `state`. Prefer [`NonlinearModel`] inside loops.
pub fn nonlinear_rhs(
    model: &NetworkModel,
    devices: &DeviceSet,
    mode: ViMode,
    alloc: &Allocation,
    state: &DVector<f64>,
    disturbance: &DVector<f64>,
) -> Result<DVector<f64>> {
    NonlinearModel::new(model, devices, mode, alloc)?.rhs(state, disturbance)
}
