//! Open-loop linearization of the swing network with appended device blocks.
//!
//! Construction: take the DC operating point, weight every line by
//! `b_ij cos(θ⁰_i − θ⁰_j)` (the tangent of the sine coupling), append one
//! internal voltage node per grid-forming device, Kron-eliminate passive
//! buses that host neither device nor disturbance port, and solve the
//! remaining algebraic bus angles affinely in the dynamic states and bus
//! injections. Grid-following power lags make the device injection a state,
//! so no algebraic loop appears. All angle states are stored relative to
//! machine 1, which removes the uniform angle-shift zero mode.
//!
//! Measurement and performance outputs are pure state maps: RoCoF rows
//! substitute the speed state equation, and direct disturbance feedthrough
//! to outputs is dropped (it would make the H2 norm unbounded).

use nalgebra::DMatrix;

use crate::devices::{device_block, DeviceSet, GridFollowingVi, GridFormingVi, ViDevice, ViMode};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue_magnitude, spectral_abscissa};

use super::{bus_laplacian, equilibrium, kron_reduce, BusKind, NetworkModel, PerformanceWeights};

/// Semantic tag of one state-vector entry. Machine and device indices refer
/// to positions in the model's machine list and the device set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateVar {
    /// Rotor angle of machine `k` relative to machine 0 (k ≥ 1).
    RelAngle { machine: usize },
    Speed { machine: usize },
    Governor { machine: usize },
    /// PLL angle estimate, relative to machine 0's rotor angle.
    PllAngle { device: usize },
    PllSpeed { device: usize },
    PllIntegrator { device: usize },
    /// Power-source lag state, absorbed-power convention.
    PowerLag { device: usize },
    /// Grid-forming internal angle relative to machine 0's rotor angle.
    ViAngle { device: usize },
    ViSpeed { device: usize },
}

impl std::fmt::Display for StateVar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateVar::RelAngle { machine } => write!(f, "rel_angle(m{machine})"),
            StateVar::Speed { machine } => write!(f, "omega(m{machine})"),
            StateVar::Governor { machine } => write!(f, "gov(m{machine})"),
            StateVar::PllAngle { device } => write!(f, "pll_angle(d{device})"),
            StateVar::PllSpeed { device } => write!(f, "pll_speed(d{device})"),
            StateVar::PllIntegrator { device } => write!(f, "pll_integrator(d{device})"),
            StateVar::PowerLag { device } => write!(f, "power_lag(d{device})"),
            StateVar::ViAngle { device } => write!(f, "vi_angle(d{device})"),
            StateVar::ViSpeed { device } => write!(f, "vi_speed(d{device})"),
        }
    }
}

/// Index layout of the assembled state vector: machine angle differences,
/// machine speeds, governor states, then one block per device.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub n_machines: usize,
    pub n_devices: usize,
    pub mode: ViMode,
    pub n_states: usize,
    device_base: usize,
}

impl Layout {
    pub fn new(n_machines: usize, n_devices: usize, mode: ViMode) -> Self {
        let device_base = 3 * n_machines - 1;
        let n_states = device_base + Self::device_len_for(mode) * n_devices;
        Layout {
            n_machines,
            n_devices,
            mode,
            n_states,
            device_base,
        }
    }

    pub fn device_len_for(mode: ViMode) -> usize {
        match mode {
            ViMode::Following => 4,
            ViMode::Forming => 2,
        }
    }

    pub fn device_len(&self) -> usize {
        Self::device_len_for(self.mode)
    }

    /// Relative-angle state of machine `k`; machine 0 is the reference.
    pub fn rel_angle(&self, k: usize) -> Option<usize> {
        (k > 0).then(|| k - 1)
    }

    pub fn speed(&self, k: usize) -> usize {
        self.n_machines - 1 + k
    }

    pub fn governor(&self, k: usize) -> usize {
        2 * self.n_machines - 1 + k
    }

    /// `j`-th local state of device `i`.
    pub fn device(&self, i: usize, j: usize) -> usize {
        self.device_base + self.device_len() * i + j
    }

    pub fn labels(&self) -> Vec<StateVar> {
        let mut labels = Vec::with_capacity(self.n_states);
        for k in 1..self.n_machines {
            labels.push(StateVar::RelAngle { machine: k });
        }
        for k in 0..self.n_machines {
            labels.push(StateVar::Speed { machine: k });
        }
        for k in 0..self.n_machines {
            labels.push(StateVar::Governor { machine: k });
        }
        for i in 0..self.n_devices {
            match self.mode {
                ViMode::Following => {
                    labels.push(StateVar::PllAngle { device: i });
                    labels.push(StateVar::PllSpeed { device: i });
                    labels.push(StateVar::PllIntegrator { device: i });
                    labels.push(StateVar::PowerLag { device: i });
                }
                ViMode::Forming => {
                    labels.push(StateVar::ViAngle { device: i });
                    labels.push(StateVar::ViSpeed { device: i });
                }
            }
        }
        labels
    }
}

/// Open-loop linearization `ẋ = A x + B u + G η`, `y = C x`, `y_p = C_p x`
/// with semantic labels on every row and column.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_perf: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub state_labels: Vec<StateVar>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
    pub perf_labels: Vec<String>,
    pub mode: ViMode,
    pub machine_buses: Vec<String>,
    pub device_buses: Vec<String>,
    /// Buses of the disturbance ports, one per column of `G`.
    pub port_buses: Vec<String>,
    /// Spectral abscissa of the open-loop `A`. Negative means the loop is
    /// stable before any feedback; a grid-forming open loop is marginal by
    /// construction (pure integrators until the gains close the loop).
    pub open_loop_abscissa: f64,
    pub(crate) layout: Layout,
    /// Per-device power injection rows (injection convention, state map).
    pub(crate) p_vi_map: DMatrix<f64>,
}

impl LinearSystem {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_machines(&self) -> usize {
        self.machine_buses.len()
    }

    pub fn n_devices(&self) -> usize {
        self.device_buses.len()
    }

    pub fn n_disturbances(&self) -> usize {
        self.g.ncols()
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

    pub fn open_loop_stable(&self) -> bool {
        self.open_loop_abscissa < 0.0
    }

    /// Injection-convention power map of the devices: `p_vi = map · x`.
    pub fn p_vi_map(&self) -> &DMatrix<f64> {
        &self.p_vi_map
    }

    pub fn min_eigenvalue_magnitude(&self) -> f64 {
        min_eigenvalue_magnitude(&self.a)
    }

    pub fn state_names(&self) -> Vec<String> {
        self.state_labels.iter().map(|l| l.to_string()).collect()
    }
}

/// Assemble the open-loop linearization of `model` with the given devices
/// appended in `mode`, disturbance inputs on the model's ports, and
/// performance outputs scaled by the square roots of `weights`.
pub fn assemble_open_loop(
    model: &NetworkModel,
    devices: &DeviceSet,
    weights: &PerformanceWeights,
    mode: ViMode,
) -> Result<LinearSystem> {
    model.validate()?;
    devices.validate()?;
    weights.validate()?;

    let idx = model.bus_index_map();
    let mut device_bus = Vec::with_capacity(devices.len());
    for (i, d) in devices.devices.iter().enumerate() {
        let Some(&bi) = idx.get(d.bus.as_str()) else {
            return Err(Error::schema(
                format!("devices[{i}].bus"),
                format!("unknown bus id {}", d.bus),
            ));
        };
        if model.buses[bi].kind != BusKind::ViCandidate {
            return Err(Error::schema(
                format!("devices[{i}].bus"),
                format!("bus {} is not a vi-candidate bus", d.bus),
            ));
        }
        device_bus.push(bi);
    }

    let op = equilibrium(model)?;
    let n_b = model.n_buses();
    let n_m = model.machines.len();
    let n_dev = devices.len();
    let n_p = model.disturbances.len();
    let forming = mode == ViMode::Forming;
    let n_f = if forming { n_dev } else { 0 };

    // Line weights are the sine-coupling tangents at the operating point.
    let mut edges: Vec<(usize, usize, f64)> = model
        .edge_list()
        .into_iter()
        .map(|(i, j, b)| (i, j, b * (op.angles[i] - op.angles[j]).cos()))
        .collect();
    // A forming device's internal node sits at the host-bus angle, so the
    // coupling tangent is the raw effective susceptance.
    if forming {
        for (i, d) in devices.devices.iter().enumerate() {
            edges.push((device_bus[i], n_b + i, d.coupling));
        }
    }
    let l_full = bus_laplacian(n_b + n_f, &edges);

    let machine_node: Vec<usize> = model
        .machines
        .iter()
        .map(|m| idx[m.bus.as_str()])
        .collect();
    let port_node: Vec<usize> = model
        .disturbances
        .iter()
        .map(|p| idx[p.bus.as_str()])
        .collect();

    // Dynamic nodes: machine buses then forming internal nodes.
    let mut retained = machine_node.clone();
    if forming {
        retained.extend((0..n_dev).map(|i| n_b + i));
    }
    let nd = retained.len();

    // Algebraic retained nodes: device host buses, then ports at buses not
    // otherwise retained. Everything else is Kron-eliminated.
    let mut v_nodes: Vec<usize> = Vec::new();
    for &b in &device_bus {
        if !v_nodes.contains(&b) {
            v_nodes.push(b);
        }
    }
    for &b in &port_node {
        if !machine_node.contains(&b) && !v_nodes.contains(&b) {
            v_nodes.push(b);
        }
    }
    retained.extend(v_nodes.iter().copied());
    let nv = v_nodes.len();
    let v_pos = |node: usize| v_nodes.iter().position(|&v| v == node).unwrap();

    let l_hat = kron_reduce(&l_full, &retained)?.reduced;
    let l_dd = l_hat.view((0, 0), (nd, nd)).clone_owned();
    let l_dv = l_hat.view((0, nd), (nd, nv)).clone_owned();
    let l_vd = l_hat.view((nd, 0), (nv, nd)).clone_owned();
    let l_vv = l_hat.view((nd, nd), (nv, nv)).clone_owned();

    // θ_V = S_D θ_D + S_P P_V with S_D = -L_VV⁻¹ L_VD, S_P = L_VV⁻¹.
    let (s_d, s_p) = if nv > 0 {
        let lu = l_vv.lu();
        let s_d = -lu
            .solve(&l_vd)
            .ok_or_else(|| Error::Singular("algebraic bus block".into()))?;
        let s_p = lu
            .solve(&DMatrix::identity(nv, nv))
            .ok_or_else(|| Error::Singular("algebraic bus block".into()))?;
        (s_d, s_p)
    } else {
        (DMatrix::zeros(0, nd), DMatrix::zeros(0, 0))
    };
    let l_eff = &l_dd + &l_dv * &s_d;
    let t_spread = -&l_dv * &s_p; // maps algebraic injections into dynamic-node balances

    let layout = Layout::new(n_m, n_dev, mode);
    let n = layout.n_states;

    // θ_D as a state map: machine 0 is the reference (zero row).
    let mut theta_d = DMatrix::zeros(nd, n);
    for k in 1..n_m {
        theta_d[(k, layout.rel_angle(k).unwrap())] = 1.0;
    }
    if forming {
        for i in 0..n_dev {
            theta_d[(n_m + i, layout.device(i, 0))] = 1.0;
        }
    }

    // Algebraic-bus injections: following-device lags (absorbed power) and
    // disturbances at algebraic buses.
    let mut n_x = DMatrix::zeros(nv, n);
    if !forming {
        for i in 0..n_dev {
            n_x[(v_pos(device_bus[i]), layout.device(i, 3))] = -1.0;
        }
    }
    let mut n_eta = DMatrix::zeros(nv, n_p);
    for (j, port) in model.disturbances.iter().enumerate() {
        let b = port_node[j];
        if !machine_node.contains(&b) {
            n_eta[(v_pos(b), j)] = port.strength;
        }
    }
    let theta_v = &s_d * &theta_d + &s_p * &n_x; // nv × n state map
    let theta_v_eta = &s_p * &n_eta; // nv × n_p disturbance map

    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b_mat = DMatrix::<f64>::zeros(n, n_dev);
    let mut g = DMatrix::<f64>::zeros(n, n_p);

    let flow_state = &l_eff * &theta_d - &t_spread * &n_x; // nd × n
    let flow_eta = -&t_spread * &n_eta; // nd × n_p

    for (k, machine) in model.machines.iter().enumerate() {
        let m_inv = 1.0 / machine.inertia;
        if let Some(row) = layout.rel_angle(k) {
            a[(row, layout.speed(k))] = 1.0;
            a[(row, layout.speed(0))] -= 1.0;
        }
        let sp = layout.speed(k);
        for col in 0..n {
            a[(sp, col)] -= m_inv * flow_state[(k, col)];
        }
        for col in 0..n_p {
            g[(sp, col)] -= m_inv * flow_eta[(k, col)];
        }
        a[(sp, sp)] -= m_inv * machine.damping;
        a[(sp, layout.governor(k))] += m_inv;
        for (j, port) in model.disturbances.iter().enumerate() {
            if port_node[j] == machine_node[k] {
                g[(sp, j)] += m_inv * port.strength;
            }
        }
        let gv = layout.governor(k);
        let tg_inv = 1.0 / machine.governor_time_constant;
        a[(gv, sp)] = -machine.droop_gain * tg_inv;
        a[(gv, gv)] = -tg_inv;
    }

    for (i, placement) in devices.devices.iter().enumerate() {
        let dev = match mode {
            ViMode::Following => ViDevice::Following(GridFollowingVi {
                bus: placement.bus.clone(),
                pll: placement.pll,
                m_virt: 0.0,
                d_virt: 0.0,
            }),
            ViMode::Forming => ViDevice::Forming(GridFormingVi {
                bus: placement.bus.clone(),
                coupling: placement.coupling,
                m_virt: 1.0,
                d_virt: 0.0,
            }),
        };
        let blk = device_block(&dev)?;
        let o = layout.device(i, 0);
        for r in 0..blk.n_states() {
            for c in 0..blk.n_states() {
                a[(o + r, o + c)] += blk.a_local[(r, c)];
            }
            b_mat[(o + r, i)] = blk.input_gain[r];
        }
        // Angle states are relative to machine 0.
        a[(o, layout.speed(0))] -= 1.0;
        if !forming {
            // v_q = θ̂ − θ_bus with the bus angle solved affinely.
            let rv = v_pos(device_bus[i]);
            for r in 0..blk.n_states() {
                let gain = blk.vq_gain[r];
                if gain == 0.0 {
                    continue;
                }
                a[(o + r, o)] += gain;
                for col in 0..n {
                    a[(o + r, col)] -= gain * theta_v[(rv, col)];
                }
                for col in 0..n_p {
                    g[(o + r, col)] -= gain * theta_v_eta[(rv, col)];
                }
            }
        }
    }

    // Measured outputs, two rows per device; RoCoF and device power rows
    // are state maps.
    let mut c = DMatrix::<f64>::zeros(2 * n_dev, n);
    let mut p_vi_map = DMatrix::<f64>::zeros(n_dev, n);
    for (i, placement) in devices.devices.iter().enumerate() {
        let o = layout.device(i, 0);
        match mode {
            ViMode::Following => {
                c[(2 * i, o + 1)] = 1.0;
                for col in 0..n {
                    c[(2 * i + 1, col)] = a[(o + 1, col)];
                }
                p_vi_map[(i, o + 3)] = -1.0;
            }
            ViMode::Forming => {
                c[(2 * i, o + 1)] = 1.0;
                let rv = v_pos(device_bus[i]);
                let bc = placement.coupling;
                for col in 0..n {
                    // Absorbed power b_c (θ_bus − θ_VI) closes Eq.-style
                    // feedback with nonnegative physical gains.
                    c[(2 * i + 1, col)] = bc * theta_v[(rv, col)];
                    p_vi_map[(i, col)] = -bc * theta_v[(rv, col)];
                }
                c[(2 * i + 1, o)] -= bc;
                p_vi_map[(i, o)] += bc;
            }
        }
    }

    let mut c_perf = DMatrix::<f64>::zeros(3 * n_m + n_dev, n);
    let (rw, rr, rg, rv) = (
        weights.omega.sqrt(),
        weights.rocof.sqrt(),
        weights.p_gov.sqrt(),
        weights.p_vi.sqrt(),
    );
    for k in 0..n_m {
        c_perf[(k, layout.speed(k))] = rw;
        for col in 0..n {
            c_perf[(n_m + k, col)] = rr * a[(layout.speed(k), col)];
        }
        c_perf[(2 * n_m + k, layout.governor(k))] = rg;
    }
    for i in 0..n_dev {
        for col in 0..n {
            c_perf[(3 * n_m + i, col)] = rv * p_vi_map[(i, col)];
        }
    }

    let machine_buses: Vec<String> = model.machines.iter().map(|m| m.bus.clone()).collect();
    let device_buses = devices.buses();
    let port_buses: Vec<String> = model.disturbances.iter().map(|p| p.bus.clone()).collect();
    let input_labels = device_buses.iter().map(|b| format!("u({b})")).collect();
    let output_labels = device_buses
        .iter()
        .flat_map(|b| match mode {
            ViMode::Following => vec![format!("omega_hat({b})"), format!("rocof_hat({b})")],
            ViMode::Forming => vec![format!("omega_vi({b})"), format!("p_absorbed({b})")],
        })
        .collect();
    let mut perf_labels: Vec<String> = Vec::with_capacity(3 * n_m + n_dev);
    for tag in ["omega", "rocof", "p_gov"] {
        perf_labels.extend(machine_buses.iter().map(|b| format!("{tag}({b})")));
    }
    perf_labels.extend(device_buses.iter().map(|b| format!("p_vi({b})")));

    let open_loop_abscissa = spectral_abscissa(&a);

    Ok(LinearSystem {
        state_labels: layout.labels(),
        a,
        b: b_mat,
        c,
        c_perf,
        g,
        input_labels,
        output_labels,
        perf_labels,
        mode,
        machine_buses,
        device_buses,
        port_buses,
        open_loop_abscissa,
        layout,
        p_vi_map,
    })
}
