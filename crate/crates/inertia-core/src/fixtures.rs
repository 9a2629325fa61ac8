//! Small reference systems used by tests, benchmarks, and the shipped
//! example configurations.
//!
//! Parameter scales follow the per-unit conventions of the rest of the
//! crate on a 1000 MVA base: machine inertia constants around 0.01–0.02
//! s²/(rad·pu), line susceptances of a few per unit, and device gain caps
//! of the same order as the machine constants.

use crate::devices::{Allocation, DeviceSet, PllParams, ViMode, ViPlacement};
use crate::netmodel::{
    assemble_open_loop, BaseValues, Bus, BusKind, DisturbancePort, LinearSystem, Line, Machine,
    NetworkModel, PerformanceWeights,
};

fn bus(id: &str, kind: BusKind, power: f64) -> Bus {
    Bus {
        id: id.into(),
        kind,
        power,
    }
}

fn line(from: &str, to: &str, susceptance: f64) -> Line {
    Line {
        from: from.into(),
        to: to.into(),
        susceptance,
    }
}

fn port(bus: &str) -> DisturbancePort {
    DisturbancePort {
        bus: bus.into(),
        strength: 1.0,
    }
}

/// Penalty set used throughout: r_ω = 0.1, r_ω̇ = 0.2, r_G = 0.2, r_VI = 0.2.
pub fn default_weights() -> PerformanceWeights {
    PerformanceWeights {
        omega: 0.1,
        rocof: 0.2,
        p_gov: 0.2,
        p_vi: 0.2,
    }
}

/// One machine on a single bus with a disturbance port: the analytic
/// first-order test case.
pub fn single_machine(inertia: f64, damping: f64, droop_gain: f64) -> NetworkModel {
    NetworkModel {
        buses: vec![bus("1", BusKind::Machine, 0.0)],
        lines: vec![],
        machines: vec![Machine {
            bus: "1".into(),
            inertia,
            damping,
            droop_gain,
            governor_time_constant: 0.5,
        }],
        disturbances: vec![port("1")],
        base: BaseValues::default(),
    }
}

/// One machine plus one candidate bus over a single line; the smallest
/// network that exercises a device.
pub fn machine_and_candidate() -> NetworkModel {
    NetworkModel {
        buses: vec![
            bus("1", BusKind::Machine, 0.0),
            bus("2", BusKind::ViCandidate, 0.0),
        ],
        lines: vec![line("1", "2", 1.0)],
        machines: vec![Machine {
            bus: "1".into(),
            inertia: 0.05,
            damping: 0.02,
            droop_gain: 0.05,
            governor_time_constant: 0.5,
        }],
        disturbances: vec![port("1")],
        base: BaseValues::default(),
    }
}

pub fn machine_and_candidate_devices() -> DeviceSet {
    DeviceSet {
        devices: vec![ViPlacement {
            bus: "2".into(),
            pll: PllParams::default(),
            coupling: 5.0,
            m_cap: None,
            d_cap: None,
        }],
    }
}

/// Three-bus triangle: machines at buses 1 and 2, a candidate at bus 3,
/// all lines at 10 pu, injections (0.3, −0.3, 0), ports at both machines.
pub fn three_bus() -> NetworkModel {
    NetworkModel {
        buses: vec![
            bus("1", BusKind::Machine, 0.3),
            bus("2", BusKind::Machine, -0.3),
            bus("3", BusKind::ViCandidate, 0.0),
        ],
        lines: vec![
            line("1", "2", 1.0),
            line("1", "3", 1.0),
            line("2", "3", 1.0),
        ],
        machines: vec![
            Machine {
                bus: "1".into(),
                inertia: 0.050,
                damping: 0.020,
                droop_gain: 0.05,
                governor_time_constant: 0.5,
            },
            Machine {
                bus: "2".into(),
                inertia: 0.035,
                damping: 0.015,
                droop_gain: 0.04,
                governor_time_constant: 0.4,
            },
        ],
        disturbances: vec![port("1"), port("2")],
        base: BaseValues::default(),
    }
}

/// Variant of [`three_bus`] with an extra disturbance port at the
/// candidate bus, exercising the algebraic injection paths.
pub fn three_bus_with_candidate_port() -> NetworkModel {
    let mut model = three_bus();
    model.disturbances.push(port("3"));
    model
}

pub fn three_bus_devices() -> DeviceSet {
    DeviceSet {
        devices: vec![ViPlacement {
            bus: "3".into(),
            pll: PllParams::default(),
            coupling: 5.0,
            m_cap: None,
            d_cap: None,
        }],
    }
}

/// Assembled three-bus open loop with the default weights.
pub fn three_bus_system(mode: ViMode) -> LinearSystem {
    assemble_open_loop(&three_bus(), &three_bus_devices(), &default_weights(), mode)
        .expect("three-bus fixture assembles")
}

/// Six buses: two machines, two candidates, and two passive interior buses
/// eliminated by Kron reduction; one port sits at a candidate bus.
pub fn six_bus() -> NetworkModel {
    NetworkModel {
        buses: vec![
            bus("1", BusKind::Machine, 0.25),
            bus("2", BusKind::Machine, 0.15),
            bus("3", BusKind::ViCandidate, -0.15),
            bus("4", BusKind::ViCandidate, -0.15),
            bus("5", BusKind::Passive, -0.05),
            bus("6", BusKind::Passive, -0.05),
        ],
        lines: vec![
            line("1", "5", 1.0),
            line("5", "2", 1.0),
            line("5", "6", 0.5),
            line("6", "3", 0.8),
            line("6", "4", 0.8),
            line("1", "3", 0.6),
            line("2", "4", 0.6),
        ],
        machines: vec![
            Machine {
                bus: "1".into(),
                inertia: 0.050,
                damping: 0.020,
                droop_gain: 0.05,
                governor_time_constant: 0.5,
            },
            Machine {
                bus: "2".into(),
                inertia: 0.040,
                damping: 0.015,
                droop_gain: 0.04,
                governor_time_constant: 0.4,
            },
        ],
        disturbances: vec![port("1"), port("2"), port("4")],
        base: BaseValues::default(),
    }
}

pub fn six_bus_devices() -> DeviceSet {
    DeviceSet {
        devices: vec![
            ViPlacement {
                bus: "3".into(),
                pll: PllParams::default(),
                coupling: 5.0,
                m_cap: None,
                d_cap: None,
            },
            ViPlacement {
                bus: "4".into(),
                pll: PllParams::default(),
                coupling: 5.0,
                m_cap: None,
                d_cap: None,
            },
        ],
    }
}

pub fn six_bus_system(mode: ViMode) -> LinearSystem {
    assemble_open_loop(&six_bus(), &six_bus_devices(), &default_weights(), mode)
        .expect("six-bus fixture assembles")
}

/// Fully symmetric four-bus system: swapping machines 1↔2 together with
/// candidates 3↔4 maps the model onto itself.
pub fn symmetric_four_bus() -> NetworkModel {
    let machine = |b: &str| Machine {
        bus: b.into(),
        inertia: 0.045,
        damping: 0.018,
        droop_gain: 0.045,
        governor_time_constant: 0.5,
    };
    NetworkModel {
        buses: vec![
            bus("1", BusKind::Machine, 0.0),
            bus("2", BusKind::Machine, 0.0),
            bus("3", BusKind::ViCandidate, 0.0),
            bus("4", BusKind::ViCandidate, 0.0),
        ],
        lines: vec![
            line("1", "2", 1.0),
            line("1", "3", 0.6),
            line("2", "4", 0.6),
            line("3", "4", 0.25),
        ],
        machines: vec![machine("1"), machine("2")],
        disturbances: vec![port("1"), port("2")],
        base: BaseValues::default(),
    }
}

pub fn symmetric_four_bus_devices() -> DeviceSet {
    DeviceSet {
        devices: vec![
            ViPlacement {
                bus: "3".into(),
                pll: PllParams::default(),
                coupling: 5.0,
                m_cap: None,
                d_cap: None,
            },
            ViPlacement {
                bus: "4".into(),
                pll: PllParams::default(),
                coupling: 5.0,
                m_cap: None,
                d_cap: None,
            },
        ],
    }
}

/// An interior feasible allocation for the default gain caps, stable in
/// both modes on the shipped fixtures.
pub fn feasible_allocation(devices: &DeviceSet, mode: ViMode) -> Allocation {
    let m = match mode {
        ViMode::Following => 0.008,
        ViMode::Forming => 0.010,
    };
    let buses = devices.buses();
    Allocation::from_gains(&buses, &vec![m; buses.len()], &vec![0.02; buses.len()])
}
