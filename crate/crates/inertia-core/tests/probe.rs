//! Temporary numeric probe (removed before release).

use inertia_core::devices::{close_loop, gains_to_feedback, Allocation, ViMode};
use inertia_core::fixtures;
use inertia_core::h2::{h2_gradient, h2_norm_squared};
use inertia_core::optimizer::*;

#[test]
#[ignore]
fn probe_optimizer() {
    for mode in [ViMode::Following, ViMode::Forming] {
        let sys = fixtures::three_bus_system(mode);
        let floor = if mode == ViMode::Forming { 1e-3 } else { 0.0 };
        let cons = ConstraintSet::uniform(1, 0.42, 0.04, 0.0185, floor).unwrap();
        let opts = OptimizerOptions {
            max_iters: 2000,
            ..OptimizerOptions::default()
        };
        let init = default_init(&sys, &cons).unwrap();
        let r = optimize(&sys, &cons, &opts, &init).unwrap();
        println!(
            "mode {mode}: iters {} stop {:?} pg {:.3e} cost {:.8e} alloc m={:.6} d={:.6} active {:?}",
            r.iterations,
            r.stop_reason,
            r.projected_gradient_norm,
            r.final_cost(),
            r.allocation.entries[0].m_virt,
            r.allocation.entries[0].d_virt,
            r.active_constraints
        );
        let k = gains_to_feedback(&r.allocation, mode).unwrap();
        let g = h2_gradient(&sys, &k).unwrap();
        println!("  physical grad: {:?}", g.physical.as_slice());

        // baseline
        let base_sys = inertia_core::netmodel::assemble_open_loop(
            &fixtures::three_bus(),
            &inertia_core::devices::DeviceSet::empty(),
            &fixtures::default_weights(),
            mode,
        )
        .unwrap();
        let base_cl = inertia_core::devices::ClosedLoop {
            a: base_sys.a.clone(),
            g: base_sys.g.clone(),
            c_perf: base_sys.c_perf.clone(),
        };
        println!("  baseline h2sq {:.8e} vs optimized {:.8e}", h2_norm_squared(&base_cl).unwrap(), r.h2_norm_squared);
    }
}

#[test]
#[ignore]
fn probe_forming_cost_surface() {
    let sys = fixtures::three_bus_system(ViMode::Forming);
    for m in [0.001, 0.005, 0.01, 0.0185] {
        let mut row = String::new();
        for d in [0.0, 0.01, 0.02, 0.04] {
            let alloc = Allocation::from_gains(&sys.device_buses, &[m], &[d]);
            let k = gains_to_feedback(&alloc, ViMode::Forming).unwrap();
            let c = h2_norm_squared(&close_loop(&sys, &k).unwrap()).unwrap();
            row += &format!("  {c:.6e}");
        }
        println!("m={m:.4}: {row}");
    }
}

#[test]
#[ignore]
fn probe_six_bus() {
    for mode in [ViMode::Following, ViMode::Forming] {
        let sys = fixtures::six_bus_system(mode);
        let floor = if mode == ViMode::Forming { 1e-3 } else { 0.0 };
        let cons = ConstraintSet::uniform(2, 0.42, 0.04, 0.0185, floor).unwrap();
        let opts = OptimizerOptions {
            max_iters: 3000,
            ..OptimizerOptions::default()
        };
        let init = default_init(&sys, &cons).unwrap();
        let r = optimize(&sys, &cons, &opts, &init).unwrap();
        println!(
            "six-bus mode {mode}: iters {} stop {:?} pg {:.3e} cost {:.8e}",
            r.iterations,
            r.stop_reason,
            r.projected_gradient_norm,
            r.final_cost(),
        );
        for e in &r.allocation.entries {
            println!("  bus {}: m {:.6} d {:.6}", e.bus, e.m_virt, e.d_virt);
        }
    }
}

#[test]
#[ignore]
fn probe_six_bus_gradients() {
    let mode = ViMode::Following;
    let sys = fixtures::six_bus_system(mode);
    // gradient at the gamma=0 optimum-ish point
    for (m3, m4, d3, d4) in [
        (0.0072, 0.0, 0.04, 0.04),
        (0.006, 0.0, 0.04, 0.04),
        (0.0, 0.0, 0.0, 0.0),
    ] {
        let alloc = Allocation::from_gains(&sys.device_buses, &[m3, m4], &[d3, d4]);
        let k = gains_to_feedback(&alloc, mode).unwrap();
        let g = h2_gradient(&sys, &k).unwrap();
        println!("at m=({m3},{m4}) d=({d3},{d4}): phys grad {:?}", g.physical.as_slice());
    }
}

#[test]
#[ignore]
fn probe_compare() {
    let model = fixtures::three_bus();
    let devices = fixtures::three_bus_devices();
    let cons = ConstraintSet::uniform(1, 0.42, 0.04, 0.0185, 1e-3).unwrap();
    let fault = inertia_core::simlab::FaultSpec::step("1", -0.2);
    let table = inertia_core::simlab::compare_scenarios(
        &model,
        &devices,
        &fixtures::default_weights(),
        &cons,
        &OptimizerOptions::default(),
        &fault,
        &inertia_core::simlab::SimOptions::default(),
    )
    .unwrap();
    println!("{}", table.render_text());
}

#[test]
#[ignore]
fn probe_unstable_following_gains() {
    let sys = fixtures::three_bus_system(ViMode::Following);
    for (m, d) in [(0.5, 0.0), (2.0, 0.0), (5.0, 5.0), (0.2, 0.0), (0.1, 0.0)] {
        let alloc = Allocation::from_gains(&sys.device_buses, &[m], &[d]);
        let k = gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let cl = close_loop(&sys, &k).unwrap();
        let absc = inertia_core::linalg::spectral_abscissa(&cl.a);
        println!("m={m} d={d}: abscissa {absc:.4}");
    }
}

#[test]
#[ignore]
fn probe_unstable_harder() {
    use inertia_core::devices::{DeviceSet, PllParams, ViPlacement};
    use inertia_core::netmodel::assemble_open_loop;
    // aggressive PLL: short filter, hot gains
    let mut devices = DeviceSet {
        devices: vec![ViPlacement {
            bus: "3".into(),
            pll: PllParams { tau: 0.02, k_p: 60.0, k_i: 1600.0, tau_foll: 0.05 },
            coupling: 5.0,
            m_cap: None,
            d_cap: None,
        }],
    };
    let model = fixtures::three_bus();
    for (m, d) in [(1.0, 0.0), (3.0, 0.0), (10.0, 0.0), (30.0, 0.0), (10.0, 10.0), (50.0, 0.0)] {
        let sys = assemble_open_loop(&model, &devices, &fixtures::default_weights(), ViMode::Following).unwrap();
        let alloc = Allocation::from_gains(&sys.device_buses, &[m], &[d]);
        let k = gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let cl = close_loop(&sys, &k).unwrap();
        println!("hot pll m={m} d={d}: abscissa {:.4}", inertia_core::linalg::spectral_abscissa(&cl.a));
    }
    // default PLL, huge gains
    devices.devices[0].pll = PllParams::default();
    let sys = assemble_open_loop(&model, &devices, &fixtures::default_weights(), ViMode::Following).unwrap();
    for (m, d) in [(10.0, 0.0), (30.0, 0.0), (100.0, 0.0), (300.0, 0.0), (30.0, 30.0), (100.0, 100.0)] {
        let alloc = Allocation::from_gains(&sys.device_buses, &[m], &[d]);
        let k = gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let cl = close_loop(&sys, &k).unwrap();
        println!("default pll m={m} d={d}: abscissa {:.4}", inertia_core::linalg::spectral_abscissa(&cl.a));
    }
}

#[test]
#[ignore]
fn probe_tiny_forming_inertia() {
    let sys = fixtures::three_bus_system(ViMode::Forming);
    for m in [1e-3, 1e-5, 1e-7, 1e-9] {
        let alloc = Allocation::from_gains(&sys.device_buses, &[m], &[0.0]);
        let k = gains_to_feedback(&alloc, ViMode::Forming).unwrap();
        let cl = close_loop(&sys, &k).unwrap();
        println!("forming m={m:e} d=0: abscissa {:.6e}", inertia_core::linalg::spectral_abscissa(&cl.a));
    }
}
