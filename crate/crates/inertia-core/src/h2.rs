//! H2 machinery: Lyapunov equations, squared norm, analytic gradient with
//! sparsity projection, and a quadrature oracle independent of the
//! Lyapunov path.
//!
//! For a stable closed loop `ẋ = A x + G η`, `y_p = C_p x`, the squared H2
//! norm is `trace(Gᵀ P G)` with `Aᵀ P + P A + C_pᵀ C_p = 0`. Its gradient
//! with respect to the structured feedback `K` is `2 (Bᵀ P) L Cᵀ`, where
//! `L` solves the dual equation `A L + L Aᵀ + G Gᵀ = 0`. One gradient
//! therefore costs exactly two Lyapunov solves, independent of the number
//! of devices.

use nalgebra::{DMatrix, DVector};

use crate::devices::{close_loop, feedback_to_gains, ClosedLoop, GainMatrix, ViMode};
use crate::error::{Error, Result};
use crate::linalg::{lyapunov_schur, spectral_abscissa};
use crate::netmodel::LinearSystem;

/// Systems with spectral abscissa above this margin are rejected as
/// unstable or numerically marginal.
pub const HURWITZ_MARGIN: f64 = 1e-8;

fn require_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let abscissa = spectral_abscissa(a);
    if abscissa >= -HURWITZ_MARGIN {
        return Err(Error::Unstable { abscissa });
    }
    Ok(())
}

/// Solve `Aᵀ P + P A + Q = 0` for Hurwitz `A`; the result is symmetrized
/// and its residual verified.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_hurwitz(a)?;
    let p = lyapunov_schur(a, q)?;
    let qn = q.norm();
    if qn > 0.0 {
        let residual = (a.transpose() * &p + &p * a + q).norm() / qn;
        if residual > 1e-6 {
            return Err(Error::Numerical(format!(
                "Lyapunov residual {residual:.3e} exceeds tolerance"
            )));
        }
    }
    Ok(p)
}

/// Squared H2 norm `trace(Gᵀ P G)` of a closed loop.
pub fn h2_norm_squared(cl: &ClosedLoop) -> Result<f64> {
    let q = cl.c_perf.transpose() * &cl.c_perf;
    let p = solve_lyapunov(&cl.a, &q)?;
    Ok((cl.g.transpose() * p * &cl.g).trace())
}

/// Full and projected gradient of the squared H2 norm at one gain matrix.
#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Full matrix `∇_K ‖G‖₂²`, one row per device input.
    pub grad_k: DMatrix<f64>,
    /// Entries of `grad_k` at the structure's nonzero positions, ordered as
    /// the paper's parameter vector φ: `(m̃₁, d̃₁, …)` for following,
    /// `(α̃₁, β̃₁, …)` for forming.
    pub projected: DVector<f64>,
    /// Gradient in physical coordinates `(m̃₁, d̃₁, …)` for both modes;
    /// for forming this applies the chain rule through `α̃ = -d̃/m̃`,
    /// `β̃ = 1/m̃`.
    pub physical: DVector<f64>,
    pub projected_norm: f64,
    /// Number of Lyapunov solves performed for this gradient.
    pub lyapunov_solves: u32,
}

/// Analytic gradient `2 (Bᵀ P) L Cᵀ` with sparsity projection.
pub fn h2_gradient(sys: &LinearSystem, k: &GainMatrix) -> Result<GradientReport> {
    let cl = close_loop(sys, k)?;
    let mut solves = 0u32;
    let mut solve = |a: &DMatrix<f64>, q: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        solves += 1;
        solve_lyapunov(a, q)
    };

    let q_obs = cl.c_perf.transpose() * &cl.c_perf;
    let p = solve(&cl.a, &q_obs)?;
    let q_ctr = &cl.g * cl.g.transpose();
    let l = solve(&cl.a.transpose(), &q_ctr)?;

    let grad_k = 2.0 * (sys.b.transpose() * p) * l * sys.c.transpose();

    let n_dev = k.blocks.len();
    let mut projected = DVector::zeros(2 * n_dev);
    for i in 0..n_dev {
        let g1 = grad_k[(i, 2 * i)]; // gain on the first measured output
        let g2 = grad_k[(i, 2 * i + 1)]; // gain on the second
        match k.mode {
            // Block is [d̃, m̃] on (ω̂, ω̂̇): φ = (m̃, d̃).
            ViMode::Following => {
                projected[2 * i] = g2;
                projected[2 * i + 1] = g1;
            }
            // Block is [α̃, β̃] on (ω_VI, P_VI): φ = (α̃, β̃).
            ViMode::Forming => {
                projected[2 * i] = g1;
                projected[2 * i + 1] = g2;
            }
        }
    }

    let physical = match k.mode {
        ViMode::Following => projected.clone(),
        ViMode::Forming => {
            let alloc = feedback_to_gains(k)?;
            let mut phys = DVector::zeros(2 * n_dev);
            for (i, e) in alloc.entries.iter().enumerate() {
                let (da, db) = (projected[2 * i], projected[2 * i + 1]);
                let m = e.m_virt;
                let d = e.d_virt;
                // ∂/∂m̃ = ∂/∂α̃ · d̃/m̃² + ∂/∂β̃ · (−1/m̃²); ∂/∂d̃ = ∂/∂α̃ · (−1/m̃)
                phys[2 * i] = da * d / (m * m) - db / (m * m);
                phys[2 * i + 1] = -da / m;
            }
            phys
        }
    };

    Ok(GradientReport {
        projected_norm: projected.norm(),
        grad_k,
        projected,
        physical,
        lyapunov_solves: solves,
    })
}

/// Impulse-to-energy quadrature: integrate `Ẋ = A X` from `X(0) = G` and
/// accumulate `∫ ‖C_p X‖_F² dt` with classical RK4 on the stacked
/// impulse-response matrix. Converges to the squared H2 norm as
/// `dt → 0`, `horizon → ∞`; kept independent of the Lyapunov path.
pub fn impulse_energy_oracle(cl: &ClosedLoop, horizon: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::Invalid("oracle needs positive horizon and dt".into()));
    }
    let steps = (horizon / dt).round().max(1.0) as usize;
    let growth_limit = 1e6 * cl.g.norm().max(1.0);

    let deriv = |x: &DMatrix<f64>| &cl.a * x;
    let density = |x: &DMatrix<f64>| (&cl.c_perf * x).norm_squared();

    let mut x = cl.g.clone();
    let mut energy = 0.0;
    for _ in 0..steps {
        let k1 = deriv(&x);
        let x2 = &x + &k1 * (0.5 * dt);
        let k2 = deriv(&x2);
        let x3 = &x + &k2 * (0.5 * dt);
        let k3 = deriv(&x3);
        let x4 = &x + &k3 * dt;
        let k4 = deriv(&x4);

        let e1 = density(&x);
        let e2 = density(&x2);
        let e3 = density(&x3);
        let e4 = density(&x4);

        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        energy += (e1 + 2.0 * e2 + 2.0 * e3 + e4) * (dt / 6.0);

        if x.norm() > growth_limit {
            return Err(Error::Numerical(
                "impulse response diverged: unstable system".into(),
            ));
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{gains_to_feedback, Allocation, GainBlock};
    use crate::fixtures;
    use crate::linalg::symmetrize;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_loop(a: f64, g: f64, c: f64) -> ClosedLoop {
        ClosedLoop {
            a: DMatrix::from_element(1, 1, a),
            g: DMatrix::from_element(1, 1, g),
            c_perf: DMatrix::from_element(1, 1, c),
        }
    }

    #[test]
    fn lyapunov_scalar_examples() {
        let p = solve_lyapunov(
            &DMatrix::from_element(1, 1, -1.0),
            &DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);
        let p = solve_lyapunov(
            &DMatrix::from_element(1, 1, -2.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(p[(0, 0)], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_and_marginal() {
        let err = solve_lyapunov(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap_err();
        assert!(err.is_unstable());
        assert!(err.to_string().contains("H2 norm infinite"));
        // Marginal: abscissa within the margin of zero.
        let err = solve_lyapunov(
            &DMatrix::from_element(1, 1, -1e-9),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap_err();
        assert!(err.is_unstable());
    }

    #[test]
    fn lyapunov_random_residual_and_psd() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 8;
            let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &raw - DMatrix::identity(n, n) * (spectral_abscissa(&raw) + 0.4);
            let half = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = &half * half.transpose(); // PSD
            let p = solve_lyapunov(&a, &q).unwrap();
            let residual = (a.transpose() * &p + &p * &a + &q).norm() / q.norm();
            assert!(residual < 1e-9, "residual {residual}");
            let min_eig = symmetrize(&p)
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig >= -1e-9 * p.norm(), "min eig {min_eig}");
        }
    }

    #[test]
    fn h2_scalar_analytic() {
        // ẋ = -2x + η, y = x: ‖G‖₂² = c²g²/(2a) = 1/4.
        let h2 = h2_norm_squared(&scalar_loop(-2.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(h2, 0.25, epsilon = 1e-10);
    }

    #[test]
    fn h2_zero_disturbance() {
        let cl = ClosedLoop {
            a: DMatrix::from_element(1, 1, -1.0),
            g: DMatrix::zeros(1, 0),
            c_perf: DMatrix::from_element(1, 1, 1.0),
        };
        assert_relative_eq!(h2_norm_squared(&cl).unwrap(), 0.0);
    }

    /// trace(GᵀPG) = trace(C_p L C_pᵀ) on random stable systems.
    #[test]
    fn dual_gramian_identity() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 6;
            let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &raw - DMatrix::identity(n, n) * (spectral_abscissa(&raw) + 0.3);
            let g = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(3, n, |_, _| rng.gen_range(-1.0..1.0));
            let cl = ClosedLoop {
                a: a.clone(),
                g: g.clone(),
                c_perf: c.clone(),
            };
            let via_obs = h2_norm_squared(&cl).unwrap();
            let l = solve_lyapunov(&a.transpose(), &(&g * g.transpose())).unwrap();
            let via_ctr = (&c * l * c.transpose()).trace();
            assert_relative_eq!(via_obs, via_ctr, max_relative = 1e-9);
        }
    }

    fn cost_at(sys: &LinearSystem, k: &GainMatrix) -> f64 {
        h2_norm_squared(&close_loop(sys, k).unwrap()).unwrap()
    }

    /// Projected gradient matches central finite differences in the
    /// feedback-block coordinates φ, and the physical gradient matches
    /// finite differences in (m̃, d̃), both modes.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        for mode in [ViMode::Following, ViMode::Forming] {
            let sys = fixtures::three_bus_system(mode);
            let buses = fixtures::three_bus_devices().buses();
            for _ in 0..3 {
                let m = vec![rng.gen_range(0.004..0.016)];
                let d = vec![rng.gen_range(0.005..0.035)];
                let alloc = Allocation::from_gains(&buses, &m, &d);
                let k = gains_to_feedback(&alloc, mode).unwrap();
                let report = h2_gradient(&sys, &k).unwrap();
                assert_eq!(report.lyapunov_solves, 2);

                // φ coordinates: perturb the block entries directly.
                for i in 0..k.blocks.len() {
                    for slot in 0..2 {
                        let base = k.blocks[i].gains[slot];
                        let h = 1e-6 * base.abs().max(1.0);
                        let mut kp = k.clone();
                        kp.blocks[i].gains[slot] += h;
                        let mut km = k.clone();
                        km.blocks[i].gains[slot] -= h;
                        let fd = (cost_at(&sys, &kp) - cost_at(&sys, &km)) / (2.0 * h);
                        let analytic = match mode {
                            ViMode::Following => {
                                // slot 0 is d̃ (φ index 2i+1), slot 1 is m̃ (φ index 2i)
                                if slot == 0 {
                                    report.projected[2 * i + 1]
                                } else {
                                    report.projected[2 * i]
                                }
                            }
                            ViMode::Forming => report.projected[2 * i + slot],
                        };
                        assert_relative_eq!(analytic, fd, max_relative = 1e-5);
                    }
                }

                // Physical coordinates.
                for i in 0..buses.len() {
                    for (coord, idx) in [(0usize, 2 * i), (1usize, 2 * i + 1)] {
                        let h = 1e-6 * if coord == 0 { m[i].max(1.0) } else { d[i].max(1.0) };
                        let perturbed = |sign: f64| {
                            let mut mm = m.clone();
                            let mut dd = d.clone();
                            if coord == 0 {
                                mm[i] += sign * h;
                            } else {
                                dd[i] += sign * h;
                            }
                            let a = Allocation::from_gains(&buses, &mm, &dd);
                            cost_at(&sys, &gains_to_feedback(&a, mode).unwrap())
                        };
                        let fd = (perturbed(1.0) - perturbed(-1.0)) / (2.0 * h);
                        assert_relative_eq!(report.physical[idx], fd, max_relative = 1e-5);
                    }
                }
            }
        }
    }

    /// Zeroed measurement rows force the corresponding gradient entries to
    /// exactly zero through the chain rule.
    #[test]
    fn gradient_zero_structure_positions() {
        let mut sys = fixtures::three_bus_system(ViMode::Following);
        sys.c.fill_row(0, 0.0);
        let alloc = fixtures::feasible_allocation(&fixtures::three_bus_devices(), ViMode::Following);
        let k = gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let report = h2_gradient(&sys, &k).unwrap();
        assert_eq!(report.grad_k[(0, 0)], 0.0);
    }

    /// Scaling C_p by 2 scales the squared-norm gradient by 4.
    #[test]
    fn gradient_quadratic_in_performance_output() {
        let sys = fixtures::three_bus_system(ViMode::Following);
        let mut scaled = sys.clone();
        scaled.c_perf *= 2.0;
        let alloc = fixtures::feasible_allocation(&fixtures::three_bus_devices(), ViMode::Following);
        let k = gains_to_feedback(&alloc, ViMode::Following).unwrap();
        let g1 = h2_gradient(&sys, &k).unwrap();
        let g4 = h2_gradient(&scaled, &k).unwrap();
        assert_relative_eq!(
            (g4.grad_k - &g1.grad_k * 4.0).norm(),
            0.0,
            epsilon = 1e-10 * g1.grad_k.norm().max(1.0)
        );
    }

    /// First-order prediction along a feasible direction improves
    /// quadratically as the step halves.
    #[test]
    fn gradient_first_order_prediction() {
        let mode = ViMode::Forming;
        let sys = fixtures::three_bus_system(mode);
        let buses = fixtures::three_bus_devices().buses();
        let alloc = Allocation::from_gains(&buses, &[0.01], &[0.02]);
        let k = gains_to_feedback(&alloc, mode).unwrap();
        let report = h2_gradient(&sys, &k).unwrap();
        let delta = GainMatrix {
            mode,
            blocks: vec![GainBlock {
                bus: buses[0].clone(),
                gains: [0.3, -0.2],
            }],
        };
        let f0 = cost_at(&sys, &k);
        let inner: f64 = (0..1)
            .map(|i| {
                report.grad_k[(i, 2 * i)] * delta.blocks[i].gains[0]
                    + report.grad_k[(i, 2 * i + 1)] * delta.blocks[i].gains[1]
            })
            .sum();
        let err_at = |s: f64| {
            let mut ks = k.clone();
            for (b, db) in ks.blocks.iter_mut().zip(&delta.blocks) {
                b.gains[0] += s * db.gains[0];
                b.gains[1] += s * db.gains[1];
            }
            (cost_at(&sys, &ks) - f0 - s * inner).abs()
        };
        let e1 = err_at(1e-3);
        let e2 = err_at(5e-4);
        let ratio = e1 / e2;
        assert!(
            (3.0..6.0).contains(&ratio),
            "halving the step should quarter the remainder, got {ratio}"
        );
    }

    #[test]
    fn oracle_scalar_analytic() {
        let cl = scalar_loop(-2.0, 1.0, 1.0);
        let oracle = impulse_energy_oracle(&cl, 10.0, 1e-3).unwrap();
        assert!((oracle - 0.25).abs() < 1e-6, "oracle {oracle}");
    }

    /// Fourth-order convergence: halving dt shrinks the quadrature error
    /// by at least 8x.
    #[test]
    fn oracle_convergence_order() {
        let cl = scalar_loop(-2.0, 1.0, 1.0);
        let exact = 0.25;
        let horizon = 10.0;
        let e_coarse = (impulse_energy_oracle(&cl, horizon, 0.2).unwrap() - exact).abs();
        let e_fine = (impulse_energy_oracle(&cl, horizon, 0.1).unwrap() - exact).abs();
        assert!(e_fine > 1e-14, "fine error hit the noise floor: {e_fine}");
        assert!(
            e_coarse / e_fine >= 8.0,
            "expected 4th-order decay, got {}",
            e_coarse / e_fine
        );
    }

    #[test]
    fn oracle_truncated_horizon_underestimates() {
        let cl = scalar_loop(-2.0, 1.0, 1.0);
        let short = impulse_energy_oracle(&cl, 0.4, 1e-3).unwrap();
        assert!(short < 0.25);
    }

    #[test]
    fn oracle_detects_divergence() {
        let cl = scalar_loop(2.0, 1.0, 1.0);
        assert!(impulse_energy_oracle(&cl, 30.0, 1e-2).is_err());
    }
}
