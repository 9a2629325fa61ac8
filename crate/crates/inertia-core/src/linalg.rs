//! Dense linear-algebra kernels: real-Schur Lyapunov solve, spectral
//! abscissa, and a fixed-step RK4 used by the simulation paths.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest real part over the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue magnitude of `a`.
pub fn min_eigenvalue_magnitude(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solve `Aᵀ X + X A + Q = 0` by Bartels–Stewart: reduce `A` to real Schur
/// form, back-substitute block columns on the quasi-triangular factor, and
/// transform back. Cost is a single Schur decomposition plus O(n³) in the
/// substitution; no stability check is performed here (see [`crate::h2`]).
pub fn lyapunov_schur(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(format!(
            "lyapunov: A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let (u, t) = schur.unpack();

    // Tᵀ X + X T = C with C = -Uᵀ Q U.
    let c = -(u.transpose() * q * &u);
    let x = solve_quasi_triangular_lyapunov(&t, &c)?;
    Ok(symmetrize(&(&u * x * u.transpose())))
}

/// Diagonal block boundaries of a real Schur factor: runs of size 1 or 2.
fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let size = if i + 1 < n && t[(i + 1, i)] != 0.0 { 2 } else { 1 };
        blocks.push((i, size));
        i += size;
    }
    blocks
}

/// Solve `Tᵀ X + X T = C` for upper quasi-triangular `T`, block column by
/// block column. Each diagonal pair yields a linear system of size at most
/// 4 solved by dense LU.
fn solve_quasi_triangular_lyapunov(t: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let blocks = schur_blocks(t);
    let mut x = DMatrix::<f64>::zeros(n, n);

    for &(j0, sj) in &blocks {
        for &(i0, si) in &blocks {
            // RHS = C_ij - Σ_{k<i} T_kiᵀ X_kj - Σ_{k<j} X_ik T_kj
            let mut rhs = c.view((i0, j0), (si, sj)).clone_owned();
            if i0 > 0 {
                let t_ki = t.view((0, i0), (i0, si));
                let x_kj = x.view((0, j0), (i0, sj));
                rhs -= t_ki.transpose() * x_kj;
            }
            if j0 > 0 {
                let x_ik = x.view((i0, 0), (si, j0));
                let t_kj = t.view((0, j0), (j0, sj));
                rhs -= x_ik * t_kj;
            }

            let t_ii = t.view((i0, i0), (si, si));
            let t_jj = t.view((j0, j0), (sj, sj));

            // (I_sj ⊗ T_iiᵀ + T_jjᵀ ⊗ I_si) vec(X_ij) = vec(RHS)
            let m = si * sj;
            let mut sys = DMatrix::<f64>::zeros(m, m);
            for p in 0..sj {
                for q in 0..sj {
                    for r in 0..si {
                        for s in 0..si {
                            let row = p * si + r;
                            let col = q * si + s;
                            let mut v = 0.0;
                            if p == q {
                                v += t_ii[(s, r)]; // T_iiᵀ
                            }
                            if r == s {
                                v += t_jj[(q, p)]; // T_jjᵀ ⊗ I
                            }
                            sys[(row, col)] += v;
                        }
                    }
                }
            }
            let rhs_vec = DVector::from_iterator(m, rhs.iter().copied());
            let sol = sys
                .lu()
                .solve(&rhs_vec)
                .ok_or_else(|| Error::Singular("Lyapunov diagonal block".into()))?;
            for p in 0..sj {
                for r in 0..si {
                    x[(i0 + r, j0 + p)] = sol[p * si + r];
                }
            }
        }
    }
    Ok(x)
}

/// One classical Runge–Kutta 4 step of `x' = f(t, x)`.
pub fn rk4_step<F>(f: &F, t: f64, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)));
    let k3 = f(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)));
    let k4 = f(t + dt, &(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}
