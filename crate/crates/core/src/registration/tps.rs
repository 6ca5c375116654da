use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

/// `U(r) = r² log r`, with `U(0) = 0`.
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// `f(p) = A·[x, y, 1]ᵀ + Σ_i w_i U(‖p − c_i‖)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsWarp {
    /// Row-major 2×3: `[[a11, a12, tx], [a21, a22, ty]]`.
    pub affine: [[f64; 3]; 2],
    pub kernel_coeffs: Vec<[f64; 2]>,
    pub control_points: Vec<Vec2>,
    pub lambda: f64,
}

impl TpsWarp {
    pub fn identity(control_points: Vec<Vec2>) -> Self {
        let n = control_points.len();
        Self {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            kernel_coeffs: vec![[0.0; 2]; n],
            control_points,
            lambda: 0.0,
        }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        let a = &self.affine;
        let mut x = a[0][0] * p.x + a[0][1] * p.y + a[0][2];
        let mut y = a[1][0] * p.x + a[1][1] * p.y + a[1][2];
        for (c, w) in self.control_points.iter().zip(&self.kernel_coeffs) {
            let u = tps_kernel(p.dist_sq(*c));
            x += w[0] * u;
            y += w[1] * u;
        }
        Vec2::new(x, y)
    }

    /// Largest violation of `Σ w = 0`, `Σ x w = 0`, `Σ y w = 0`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut s = [[0.0f64; 2]; 3];
        for (c, w) in self.control_points.iter().zip(&self.kernel_coeffs) {
            for d in 0..2 {
                s[0][d] += w[d];
                s[1][d] += c.x * w[d];
                s[2][d] += c.y * w[d];
            }
        }
        s.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `trace(wᵀ Φ w)`.
    pub fn bending_energy(&self) -> f64 {
        let mut e = 0.0;
        for (ci, wi) in self.control_points.iter().zip(&self.kernel_coeffs) {
            for (cj, wj) in self.control_points.iter().zip(&self.kernel_coeffs) {
                let u = tps_kernel(ci.dist_sq(*cj));
                e += u * (wi[0] * wj[0] + wi[1] * wj[1]);
            }
        }
        e
    }
}

/// Control-point factorization reused across regularization levels.
///
/// With `P = [1, x, y] = Q [R; 0]` and `Q = [Q1 Q2]`, the regularized
/// solution is `w = Q2 (Q2ᵀΦQ2 + λI)⁻¹ Q2ᵀ Y` and
/// `d = R⁻¹ Q1ᵀ (Y − Φ w)`. Writing `w = Q2 γ` satisfies the side
/// conditions `Pᵀ w = 0` by construction.
#[derive(Debug, Clone)]
pub struct TpsSolver {
    points: Vec<Vec2>,
    phi: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    eig_vectors: DMatrix<f64>,
    eig_values: Vec<f64>,
}

impl TpsSolver {
    pub fn new(points: &[Vec2]) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(Error::TooFewPoints { needed: 3, got: n });
        }
        let mut p = DMatrix::zeros(n, 3);
        for (i, c) in points.iter().enumerate() {
            p[(i, 0)] = 1.0;
            p[(i, 1)] = c.x;
            p[(i, 2)] = c.y;
        }
        let qr = p.clone().qr();
        let r = qr.r();
        let scale = points.iter().fold(1.0f64, |m, c| m.max(c.x.abs()).max(c.y.abs()));
        let rmax = (0..3).fold(0.0f64, |m, i| m.max(r[(i, i)].abs()));
        if (0..3).any(|i| r[(i, i)].abs() <= 1e-9 * rmax.max(scale)) {
            return Err(Error::CollinearPoints);
        }
        let mut qt = DMatrix::identity(n, n);
        qr.q_tr_mul(&mut qt);
        let q = qt.transpose();

        let phi = DMatrix::from_fn(n, n, |i, j| tps_kernel(points[i].dist_sq(points[j])));
        let q2 = q.columns(3, n - 3);
        let a = q2.transpose() * &phi * q2;
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        Ok(Self {
            points: points.to_vec(),
            phi,
            q,
            r,
            eig_values: eig.eigenvalues.iter().copied().collect(),
            eig_vectors: eig.eigenvectors,
        })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn solve(&self, targets: &[Vec2], lambda: f64) -> Result<TpsWarp> {
        let n = self.points.len();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                operand: "tps targets".into(),
                expected: vec![n],
                got: vec![targets.len()],
            });
        }
        let y = DMatrix::from_fn(n, 2, |i, d| if d == 0 { targets[i].x } else { targets[i].y });
        let (w, d) = if n > 3 {
            let top = self.eig_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let shifted: Vec<f64> = self.eig_values.iter().map(|v| v + lambda).collect();
            if shifted.iter().any(|v| v.abs() <= 1e-12 * top.max(1.0)) {
                return Err(Error::SingularTps(format!("λ = {lambda:e}")));
            }
            let q2 = self.q.columns(3, n - 3);
            let rhs = self.eig_vectors.transpose() * (q2.transpose() * &y);
            let scaled = DMatrix::from_fn(n - 3, 2, |k, c| rhs[(k, c)] / shifted[k]);
            let gamma = &self.eig_vectors * scaled;
            let w = q2 * gamma;
            let resid = &y - &self.phi * &w;
            (w, resid)
        } else {
            (DMatrix::zeros(n, 2), y.clone())
        };
        let q1 = self.q.columns(0, 3);
        let rhs = q1.transpose() * d;
        let r = self.r.fixed_view::<3, 3>(0, 0).into_owned();
        let coef = r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::SingularTps("affine block".into()))?;
        // coef rows correspond to [1, x, y].
        let affine = [
            [coef[(1, 0)], coef[(2, 0)], coef[(0, 0)]],
            [coef[(1, 1)], coef[(2, 1)], coef[(0, 1)]],
        ];
        if affine.iter().flatten().any(|v| !v.is_finite()) || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularTps(format!("non-finite solution at λ = {lambda:e}")));
        }
        Ok(TpsWarp {
            affine,
            kernel_coeffs: (0..n).map(|i| [w[(i, 0)], w[(i, 1)]]).collect(),
            control_points: self.points.clone(),
            lambda,
        })
    }
}

/// Minimizes `Σ ‖y_i − f(x_i)‖² + λ·trace(wᵀΦw)` exactly.
pub fn fit_tps(src: &[Vec2], targets: &[Vec2], lambda: f64) -> Result<TpsWarp> {
    TpsSolver::new(src)?.solve(targets, lambda)
}
