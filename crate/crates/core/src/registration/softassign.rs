use serde::{Deserialize, Serialize};

/// Soft correspondence between `n` source and `k` target points, stored as an
/// `(n+1) × (k+1)` row-major matrix whose last row and column are outlier bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub n: usize,
    pub k: usize,
    pub m: Vec<f64>,
    pub temperature: f64,
    /// Largest deviation of an inner row or column sum from 1.
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl Correspondence {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * (self.k + 1) + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.m[i * (self.k + 1)..(i + 1) * (self.k + 1)]
    }

    /// Mass of source point `i` assigned to real targets.
    pub fn inner_mass(&self, i: usize) -> f64 {
        self.row(i)[..self.k].iter().sum()
    }

    /// Row-major argmax over real targets for each source point.
    pub fn argmax_matches(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                let r = &self.row(i)[..self.k];
                (0..self.k).fold(0, |b, j| if r[j] > r[b] { j } else { b })
            })
            .collect()
    }

    fn compute_residual(&self) -> f64 {
        let mut res: f64 = 0.0;
        for i in 0..self.n {
            res = res.max((self.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        for j in 0..self.k {
            let s: f64 = (0..=self.n).map(|i| self.get(i, j)).sum();
            res = res.max((s - 1.0).abs());
        }
        res
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftassignParams {
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for SoftassignParams {
    fn default() -> Self {
        Self { max_sweeps: 200, tolerance: 1e-6 }
    }
}

/// Dual potentials carried between annealing stages. `f` has one entry per
/// source row and `g` one per target column; the outlier row and column keep
/// potential zero.
#[derive(Debug, Clone, Default)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Alternating row/column normalization of `exp(-cost / T)` with outlier
/// bins at `exp(-outlier_cost / T)`. Inner rows and inner columns are driven
/// to sum 1; the outlier row and column absorb the slack and the corner is 0.
///
/// Works on `M_ij = exp((f_i + g_j - C_ij) / T) · a_i · b_j`, folding the
/// scalings `a, b` into the potentials whenever they drift far from 1. When
/// alternation stalls, Newton steps on the same dual potentials finish the
/// job; the fixed point is unchanged.
///
/// A cold call whose cost spread exceeds `COLD_SPREAD` temperatures is first
/// solved at doubled temperatures and warm-started down to `temperature`;
/// each stage has its own sweep budget and `sweeps` reports the total.
pub fn softassign_update(
    cost: &[f64],
    n: usize,
    k: usize,
    temperature: f64,
    outlier_cost: f64,
    params: &SoftassignParams,
    warm: Option<&mut Potentials>,
) -> Correspondence {
    assert_eq!(cost.len(), n * k);
    assert!(temperature > 0.0);
    if let Some(pot) = warm {
        return solve_at(cost, n, k, temperature, outlier_cost, params, pot);
    }
    let (lo, hi) = cost.iter().fold((outlier_cost, outlier_cost), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    let mut t = temperature;
    while (hi - lo) / t > COLD_SPREAD {
        t *= 2.0;
    }
    let mut pot = Potentials::default();
    let mut sweeps = 0;
    while t > temperature {
        sweeps += solve_at(cost, n, k, t, outlier_cost, params, &mut pot).sweeps;
        t = (t / 2.0).max(temperature);
    }
    let mut out = solve_at(cost, n, k, temperature, outlier_cost, params, &mut pot);
    out.sweeps += sweeps;
    out
}

const COLD_SPREAD: f64 = 32.0;

fn solve_at(
    cost: &[f64],
    n: usize,
    k: usize,
    temperature: f64,
    outlier_cost: f64,
    params: &SoftassignParams,
    pot: &mut Potentials,
) -> Correspondence {
    if pot.f.len() != n || pot.g.len() != k {
        pot.f = vec![0.0; n];
        pot.g = vec![0.0; k];
    }
    let mut st = State {
        cost,
        n,
        k,
        t: temperature,
        outlier: outlier_cost,
        kernel: vec![0.0; (n + 1) * (k + 1)],
    };

    // One exact log-domain sweep so every entry starts bounded by 1.
    for i in 0..n {
        let lse = log_sum_exp((0..=k).map(|j| (st.gpot(pot, j) - st.c(i, j)) / st.t));
        pot.f[i] = -st.t * lse;
    }
    for j in 0..k {
        let lse = log_sum_exp((0..=n).map(|i| (st.fpot(pot, i) - st.c(i, j)) / st.t));
        pot.g[j] = -st.t * lse;
    }
    st.fill(pot);

    let mut sweeps = 0;
    let mut residual = st.residual();
    let mut last = residual;
    while residual > params.tolerance && sweeps < params.max_sweeps {
        sweeps += 1;
        st.sinkhorn_sweeps(pot, 1);
        residual = st.residual();
        // Linear convergence that has slowed to a crawl: switch to Newton.
        if sweeps >= NEWTON_AFTER && residual > 0.5 * last {
            break;
        }
        if sweeps % NEWTON_AFTER == 0 {
            last = residual;
        }
    }
    while residual > params.tolerance && sweeps < params.max_sweeps {
        sweeps += 1;
        residual = match st.newton_step(pot) {
            Some(r) => r,
            None => {
                st.sinkhorn_sweeps(pot, 1);
                st.residual()
            }
        };
    }

    let mut out = Correspondence {
        n,
        k,
        m: st.kernel,
        temperature,
        residual,
        sweeps,
        converged: false,
    };
    out.residual = out.compute_residual();
    out.converged = out.residual <= params.tolerance;
    out
}

const NEWTON_AFTER: usize = 10;

struct State<'a> {
    cost: &'a [f64],
    n: usize,
    k: usize,
    t: f64,
    outlier: f64,
    kernel: Vec<f64>,
}

impl State<'_> {
    fn c(&self, i: usize, j: usize) -> f64 {
        if i < self.n && j < self.k {
            self.cost[i * self.k + j]
        } else {
            self.outlier
        }
    }

    fn fpot(&self, pot: &Potentials, i: usize) -> f64 {
        if i < self.n {
            pot.f[i]
        } else {
            0.0
        }
    }

    fn gpot(&self, pot: &Potentials, j: usize) -> f64 {
        if j < self.k {
            pot.g[j]
        } else {
            0.0
        }
    }

    fn fill(&mut self, pot: &Potentials) {
        let (n, k, w) = (self.n, self.k, self.k + 1);
        for i in 0..=n {
            for j in 0..=k {
                self.kernel[i * w + j] = if i == n && j == k {
                    0.0
                } else {
                    ((self.fpot(pot, i) + self.gpot(pot, j) - self.c(i, j)) / self.t).exp()
                };
            }
        }
    }

    fn sums(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, k, w) = (self.n, self.k, self.k + 1);
        let rows = (0..n).map(|i| self.kernel[i * w..(i + 1) * w].iter().sum()).collect();
        let mut cols = vec![0.0; k];
        for i in 0..=n {
            for (cj, m) in cols.iter_mut().zip(&self.kernel[i * w..i * w + k]) {
                *cj += m;
            }
        }
        (rows, cols)
    }

    fn residual(&self) -> f64 {
        let (r, c) = self.sums();
        r.iter().chain(&c).fold(0.0, |m: f64, v| m.max((v - 1.0).abs()))
    }

    /// `Σ M − Σ f/T − Σ g/T`, the convex dual whose gradient is the sum residual.
    fn dual(&self, pot: &Potentials) -> f64 {
        self.kernel.iter().sum::<f64>() - (pot.f.iter().sum::<f64>() + pot.g.iter().sum::<f64>()) / self.t
    }

    /// Plain alternation in the scaling domain, absorbed into the potentials.
    fn sinkhorn_sweeps(&mut self, pot: &mut Potentials, count: usize) {
        let (n, k, w) = (self.n, self.k, self.k + 1);
        let mut a = vec![1.0f64; n];
        let mut b = vec![1.0f64; k + 1];
        let mut col = vec![0.0; k];
        for _ in 0..count {
            for i in 0..n {
                let s: f64 = self.kernel[i * w..(i + 1) * w].iter().zip(&b).map(|(m, bj)| m * bj).sum();
                a[i] = 1.0 / s;
            }
            col.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..=n {
                let ai = if i < n { a[i] } else { 1.0 };
                for (cj, m) in col.iter_mut().zip(&self.kernel[i * w..i * w + k]) {
                    *cj += ai * m;
                }
            }
            for j in 0..k {
                b[j] = 1.0 / col[j];
            }
        }
        for i in 0..n {
            pot.f[i] += self.t * a[i].ln();
        }
        for j in 0..k {
            pot.g[j] += self.t * b[j].ln();
        }
        self.fill(pot);
    }

    /// One damped Newton step on the dual. The Hessian
    /// `[[diag r, M], [Mᵀ, diag c]]` is strictly diagonally dominant thanks
    /// to the outlier bins, so Jacobi-preconditioned CG is safe. Returns the
    /// new residual, or `None` when no decrease was found.
    fn newton_step(&mut self, pot: &mut Potentials) -> Option<f64> {
        let (n, k, w) = (self.n, self.k, self.k + 1);
        let (r, c) = self.sums();
        let diag: Vec<f64> = r.iter().chain(&c).copied().collect();
        let grad: Vec<f64> = diag.iter().map(|v| v - 1.0).collect();
        let kernel = &self.kernel;
        let hess = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let row = &kernel[i * w..i * w + k];
                y[i] = diag[i] * x[i] + row.iter().zip(&x[n..]).map(|(m, v)| m * v).sum::<f64>();
            }
            for j in 0..k {
                y[n + j] = diag[n + j] * x[n + j];
            }
            for i in 0..n {
                let row = &kernel[i * w..i * w + k];
                for (yj, m) in y[n..].iter_mut().zip(row) {
                    *yj += m * x[i];
                }
            }
        };
        let dim = n + k;
        let mut x = vec![0.0; dim];
        let mut res: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut z: Vec<f64> = res.iter().zip(&diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut hp = vec![0.0; dim];
        let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let g_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for _ in 0..100 {
            hess(&p, &mut hp);
            let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
            if php <= 0.0 {
                break;
            }
            let alpha = rz / php;
            for d in 0..dim {
                x[d] += alpha * p[d];
                res[d] -= alpha * hp[d];
            }
            if res.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-3 * g_norm {
                break;
            }
            for d in 0..dim {
                z[d] = res[d] / diag[d];
            }
            let rz_new: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for d in 0..dim {
                p[d] = z[d] + beta * p[d];
            }
        }
        let slope: f64 = grad.iter().zip(&x).map(|(g, v)| g * v).sum();
        if !(slope < 0.0) {
            return None;
        }
        let base = self.dual(pot);
        let saved = pot.clone();
        let mut step = 1.0;
        for _ in 0..30 {
            for i in 0..n {
                pot.f[i] = saved.f[i] + self.t * step * x[i];
            }
            for j in 0..k {
                pot.g[j] = saved.g[j] + self.t * step * x[n + j];
            }
            self.fill(pot);
            let d = self.dual(pot);
            if d.is_finite() && d <= base + 1e-4 * step * slope {
                return Some(self.residual());
            }
            step *= 0.5;
        }
        *pot = saved;
        self.fill(pot);
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn large_temperature_matches_closed_form_limit() {
        // With every kernel entry equal to 1, inner entries equal p = a·b where
        // a + K·p = 1 and b + N·p = 1 (slack column a, slack row b).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for &(n, k) in &[(12usize, 9usize), (9, 9), (5, 14)] {
            let cost: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..100.0)).collect();
            let c = softassign_update(&cost, n, k, 1e6, 50.0, &Default::default(), None);
            assert!(c.converged);
            let (nf, kf) = (n as f64, k as f64);
            let s = nf + kf + 1.0;
            let p = (s - (s * s - 4.0 * nf * kf).sqrt()) / (2.0 * nf * kf);
            let (a, b) = (1.0 - kf * p, 1.0 - nf * p);
            for i in 0..n {
                for j in 0..k {
                    assert!((c.get(i, j) - p).abs() < 1e-3 * p);
                }
                assert!((c.get(i, k) - a).abs() < 1e-3 * a);
                // Uniform over the real targets.
                let inner: Vec<f64> = c.row(i)[..k].iter().map(|v| v / c.inner_mass(i)).collect();
                let h: f64 = inner.iter().map(|q| -q * q.ln()).sum();
                assert!(h >= 0.99 * kf.ln());
            }
            for j in 0..k {
                assert!((c.get(n, j) - b).abs() < 1e-3 * b);
            }
        }
    }

    #[test]
    fn small_temperature_gives_permutation() {
        let n = 6;
        let perm = [3, 0, 5, 1, 4, 2];
        let mut cost = vec![1e4; n * n];
        for (i, &j) in perm.iter().enumerate() {
            cost[i * n + j] = 0.0;
        }
        let c = softassign_update(&cost, n, n, 0.5, 1e3, &Default::default(), None);
        assert!(c.residual <= 1e-6);
        assert_eq!(c.argmax_matches(), perm);
        for (i, &j) in perm.iter().enumerate() {
            assert!(c.get(i, j) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn sums_converge_with_unequal_sizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(n, k, t) in &[(20, 30, 10.0), (30, 20, 1.0), (15, 15, 0.05)] {
            let cost: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..20.0)).collect();
            let c = softassign_update(&cost, n, k, t, 5.0, &Default::default(), None);
            assert!(c.residual <= 1e-6, "{n}x{k} at T={t}: {}", c.residual);
            assert_eq!(c.get(n, k), 0.0);
            assert!(c.m.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn underflowing_costs_stay_finite() {
        let cost = vec![5000.0, 9000.0, 7000.0, 4000.0];
        let c = softassign_update(&cost, 2, 2, 0.05, 6000.0, &Default::default(), None);
        assert!(c.m.iter().all(|v| v.is_finite()));
        assert!(c.residual <= 1e-6);
        assert!(c.get(0, 0) > 0.99 && c.get(1, 1) > 0.99);
    }

    #[test]
    fn cold_wide_spread_converges_to_the_scaled_kernel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (n, k, t, outlier) = (40, 35, 0.5, 60.0);
        let cost: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..100.0)).collect();
        let c = softassign_update(&cost, n, k, t, outlier, &Default::default(), None);
        assert!(c.converged && c.residual <= 1e-6, "{}", c.residual);
        // ln M_ij + C_ij / T must split as u_i + v_j over the inner block
        // and the outlier column.
        let lm = |i: usize, j: usize| c.get(i, j).ln() + if j == k { outlier } else { cost[i * k + j] } / t;
        for i in 1..n {
            for j in 1..=k {
                let d = lm(i, j) - lm(i, 0) - lm(0, j) + lm(0, 0);
                assert!(d.abs() < 1e-6, "({i},{j}): {d}");
            }
        }
        // Same fixed point as a gentle warm-started chain.
        let mut pot = Potentials::default();
        let mut tt = 100.0;
        let mut warm = loop {
            let w = softassign_update(&cost, n, k, tt, outlier, &Default::default(), Some(&mut pot));
            if tt == t {
                break w;
            }
            tt = (tt * 0.8f64).max(t);
        };
        warm.m.iter_mut().zip(&c.m).for_each(|(a, b)| *a = (*a - b).abs());
        assert!(warm.m.iter().all(|d| *d < 1e-5));
    }
}
