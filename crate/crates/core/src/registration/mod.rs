//! Thin-plate-spline robust point matching (TPS-RPM): soft correspondences
//! under deterministic annealing, alternated with regularized TPS fits.
//! Provides the rope configuration distance used for evaluation.

mod softassign;
mod tps;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::sim::RasterImage;

pub use softassign::{softassign_update, Correspondence, Potentials, SoftassignParams};
pub use tps::{fit_tps, tps_kernel, TpsSolver, TpsWarp};

/// At least three finite points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Vec2>,
}

impl PointSet {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::TooFewPoints { needed: 3, got: points.len() });
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite point ({}, {})", p.x, p.y)));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    /// px²; defaults to the mean squared distance between the two sets.
    #[serde(default)]
    pub t_init: Option<f64>,
    /// px²
    pub t_final: f64,
    pub anneal_rate: f64,
    /// λ = lambda_factor · T.
    pub lambda_factor: f64,
    /// px²; defaults to the initial temperature.
    #[serde(default)]
    pub outlier_cost: Option<f64>,
    /// Mask points kept per image.
    pub n_max: usize,
    pub softassign: SoftassignParams,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            t_init: None,
            t_final: 0.05,
            anneal_rate: 0.93,
            lambda_factor: 10.0,
            outlier_cost: None,
            n_max: 150,
            softassign: SoftassignParams::default(),
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || !(0.0 < self.anneal_rate && self.anneal_rate < 1.0) || !(self.lambda_factor >= 0.0) {
            return Err(Error::InvalidConfig("registration: need t_final > 0, 0 < anneal_rate < 1, lambda_factor ≥ 0".into()));
        }
        if self.n_max < 3 {
            return Err(Error::InvalidConfig("registration.n_max must be ≥ 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub warp: TpsWarp,
    pub correspondence: Correspondence,
    /// Soft-matched squared error after each annealing stage.
    pub stage_errors: Vec<f64>,
    /// False when some stage hit the sweep limit before the tolerance.
    pub all_converged: bool,
}

impl Registration {
    /// Correspondence-weighted average of the targets matched to each source
    /// point; a point with no inner mass falls back to its nearest target.
    pub fn soft_matches(&self, src: &PointSet, dst: &PointSet) -> Vec<Vec2> {
        soft_matches(&self.correspondence, src.points(), dst.points())
    }
}

fn soft_matches(c: &Correspondence, src: &[Vec2], dst: &[Vec2]) -> Vec<Vec2> {
    (0..c.n)
        .map(|i| {
            let row = &c.row(i)[..c.k];
            let mass: f64 = row.iter().sum();
            if mass > 1e-12 {
                let mut acc = Vec2::new(0.0, 0.0);
                for (m, d) in row.iter().zip(dst) {
                    acc = acc + *d * *m;
                }
                acc * (1.0 / mass)
            } else {
                *dst.iter().min_by(|a, b| a.dist_sq(src[i]).total_cmp(&b.dist_sq(src[i]))).unwrap()
            }
        })
        .collect()
}

fn mean_pairwise_sq(a: &[Vec2], b: &[Vec2]) -> f64 {
    let mut s = 0.0;
    for p in a {
        for q in b {
            s += p.dist_sq(*q);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Registers `src` onto `dst`. Each annealing stage runs one softassign and
/// one TPS fit to the targets `y_i = Σ_j M_ij v_j + (1 − r_i) f(x_i)`, where
/// `r_i` is the inner mass of row `i`, so outlier points keep their position.
pub fn register(src: &PointSet, dst: &PointSet, params: &RegistrationParams) -> Result<Registration> {
    params.validate()?;
    let (xs, vs) = (src.points(), dst.points());
    let (n, k) = (xs.len(), vs.len());
    let solver = TpsSolver::new(xs)?;
    let t_init = params.t_init.unwrap_or_else(|| mean_pairwise_sq(xs, vs)).max(params.t_final);
    let outlier = params.outlier_cost.unwrap_or(t_init);

    let mut warp;
    let mut warped = xs.to_vec();
    let mut pot = Potentials::default();
    let mut cost = vec![0.0; n * k];
    let mut stage_errors = Vec::new();
    let mut all_converged = true;
    let mut t = t_init;
    let mut corr;
    loop {
        for (i, p) in warped.iter().enumerate() {
            for (j, v) in vs.iter().enumerate() {
                cost[i * k + j] = p.dist_sq(*v);
            }
        }
        corr = softassign_update(&cost, n, k, t, outlier, &params.softassign, Some(&mut pot));
        all_converged &= corr.converged;
        let targets: Vec<Vec2> = (0..n)
            .map(|i| {
                let row = &corr.row(i)[..k];
                let mut acc = warped[i] * (1.0 - row.iter().sum::<f64>());
                for (m, v) in row.iter().zip(vs) {
                    acc = acc + *v * *m;
                }
                acc
            })
            .collect();
        warp = solver.solve(&targets, params.lambda_factor * t)?;
        warped = xs.iter().map(|p| warp.apply(*p)).collect();
        let err: f64 = (0..n)
            .map(|i| corr.row(i)[..k].iter().zip(vs).map(|(m, v)| m * warped[i].dist_sq(*v)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        stage_errors.push(err);
        if t <= params.t_final {
            break;
        }
        t = (t * params.anneal_rate).max(params.t_final);
    }
    Ok(Registration {
        warp,
        correspondence: corr,
        stage_errors,
        all_converged,
    })
}

/// Deterministic farthest-point subsample starting from index 0.
pub fn farthest_point_sample(points: &[Vec2], n_max: usize) -> Vec<Vec2> {
    if points.len() <= n_max {
        return points.to_vec();
    }
    let mut chosen = vec![points[0]];
    let mut d2: Vec<f64> = points.iter().map(|p| p.dist_sq(points[0])).collect();
    while chosen.len() < n_max {
        let (idx, _) = d2
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        let p = points[idx];
        chosen.push(p);
        for (d, q) in d2.iter_mut().zip(points) {
            *d = d.min(q.dist_sq(p));
        }
    }
    chosen
}

/// Mask points of `img`, subsampled to at most `n_max`.
pub fn mask_point_set(img: &RasterImage, n_max: usize) -> Result<PointSet> {
    let pts = img.mask_points();
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    PointSet::new(farthest_point_sample(&pts, n_max))
}

/// Mean distance in pixels from each sampled point of `a` to its soft match
/// in `b`, measured in original coordinates after registering `a` onto `b`.
pub fn config_distance(a: &RasterImage, b: &RasterImage, params: &RegistrationParams) -> Result<f64> {
    Ok(config_distance_detailed(a, b, params)?.0)
}

/// [`config_distance`] together with the sampled point sets and registration.
pub fn config_distance_detailed(
    a: &RasterImage,
    b: &RasterImage,
    params: &RegistrationParams,
) -> Result<(f64, PointSet, PointSet, Registration)> {
    let pa = mask_point_set(a, params.n_max)?;
    let pb = mask_point_set(b, params.n_max)?;
    let reg = register(&pa, &pb, params)?;
    let matches = reg.soft_matches(&pa, &pb);
    let d = pa.points().iter().zip(&matches).map(|(p, m)| p.dist(*m)).sum::<f64>() / pa.len() as f64;
    Ok((d, pa, pb, reg))
}

/// Per-point deformation `‖x_i − match(x_i)‖` and the point at the `q`-th
/// percentile (nearest rank, ties by index). Returns `(index, point, match)`.
pub fn deformation_percentile(
    src: &PointSet,
    dst: &PointSet,
    correspondence: &Correspondence,
    q: f64,
) -> (usize, Vec2, Vec2) {
    let matches = soft_matches(correspondence, src.points(), dst.points());
    let mut order: Vec<(f64, usize)> = src.points().iter().zip(&matches).map(|(p, m)| p.dist(*m)).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = order.len();
    let rank = ((q.clamp(0.0, 100.0) / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let i = order[rank - 1].1;
    (i, src.points()[i], matches[i])
}

/// Writes the full `(N+1) × (K+1)` correspondence matrix as CSV.
pub fn write_correspondence_csv(c: &Correspondence, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..c.k).map(|j| format!("t{j}")).chain(["outlier".to_string()]).collect();
    writeln!(w, "source,{}", header.join(","))?;
    for i in 0..=c.n {
        let label = if i == c.n { "outlier".to_string() } else { format!("s{i}") };
        let row: Vec<String> = c.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{label},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rope_like(seed: u64, n: usize) -> Vec<Vec2> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rng.gen_range(0.05..0.2), rng.gen_range(2.0..6.0));
        (0..n).map(|i| Vec2::new(12.0 + i as f64 * 0.9, 30.0 + b * (a * i as f64).sin() + 0.3 * (i % 3) as f64)).collect()
    }

    #[test]
    fn identical_sets_match_themselves() {
        let p = PointSet::new(rope_like(1, 40)).unwrap();
        let reg = register(&p, &p, &RegistrationParams::default()).unwrap();
        let m = reg.soft_matches(&p, &p);
        let d: f64 = p.points().iter().zip(&m).map(|(a, b)| a.dist(*b)).sum::<f64>() / 40.0;
        assert!(d <= 1e-6, "{d}");
        assert_eq!(reg.correspondence.argmax_matches(), (0..40).collect::<Vec<_>>());
        assert!(reg.warp.side_condition_residual() < 1e-8);
    }

    #[test]
    fn translation_pairs_twins() {
        let a = rope_like(2, 50);
        let b: Vec<Vec2> = a.iter().map(|p| *p + Vec2::new(5.0, 0.0)).collect();
        let (pa, pb) = (PointSet::new(a).unwrap(), PointSet::new(b).unwrap());
        let reg = register(&pa, &pb, &RegistrationParams::default()).unwrap();
        let hits = reg.correspondence.argmax_matches().iter().enumerate().filter(|(i, j)| i == *j).count();
        assert!(hits as f64 >= 0.95 * 50.0, "{hits}");
    }

    #[test]
    fn percentile_picks_by_rank() {
        let src = PointSet::new((0..10).map(|i| Vec2::new(i as f64, (i * i) as f64 * 0.1)).collect()).unwrap();
        // Deformation grows linearly with index.
        let dst = PointSet::new(src.points().iter().enumerate().map(|(i, p)| *p + Vec2::new(0.0, i as f64)).collect()).unwrap();
        let mut m = vec![0.0; 11 * 11];
        for i in 0..10 {
            m[i * 11 + i] = 1.0;
        }
        let c = Correspondence { n: 10, k: 10, m, temperature: 1.0, residual: 0.0, sweeps: 0, converged: true };
        assert_eq!(deformation_percentile(&src, &dst, &c, 90.0).0, 8);
        assert_eq!(deformation_percentile(&src, &dst, &c, 100.0).0, 9);
        assert_eq!(deformation_percentile(&src, &dst, &c, 0.0).0, 0);
    }

    #[test]
    fn fps_is_deterministic_and_spread() {
        let pts: Vec<Vec2> = (0..100).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let s = farthest_point_sample(&pts, 3);
        assert_eq!(s, vec![Vec2::new(0.0, 0.0), Vec2::new(99.0, 0.0), Vec2::new(49.0, 0.0)]);
        assert_eq!(farthest_point_sample(&pts, 200).len(), 100);
    }

    #[test]
    fn correspondence_csv_has_outlier_bins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let c = softassign_update(&[0.0, 4.0, 4.0, 0.0], 2, 2, 1.0, 2.0, &Default::default(), None);
        write_correspondence_csv(&c, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("source,t0,t1,outlier"));
    }

    fn warped_by_random_tps(points: &[Vec2], seed: u64, amp: f64) -> Vec<Vec2> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ctrl: Vec<Vec2> = (0..6).map(|_| Vec2::new(rng.gen_range(5.0..60.0), rng.gen_range(15.0..45.0))).collect();
        let moved: Vec<Vec2> = ctrl.iter().map(|c| *c + Vec2::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp))).collect();
        let f = tps::fit_tps(&ctrl, &moved, 1e3).unwrap();
        points.iter().map(|p| f.apply(*p)).collect()
    }

    #[test]
    fn synthetic_tps_warp_is_recovered() {
        for seed in 0..4 {
            let src = PointSet::new(rope_like(seed, 70)).unwrap();
            let dst = PointSet::new(warped_by_random_tps(src.points(), seed + 10, 3.0)).unwrap();
            let reg = register(&src, &dst, &RegistrationParams::default()).unwrap();
            assert!(reg.all_converged);
            let rms = (src.points().iter().zip(dst.points()).map(|(p, q)| reg.warp.apply(*p).dist_sq(*q)).sum::<f64>()
                / src.len() as f64)
                .sqrt();
            assert!(rms <= 0.5, "seed {seed}: rms {rms}");
        }
    }

    #[test]
    fn rendered_rope_distances() {
        use crate::sim::{render, reset_rope, SimConfig};
        let cfg = SimConfig::default();
        let rope = reset_rope(&cfg);
        let img = render(&rope, &cfg);
        let params = RegistrationParams::default();
        let (d, _, _, reg) = config_distance_detailed(&img, &img, &params).unwrap();
        assert!(d <= 1e-3, "{d}");
        assert!(reg.all_converged);
        let shift = Vec2::new(0.0, 5.0);
        let moved = render(&rope.translated(cfg.px_to_cm(shift) - cfg.px_to_cm(Vec2::new(0.0, 0.0))), &cfg);
        let d = config_distance(&img, &moved, &params).unwrap();
        assert!((d - 5.0).abs() <= 0.5, "{d}");
    }
}
