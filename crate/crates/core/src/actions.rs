//! The pick/drop action primitive and its discretization.
//!
//! A continuous action grabs the rope at `pick` and drags it `length` cm in
//! direction `theta`. For classification the pick location is binned onto a
//! `grid × grid` lattice over the workspace (row-major cell index), the
//! direction into `n_theta` equal sectors of `[0, 2π)`, and the length into
//! `n_len` equal bins of `[len_min, len_max]`. Upper edges fold into the last
//! bin, and executing a discrete action uses bin centres.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Vec2, Workspace};

pub const LEN_MIN: f64 = 1.0;
pub const LEN_MAX: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionContinuous {
    /// cm
    pub pick: Vec2,
    /// radians in `[0, 2π)`
    pub theta: f64,
    /// cm
    pub length: f64,
}

impl ActionContinuous {
    /// Wraps `theta` into `[0, 2π)` and clamps `length` into `len_range`.
    pub fn normalized(pick: Vec2, theta: f64, length: f64, len_range: (f64, f64)) -> Self {
        Self {
            pick,
            theta: wrap_angle(theta),
            length: length.clamp(len_range.0, len_range.1),
        }
    }

    /// Action dragging from `pick` to `drop`, with the length clamped to `len_range`.
    pub fn from_pick_drop(pick: Vec2, drop: Vec2, len_range: (f64, f64)) -> Self {
        let d = drop - pick;
        Self::normalized(pick, d.y.atan2(d.x), d.norm(), len_range)
    }

    pub fn displacement(&self) -> Vec2 {
        Vec2::from_polar(self.length, self.theta)
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if t >= TAU {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionDiscrete {
    pub cell: usize,
    pub theta_bin: usize,
    pub len_bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizationSpec {
    pub grid: usize,
    pub n_theta: usize,
    pub n_len: usize,
    pub len_range: (f64, f64),
    pub workspace: Workspace,
}

impl Default for DiscretizationSpec {
    fn default() -> Self {
        Self {
            grid: 20,
            n_theta: 36,
            n_len: 10,
            len_range: (LEN_MIN, LEN_MAX),
            workspace: Workspace {
                width: 64.0,
                height: 64.0,
            },
        }
    }
}

impl DiscretizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::InvalidConfig("grid must be >= 2".into()));
        }
        if self.n_theta == 0 || self.n_len == 0 {
            return Err(Error::InvalidConfig("bin counts must be >= 1".into()));
        }
        if !(self.len_range.0 < self.len_range.1) {
            return Err(Error::InvalidConfig("len_range must be nonempty".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell_size(&self) -> Vec2 {
        Vec2::new(
            self.workspace.width / self.grid as f64,
            self.workspace.height / self.grid as f64,
        )
    }

    fn len_bin_width(&self) -> f64 {
        (self.len_range.1 - self.len_range.0) / self.n_len as f64
    }

    pub fn cell_of(&self, p: Vec2) -> Result<usize> {
        if !p.is_finite() || !self.workspace.contains(p) {
            return Err(Error::OutOfWorkspace { x: p.x, y: p.y });
        }
        let cs = self.cell_size();
        let col = ((p.x / cs.x).floor() as usize).min(self.grid - 1);
        let row = ((p.y / cs.y).floor() as usize).min(self.grid - 1);
        Ok(row * self.grid + col)
    }

    pub fn cell_center(&self, cell: usize) -> Vec2 {
        let cs = self.cell_size();
        let (row, col) = (cell / self.grid, cell % self.grid);
        Vec2::new((col as f64 + 0.5) * cs.x, (row as f64 + 0.5) * cs.y)
    }

    pub fn theta_bin(&self, theta: f64) -> usize {
        let t = wrap_angle(theta);
        ((t * self.n_theta as f64 / TAU).floor() as usize).min(self.n_theta - 1)
    }

    pub fn theta_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * TAU / self.n_theta as f64
    }

    pub fn len_bin(&self, length: f64) -> usize {
        let l = length.clamp(self.len_range.0, self.len_range.1);
        (((l - self.len_range.0) / self.len_bin_width()).floor() as usize).min(self.n_len - 1)
    }

    pub fn len_center(&self, bin: usize) -> f64 {
        self.len_range.0 + (bin as f64 + 0.5) * self.len_bin_width()
    }
}

pub fn discretize(a: &ActionContinuous, spec: &DiscretizationSpec) -> Result<ActionDiscrete> {
    Ok(ActionDiscrete {
        cell: spec.cell_of(a.pick)?,
        theta_bin: spec.theta_bin(a.theta),
        len_bin: spec.len_bin(a.length),
    })
}

pub fn undiscretize(d: &ActionDiscrete, spec: &DiscretizationSpec) -> ActionContinuous {
    ActionContinuous {
        pick: spec.cell_center(d.cell),
        theta: spec.theta_center(d.theta_bin),
        length: spec.len_center(d.len_bin),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn spec() -> DiscretizationSpec {
        DiscretizationSpec::default()
    }

    fn a(x: f64, y: f64, theta: f64, length: f64) -> ActionContinuous {
        ActionContinuous {
            pick: Vec2::new(x, y),
            theta,
            length,
        }
    }

    #[test]
    fn bin_edges() {
        let s = spec();
        assert_eq!(discretize(&a(1.0, 1.0, 0.0, 5.0), &s).unwrap().theta_bin, 0);
        assert_eq!(discretize(&a(1.0, 1.0, PI, 5.0), &s).unwrap().theta_bin, 18);
        assert_eq!(discretize(&a(1.0, 1.0, 0.0, 15.0), &s).unwrap().len_bin, 9);
        assert_eq!(discretize(&a(1.0, 1.0, 0.0, 1.0), &s).unwrap().len_bin, 0);
        assert_eq!(s.theta_bin(TAU - 1e-12), 35);
        assert_eq!(discretize(&a(64.0, 64.0, 0.0, 2.0), &s).unwrap().cell, 399);
    }

    #[test]
    fn bin_centres() {
        let s = spec();
        let c = undiscretize(
            &ActionDiscrete {
                cell: 0,
                theta_bin: 0,
                len_bin: 0,
            },
            &s,
        );
        assert!((c.length - 1.7).abs() < 1e-12);
        assert_eq!(c.pick, Vec2::new(1.6, 1.6));
        assert!((c.theta - TAU / 72.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_workspace_pick() {
        assert!(matches!(
            discretize(&a(-0.1, 3.0, 0.0, 2.0), &spec()),
            Err(Error::OutOfWorkspace { .. })
        ));
    }

    #[test]
    fn round_trip_is_exhaustive_identity() {
        let s = spec();
        for cell in 0..s.n_cells() {
            for theta_bin in 0..s.n_theta {
                for len_bin in 0..s.n_len {
                    let d = ActionDiscrete {
                        cell,
                        theta_bin,
                        len_bin,
                    };
                    assert_eq!(discretize(&undiscretize(&d, &s), &s).unwrap(), d);
                }
            }
        }
    }

    #[test]
    fn normalization_wraps_and_clamps() {
        let n = ActionContinuous::normalized(Vec2::ZERO, -PI / 2.0, 30.0, (LEN_MIN, LEN_MAX));
        assert!((n.theta - 1.5 * PI).abs() < 1e-12);
        assert_eq!(n.length, 15.0);
        let d = ActionContinuous::from_pick_drop(
            Vec2::new(5.0, 5.0),
            Vec2::new(15.0, 5.0),
            (LEN_MIN, LEN_MAX),
        );
        assert_eq!((d.theta, d.length), (0.0, 10.0));
    }

    proptest! {
        #[test]
        fn discretize_is_total_and_in_range(
            x in 0.0f64..=64.0, y in 0.0f64..=64.0,
            theta in -20.0f64..20.0, length in 0.0f64..30.0,
        ) {
            let s = spec();
            let d = discretize(&ActionContinuous::normalized(Vec2::new(x, y), theta, length, s.len_range), &s).unwrap();
            prop_assert!(d.cell < 400 && d.theta_bin < 36 && d.len_bin < 10);
            // The continuous action lies inside the bin whose centre it maps to.
            let c = undiscretize(&d, &s);
            prop_assert!((c.pick.x - x).abs() <= 1.6 + 1e-9 && (c.pick.y - y).abs() <= 1.6 + 1e-9);
        }
    }

    #[test]
    fn discretize_is_surjective_on_random_samples() {
        use rand::{Rng, SeedableRng};
        let s = spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut cells = vec![false; s.n_cells()];
        let mut thetas = vec![false; s.n_theta];
        let mut lens = vec![false; s.n_len];
        for _ in 0..20_000 {
            let act = a(
                rng.gen_range(0.0..64.0),
                rng.gen_range(0.0..64.0),
                rng.gen_range(0.0..TAU),
                rng.gen_range(1.0..=15.0),
            );
            let d = discretize(&act, &s).unwrap();
            cells[d.cell] = true;
            thetas[d.theta_bin] = true;
            lens[d.len_bin] = true;
        }
        assert!(cells.iter().chain(&thetas).chain(&lens).all(|&b| b));
    }
}
