//! Scripted shape demonstrations, experiment orchestration and reporting.

mod experiment;
mod report;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionContinuous, LEN_MAX, LEN_MIN};
use crate::controllers::{Demonstration, Provenance};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::registration::{config_distance, RegistrationParams};
use crate::sim::{crossing_count, render, RopeState, SimConfig, World};

pub use experiment::{run_experiment, ExperimentPlan, Method, Resources};
pub use report::{
    export_report, read_rows_csv, write_svg, Aggregate, ExperimentReport, KnotRow, MethodSummary, ReportRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeName {
    L,
    S,
    W,
    #[serde(rename = "knot")]
    Knot,
}

impl ShapeName {
    pub const ALL: [ShapeName; 4] = [ShapeName::L, ShapeName::S, ShapeName::W, ShapeName::Knot];
}

impl fmt::Display for ShapeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeName::L => "L",
            ShapeName::S => "S",
            ShapeName::W => "W",
            ShapeName::Knot => "knot",
        })
    }
}

impl FromStr for ShapeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "l" => Ok(ShapeName::L),
            "S" | "s" => Ok(ShapeName::S),
            "W" | "w" => Ok(ShapeName::W),
            "knot" | "K" | "k" => Ok(ShapeName::Knot),
            other => Err(Error::InvalidConfig(format!("unknown shape `{other}` (expected L, S, W or knot)"))),
        }
    }
}

/// One scripted move. The pick is resolved against the rope at execution
/// time: the node at fraction `along` of the rope from the clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub along: f64,
    /// degrees
    pub theta_deg: f64,
    /// cm
    pub length: f64,
}

const fn st(along: f64, theta_deg: f64, length: f64) -> ScriptStep {
    ScriptStep { along, theta_deg, length }
}

/// Per-seed perturbation of scripted moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    /// cm, each axis
    pub pick: f64,
    /// degrees
    pub theta_deg: f64,
    /// cm
    pub length: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { pick: 0.3, theta_deg: 3.0, length: 0.5 }
    }
}

impl Jitter {
    pub fn none() -> Self {
        Self { pick: 0.0, theta_deg: 0.0, length: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTarget {
    pub name: ShapeName,
    pub variant: usize,
    pub script: Vec<ScriptStep>,
    /// Actions between recorded keyframes.
    pub stride: usize,
}

/// Number of scripted variants per shape.
pub const VARIANTS: usize = 2;

impl ShapeTarget {
    /// Built-in script `variant` (0 or 1) for `name`, recorded every `stride` actions.
    pub fn builtin(name: ShapeName, variant: usize, stride: usize) -> Result<Self> {
        let script: &[ScriptStep] = match (name, variant) {
            (ShapeName::L, 0) => &[st(1.0, 240.0, 15.0), st(1.0, 270.0, 10.0)],
            (ShapeName::L, 1) => &[st(1.0, 120.0, 15.0), st(1.0, 90.0, 10.0)],
            (ShapeName::S, 0) => &[st(0.4, 270.0, 8.0), st(0.8, 90.0, 8.0)],
            (ShapeName::S, 1) => &[st(0.4, 90.0, 8.0), st(0.8, 270.0, 8.0)],
            (ShapeName::W, 0) => &[st(0.25, 90.0, 8.0), st(0.5, 270.0, 8.0), st(0.75, 90.0, 8.0)],
            (ShapeName::W, 1) => &[st(0.25, 270.0, 8.0), st(0.5, 90.0, 8.0), st(0.75, 270.0, 8.0)],
            (ShapeName::Knot, 0) => &[st(0.95, 300.0, 8.0), st(0.8, 120.0, 14.0), st(0.9, 240.0, 12.0)],
            (ShapeName::Knot, 1) => &[st(0.8, 150.0, 15.0), st(1.0, 90.0, 6.0), st(0.9, 120.0, 12.0), st(0.7, 270.0, 10.0)],
            _ => return Err(Error::InvalidConfig(format!("shape {name} has variants 0..{VARIANTS}, got {variant}"))),
        };
        let t = Self { name, variant, script: script.to_vec(), stride };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.script.is_empty() {
            return Err(Error::InvalidConfig("shape script is empty".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("keyframe stride must be ≥ 1".into()));
        }
        if let Some(s) = self.script.iter().find(|s| !(0.0..=1.0).contains(&s.along)) {
            return Err(Error::InvalidConfig(format!("script pick fraction {} outside [0, 1]", s.along)));
        }
        Ok(())
    }
}

fn resolve(step: &ScriptStep, state: &RopeState, jitter: &Jitter, rng: &mut ChaCha8Rng) -> ActionContinuous {
    let n = state.nodes.len() - 1;
    let node = state.nodes[((step.along * n as f64).round() as usize).min(n)];
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 };
    let pick = node + Vec2::new(u(jitter.pick), u(jitter.pick));
    let theta = (step.theta_deg + u(jitter.theta_deg)).to_radians();
    let length = step.length + u(jitter.length);
    ActionContinuous::normalized(pick, theta, length, (LEN_MIN, LEN_MAX))
}

/// Runs the script from reset, recording a keyframe every `stride` actions
/// and after the last one. The node states and executed actions are kept
/// as the oracle.
pub fn make_demo(target: &ShapeTarget, sim: &SimConfig, jitter: &Jitter, seed: u64) -> Result<Demonstration> {
    target.validate()?;
    let mut world = World::new(sim.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyframes = vec![world.observe()];
    let mut states = vec![world.state.clone()];
    let mut actions = Vec::new();
    let mut segment = Vec::new();
    for (i, step) in target.script.iter().enumerate() {
        let a = resolve(step, &world.state, jitter, &mut rng);
        world.step(&a).map_err(|e| Error::ScriptFailed { step: i, source: Box::new(e) })?;
        segment.push(a);
        if segment.len() == target.stride || i + 1 == target.script.len() {
            keyframes.push(world.observe());
            states.push(world.state.clone());
            actions.push(std::mem::take(&mut segment));
        }
    }
    Ok(Demonstration {
        keyframes,
        states: Some(states),
        actions: Some(actions),
        provenance: Provenance::Scripted {
            shape: target.name.to_string(),
            variant: target.variant,
            seed,
            stride: target.stride,
        },
    })
}

/// Knot stand-in: at least two self-crossings and within `threshold_px`
/// of the final keyframe.
pub fn knot_success(
    final_state: &RopeState,
    final_keyframe: &crate::sim::RasterImage,
    sim: &SimConfig,
    threshold_px: f64,
    reg: &RegistrationParams,
) -> Result<bool> {
    if crossing_count(final_state) < 2 {
        return Ok(false);
    }
    if threshold_px.is_infinite() {
        return Ok(true);
    }
    Ok(config_distance(final_keyframe, &render(final_state, sim), reg)? <= threshold_px)
}
