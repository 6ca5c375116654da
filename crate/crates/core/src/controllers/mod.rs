//! Execution policies that drive a world toward demonstration keyframes.

mod baselines;
mod trace_io;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actions::{discretize, ActionContinuous};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::model::{InverseDynamics, InverseModelOutput};
use crate::registration::{config_distance, RegistrationParams};
use crate::sim::{RasterImage, RopeState, World};

pub use baselines::{
    baseline_hand_engineered, baseline_nearest_neighbor, downsample, NearestNeighborIndex, NN_SIDE,
};
pub use trace_io::{read_trace, write_trace};

/// Where a demonstration came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Scripted { shape: String, variant: usize, seed: u64, stride: usize },
    HumanUi { session: String },
}

/// Ordered keyframes of a rope task, optionally with the node states that
/// produced them and the actions executed between consecutive keyframes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub keyframes: Vec<RasterImage>,
    #[serde(default)]
    pub states: Option<Vec<RopeState>>,
    /// `actions[t]` leads from keyframe `t` to keyframe `t + 1`.
    #[serde(default)]
    pub actions: Option<Vec<Vec<ActionContinuous>>>,
    pub provenance: Provenance,
}

impl Demonstration {
    pub fn new(keyframes: Vec<RasterImage>, provenance: Provenance) -> Result<Self> {
        let d = Self { keyframes, states: None, actions: None, provenance };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.keyframes.len();
        if t < 2 {
            return Err(Error::InvalidDemo(format!("demonstration needs ≥ 2 keyframes, got {t}")));
        }
        if let Some(k) = self.keyframes.iter().position(|k| !k.same_size(&self.keyframes[0])) {
            return Err(Error::InvalidDemo(format!("keyframe {k} differs in size from keyframe 0")));
        }
        if self.states.as_ref().is_some_and(|s| s.len() != t) {
            return Err(Error::InvalidDemo("states must have one entry per keyframe".into()));
        }
        if self.actions.as_ref().is_some_and(|a| a.len() != t - 1) {
            return Err(Error::InvalidDemo("actions must have one segment per keyframe gap".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let d: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        d.validate()?;
        Ok(d)
    }
}

/// One step of a policy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub observed: RasterImage,
    #[serde(default)]
    pub prediction: Option<InverseModelOutput>,
    /// `None` when the step was skipped.
    #[serde(default)]
    pub action: Option<ActionContinuous>,
    pub post: RasterImage,
    /// Distance from the step's reference keyframe to `post`, in pixels.
    #[serde(default)]
    pub distance: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub policy: String,
    pub steps: Vec<TraceStep>,
}

impl ExecutionTrace {
    pub fn final_distance(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.distance)
    }
}

/// Progress notifications emitted while a policy runs.
#[derive(Debug, Clone)]
pub enum TraceEvent<'a> {
    Prediction {
        step: usize,
        output: &'a InverseModelOutput,
        /// Pick after snapping onto the rope, in pixels.
        pick_px: Vec2,
        action: &'a ActionContinuous,
    },
    StepDone {
        step: &'a TraceStep,
        /// World state after the step.
        state: &'a RopeState,
    },
}

/// What a policy decided for one step.
pub(crate) struct Decision {
    pub prediction: Option<InverseModelOutput>,
    pub action: Result<ActionContinuous>,
}

/// Runs `references.len()` steps. Each step observes the world, asks
/// `decide` for an action, executes it and measures the distance from the
/// reference to the result. Failures are recorded and the run continues.
pub(crate) fn run_policy(
    name: &str,
    world: &mut World,
    references: &[&RasterImage],
    reg: &RegistrationParams,
    mut decide: impl FnMut(usize, &World, &RasterImage) -> Decision,
    mut on_event: impl FnMut(TraceEvent<'_>),
) -> ExecutionTrace {
    let mut steps = Vec::with_capacity(references.len());
    for (t, reference) in references.iter().enumerate() {
        let observed = world.observe();
        let d = decide(t, world, &observed);
        let mut error = None;
        let mut action = None;
        match d.action {
            Ok(a) => {
                if let Some(p) = &d.prediction {
                    on_event(TraceEvent::Prediction {
                        step: t,
                        output: p,
                        pick_px: world.config.cm_to_px(a.pick),
                        action: &a,
                    });
                }
                match world.step(&a) {
                    Ok(()) => action = Some(a),
                    Err(e) => error = Some(e.to_string()),
                }
            }
            Err(e) => error = Some(e.to_string()),
        }
        let post = world.observe();
        let distance = match config_distance(reference, &post, reg) {
            Ok(v) => Some(v),
            Err(e) => {
                error.get_or_insert_with(|| format!("distance: {e}"));
                None
            }
        };
        let s = TraceStep { step: t, observed, prediction: d.prediction, action, post, distance, error };
        on_event(TraceEvent::StepDone { step: &s, state: &world.state });
        steps.push(s);
    }
    ExecutionTrace { policy: name.to_string(), steps }
}

/// Model action toward `goal`, with the pick snapped onto the observed rope.
fn model_decision(model: &dyn InverseDynamics, world: &World, observed: &RasterImage, goal: &RasterImage) -> Decision {
    match model.action(observed, goal) {
        Ok((out, mut a)) => {
            let snapped = snap_to_rope(world.config.cm_to_px(a.pick), observed).map(|p| {
                a.pick = world.config.px_to_cm(p);
                a
            });
            Decision { prediction: Some(out), action: snapped }
        }
        Err(e) => Decision { prediction: None, action: Err(e) },
    }
}

/// Greedy keyframe imitation: at step `t` the model sees the current
/// observation and keyframe `t + 1`.
pub fn imitate(model: &dyn InverseDynamics, world: &mut World, demo: &Demonstration, reg: &RegistrationParams) -> Result<ExecutionTrace> {
    imitate_with(model, world, demo, reg, |_| {})
}

/// [`imitate`] reporting progress through `on_event`.
pub fn imitate_with(
    model: &dyn InverseDynamics,
    world: &mut World,
    demo: &Demonstration,
    reg: &RegistrationParams,
    on_event: impl FnMut(TraceEvent<'_>),
) -> Result<ExecutionTrace> {
    demo.validate()?;
    let refs: Vec<&RasterImage> = demo.keyframes[1..].iter().collect();
    Ok(run_policy(
        "imitate",
        world,
        &refs,
        reg,
        |t, w, obs| model_decision(model, w, obs, &demo.keyframes[t + 1]),
        on_event,
    ))
}

/// Feeds only the final goal for `steps` actions; distances are to `goal`.
pub fn baseline_no_imitation(
    model: &dyn InverseDynamics,
    world: &mut World,
    goal: &RasterImage,
    steps: usize,
    reg: &RegistrationParams,
) -> Result<ExecutionTrace> {
    if steps == 0 {
        return Err(Error::InvalidConfig("no-imitation needs steps ≥ 1".into()));
    }
    let refs = vec![goal; steps];
    Ok(run_policy("no_imitation", world, &refs, reg, |_, w, obs| model_decision(model, w, obs, goal), |_| {}))
}

/// No-imitation over a demonstration: `T − 1` actions toward the last
/// keyframe, with distances measured against each intermediate keyframe so
/// traces line up with [`imitate`].
pub fn no_imitation_on_demo(
    model: &dyn InverseDynamics,
    world: &mut World,
    demo: &Demonstration,
    reg: &RegistrationParams,
) -> Result<ExecutionTrace> {
    demo.validate()?;
    let goal = demo.keyframes.last().expect("validated");
    let refs: Vec<&RasterImage> = demo.keyframes[1..].iter().collect();
    Ok(run_policy("no_imitation", world, &refs, reg, |_, w, obs| model_decision(model, w, obs, goal), |_| {}))
}

/// A stand-in model that knows a demonstration's stored actions: asked for
/// keyframe `t + 1` it returns the first action recorded after keyframe `t`.
/// Exact for stride-1 demonstrations started from the first keyframe state.
pub struct ReplayOracle {
    keyframes: Vec<RasterImage>,
    actions: Vec<ActionContinuous>,
    discretization: crate::actions::DiscretizationSpec,
}

impl ReplayOracle {
    pub fn new(demo: &Demonstration, discretization: crate::actions::DiscretizationSpec) -> Result<Self> {
        let segs = demo.actions.as_ref().ok_or_else(|| Error::InvalidDemo("oracle needs stored actions".into()))?;
        let actions = segs
            .iter()
            .enumerate()
            .map(|(t, s)| s.first().copied().ok_or_else(|| Error::InvalidDemo(format!("segment {t} has no actions"))))
            .collect::<Result<_>>()?;
        Ok(Self { keyframes: demo.keyframes.clone(), actions, discretization })
    }

    fn lookup(&self, goal: &RasterImage) -> Result<ActionContinuous> {
        self.keyframes[1..]
            .iter()
            .position(|k| k == goal)
            .map(|t| self.actions[t])
            .ok_or_else(|| Error::InvalidDemo("goal is not a keyframe of the oracle's demonstration".into()))
    }
}

impl InverseDynamics for ReplayOracle {
    fn discretization(&self) -> &crate::actions::DiscretizationSpec {
        &self.discretization
    }

    fn predict(&self, _current: &RasterImage, goal: &RasterImage) -> Result<InverseModelOutput> {
        let a = self.lookup(goal)?;
        Ok(InverseModelOutput::one_hot(discretize(&a, &self.discretization)?, &self.discretization))
    }

    fn action(&self, current: &RasterImage, goal: &RasterImage) -> Result<(InverseModelOutput, ActionContinuous)> {
        Ok((self.predict(current, goal)?, self.lookup(goal)?))
    }
}

/// Moves a pixel-space point onto the rope mask. A point inside a mask pixel
/// is returned unchanged; otherwise the nearest mask pixel centre is
/// returned, ties going to the first in row-major order.
pub fn snap_to_rope(pick: Vec2, mask: &RasterImage) -> Result<Vec2> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let (c0, r0) = (pick.x.floor() as i64, pick.y.floor() as i64);
    if (0..w).contains(&c0) && (0..h).contains(&r0) && mask.mask[(r0 * w + c0) as usize] {
        return Ok(pick);
    }
    // Pixel centres on Chebyshev ring r lie at least r - 0.5 away from the pick.
    let mut best: Option<(f64, i64, Vec2)> = None;
    let max_r = c0.abs() + r0.abs() + w + h;
    for r in 0..=max_r {
        if best.is_some_and(|(d2, _, _)| (r as f64 - 0.5).powi(2) > d2) {
            break;
        }
        for row in (r0 - r).max(0)..=(r0 + r).min(h - 1) {
            let full = (row - r0).abs() == r;
            let cols: Vec<i64> = if full { (c0 - r..=c0 + r).collect() } else { vec![c0 - r, c0 + r] };
            for col in cols {
                if !(0..w).contains(&col) || !mask.mask[(row * w + col) as usize] {
                    continue;
                }
                let centre = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
                let d2 = centre.dist_sq(pick);
                let key = row * w + col;
                if best.map_or(true, |(bd, bk, _)| d2 < bd || (d2 == bd && key < bk)) {
                    best = Some((d2, key, centre));
                }
            }
        }
    }
    best.map(|b| b.2).ok_or(Error::EmptyMask)
}

#[cfg(test)]
mod tests;
