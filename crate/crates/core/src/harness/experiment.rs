use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{ExperimentReport, KnotRow, ReportRow, RunMeta};
use super::{knot_success, make_demo, Jitter, ShapeName, ShapeTarget, VARIANTS};
use crate::actions::DiscretizationSpec;
use crate::controllers::{
    baseline_hand_engineered, baseline_nearest_neighbor, imitate, no_imitation_on_demo, ExecutionTrace, NearestNeighborIndex,
    ReplayOracle,
};
use crate::error::{Error, Result};
use crate::model::InverseDynamics;
use crate::registration::RegistrationParams;
use crate::sim::{SimConfig, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Imitate,
    NearestNeighbor,
    NoImitation,
    HandEngineered,
    Oracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Imitate => "imitate",
            Method::NearestNeighbor => "nearest_neighbor",
            Method::NoImitation => "no_imitation",
            Method::HandEngineered => "hand_engineered",
            Method::Oracle => "oracle",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "imitate" => Ok(Method::Imitate),
            "nn" | "nearest_neighbor" => Ok(Method::NearestNeighbor),
            "noimit" | "no_imitation" => Ok(Method::NoImitation),
            "hand" | "hand_engineered" => Ok(Method::HandEngineered),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected imitate, nn, noimit, hand or oracle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub methods: Vec<Method>,
    pub shapes: Vec<ShapeName>,
    /// Seeds per (shape, variant).
    pub repeats: usize,
    pub variants: usize,
    pub stride: usize,
    pub jitter: Jitter,
    pub seed: u64,
    pub knot_threshold_px: f64,
    pub jobs: usize,
    pub registration: RegistrationParams,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            methods: vec![Method::Imitate, Method::NearestNeighbor, Method::NoImitation, Method::HandEngineered],
            shapes: vec![ShapeName::L, ShapeName::S],
            repeats: 10,
            variants: VARIANTS,
            stride: 1,
            jitter: Jitter::default(),
            seed: 0,
            knot_threshold_px: 5.0,
            jobs: 1,
            registration: RegistrationParams::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.shapes.is_empty() {
            return Err(Error::InvalidConfig("experiment.methods and experiment.shapes must be nonempty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("experiment.repeats must be ≥ 1".into()));
        }
        if !(1..=VARIANTS).contains(&self.variants) {
            return Err(Error::InvalidConfig(format!("experiment.variants must be in 1..={VARIANTS}")));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("experiment.stride must be ≥ 1".into()));
        }
        if !(self.knot_threshold_px > 0.0) {
            return Err(Error::InvalidConfig("experiment.knot_threshold_px must be > 0".into()));
        }
        self.registration.validate()
    }
}

/// What the policies under test need.
#[derive(Clone, Copy, Default)]
pub struct Resources<'a> {
    pub model: Option<&'a dyn InverseDynamics>,
    pub nn_index: Option<&'a NearestNeighborIndex>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the demonstration for one (shape, variant, repeat) cell.
pub fn cell_seed(base: u64, shape: ShapeName, variant: usize, repeat: usize) -> u64 {
    mix(mix(mix(base) ^ shape as u64) ^ (variant as u64) << 32 ^ repeat as u64)
}

#[derive(Clone, Copy)]
struct Cell {
    shape: ShapeName,
    variant: usize,
    repeat: usize,
}

fn run_method(
    method: Method,
    world: &mut World,
    demo: &crate::controllers::Demonstration,
    res: &Resources<'_>,
    disc: &DiscretizationSpec,
    reg: &RegistrationParams,
) -> Result<ExecutionTrace> {
    match method {
        Method::Imitate => imitate(res.model.ok_or(Error::ModelMissing)?, world, demo, reg),
        Method::NoImitation => no_imitation_on_demo(res.model.ok_or(Error::ModelMissing)?, world, demo, reg),
        Method::NearestNeighbor => {
            baseline_nearest_neighbor(res.nn_index.ok_or(Error::EmptyDataset("nearest-neighbour index"))?, world, demo, reg)
        }
        Method::HandEngineered => baseline_hand_engineered(world, demo, reg),
        Method::Oracle => {
            let oracle = ReplayOracle::new(demo, *disc)?;
            let mut t = imitate(&oracle, world, demo, reg)?;
            t.policy = "oracle".into();
            Ok(t)
        }
    }
}

fn run_cell(
    cell: Cell,
    plan: &ExperimentPlan,
    sim: &SimConfig,
    disc: &DiscretizationSpec,
    res: &Resources<'_>,
) -> (Vec<ReportRow>, Vec<KnotRow>) {
    let seed = cell_seed(plan.seed, cell.shape, cell.variant, cell.repeat);
    let base = ReportRow {
        method: Method::Oracle,
        shape: cell.shape,
        variant: cell.variant,
        repeat: cell.repeat,
        seed,
        step: 0,
        distance: None,
        error: None,
    };
    let demo = ShapeTarget::builtin(cell.shape, cell.variant, plan.stride)
        .and_then(|t| make_demo(&t, sim, &plan.jitter, seed));
    let demo = match demo {
        Ok(d) => d,
        Err(e) => {
            let rows = plan
                .methods
                .iter()
                .map(|&m| ReportRow { method: m, error: Some(format!("demo: {e}")), ..base.clone() })
                .collect();
            return (rows, Vec::new());
        }
    };
    let start = demo.states.as_ref().expect("scripted demos keep states")[0].clone();
    let mut rows = Vec::new();
    let mut knots = Vec::new();
    for &m in &plan.methods {
        let mut world = World::with_state(sim.clone(), start.clone()).expect("validated sim");
        match run_method(m, &mut world, &demo, res, disc, &plan.registration) {
            Ok(trace) => {
                for s in &trace.steps {
                    rows.push(ReportRow {
                        method: m,
                        step: s.step + 1,
                        distance: s.distance,
                        error: s.error.clone(),
                        ..base.clone()
                    });
                }
                if cell.shape == ShapeName::Knot {
                    let last = demo.keyframes.last().expect("validated");
                    let ok = knot_success(&world.state, last, sim, plan.knot_threshold_px, &plan.registration);
                    knots.push(KnotRow {
                        method: m,
                        variant: cell.variant,
                        repeat: cell.repeat,
                        seed,
                        crossings: crate::sim::crossing_count(&world.state),
                        final_distance: trace.final_distance(),
                        success: ok.unwrap_or(false),
                    });
                }
            }
            Err(e) => rows.push(ReportRow { method: m, error: Some(e.to_string()), ..base.clone() }),
        }
    }
    (rows, knots)
}

/// Every (method, shape, variant, repeat) cell: a fresh world at the
/// demonstration's first state, the policy run, and per-step distances to
/// the keyframes. Cell failures are recorded as rows with an error.
pub fn run_experiment(
    plan: &ExperimentPlan,
    sim: &SimConfig,
    disc: &DiscretizationSpec,
    res: &Resources<'_>,
) -> Result<ExperimentReport> {
    plan.validate()?;
    sim.validate()?;
    let needs_model = plan.methods.iter().any(|m| matches!(m, Method::Imitate | Method::NoImitation));
    if needs_model && res.model.is_none() {
        return Err(Error::ModelMissing);
    }
    if plan.methods.contains(&Method::NearestNeighbor) && res.nn_index.is_none() {
        return Err(Error::EmptyDataset("nearest-neighbour index"));
    }
    let started = Instant::now();
    let mut cells = Vec::new();
    for &shape in &plan.shapes {
        for variant in 0..plan.variants {
            for repeat in 0..plan.repeats {
                cells.push(Cell { shape, variant, repeat });
            }
        }
    }
    let jobs = plan.jobs.max(1).min(cells.len());
    let mut results: Vec<(Vec<ReportRow>, Vec<KnotRow>)> = Vec::with_capacity(cells.len());
    if jobs == 1 {
        results.extend(cells.iter().map(|&c| run_cell(c, plan, sim, disc, res)));
    } else {
        let chunks: Vec<Vec<(usize, Cell)>> = (0..jobs)
            .map(|j| cells.iter().copied().enumerate().skip(j).step_by(jobs).collect())
            .collect();
        let mut indexed: Vec<(usize, (Vec<ReportRow>, Vec<KnotRow>))> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| s.spawn(move || chunk.iter().map(|&(i, c)| (i, run_cell(c, plan, sim, disc, res))).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("experiment worker panicked")).collect()
        });
        indexed.sort_by_key(|(i, _)| *i);
        results.extend(indexed.into_iter().map(|(_, r)| r));
    }
    let mut rows = Vec::new();
    let mut knot = Vec::new();
    for (r, k) in results {
        rows.extend(r);
        knot.extend(k);
    }
    Ok(ExperimentReport {
        rows,
        knot,
        meta: RunMeta {
            plan: plan.clone(),
            elapsed_s: started.elapsed().as_secs_f64(),
        },
    })
}
