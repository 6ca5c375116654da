//! Self-supervised interaction data: random and model-driven collection, the
//! goal buffer, and the on-disk record format.

mod records;

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{discretize, undiscretize, ActionContinuous, ActionDiscrete, DiscretizationSpec};
use crate::controllers::snap_to_rope;
use crate::error::{Error, Result};
use crate::model::InverseDynamics;
use crate::sim::{apply_action, render, reset_rope, rope_pixel_count, sample_point_on_rope, RasterImage, RopeState, SimConfig};

pub use records::{read_records, write_records, RECORD_FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub id: u64,
    pub pre_state: RopeState,
    pub post_state: RopeState,
    pub pre_raster: Arc<RasterImage>,
    pub post_raster: Arc<RasterImage>,
    pub action_cont: ActionContinuous,
    pub action_disc: ActionDiscrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionPolicy {
    Random,
    Active,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionConfig {
    /// Reset to the straight rope after this many actions.
    pub actions_per_reset: usize,
    /// Reset when fewer rope pixels than this are visible.
    pub min_rope_pixels: usize,
    /// Fraction of each policy range held out (taken from its tail).
    pub val_fraction: f64,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            actions_per_reset: 50,
            min_rope_pixels: 13,
            val_fraction: 0.04,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions_per_reset == 0 {
            return Err(Error::InvalidConfig("collection.actions_per_reset must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("collection.val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A contiguous run of records gathered by one policy and seed. Records
/// `[start, val_start)` are training data and `[val_start, end)` validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRange {
    pub start: u64,
    pub end: u64,
    pub val_start: u64,
    pub policy: CollectionPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sim_config: SimConfig,
    pub discretization: DiscretizationSpec,
    pub collection: CollectionConfig,
    pub record_count: u64,
    /// Pixel = cm × scale; raster row index grows with y.
    pub px_per_cm: f64,
    pub ranges: Vec<PolicyRange>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for r in &self.ranges {
            if r.start != next || r.val_start < r.start || r.end < r.val_start {
                return Err(Error::ManifestMismatch(format!(
                    "policy range [{}, {}) is not contiguous",
                    r.start, r.end
                )));
            }
            next = r.end;
        }
        if next != self.record_count {
            return Err(Error::ManifestMismatch(format!(
                "ranges cover {next} records but record_count is {}",
                self.record_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn empty(sim: &SimConfig, disc: &DiscretizationSpec, coll: &CollectionConfig) -> Self {
        Self {
            manifest: DatasetManifest {
                format_version: RECORD_FORMAT_VERSION,
                sim_config: sim.clone(),
                discretization: *disc,
                collection: coll.clone(),
                record_count: 0,
                px_per_cm: sim.px_per_cm(),
                ranges: Vec::new(),
            },
            transitions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.manifest
            .ranges
            .iter()
            .flat_map(|r| r.start as usize..r.val_start as usize)
            .collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.manifest
            .ranges
            .iter()
            .flat_map(|r| r.val_start as usize..r.end as usize)
            .collect()
    }

    /// Appends another dataset, renumbering its ids and ranges.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.manifest.sim_config != self.manifest.sim_config
            || other.manifest.discretization != self.manifest.discretization
        {
            return Err(Error::ManifestMismatch("cannot merge datasets with different configs".into()));
        }
        let off = self.transitions.len() as u64;
        for mut r in other.manifest.ranges {
            r.start += off;
            r.val_start += off;
            r.end += off;
            self.manifest.ranges.push(r);
        }
        for mut t in other.transitions {
            t.id += off;
            self.transitions.push(t);
        }
        self.manifest.record_count = self.transitions.len() as u64;
        Ok(())
    }

    /// Records gathered by `policy`, renumbered from zero.
    pub fn subset(&self, policy: CollectionPolicy) -> Dataset {
        let mut out = Dataset {
            manifest: DatasetManifest {
                ranges: Vec::new(),
                record_count: 0,
                ..self.manifest.clone()
            },
            transitions: Vec::new(),
        };
        for r in self.manifest.ranges.iter().filter(|r| r.policy == policy) {
            let part = Dataset {
                manifest: DatasetManifest {
                    ranges: vec![PolicyRange {
                        start: 0,
                        val_start: r.val_start - r.start,
                        end: r.end - r.start,
                        ..r.clone()
                    }],
                    record_count: r.end - r.start,
                    ..self.manifest.clone()
                },
                transitions: self.transitions[r.start as usize..r.end as usize]
                    .iter()
                    .cloned()
                    .map(|mut t| {
                        t.id -= r.start;
                        t
                    })
                    .collect(),
            };
            out.extend(part).expect("same manifest");
        }
        out
    }
}

/// Fixed set of target images that biases active collection.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalBuffer {
    pub goals: Vec<RasterImage>,
}

impl GoalBuffer {
    /// `count` goals, each produced by 1–`max_actions` random actions from reset.
    pub fn generate(sim: &SimConfig, count: usize, max_actions: usize, seed: u64) -> Result<Self> {
        if count == 0 || max_actions == 0 {
            return Err(Error::InvalidConfig("goal buffer needs count ≥ 1 and max_actions ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut goals = Vec::with_capacity(count);
        for _ in 0..count {
            let mut state = reset_rope(sim);
            for _ in 0..rng.gen_range(1..=max_actions) {
                let a = random_action(&state, &mut rng);
                state = apply_action(&state, &a, sim)?;
            }
            goals.push(render(&state, sim));
        }
        Ok(Self { goals })
    }
}

fn random_action<R: Rng>(state: &RopeState, rng: &mut R) -> ActionContinuous {
    let pick = sample_point_on_rope(state, rng);
    let theta = rng.gen_range(0.0..TAU);
    let length = rng.gen_range(crate::actions::LEN_MIN..=crate::actions::LEN_MAX);
    ActionContinuous { pick, theta, length }
}

fn split_point(start: u64, end: u64, val_fraction: f64) -> u64 {
    let n = end - start;
    let val = ((n as f64) * val_fraction).ceil() as u64;
    end - val.min(n.saturating_sub(1))
}

struct Collector<'a> {
    sim: &'a SimConfig,
    disc: &'a DiscretizationSpec,
    coll: &'a CollectionConfig,
    state: RopeState,
    raster: Arc<RasterImage>,
    since_reset: usize,
}

impl<'a> Collector<'a> {
    fn new(sim: &'a SimConfig, disc: &'a DiscretizationSpec, coll: &'a CollectionConfig) -> Self {
        let state = reset_rope(sim);
        let raster = Arc::new(render(&state, sim));
        Self { sim, disc, coll, state, raster, since_reset: 0 }
    }

    fn maybe_reset(&mut self) {
        if self.since_reset >= self.coll.actions_per_reset || rope_pixel_count(&self.raster) < self.coll.min_rope_pixels {
            self.state = reset_rope(self.sim);
            self.raster = Arc::new(render(&self.state, self.sim));
            self.since_reset = 0;
        }
    }

    fn execute(&mut self, id: u64, action: ActionContinuous) -> Result<Transition> {
        let post_state = apply_action(&self.state, &action, self.sim)?;
        let post_raster = Arc::new(render(&post_state, self.sim));
        let t = Transition {
            id,
            pre_state: std::mem::replace(&mut self.state, post_state.clone()),
            post_state,
            pre_raster: std::mem::replace(&mut self.raster, post_raster.clone()),
            post_raster,
            action_cont: action,
            action_disc: discretize(&action, self.disc)?,
        };
        self.since_reset += 1;
        Ok(t)
    }

    fn finish(self, transitions: Vec<Transition>, policy: CollectionPolicy, seed: u64) -> Dataset {
        let mut ds = Dataset::empty(self.sim, self.disc, self.coll);
        let n = transitions.len() as u64;
        ds.manifest.record_count = n;
        ds.manifest.ranges.push(PolicyRange {
            start: 0,
            end: n,
            val_start: split_point(0, n, self.coll.val_fraction),
            policy,
            seed,
        });
        ds.transitions = transitions;
        ds
    }
}

/// `n` transitions with uniformly random picks on the rope, directions in
/// `[0, 2π)` and lengths in `[1, 15]` cm.
pub fn collect_random(
    sim: &SimConfig,
    disc: &DiscretizationSpec,
    coll: &CollectionConfig,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    sim.validate()?;
    disc.validate()?;
    coll.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("collection size n must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Collector::new(sim, disc, coll);
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        c.maybe_reset();
        let a = random_action(&c.state, &mut rng);
        out.push(c.execute(id, a)?);
    }
    Ok(c.finish(out, CollectionPolicy::Random, seed))
}

/// `n` transitions where each action is the model's prediction toward a goal
/// drawn uniformly from `goals`. The stored action is the one executed: bin
/// centres for direction and length, and the pick snapped onto the rope.
pub fn collect_active(
    sim: &SimConfig,
    disc: &DiscretizationSpec,
    coll: &CollectionConfig,
    model: Option<&dyn InverseDynamics>,
    goals: &GoalBuffer,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let model = model.ok_or(Error::ModelMissing)?;
    sim.validate()?;
    disc.validate()?;
    coll.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("collection size n must be ≥ 1".into()));
    }
    if goals.goals.is_empty() {
        return Err(Error::InvalidConfig("goal buffer is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Collector::new(sim, disc, coll);
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        c.maybe_reset();
        let goal = &goals.goals[rng.gen_range(0..goals.goals.len())];
        let pred = model.predict(&c.raster, goal)?;
        let mut a = undiscretize(&pred.argmax_action, disc);
        a.pick = sim.px_to_cm(snap_to_rope(sim.cm_to_px(a.pick), &c.raster)?);
        out.push(c.execute(id, a)?);
    }
    Ok(c.finish(out, CollectionPolicy::Active, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SimConfig, DiscretizationSpec, CollectionConfig) {
        (SimConfig::default(), DiscretizationSpec::default(), CollectionConfig::default())
    }

    #[test]
    fn single_random_transition_is_valid() {
        let (sim, disc, coll) = small();
        let ds = collect_random(&sim, &disc, &coll, 1, 3).unwrap();
        let t = &ds.transitions[0];
        assert_eq!(t.pre_state, reset_rope(&sim));
        assert_eq!(t.post_state, apply_action(&t.pre_state, &t.action_cont, &sim).unwrap());
        assert_eq!(t.action_disc, discretize(&t.action_cont, &disc).unwrap());
        assert_eq!(ds.train_indices().len() + ds.val_indices().len(), 1);
    }

    #[test]
    fn resets_every_fifty_actions() {
        let (sim, disc, coll) = small();
        let ds = collect_random(&sim, &disc, &coll, 120, 1).unwrap();
        let reset = reset_rope(&sim);
        let resets: Vec<usize> = ds.transitions.iter().enumerate().filter(|(_, t)| t.pre_state == reset).map(|(i, _)| i).collect();
        assert_eq!(resets, vec![0, 50, 100]);
        for w in ds.transitions.windows(2) {
            if w[1].pre_state != reset {
                assert!(Arc::ptr_eq(&w[0].post_raster, &w[1].pre_raster));
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let (sim, disc, coll) = small();
        let mut ds = collect_random(&sim, &disc, &coll, 60, 1).unwrap();
        ds.extend(collect_random(&sim, &disc, &coll, 40, 2).unwrap()).unwrap();
        let mut all = ds.train_indices();
        let val = ds.val_indices();
        assert_eq!(val.len(), 3 + 2);
        assert!(val.iter().all(|v| !all.contains(v)));
        all.extend(val);
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(ds.transitions.iter().enumerate().all(|(i, t)| t.id == i as u64));
        ds.manifest.validate().unwrap();
        assert_eq!(ds.subset(CollectionPolicy::Random), ds);
    }

    #[test]
    fn active_needs_a_model() {
        let (sim, disc, coll) = small();
        let goals = GoalBuffer::generate(&sim, 2, 3, 0).unwrap();
        assert!(matches!(collect_active(&sim, &disc, &coll, None, &goals, 5, 0), Err(Error::ModelMissing)));
    }
}
