use std::collections::HashMap;
use std::sync::Arc;

use super::{run_policy, Decision, Demonstration, ExecutionTrace};
use crate::actions::{ActionContinuous, LEN_MAX, LEN_MIN};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::registration::{deformation_percentile, mask_point_set, register, RegistrationParams};
use crate::sim::{RasterImage, World};

pub const NN_SIDE: usize = 32;

/// Block-average downsampling of the grayscale pixels to `NN_SIDE²`. Output
/// pixel `(r, c)` averages every input pixel with `⌊r_in·S/H⌋ = r` and
/// `⌊c_in·S/W⌋ = c`.
pub fn downsample(img: &RasterImage) -> Vec<f32> {
    let s = NN_SIDE;
    let mut sum = vec![0.0f64; s * s];
    let mut count = vec![0u32; s * s];
    for r in 0..img.height {
        let ro = r * s / img.height;
        for c in 0..img.width {
            let k = ro * s + c * s / img.width;
            sum[k] += img.pixels[r * img.width + c] as f64;
            count[k] += 1;
        }
    }
    sum.iter().zip(&count).map(|(v, &n)| if n > 0 { (v / n as f64) as f32 } else { 0.0 }).collect()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Downsampled (pre, post) pairs of a training set with their stored actions.
pub struct NearestNeighborIndex {
    entries: Vec<(u64, Arc<Vec<f32>>, Arc<Vec<f32>>, ActionContinuous)>,
}

impl NearestNeighborIndex {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("nearest-neighbour index"));
        }
        let mut cache: HashMap<*const RasterImage, Arc<Vec<f32>>> = HashMap::new();
        let mut small = |img: &Arc<RasterImage>| cache.entry(Arc::as_ptr(img)).or_insert_with(|| Arc::new(downsample(img))).clone();
        let mut entries: Vec<_> = dataset
            .transitions
            .iter()
            .map(|t| (t.id, small(&t.pre_raster), small(&t.post_raster), t.action_cont))
            .collect();
        entries.sort_by_key(|e| e.0);
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored pair minimizing `‖cur − pre‖ + ‖goal − post‖`, lowest id on ties.
    pub fn query(&self, current: &RasterImage, goal: &RasterImage) -> (u64, ActionContinuous) {
        let (c, g) = (downsample(current), downsample(goal));
        let mut best = (f64::INFINITY, 0u64, self.entries[0].3);
        for (id, pre, post, a) in &self.entries {
            let d = l2(&c, pre) + l2(&g, post);
            if d < best.0 {
                best = (d, *id, *a);
            }
        }
        (best.1, best.2)
    }
}

/// At each step executes the stored action of the training pair closest to
/// (current, next keyframe).
pub fn baseline_nearest_neighbor(
    index: &NearestNeighborIndex,
    world: &mut World,
    demo: &Demonstration,
    reg: &RegistrationParams,
) -> Result<ExecutionTrace> {
    demo.validate()?;
    let refs: Vec<&RasterImage> = demo.keyframes[1..].iter().collect();
    Ok(run_policy(
        "nearest_neighbor",
        world,
        &refs,
        reg,
        |t, _, obs| Decision { prediction: None, action: Ok(index.query(obs, &demo.keyframes[t + 1]).1) },
        |_| {},
    ))
}

/// Registers the current rope onto the next keyframe, picks the point at the
/// 90th percentile of deformation and drags it toward its match.
pub fn baseline_hand_engineered(world: &mut World, demo: &Demonstration, reg: &RegistrationParams) -> Result<ExecutionTrace> {
    demo.validate()?;
    let refs: Vec<&RasterImage> = demo.keyframes[1..].iter().collect();
    let decide = |t: usize, w: &World, obs: &RasterImage| {
        let action = (|| {
            let src = mask_point_set(obs, reg.n_max)?;
            let dst = mask_point_set(&demo.keyframes[t + 1], reg.n_max)?;
            let r = register(&src, &dst, reg)?;
            let (_, pick, target) = deformation_percentile(&src, &dst, &r.correspondence, 90.0);
            let (pick, target) = (w.config.px_to_cm(pick), w.config.px_to_cm(target));
            Ok(ActionContinuous::from_pick_drop(pick, target, (LEN_MIN, LEN_MAX)))
        })();
        Decision { prediction: None, action }
    };
    Ok(run_policy("hand_engineered", world, &refs, reg, decide, |_| {}))
}
