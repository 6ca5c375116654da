//! Goal-conditioned inverse dynamics model: given the current and the goal
//! raster, a distribution over the pick cell, the direction given the pick,
//! and the length given both.

mod network;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{undiscretize, ActionContinuous, ActionDiscrete, DiscretizationSpec};
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, truncated_normal, write_checkpoint, Real, Tensor};
use crate::sim::RasterImage;

pub(crate) use network::{backward, forward, Layout};
pub use network::{loss_and_grads, Conditioning, ConvLayerSpec, InitScheme, InverseModelSpec};
pub use train::{evaluate, train, EvalReport, TrainHyper, TrainLogRow, TrainOutputs, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseModelOutput {
    pub p_dist: Vec<f32>,
    pub theta_dist: Vec<f32>,
    pub len_dist: Vec<f32>,
    pub argmax_action: ActionDiscrete,
}

impl InverseModelOutput {
    /// Point masses on `a`.
    pub fn one_hot(a: ActionDiscrete, spec: &DiscretizationSpec) -> Self {
        let hot = |n: usize, i: usize| (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect();
        Self {
            p_dist: hot(spec.n_cells(), a.cell),
            theta_dist: hot(spec.n_theta, a.theta_bin),
            len_dist: hot(spec.n_len, a.len_bin),
            argmax_action: a,
        }
    }
}

/// Anything that maps (current, goal) rasters to an action.
pub trait InverseDynamics: Send + Sync {
    fn discretization(&self) -> &DiscretizationSpec;

    fn predict(&self, current: &RasterImage, goal: &RasterImage) -> Result<InverseModelOutput>;

    /// The action to execute: bin centres of the chained argmax unless the
    /// implementation knows better.
    fn action(&self, current: &RasterImage, goal: &RasterImage) -> Result<(InverseModelOutput, ActionContinuous)> {
        let out = self.predict(current, goal)?;
        let a = undiscretize(&out.argmax_action, self.discretization());
        Ok((out, a))
    }
}

/// Predicts uniform distributions; the chained argmax is therefore all zeros.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub discretization: DiscretizationSpec,
}

impl InverseDynamics for UniformModel {
    fn discretization(&self) -> &DiscretizationSpec {
        &self.discretization
    }

    fn predict(&self, _current: &RasterImage, _goal: &RasterImage) -> Result<InverseModelOutput> {
        let d = &self.discretization;
        let uni = |n: usize| vec![1.0 / n as f32; n];
        Ok(InverseModelOutput {
            p_dist: uni(d.n_cells()),
            theta_dist: uni(d.n_theta),
            len_dist: uni(d.n_len),
            argmax_action: ActionDiscrete { cell: 0, theta_bin: 0, len_bin: 0 },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseModel {
    pub spec: InverseModelSpec,
    pub discretization: DiscretizationSpec,
    pub params: Vec<Tensor<f32>>,
}

fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f32>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| (v / z) as f32).collect()
        })
        .collect()
}

/// Stacks rasters as `[currents..., goals...]` into a `[2B, 1, H, W]` tensor.
pub(crate) fn stack_pairs<T: Real>(pairs: &[(&RasterImage, &RasterImage)], spec: &InverseModelSpec) -> Result<Tensor<T>> {
    let (h, w) = (spec.input_height, spec.input_width);
    let b = pairs.len();
    let mut data = vec![T::zero(); 2 * b * h * w];
    for (i, (cur, goal)) in pairs.iter().enumerate() {
        for (slot, img) in [(i, cur), (b + i, goal)] {
            if img.width != w || img.height != h {
                return Err(Error::ShapeMismatch {
                    operand: "raster".into(),
                    expected: vec![h, w],
                    got: vec![img.height, img.width],
                });
            }
            for (d, &p) in data[slot * h * w..][..h * w].iter_mut().zip(&img.pixels) {
                *d = T::of_f64(p as f64);
            }
        }
    }
    Tensor::from_vec(&[2 * b, 1, h, w], data)
}

impl InverseModel {
    pub fn new(spec: InverseModelSpec, discretization: DiscretizationSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        discretization.validate()?;
        if (spec.grid, spec.n_theta, spec.n_len) != (discretization.grid, discretization.n_theta, discretization.n_len) {
            return Err(Error::InvalidConfig(format!(
                "model heads ({}², {}, {}) do not match the discretization ({}², {}, {})",
                spec.grid, spec.n_theta, spec.n_len, discretization.grid, discretization.n_theta, discretization.n_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outputs = Layout::new(&spec).output_weights();
        let params = spec
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, (_, shape))| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let std = match spec.init {
                    InitScheme::FanIn if !outputs.contains(&i) => 1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt(),
                    _ => 0.01,
                };
                truncated_normal(shape, std, &mut rng)
            })
            .collect();
        Ok(Self { spec, discretization, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn predict_batch(&self, pairs: &[(&RasterImage, &RasterImage)]) -> Result<Vec<InverseModelOutput>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let images = stack_pairs::<f32>(pairs, &self.spec)?;
        let f = forward(&self.params, &self.spec, &images, Conditioning::Argmax)?;
        let (p, th, l) = (softmax_rows(&f.pick_logits), softmax_rows(&f.theta_logits), softmax_rows(&f.len_logits));
        let len_bins = {
            let c = self.spec.n_len;
            f.len_logits
                .data()
                .chunks_exact(c)
                .map(|row| (0..c).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
                .collect::<Vec<_>>()
        };
        Ok(p.into_iter()
            .zip(th)
            .zip(l)
            .enumerate()
            .map(|(i, ((p_dist, theta_dist), len_dist))| InverseModelOutput {
                p_dist,
                theta_dist,
                len_dist,
                argmax_action: ActionDiscrete {
                    cell: f.pick_cond[i],
                    theta_bin: f.theta_cond[i],
                    len_bin: len_bins[i],
                },
            })
            .collect())
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "inverse_model",
            "spec": self.spec,
            "discretization": self.discretization,
            "provenance": provenance,
        });
        let names = self.spec.param_shapes();
        let tensors: Vec<(String, &Tensor<f32>)> = names.into_iter().map(|(n, _)| n).zip(&self.params).collect();
        write_checkpoint(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("inverse_model") {
            return Err(Error::Checkpoint("not an inverse model checkpoint".into()));
        }
        let spec: InverseModelSpec = serde_json::from_value(meta["spec"].clone())?;
        let discretization: DiscretizationSpec = serde_json::from_value(meta["discretization"].clone())?;
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(tensors) {
            if name != got_name {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{got_name}`")));
            }
            t.expect_shape(&name, &shape)?;
            params.push(t);
        }
        Ok(Self { spec, discretization, params })
    }

    pub fn checkpoint_meta(path: &Path) -> Result<serde_json::Value> {
        Ok(read_checkpoint(path)?.0)
    }
}

impl InverseDynamics for InverseModel {
    fn discretization(&self) -> &DiscretizationSpec {
        &self.discretization
    }

    fn predict(&self, current: &RasterImage, goal: &RasterImage) -> Result<InverseModelOutput> {
        Ok(self.predict_batch(&[(current, goal)])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_xent_backward, softmax_xent_forward};
    use crate::sim::{render, reset_rope, SimConfig};
    use rand::Rng;

    fn tiny_spec() -> InverseModelSpec {
        InverseModelSpec {
            input_width: 8,
            input_height: 8,
            conv: vec![ConvLayerSpec { filters: 2, kernel: 3, stride: 2 }, ConvLayerSpec { filters: 3, kernel: 3, stride: 2 }],
            latent_dim: 4,
            trunk: vec![5],
            head_hidden: 3,
            grid: 2,
            n_theta: 3,
            n_len: 2,
            init: InitScheme::FanIn,
        }
    }

    fn tiny_disc() -> DiscretizationSpec {
        DiscretizationSpec { grid: 2, n_theta: 3, n_len: 2, ..Default::default() }
    }

    fn random_images<T: Real>(b: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let data = (0..2 * b * 64).map(|_| T::of_f64(rng.gen_range(0.0..1.0))).collect();
        Tensor::from_vec(&[2 * b, 1, 8, 8], data).unwrap()
    }

    fn loss<T: Real>(params: &[Tensor<T>], spec: &InverseModelSpec, x: &Tensor<T>, p: &[usize], t: &[usize], l: &[usize]) -> f64 {
        let f = forward(params, spec, x, Conditioning::Teacher { pick: p, theta: t }).unwrap();
        softmax_xent_forward(&f.pick_logits, p).unwrap().0
            + softmax_xent_forward(&f.theta_logits, t).unwrap().0
            + softmax_xent_forward(&f.len_logits, l).unwrap().0
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let model = InverseModel::new(spec.clone(), tiny_disc(), 5).unwrap();
        let mut params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.cast()).collect();
        // Nonzero biases exercise every path.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in params.iter_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = random_images::<f64>(3, &mut rng);
        let (p, t, l) = ([0, 3, 1], [2, 0, 1], [1, 1, 0]);
        let f = forward(&params, &spec, &x, Conditioning::Teacher { pick: &p, theta: &t }).unwrap();
        let gp = softmax_xent_backward(&softmax_xent_forward(&f.pick_logits, &p).unwrap().1, &p);
        let gt = softmax_xent_backward(&softmax_xent_forward(&f.theta_logits, &t).unwrap().1, &t);
        let gl = softmax_xent_backward(&softmax_xent_forward(&f.len_logits, &l).unwrap().1, &l);
        let grads = backward(&params, &spec, &f, &gp, &gt, &gl).unwrap();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for k in (0..g.len()).step_by(1 + g.len() / 7) {
                let orig = params[pi].data()[k];
                params[pi].data_mut()[k] = orig + h;
                let up = loss(&params, &spec, &x, &p, &t, &l);
                params[pi].data_mut()[k] = orig - h;
                let down = loss(&params, &spec, &x, &p, &t, &l);
                params[pi].data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.data()[k];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "param {pi}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn outputs_are_simplexes_and_streams_are_ordered() {
        let sim = SimConfig::default();
        let model = InverseModel::new(InverseModelSpec::desk(), DiscretizationSpec::default(), 1).unwrap();
        let a = render(&reset_rope(&sim), &sim);
        let mut st = reset_rope(&sim);
        st.nodes.iter_mut().enumerate().for_each(|(i, n)| n.y += (i as f64 * 0.2).sin() * 3.0);
        let b = render(&st, &sim);
        let ab = model.predict(&a, &b).unwrap();
        let ba = model.predict(&b, &a).unwrap();
        for d in [&ab.p_dist, &ab.theta_dist, &ab.len_dist] {
            assert!((d.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_ne!(ab.p_dist, ba.p_dist);
        let same = model.predict(&a, &a).unwrap();
        assert!((same.p_dist.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let bad = RasterImage::blank(32, 32);
        assert!(matches!(model.predict(&bad, &a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn theta_head_depends_on_pick_conditioning() {
        let spec = tiny_spec();
        let model = InverseModel::new(spec.clone(), tiny_disc(), 2).unwrap();
        let params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.cast()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_images::<f64>(1, &mut rng);
        let f0 = forward(&params, &spec, &x, Conditioning::Teacher { pick: &[0], theta: &[0] }).unwrap();
        let f1 = forward(&params, &spec, &x, Conditioning::Teacher { pick: &[1], theta: &[0] }).unwrap();
        let diff: f64 = f0.theta_logits.data().iter().zip(f1.theta_logits.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff.sqrt() > 1e-6);
    }

    #[test]
    fn inference_chains_argmax_not_labels() {
        // Pick head prefers cell 3; the theta head reads the pick one-hot
        // directly, so theta bin = f(argmax pick).
        let spec = tiny_spec();
        let mut model = InverseModel::new(spec.clone(), tiny_disc(), 3).unwrap();
        let lay = Layout::new(&spec);
        let [pick_w, theta_out, len_out] = lay.output_weights();
        let d = spec.trunk_out();
        model.params[pick_w].data_mut().iter_mut().for_each(|v| *v = 0.0);
        model.params[pick_w + 1].data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 5.0]);
        let theta_hidden = pick_w + 2;
        let w = &mut model.params[theta_hidden];
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        // hidden unit j fires for pick cell j (cells 0..3 map to units 0..3).
        for j in 0..3 {
            w.data_mut()[j * (d + 4) + d + j + 1] = 4.0;
        }
        let wo = &mut model.params[theta_out];
        wo.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for j in 0..3 {
            wo.data_mut()[j * 3 + j] = 3.0;
        }
        model.params[len_out].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let img = RasterImage::blank(8, 8);
        let out = model.predict(&img, &img).unwrap();
        assert_eq!(out.argmax_action.cell, 3);
        // Pick 3 activates hidden unit 2, which drives theta bin 2.
        assert_eq!(out.argmax_action.theta_bin, 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = InverseModel::new(tiny_spec(), tiny_disc(), 4).unwrap();
        model.save(&path, serde_json::json!({"note": "t"})).unwrap();
        assert_eq!(InverseModel::load(&path).unwrap(), model);
    }
}
