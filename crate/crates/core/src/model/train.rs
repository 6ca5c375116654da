use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward, stack_pairs, Conditioning, InverseModel, InverseModelSpec};
use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::nn::{adam_step, softmax_xent_backward, softmax_xent_forward, AdamState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 4,
            lr: 1e-4,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
    pub val_pick_acc: f64,
    pub val_theta_acc: f64,
    pub val_len_acc: f64,
}

/// Per-head accuracy with ground-truth conditioning, and the mean joint
/// log-likelihood of the stored action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub pick_acc: f64,
    pub theta_acc: f64,
    pub len_acc: f64,
    pub mean_log_likelihood: f64,
}

struct Labels {
    pick: Vec<usize>,
    theta: Vec<usize>,
    len: Vec<usize>,
}

fn labels(batch: &[&Transition]) -> Labels {
    Labels {
        pick: batch.iter().map(|t| t.action_disc.cell).collect(),
        theta: batch.iter().map(|t| t.action_disc.theta_bin).collect(),
        len: batch.iter().map(|t| t.action_disc.len_bin).collect(),
    }
}

fn images(batch: &[&Transition], spec: &InverseModelSpec) -> Result<Tensor<f32>> {
    let pairs: Vec<_> = batch.iter().map(|t| (&*t.pre_raster, &*t.post_raster)).collect();
    stack_pairs(&pairs, spec)
}

fn row_argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: InverseModel,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(model: InverseModel, lr: f64) -> Self {
        let adam = AdamState::new(&model.params, lr);
        Self { model, adam }
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Summed cross-entropy of the three heads on `batch`, without updating.
    pub fn loss(&self, batch: &[&Transition]) -> Result<f64> {
        let lab = labels(batch);
        let x = images(batch, &self.model.spec)?;
        let f = forward(&self.model.params, &self.model.spec, &x, Conditioning::Teacher { pick: &lab.pick, theta: &lab.theta })?;
        Ok(softmax_xent_forward(&f.pick_logits, &lab.pick)?.0
            + softmax_xent_forward(&f.theta_logits, &lab.theta)?.0
            + softmax_xent_forward(&f.len_logits, &lab.len)?.0)
    }

    /// One Adam step on `batch`. Returns the pre-update loss.
    pub fn step(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("training batch"));
        }
        let lab = labels(batch);
        let spec = &self.model.spec;
        let x = images(batch, spec)?;
        let f = forward(&self.model.params, spec, &x, Conditioning::Teacher { pick: &lab.pick, theta: &lab.theta })?;
        let (lp, pp) = softmax_xent_forward(&f.pick_logits, &lab.pick)?;
        let (lt, pt) = softmax_xent_forward(&f.theta_logits, &lab.theta)?;
        let (ll, pl) = softmax_xent_forward(&f.len_logits, &lab.len)?;
        let loss = lp + lt + ll;
        let grads = backward(
            &self.model.params,
            spec,
            &f,
            &softmax_xent_backward(&pp, &lab.pick),
            &softmax_xent_backward(&pt, &lab.theta),
            &softmax_xent_backward(&pl, &lab.len),
        )?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let names = spec.param_shapes();
            let bad: Vec<&str> = grads.iter().zip(&names).filter(|(g, _)| !g.is_finite()).map(|(_, n)| n.0.as_str()).collect();
            return Err(Error::NonFiniteLoss {
                step: self.adam.step,
                diagnostics: format!("pick {lp}, theta {lt}, length {ll}; non-finite gradients in {bad:?}"),
            });
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam)?;
        Ok(loss)
    }
}

/// Teacher-forced metrics over `data`, evaluated in fixed-size batches.
pub fn evaluate(model: &InverseModel, data: &[&Transition]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation split"));
    }
    let (mut hp, mut ht, mut hl, mut ll) = (0usize, 0usize, 0usize, 0.0f64);
    for chunk in data.chunks(128) {
        let lab = labels(chunk);
        let x = images(chunk, &model.spec)?;
        let f = forward(&model.params, &model.spec, &x, Conditioning::Teacher { pick: &lab.pick, theta: &lab.theta })?;
        for (logits, truth, hits) in [
            (&f.pick_logits, &lab.pick, &mut hp),
            (&f.theta_logits, &lab.theta, &mut ht),
            (&f.len_logits, &lab.len, &mut hl),
        ] {
            let (loss, _) = softmax_xent_forward(logits, truth)?;
            ll -= loss * chunk.len() as f64;
            let c = logits.shape()[1];
            *hits += logits.data().chunks_exact(c).zip(truth.iter()).filter(|(row, &t)| row_argmax(row) == t).count();
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        n: data.len(),
        pick_acc: hp as f64 / n,
        theta_acc: ht as f64 / n,
        len_acc: hl as f64 / n,
        mean_log_likelihood: ll / n,
    })
}

/// Output locations for a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
}

fn write_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains from scratch on the dataset's training split, keeping the
/// parameters with the lowest validation loss. A log row is emitted after
/// every epoch.
pub fn train(
    dataset: &Dataset,
    spec: &InverseModelSpec,
    hyper: &TrainHyper,
    outputs: &TrainOutputs,
    mut progress: impl FnMut(&TrainLogRow),
) -> Result<(InverseModel, Vec<TrainLogRow>)> {
    let train_ix = dataset.train_indices();
    let val_ix = dataset.val_indices();
    if train_ix.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    if val_ix.is_empty() {
        return Err(Error::EmptyDataset("validation split"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidConfig("train.batch_size must be ≥ 1".into()));
    }
    let val: Vec<&Transition> = val_ix.iter().map(|&i| &dataset.transitions[i]).collect();
    let model = InverseModel::new(spec.clone(), dataset.manifest.discretization, hyper.seed)?;
    let mut trainer = Trainer::new(model, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order = train_ix.clone();
    let mut rows = Vec::new();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;

    'outer: for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut stop = false;
        for chunk in order.chunks(hyper.batch_size) {
            if hyper.max_steps.is_some_and(|m| trainer.step_count() >= m) {
                stop = true;
                break;
            }
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &dataset.transitions[i]).collect();
            sum += trainer.step(&batch)? * batch.len() as f64;
            count += batch.len();
        }
        if count > 0 {
            let ev = evaluate(&trainer.model, &val)?;
            let row = TrainLogRow {
                step: trainer.step_count(),
                epoch,
                loss: sum / count as f64,
                val_loss: -ev.mean_log_likelihood,
                val_pick_acc: ev.pick_acc,
                val_theta_acc: ev.theta_acc,
                val_len_acc: ev.len_acc,
            };
            progress(&row);
            if best.as_ref().map_or(true, |(b, _)| row.val_loss < *b) {
                best = Some((row.val_loss, trainer.model.params.clone()));
                if let Some(p) = &outputs.checkpoint {
                    trainer.model.save(p, provenance(dataset, hyper, &row))?;
                }
            }
            rows.push(row);
            if let Some(p) = &outputs.log_csv {
                write_log(p, &rows)?;
            }
        }
        if stop {
            break 'outer;
        }
    }
    let mut model = trainer.model;
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, rows))
}

fn provenance(dataset: &Dataset, hyper: &TrainHyper, row: &TrainLogRow) -> serde_json::Value {
    serde_json::json!({
        "hyper": hyper,
        "dataset_records": dataset.manifest.record_count,
        "dataset_ranges": dataset.manifest.ranges,
        "epoch": row.epoch,
        "step": row.step,
        "val_loss": row.val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::DiscretizationSpec;
    use crate::dataset::{collect_random, CollectionConfig};

    #[test]
    fn initial_loss_is_near_uniform() {
        let ds = collect_random(&Default::default(), &Default::default(), &CollectionConfig::default(), 8, 0).unwrap();
        let model = InverseModel::new(InverseModelSpec::desk(), DiscretizationSpec::default(), 0).unwrap();
        let t = Trainer::new(model, 1e-4);
        let batch: Vec<_> = ds.transitions.iter().collect();
        let l = t.loss(&batch).unwrap();
        let expected = (400f64).ln() + (36f64).ln() + (10f64).ln();
        assert!((l - expected).abs() / expected < 0.02, "{l} vs {expected}");
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let sim = Default::default();
        let disc = DiscretizationSpec::default();
        let coll = CollectionConfig { val_fraction: 0.25, ..Default::default() };
        let ds = collect_random(&sim, &disc, &coll, 16, 1).unwrap();
        let spec = InverseModelSpec::desk();
        let hyper = TrainHyper { batch_size: 4, epochs: 2, ..Default::default() };
        let (a, la) = train(&ds, &spec, &hyper, &TrainOutputs::default(), |_| {}).unwrap();
        let (b, lb) = train(&ds, &spec, &hyper, &TrainOutputs::default(), |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(la.len(), 2);
        let empty = Dataset::empty(&sim, &disc, &coll);
        assert!(matches!(train(&empty, &spec, &hyper, &TrainOutputs::default(), |_| {}), Err(Error::EmptyDataset(_))));
    }
}
