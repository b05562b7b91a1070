//! Fusion, the event classifier, Adam, and the weakly supervised training loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::eval::classification_stats;
use crate::model::{Model, CLASSIFIER_HIDDEN, CLASSIFIER_OUT};
use crate::params::{Bound, Gradient, ParamStore};
use crate::rng::{substream, STREAM_SHUFFLE};
use crate::scenes::SceneSample;
use crate::tensor::Tensor;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// `[Σ_ij ẍ_av(i,j,·) ; meanpool(ẋ_a)]`, a vector of length `2C`.
pub fn fuse(g: &mut Graph, x_av_ddot: Var, x_a_dot: Var) -> Result<Var> {
    let (sv, sa) = (g.shape(x_av_ddot).to_vec(), g.shape(x_a_dot).to_vec());
    if sv.len() != 3 || sa.len() != 3 || sv[2] != sa[2] {
        return Err(Error::dim(format!("fuse of {sv:?} and {sa:?}")));
    }
    let summed = g.sum_axes(x_av_ddot, &[0, 1])?;
    let pooled = g.global_avg_pool(x_a_dot)?;
    g.concat(&[summed, pooled], 0)
}

/// Two-layer MLP `2C → 2C → num_classes` with ReLU.
pub fn classify(g: &mut Graph, params: &Bound, fused: Var) -> Result<Var> {
    let d = g.shape(fused).iter().product::<usize>();
    let x = g.reshape(fused, &[1, d])?;
    let w1 = params.get(&format!("{CLASSIFIER_HIDDEN}.weight"))?;
    let b1 = params.get(&format!("{CLASSIFIER_HIDDEN}.bias"))?;
    let w2 = params.get(&format!("{CLASSIFIER_OUT}.weight"))?;
    let b2 = params.get(&format!("{CLASSIFIER_OUT}.bias"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h)?;
    let z = g.matmul(h, w2)?;
    let z = g.add_bias(z, b2)?;
    let n = g.shape(z)[1];
    g.reshape(z, &[n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Trailing fraction of the training clips held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_fraction: 0.125,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a run can be checked for inertness.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Argument(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update; `grads` must follow the store's parameter order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Gradient], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let names = params.names().to_vec();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.with_respect_to != names[i] || g.value.shape() != p.shape() {
                return Err(Error::Argument(format!(
                    "gradient for {} does not match parameter {}",
                    g.with_respect_to, names[i]
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.value.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Clip loss and parameter gradients.
pub fn clip_gradients(model: &Model, clip: &SceneSample) -> Result<(f64, Vec<Gradient>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let (loss, _) = model.clip_loss(
        &mut g,
        &bound,
        &clip.frames,
        &clip.audio,
        &clip.step_labels(),
    )?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), model.params.gradients(&bound, &grads)))
}

/// Clip loss without gradients.
pub fn clip_loss_value(model: &Model, clip: &SceneSample) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let (loss, _) = model.clip_loss(
        &mut g,
        &bound,
        &clip.frames,
        &clip.audio,
        &clip.step_labels(),
    )?;
    Ok(g.value(loss).item())
}

/// Mean clip loss, computed in parallel and summed in clip order.
pub fn mean_loss(model: &Model, clips: &[SceneSample]) -> Result<f64> {
    let losses = clips
        .par_iter()
        .map(|c| clip_loss_value(model, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / clips.len().max(1) as f64)
}

/// Mean loss and mean gradients over a batch. Per-clip work runs in
/// parallel; the reduction is sequential in batch order.
pub fn batch_gradients(model: &Model, batch: &[&SceneSample]) -> Result<(f64, Vec<Gradient>)> {
    let per_clip = batch
        .par_iter()
        .map(|c| clip_gradients(model, c))
        .collect::<Result<Vec<_>>>()?;
    let n = per_clip.len() as f64;
    let mut iter = per_clip.into_iter();
    let (mut loss, mut total) = iter
        .next()
        .ok_or_else(|| Error::Argument("empty batch".into()))?;
    for (l, grads) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, b) in acc.value.data_mut().iter_mut().zip(g.value.data()) {
                *a += b;
            }
        }
    }
    for g in &mut total {
        for v in g.value.data_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, total))
}

/// Splits off the trailing `fraction` of clips for validation.
pub fn split_validation(clips: &[SceneSample], fraction: f64) -> (&[SceneSample], &[SceneSample]) {
    let n_val = ((clips.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(clips.len().saturating_sub(1));
    clips.split_at(clips.len() - n_val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Per-timestep validation accuracy, background included.
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    pub log: Vec<EpochRecord>,
}

fn better(candidate: (f64, f64), best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((acc, loss)) => candidate.0 > acc || (candidate.0 == acc && candidate.1 < loss),
    }
}

/// Trains `model` on `train`, selecting the checkpoint by accuracy then
/// loss on `val` (training loss when `val` is empty). With `out`, the
/// best checkpoint and a JSON-lines log are kept up to date on disk, so a
/// divergence leaves the last good checkpoint in place.
pub fn train(
    model: Model,
    train: &[SceneSample],
    val: &[SceneSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_observed(model, train, val, cfg, out, |_, _| {})
}

/// [`train`], calling `observe` with each epoch's record and parameters.
pub fn train_observed(
    mut model: Model,
    train: &[SceneSample],
    val: &[SceneSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut observe: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("no training clips".into()));
    }
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            model.save(dir)?;
            Some(fs::File::create(dir.join(TRAIN_LOG_FILE))?)
        }
        None => None,
    };
    let initial_loss = mean_loss(&model, train)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    let mut opt = Adam::new(cfg, &model.params);
    let mut shuffle = substream(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, f64)> = None;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch,
                    reason: format!("non-finite value in {what}"),
                },
                other => other,
            })?;
            let finite_grads = grads.iter().all(|g| g.value.is_finite());
            if !loss.is_finite() || !finite_grads {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss {loss}, finite gradients: {finite_grads}"),
                });
            }
            opt.update(&mut model.params, &grads, cfg.lr)?;
            loss_sum += loss;
            batches += 1;
        }
        let loss = loss_sum / batches as f64;
        let (val_acc, val_loss) = if val.is_empty() {
            (None, None)
        } else {
            let stats = classification_stats(&model, val)?;
            (Some(stats.step_accuracy), Some(stats.mean_loss))
        };
        let key = match (val_acc, val_loss) {
            (Some(a), Some(l)) => (a, l),
            _ => (0.0, loss),
        };
        if better(key, best) {
            best = Some(key);
            best_model = model.clone();
            best_epoch = epoch;
            if let Some(dir) = out {
                model.save(dir)?;
            }
        }
        let record = EpochRecord {
            epoch,
            loss,
            val_acc,
            val_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: loss {loss:.4} val_acc {} ({} ms)",
            val_acc.map_or("-".into(), |a| format!("{a:.3}")),
            record.wall_ms
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        observe(&record, &model);
        log.push(record);
    }
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_epoch,
        initial_loss,
        log,
    })
}
