use std::path::Path;

use rand::Rng as _;

use super::model::DenoiserModel;
use super::process::{dm_loss_graph, DiffusionBatch};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, normals};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 0.05,
            batch: 64,
            seed: 0,
        }
    }
}

/// Minibatch losses, one per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    /// Mean of the first `k` entries.
    pub fn head_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[..k.min(self.losses.len())].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `k` entries.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let n = self.losses.len();
        let k = k.min(n).max(1);
        self.losses[n.saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    /// Writes `step,loss` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies one plain SGD update from a gradient buffer.
pub(crate) fn sgd_update(param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
    param.zero_grad();
    param.accumulate_grad(grad)?;
    param.sgd_step(lr);
    Ok(())
}

/// Draws a training batch: random rows of `dataset`, grid steps in `1..=T`
/// and fresh Gaussian noise.
pub fn draw_batch(
    dataset: &Tensor,
    batch: usize,
    sched: &NoiseSchedule,
    rng: &mut rng::Rng,
) -> Result<DiffusionBatch> {
    let idx: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..dataset.rows()))
        .collect();
    let x = dataset.select_rows(&idx);
    let t: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps = Tensor::matrix(batch, dataset.cols(), normals(rng, batch * dataset.cols()))?;
    DiffusionBatch::new(x, eps, t, sched)
}

/// Trains the full-precision denoiser with minibatch SGD on the
/// denoising loss. Quantizers, if any, stay in the forward pass.
pub fn train_dm(
    model: &mut DenoiserModel,
    dataset: &Tensor,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    if dataset.rows() == 0 || dataset.cols() != model.data_dim() {
        return Err(Error::shape(
            "train_dm",
            format!(
                "dataset {:?} for data dim {}",
                dataset.shape(),
                model.data_dim()
            ),
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("training batch must be positive".into()));
    }
    let mut rng = rng::seeded(cfg.seed, rng::stream::TRAIN);
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let batch = draw_batch(dataset, cfg.batch, sched, &mut rng)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let loss = dm_loss_graph(&mut g, model, &vars, &batch, sched)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        trace.losses.push(value);
        let grads = g.backward(loss)?;
        let mut handles = Vec::new();
        for (w, b) in vars.weights.iter().zip(&vars.biases) {
            handles.push(*w);
            handles.push(*b);
        }
        handles.push(vars.embedding);
        for (p, v) in model.parameters_mut().into_iter().zip(handles) {
            sgd_update(p, &grads.wrt(v), cfg.lr)?;
        }
        if step % 2000 == 0 {
            log::debug!("train step {step}: loss {value:.5}");
        }
    }
    Ok(trace)
}
