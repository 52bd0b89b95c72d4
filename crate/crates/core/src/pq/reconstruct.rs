use std::fmt;
use std::str::FromStr;

use super::detector::{DetectorConfig, TransitionDetector};
use super::log::{BlockLog, PerturbationLog, Stage};
use crate::calib::{CalibKind, CalibrationSet};
use crate::diffusion::{Activation, Block, DenoiserModel};
use crate::error::{Error, Result};
use crate::quant::{fit_quant_params, Granularity, RangeMethod, WeightQuantizer, SUPPORTED_BITS};
use crate::tensor::{Graph, Tensor, Var};

/// Weighting of the squared block-output error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HessianWeighting {
    /// Plain mean squared error.
    #[default]
    Identity,
    /// Mean of `h ⊙ Δa²` with `h` the squared sensitivity of the model
    /// output to each block-output entry.
    DiagonalFisher,
}

impl FromStr for HessianWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(HessianWeighting::Identity),
            "diagonal_fisher" => Ok(HessianWeighting::DiagonalFisher),
            other => Err(Error::Config(format!(
                "unknown hessian weighting `{other}` (identity|diagonal_fisher)"
            ))),
        }
    }
}

impl fmt::Display for HessianWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HessianWeighting::Identity => "identity",
            HessianWeighting::DiagonalFisher => "diagonal_fisher",
        })
    }
}

/// How gradient steps are applied to a block's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightUpdate {
    /// Full-precision shadow weights; quantized on each forward pass with a
    /// straight-through gradient.
    #[default]
    Shadow,
    /// Weights live on the quantization grid and are rounded back onto it
    /// after every step, so steps smaller than half a level are lost.
    Rounded,
}

impl FromStr for WeightUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shadow" => Ok(WeightUpdate::Shadow),
            "rounded" => Ok(WeightUpdate::Rounded),
            other => Err(Error::Config(format!(
                "unknown weight update `{other}` (shadow|rounded)"
            ))),
        }
    }
}

impl fmt::Display for WeightUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightUpdate::Shadow => "shadow",
            WeightUpdate::Rounded => "rounded",
        })
    }
}

/// When the weight bit-width drops from `tau` to `kappa`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransitionPolicy {
    /// Momentum plateau detection on the stage-one loss.
    Momentum(DetectorConfig),
    /// Transition after a fixed number of stage-one iterations.
    FixedCycle { period: usize },
    /// No stage one: quantize straight to `kappa`.
    Immediate,
}

impl TransitionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            TransitionPolicy::Momentum(_) => "momentum",
            TransitionPolicy::FixedCycle { .. } => "fixed",
            TransitionPolicy::Immediate => "immediate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PqConfig {
    /// Stage-one weight bits.
    pub tau: u32,
    /// Final weight bits.
    pub kappa: u32,
    /// Total reconstruction iterations per block, both stages combined.
    pub iterations: usize,
    /// Learning rate on the shadow weights.
    pub gamma: f64,
    pub update: WeightUpdate,
    pub policy: TransitionPolicy,
    pub hessian: HessianWeighting,
    pub granularity: Granularity,
    pub weight_range: RangeMethod,
    /// Activation bits; `None` leaves activations in full precision.
    pub act_bits: Option<u32>,
    pub act_range: RangeMethod,
    /// Also run an activation calibration at `tau` before the final one.
    pub act_calibrate_tau: bool,
}

impl Default for PqConfig {
    fn default() -> Self {
        Self {
            tau: 8,
            kappa: 4,
            iterations: 2000,
            gamma: 0.05,
            update: WeightUpdate::Shadow,
            policy: TransitionPolicy::Momentum(DetectorConfig::default()),
            hessian: HessianWeighting::Identity,
            granularity: Granularity::PerChannel,
            weight_range: RangeMethod::MinMax,
            act_bits: Some(8),
            act_range: RangeMethod::MinMax,
            act_calibrate_tau: false,
        }
    }
}

impl PqConfig {
    pub fn validate(&self) -> Result<()> {
        for bits in [Some(self.tau), Some(self.kappa), self.act_bits]
            .into_iter()
            .flatten()
        {
            if !SUPPORTED_BITS.contains(&bits) {
                return Err(Error::Config(format!(
                    "bit-width {bits} not in {SUPPORTED_BITS:?}"
                )));
            }
        }
        if self.tau < self.kappa {
            return Err(Error::Config(format!(
                "stage-one bits {} below final bits {}",
                self.tau, self.kappa
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.gamma
            )));
        }
        if let TransitionPolicy::Momentum(d) = &self.policy {
            d.validate()?;
        }
        Ok(())
    }

    /// Iteration cap of stage one.
    pub fn stage_one_cap(&self) -> usize {
        match self.policy {
            TransitionPolicy::Immediate => 0,
            TransitionPolicy::FixedCycle { period } => period.min(self.iterations),
            TransitionPolicy::Momentum(_) => self.iterations / 2,
        }
    }
}

/// `mean(Δa²)` or `mean(h ⊙ Δa²)`.
pub fn block_loss(
    delta: &Tensor,
    weighting: HessianWeighting,
    diag_h: Option<&Tensor>,
) -> Result<f64> {
    check_weights(delta, weighting, diag_h)?;
    if delta.is_empty() {
        return Err(Error::shape("block_loss", "empty perturbation"));
    }
    let total: f64 = match diag_h {
        None => delta.data().iter().map(|d| d * d).sum(),
        Some(h) => delta
            .data()
            .iter()
            .zip(h.data())
            .map(|(d, w)| w * d * d)
            .sum(),
    };
    Ok(total / delta.len() as f64)
}

fn check_weights(
    delta: &Tensor,
    weighting: HessianWeighting,
    diag_h: Option<&Tensor>,
) -> Result<()> {
    match (weighting, diag_h) {
        (HessianWeighting::Identity, None) => Ok(()),
        (HessianWeighting::DiagonalFisher, Some(h)) => {
            if h.shape() != delta.shape() {
                return Err(Error::shape(
                    "block_loss",
                    format!(
                        "weights {:?} vs perturbation {:?}",
                        h.shape(),
                        delta.shape()
                    ),
                ));
            }
            if h.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::Contract(
                    "negative or non-finite hessian diagonal".into(),
                ));
            }
            Ok(())
        }
        (HessianWeighting::Identity, Some(_)) => Err(Error::Contract(
            "identity weighting takes no diagonal".into(),
        )),
        (HessianWeighting::DiagonalFisher, None) => Err(Error::Contract(
            "diagonal weighting needs a diagonal".into(),
        )),
    }
}

/// Everything a block needs for reconstruction, cached from the
/// full-precision model on the calibration set.
#[derive(Clone, Debug)]
pub struct BlockData {
    pub input: Tensor,
    /// Time-embedding rows added before the activation (block 0 only).
    pub embedding: Option<Tensor>,
    pub target: Tensor,
    pub diag_h: Option<Tensor>,
}

/// Loss trajectory of one reconstruction stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageOutcome {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Iteration at which the stop rule fired, if it did.
    pub stopped_at: Option<usize>,
}

fn block_forward(g: &mut Graph, block: &Block, w: Var, data: &BlockData) -> Result<Var> {
    let x = g.constant(data.input.detached());
    let b = g.constant(block.bias.detached());
    let mut h = g.affine(x, w, b)?;
    if let Some(e) = &data.embedding {
        let e = g.constant(e.detached());
        h = g.add(h, e)?;
    }
    if block.activation == Activation::Silu {
        h = g.silu(h);
    }
    Ok(h)
}

fn weighted_loss(g: &mut Graph, out: Var, data: &BlockData) -> Result<Var> {
    let target = g.constant(data.target.detached());
    let delta = g.sub(out, target)?;
    let sq = g.square(delta)?;
    let sq = match &data.diag_h {
        Some(h) => {
            let h = g.constant(h.detached());
            g.mul(sq, h)?
        }
        None => sq,
    };
    g.mean(sq)
}

/// Current loss of `block` (with its weight quantizer) on `data`.
pub fn evaluate_block(block: &Block, data: &BlockData) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.constant(block.effective_weight()?);
    let out = block_forward(&mut g, block, w, data)?;
    let l = weighted_loss(&mut g, out, data)?;
    Ok(g.value(l).item())
}

/// Gradient descent on the block's shadow weights through the
/// straight-through quantizer. `stop` sees `(iteration, loss)` after every
/// update and ends the stage by returning `true`.
pub fn reconstruct_block(
    block: &mut Block,
    index: usize,
    data: &BlockData,
    gamma: f64,
    update: WeightUpdate,
    max_iterations: usize,
    stop: &mut dyn FnMut(usize, f64) -> Result<bool>,
) -> Result<StageOutcome> {
    let quant = block
        .weight_quant
        .clone()
        .ok_or_else(|| Error::Reconstruction {
            block: index,
            reason: "weight quantizer not fitted".into(),
        })?;
    let mut outcome = StageOutcome::default();
    for it in 0..max_iterations {
        let mut g = Graph::new();
        let w = g.leaf(&block.weight.detached().into_param());
        let wq = quant.ste(&mut g, w)?;
        let out = block_forward(&mut g, block, wq, data)?;
        let loss = weighted_loss(&mut g, out, data)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Reconstruction {
                block: index,
                reason: format!("loss became {value} at iteration {it}"),
            });
        }
        outcome.losses.push(value);
        let grads = g.backward(loss)?;
        crate::diffusion::sgd_update(&mut block.weight, &grads.wrt(w), gamma)?;
        if update == WeightUpdate::Rounded {
            block.weight = quant.quantize(&block.weight)?;
        }
        if stop(it, value)? {
            outcome.stopped_at = Some(it);
            break;
        }
    }
    Ok(outcome)
}

/// Cached per-block reconstruction data from the full-precision model.
pub fn block_data(
    model: &DenoiserModel,
    calib: &CalibrationSet,
    hessian: HessianWeighting,
) -> Result<Vec<BlockData>> {
    let z = calib.states();
    let t = calib.time_indices();
    let acts = model.block_activations(&z, &t)?;
    let emb = model.time_embedding.select_rows(&t);
    let fisher = match hessian {
        HessianWeighting::Identity => None,
        HessianWeighting::DiagonalFisher => Some(fisher_diagonals(model, &z, &t)?),
    };
    Ok((0..model.blocks.len())
        .map(|b| BlockData {
            input: acts[b].clone(),
            embedding: (b == 0).then(|| emb.clone()),
            target: acts[b + 1].clone(),
            diag_h: fisher.as_ref().map(|f| f[b].clone()),
        })
        .collect())
}

/// `h_b = Σ_d (∂x̂_d / ∂a_b)²` per block-output entry, normalized to mean 1.
pub fn fisher_diagonals(model: &DenoiserModel, z: &Tensor, t: &[usize]) -> Result<Vec<Tensor>> {
    let mut sums: Vec<Tensor> = Vec::new();
    for d in 0..model.data_dim() {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let mut h = g.leaf(&z.detached().into_param());
        let mut outs = Vec::new();
        for b in 0..model.blocks.len() {
            h = model.block_graph(&mut g, &vars, b, h, t)?;
            outs.push(h);
        }
        let col = g.slice(h, 1, d, 1)?;
        let s = g.sum(col);
        let grads = g.backward(s)?;
        for (b, &o) in outs.iter().enumerate() {
            let sq = Tensor::new(
                g.value(o).shape().to_vec(),
                grads.wrt(o).iter().map(|v| v * v).collect(),
            )?;
            if d == 0 {
                sums.push(sq);
            } else {
                for (a, v) in sums[b].data_mut().iter_mut().zip(sq.data()) {
                    *a += v;
                }
            }
        }
    }
    for s in &mut sums {
        let mean = s.data().iter().sum::<f64>() / s.len().max(1) as f64;
        let norm = if mean > 0.0 { mean } else { 1.0 };
        for v in s.data_mut() {
            *v /= norm;
        }
    }
    Ok(sums)
}

fn fit_weights(block: &mut Block, bits: u32, cfg: &PqConfig) -> Result<()> {
    block.weight_quant = Some(WeightQuantizer::fit(
        &block.weight,
        bits,
        cfg.granularity,
        cfg.weight_range,
    )?);
    if cfg.update == WeightUpdate::Rounded {
        block.weight = block.effective_weight()?;
    }
    Ok(())
}

/// Two-stage block-wise weight quantization followed by activation
/// calibration. The input model is left untouched.
pub fn progressive_quantize(
    model_fp: &DenoiserModel,
    c_qc: &CalibrationSet,
    cfg: &PqConfig,
) -> Result<(DenoiserModel, PerturbationLog)> {
    cfg.validate()?;
    if c_qc.is_empty() {
        return Err(Error::Calibration(
            "quantization calibration set is empty".into(),
        ));
    }
    if c_qc.kind != CalibKind::Qc {
        return Err(Error::Calibration(
            "expected a quantization calibration set".into(),
        ));
    }
    if model_fp.is_quantized() {
        return Err(Error::Contract(
            "progressive quantization needs a full-precision model".into(),
        ));
    }
    let data = block_data(model_fp, c_qc, cfg.hessian)?;
    let mut model = model_fp.clone();
    let mut log = PerturbationLog::default();
    for (b, (block, bd)) in model.blocks.iter_mut().zip(&data).enumerate() {
        let mut entry = BlockLog {
            block: b,
            ..BlockLog::default()
        };
        let cap = cfg.stage_one_cap();
        if cap > 0 {
            fit_weights(block, cfg.tau, cfg)?;
            let mut detector = match cfg.policy {
                TransitionPolicy::Momentum(d) => Some(TransitionDetector::new(d)?),
                _ => None,
            };
            let out =
                reconstruct_block(block, b, bd, cfg.gamma, cfg.update, cap, &mut |_, loss| {
                    match detector.as_mut() {
                        Some(d) => d.step(loss),
                        None => Ok(false),
                    }
                })?;
            entry.transition = Some(out.losses.len().saturating_sub(1));
            entry.forced = detector.is_some() && out.stopped_at.is_none();
            if entry.forced {
                log::warn!(
                    "block {b}: detector did not fire within {cap} iterations; forcing the transition"
                );
            }
            entry.push_stage(Stage::Tau, &out.losses);
        }
        let used = entry.losses(Stage::Tau).count();
        fit_weights(block, cfg.kappa, cfg)?;
        let out = reconstruct_block(
            block,
            b,
            bd,
            cfg.gamma,
            cfg.update,
            cfg.iterations - used,
            &mut |_, _| Ok(false),
        )?;
        entry.push_stage(Stage::Kappa, &out.losses);
        entry.final_loss = evaluate_block(block, bd)?;
        log.blocks.push(entry);
    }
    if let Some(bits) = cfg.act_bits {
        if cfg.act_calibrate_tau {
            calibrate_activations(&mut model, c_qc, cfg.tau.max(bits), cfg.act_range)?;
        }
        calibrate_activations(&mut model, c_qc, bits, cfg.act_range)?;
    }
    Ok((model, log))
}

/// Fits one activation quantizer per block from pooled block outputs of
/// the weight-quantized model over the whole calibration set.
pub fn calibrate_activations(
    model: &mut DenoiserModel,
    c_qc: &CalibrationSet,
    bits: u32,
    method: RangeMethod,
) -> Result<()> {
    if c_qc.is_empty() {
        return Err(Error::Config(
            "activation calibration needs calibration data".into(),
        ));
    }
    for b in &mut model.blocks {
        b.act_quant = None;
    }
    let acts = model.block_activations(&c_qc.states(), &c_qc.time_indices())?;
    let params: Vec<_> = acts[1..]
        .iter()
        .map(|a| fit_quant_params(a.data(), bits, method))
        .collect::<Result<_>>()?;
    for (b, p) in model.blocks.iter_mut().zip(params) {
        b.act_quant = Some(p);
    }
    Ok(())
}
