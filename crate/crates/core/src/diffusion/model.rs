use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::quant::{ste_quantize, QuantParams, WeightQuantizer};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Anything that maps a noisy batch and per-row grid indices to a clean
/// prediction `x̂(z_t, t)`.
pub trait Denoiser {
    fn predict(&self, z: &Tensor, t_idx: &[usize]) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer followed by an activation, the unit of block-wise
/// reconstruction. `weight` always holds the full-precision shadow copy;
/// the quantizer is applied on every forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// `[in, out]`.
    pub weight: Tensor,
    /// `[1, out]`.
    pub bias: Tensor,
    pub activation: Activation,
    pub weight_quant: Option<WeightQuantizer>,
    pub act_quant: Option<QuantParams>,
}

impl Block {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Weights as seen by the forward pass.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.weight_quant {
            Some(q) => q.quantize(&self.weight),
            None => Ok(self.weight.detached()),
        }
    }
}

/// Layer sizes of a denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub data_dim: usize,
    pub width: usize,
    pub blocks: usize,
    /// Size `T` of the schedule grid the time embedding is indexed by.
    pub grid_steps: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            data_dim: 2,
            width: 64,
            blocks: 4,
            grid_steps: 64,
        }
    }
}

impl Architecture {
    /// `(fan_in, fan_out)` of every block's weight matrix.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.blocks)
            .map(|b| {
                let fan_in = if b == 0 { self.data_dim } else { self.width };
                let fan_out = if b + 1 == self.blocks {
                    self.data_dim
                } else {
                    self.width
                };
                (fan_in, fan_out)
            })
            .collect()
    }

    /// Weights, biases and the `(grid_steps + 1) × width` time embedding.
    pub fn parameter_count(&self) -> usize {
        let layers: usize = self.layer_shapes().iter().map(|(i, o)| i * o + o).sum();
        layers + (self.grid_steps + 1) * self.width
    }
}

/// Graph handles for a model's parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub embedding: Var,
}

/// Block-structured feedforward denoiser predicting `x̂` directly.
///
/// Block 0 adds a learned per-grid-step embedding to its affine output
/// before the activation; the last block is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub blocks: Vec<Block>,
    /// `[grid_steps + 1, width]`.
    pub time_embedding: Tensor,
    /// Number of sampling steps this model uses.
    pub step_count: usize,
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

impl DenoiserModel {
    /// Fresh model with uniform `±1/√fan_in` weights and a zero embedding.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        if arch.blocks == 0 || arch.width == 0 || arch.data_dim == 0 {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        if arch.grid_steps < 2 || arch.grid_steps % 2 != 0 {
            return Err(Error::Config(format!(
                "grid step count must be even and >= 2, got {}",
                arch.grid_steps
            )));
        }
        let mut blocks = Vec::with_capacity(arch.blocks);
        for b in 0..arch.blocks {
            let fan_in = if b == 0 { arch.data_dim } else { arch.width };
            let fan_out = if b + 1 == arch.blocks {
                arch.data_dim
            } else {
                arch.width
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            blocks.push(Block {
                weight: uniform_matrix(fan_in, fan_out, bound, rng),
                bias: uniform_matrix(1, fan_out, bound, rng),
                activation: if b + 1 == arch.blocks {
                    Activation::Identity
                } else {
                    Activation::Silu
                },
                weight_quant: None,
                act_quant: None,
            });
        }
        let emb_width = blocks[0].out_dim();
        Ok(Self {
            blocks,
            time_embedding: Tensor::zeros(&[arch.grid_steps + 1, emb_width]),
            step_count: arch.grid_steps,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.blocks[0].in_dim(),
            width: self.blocks[0].out_dim(),
            blocks: self.blocks.len(),
            grid_steps: self.grid_steps(),
        }
    }

    pub fn grid_steps(&self) -> usize {
        self.time_embedding.rows() - 1
    }

    pub fn data_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    /// Grid indices visited per sampling step.
    pub fn stride(&self) -> Result<usize> {
        let grid = self.grid_steps();
        if self.step_count == 0 || grid % self.step_count != 0 {
            return Err(Error::Config(format!(
                "step count {} does not divide the {grid}-step grid",
                self.step_count
            )));
        }
        Ok(grid / self.step_count)
    }

    pub fn is_quantized(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.weight_quant.is_some() || b.act_quant.is_some())
    }

    /// Drops every quantizer, leaving the full-precision shadow model.
    pub fn strip_quantizers(&mut self) {
        for b in &mut self.blocks {
            b.weight_quant = None;
            b.act_quant = None;
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.bias.len())
            .sum::<usize>()
            + self.time_embedding.len()
    }

    /// Parameter tensors in declaration order: per block weight then bias,
    /// then the time embedding.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.time_embedding);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.time_embedding);
        out
    }

    /// Order-sensitive checksum over all parameters.
    pub fn checksum(&self) -> u64 {
        self.parameters()
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    /// Puts every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(&t.detached().into_param())
            } else {
                g.constant(t.detached())
            }
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for b in &self.blocks {
            weights.push(put(&b.weight));
            biases.push(put(&b.bias));
        }
        let embedding = put(&self.time_embedding);
        ModelVars {
            weights,
            biases,
            embedding,
        }
    }

    fn check_input(&self, z: &Tensor, t_idx: &[usize]) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.data_dim() || z.rows() != t_idx.len() {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "input {:?} with {} time indices, data dim {}",
                    z.shape(),
                    t_idx.len(),
                    self.data_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass of one block on `g`. `t_idx` is required for block 0.
    pub fn block_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        b: usize,
        input: Var,
        t_idx: &[usize],
    ) -> Result<Var> {
        let block = &self.blocks[b];
        let w = match &block.weight_quant {
            Some(q) => q.ste(g, vars.weights[b])?,
            None => vars.weights[b],
        };
        let mut h = g.affine(input, w, vars.biases[b])?;
        if b == 0 {
            let emb = g.gather_rows(vars.embedding, t_idx)?;
            h = g.add(h, emb)?;
        }
        if block.activation == Activation::Silu {
            h = g.silu(h);
        }
        if let Some(p) = &block.act_quant {
            h = ste_quantize(g, h, p);
        }
        Ok(h)
    }

    /// Full forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        z: Var,
        t_idx: &[usize],
    ) -> Result<Var> {
        self.check_input(g.value(z), t_idx)?;
        let mut h = z;
        for b in 0..self.blocks.len() {
            h = self.block_graph(g, vars, b, h, t_idx)?;
        }
        Ok(h)
    }

    /// Inputs to every block plus the final output, without gradients.
    /// Entry `b` is the input of block `b`; the last entry is `x̂`.
    pub fn block_activations(&self, z: &Tensor, t_idx: &[usize]) -> Result<Vec<Tensor>> {
        self.check_input(z, t_idx)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let mut h = g.constant(z.detached());
        let mut out = vec![z.detached()];
        for b in 0..self.blocks.len() {
            h = self.block_graph(&mut g, &vars, b, h, t_idx)?;
            out.push(g.value(h).detached());
        }
        Ok(out)
    }
}

impl Denoiser for DenoiserModel {
    fn predict(&self, z: &Tensor, t_idx: &[usize]) -> Result<Tensor> {
        self.check_input(z, t_idx)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let zv = g.constant(z.detached());
        let out = self.forward_graph(&mut g, &vars, zv, t_idx)?;
        Ok(g.value(out).detached())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fit_quant_params, Granularity, RangeMethod};
    use crate::rng::seeded;

    fn small() -> DenoiserModel {
        let arch = Architecture {
            data_dim: 2,
            width: 8,
            blocks: 3,
            grid_steps: 10,
        };
        DenoiserModel::new(arch, &mut seeded(3, 0)).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let m = small();
        let z = Tensor::matrix(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let out = m.predict(&z, &[0, 1, 2, 3, 10]).unwrap();
        assert_eq!(out.shape(), &[5, 2]);
        assert!(m.predict(&z, &[0, 1]).is_err());
        assert!(m.predict(&z, &[0, 1, 2, 3, 11]).is_err());
    }

    #[test]
    fn block_activations_end_in_prediction() {
        let m = small();
        let z = Tensor::matrix(2, 2, vec![0.1, -0.3, 1.0, 2.0]).unwrap();
        let acts = m.block_activations(&z, &[4, 7]).unwrap();
        assert_eq!(acts.len(), 4);
        assert_eq!(acts[3], m.predict(&z, &[4, 7]).unwrap());
    }

    #[test]
    fn removing_quantizers_restores_fp_outputs() {
        let fp = small();
        let z = Tensor::matrix(3, 2, vec![0.5, -0.5, 1.0, 0.0, -2.0, 1.5]).unwrap();
        let t = [1, 5, 9];
        let base = fp.predict(&z, &t).unwrap();
        let mut q = fp.clone();
        for b in &mut q.blocks {
            b.weight_quant = Some(
                WeightQuantizer::fit(&b.weight, 4, Granularity::PerChannel, RangeMethod::MinMax)
                    .unwrap(),
            );
            b.act_quant = Some(fit_quant_params(&[-3.0, 3.0], 4, RangeMethod::MinMax).unwrap());
        }
        assert!(q.predict(&z, &t).unwrap() != base);
        q.strip_quantizers();
        assert_eq!(q.predict(&z, &t).unwrap(), base);
    }

    #[test]
    fn step_count_must_divide_grid() {
        let mut m = small();
        assert_eq!(m.stride().unwrap(), 1);
        m.step_count = 5;
        assert_eq!(m.stride().unwrap(), 2);
        m.step_count = 4;
        assert!(m.stride().is_err());
    }
}
