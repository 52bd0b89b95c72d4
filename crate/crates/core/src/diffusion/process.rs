use super::model::{Denoiser, DenoiserModel, ModelVars};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, normals};
use crate::tensor::{Graph, Tensor, Var};

/// Clean data, noise, per-row grid indices and the resulting noisy batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch {
    pub x: Tensor,
    pub eps: Tensor,
    pub t_idx: Vec<usize>,
    pub z: Tensor,
}

impl DiffusionBatch {
    pub fn new(x: Tensor, eps: Tensor, t_idx: Vec<usize>, sched: &NoiseSchedule) -> Result<Self> {
        let z = forward_noise(&x, &t_idx, &eps, sched)?;
        Ok(Self { x, eps, t_idx, z })
    }
}

/// `z = α_t x + σ_t ε`, row by row.
pub fn forward_noise(
    x: &Tensor,
    t_idx: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x.shape() != eps.shape() || x.rows() != t_idx.len() {
        return Err(Error::shape(
            "forward_noise",
            format!(
                "x {:?}, eps {:?}, {} steps",
                x.shape(),
                eps.shape(),
                t_idx.len()
            ),
        ));
    }
    let d = x.cols();
    let mut out = x.detached();
    for (r, &t) in t_idx.iter().enumerate() {
        sched.check_index(t)?;
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        for (c, v) in row.iter_mut().enumerate() {
            *v = a * *v + s * eps.get(r, c);
        }
    }
    Ok(out)
}

/// Deterministic update from `t` to `s ≤ t` given a clean prediction:
/// `z_s = α_s x̂ + (σ_s / σ_t)(z_t − α_t x̂)`.
pub fn ddim_update(
    z: &Tensor,
    x_hat: &Tensor,
    t_idx: &[usize],
    s_idx: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z.shape() != x_hat.shape() || z.rows() != t_idx.len() || t_idx.len() != s_idx.len() {
        return Err(Error::shape(
            "ddim_step",
            format!(
                "z {:?}, x̂ {:?}, {} / {} steps",
                z.shape(),
                x_hat.shape(),
                t_idx.len(),
                s_idx.len()
            ),
        ));
    }
    let d = z.cols();
    let mut out = z.detached();
    for (r, (&t, &s)) in t_idx.iter().zip(s_idx).enumerate() {
        sched.check_index(t)?;
        sched.check_index(s)?;
        if s > t {
            return Err(Error::Contract(format!(
                "ddim step must not go up ({t} -> {s})"
            )));
        }
        let ratio = sched.sigma(s) / sched.sigma(t);
        let (at, as_) = (sched.alpha(t), sched.alpha(s));
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        for (c, v) in row.iter_mut().enumerate() {
            let xh = x_hat.get(r, c);
            *v = as_ * xh + ratio * (*v - at * xh);
        }
    }
    Ok(out)
}

/// Smallest `|α_s − (σ_s/σ_t) α_t|` accepted by [`implied_clean`].
pub const DEGENERATE_DENOMINATOR: f64 = 1e-10;

/// Clean value that takes `z_t` to `z_s` in one deterministic update:
/// `x = (z_s − r z_t) / (α_s − r α_t)` with `r = σ_s/σ_t`.
pub fn implied_clean(
    z_t: &Tensor,
    z_s: &Tensor,
    t_idx: &[usize],
    s_idx: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z_t.shape() != z_s.shape() || z_t.rows() != t_idx.len() || t_idx.len() != s_idx.len() {
        return Err(Error::shape(
            "implied_clean",
            format!(
                "{:?} vs {:?} with {} steps",
                z_t.shape(),
                z_s.shape(),
                t_idx.len()
            ),
        ));
    }
    let d = z_t.cols();
    let mut out = Tensor::zeros(z_t.shape());
    for (r, (&t, &s)) in t_idx.iter().zip(s_idx).enumerate() {
        sched.check_index(t)?;
        sched.check_index(s)?;
        let ratio = sched.sigma(s) / sched.sigma(t);
        let denom = sched.alpha(s) - ratio * sched.alpha(t);
        if denom.abs() < DEGENERATE_DENOMINATOR {
            return Err(Error::DegenerateStep(format!(
                "steps {t} -> {s} give denominator {denom:e}"
            )));
        }
        for c in 0..d {
            out.data_mut()[r * d + c] = (z_s.get(r, c) - ratio * z_t.get(r, c)) / denom;
        }
    }
    Ok(out)
}

pub fn ddim_step(
    model: &dyn Denoiser,
    z: &Tensor,
    t_idx: &[usize],
    s_idx: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x_hat = model.predict(z, t_idx)?;
    ddim_update(z, &x_hat, t_idx, s_idx, sched)
}

/// Weighted mean squared error `mean_i w(λ_t) ‖x − x̂(z_t, t)‖²`.
pub fn dm_loss(model: &dyn Denoiser, batch: &DiffusionBatch, sched: &NoiseSchedule) -> Result<f64> {
    let x_hat = model.predict(&batch.z, &batch.t_idx)?;
    let n = batch.x.rows();
    if n == 0 {
        return Err(Error::shape("dm_loss", "empty batch"));
    }
    let total: f64 = (0..n)
        .map(|r| {
            let err: f64 = batch
                .x
                .row(r)
                .iter()
                .zip(x_hat.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            sched.weight(batch.t_idx[r]) * err
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-row weight column `[n, d]` matching `t_idx`, scaled by `1/n` so a
/// plain sum yields the batch mean.
pub(crate) fn row_weights(t_idx: &[usize], d: usize, sched: &NoiseSchedule) -> Tensor {
    let n = t_idx.len();
    let data = t_idx
        .iter()
        .flat_map(|&t| std::iter::repeat_n(sched.weight(t) / n as f64, d))
        .collect();
    Tensor::matrix(n, d, data).expect("sized buffer")
}

/// Graph version of [`dm_loss`] for training.
pub fn dm_loss_graph(
    g: &mut Graph,
    model: &DenoiserModel,
    vars: &ModelVars,
    batch: &DiffusionBatch,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let z = g.constant(batch.z.detached());
    let x = g.constant(batch.x.detached());
    let x_hat = model.forward_graph(g, vars, z, &batch.t_idx)?;
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff)?;
    let w = g.constant(row_weights(&batch.t_idx, batch.x.cols(), sched));
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted))
}

/// Standard normal starting points, one ChaCha stream per trajectory so
/// the result does not depend on batch composition.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for j in 0..n {
        let mut r = rng::seeded(seed, rng::stream::TRAJECTORY_BASE + j as u64);
        data.extend(normals(&mut r, dim));
    }
    Tensor::matrix(n, dim, data).expect("sized buffer")
}

/// State handed to a trajectory observer at every sampling step.
pub struct TrajectoryStep<'a> {
    /// Sampling step, counting down from `step_count` to 1.
    pub step: usize,
    /// Grid index of the input state.
    pub t_idx: usize,
    /// Grid index after the update.
    pub s_idx: usize,
    /// Denoiser input `z_t`, one row per trajectory.
    pub z: &'a Tensor,
    /// Denoiser prediction `x̂(z_t, t)`.
    pub x_hat: &'a Tensor,
}

/// Runs all rows of `init` from the top of the grid to 0 in `step_count`
/// DDIM steps, calling `visit` before each update. Returns the last
/// prediction `x̂`.
pub fn run_trajectories(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    step_count: usize,
    init: Tensor,
    mut visit: impl FnMut(&TrajectoryStep<'_>) -> Result<()>,
) -> Result<Tensor> {
    let grid = sched.steps();
    if step_count == 0 || grid % step_count != 0 {
        return Err(Error::Config(format!(
            "step count {step_count} does not divide the {grid}-step grid"
        )));
    }
    let stride = grid / step_count;
    let n = init.rows();
    let mut z = init;
    let mut x_hat = Tensor::zeros(z.shape());
    if n == 0 {
        return Ok(x_hat);
    }
    for step in (1..=step_count).rev() {
        let t = step * stride;
        let s = t - stride;
        let ts = vec![t; n];
        x_hat = model.predict(&z, &ts)?;
        visit(&TrajectoryStep {
            step,
            t_idx: t,
            s_idx: s,
            z: &z,
            x_hat: &x_hat,
        })?;
        z = ddim_update(&z, &x_hat, &ts, &vec![s; n], sched)?;
    }
    Ok(x_hat)
}

/// Generates `n` samples with the model's own step count.
pub fn sample(model: &DenoiserModel, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<Tensor> {
    if model.grid_steps() != sched.steps() {
        return Err(Error::Config(format!(
            "model grid {} does not match schedule grid {}",
            model.grid_steps(),
            sched.steps()
        )));
    }
    let init = initial_noise(n, model.data_dim(), seed);
    run_trajectories(model, sched, model.step_count, init, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::Architecture;
    use crate::rng::seeded;

    struct Zero;
    impl Denoiser for Zero {
        fn predict(&self, z: &Tensor, _t: &[usize]) -> Result<Tensor> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    fn m(rows: usize, data: Vec<f64>) -> Tensor {
        let cols = data.len() / rows.max(1);
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn forward_noise_mixes_rows() {
        let s = NoiseSchedule::new(100).unwrap();
        let z = forward_noise(&m(1, vec![1.0, 0.0]), &[50], &m(1, vec![0.0, 1.0]), &s).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((z.get(0, 0) - h).abs() < 1e-15 && (z.get(0, 1) - h).abs() < 1e-15);
        assert!(forward_noise(&m(1, vec![1.0, 0.0]), &[101], &m(1, vec![0.0, 1.0]), &s).is_err());
    }

    #[test]
    fn ddim_with_same_time_is_identity() {
        let s = NoiseSchedule::new(10).unwrap();
        let z = m(2, vec![0.3, -1.0, 2.0, 0.5]);
        let xh = m(2, vec![1.0, 1.0, -1.0, 0.0]);
        let out = ddim_update(&z, &xh, &[4, 7], &[4, 7], &s).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-15);
        assert!(ddim_update(&z, &xh, &[4, 7], &[5, 7], &s).is_err());
    }

    #[test]
    fn ddim_from_top_with_zero_prediction_rescales() {
        let s = NoiseSchedule::new(10).unwrap();
        let z = m(1, vec![0.7, -0.2]);
        let out = ddim_step(&Zero, &z, &[10], &[9], &s).unwrap();
        let r = s.sigma(9) / s.sigma(10);
        assert!((out.get(0, 0) - 0.7 * r).abs() < 1e-15);
        assert!((out.get(0, 1) + 0.2 * r).abs() < 1e-15);
    }

    #[test]
    fn dm_loss_counts_squared_error() {
        let s = NoiseSchedule::new(10).unwrap();
        let b =
            DiffusionBatch::new(m(1, vec![1.0, 0.0]), m(1, vec![0.0, 0.0]), vec![3], &s).unwrap();
        // Zero predicts the origin, one unit from x.
        assert!((dm_loss(&Zero, &b, &s).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let s = NoiseSchedule::new(10).unwrap();
        let model = DenoiserModel::new(
            Architecture {
                grid_steps: 10,
                width: 8,
                ..Architecture::default()
            },
            &mut seeded(1, 0),
        )
        .unwrap();
        let mut r = seeded(2, 0);
        let x = m(3, normals(&mut r, 6));
        let e = m(3, normals(&mut r, 6));
        let b = DiffusionBatch::new(x, e, vec![1, 5, 10], &s).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let l = dm_loss_graph(&mut g, &model, &vars, &b, &s).unwrap();
        assert!((g.value(l).item() - dm_loss(&model, &b, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sampling_empty_and_deterministic() {
        let s = NoiseSchedule::new(8).unwrap();
        let model = DenoiserModel::new(
            Architecture {
                grid_steps: 8,
                width: 4,
                ..Architecture::default()
            },
            &mut seeded(1, 0),
        )
        .unwrap();
        assert_eq!(sample(&model, &s, 0, 1).unwrap().rows(), 0);
        let a = sample(&model, &s, 16, 9).unwrap();
        let b = sample(&model, &s, 16, 9).unwrap();
        assert_eq!(a, b);
        // Trajectory j is independent of how many others run alongside it.
        let c = sample(&model, &s, 4, 9).unwrap();
        assert_eq!(c.row(3), a.row(3));
    }

    #[test]
    fn observer_sees_every_step_top_down() {
        let s = NoiseSchedule::new(8).unwrap();
        let mut seen = Vec::new();
        run_trajectories(&Zero, &s, 4, initial_noise(3, 2, 0), |st| {
            seen.push((st.step, st.t_idx, st.s_idx));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(4, 8, 6), (3, 6, 4), (2, 4, 2), (1, 2, 0)]);
    }
}
