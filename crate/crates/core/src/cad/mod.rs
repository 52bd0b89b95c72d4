//! Calibration-assisted distillation: a half-step student learns the
//! quantized teacher's two-step target while a set distance keeps its
//! predictions on the calibration inputs close to the full-precision
//! outputs recorded for them.

mod assignment;
mod distance;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

pub use assignment::{assign, assignment_cost};
pub use distance::{
    distance, distance_graph, em_matching, em_value, match_rows, sorted_em_approx, DistanceKind,
    KdeGrid, DENSITY_FLOOR, EM_MAX_BATCH,
};

use crate::calib::{CalibKind, CalibrationSet};
use crate::diffusion::{
    ddim_update, forward_noise, implied_clean, sgd_update, Denoiser, DenoiserModel, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::rng::{self, normals};
use crate::tensor::{Graph, Tensor, Var};

/// Runs the teacher for two steps of `stride` grid indices from `z_t` and
/// returns the clean value a single student step would need to land on
/// the same state.
pub fn teacher_two_step(
    teacher: &dyn Denoiser,
    z_t: &Tensor,
    t_idx: &[usize],
    stride: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Config("teacher stride must be positive".into()));
    }
    let mid: Vec<usize> = t_idx
        .iter()
        .map(|&t| {
            t.checked_sub(2 * stride)
                .map(|_| t - stride)
                .ok_or_else(|| {
                    Error::Contract(format!("step {t} has no two teacher steps below it"))
                })
        })
        .collect::<Result<_>>()?;
    let end: Vec<usize> = mid.iter().map(|&t| t - stride).collect();
    let x1 = teacher.predict(z_t, t_idx)?;
    let z_mid = ddim_update(z_t, &x1, t_idx, &mid, sched)?;
    let x2 = teacher.predict(&z_mid, &mid)?;
    let z_end = ddim_update(&z_mid, &x2, &mid, &end, sched)?;
    implied_clean(z_t, &z_end, t_idx, &end, sched)
}

/// Graph handles of the two loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct CadTerms {
    pub kd: Var,
    pub cd: Option<Var>,
    pub total: Var,
}

/// `mean_i w_i ‖x̃_i − x̂_i‖² + λ · distance(calib_out, calib_target)`,
/// where `calib_out` is the student on the calibration inputs. The
/// distance is skipped entirely when `lambda` is zero.
#[allow(clippy::too_many_arguments)]
pub fn cad_loss(
    g: &mut Graph,
    x_tilde: &Tensor,
    student_out: Var,
    calib_out: Var,
    calib_target: &Tensor,
    weights: &[f64],
    lambda: f64,
    kind: &DistanceKind,
) -> Result<CadTerms> {
    let out = g.value(student_out);
    if out.shape() != x_tilde.shape() || weights.len() != out.rows() || out.rows() == 0 {
        return Err(Error::shape(
            "cad_loss",
            format!(
                "student {:?}, target {:?}, {} weights",
                out.shape(),
                x_tilde.shape(),
                weights.len()
            ),
        ));
    }
    let (n, d) = (out.rows(), out.cols());
    let w = Tensor::matrix(
        n,
        d,
        weights
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w / n as f64, d))
            .collect(),
    )?;
    let target = g.constant(x_tilde.detached());
    let diff = g.sub(student_out, target)?;
    let sq = g.square(diff)?;
    let w = g.constant(w);
    let weighted = g.mul(sq, w)?;
    let kd = g.sum(weighted);
    if lambda == 0.0 {
        return Ok(CadTerms {
            kd,
            cd: None,
            total: kd,
        });
    }
    let cd = distance_graph(g, kind, calib_out, calib_target)?;
    let scaled = g.scale(cd, lambda);
    let total = g.add(kd, scaled)?;
    Ok(CadTerms {
        kd,
        cd: Some(cd),
        total,
    })
}

/// Which calibration outputs the distance term compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CdTarget {
    /// The whole calibration set, every iteration.
    #[default]
    Pooled,
    /// Only the record of the sampled step; the batch then shares that
    /// step.
    PerStep,
}

impl FromStr for CdTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(CdTarget::Pooled),
            "per_step" => Ok(CdTarget::PerStep),
            other => Err(Error::Config(format!(
                "unknown calibration target `{other}` (pooled|per_step)"
            ))),
        }
    }
}

impl fmt::Display for CdTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CdTarget::Pooled => "pooled",
            CdTarget::PerStep => "per_step",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CadConfig {
    pub lambda: f64,
    pub distance: DistanceKind,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub target: CdTarget,
}

impl Default for CadConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            distance: DistanceKind::EarthMover,
            steps: 3000,
            lr: 0.002,
            batch: 64,
            seed: 0,
            target: CdTarget::Pooled,
        }
    }
}

impl CadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("distillation batch must be positive".into()));
        }
        if let DistanceKind::KullbackLeibler(g) | DistanceKind::JensenShannon(g) = &self.distance {
            g.validate()?;
        }
        Ok(())
    }
}

/// Per-iteration loss terms of a distillation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CadTrace {
    /// `(kd, cd, total)`; `cd` is 0 when λ = 0.
    pub rows: Vec<(f64, f64, f64)>,
}

impl CadTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "kd_term", "cd_term", "total"])?;
        for (i, (kd, cd, total)) in self.rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                kd.to_string(),
                cd.to_string(),
                total.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One calibration record: grid step, input state, full-precision output.
type StepRecord = (usize, Vec<f64>, Vec<f64>);

/// Calibration records ordered by step, validated against the teacher.
fn calibration_by_step(
    teacher: &DenoiserModel,
    c_dc: &CalibrationSet,
    stride: usize,
) -> Result<Vec<StepRecord>> {
    if c_dc.kind != CalibKind::Dc {
        return Err(Error::Calibration(
            "expected a distillation calibration set".into(),
        ));
    }
    if c_dc.source_steps != teacher.grid_steps() {
        return Err(Error::Calibration(format!(
            "calibration set was built on a {}-step grid, teacher uses {}",
            c_dc.source_steps,
            teacher.grid_steps()
        )));
    }
    if c_dc.dim != teacher.data_dim() {
        return Err(Error::Calibration(format!(
            "calibration records have dimension {}, teacher {}",
            c_dc.dim,
            teacher.data_dim()
        )));
    }
    (1..=teacher.step_count / 2)
        .map(|k| {
            let t = 2 * k * stride;
            let r = c_dc.at_step(t).next().ok_or_else(|| {
                Error::Calibration(format!("no calibration record for grid step {t}"))
            })?;
            let out = r.output.clone().ok_or_else(|| {
                Error::Calibration(format!(
                    "calibration record at step {t} has no model output"
                ))
            })?;
            Ok((t, r.state.clone(), out))
        })
        .collect()
}

/// Trains a student with half the teacher's steps. The student starts as a
/// copy of the teacher, quantizers included, and updates its shadow
/// weights, biases and time embedding by SGD on [`cad_loss`].
pub fn distill(
    teacher: &DenoiserModel,
    c_dc: &CalibrationSet,
    dataset: &Tensor,
    sched: &NoiseSchedule,
    cfg: &CadConfig,
) -> Result<(DenoiserModel, CadTrace)> {
    cfg.validate()?;
    let steps = teacher.step_count;
    if steps < 2 || steps % 2 != 0 {
        return Err(Error::Config(format!(
            "teacher step count must be even, got {steps}"
        )));
    }
    if teacher.grid_steps() != sched.steps() {
        return Err(Error::Config(format!(
            "teacher grid {} does not match schedule grid {}",
            teacher.grid_steps(),
            sched.steps()
        )));
    }
    if dataset.rows() == 0 || dataset.cols() != teacher.data_dim() {
        return Err(Error::shape(
            "distill",
            format!(
                "dataset {:?} for data dim {}",
                dataset.shape(),
                teacher.data_dim()
            ),
        ));
    }
    let stride = teacher.stride()?;
    let records = calibration_by_step(teacher, c_dc, stride)?;
    let stack = |rows: &[&StepRecord], pick: fn(&StepRecord) -> &Vec<f64>| {
        Tensor::from_rows(&rows.iter().map(|r| pick(r).clone()).collect::<Vec<_>>())
    };
    let all: Vec<&StepRecord> = records.iter().collect();
    let pooled = (
        stack(&all, |r| &r.1)?,
        all.iter().map(|r| r.0).collect::<Vec<_>>(),
        stack(&all, |r| &r.2)?,
    );

    let mut student = teacher.clone();
    student.step_count = steps / 2;
    let mut trace = CadTrace::default();
    let mut rng = rng::seeded(cfg.seed, rng::stream::DISTILL);
    let (n, d) = (cfg.batch, teacher.data_dim());
    for it in 0..cfg.steps {
        let rows: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..dataset.rows()))
            .collect();
        let x = dataset.select_rows(&rows);
        let (t_idx, calib) = match cfg.target {
            CdTarget::Pooled => {
                let t = (0..n)
                    .map(|_| records[rng.random_range(0..records.len())].0)
                    .collect();
                (t, pooled.clone())
            }
            CdTarget::PerStep => {
                let r = &records[rng.random_range(0..records.len())];
                (
                    vec![r.0; n],
                    (stack(&[r], |r| &r.1)?, vec![r.0], stack(&[r], |r| &r.2)?),
                )
            }
        };
        let eps = Tensor::matrix(n, d, normals(&mut rng, n * d))?;
        let z = forward_noise(&x, &t_idx, &eps, sched)?;
        let x_tilde = teacher_two_step(teacher, &z, &t_idx, stride, sched)?;

        let mut g = Graph::new();
        let vars = student.bind(&mut g, true);
        let zv = g.constant(z);
        let out = student.forward_graph(&mut g, &vars, zv, &t_idx)?;
        let calib_in = g.constant(calib.0);
        let calib_out = if cfg.lambda > 0.0 {
            student.forward_graph(&mut g, &vars, calib_in, &calib.1)?
        } else {
            calib_in
        };
        let weights: Vec<f64> = t_idx.iter().map(|&t| sched.weight(t)).collect();
        let terms = cad_loss(
            &mut g,
            &x_tilde,
            out,
            calib_out,
            &calib.2,
            &weights,
            cfg.lambda,
            &cfg.distance,
        )?;
        let total = g.value(terms.total).item();
        if !total.is_finite() {
            return Err(Error::Divergence {
                step: it,
                loss: total,
            });
        }
        trace.rows.push((
            g.value(terms.kd).item(),
            terms.cd.map_or(0.0, |c| g.value(c).item()),
            total,
        ));
        let grads = g.backward(terms.total)?;
        let mut handles = Vec::new();
        for (w, b) in vars.weights.iter().zip(&vars.biases) {
            handles.push(*w);
            handles.push(*b);
        }
        handles.push(vars.embedding);
        for (p, v) in student.parameters_mut().into_iter().zip(handles) {
            sgd_update(p, &grads.wrt(v), cfg.lr)?;
        }
    }
    Ok((student, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::collect_dc;
    use crate::diffusion::Architecture;
    use crate::rng::seeded;

    /// Predicts a fixed clean point whatever the input.
    struct Oracle(Tensor);
    impl Denoiser for Oracle {
        fn predict(&self, z: &Tensor, _t: &[usize]) -> Result<Tensor> {
            Ok(self.0.select_rows(&vec![0; z.rows()]))
        }
    }

    struct Zero;
    impl Denoiser for Zero {
        fn predict(&self, z: &Tensor, _t: &[usize]) -> Result<Tensor> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    #[test]
    fn perfect_teacher_target_is_the_data() {
        let sched = NoiseSchedule::new(64).unwrap();
        let x = Tensor::from_rows(&[vec![0.7, -1.3]]).unwrap();
        let eps = Tensor::from_rows(&[vec![-0.2, 0.9]]).unwrap();
        for t in [2, 10, 33, 64] {
            let z = forward_noise(&x, &[t], &eps, &sched).unwrap();
            let xt = teacher_two_step(&Oracle(x.clone()), &z, &[t], 1, &sched).unwrap();
            assert!(xt.max_abs_diff(&x) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn zero_teacher_at_origin_targets_origin() {
        let sched = NoiseSchedule::new(16).unwrap();
        let z = Tensor::zeros(&[3, 2]);
        let xt = teacher_two_step(&Zero, &z, &[4, 8, 16], 2, &sched).unwrap();
        assert_eq!(xt, Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn coincident_steps_are_degenerate() {
        let sched = NoiseSchedule::new(16).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            implied_clean(&z, &z, &[5], &[5], &sched),
            Err(Error::DegenerateStep(_))
        ));
    }

    #[test]
    fn steps_too_close_to_zero_are_refused() {
        let sched = NoiseSchedule::new(16).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert!(teacher_two_step(&Zero, &z, &[1], 1, &sched).is_err());
    }

    #[test]
    fn zero_lambda_is_the_plain_distillation_term() {
        let mut g = Graph::new();
        let out = g.leaf(
            &Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]])
                .unwrap()
                .into_param(),
        );
        let target = Tensor::zeros(&[2, 2]);
        let terms = cad_loss(
            &mut g,
            &target,
            out,
            out,
            &target,
            &[1.0, 0.5],
            0.0,
            &DistanceKind::EarthMover,
        )
        .unwrap();
        assert!(terms.cd.is_none());
        assert_eq!(g.value(terms.total).item(), (1.0 + 0.5 * 4.0) / 2.0);
    }

    #[test]
    fn matching_outputs_cost_nothing() {
        let x = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap();
        let mut g = Graph::new();
        let out = g.leaf(&x.detached().into_param());
        let terms = cad_loss(
            &mut g,
            &x,
            out,
            out,
            &x,
            &[1.0, 1.0],
            0.1,
            &DistanceKind::EarthMover,
        )
        .unwrap();
        assert_eq!(g.value(terms.total).item(), 0.0);
    }

    fn tiny_teacher() -> (DenoiserModel, NoiseSchedule) {
        let arch = Architecture {
            width: 8,
            blocks: 2,
            grid_steps: 8,
            ..Architecture::default()
        };
        let m = DenoiserModel::new(arch, &mut seeded(3, 3)).unwrap();
        (m, NoiseSchedule::new(8).unwrap())
    }

    #[test]
    fn zero_steps_returns_a_halved_copy() {
        let (teacher, sched) = tiny_teacher();
        let dc = collect_dc(&teacher, &sched, false, 4, 1, 1).unwrap();
        let data = Tensor::zeros(&[4, 2]);
        let cfg = CadConfig {
            steps: 0,
            ..CadConfig::default()
        };
        let (student, trace) = distill(&teacher, &dc, &data, &sched, &cfg).unwrap();
        assert_eq!(student.step_count, 4);
        assert_eq!(student.parameters(), teacher.parameters());
        assert!(trace.rows.is_empty());
    }

    #[test]
    fn missing_records_are_reported() {
        let (teacher, sched) = tiny_teacher();
        let mut dc = collect_dc(&teacher, &sched, false, 4, 1, 1).unwrap();
        dc.records.retain(|r| r.t_idx != 4);
        let data = Tensor::zeros(&[4, 2]);
        let err = distill(&teacher, &dc, &data, &sched, &CadConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)), "{err}");
    }

    #[test]
    fn distillation_leaves_the_teacher_alone_and_logs_both_terms() {
        let (teacher, sched) = tiny_teacher();
        let before = teacher.checksum();
        let dc = collect_dc(&teacher, &sched, false, 4, 1, 1).unwrap();
        let data = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        for target in [CdTarget::Pooled, CdTarget::PerStep] {
            let cfg = CadConfig {
                steps: 5,
                batch: 8,
                target,
                ..CadConfig::default()
            };
            let (student, trace) = distill(&teacher, &dc, &data, &sched, &cfg).unwrap();
            assert_eq!(teacher.checksum(), before);
            assert_ne!(student.checksum(), before);
            assert_eq!(trace.rows.len(), 5);
            for &(kd, cd, total) in &trace.rows {
                assert!((kd + 0.1 * cd - total).abs() < 1e-12);
            }
        }
    }
}
