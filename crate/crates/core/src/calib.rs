//! Calibration sets collected from full-precision sampling trajectories.
//!
//! The quantization set holds denoiser inputs `z_t` at every sampling step,
//! a step-dependent number of trajectories per step. The distillation set
//! holds, per even step, one input `z_t` and the full-precision two-step
//! outcome from it expressed as a clean value, picked from a random
//! trajectory (or always the first one, for ablations).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::diffusion::{
    ddim_update, implied_clean, initial_noise, run_trajectories, DenoiserModel, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"DPQCAL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibKind {
    Qc,
    Dc,
}

impl fmt::Display for CalibKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibKind::Qc => "qc",
            CalibKind::Dc => "dc",
        })
    }
}

impl FromStr for CalibKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qc" => Ok(CalibKind::Qc),
            "dc" => Ok(CalibKind::Dc),
            other => Err(Error::Config(format!(
                "unknown calibration kind `{other}` (qc|dc)"
            ))),
        }
    }
}

/// How records are selected at each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CollectionMode {
    /// Quantization set: `n_t = clamp(round(N(mean, var = T/2)), 0, n_max)`.
    Ndtc { mean: f64 },
    /// Quantization set: `n_fixed` trajectories at every step.
    Fixed { n_fixed: usize },
    /// Distillation set: a uniformly drawn trajectory per even step.
    Stochastic,
    /// Distillation set: always the first trajectory.
    Deterministic,
}

impl CollectionMode {
    pub fn kind(&self) -> CalibKind {
        match self {
            CollectionMode::Ndtc { .. } | CollectionMode::Fixed { .. } => CalibKind::Qc,
            CollectionMode::Stochastic | CollectionMode::Deterministic => CalibKind::Dc,
        }
    }
}

impl fmt::Display for CollectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollectionMode::Ndtc { mean } => write!(f, "ndtc:{mean}"),
            CollectionMode::Fixed { n_fixed } => write!(f, "fixed:{n_fixed}"),
            CollectionMode::Stochastic => f.write_str("stochastic"),
            CollectionMode::Deterministic => f.write_str("deterministic"),
        }
    }
}

impl FromStr for CollectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad collection mode `{s}`"));
        match s {
            "stochastic" => return Ok(CollectionMode::Stochastic),
            "deterministic" => return Ok(CollectionMode::Deterministic),
            _ => {}
        }
        if let Some(v) = s.strip_prefix("ndtc:") {
            return Ok(CollectionMode::Ndtc {
                mean: v.parse().map_err(|_| bad())?,
            });
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            return Ok(CollectionMode::Fixed {
                n_fixed: v.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibRecord {
    /// Denoiser input `z_t` on the generating trajectory.
    pub state: Vec<f64>,
    /// Full-precision target for `z_t`; present in distillation sets.
    pub output: Option<Vec<f64>>,
    /// Grid index on the source schedule.
    pub t_idx: usize,
    /// Trajectory the record was taken from.
    pub sample_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub kind: CalibKind,
    pub mode: CollectionMode,
    /// Seed of the per-step selection draws.
    pub seed: u64,
    /// Seed of the trajectories' starting noise.
    pub trajectory_seed: u64,
    /// Grid size `T` of the generating schedule.
    pub source_steps: usize,
    pub n_max: usize,
    pub dim: usize,
    pub records: Vec<CalibRecord>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record states stacked into an `[n, dim]` matrix.
    pub fn states(&self) -> Tensor {
        let data = self
            .records
            .iter()
            .flat_map(|r| r.state.iter().copied())
            .collect();
        Tensor::matrix(self.records.len(), self.dim, data).expect("records share dim")
    }

    pub fn time_indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.t_idx).collect()
    }

    /// Full-precision outputs stacked into an `[n, dim]` matrix, if every
    /// record carries one.
    pub fn outputs(&self) -> Option<Tensor> {
        let mut data = Vec::with_capacity(self.records.len() * self.dim);
        for r in &self.records {
            data.extend_from_slice(r.output.as_ref()?);
        }
        Some(Tensor::matrix(self.records.len(), self.dim, data).expect("records share dim"))
    }

    fn has_outputs(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.output.is_some())
    }

    /// Records taken at grid index `t_idx`.
    pub fn at_step(&self, t_idx: usize) -> impl Iterator<Item = &CalibRecord> {
        self.records.iter().filter(move |r| r.t_idx == t_idx)
    }

    /// Writes the binary record file plus a `.meta` text sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(15 + self.records.len() * (4 + 8 * self.dim));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            let t = u32::try_from(r.t_idx)
                .map_err(|_| Error::Format(format!("time index {} exceeds u32", r.t_idx)))?;
            buf.extend_from_slice(&t.to_le_bytes());
            for v in r.state.iter().chain(r.output.iter().flatten()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        let indices: Vec<String> = self
            .records
            .iter()
            .map(|r| r.sample_index.to_string())
            .collect();
        let meta = format!(
            "kind={}\nmode={}\nseed={}\ntrajectory_seed={}\nsource_T={}\nn_max={}\ndim={}\noutputs={}\nsample_indices={}\n",
            self.kind,
            self.mode,
            self.seed,
            self.trajectory_seed,
            self.source_steps,
            self.n_max,
            self.dim,
            self.has_outputs(),
            indices.join(",")
        );
        fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(sidecar_path(path))?;
        let meta: BTreeMap<&str, &str> = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let field = |k: &str| -> Result<&str> {
            meta.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("calibration sidecar lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|_| {
                Error::Format(format!("calibration sidecar field `{k}` is not an integer"))
            })
        };
        let kind: CalibKind = field("kind")?.parse()?;
        let mode: CollectionMode = field("mode")?.parse()?;
        let dim = num("dim")? as usize;
        let with_outputs: bool = field("outputs")?.parse().map_err(|_| {
            Error::Format("calibration sidecar field `outputs` is not a flag".into())
        })?;
        let width = if with_outputs { 2 * dim } else { dim };

        let bytes = fs::read(path)?;
        if bytes.len() < 15 || &bytes[..7] != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a calibration file",
                path.display()
            )));
        }
        let count = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes")) as usize;
        let body = &bytes[15..];
        if count > 0 {
            let per = body.len() / count;
            if per * count != body.len() || per < 4 || (per - 4) % 8 != 0 || (per - 4) / 8 != width
            {
                return Err(Error::Format(format!(
                    "calibration body of {} bytes does not hold {count} records of dim {dim}",
                    body.len()
                )));
            }
        } else if !body.is_empty() {
            return Err(Error::Format(
                "trailing bytes after empty calibration set".into(),
            ));
        }
        let indices: Vec<usize> = match field("sample_indices")? {
            "" => Vec::new(),
            s => s
                .split(',')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Format("bad sample index".into()))
                })
                .collect::<Result<_>>()?,
        };
        if indices.len() != count {
            return Err(Error::Format(format!(
                "sidecar lists {} sample indices for {count} records",
                indices.len()
            )));
        }
        let rec_len = 4 + 8 * width;
        let records = (0..count)
            .map(|i| {
                let chunk = &body[i * rec_len..(i + 1) * rec_len];
                let t = u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes")) as usize;
                let mut values: Vec<f64> = chunk[4..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let output = with_outputs.then(|| values.split_off(dim));
                CalibRecord {
                    state: values,
                    output,
                    t_idx: t,
                    sample_index: indices[i],
                }
            })
            .collect();
        Ok(Self {
            kind,
            mode,
            seed: num("seed")?,
            trajectory_seed: num("trajectory_seed")?,
            source_steps: num("source_T")? as usize,
            n_max: num("n_max")? as usize,
            dim,
            records,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn check_model(model: &DenoiserModel, sched: &NoiseSchedule) -> Result<()> {
    if model.is_quantized() {
        return Err(Error::Calibration(
            "calibration data must come from the full-precision model".into(),
        ));
    }
    if model.grid_steps() != sched.steps() {
        return Err(Error::Config(format!(
            "model grid {} does not match schedule grid {}",
            model.grid_steps(),
            sched.steps()
        )));
    }
    Ok(())
}

/// Collects the quantization calibration set from `n_max` trajectories of
/// the full-precision model at its own step count.
pub fn collect_qc(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    mode: CollectionMode,
    n_max: usize,
    trajectory_seed: u64,
    seed: u64,
) -> Result<CalibrationSet> {
    check_model(model, sched)?;
    if n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    let steps = model.step_count;
    let mut count_rng = rng::seeded(seed, rng::stream::CALIB);
    let normal = match mode {
        CollectionMode::Ndtc { .. } => Some(
            Normal::new(0.0, (steps as f64 / 2.0).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?,
        ),
        CollectionMode::Fixed { n_fixed } if n_fixed > n_max => {
            return Err(Error::Config(format!(
                "n_fixed {n_fixed} exceeds n_max {n_max}"
            )));
        }
        CollectionMode::Fixed { .. } => None,
        _ => {
            return Err(Error::Config(format!(
                "`{mode}` is a distillation-set mode"
            )))
        }
    };
    let mut records = Vec::new();
    let init = initial_noise(n_max, model.data_dim(), trajectory_seed);
    run_trajectories(model, sched, steps, init, |st| {
        let n_t = match (mode, &normal) {
            (CollectionMode::Ndtc { mean }, Some(dist)) => {
                let draw = (mean + dist.sample(&mut count_rng)).round();
                draw.clamp(0.0, n_max as f64) as usize
            }
            (CollectionMode::Fixed { n_fixed }, _) => n_fixed,
            _ => unreachable!("mode validated above"),
        };
        for j in 0..n_t {
            records.push(CalibRecord {
                state: st.z.row(j).to_vec(),
                output: None,
                t_idx: st.t_idx,
                sample_index: j,
            });
        }
        Ok(())
    })?;
    if records.is_empty() {
        log::warn!("quantization calibration set is empty (every n_t clamped to 0)");
    }
    // Present records in ascending time for readability.
    records.sort_by_key(|r| (r.t_idx, r.sample_index));
    Ok(CalibrationSet {
        kind: CalibKind::Qc,
        mode,
        seed,
        trajectory_seed,
        source_steps: sched.steps(),
        n_max,
        dim: model.data_dim(),
        records,
    })
}

/// Collects the distillation calibration set. At every even sampling step
/// it keeps one trajectory's input `z_t` together with the clean value
/// that takes `z_t` to that trajectory's state two steps later, i.e. what
/// a single step of a half-step model should predict there.
pub fn collect_dc(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    deterministic: bool,
    n_max: usize,
    trajectory_seed: u64,
    seed: u64,
) -> Result<CalibrationSet> {
    check_model(model, sched)?;
    let steps = model.step_count;
    if steps % 2 != 0 {
        return Err(Error::Config(format!(
            "distillation calibration needs an even step count, got {steps}"
        )));
    }
    if n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    let stride = model.stride()?;
    let mut pick_rng = rng::seeded(seed, rng::stream::CALIB);
    let mut picks = Vec::new();
    // Every trajectory state by grid index, including the final one.
    let mut states: BTreeMap<usize, Tensor> = BTreeMap::new();
    let init = initial_noise(n_max, model.data_dim(), trajectory_seed);
    run_trajectories(model, sched, steps, init, |st| {
        states.insert(st.t_idx, st.z.clone());
        if st.step == 1 {
            let n = st.z.rows();
            let last = ddim_update(
                st.z,
                st.x_hat,
                &vec![st.t_idx; n],
                &vec![st.s_idx; n],
                sched,
            )?;
            states.insert(st.s_idx, last);
        }
        if st.step % 2 == 0 {
            let j = if deterministic {
                0
            } else {
                pick_rng.random_range(0..n_max)
            };
            picks.push((st.t_idx, j));
        }
        Ok(())
    })?;
    let mut records = Vec::with_capacity(picks.len());
    for (t, j) in picks {
        let end = t - 2 * stride;
        let z_t = states[&t].select_rows(&[j]);
        let z_end = states[&end].select_rows(&[j]);
        let target = implied_clean(&z_t, &z_end, &[t], &[end], sched)?;
        records.push(CalibRecord {
            state: z_t.into_data(),
            output: Some(target.into_data()),
            t_idx: t,
            sample_index: j,
        });
    }
    records.sort_by_key(|r| r.t_idx);
    Ok(CalibrationSet {
        kind: CalibKind::Dc,
        mode: if deterministic {
            CollectionMode::Deterministic
        } else {
            CollectionMode::Stochastic
        },
        seed,
        trajectory_seed,
        source_steps: sched.steps(),
        n_max,
        dim: model.data_dim(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Architecture;
    use crate::rng::seeded;

    fn model(grid: usize) -> DenoiserModel {
        DenoiserModel::new(
            Architecture {
                grid_steps: grid,
                width: 8,
                ..Architecture::default()
            },
            &mut seeded(0, 0),
        )
        .unwrap()
    }

    #[test]
    fn fixed_mode_keeps_n_fixed_per_step() {
        let s = NoiseSchedule::new(10).unwrap();
        let c = collect_qc(
            &model(10),
            &s,
            CollectionMode::Fixed { n_fixed: 4 },
            8,
            0,
            1,
        )
        .unwrap();
        assert_eq!(c.len(), 40);
        for t in 1..=10 {
            assert_eq!(c.at_step(t).count(), 4);
        }
        assert!(collect_qc(
            &model(10),
            &s,
            CollectionMode::Fixed { n_fixed: 9 },
            8,
            0,
            1
        )
        .is_err());
    }

    #[test]
    fn ndtc_far_below_zero_gives_empty_set() {
        let s = NoiseSchedule::new(10).unwrap();
        let c = collect_qc(
            &model(10),
            &s,
            CollectionMode::Ndtc { mean: -1000.0 },
            8,
            0,
            1,
        )
        .unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn ndtc_counts_are_reproducible_and_bounded() {
        let s = NoiseSchedule::new(100).unwrap();
        let m = model(100);
        let mode = CollectionMode::Ndtc { mean: 50.0 };
        let a = collect_qc(&m, &s, mode, 8, 0, 5).unwrap();
        let b = collect_qc(&m, &s, mode, 8, 0, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 800);
        // Oracle: replay the count draws independently.
        let mut r = seeded(5, rng::stream::CALIB);
        let d = Normal::new(0.0, 50f64.sqrt()).unwrap();
        let expect: usize = (0..100)
            .map(|_| (50.0 + d.sample(&mut r)).round().clamp(0.0, 8.0) as usize)
            .sum();
        assert_eq!(a.len(), expect);
    }

    #[test]
    fn dc_has_one_record_per_even_step() {
        let s = NoiseSchedule::new(10).unwrap();
        let c = collect_dc(&model(10), &s, false, 8, 0, 3).unwrap();
        assert_eq!(c.time_indices(), vec![2, 4, 6, 8, 10]);
        let odd = NoiseSchedule::new(10).unwrap();
        let mut m = model(10);
        m.step_count = 5;
        assert!(collect_dc(&m, &odd, false, 8, 0, 3).is_err());
    }

    #[test]
    fn deterministic_dc_ignores_the_pick_stream() {
        let s = NoiseSchedule::new(10).unwrap();
        let m = model(10);
        let a = collect_dc(&m, &s, true, 8, 0, 3).unwrap();
        let b = collect_dc(&m, &s, true, 8, 0, 4).unwrap();
        assert!(a.records.iter().all(|r| r.sample_index == 0));
        assert_eq!(a.states(), b.states());
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = NoiseSchedule::new(10).unwrap();
        let c = collect_qc(
            &model(10),
            &s,
            CollectionMode::Fixed { n_fixed: 2 },
            4,
            7,
            9,
        )
        .unwrap();
        let p = dir.path().join("qc.bin");
        c.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..7], b"DPQCAL1");
        assert_eq!(bytes.len(), 15 + 20 * (4 + 16));
        assert_eq!(CalibrationSet::load(&p).unwrap(), c);
        fs::write(&p, b"garbage").unwrap();
        assert!(CalibrationSet::load(&p).is_err());

        let dc = collect_dc(&model(10), &s, false, 4, 7, 9).unwrap();
        assert!(dc.outputs().is_some());
        let p = dir.path().join("dc.bin");
        dc.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 15 + 5 * (4 + 32));
        assert_eq!(CalibrationSet::load(&p).unwrap(), dc);
    }

    #[test]
    fn distillation_targets_replay_two_model_steps() {
        let s = NoiseSchedule::new(10).unwrap();
        let m = model(10);
        let dc = collect_dc(&m, &s, false, 4, 7, 9).unwrap();
        let replay =
            crate::cad::teacher_two_step(&m, &dc.states(), &dc.time_indices(), 1, &s).unwrap();
        assert!(replay.max_abs_diff(&dc.outputs().unwrap()) < 1e-10);
    }
}
