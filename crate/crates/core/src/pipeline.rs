//! Named experiment presets run as cached, content-addressed stages.
//!
//! Every stage of a run writes into `seed-<s>/<stage>-<hash>/` under the
//! work directory, where the hash covers the stage's configuration keys,
//! the seed and the hashes of its inputs. A `done` marker is written last;
//! stages with a marker are loaded instead of recomputed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::cad::distill;
use crate::calib::{collect_dc, collect_qc, CalibrationSet};
use crate::checkpoint;
use crate::config::Config;
use crate::diffusion::{sample, train_dm, DenoiserModel};
use crate::error::{Error, Result};
use crate::metrics::{gbops, geometric_mean, perturbation_report, sample_quality};
use crate::pq::{progressive_quantize, PerturbationLog};
use crate::rng;

const DONE_MARKER: &str = "done";
const MODEL_FILE: &str = "model.ckpt";
const CALIB_FILE: &str = "calib.bin";
const EVAL_FILE: &str = "eval.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageKind {
    TrainFp,
    CollectQc,
    CollectDc,
    Pq,
    Distill,
    Eval,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::TrainFp => "train_fp",
            StageKind::CollectQc => "collect_qc",
            StageKind::CollectDc => "collect_dc",
            StageKind::Pq => "pq",
            StageKind::Distill => "distill",
            StageKind::Eval => "eval",
        }
    }

    /// Configuration keys whose values feed the stage hash.
    fn config_prefixes(self) -> &'static [&'static str] {
        match self {
            StageKind::TrainFp => &["data.", "model.", "schedule.", "train."],
            StageKind::CollectQc => &["calib.qc_"],
            StageKind::CollectDc => &["calib.dc_"],
            StageKind::Pq => &["pq."],
            StageKind::Distill => &["cad."],
            StageKind::Eval => &["eval.", "data.kind"],
        }
    }

    fn inputs(self) -> &'static [StageKind] {
        match self {
            StageKind::TrainFp => &[],
            StageKind::CollectQc | StageKind::CollectDc => &[StageKind::TrainFp],
            StageKind::Pq => &[StageKind::TrainFp, StageKind::CollectQc],
            StageKind::Distill => &[StageKind::TrainFp, StageKind::CollectDc, StageKind::Pq],
            StageKind::Eval => &[StageKind::TrainFp],
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            StageKind::TrainFp,
            StageKind::CollectQc,
            StageKind::CollectDc,
            StageKind::Pq,
            StageKind::Distill,
            StageKind::Eval,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// One configuration variant inside a preset.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    /// Applied on top of the run configuration.
    pub overrides: Vec<(String, String)>,
    pub stages: Vec<StageKind>,
}

impl Arm {
    fn new(name: &str, overrides: &[(&str, &str)], stages: &[StageKind]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            stages: stages.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].contains(s) {
                return Err(Error::Config(format!(
                    "arm `{}` repeats stage {s}",
                    self.name
                )));
            }
            for dep in s.inputs() {
                if !self.stages[..i].contains(dep) {
                    return Err(Error::Config(format!(
                        "arm `{}`: stage {s} needs {dep} before it",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    /// Applied to the defaults before any user configuration.
    pub overrides: Vec<(String, String)>,
    pub arms: Vec<Arm>,
    pub default_seeds: Vec<u64>,
}

pub const PRESETS: &[&str] = &[
    "fp_baseline",
    "pq_vs_immediate",
    "policy_sweep",
    "distance_ablation",
    "dc_stochastic_vs_deterministic",
    "full_dpq",
    "table1_direction",
];

impl Preset {
    pub fn named(name: &str) -> Result<Self> {
        use StageKind::*;
        let fp = [TrainFp, Eval];
        let quantized = [TrainFp, CollectQc, Pq, Eval];
        let distilled = [TrainFp, CollectQc, CollectDc, Pq, Distill, Eval];
        let (overrides, arms, seeds): (&[(&str, &str)], Vec<Arm>, Vec<u64>) = match name {
            "fp_baseline" => (&[], vec![Arm::new("fp", &[], &fp)], vec![0]),
            "pq_vs_immediate" => (
                // The per-channel default quantizes the two-input first
                // layer losslessly, which hides any policy difference there.
                &[("pq.granularity", "tensor")],
                vec![
                    Arm::new("immediate", &[("pq.policy", "immediate")], &quantized),
                    Arm::new("momentum", &[("pq.policy", "momentum")], &quantized),
                ],
                vec![0, 1, 2],
            ),
            "policy_sweep" => (
                &[],
                ["immediate", "fixed", "momentum"]
                    .iter()
                    .map(|p| Arm::new(p, &[("pq.policy", p)], &quantized))
                    .collect(),
                vec![0, 1, 2],
            ),
            "distance_ablation" => (
                &[],
                ["em", "kl", "jsd", "cosine"]
                    .iter()
                    .map(|d| Arm::new(d, &[("cad.distance", d)], &distilled))
                    .collect(),
                vec![0, 1, 2],
            ),
            "dc_stochastic_vs_deterministic" => (
                &[],
                ["stochastic", "deterministic"]
                    .iter()
                    .map(|m| Arm::new(m, &[("calib.dc_mode", m)], &distilled))
                    .collect(),
                vec![0, 1, 2],
            ),
            "full_dpq" => (
                &[],
                vec![Arm::new("fp", &[], &fp), Arm::new("dpq", &[], &distilled)],
                vec![0],
            ),
            "table1_direction" => (
                &[],
                vec![
                    Arm::new("immediate", &[("pq.policy", "immediate")], &quantized),
                    Arm::new("momentum", &[("pq.policy", "momentum")], &quantized),
                    Arm::new("distill_kd", &[("cad.lambda", "0")], &distilled),
                    Arm::new("distill_cad", &[], &distilled),
                ],
                vec![0, 1, 2],
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let preset = Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            arms,
            default_seeds: seeds,
        };
        preset.validate()?;
        Ok(preset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Config(format!("preset `{}` has no arms", self.name)));
        }
        self.arms.iter().try_for_each(Arm::validate)
    }

    /// Defaults plus the preset's own overrides; user settings go on top.
    pub fn base_config(&self) -> Result<Config> {
        let mut cfg = Config::default();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// One row of an evaluation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub checkpoint: String,
    pub seed: u64,
    pub steps: usize,
    pub w_bits: u32,
    pub a_bits: u32,
    pub quality: f64,
    pub gbops_step: f64,
    pub gbops_traj: f64,
    pub size_bytes: f64,
}

const EVAL_HEADER: [&str; 9] = [
    "checkpoint",
    "seed",
    "steps",
    "w_bits",
    "a_bits",
    "quality",
    "gbops_step",
    "gbops_traj",
    "size_bytes",
];

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_HEADER)?;
    for r in rows {
        w.write_record([
            r.checkpoint.clone(),
            r.seed.to_string(),
            r.steps.to_string(),
            r.w_bits.to_string(),
            r.a_bits.to_string(),
            format!("{:.6}", r.quality),
            format!("{:.9e}", r.gbops_step),
            format!("{:.9e}", r.gbops_traj),
            format!("{}", r.size_bytes),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(EVAL_HEADER) {
        return Err(Error::Format(format!(
            "{} is not an evaluation CSV",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Format(format!("short row in {}", path.display())))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|e| Error::Format(format!("column {}: {e}", EVAL_HEADER[i])))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)?
                .parse()
                .map_err(|e| Error::Format(format!("column {}: {e}", EVAL_HEADER[i])))
        };
        rows.push(EvalRow {
            checkpoint: field(0)?.to_string(),
            seed: int(1)?,
            steps: int(2)? as usize,
            w_bits: int(3)? as u32,
            a_bits: int(4)? as u32,
            quality: num(5)?,
            gbops_step: num(6)?,
            gbops_traj: num(7)?,
            size_bytes: num(8)?,
        });
    }
    Ok(rows)
}

/// Weight and activation bits of a model, 32 where unquantized.
pub fn model_bits(model: &DenoiserModel) -> (u32, u32) {
    let w = model
        .blocks
        .iter()
        .filter_map(|b| b.weight_quant.as_ref())
        .flat_map(|q| q.params.iter().map(|p| p.bits))
        .max()
        .unwrap_or(32);
    let a = model
        .blocks
        .iter()
        .filter_map(|b| b.act_quant.as_ref().map(|p| p.bits))
        .max()
        .unwrap_or(32);
    (w, a)
}

/// Sampling seed of the `k`-th evaluation draw of a run seed.
pub fn eval_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(1_000).wrapping_add(k)
}

/// Samples `eval.samples` points for each of `eval.seeds` sampling seeds
/// and scores them against fresh draws of the data distribution.
pub fn evaluate(
    model: &DenoiserModel,
    cfg: &Config,
    label: &str,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let n: usize = cfg.parse("eval.samples")?;
    let draws: u64 = cfg.parse("eval.seeds")?;
    let data = cfg.dataset()?;
    let sched = cfg.schedule()?;
    let (w_bits, a_bits) = model_bits(model);
    let cost = gbops(&model.architecture(), w_bits, a_bits, model.step_count)?;
    (0..draws)
        .map(|k| {
            let s = eval_seed(seed, k);
            let generated = sample(model, &sched, n, s)?;
            let reference = data.sample(n, &mut rng::seeded(s, rng::stream::HELDOUT));
            Ok(EvalRow {
                checkpoint: label.to_string(),
                seed: s,
                steps: model.step_count,
                w_bits,
                a_bits,
                quality: sample_quality(&generated, &reference, s)?,
                gbops_step: cost.gbops_per_step,
                gbops_traj: cost.gbops_trajectory,
                size_bytes: cost.model_size_bytes,
            })
        })
        .collect()
}

/// Mean quality per checkpoint label, in first-appearance order.
pub fn mean_quality(rows: &[EvalRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|e| e.0 == r.checkpoint) {
            Some(e) => {
                e.1 += r.quality;
                e.2 += 1;
            }
            None => out.push((r.checkpoint.clone(), r.quality, 1)),
        }
    }
    out.into_iter().map(|(c, s, n)| (c, s / n as f64)).collect()
}

/// Rows of two evaluation CSVs matched on `(checkpoint, seed)` with the
/// quality change `candidate − reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub checkpoint: String,
    pub seed: u64,
    pub reference: f64,
    pub candidate: f64,
    pub delta: f64,
}

pub fn compare_eval(reference: &[EvalRow], candidate: &[EvalRow]) -> Result<Vec<ComparisonRow>> {
    let out: Vec<_> = candidate
        .iter()
        .filter_map(|c| {
            reference
                .iter()
                .find(|r| r.checkpoint == c.checkpoint && r.seed == c.seed)
                .map(|r| ComparisonRow {
                    checkpoint: c.checkpoint.clone(),
                    seed: c.seed,
                    reference: r.quality,
                    candidate: c.quality,
                    delta: c.quality - r.quality,
                })
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Contract(
            "the two evaluation files share no (checkpoint, seed) rows".into(),
        ));
    }
    Ok(out)
}

/// Bookkeeping of one executed or reused stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub seed: u64,
    pub arm: String,
    pub stage: StageKind,
    pub hash: String,
    pub wall_seconds: f64,
    pub reused: bool,
    /// Directory relative to the work directory.
    pub dir: PathBuf,
}

/// Everything needed to run a preset again: the preset name, the seeds and
/// the full effective configuration, plus what each stage produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub config: Config,
    pub stages: Vec<StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RUN_EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

impl RunManifest {
    pub fn config_hash(&self) -> String {
        self.config.hash(&[])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("preset={}\n", self.preset);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        s += &format!("seeds={}\n", seeds.join(","));
        s += &format!("config_hash={}\n", self.config_hash());
        for (k, v) in self.config.entries() {
            s += &format!("config.{k}={v}\n");
        }
        for r in &self.stages {
            s += &format!(
                "stage={}\t{}\t{}\t{}\t{:.3}\t{}\t{}\n",
                r.seed,
                r.arm,
                r.stage,
                r.hash,
                r.wall_seconds,
                if r.reused { "reused" } else { "ran" },
                r.dir.display()
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad manifest line `{line}`"));
        let mut preset = None;
        let mut seeds = Vec::new();
        let mut hash = None;
        let mut config = Config::default();
        let mut stages = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "preset" => preset = Some(v.to_string()),
                "seeds" => {
                    seeds = v
                        .split(',')
                        .map(|s| s.parse().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?
                }
                "config_hash" => hash = Some(v.to_string()),
                "stage" => {
                    let f: Vec<&str> = v.split('\t').collect();
                    if f.len() != 7 {
                        return Err(bad(line));
                    }
                    stages.push(StageRecord {
                        seed: f[0].parse().map_err(|_| bad(line))?,
                        arm: f[1].to_string(),
                        stage: f[2].parse()?,
                        hash: f[3].to_string(),
                        wall_seconds: f[4].parse().map_err(|_| bad(line))?,
                        reused: f[5] == "reused",
                        dir: PathBuf::from(f[6]),
                    });
                }
                _ => match k.strip_prefix("config.") {
                    Some(key) => config.set(key, v)?,
                    None => return Err(bad(line)),
                },
            }
        }
        let manifest = Self {
            preset: preset.ok_or_else(|| Error::Format("manifest has no preset".into()))?,
            seeds,
            config,
            stages,
        };
        if hash.as_deref() != Some(manifest.config_hash().as_str()) {
            return Err(Error::Format(
                "manifest configuration hash does not match its entries".into(),
            ));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Artifacts of one arm at one seed, filled in stage by stage.
#[derive(Default)]
struct ArmState {
    hashes: BTreeMap<StageKind, String>,
    fp: Option<DenoiserModel>,
    qc: Option<CalibrationSet>,
    dc: Option<CalibrationSet>,
    quantized: Option<DenoiserModel>,
    student: Option<DenoiserModel>,
    pq_log: Option<PerturbationLog>,
    eval: Vec<EvalRow>,
}

impl ArmState {
    /// The most processed model so far.
    fn final_model(&self) -> Option<&DenoiserModel> {
        self.student
            .as_ref()
            .or(self.quantized.as_ref())
            .or(self.fp.as_ref())
    }
}

fn stage_hash(stage: StageKind, cfg: &Config, seed: u64, state: &ArmState) -> String {
    let mut h = Sha256::new();
    h.update(format!("{stage}\nseed={seed}\n"));
    h.update(cfg.canonical(stage.config_prefixes()));
    for dep in stage.inputs() {
        h.update(format!("{dep}={}\n", state.hashes[dep]));
    }
    if stage == StageKind::Eval {
        // Evaluation follows whichever model the arm ended on.
        for dep in [StageKind::Pq, StageKind::Distill] {
            if let Some(hash) = state.hashes.get(&dep) {
                h.update(format!("{dep}={hash}\n"));
            }
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn missing(what: &str) -> Error {
    Error::Contract(format!("{what} is not available"))
}

fn run_stage(
    stage: StageKind,
    cfg: &Config,
    seed: u64,
    dir: &Path,
    cached: bool,
    st: &mut ArmState,
) -> Result<()> {
    let sched = cfg.schedule()?;
    let model_path = dir.join(MODEL_FILE);
    let calib_path = dir.join(CALIB_FILE);
    let dataset = || -> Result<_> {
        Ok(cfg.dataset()?.sample(
            cfg.parse("data.n")?,
            &mut rng::seeded(seed, rng::stream::DATA),
        ))
    };
    match stage {
        StageKind::TrainFp => {
            if !cached {
                let mut model = DenoiserModel::new(
                    cfg.architecture()?,
                    &mut rng::seeded(seed, rng::stream::INIT),
                )?;
                let trace = train_dm(&mut model, &dataset()?, &sched, &cfg.train(seed)?)?;
                trace.write_csv(&dir.join("losses.csv"))?;
                checkpoint::save(&model, &model_path, &BTreeMap::new())?;
            }
            st.fp = Some(checkpoint::load(&model_path)?.0);
        }
        StageKind::CollectQc | StageKind::CollectDc => {
            if !cached {
                let fp = st
                    .fp
                    .as_ref()
                    .ok_or_else(|| missing("the full-precision model"))?;
                let set = if stage == StageKind::CollectQc {
                    collect_qc(
                        fp,
                        &sched,
                        cfg.qc_mode()?,
                        cfg.parse("calib.qc_n_max")?,
                        seed,
                        seed,
                    )?
                } else {
                    collect_dc(
                        fp,
                        &sched,
                        cfg.dc_deterministic()?,
                        cfg.parse("calib.dc_n_max")?,
                        seed,
                        seed,
                    )?
                };
                set.save(&calib_path)?;
            }
            let set = CalibrationSet::load(&calib_path)?;
            if stage == StageKind::CollectQc {
                st.qc = Some(set);
            } else {
                st.dc = Some(set);
            }
        }
        StageKind::Pq => {
            let log_path = dir.join("perturbation.csv");
            if !cached {
                let fp = st
                    .fp
                    .as_ref()
                    .ok_or_else(|| missing("the full-precision model"))?;
                let qc = st
                    .qc
                    .as_ref()
                    .ok_or_else(|| missing("the quantization calibration set"))?;
                let (model, log) = progressive_quantize(fp, qc, &cfg.pq()?)?;
                log.write_csv(&log_path)?;
                checkpoint::save(&model, &model_path, &BTreeMap::new())?;
            }
            st.quantized = Some(checkpoint::load(&model_path)?.0);
            st.pq_log = Some(PerturbationLog::read_csv(&log_path)?);
        }
        StageKind::Distill => {
            if !cached {
                let teacher = st
                    .quantized
                    .as_ref()
                    .ok_or_else(|| missing("the quantized model"))?;
                let dc = st
                    .dc
                    .as_ref()
                    .ok_or_else(|| missing("the distillation calibration set"))?;
                let (student, trace) = distill(teacher, dc, &dataset()?, &sched, &cfg.cad(seed)?)?;
                trace.write_csv(&dir.join("trace.csv"))?;
                checkpoint::save(&student, &model_path, &BTreeMap::new())?;
            }
            st.student = Some(checkpoint::load(&model_path)?.0);
        }
        StageKind::Eval => unreachable!("evaluation is labelled by arm and handled by the caller"),
    }
    Ok(())
}

/// Runs every arm of `preset` at every seed under `workdir`, reusing
/// finished stages, and writes `eval.csv`, `summary.csv` and the manifest
/// there. `cfg` is the full effective configuration before arm overrides.
pub fn run_pipeline(
    preset: &Preset,
    cfg: &Config,
    seeds: &[u64],
    workdir: &Path,
) -> Result<RunManifest> {
    preset.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    fs::create_dir_all(workdir)?;
    let mut manifest = RunManifest {
        preset: preset.name.clone(),
        seeds: seeds.to_vec(),
        config: cfg.clone(),
        stages: Vec::new(),
    };
    let mut eval_rows = Vec::new();
    let mut summary = Vec::new();
    for &seed in seeds {
        for arm in &preset.arms {
            let mut arm_cfg = cfg.clone();
            for (k, v) in &arm.overrides {
                arm_cfg.set(k, v)?;
            }
            let mut st = ArmState::default();
            for &stage in &arm.stages {
                let hash = stage_hash(stage, &arm_cfg, seed, &st);
                let rel = PathBuf::from(format!("seed-{seed}")).join(format!("{stage}-{hash}"));
                let dir = workdir.join(&rel);
                let cached = dir.join(DONE_MARKER).exists();
                fs::create_dir_all(&dir)?;
                let start = Instant::now();
                let result = if stage == StageKind::Eval {
                    let label = format!("{}/seed-{seed}", arm.name);
                    let path = dir.join(EVAL_FILE);
                    (|| {
                        if !cached {
                            let model = st
                                .final_model()
                                .ok_or_else(|| missing("a model to evaluate"))?;
                            write_eval_csv(&evaluate(model, &arm_cfg, &label, seed)?, &path)?;
                        }
                        st.eval = read_eval_csv(&path)?;
                        Ok(())
                    })()
                } else {
                    run_stage(stage, &arm_cfg, seed, &dir, cached, &mut st)
                };
                result.map_err(|e| Error::Stage {
                    stage: format!("{stage} (arm {}, seed {seed})", arm.name),
                    source: Box::new(e),
                })?;
                if !cached {
                    fs::write(dir.join(DONE_MARKER), &hash)?;
                }
                log::info!(
                    "{stage} for {} at seed {seed}: {}",
                    arm.name,
                    if cached { "reused" } else { "done" }
                );
                manifest.stages.push(StageRecord {
                    seed,
                    arm: arm.name.clone(),
                    stage,
                    hash: hash.clone(),
                    wall_seconds: start.elapsed().as_secs_f64(),
                    reused: cached,
                    dir: rel,
                });
                st.hashes.insert(stage, hash);
            }
            let mean = if st.eval.is_empty() {
                f64::NAN
            } else {
                st.eval.iter().map(|r| r.quality).sum::<f64>() / st.eval.len() as f64
            };
            let pert = st
                .pq_log
                .as_ref()
                .map(|l| geometric_mean(&l.final_losses()));
            let model = st.final_model().ok_or_else(|| missing("a model"))?;
            let (w, a) = model_bits(model);
            summary.push([
                arm.name.clone(),
                seed.to_string(),
                model.step_count.to_string(),
                w.to_string(),
                a.to_string(),
                format!("{mean:.6}"),
                pert.map_or(String::new(), |p| format!("{p:.6e}")),
            ]);
            eval_rows.append(&mut st.eval);
        }
    }
    write_eval_csv(&eval_rows, &workdir.join(RUN_EVAL_FILE))?;
    let mut w = csv::Writer::from_path(workdir.join(SUMMARY_FILE))?;
    w.write_record([
        "arm",
        "seed",
        "steps",
        "w_bits",
        "a_bits",
        "mean_quality",
        "pert_gmean",
    ])?;
    for row in &summary {
        w.write_record(row)?;
    }
    w.flush()?;
    manifest.write(&workdir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Runs the preset recorded in a manifest again with the same seeds and
/// configuration.
pub fn rerun(manifest: &RunManifest, workdir: &Path) -> Result<RunManifest> {
    let preset = Preset::named(&manifest.preset)?;
    run_pipeline(&preset, &manifest.config, &manifest.seeds, workdir)
}

/// Perturbation reports of every quantized arm against `reference_arm` at
/// each seed, read from the stage directories of a finished run.
pub fn perturbation_reports(
    manifest: &RunManifest,
    workdir: &Path,
    reference_arm: &str,
) -> Result<Vec<(u64, String, crate::metrics::PerturbationReport)>> {
    let log_of = |seed: u64, arm: &str| -> Option<Result<PerturbationLog>> {
        manifest
            .stages
            .iter()
            .find(|r| r.seed == seed && r.arm == arm && r.stage == StageKind::Pq)
            .map(|r| PerturbationLog::read_csv(&workdir.join(&r.dir).join("perturbation.csv")))
    };
    let mut out = Vec::new();
    for &seed in &manifest.seeds {
        let reference = log_of(seed, reference_arm).ok_or_else(|| {
            Error::Contract(format!("no quantization stage for arm `{reference_arm}`"))
        })??;
        let mut arms: Vec<&str> = manifest.stages.iter().map(|r| r.arm.as_str()).collect();
        arms.dedup();
        for arm in arms.into_iter().filter(|a| *a != reference_arm) {
            if let Some(log) = log_of(seed, arm) {
                out.push((
                    seed,
                    arm.to_string(),
                    perturbation_report(&reference, &log?)?,
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut c = Config::default();
        for (k, v) in [
            ("data.n", "256"),
            ("model.width", "8"),
            ("model.blocks", "3"),
            ("schedule.steps", "8"),
            ("train.steps", "50"),
            ("calib.qc_n_max", "2"),
            ("calib.dc_n_max", "2"),
            ("pq.iterations", "20"),
            ("pq.window", "5"),
            ("cad.steps", "10"),
            ("cad.batch", "16"),
            ("eval.samples", "32"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn every_preset_is_well_formed() {
        for name in PRESETS {
            let p = Preset::named(name).unwrap();
            p.base_config().unwrap();
            for arm in &p.arms {
                let mut c = p.base_config().unwrap();
                for (k, v) in &arm.overrides {
                    c.set(k, v).unwrap();
                }
            }
        }
        assert!(Preset::named("nope").is_err());
    }

    #[test]
    fn stages_out_of_order_are_rejected() {
        let arm = Arm::new("bad", &[], &[StageKind::TrainFp, StageKind::Pq]);
        assert!(arm.validate().is_err());
    }

    #[test]
    fn reruns_reuse_stages_and_reproduce_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let preset = Preset::named("full_dpq").unwrap();
        let first = run_pipeline(&preset, &tiny(), &[3], dir.path()).unwrap();
        assert!(first
            .stages
            .iter()
            .all(|r| !r.reused || r.stage == StageKind::TrainFp));
        let eval = fs::read(dir.path().join(RUN_EVAL_FILE)).unwrap();
        let second = rerun(
            &RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(),
            dir.path(),
        )
        .unwrap();
        assert!(second.stages.iter().all(|r| r.reused));
        assert_eq!(fs::read(dir.path().join(RUN_EVAL_FILE)).unwrap(), eval);
        let rows = read_eval_csv(&dir.path().join(RUN_EVAL_FILE)).unwrap();
        let fp = rows
            .iter()
            .find(|r| r.checkpoint.starts_with("fp/"))
            .unwrap();
        let dpq = rows
            .iter()
            .find(|r| r.checkpoint.starts_with("dpq/"))
            .unwrap();
        assert_eq!((fp.steps, dpq.steps), (8, 4));
        assert_eq!((dpq.w_bits, dpq.a_bits), (4, 8));
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = RunManifest {
            preset: "fp_baseline".into(),
            seeds: vec![1, 2],
            config: tiny(),
            stages: vec![StageRecord {
                seed: 1,
                arm: "fp".into(),
                stage: StageKind::TrainFp,
                hash: "abc".into(),
                wall_seconds: 1.5,
                reused: false,
                dir: PathBuf::from("seed-1/train_fp-abc"),
            }],
        };
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        let tampered = m
            .to_text()
            .replace("config.model.width=8", "config.model.width=9");
        assert!(RunManifest::parse(&tampered).is_err());
    }

    #[test]
    fn comparison_matches_hand_subtraction() {
        let row = |c: &str, s, q| EvalRow {
            checkpoint: c.into(),
            seed: s,
            steps: 8,
            w_bits: 32,
            a_bits: 32,
            quality: q,
            gbops_step: 0.0,
            gbops_traj: 0.0,
            size_bytes: 0.0,
        };
        let a = [row("x", 0, 0.5), row("x", 1, 0.25)];
        let b = [row("x", 1, 0.125), row("y", 0, 1.0)];
        let cmp = compare_eval(&a, &b).unwrap();
        assert_eq!(cmp.len(), 1);
        assert_eq!(cmp[0].delta, 0.125 - 0.25);
        assert_eq!(mean_quality(&a), vec![("x".to_string(), 0.375)]);
    }
}
