use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

use dpq_core::calib::{collect_dc, collect_qc, CalibKind, CalibrationSet};
use dpq_core::checkpoint;
use dpq_core::config::{Config, DEFAULTS};
use dpq_core::diffusion::{sample, train_dm, DenoiserModel};
use dpq_core::metrics::perturbation_report;
use dpq_core::pipeline::{
    compare_eval, evaluate, mean_quality, read_eval_csv, rerun, run_pipeline, write_eval_csv,
    Preset, RunManifest, PRESETS,
};
use dpq_core::pq::{progressive_quantize, PerturbationLog};
use dpq_core::{cad, rng};

/// Compress a toy diffusion model with progressive quantization and
/// calibration-assisted distillation.
///
/// Every configuration key is also a flag: `--pq-tau 8`, `--cad-lambda 0`,
/// `--calib-dc-mode deterministic`.
#[derive(Parser, Debug)]
#[command(name = "dpq", version)]
struct Cli {
    /// TOML configuration applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key=value` overrides, applied after every other source.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Log level filter for stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full-precision denoiser.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Collect a quantization (qc) or distillation (dc) calibration set.
    CollectCalib {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kind: CalibKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Progressively quantize a full-precision model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-block reconstruction loss CSV.
        #[arg(long)]
        log_csv: Option<PathBuf>,
    },
    /// Distill a quantized teacher into a half-step student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Write generated samples as `x,y` rows.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints and write an evaluation CSV.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize or compare evaluation CSVs and perturbation logs.
    Report {
        /// Mean quality per checkpoint.
        #[arg(long, conflicts_with_all = ["compare", "perturbation"])]
        eval: Option<PathBuf>,
        /// Reference then candidate evaluation CSV.
        #[arg(long, num_args = 2, value_names = ["REFERENCE", "CANDIDATE"])]
        compare: Option<Vec<PathBuf>>,
        /// Reference then candidate perturbation CSV.
        #[arg(long, num_args = 2, value_names = ["REFERENCE", "CANDIDATE"])]
        perturbation: Option<Vec<PathBuf>>,
    },
    /// Run a named experiment preset, or re-run a recorded manifest.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS), required_unless_present = "rerun")]
        name: Option<String>,
        #[arg(long, default_value = "runs")]
        workdir: PathBuf,
        /// Seeds to run; defaults to `--seed` when given, else the preset's own.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Manifest of an earlier run to execute again.
        #[arg(long, conflicts_with = "name")]
        rerun: Option<PathBuf>,
    },
}

/// Short spellings for the keys most often changed per stage.
const ALIASES: &[(&str, &str)] = &[
    ("pq.policy", "policy"),
    ("cad.distance", "distance"),
    ("cad.lambda", "lambda"),
];

fn config_args() -> Vec<Arg> {
    DEFAULTS
        .iter()
        .map(|(key, default)| {
            // Flags are the keys with `.` and `_` spelled as `-`.
            let flag: &'static str = Box::leak(key.replace(['.', '_'], "-").into_boxed_str());
            let arg = Arg::new(*key)
                .long(flag)
                .value_name("VALUE")
                .help(format!("Configuration key (default {default})"))
                .global(true)
                .action(ArgAction::Set);
            match ALIASES.iter().find(|(k, _)| k == key) {
                Some((_, alias)) => arg.visible_alias(*alias),
                None => arg,
            }
        })
        .collect()
}

/// Invalid configuration supplied on the command line; exits with 2 like
/// other usage errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Defaults, then `base`, the config file, the key flags and `--set`.
fn build_config(cli: &Cli, matches: &ArgMatches, base: Config) -> Result<Config> {
    layer_config(cli, matches, base).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn layer_config(cli: &Cli, matches: &ArgMatches, base: Config) -> Result<Config> {
    let mut cfg = base;
    if let Some(path) = &cli.config {
        cfg.apply_file(path)
            .with_context(|| format!("reading {}", path.display()))?;
    }
    for (key, _) in DEFAULTS {
        if let Some(v) = matches.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    Ok(cfg)
}

fn dataset(cfg: &Config, seed: u64) -> Result<dpq_core::tensor::Tensor> {
    let n: usize = cfg.parse("data.n")?;
    Ok(cfg
        .dataset()?
        .sample(n, &mut rng::seeded(seed, rng::stream::DATA)))
}

fn load_model(path: &Path) -> Result<DenoiserModel> {
    Ok(checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .0)
}

fn load_calib(path: &Path) -> Result<CalibrationSet> {
    CalibrationSet::load(path).with_context(|| format!("loading {}", path.display()))
}

fn provenance(cfg: &Config, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("seed".to_string(), seed.to_string()),
        ("config_hash".to_string(), cfg.hash(&[])),
    ])
}

fn run(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    let seed = cli.seed;
    if let Command::Preset {
        name,
        workdir,
        seeds,
        rerun: manifest,
    } = &cli.command
    {
        let manifest = match manifest {
            Some(path) => {
                let m = RunManifest::read(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                println!("seed={} config_hash={}", join(&m.seeds), m.config_hash());
                rerun(&m, workdir)?
            }
            None => {
                let preset = Preset::named(name.as_deref().expect("required by clap"))?;
                let cfg = build_config(cli, matches, preset.base_config()?)?;
                let seeds = if !seeds.is_empty() {
                    seeds.clone()
                } else if matches.value_source("seed")
                    == Some(clap::parser::ValueSource::CommandLine)
                {
                    vec![seed]
                } else {
                    preset.default_seeds.clone()
                };
                println!("seed={} config_hash={}", join(&seeds), cfg.hash(&[]));
                run_pipeline(&preset, &cfg, &seeds, workdir)?
            }
        };
        let rows = read_eval_csv(&workdir.join(dpq_core::pipeline::RUN_EVAL_FILE))?;
        for (checkpoint, q) in mean_quality(&rows) {
            println!("{checkpoint}\tquality={q:.4}");
        }
        let ran = manifest.stages.iter().filter(|s| !s.reused).count();
        println!("stages run={ran} reused={}", manifest.stages.len() - ran);
        println!("outputs in {}", workdir.display());
        return Ok(());
    }

    let cfg = build_config(cli, matches, Config::default())?;
    println!("seed={seed} config_hash={}", cfg.hash(&[]));
    let sched = cfg.schedule()?;
    match &cli.command {
        Command::Train { out, losses } => {
            let mut model = DenoiserModel::new(
                cfg.architecture()?,
                &mut rng::seeded(seed, rng::stream::INIT),
            )?;
            let trace = train_dm(&mut model, &dataset(&cfg, seed)?, &sched, &cfg.train(seed)?)?;
            if let Some(p) = losses {
                trace.write_csv(p)?;
            }
            checkpoint::save(&model, out, &provenance(&cfg, seed))?;
            println!("final loss (mean of last 500) {:.5}", trace.tail_mean(500));
        }
        Command::CollectCalib { model, kind, out } => {
            let model = load_model(model)?;
            let set = match kind {
                CalibKind::Qc => collect_qc(
                    &model,
                    &sched,
                    cfg.qc_mode()?,
                    cfg.parse("calib.qc_n_max")?,
                    seed,
                    seed,
                )?,
                CalibKind::Dc => collect_dc(
                    &model,
                    &sched,
                    cfg.dc_deterministic()?,
                    cfg.parse("calib.dc_n_max")?,
                    seed,
                    seed,
                )?,
            };
            set.save(out)?;
            println!("{} records", set.len());
        }
        Command::Quantize {
            model,
            calib,
            out,
            log_csv,
        } => {
            let (quantized, log) =
                progressive_quantize(&load_model(model)?, &load_calib(calib)?, &cfg.pq()?)?;
            if let Some(p) = log_csv {
                log.write_csv(p)?;
            }
            checkpoint::save(&quantized, out, &provenance(&cfg, seed))?;
            for b in &log.blocks {
                println!("block {} final loss {:.4e}", b.block, b.final_loss);
            }
        }
        Command::Distill {
            teacher,
            calib,
            out,
            trace,
        } => {
            let teacher = load_model(teacher)?;
            let (student, t) = cad::distill(
                &teacher,
                &load_calib(calib)?,
                &dataset(&cfg, seed)?,
                &sched,
                &cfg.cad(seed)?,
            )?;
            if let Some(p) = trace {
                t.write_csv(p)?;
            }
            checkpoint::save(&student, out, &provenance(&cfg, seed))?;
            println!("student uses {} steps", student.step_count);
        }
        Command::Sample { model, n, out } => {
            let points = sample(&load_model(model)?, &sched, *n, seed)?;
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(["x", "y"])?;
            for i in 0..points.rows() {
                w.write_record(points.row(i).iter().map(|v| format!("{v:.9}")))?;
            }
            w.flush()?;
        }
        Command::Eval { model, out } => {
            let mut rows = Vec::new();
            for path in model {
                rows.extend(evaluate(
                    &load_model(path)?,
                    &cfg,
                    &path.display().to_string(),
                    seed,
                )?);
            }
            write_eval_csv(&rows, out)?;
            for (checkpoint, q) in mean_quality(&rows) {
                println!("{checkpoint}\tquality={q:.4}");
            }
        }
        Command::Report {
            eval,
            compare,
            perturbation,
        } => {
            if let Some(p) = eval {
                for (checkpoint, q) in mean_quality(&read_eval_csv(p)?) {
                    println!("{checkpoint}\tquality={q:.6}");
                }
            } else if let Some(pair) = compare {
                let rows = compare_eval(&read_eval_csv(&pair[0])?, &read_eval_csv(&pair[1])?)?;
                println!("checkpoint\tseed\treference\tcandidate\tdelta");
                for r in rows {
                    println!(
                        "{}\t{}\t{:.6}\t{:.6}\t{:+.6}",
                        r.checkpoint, r.seed, r.reference, r.candidate, r.delta
                    );
                }
            } else if let Some(pair) = perturbation {
                let r = perturbation_report(
                    &PerturbationLog::read_csv(&pair[0])?,
                    &PerturbationLog::read_csv(&pair[1])?,
                )?;
                println!("g_mean_ref={:.6e}", r.g_mean_ref);
                println!("g_mean_cand={:.6e}", r.g_mean_cand);
                println!("delta_pert={:.6e}", r.delta_pert);
                println!("improved_fraction={:.4}", r.improved_fraction);
            } else {
                bail!("report needs one of --eval, --compare or --perturbation");
            }
        }
        Command::Preset { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn join(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn main() -> ExitCode {
    let matches = Cli::command().args(config_args()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
