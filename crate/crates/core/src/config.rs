//! Flat `section.key = value` configuration with defaults, TOML loading,
//! overrides and content hashing.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cad::{CadConfig, CdTarget, DistanceKind, KdeGrid};
use crate::calib::CollectionMode;
use crate::data::Toy;
use crate::diffusion::{Architecture, LossWeighting, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::pq::{DetectorConfig, HessianWeighting, PqConfig, TransitionPolicy, WeightUpdate};
use crate::quant::{Granularity, RangeMethod};

/// Every recognised key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.kind", "ring"),
    ("data.n", "4096"),
    ("model.width", "64"),
    ("model.blocks", "4"),
    ("schedule.steps", "64"),
    ("schedule.weighting", "uniform"),
    ("train.steps", "20000"),
    ("train.lr", "0.05"),
    ("train.batch", "64"),
    ("calib.qc_mode", "ndtc:32"),
    ("calib.qc_n_max", "8"),
    ("calib.dc_mode", "stochastic"),
    ("calib.dc_n_max", "8"),
    ("pq.tau", "8"),
    ("pq.kappa", "4"),
    ("pq.gamma", "0.05"),
    ("pq.iterations", "2000"),
    ("pq.policy", "momentum"),
    ("pq.period", "auto"),
    ("pq.pi", "0.04"),
    ("pq.beta", "0.9"),
    ("pq.window", "100"),
    ("pq.epsilon", "1e-8"),
    ("pq.update", "shadow"),
    ("pq.granularity", "channel"),
    ("pq.hessian", "identity"),
    ("pq.weight_range", "minmax"),
    ("pq.act_bits", "8"),
    ("pq.act_range", "minmax"),
    ("pq.act_calibrate_tau", "false"),
    ("cad.lambda", "0.1"),
    ("cad.distance", "em"),
    ("cad.bandwidth", "scott"),
    ("cad.bins", "32"),
    ("cad.grid_lo", "-3"),
    ("cad.grid_hi", "3"),
    ("cad.steps", "3000"),
    ("cad.lr", "0.002"),
    ("cad.batch", "64"),
    ("cad.target", "pooled"),
    ("eval.samples", "512"),
    ("eval.seeds", "2"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Integer(i) => out.push((key, i.to_string())),
            toml::Value::Float(f) => out.push((key, f.to_string())),
            toml::Value::Boolean(b) => out.push((key, b.to_string())),
            other => {
                return Err(Error::Config(format!(
                    "`{key}` has unsupported type {}",
                    other.type_str()
                )))
            }
        }
    }
    Ok(())
}

impl Config {
    /// Defaults updated by a TOML document whose tables mirror the key
    /// prefixes (`[pq] tau = 8` sets `pq.tau`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_toml_str(text)?;
        Ok(cfg)
    }

    /// Applies every entry of a TOML document on top of the current values.
    pub fn apply_toml_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad TOML: {e}")))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs)?;
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Sets a known key; unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))
    }

    pub fn parse<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("`{key}` = `{raw}`: {e}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical `key=value` lines of the keys under `prefixes` (all keys
    /// when empty).
    pub fn canonical(&self, prefixes: &[&str]) -> String {
        self.values
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of [`Config::canonical`] as lowercase hex.
    pub fn hash(&self, prefixes: &[&str]) -> String {
        hex::encode(Sha256::digest(self.canonical(prefixes).as_bytes()))
    }

    pub fn dataset(&self) -> Result<Toy> {
        self.parse("data.kind")
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture {
            data_dim: 2,
            width: self.parse("model.width")?,
            blocks: self.parse("model.blocks")?,
            grid_steps: self.parse("schedule.steps")?,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let w: LossWeighting = self.parse("schedule.weighting")?;
        NoiseSchedule::with_weighting(self.parse("schedule.steps")?, w)
    }

    pub fn train(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.parse("train.steps")?,
            lr: self.parse("train.lr")?,
            batch: self.parse("train.batch")?,
            seed,
        })
    }

    pub fn qc_mode(&self) -> Result<CollectionMode> {
        let m: CollectionMode = self.parse("calib.qc_mode")?;
        match m {
            CollectionMode::Ndtc { .. } | CollectionMode::Fixed { .. } => Ok(m),
            _ => Err(Error::Config(format!(
                "calib.qc_mode `{m}` is a distillation mode"
            ))),
        }
    }

    /// Whether the distillation set always takes the first trajectory.
    pub fn dc_deterministic(&self) -> Result<bool> {
        match self.parse("calib.dc_mode")? {
            CollectionMode::Stochastic => Ok(false),
            CollectionMode::Deterministic => Ok(true),
            m => Err(Error::Config(format!(
                "calib.dc_mode `{m}` is a quantization mode"
            ))),
        }
    }

    pub fn pq(&self) -> Result<PqConfig> {
        let iterations: usize = self.parse("pq.iterations")?;
        let policy = match self.get("pq.policy")? {
            "momentum" => TransitionPolicy::Momentum(DetectorConfig {
                beta: self.parse("pq.beta")?,
                threshold: self.parse("pq.pi")?,
                epsilon: self.parse("pq.epsilon")?,
                window: self.parse("pq.window")?,
            }),
            "fixed" => TransitionPolicy::FixedCycle {
                period: match self.get("pq.period")? {
                    "auto" => iterations / 4,
                    _ => self.parse("pq.period")?,
                },
            },
            "immediate" => TransitionPolicy::Immediate,
            other => {
                return Err(Error::Config(format!(
                    "unknown pq.policy `{other}` (momentum|fixed|immediate)"
                )))
            }
        };
        let act_bits = match self.get("pq.act_bits")? {
            "none" => None,
            _ => Some(self.parse("pq.act_bits")?),
        };
        let cfg = PqConfig {
            tau: self.parse("pq.tau")?,
            kappa: self.parse("pq.kappa")?,
            iterations,
            gamma: self.parse("pq.gamma")?,
            update: self.parse::<WeightUpdate>("pq.update")?,
            policy,
            hessian: self.parse::<HessianWeighting>("pq.hessian")?,
            granularity: self.parse::<Granularity>("pq.granularity")?,
            weight_range: self.parse::<RangeMethod>("pq.weight_range")?,
            act_bits,
            act_range: self.parse::<RangeMethod>("pq.act_range")?,
            act_calibrate_tau: self.parse("pq.act_calibrate_tau")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cad(&self, seed: u64) -> Result<CadConfig> {
        let grid = KdeGrid {
            bins: self.parse("cad.bins")?,
            lo: self.parse("cad.grid_lo")?,
            hi: self.parse("cad.grid_hi")?,
            bandwidth: match self.get("cad.bandwidth")? {
                "scott" => None,
                _ => Some(self.parse("cad.bandwidth")?),
            },
        };
        let distance: DistanceKind = self.parse("cad.distance")?;
        let cfg = CadConfig {
            lambda: self.parse("cad.lambda")?,
            distance: distance.with_grid(grid),
            steps: self.parse("cad.steps")?,
            lr: self.parse("cad.lr")?,
            batch: self.parse("cad.batch")?,
            seed,
            target: self.parse::<CdTarget>("cad.target")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_stage_config() {
        let c = Config::default();
        assert_eq!(c.architecture().unwrap(), Architecture::default());
        assert_eq!(c.schedule().unwrap().steps(), 64);
        assert_eq!(c.train(3).unwrap().seed, 3);
        let pq = c.pq().unwrap();
        assert_eq!((pq.tau, pq.kappa, pq.iterations), (8, 4, 2000));
        assert!(matches!(pq.policy, TransitionPolicy::Momentum(d) if d.window == 100));
        let cad = c.cad(1).unwrap();
        assert_eq!(cad.lambda, 0.1);
        assert_eq!(cad.distance, DistanceKind::EarthMover);
        assert!(!c.dc_deterministic().unwrap());
        assert_eq!(c.qc_mode().unwrap(), CollectionMode::Ndtc { mean: 32.0 });
    }

    #[test]
    fn toml_tables_map_to_dotted_keys() {
        let c = Config::from_toml_str("[pq]\ntau = 16\ngamma = 0.5\npolicy = \"fixed\"\n[cad]\ndistance = \"kl\"\nbandwidth = 0.2\n").unwrap();
        assert_eq!(c.get("pq.tau").unwrap(), "16");
        let pq = c.pq().unwrap();
        assert_eq!(pq.gamma, 0.5);
        assert_eq!(pq.policy, TransitionPolicy::FixedCycle { period: 500 });
        match c.cad(0).unwrap().distance {
            DistanceKind::KullbackLeibler(g) => assert_eq!(g.bandwidth, Some(0.2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::from_toml_str("[pq]\nbogus = 1\n").is_err());
        let mut c = Config::default();
        assert!(c.apply_override("pq.kappa").is_err());
        c.apply_override("pq.kappa=3").unwrap();
        assert!(c.pq().is_err());
        c.apply_override("pq.kappa=4").unwrap();
        c.apply_override("cad.bins=4").unwrap();
        assert!(c.cad(0).is_ok(), "bins only matter for density distances");
        c.apply_override("cad.distance=jsd").unwrap();
        assert!(c.cad(0).is_err());
    }

    #[test]
    fn hashes_track_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(&[]), b.hash(&[]));
        assert_eq!(a.hash(&[]).len(), 64);
        b.set("cad.lambda", "0").unwrap();
        assert_ne!(a.hash(&[]), b.hash(&[]));
        assert_eq!(a.hash(&["pq."]), b.hash(&["pq."]));
    }
}
