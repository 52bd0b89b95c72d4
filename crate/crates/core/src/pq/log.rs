use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tau,
    Kappa,
    /// Loss after the last update, evaluated once.
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Tau => "tau",
            Stage::Kappa => "kappa",
            Stage::Final => "final",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Stage::Tau),
            "kappa" => Ok(Stage::Kappa),
            "final" => Ok(Stage::Final),
            other => Err(Error::Format(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockLog {
    pub block: usize,
    /// `(stage, iteration, loss)`; iterations count across both stages.
    pub entries: Vec<(Stage, usize, f64)>,
    /// Iteration of the last stage-one update, if there was a stage one.
    pub transition: Option<usize>,
    /// The stage-one cap was hit without the detector firing.
    pub forced: bool,
    pub final_loss: f64,
}

impl BlockLog {
    pub(crate) fn push_stage(&mut self, stage: Stage, losses: &[f64]) {
        let start = self.entries.len();
        self.entries.extend(
            losses
                .iter()
                .enumerate()
                .map(|(i, &l)| (stage, start + i, l)),
        );
    }

    pub fn losses(&self, stage: Stage) -> impl Iterator<Item = f64> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.0 == stage)
            .map(|e| e.2)
    }
}

/// Per-block reconstruction loss series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbationLog {
    pub blocks: Vec<BlockLog>,
}

impl PerturbationLog {
    pub fn final_losses(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.final_loss).collect()
    }

    /// Writes `block,stage,iteration,loss,transition_flag` rows. Each block
    /// ends with a `final` row holding the post-training loss.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["block", "stage", "iteration", "loss", "transition_flag"])?;
        for b in &self.blocks {
            for &(stage, it, loss) in &b.entries {
                let flag = u8::from(stage == Stage::Tau && b.transition == Some(it));
                w.write_record([
                    b.block.to_string(),
                    stage.to_string(),
                    it.to_string(),
                    format!("{loss:e}"),
                    flag.to_string(),
                ])?;
            }
            w.write_record([
                b.block.to_string(),
                Stage::Final.to_string(),
                b.entries.len().to_string(),
                format!("{:e}", b.final_loss),
                "0".to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut log = PerturbationLog::default();
        for row in r.records() {
            let row = row?;
            let get = |i: usize| {
                row.get(i)
                    .ok_or_else(|| Error::Format("short perturbation row".into()))
            };
            let parse_err = |what: &str| Error::Format(format!("bad {what} in perturbation row"));
            let block: usize = get(0)?.parse().map_err(|_| parse_err("block"))?;
            let stage: Stage = get(1)?.parse()?;
            let it: usize = get(2)?.parse().map_err(|_| parse_err("iteration"))?;
            let loss: f64 = get(3)?.parse().map_err(|_| parse_err("loss"))?;
            let flag = get(4)? == "1";
            if log.blocks.last().is_none_or(|b| b.block != block) {
                log.blocks.push(BlockLog {
                    block,
                    ..BlockLog::default()
                });
            }
            let b = log.blocks.last_mut().expect("just pushed");
            match stage {
                Stage::Final => b.final_loss = loss,
                _ => {
                    if flag {
                        b.transition = Some(it);
                    }
                    b.entries.push((stage, it, loss));
                }
            }
        }
        Ok(log)
    }
}
