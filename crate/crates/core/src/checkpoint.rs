//! Binary model checkpoints.
//!
//! Layout: the magic `DPQCKPT1`, a version byte, a little-endian `u32`
//! manifest length, a UTF-8 `key=value` manifest (architecture, step count,
//! quantizer parameters as decimal text), then every parameter as
//! little-endian `f64` in declaration order: per block weight then bias,
//! then the time embedding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffusion::{Architecture, DenoiserModel};
use crate::error::{Error, Result};
use crate::quant::{QuantParams, WeightQuantizer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DPQCKPT1";
pub const VERSION: u8 = 1;

fn params_text(p: &QuantParams) -> String {
    format!(
        "{},{},{},{},{}",
        p.bits, p.scale, p.zero_point, p.clip_min, p.clip_max
    )
}

fn parse_params(s: &str) -> Result<QuantParams> {
    let bad = || Error::Format(format!("bad quantizer entry `{s}`"));
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 5 {
        return Err(bad());
    }
    let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
    Ok(QuantParams {
        bits: parts[0].parse().map_err(|_| bad())?,
        scale: f(1)?,
        zero_point: f(2)?,
        clip_min: f(3)?,
        clip_max: f(4)?,
    })
}

/// Manifest text for a model plus caller-supplied extra entries.
pub fn manifest(model: &DenoiserModel, extra: &BTreeMap<String, String>) -> String {
    let arch = model.architecture();
    let mut m = String::new();
    let _ = writeln!(m, "data_dim={}", arch.data_dim);
    let _ = writeln!(m, "width={}", arch.width);
    let _ = writeln!(m, "blocks={}", arch.blocks);
    let _ = writeln!(m, "grid_steps={}", arch.grid_steps);
    let _ = writeln!(m, "step_count={}", model.step_count);
    for (i, b) in model.blocks.iter().enumerate() {
        let _ = writeln!(m, "block.{i}.activation={}", b.activation);
        let wq = match &b.weight_quant {
            None => "none".to_string(),
            Some(q) => q
                .params
                .iter()
                .map(params_text)
                .collect::<Vec<_>>()
                .join(";"),
        };
        let _ = writeln!(m, "block.{i}.weight_quant={wq}");
        let aq = b.act_quant.as_ref().map_or("none".to_string(), params_text);
        let _ = writeln!(m, "block.{i}.act_quant={aq}");
    }
    for (k, v) in extra {
        let _ = writeln!(m, "extra.{k}={v}");
    }
    m
}

pub fn save(model: &DenoiserModel, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    let text = manifest(model, extra);
    let len = u32::try_from(text.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for p in model.parameters() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// A loaded model plus the extra manifest entries it was saved with.
pub fn load(path: &Path) -> Result<(DenoiserModel, BTreeMap<String, String>)> {
    let bytes = fs::read(path)?;
    let head = MAGIC.len() + 1 + 4;
    if bytes.len() < head || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    if bytes[MAGIC.len()] != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            bytes[MAGIC.len()]
        )));
    }
    let len =
        u32::from_le_bytes(bytes[MAGIC.len() + 1..head].try_into().expect("4 bytes")) as usize;
    let text = bytes
        .get(head..head + len)
        .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
    let text =
        std::str::from_utf8(text).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| -> Result<&str> {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest field `{k}` is not an integer")))
    };
    let arch = Architecture {
        data_dim: num("data_dim")?,
        width: num("width")?,
        blocks: num("blocks")?,
        grid_steps: num("grid_steps")?,
    };
    // Build a skeleton with the right shapes, then fill it.
    let mut model = DenoiserModel::new(arch, &mut crate::rng::seeded(0, 0))?;
    model.step_count = num("step_count")?;
    for (i, b) in model.blocks.iter_mut().enumerate() {
        b.activation = get(&format!("block.{i}.activation"))?.parse()?;
        b.weight_quant = match get(&format!("block.{i}.weight_quant"))? {
            "none" => None,
            s => Some(WeightQuantizer {
                params: s.split(';').map(parse_params).collect::<Result<_>>()?,
            }),
        };
        b.act_quant = match get(&format!("block.{i}.act_quant"))? {
            "none" => None,
            s => Some(parse_params(s)?),
        };
    }
    let mut offset = head + len;
    let body_len: usize = model.parameters().iter().map(|t| t.len()).sum::<usize>() * 8;
    if bytes.len() != offset + body_len {
        return Err(Error::Format(format!(
            "checkpoint body holds {} bytes, expected {body_len}",
            bytes.len() - offset
        )));
    }
    for p in model.parameters_mut() {
        let shape = p.shape().to_vec();
        let n = p.len();
        let data = bytes[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *p = Tensor::new(shape, data)?;
        offset += 8 * n;
    }
    let extra = map
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("extra.")
                .map(|k| (k.to_string(), v.to_string()))
        })
        .collect();
    Ok((model, extra))
}
