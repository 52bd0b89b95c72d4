//! Uniform affine fake-quantization.
//!
//! A quantizer maps reals onto `2^b` evenly spaced levels spanning
//! `[clip_min, clip_max]` and returns the dequantized value, so quantized
//! models still run in `f64`. Rounding is half-to-even.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Half-width used to widen a degenerate (constant) range.
pub const DEGENERATE_HALF_WIDTH: f64 = 1e-8;

/// Supported bit-widths.
pub const SUPPORTED_BITS: [u32; 4] = [2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl QuantParams {
    pub fn from_range(bits: u32, clip_min: f64, clip_max: f64) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::Config(format!(
                "unsupported bit-width {bits} (expected one of {SUPPORTED_BITS:?})"
            )));
        }
        if !(clip_max > clip_min) || !clip_min.is_finite() || !clip_max.is_finite() {
            return Err(Error::Contract(format!(
                "invalid clip range [{clip_min}, {clip_max}]"
            )));
        }
        let scale = (clip_max - clip_min) / ((1u64 << bits) - 1) as f64;
        Ok(Self {
            bits,
            scale,
            zero_point: -clip_min / scale,
            clip_min,
            clip_max,
        })
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn in_range(&self, v: f64) -> bool {
        v >= self.clip_min && v <= self.clip_max
    }

    /// Grid index of `v` after clipping.
    pub fn level(&self, v: f64) -> u64 {
        let c = v.clamp(self.clip_min, self.clip_max);
        let k = ((c - self.clip_min) / self.scale).round_ties_even();
        (k.max(0.0) as u64).min(self.levels() - 1)
    }

    pub fn dequantize_level(&self, k: u64) -> f64 {
        self.clip_min + k as f64 * self.scale
    }

    pub fn quantize_value(&self, v: f64) -> f64 {
        self.dequantize_level(self.level(v))
    }
}

/// Clip-range policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RangeMethod {
    MinMax,
    /// Symmetric percentiles: `[p, 100 - p]`.
    Percentile(f64),
}

impl fmt::Display for RangeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangeMethod::MinMax => write!(f, "minmax"),
            RangeMethod::Percentile(p) => write!(f, "percentile:{p}"),
        }
    }
}

impl FromStr for RangeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "minmax" {
            return Ok(RangeMethod::MinMax);
        }
        if let Some(p) = s.strip_prefix("percentile:") {
            let p: f64 = p
                .parse()
                .map_err(|_| Error::Config(format!("bad percentile in `{s}`")))?;
            if !(0.0..50.0).contains(&p) {
                return Err(Error::Config(format!("percentile {p} outside [0, 50)")));
            }
            return Ok(RangeMethod::Percentile(p));
        }
        Err(Error::Config(format!(
            "unknown range method `{s}` (minmax|percentile:<p>)"
        )))
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn fit_quant_params(values: &[f64], bits: u32, method: RangeMethod) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::Contract(
            "cannot fit a quantizer to no values".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite value in quantizer fit".into()));
    }
    let (mut lo, mut hi) = match method {
        RangeMethod::MinMax => values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            }),
        RangeMethod::Percentile(p) => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            (
                percentile_sorted(&sorted, p),
                percentile_sorted(&sorted, 100.0 - p),
            )
        }
    };
    if hi - lo <= 0.0 {
        let c = 0.5 * (lo + hi);
        lo = c - DEGENERATE_HALF_WIDTH;
        hi = c + DEGENERATE_HALF_WIDTH;
    }
    QuantParams::from_range(bits, lo, hi)
}

pub fn quantize(values: &Tensor, params: &QuantParams) -> Tensor {
    values.map(|v| params.quantize_value(v))
}

/// Fake-quantization with a straight-through gradient: the backward pass
/// forwards the incoming gradient where the input lies inside the clip
/// range and zeroes it elsewhere.
pub fn ste_quantize(g: &mut Graph, values: Var, params: &QuantParams) -> Var {
    let src = g.value(values);
    let out = quantize(src, params);
    let mask: Vec<f64> = src
        .data()
        .iter()
        .map(|&v| if params.in_range(v) { 1.0 } else { 0.0 })
        .collect();
    g.custom(
        &[values],
        out,
        Box::new(move |grad| vec![grad.iter().zip(&mask).map(|(g, m)| g * m).collect()]),
    )
}

/// Range granularity for weight matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Granularity {
    /// One range per output channel (matrix column).
    #[default]
    PerChannel,
    PerTensor,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(Granularity::PerChannel),
            "tensor" => Ok(Granularity::PerTensor),
            other => Err(Error::Config(format!(
                "unknown granularity `{other}` (channel|tensor)"
            ))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerChannel => "channel",
            Granularity::PerTensor => "tensor",
        })
    }
}

/// Quantizer for an `[in, out]` weight matrix: either one parameter set
/// per output column or a single shared one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightQuantizer {
    pub params: Vec<QuantParams>,
}

impl WeightQuantizer {
    pub fn fit(
        weight: &Tensor,
        bits: u32,
        granularity: Granularity,
        method: RangeMethod,
    ) -> Result<Self> {
        let params = match granularity {
            Granularity::PerTensor => vec![fit_quant_params(weight.data(), bits, method)?],
            Granularity::PerChannel => {
                let (rows, cols) = (weight.rows(), weight.cols());
                (0..cols)
                    .map(|c| {
                        let column: Vec<f64> = (0..rows).map(|r| weight.get(r, c)).collect();
                        fit_quant_params(&column, bits, method)
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self { params })
    }

    pub fn bits(&self) -> u32 {
        self.params[0].bits
    }

    fn params_for(&self, col: usize) -> &QuantParams {
        if self.params.len() == 1 {
            &self.params[0]
        } else {
            &self.params[col]
        }
    }

    fn check(&self, weight: &Tensor) -> Result<()> {
        if self.params.len() != 1 && self.params.len() != weight.cols() {
            return Err(Error::shape(
                "weight quantizer",
                format!(
                    "{} channel ranges for {:?}",
                    self.params.len(),
                    weight.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn quantize(&self, weight: &Tensor) -> Result<Tensor> {
        self.check(weight)?;
        let cols = weight.cols();
        let mut out = weight.detached();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.params_for(i % cols).quantize_value(*v);
        }
        Ok(out)
    }

    /// Graph-recorded version of [`WeightQuantizer::quantize`] with the
    /// straight-through gradient rule applied per channel.
    pub fn ste(&self, g: &mut Graph, weight: Var) -> Result<Var> {
        let src = g.value(weight);
        self.check(src)?;
        let out = self.quantize(src)?;
        let cols = src.cols();
        let mask: Vec<f64> = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from(u8::from(self.params_for(i % cols).in_range(v))))
            .collect();
        Ok(g.custom(
            &[weight],
            out,
            Box::new(move |grad| vec![grad.iter().zip(&mask).map(|(g, m)| g * m).collect()]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_range_eight_bit_scale() {
        let vals: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 * 0.01).collect();
        let p = fit_quant_params(&vals, 8, RangeMethod::MinMax).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.levels(), 256);
    }

    #[test]
    fn constant_tensor_gets_widened_range() {
        let p = fit_quant_params(&[5.0; 10], 8, RangeMethod::MinMax).unwrap();
        assert_eq!(p.clip_min, 5.0 - 1e-8);
        assert_eq!(p.clip_max, 5.0 + 1e-8);
    }

    #[test]
    fn empty_and_bad_bits_are_rejected() {
        assert!(fit_quant_params(&[], 8, RangeMethod::MinMax).is_err());
        assert!(fit_quant_params(&[0.0, 1.0], 3, RangeMethod::MinMax).is_err());
    }

    #[test]
    fn grid_values_are_fixed_points() {
        let p = QuantParams::from_range(4, -1.0, 2.0).unwrap();
        for k in 0..p.levels() {
            let v = p.dequantize_level(k);
            assert_eq!(p.quantize_value(v), v);
        }
    }

    #[test]
    fn ties_round_to_even_level() {
        let p = QuantParams::from_range(2, 0.0, 3.0).unwrap(); // levels 0,1,2,3
        assert_eq!(p.quantize_value(0.5), 0.0);
        assert_eq!(p.quantize_value(1.5), 2.0);
        assert_eq!(p.quantize_value(2.5), 2.0);
    }

    #[test]
    fn percentile_range_ignores_outliers() {
        // Oracle: sort and interpolate by hand on the same sample.
        let mut vals: Vec<f64> = (0..998).map(|i| -1.0 + 2.0 * i as f64 / 997.0).collect();
        vals.push(100.0);
        vals.push(-100.0);
        let p = fit_quant_params(&vals, 8, RangeMethod::Percentile(0.1)).unwrap();
        let mut s = vals.clone();
        s.sort_by(f64::total_cmp);
        let pos = 0.001 * 999.0;
        let expect_lo = s[0] + (s[1] - s[0]) * (pos - 0.0);
        assert!((p.clip_min - expect_lo).abs() < 1e-12);
        assert!(p.clip_min >= -1.2 && p.clip_max <= 1.2, "{p:?}");
    }

    #[test]
    fn ste_passes_gradient_inside_range_only() {
        let p = QuantParams::from_range(4, -1.0, 1.0).unwrap();
        let mut g = Graph::new();
        let v = Tensor::matrix(1, 4, vec![-2.0, -0.3, 0.7, 1.5])
            .unwrap()
            .into_param();
        let x = g.leaf(&v);
        let q = ste_quantize(&mut g, x, &p);
        assert_eq!(g.value(q).data(), quantize(&v, &p).data());
        let s = g.sum(q);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn per_channel_ranges_follow_columns() {
        let w = Tensor::matrix(2, 2, vec![-1.0, 0.0, 1.0, 10.0]).unwrap();
        let q = WeightQuantizer::fit(&w, 8, Granularity::PerChannel, RangeMethod::MinMax).unwrap();
        assert_eq!(q.params.len(), 2);
        assert_eq!((q.params[0].clip_min, q.params[0].clip_max), (-1.0, 1.0));
        assert_eq!((q.params[1].clip_min, q.params[1].clip_max), (0.0, 10.0));
        assert_eq!(q.quantize(&w).unwrap().data(), w.data());
        let t = WeightQuantizer::fit(&w, 8, Granularity::PerTensor, RangeMethod::MinMax).unwrap();
        assert_eq!(t.params.len(), 1);
    }

    proptest! {
        #[test]
        fn rounding_error_is_at_most_half_a_step(v in -3.0f64..3.0, bits in prop::sample::select(vec![2u32, 4, 8, 16])) {
            let p = QuantParams::from_range(bits, -1.5, 2.0).unwrap();
            let clipped = v.clamp(p.clip_min, p.clip_max);
            prop_assert!((p.quantize_value(v) - clipped).abs() <= p.scale / 2.0 + 1e-12);
        }

        #[test]
        fn quantize_is_idempotent_and_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let p = QuantParams::from_range(4, -1.0, 1.0).unwrap();
            let qa = p.quantize_value(a);
            prop_assert_eq!(p.quantize_value(qa), qa);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize_value(lo) <= p.quantize_value(hi));
        }
    }
}
