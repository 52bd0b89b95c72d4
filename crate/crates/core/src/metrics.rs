//! Perturbation statistics, bit-operation cost and the sample-quality
//! proxy.

use rand::seq::index::sample as sample_indices;

use crate::cad::{em_value, EM_MAX_BATCH};
use crate::diffusion::Architecture;
use crate::error::{Error, Result};
use crate::pq::PerturbationLog;
use crate::rng;
use crate::tensor::Tensor;

/// Losses are floored here before taking logarithms.
pub const LOSS_FLOOR: f64 = 1e-12;

pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let logs: f64 = values.iter().map(|v| v.max(LOSS_FLOOR).ln()).sum();
    (logs / values.len() as f64).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationReport {
    pub reference: Vec<f64>,
    pub candidate: Vec<f64>,
    pub g_mean_ref: f64,
    pub g_mean_cand: f64,
    /// `Σ (reference − candidate)`; positive when the candidate is better.
    pub delta_pert: f64,
    /// Share of blocks where the candidate is strictly lower.
    pub improved_fraction: f64,
}

pub fn perturbation_report_from(
    reference: &[f64],
    candidate: &[f64],
) -> Result<PerturbationReport> {
    if reference.len() != candidate.len() || reference.is_empty() {
        return Err(Error::Contract(format!(
            "perturbation logs cover {} and {} blocks",
            reference.len(),
            candidate.len()
        )));
    }
    let improved = reference
        .iter()
        .zip(candidate)
        .filter(|(r, c)| c < r)
        .count();
    Ok(PerturbationReport {
        reference: reference.to_vec(),
        candidate: candidate.to_vec(),
        g_mean_ref: geometric_mean(reference),
        g_mean_cand: geometric_mean(candidate),
        delta_pert: reference.iter().zip(candidate).map(|(r, c)| r - c).sum(),
        improved_fraction: improved as f64 / reference.len() as f64,
    })
}

pub fn perturbation_report(
    reference: &PerturbationLog,
    candidate: &PerturbationLog,
) -> Result<PerturbationReport> {
    let ids = |l: &PerturbationLog| l.blocks.iter().map(|b| b.block).collect::<Vec<_>>();
    if ids(reference) != ids(candidate) {
        return Err(Error::Contract(format!(
            "block sets differ: {:?} vs {:?}",
            ids(reference),
            ids(candidate)
        )));
    }
    perturbation_report_from(&reference.final_losses(), &candidate.final_losses())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub w_bits: u32,
    pub a_bits: u32,
    /// Multiply-accumulates of every affine layer for one sample.
    pub layer_macs: Vec<u64>,
    pub model_size_bytes: f64,
    pub gbops_per_step: f64,
    pub gbops_trajectory: f64,
}

const COST_BITS: [u32; 4] = [4, 8, 16, 32];

/// Bit operations of one forward pass (`MACs · w_bits · a_bits`, affine
/// layers only) and of a whole trajectory of `steps` passes.
pub fn gbops(arch: &Architecture, w_bits: u32, a_bits: u32, steps: usize) -> Result<CostReport> {
    for b in [w_bits, a_bits] {
        if !COST_BITS.contains(&b) {
            return Err(Error::Config(format!(
                "cost bit-width must be one of {COST_BITS:?}, got {b}"
            )));
        }
    }
    let layer_macs = arch
        .layer_shapes()
        .iter()
        .map(|&(i, o)| (i * o) as u64)
        .collect();
    Ok(cost_report(
        layer_macs,
        arch.parameter_count(),
        w_bits,
        a_bits,
        steps,
    ))
}

/// [`gbops`] from explicit layer sizes.
pub fn cost_report(
    layer_macs: Vec<u64>,
    parameters: usize,
    w_bits: u32,
    a_bits: u32,
    steps: usize,
) -> CostReport {
    let bit_ops: f64 = layer_macs
        .iter()
        .map(|&m| m as f64 * w_bits as f64 * a_bits as f64)
        .sum();
    let per_step = bit_ops / 1e9;
    CostReport {
        w_bits,
        a_bits,
        layer_macs,
        model_size_bytes: parameters as f64 * w_bits as f64 / 8.0,
        gbops_per_step: per_step,
        gbops_trajectory: per_step * steps as f64,
    }
}

/// Largest batch compared exactly; bigger batches are subsampled.
pub const QUALITY_MAX_BATCH: usize = EM_MAX_BATCH;

/// Square root of the exact matching cost between two 2D sample sets, a
/// Wasserstein-2 estimate. Batches above [`QUALITY_MAX_BATCH`] rows are
/// subsampled with `seed`; at most 2048 rows are accepted.
pub fn sample_quality(generated: &Tensor, reference: &Tensor, seed: u64) -> Result<f64> {
    for t in [generated, reference] {
        if t.rows() > 2048 {
            return Err(Error::Size(format!(
                "sample batch of {} rows exceeds 2048",
                t.rows()
            )));
        }
    }
    let pick = |t: &Tensor, stream: u64| -> Tensor {
        if t.rows() <= QUALITY_MAX_BATCH {
            return t.clone();
        }
        let mut r = rng::seeded(seed, rng::stream::EVAL + stream);
        let mut idx = sample_indices(&mut r, t.rows(), QUALITY_MAX_BATCH).into_vec();
        idx.sort_unstable();
        t.select_rows(&idx)
    };
    let (a, b) = (pick(generated, 0), pick(reference, 1 << 16));
    Ok(em_value(&a, &b)?.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rotate, Toy};
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn identical_runs_show_no_change() {
        let r = perturbation_report_from(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.delta_pert, 0.0);
        assert_eq!(r.improved_fraction, 0.0);
    }

    #[test]
    fn hand_computed_report() {
        assert!((geometric_mean(&[1.0, 4.0]) - 2.0).abs() < 1e-15);
        let r = perturbation_report_from(&[2.0, 2.0, 2.0], &[1.0, 1.0, 8.0]).unwrap();
        assert!((r.g_mean_cand - 2.0).abs() < 1e-12);
        assert!((r.g_mean_ref - 2.0).abs() < 1e-12);
        assert_eq!(r.delta_pert, -4.0);
        assert!((r.improved_fraction - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_blocks_are_refused() {
        assert!(perturbation_report_from(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cost_formula() {
        let full = cost_report(vec![1000], 10, 32, 32, 1);
        assert!((full.gbops_per_step - 1.024e-3).abs() < 1e-18);
        let low = cost_report(vec![1000], 10, 4, 8, 1);
        assert!((low.gbops_per_step * 1e9 - 3.2e4).abs() < 1e-6);
        assert_eq!(low.gbops_per_step / full.gbops_per_step, 1.0 / 32.0);
        assert_eq!(low.model_size_bytes, 5.0);
    }

    #[test]
    fn trajectory_cost_is_linear_in_steps() {
        let arch = Architecture::default();
        let a = gbops(&arch, 4, 8, 64).unwrap();
        let b = gbops(&arch, 4, 8, 32).unwrap();
        assert_eq!(a.gbops_trajectory, 2.0 * b.gbops_trajectory);
        assert_eq!(a.gbops_trajectory, a.gbops_per_step * 64.0);
        assert_eq!(a.layer_macs, vec![128, 4096, 4096, 128]);
        assert!(gbops(&arch, 2, 8, 1).is_err());
    }

    #[test]
    fn quality_axioms() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(sample_quality(&a, &b, 0).unwrap(), 5.0);
        assert_eq!(sample_quality(&a, &a, 0).unwrap(), 0.0);
    }

    #[test]
    fn quality_is_rotation_invariant() {
        let ring = Toy::default();
        let a = ring.sample(200, &mut seeded(1, 1));
        let b = rotate(&a, Toy::mode_rotation());
        let q = sample_quality(&a, &b, 0).unwrap();
        assert!(q > 0.0);
        let turn = 0.37;
        let q2 = sample_quality(&rotate(&a, turn), &rotate(&b, turn), 0).unwrap();
        assert!((q - q2).abs() < 1e-9, "{q} vs {q2}");
    }

    #[test]
    fn large_batches_are_subsampled_reproducibly() {
        let a = Toy::default().sample(700, &mut seeded(1, 1));
        let b = Toy::default().sample(700, &mut seeded(2, 1));
        assert_eq!(
            sample_quality(&a, &b, 5).unwrap(),
            sample_quality(&a, &b, 5).unwrap()
        );
        assert!(sample_quality(&Tensor::zeros(&[2049, 2]), &a, 0).is_err());
    }

    proptest! {
        #[test]
        fn g_mean_scales_with_its_inputs(v in proptest::collection::vec(1e-6f64..1e3, 1..8), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let ratio = geometric_mean(&scaled) / geometric_mean(&v);
            prop_assert!((ratio / c - 1.0).abs() < 1e-10);
        }

        #[test]
        fn quality_is_symmetric_and_obeys_the_triangle_inequality(seed in 0u64..1000) {
            let mk = |s: u64| Tensor::matrix(12, 2, rng::normals(&mut seeded(s, 9), 24)).unwrap();
            let (a, b, c) = (mk(seed), mk(seed + 1), mk(seed + 2));
            let ab = sample_quality(&a, &b, 0).unwrap();
            prop_assert!((ab - sample_quality(&b, &a, 0).unwrap()).abs() < 1e-12);
            let ac = sample_quality(&a, &c, 0).unwrap();
            let cb = sample_quality(&c, &b, 0).unwrap();
            prop_assert!(ab <= ac + cb + 1e-6);
        }
    }
}
