//! Set distances between sample batches, recorded on the graph so the
//! first batch receives gradients.

use std::fmt;
use std::str::FromStr;

use super::assignment::assign;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, Vjp};

/// Largest batch the exact matching accepts.
pub const EM_MAX_BATCH: usize = 512;
/// Per-bin probability floor of the kernel density grids.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Fixed evaluation grid and kernel width for density-based distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdeGrid {
    /// Bins per data dimension.
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Kernel width; `None` picks Scott's rule on the reference batch.
    pub bandwidth: Option<f64>,
}

impl Default for KdeGrid {
    fn default() -> Self {
        Self {
            bins: 32,
            lo: -3.0,
            hi: 3.0,
            bandwidth: None,
        }
    }
}

impl KdeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 8 {
            return Err(Error::Config(format!(
                "density grid needs at least 8 bins, got {}",
                self.bins
            )));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "bad density grid range [{}, {}]",
                self.lo, self.hi
            )));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config(format!(
                    "kernel bandwidth must be positive, got {h}"
                )));
            }
        }
        Ok(())
    }

    /// Bin centres along one axis.
    fn axis(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / self.bins as f64;
        (0..self.bins)
            .map(|k| self.lo + (k as f64 + 0.5) * step)
            .collect()
    }

    /// All grid points, row-major over dimensions.
    fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        let total = (self.bins as f64).powi(dim as i32);
        if total > 1e6 {
            return Err(Error::Size(format!(
                "density grid of {} bins in {dim} dimensions is too large",
                self.bins
            )));
        }
        let axis = self.axis();
        let mut pts = vec![Vec::new()];
        for _ in 0..dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&c| {
                        let mut q = p.clone();
                        q.push(c);
                        q
                    })
                })
                .collect();
        }
        Ok(pts)
    }

    /// Scott's rule `σ̄ n^{-1/(d+4)}`, falling back to one bin width for
    /// a degenerate batch.
    pub fn scott_bandwidth(&self, reference: &Tensor) -> f64 {
        let (n, d) = (reference.rows(), reference.cols());
        let bin = (self.hi - self.lo) / self.bins as f64;
        if n < 2 || d == 0 {
            return bin;
        }
        let mut spread = 0.0;
        for c in 0..d {
            let mean = (0..n).map(|r| reference.get(r, c)).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|r| (reference.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            spread += var.sqrt();
        }
        let h = spread / d as f64 * (n as f64).powf(-1.0 / (d as f64 + 4.0));
        if h > 0.0 {
            h
        } else {
            bin
        }
    }
}

/// Which set distance the calibration term uses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum DistanceKind {
    /// Exact optimal matching on squared Euclidean cost.
    #[default]
    EarthMover,
    KullbackLeibler(KdeGrid),
    JensenShannon(KdeGrid),
    /// One minus the cosine between the batches' mean vectors.
    Cosine,
}

impl DistanceKind {
    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::EarthMover => "em",
            DistanceKind::KullbackLeibler(_) => "kl",
            DistanceKind::JensenShannon(_) => "jsd",
            DistanceKind::Cosine => "cosine",
        }
    }

    /// Replaces the density grid of KL/JSD; no effect on the others.
    pub fn with_grid(self, grid: KdeGrid) -> Self {
        match self {
            DistanceKind::KullbackLeibler(_) => DistanceKind::KullbackLeibler(grid),
            DistanceKind::JensenShannon(_) => DistanceKind::JensenShannon(grid),
            other => other,
        }
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(DistanceKind::EarthMover),
            "kl" => Ok(DistanceKind::KullbackLeibler(KdeGrid::default())),
            "jsd" => Ok(DistanceKind::JensenShannon(KdeGrid::default())),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::Config(format!(
                "unknown distance `{other}` (em|kl|jsd|cosine)"
            ))),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_batches(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::shape(op, "empty batch"));
    }
    Ok(())
}

/// Rows of `b` brought to `n`: evenly spaced picks when `b` is larger,
/// cyclic repetition when it is smaller.
pub fn match_rows(b: &Tensor, n: usize) -> Tensor {
    let m = b.rows();
    let idx: Vec<usize> = if m >= n {
        (0..n).map(|k| k * m / n).collect()
    } else {
        (0..n).map(|k| k % m).collect()
    };
    b.select_rows(&idx)
}

fn squared_cost(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m) = (a.rows(), b.rows());
    let mut cost = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            cost.push(
                a.row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum(),
            );
        }
    }
    cost
}

/// Optimal partner in `b` for every row of `a` after size matching, plus
/// the size-matched `b`.
pub fn em_matching(a: &Tensor, b: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    check_batches("em_distance", a, b)?;
    let big = a.rows().max(b.rows());
    if big > EM_MAX_BATCH {
        return Err(Error::Size(format!(
            "exact matching is limited to {EM_MAX_BATCH} rows, got {big}"
        )));
    }
    let b = match_rows(b, a.rows());
    let n = a.rows();
    let perm = assign(&squared_cost(a, &b), n, n);
    Ok((b, perm))
}

/// Mean squared distance under the optimal one-to-one matching.
pub fn em_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (b, perm) = em_matching(a, b)?;
    let total: f64 = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / a.rows() as f64)
}

/// Approximate transport cost for batches beyond the exact bound: every
/// dimension is sorted and matched independently.
pub fn sorted_em_approx(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_batches("sorted_em_approx", a, b)?;
    let b = match_rows(b, a.rows());
    let n = a.rows();
    let mut total = 0.0;
    for c in 0..a.cols() {
        let mut x: Vec<f64> = (0..n).map(|r| a.get(r, c)).collect();
        let mut y: Vec<f64> = (0..n).map(|r| b.get(r, c)).collect();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        total += x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    }
    Ok(total / n as f64)
}

fn em_graph(g: &mut Graph, a: Var, b: &Tensor) -> Result<Var> {
    let (b, perm) = em_matching(g.value(a), b)?;
    let n = perm.len();
    let partners = g.constant(b.select_rows(&perm));
    let diff = g.sub(a, partners)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Smoothed grid density of `batch`, plus the raw kernel sums needed for
/// the gradient.
struct Density {
    /// `(p + ε) / (1 + Kε)` per grid point.
    smoothed: Vec<f64>,
    raw: Vec<f64>,
    /// `K(g_k, a_i)` as `[point][row]`.
    kernel: Vec<Vec<f64>>,
    mass: f64,
}

fn density(batch: &Tensor, points: &[Vec<f64>], h: f64) -> Density {
    let n = batch.rows();
    let kernel: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            (0..n)
                .map(|i| {
                    let d2: f64 = p
                        .iter()
                        .zip(batch.row(i))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    (-d2 / (2.0 * h * h)).exp()
                })
                .collect()
        })
        .collect();
    let sums: Vec<f64> = kernel.iter().map(|k| k.iter().sum()).collect();
    let mass: f64 = sums.iter().sum();
    let k = points.len() as f64;
    let raw: Vec<f64> = if mass > 0.0 {
        sums.iter().map(|s| s / mass).collect()
    } else {
        vec![1.0 / k; points.len()]
    };
    let smoothed = raw
        .iter()
        .map(|p| (p + DENSITY_FLOOR) / (1.0 + k * DENSITY_FLOOR))
        .collect();
    Density {
        smoothed,
        raw,
        kernel,
        mass,
    }
}

#[derive(Clone, Copy)]
enum Divergence {
    Kl,
    Js,
}

fn divergence_value(kind: Divergence, p: &[f64], q: &[f64]) -> f64 {
    let kl = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * (a / b).ln()).sum() };
    match kind {
        Divergence::Kl => kl(p, q),
        Divergence::Js => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(p, &m) + 0.5 * kl(q, &m)
        }
    }
}

/// KL(p‖q) or JSD(p, q) between smoothed grid densities of `a` and `b`.
fn density_divergence(
    a: &Tensor,
    b: &Tensor,
    grid: &KdeGrid,
    kind: Divergence,
) -> Result<(f64, Vjp)> {
    check_batches("density_distance", a, b)?;
    grid.validate()?;
    let points = grid.points(a.cols())?;
    let h = grid.bandwidth.unwrap_or_else(|| grid.scott_bandwidth(b));
    let pa = density(a, &points, h);
    let pb = density(b, &points, h);
    let value = divergence_value(kind, &pa.smoothed, &pb.smoothed);

    // ∂D/∂p̃_k, pushed back through smoothing, normalization and kernels.
    let k_count = points.len() as f64;
    let d_smoothed: Vec<f64> = pa
        .smoothed
        .iter()
        .zip(&pb.smoothed)
        .map(|(&p, &q)| match kind {
            Divergence::Kl => (p / q).ln() + 1.0,
            Divergence::Js => 0.5 * (p / (0.5 * (p + q))).ln(),
        })
        .collect();
    let d_raw: Vec<f64> = d_smoothed
        .iter()
        .map(|g| g / (1.0 + k_count * DENSITY_FLOOR))
        .collect();
    let centre: f64 = d_raw.iter().zip(&pa.raw).map(|(g, p)| g * p).sum();
    let d_sum: Vec<f64> = if pa.mass > 0.0 {
        d_raw.iter().map(|g| (g - centre) / pa.mass).collect()
    } else {
        vec![0.0; points.len()]
    };
    let (n, d) = (a.rows(), a.cols());
    let mut grad = vec![0.0; n * d];
    for (k, p) in points.iter().enumerate() {
        if d_sum[k] == 0.0 {
            continue;
        }
        for i in 0..n {
            let w = d_sum[k] * pa.kernel[k][i] / (h * h);
            if w == 0.0 {
                continue;
            }
            for c in 0..d {
                grad[i * d + c] += w * (p[c] - a.get(i, c));
            }
        }
    }
    let vjp = Box::new(move |up: &[f64]| vec![grad.iter().map(|g| g * up[0]).collect()]);
    Ok((value, vjp))
}

fn mean_row(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.rows(), t.cols());
    (0..d)
        .map(|c| (0..n).map(|r| t.get(r, c)).sum::<f64>() / n as f64)
        .collect()
}

const NORM_FLOOR: f64 = 1e-12;

fn cosine_parts(a: &Tensor, b: &Tensor) -> Result<(f64, Vec<f64>)> {
    check_batches("cosine_distance", a, b)?;
    let u = mean_row(a);
    let v = mean_row(b);
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let cos = u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv);
    // ∂(1 − cos)/∂u, shared equally by the rows of `a`.
    let n = a.rows() as f64;
    let du: Vec<f64> = u
        .iter()
        .zip(&v)
        .map(|(x, y)| -(y / (nu * nv) - cos * x / (nu * nu)) / n)
        .collect();
    Ok((1.0 - cos, du))
}

/// Distance between batch `a` (on the graph) and the fixed batch `b`.
pub fn distance_graph(g: &mut Graph, kind: &DistanceKind, a: Var, b: &Tensor) -> Result<Var> {
    match kind {
        DistanceKind::EarthMover => em_graph(g, a, b),
        DistanceKind::KullbackLeibler(grid) | DistanceKind::JensenShannon(grid) => {
            let which = if matches!(kind, DistanceKind::KullbackLeibler(_)) {
                Divergence::Kl
            } else {
                Divergence::Js
            };
            let (value, vjp) = density_divergence(g.value(a), b, grid, which)?;
            Ok(g.custom(&[a], Tensor::scalar(value), vjp))
        }
        DistanceKind::Cosine => {
            let (value, du) = cosine_parts(g.value(a), b)?;
            let n = g.value(a).rows();
            let vjp = Box::new(move |up: &[f64]| {
                vec![(0..n).flat_map(|_| du.iter().map(|x| x * up[0])).collect()]
            });
            Ok(g.custom(&[a], Tensor::scalar(value), vjp))
        }
    }
}

/// Plain value of [`distance_graph`].
pub fn distance(kind: &DistanceKind, a: &Tensor, b: &Tensor) -> Result<f64> {
    match kind {
        DistanceKind::EarthMover => em_value(a, b),
        DistanceKind::KullbackLeibler(grid) => {
            Ok(density_divergence(a, b, grid, Divergence::Kl)?.0)
        }
        DistanceKind::JensenShannon(grid) => Ok(density_divergence(a, b, grid, Divergence::Js)?.0),
        DistanceKind::Cosine => Ok(cosine_parts(a, b)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, seeded};
    use proptest::prelude::*;

    fn batch(n: usize, seed: u64) -> Tensor {
        Tensor::matrix(n, 2, normals(&mut seeded(seed, 0), 2 * n)).unwrap()
    }

    fn all_kinds() -> Vec<DistanceKind> {
        ["em", "kl", "jsd", "cosine"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect()
    }

    #[test]
    fn identical_batches_are_at_distance_zero() {
        let x = batch(20, 1);
        for k in all_kinds() {
            let d = distance(&k, &x, &x).unwrap();
            assert!(d.abs() < 1e-12, "{k}: {d}");
        }
    }

    #[test]
    fn single_pair_em_is_squared_distance() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![4.0, -2.0]]).unwrap();
        assert_eq!(em_value(&a, &b).unwrap(), 25.0);
    }

    #[test]
    fn em_ignores_order() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(em_value(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn shifted_copy_costs_the_squared_shift() {
        let a = batch(16, 3);
        let d = 0.05;
        let mut b = a.clone();
        for r in 0..16 {
            b.data_mut()[r * 2] += d;
        }
        assert!((em_value(&a, &b).unwrap() - d * d).abs() < 1e-9);
    }

    #[test]
    fn jsd_is_bounded_on_disjoint_batches() {
        let a = batch(10, 4).map(|v| 0.1 * v - 2.0);
        let b = batch(10, 5).map(|v| 0.1 * v + 2.0);
        let k: DistanceKind = "jsd".parse().unwrap();
        let d = distance(&k, &a, &b).unwrap();
        assert!(d > 0.5 && d <= 2f64.ln() + 1e-12, "{d}");
    }

    #[test]
    fn kl_without_overlap_stays_finite() {
        let a = batch(10, 4).map(|v| 0.01 * v - 2.5);
        let b = batch(10, 5).map(|v| 0.01 * v + 2.5);
        let k = DistanceKind::KullbackLeibler(KdeGrid {
            bandwidth: Some(0.01),
            ..KdeGrid::default()
        });
        let d = distance(&k, &a, &b).unwrap();
        assert!(d.is_finite() && d > 1.0, "{d}");
    }

    #[test]
    fn oversized_em_batches_are_refused() {
        let a = batch(EM_MAX_BATCH + 1, 1);
        assert!(matches!(em_value(&a, &a), Err(Error::Size(_))));
        assert!(sorted_em_approx(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn unequal_sizes_are_matched_deterministically() {
        let b = batch(5, 2);
        let up = match_rows(&b, 12);
        assert_eq!(up.row(7), b.row(2));
        let down = match_rows(&b, 2);
        assert_eq!(down.row(1), b.row(2));
    }

    #[test]
    fn bad_grids_are_rejected() {
        let g = KdeGrid {
            bins: 4,
            ..KdeGrid::default()
        };
        assert!(g.validate().is_err());
        let g = KdeGrid {
            bandwidth: Some(0.0),
            ..KdeGrid::default()
        };
        assert!(g.validate().is_err());
    }

    fn numeric_grad(kind: &DistanceKind, a: &Tensor, b: &Tensor) -> Vec<f64> {
        let h = 1e-6;
        (0..a.len())
            .map(|i| {
                let mut p = a.clone();
                p.data_mut()[i] += h;
                let mut m = a.clone();
                m.data_mut()[i] -= h;
                (distance(kind, &p, b).unwrap() - distance(kind, &m, b).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let a = batch(6, 11).map(|v| 0.8 * v);
        let b = batch(9, 12);
        let kinds = [
            DistanceKind::EarthMover,
            DistanceKind::KullbackLeibler(KdeGrid {
                bins: 16,
                bandwidth: Some(0.6),
                ..KdeGrid::default()
            }),
            DistanceKind::JensenShannon(KdeGrid {
                bins: 16,
                bandwidth: Some(0.6),
                ..KdeGrid::default()
            }),
            DistanceKind::Cosine,
        ];
        for k in kinds {
            let mut g = Graph::new();
            let av = g.leaf(&a.detached().into_param());
            let d = distance_graph(&mut g, &k, av, &b).unwrap();
            assert!((g.value(d).item() - distance(&k, &a, &b).unwrap()).abs() < 1e-12);
            let analytic = g.backward(d).unwrap().wrt(av);
            let numeric = numeric_grad(&k, &a, &b);
            for (x, y) in analytic.iter().zip(&numeric) {
                let scale = x.abs().max(y.abs()).max(1e-6);
                assert!((x - y).abs() / scale < 1e-4, "{k}: {x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn em_is_symmetric_and_permutation_invariant(seed in 0u64..10_000, n in 1usize..12) {
            let a = batch(n, seed);
            let b = batch(n, seed + 1);
            let ab = em_value(&a, &b).unwrap();
            prop_assert!((ab - em_value(&b, &a).unwrap()).abs() < 1e-12);
            let rev: Vec<usize> = (0..n).rev().collect();
            let pa = em_value(&a.select_rows(&rev), &b).unwrap();
            let pb = em_value(&a, &b.select_rows(&rev)).unwrap();
            prop_assert!((ab - pa).abs() < 1e-12);
            prop_assert!((ab - pb).abs() < 1e-12);
        }

        #[test]
        fn divergences_are_nonnegative_and_jsd_symmetric(seed in 0u64..10_000) {
            let a = batch(8, seed);
            let b = batch(8, seed + 7).map(|v| v + 0.5);
            let kl: DistanceKind = "kl".parse().unwrap();
            let js: DistanceKind = "jsd".parse().unwrap();
            prop_assert!(distance(&kl, &a, &b).unwrap() >= -1e-12);
            let ab = distance(&js, &a, &b).unwrap();
            // Scott bandwidth follows the second batch; pin it for symmetry.
            let pinned = DistanceKind::JensenShannon(KdeGrid { bandwidth: Some(0.4), ..KdeGrid::default() });
            let s1 = distance(&pinned, &a, &b).unwrap();
            let s2 = distance(&pinned, &b, &a).unwrap();
            prop_assert!(ab >= -1e-12);
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}
