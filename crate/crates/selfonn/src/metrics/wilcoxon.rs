//! Wilcoxon signed-rank test for paired per-item error rates.
//!
//! Sign convention: differences are `a - b`, the statistic is the rank sum
//! of the negative differences, so `z < 0` means system B improved on
//! system A. Zero differences are dropped; tied magnitudes get average
//! ranks. For small samples the two-tailed p-value is exact (distribution
//! of the rank sum over all sign assignments); larger samples use the
//! normal approximation with tie-corrected variance.

use crate::error::{Error, Result};

/// Paired per-item errors of two systems on the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedErrorSample {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedErrorSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch {
                lhs: vec![a.len()],
                rhs: vec![b.len()],
            });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("paired error sample".into()));
        }
        Ok(Self { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    pub z: f64,
    pub p_two_tailed: f64,
    /// Count of non-zero differences actually ranked.
    pub n_used: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Whether the p-value came from the exact distribution.
    pub exact: bool,
}

/// Largest sample size that still gets the exact p-value.
const EXACT_LIMIT: usize = 25;

pub fn wilcoxon_signed_rank(sample: &PairedErrorSample) -> WilcoxonResult {
    let diffs: Vec<f64> = sample
        .a
        .iter()
        .zip(&sample.b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return WilcoxonResult {
            z: 0.0,
            p_two_tailed: 1.0,
            n_used: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            exact: true,
        };
    }

    let ranks = average_ranks(&diffs);
    let mut w_plus = 0.0;
    let mut w_minus = 0.0;
    for (d, r) in diffs.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        } else {
            w_minus += r;
        }
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes(&ranks)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            (t * t * t - t) / 48.0
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = if var > 0.0 {
        (w_minus - mean) / var.sqrt()
    } else {
        0.0
    };

    let (p, exact) = if n <= EXACT_LIMIT {
        (exact_two_tailed(&ranks, w_minus), true)
    } else {
        (erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0), false)
    };

    WilcoxonResult {
        z,
        p_two_tailed: p,
        n_used: n,
        w_plus,
        w_minus,
        exact,
    }
}

/// Ranks of |d| in ascending order, average ranks for ties.
fn average_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn tie_sizes(ranks: &[f64]) -> Vec<usize> {
    let mut sorted: Vec<f64> = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if j > i {
            sizes.push(j - i + 1);
        }
        i = j + 1;
    }
    sizes
}

/// Exact two-tailed p: distribution of the rank sum over all 2^n equally
/// likely sign assignments, computed as a subset-sum table over doubled
/// ranks (average ranks are half-integers, so doubling makes them exact).
fn exact_two_tailed(ranks: &[f64], w_obs: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w_obs).round() as usize;
    let all: u64 = 1u64 << ranks.len();
    let le: u64 = counts[..=w2.min(total)].iter().sum();
    let ge: u64 = counts[w2.min(total)..].iter().sum();
    let tail = le.min(ge) as f64 / all as f64;
    (2.0 * tail).min(1.0)
}

/// Complementary error function (Numerical Recipes rational approximation,
/// relative error below 1.2e-7 everywhere).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587
                                    + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal enumeration over all 2^n sign masks, the independent
    /// oracle for the subset-sum implementation.
    fn enumeration_p(diffs: &[f64]) -> f64 {
        let ranks = average_ranks(diffs);
        let w_obs: f64 = diffs
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d < 0.0)
            .map(|(_, r)| r)
            .sum();
        let n = diffs.len();
        let mut le = 0u64;
        let mut ge = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if w <= w_obs + 1e-12 {
                le += 1;
            }
            if w >= w_obs - 1e-12 {
                ge += 1;
            }
        }
        let tail = le.min(ge) as f64 / (1u64 << n) as f64;
        (2.0 * tail).min(1.0)
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let s = PairedErrorSample::new(vec![0.1, 0.2, 0.3], vec![0.1, 0.2, 0.3]).unwrap();
        let r = wilcoxon_signed_rank(&s);
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_two_tailed, 1.0);
        assert_eq!(r.n_used, 0);
    }

    #[test]
    fn rejects_mismatched_or_negative_inputs() {
        assert!(PairedErrorSample::new(vec![0.1], vec![0.1, 0.2]).is_err());
        assert!(PairedErrorSample::new(vec![-0.1], vec![0.1]).is_err());
    }

    #[test]
    fn exact_p_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in 1..=10usize {
            for _ in 0..20 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let b: Vec<f64> = (0..n)
                    .map(|i| {
                        // mix ties and zero diffs in
                        if rng.random_bool(0.2) {
                            a[i]
                        } else {
                            rng.random_range(0.0..1.0)
                        }
                    })
                    .collect();
                let sample = PairedErrorSample::new(a.clone(), b.clone()).unwrap();
                let got = wilcoxon_signed_rank(&sample);
                let diffs: Vec<f64> = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| x - y)
                    .filter(|d| *d != 0.0)
                    .collect();
                if diffs.is_empty() {
                    assert_eq!(got.p_two_tailed, 1.0);
                    continue;
                }
                let want = enumeration_p(&diffs);
                assert!(
                    (got.p_two_tailed - want).abs() < 1e-12,
                    "n={n}: {} vs {want}",
                    got.p_two_tailed
                );
                assert!(got.exact);
            }
        }
    }

    #[test]
    fn consistent_improvement_gives_negative_z() {
        // every a > b: B improves on A, z strongly negative, p tiny
        let n = 60;
        let a: Vec<f64> = (0..n).map(|i| 0.5 + (i as f64) * 1e-3).collect();
        let b: Vec<f64> = (0..n).map(|i| 0.2 + (i as f64) * 1e-3).collect();
        let r = wilcoxon_signed_rank(&PairedErrorSample::new(a, b).unwrap());
        assert!(r.z < -6.0, "z = {}", r.z);
        assert!(r.p_two_tailed < 1e-9);
        assert!(!r.exact);

        // flipped direction flips the sign
        let a2: Vec<f64> = (0..n).map(|i| 0.2 + (i as f64) * 1e-3).collect();
        let b2: Vec<f64> = (0..n).map(|i| 0.5 + (i as f64) * 1e-3).collect();
        let r2 = wilcoxon_signed_rank(&PairedErrorSample::new(a2, b2).unwrap());
        assert!(r2.z > 6.0);
    }

    #[test]
    fn normal_tail_is_sane() {
        // two-tailed p at |z| = 1.96 is about 0.05
        let p = erfc(1.959_963_985 / std::f64::consts::SQRT_2);
        assert!((p - 0.05).abs() < 1e-6);
    }
}
