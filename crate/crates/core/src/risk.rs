//! Risk-limit adjustment for approximate sampling.
//!
//! If each draw deviates from uniform with probability at most `delta`, then
//! with probability `1 − eps1` at most `s'` of `s` draws are "switched", and
//! the acceptance probability of any deterministic audit rises by at most
//! `eps1 + (1 + eps2)^s' − 1`, where `1 + eps2` bounds the per-ballot
//! probability ratio against uniform (`1 + n·delta` when only the variation
//! distance is known). The audit then runs at risk limit `alpha − bound`.

use serde::{Deserialize, Serialize};

use crate::analysis::{epsilon_ratio, variation_distance_from_uniform, RotationDistribution};
use crate::distributions::{CutSizeDistribution, Pmf};
use crate::error::{KcutError, Result};
use crate::numeric::CompensatedSum;

/// Largest k considered by [`choose_k`].
pub const MAX_K: usize = 64;

/// Default target for the switched-ballot tail mass.
pub const DEFAULT_EPS1_TARGET: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskAdjustment {
    /// Planned sample size.
    pub s: u64,
    /// Per-draw variation distance from uniform.
    pub delta: f64,
    /// Probability that more than `s_prime` draws are switched.
    pub eps1: f64,
    pub s_prime: u64,
    /// Per-ballot max probability ratio minus one.
    pub eps2: f64,
    /// Total bound on the change in acceptance probability.
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditParameters {
    pub alpha: f64,
    pub adjusted_alpha: f64,
    pub k: usize,
    pub s_star: u64,
}

impl AuditParameters {
    pub fn new(alpha: f64, adjustment: &RiskAdjustment, k: usize) -> Result<Self> {
        Ok(Self {
            alpha,
            adjusted_alpha: adjusted_risk_limit(alpha, adjustment.bound)?,
            k,
            s_star: adjustment.s,
        })
    }
}

// ln(n!) − ln(√(2πn)·(n/e)ⁿ) for n = 0..=15.
#[allow(clippy::excessive_precision)]
const STIRLING_ERROR: [f64; 16] = [
    0.0,
    0.081_061_466_795_327_258_22,
    0.041_340_695_955_409_294_094,
    0.027_677_925_684_998_339_149,
    0.020_790_672_103_765_093_112,
    0.016_644_691_189_821_192_163,
    0.013_876_128_823_070_747_999,
    0.011_896_709_945_891_770_095,
    0.010_411_265_261_972_096_497,
    0.009_255_462_182_712_732_917_7,
    0.008_330_563_433_362_871_256_5,
    0.007_573_675_487_951_840_795,
    0.006_942_840_107_209_529_865_7,
    0.006_408_994_188_004_207_068_4,
    0.005_951_370_112_758_847_735_6,
    0.005_554_733_551_962_801_371,
];

fn stirling_error(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        return STIRLING_ERROR[n as usize];
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x·ln(x/np) + np − x`, with a series near `x ≈ np`.
fn deviance(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / np).ln() + np - x
    }
}

/// Binomial probability mass via the saddle-point expansion (Loader 2000),
/// accurate to a few ulps in relative terms even deep in the tails.
pub fn binomial_pmf(x: u64, s: u64, p: f64) -> f64 {
    let q = 1.0 - p;
    if x > s {
        return 0.0;
    }
    if p == 0.0 {
        return if x == 0 { 1.0 } else { 0.0 };
    }
    if q == 0.0 {
        return if x == s { 1.0 } else { 0.0 };
    }
    let (xf, sf) = (x as f64, s as f64);
    if x == 0 {
        if s == 0 {
            return 1.0;
        }
        let lc = if p < 0.1 { -deviance(sf, sf * q) - sf * p } else { sf * q.ln() };
        return lc.exp();
    }
    if x == s {
        let lc = if q < 0.1 { -deviance(sf, sf * p) - sf * q } else { sf * p.ln() };
        return lc.exp();
    }
    let lc = stirling_error(sf)
        - stirling_error(xf)
        - stirling_error(sf - xf)
        - deviance(xf, sf * p)
        - deviance(sf - xf, sf * q);
    let lf = std::f64::consts::TAU.ln() + xf.ln() + (-xf / sf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// `Pr[X > s_prime]` for `X ~ Binomial(s, delta)`.
///
/// Sums the upper tail term by term with compensated addition and stops once
/// the geometric bound on the remainder is below 1e-17 of the running sum.
pub fn binomial_survival(s: u64, delta: f64, s_prime: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(KcutError::invalid(format!("delta {delta} outside [0, 1]")));
    }
    if s_prime >= s || delta == 0.0 {
        return Ok(0.0);
    }
    if delta == 1.0 {
        return Ok(1.0);
    }
    let odds = delta / (1.0 - delta);
    let mode = ((s as f64 + 1.0) * delta).floor() as u64;
    let mut sum = CompensatedSum::new();
    for j in (s_prime + 1)..=s {
        let term = binomial_pmf(j, s, delta);
        sum.add(term);
        if j >= mode {
            // Past the mode successive terms shrink by at most `ratio`.
            let ratio = (s - j) as f64 / (j + 1) as f64 * odds;
            if ratio < 1.0 {
                let remainder = term * ratio / (1.0 - ratio);
                if remainder <= 1e-17 * sum.value() {
                    break;
                }
            }
        }
    }
    Ok(sum.value().min(1.0))
}

/// Smallest `s'` with `Pr[X > s'] ≤ eps1_target`, and that tail mass.
pub fn switched_ballot_quantile(s: u64, delta: f64, eps1_target: f64) -> Result<(u64, f64)> {
    if !(eps1_target > 0.0 && eps1_target < 1.0) {
        return Err(KcutError::invalid(format!(
            "eps1 target {eps1_target} outside (0, 1)"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(KcutError::invalid(format!("delta {delta} outside [0, 1]")));
    }
    // Survival is nonincreasing in s' and zero at s' = s.
    let (mut lo, mut hi) = (0u64, s);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if binomial_survival(s, delta, mid)? <= eps1_target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok((lo, binomial_survival(s, delta, lo)?))
}

/// `eps1 + (1 + eps2)^s' − 1`.
pub fn adjustment_bound(s_prime: u64, eps1: f64, eps2: f64) -> Result<f64> {
    if !(eps1 >= 0.0 && eps2 >= 0.0) {
        return Err(KcutError::invalid(format!(
            "eps1={eps1}, eps2={eps2} must be non-negative"
        )));
    }
    Ok(eps1 + (s_prime as f64 * eps2.ln_1p()).exp_m1())
}

/// `eps1 + (1 + n·delta)^s' − 1`: the looser form using only variation distance.
pub fn adjustment_bound_vd(s_prime: u64, eps1: f64, n: usize, delta: f64) -> Result<f64> {
    if delta.is_nan() || delta < 0.0 {
        return Err(KcutError::invalid(format!("delta {delta} must be non-negative")));
    }
    adjustment_bound(s_prime, eps1, n as f64 * delta)
}

/// `alpha − bound`, refusing adjustments that consume the whole risk limit.
pub fn adjusted_risk_limit(alpha: f64, bound: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KcutError::invalid(format!("risk limit {alpha} outside (0, 1)")));
    }
    if bound.is_nan() || bound < 0.0 {
        return Err(KcutError::invalid(format!("bound {bound} must be non-negative")));
    }
    if bound >= alpha {
        return Err(KcutError::AdjustmentExhaustsRiskLimit { alpha, bound });
    }
    Ok(alpha - bound)
}

/// Which per-ballot inflation term enters the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundForm {
    /// `(1 + eps2)^s'` with the measured max ratio.
    #[default]
    MaxRatio,
    /// `(1 + n·delta)^s'` from the variation distance alone.
    VariationDistance,
}

/// Build the adjustment for explicit `delta` and `eps2`.
pub fn risk_adjustment(
    s: u64,
    delta: f64,
    eps2: f64,
    eps1_target: f64,
    n: usize,
    form: BoundForm,
) -> Result<RiskAdjustment> {
    let (s_prime, eps1) = switched_ballot_quantile(s, delta, eps1_target)?;
    let eps2 = eps2.max(0.0);
    let bound = match form {
        BoundForm::MaxRatio => adjustment_bound(s_prime, eps1, eps2)?,
        BoundForm::VariationDistance => adjustment_bound_vd(s_prime, eps1, n, delta)?,
    };
    Ok(RiskAdjustment {
        s,
        delta,
        eps1,
        s_prime,
        eps2,
        bound,
    })
}

/// Adjustment for the rotation distribution produced by a given k.
pub fn risk_adjustment_for(
    rotation: &RotationDistribution,
    s: u64,
    eps1_target: f64,
    form: BoundForm,
) -> Result<RiskAdjustment> {
    risk_adjustment(
        s,
        variation_distance_from_uniform(rotation),
        epsilon_ratio(rotation),
        eps1_target,
        rotation.n(),
        form,
    )
}

/// Adjustment for each `k = 1..=k_max`, computed by one-cut-at-a-time convolution.
pub fn sweep_k(
    source: &CutSizeDistribution,
    s: u64,
    eps1_target: f64,
    k_max: usize,
    form: BoundForm,
) -> Result<Vec<(usize, RiskAdjustment)>> {
    let mut out = Vec::with_capacity(k_max);
    let mut rotation = crate::analysis::iterate_k(source, 1)?;
    for k in 1..=k_max {
        if k > 1 {
            rotation = crate::analysis::iterate_k_step(&rotation, source)?;
        }
        out.push((k, risk_adjustment_for(&rotation, s, eps1_target, form)?));
    }
    Ok(out)
}

/// Smallest `k ≤ MAX_K` whose adjustment bound fits within `budget`.
pub fn choose_k(
    source: &CutSizeDistribution,
    s_star: u64,
    eps1_target: f64,
    budget: f64,
) -> Result<(usize, RiskAdjustment)> {
    choose_k_with(source, s_star, eps1_target, budget, BoundForm::MaxRatio)
}

pub fn choose_k_with(
    source: &CutSizeDistribution,
    s_star: u64,
    eps1_target: f64,
    budget: f64,
    form: BoundForm,
) -> Result<(usize, RiskAdjustment)> {
    if budget.is_nan() || budget <= 0.0 {
        return Err(KcutError::invalid(format!("budget {budget} must be positive")));
    }
    if s_star == 0 {
        return Err(KcutError::invalid("s* must be at least 1"));
    }
    let mut rotation = crate::analysis::iterate_k(source, 1)?;
    let mut last = None;
    for k in 1..=MAX_K {
        if k > 1 {
            rotation = crate::analysis::iterate_k_step(&rotation, source)?;
        }
        let adj = risk_adjustment_for(&rotation, s_star, eps1_target, form)?;
        if adj.bound <= budget {
            return Ok((k, adj));
        }
        last = Some(adj);
    }
    Err(KcutError::BudgetUnreachable {
        budget,
        max_k: MAX_K,
        best_bound: last.map_or(f64::INFINITY, |a| a.bound),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{empirical_pmf, uniform_pmf, CutRecordSet};

    #[test]
    fn survival_examples() {
        assert!((binomial_survival(3, 0.5, 2).unwrap() - 0.125).abs() < 1e-16);
        let tail = binomial_survival(1000, 7.19e-4, 4).unwrap();
        // scipy.stats.binom.sf(4, 1000, 7.19e-4)
        assert!((tail - 0.000_877_844_651_287_682_4).abs() / tail < 1e-12, "{tail}");
        assert!((tail - 8.78e-4).abs() < 5e-7);
        assert_eq!(binomial_survival(500, 0.0, 0).unwrap(), 0.0);
        assert!(binomial_survival(10, 1.5, 2).is_err());
        assert!(binomial_survival(10, -0.1, 2).is_err());
        assert_eq!(binomial_survival(10, 0.3, 10).unwrap(), 0.0);
        assert_eq!(binomial_survival(10, 1.0, 3).unwrap(), 1.0);
    }

    /// Exact tail with big rationals; `delta` is converted from its exact binary value.
    fn exact_survival(s: u64, delta: f64, s_prime: u64) -> f64 {
        use num_bigint::BigInt;
        use num_rational::BigRational;
        use num_traits::{One, ToPrimitive, Zero};
        let p = BigRational::from_float(delta).unwrap();
        let q = BigRational::one() - &p;
        let mut total = BigRational::zero();
        let mut choose = BigInt::one();
        for j in 0..=s {
            if j > 0 {
                choose = choose * BigInt::from(s - j + 1) / BigInt::from(j);
            }
            if j > s_prime {
                let term = BigRational::from_integer(choose.clone())
                    * num_traits::pow(p.clone(), j as usize)
                    * num_traits::pow(q.clone(), (s - j) as usize);
                total += term;
            }
        }
        total.to_f64().unwrap()
    }

    #[test]
    fn survival_matches_exact_rational_arithmetic() {
        for &(s, delta, sp) in &[
            (3u64, 0.5, 0u64),
            (20, 0.1, 5),
            (60, 7.19e-4, 1),
            (60, 0.37, 30),
            (120, 0.02, 9),
            (150, 0.5, 100),
            (200, 7.19e-4, 4),
        ] {
            let exact = exact_survival(s, delta, sp);
            let got = binomial_survival(s, delta, sp).unwrap();
            assert!(
                ((got - exact) / exact).abs() < 1e-12,
                "s={s} delta={delta} s'={sp}: {got} vs {exact}"
            );
        }
    }

    #[test]
    fn pmf_sums_to_one() {
        for (s, p) in [(1u64, 0.3), (17, 0.5), (1000, 7.19e-4), (5000, 0.37)] {
            let total: f64 = (0..=s).map(|x| binomial_pmf(x, s, p)).sum();
            assert!((total - 1.0).abs() < 1e-12, "s={s} p={p} total={total}");
        }
    }

    #[test]
    fn quantile_examples() {
        let (sp, e1) = switched_ballot_quantile(1000, 7.19e-4, 1e-3).unwrap();
        assert_eq!(sp, 4);
        assert!((e1 - 8.78e-4).abs() / 8.78e-4 < 0.02);
        assert_eq!(switched_ballot_quantile(1000, 0.0, 1e-3).unwrap(), (0, 0.0));
        let (sp, e1) = switched_ballot_quantile(3, 0.5, 0.2).unwrap();
        assert_eq!(sp, 2);
        assert!((e1 - 0.125).abs() < 1e-15);
        assert!(switched_ballot_quantile(3, 0.5, 0.0).is_err());
        assert!(switched_ballot_quantile(3, 0.5, 1.0).is_err());
    }

    #[test]
    fn quantile_is_brute_force_argmin() {
        for &(s, delta, target) in &[
            (1u64, 0.5, 0.3),
            (10, 0.2, 0.01),
            (100, 0.05, 1e-3),
            (1000, 7.19e-4, 1e-3),
            (1000, 0.01, 1e-6),
            (1000, 0.3, 0.05),
            (257, 0.999, 0.5),
        ] {
            let scan = (0..=s)
                .find(|&sp| binomial_survival(s, delta, sp).unwrap() <= target)
                .unwrap();
            assert_eq!(switched_ballot_quantile(s, delta, target).unwrap().0, scan, "{s} {delta}");
        }
    }

    #[test]
    fn bound_examples() {
        let b = adjustment_bound(4, 8.78e-4, 0.00225).unwrap();
        assert!((b - 9.88e-3).abs() / 9.88e-3 < 0.02, "{b}");
        assert_eq!(adjustment_bound(4, 0.01, 0.0).unwrap(), 0.01);
        assert_eq!(adjustment_bound(0, 0.01, 0.7).unwrap(), 0.01);
        assert!(adjustment_bound(1, -1e-3, 0.1).is_err());
        assert!(adjustment_bound(1, 1e-3, -0.1).is_err());

        let loose = adjustment_bound_vd(4, 8.78e-4, 150, 7.19e-4).unwrap();
        let oracle = 1.10785f64.powi(4) - 1.0 + 8.78e-4;
        assert!((loose - oracle).abs() < 1e-9);
        assert!((loose - 0.508).abs() < 1e-3);
        assert_eq!(adjustment_bound_vd(4, 0.02, 150, 0.0).unwrap(), 0.02);
        let first = adjustment_bound_vd(1, 0.0, 150, 1e-4).unwrap();
        assert!((first - 150.0 * 1e-4).abs() < 1e-15);
    }

    #[test]
    fn adjusted_limit_examples() {
        assert!((adjusted_risk_limit(0.05, 9.88e-3).unwrap() - 0.04012).abs() < 1e-12);
        assert_eq!(adjusted_risk_limit(0.05, 0.0).unwrap(), 0.05);
        assert_eq!(
            adjusted_risk_limit(0.05, 0.06),
            Err(KcutError::AdjustmentExhaustsRiskLimit { alpha: 0.05, bound: 0.06 })
        );
        assert!(adjusted_risk_limit(1.5, 0.0).is_err());
    }

    #[test]
    fn choose_k_examples() {
        let emp = empirical_pmf(&CutRecordSet::table1()).unwrap();
        let (k, adj) = choose_k(&emp, 1000, 1e-3, 0.01).unwrap();
        assert_eq!(k, 6);
        assert_eq!(adj.s_prime, 4);
        assert!((adj.bound - 9.88e-3).abs() / 9.88e-3 < 0.02, "{adj:?}");

        let (k, adj) = choose_k(&uniform_pmf(150).unwrap(), 1000, 1e-3, 1e-9).unwrap();
        assert_eq!(k, 1);
        assert_eq!(adj.bound, 0.0);
        assert_eq!(adj.eps1, 0.0);

        assert!(choose_k(&emp, 1000, 1e-3, 0.0).is_err());
        let spike = CutSizeDistribution::point_mass(150, 3).unwrap();
        assert!(matches!(
            choose_k(&spike, 1000, 1e-3, 0.01),
            Err(KcutError::BudgetUnreachable { .. })
        ));
    }

    #[test]
    fn choose_k_is_minimal_and_monotone_in_budget() {
        let emp = empirical_pmf(&CutRecordSet::table1()).unwrap();
        let sweep = sweep_k(&emp, 1000, 1e-3, 20, BoundForm::MaxRatio).unwrap();
        let mut prev_k = usize::MAX;
        for budget in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.05] {
            let (k, _) = choose_k(&emp, 1000, 1e-3, budget).unwrap();
            let first = sweep.iter().find(|(_, a)| a.bound <= budget).unwrap().0;
            assert_eq!(k, first);
            if k > 1 {
                assert!(sweep[k - 2].1.bound > budget);
            }
            assert!(k <= prev_k);
            prev_k = k;
        }
    }

    #[test]
    fn choose_k_tight_budget_pinned() {
        // Frozen from an independent numpy/scipy sweep of the same recursion:
        // bound(k=17) = 2.84e-6, bound(k=18) = 9.17e-7.
        let emp = empirical_pmf(&CutRecordSet::table1()).unwrap();
        let sweep = sweep_k(&emp, 1000, 1e-3, 30, BoundForm::MaxRatio).unwrap();
        let expected = sweep.iter().find(|(_, a)| a.bound <= 1e-6).unwrap().0;
        let (k, _) = choose_k(&emp, 1000, 1e-3, 1e-6).unwrap();
        assert_eq!(k, expected);
        assert_eq!(k, PINNED_TIGHT_BUDGET_K);
    }

    const PINNED_TIGHT_BUDGET_K: usize = 18;
}
