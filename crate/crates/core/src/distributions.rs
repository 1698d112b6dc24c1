//! Single-cut size distributions: construction, discretization of the
//! continuous families, and least-squares fitting to observed cut records.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KcutError, Result};
use crate::numeric::compensated_sum;
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Absolute tolerance on the total mass of a probability vector.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Coefficients `(c0, c1, c2, c3)` of the published exponential-cubic fit to
/// the bundled cut data.
pub const PUBLISHED_CUBIC: [f64; 4] = [-0.631, 8.587, -18.446, 9.428];

/// Published truncated-uniform fit: cut sizes uniform on `8..122`.
pub const PUBLISHED_TRUNCATED_UNIFORM: (usize, usize) = (8, 114);

const TABLE1_CSV: &str = include_str!("../data/table1_combined.csv");

/// Anything that is a probability vector over the `n` positions of a stack.
pub trait Pmf {
    fn mass(&self) -> &[f64];

    fn n(&self) -> usize {
        self.mass().len()
    }
}

/// Probability of each cut size `t` in `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutSizeDistribution {
    mass: Vec<f64>,
}

impl Pmf for CutSizeDistribution {
    fn mass(&self) -> &[f64] {
        &self.mass
    }
}

impl CutSizeDistribution {
    /// Validate an explicit probability vector.
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        validate_mass(&mass)?;
        Ok(Self { mass })
    }

    /// Normalize non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(KcutError::invalid("empty weight vector"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(KcutError::invalid("weights must be finite and non-negative"));
        }
        let total = compensated_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(KcutError::invalid("weights sum to zero"));
        }
        let mass: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Self::new(mass)
    }

    /// Skips validation; callers guarantee the invariant.
    pub(crate) fn from_mass_unchecked(mass: Vec<f64>) -> Self {
        debug_assert!(validate_mass(&mass).is_ok(), "invalid mass {mass:?}");
        Self { mass }
    }

    pub fn uniform(n: usize) -> Result<Self> {
        uniform_pmf(n)
    }

    pub fn point_mass(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(KcutError::invalid(format!("point mass at {at} outside 0..{n}")));
        }
        let mut mass = vec![0.0; n];
        mass[at] = 1.0;
        Ok(Self { mass })
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    pub fn get(&self, i: usize) -> f64 {
        self.mass[i]
    }
}

fn validate_mass(mass: &[f64]) -> Result<()> {
    if mass.is_empty() {
        return Err(KcutError::invalid("distribution over an empty stack"));
    }
    if let Some(bad) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(KcutError::invalid(format!("mass entry {bad} is not a probability")));
    }
    let total = compensated_sum(mass.iter().copied());
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(KcutError::invalid(format!("mass sums to {total}, not 1")));
    }
    Ok(())
}

pub fn uniform_pmf(n: usize) -> Result<CutSizeDistribution> {
    if n == 0 {
        return Err(KcutError::invalid("uniform distribution needs n >= 1"));
    }
    Ok(CutSizeDistribution {
        mass: vec![1.0 / n as f64; n],
    })
}

/// Observed number of cuts of each size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutRecordSet {
    counts: Vec<u64>,
    total: u64,
}

impl CutRecordSet {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(KcutError::invalid("cut records over an empty stack"));
        }
        let total = counts
            .iter()
            .try_fold(0u64, |acc, c| acc.checked_add(*c))
            .ok_or_else(|| KcutError::MalformedRecords("count total overflows".into()))?;
        Ok(Self { counts, total })
    }

    /// The bundled two-cutter data set: 1680 cuts of a 150-ballot stack.
    pub fn table1() -> Self {
        Self::parse_csv(TABLE1_CSV, Some(150)).expect("bundled cut data is well-formed")
    }

    /// Parse `cut_size,count` CSV. Sizes not listed count as zero. When `n`
    /// is `None` the stack size is one more than the largest listed size.
    pub fn parse_csv(text: &str, n: Option<usize>) -> Result<Self> {
        let bad = |msg: String| KcutError::MalformedRecords(msg);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.len() != 2 || &headers[0] != "cut_size" || &headers[1] != "count" {
            return Err(bad(format!("expected header `cut_size,count`, got {headers:?}")));
        }

        let mut rows: Vec<(usize, u64)> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != 2 {
                return Err(bad(format!("row {}: expected 2 fields", line + 2)));
            }
            let size: usize = record[0]
                .parse()
                .map_err(|_| bad(format!("row {}: bad cut size {:?}", line + 2, &record[0])))?;
            let count: u64 = record[1]
                .parse()
                .map_err(|_| bad(format!("row {}: bad count {:?}", line + 2, &record[1])))?;
            rows.push((size, count));
        }

        let inferred = rows.iter().map(|(s, _)| s + 1).max().unwrap_or(0);
        let n = n.unwrap_or(inferred);
        if n == 0 {
            return Err(bad("no rows and no stack size".into()));
        }
        // Bound the allocation before trusting a size from the input.
        if n > 10_000_000 {
            return Err(bad(format!("stack size {n} is implausibly large")));
        }
        let mut counts = vec![0u64; n];
        let mut seen = vec![false; n];
        for (size, count) in rows {
            if size >= n {
                return Err(bad(format!("cut size {size} outside stack of {n}")));
            }
            if std::mem::replace(&mut seen[size], true) {
                return Err(bad(format!("cut size {size} listed twice")));
            }
            counts[size] = count;
        }
        Self::new(counts)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cut_size,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{i},{c}\n"));
        }
        out
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

pub fn empirical_pmf(records: &CutRecordSet) -> Result<CutSizeDistribution> {
    if records.total == 0 {
        return Err(KcutError::EmptyRecords);
    }
    let total = records.total as f64;
    let mass = records.counts.iter().map(|&c| c as f64 / total).collect();
    CutSizeDistribution::new(mass)
}

/// Parametric single-cut model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ContinuousCutModel {
    /// Cut sizes uniform on `w..w+b`.
    TruncatedUniform { w: usize, b: usize },
    /// Relative density `exp(c0 + c1 τ + c2 τ² + c3 τ³)` on `(0, 1)`.
    ExponentialCubic { coeffs: [f64; 4] },
}

impl ContinuousCutModel {
    pub fn published_truncated_uniform() -> Self {
        let (w, b) = PUBLISHED_TRUNCATED_UNIFORM;
        ContinuousCutModel::TruncatedUniform { w, b }
    }

    pub fn published_cubic() -> Self {
        ContinuousCutModel::ExponentialCubic {
            coeffs: PUBLISHED_CUBIC,
        }
    }
}

fn cubic(coeffs: &[f64; 4], tau: f64) -> f64 {
    coeffs[0] + tau * (coeffs[1] + tau * (coeffs[2] + tau * coeffs[3]))
}

/// `exp(c0 + c1 τ + c2 τ² + c3 τ³)` for `τ` strictly inside `(0, 1)`.
pub fn eval_cubic_density(coeffs: &[f64; 4], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(KcutError::invalid(format!("relative cut size {tau} outside (0, 1)")));
    }
    let d = cubic(coeffs, tau).exp();
    if !(d.is_finite() && d > 0.0) {
        return Err(KcutError::invalid(format!("density overflows at τ={tau}")));
    }
    Ok(d)
}

/// Discretize onto `n` cut sizes. The cubic family is evaluated at bin
/// midpoints `(i + 0.5) / n` and renormalized.
pub fn discretize(model: &ContinuousCutModel, n: usize) -> Result<CutSizeDistribution> {
    if n == 0 {
        return Err(KcutError::invalid("stack size must be at least 1"));
    }
    match *model {
        ContinuousCutModel::TruncatedUniform { w, b } => {
            if b == 0 || w.checked_add(b).is_none_or(|end| end > n) {
                return Err(KcutError::ModelOutOfRange {
                    n,
                    detail: format!("window w={w}, b={b}"),
                });
            }
            let mut mass = vec![0.0; n];
            mass[w..w + b].fill(1.0 / b as f64);
            Ok(CutSizeDistribution::from_mass_unchecked(mass))
        }
        ContinuousCutModel::ExponentialCubic { coeffs } => {
            let mass = cubic_bin_mass(&coeffs, n).ok_or_else(|| KcutError::ModelOutOfRange {
                n,
                detail: format!("density exp(f) not finite and positive for {coeffs:?}"),
            })?;
            Ok(CutSizeDistribution::from_mass_unchecked(mass))
        }
    }
}

/// Normalized midpoint masses, or `None` if the density is degenerate.
fn cubic_bin_mass(coeffs: &[f64; 4], n: usize) -> Option<Vec<f64>> {
    let logs: Vec<f64> = (0..n)
        .map(|i| cubic(coeffs, (i as f64 + 0.5) / n as f64))
        .collect();
    if logs.iter().any(|l| !l.is_finite()) {
        return None;
    }
    // Shift by the max log so extreme coefficients do not overflow.
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total = compensated_sum(weights.iter().copied());
    if !(total.is_finite() && total > 0.0) {
        return None;
    }
    Some(weights.into_iter().map(|w| w / total).collect())
}

/// Exhaustive least-squares search over all windows `(w, b)`.
///
/// Objective: sum of squared pmf differences. Ties go to the smaller `b`,
/// then the smaller `w`.
pub fn fit_truncated_uniform(emp: &CutSizeDistribution) -> ContinuousCutModel {
    let (w, b, _) = truncated_uniform_search(emp);
    ContinuousCutModel::TruncatedUniform { w, b }
}

/// Returns `(w, b, sse)` of the best window.
pub fn truncated_uniform_search(emp: &CutSizeDistribution) -> (usize, usize, f64) {
    let e = emp.mass();
    let n = e.len();
    // SSE(w,b) = Σe² − 2·S(w,b)/b + 1/b, with S the window mass.
    let sum_sq = compensated_sum(e.iter().map(|x| x * x));
    let mut prefix = vec![0.0; n + 1];
    let mut acc = crate::numeric::CompensatedSum::new();
    for (i, x) in e.iter().enumerate() {
        acc.add(*x);
        prefix[i + 1] = acc.value();
    }

    let mut best = (0usize, n, f64::INFINITY);
    for b in 1..=n {
        let inv_b = 1.0 / b as f64;
        for w in 0..=(n - b) {
            let window = prefix[w + b] - prefix[w];
            let sse = (sum_sq - 2.0 * window * inv_b + inv_b).max(0.0);
            // Strict improvement beyond rounding noise keeps the tie-break order.
            if sse < best.2 - 1e-15 {
                best = (w, b, sse);
            }
        }
    }
    best
}

/// Result of fitting the exponential-cubic family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CubicFit {
    pub coeffs: [f64; 4],
    /// Sum of squared relative-density errors over the bins.
    pub sse: f64,
    pub evaluations: usize,
}

impl CubicFit {
    pub fn model(&self) -> ContinuousCutModel {
        ContinuousCutModel::ExponentialCubic {
            coeffs: self.coeffs,
        }
    }
}

pub fn fit_exponential_cubic(emp: &CutSizeDistribution) -> Result<ContinuousCutModel> {
    Ok(fit_exponential_cubic_detailed(emp)?.model())
}

/// Least-squares fit of the relative density `n·mass` by simplex search,
/// multi-started from the log-linear fit of the nonzero bins.
pub fn fit_exponential_cubic_detailed(emp: &CutSizeDistribution) -> Result<CubicFit> {
    let e = emp.mass();
    let n = e.len();
    let nonzero = e.iter().filter(|m| **m > 0.0).count();
    if nonzero < 4 {
        return Err(KcutError::UnderdeterminedFit { nonzero, needed: 4 });
    }
    let nf = n as f64;
    let target: Vec<f64> = e.iter().map(|m| nf * m).collect();

    let objective = |c: &[f64]| -> f64 {
        let coeffs = [c[0], c[1], c[2], c[3]];
        match cubic_bin_mass(&coeffs, n) {
            Some(mass) => compensated_sum(
                mass.iter()
                    .zip(&target)
                    .map(|(m, t)| (nf * m - t).powi(2)),
            ),
            None => f64::INFINITY,
        }
    };

    let log_linear = log_linear_start(e);
    let mut starts = vec![log_linear, [0.0; 4]];
    // Perturbed copies of the log-linear start guard against a poor basin.
    for (i, scale) in [1.0, -1.0, 2.0, -2.0].iter().enumerate() {
        let mut s = log_linear;
        s[1 + i % 3] += 2.0 * scale;
        starts.push(s);
    }

    let opts = NelderMeadOptions::default();
    let step = [0.5, 2.0, 4.0, 4.0];
    let mut best: Option<crate::optim::Minimum> = None;
    let mut evaluations = 0;
    for start in &starts {
        let m = nelder_mead(objective, start, &step, &opts);
        evaluations += m.evaluations;
        if best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one start");
    let mut coeffs = [best.x[0], best.x[1], best.x[2], best.x[3]];
    // The discretized fit is invariant to c0; pin it so the midpoint-rule
    // integral of the density over (0,1) is one.
    let mean_density = compensated_sum(
        (0..n).map(|i| cubic(&coeffs, (i as f64 + 0.5) / nf).exp()),
    ) / nf;
    coeffs[0] -= mean_density.ln();
    Ok(CubicFit {
        coeffs,
        sse: best.value,
        evaluations,
    })
}

/// Ordinary least-squares cubic through `ln(n·mass)` of the nonzero bins.
fn log_linear_start(e: &[f64]) -> [f64; 4] {
    let n = e.len() as f64;
    let pts: Vec<(f64, f64)> = e
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > 0.0)
        .map(|(i, m)| ((i as f64 + 0.5) / n, (n * m).ln()))
        .collect();
    let design = DMatrix::from_fn(pts.len(), 4, |r, c| pts[r].0.powi(c as i32));
    let rhs = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map(|x| [x[0], x[1], x[2], x[3]])
        .unwrap_or([0.0; 4])
}

/// Mean absolute and mean squared error between relative densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelError {
    pub mae: f64,
    pub mse: f64,
}

/// Compare a model's discretized relative density `n·mass` against the
/// empirical one, bin by bin.
pub fn model_error(model: &ContinuousCutModel, emp: &CutSizeDistribution) -> Result<ModelError> {
    let n = emp.n();
    let fitted = discretize(model, n)?;
    density_error(&fitted, emp)
}

pub fn density_error(p: &CutSizeDistribution, q: &CutSizeDistribution) -> Result<ModelError> {
    if p.n() != q.n() {
        return Err(KcutError::DimensionMismatch {
            left: p.n(),
            right: q.n(),
        });
    }
    let nf = p.n() as f64;
    let diffs: Vec<f64> = p
        .mass()
        .iter()
        .zip(q.mass())
        .map(|(a, b)| nf * a - nf * b)
        .collect();
    Ok(ModelError {
        mae: compensated_sum(diffs.iter().map(|d| d.abs())) / nf,
        mse: compensated_sum(diffs.iter().map(|d| d * d)) / nf,
    })
}

/// A fitted parametric model with its least-squares objective and error
/// against the empirical density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: ContinuousCutModel,
    pub sse: f64,
    pub error: ModelError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n: usize,
    pub total: u64,
    pub truncated_uniform: FittedModel,
    pub exponential_cubic: FittedModel,
}

/// Fit both parametric families to a set of cut records.
pub fn fit_report(records: &CutRecordSet) -> Result<FitReport> {
    let emp = empirical_pmf(records)?;
    let (w, b, sse) = truncated_uniform_search(&emp);
    let tu = ContinuousCutModel::TruncatedUniform { w, b };
    let cubic = fit_exponential_cubic_detailed(&emp)?;
    let cm = cubic.model();
    Ok(FitReport {
        n: records.n(),
        total: records.total(),
        truncated_uniform: FittedModel { model: tu, sse, error: model_error(&tu, &emp)? },
        exponential_cubic: FittedModel { model: cm, sse: cubic.sse, error: model_error(&cm, &emp)? },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_pmf() -> CutSizeDistribution {
        empirical_pmf(&CutRecordSet::table1()).unwrap()
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_pmf(2).unwrap().mass(), &[0.5, 0.5]);
        assert_eq!(uniform_pmf(1).unwrap().mass(), &[1.0]);
        let u = uniform_pmf(150).unwrap();
        assert!(u.mass().iter().all(|m| (*m - 1.0 / 150.0).abs() < 1e-18));
        assert!(matches!(uniform_pmf(0), Err(KcutError::InvalidArgument(_))));
    }

    #[test]
    fn table1_bundled_counts() {
        let rec = CutRecordSet::table1();
        assert_eq!(rec.n(), 150);
        assert_eq!(rec.total(), 1680);
        let emp = table1_pmf();
        assert_eq!(emp.get(3), 2.0 / 1680.0);
        let (argmax, max) = emp
            .mass()
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, m)| if *m > acc.1 { (i, *m) } else { acc });
        assert_eq!(argmax, 49);
        assert_eq!(max, 28.0 / 1680.0);
    }

    #[test]
    fn empirical_symmetric_and_empty() {
        let rec = CutRecordSet::new(vec![1, 1]).unwrap();
        assert_eq!(empirical_pmf(&rec).unwrap().mass(), &[0.5, 0.5]);
        let empty = CutRecordSet::new(vec![0, 0, 0]).unwrap();
        assert_eq!(empirical_pmf(&empty), Err(KcutError::EmptyRecords));
    }

    #[test]
    fn csv_missing_sizes_are_zero() {
        let rec = CutRecordSet::parse_csv("cut_size,count\n1,3\n4,1\n", None).unwrap();
        assert_eq!(rec.counts(), &[0, 3, 0, 0, 1]);
        let rec = CutRecordSet::parse_csv("cut_size,count\n1,3\n", Some(6)).unwrap();
        assert_eq!(rec.n(), 6);
    }

    #[test]
    fn csv_errors() {
        for text in [
            "",
            "size,count\n1,2\n",
            "cut_size,count\n1,2\n1,3\n",
            "cut_size,count\n1,-2\n",
            "cut_size,count\nx,2\n",
            "cut_size,count\n",
        ] {
            assert!(CutRecordSet::parse_csv(text, None).is_err(), "{text:?}");
        }
        assert!(CutRecordSet::parse_csv("cut_size,count\n9,1\n", Some(5)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rec = CutRecordSet::table1();
        assert_eq!(CutRecordSet::parse_csv(&rec.to_csv(), None).unwrap(), rec);
        assert_eq!(rec.to_csv(), TABLE1_CSV);
    }

    #[test]
    fn discretize_truncated_uniform() {
        let d = discretize(&ContinuousCutModel::TruncatedUniform { w: 8, b: 114 }, 150).unwrap();
        assert_eq!(d.get(7), 0.0);
        assert_eq!(d.get(8), 1.0 / 114.0);
        assert_eq!(d.get(121), 1.0 / 114.0);
        assert_eq!(d.get(122), 0.0);
        let full = discretize(&ContinuousCutModel::TruncatedUniform { w: 0, b: 37 }, 37).unwrap();
        assert_eq!(full, uniform_pmf(37).unwrap());
        let err = discretize(&ContinuousCutModel::TruncatedUniform { w: 40, b: 114 }, 150);
        assert!(matches!(err, Err(KcutError::ModelOutOfRange { .. })));
        let err = discretize(&ContinuousCutModel::TruncatedUniform { w: 0, b: 0 }, 150);
        assert!(matches!(err, Err(KcutError::ModelOutOfRange { .. })));
    }

    #[test]
    fn discretize_cubic_matches_midpoint_oracle() {
        let n = 150;
        let d = discretize(&ContinuousCutModel::published_cubic(), n).unwrap();
        // Independent oracle: direct powers, plain exp, separate normalization.
        let [c0, c1, c2, c3] = PUBLISHED_CUBIC;
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) / n as f64;
                (c0 + c1 * t + c2 * t.powi(2) + c3 * t.powi(3)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        for (i, (got, r)) in d.mass().iter().zip(&raw).enumerate() {
            assert!((got - r / z).abs() < 1e-15, "bin {i}");
        }
        let argmax = d
            .mass()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((40..=50).contains(&argmax), "mode at {argmax}");
    }

    #[test]
    fn cubic_density_examples() {
        let near_zero = eval_cubic_density(&PUBLISHED_CUBIC, 1e-12).unwrap();
        assert!((near_zero - (-0.631f64).exp()).abs() < 1e-9);
        assert!((near_zero - 0.532).abs() < 5e-4);
        let near_one = eval_cubic_density(&PUBLISHED_CUBIC, 1.0 - 1e-12).unwrap();
        assert!((near_one - (-1.062f64).exp()).abs() < 1e-9);
        assert!((near_one - 0.346).abs() < 5e-4);
        assert_eq!(eval_cubic_density(&[0.0; 4], 0.5).unwrap(), 1.0);
        for tau in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(eval_cubic_density(&PUBLISHED_CUBIC, tau).is_err());
        }
    }

    #[test]
    fn fit_truncated_uniform_examples() {
        assert_eq!(
            fit_truncated_uniform(&table1_pmf()),
            ContinuousCutModel::TruncatedUniform { w: 8, b: 114 }
        );
        assert_eq!(
            fit_truncated_uniform(&uniform_pmf(150).unwrap()),
            ContinuousCutModel::TruncatedUniform { w: 0, b: 150 }
        );
        let spike = CutSizeDistribution::point_mass(20, 5).unwrap();
        assert_eq!(
            fit_truncated_uniform(&spike),
            ContinuousCutModel::TruncatedUniform { w: 5, b: 1 }
        );
    }

    /// Direct O(n³) evaluation of every window, independent of the prefix-sum route.
    fn grid_oracle(e: &[f64]) -> (usize, usize) {
        let n = e.len();
        let mut best = (0, 0, f64::INFINITY);
        for b in 1..=n {
            for w in 0..=(n - b) {
                let sse: f64 = (0..n)
                    .map(|i| {
                        let m = if (w..w + b).contains(&i) { 1.0 / b as f64 } else { 0.0 };
                        (m - e[i]).powi(2)
                    })
                    .sum();
                if sse < best.2 - 1e-15 {
                    best = (w, b, sse);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn grid_search_agrees_with_direct_oracle() {
        let spike = CutSizeDistribution::point_mass(20, 5).unwrap();
        assert_eq!(grid_oracle(spike.mass()), (5, 1));
        let emp = table1_pmf();
        let (w, b, _) = truncated_uniform_search(&emp);
        assert_eq!(grid_oracle(emp.mass()), (w, b));
        let lumpy = CutSizeDistribution::from_weights(&[1.0, 3.0, 3.0, 2.0, 0.0, 1.0, 5.0, 1.0]).unwrap();
        let (w, b, _) = truncated_uniform_search(&lumpy);
        assert_eq!(grid_oracle(lumpy.mass()), (w, b));
    }

    #[test]
    fn model_error_matches_published_metrics() {
        let emp = table1_pmf();
        let tu = model_error(&ContinuousCutModel::published_truncated_uniform(), &emp).unwrap();
        assert!((tu.mae - 0.384).abs() <= 0.02, "{tu:?}");
        assert!((tu.mse - 0.224).abs() <= 0.02, "{tu:?}");
        let ec = model_error(&ContinuousCutModel::published_cubic(), &emp).unwrap();
        assert!((ec.mae - 0.265).abs() <= 0.02, "{ec:?}");
        assert!((ec.mse - 0.114).abs() <= 0.02, "{ec:?}");
        let own = discretize(&ContinuousCutModel::published_cubic(), 150).unwrap();
        let zero = model_error(&ContinuousCutModel::published_cubic(), &own).unwrap();
        assert!(zero.mae < 1e-12 && zero.mse < 1e-24);
        let small = uniform_pmf(10).unwrap();
        assert!(matches!(
            density_error(&small, &emp),
            Err(KcutError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cubic_fit_on_table1() {
        let emp = table1_pmf();
        let fit = fit_exponential_cubic_detailed(&emp).unwrap();
        let err = model_error(&fit.model(), &emp).unwrap();
        assert!(err.mae <= 0.30, "{err:?}");
        assert!(err.mse <= 0.15, "{err:?}");
        // Least squares cannot do worse than the published coefficients on its own objective.
        let published = model_error(&ContinuousCutModel::published_cubic(), &emp).unwrap();
        assert!(err.mse <= published.mse + 1e-9, "{err:?} vs {published:?}");
    }

    #[test]
    fn cubic_fit_on_uniform_is_flat() {
        let fit = fit_exponential_cubic(&uniform_pmf(150).unwrap()).unwrap();
        let ContinuousCutModel::ExponentialCubic { coeffs } = fit else { unreachable!() };
        for i in 1..200 {
            let d = eval_cubic_density(&coeffs, i as f64 / 200.0).unwrap();
            assert!((d - 1.0).abs() < 0.05, "τ={} d={d}", i as f64 / 200.0);
        }
    }

    #[test]
    fn cubic_fit_round_trip() {
        let truth = ContinuousCutModel::ExponentialCubic {
            coeffs: [0.5, 1.0, -2.0, 0.5],
        };
        let emp = discretize(&truth, 150).unwrap();
        let fit = fit_exponential_cubic(&emp).unwrap();
        let err = model_error(&fit, &emp).unwrap();
        assert!(err.mae <= 0.02, "{err:?}");
    }

    #[test]
    fn cubic_fit_needs_four_bins() {
        let sparse = CutSizeDistribution::from_weights(&[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            fit_exponential_cubic(&sparse),
            Err(KcutError::UnderdeterminedFit { nonzero: 3, needed: 4 })
        );
    }
}
