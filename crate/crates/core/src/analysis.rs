//! k-fold cyclic convolution of cut distributions and divergence from uniform.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::distributions::{CutSizeDistribution, Pmf};
use crate::error::{KcutError, Result};
use crate::numeric::{compensated_sum, format_sig3, CompensatedSum};

/// Above this stack size `iterate_k` switches from direct to FFT convolution.
pub const DIRECT_CONVOLUTION_MAX_N: usize = 512;

/// Distribution of the net rotation after `k` independent cuts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationDistribution {
    k: usize,
    #[serde(flatten)]
    dist: CutSizeDistribution,
}

impl Pmf for RotationDistribution {
    fn mass(&self) -> &[f64] {
        self.dist.mass()
    }
}

impl RotationDistribution {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn distribution(&self) -> &CutSizeDistribution {
        &self.dist
    }

    pub fn into_distribution(self) -> CutSizeDistribution {
        self.dist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionMethod {
    /// Exact O(n²) accumulation with compensated sums; the reference.
    Direct,
    /// O(n log n) via FFT; must agree with `Direct` to 1e-10.
    Fft,
}

fn check_same_n(p: &impl Pmf, q: &impl Pmf) -> Result<()> {
    if p.n() != q.n() {
        return Err(KcutError::DimensionMismatch {
            left: p.n(),
            right: q.n(),
        });
    }
    Ok(())
}

/// `out[j] = Σᵢ p[i]·q[(j − i) mod n]`, computed exactly in O(n²).
pub fn convolve_cyclic(p: &impl Pmf, q: &impl Pmf) -> Result<CutSizeDistribution> {
    check_same_n(p, q)?;
    Ok(CutSizeDistribution::from_mass_unchecked(convolve_direct(
        p.mass(),
        q.mass(),
    )))
}

pub fn convolve_cyclic_fft(p: &impl Pmf, q: &impl Pmf) -> Result<CutSizeDistribution> {
    check_same_n(p, q)?;
    let mut planner = FftPlanner::new();
    Ok(CutSizeDistribution::from_mass_unchecked(convolve_fft(
        &mut planner,
        p.mass(),
        q.mass(),
    )))
}

fn convolve_direct(p: &[f64], q: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut acc = vec![CompensatedSum::new(); n];
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (d, &qd) in q.iter().enumerate() {
            let j = if i + d >= n { i + d - n } else { i + d };
            acc[j].add(pi * qd);
        }
    }
    acc.iter().map(CompensatedSum::value).collect()
}

fn convolve_fft(planner: &mut FftPlanner<f64>, p: &[f64], q: &[f64]) -> Vec<f64> {
    let n = p.len();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = p.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let mut b: Vec<Complex<f64>> = q.iter().map(|&x| Complex::new(x, 0.0)).collect();
    forward.process(&mut a);
    forward.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= *y;
    }
    inverse.process(&mut a);
    let scale = 1.0 / n as f64;
    clean_probabilities(a.iter().map(|c| c.re * scale).collect())
}

/// Clamp FFT round-off below zero and renormalize.
fn clean_probabilities(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let total = compensated_sum(v.iter().copied());
    for x in v.iter_mut() {
        *x /= total;
    }
    v
}

/// k-fold cyclic self-convolution: the distribution of `(t₁ + … + t_k) mod n`.
pub fn iterate_k(p: &CutSizeDistribution, k: usize) -> Result<RotationDistribution> {
    let method = if p.n() <= DIRECT_CONVOLUTION_MAX_N {
        ConvolutionMethod::Direct
    } else {
        ConvolutionMethod::Fft
    };
    iterate_k_with(p, k, method)
}

/// Repeated squaring with the chosen pairwise convolution.
pub fn iterate_k_with(
    p: &CutSizeDistribution,
    k: usize,
    method: ConvolutionMethod,
) -> Result<RotationDistribution> {
    if k == 0 {
        return Err(KcutError::invalid("k must be at least 1"));
    }
    let mut planner = FftPlanner::new();
    let mut conv = |a: &[f64], b: &[f64]| match method {
        ConvolutionMethod::Direct => convolve_direct(a, b),
        ConvolutionMethod::Fft => convolve_fft(&mut planner, a, b),
    };

    let mut result: Option<Vec<f64>> = None;
    let mut power = p.mass().to_vec();
    let mut remaining = k;
    loop {
        if remaining & 1 == 1 {
            result = Some(match result {
                None => power.clone(),
                Some(r) => conv(&r, &power),
            });
        }
        remaining >>= 1;
        if remaining == 0 {
            break;
        }
        power = conv(&power, &power);
    }
    Ok(RotationDistribution {
        k,
        dist: CutSizeDistribution::from_mass_unchecked(result.expect("k >= 1")),
    })
}

/// One more cut: the rotation after `k + 1` cuts from the rotation after `k`.
pub fn iterate_k_step(
    rotation: &RotationDistribution,
    source: &CutSizeDistribution,
) -> Result<RotationDistribution> {
    check_same_n(rotation, source)?;
    Ok(RotationDistribution {
        k: rotation.k + 1,
        dist: CutSizeDistribution::from_mass_unchecked(convolve_direct(
            rotation.mass(),
            source.mass(),
        )),
    })
}

/// k − 1 sequential direct convolutions. Slow; the oracle for `iterate_k`.
pub fn iterate_k_reference(p: &CutSizeDistribution, k: usize) -> Result<RotationDistribution> {
    if k == 0 {
        return Err(KcutError::invalid("k must be at least 1"));
    }
    let mut r = p.mass().to_vec();
    for _ in 1..k {
        r = convolve_direct(&r, p.mass());
    }
    Ok(RotationDistribution {
        k,
        dist: CutSizeDistribution::from_mass_unchecked(r),
    })
}

/// `max_E (P[E] − Q[E]) = Σᵢ max(0, pᵢ − qᵢ)`.
pub fn variation_distance(p: &impl Pmf, q: &impl Pmf) -> Result<f64> {
    check_same_n(p, q)?;
    Ok(compensated_sum(
        p.mass()
            .iter()
            .zip(q.mass())
            .map(|(a, b)| (a - b).max(0.0)),
    ))
}

/// Variation distance from the uniform distribution on the same stack.
pub fn variation_distance_from_uniform(p: &impl Pmf) -> f64 {
    let u = 1.0 / p.n() as f64;
    compensated_sum(p.mass().iter().map(|a| (a - u).max(0.0)))
}

/// `n · maxᵢ pᵢ − 1`: worst-case per-ballot inflation over uniform.
pub fn epsilon_ratio(p: &impl Pmf) -> f64 {
    let max = p.mass().iter().copied().fold(0.0, f64::max);
    p.n() as f64 * max - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub k: usize,
    pub vd: f64,
    pub eps: f64,
}

impl DivergenceReport {
    pub fn of(r: &RotationDistribution) -> Self {
        Self {
            k: r.k(),
            vd: variation_distance_from_uniform(r),
            eps: epsilon_ratio(r),
        }
    }
}

/// Divergence rows for one source distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceColumn {
    pub model: String,
    pub rows: Vec<DivergenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub n: usize,
    pub k_max: usize,
    pub columns: Vec<ConvergenceColumn>,
}

/// A labelled source distribution for the convergence table.
#[derive(Debug, Clone)]
pub struct Source {
    pub label: String,
    pub dist: Arc<CutSizeDistribution>,
}

impl Source {
    pub fn new(label: impl Into<String>, dist: CutSizeDistribution) -> Self {
        Self {
            label: label.into(),
            dist: Arc::new(dist),
        }
    }
}

/// Divergence from uniform for every source and every `k` in `1..=k_max`.
/// Sources are evaluated in parallel; output order follows input order.
pub fn convergence_table(sources: &[Source], k_max: usize) -> Result<ConvergenceTable> {
    let first = sources
        .first()
        .ok_or_else(|| KcutError::invalid("no source distributions"))?;
    if k_max == 0 {
        return Err(KcutError::invalid("k_max must be at least 1"));
    }
    let n = first.dist.n();
    if let Some(bad) = sources.iter().find(|s| s.dist.n() != n) {
        return Err(KcutError::DimensionMismatch {
            left: n,
            right: bad.dist.n(),
        });
    }
    let columns = sources
        .par_iter()
        .map(|src| ConvergenceColumn {
            model: src.label.clone(),
            rows: divergence_sweep(&src.dist, k_max),
        })
        .collect();
    Ok(ConvergenceTable { n, k_max, columns })
}

/// Divergence reports for `k = 1..=k_max`, convolving one cut at a time.
pub fn divergence_sweep(p: &CutSizeDistribution, k_max: usize) -> Vec<DivergenceReport> {
    let mut rows = Vec::with_capacity(k_max);
    let mut current = p.mass().to_vec();
    for k in 1..=k_max {
        if k > 1 {
            current = convolve_direct(&current, p.mass());
        }
        let r = RotationDistribution {
            k,
            dist: CutSizeDistribution::from_mass_unchecked(current.clone()),
        };
        rows.push(DivergenceReport::of(&r));
    }
    rows
}

impl ConvergenceTable {
    pub fn column(&self, model: &str) -> Option<&ConvergenceColumn> {
        self.columns.iter().find(|c| c.model == model)
    }

    /// `(model, k)` pairs where vd increased from `k` to `k + 1`.
    pub fn monotonicity_violations(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for col in &self.columns {
            for w in col.rows.windows(2) {
                if w[1].vd > w[0].vd {
                    out.push((col.model.clone(), w[0].k));
                }
            }
        }
        out
    }

    /// Long-format CSV with columns `k,model,vd,eps`; values at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,model,vd,eps\n");
        for k in 1..=self.k_max {
            for col in &self.columns {
                let r = &col.rows[k - 1];
                out.push_str(&format!("{},{},{:e},{:e}\n", r.k, col.model, r.vd, r.eps));
            }
        }
        out
    }

    /// Markdown table: one row per `k`, vd columns then eps columns, 3 significant figures.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| k |");
        for col in &self.columns {
            out.push_str(&format!(" vd {} |", col.model));
        }
        for col in &self.columns {
            out.push_str(&format!(" eps {} |", col.model));
        }
        out.push_str("\n|---:|");
        for _ in 0..2 * self.columns.len() {
            out.push_str("---:|");
        }
        out.push('\n');
        for k in 1..=self.k_max {
            out.push_str(&format!("| {k} |"));
            for col in &self.columns {
                out.push_str(&format!(" {} |", format_sig3(col.rows[k - 1].vd)));
            }
            for col in &self.columns {
                out.push_str(&format!(" {} |", format_sig3(col.rows[k - 1].eps)));
            }
            out.push('\n');
        }
        out
    }
}

/// Variation distances at or below this are treated as exactly uniform.
pub const VD_NUMERICAL_ZERO: f64 = 1e-15;

/// Successive ratios `vd_{k+1} / vd_k`; `None` where `vd_k` is (numerically) zero.
pub fn empirical_rate(column: &ConvergenceColumn) -> Result<Vec<Option<f64>>> {
    if column.rows.len() < 3 {
        return Err(KcutError::invalid(format!(
            "need at least 3 rows to estimate a rate, got {}",
            column.rows.len()
        )));
    }
    Ok(column
        .rows
        .windows(2)
        .map(|w| (w[0].vd > VD_NUMERICAL_ZERO).then(|| w[1].vd / w[0].vd))
        .collect())
}
