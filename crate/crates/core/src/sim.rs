//! Monte Carlo checks: simulated k-cut draws, empirical convergence, and the
//! paired switched-ballot experiment.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::iterate_k;
use crate::audit::{AuditEngine, ContestDefinition};
use crate::distributions::{CutSizeDistribution, Pmf};
use crate::error::{KcutError, Result};
use crate::numeric::CompensatedSum;
use crate::risk::{adjustment_bound, adjustment_bound_vd, switched_ballot_quantile, DEFAULT_EPS1_TARGET};
use crate::rng::{GeneratorSpec, Xorshift64Star};

pub const MIN_CONVERGENCE_TRIALS: u64 = 10_000;

/// Inverse-CDF sampler over a cut-size pmf.
#[derive(Debug, Clone)]
pub struct CutSampler {
    cdf: Vec<f64>,
    last_positive: usize,
}

impl CutSampler {
    pub fn new(model: &CutSizeDistribution) -> Self {
        let mut acc = CompensatedSum::new();
        let cdf: Vec<f64> = model
            .mass()
            .iter()
            .map(|&p| {
                acc.add(p);
                acc.value()
            })
            .collect();
        let last_positive = model.mass().iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Self { cdf, last_positive }
    }

    pub fn n(&self) -> usize {
        self.cdf.len()
    }

    #[inline]
    pub fn sample(&self, rng: &mut Xorshift64Star) -> usize {
        let u = rng.next_f64();
        self.cdf.partition_point(|&c| c <= u).min(self.last_positive)
    }
}

/// One cut size drawn from `model`.
pub fn sample_cut(model: &CutSizeDistribution, rng: &mut Xorshift64Star) -> usize {
    CutSampler::new(model).sample(rng)
}

/// Simulates k-cut on a physical stack of `n` ballots labelled 0..n.
#[derive(Debug, Clone)]
pub struct KCutSimulator {
    sampler: CutSampler,
    k: usize,
    stack: VecDeque<u32>,
}

impl KCutSimulator {
    pub fn new(model: &CutSizeDistribution, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(KcutError::invalid("k must be positive"));
        }
        let n = model.n();
        if n > u32::MAX as usize {
            return Err(KcutError::invalid("stack too large to simulate"));
        }
        Ok(Self {
            sampler: CutSampler::new(model),
            k,
            stack: (0..n as u32).collect(),
        })
    }

    /// Original position of the ballot left on top after k cuts.
    ///
    /// Computed both as the modular sum of cut sizes and by rotating the
    /// explicit stack; the two must agree.
    pub fn draw(&mut self, rng: &mut Xorshift64Star) -> usize {
        let n = self.stack.len();
        let mut sum = 0usize;
        for _ in 0..self.k {
            let t = self.sampler.sample(rng);
            sum = (sum + t) % n;
            // Moving the top t ballots to the bottom.
            self.stack.rotate_left(t % n);
        }
        let top = self.stack[0] as usize;
        assert_eq!(top, sum, "rotation and modular sum disagree");
        self.stack.rotate_right(sum);
        sum
    }
}

/// Position selected by one k-cut draw on a stack of `n`.
pub fn kcut_draw(n: usize, k: usize, model: &CutSizeDistribution, rng: &mut Xorshift64Star) -> Result<usize> {
    if model.n() != n {
        return Err(KcutError::DimensionMismatch { left: n, right: model.n() });
    }
    Ok(KCutSimulator::new(model, k)?.draw(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub trials: u64,
    pub estimate: f64,
    pub std_error: f64,
    /// Analytic comparator.
    pub bound: f64,
}

impl SimulationReport {
    pub fn within_bound(&self) -> bool {
        self.estimate <= self.bound + 3.0 * self.std_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceExperiment {
    pub report: SimulationReport,
    /// Empirical frequency of each position.
    pub frequencies: Vec<f64>,
    /// |estimate − exact| exceeds three standard errors.
    pub disagreement: bool,
}

/// Empirical variation distance of simulated k-cut positions from uniform,
/// against the exact value from repeated convolution.
///
/// `std_error` is the sampling scale ½·Σ √(pᵢ(1−pᵢ)/N) under the exact pmf;
/// note the estimate carries a positive noise floor of roughly 0.8 of it.
pub fn vd_convergence_experiment(
    model: &CutSizeDistribution,
    k: usize,
    trials: u64,
    gen: GeneratorSpec,
) -> Result<ConvergenceExperiment> {
    if trials < MIN_CONVERGENCE_TRIALS {
        return Err(KcutError::invalid(format!(
            "convergence experiment needs at least {MIN_CONVERGENCE_TRIALS} trials"
        )));
    }
    let exact = iterate_k(model, k)?;
    let n = model.n();
    let sim = KCutSimulator::new(model, k)?;
    let counts = position_counts(&sim, trials, gen);

    let uniform = 1.0 / n as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let estimate = 0.5 * frequencies.iter().map(|f| (f - uniform).abs()).collect::<CompensatedSum>().value();
    let std_error = 0.5
        * exact
            .mass()
            .iter()
            .map(|&p| (p * (1.0 - p) / trials as f64).sqrt())
            .collect::<CompensatedSum>()
            .value();
    let bound = crate::analysis::variation_distance_from_uniform(&exact);
    Ok(ConvergenceExperiment {
        report: SimulationReport {
            trials,
            estimate,
            std_error,
            bound,
        },
        frequencies,
        disagreement: (estimate - bound).abs() > 3.0 * std_error,
    })
}

/// Histogram of k-cut positions; trial `i` uses stream `i` of `gen.seed`.
pub fn position_counts(sim: &KCutSimulator, trials: u64, gen: GeneratorSpec) -> Vec<u64> {
    const CHUNK: u64 = 4096;
    let n = sim.stack.len();
    let chunks = trials.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut local = sim.clone();
            let mut counts = vec![0u64; n];
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let mut rng = gen.with_stream(gen.stream_id.wrapping_add(t)).stream();
                counts[local.draw(&mut rng)] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// What a switched draw is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Replacement {
    /// A ballot for the reported winner.
    WorstCaseWinner,
    /// The drawn ballot itself.
    Identity,
    /// The ballot at a fixed 0-based population position.
    FixedPosition { position: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSwitchModel {
    /// Probability that a draw is replaced.
    pub delta: f64,
    pub replacement: Replacement,
}

impl AdversarialSwitchModel {
    pub fn worst_case(delta: f64) -> Self {
        Self {
            delta,
            replacement: Replacement::WorstCaseWinner,
        }
    }
}

/// Comparator used for the analytic bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum CouplingComparator {
    /// ε₁ + (1 + nδ)^{s′} − 1 with n the population size.
    VariationDistance,
    /// ε₁ + (1 + ε₂)^{s′} − 1.
    MaxRatio { eps2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    /// Reported contest; the engine tests these reported shares.
    pub contest: ContestDefinition,
    /// Ballots actually in the population, by choice. Sums to the population size.
    pub true_tallies: BTreeMap<String, u64>,
    pub risk_limit: f64,
    /// Draws per audit.
    pub s: u64,
    pub eps1_target: f64,
    pub comparator: CouplingComparator,
}

impl CouplingConfig {
    pub fn new(contest: ContestDefinition, true_tallies: BTreeMap<String, u64>, risk_limit: f64, s: u64) -> Self {
        Self {
            contest,
            true_tallies,
            risk_limit,
            s,
            eps1_target: DEFAULT_EPS1_TARGET,
            comparator: CouplingComparator::VariationDistance,
        }
    }
}

/// Population as cumulative counts per choice.
struct Population {
    choices: Vec<String>,
    cumulative: Vec<u64>,
}

impl Population {
    fn new(config: &CouplingConfig) -> Result<Self> {
        let mut choices = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0u64;
        for (c, &v) in &config.true_tallies {
            if !config.contest.is_valid_choice(c) {
                return Err(KcutError::UnknownCandidate(c.clone()));
            }
            if v == 0 {
                continue;
            }
            total = total
                .checked_add(v)
                .ok_or_else(|| KcutError::invalid("population size overflows"))?;
            choices.push(c.clone());
            cumulative.push(total);
        }
        if total == 0 {
            return Err(KcutError::invalid("population is empty"));
        }
        Ok(Self { choices, cumulative })
    }

    fn size(&self) -> u64 {
        *self.cumulative.last().expect("non-empty")
    }

    fn choice_at(&self, position: u64) -> usize {
        self.cumulative.partition_point(|&c| c <= position)
    }

    fn first_position_of(&self, choice: &str) -> Option<u64> {
        let i = self.choices.iter().position(|c| c == choice)?;
        Some(if i == 0 { 0 } else { self.cumulative[i - 1] })
    }
}

/// Paired trials: each draws `s` uniform positions; the switched arm replaces
/// each draw with probability δ. The estimate is the mean of
/// 1[switched accepts] − 1[uniform accepts].
pub fn coupling_experiment(
    engine: &dyn AuditEngine,
    config: &CouplingConfig,
    switch: AdversarialSwitchModel,
    trials: u64,
    gen: GeneratorSpec,
) -> Result<SimulationReport> {
    config.contest.validate()?;
    if !(0.0..=1.0).contains(&switch.delta) {
        return Err(KcutError::invalid(format!("delta {} outside [0, 1]", switch.delta)));
    }
    if !(config.risk_limit > 0.0 && config.risk_limit < 1.0) {
        return Err(KcutError::invalid("risk limit must lie in (0, 1)"));
    }
    if trials < 2 || config.s == 0 {
        return Err(KcutError::invalid("need at least two trials and one draw"));
    }
    let pop = Population::new(config)?;
    let n = pop.size();
    let replacement_position = match switch.replacement {
        Replacement::WorstCaseWinner => Some(
            pop.first_position_of(&config.contest.reported_winner)
                .ok_or_else(|| KcutError::invalid("population holds no reported-winner ballot"))?,
        ),
        Replacement::Identity => None,
        Replacement::FixedPosition { position } => {
            if position >= n {
                return Err(KcutError::invalid(format!("position {position} outside population")));
            }
            Some(position)
        }
    };

    let (s_prime, eps1) = switched_ballot_quantile(config.s, switch.delta, config.eps1_target)?;
    let bound = match config.comparator {
        CouplingComparator::VariationDistance => {
            adjustment_bound_vd(s_prime, eps1, usize::try_from(n).unwrap_or(usize::MAX), switch.delta)?
        }
        CouplingComparator::MaxRatio { eps2 } => adjustment_bound(s_prime, eps1, eps2)?,
    };

    let outcomes: Vec<Result<i8>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = gen.with_stream(gen.stream_id.wrapping_add(t)).stream();
            let mut uniform = Vec::with_capacity(config.s as usize);
            let mut switched = Vec::with_capacity(config.s as usize);
            for _ in 0..config.s {
                let pos = rng.next_below(n);
                let flip = rng.chance(switch.delta);
                let c = pop.choice_at(pos);
                uniform.push(c);
                switched.push(match (flip, replacement_position) {
                    (true, Some(p)) => pop.choice_at(p),
                    _ => c,
                });
            }
            let a = run_audit(engine, config, &pop, &uniform);
            if a != run_audit(engine, config, &pop, &uniform) {
                return Err(KcutError::EngineContractViolation);
            }
            let b = if switched == uniform { a } else { run_audit(engine, config, &pop, &switched) };
            Ok(b as i8 - a as i8)
        })
        .collect();

    let mut sum = CompensatedSum::new();
    let mut sum_sq = CompensatedSum::new();
    for o in outcomes {
        let d = o? as f64;
        sum.add(d);
        sum_sq.add(d * d);
    }
    let m = trials as f64;
    let mean = sum.value() / m;
    let var = ((sum_sq.value() - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok(SimulationReport {
        trials,
        estimate: mean,
        std_error: (var / m).sqrt(),
        bound,
    })
}

/// Whether the engine accepts at some point within the given draws.
fn run_audit(engine: &dyn AuditEngine, config: &CouplingConfig, pop: &Population, draws: &[usize]) -> bool {
    let mut stats = engine.initial_statistics(&config.contest);
    if engine.accepts(&stats, config.risk_limit) {
        return true;
    }
    for &c in draws {
        engine.observe(&config.contest, &mut stats, &pop.choices[c]);
        if engine.accepts(&stats, config.risk_limit) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::BallotPollingSprt;
    use crate::distributions::{empirical_pmf, CutRecordSet};
    use std::sync::atomic::{AtomicU64, Ordering};

    fn stream(seed: u64) -> Xorshift64Star {
        GeneratorSpec::new(seed, 0).stream()
    }

    #[test]
    fn point_mass_always_returns_its_cut() {
        let m = CutSizeDistribution::point_mass(150, 7).unwrap();
        let mut rng = stream(1);
        for _ in 0..1000 {
            assert_eq!(sample_cut(&m, &mut rng), 7);
        }
    }

    #[test]
    fn single_cut_example() {
        // Stack ABCDE cut at 2 becomes CDEAB: ballot C (index 2) on top.
        let m = CutSizeDistribution::point_mass(5, 2).unwrap();
        assert_eq!(kcut_draw(5, 1, &m, &mut stream(3)).unwrap(), 2);
        let zero = CutSizeDistribution::point_mass(5, 0).unwrap();
        assert_eq!(kcut_draw(5, 4, &zero, &mut stream(3)).unwrap(), 0);
        assert_eq!(kcut_draw(5, 3, &m, &mut stream(3)).unwrap(), 1);
        assert!(kcut_draw(6, 1, &m, &mut stream(3)).is_err());
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let n = 150;
        let m = CutSizeDistribution::uniform(n).unwrap();
        let sampler = CutSampler::new(&m);
        let mut rng = stream(11);
        let draws = 100_000;
        let mut counts = vec![0u64; n];
        for _ in 0..draws {
            counts[sampler.sample(&mut rng)] += 1;
        }
        let e = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn table1_sampling_matches_proportions() {
        let recs = CutRecordSet::table1();
        let m = empirical_pmf(&recs).unwrap();
        let sampler = CutSampler::new(&m);
        let mut rng = stream(12);
        let draws = 100_000u64;
        let mut counts = vec![0u64; 150];
        for _ in 0..draws {
            counts[sampler.sample(&mut rng)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = m.get(i);
            if p == 0.0 {
                assert_eq!(c, 0, "bin {i}");
                continue;
            }
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - draws as f64 * p).abs() <= 4.0 * sigma, "bin {i}: {c}");
        }
    }

    #[test]
    fn uniform_convergence_is_at_noise_floor() {
        let m = CutSizeDistribution::uniform(150).unwrap();
        let r = vd_convergence_experiment(&m, 1, 100_000, GeneratorSpec::new(5, 0)).unwrap();
        assert!(r.report.bound.abs() < 1e-15);
        assert!(!r.disagreement, "{r:?}");
        assert!(r.report.estimate < 3.0 * r.report.std_error);
    }

    #[test]
    fn too_few_trials_rejected() {
        let m = CutSizeDistribution::uniform(10).unwrap();
        assert!(vd_convergence_experiment(&m, 1, 100, GeneratorSpec::new(5, 0)).is_err());
    }

    #[test]
    fn empirical_single_cut_distance() {
        let m = empirical_pmf(&CutRecordSet::table1()).unwrap();
        let r = vd_convergence_experiment(&m, 1, 100_000, GeneratorSpec::new(6, 0)).unwrap();
        assert!((r.report.bound - 0.247).abs() < 5e-4, "{:?}", r.report);
        assert!(!r.disagreement, "{:?}", r.report);
    }

    #[test]
    fn convergence_is_reproducible_across_thread_counts() {
        let m = empirical_pmf(&CutRecordSet::table1()).unwrap();
        let spec = GeneratorSpec::new(99, 4);
        let many = vd_convergence_experiment(&m, 3, 20_000, spec).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| vd_convergence_experiment(&m, 3, 20_000, spec).unwrap());
        assert_eq!(many, one);
    }

    fn near_margin() -> CouplingConfig {
        let contest = ContestDefinition {
            candidates: vec!["w".into(), "l".into()],
            reported_winner: "w".into(),
            reported_tallies: [("w".to_string(), 550), ("l".to_string(), 450)].into(),
            n_total: 1000,
        };
        // The reported winner actually tied.
        let truth = [("w".to_string(), 500), ("l".to_string(), 500)].into();
        CouplingConfig::new(contest, truth, 0.1, 200)
    }

    #[test]
    fn no_switching_means_no_difference() {
        let cfg = near_margin();
        let r = coupling_experiment(&BallotPollingSprt, &cfg, AdversarialSwitchModel::worst_case(0.0), 2000, GeneratorSpec::new(1, 0)).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.std_error, 0.0);
        let id = AdversarialSwitchModel {
            delta: 0.2,
            replacement: Replacement::Identity,
        };
        let r = coupling_experiment(&BallotPollingSprt, &cfg, id, 2000, GeneratorSpec::new(1, 0)).unwrap();
        assert_eq!(r.estimate, 0.0);
    }

    #[test]
    fn coupling_stays_below_bound() {
        let cfg = near_margin();
        for (delta, rule) in [
            (1e-3, Replacement::WorstCaseWinner),
            (1e-2, Replacement::WorstCaseWinner),
            (5e-3, Replacement::FixedPosition { position: 999 }),
        ] {
            let r = coupling_experiment(
                &BallotPollingSprt,
                &cfg,
                AdversarialSwitchModel { delta, replacement: rule },
                4000,
                GeneratorSpec::new(2, 0),
            )
            .unwrap();
            assert!(r.within_bound(), "delta {delta}: {r:?}");
        }
    }

    #[test]
    fn coupling_is_reproducible_across_thread_counts() {
        let cfg = near_margin();
        let sw = AdversarialSwitchModel::worst_case(0.01);
        let spec = GeneratorSpec::new(8, 0);
        let many = coupling_experiment(&BallotPollingSprt, &cfg, sw, 3000, spec).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| coupling_experiment(&BallotPollingSprt, &cfg, sw, 3000, spec).unwrap());
        assert_eq!(many, one);
        assert!(many.estimate > 0.0, "switching toward the winner should raise acceptance");
    }

    /// Engine that accepts on alternate runs.
    struct Flaky(AtomicU64);

    impl AuditEngine for Flaky {
        fn initial_statistics(&self, c: &ContestDefinition) -> Vec<crate::audit::PairStatistic> {
            self.0.fetch_add(1, Ordering::Relaxed);
            BallotPollingSprt.initial_statistics(c)
        }
        fn observe(&self, c: &ContestDefinition, s: &mut [crate::audit::PairStatistic], choice: &str) {
            BallotPollingSprt.observe(c, s, choice)
        }
        fn accepts(&self, _: &[crate::audit::PairStatistic], _: f64) -> bool {
            self.0.load(Ordering::Relaxed) & 1 == 0
        }
    }

    #[test]
    fn nondeterministic_engine_is_detected() {
        let cfg = near_margin();
        let r = coupling_experiment(&Flaky(AtomicU64::new(0)), &cfg, AdversarialSwitchModel::worst_case(0.01), 100, GeneratorSpec::new(1, 0));
        assert_eq!(r, Err(KcutError::EngineContractViolation));
    }
}
