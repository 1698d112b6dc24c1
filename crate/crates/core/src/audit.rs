//! Ballot-polling audit state under an adjusted risk limit.
//!
//! The reference engine is a Wald sequential likelihood-ratio test per
//! (reported winner, loser) pair. Engines are pluggable through
//! [`AuditEngine`]; the only contract is determinism.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KcutError, Result};
use crate::rng::{GeneratorSpec, Xorshift64Star};
use crate::risk::AuditParameters;

/// Choice recorded for blank, overvoted, or write-in ballots.
pub const INVALID_OTHER: &str = "invalid/other";

/// Default percentile of simulated completions reported as `d`.
pub const DEFAULT_EXTENSION_PERCENTILE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContestDefinition {
    pub candidates: Vec<String>,
    pub reported_winner: String,
    pub reported_tallies: BTreeMap<String, u64>,
    pub n_total: u64,
}

impl ContestDefinition {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KcutError::InvalidContest(m));
        if self.candidates.len() < 2 {
            return bad("need at least two candidates".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.candidates {
            if c.is_empty() || c == INVALID_OTHER {
                return bad(format!("reserved or empty candidate name {c:?}"));
            }
            if !seen.insert(c.as_str()) {
                return bad(format!("candidate {c:?} listed twice"));
            }
        }
        if !seen.contains(self.reported_winner.as_str()) {
            return bad(format!("reported winner {:?} is not a candidate", self.reported_winner));
        }
        if let Some(k) = self.reported_tallies.keys().find(|k| !seen.contains(k.as_str())) {
            return bad(format!("tally for unknown candidate {k:?}"));
        }
        if self.n_total == 0 {
            return bad("n_total must be positive".into());
        }
        let sum = self
            .reported_tallies
            .values()
            .try_fold(0u64, |a, v| a.checked_add(*v))
            .unwrap_or(u64::MAX);
        if sum > self.n_total {
            return bad(format!("tallies sum to {sum} > n_total {}", self.n_total));
        }
        let top = self.tally(&self.reported_winner);
        if let Some(c) = self.candidates.iter().find(|c| self.tally(c) > top) {
            return bad(format!("{c:?} has more reported votes than the reported winner"));
        }
        Ok(())
    }

    pub fn tally(&self, candidate: &str) -> u64 {
        self.reported_tallies.get(candidate).copied().unwrap_or(0)
    }

    pub fn losers(&self) -> impl Iterator<Item = &String> {
        self.candidates.iter().filter(move |c| **c != self.reported_winner)
    }

    /// Reported share of the winner among votes for the winner or `loser`.
    pub fn pair_share(&self, loser: &str) -> f64 {
        let w = self.tally(&self.reported_winner) as f64;
        let l = self.tally(loser) as f64;
        if w + l == 0.0 {
            0.5
        } else {
            w / (w + l)
        }
    }

    pub fn is_valid_choice(&self, choice: &str) -> bool {
        choice == INVALID_OTHER || self.candidates.iter().any(|c| c == choice)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotInterpretation {
    pub draw_index: u64,
    pub stack_id: String,
    pub choice: String,
}

/// One line of the interpretation log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub draw_index: u64,
    pub stack_id: String,
    pub choice: String,
    /// RFC 3339 timestamp.
    pub recorded_at: String,
}

impl InterpretationRecord {
    pub fn interpretation(&self) -> BallotInterpretation {
        BallotInterpretation {
            draw_index: self.draw_index,
            stack_id: self.stack_id.clone(),
            choice: self.choice.clone(),
        }
    }
}

/// Parse a JSON-lines interpretation log. Blank lines are skipped; draw
/// indices must strictly increase.
pub fn parse_interpretation_log(text: &str) -> Result<Vec<InterpretationRecord>> {
    let mut out: Vec<InterpretationRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InterpretationRecord =
            serde_json::from_str(line).map_err(|e| KcutError::MalformedLog {
                line: line_no,
                detail: e.to_string(),
            })?;
        if chrono::DateTime::parse_from_rfc3339(&rec.recorded_at).is_err() {
            return Err(KcutError::MalformedLog {
                line: line_no,
                detail: format!("recorded_at {:?} is not RFC 3339", rec.recorded_at),
            });
        }
        if let Some(prev) = out.last() {
            if rec.draw_index <= prev.draw_index {
                return Err(KcutError::MalformedLog {
                    line: line_no,
                    detail: format!(
                        "draw_index {} does not follow {}",
                        rec.draw_index, prev.draw_index
                    ),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn render_interpretation_log(records: &[InterpretationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditStatus {
    Continue,
    AcceptReported,
    EscalateToFullCount,
}

impl AuditStatus {
    pub fn is_terminal(self) -> bool {
        self != AuditStatus::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    KCut,
    PositionIds,
}

/// Sequential statistic for one (reported winner, loser) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatistic {
    pub winner: String,
    pub loser: String,
    /// Natural log of the likelihood ratio; `-inf` once a loser ballot is
    /// seen for a loser reported to have no votes.
    #[serde(with = "extended_float")]
    pub log_lr: f64,
}

/// Deterministic sequential audit procedure.
pub trait AuditEngine: Send + Sync {
    fn initial_statistics(&self, contest: &ContestDefinition) -> Vec<PairStatistic>;
    fn observe(&self, contest: &ContestDefinition, stats: &mut [PairStatistic], choice: &str);
    fn accepts(&self, stats: &[PairStatistic], risk_limit: f64) -> bool;
}

/// Ballot-polling sequential probability ratio test.
///
/// A ballot for the winner multiplies the pair's ratio by `s_w / 0.5`, a
/// ballot for the loser by `(1 − s_w) / 0.5`; anything else leaves it alone.
/// Accepts once every pair's ratio reaches `1 / risk_limit`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BallotPollingSprt;

impl AuditEngine for BallotPollingSprt {
    fn initial_statistics(&self, contest: &ContestDefinition) -> Vec<PairStatistic> {
        contest
            .losers()
            .map(|l| PairStatistic {
                winner: contest.reported_winner.clone(),
                loser: l.clone(),
                log_lr: 0.0,
            })
            .collect()
    }

    fn observe(&self, contest: &ContestDefinition, stats: &mut [PairStatistic], choice: &str) {
        for st in stats.iter_mut() {
            let share = contest.pair_share(&st.loser);
            if choice == st.winner {
                st.log_lr += (2.0 * share).ln();
            } else if choice == st.loser {
                st.log_lr += (2.0 * (1.0 - share)).ln();
            }
        }
    }

    fn accepts(&self, stats: &[PairStatistic], risk_limit: f64) -> bool {
        let threshold = -risk_limit.ln();
        stats.iter().all(|s| s.log_lr >= threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditState {
    pub contest: ContestDefinition,
    pub params: AuditParameters,
    /// Draw count at which the audit escalates to a full count.
    pub escalation_cap: u64,
    pub interpretations: Vec<BallotInterpretation>,
    pub test_statistics: Vec<PairStatistic>,
    pub status: AuditStatus,
}

impl AuditState {
    /// Fresh state; the escalation cap defaults to `n_total`.
    pub fn new(contest: ContestDefinition, params: AuditParameters) -> Result<Self> {
        let cap = contest.n_total;
        Self::with_escalation_cap(contest, params, cap)
    }

    pub fn with_escalation_cap(
        contest: ContestDefinition,
        params: AuditParameters,
        escalation_cap: u64,
    ) -> Result<Self> {
        contest.validate()?;
        if !(params.adjusted_alpha > 0.0 && params.adjusted_alpha < 1.0) {
            return Err(KcutError::invalid(format!(
                "adjusted risk limit {} outside (0, 1)",
                params.adjusted_alpha
            )));
        }
        if escalation_cap == 0 {
            return Err(KcutError::invalid("escalation cap must be positive"));
        }
        let test_statistics = BallotPollingSprt.initial_statistics(&contest);
        let mut state = Self {
            contest,
            params,
            escalation_cap,
            interpretations: Vec::new(),
            test_statistics,
            status: AuditStatus::Continue,
        };
        state.status = audit_status(&state);
        Ok(state)
    }

    pub fn draws(&self) -> u64 {
        self.interpretations.len() as u64
    }

    /// Draws up to `s*` use k-cut; later draws use explicit positions.
    pub fn sampling_mode(&self) -> SamplingMode {
        if self.draws() < self.params.s_star {
            SamplingMode::KCut
        } else {
            SamplingMode::PositionIds
        }
    }

    /// Consume the state and append one interpretation.
    pub fn apply(mut self, b: BallotInterpretation) -> Result<Self> {
        if self.status.is_terminal() {
            return Err(KcutError::SessionFinalized(format!("{:?}", self.status)));
        }
        if !self.contest.is_valid_choice(&b.choice) {
            return Err(KcutError::UnknownCandidate(b.choice));
        }
        if let Some(prev) = self.interpretations.last() {
            if b.draw_index <= prev.draw_index {
                return Err(KcutError::invalid(format!(
                    "draw_index {} does not follow {}",
                    b.draw_index, prev.draw_index
                )));
            }
        }
        BallotPollingSprt.observe(&self.contest, &mut self.test_statistics, &b.choice);
        self.interpretations.push(b);
        self.status = audit_status(&self);
        Ok(self)
    }

    /// Rebuild a state from its interpretation log.
    pub fn replay(
        contest: ContestDefinition,
        params: AuditParameters,
        escalation_cap: u64,
        log: impl IntoIterator<Item = BallotInterpretation>,
    ) -> Result<Self> {
        let mut state = Self::with_escalation_cap(contest, params, escalation_cap)?;
        for b in log {
            state = state.apply(b)?;
        }
        Ok(state)
    }

    /// Statistics rendered to 12 significant digits, for replay comparisons.
    pub fn statistics_digest(&self) -> String {
        self.test_statistics
            .iter()
            .map(|s| format!("{}>{}:{:.11e}", s.winner, s.loser, s.log_lr))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Append one interpretation, producing a new state.
pub fn bravo_update(state: &AuditState, b: BallotInterpretation) -> Result<AuditState> {
    state.clone().apply(b)
}

pub fn audit_status(state: &AuditState) -> AuditStatus {
    if BallotPollingSprt.accepts(&state.test_statistics, state.params.adjusted_alpha) {
        AuditStatus::AcceptReported
    } else if state.draws() >= state.escalation_cap {
        AuditStatus::EscalateToFullCount
    } else {
        AuditStatus::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionMethod {
    /// Future ballots i.i.d. with the observed sample shares.
    Multinomial,
    /// Polya urn seeded with the observed counts.
    Polya,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionEstimate {
    /// Additional draws at the requested percentile.
    pub d: u64,
    pub trials: u64,
    /// Fraction of trials that reached acceptance within the remaining ballots.
    pub completed_fraction: f64,
    /// The percentile trial hit the remaining-ballot cap without accepting.
    pub unlikely_to_complete: bool,
}

/// Monte Carlo estimate of how many more draws the audit needs, at the
/// default 90th percentile.
pub fn estimate_extension(
    state: &AuditState,
    method: ExtensionMethod,
    trials: u64,
    seed: u64,
) -> Result<ExtensionEstimate> {
    estimate_extension_at(state, method, trials, seed, DEFAULT_EXTENSION_PERCENTILE)
}

pub fn estimate_extension_at(
    state: &AuditState,
    method: ExtensionMethod,
    trials: u64,
    seed: u64,
    percentile: f64,
) -> Result<ExtensionEstimate> {
    if state.interpretations.is_empty() {
        return Err(KcutError::InsufficientData(
            "extension estimate needs at least one interpretation".into(),
        ));
    }
    if trials == 0 {
        return Err(KcutError::invalid("trials must be positive"));
    }
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(KcutError::invalid(format!("percentile {percentile} outside (0, 1]")));
    }
    if state.status == AuditStatus::AcceptReported {
        return Ok(ExtensionEstimate {
            d: 0,
            trials,
            completed_fraction: 1.0,
            unlikely_to_complete: false,
        });
    }

    // Categories: candidates in contest order, then invalid/other.
    let mut categories: Vec<&str> = state.contest.candidates.iter().map(String::as_str).collect();
    categories.push(INVALID_OTHER);
    let counts: Vec<u64> = categories
        .iter()
        .map(|c| state.interpretations.iter().filter(|b| b.choice == *c).count() as u64)
        .collect();
    let remaining = state.escalation_cap.saturating_sub(state.draws());
    let base = GeneratorSpec::new(seed, 0);

    let outcomes: Vec<Option<u64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = base.with_stream(t).stream();
            simulate_extension(state, &categories, &counts, method, remaining, &mut rng)
        })
        .collect();

    let completed = outcomes.iter().filter(|o| o.is_some()).count();
    let mut needed: Vec<u64> = outcomes.iter().map(|o| o.unwrap_or(remaining)).collect();
    needed.sort_unstable();
    let rank = ((percentile * trials as f64).ceil() as usize).clamp(1, needed.len());
    let d = needed[rank - 1];
    // Completion fraction below the percentile means the ranked trial never finished.
    let unlikely = (completed as f64) < (percentile * trials as f64);
    Ok(ExtensionEstimate {
        d,
        trials,
        completed_fraction: completed as f64 / trials as f64,
        unlikely_to_complete: unlikely,
    })
}

/// Draws needed until acceptance, or `None` if `remaining` draws do not suffice.
fn simulate_extension(
    state: &AuditState,
    categories: &[&str],
    counts: &[u64],
    method: ExtensionMethod,
    remaining: u64,
    rng: &mut Xorshift64Star,
) -> Option<u64> {
    let engine = BallotPollingSprt;
    let alpha = state.params.adjusted_alpha;
    let mut stats = state.test_statistics.clone();
    let mut urn: Vec<u64> = counts.to_vec();
    let mut urn_total: u64 = urn.iter().sum();
    for extra in 1..=remaining {
        let mut pick = rng.next_below(urn_total);
        let mut idx = 0;
        while pick >= urn[idx] {
            pick -= urn[idx];
            idx += 1;
        }
        engine.observe(&state.contest, &mut stats, categories[idx]);
        if method == ExtensionMethod::Polya {
            urn[idx] += 1;
            urn_total += 1;
        }
        if engine.accepts(&stats, alpha) {
            return Some(extra);
        }
    }
    None
}

/// Cap on k-cut draws after an extension estimate: `s + multiplier·d`.
pub fn sample_size_cap(s: u64, d: u64, multiplier: u64) -> Result<u64> {
    if !(multiplier == 2 || multiplier == 3) {
        return Err(KcutError::invalid(format!("multiplier must be 2 or 3, got {multiplier}")));
    }
    Ok(s + multiplier * d)
}

/// JSON has no infinities; write them as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if *x > 0.0 {
            s.serialize_str("Infinity")
        } else if *x < 0.0 {
            s.serialize_str("-Infinity")
        } else {
            s.serialize_str("NaN")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.as_str() {
                "Infinity" => Ok(f64::INFINITY),
                "-Infinity" => Ok(f64::NEG_INFINITY),
                "NaN" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}
