//! Ballot manifests, seeded multi-stack sampling plans, and the cut-versus-count
//! time model.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{KcutError, Result};
use crate::rng::GeneratorSpec;

/// Stream carrying the global draw positions of a plan.
pub const ALLOCATION_STREAM: u64 = 0;

pub const DEFAULT_CUT_SECONDS_PER_DRAW: f64 = 15.0;
pub const DEFAULT_COUNT_RATE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stack {
    pub stack_id: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Stack>", into = "Vec<Stack>")]
pub struct BallotManifest {
    stacks: Vec<Stack>,
    /// Cumulative counts; `cumulative[i]` is the number of ballots before stack i+1.
    cumulative: Vec<u64>,
}

impl BallotManifest {
    pub fn new(stacks: Vec<Stack>) -> Result<Self> {
        let bad = |m: String| Err(KcutError::MalformedManifest(m));
        if stacks.is_empty() {
            return bad("no stacks".into());
        }
        let mut ids = BTreeSet::new();
        let mut cumulative = Vec::with_capacity(stacks.len());
        let mut total = 0u64;
        for s in &stacks {
            if s.stack_id.is_empty() {
                return bad("empty stack_id".into());
            }
            if s.stack_id.contains([',', '"', '\n', '\r']) || s.stack_id.trim() != s.stack_id {
                return bad(format!("stack_id {:?} has reserved characters", s.stack_id));
            }
            if !ids.insert(s.stack_id.as_str()) {
                return bad(format!("duplicate stack_id {:?}", s.stack_id));
            }
            if s.count == 0 {
                return bad(format!("stack {:?} has non-positive count", s.stack_id));
            }
            total = match total.checked_add(s.count) {
                Some(t) => t,
                None => return bad("total ballot count overflows".into()),
            };
            cumulative.push(total);
        }
        Ok(Self { stacks, cumulative })
    }

    pub fn stacks(&self) -> &[Stack] {
        &self.stacks
    }

    pub fn total(&self) -> u64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn contains(&self, stack_id: &str) -> bool {
        self.index_of(stack_id).is_some()
    }

    pub fn index_of(&self, stack_id: &str) -> Option<usize> {
        self.stacks.iter().position(|s| s.stack_id == stack_id)
    }

    /// Stack index and 1-based position within it for a 0-based global position.
    pub fn locate(&self, global: u64) -> (usize, u64) {
        assert!(global < self.total(), "position {global} outside manifest");
        let idx = self.cumulative.partition_point(|&c| c <= global);
        let before = if idx == 0 { 0 } else { self.cumulative[idx - 1] };
        (idx, global - before + 1)
    }

    /// Canonical CSV form: header plus one LF-terminated row per stack.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stack_id,count\n");
        for s in &self.stacks {
            out.push_str(&format!("{},{}\n", s.stack_id, s.count));
        }
        out
    }
}

impl TryFrom<Vec<Stack>> for BallotManifest {
    type Error = KcutError;
    fn try_from(stacks: Vec<Stack>) -> Result<Self> {
        Self::new(stacks)
    }
}

impl From<BallotManifest> for Vec<Stack> {
    fn from(m: BallotManifest) -> Self {
        m.stacks
    }
}

/// Parse a manifest CSV. The `stack_id,count` header is optional.
pub fn parse_manifest(text: &str) -> Result<BallotManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut stacks = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| KcutError::MalformedManifest(e.to_string()))?;
        if row.iter().all(str::is_empty) {
            continue;
        }
        if row.len() != 2 {
            return Err(KcutError::MalformedManifest(format!(
                "row {} has {} fields, expected 2",
                i + 1,
                row.len()
            )));
        }
        if i == 0 && &row[0] == "stack_id" && &row[1] == "count" {
            continue;
        }
        let count: i128 = row[1].parse().map_err(|_| {
            KcutError::MalformedManifest(format!("row {}: count {:?} is not an integer", i + 1, &row[1]))
        })?;
        if count <= 0 || count > u64::MAX as i128 {
            return Err(KcutError::MalformedManifest(format!(
                "row {}: count {count} is not positive",
                i + 1
            )));
        }
        stacks.push(Stack {
            stack_id: row[0].to_string(),
            count: count as u64,
        });
    }
    if stacks.is_empty() {
        return Err(KcutError::MalformedManifest("empty body".into()));
    }
    BallotManifest::new(stacks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub stack_id: String,
    pub draws: u64,
}

/// A seeded sequence of global ballot positions, drawn with replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrawSequence {
    pub seed: u64,
    /// (stack index, 1-based position within the stack) in draw order.
    pub draws: Vec<(usize, u64)>,
}

impl DrawSequence {
    pub fn len(&self) -> u64 {
        self.draws.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Per-stack counts over the first `upto` draws, in manifest order,
    /// omitting stacks with no draws.
    pub fn allocations(&self, manifest: &BallotManifest, upto: usize) -> Vec<Allocation> {
        let mut counts = vec![0u64; manifest.stacks().len()];
        for &(idx, _) in self.draws.iter().take(upto) {
            counts[idx] += 1;
        }
        manifest
            .stacks()
            .iter()
            .zip(counts)
            .filter(|(_, c)| *c > 0)
            .map(|(s, c)| Allocation {
                stack_id: s.stack_id.clone(),
                draws: c,
            })
            .collect()
    }
}

/// Draw `s` positions uniformly from the whole manifest and map each to its stack.
pub fn allocate_draws(manifest: &BallotManifest, s: u64, seed: u64) -> Result<DrawSequence> {
    if s == 0 {
        return Err(KcutError::invalid("sample size must be positive"));
    }
    let mut rng = GeneratorSpec::new(seed, ALLOCATION_STREAM).stream();
    let total = manifest.total();
    let draws = (0..s).map(|_| manifest.locate(rng.next_below(total))).collect();
    Ok(DrawSequence { seed, draws })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DrawMethod {
    KCut { k: u32 },
    PositionId { position: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedDraw {
    pub stack_id: String,
    #[serde(flatten)]
    pub method: DrawMethod,
}

impl fmt::Display for PlannedDraw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            DrawMethod::KCut { k } => {
                write!(f, "stack {}: perform {k} cuts, take top ballot", self.stack_id)
            }
            DrawMethod::PositionId { position } => {
                write!(f, "stack {}: take ballot at position {position}", self.stack_id)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionId {
    pub stack_id: String,
    /// 1-based, counted from the top of the stack.
    pub position: u64,
}

/// Issued sampling plan. Serializes to the plan JSON document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub seed: u64,
    pub k: u32,
    pub s_star: u64,
    pub allocations: Vec<Allocation>,
    pub overflow_positions: Vec<PositionId>,
}

/// The first `s*` draws become k-cut instructions; later draws keep their
/// explicit positions.
pub fn build_plan(
    manifest: &BallotManifest,
    sequence: &DrawSequence,
    k: u32,
    s_star: u64,
) -> Result<SamplingPlan> {
    if k == 0 {
        return Err(KcutError::invalid("k must be positive"));
    }
    if s_star == 0 {
        return Err(KcutError::invalid("s* must be positive"));
    }
    let cut = s_star.min(sequence.len()) as usize;
    let overflow_positions = sequence.draws[cut..]
        .iter()
        .map(|&(idx, position)| PositionId {
            stack_id: manifest.stacks()[idx].stack_id.clone(),
            position,
        })
        .collect();
    Ok(SamplingPlan {
        seed: sequence.seed,
        k,
        s_star,
        allocations: sequence.allocations(manifest, cut),
        overflow_positions,
    })
}

impl SamplingPlan {
    pub fn kcut_draws(&self) -> u64 {
        self.allocations.iter().map(|a| a.draws).sum()
    }

    pub fn total_draws(&self) -> u64 {
        self.kcut_draws() + self.overflow_positions.len() as u64
    }

    /// Grouped human instructions: one line per allocation, then one per position.
    pub fn instructions(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .allocations
            .iter()
            .map(|a| {
                let base = format!("stack {}: perform {} cuts, take top ballot", a.stack_id, self.k);
                if a.draws == 1 {
                    base
                } else {
                    format!("{base}; repeat {}×", a.draws)
                }
            })
            .collect();
        out.extend(self.overflow_positions.iter().map(|p| {
            format!("stack {}: take ballot at position {}", p.stack_id, p.position)
        }));
        out
    }

    /// The draw with 0-based index `i`, walking allocations in order and then overflow.
    pub fn draw(&self, i: u64) -> Option<PlannedDraw> {
        let mut before = 0u64;
        for a in &self.allocations {
            if i < before + a.draws {
                return Some(PlannedDraw {
                    stack_id: a.stack_id.clone(),
                    method: DrawMethod::KCut { k: self.k },
                });
            }
            before += a.draws;
        }
        let p = self.overflow_positions.get(usize::try_from(i - before).ok()?)?;
        Some(PlannedDraw {
            stack_id: p.stack_id.clone(),
            method: DrawMethod::PositionId { position: p.position },
        })
    }

    /// Reissue with a new sequence; `k` is fixed at first issuance.
    pub fn reissue(
        &self,
        manifest: &BallotManifest,
        sequence: &DrawSequence,
        k: u32,
        s_star: u64,
    ) -> Result<SamplingPlan> {
        if k != self.k {
            return Err(KcutError::ImmutabilityViolation {
                issued: self.k as usize,
                requested: k as usize,
            });
        }
        build_plan(manifest, sequence, k, s_star)
    }

    /// Every referenced stack exists and every position lies inside its stack.
    pub fn check_against(&self, manifest: &BallotManifest) -> Result<()> {
        for a in &self.allocations {
            if manifest.index_of(&a.stack_id).is_none() {
                return Err(KcutError::UnknownStack(a.stack_id.clone()));
            }
            if a.draws == 0 {
                return Err(KcutError::invalid(format!("stack {} has zero draws", a.stack_id)));
            }
        }
        for p in &self.overflow_positions {
            let idx = manifest
                .index_of(&p.stack_id)
                .ok_or_else(|| KcutError::UnknownStack(p.stack_id.clone()))?;
            if p.position == 0 || p.position > manifest.stacks()[idx].count {
                return Err(KcutError::invalid(format!(
                    "position {} outside stack {}",
                    p.position, p.stack_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Parse a plan JSON document (structure only; see [`SamplingPlan::check_against`]).
pub fn parse_plan_json(text: &str) -> Result<SamplingPlan> {
    let plan: SamplingPlan =
        serde_json::from_str(text).map_err(|e| KcutError::invalid(format!("plan JSON: {e}")))?;
    if plan.k == 0 || plan.s_star == 0 {
        return Err(KcutError::invalid("plan JSON: k and s_star must be positive"));
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    /// Ballots drawn from each stack (t).
    pub draws_per_stack: u64,
    /// Ballots in the stack (n).
    pub stack_size: u64,
    pub kcut_seconds: f64,
    /// Expected time for one sorted counting pass: n·t / (rate·(t+1)).
    pub counting_seconds: f64,
    pub breakeven_n: f64,
}

pub fn efficiency_estimate(
    draws_per_stack: u64,
    stack_size: u64,
    cut_seconds_per_draw: f64,
    count_rate: f64,
) -> Result<EfficiencyEstimate> {
    check_efficiency_args(draws_per_stack, cut_seconds_per_draw, count_rate)?;
    let t = draws_per_stack as f64;
    let n = stack_size as f64;
    Ok(EfficiencyEstimate {
        draws_per_stack,
        stack_size,
        kcut_seconds: cut_seconds_per_draw * t,
        counting_seconds: n * t / (count_rate * (t + 1.0)),
        breakeven_n: cut_seconds_per_draw * count_rate * (t + 1.0),
    })
}

/// Smallest stack size at which k-cut is at least as fast as counting:
/// `⌈cut·rate·(t+1)⌉`, i.e. 113 for t=2 and 150 for t=3 with the defaults.
pub fn efficiency_breakeven(
    draws_per_stack: u64,
    cut_seconds_per_draw: f64,
    count_rate: f64,
) -> Result<u64> {
    check_efficiency_args(draws_per_stack, cut_seconds_per_draw, count_rate)?;
    let x = cut_seconds_per_draw * count_rate * (draws_per_stack as f64 + 1.0);
    // Guard against representation error pushing an exact integer up by one.
    Ok((x - 1e-9 * x.max(1.0)).ceil().max(1.0) as u64)
}

fn check_efficiency_args(t: u64, cut: f64, rate: f64) -> Result<()> {
    if t == 0 {
        return Err(KcutError::invalid("draws per stack must be positive"));
    }
    if !(cut > 0.0 && cut.is_finite() && rate > 0.0 && rate.is_finite()) {
        return Err(KcutError::invalid("timing constants must be positive"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_stacks() -> BallotManifest {
        parse_manifest("stack_id,count\nA,500\nB,300").unwrap()
    }

    #[test]
    fn manifest_parsing() {
        let m = two_stacks();
        assert_eq!(m.stacks().len(), 2);
        assert_eq!(m.total(), 800);
        assert_eq!(parse_manifest("A,500\nB,300\n").unwrap(), m);
        assert!(matches!(parse_manifest("stack_id,count\n"), Err(KcutError::MalformedManifest(_))));
        assert!(matches!(parse_manifest(""), Err(KcutError::MalformedManifest(_))));
        assert!(matches!(parse_manifest("A,500\nA,10"), Err(KcutError::MalformedManifest(_))));
        assert!(parse_manifest("A,0").is_err());
        assert!(parse_manifest("A,-3").is_err());
        assert!(parse_manifest("A,x").is_err());
        assert!(parse_manifest("A,1,2").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let text = "stack_id,count\nA,500\nB,300\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.to_csv(), text);
        assert_eq!(parse_manifest(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn locate_maps_cumulative_counts() {
        let m = two_stacks();
        assert_eq!(m.locate(0), (0, 1));
        assert_eq!(m.locate(499), (0, 500));
        assert_eq!(m.locate(500), (1, 1));
        assert_eq!(m.locate(799), (1, 300));
    }

    #[test]
    fn single_stack_gets_everything() {
        let m = parse_manifest("only,40").unwrap();
        let seq = allocate_draws(&m, 5, 9).unwrap();
        assert_eq!(seq.allocations(&m, 5), vec![Allocation { stack_id: "only".into(), draws: 5 }]);
    }

    #[test]
    fn allocation_is_pinned_for_seed_42() {
        let m = two_stacks();
        let seq = allocate_draws(&m, 10, 42).unwrap();
        let positions: Vec<(usize, u64)> = seq.draws.clone();
        assert_eq!(positions, PINNED_SEED_42);
        assert_eq!(seq, allocate_draws(&m, 10, 42).unwrap());
    }

    // Independent transcription of the generator: positions for seed 42,
    // stacks (500, 300), s = 10.
    const PINNED_SEED_42: [(usize, u64); 10] = [
        (0, 219), (0, 433), (0, 167), (1, 242), (1, 144),
        (0, 464), (0, 171), (0, 387), (0, 374), (0, 398),
    ];

    #[test]
    fn allocation_fractions_converge() {
        let m = two_stacks();
        let s = 100_000u64;
        let seq = allocate_draws(&m, s, 7).unwrap();
        let a = seq.allocations(&m, s as usize);
        let total: u64 = a.iter().map(|x| x.draws).sum();
        assert_eq!(total, s);
        let p = 0.625;
        let sigma = (s as f64 * p * (1.0 - p)).sqrt();
        assert!((a[0].draws as f64 - p * s as f64).abs() < 3.0 * sigma, "{a:?}");
    }

    #[test]
    fn plan_switches_to_positions_after_s_star() {
        let m = two_stacks();
        let seq = allocate_draws(&m, 13, 5).unwrap();
        let plan = build_plan(&m, &seq, 6, 10).unwrap();
        assert_eq!(plan.kcut_draws(), 10);
        assert_eq!(plan.overflow_positions.len(), 3);
        assert_eq!(plan.total_draws(), 13);
        plan.check_against(&m).unwrap();
        let all = build_plan(&m, &seq, 6, 13).unwrap();
        assert!(all.overflow_positions.is_empty());
        for i in 0..10 {
            assert!(matches!(plan.draw(i).unwrap().method, DrawMethod::KCut { k: 6 }));
        }
        for i in 10..13 {
            assert!(matches!(plan.draw(i).unwrap().method, DrawMethod::PositionId { .. }));
        }
        assert!(plan.draw(13).is_none());
    }

    #[test]
    fn instruction_text() {
        let plan = SamplingPlan {
            seed: 1,
            k: 3,
            s_star: 2,
            allocations: vec![Allocation { stack_id: "5".into(), draws: 2 }],
            overflow_positions: vec![PositionId { stack_id: "5".into(), position: 17 }],
        };
        assert_eq!(
            plan.instructions(),
            vec![
                "stack 5: perform 3 cuts, take top ballot; repeat 2×".to_string(),
                "stack 5: take ballot at position 17".to_string(),
            ]
        );
        assert_eq!(plan.draw(0).unwrap().to_string(), "stack 5: perform 3 cuts, take top ballot");
    }

    #[test]
    fn plan_json_shape_and_round_trip() {
        let m = two_stacks();
        let seq = allocate_draws(&m, 4, 42).unwrap();
        let plan = build_plan(&m, &seq, 6, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["allocations", "k", "overflow_positions", "s_star", "seed"]);
        assert_eq!(v["overflow_positions"].as_array().unwrap().len(), 1);
        assert_eq!(parse_plan_json(&plan.to_json()).unwrap(), plan);
        assert!(parse_plan_json("{}").is_err());
    }

    #[test]
    fn k_is_immutable() {
        let m = two_stacks();
        let seq = allocate_draws(&m, 4, 42).unwrap();
        let plan = build_plan(&m, &seq, 6, 4).unwrap();
        let longer = allocate_draws(&m, 8, 42).unwrap();
        assert!(plan.reissue(&m, &longer, 6, 8).is_ok());
        assert_eq!(
            plan.reissue(&m, &longer, 5, 8),
            Err(KcutError::ImmutabilityViolation { issued: 6, requested: 5 })
        );
    }

    #[test]
    fn plan_checks_stack_ids() {
        let plan = SamplingPlan {
            seed: 1,
            k: 6,
            s_star: 1,
            allocations: vec![Allocation { stack_id: "Z".into(), draws: 1 }],
            overflow_positions: vec![],
        };
        assert!(matches!(plan.check_against(&two_stacks()), Err(KcutError::UnknownStack(_))));
    }

    #[test]
    fn breakeven_examples() {
        let b = |t| efficiency_breakeven(t, DEFAULT_CUT_SECONDS_PER_DRAW, DEFAULT_COUNT_RATE).unwrap();
        assert_eq!(b(2), 113);
        assert_eq!(b(3), 150);
        assert_eq!(b(1), 75);
        for t in 1..=100u64 {
            // Exact rational form: 37.5(t+1) = 75(t+1)/2.
            let exact = (75 * (t + 1)).div_ceil(2);
            assert_eq!(b(t), exact, "t={t}");
        }
        let e = efficiency_estimate(2, 113, 15.0, 2.5).unwrap();
        assert_eq!(e.breakeven_n, 112.5);
        assert!(e.counting_seconds > e.kcut_seconds);
        let e = efficiency_estimate(2, 112, 15.0, 2.5).unwrap();
        assert!(e.counting_seconds < e.kcut_seconds);
        assert!(efficiency_breakeven(0, 15.0, 2.5).is_err());
        assert!(efficiency_breakeven(2, -1.0, 2.5).is_err());
    }
}
