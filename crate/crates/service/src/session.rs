//! Session domain: creation, draw recording, extension, replay, and the
//! status view. Everything here is synchronous and deterministic given its
//! inputs; timestamps are passed in.

use std::sync::Arc;

use kcut_core::analysis::iterate_k;
use kcut_core::audit::{
    estimate_extension, sample_size_cap, AuditState, AuditStatus, BallotInterpretation,
    ContestDefinition, ExtensionMethod, InterpretationRecord, PairStatistic, SamplingMode,
};
use kcut_core::distributions::CutRecordSet;
use kcut_core::model_spec::parse_model_spec;
use kcut_core::plan::{
    allocate_draws, build_plan, parse_manifest, Allocation, BallotManifest, DrawMethod, PositionId,
    SamplingPlan, Stack,
};
use kcut_core::risk::{
    choose_k_with, risk_adjustment_for, AuditParameters, BoundForm, RiskAdjustment, DEFAULT_EPS1_TARGET, MAX_K,
};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

/// Largest s* or planned sample accepted at creation.
pub const MAX_SAMPLE_SIZE: u64 = 1_000_000;
/// Planned draws kept in memory after extensions.
pub const MAX_PLANNED_DRAWS: u64 = 1_000_000;
pub const MAX_EXTENSION_TRIALS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestInput {
    Csv(String),
    Stacks(Vec<Stack>),
}

impl ManifestInput {
    pub fn resolve(&self) -> ApiResult<BallotManifest> {
        Ok(match self {
            ManifestInput::Csv(text) => parse_manifest(text)?,
            ManifestInput::Stacks(stacks) => BallotManifest::new(stacks.clone())?,
        })
    }
}

fn default_model() -> String {
    "empirical".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub contest: ContestDefinition,
    pub alpha: f64,
    pub manifest: ManifestInput,
    #[serde(default)]
    pub k: Option<u32>,
    #[serde(default)]
    pub budget: Option<f64>,
    pub s_star: u64,
    /// Planned draws; defaults to `s_star`.
    #[serde(default)]
    pub sample_size: Option<u64>,
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub eps1_target: Option<f64>,
    #[serde(default)]
    pub bound_form: Option<BoundForm>,
    #[serde(default)]
    pub escalation_cap: Option<u64>,
}

pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Parse and shape-check a session-creation body.
pub fn parse_session_request(body: &[u8]) -> ApiResult<CreateSessionRequest> {
    let req: CreateSessionRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("session request: {e}")))?;
    if let Some(id) = &req.session_id {
        if !valid_session_id(id) {
            return Err(ApiError::bad_request("session_id must be 1-64 of [A-Za-z0-9_-]"));
        }
    }
    if !(req.alpha > 0.0 && req.alpha < 1.0) {
        return Err(ApiError::bad_request("alpha must lie in (0, 1)"));
    }
    match (req.k, req.budget) {
        (Some(k), None) if k >= 1 && k as usize <= MAX_K => {}
        (None, Some(b)) if b > 0.0 && b.is_finite() => {}
        _ => {
            return Err(ApiError::bad_request(format!(
                "give exactly one of k (1..={MAX_K}) or a positive budget"
            )))
        }
    }
    if req.s_star == 0 || req.s_star > MAX_SAMPLE_SIZE {
        return Err(ApiError::bad_request(format!("s_star must lie in 1..={MAX_SAMPLE_SIZE}")));
    }
    if let Some(s) = req.sample_size {
        if s == 0 || s > MAX_SAMPLE_SIZE {
            return Err(ApiError::bad_request(format!("sample_size must lie in 1..={MAX_SAMPLE_SIZE}")));
        }
    }
    if let Some(e) = req.eps1_target {
        if !(e > 0.0 && e < 1.0) {
            return Err(ApiError::bad_request("eps1_target must lie in (0, 1)"));
        }
    }
    if req.escalation_cap == Some(0) {
        return Err(ApiError::bad_request("escalation_cap must be positive"));
    }
    let model = parse_model_spec(&req.model)?;
    if model.reads_file() {
        return Err(ApiError::bad_request("file models are not available over HTTP"));
    }
    Ok(req)
}

/// Immutable part of a session, written once to `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub created_at: String,
    pub contest: ContestDefinition,
    pub manifest: BallotManifest,
    pub model: String,
    pub budget: Option<f64>,
    pub eps1_target: f64,
    pub bound_form: BoundForm,
    pub adjustment: RiskAdjustment,
    /// k, α, α′ and the s* the adjustment was computed for.
    pub params: AuditParameters,
    pub seed: u64,
    pub sample_size: u64,
    pub escalation_cap: u64,
}

impl SessionConfig {
    /// Run the risk adjustment (and k selection when a budget is given).
    pub fn create(
        req: CreateSessionRequest,
        session_id: String,
        created_at: String,
        records: &CutRecordSet,
    ) -> ApiResult<Self> {
        req.contest.validate()?;
        let manifest = req.manifest.resolve()?;
        let source = parse_model_spec(&req.model)?.resolve(records)?;
        let eps1_target = req.eps1_target.unwrap_or(DEFAULT_EPS1_TARGET);
        let form = req.bound_form.unwrap_or_default();
        let (k, adjustment) = match (req.k, req.budget) {
            (Some(k), _) => {
                let rotation = iterate_k(&source, k as usize)?;
                (k as usize, risk_adjustment_for(&rotation, req.s_star, eps1_target, form)?)
            }
            (None, Some(budget)) => choose_k_with(&source, req.s_star, eps1_target, budget, form)?,
            (None, None) => return Err(ApiError::bad_request("give k or budget")),
        };
        let params = AuditParameters::new(req.alpha, &adjustment, k)?;
        Ok(Self {
            session_id,
            created_at,
            escalation_cap: req.escalation_cap.unwrap_or(req.contest.n_total),
            contest: req.contest,
            manifest,
            model: req.model,
            budget: req.budget,
            eps1_target,
            bound_form: form,
            adjustment,
            params,
            seed: req.seed,
            sample_size: req.sample_size.unwrap_or(req.s_star),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawRequest {
    pub stack_id: String,
    pub choice: String,
    /// When given, must equal the next draw index.
    #[serde(default)]
    pub draw_index: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionRequest {
    pub method: ExtensionMethod,
    pub multiplier: u64,
    pub trials: u64,
    pub seed: u64,
}

/// One line of `adjustments.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionRecord {
    pub method: ExtensionMethod,
    pub multiplier: u64,
    pub trials: u64,
    pub seed: u64,
    /// Draws recorded when the estimate was made.
    pub s: u64,
    pub d: u64,
    pub s_star: u64,
    pub unlikely_to_complete: bool,
    pub completed_fraction: f64,
    pub recorded_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub stack_id: String,
    #[serde(flatten)]
    pub method: DrawMethod,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainingPlan {
    pub allocations: Vec<Allocation>,
    pub overflow_positions: Vec<PositionId>,
    pub next_instruction: Option<Instruction>,
}

/// Full session view returned by status and creation endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub version: u64,
    pub created_at: String,
    pub contest: ContestDefinition,
    pub alpha: f64,
    pub adjusted_alpha: f64,
    pub k: usize,
    pub delta: f64,
    pub eps2: f64,
    pub eps1: f64,
    pub s_prime: u64,
    pub bound: f64,
    pub budget: Option<f64>,
    pub model: String,
    pub seed: u64,
    pub s: u64,
    pub s_star: u64,
    pub escalation_cap: u64,
    pub status: AuditStatus,
    pub sampling_mode: SamplingMode,
    /// Each pair accepts once its `log_lr` reaches this value.
    pub log_threshold: f64,
    pub test_statistics: Vec<PairStatistic>,
    pub remaining_plan: RemainingPlan,
    pub plan: SamplingPlan,
    pub extensions: Vec<ExtensionRecord>,
}

/// Response to a recorded draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawResponse {
    pub version: u64,
    pub draw_index: u64,
    pub status: AuditStatus,
    pub s: u64,
    pub s_star: u64,
    pub test_statistics: Vec<PairStatistic>,
    pub next_instruction: Option<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionResponse {
    pub version: u64,
    pub d: u64,
    pub s: u64,
    pub s_star: u64,
    pub unlikely_to_complete: bool,
    pub completed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub config: Arc<SessionConfig>,
    pub events: Vec<InterpretationRecord>,
    pub extensions: Vec<ExtensionRecord>,
    pub state: AuditState,
    pub plan: SamplingPlan,
}

impl Session {
    pub fn new(config: SessionConfig) -> ApiResult<Self> {
        Self::replay(Arc::new(config), Vec::new(), Vec::new())
    }

    /// Rebuild derived state from the persisted logs.
    pub fn replay(
        config: Arc<SessionConfig>,
        events: Vec<InterpretationRecord>,
        extensions: Vec<ExtensionRecord>,
    ) -> ApiResult<Self> {
        for e in &events {
            if !config.manifest.contains(&e.stack_id) {
                return Err(kcut_core::error::KcutError::UnknownStack(e.stack_id.clone()).into());
            }
        }
        let mut state = AuditState::replay(
            config.contest.clone(),
            config.params,
            config.escalation_cap,
            events.iter().map(InterpretationRecord::interpretation),
        )?;
        state.params.s_star = extensions.last().map_or(config.params.s_star, |x| x.s_star);
        let plan = plan_for(&config, state.params.s_star)?;
        Ok(Self { config, events, extensions, state, plan })
    }

    pub fn version(&self) -> u64 {
        1 + self.events.len() as u64 + self.extensions.len() as u64
    }

    pub fn s_star(&self) -> u64 {
        self.state.params.s_star
    }

    /// Validate a draw and return the log record plus the successor session.
    pub fn record_draw(&self, req: DrawRequest, recorded_at: String) -> ApiResult<(InterpretationRecord, Session)> {
        if self.state.status.is_terminal() {
            return Err(kcut_core::error::KcutError::SessionFinalized(format!("{:?}", self.state.status)).into());
        }
        if !self.config.manifest.contains(&req.stack_id) {
            return Err(kcut_core::error::KcutError::UnknownStack(req.stack_id).into());
        }
        let next = self.state.draws() + 1;
        if let Some(i) = req.draw_index {
            if i != next {
                return Err(ApiError::conflict(
                    "draw-index-mismatch",
                    format!("expected draw_index {next}, got {i}"),
                ));
            }
        }
        let interpretation = BallotInterpretation { draw_index: next, stack_id: req.stack_id, choice: req.choice };
        let state = self.state.clone().apply(interpretation.clone())?;
        let record = InterpretationRecord {
            draw_index: interpretation.draw_index,
            stack_id: interpretation.stack_id,
            choice: interpretation.choice,
            recorded_at,
        };
        let mut events = self.events.clone();
        events.push(record.clone());
        let successor = Session {
            config: self.config.clone(),
            events,
            extensions: self.extensions.clone(),
            state,
            plan: self.plan.clone(),
        };
        Ok((record, successor))
    }

    /// Estimate `d` and move s* to `s + multiplier·d`.
    pub fn extend(&self, req: &ExtensionRequest, recorded_at: String) -> ApiResult<(ExtensionRecord, Session)> {
        if req.trials == 0 || req.trials > MAX_EXTENSION_TRIALS {
            return Err(ApiError::bad_request(format!("trials must lie in 1..={MAX_EXTENSION_TRIALS}")));
        }
        let est = estimate_extension(&self.state, req.method, req.trials, req.seed)?;
        let s = self.state.draws();
        let s_star = sample_size_cap(s, est.d, req.multiplier)?;
        let record = ExtensionRecord {
            method: req.method,
            multiplier: req.multiplier,
            trials: req.trials,
            seed: req.seed,
            s,
            d: est.d,
            s_star,
            unlikely_to_complete: est.unlikely_to_complete,
            completed_fraction: est.completed_fraction,
            recorded_at,
        };
        let mut extensions = self.extensions.clone();
        extensions.push(record.clone());
        let successor = Session::replay(self.config.clone(), self.events.clone(), extensions)?;
        Ok((record, successor))
    }

    pub fn remaining_plan(&self) -> RemainingPlan {
        let kcut_total = self.plan.kcut_draws();
        let mut remaining = self.plan.allocations.clone();
        for e in self.events.iter().take(kcut_total as usize) {
            if let Some(a) = remaining.iter_mut().find(|a| a.stack_id == e.stack_id) {
                a.draws = a.draws.saturating_sub(1);
            }
        }
        remaining.retain(|a| a.draws > 0);
        let overflow_done = self.state.draws().saturating_sub(kcut_total) as usize;
        let overflow: Vec<PositionId> = self.plan.overflow_positions.iter().skip(overflow_done).cloned().collect();

        let next_instruction = if self.state.status.is_terminal() {
            None
        } else if self.state.draws() < kcut_total {
            remaining.first().map(|a| instruction(&a.stack_id, DrawMethod::KCut { k: self.plan.k }))
        } else {
            overflow
                .first()
                .map(|p| instruction(&p.stack_id, DrawMethod::PositionId { position: p.position }))
        };
        RemainingPlan { allocations: remaining, overflow_positions: overflow, next_instruction }
    }

    pub fn view(&self) -> SessionView {
        let c = &self.config;
        SessionView {
            session_id: c.session_id.clone(),
            version: self.version(),
            created_at: c.created_at.clone(),
            contest: c.contest.clone(),
            alpha: c.params.alpha,
            adjusted_alpha: c.params.adjusted_alpha,
            k: c.params.k,
            delta: c.adjustment.delta,
            eps2: c.adjustment.eps2,
            eps1: c.adjustment.eps1,
            s_prime: c.adjustment.s_prime,
            bound: c.adjustment.bound,
            budget: c.budget,
            model: c.model.clone(),
            seed: c.seed,
            s: self.state.draws(),
            s_star: self.s_star(),
            escalation_cap: c.escalation_cap,
            status: self.state.status,
            sampling_mode: self.state.sampling_mode(),
            log_threshold: -c.params.adjusted_alpha.ln(),
            test_statistics: self.state.test_statistics.clone(),
            remaining_plan: self.remaining_plan(),
            plan: self.plan.clone(),
            extensions: self.extensions.clone(),
        }
    }

    pub fn draw_response(&self) -> DrawResponse {
        DrawResponse {
            version: self.version(),
            draw_index: self.state.draws(),
            status: self.state.status,
            s: self.state.draws(),
            s_star: self.s_star(),
            test_statistics: self.state.test_statistics.clone(),
            next_instruction: self.remaining_plan().next_instruction,
        }
    }
}

fn instruction(stack_id: &str, method: DrawMethod) -> Instruction {
    let planned = kcut_core::plan::PlannedDraw { stack_id: stack_id.to_string(), method };
    Instruction { stack_id: stack_id.to_string(), method, text: planned.to_string() }
}

fn plan_for(config: &SessionConfig, s_star: u64) -> ApiResult<SamplingPlan> {
    let total = config.sample_size.max(s_star).min(MAX_PLANNED_DRAWS);
    let seq = allocate_draws(&config.manifest, total, config.seed)?;
    Ok(build_plan(&config.manifest, &seq, config.params.k as u32, s_star)?)
}

pub fn parse_extension_log(text: &str) -> Result<Vec<ExtensionRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use kcut_core::audit::INVALID_OTHER;

    fn request(k: Option<u32>, budget: Option<f64>) -> CreateSessionRequest {
        CreateSessionRequest {
            session_id: None,
            contest: ContestDefinition {
                candidates: vec!["alice".into(), "bob".into()],
                reported_winner: "alice".into(),
                reported_tallies: [("alice".to_string(), 700), ("bob".to_string(), 300)].into(),
                n_total: 1000,
            },
            alpha: 0.05,
            manifest: ManifestInput::Csv("stack_id,count\nA,600\nB,400\n".into()),
            k,
            budget,
            s_star: 1000,
            sample_size: Some(20),
            seed: 42,
            model: "empirical".into(),
            eps1_target: None,
            bound_form: None,
            escalation_cap: None,
        }
    }

    fn session(k: Option<u32>, budget: Option<f64>) -> Session {
        let cfg = SessionConfig::create(request(k, budget), "t".into(), "2026-10-18T00:00:00Z".into(), &CutRecordSet::table1())
            .unwrap();
        Session::new(cfg).unwrap()
    }

    fn draw(stack: &str, choice: &str) -> DrawRequest {
        DrawRequest { stack_id: stack.into(), choice: choice.into(), draw_index: None }
    }

    #[test]
    fn budget_selects_six_cuts() {
        let s = session(None, Some(0.01));
        assert_eq!(s.config.params.k, 6);
        assert!((s.config.params.adjusted_alpha - 0.04012).abs() < 5e-5, "{}", s.config.params.adjusted_alpha);
        let v = s.view();
        assert_eq!(v.s, 0);
        assert_eq!(v.status, AuditStatus::Continue);
        assert_eq!(v.version, 1);
    }

    #[test]
    fn unreachable_budget_is_rejected() {
        let cfg = SessionConfig::create(request(None, Some(1e-30)), "t".into(), "x".into(), &CutRecordSet::table1());
        assert_eq!(cfg.unwrap_err().kind, "budget-unreachable");
    }

    #[test]
    fn small_k_exhausts_the_limit() {
        let cfg = SessionConfig::create(request(Some(1), None), "t".into(), "x".into(), &CutRecordSet::table1());
        assert_eq!(cfg.unwrap_err().kind, "adjustment-exhausts-risk-limit");
    }

    #[test]
    fn draws_advance_and_finalize() {
        // alpha' is about 0.0401, so the threshold 24.9 needs 1.4^10.
        let mut s = session(Some(6), None);
        for i in 0..10 {
            let stack = s.remaining_plan().next_instruction.unwrap().stack_id;
            let (rec, next) = s.record_draw(draw(&stack, "alice"), format!("t{i}")).unwrap();
            assert_eq!(rec.draw_index, i + 1);
            s = next;
            assert_eq!(s.state.status == AuditStatus::AcceptReported, i == 9);
        }
        assert!(s.remaining_plan().next_instruction.is_none());
        let err = s.record_draw(draw("A", "alice"), "t".into()).unwrap_err();
        assert_eq!((err.status.as_u16(), err.kind.as_str()), (409, "session-finalized"));
    }

    #[test]
    fn draw_validation() {
        let s = session(Some(6), None);
        let err = s.record_draw(draw("Z", "alice"), "t".into()).unwrap_err();
        assert_eq!((err.status.as_u16(), err.kind.as_str()), (422, "unknown-stack"));
        let err = s.record_draw(draw("A", "carol"), "t".into()).unwrap_err();
        assert_eq!(err.status.as_u16(), 422);
        let mut req = draw("A", INVALID_OTHER);
        req.draw_index = Some(3);
        assert_eq!(s.record_draw(req, "t".into()).unwrap_err().status.as_u16(), 409);
    }

    #[test]
    fn replay_matches_live_view() {
        let mut s = session(Some(6), None);
        for (i, c) in ["alice", "bob", "alice", INVALID_OTHER, "alice"].iter().enumerate() {
            s = s.record_draw(draw(if i % 2 == 0 { "A" } else { "B" }, c), format!("t{i}")).unwrap().1;
        }
        let (_, s) = s
            .extend(&ExtensionRequest { method: ExtensionMethod::Multinomial, multiplier: 3, trials: 500, seed: 9 }, "t".into())
            .unwrap();
        let replayed = Session::replay(s.config.clone(), s.events.clone(), s.extensions.clone()).unwrap();
        assert_eq!(
            serde_json::to_string(&replayed.view()).unwrap(),
            serde_json::to_string(&s.view()).unwrap()
        );
        let x = &s.extensions[0];
        assert_eq!(s.view().s_star, 5 + 3 * x.d);
        assert_eq!(s.view().version, 7);
    }

    #[test]
    fn extension_requires_draws() {
        let s = session(Some(6), None);
        let err = s
            .extend(&ExtensionRequest { method: ExtensionMethod::Polya, multiplier: 2, trials: 10, seed: 1 }, "t".into())
            .unwrap_err();
        assert_eq!(err.kind, "insufficient-data");
    }

    #[test]
    fn request_shape_checks() {
        let ok = serde_json::to_vec(&request(Some(6), None)).unwrap();
        assert!(parse_session_request(&ok).is_ok());
        for bad in [
            request(Some(6), Some(0.01)),
            request(None, None),
            request(Some(0), None),
            CreateSessionRequest { alpha: 1.5, ..request(Some(6), None) },
            CreateSessionRequest { model: "file:/etc/passwd".into(), ..request(Some(6), None) },
            CreateSessionRequest { session_id: Some("../x".into()), ..request(Some(6), None) },
        ] {
            let body = serde_json::to_vec(&bad).unwrap();
            assert_eq!(parse_session_request(&body).unwrap_err().status.as_u16(), 400);
        }
        assert!(parse_session_request(b"{").is_err());
        assert!(parse_session_request(br#"{"surprise":1}"#).is_err());
    }
}
