//! Parse, render and re-parse checks for every text format the crate reads.
//!
//! Each function accepts arbitrary bytes, must never panic on malformed
//! input, and panics only when an accepted input fails to survive its own
//! canonical rendering. Fuzz targets and corpus replay tests share them.

use crate::audit::{parse_interpretation_log, render_interpretation_log};
use crate::distributions::CutRecordSet;
use crate::model_spec::parse_model_spec;
use crate::plan::{parse_manifest, parse_plan_json};

/// Rendering huge record sets only slows fuzzing without new coverage.
const MAX_RENDERED_CUT_SIZES: usize = 100_000;

pub fn manifest(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = parse_manifest(text) else { return };
    let csv = m.to_csv();
    let again = parse_manifest(&csv).expect("canonical manifest re-parses");
    assert_eq!(m, again);
    assert_eq!(csv, again.to_csv());
}

pub fn cut_records(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(r) = CutRecordSet::parse_csv(text, None) else { return };
    if r.n() > MAX_RENDERED_CUT_SIZES {
        return;
    }
    let again = CutRecordSet::parse_csv(&r.to_csv(), Some(r.n())).expect("canonical records re-parse");
    assert_eq!(r, again);
}

pub fn interpretation_log(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = parse_interpretation_log(text) else { return };
    let rendered = render_interpretation_log(&records);
    let again = parse_interpretation_log(&rendered).expect("rendered log re-parses");
    assert_eq!(records, again);
}

pub fn model_spec(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = parse_model_spec(text) else { return };
    let again = parse_model_spec(&spec.to_string()).expect("displayed spec re-parses");
    assert_eq!(spec, again);
}

pub fn plan_json(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(plan) = parse_plan_json(text) else { return };
    let again = parse_plan_json(&plan.to_json()).expect("serialized plan re-parses");
    assert_eq!(plan, again);
}
