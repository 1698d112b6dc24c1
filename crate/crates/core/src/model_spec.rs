//! Textual cut-model specifications shared by the command line and the service.
//!
//! Grammar:
//!
//! | spec                   | model                                                   |
//! |------------------------|---------------------------------------------------------|
//! | `empirical`            | empirical pmf of the cut records                        |
//! | `uniform`              | exact uniform                                           |
//! | `truncu`               | truncated uniform fitted to the records                 |
//! | `truncu:W,B`           | truncated uniform on `W..W+B`                           |
//! | `expcubic`             | exponential cubic with the published coefficients       |
//! | `expcubic-fit`         | exponential cubic fitted to the records                 |
//! | `expcubic:C0,C1,C2,C3` | exponential cubic with the given coefficients           |
//! | `file:PATH`            | empirical pmf of a cut-record CSV on disk               |

use std::fmt;
use std::str::FromStr;

use crate::distributions::{
    discretize, empirical_pmf, fit_exponential_cubic, fit_truncated_uniform, ContinuousCutModel,
    CutRecordSet, CutSizeDistribution, PUBLISHED_CUBIC,
};
use crate::error::{KcutError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Empirical,
    Uniform,
    TruncatedUniformFit,
    TruncatedUniform { w: usize, b: usize },
    ExpCubicPublished,
    ExpCubicFit,
    ExpCubic { coeffs: [f64; 4] },
    File(String),
}

pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let bad = |detail: &str| KcutError::MalformedModelSpec {
        spec: text.to_string(),
        detail: detail.to_string(),
    };
    let t = text.trim();
    let (head, arg) = match t.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (t, None),
    };
    let spec = match (head, arg) {
        ("empirical", None) => ModelSpec::Empirical,
        ("uniform", None) => ModelSpec::Uniform,
        ("truncu", None) => ModelSpec::TruncatedUniformFit,
        ("expcubic", None) => ModelSpec::ExpCubicPublished,
        ("expcubic-fit", None) => ModelSpec::ExpCubicFit,
        ("truncu", Some(a)) => {
            let v = numbers::<usize>(a).ok_or_else(|| bad("expected truncu:W,B with integers"))?;
            match v[..] {
                [w, b] if b > 0 => ModelSpec::TruncatedUniform { w, b },
                _ => return Err(bad("expected truncu:W,B with B > 0")),
            }
        }
        ("expcubic", Some(a)) => {
            let v = numbers::<f64>(a).ok_or_else(|| bad("expected four numbers"))?;
            match v[..] {
                [c0, c1, c2, c3] if v.iter().all(|c| c.is_finite()) => {
                    ModelSpec::ExpCubic { coeffs: [c0, c1, c2, c3] }
                }
                _ => return Err(bad("expected expcubic:C0,C1,C2,C3 with finite values")),
            }
        }
        ("file", Some(path)) if !path.is_empty() => ModelSpec::File(path.to_string()),
        _ => return Err(bad("unknown model")),
    };
    Ok(spec)
}

fn numbers<T: FromStr>(list: &str) -> Option<Vec<T>> {
    list.split(',').map(|s| s.trim().parse().ok()).collect()
}

impl FromStr for ModelSpec {
    type Err = KcutError;
    fn from_str(s: &str) -> Result<Self> {
        parse_model_spec(s)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Empirical => f.write_str("empirical"),
            ModelSpec::Uniform => f.write_str("uniform"),
            ModelSpec::TruncatedUniformFit => f.write_str("truncu"),
            ModelSpec::TruncatedUniform { w, b } => write!(f, "truncu:{w},{b}"),
            ModelSpec::ExpCubicPublished => f.write_str("expcubic"),
            ModelSpec::ExpCubicFit => f.write_str("expcubic-fit"),
            ModelSpec::ExpCubic { coeffs: [a, b, c, d] } => write!(f, "expcubic:{a},{b},{c},{d}"),
            ModelSpec::File(p) => write!(f, "file:{p}"),
        }
    }
}

impl ModelSpec {
    /// Whether resolution reads from the filesystem.
    pub fn reads_file(&self) -> bool {
        matches!(self, ModelSpec::File(_))
    }

    /// The parametric model this spec denotes, fitting to `records` when asked.
    pub fn continuous(&self, records: &CutRecordSet) -> Result<Option<ContinuousCutModel>> {
        Ok(match self {
            ModelSpec::TruncatedUniformFit => Some(fit_truncated_uniform(&empirical_pmf(records)?)),
            ModelSpec::TruncatedUniform { w, b } => Some(ContinuousCutModel::TruncatedUniform { w: *w, b: *b }),
            ModelSpec::ExpCubicPublished => Some(ContinuousCutModel::ExponentialCubic { coeffs: PUBLISHED_CUBIC }),
            ModelSpec::ExpCubicFit => Some(fit_exponential_cubic(&empirical_pmf(records)?)?),
            ModelSpec::ExpCubic { coeffs } => Some(ContinuousCutModel::ExponentialCubic { coeffs: *coeffs }),
            _ => None,
        })
    }

    /// Cut-size pmf on `records.n()` positions.
    pub fn resolve(&self, records: &CutRecordSet) -> Result<CutSizeDistribution> {
        self.resolve_at(records, records.n())
    }

    /// Cut-size pmf on `n` positions. Record-based models require `n` to
    /// match the records; parametric ones are discretized at `n`.
    pub fn resolve_at(&self, records: &CutRecordSet, n: usize) -> Result<CutSizeDistribution> {
        match self {
            ModelSpec::Empirical if records.n() != n => {
                Err(KcutError::DimensionMismatch { left: n, right: records.n() })
            }
            ModelSpec::Empirical => empirical_pmf(records),
            ModelSpec::Uniform => CutSizeDistribution::uniform(n),
            ModelSpec::File(path) => {
                let text = std::fs::read_to_string(path)?;
                empirical_pmf(&CutRecordSet::parse_csv(&text, Some(n))?)
            }
            other => {
                let model = other.continuous(records)?.expect("parametric spec");
                discretize(&model, n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Pmf;

    #[test]
    fn parses_every_form() {
        for (text, spec) in [
            ("empirical", ModelSpec::Empirical),
            ("uniform", ModelSpec::Uniform),
            ("truncu", ModelSpec::TruncatedUniformFit),
            ("truncu:8,114", ModelSpec::TruncatedUniform { w: 8, b: 114 }),
            ("expcubic", ModelSpec::ExpCubicPublished),
            ("expcubic-fit", ModelSpec::ExpCubicFit),
            ("expcubic:-0.631,8.587,-18.446,9.428", ModelSpec::ExpCubic { coeffs: PUBLISHED_CUBIC }),
            ("file:/tmp/x.csv", ModelSpec::File("/tmp/x.csv".into())),
        ] {
            assert_eq!(parse_model_spec(text).unwrap(), spec);
            assert_eq!(parse_model_spec(&spec.to_string()).unwrap(), spec);
        }
    }

    #[test]
    fn rejects_garbage() {
        for text in ["", "normal", "truncu:8", "truncu:8,0", "truncu:a,b", "expcubic:1,2,3", "expcubic:1,2,3,nan", "file:", "empirical:3"] {
            assert!(
                matches!(parse_model_spec(text), Err(KcutError::MalformedModelSpec { .. })),
                "{text:?}"
            );
        }
    }

    #[test]
    fn resolves_to_n_positions() {
        let recs = CutRecordSet::table1();
        for text in ["empirical", "uniform", "truncu", "expcubic", "truncu:8,114"] {
            let p = parse_model_spec(text).unwrap().resolve(&recs).unwrap();
            assert_eq!(p.n(), 150, "{text}");
        }
        assert_eq!(
            parse_model_spec("truncu").unwrap().continuous(&recs).unwrap(),
            Some(ContinuousCutModel::TruncatedUniform { w: 8, b: 114 })
        );
        assert!(parse_model_spec("file:/nonexistent/cuts.csv").unwrap().resolve(&recs).is_err());
    }
}
