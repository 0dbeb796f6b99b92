//! Formula evaluation against a scenario document, as served to planners.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation, Violations};
use crate::formulas::{inflate_for_attrition, variance_terms, Method, VarianceTerms};
use crate::scenario_file::{ContrastFile, ScenarioFile};

/// Which probabilities the planner elicited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cpb,
    Mpb,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpb" => Ok(Family::Cpb),
            "mpb" => Ok(Family::Mpb),
            _ => Err(field("method", format!("{s:?} is not one of cpb, mpb"))),
        }
    }
}

fn field(path: &str, message: impl Into<String>) -> Error {
    Error::Validation(Violations(vec![Violation::new(path, message)]))
}

/// Parses a wave count given as `1`, `2`, `"onewave"` or `"twowave"`.
pub fn parse_waves(s: &str) -> Result<u8> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "onewave" | "one_wave" => Ok(1),
        "2" | "twowave" | "two_wave" => Ok(2),
        _ => Err(field(
            "waves",
            format!("{s:?} is not one of 1, 2, onewave, twowave"),
        )),
    }
}

pub fn method_for(family: Family, waves: u8) -> Result<Method> {
    Method::from_parts(family == Family::Cpb, waves)
}

/// What was asked for and what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub method: Method,
    pub alpha: f64,
    /// Target power of a sample-size query.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_power: Option<f64>,
    pub contrast: ContrastFile,
    /// Required completers, or the size a power query was evaluated at.
    pub n: u64,
    /// Required size before rounding up.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attrition: Option<f64>,
    /// Enrolment needed so that `n` complete after attrition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_enrolled: Option<u64>,
    /// Approximate power at `n` (power queries only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    pub sigma2: f64,
    pub delta: f64,
    pub terms: VarianceTerms,
}

fn resolve(file: &ScenarioFile, method: Method) -> Result<(VarianceTerms, ContrastFile)> {
    let scenario = file.to_scenario()?;
    let contrast = file.contrast()?;
    let terms = variance_terms(&scenario, method, contrast)?;
    let cf = ContrastFile {
        target: contrast.target.number(),
        reference: contrast.reference.number(),
    };
    Ok((terms, cf))
}

fn check_attrition(attrition: Option<f64>) -> Result<()> {
    match attrition {
        Some(a) if !(0.0..1.0).contains(&a) => {
            Err(field("attrition", format!("{a} must lie in [0,1)")))
        }
        _ => Ok(()),
    }
}

/// Required sample size, optionally inflated for attrition.
pub fn sample_size_report(
    file: &ScenarioFile,
    method: Method,
    attrition: Option<f64>,
) -> Result<PlanReport> {
    check_attrition(attrition)?;
    let spec = file.test_spec()?;
    let (terms, contrast) = resolve(file, method)?;
    let size = terms.sample_size(spec)?;
    let n_enrolled = attrition
        .map(|a| inflate_for_attrition(size.n, a))
        .transpose()?;
    Ok(PlanReport {
        method,
        alpha: spec.alpha,
        target_power: Some(spec.power),
        contrast,
        n: size.n,
        n_exact: Some(size.n_exact),
        attrition,
        n_enrolled,
        power: None,
        sigma2: terms.sigma2,
        delta: terms.delta,
        terms,
    })
}

/// Approximate power with `n` enrolled. With attrition the power is
/// evaluated at the expected completers `floor(n (1 - attrition))`.
pub fn power_report(
    file: &ScenarioFile,
    method: Method,
    n: u64,
    attrition: Option<f64>,
) -> Result<PlanReport> {
    check_attrition(attrition)?;
    if n < 1 {
        return Err(field("n", "must be at least 1"));
    }
    let spec = file.test_spec()?;
    let (terms, contrast) = resolve(file, method)?;
    let completers = match attrition {
        Some(a) => ((n as f64 * (1.0 - a)).floor() as u64).max(1),
        None => n,
    };
    let power = terms.power(completers, spec.alpha)?;
    Ok(PlanReport {
        method,
        alpha: spec.alpha,
        target_power: None,
        contrast,
        n: completers,
        n_exact: None,
        attrition,
        n_enrolled: attrition.map(|_| n),
        power: Some(power),
        sigma2: terms.sigma2,
        delta: terms.delta,
        terms,
    })
}
