//! The JSON scenario document shared by the command line and the HTTP service.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::design::{
    AdaptiveIntervention, ConditionalScenario, ContrastSpec, MarginalScenario, Pretest, Scenario,
};
use crate::error::{Error, Result, Violation, Violations};
use crate::formulas::TestSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Conditional,
    Marginal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct Cells {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub A: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub B: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub C: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub D: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub E: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub F: Option<f64>,
}

/// Marginal means keyed by one-based intervention number.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Marginals {
    #[serde(rename = "1", skip_serializing_if = "Option::is_none")]
    pub ai1: Option<f64>,
    #[serde(rename = "2", skip_serializing_if = "Option::is_none")]
    pub ai2: Option<f64>,
    #[serde(rename = "3", skip_serializing_if = "Option::is_none")]
    pub ai3: Option<f64>,
    #[serde(rename = "4", skip_serializing_if = "Option::is_none")]
    pub ai4: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plus_arm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minus_arm: Option<f64>,
    /// Shorthand for equal per-arm rates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub common: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmPretest {
    pub given_nonresponder: f64,
    pub given_responder: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerArmPretest {
    pub plus_arm: ArmPretest,
    pub minus_arm: ArmPretest,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretestSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub given_responder: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub given_nonresponder: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_arm: Option<PerArmPretest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalRho {
    pub nonresponder: f64,
    pub responder: f64,
}

/// Intervention pair by one-based number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastFile {
    pub target: usize,
    pub reference: usize,
}

/// A scenario as written on disk or sent over HTTP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Cells>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Marginals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_rates: Option<ResponseRates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretest: Option<PretestSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_conditional: Option<ConditionalRho>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<ContrastFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
}

fn single(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Validation(Violations(vec![Violation::new(path, message)]))
}

/// Turns a deserialization failure into a located violation.
pub fn parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let message = inner.to_string();
    // Missing fields are reported at the parent path.
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    let path = if let Some(f) = missing {
        if path == "." {
            f.to_string()
        } else {
            format!("{path}.{f}")
        }
    } else if path == "." {
        String::new()
    } else {
        path
    };
    single(path, message)
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(parse_error)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(parse_error)
    }

    /// Canonical pretty-printed form (fixed key order, absent fields omitted).
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    fn response_rates(&self, v: &mut Vec<Violation>) -> [f64; 2] {
        let Some(rr) = &self.response_rates else {
            v.push(Violation::new("response_rates", "required"));
            return [f64::NAN; 2];
        };
        match (rr.common, rr.plus_arm, rr.minus_arm) {
            (Some(c), None, None) => [c, c],
            (None, Some(p), Some(m)) => [p, m],
            (Some(_), _, _) => {
                v.push(Violation::new(
                    "response_rates.common",
                    "give either common or both per-arm rates",
                ));
                [f64::NAN; 2]
            }
            (None, p, m) => {
                if p.is_none() {
                    v.push(Violation::new("response_rates.plus_arm", "required"));
                }
                if m.is_none() {
                    v.push(Violation::new("response_rates.minus_arm", "required"));
                }
                [f64::NAN; 2]
            }
        }
    }

    fn pretest(&self, v: &mut Vec<Violation>) -> Option<Pretest> {
        let p = self.pretest.as_ref()?;
        let Some(mean) = p.mean else {
            v.push(Violation::new(
                "pretest.mean",
                "required when pretest is given",
            ));
            return None;
        };
        Some(Pretest {
            mean,
            given_nonresponder: p.given_nonresponder,
            given_responder: p.given_responder,
            by_arm: p.by_arm.as_ref().map(|b| {
                [
                    [b.plus_arm.given_nonresponder, b.plus_arm.given_responder],
                    [b.minus_arm.given_nonresponder, b.minus_arm.given_responder],
                ]
            }),
        })
    }

    /// Builds and validates the scenario, reporting every problem with its field path.
    pub fn to_scenario(&self) -> Result<Scenario> {
        let mut v = Vec::new();
        let rates = self.response_rates(&mut v);
        let pretest = self.pretest(&mut v);
        let scenario = match self.mode {
            Mode::Conditional => {
                if self.marginals.is_some() {
                    v.push(Violation::new("marginals", "not used in conditional mode"));
                }
                let cells = self.cells.clone().unwrap_or_default();
                if self.cells.is_none() {
                    v.push(Violation::new("cells", "required in conditional mode"));
                }
                let mut values = [0.0; 6];
                for (k, (name, val)) in [
                    ("A", cells.A),
                    ("B", cells.B),
                    ("C", cells.C),
                    ("D", cells.D),
                    ("E", cells.E),
                    ("F", cells.F),
                ]
                .into_iter()
                .enumerate()
                {
                    match val {
                        Some(x) => values[k] = x,
                        None if self.cells.is_some() => {
                            v.push(Violation::new(format!("cells.{name}"), "required"))
                        }
                        None => {}
                    }
                }
                let mut s = ConditionalScenario::from_cells(values, rates);
                s.pretest = pretest;
                s.rho = self.rho;
                s.rho_conditional = self.rho_conditional.map(|r| [r.nonresponder, r.responder]);
                Scenario::Conditional(s)
            }
            Mode::Marginal => {
                if self.cells.is_some() {
                    v.push(Violation::new("cells", "not used in marginal mode"));
                }
                if self.rho_conditional.is_some() {
                    v.push(Violation::new(
                        "rho_conditional",
                        "not used in marginal mode",
                    ));
                }
                let m = self.marginals.clone().unwrap_or_default();
                if self.marginals.is_none() {
                    v.push(Violation::new("marginals", "required in marginal mode"));
                }
                let mut mu = [0.0; 4];
                for (k, val) in [m.ai1, m.ai2, m.ai3, m.ai4].into_iter().enumerate() {
                    match val {
                        Some(x) => mu[k] = x,
                        None if self.marginals.is_some() => {
                            v.push(Violation::new(format!("marginals.{}", k + 1), "required"))
                        }
                        None => {}
                    }
                }
                let mut s = MarginalScenario::new(mu, rates);
                s.pretest_mean = pretest.map(|p| p.mean);
                s.rho = self.rho;
                Scenario::Marginal(s)
            }
        };
        if !v.is_empty() {
            return Err(Error::Validation(Violations(v)));
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn contrast(&self) -> Result<ContrastSpec> {
        let Some(c) = self.contrast else {
            return Ok(ContrastSpec::default_pair());
        };
        let ai = |n: usize, path: &str| {
            AdaptiveIntervention::from_number(n)
                .ok_or_else(|| single(path, format!("{n} is not an intervention number 1-4")))
        };
        ContrastSpec::new(
            ai(c.target, "contrast.target")?,
            ai(c.reference, "contrast.reference")?,
        )
    }

    pub fn test_spec(&self) -> Result<TestSpec> {
        let d = TestSpec::default();
        TestSpec::new(self.alpha.unwrap_or(d.alpha), self.power.unwrap_or(d.power))
    }

    /// Validates everything the document carries.
    pub fn validate(&self) -> Result<()> {
        self.to_scenario()?;
        self.contrast()?;
        self.test_spec()?;
        Ok(())
    }
}

/// JSON Schema for [`ScenarioFile`].
pub fn scenario_schema() -> Value {
    let prob = json!({"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1});
    let rate = json!({"type": "number", "minimum": 0, "maximum": 1});
    let corr = json!({"type": "number", "minimum": -1, "exclusiveMaximum": 1});
    let ai = json!({"type": "integer", "minimum": 1, "maximum": 4});
    let arm_pretest = json!({
        "type": "object",
        "additionalProperties": false,
        "required": ["given_nonresponder", "given_responder"],
        "properties": {"given_nonresponder": prob, "given_responder": prob}
    });
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "SMART scenario",
        "type": "object",
        "additionalProperties": false,
        "required": ["mode", "response_rates"],
        "properties": {
            "mode": {"enum": ["conditional", "marginal"]},
            "cells": {
                "type": "object",
                "additionalProperties": false,
                "required": ["A", "B", "C", "D", "E", "F"],
                "properties": {"A": prob, "B": prob, "C": prob, "D": prob, "E": prob, "F": prob}
            },
            "marginals": {
                "type": "object",
                "additionalProperties": false,
                "required": ["1", "2", "3", "4"],
                "properties": {"1": prob, "2": prob, "3": prob, "4": prob}
            },
            "response_rates": {
                "type": "object",
                "additionalProperties": false,
                "properties": {"plus_arm": rate, "minus_arm": rate, "common": rate}
            },
            "pretest": {
                "type": "object",
                "additionalProperties": false,
                "required": ["mean"],
                "properties": {
                    "mean": prob,
                    "given_responder": prob,
                    "given_nonresponder": prob,
                    "by_arm": {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["plus_arm", "minus_arm"],
                        "properties": {"plus_arm": arm_pretest, "minus_arm": arm_pretest}
                    }
                }
            },
            "rho": corr,
            "rho_conditional": {
                "type": "object",
                "additionalProperties": false,
                "required": ["nonresponder", "responder"],
                "properties": {"nonresponder": corr, "responder": corr}
            },
            "contrast": {
                "type": "object",
                "additionalProperties": false,
                "required": ["target", "reference"],
                "properties": {"target": ai, "reference": ai}
            },
            "alpha": prob,
            "power": prob
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulas::{variance_terms, Method};

    const CONDITIONAL: &str = r#"{
        "mode": "conditional",
        "cells": {"A": 0.45, "B": 0.35, "C": 0.35, "D": 0.6, "E": 0.5, "F": 0.5},
        "response_rates": {"plus_arm": 0.565, "minus_arm": 0.336},
        "pretest": {"mean": 0.4},
        "rho": 0.6,
        "contrast": {"target": 2, "reference": 4}
    }"#;

    fn paths(e: Error) -> Vec<String> {
        match e {
            Error::Validation(v) => v.0.into_iter().map(|x| x.path).collect(),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn conditional_round_trip() {
        let f = ScenarioFile::from_json(CONDITIONAL).unwrap();
        let s = f.to_scenario().unwrap();
        let Scenario::Conditional(c) = &s else {
            panic!()
        };
        assert_eq!(c.psi_nonresponder, [0.5, 0.5, 0.35, 0.35]);
        assert_eq!(c.psi_responder, [0.6, 0.6, 0.45, 0.45]);
        let canon = f.to_canonical_json();
        assert_eq!(ScenarioFile::from_json(&canon).unwrap(), f);
        assert_eq!(
            ScenarioFile::from_json(&canon).unwrap().to_canonical_json(),
            canon
        );
        assert_eq!(f.contrast().unwrap().target.number(), 2);
        variance_terms(&s, Method::CpbTwoWave, f.contrast().unwrap()).unwrap();
    }

    #[test]
    fn marginal_with_common_rate() {
        let f = ScenarioFile::from_json(
            r#"{"mode": "marginal", "marginals": {"1": 0.58, "2": 0.58, "3": 0.41, "4": 0.41},
                "response_rates": {"common": 0.45}, "rho": 0.6}"#,
        )
        .unwrap();
        let Scenario::Marginal(m) = f.to_scenario().unwrap() else {
            panic!()
        };
        assert_eq!(m.response_rate, [0.45, 0.45]);
        assert_eq!(m.rho, Some(0.6));
    }

    #[test]
    fn violations_carry_field_paths() {
        let bad = CONDITIONAL.replace("\"B\": 0.35", "\"B\": 1.0");
        assert_eq!(
            paths(
                ScenarioFile::from_json(&bad)
                    .unwrap()
                    .to_scenario()
                    .unwrap_err()
            ),
            vec!["cells.B"]
        );
        let missing = CONDITIONAL.replace("\"C\": 0.35, ", "");
        assert_eq!(
            paths(
                ScenarioFile::from_json(&missing)
                    .unwrap()
                    .to_scenario()
                    .unwrap_err()
            ),
            vec!["cells.C"]
        );
        let wrong_type = CONDITIONAL.replace("\"rho\": 0.6", "\"rho\": \"high\"");
        assert_eq!(
            paths(ScenarioFile::from_json(&wrong_type).unwrap_err()),
            vec!["rho"]
        );
        let unknown = CONDITIONAL.replace("\"rho\": 0.6", "\"rhoo\": 0.6");
        assert_eq!(
            paths(ScenarioFile::from_json(&unknown).unwrap_err()),
            vec!["rhoo"]
        );
        let no_mode = r#"{"cells": {}}"#;
        assert_eq!(
            paths(ScenarioFile::from_json(no_mode).unwrap_err()),
            vec!["mode"]
        );
        let contrast = CONDITIONAL.replace("\"reference\": 4", "\"reference\": 1");
        assert_eq!(
            paths(
                ScenarioFile::from_json(&contrast)
                    .unwrap()
                    .contrast()
                    .unwrap_err()
            ),
            vec!["contrast"]
        );
        let contrast = CONDITIONAL.replace("\"reference\": 4", "\"reference\": 7");
        assert_eq!(
            paths(
                ScenarioFile::from_json(&contrast)
                    .unwrap()
                    .contrast()
                    .unwrap_err()
            ),
            vec!["contrast.reference"]
        );
    }

    #[test]
    fn mode_mismatch_reported() {
        let f =
            ScenarioFile::from_json(r#"{"mode": "marginal", "response_rates": {"common": 0.4}}"#)
                .unwrap();
        assert_eq!(paths(f.to_scenario().unwrap_err()), vec!["marginals"]);
    }

    #[test]
    fn schema_lists_every_field() {
        let schema = scenario_schema();
        let props = schema["properties"].as_object().unwrap();
        for key in [
            "mode",
            "cells",
            "marginals",
            "response_rates",
            "pretest",
            "rho",
            "rho_conditional",
            "contrast",
            "alpha",
            "power",
        ] {
            assert!(props.contains_key(key), "{key}");
        }
    }
}
