//! Published JSON Schema for request bodies and result documents.

use serde_json::{json, Value};

use crate::experiments::MODEL_NAMES;
use crate::scenario_file::scenario_schema;

fn number() -> Value {
    json!({"type": ["number", "null"]})
}

fn model_spec() -> Value {
    json!({
        "type": "object",
        "required": ["variant", "correlation"],
        "properties": {
            "variant": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["one_wave_saturated", "two_wave_saturated", "covariate_adjusted", "three_wave_piecewise"]},
                    "wave": {"type": "integer", "minimum": 1, "maximum": 2}
                }
            },
            "correlation": {"enum": ["independence", "exchangeable", "ar1"]},
            "continuity_correction": {"type": "boolean"}
        }
    })
}

fn power_estimate() -> Value {
    json!({
        "type": "object",
        "required": ["model", "n", "reps", "rejections", "failures", "power", "mc_se", "seed"],
        "properties": {
            "model": {"$ref": "#/$defs/model_spec"},
            "n": {"type": "integer", "minimum": 2},
            "reps": {"type": "integer", "minimum": 1},
            "rejections": {"type": "integer", "minimum": 0},
            "failures": {"type": "integer", "minimum": 0},
            "power": number(),
            "mc_se": number(),
            "seed": {"type": "integer", "minimum": 0},
            "warning": {"type": "string"}
        }
    })
}

fn sample_size_search() -> Value {
    json!({
        "type": "object",
        "required": ["target", "grid", "intercept", "slope", "n_exact", "n", "n_se", "deviance"],
        "properties": {
            "target": {"type": "number"},
            "grid": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["estimate", "clamped", "probit", "weight"],
                    "properties": {
                        "estimate": {"$ref": "#/$defs/power_estimate"},
                        "clamped": {"type": "boolean"},
                        "probit": {"type": "number"},
                        "weight": {"type": "number"}
                    }
                }
            },
            "intercept": {"type": "number"},
            "slope": {"type": "number", "exclusiveMinimum": 0},
            "n_exact": {"type": "number"},
            "n": {"type": "integer", "minimum": 1},
            "n_se": number(),
            "deviance": number()
        }
    })
}

fn simulation_request() -> Value {
    json!({
        "type": "object",
        "required": ["kind", "generator", "reps"],
        "properties": {
            "kind": {"enum": ["power", "samplesize"]},
            "generator": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["table2", "params", "three_wave", "scenario", "stored"]},
                    "rho": {"type": "number"},
                    "odds_ratio": {"type": "number"},
                    "null": {"type": "boolean"},
                    "params": {"type": "object"},
                    "y2_model": {"enum": ["no_delay", "delayed"]},
                    "scenario": {"$ref": "#/$defs/scenario"},
                    "name": {"type": "string"}
                }
            },
            "model": {"$ref": "#/$defs/model_spec"},
            "n": {"type": "integer", "minimum": 2},
            "reps": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "grid": {
                "oneOf": [
                    {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 3},
                    {
                        "type": "object",
                        "required": ["lo", "hi", "points"],
                        "properties": {
                            "lo": {"type": "integer"},
                            "hi": {"type": "integer"},
                            "points": {"type": "integer", "minimum": 3}
                        }
                    }
                ]
            },
            "contrast": {"$ref": "#/$defs/scenario/properties/contrast"},
            "policy": {"enum": ["exclude", "count_as_non_reject"]}
        }
    })
}

fn simulation_report() -> Value {
    json!({
        "type": "object",
        "required": ["request", "result"],
        "properties": {
            "request": {"$ref": "#/$defs/simulation_request"},
            "result": {
                "oneOf": [
                    {"allOf": [
                        {"properties": {"kind": {"const": "power"}}, "required": ["kind"]},
                        {"$ref": "#/$defs/power_estimate"}
                    ]},
                    {"allOf": [
                        {"properties": {"kind": {"const": "samplesize"}}, "required": ["kind"]},
                        {"$ref": "#/$defs/sample_size_search"}
                    ]}
                ]
            }
        }
    })
}

fn formula_request() -> Value {
    let mut s = scenario_schema();
    let obj = s.as_object_mut().expect("object schema");
    obj.remove("$schema");
    obj.insert("title".into(), json!("Formula request"));
    let props = obj["properties"].as_object_mut().expect("properties");
    props.insert("method".into(), json!({"enum": ["cpb", "mpb"]}));
    props.insert(
        "waves".into(),
        json!({"oneOf": [{"enum": [1, 2]}, {"enum": ["1", "2", "onewave", "twowave"]}]}),
    );
    props.insert("n".into(), json!({"type": "integer", "minimum": 1}));
    props.insert(
        "attrition".into(),
        json!({"type": "number", "minimum": 0, "exclusiveMaximum": 1}),
    );
    obj.insert(
        "required".into(),
        json!(["mode", "response_rates", "method", "waves"]),
    );
    s
}

fn plan_report() -> Value {
    json!({
        "type": "object",
        "required": ["method", "alpha", "contrast", "n", "sigma2", "delta", "terms"],
        "properties": {
            "method": {"enum": ["CPB-1w", "MPB-1w", "CPB-2w", "MPB-2w"]},
            "alpha": {"type": "number"},
            "target_power": {"type": "number"},
            "contrast": {"$ref": "#/$defs/scenario/properties/contrast"},
            "n": {"type": "integer", "minimum": 1},
            "n_exact": {"type": "number"},
            "attrition": {"type": "number"},
            "n_enrolled": {"type": "integer"},
            "power": {"type": "number", "minimum": 0, "maximum": 1},
            "sigma2": {"type": "number", "exclusiveMinimum": 0},
            "delta": {"type": "number"},
            "terms": {
                "type": "object",
                "required": ["method", "sigma2", "delta", "target", "reference"],
                "properties": {
                    "target": {"$ref": "#/$defs/arm_terms"},
                    "reference": {"$ref": "#/$defs/arm_terms"},
                    "reduced_response_rate": {"type": "number"},
                    "rho": {"type": "number"},
                    "pretest_mean": {"type": "number"}
                }
            }
        }
    })
}

fn job_record() -> Value {
    json!({
        "type": "object",
        "required": ["id", "kind", "status", "config", "progress"],
        "properties": {
            "id": {"type": "string"},
            "kind": {"enum": ["power-sim", "samplesize-sim"]},
            "status": {"enum": ["queued", "running", "done", "failed"]},
            "config": {"$ref": "#/$defs/simulation_request"},
            "progress": {"type": "number", "minimum": 0, "maximum": 1},
            "error": {"type": "string"},
            "result": {"$ref": "#/$defs/simulation_report"}
        }
    })
}

fn table_report() -> Value {
    json!({
        "type": "object",
        "required": ["config", "rows"],
        "properties": {
            "config": {"type": "object", "required": ["seed", "reps"]},
            "rows": {"type": "array", "items": {"type": "object"}}
        }
    })
}

/// Every schema the service and command line publish, under `$defs`.
pub fn api_schema() -> Value {
    let mut scenario = scenario_schema();
    scenario
        .as_object_mut()
        .expect("object schema")
        .remove("$schema");
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "smartb API",
        "description": format!("Model short names accepted on the command line: {}", MODEL_NAMES.join(", ")),
        "$defs": {
            "scenario": scenario,
            "formula_request": formula_request(),
            "plan_report": plan_report(),
            "arm_terms": {
                "type": "object",
                "required": ["ai", "mu", "variance", "response_rate"],
                "properties": {
                    "ai": {"type": "integer", "minimum": 1, "maximum": 4},
                    "mu": {"type": "number"},
                    "variance": {"type": "number"},
                    "response_rate": {"type": "number"}
                }
            },
            "model_spec": model_spec(),
            "power_estimate": power_estimate(),
            "sample_size_search": sample_size_search(),
            "simulation_request": simulation_request(),
            "simulation_report": simulation_report(),
            "job_record": job_record(),
            "table_report": table_report(),
            "error": {
                "type": "object",
                "required": ["error", "violations"],
                "properties": {
                    "error": {"type": "string"},
                    "violations": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["path", "message"],
                            "properties": {"path": {"type": "string"}, "message": {"type": "string"}}
                        }
                    }
                }
            }
        }
    })
}

/// Reference to one of the published definitions.
pub fn def_ref(name: &str) -> Value {
    json!({"$ref": format!("#/$defs/{name}")})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect_refs(v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    if k == "$ref" {
                        out.push(x.as_str().unwrap().to_string());
                    } else {
                        collect_refs(x, out);
                    }
                }
            }
            Value::Array(a) => a.iter().for_each(|x| collect_refs(x, out)),
            _ => {}
        }
    }

    #[test]
    fn every_reference_resolves() {
        let doc = api_schema();
        let mut refs = Vec::new();
        collect_refs(&doc, &mut refs);
        assert!(!refs.is_empty());
        for r in refs {
            let pointer = r.trim_start_matches('#');
            assert!(doc.pointer(pointer).is_some(), "dangling {r}");
        }
    }
}
