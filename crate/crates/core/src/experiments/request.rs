//! Single-cell simulation requests shared by the command line and the HTTP service.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    default_contrast, fit_probit_line, in_pool, linear_grid, replicate_outcomes, FailurePolicy,
    Generator, PowerEstimate, PowerSettings, ReplicateOutcome, SampleSizeSearch,
};
use crate::design::{AdaptiveIntervention, ContrastSpec, MarginalScenario, Scenario};
use crate::error::{Error, Result, Violation, Violations};
use crate::formulas::{mpb_n_onewave, TestSpec};
use crate::gee::{ModelSpec, WorkingCorrelation};
use crate::rng::derive_seed;
use crate::scenario_file::{ContrastFile, ScenarioFile};
use crate::simulator::{
    exact_second_followup_means, exact_two_wave, table2_row, GenParamsThreeWave, GenParamsTwoWave,
    Y2Model,
};

/// Seed used when a request does not name one.
pub const DEFAULT_SEED: u64 = 20_240_601;
/// Grid points used when a sample-size request does not give a grid.
pub const DEFAULT_GRID_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationKind {
    Power,
    #[serde(alias = "sample_size")]
    Samplesize,
}

/// Where simulated trials come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSource {
    /// A published generating scenario, looked up by its labels.
    Table2 {
        rho: f64,
        odds_ratio: f64,
        /// Zero every treatment path.
        #[serde(default)]
        null: bool,
    },
    /// Explicit two-wave generating coefficients.
    Params { params: GenParamsTwoWave },
    /// The default generating scenario extended with a second follow-up.
    ThreeWave { y2_model: Y2Model },
    /// Cell probabilities of a conditional scenario.
    Scenario { scenario: Box<ScenarioFile> },
}

impl GeneratorSource {
    pub fn resolve(&self) -> Result<Generator> {
        let gen = match self {
            GeneratorSource::Table2 {
                rho,
                odds_ratio,
                null,
            } => {
                let row = table2_row(*rho, *odds_ratio).ok_or_else(|| {
                    invalid(
                        "generator",
                        format!("no generating scenario for rho {rho} and odds ratio {odds_ratio}"),
                    )
                })?;
                let p = row.params();
                Generator::TwoWave(if *null { p.null() } else { p })
            }
            GeneratorSource::Params { params } => Generator::TwoWave(*params),
            GeneratorSource::ThreeWave { y2_model } => {
                Generator::ThreeWave(GenParamsThreeWave::new(*y2_model))
            }
            GeneratorSource::Scenario { scenario } => match scenario.to_scenario()? {
                Scenario::Conditional(s) => Generator::Cells(s),
                Scenario::Marginal(_) => {
                    return Err(invalid(
                        "generator.scenario.mode",
                        "simulation needs cell probabilities (mode \"conditional\")",
                    ))
                }
            },
        };
        gen.validate()?;
        Ok(gen)
    }
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Validation(Violations(vec![Violation::new(path, message)]))
}

fn default_model() -> ModelSpec {
    ModelSpec::covariate_adjusted(1)
}
fn default_alpha() -> f64 {
    0.05
}
fn default_target() -> f64 {
    0.8
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// Sample sizes to search over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Explicit(Vec<usize>),
    Range { lo: usize, hi: usize, points: usize },
}

impl GridSpec {
    pub fn sizes(&self) -> Vec<usize> {
        match self {
            GridSpec::Explicit(v) => v.clone(),
            GridSpec::Range { lo, hi, points } => linear_grid(*lo as f64, *hi as f64, *points),
        }
    }
}

/// A power estimate at one size, or a probit sample-size search over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRequest {
    pub kind: SimulationKind,
    pub generator: GeneratorSource,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    /// Trial size of a power request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub reps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Power the search solves for.
    #[serde(default = "default_target")]
    pub target: f64,
    /// Search grid; by default ten sizes spanning half to one and a half
    /// times the one-wave formula size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Defaults to `(+,-)` versus `(-,-)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<ContrastFile>,
    #[serde(default)]
    pub policy: FailurePolicy,
}

impl SimulationRequest {
    pub fn power(
        generator: GeneratorSource,
        model: ModelSpec,
        n: usize,
        reps: usize,
        seed: u64,
    ) -> Self {
        Self {
            kind: SimulationKind::Power,
            generator,
            model,
            n: Some(n),
            reps,
            seed,
            alpha: default_alpha(),
            target: default_target(),
            grid: None,
            contrast: None,
            policy: FailurePolicy::default(),
        }
    }

    pub fn sample_size(
        generator: GeneratorSource,
        model: ModelSpec,
        reps: usize,
        seed: u64,
    ) -> Self {
        Self {
            kind: SimulationKind::Samplesize,
            n: None,
            ..Self::power(generator, model, 0, reps, seed)
        }
    }

    pub fn contrast_spec(&self) -> Result<ContrastSpec> {
        let Some(c) = self.contrast else {
            return Ok(default_contrast());
        };
        let ai = |n: usize, path: &str| {
            AdaptiveIntervention::from_number(n)
                .ok_or_else(|| invalid(path, format!("{n} is not an intervention number 1-4")))
        };
        ContrastSpec::new(
            ai(c.target, "contrast.target")?,
            ai(c.reference, "contrast.reference")?,
        )
    }

    fn settings(&self, threads: Option<usize>) -> Result<PowerSettings> {
        let s = PowerSettings {
            alpha: self.alpha,
            contrast: self.contrast_spec()?,
            policy: self.policy,
            threads,
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks everything that can be checked without simulating.
    pub fn validate(&self) -> Result<Generator> {
        let mut v = Vec::new();
        if self.reps == 0 {
            v.push(Violation::new("reps", "must be at least 1"));
        }
        match self.kind {
            SimulationKind::Power => match self.n {
                None => v.push(Violation::new("n", "required for a power simulation")),
                Some(n) if n < 2 => v.push(Violation::new("n", "must be at least 2")),
                _ => {}
            },
            SimulationKind::Samplesize => {
                if !(self.target > 0.0 && self.target < 1.0) {
                    v.push(Violation::new("target", "must lie in (0,1)"));
                }
                if let Some(g) = &self.grid {
                    let sizes = g.sizes();
                    if sizes.len() < 3 || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] < 2 {
                        v.push(Violation::new(
                            "grid",
                            "needs at least three strictly increasing sizes of at least 2",
                        ));
                    }
                }
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            v.push(Violation::new("alpha", "must lie in (0,1)"));
        }
        if !v.is_empty() {
            return Err(Error::Validation(Violations(v)));
        }
        let gen = self.generator.resolve()?;
        self.model.validate(gen.waves())?;
        self.contrast_spec()?;
        Ok(gen)
    }

    /// Total replicates the request will simulate.
    pub fn total_reps(&self) -> Result<usize> {
        Ok(match self.kind {
            SimulationKind::Power => self.reps,
            SimulationKind::Samplesize => self.reps * self.grid_sizes(&self.validate()?)?.len(),
        })
    }

    fn grid_sizes(&self, gen: &Generator) -> Result<Vec<usize>> {
        if let Some(g) = &self.grid {
            return Ok(g.sizes());
        }
        let center = formula_center(
            gen,
            &self.model,
            self.contrast_spec()?,
            TestSpec::new(self.alpha, self.target)?,
        )?;
        Ok(linear_grid(0.5 * center, 1.5 * center, DEFAULT_GRID_POINTS))
    }
}

/// One-wave formula size under the generator's exact marginal means.
fn formula_center(
    gen: &Generator,
    model: &ModelSpec,
    contrast: ContrastSpec,
    spec: TestSpec,
) -> Result<f64> {
    let marginal = match gen {
        Generator::TwoWave(p) => exact_two_wave(p)?.scenario.to_marginal(),
        Generator::ThreeWave(p) if model.final_wave() == 2 => {
            let rates = exact_two_wave(&p.base)?.scenario.response_rate;
            MarginalScenario::new(exact_second_followup_means(p)?, rates)
        }
        Generator::ThreeWave(p) => exact_two_wave(&p.base)?.scenario.to_marginal(),
        Generator::Cells(s) => s.to_marginal(),
    };
    Ok(mpb_n_onewave(&marginal, contrast, spec)?.n as f64)
}

/// Machine-readable outcome of a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimulationResult {
    Power(PowerEstimate),
    Samplesize(SampleSizeSearch),
}

/// A request together with its result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub request: SimulationRequest,
    pub result: SimulationResult,
}

impl SimulationReport {
    /// Pretty JSON with a trailing newline; byte-stable for a given request.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs a request; `progress` receives the completed fraction.
///
/// The replicate seeds match [`super::estimate_power`] and
/// [`super::find_sample_size`] called with `derive_seed(seed, n)` per size.
pub fn run_simulation(
    req: &SimulationRequest,
    threads: Option<usize>,
    progress: &(dyn Fn(f64) + Sync),
) -> Result<SimulationReport> {
    let gen = req.validate()?;
    let settings = req.settings(threads)?;
    let sizes = match req.kind {
        SimulationKind::Power => vec![req.n.expect("validated")],
        SimulationKind::Samplesize => req.grid_sizes(&gen)?,
    };
    let total = sizes.len() * req.reps;
    let done = AtomicUsize::new(0);
    let estimates = in_pool(threads, || {
        sizes
            .iter()
            .map(|&n| {
                let cell = derive_seed(req.seed, n as u64);
                let outcomes = (0..req.reps as u64)
                    .into_par_iter()
                    .map(|rep| {
                        let out = replicate_outcomes(&gen, &[req.model], n, &settings, cell, rep);
                        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                        if k.is_multiple_of(64) || k == total {
                            progress(k as f64 / total as f64);
                        }
                        out.map(|mut v| v.remove(0))
                    })
                    .collect::<Result<Vec<ReplicateOutcome>>>()?;
                let refs: Vec<&ReplicateOutcome> = outcomes.iter().collect();
                Ok(PowerEstimate::from_outcomes(
                    req.model, n, cell, req.policy, &refs,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let result = match req.kind {
        SimulationKind::Power => {
            SimulationResult::Power(estimates.into_iter().next().expect("one size"))
        }
        SimulationKind::Samplesize => {
            SimulationResult::Samplesize(fit_probit_line(estimates, req.target)?)
        }
    };
    Ok(SimulationReport {
        request: req.clone(),
        result,
    })
}

/// A one-wave or adjusted two-wave model by short name, as used on the command line.
pub fn model_by_name(name: &str) -> Option<ModelSpec> {
    Some(match name {
        "onewave" | "one_wave" => ModelSpec::one_wave(1),
        "twowave" | "two_wave" | "covariate" => ModelSpec::covariate_adjusted(1),
        "twowave-exch" => ModelSpec::two_wave(1, WorkingCorrelation::Exchangeable),
        "twowave-ind" => ModelSpec::two_wave(1, WorkingCorrelation::Independence),
        "final-only" => ModelSpec::one_wave(2),
        "final-adj" => ModelSpec::two_wave(2, WorkingCorrelation::Exchangeable),
        "threewave-ind" => ModelSpec::three_wave(WorkingCorrelation::Independence),
        "threewave-ar1" => ModelSpec::three_wave(WorkingCorrelation::Ar1),
        "threewave-exch" => ModelSpec::three_wave(WorkingCorrelation::Exchangeable),
        _ => return None,
    })
}

/// Names accepted by [`model_by_name`].
pub const MODEL_NAMES: [&str; 9] = [
    "onewave",
    "twowave",
    "twowave-exch",
    "twowave-ind",
    "final-only",
    "final-adj",
    "threewave-ind",
    "threewave-ar1",
    "threewave-exch",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{estimate_power, find_sample_size};

    fn table2(rho: f64, odds_ratio: f64) -> GeneratorSource {
        GeneratorSource::Table2 {
            rho,
            odds_ratio,
            null: false,
        }
    }

    #[test]
    fn power_request_matches_direct_estimate() {
        let req = SimulationRequest::power(table2(0.6, 2.0), ModelSpec::one_wave(1), 120, 60, 5);
        let report = run_simulation(&req, Some(2), &|_| {}).unwrap();
        let gen = req.generator.resolve().unwrap();
        let direct = estimate_power(
            &gen,
            ModelSpec::one_wave(1),
            120,
            60,
            derive_seed(5, 120),
            &PowerSettings::default(),
        )
        .unwrap();
        assert_eq!(report.result, SimulationResult::Power(direct));
    }

    #[test]
    fn search_request_matches_direct_search() {
        let mut req =
            SimulationRequest::sample_size(table2(0.06, 3.0), ModelSpec::one_wave(1), 40, 9);
        req.grid = Some(GridSpec::Explicit(vec![60, 120, 180, 240]));
        let report = run_simulation(&req, None, &|_| {}).unwrap();
        let gen = req.generator.resolve().unwrap();
        let direct = find_sample_size(
            &gen,
            ModelSpec::one_wave(1),
            0.8,
            &[60, 120, 180, 240],
            40,
            9,
            &PowerSettings::default(),
        )
        .unwrap();
        assert_eq!(report.result, SimulationResult::Samplesize(direct));
    }

    #[test]
    fn thread_count_does_not_change_bytes() {
        let req = SimulationRequest::power(
            table2(0.3, 2.0),
            ModelSpec::covariate_adjusted(1),
            150,
            50,
            77,
        );
        let a = run_simulation(&req, Some(1), &|_| {}).unwrap().to_json();
        let b = run_simulation(&req, Some(4), &|_| {}).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn progress_reaches_one() {
        let req = SimulationRequest::power(table2(0.6, 3.0), ModelSpec::one_wave(1), 80, 100, 1);
        let last = std::sync::Mutex::new(0.0_f64);
        run_simulation(&req, Some(2), &|p| {
            let mut l = last.lock().unwrap();
            *l = l.max(p);
        })
        .unwrap();
        assert_eq!(*last.lock().unwrap(), 1.0);
    }

    #[test]
    fn default_grid_spans_formula_size() {
        let req = SimulationRequest::sample_size(table2(0.06, 2.0), ModelSpec::one_wave(1), 10, 1);
        let gen = req.validate().unwrap();
        let g = req.grid_sizes(&gen).unwrap();
        assert_eq!(g.len(), DEFAULT_GRID_POINTS);
        assert!(g[0] < 413 && *g.last().unwrap() > 413);
    }

    #[test]
    fn validation_collects_paths() {
        let mut req = SimulationRequest::power(table2(0.6, 2.0), ModelSpec::one_wave(1), 1, 0, 1);
        req.alpha = 2.0;
        let Err(Error::Validation(v)) = req.validate() else {
            panic!("expected validation error");
        };
        let paths: Vec<_> = v.0.iter().map(|x| x.path.as_str()).collect();
        assert_eq!(paths, ["reps", "n", "alpha"]);
    }

    #[test]
    fn marginal_scenario_cannot_drive_simulation() {
        let doc = r#"{"mode":"marginal","marginals":{"1":0.5,"2":0.6,"3":0.4,"4":0.4},
                     "response_rates":{"common":0.45}}"#;
        let src = GeneratorSource::Scenario {
            scenario: Box::new(ScenarioFile::from_json(doc).unwrap()),
        };
        let Err(Error::Validation(v)) = src.resolve() else {
            panic!("expected validation error");
        };
        assert_eq!(v.0[0].path, "generator.scenario.mode");
    }

    #[test]
    fn request_json_round_trips() {
        let text = r#"{"kind":"power","generator":{"kind":"table2","rho":0.6,"odds_ratio":2.0},"n":300,"reps":500}"#;
        let req: SimulationRequest = serde_json::from_str(text).unwrap();
        assert_eq!(req.model, ModelSpec::covariate_adjusted(1));
        assert_eq!(req.seed, DEFAULT_SEED);
        let again: SimulationRequest =
            serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
        assert_eq!(again, req);
    }
}
