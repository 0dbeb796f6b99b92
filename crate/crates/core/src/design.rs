//! The prototypical two-stage SMART: embedded adaptive interventions, the six
//! observed cells, and the elicited probability parameters.
//!
//! Everything downstream indexes adaptive interventions in the canonical
//! order `(+1,+1), (+1,-1), (-1,+1), (-1,-1)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation, Violations};

/// Probabilities used by the formulas must lie this far inside (0, 1).
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance for the pretest consistency identity.
pub const PRETEST_CONSISTENCY_TOL: f64 = 1e-9;

/// A treatment option coded +1 / -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    /// 0 for `Plus`, 1 for `Minus`; used to index per-arm arrays.
    pub fn index(self) -> usize {
        match self {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }

    pub fn from_index(i: usize) -> Sign {
        if i == 0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Sign::Plus => '+',
            Sign::Minus => '-',
        }
    }
}

/// An embedded adaptive intervention: stage-1 option `a1` and the stage-2
/// option `a2` offered to non-responders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdaptiveIntervention {
    pub a1: Sign,
    pub a2: Sign,
}

impl AdaptiveIntervention {
    pub const ALL: [AdaptiveIntervention; 4] = [
        AdaptiveIntervention::new(Sign::Plus, Sign::Plus),
        AdaptiveIntervention::new(Sign::Plus, Sign::Minus),
        AdaptiveIntervention::new(Sign::Minus, Sign::Plus),
        AdaptiveIntervention::new(Sign::Minus, Sign::Minus),
    ];

    pub const fn new(a1: Sign, a2: Sign) -> Self {
        Self { a1, a2 }
    }

    /// Zero-based canonical index (0..4).
    pub fn index(self) -> usize {
        self.a1.index() * 2 + self.a2.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// One-based number as printed in design tables (1..=4).
    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn from_number(n: usize) -> Option<Self> {
        n.checked_sub(1).and_then(Self::from_index)
    }

    pub fn label(self) -> String {
        format!("({},{})", self.a1.symbol(), self.a2.symbol())
    }
}

impl fmt::Display for AdaptiveIntervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The six observed cells of the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellId {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl CellId {
    pub const ALL: [CellId; 6] = [
        CellId::A,
        CellId::B,
        CellId::C,
        CellId::D,
        CellId::E,
        CellId::F,
    ];

    /// Responder cell for a stage-1 arm.
    pub fn responder(a1: Sign) -> CellId {
        match a1 {
            Sign::Plus => CellId::D,
            Sign::Minus => CellId::A,
        }
    }

    /// Non-responder cell reached by `(a1, a2)`.
    pub fn nonresponder(ai: AdaptiveIntervention) -> CellId {
        match (ai.a1, ai.a2) {
            (Sign::Plus, Sign::Plus) => CellId::E,
            (Sign::Plus, Sign::Minus) => CellId::F,
            (Sign::Minus, Sign::Plus) => CellId::B,
            (Sign::Minus, Sign::Minus) => CellId::C,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellId::A => "A",
            CellId::B => "B",
            CellId::C => "C",
            CellId::D => "D",
            CellId::E => "E",
            CellId::F => "F",
        }
    }
}

/// `(responder cell, non-responder cell)` making up an adaptive intervention.
pub fn cells_for_ai(ai: AdaptiveIntervention) -> (CellId, CellId) {
    (CellId::responder(ai.a1), CellId::nonresponder(ai))
}

/// Pairwise comparison of two embedded adaptive interventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub target: AdaptiveIntervention,
    pub reference: AdaptiveIntervention,
}

impl ContrastSpec {
    pub fn new(target: AdaptiveIntervention, reference: AdaptiveIntervention) -> Result<Self> {
        let c = Self { target, reference };
        c.validate()?;
        Ok(c)
    }

    /// `(+,+)` versus `(-,+)`.
    pub fn default_pair() -> Self {
        Self {
            target: AdaptiveIntervention::ALL[0],
            reference: AdaptiveIntervention::ALL[2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.a1 == self.reference.a1 {
            return Err(Error::Validation(Violations(vec![Violation::new(
                "contrast",
                "target and reference must differ in the stage-1 option",
            )])));
        }
        Ok(())
    }

    /// Coefficients over `(eta0, eta1..eta4)`: +1 at the target, -1 at the reference.
    pub fn coefficients(&self) -> [f64; 5] {
        let mut c = [0.0; 5];
        c[1 + self.target.index()] = 1.0;
        c[1 + self.reference.index()] = -1.0;
        c
    }

    pub fn swapped(&self) -> Self {
        Self {
            target: self.reference,
            reference: self.target,
        }
    }
}

/// `(1 - r) psi0 + r psi1`.
pub fn marginalize(psi0: f64, psi1: f64, r: f64) -> f64 {
    (1.0 - r) * psi0 + r * psi1
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log odds ratio of `mu_d` against `mu_dp`.
pub fn log_odds_ratio(mu_d: f64, mu_dp: f64) -> Result<f64> {
    for (name, p) in [("mu_d", mu_d), ("mu_dp", mu_dp)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!(
                "{name} = {p} must lie strictly inside (0,1)"
            )));
        }
    }
    Ok(logit(mu_d) - logit(mu_dp))
}

fn interior(p: f64) -> bool {
    p.is_finite() && p > PROB_EPS && p < 1.0 - PROB_EPS
}

fn unit_closed(p: f64) -> bool {
    p.is_finite() && (0.0..=1.0).contains(&p)
}

fn check_interior(out: &mut Vec<Violation>, path: String, p: f64) {
    if !interior(p) {
        out.push(Violation::new(
            path,
            format!("probability {p} must lie strictly inside (0,1)"),
        ));
    }
}

fn check_rate(out: &mut Vec<Violation>, path: String, r: f64) {
    if !unit_closed(r) {
        out.push(Violation::new(path, format!("rate {r} must lie in [0,1]")));
    }
}

fn check_rho(out: &mut Vec<Violation>, path: &str, rho: f64) {
    if !(rho.is_finite() && (0.0..1.0).contains(&rho)) {
        out.push(Violation::new(
            path,
            format!("correlation {rho} must lie in [0,1)"),
        ));
    }
}

/// Pretest (baseline) outcome parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pretest {
    /// `E(Y0)`.
    pub mean: f64,
    /// `E(Y0 | R = 0)`, defaulting to `mean`.
    pub given_nonresponder: Option<f64>,
    /// `E(Y0 | R = 1)`, defaulting to `mean`.
    pub given_responder: Option<f64>,
    /// Optional per-arm overrides `[plus, minus]` of `[E(Y0|R=0), E(Y0|R=1)]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_arm: Option<[[f64; 2]; 2]>,
}

impl Pretest {
    pub fn with_mean(mean: f64) -> Self {
        Self {
            mean,
            given_nonresponder: None,
            given_responder: None,
            by_arm: None,
        }
    }

    /// `E(Y0 | R = r)` for participants starting on `arm`.
    pub fn given_response(&self, arm: Sign, responder: bool) -> f64 {
        if let Some(by_arm) = self.by_arm {
            return by_arm[arm.index()][responder as usize];
        }
        let v = if responder {
            self.given_responder
        } else {
            self.given_nonresponder
        };
        v.unwrap_or(self.mean)
    }
}

/// Cell-level (conditional on response status) elicitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalScenario {
    /// `psi^(d0)` per adaptive intervention.
    pub psi_nonresponder: [f64; 4],
    /// `psi^(d1)` per adaptive intervention; must agree within a stage-1 arm.
    pub psi_responder: [f64; 4],
    /// Response rate per stage-1 arm `[plus, minus]`.
    pub response_rate: [f64; 2],
    pub pretest: Option<Pretest>,
    /// Marginal pretest-posttest correlation.
    pub rho: Option<f64>,
    /// Correlation conditional on `[R=0, R=1]`; defaults to `rho`.
    pub rho_conditional: Option<[f64; 2]>,
}

impl ConditionalScenario {
    /// Builds from the six cell probabilities and arm response rates.
    pub fn from_cells(cells: [f64; 6], response_rate: [f64; 2]) -> Self {
        let [a, b, c, d, e, f] = cells;
        Self {
            psi_nonresponder: [e, f, b, c],
            psi_responder: [d, d, a, a],
            response_rate,
            pretest: None,
            rho: None,
            rho_conditional: None,
        }
    }

    pub fn cell(&self, id: CellId) -> f64 {
        match id {
            CellId::A => self.psi_responder[2],
            CellId::B => self.psi_nonresponder[2],
            CellId::C => self.psi_nonresponder[3],
            CellId::D => self.psi_responder[0],
            CellId::E => self.psi_nonresponder[0],
            CellId::F => self.psi_nonresponder[1],
        }
    }

    pub fn response_rate_for(&self, ai: AdaptiveIntervention) -> f64 {
        self.response_rate[ai.a1.index()]
    }

    /// Design-average response rate (equal stage-1 randomization).
    pub fn mean_response_rate(&self) -> f64 {
        0.5 * (self.response_rate[0] + self.response_rate[1])
    }

    pub fn marginal_mean(&self, ai: AdaptiveIntervention) -> f64 {
        let i = ai.index();
        marginalize(
            self.psi_nonresponder[i],
            self.psi_responder[i],
            self.response_rate_for(ai),
        )
    }

    /// Conditional correlation for response status `r`.
    pub fn rho_given(&self, responder: bool) -> Option<f64> {
        match self.rho_conditional {
            Some(rc) => Some(rc[responder as usize]),
            None => self.rho,
        }
    }

    /// The marginal scenario implied by this one (same response rates and pretest).
    pub fn to_marginal(&self) -> MarginalScenario {
        let mut mu = [0.0; 4];
        for ai in AdaptiveIntervention::ALL {
            mu[ai.index()] = self.marginal_mean(ai);
        }
        MarginalScenario {
            mu,
            response_rate: self.response_rate,
            pretest_mean: self.pretest.map(|p| p.mean),
            rho: self.rho,
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for ai in AdaptiveIntervention::ALL {
            let i = ai.index();
            let (resp, nonresp) = cells_for_ai(ai);
            check_interior(
                &mut out,
                format!("cells.{}", nonresp.name()),
                self.psi_nonresponder[i],
            );
            if ai.a2 == Sign::Plus {
                check_interior(
                    &mut out,
                    format!("cells.{}", resp.name()),
                    self.psi_responder[i],
                );
            }
        }
        for arm in [Sign::Plus, Sign::Minus] {
            let a = AdaptiveIntervention::new(arm, Sign::Plus).index();
            let b = AdaptiveIntervention::new(arm, Sign::Minus).index();
            if (self.psi_responder[a] - self.psi_responder[b]).abs() > PRETEST_CONSISTENCY_TOL {
                out.push(Violation::new(
                    format!("cells.{}", CellId::responder(arm).name()),
                    format!(
                        "responder mean must not depend on a2 (AI {} has {}, AI {} has {})",
                        a + 1,
                        self.psi_responder[a],
                        b + 1,
                        self.psi_responder[b]
                    ),
                ));
            }
        }
        check_rate(
            &mut out,
            "response_rates.plus_arm".into(),
            self.response_rate[0],
        );
        check_rate(
            &mut out,
            "response_rates.minus_arm".into(),
            self.response_rate[1],
        );
        if let Some(rho) = self.rho {
            check_rho(&mut out, "rho", rho);
        }
        if let Some(rc) = self.rho_conditional {
            check_rho(&mut out, "rho_conditional.nonresponder", rc[0]);
            check_rho(&mut out, "rho_conditional.responder", rc[1]);
        }
        if let Some(p) = &self.pretest {
            pretest_violations(&mut out, p, self.response_rate);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        into_result(self.violations())
    }
}

fn pretest_violations(out: &mut Vec<Violation>, p: &Pretest, response_rate: [f64; 2]) {
    check_interior(out, "pretest.mean".into(), p.mean);
    let before = out.len();
    if let Some(v) = p.given_nonresponder {
        check_interior(out, "pretest.given_nonresponder".into(), v);
    }
    if let Some(v) = p.given_responder {
        check_interior(out, "pretest.given_responder".into(), v);
    }
    if out.len() == before && (p.given_nonresponder.is_some() || p.given_responder.is_some()) {
        let r_bar = 0.5 * (response_rate[0] + response_rate[1]);
        let implied = marginalize(
            p.given_nonresponder.unwrap_or(p.mean),
            p.given_responder.unwrap_or(p.mean),
            r_bar,
        );
        if (implied - p.mean).abs() > PRETEST_CONSISTENCY_TOL {
            out.push(Violation::new(
                "pretest",
                format!(
                    "(1-r)*given_nonresponder + r*given_responder = {implied} must equal mean {} (r = {r_bar})",
                    p.mean
                ),
            ));
        }
    }
    if let Some(by_arm) = p.by_arm {
        for arm in [Sign::Plus, Sign::Minus] {
            let [g0, g1] = by_arm[arm.index()];
            let name = if arm == Sign::Plus {
                "plus_arm"
            } else {
                "minus_arm"
            };
            check_interior(out, format!("pretest.by_arm.{name}.given_nonresponder"), g0);
            check_interior(out, format!("pretest.by_arm.{name}.given_responder"), g1);
            let implied = marginalize(g0, g1, response_rate[arm.index()]);
            if (implied - p.mean).abs() > PRETEST_CONSISTENCY_TOL {
                out.push(Violation::new(
                    format!("pretest.by_arm.{name}"),
                    format!("per-arm pretest means imply {implied}, expected {}", p.mean),
                ));
            }
        }
    }
}

fn into_result(v: Vec<Violation>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(Violations(v)))
    }
}

/// Marginal (over response status) elicitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalScenario {
    /// `mu^(d)` per adaptive intervention.
    pub mu: [f64; 4],
    /// Response rate per stage-1 arm `[plus, minus]`.
    pub response_rate: [f64; 2],
    pub pretest_mean: Option<f64>,
    pub rho: Option<f64>,
}

impl MarginalScenario {
    pub fn new(mu: [f64; 4], response_rate: [f64; 2]) -> Self {
        Self {
            mu,
            response_rate,
            pretest_mean: None,
            rho: None,
        }
    }

    pub fn response_rate_for(&self, ai: AdaptiveIntervention) -> f64 {
        self.response_rate[ai.a1.index()]
    }

    pub fn mean_response_rate(&self) -> f64 {
        0.5 * (self.response_rate[0] + self.response_rate[1])
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for ai in AdaptiveIntervention::ALL {
            check_interior(
                &mut out,
                format!("marginals.{}", ai.number()),
                self.mu[ai.index()],
            );
        }
        check_rate(
            &mut out,
            "response_rates.plus_arm".into(),
            self.response_rate[0],
        );
        check_rate(
            &mut out,
            "response_rates.minus_arm".into(),
            self.response_rate[1],
        );
        if let Some(m) = self.pretest_mean {
            check_interior(&mut out, "pretest.mean".into(), m);
        }
        if let Some(rho) = self.rho {
            check_rho(&mut out, "rho", rho);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        into_result(self.violations())
    }
}

/// Either kind of elicited scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Conditional(ConditionalScenario),
    Marginal(MarginalScenario),
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::Conditional(s) => s.validate(),
            Scenario::Marginal(s) => s.validate(),
        }
    }

    /// Marginal view; conditional scenarios are marginalized over response status.
    pub fn marginal(&self) -> MarginalScenario {
        match self {
            Scenario::Conditional(s) => s.to_marginal(),
            Scenario::Marginal(s) => s.clone(),
        }
    }
}

/// Validates a scenario, returning it unchanged or every violation found.
pub fn validate_scenario(s: Scenario) -> Result<Scenario> {
    s.validate()?;
    Ok(s)
}
