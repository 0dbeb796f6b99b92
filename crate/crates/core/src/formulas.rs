//! Closed-form sample-size and power computations for comparing two embedded
//! adaptive interventions on the log-odds scale.
//!
//! Each method first resolves a [`VarianceTerms`] (the per-participant
//! variance `sigma2` of the estimated log odds ratio together with the
//! intermediate quantities behind it), which is then turned into a required
//! sample size or an approximate power.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::{
    log_odds_ratio, AdaptiveIntervention, ConditionalScenario, ContrastSpec, MarginalScenario,
    Scenario,
};
use crate::error::{Error, Result, Violation, Violations};
use crate::matkit::{arrowhead_inverse, quadratic_form, SmallMatrix};
use crate::normal;

/// |Δ| at or below this is treated as no effect.
pub const NULL_EFFECT_TOL: f64 = 1e-12;

/// Smallest sample size ever reported.
pub const MIN_N: u64 = 2;

/// Two-sided test level and target power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub alpha: f64,
    pub power: f64,
}

impl Default for TestSpec {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            power: 0.80,
        }
    }
}

impl TestSpec {
    pub fn new(alpha: f64, power: f64) -> Result<Self> {
        let spec = Self { alpha, power };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            v.push(Violation::new(
                "alpha",
                format!("{} must lie strictly inside (0,1)", self.alpha),
            ));
        }
        if !(self.power > 0.0 && self.power < 1.0) {
            v.push(Violation::new(
                "power",
                format!("{} must lie strictly inside (0,1)", self.power),
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(Violations(v)))
        }
    }

    /// `z_{1 - alpha/2}`.
    pub fn z_alpha(&self) -> f64 {
        normal::quantile(1.0 - self.alpha / 2.0)
    }

    /// `z_q` for the target power `q`.
    pub fn z_power(&self) -> f64 {
        normal::quantile(self.power)
    }
}

/// Which closed-form variance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CPB-1w")]
    CpbOneWave,
    #[serde(rename = "MPB-1w")]
    MpbOneWave,
    #[serde(rename = "CPB-2w")]
    CpbTwoWave,
    #[serde(rename = "MPB-2w")]
    MpbTwoWave,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::MpbOneWave,
        Method::CpbOneWave,
        Method::MpbTwoWave,
        Method::CpbTwoWave,
    ];

    pub fn from_parts(conditional: bool, waves: u8) -> Result<Method> {
        match (conditional, waves) {
            (true, 1) => Ok(Method::CpbOneWave),
            (false, 1) => Ok(Method::MpbOneWave),
            (true, 2) => Ok(Method::CpbTwoWave),
            (false, 2) => Ok(Method::MpbTwoWave),
            (_, w) => Err(Error::Validation(Violations(vec![Violation::new(
                "waves",
                format!("{w} is not supported; use 1 or 2"),
            )]))),
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, Method::CpbOneWave | Method::CpbTwoWave)
    }

    pub fn waves(self) -> u8 {
        match self {
            Method::CpbOneWave | Method::MpbOneWave => 1,
            Method::CpbTwoWave | Method::MpbTwoWave => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Method::CpbOneWave => "CPB-1w",
            Method::MpbOneWave => "MPB-1w",
            Method::CpbTwoWave => "CPB-2w",
            Method::MpbTwoWave => "MPB-2w",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::domain(format!("unknown method {s:?}")))
    }
}

/// Adjusted conditional second moments about the marginal mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedVariances {
    /// `E((Y - mu)^2 | R = 0)`.
    pub nonresponder: f64,
    /// `E((Y - mu)^2 | R = 1)`.
    pub responder: f64,
    /// `mu (1 - mu)`.
    pub marginal: f64,
}

/// Adjusted variances for one adaptive intervention.
pub fn adjusted_conditional_variances(psi0: f64, psi1: f64, r: f64) -> Result<AdjustedVariances> {
    for (name, p) in [("psi0", psi0), ("psi1", psi1)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!(
                "{name} = {p} must lie strictly inside (0,1)"
            )));
        }
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::domain(format!(
            "response rate {r} must lie in [0,1]"
        )));
    }
    let gap2 = (psi1 - psi0).powi(2);
    let mu = crate::design::marginalize(psi0, psi1, r);
    Ok(AdjustedVariances {
        nonresponder: psi0 * (1.0 - psi0) + r * r * gap2,
        responder: psi1 * (1.0 - psi1) + (1.0 - r).powi(2) * gap2,
        marginal: mu * (1.0 - mu),
    })
}

/// Intermediate quantities for one adaptive intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTerms {
    /// One-based adaptive intervention number.
    pub ai: usize,
    pub mu: f64,
    /// `mu (1 - mu)`.
    pub variance: f64,
    /// Response rate entering the formula for this intervention.
    pub response_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted: Option<AdjustedVariances>,
    /// Two-wave `[R=0, R=1]` second-moment blocks over (pretest, posttest).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditional_blocks: Option<[[[f64; 2]; 2]; 2]>,
}

/// A resolved variance `sigma2` with everything used to compute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    pub method: Method,
    pub sigma2: f64,
    /// Log odds ratio, target against reference.
    pub delta: f64,
    pub target: ArmTerms,
    pub reference: ArmTerms,
    /// Common response rate used when the formula needs one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_response_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretest_mean: Option<f64>,
}

/// Required sample size with its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeResult {
    pub n: u64,
    /// The bound before rounding up.
    pub n_exact: f64,
    pub sigma2: f64,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_response_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attrition_inflated: Option<u64>,
}

impl SampleSizeResult {
    /// Adds the attrition-inflated total.
    pub fn with_attrition(mut self, attrition: f64) -> Result<Self> {
        self.attrition_inflated = Some(inflate_for_attrition(self.n, attrition)?);
        Ok(self)
    }
}

fn check_effect(sigma2: f64, delta: f64) -> Result<()> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::domain(format!(
            "sigma2 = {sigma2} must be positive and finite"
        )));
    }
    if !delta.is_finite() {
        return Err(Error::domain(format!("delta = {delta} must be finite")));
    }
    if delta.abs() <= NULL_EFFECT_TOL {
        return Err(Error::NullEffect);
    }
    Ok(())
}

/// Smallest `n` with `n >= (z_q + z_{1-alpha/2})^2 sigma2 / delta^2`, at least [`MIN_N`].
pub fn required_n(sigma2: f64, delta: f64, spec: TestSpec) -> Result<SampleSizeResult> {
    spec.validate()?;
    check_effect(sigma2, delta)?;
    let z = spec.z_power() + spec.z_alpha();
    let n_exact = z * z * sigma2 / (delta * delta);
    let n = (n_exact.ceil() as u64).max(MIN_N);
    Ok(SampleSizeResult {
        n,
        n_exact,
        sigma2,
        delta,
        method: None,
        reduced_response_rate: None,
        attrition_inflated: None,
    })
}

/// Approximate power `Phi(sqrt(n delta^2 / sigma2) - z_{1-alpha/2})`.
pub fn power_given_n(sigma2: f64, delta: f64, n: u64, alpha: f64) -> Result<f64> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::domain(format!(
            "sigma2 = {sigma2} must be positive and finite"
        )));
    }
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!(
            "alpha = {alpha} must lie strictly inside (0,1)"
        )));
    }
    let z_alpha = normal::quantile(1.0 - alpha / 2.0);
    Ok(normal::cdf(
        (n as f64 * delta * delta / sigma2).sqrt() - z_alpha,
    ))
}

/// `ceil(n / (1 - attrition))`.
pub fn inflate_for_attrition(n: u64, attrition: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&attrition) {
        return Err(Error::domain(format!(
            "attrition {attrition} must lie in [0,1)"
        )));
    }
    let x = n as f64 / (1.0 - attrition);
    // Forgive representation error so that 100 / (1 - 0.2) is 125, not 126.
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        Ok(nearest as u64)
    } else {
        Ok(x.ceil() as u64)
    }
}

impl VarianceTerms {
    pub fn sample_size(&self, spec: TestSpec) -> Result<SampleSizeResult> {
        let mut out = required_n(self.sigma2, self.delta, spec)?;
        out.method = Some(self.method);
        out.reduced_response_rate = self.reduced_response_rate;
        Ok(out)
    }

    pub fn power(&self, n: u64, alpha: f64) -> Result<f64> {
        power_given_n(self.sigma2, self.delta, n, alpha)
    }
}

// A zero effect is allowed here: its power is alpha/2. Sizing rejects it.
fn delta_between(mu_target: f64, mu_reference: f64) -> Result<f64> {
    log_odds_ratio(mu_target, mu_reference)
}

fn missing(path: &str, message: &str) -> Error {
    Error::Validation(Violations(vec![Violation::new(path, message)]))
}

fn conditional_arm(s: &ConditionalScenario, ai: AdaptiveIntervention) -> Result<ArmTerms> {
    let i = ai.index();
    let r = s.response_rate_for(ai);
    let adjusted = adjusted_conditional_variances(s.psi_nonresponder[i], s.psi_responder[i], r)?;
    let mu = s.marginal_mean(ai);
    Ok(ArmTerms {
        ai: ai.number(),
        mu,
        variance: adjusted.marginal,
        response_rate: r,
        adjusted: Some(adjusted),
        conditional_blocks: None,
    })
}

fn marginal_arm(s: &MarginalScenario, ai: AdaptiveIntervention, r: f64) -> ArmTerms {
    let mu = s.mu[ai.index()];
    ArmTerms {
        ai: ai.number(),
        mu,
        variance: mu * (1.0 - mu),
        response_rate: r,
        adjusted: None,
        conditional_blocks: None,
    }
}

/// One-wave conditional-probabilities variance:
/// `sum over d, d' of [4(1-r) V_d0 + 2 r V_d1] / V_d^2`.
pub fn cpb_onewave_terms(s: &ConditionalScenario, contrast: ContrastSpec) -> Result<VarianceTerms> {
    s.validate()?;
    contrast.validate()?;
    let target = conditional_arm(s, contrast.target)?;
    let reference = conditional_arm(s, contrast.reference)?;
    let delta = delta_between(target.mu, reference.mu)?;
    let term = |a: &ArmTerms| {
        let adj = a
            .adjusted
            .expect("conditional arm carries adjusted variances");
        let r = a.response_rate;
        (4.0 * (1.0 - r) * adj.nonresponder + 2.0 * r * adj.responder)
            / (adj.marginal * adj.marginal)
    };
    let sigma2 = term(&target) + term(&reference);
    Ok(VarianceTerms {
        method: Method::CpbOneWave,
        sigma2,
        delta,
        target,
        reference,
        reduced_response_rate: None,
        rho: None,
        pretest_mean: None,
    })
}

/// One-wave marginal-probabilities variance: `2 [(2 - r_d)/V_d + (2 - r_d')/V_d']`.
pub fn mpb_onewave_terms(s: &MarginalScenario, contrast: ContrastSpec) -> Result<VarianceTerms> {
    s.validate()?;
    contrast.validate()?;
    let target = marginal_arm(s, contrast.target, s.response_rate_for(contrast.target));
    let reference = marginal_arm(
        s,
        contrast.reference,
        s.response_rate_for(contrast.reference),
    );
    let delta = delta_between(target.mu, reference.mu)?;
    let sigma2 = 2.0
        * ((2.0 - target.response_rate) / target.variance
            + (2.0 - reference.response_rate) / reference.variance);
    Ok(VarianceTerms {
        method: Method::MpbOneWave,
        sigma2,
        delta,
        target,
        reference,
        reduced_response_rate: None,
        rho: None,
        pretest_mean: None,
    })
}

/// Two-wave marginal-probabilities variance with a common response rate `r`:
/// `(2 - r) [(4 - 3 rho^2)/(2 V_d) - rho^2/sqrt(V_d V_d') + (4 - 3 rho^2)/(2 V_d')]`.
///
/// Unequal arm rates are reduced to their mean; the value used is recorded.
pub fn mpb_twowave_terms(s: &MarginalScenario, contrast: ContrastSpec) -> Result<VarianceTerms> {
    s.validate()?;
    contrast.validate()?;
    let rho = s
        .rho
        .ok_or_else(|| missing("rho", "required for two-wave formulas"))?;
    let r = s.mean_response_rate();
    let target = marginal_arm(s, contrast.target, r);
    let reference = marginal_arm(s, contrast.reference, r);
    let delta = delta_between(target.mu, reference.mu)?;
    let rho2 = rho * rho;
    let (vd, vdp) = (target.variance, reference.variance);
    let sigma2 = (2.0 - r)
        * ((4.0 - 3.0 * rho2) / (2.0 * vd) - rho2 / (vd * vdp).sqrt()
            + (4.0 - 3.0 * rho2) / (2.0 * vdp));
    Ok(VarianceTerms {
        method: Method::MpbTwoWave,
        sigma2,
        delta,
        target,
        reference,
        reduced_response_rate: Some(r),
        rho: Some(rho),
        pretest_mean: s.pretest_mean,
    })
}

type Block = [[f64; 2]; 2];

fn block_mul(a: &Block, b: &Block) -> Block {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn block_transpose(a: &Block) -> Block {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Adds a (pretest, posttest) block into the 5x5 layout at intervention column `k`.
fn scatter(m: &mut SmallMatrix, k: usize, b: &Block) {
    m[(0, 0)] += b[0][0];
    m[(0, k)] += b[0][1];
    m[(k, 0)] += b[1][0];
    m[(k, k)] += b[1][1];
}

/// The two-wave bread `B` and meat `M` over `(eta0, eta1..eta4)`, plus the
/// conditional second-moment blocks used for each intervention.
pub struct TwoWaveMatrices {
    pub bread: SmallMatrix,
    pub meat: SmallMatrix,
    pub blocks: [[Block; 2]; 4],
}

/// Assembles bread and meat for the two-wave conditional-probabilities formula.
pub fn twowave_matrices(s: &ConditionalScenario) -> Result<TwoWaveMatrices> {
    s.validate()?;
    let rho = s
        .rho
        .ok_or_else(|| missing("rho", "required for two-wave formulas"))?;
    let pre = s
        .pretest
        .ok_or_else(|| missing("pretest.mean", "required for two-wave formulas"))?;
    let mu0 = pre.mean;
    let v0 = mu0 * (1.0 - mu0);
    let g = 1.0 / (1.0 - rho * rho);
    let mut bread = SmallMatrix::zeros(5, 5);
    let mut meat = SmallMatrix::zeros(5, 5);
    let mut blocks = [[[[0.0; 2]; 2]; 2]; 4];
    for ai in AdaptiveIntervention::ALL {
        let i = ai.index();
        let k = i + 1;
        let mu = s.marginal_mean(ai);
        let vd = mu * (1.0 - mu);
        let r = s.response_rate_for(ai);
        let cross = rho * (v0 * vd).sqrt();
        scatter(&mut bread, k, &[[g * v0, -g * cross], [-g * cross, g * vd]]);

        // G^{1/2} R^{-1} G^{-1/2}
        let w: Block = [
            [g, -g * rho * (v0 / vd).sqrt()],
            [-g * rho * (vd / v0).sqrt(), g],
        ];
        let mut mid = [[0.0; 2]; 2];
        for responder in [false, true] {
            let psi0 = pre.given_response(ai.a1, responder);
            let psi = if responder {
                s.psi_responder[i]
            } else {
                s.psi_nonresponder[i]
            };
            let rho_r = s.rho_given(responder).unwrap_or(rho);
            let pre_var = psi0 * (1.0 - psi0) + (psi0 - mu0).powi(2);
            let post_var = psi * (1.0 - psi) + (psi - mu).powi(2);
            let off = rho_r * (psi0 * (1.0 - psi0) * psi * (1.0 - psi)).sqrt()
                + (psi0 - mu0) * (psi - mu);
            let block = [[pre_var, off], [off, post_var]];
            let weight = if responder { 2.0 * r } else { 4.0 * (1.0 - r) };
            for a in 0..2 {
                for b in 0..2 {
                    mid[a][b] += weight * block[a][b];
                }
            }
            blocks[i][responder as usize] = block;
        }
        let q = block_mul(&block_mul(&w, &mid), &block_transpose(&w));
        scatter(&mut meat, k, &q);
    }
    Ok(TwoWaveMatrices {
        bread,
        meat,
        blocks,
    })
}

/// Two-wave conditional-probabilities variance `c^T B^{-1} M B^{-1} c`.
pub fn cpb_twowave_terms(s: &ConditionalScenario, contrast: ContrastSpec) -> Result<VarianceTerms> {
    contrast.validate()?;
    let mats = twowave_matrices(s)?;
    let b_inv = arrowhead_inverse(&mats.bread)?;
    let sigma2 = quadratic_form(&contrast.coefficients(), &b_inv, &mats.meat)?;
    let mut target = conditional_arm(s, contrast.target)?;
    let mut reference = conditional_arm(s, contrast.reference)?;
    target.conditional_blocks = Some(mats.blocks[contrast.target.index()]);
    reference.conditional_blocks = Some(mats.blocks[contrast.reference.index()]);
    let delta = delta_between(target.mu, reference.mu)?;
    Ok(VarianceTerms {
        method: Method::CpbTwoWave,
        sigma2,
        delta,
        target,
        reference,
        reduced_response_rate: None,
        rho: s.rho,
        pretest_mean: s.pretest.map(|p| p.mean),
    })
}

/// Resolves `method` against any scenario. Conditional methods need a conditional scenario.
pub fn variance_terms(
    scenario: &Scenario,
    method: Method,
    contrast: ContrastSpec,
) -> Result<VarianceTerms> {
    match (method, scenario) {
        (Method::CpbOneWave, Scenario::Conditional(s)) => cpb_onewave_terms(s, contrast),
        (Method::CpbTwoWave, Scenario::Conditional(s)) => cpb_twowave_terms(s, contrast),
        (Method::CpbOneWave | Method::CpbTwoWave, Scenario::Marginal(_)) => Err(missing(
            "cells",
            "conditional-probabilities methods need cell probabilities (mode \"conditional\")",
        )),
        (Method::MpbOneWave, s) => {
            s.validate()?;
            mpb_onewave_terms(&s.marginal(), contrast)
        }
        (Method::MpbTwoWave, s) => {
            s.validate()?;
            mpb_twowave_terms(&s.marginal(), contrast)
        }
    }
}

pub fn cpb_n_onewave(
    s: &ConditionalScenario,
    contrast: ContrastSpec,
    spec: TestSpec,
) -> Result<SampleSizeResult> {
    cpb_onewave_terms(s, contrast)?.sample_size(spec)
}

pub fn mpb_n_onewave(
    s: &MarginalScenario,
    contrast: ContrastSpec,
    spec: TestSpec,
) -> Result<SampleSizeResult> {
    mpb_onewave_terms(s, contrast)?.sample_size(spec)
}

pub fn cpb_n_twowave(
    s: &ConditionalScenario,
    contrast: ContrastSpec,
    spec: TestSpec,
) -> Result<SampleSizeResult> {
    cpb_twowave_terms(s, contrast)?.sample_size(spec)
}

pub fn mpb_n_twowave(
    s: &MarginalScenario,
    contrast: ContrastSpec,
    spec: TestSpec,
) -> Result<SampleSizeResult> {
    mpb_twowave_terms(s, contrast)?.sample_size(spec)
}
