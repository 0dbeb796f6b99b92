//! Weighted-and-replicated GEE for binary outcomes with a logit link.
//!
//! Participants with identical analysis rows are collapsed into profiles
//! before fitting, so the cost of a fit depends on the number of distinct
//! profiles rather than on the sample size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design::{expit, logit, AdaptiveIntervention, ContrastSpec};
use crate::error::{Error, Result};
use crate::matkit::{invert_quiet, SmallMatrix};
use crate::normal;
use crate::simulator::{AnalysisRow, AnalysisRows};

pub const SCORE_TOL: f64 = 1e-8;
pub const STEP_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 50;
/// Largest absolute working correlation the moment estimator may return.
pub const CORR_CLAMP: f64 = 0.999;
/// Upper clamp on the marginal correlation estimate.
pub const MARGINAL_CORR_MAX: f64 = 1.0 - 1e-9;

const MAX_T: usize = 3;
const MAX_P: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelVariant {
    /// Per-intervention log-odds of one follow-up wave.
    OneWaveSaturated { wave: usize },
    /// Shared pretest log-odds plus per-intervention log-odds of one follow-up wave.
    TwoWaveSaturated { wave: usize },
    /// Per-intervention log-odds of one follow-up wave plus a shared pretest slope.
    CovariateAdjusted { wave: usize },
    /// Shared pretest log-odds, then per-intervention segments to each follow-up.
    ThreeWavePiecewise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable,
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub correlation: WorkingCorrelation,
    /// Adds two half-weight pseudo-participants (all-0 and all-1) to every
    /// intervention. Off by default.
    #[serde(default)]
    pub continuity_correction: bool,
}

impl ModelSpec {
    pub fn new(variant: ModelVariant, correlation: WorkingCorrelation) -> Self {
        Self {
            variant,
            correlation,
            continuity_correction: false,
        }
    }

    pub fn one_wave(wave: usize) -> Self {
        Self::new(
            ModelVariant::OneWaveSaturated { wave },
            WorkingCorrelation::Independence,
        )
    }

    pub fn two_wave(wave: usize, correlation: WorkingCorrelation) -> Self {
        Self::new(ModelVariant::TwoWaveSaturated { wave }, correlation)
    }

    pub fn covariate_adjusted(wave: usize) -> Self {
        Self::new(
            ModelVariant::CovariateAdjusted { wave },
            WorkingCorrelation::Independence,
        )
    }

    pub fn three_wave(correlation: WorkingCorrelation) -> Self {
        Self::new(ModelVariant::ThreeWavePiecewise, correlation)
    }

    pub fn with_continuity_correction(mut self) -> Self {
        self.continuity_correction = true;
        self
    }

    pub fn n_params(&self) -> usize {
        match self.variant {
            ModelVariant::OneWaveSaturated { .. } => 4,
            ModelVariant::TwoWaveSaturated { .. } | ModelVariant::CovariateAdjusted { .. } => 5,
            ModelVariant::ThreeWavePiecewise => 9,
        }
    }

    /// Waves entering the estimating equations, in time order.
    pub fn modeled_waves(&self) -> Vec<usize> {
        match self.variant {
            ModelVariant::OneWaveSaturated { wave } | ModelVariant::CovariateAdjusted { wave } => {
                vec![wave]
            }
            ModelVariant::TwoWaveSaturated { wave } => vec![0, wave],
            ModelVariant::ThreeWavePiecewise => vec![0, 1, 2],
        }
    }

    /// The follow-up wave whose intervention means are compared.
    pub fn final_wave(&self) -> usize {
        match self.variant {
            ModelVariant::OneWaveSaturated { wave }
            | ModelVariant::TwoWaveSaturated { wave }
            | ModelVariant::CovariateAdjusted { wave } => wave,
            ModelVariant::ThreeWavePiecewise => 2,
        }
    }

    pub fn validate(&self, waves: usize) -> Result<()> {
        let final_wave = self.final_wave();
        if final_wave == 0 || final_wave >= waves {
            return Err(Error::Unsupported(format!(
                "model uses wave {final_wave} but the data have waves 0..{}",
                waves.saturating_sub(1)
            )));
        }
        if self.variant == ModelVariant::ThreeWavePiecewise && waves != 3 {
            return Err(Error::Unsupported(
                "the piecewise model requires three-wave rows".into(),
            ));
        }
        Ok(())
    }

    /// Contrast vector comparing the final-wave log-odds of two interventions.
    pub fn contrast_vector(&self, contrast: ContrastSpec) -> Vec<f64> {
        let (t, r) = (contrast.target.index(), contrast.reference.index());
        let mut c = vec![0.0; self.n_params()];
        match self.variant {
            ModelVariant::OneWaveSaturated { .. } | ModelVariant::CovariateAdjusted { .. } => {
                c[t] = 1.0;
                c[r] = -1.0;
            }
            ModelVariant::TwoWaveSaturated { .. } => c.copy_from_slice(&contrast.coefficients()),
            ModelVariant::ThreeWavePiecewise => {
                c[1 + t] = 1.0;
                c[5 + t] = 1.0;
                c[1 + r] = -1.0;
                c[5 + r] = -1.0;
            }
        }
        c
    }

    /// Design rows for one analysis row: `(x, y)` per modeled wave.
    fn design(
        &self,
        ai: usize,
        outcomes: [u8; 3],
        x: &mut [[f64; MAX_P]; MAX_T],
        y: &mut [f64; MAX_T],
    ) -> usize {
        for row in x.iter_mut() {
            row.fill(0.0);
        }
        match self.variant {
            ModelVariant::OneWaveSaturated { wave } => {
                x[0][ai] = 1.0;
                y[0] = outcomes[wave] as f64;
                1
            }
            ModelVariant::CovariateAdjusted { wave } => {
                x[0][ai] = 1.0;
                x[0][4] = outcomes[0] as f64;
                y[0] = outcomes[wave] as f64;
                1
            }
            ModelVariant::TwoWaveSaturated { wave } => {
                x[0][0] = 1.0;
                x[1][1 + ai] = 1.0;
                y[0] = outcomes[0] as f64;
                y[1] = outcomes[wave] as f64;
                2
            }
            ModelVariant::ThreeWavePiecewise => {
                for t in 0..3 {
                    x[t][0] = 1.0;
                    y[t] = outcomes[t] as f64;
                }
                x[1][1 + ai] = 1.0;
                x[2][1 + ai] = 1.0;
                x[2][5 + ai] = 1.0;
                3
            }
        }
    }
}

/// Time pairs whose Pearson-residual products feed the correlation estimate.
fn correlation_pairs(corr: WorkingCorrelation, t: usize) -> Vec<(usize, usize)> {
    match corr {
        WorkingCorrelation::Independence => Vec::new(),
        WorkingCorrelation::Exchangeable => (0..t)
            .flat_map(|a| (a + 1..t).map(move |b| (a, b)))
            .collect(),
        WorkingCorrelation::Ar1 => (1..t).map(|b| (b - 1, b)).collect(),
    }
}

fn working_correlation(corr: WorkingCorrelation, alpha: f64, t: usize) -> [[f64; MAX_T]; MAX_T] {
    let mut r = [[0.0; MAX_T]; MAX_T];
    for (a, row) in r.iter_mut().enumerate().take(t) {
        for (b, v) in row.iter_mut().enumerate().take(t) {
            *v = if a == b {
                1.0
            } else {
                match corr {
                    WorkingCorrelation::Independence => 0.0,
                    WorkingCorrelation::Exchangeable => alpha,
                    WorkingCorrelation::Ar1 => alpha.powi(a.abs_diff(b) as i32),
                }
            };
        }
    }
    r
}

/// One participant profile: its analysis rows and how many participants share them.
#[derive(Debug, Clone)]
struct Profile {
    rows: Vec<(usize, f64, [u8; 3])>,
    count: f64,
}

fn build_profiles(rows: &AnalysisRows, spec: &ModelSpec) -> Vec<Profile> {
    let mut map: BTreeMap<Vec<(u8, u64, [u8; 3])>, f64> = BTreeMap::new();
    let mut i = 0;
    let all = &rows.rows;
    while i < all.len() {
        let id = all[i].participant;
        let mut j = i;
        let mut key = Vec::with_capacity(2);
        while j < all.len() && all[j].participant == id {
            let r: &AnalysisRow = &all[j];
            key.push((r.ai, r.weight.to_bits(), r.outcomes));
            j += 1;
        }
        *map.entry(key).or_insert(0.0) += 1.0;
        i = j;
    }
    let mut profiles: Vec<Profile> = map
        .into_iter()
        .map(|(key, count)| Profile {
            rows: key
                .into_iter()
                .map(|(ai, w, o)| (ai as usize, f64::from_bits(w), o))
                .collect(),
            count,
        })
        .collect();
    if spec.continuity_correction {
        for ai in 0..4 {
            for o in [[0u8; 3], [1u8; 3]] {
                profiles.push(Profile {
                    rows: vec![(ai, 0.5, o)],
                    count: 1.0,
                });
            }
        }
    }
    profiles
}

/// Weighted outcome mean of each fitted (intervention, wave) cell.
fn check_separation(profiles: &[Profile], spec: &ModelSpec) -> Result<()> {
    let waves = spec.modeled_waves();
    let mut sw = [0.0f64; 4];
    let mut swy = [[0.0f64; MAX_T]; 4];
    for p in profiles {
        for &(ai, w, o) in &p.rows {
            sw[ai] += p.count * w;
            for (k, &t) in waves.iter().enumerate() {
                swy[ai][k] += p.count * w * o[t] as f64;
            }
        }
    }
    for (ai, &w) in sw.iter().enumerate() {
        let label = AdaptiveIntervention::ALL[ai].label();
        if w <= 0.0 {
            return Err(Error::NonConvergence(format!(
                "intervention {label} has no rows"
            )));
        }
        for (k, &t) in waves.iter().enumerate() {
            let mean = swy[ai][k] / w;
            if mean <= 0.0 || mean >= 1.0 {
                return Err(Error::Separation {
                    cell: format!("{label} wave {t}"),
                    mean,
                });
            }
        }
    }
    if matches!(spec.variant, ModelVariant::CovariateAdjusted { .. }) {
        let total: f64 = sw.iter().sum();
        let y0: f64 = profiles
            .iter()
            .flat_map(|p| {
                p.rows
                    .iter()
                    .map(move |&(_, w, o)| p.count * w * o[0] as f64)
            })
            .sum();
        if y0 <= 0.0 || y0 >= total {
            return Err(Error::NonConvergence(
                "pretest covariate is constant".into(),
            ));
        }
    }
    Ok(())
}

/// Result of fitting a model.
#[derive(Debug, Clone)]
pub struct GeeFit {
    pub spec: ModelSpec,
    pub coefficients: Vec<f64>,
    /// `B^-1 / n`.
    pub model_covariance: SmallMatrix,
    /// `B^-1 M B^-1 / n`.
    pub sandwich: SmallMatrix,
    /// Estimated working-correlation parameter (0 under independence).
    pub alpha: f64,
    /// Estimated scale parameter.
    pub phi: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the per-participant estimating function at the solution.
    pub score_norm: f64,
    pub participants: usize,
}

impl GeeFit {
    /// Fitted mean of wave `t` under intervention `ai` (for models whose mean
    /// does not depend on the pretest).
    pub fn fitted_mean(&self, ai: usize, wave: usize) -> Option<f64> {
        let b = &self.coefficients;
        match self.spec.variant {
            ModelVariant::OneWaveSaturated { wave: w } if w == wave => Some(expit(b[ai])),
            ModelVariant::TwoWaveSaturated { wave: w } => match wave {
                0 => Some(expit(b[0])),
                _ if wave == w => Some(expit(b[1 + ai])),
                _ => None,
            },
            ModelVariant::ThreeWavePiecewise => match wave {
                0 => Some(expit(b[0])),
                1 => Some(expit(b[0] + b[1 + ai])),
                2 => Some(expit(b[0] + b[1 + ai] + b[5 + ai])),
                _ => None,
            },
            _ => None,
        }
    }
}

struct Accumulated {
    score: Vec<f64>,
    hessian: SmallMatrix,
    meat: SmallMatrix,
}

fn linear_predictor(x: &[f64; MAX_P], beta: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// Weighted Pearson moment estimates of `(phi, alpha)` at `beta`.
fn moment_estimates(profiles: &[Profile], spec: &ModelSpec, beta: &[f64]) -> (f64, f64) {
    let p = beta.len() as f64;
    let mut x = [[0.0; MAX_P]; MAX_T];
    let mut y = [0.0; MAX_T];
    let (mut sum_sq, mut sum_w_t, mut sum_pair, mut sum_w_pairs) = (0.0, 0.0, 0.0, 0.0);
    let mut pairs = Vec::new();
    for prof in profiles {
        for &(ai, w, o) in &prof.rows {
            let t = spec.design(ai, o, &mut x, &mut y);
            if pairs.is_empty() && t > 1 {
                pairs = correlation_pairs(spec.correlation, t);
            }
            let mut e = [0.0; MAX_T];
            for k in 0..t {
                let mu = expit(linear_predictor(&x[k], beta));
                e[k] = (y[k] - mu) / (mu * (1.0 - mu)).sqrt();
                sum_sq += prof.count * w * e[k] * e[k];
            }
            sum_w_t += prof.count * w * t as f64;
            for &(a, b) in &pairs {
                sum_pair += prof.count * w * e[a] * e[b];
            }
            sum_w_pairs += prof.count * w * pairs.len() as f64;
        }
    }
    let phi = sum_sq / (sum_w_t - p).max(1.0);
    if pairs.is_empty() || phi <= 0.0 {
        return (phi, 0.0);
    }
    let alpha = sum_pair / (sum_w_pairs - p).max(1.0) / phi;
    let t = spec.modeled_waves().len();
    let lower = match spec.correlation {
        WorkingCorrelation::Exchangeable if t > 2 => -1.0 / (t as f64 - 1.0) + (1.0 - CORR_CLAMP),
        _ => -CORR_CLAMP,
    };
    (phi, alpha.clamp(lower, CORR_CLAMP))
}

fn accumulate(
    profiles: &[Profile],
    spec: &ModelSpec,
    beta: &[f64],
    alpha: f64,
    with_meat: bool,
) -> Result<Accumulated> {
    let p = beta.len();
    let mut score = vec![0.0; p];
    let mut hessian = SmallMatrix::zeros(p, p);
    let mut meat = SmallMatrix::zeros(p, p);
    let mut x = [[0.0; MAX_P]; MAX_T];
    let mut y = [0.0; MAX_T];
    let mut rinv_cache: Option<(usize, SmallMatrix)> = None;
    for prof in profiles {
        let mut u_i = vec![0.0; p];
        for &(ai, w, o) in &prof.rows {
            let t = spec.design(ai, o, &mut x, &mut y);
            let rinv = match &rinv_cache {
                Some((tt, m)) if *tt == t => m.clone(),
                _ => {
                    let r = working_correlation(spec.correlation, alpha, t);
                    let rows: Vec<&[f64]> = r.iter().take(t).map(|row| &row[..t]).collect();
                    let m = invert_quiet(&SmallMatrix::from_rows(&rows)?)?;
                    rinv_cache = Some((t, m.clone()));
                    m
                }
            };
            // With logit link D = A X, so D^T V^-1 = X^T A^{1/2} R^-1 A^{-1/2}.
            let mut sd = [0.0; MAX_T];
            let mut resid = [0.0; MAX_T];
            for k in 0..t {
                let mu = expit(linear_predictor(&x[k], beta));
                let v = mu * (1.0 - mu);
                sd[k] = v.sqrt();
                resid[k] = (y[k] - mu) / sd[k];
            }
            // G = A^{1/2} R^-1 A^{1/2}: weight between waves a and b.
            let mut g = [[0.0; MAX_T]; MAX_T];
            for a in 0..t {
                for b in 0..t {
                    g[a][b] = sd[a] * rinv[(a, b)] * sd[b];
                }
            }
            // Score: X^T A^{1/2} R^-1 e, with e the Pearson residual.
            let mut h = [0.0; MAX_T];
            for a in 0..t {
                for b in 0..t {
                    h[a] += sd[a] * rinv[(a, b)] * resid[b];
                }
            }
            for j in 0..p {
                let mut s = 0.0;
                for a in 0..t {
                    s += x[a][j] * h[a];
                }
                u_i[j] += w * s;
            }
            for j in 0..p {
                for a in 0..t {
                    if x[a][j] == 0.0 {
                        continue;
                    }
                    for k in 0..p {
                        let mut s = 0.0;
                        for b in 0..t {
                            s += g[a][b] * x[b][k];
                        }
                        hessian[(j, k)] += prof.count * w * x[a][j] * s;
                    }
                }
            }
        }
        for j in 0..p {
            score[j] += prof.count * u_i[j];
        }
        if with_meat {
            meat.add_outer(&u_i, prof.count);
        }
    }
    Ok(Accumulated {
        score,
        hessian,
        meat,
    })
}

fn initial_coefficients(profiles: &[Profile], spec: &ModelSpec) -> Vec<f64> {
    let waves = spec.modeled_waves();
    let mut sw = [0.0f64; 4];
    let mut swy = [[0.0f64; MAX_T]; 4];
    for p in profiles {
        for &(ai, w, o) in &p.rows {
            sw[ai] += p.count * w;
            for (k, &t) in waves.iter().enumerate() {
                swy[ai][k] += p.count * w * o[t] as f64;
            }
        }
    }
    let cell = |ai: usize, k: usize| logit((swy[ai][k] / sw[ai]).clamp(1e-6, 1.0 - 1e-6));
    let pooled = |k: usize| {
        let total: f64 = sw.iter().sum();
        let s: f64 = (0..4).map(|ai| swy[ai][k]).sum();
        logit((s / total).clamp(1e-6, 1.0 - 1e-6))
    };
    let mut b = vec![0.0; spec.n_params()];
    match spec.variant {
        ModelVariant::OneWaveSaturated { .. } | ModelVariant::CovariateAdjusted { .. } => {
            for ai in 0..4 {
                b[ai] = cell(ai, 0);
            }
        }
        ModelVariant::TwoWaveSaturated { .. } => {
            b[0] = pooled(0);
            for ai in 0..4 {
                b[1 + ai] = cell(ai, 1);
            }
        }
        ModelVariant::ThreeWavePiecewise => {
            b[0] = pooled(0);
            for ai in 0..4 {
                b[1 + ai] = cell(ai, 1) - b[0];
                b[5 + ai] = cell(ai, 2) - cell(ai, 1);
            }
        }
    }
    b
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Solves the weighted estimating equations by Fisher scoring, updating the
/// working correlation between sweeps.
pub fn fit(rows: &AnalysisRows, spec: &ModelSpec) -> Result<GeeFit> {
    spec.validate(rows.waves)?;
    if rows.participants == 0 || rows.rows.is_empty() {
        return Err(Error::Dataset("no analysis rows".into()));
    }
    let profiles = build_profiles(rows, spec);
    check_separation(&profiles, spec)?;
    let n = rows.participants as f64;
    let mut beta = initial_coefficients(&profiles, spec);
    let mut alpha = 0.0;
    let mut phi = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        if spec.correlation != WorkingCorrelation::Independence {
            (phi, alpha) = moment_estimates(&profiles, spec, &beta);
        }
        let acc = accumulate(&profiles, spec, &beta, alpha, false)?;
        if max_abs(&acc.score) / n <= SCORE_TOL {
            converged = true;
            break;
        }
        let hinv = invert_quiet(&acc.hessian)
            .map_err(|e| Error::NonConvergence(format!("information matrix: {e}")))?;
        let step = hinv.mul_vec(&acc.score)?;
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        iterations += 1;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonConvergence("coefficients diverged".into()));
        }
        if max_abs(&step) <= STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "no convergence within {MAX_ITER} iterations"
        )));
    }
    if spec.correlation == WorkingCorrelation::Independence {
        (phi, _) = moment_estimates(&profiles, spec, &beta);
    }
    let acc = accumulate(&profiles, spec, &beta, alpha, true)?;
    let hinv = invert_quiet(&acc.hessian)
        .map_err(|e| Error::NonConvergence(format!("information matrix: {e}")))?;
    let sandwich = hinv.matmul(&acc.meat)?.matmul(&hinv)?;
    let mut sym = sandwich.clone();
    let p = beta.len();
    for i in 0..p {
        for j in 0..p {
            sym[(i, j)] = 0.5 * (sandwich[(i, j)] + sandwich[(j, i)]);
        }
    }
    Ok(GeeFit {
        spec: *spec,
        coefficients: beta,
        model_covariance: hinv,
        sandwich: sym,
        alpha,
        phi,
        iterations,
        converged,
        score_norm: max_abs(&acc.score) / n,
        participants: rows.participants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub reject: bool,
}

/// Two-sided Wald test of `c^T theta = 0` with the sandwich covariance.
pub fn wald_test(fit: &GeeFit, c: &[f64], alpha: f64) -> Result<WaldResult> {
    let p = fit.coefficients.len();
    if c.len() != p {
        return Err(Error::Shape(format!(
            "contrast of length {} for {p} coefficients",
            c.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha = {alpha} must lie in (0,1)")));
    }
    let estimate: f64 = c.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
    let sc = fit.sandwich.mul_vec(c)?;
    let var: f64 = c.iter().zip(&sc).map(|(a, b)| a * b).sum();
    if !(var > 0.0) {
        return Err(Error::DegenerateContrast(var));
    }
    let std_error = var.sqrt();
    let z = estimate / std_error;
    Ok(WaldResult {
        estimate,
        std_error,
        z,
        reject: z.abs() > normal::quantile(1.0 - alpha / 2.0),
    })
}

/// Weighted correlation between pretest and final-wave residuals, pooled
/// over interventions and response status.
///
/// Residuals are centered at the fitted means when the model fits both waves
/// without covariates, and at weighted per-intervention means otherwise.
pub fn estimate_marginal_correlation(rows: &AnalysisRows, fit: &GeeFit) -> Result<f64> {
    if rows.waves < 2 {
        return Err(Error::Unsupported(
            "marginal correlation needs at least two waves".into(),
        ));
    }
    let wave = fit.spec.final_wave();
    let mut sw = [0.0f64; 4];
    let mut s0 = [0.0f64; 4];
    let mut s1 = [0.0f64; 4];
    for r in &rows.rows {
        let d = r.ai as usize;
        sw[d] += r.weight;
        s0[d] += r.weight * r.outcomes[0] as f64;
        s1[d] += r.weight * r.outcomes[wave] as f64;
    }
    let center = |d: usize, t: usize| -> f64 {
        fit.fitted_mean(d, t).unwrap_or_else(|| {
            let s = if t == 0 { s0[d] } else { s1[d] };
            if sw[d] > 0.0 {
                s / sw[d]
            } else {
                0.0
            }
        })
    };
    let (mut a, mut b, mut ab) = (0.0, 0.0, 0.0);
    for r in &rows.rows {
        let d = r.ai as usize;
        let e0 = r.outcomes[0] as f64 - center(d, 0);
        let e1 = r.outcomes[wave] as f64 - center(d, wave);
        a += r.weight * e0 * e0;
        b += r.weight * e1 * e1;
        ab += r.weight * e0 * e1;
    }
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Dataset("a wave has no residual variation".into()));
    }
    let rho = ab / (a * b).sqrt();
    if rho > MARGINAL_CORR_MAX {
        log::warn!("marginal correlation estimate {rho} clamped to {MARGINAL_CORR_MAX}");
        return Ok(MARGINAL_CORR_MAX);
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Sign;
    use crate::rng::replicate_rng;
    use crate::simulator::{
        simulate_two_wave, simulate_two_wave_with, weight_and_replicate, GenParamsTwoWave,
        Participant, TrialDataset,
    };
    use rand::Rng;

    fn rows_for(n: usize, seed: u64) -> AnalysisRows {
        weight_and_replicate(&simulate_two_wave(&GenParamsTwoWave::default(), n, seed).unwrap())
            .unwrap()
    }

    /// Brute-force weighted mean of `wave` per intervention, straight from rows.
    fn weighted_means(rows: &AnalysisRows, wave: usize) -> [f64; 4] {
        let mut sw = [0.0; 4];
        let mut sy = [0.0; 4];
        for r in &rows.rows {
            sw[r.ai as usize] += r.weight;
            sy[r.ai as usize] += r.weight * r.outcomes[wave] as f64;
        }
        [0, 1, 2, 3].map(|d| sy[d] / sw[d])
    }

    #[test]
    fn saturated_fit_reproduces_weighted_means() {
        let rows = rows_for(500, 1);
        let f = fit(&rows, &ModelSpec::one_wave(1)).unwrap();
        let m = weighted_means(&rows, 1);
        for d in 0..4 {
            assert!((expit(f.coefficients[d]) - m[d]).abs() < 1e-10);
        }
        assert!(f.converged && f.score_norm <= SCORE_TOL);
    }

    #[test]
    fn independence_two_wave_matches_posttest_only() {
        let rows = rows_for(400, 2);
        let one = fit(&rows, &ModelSpec::one_wave(1)).unwrap();
        let two = fit(
            &rows,
            &ModelSpec::two_wave(1, WorkingCorrelation::Independence),
        )
        .unwrap();
        for d in 0..4 {
            assert!((one.coefficients[d] - two.coefficients[1 + d]).abs() < 1e-9);
            for e in 0..4 {
                assert!((one.sandwich[(d, e)] - two.sandwich[(1 + d, 1 + e)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exchangeable_equals_ar1_on_two_waves() {
        let rows = rows_for(300, 3);
        let a = fit(
            &rows,
            &ModelSpec::two_wave(1, WorkingCorrelation::Exchangeable),
        )
        .unwrap();
        let b = fit(&rows, &ModelSpec::two_wave(1, WorkingCorrelation::Ar1)).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.sandwich.max_abs_diff(&b.sandwich), 0.0);
    }

    #[test]
    fn exchangeable_uses_pretest_information() {
        let rows = rows_for(1000, 4);
        let c = ModelSpec::one_wave(1).contrast_vector(ContrastSpec::default_pair());
        let one = fit(&rows, &ModelSpec::one_wave(1)).unwrap();
        let spec = ModelSpec::two_wave(1, WorkingCorrelation::Exchangeable);
        let two = fit(&rows, &spec).unwrap();
        let c2 = spec.contrast_vector(ContrastSpec::default_pair());
        let v1 = wald_test(&one, &c, 0.05).unwrap().std_error;
        let v2 = wald_test(&two, &c2, 0.05).unwrap().std_error;
        assert!(two.alpha > 0.3, "{}", two.alpha);
        assert!(v2 < v1);
    }

    #[test]
    fn sandwich_cross_arm_entries_vanish() {
        let rows = rows_for(300, 5);
        let f = fit(&rows, &ModelSpec::one_wave(1)).unwrap();
        for d in 0..4 {
            for e in 0..4 {
                if AdaptiveIntervention::ALL[d].a1 != AdaptiveIntervention::ALL[e].a1 {
                    assert!(f.sandwich[(d, e)].abs() <= 1e-12);
                }
            }
        }
        assert!(f.sandwich.is_symmetric(1e-15));
        assert!(f.sandwich[(0, 1)] > 0.0);
    }

    #[test]
    fn sandwich_is_psd() {
        let rows = rows_for(300, 6);
        for spec in [
            ModelSpec::two_wave(1, WorkingCorrelation::Exchangeable),
            ModelSpec::covariate_adjusted(1),
        ] {
            let f = fit(&rows, &spec).unwrap();
            let mut rng = replicate_rng(99, 0);
            for _ in 0..200 {
                let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let sv = f.sandwich.mul_vec(&v).unwrap();
                let q: f64 = v.iter().zip(&sv).map(|(a, b)| a * b).sum();
                assert!(q >= -1e-10);
            }
        }
    }

    #[test]
    fn sandwich_scales_inversely_with_n() {
        let g = GenParamsTwoWave::default();
        let a = simulate_two_wave(&g, 2000, 7).unwrap();
        let mut rng = replicate_rng(7, 1);
        let b = simulate_two_wave_with(&g, 2000, &mut rng);
        let mut stacked = a.participants.clone();
        stacked.extend(b.participants.iter().map(|p| Participant {
            id: p.id + 2000,
            ..*p
        }));
        let single = fit(&weight_and_replicate(&a).unwrap(), &ModelSpec::one_wave(1)).unwrap();
        let double = fit(
            &weight_and_replicate(&TrialDataset::new(stacked).unwrap()).unwrap(),
            &ModelSpec::one_wave(1),
        )
        .unwrap();
        for d in 0..4 {
            let ratio = double.sandwich[(d, d)] / single.sandwich[(d, d)];
            assert!((ratio - 0.5).abs() < 0.1, "{ratio}");
        }
    }

    #[test]
    fn separation_names_the_cell() {
        let ds = TrialDataset::new(
            (0..40)
                .map(|i| {
                    let a1 = if i % 2 == 0 { Sign::Plus } else { Sign::Minus };
                    let a2 = if i % 4 < 2 { None } else { Some(Sign::Minus) };
                    Participant {
                        id: i,
                        y0: (i % 3 == 0) as u8,
                        a1,
                        responder: a2.is_none(),
                        a2,
                        y1: if a1 == Sign::Plus {
                            1
                        } else {
                            (i % 5 == 0) as u8
                        },
                        y2: None,
                    }
                })
                .collect(),
        )
        .unwrap();
        let rows = weight_and_replicate(&ds).unwrap();
        match fit(&rows, &ModelSpec::one_wave(1)) {
            Err(Error::Separation { cell, mean }) => {
                assert!(cell.contains("(+,"), "{cell}");
                assert_eq!(mean, 1.0);
            }
            other => panic!("expected separation, got {other:?}"),
        }
        let corrected = fit(&rows, &ModelSpec::one_wave(1).with_continuity_correction()).unwrap();
        assert!(corrected.coefficients[0].is_finite());
        assert!(Error::Separation {
            cell: String::new(),
            mean: 1.0
        }
        .is_nonconvergence());
    }

    #[test]
    fn wald_symmetry_and_degenerate_contrast() {
        let rows = rows_for(300, 8);
        let spec = ModelSpec::one_wave(1);
        let f = fit(&rows, &spec).unwrap();
        let c = spec.contrast_vector(ContrastSpec::default_pair());
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let a = wald_test(&f, &c, 0.05).unwrap();
        let b = wald_test(&f, &neg, 0.05).unwrap();
        assert_eq!(a.z.abs(), b.z.abs());
        assert_eq!(a.reject, b.reject);
        assert_eq!(a.reject, a.z.abs() > normal::quantile(0.975));
        assert!(matches!(
            wald_test(&f, &[0.0; 4], 0.05),
            Err(Error::DegenerateContrast(_))
        ));
        assert!(matches!(
            wald_test(&f, &[1.0; 3], 0.05),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn piecewise_requires_three_waves() {
        let rows = rows_for(100, 9);
        assert!(matches!(
            fit(
                &rows,
                &ModelSpec::three_wave(WorkingCorrelation::Independence)
            ),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            fit(&rows, &ModelSpec::one_wave(2)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn duplicated_wave_correlation_is_clamped() {
        let mut ds = simulate_two_wave(&GenParamsTwoWave::default(), 200, 10).unwrap();
        for p in &mut ds.participants {
            p.y1 = p.y0;
        }
        let rows = weight_and_replicate(&ds).unwrap();
        let f = fit(&rows, &ModelSpec::one_wave(1)).unwrap();
        assert_eq!(
            estimate_marginal_correlation(&rows, &f).unwrap(),
            MARGINAL_CORR_MAX
        );
    }

    #[test]
    fn independent_second_wave_gives_near_zero_correlation() {
        let mut ds = simulate_two_wave(&GenParamsTwoWave::default(), 20_000, 11).unwrap();
        let mut rng = replicate_rng(11, 1);
        for p in &mut ds.participants {
            p.y1 = (rng.random::<f64>() < 0.5) as u8;
        }
        let rows = weight_and_replicate(&ds).unwrap();
        let f = fit(&rows, &ModelSpec::one_wave(1)).unwrap();
        // Weighted SE is roughly 1.5/sqrt(n).
        assert!(estimate_marginal_correlation(&rows, &f).unwrap().abs() < 0.035);
    }
}
