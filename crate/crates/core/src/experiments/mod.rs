//! Monte Carlo power estimation and probit-interpolated sample-size search.

mod request;
mod tables;

pub use request::*;
pub use tables::*;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{AdaptiveIntervention, ConditionalScenario, ContrastSpec};
use crate::error::{Error, Result};
use crate::gee::{fit, wald_test, ModelSpec, WaldResult, WorkingCorrelation};
use crate::normal;
use crate::rng::{derive_seed, replicate_rng};
use crate::simulator::{
    simulate_from_cells_with, simulate_three_wave_with, simulate_two_wave_with,
    weight_and_replicate, GenParamsThreeWave, GenParamsTwoWave, TrialDataset,
};

/// Share of failed fits above which a power estimate carries a warning.
pub const FAILURE_WARN_FRACTION: f64 = 0.05;
/// Largest |z| difference tolerated by the three-wave independence identity.
pub const IDENTITY_Z_TOL: f64 = 1e-6;

/// Data-generating model for simulated trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    TwoWave(GenParamsTwoWave),
    ThreeWave(GenParamsThreeWave),
    /// Draws follow-up outcomes directly from cell probabilities.
    Cells(ConditionalScenario),
}

impl Generator {
    pub fn simulate_with(&self, n: usize, rng: &mut ChaCha8Rng) -> TrialDataset {
        match self {
            Generator::TwoWave(g) => simulate_two_wave_with(g, n, rng),
            Generator::ThreeWave(g) => simulate_three_wave_with(g, n, rng),
            Generator::Cells(s) => simulate_from_cells_with(s, n, rng),
        }
    }

    pub fn waves(&self) -> usize {
        match self {
            Generator::TwoWave(_) | Generator::Cells(_) => 2,
            Generator::ThreeWave(_) => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Generator::TwoWave(g) => g.validate(),
            Generator::ThreeWave(g) => g.base.validate(),
            Generator::Cells(s) => s.validate(),
        }
    }
}

/// The contrast used throughout the simulation studies: `(+,-)` versus `(-,-)`.
pub fn default_contrast() -> ContrastSpec {
    ContrastSpec {
        target: AdaptiveIntervention::ALL[1],
        reference: AdaptiveIntervention::ALL[3],
    }
}

/// How replicates whose fit fails enter the power estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Dropped from the denominator.
    #[default]
    Exclude,
    /// Kept in the denominator as non-rejections.
    CountAsNonReject,
}

/// Outcome of one model on one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateOutcome {
    Tested(WaldResult),
    Failed(String),
}

/// Settings shared by every power estimate of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSettings {
    pub alpha: f64,
    pub contrast: ContrastSpec,
    pub policy: FailurePolicy,
    /// Worker threads; `None` uses all cores. Never affects results.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for PowerSettings {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            contrast: default_contrast(),
            policy: FailurePolicy::Exclude,
            threads: None,
        }
    }
}

impl PowerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!(
                "alpha = {} must lie in (0,1)",
                self.alpha
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::domain("threads must be at least 1"));
        }
        self.contrast.validate()
    }
}

/// Monte Carlo estimate of the rejection rate of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub model: ModelSpec,
    pub n: usize,
    pub reps: usize,
    pub rejections: usize,
    pub failures: usize,
    pub power: f64,
    pub mc_se: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl PowerEstimate {
    fn from_outcomes(
        model: ModelSpec,
        n: usize,
        seed: u64,
        policy: FailurePolicy,
        outcomes: &[&ReplicateOutcome],
    ) -> Self {
        let reps = outcomes.len();
        let rejections = outcomes
            .iter()
            .filter(|o| matches!(o, ReplicateOutcome::Tested(w) if w.reject))
            .count();
        let failures = outcomes
            .iter()
            .filter(|o| matches!(o, ReplicateOutcome::Failed(_)))
            .count();
        let denom = match policy {
            FailurePolicy::Exclude => reps - failures,
            FailurePolicy::CountAsNonReject => reps,
        };
        let power = if denom > 0 {
            rejections as f64 / denom as f64
        } else {
            f64::NAN
        };
        let mc_se = if denom > 0 {
            (power * (1.0 - power) / denom as f64).sqrt()
        } else {
            f64::NAN
        };
        let warning = (failures as f64 > FAILURE_WARN_FRACTION * reps as f64).then(|| {
            let msg = format!(
                "{failures} of {reps} fits failed (more than {:.0}%)",
                FAILURE_WARN_FRACTION * 100.0
            );
            log::warn!("{msg}");
            msg
        });
        Self {
            model,
            n,
            reps,
            rejections,
            failures,
            power,
            mc_se,
            seed,
            warning,
        }
    }
}

fn is_configuration_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Unsupported(_) | Error::Shape(_) | Error::Validation(_) | Error::Domain(_)
    )
}

/// Simulates replicate `rep` of a cell and tests every model on that one dataset.
pub fn replicate_outcomes(
    gen: &Generator,
    models: &[ModelSpec],
    n: usize,
    settings: &PowerSettings,
    cell_seed: u64,
    rep: u64,
) -> Result<Vec<ReplicateOutcome>> {
    let mut rng = replicate_rng(cell_seed, rep);
    let data = gen.simulate_with(n, &mut rng);
    let rows = weight_and_replicate(&data)?;
    models
        .iter()
        .map(|m| {
            let c = m.contrast_vector(settings.contrast);
            match fit(&rows, m).and_then(|f| wald_test(&f, &c, settings.alpha)) {
                Ok(w) => Ok(ReplicateOutcome::Tested(w)),
                Err(e) if is_configuration_error(&e) => Err(e),
                Err(e) => Ok(ReplicateOutcome::Failed(e.to_string())),
            }
        })
        .collect()
}

/// Runs `f` inside a pool with the requested number of workers.
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Unsupported(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Power of several models estimated on the same `reps` datasets.
pub fn estimate_power_multi(
    gen: &Generator,
    models: &[ModelSpec],
    n: usize,
    reps: usize,
    cell_seed: u64,
    settings: &PowerSettings,
) -> Result<Vec<PowerEstimate>> {
    let per_rep = run_replicates(gen, models, n, reps, cell_seed, settings)?;
    Ok(summarize(models, n, cell_seed, settings.policy, &per_rep))
}

fn run_replicates(
    gen: &Generator,
    models: &[ModelSpec],
    n: usize,
    reps: usize,
    cell_seed: u64,
    settings: &PowerSettings,
) -> Result<Vec<Vec<ReplicateOutcome>>> {
    settings.validate()?;
    gen.validate()?;
    if reps == 0 {
        return Err(Error::domain("reps must be at least 1"));
    }
    if n < 2 {
        return Err(Error::domain("n must be at least 2"));
    }
    for m in models {
        m.validate(gen.waves())?;
    }
    // Parallel map then ordered collect: the reduction order is the replicate order.
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| replicate_outcomes(gen, models, n, settings, cell_seed, rep))
        .collect()
}

fn summarize(
    models: &[ModelSpec],
    n: usize,
    cell_seed: u64,
    policy: FailurePolicy,
    per_rep: &[Vec<ReplicateOutcome>],
) -> Vec<PowerEstimate> {
    models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let column: Vec<&ReplicateOutcome> = per_rep.iter().map(|r| &r[k]).collect();
            PowerEstimate::from_outcomes(*m, n, cell_seed, policy, &column)
        })
        .collect()
}

/// Power of one model.
pub fn estimate_power(
    gen: &Generator,
    model: ModelSpec,
    n: usize,
    reps: usize,
    seed: u64,
    settings: &PowerSettings,
) -> Result<PowerEstimate> {
    let run = || estimate_power_multi(gen, &[model], n, reps, seed, settings);
    Ok(in_pool(settings.threads, run)??.remove(0))
}

/// Comparison of the three-wave independence fit with the final-wave-only fit on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub z_final_only: f64,
    pub z_three_wave: f64,
    pub same_decision: bool,
}

impl IdentityCheck {
    pub fn holds(&self) -> bool {
        self.same_decision && (self.z_final_only - self.z_three_wave).abs() < IDENTITY_Z_TOL
    }
}

/// Fits both models to replicate `rep` and compares their Wald statistics.
pub fn three_wave_identity(
    gen: &GenParamsThreeWave,
    n: usize,
    settings: &PowerSettings,
    cell_seed: u64,
    rep: u64,
) -> Result<IdentityCheck> {
    let models = [
        ModelSpec::one_wave(2),
        ModelSpec::three_wave(WorkingCorrelation::Independence),
    ];
    let out = replicate_outcomes(
        &Generator::ThreeWave(*gen),
        &models,
        n,
        settings,
        cell_seed,
        rep,
    )?;
    match (&out[0], &out[1]) {
        (ReplicateOutcome::Tested(a), ReplicateOutcome::Tested(b)) => Ok(IdentityCheck {
            z_final_only: a.z,
            z_three_wave: b.z,
            same_decision: a.reject == b.reject,
        }),
        (a, b) => Err(Error::NonConvergence(format!(
            "identity check fits failed: {a:?} / {b:?}"
        ))),
    }
}

/// One grid point of a sample-size search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub estimate: PowerEstimate,
    /// True when the estimate was pulled inside `[1/(m+2), 1-1/(m+2)]`.
    pub clamped: bool,
    pub probit: f64,
    pub weight: f64,
}

/// Probit line `Phi^-1(power) = intercept + slope * N` fitted to simulated power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeSearch {
    pub target: f64,
    pub grid: Vec<GridPoint>,
    pub intercept: f64,
    pub slope: f64,
    /// Solved size before rounding up.
    pub n_exact: f64,
    pub n: u64,
    /// Delta-method standard error of `n_exact`.
    pub n_se: f64,
    /// Binomial deviance of the fitted line.
    pub deviance: f64,
}

/// `count` equally spaced sizes over `[lo, hi]`, rounded and deduplicated.
pub fn linear_grid(lo: f64, hi: f64, count: usize) -> Vec<usize> {
    let mut g: Vec<usize> = (0..count)
        .map(|i| {
            let t = if count > 1 {
                i as f64 / (count - 1) as f64
            } else {
                0.0
            };
            (lo + t * (hi - lo)).round().max(2.0) as usize
        })
        .collect();
    g.dedup();
    g
}

/// Estimates power over `grid` and interpolates the size reaching `target`.
pub fn find_sample_size(
    gen: &Generator,
    model: ModelSpec,
    target: f64,
    grid: &[usize],
    reps: usize,
    seed: u64,
    settings: &PowerSettings,
) -> Result<SampleSizeSearch> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::domain(format!(
            "target power {target} must lie in (0,1)"
        )));
    }
    if grid.len() < 3 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain(
            "grid needs at least three strictly increasing sizes",
        ));
    }
    let estimates = in_pool(settings.threads, || {
        grid.iter()
            .map(|&n| {
                let cell = derive_seed(seed, n as u64);
                estimate_power_multi(gen, &[model], n, reps, cell, settings)
                    .map(|mut v| v.remove(0))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    fit_probit_line(estimates, target)
}

/// Weighted least-squares probit line through power estimates.
pub fn fit_probit_line(estimates: Vec<PowerEstimate>, target: f64) -> Result<SampleSizeSearch> {
    let mut grid = Vec::with_capacity(estimates.len());
    for est in estimates {
        let m = (est.reps - est.failures) as f64;
        if m <= 0.0 || !est.power.is_finite() {
            return Err(Error::SearchFailure(format!(
                "no usable replicates at n = {}",
                est.n
            )));
        }
        let lo = 1.0 / (m + 2.0);
        let p = est.power.clamp(lo, 1.0 - lo);
        let clamped = p != est.power;
        let z = normal::quantile(p);
        let dens = normal::pdf(z);
        let weight = m * dens * dens / (p * (1.0 - p));
        grid.push(GridPoint {
            estimate: est,
            clamped,
            probit: z,
            weight,
        });
    }
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for g in &grid {
        let x = g.estimate.n as f64;
        sw += g.weight;
        sx += g.weight * x;
        sy += g.weight * g.probit;
        sxx += g.weight * x * x;
        sxy += g.weight * x * g.probit;
    }
    let det = sw * sxx - sx * sx;
    let diagnostics = || {
        grid.iter()
            .map(|g| format!("n={} power={:.4}", g.estimate.n, g.estimate.power))
            .collect::<Vec<_>>()
            .join(", ")
    };
    if !(det > 0.0) {
        return Err(Error::SearchFailure(format!(
            "degenerate grid: {}",
            diagnostics()
        )));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    if !(slope > 0.0) {
        return Err(Error::SearchFailure(format!(
            "fitted probit slope {slope:e} is not positive: {}",
            diagnostics()
        )));
    }
    let zt = normal::quantile(target);
    let n_exact = (zt - intercept) / slope;
    if !(n_exact.is_finite() && n_exact > 0.0) {
        return Err(Error::SearchFailure(format!(
            "solved size {n_exact} is not positive: {}",
            diagnostics()
        )));
    }
    // Cov(a, b) = (X^T W X)^-1.
    let (var_a, var_b, cov_ab) = (sxx / det, sw / det, -sx / det);
    let ga = -1.0 / slope;
    let gb = -(zt - intercept) / (slope * slope);
    let n_se = (ga * ga * var_a + gb * gb * var_b + 2.0 * ga * gb * cov_ab)
        .max(0.0)
        .sqrt();
    let mut deviance = 0.0;
    for g in &grid {
        let m = (g.estimate.reps - g.estimate.failures) as f64;
        let k = g.estimate.power * m;
        let p = normal::cdf(intercept + slope * g.estimate.n as f64).clamp(1e-300, 1.0 - 1e-16);
        let term = |obs: f64, exp: f64| {
            if obs > 0.0 {
                obs * (obs / exp).ln()
            } else {
                0.0
            }
        };
        deviance += 2.0 * (term(k, m * p) + term(m - k, m * (1.0 - p)));
    }
    Ok(SampleSizeSearch {
        target,
        grid,
        intercept,
        slope,
        n_exact,
        n: n_exact.ceil() as u64,
        n_se,
        deviance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn estimate(n: usize, power: f64, reps: usize) -> PowerEstimate {
        PowerEstimate {
            model: ModelSpec::one_wave(1),
            n,
            reps,
            rejections: (power * reps as f64).round() as usize,
            failures: 0,
            power,
            mc_se: 0.0,
            seed: 0,
            warning: None,
        }
    }

    #[test]
    fn probit_line_recovers_exact_line() {
        let (a, b) = (-1.2, 0.008);
        let est: Vec<_> = [100, 200, 300, 400, 500]
            .iter()
            .map(|&n| estimate(n, normal::cdf(a + b * n as f64), 1_000_000))
            .collect();
        let s = fit_probit_line(est, 0.8).unwrap();
        assert!((s.intercept - a).abs() < 1e-9);
        assert!((s.slope - b).abs() < 1e-12);
        let expected = (normal::quantile(0.8) - a) / b;
        assert!((s.n_exact - expected).abs() < 1e-6);
        assert_eq!(s.n, expected.ceil() as u64);
    }

    #[test]
    fn probit_line_rejects_flat_power() {
        let est: Vec<_> = [100, 200, 300]
            .iter()
            .map(|&n| estimate(n, 0.5, 500))
            .collect();
        assert!(matches!(
            fit_probit_line(est, 0.8),
            Err(Error::SearchFailure(_))
        ));
        let est: Vec<_> = [100, 200, 300]
            .iter()
            .zip([0.7, 0.5, 0.3])
            .map(|(&n, p)| estimate(n, p, 500))
            .collect();
        assert!(matches!(
            fit_probit_line(est, 0.8),
            Err(Error::SearchFailure(_))
        ));
    }

    #[test]
    fn clamped_points_are_flagged() {
        let est = vec![
            estimate(100, 0.6, 100),
            estimate(200, 0.9, 100),
            estimate(300, 1.0, 100),
        ];
        let s = fit_probit_line(est, 0.8).unwrap();
        assert!(!s.grid[0].clamped && s.grid[2].clamped);
        assert!((normal::cdf(s.grid[2].probit) - (1.0 - 1.0 / 102.0)).abs() < 1e-12);
    }

    #[test]
    fn grid_spacing() {
        assert_eq!(linear_grid(100.0, 300.0, 5), vec![100, 150, 200, 250, 300]);
        assert_eq!(linear_grid(1.0, 2.0, 3), vec![2]);
    }

    #[test]
    fn power_summary_policies() {
        let tested = |reject| {
            ReplicateOutcome::Tested(WaldResult {
                estimate: 0.0,
                std_error: 1.0,
                z: 0.0,
                reject,
            })
        };
        let outs = [
            tested(true),
            tested(false),
            ReplicateOutcome::Failed("x".into()),
            tested(true),
        ];
        let refs: Vec<&ReplicateOutcome> = outs.iter().collect();
        let ex = PowerEstimate::from_outcomes(
            ModelSpec::one_wave(1),
            10,
            0,
            FailurePolicy::Exclude,
            &refs,
        );
        assert_eq!((ex.rejections, ex.failures), (2, 1));
        assert!((ex.power - 2.0 / 3.0).abs() < 1e-15);
        assert!((ex.mc_se - (2.0 / 9.0 / 3.0f64).sqrt()).abs() < 1e-15);
        assert!(ex.warning.is_some());
        let cnt = PowerEstimate::from_outcomes(
            ModelSpec::one_wave(1),
            10,
            0,
            FailurePolicy::CountAsNonReject,
            &refs,
        );
        assert_eq!(cnt.power, 0.5);
    }

    #[test]
    fn power_is_deterministic_across_thread_counts() {
        let gen = Generator::TwoWave(GenParamsTwoWave::default());
        let run = |threads| {
            let settings = PowerSettings {
                threads: Some(threads),
                ..PowerSettings::default()
            };
            estimate_power(
                &gen,
                ModelSpec::covariate_adjusted(1),
                150,
                64,
                9,
                &settings,
            )
            .unwrap()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn zero_reps_rejected() {
        let gen = Generator::TwoWave(GenParamsTwoWave::default());
        assert!(estimate_power(
            &gen,
            ModelSpec::one_wave(1),
            100,
            0,
            1,
            &PowerSettings::default()
        )
        .is_err());
        assert!(matches!(
            estimate_power(
                &gen,
                ModelSpec::one_wave(2),
                100,
                5,
                1,
                &PowerSettings::default()
            ),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn three_wave_identity_holds_on_single_datasets() {
        let g = GenParamsThreeWave::new(crate::simulator::Y2Model::NoDelay);
        for rep in 0..20 {
            let c = three_wave_identity(&g, 300, &PowerSettings::default(), 5, rep).unwrap();
            assert!(c.holds(), "{c:?}");
        }
    }
}
