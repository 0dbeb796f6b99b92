//! Trial simulator for the two-stage design, its exact (enumerated) cell
//! probabilities, and the weighting-and-replication step.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{expit, AdaptiveIntervention, ConditionalScenario, Pretest, Sign};
use crate::error::{Error, Result};
use crate::rng::replicate_rng;

/// Weight of a responder row (each responder appears twice).
pub const RESPONDER_WEIGHT: f64 = 2.0;
/// Weight of a non-responder row.
pub const NONRESPONDER_WEIGHT: f64 = 4.0;

/// Generating model for pretest, response and end-of-study outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParamsTwoWave {
    /// `P(Y0 = 1)`.
    pub p_y0: f64,
    pub resp_intercept: f64,
    pub resp_coef_y0: f64,
    pub resp_coef_a1: f64,
    pub beta0: f64,
    pub beta_y0: f64,
    pub beta_a1: f64,
    pub beta_r: f64,
    pub beta_a2: f64,
    pub beta_a1a2: f64,
}

impl Default for GenParamsTwoWave {
    /// High-correlation, odds-ratio-3 setting.
    fn default() -> Self {
        TABLE2[8].params()
    }
}

impl GenParamsTwoWave {
    /// Standard response model with the given outcome-model coefficients.
    pub fn with_outcome(beta0: f64, beta_y0: f64, beta_a1: f64) -> Self {
        Self {
            p_y0: 0.4,
            resp_intercept: -0.62,
            resp_coef_y0: 1.0,
            resp_coef_a1: 0.5,
            beta0,
            beta_y0,
            beta_a1,
            beta_r: 1.0,
            beta_a2: 0.0,
            beta_a1a2: 0.0,
        }
    }

    /// Removes every path from treatment to outcome, including the one
    /// through response status, so all four interventions share one mean.
    pub fn null(mut self) -> Self {
        self.beta_a1 = 0.0;
        self.beta_a2 = 0.0;
        self.beta_a1a2 = 0.0;
        self.resp_coef_a1 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.p_y0,
            self.resp_intercept,
            self.resp_coef_y0,
            self.resp_coef_a1,
            self.beta0,
            self.beta_y0,
            self.beta_a1,
            self.beta_r,
            self.beta_a2,
            self.beta_a1a2,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("generating parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.p_y0) {
            return Err(Error::domain(format!(
                "p_y0 = {} must lie in [0,1]",
                self.p_y0
            )));
        }
        Ok(())
    }

    /// `P(R = 1 | y0, a1)`.
    pub fn response_prob(&self, y0: u8, a1: Sign) -> f64 {
        expit(self.resp_intercept + self.resp_coef_y0 * y0 as f64 + self.resp_coef_a1 * a1.value())
    }

    /// `P(Y1 = 1 | y0, a1, r, a2)`; `a2` is ignored for responders.
    pub fn outcome_prob(&self, y0: u8, a1: Sign, responder: bool, a2: Option<Sign>) -> f64 {
        let a1v = a1.value();
        let a2v = if responder {
            0.0
        } else {
            a2.map_or(0.0, Sign::value)
        };
        expit(
            self.beta0
                + self.beta_y0 * y0 as f64
                + self.beta_a1 * a1v
                + self.beta_r * responder as u8 as f64
                + self.beta_a2 * a2v
                + self.beta_a1a2 * a1v * a2v,
        )
    }
}

/// One row of the published generating-parameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    /// Nominal pretest-posttest correlation label.
    pub rho: f64,
    /// Nominal odds ratio label.
    pub odds_ratio: f64,
    pub beta0: f64,
    pub beta_y0: f64,
    pub beta_a1: f64,
    /// Printed (two-decimal) marginal means in canonical intervention order.
    pub marginals: [f64; 4],
}

impl Table2Row {
    pub fn params(&self) -> GenParamsTwoWave {
        GenParamsTwoWave::with_outcome(self.beta0, self.beta_y0, self.beta_a1)
    }
}

const fn row(
    rho: f64,
    odds_ratio: f64,
    beta0: f64,
    beta_y0: f64,
    beta_a1: f64,
    m: [f64; 4],
) -> Table2Row {
    // Printed order is (-,-), (-,+), (+,-), (+,+); stored canonically.
    Table2Row {
        rho,
        odds_ratio,
        beta0,
        beta_y0,
        beta_a1,
        marginals: [m[3], m[2], m[1], m[0]],
    }
}

/// The nine published scenarios.
pub const TABLE2: [Table2Row; 9] = [
    row(0.06, 1.5, -0.44, 0.0, 0.100, [0.45, 0.45, 0.55, 0.55]),
    row(0.06, 2.0, -0.44, 0.0, 0.250, [0.42, 0.42, 0.59, 0.59]),
    row(0.06, 3.0, -0.44, 0.0, 0.460, [0.37, 0.37, 0.63, 0.64]),
    row(0.3, 1.5, -0.90, 1.2, 0.115, [0.45, 0.45, 0.55, 0.55]),
    row(0.3, 2.0, -0.90, 1.2, 0.290, [0.42, 0.42, 0.59, 0.59]),
    row(0.3, 3.0, -0.90, 1.2, 0.520, [0.37, 0.37, 0.64, 0.64]),
    row(0.6, 1.5, -1.55, 3.0, 0.220, [0.45, 0.45, 0.55, 0.55]),
    row(0.6, 2.0, -1.55, 3.0, 0.450, [0.41, 0.41, 0.58, 0.58]),
    row(0.6, 3.0, -1.55, 3.0, 0.780, [0.37, 0.37, 0.64, 0.64]),
];

/// Looks up a scenario by its correlation and odds-ratio labels.
pub fn table2_row(rho: f64, odds_ratio: f64) -> Option<Table2Row> {
    TABLE2
        .iter()
        .copied()
        .find(|r| (r.rho - rho).abs() < 1e-9 && (r.odds_ratio - odds_ratio).abs() < 1e-9)
}

/// Second follow-up model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Y2Model {
    /// Depends on the past only through `Y1`: logit = -1.4 + 3 Y1.
    NoDelay,
    /// Partly direct effect of stage 1: logit = -1.4 + 0.275 A1 + 0.5 Y1.
    Delayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParamsThreeWave {
    pub base: GenParamsTwoWave,
    pub y2_model: Y2Model,
}

impl GenParamsThreeWave {
    pub fn new(y2_model: Y2Model) -> Self {
        Self {
            base: GenParamsTwoWave::default(),
            y2_model,
        }
    }

    /// `(intercept, A1 coefficient, Y1 coefficient)` of the active model.
    pub fn y2_coefficients(&self) -> (f64, f64, f64) {
        match self.y2_model {
            Y2Model::NoDelay => (-1.4, 0.0, 3.0),
            Y2Model::Delayed => (-1.4, 0.275, 0.5),
        }
    }

    /// `P(Y2 = 1 | a1, y1)`.
    pub fn y2_prob(&self, a1: Sign, y1: u8) -> f64 {
        let (c, ca1, cy1) = self.y2_coefficients();
        expit(c + ca1 * a1.value() + cy1 * y1 as f64)
    }
}

/// A simulated participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: u32,
    pub y0: u8,
    pub a1: Sign,
    pub responder: bool,
    /// Present exactly for non-responders.
    pub a2: Option<Sign>,
    pub y1: u8,
    pub y2: Option<u8>,
}

impl Participant {
    pub fn validate(&self) -> Result<()> {
        if self.responder == self.a2.is_some() {
            return Err(Error::Dataset(format!(
                "participant {}: a2 must be present exactly for non-responders",
                self.id
            )));
        }
        if self.y0 > 1 || self.y1 > 1 || self.y2.is_some_and(|y| y > 1) {
            return Err(Error::Dataset(format!(
                "participant {}: outcomes must be 0 or 1",
                self.id
            )));
        }
        Ok(())
    }

    /// Outcomes by wave; absent second follow-up reads as 0.
    pub fn outcomes(&self) -> [u8; 3] {
        [self.y0, self.y1, self.y2.unwrap_or(0)]
    }
}

/// Participant records from one simulated (or imported) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub participants: Vec<Participant>,
    /// Number of measurement occasions (2 or 3).
    pub waves: usize,
}

impl TrialDataset {
    pub fn new(participants: Vec<Participant>) -> Result<Self> {
        let waves = if participants.first().is_some_and(|p| p.y2.is_some()) {
            3
        } else {
            2
        };
        let ds = Self {
            participants,
            waves,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.participants {
            p.validate()?;
            if p.y2.is_some() != (self.waves == 3) {
                return Err(Error::Dataset(format!(
                    "participant {}: second follow-up presence disagrees with {} waves",
                    p.id, self.waves
                )));
            }
        }
        Ok(())
    }

    /// Delimited export with header `id,y0,a1,r,a2,y1[,y2]`; `a2` empty for responders.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let three = self.waves == 3;
        writeln!(out, "id,y0,a1,r,a2,y1{}", if three { ",y2" } else { "" })?;
        let mut line = String::new();
        for p in &self.participants {
            line.clear();
            let a2 =
                p.a2.map_or(String::new(), |s| format!("{}", s.value() as i8));
            let _ = write!(
                line,
                "{},{},{},{},{},{}",
                p.id,
                p.y0,
                p.a1.value() as i8,
                p.responder as u8,
                a2,
                p.y1
            );
            if three {
                let _ = write!(line, ",{}", p.y2.unwrap_or(0));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn sign<R: Rng>(rng: &mut R) -> Sign {
    if rng.random::<f64>() < 0.5 {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

fn draw_participant<R: Rng>(rng: &mut R, id: u32, g: &GenParamsTwoWave) -> Participant {
    // Five uniforms per participant in a fixed order, whether or not each is used.
    let y0 = bernoulli(rng, g.p_y0) as u8;
    let a1 = sign(rng);
    let responder = bernoulli(rng, g.response_prob(y0, a1));
    let a2_draw = sign(rng);
    let a2 = (!responder).then_some(a2_draw);
    let y1 = bernoulli(rng, g.outcome_prob(y0, a1, responder, a2)) as u8;
    Participant {
        id,
        y0,
        a1,
        responder,
        a2,
        y1,
        y2: None,
    }
}

/// Simulates `n` participants from an explicit generator.
pub fn simulate_two_wave_with<R: Rng>(
    params: &GenParamsTwoWave,
    n: usize,
    rng: &mut R,
) -> TrialDataset {
    let participants = (0..n)
        .map(|i| draw_participant(rng, i as u32, params))
        .collect();
    TrialDataset {
        participants,
        waves: 2,
    }
}

/// Simulates `n` participants with a second follow-up from an explicit generator.
pub fn simulate_three_wave_with<R: Rng>(
    params: &GenParamsThreeWave,
    n: usize,
    rng: &mut R,
) -> TrialDataset {
    let participants = (0..n)
        .map(|i| {
            let mut p = draw_participant(rng, i as u32, &params.base);
            p.y2 = Some(bernoulli(rng, params.y2_prob(p.a1, p.y1)) as u8);
            p
        })
        .collect();
    TrialDataset {
        participants,
        waves: 3,
    }
}

/// Simulates a two-wave trial straight from cell probabilities.
///
/// The pretest is drawn from its mean given stage-1 arm and response status
/// (0.5 when the scenario has no pretest), independently of the follow-up
/// given those, so within-cell pretest-posttest correlation is zero.
pub fn simulate_from_cells_with<R: Rng>(
    s: &ConditionalScenario,
    n: usize,
    rng: &mut R,
) -> TrialDataset {
    let participants = (0..n)
        .map(|i| {
            let a1 = sign(rng);
            let responder = bernoulli(rng, s.response_rate[a1.index()]);
            let a2_draw = sign(rng);
            let p0 = s.pretest.map_or(0.5, |p| p.given_response(a1, responder));
            let y0 = bernoulli(rng, p0) as u8;
            let ai = AdaptiveIntervention::new(a1, a2_draw).index();
            let p1 = if responder {
                s.psi_responder[ai]
            } else {
                s.psi_nonresponder[ai]
            };
            let y1 = bernoulli(rng, p1) as u8;
            Participant {
                id: i as u32,
                y0,
                a1,
                responder,
                a2: (!responder).then_some(a2_draw),
                y1,
                y2: None,
            }
        })
        .collect();
    TrialDataset {
        participants,
        waves: 2,
    }
}

/// Simulates a two-wave trial; stream 0 of `seed`.
pub fn simulate_two_wave(params: &GenParamsTwoWave, n: usize, seed: u64) -> Result<TrialDataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    Ok(simulate_two_wave_with(
        params,
        n,
        &mut replicate_rng(seed, 0),
    ))
}

/// Simulates a three-wave trial; stream 0 of `seed`.
pub fn simulate_three_wave(
    params: &GenParamsThreeWave,
    n: usize,
    seed: u64,
) -> Result<TrialDataset> {
    params.base.validate()?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    Ok(simulate_three_wave_with(
        params,
        n,
        &mut replicate_rng(seed, 0),
    ))
}

/// A weighted analysis row: one participant's outcomes attributed to one intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub participant: u32,
    /// Zero-based canonical intervention index.
    pub ai: u8,
    pub weight: f64,
    pub outcomes: [u8; 3],
}

/// Weighted-and-replicated rows; rows of one participant are contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRows {
    pub rows: Vec<AnalysisRow>,
    pub waves: usize,
    pub participants: usize,
}

impl AnalysisRows {
    pub fn total_weight(&self) -> f64 {
        self.rows.iter().map(|r| r.weight).sum()
    }
}

/// Responders contribute a weight-2 row to both interventions sharing their
/// stage-1 option; non-responders one weight-4 row to the intervention they followed.
pub fn weight_and_replicate(data: &TrialDataset) -> Result<AnalysisRows> {
    data.validate()?;
    let mut rows = Vec::with_capacity(data.len() * 2);
    for p in &data.participants {
        let outcomes = p.outcomes();
        match p.a2 {
            None => {
                for a2 in [Sign::Plus, Sign::Minus] {
                    rows.push(AnalysisRow {
                        participant: p.id,
                        ai: AdaptiveIntervention::new(p.a1, a2).index() as u8,
                        weight: RESPONDER_WEIGHT,
                        outcomes,
                    });
                }
            }
            Some(a2) => rows.push(AnalysisRow {
                participant: p.id,
                ai: AdaptiveIntervention::new(p.a1, a2).index() as u8,
                weight: NONRESPONDER_WEIGHT,
                outcomes,
            }),
        }
    }
    Ok(AnalysisRows {
        rows,
        waves: data.waves,
        participants: data.len(),
    })
}

/// Weighted descriptive summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSummary {
    pub n: usize,
    pub pretest_mean: f64,
    /// Weighted mean of each follow-up wave per intervention; `None` for an empty cell.
    pub ai_means: Vec<[Option<f64>; 4]>,
    /// Response proportion per stage-1 arm `[plus, minus]`.
    pub response_rate: [Option<f64>; 2],
    /// Weighted correlation of pretest and first follow-up residuals, each
    /// centered at its intervention-specific weighted mean.
    pub pretest_posttest_corr: Option<f64>,
    /// Unweighted participant-level correlation of pretest and response status.
    pub pretest_response_corr: Option<f64>,
}

pub fn empirical_marginals(data: &TrialDataset) -> Result<EmpiricalSummary> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let rows = weight_and_replicate(data)?;
    let follow_ups = data.waves - 1;
    let mut sum_w = [0.0; 4];
    let mut sum_wy = vec![[0.0; 4]; data.waves];
    for r in &rows.rows {
        let d = r.ai as usize;
        sum_w[d] += r.weight;
        for (t, s) in sum_wy.iter_mut().enumerate() {
            s[d] += r.weight * r.outcomes[t] as f64;
        }
    }
    let mean = |t: usize, d: usize| (sum_w[d] > 0.0).then(|| sum_wy[t][d] / sum_w[d]);
    let ai_means = (1..=follow_ups)
        .map(|t| [0, 1, 2, 3].map(|d| mean(t, d)))
        .collect();

    let (mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0);
    for r in &rows.rows {
        let d = r.ai as usize;
        let (Some(m0), Some(m1)) = (mean(0, d), mean(1, d)) else {
            continue;
        };
        let e0 = r.outcomes[0] as f64 - m0;
        let e1 = r.outcomes[1] as f64 - m1;
        s00 += r.weight * e0 * e0;
        s11 += r.weight * e1 * e1;
        s01 += r.weight * e0 * e1;
    }
    let pretest_posttest_corr = (s00 > 0.0 && s11 > 0.0).then(|| s01 / (s00 * s11).sqrt());

    let n = data.len() as f64;
    let mut arm_n = [0.0; 2];
    let mut arm_r = [0.0; 2];
    let (mut sy, mut sr, mut syr) = (0.0, 0.0, 0.0);
    for p in &data.participants {
        let i = p.a1.index();
        arm_n[i] += 1.0;
        arm_r[i] += p.responder as u8 as f64;
        sy += p.y0 as f64;
        sr += p.responder as u8 as f64;
        syr += (p.y0 as f64) * (p.responder as u8 as f64);
    }
    let response_rate = [0, 1].map(|i| (arm_n[i] > 0.0).then(|| arm_r[i] / arm_n[i]));
    let (my, mr) = (sy / n, sr / n);
    let cov = syr / n - my * mr;
    let var = my * (1.0 - my) * mr * (1.0 - mr);
    let pretest_response_corr = (var > 0.0).then(|| cov / var.sqrt());

    Ok(EmpiricalSummary {
        n: data.len(),
        pretest_mean: my,
        ai_means,
        response_rate,
        pretest_posttest_corr,
        pretest_response_corr,
    })
}

/// Exact population quantities implied by a generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactTwoWave {
    /// Cell-level scenario (pretest conditional means pooled over arms).
    pub scenario: ConditionalScenario,
    /// Marginal mean of the first follow-up per intervention.
    pub marginal_means: [f64; 4],
    /// `Corr(Y0, Y1)` under each intervention.
    pub pretest_posttest_corr: [f64; 4],
    /// `Corr(Y0, R)` over the whole trial.
    pub pretest_response_corr: f64,
    /// Per-arm `[E(Y0 | R=0), E(Y0 | R=1)]`.
    pub pretest_by_arm: [[f64; 2]; 2],
}

/// Enumerates `(Y0, R)` to obtain cell probabilities and correlations without simulation.
pub fn exact_two_wave(g: &GenParamsTwoWave) -> Result<ExactTwoWave> {
    g.validate()?;
    let py = [1.0 - g.p_y0, g.p_y0];
    let mut rate = [0.0; 2];
    let mut psi_nr = [0.0; 4];
    let mut psi_r = [0.0; 4];
    let mut corr = [0.0; 4];
    let mut pre_by_arm = [[0.0; 2]; 2];
    let mut joint_y0_r = [[0.0; 2]; 2];
    for ai in AdaptiveIntervention::ALL {
        let a1 = ai.a1;
        let d = ai.index();
        // joint[y0][r] = P(Y0 = y0, R = r | a1)
        let mut joint = [[0.0; 2]; 2];
        for y0 in 0..2u8 {
            let pr = g.response_prob(y0, a1);
            joint[y0 as usize] = [py[y0 as usize] * (1.0 - pr), py[y0 as usize] * pr];
        }
        let r = joint[0][1] + joint[1][1];
        let mut e_y1 = [0.0; 2];
        let mut e_y0y1 = 0.0;
        for resp in [false, true] {
            let ri = resp as usize;
            let mass = joint[0][ri] + joint[1][ri];
            let a2 = (!resp).then_some(ai.a2);
            for y0 in 0..2u8 {
                let p = joint[y0 as usize][ri] * g.outcome_prob(y0, a1, resp, a2);
                e_y1[ri] += p;
                if y0 == 1 {
                    e_y0y1 += p;
                }
            }
            if mass > 0.0 {
                e_y1[ri] /= mass;
                pre_by_arm[a1.index()][ri] = joint[1][ri] / mass;
            }
        }
        rate[a1.index()] = r;
        psi_nr[d] = e_y1[0];
        psi_r[d] = e_y1[1];
        let mu = (1.0 - r) * e_y1[0] + r * e_y1[1];
        let denom = (g.p_y0 * (1.0 - g.p_y0) * mu * (1.0 - mu)).sqrt();
        corr[d] = if denom > 0.0 {
            (e_y0y1 - g.p_y0 * mu) / denom
        } else {
            0.0
        };
        if ai.a2 == Sign::Plus {
            for y0 in 0..2 {
                for ri in 0..2 {
                    joint_y0_r[y0][ri] += 0.5 * joint[y0][ri];
                }
            }
        }
    }
    let r_bar = 0.5 * (rate[0] + rate[1]);
    let pooled = |ri: usize| {
        let mass = joint_y0_r[0][ri] + joint_y0_r[1][ri];
        if mass > 0.0 {
            joint_y0_r[1][ri] / mass
        } else {
            g.p_y0
        }
    };
    let mut scenario = ConditionalScenario {
        psi_nonresponder: psi_nr,
        psi_responder: psi_r,
        response_rate: rate,
        pretest: None,
        rho: None,
        rho_conditional: None,
    };
    if g.p_y0 > 0.0 && g.p_y0 < 1.0 {
        scenario.pretest = Some(Pretest {
            mean: g.p_y0,
            given_nonresponder: Some(pooled(0)),
            given_responder: Some(pooled(1)),
            by_arm: None,
        });
    }
    let e_y0r = joint_y0_r[1][1];
    let den = (g.p_y0 * (1.0 - g.p_y0) * r_bar * (1.0 - r_bar)).sqrt();
    let pretest_response_corr = if den > 0.0 {
        (e_y0r - g.p_y0 * r_bar) / den
    } else {
        0.0
    };
    let marginal_means = [0, 1, 2, 3].map(|d| {
        let r = rate[AdaptiveIntervention::ALL[d].a1.index()];
        (1.0 - r) * psi_nr[d] + r * psi_r[d]
    });
    Ok(ExactTwoWave {
        scenario,
        marginal_means,
        pretest_posttest_corr: corr,
        pretest_response_corr,
        pretest_by_arm: pre_by_arm,
    })
}

/// Exact marginal mean of the second follow-up per intervention.
pub fn exact_second_followup_means(g: &GenParamsThreeWave) -> Result<[f64; 4]> {
    let exact = exact_two_wave(&g.base)?;
    Ok([0, 1, 2, 3].map(|d| {
        let a1 = AdaptiveIntervention::ALL[d].a1;
        let m1 = exact.marginal_means[d];
        (1.0 - m1) * g.y2_prob(a1, 0) + m1 * g.y2_prob(a1, 1)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::log_odds_ratio;

    fn participant(id: u32, y0: u8, a1: Sign, a2: Option<Sign>, y1: u8) -> Participant {
        Participant {
            id,
            y0,
            a1,
            responder: a2.is_none(),
            a2,
            y1,
            y2: None,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let g = GenParamsTwoWave::default();
        let a = simulate_two_wave(&g, 500, 42).unwrap();
        let b = simulate_two_wave(&g, 500, 42).unwrap();
        let c = simulate_two_wave(&g, 500, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_pretest() {
        let mut g = GenParamsTwoWave::default();
        g.p_y0 = 0.0;
        let ds = simulate_two_wave(&g, 2000, 1).unwrap();
        assert!(ds.participants.iter().all(|p| p.y0 == 0));
        assert!((g.response_prob(0, Sign::Plus) - expit(-0.12)).abs() < 1e-15);
        assert!((g.response_prob(0, Sign::Minus) - expit(-1.12)).abs() < 1e-15);
    }

    #[test]
    fn a2_present_only_for_nonresponders() {
        let ds = simulate_two_wave(&GenParamsTwoWave::default(), 1000, 3).unwrap();
        assert!(ds
            .participants
            .iter()
            .all(|p| p.responder != p.a2.is_some()));
        let bad = participant(0, 0, Sign::Plus, None, 1);
        let bad = Participant {
            a2: Some(Sign::Plus),
            ..bad
        };
        assert!(TrialDataset::new(vec![bad]).is_err());
    }

    #[test]
    fn replication_counts_and_weights() {
        let responders: Vec<_> = (0..100)
            .map(|i| participant(i, 0, Sign::Plus, None, 1))
            .collect();
        let rows = weight_and_replicate(&TrialDataset::new(responders).unwrap()).unwrap();
        assert_eq!(rows.rows.len(), 200);
        assert!(rows.rows.iter().all(|r| r.weight == 2.0));
        assert_eq!(rows.total_weight(), 400.0);

        let nonresponders: Vec<_> = (0..100)
            .map(|i| participant(i, 0, Sign::Minus, Some(Sign::Plus), 0))
            .collect();
        let rows = weight_and_replicate(&TrialDataset::new(nonresponders).unwrap()).unwrap();
        assert_eq!(rows.rows.len(), 100);
        assert!(rows.rows.iter().all(|r| r.weight == 4.0));
        assert_eq!(rows.total_weight(), 400.0);
    }

    #[test]
    fn replication_matches_hand_enumeration() {
        let ds = TrialDataset::new(vec![
            participant(0, 1, Sign::Plus, None, 1),
            participant(1, 0, Sign::Plus, Some(Sign::Minus), 0),
            participant(2, 0, Sign::Minus, None, 0),
            participant(3, 1, Sign::Minus, Some(Sign::Plus), 1),
        ])
        .unwrap();
        let got: Vec<(u32, u8, f64, u8, u8)> = weight_and_replicate(&ds)
            .unwrap()
            .rows
            .iter()
            .map(|r| (r.participant, r.ai, r.weight, r.outcomes[0], r.outcomes[1]))
            .collect();
        let expected = vec![
            (0, 0, 2.0, 1, 1),
            (0, 1, 2.0, 1, 1),
            (1, 1, 4.0, 0, 0),
            (2, 2, 2.0, 0, 0),
            (2, 3, 2.0, 0, 0),
            (3, 2, 4.0, 1, 1),
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn empirical_means_match_brute_force() {
        let ds = TrialDataset::new(vec![
            participant(0, 1, Sign::Plus, None, 1),
            participant(1, 0, Sign::Plus, Some(Sign::Minus), 0),
            participant(2, 0, Sign::Plus, Some(Sign::Plus), 1),
            participant(3, 1, Sign::Minus, Some(Sign::Plus), 1),
            participant(4, 0, Sign::Minus, None, 0),
            participant(5, 1, Sign::Minus, Some(Sign::Minus), 0),
        ])
        .unwrap();
        let s = empirical_marginals(&ds).unwrap();
        // AI1: p0 (w2, y=1), p2 (w4, y=1) -> 1; AI2: p0 (w2, 1), p1 (w4, 0) -> 2/6
        // AI3: p3 (w4, 1), p4 (w2, 0) -> 4/6; AI4: p4 (w2, 0), p5 (w4, 0) -> 0
        let m = s.ai_means[0];
        assert_eq!(m[0], Some(1.0));
        assert_eq!(m[1], Some(2.0 / 6.0));
        assert_eq!(m[2], Some(4.0 / 6.0));
        assert_eq!(m[3], Some(0.0));
        assert_eq!(s.response_rate, [Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert_eq!(s.pretest_mean, 0.5);
    }

    #[test]
    fn all_successes_give_unit_means() {
        let ds = TrialDataset::new(
            (0..8)
                .map(|i| {
                    participant(
                        i,
                        0,
                        if i % 2 == 0 { Sign::Plus } else { Sign::Minus },
                        if i % 4 < 2 { None } else { Some(Sign::Plus) },
                        1,
                    )
                })
                .collect(),
        )
        .unwrap();
        let s = empirical_marginals(&ds).unwrap();
        assert_eq!(s.ai_means[0][0], Some(1.0));
        assert_eq!(s.ai_means[0][2], Some(1.0));
        // No non-responder followed a2 = -1, but responders fill those cells.
        assert_eq!(s.ai_means[0][1], Some(1.0));
    }

    #[test]
    fn empty_cell_reported_missing() {
        let ds =
            TrialDataset::new(vec![participant(0, 0, Sign::Plus, Some(Sign::Plus), 1)]).unwrap();
        let s = empirical_marginals(&ds).unwrap();
        assert_eq!(s.ai_means[0][1], None);
        assert_eq!(s.ai_means[0][2], None);
    }

    #[test]
    fn csv_export_layout() {
        let ds = TrialDataset::new(vec![
            participant(0, 1, Sign::Plus, None, 1),
            participant(1, 0, Sign::Minus, Some(Sign::Minus), 0),
        ])
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id,y0,a1,r,a2,y1\n0,1,1,1,,1\n1,0,-1,0,-1,0\n"
        );
    }

    #[test]
    fn exact_enumeration_reproduces_response_rates_and_marginals() {
        for row in TABLE2 {
            let ex = exact_two_wave(&row.params()).unwrap();
            assert!((ex.scenario.response_rate[0] - 0.5648).abs() < 1e-3);
            assert!((ex.scenario.response_rate[1] - 0.3356).abs() < 1e-3);
            ex.scenario.validate().unwrap();
            for d in 0..4 {
                // Printed marginals are rounded to two decimals.
                assert!(
                    (ex.marginal_means[d] - row.marginals[d]).abs() < 0.006,
                    "{row:?} {d}"
                );
            }
            let or = log_odds_ratio(ex.marginal_means[1], ex.marginal_means[3])
                .unwrap()
                .exp();
            assert!(
                (or - row.odds_ratio).abs() / row.odds_ratio < 0.05,
                "{row:?}: {or}"
            );
        }
        let ex = exact_two_wave(&GenParamsTwoWave::default()).unwrap();
        assert!((ex.pretest_response_corr - 0.227).abs() < 0.005);
    }

    #[test]
    fn exact_pretest_is_consistent() {
        let ex = exact_two_wave(&GenParamsTwoWave::default()).unwrap();
        let p = ex.scenario.pretest.unwrap();
        let r_bar = ex.scenario.mean_response_rate();
        let implied =
            (1.0 - r_bar) * p.given_nonresponder.unwrap() + r_bar * p.given_responder.unwrap();
        assert!((implied - 0.4).abs() < 1e-12);
    }

    #[test]
    fn null_generator_has_common_means() {
        let ex = exact_two_wave(&GenParamsTwoWave::default().null()).unwrap();
        for d in 1..4 {
            assert!((ex.marginal_means[d] - ex.marginal_means[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn second_followup_odds_ratio_is_about_two_without_delay() {
        let m = exact_second_followup_means(&GenParamsThreeWave::new(Y2Model::NoDelay)).unwrap();
        let or = log_odds_ratio(m[1], m[3]).unwrap().exp();
        assert!((or - 2.0).abs() < 0.1, "{or}");
    }

    #[test]
    fn large_sample_matches_exact_enumeration() {
        let g = GenParamsTwoWave::default();
        let ex = exact_two_wave(&g).unwrap();
        let s = empirical_marginals(&simulate_two_wave(&g, 200_000, 11).unwrap()).unwrap();
        for d in 0..4 {
            assert!((s.ai_means[0][d].unwrap() - ex.marginal_means[d]).abs() < 0.01);
        }
        assert!((s.pretest_mean - 0.4).abs() < 0.005);
    }

    #[test]
    fn cell_generator_matches_cell_probabilities() {
        let s = exact_two_wave(&GenParamsTwoWave::default())
            .unwrap()
            .scenario;
        let ds = simulate_from_cells_with(&s, 200_000, &mut replicate_rng(12, 0));
        let e = empirical_marginals(&ds).unwrap();
        for ai in AdaptiveIntervention::ALL {
            assert!((e.ai_means[0][ai.index()].unwrap() - s.marginal_mean(ai)).abs() < 0.01);
        }
        assert!((e.pretest_mean - 0.4).abs() < 0.005);
    }

    #[test]
    fn three_wave_no_delay_is_markov_in_y1() {
        let g = GenParamsThreeWave::new(Y2Model::NoDelay);
        assert_eq!(g.y2_prob(Sign::Plus, 1), g.y2_prob(Sign::Minus, 1));
        let ds = simulate_three_wave(&g, 20_000, 5).unwrap();
        assert_eq!(ds.waves, 3);
        assert!(ds.participants.iter().all(|p| p.y2.is_some()));
    }
}
