use std::path::Path;

use clap::ValueEnum;
use smartb_core::experiments::{SimulationReport, SimulationResult, TextTable};
use smartb_core::planning::PlanReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Aligned columns preceded by `#` header lines.
    Table,
    /// Comma-separated with a header row, preceded by `#` header lines.
    Csv,
    /// The machine-readable document only.
    Json,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Fixed columns of `smartb n` and `smartb power` CSV output.
pub const PLAN_COLUMNS: [&str; 16] = [
    "method",
    "alpha",
    "target_power",
    "contrast_target",
    "contrast_reference",
    "n",
    "n_exact",
    "attrition",
    "n_enrolled",
    "power",
    "sigma2",
    "delta",
    "mu_target",
    "mu_reference",
    "response_rate",
    "rho",
];

pub fn plan_table(r: &PlanReport) -> TextTable {
    let row = vec![
        r.method.to_string(),
        r.alpha.to_string(),
        opt(r.target_power),
        r.contrast.target.to_string(),
        r.contrast.reference.to_string(),
        r.n.to_string(),
        opt(r.n_exact.map(|x| format!("{x:.4}"))),
        opt(r.attrition),
        opt(r.n_enrolled),
        opt(r.power.map(|p| format!("{p:.6}"))),
        format!("{:.6}", r.sigma2),
        format!("{:.6}", r.delta),
        format!("{:.6}", r.terms.target.mu),
        format!("{:.6}", r.terms.reference.mu),
        opt(r.terms.reduced_response_rate.map(|x| format!("{x:.6}"))),
        opt(r.terms.rho),
    ];
    TextTable {
        header: PLAN_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: vec![row],
    }
}

/// Transposes a one-row table into `key  value` lines.
fn key_values(t: &TextTable) -> String {
    let width = t.header.iter().map(String::len).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in t.header.iter().zip(&t.rows[0]) {
        if !v.is_empty() {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
    }
    out
}

pub fn print_plan(r: &PlanReport, scenario: &Path, format: Format) {
    match format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(r).expect("report serializes")
        ),
        Format::Csv | Format::Table => {
            println!("# scenario: {}", scenario.display());
            println!(
                "# method: {}  alpha: {}  contrast: {} vs {}",
                r.method, r.alpha, r.contrast.target, r.contrast.reference
            );
            let t = plan_table(r);
            if format == Format::Csv {
                print!("{}", t.to_csv());
            } else {
                print!("{}", key_values(&t));
            }
        }
    }
}

/// Fixed columns of a simulated power estimate.
pub const POWER_COLUMNS: [&str; 7] = [
    "n",
    "reps",
    "rejections",
    "failures",
    "power",
    "mc_se",
    "seed",
];
/// Fixed columns of a sample-size search grid.
pub const SEARCH_COLUMNS: [&str; 6] = ["n", "reps", "failures", "power", "mc_se", "clamped"];

pub fn simulation_table(r: &SimulationReport) -> TextTable {
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match &r.result {
        SimulationResult::Power(p) => TextTable {
            header: strings(&POWER_COLUMNS),
            rows: vec![vec![
                p.n.to_string(),
                p.reps.to_string(),
                p.rejections.to_string(),
                p.failures.to_string(),
                format!("{:.4}", p.power),
                format!("{:.4}", p.mc_se),
                p.seed.to_string(),
            ]],
        },
        SimulationResult::Samplesize(s) => TextTable {
            header: strings(&SEARCH_COLUMNS),
            rows: s
                .grid
                .iter()
                .map(|g| {
                    vec![
                        g.estimate.n.to_string(),
                        g.estimate.reps.to_string(),
                        g.estimate.failures.to_string(),
                        format!("{:.4}", g.estimate.power),
                        format!("{:.4}", g.estimate.mc_se),
                        g.clamped.to_string(),
                    ]
                })
                .collect(),
        },
    }
}

pub fn simulation_summary(r: &SimulationReport) -> String {
    match &r.result {
        SimulationResult::Power(p) => {
            format!("power {:.4} (MC SE {:.4}) at n = {}", p.power, p.mc_se, p.n)
        }
        SimulationResult::Samplesize(s) => format!(
            "n = {} for power {} (exact {:.1}, SE {:.1}; probit line {:.4} + {:.6} n)",
            s.n, s.target, s.n_exact, s.n_se, s.intercept, s.slope
        ),
    }
}

pub fn render(table: &TextTable, headers: &[String], format: Format) -> String {
    let mut out: String = headers.iter().map(|h| format!("# {h}\n")).collect();
    out.push_str(&match format {
        Format::Csv => table.to_csv(),
        _ => table.to_aligned(),
    });
    out
}
