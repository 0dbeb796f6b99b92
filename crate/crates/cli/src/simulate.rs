use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use smartb_core::experiments::{
    model_by_name, run_power_table, run_simulation, run_size_table, run_three_wave_table,
    GeneratorSource, GridSpec, SimulationRequest, TableConfig, TextTable, DEFAULT_SEED,
    MODEL_NAMES,
};
use smartb_core::simulator::Y2Model;

use crate::output::{render, simulation_summary, simulation_table, Format};
use crate::{exit, read_scenario, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    /// Simulated power of one model at one size.
    Power,
    /// Probit-interpolated sample size over a grid.
    Samplesize,
    /// Predicted and simulated power for the generating scenarios.
    Table3,
    /// Predicted and simulated sample sizes for the generating scenarios.
    Table4,
    /// Three-wave power with and without a delayed effect.
    Table5,
}

impl Study {
    fn stem(self) -> &'static str {
        match self {
            Study::Power => "power",
            Study::Samplesize => "samplesize",
            Study::Table3 => "table3",
            Study::Table4 => "table4",
            Study::Table5 => "table5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DelayArg {
    NoDelay,
    Delayed,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(value_enum)]
    study: Study,
    /// Replicates per estimate (per grid point for searches). Defaults: 1000
    /// for power and samplesize, 2000 for table3 and table5, 500 for table4.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// samplesize: `n1,n2,...` or `lo:hi:points`. table4: number of grid points (default 10).
    #[arg(long)]
    grid: Option<String>,
    /// Directory receiving `<study>.json` and `<study>.csv`.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    output: Format,

    /// Full request document for power or samplesize; other cell flags are ignored.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Generating scenario by correlation label.
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    /// Generating scenario by odds-ratio label.
    #[arg(long = "or", default_value_t = 2.0)]
    odds_ratio: f64,
    /// Remove every treatment effect from the generating scenario.
    #[arg(long)]
    null: bool,
    /// Simulate from the cell probabilities of a conditional scenario file instead.
    #[arg(long, conflicts_with = "y2_model")]
    scenario: Option<PathBuf>,
    /// Simulate three waves with this second follow-up model instead.
    #[arg(long, value_enum)]
    y2_model: Option<DelayArg>,
    /// Analysis model (see `--help`).
    #[arg(long, default_value = "twowave", value_parser = clap::builder::PossibleValuesParser::new(MODEL_NAMES))]
    model: String,
    /// Trial size for a power study.
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Target power for sample-size studies.
    #[arg(long, default_value_t = 0.8)]
    target: f64,

    /// Trial sizes for table3 and table5 (default 300,500).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Correlation labels for table3 and table4 (default all).
    #[arg(long, value_delimiter = ',')]
    rhos: Option<Vec<f64>>,
    /// Odds-ratio labels for table3 and table4 (default all).
    #[arg(long = "ors", value_delimiter = ',')]
    odds_ratios: Option<Vec<f64>>,
    /// table4: formula predictions only.
    #[arg(long)]
    formula_only: bool,
}

fn parse_grid(s: &str) -> Result<GridSpec, Failure> {
    let bad = || {
        Failure::new(
            exit::VALIDATION,
            format!("--grid {s:?}: use n1,n2,... or lo:hi:points"),
        )
    };
    if let [lo, hi, points] = s.split(':').collect::<Vec<_>>()[..] {
        let p = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        return Ok(GridSpec::Range {
            lo: p(lo)?,
            hi: p(hi)?,
            points: p(points)?,
        });
    }
    s.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()
        .map(GridSpec::Explicit)
}

fn cell_request(args: &SimulateArgs) -> Result<SimulationRequest, Failure> {
    if let Some(path) = &args.request {
        let text = fs::read_to_string(path).map_err(|e| {
            Failure::new(
                exit::VALIDATION,
                format!("cannot read request {}: {e}", path.display()),
            )
        })?;
        let mut req: SimulationRequest = serde_json::from_str(&text).map_err(|e| {
            Failure::new(
                exit::VALIDATION,
                format!("invalid request {}: {e}", path.display()),
            )
        })?;
        if let Some(r) = args.reps {
            req.reps = r;
        }
        return Ok(req);
    }
    let generator = if let Some(path) = &args.scenario {
        GeneratorSource::Scenario {
            scenario: Box::new(read_scenario(path)?),
        }
    } else if let Some(d) = args.y2_model {
        GeneratorSource::ThreeWave {
            y2_model: match d {
                DelayArg::NoDelay => Y2Model::NoDelay,
                DelayArg::Delayed => Y2Model::Delayed,
            },
        }
    } else {
        GeneratorSource::Table2 {
            rho: args.rho,
            odds_ratio: args.odds_ratio,
            null: args.null,
        }
    };
    let model = model_by_name(&args.model).expect("clap restricts model names");
    let reps = args.reps.unwrap_or(1000);
    let mut req = match args.study {
        Study::Power => SimulationRequest::power(generator, model, args.n, reps, args.seed),
        _ => SimulationRequest::sample_size(generator, model, reps, args.seed),
    };
    req.alpha = args.alpha;
    req.target = args.target;
    req.grid = args.grid.as_deref().map(parse_grid).transpose()?;
    Ok(req)
}

fn table_config(args: &SimulateArgs) -> Result<TableConfig, Failure> {
    let mut c = TableConfig {
        seed: args.seed,
        alpha: args.alpha,
        power_target: args.target,
        threads: args.threads,
        ..TableConfig::default()
    };
    match args.study {
        Study::Table4 => {
            if let Some(r) = args.reps {
                c.search_reps = r;
            }
            if let Some(g) = &args.grid {
                c.grid_points = g.parse().map_err(|_| {
                    Failure::new(
                        exit::VALIDATION,
                        format!("--grid {g:?}: table4 takes a number of points"),
                    )
                })?;
            }
            c.simulate = !args.formula_only;
        }
        _ => {
            if let Some(r) = args.reps {
                c.reps = r;
            }
        }
    }
    if let Some(s) = &args.sizes {
        c.sizes = s.clone();
    }
    if let Some(r) = &args.rhos {
        c.rhos = r.clone();
    }
    if let Some(o) = &args.odds_ratios {
        c.odds_ratios = o.clone();
    }
    c.validate()
        .map_err(|e| Failure::from_core(e, exit::VALIDATION))?;
    Ok(c)
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn config_headers(c: &TableConfig, study: Study) -> Vec<String> {
    let mut h = vec![
        format!("smartb simulate {}", study.stem()),
        format!(
            "seed: {}  alpha: {}  policy: {:?}  contrast: {} vs {}",
            c.seed,
            c.alpha,
            c.policy,
            c.contrast.target.number(),
            c.contrast.reference.number()
        ),
    ];
    match study {
        Study::Table3 => {
            h.push(format!("reps: {}  sizes: {}", c.reps, list(&c.sizes)));
            h.push(format!(
                "pilot correlation: {} datasets at n = {}",
                c.pilot_reps, c.pilot_n
            ));
        }
        Study::Table4 => h.push(format!(
            "search reps: {}  grid points: {}  target power: {}  simulate: {}",
            c.search_reps, c.grid_points, c.power_target, c.simulate
        )),
        _ => h.push(format!("reps: {}  sizes: {}", c.reps, list(&c.sizes))),
    }
    if study != Study::Table5 {
        h.push(format!(
            "rhos: {}  odds ratios: {}",
            list(&c.rhos),
            list(&c.odds_ratios)
        ));
    }
    h
}

fn write_outputs(
    out: &Path,
    stem: &str,
    json: &str,
    table: &TextTable,
) -> Result<(PathBuf, PathBuf), Failure> {
    let io = |e: std::io::Error| {
        Failure::new(
            exit::SIMULATION,
            format!("cannot write to {}: {e}", out.display()),
        )
    };
    fs::create_dir_all(out).map_err(io)?;
    let json_path = out.join(format!("{stem}.json"));
    let csv_path = out.join(format!("{stem}.csv"));
    fs::write(&json_path, json).map_err(io)?;
    fs::write(&csv_path, table.to_csv()).map_err(io)?;
    Ok((json_path, csv_path))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("result serializes");
    s.push('\n');
    s
}

fn emit(
    args: &SimulateArgs,
    json: String,
    table: TextTable,
    headers: Vec<String>,
    summary: Option<String>,
) -> Result<(), Failure> {
    let (json_path, csv_path) = write_outputs(&args.out, args.study.stem(), &json, &table)?;
    match args.output {
        Format::Json => print!("{json}"),
        f => {
            print!("{}", render(&table, &headers, f));
            if let Some(s) = summary {
                println!("# {s}");
            }
            println!("# wrote {} and {}", json_path.display(), csv_path.display());
        }
    }
    Ok(())
}

pub fn run(args: &SimulateArgs) -> Result<(), Failure> {
    let sim = |e| Failure::from_core(e, exit::SIMULATION);
    match args.study {
        Study::Power | Study::Samplesize => {
            let req = cell_request(args)?;
            req.validate()
                .map_err(|e| Failure::from_core(e, exit::VALIDATION))?;
            let report = run_simulation(&req, args.threads, &|_| {}).map_err(sim)?;
            let headers = vec![
                format!("smartb simulate {}", args.study.stem()),
                format!(
                    "seed: {}  reps: {}  alpha: {}  policy: {:?}",
                    req.seed, req.reps, req.alpha, req.policy
                ),
                format!(
                    "generator: {}",
                    serde_json::to_string(&req.generator).expect("serializes")
                ),
                format!(
                    "model: {}",
                    serde_json::to_string(&req.model).expect("serializes")
                ),
            ];
            let summary = simulation_summary(&report);
            emit(
                args,
                report.to_json(),
                simulation_table(&report),
                headers,
                Some(summary),
            )
        }
        Study::Table3 => {
            let c = table_config(args)?;
            let t = run_power_table(&c).map_err(sim)?;
            emit(
                args,
                pretty(&t),
                t.text_table(),
                config_headers(&c, args.study),
                None,
            )
        }
        Study::Table4 => {
            let c = table_config(args)?;
            let t = run_size_table(&c).map_err(sim)?;
            emit(
                args,
                pretty(&t),
                t.text_table(),
                config_headers(&c, args.study),
                None,
            )
        }
        Study::Table5 => {
            let c = table_config(args)?;
            let t = run_three_wave_table(&c).map_err(sim)?;
            emit(
                args,
                pretty(&t),
                t.text_table(),
                config_headers(&c, args.study),
                None,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(
            parse_grid("100,200,300").unwrap(),
            GridSpec::Explicit(vec![100, 200, 300])
        );
        assert_eq!(
            parse_grid("100:400:4").unwrap(),
            GridSpec::Range {
                lo: 100,
                hi: 400,
                points: 4
            }
        );
        assert!(parse_grid("a,b").is_err());
    }
}
