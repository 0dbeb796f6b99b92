use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use smartb_core::formulas::{mpb_n_twowave, TestSpec};
use smartb_core::schema::api_schema;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smartb"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn write_scenario(dir: &Path, name: &str, marginals: [f64; 4], rho: f64) -> PathBuf {
    let path = dir.join(name);
    let doc = serde_json::json!({
        "mode": "marginal",
        "marginals": {"1": marginals[0], "2": marginals[1], "3": marginals[2], "4": marginals[3]},
        "response_rates": {"plus_arm": 0.565, "minus_arm": 0.336},
        "pretest": {"mean": 0.4},
        "rho": rho,
        "contrast": {"target": 2, "reference": 4}
    });
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

fn check_schema(def: &str, doc: &Value) {
    let mut schema = api_schema();
    schema["$ref"] = Value::String(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{def}: {errors:?}");
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn high_rho(&self) -> String {
        let p = write_scenario(self.dir.path(), "hi.json", [0.58, 0.58, 0.41, 0.41], 0.6);
        p.to_str().unwrap().to_string()
    }

    fn low_rho(&self) -> String {
        let p = write_scenario(self.dir.path(), "lo.json", [0.59, 0.59, 0.42, 0.42], 0.06);
        p.to_str().unwrap().to_string()
    }

    fn null(&self) -> String {
        let p = write_scenario(self.dir.path(), "null.json", [0.5, 0.5, 0.5, 0.5], 0.3);
        p.to_str().unwrap().to_string()
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }
}

#[test]
fn two_wave_marginal_sample_size() {
    let f = Fixture::new();
    let o = run(&[
        "n",
        "--scenario",
        &f.high_rho(),
        "--method",
        "mpb",
        "--waves",
        "2",
        "--output",
        "json",
    ]);
    let v = stdout_json(&o);
    check_schema("plan_report", &v);
    let file = smartb_core::scenario_file::ScenarioFile::from_json(
        &std::fs::read_to_string(f.high_rho()).unwrap(),
    )
    .unwrap();
    let scenario = file.to_scenario().unwrap().marginal();
    let oracle = mpb_n_twowave(&scenario, file.contrast().unwrap(), TestSpec::default()).unwrap();
    assert_eq!(v["n"].as_u64().unwrap(), oracle.n);
    let n = oracle.n as f64;
    assert!((n - 272.0).abs() <= 3.0, "n = {n}");
    assert!((n - 277.0).abs() / 277.0 <= 0.03);
}

#[test]
fn bundled_scenarios_plan() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let file = path.to_str().unwrap();
        let cells = file.ends_with("-cells.json");
        for method in ["mpb", "cpb"] {
            for waves in ["1", "2"] {
                let o = run(&[
                    "n",
                    "--scenario",
                    file,
                    "--method",
                    method,
                    "--waves",
                    waves,
                    "--output",
                    "json",
                ]);
                if method == "cpb" && !cells {
                    assert_eq!(code(&o), 2, "{file} {method} {waves}");
                    continue;
                }
                let doc = stdout_json(&o);
                check_schema("plan_report", &doc);
                assert!(doc["n"].as_u64().unwrap() >= 2);
            }
        }
        seen += 1;
    }
    assert_eq!(seen, 4);
}

#[test]
fn attrition_inflates_then_ceils() {
    let f = Fixture::new();
    let base = stdout_json(&run(&[
        "n",
        "--scenario",
        &f.high_rho(),
        "--waves",
        "1",
        "--output",
        "json",
    ]));
    let v = stdout_json(&run(&[
        "n",
        "--scenario",
        &f.high_rho(),
        "--waves",
        "1",
        "--attrition",
        "0.2",
        "--output",
        "json",
    ]));
    let n = base["n"].as_u64().unwrap();
    assert_eq!(
        v["n_enrolled"].as_u64().unwrap(),
        (n as f64 / 0.8).ceil() as u64
    );
}

#[test]
fn table_output_prints_defaults() {
    let f = Fixture::new();
    let o = run(&["n", "--scenario", &f.high_rho()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# method: MPB-2w  alpha: 0.05"), "{text}");
    assert!(text.contains("target_power        0.8"), "{text}");
}

#[test]
fn one_wave_power_near_published() {
    let f = Fixture::new();
    let v = stdout_json(&run(&[
        "power",
        "--scenario",
        &f.low_rho(),
        "--waves",
        "1",
        "--n",
        "300",
        "--output",
        "json",
    ]));
    check_schema("plan_report", &v);
    let p = v["power"].as_f64().unwrap();
    assert!((p - 0.665).abs() <= 0.02, "power {p}");
    let huge = stdout_json(&run(&[
        "power",
        "--scenario",
        &f.low_rho(),
        "--waves",
        "1",
        "--n",
        "1000000",
        "--output",
        "json",
    ]));
    assert!(huge["power"].as_f64().unwrap() > 0.999_999);
}

#[test]
fn null_effect() {
    let f = Fixture::new();
    let o = run(&["n", "--scenario", &f.null(), "--waves", "1"]);
    assert_eq!(code(&o), 3);
    let v = stdout_json(&run(&[
        "power",
        "--scenario",
        &f.null(),
        "--waves",
        "1",
        "--n",
        "300",
        "--output",
        "json",
    ]));
    assert!((v["power"].as_f64().unwrap() - 0.025).abs() < 1e-12);
}

#[test]
fn validation_failures_exit_2() {
    let f = Fixture::new();
    assert_eq!(code(&run(&["n", "--scenario", &f.path("missing.json")])), 2);

    let no_rho = f.path("norho.json");
    std::fs::write(
        &no_rho,
        r#"{"mode":"marginal","marginals":{"1":0.6,"2":0.6,"3":0.4,"4":0.4},"response_rates":{"common":0.45}}"#,
    )
    .unwrap();
    let o = run(&["n", "--scenario", &no_rho, "--waves", "2"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("rho"), "{err}");

    let bad = f.path("bad.json");
    std::fs::write(
        &bad,
        r#"{"mode":"marginal","marginals":{"1":1.6,"2":0.6,"3":0.4,"4":0.4},"response_rates":{"common":0.45}}"#,
    )
    .unwrap();
    let o = run(&["n", "--scenario", &bad, "--waves", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stderr).unwrap().contains("marginals.1"));

    assert_eq!(
        code(&run(&["n", "--scenario", &f.high_rho(), "--waves", "3"])),
        2
    );
    assert_eq!(
        code(&run(&[
            "n",
            "--scenario",
            &f.high_rho(),
            "--attrition",
            "1.0"
        ])),
        2
    );
}

#[test]
fn simulate_rejects_zero_reps() {
    let f = Fixture::new();
    for study in ["power", "samplesize", "table3", "table4", "table5"] {
        let o = run(&["simulate", study, "--reps", "0", "--out", &f.path("out")]);
        assert_eq!(
            code(&o),
            2,
            "{study}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn simulate_power_is_reproducible() {
    let f = Fixture::new();
    let args = |out: &str| {
        vec![
            "simulate".to_string(),
            "power".into(),
            "--reps".into(),
            "300".into(),
            "--seed".into(),
            "7".into(),
            "--model".into(),
            "onewave".into(),
            "--out".into(),
            f.path(out),
        ]
    };
    let a = bin().args(args("a")).output().unwrap();
    let mut with_threads = args("b");
    with_threads.extend(["--threads".into(), "1".into()]);
    let b = bin().args(with_threads).output().unwrap();
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    for file in ["power.json", "power.csv"] {
        let x = std::fs::read(f.dir.path().join("a").join(file)).unwrap();
        let y = std::fs::read(f.dir.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
    let doc: Value =
        serde_json::from_slice(&std::fs::read(f.dir.path().join("a/power.json")).unwrap()).unwrap();
    check_schema("simulation_report", &doc);
    assert_eq!(doc["request"]["seed"], 7);
}

#[test]
fn simulate_samplesize_json_output() {
    let f = Fixture::new();
    let o = run(&[
        "simulate",
        "samplesize",
        "--rho",
        "0.06",
        "--or",
        "3",
        "--model",
        "onewave",
        "--reps",
        "100",
        "--grid",
        "60:240:4",
        "--output",
        "json",
        "--out",
        &f.path("s"),
    ]);
    let v = stdout_json(&o);
    check_schema("simulation_report", &v);
    let n = v["result"]["n"].as_u64().unwrap();
    assert!((100..=250).contains(&n), "n = {n}");
}

#[test]
fn failed_search_exits_4() {
    let f = Fixture::new();
    let o = run(&[
        "simulate",
        "samplesize",
        "--model",
        "onewave",
        "--reps",
        "5",
        "--grid",
        "2,3,4",
        "--out",
        &f.path("f"),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn table5_no_delay_row_matches_published() {
    let f = Fixture::new();
    let out = f.path("t5");
    let o = run(&[
        "simulate", "table5", "--reps", "2000", "--seed", "7", "--sizes", "300", "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# seed: 7"), "{text}");
    let doc: Value =
        serde_json::from_slice(&std::fs::read(Path::new(&out).join("table5.json")).unwrap())
            .unwrap();
    check_schema("table_report", &doc);
    let row = doc["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["y2_model"] == "no_delay" && r["n"] == 300)
        .expect("no-delay n=300 row");
    assert_eq!(row["identity_mismatches"], 0);
    // Columns: Y2 only, Y2 adj Y0, AR-1, exchangeable.
    for (col, published) in [(2, 0.651), (3, 0.715), (5, 0.726), (6, 0.699)] {
        let p = row["columns"][col]["power"].as_f64().unwrap();
        let se = (published * (1.0 - published) / 2000.0_f64).sqrt();
        assert!(
            (p - published).abs() <= 3.0 * se,
            "column {col}: {p} vs {published}"
        );
    }
    let csv = std::fs::read_to_string(Path::new(&out).join("table5.csv")).unwrap();
    assert!(csv.starts_with("delay,n,Y1 only,"), "{csv}");
}

#[test]
fn table4_formula_only_is_fast_and_complete() {
    let f = Fixture::new();
    let out = f.path("t4");
    let o = run(&[
        "simulate",
        "table4",
        "--formula-only",
        "--out",
        &out,
        "--output",
        "csv",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(Path::new(&out).join("table4.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.lines().any(|l| l.starts_with("0.06,2,414,")), "{csv}");
}

fn spawn_serve(
    extra: &[&str],
) -> (
    std::process::Child,
    BufReader<std::process::ChildStdout>,
    String,
) {
    let mut child = bin()
        .args(["serve", "--port", "0"])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    (child, reader, line)
}

#[test]
fn serve_on_os_assigned_port() {
    let dir = tempfile::tempdir().unwrap();
    let (mut child, _stdout, line) = spawn_serve(&["--data-dir", dir.path().to_str().unwrap()]);
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .expect(&line)
        .to_string();
    assert!(!addr.ends_with(":0"), "{addr}");
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /v1/scenarios HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(r#"{"scenarios":[]}"#), "{resp}");
}

#[test]
fn serve_failures_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let o = run(&[
        "serve",
        "--port",
        &port,
        "--data-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 5);

    let file = dir.path().join("not-a-dir");
    std::fs::write(&file, "x").unwrap();
    let o = run(&["serve", "--port", "0", "--data-dir", file.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8(o.stderr)
        .unwrap()
        .contains("data directory"));
}
