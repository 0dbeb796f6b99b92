use std::collections::HashMap;
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use serde::Serialize;
use serde_json::{json, Map, Value};
use smartb_core::error::Violation;
use smartb_core::experiments::{run_simulation, SimulationRequest};
use smartb_core::planning::{method_for, parse_waves, power_report, sample_size_report, Family};
use smartb_core::scenario_file::{parse_error, ScenarioFile};
use smartb_core::schema::api_schema;
use tokio::sync::mpsc;

use crate::api_error::ApiError;
use crate::config::ServiceConfig;
use crate::jobs::{JobRecord, JobStatus};
use crate::store::{is_valid_name, Store};

/// Shared by every handler and the job worker.
#[derive(Debug)]
pub struct AppState {
    pub config: ServiceConfig,
    pub store: Store,
    jobs: Mutex<HashMap<String, JobRecord>>,
    next_seq: AtomicU64,
    queue: mpsc::UnboundedSender<String>,
}

impl AppState {
    /// Opens the store, restores jobs and spawns the single FIFO worker.
    pub fn start(config: ServiceConfig) -> io::Result<Arc<Self>> {
        let store = Store::open(&config.data_dir)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let mut jobs = HashMap::new();
        let mut pending = Vec::new();
        let mut next_seq = 0;
        for mut r in store.load_jobs()? {
            next_seq = next_seq.max(r.seq + 1);
            match r.status {
                JobStatus::Queued => pending.push(r.id.clone()),
                JobStatus::Running => {
                    r.fail("interrupted by a server restart");
                    store.put_job(&r)?;
                }
                JobStatus::Done if store.get_result(&r.id)?.is_none() => {
                    log::warn!("job {} is done but its result is missing", r.id);
                }
                _ => {}
            }
            jobs.insert(r.id.clone(), r);
        }
        let state = Arc::new(Self {
            config,
            store,
            jobs: Mutex::new(jobs),
            next_seq: AtomicU64::new(next_seq),
            queue: tx,
        });
        for id in pending {
            state.queue.send(id).expect("worker receiver alive");
        }
        tokio::spawn(worker(state.clone(), rx));
        Ok(state)
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.jobs
            .lock()
            .expect("job table poisoned")
            .get(id)
            .cloned()
    }

    fn update<T>(&self, id: &str, f: impl FnOnce(&mut JobRecord) -> T) -> Option<T> {
        self.jobs
            .lock()
            .expect("job table poisoned")
            .get_mut(id)
            .map(f)
    }

    fn persist(&self, id: &str) {
        if let Some(r) = self.job(id) {
            if let Err(e) = self.store.put_job(&r) {
                log::error!("cannot persist job {id}: {e}");
            }
        }
    }

    fn submit(&self, config: SimulationRequest) -> Result<JobRecord, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let record = JobRecord::new(id.clone(), seq, config);
        self.store.put_job(&record).map_err(ApiError::internal)?;
        self.jobs
            .lock()
            .expect("job table poisoned")
            .insert(id.clone(), record.clone());
        self.queue.send(id).map_err(ApiError::internal)?;
        Ok(record)
    }
}

async fn worker(state: Arc<AppState>, mut rx: mpsc::UnboundedReceiver<String>) {
    while let Some(id) = rx.recv().await {
        let Some(config) = state
            .update(&id, |r| {
                r.advance(JobStatus::Running).then(|| r.config.clone())
            })
            .flatten()
        else {
            continue;
        };
        state.persist(&id);
        log::info!("job {id} running");
        let st = state.clone();
        let job_id = id.clone();
        let run = tokio::task::spawn_blocking(move || {
            let progress = |p: f64| {
                st.update(&job_id, |r| r.progress = r.progress.max(p.min(1.0)));
            };
            run_simulation(&config, st.config.threads, &progress).map(|r| r.to_json())
        })
        .await;
        let outcome = match run {
            Ok(Ok(doc)) => state
                .store
                .put_result(&id, &doc)
                .map_err(|e| format!("cannot store result: {e}")),
            Ok(Err(e)) => Err(e.to_string()),
            Err(e) => Err(format!("worker panicked: {e}")),
        };
        match outcome {
            Ok(()) => {
                state.update(&id, |r| r.advance(JobStatus::Done));
                log::info!("job {id} done");
            }
            Err(msg) => {
                log::warn!("job {id} failed: {msg}");
                state.update(&id, |r| r.fail(msg));
            }
        }
        state.persist(&id);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/formula/power", post(formula_power))
        .route("/v1/formula/samplesize", post(formula_samplesize))
        .route("/v1/simulate", post(simulate))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/result", get(get_result))
        .route("/v1/scenarios", get(list_scenarios))
        .route("/v1/scenarios/{name}", put(put_scenario).get(get_scenario))
        .route("/v1/schema", get(schema))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

pub(crate) fn json_bytes(status: StatusCode, bytes: impl Into<Body>) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "application/json")],
        bytes.into(),
    )
        .into_response()
}

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    json_bytes(
        status,
        serde_json::to_vec(value).expect("response serializes"),
    )
}

fn parse_object(body: &Bytes) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::invalid(vec![Violation::new(
            "",
            "body must be a JSON object",
        )])),
        Err(e) => Err(ApiError::invalid(vec![Violation::new(
            "",
            format!("malformed JSON: {e}"),
        )])),
    }
}

struct FormulaQuery {
    scenario: ScenarioFile,
    method: smartb_core::formulas::Method,
    n: Option<u64>,
    attrition: Option<f64>,
}

fn selector(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_formula(body: &Bytes, needs_n: bool) -> Result<FormulaQuery, ApiError> {
    let mut obj = parse_object(body)?;
    let mut violations = Vec::new();
    let mut take = |key: &str| obj.remove(key);
    let family = match take("method") {
        None => {
            violations.push(Violation::new("method", "required (cpb or mpb)"));
            None
        }
        Some(v) => match selector(&v).map(|s| s.parse::<Family>()) {
            Some(Ok(f)) => Some(f),
            _ => {
                violations.push(Violation::new(
                    "method",
                    format!("{v} is not one of cpb, mpb"),
                ));
                None
            }
        },
    };
    let waves = match take("waves") {
        None => {
            violations.push(Violation::new("waves", "required (1 or 2)"));
            None
        }
        Some(v) => match selector(&v).map(|s| parse_waves(&s)) {
            Some(Ok(w)) => Some(w),
            _ => {
                violations.push(Violation::new(
                    "waves",
                    format!("{v} is not one of 1, 2, onewave, twowave"),
                ));
                None
            }
        },
    };
    let n = match take("n") {
        None if needs_n => {
            violations.push(Violation::new("n", "required"));
            None
        }
        None => None,
        Some(v) => match v.as_u64().filter(|&n| n >= 1) {
            Some(n) => Some(n),
            None => {
                violations.push(Violation::new(
                    "n",
                    format!("{v} is not a positive integer"),
                ));
                None
            }
        },
    };
    let attrition = match take("attrition") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_f64() {
            Some(a) => Some(a),
            None => {
                violations.push(Violation::new("attrition", format!("{v} is not a number")));
                None
            }
        },
    };
    let scenario = ScenarioFile::from_value(Value::Object(obj));
    if let Err(smartb_core::Error::Validation(v)) = &scenario {
        violations.extend(v.0.iter().cloned());
    }
    if !violations.is_empty() {
        return Err(ApiError::invalid(violations));
    }
    let scenario = scenario?;
    let method = method_for(family.expect("checked"), waves.expect("checked"))?;
    Ok(FormulaQuery {
        scenario,
        method,
        n,
        attrition,
    })
}

async fn formula_power(body: Bytes) -> Result<Response, ApiError> {
    let q = parse_formula(&body, true)?;
    let report = power_report(&q.scenario, q.method, q.n.expect("checked"), q.attrition)?;
    Ok(json_response(StatusCode::OK, &report))
}

async fn formula_samplesize(body: Bytes) -> Result<Response, ApiError> {
    let q = parse_formula(&body, false)?;
    if q.n.is_some() {
        return Err(ApiError::invalid(vec![Violation::new(
            "n",
            "not used by a sample-size query",
        )]));
    }
    let report = sample_size_report(&q.scenario, q.method, q.attrition)?;
    Ok(json_response(StatusCode::OK, &report))
}

/// Replaces a `{"kind": "stored", "name": ...}` generator with the stored document.
fn inline_stored_scenario(state: &AppState, obj: &mut Map<String, Value>) -> Result<(), ApiError> {
    let Some(Value::Object(gen)) = obj.get_mut("generator") else {
        return Ok(());
    };
    if gen.get("kind").and_then(Value::as_str) != Some("stored") {
        return Ok(());
    }
    let name = gen
        .get("name")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    if !is_valid_name(&name) {
        return Err(ApiError::invalid(vec![Violation::new(
            "generator.name",
            "must name a stored scenario",
        )]));
    }
    let doc = state
        .store
        .get_scenario(&name)
        .map_err(ApiError::internal)?
        .ok_or_else(|| {
            ApiError::invalid(vec![Violation::new(
                "generator.name",
                format!("no stored scenario {name:?}"),
            )])
        })?;
    let scenario: Value = serde_json::from_str(&doc).map_err(ApiError::internal)?;
    *gen = Map::from_iter([
        ("kind".to_string(), json!("scenario")),
        ("scenario".to_string(), scenario),
    ]);
    Ok(())
}

async fn simulate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let mut obj = parse_object(&body)?;
    inline_stored_scenario(&state, &mut obj)?;
    let req: SimulationRequest =
        serde_path_to_error::deserialize(Value::Object(obj)).map_err(parse_error)?;
    req.validate()?;
    if req.reps > state.config.max_reps {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!(
                "reps = {} exceeds the server cap of {}",
                req.reps, state.config.max_reps
            ),
        ));
    }
    let record = state.submit(req)?;
    let mut resp = json_response(StatusCode::ACCEPTED, &record);
    if let Ok(loc) = format!("/v1/jobs/{}", record.id).parse() {
        resp.headers_mut().insert(header::LOCATION, loc);
    }
    Ok(resp)
}

fn known_job(state: &AppState, id: &str) -> Result<JobRecord, ApiError> {
    state
        .job(id)
        .ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))
}

async fn get_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let record = known_job(&state, &id)?;
    let mut v = serde_json::to_value(&record).map_err(ApiError::internal)?;
    if record.status == JobStatus::Done {
        if let Some(doc) = state.store.get_result(&id).map_err(ApiError::internal)? {
            v["result"] = serde_json::from_str(&doc).map_err(ApiError::internal)?;
        }
    }
    Ok(json_response(StatusCode::OK, &v))
}

async fn get_result(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let record = known_job(&state, &id)?;
    match record.status {
        JobStatus::Done => {
            let doc = state
                .store
                .get_result(&id)
                .map_err(ApiError::internal)?
                .ok_or_else(|| ApiError::internal(format!("result of job {id} is missing")))?;
            Ok(json_bytes(StatusCode::OK, doc))
        }
        // Not ready yet: answer with the record so clients can keep polling.
        JobStatus::Queued | JobStatus::Running => Ok(json_response(StatusCode::ACCEPTED, &record)),
        JobStatus::Failed => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            record.error.unwrap_or_else(|| "job failed".into()),
        )),
    }
}

fn check_name(name: &str) -> Result<(), ApiError> {
    if is_valid_name(name) {
        Ok(())
    } else {
        Err(ApiError::invalid(vec![Violation::new(
            "name",
            "use 1-64 lowercase letters, digits, '-' or '_', starting with a letter or digit",
        )]))
    }
}

async fn put_scenario(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    check_name(&name)?;
    let file = ScenarioFile::from_value(Value::Object(parse_object(&body)?))?;
    file.validate()?;
    let canonical = file.to_canonical_json();
    let created = state
        .store
        .put_scenario(&name, &canonical)
        .map_err(ApiError::internal)?;
    let status = if created {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    Ok(json_bytes(status, canonical))
}

async fn get_scenario(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
) -> Result<Response, ApiError> {
    check_name(&name).map_err(|_| ApiError::not_found(format!("no scenario {name:?}")))?;
    match state
        .store
        .get_scenario(&name)
        .map_err(ApiError::internal)?
    {
        Some(doc) => Ok(json_bytes(StatusCode::OK, doc)),
        None => Err(ApiError::not_found(format!("no scenario {name:?}"))),
    }
}

async fn list_scenarios(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let names = state.store.list_scenarios().map_err(ApiError::internal)?;
    Ok(json_response(
        StatusCode::OK,
        &json!({ "scenarios": names }),
    ))
}

async fn schema() -> Response {
    json_response(StatusCode::OK, &api_schema())
}
