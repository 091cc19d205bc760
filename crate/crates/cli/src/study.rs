//! Two-alternative forced-choice observer study served over HTTP.
//!
//! | method | path                                   | body / result                                   |
//! |--------|----------------------------------------|-------------------------------------------------|
//! | POST   | `/session`                             | `{"observer"?}` -> `{session_id, trial_count}`  |
//! | GET    | `/session/{id}/trial/{k}`              | both images as base64 PNG, labeled left/right   |
//! | GET    | `/session/{id}/trial/{k}/image/{side}` | `image/png`                                     |
//! | POST   | `/session/{id}/trial/{k}/response`     | `{"choice": "left" or "right"}`                 |
//! | GET    | `/session/{id}/report`                 | accuracy and per-trial correctness              |
//!
//! Nothing about which side holds the original is sent before the report, which becomes
//! available once every trial of the session is answered. Images are decoded and re-encoded so
//! file metadata never reaches the observer.
//!
//! Every session and response is appended to a JSON-lines log; reports are computed from the
//! log alone.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use cxinpaint_core::{Error, Rng};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct Pair {
    pub original: PathBuf,
    pub reconstructed: PathBuf,
}

/// Reads a CSV with `original,reconstructed` columns; relative paths resolve against the
/// manifest's directory.
pub fn read_pairs(path: &Path) -> CliResult<Vec<Pair>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr =
        csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut pairs = Vec::new();
    for row in rdr.deserialize::<Pair>() {
        let p = row.map_err(|e| Error::Manifest(format!("pairs manifest: {e}")))?;
        pairs.push(Pair { original: base.join(p.original), reconstructed: base.join(p.reconstructed) });
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shown {
    Original,
    Reconstructed,
}

/// One line of the response log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    Session { session: String, trial_count: usize, observer: Option<String>, timestamp: String },
    Response { session: String, trial: usize, shown_left: Shown, choice: Side, correct: bool, timestamp: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub choice: Side,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub session_id: String,
    pub trial_count: usize,
    pub answered: usize,
    pub correct: usize,
    /// `correct / answered`; absent when nothing was answered.
    pub accuracy: Option<f64>,
    pub trials: Vec<TrialOutcome>,
}

/// Builds a session's report from log records.
pub fn report_from_log(records: &[LogRecord], session_id: &str) -> Option<StudyReport> {
    let trial_count = records.iter().find_map(|r| match r {
        LogRecord::Session { session, trial_count, .. } if session == session_id => Some(*trial_count),
        _ => None,
    })?;
    let mut trials: Vec<TrialOutcome> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Response { session, trial, choice, correct, .. } if session == session_id => {
                Some(TrialOutcome { trial: *trial, choice: *choice, correct: *correct })
            }
            _ => None,
        })
        .collect();
    trials.sort_by_key(|t| t.trial);
    trials.dedup_by_key(|t| t.trial);
    let answered = trials.len();
    let correct = trials.iter().filter(|t| t.correct).count();
    let accuracy = (answered > 0).then(|| correct as f64 / answered as f64);
    Some(StudyReport { session_id: session_id.to_string(), trial_count, answered, correct, accuracy, trials })
}

pub fn read_log(path: &Path) -> CliResult<Vec<LogRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest(format!("log line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub pairs: Vec<Pair>,
    pub results_path: PathBuf,
    pub seed: u64,
    /// Trials per session; all pairs when unset.
    pub trials_per_session: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Trial {
    pair: usize,
    original_left: bool,
}

#[derive(Debug)]
struct Session {
    trials: Vec<Trial>,
    answered: Vec<bool>,
}

struct Inner {
    rng: Rng,
    sessions: HashMap<String, Session>,
    /// Session ids already present in the log from earlier runs.
    logged: HashSet<String>,
    log: File,
}

pub struct Study {
    config: StudyConfig,
    inner: Mutex<Inner>,
}

/// Placement bits with the two sides differing by at most one, in shuffled order.
pub fn balanced_placements(n: usize, rng: &mut Rng) -> Vec<bool> {
    let extra = n % 2 == 1 && rng.next_u64() & 1 == 1;
    let left = n / 2 + usize::from(extra);
    let mut bits: Vec<bool> = (0..n).map(|i| i < left).collect();
    rng.shuffle(&mut bits);
    bits
}

impl Study {
    pub fn new(config: StudyConfig) -> CliResult<Self> {
        if let Some(dir) = config.results_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let logged = read_log(&config.results_path)?
            .into_iter()
            .filter_map(|r| match r {
                LogRecord::Session { session, .. } => Some(session),
                LogRecord::Response { .. } => None,
            })
            .collect();
        let log = OpenOptions::new().create(true).append(true).open(&config.results_path)?;
        let rng = Rng::new(config.seed);
        Ok(Self { config, inner: Mutex::new(Inner { rng, sessions: HashMap::new(), logged, log }) })
    }

    pub fn trial_count(&self) -> usize {
        let n = self.config.pairs.len();
        self.config.trials_per_session.map_or(n, |t| t.min(n))
    }
}

fn append(log: &mut File, record: &LogRecord) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(record).expect("log record serializes");
    line.push(b'\n');
    log.write_all(&line)?;
    log.sync_data()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(study: Arc<Study>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/trial/{k}", get(get_trial))
        .route("/session/{id}/trial/{k}/image/{side}", get(get_image))
        .route("/session/{id}/trial/{k}/response", post(post_response))
        .route("/session/{id}/report", get(get_report))
        .layer(CorsLayer::permissive())
        .with_state(study)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    observer: Option<String>,
}

async fn create_session(State(study): State<Arc<Study>>, body: Bytes) -> Response {
    let req: NewSession = if body.iter().all(u8::is_ascii_whitespace) {
        NewSession::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
        }
    };
    let n = study.trial_count();
    let mut inner = study.inner.lock().expect("study state lock");
    let inner = &mut *inner;
    let mut rng = inner.rng.fork();
    let id = loop {
        let id = format!("{:016x}", rng.next_u64());
        if !inner.sessions.contains_key(&id) && !inner.logged.contains(&id) {
            break id;
        }
    };
    let mut order: Vec<usize> = (0..study.config.pairs.len()).collect();
    rng.shuffle(&mut order);
    let placements = balanced_placements(n, &mut rng);
    let trials = order.into_iter().zip(placements).map(|(pair, original_left)| Trial { pair, original_left }).collect();
    let record = LogRecord::Session { session: id.clone(), trial_count: n, observer: req.observer, timestamp: now() };
    if let Err(e) = append(&mut inner.log, &record) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot write log: {e}"));
    }
    inner.sessions.insert(id.clone(), Session { trials, answered: vec![false; n] });
    (StatusCode::CREATED, Json(json!({ "session_id": id, "trial_count": n }))).into_response()
}

/// Looks up a trial, returning its image paths in left/right order and whether it is answered.
fn locate(study: &Study, id: &str, k: usize) -> Result<(Trial, bool), Response> {
    let inner = study.inner.lock().expect("study state lock");
    let session = inner.sessions.get(id).ok_or_else(|| error(StatusCode::NOT_FOUND, "unknown session"))?;
    let trial = *session.trials.get(k).ok_or_else(|| error(StatusCode::NOT_FOUND, "unknown trial"))?;
    Ok((trial, session.answered[k]))
}

fn side_path(study: &Study, trial: Trial, side: Side) -> &Path {
    let pair = &study.config.pairs[trial.pair];
    match (side == Side::Left) == trial.original_left {
        true => &pair.original,
        false => &pair.reconstructed,
    }
}

/// Decodes and re-encodes an image so only pixel data is served.
fn clean_png(path: &Path) -> Result<Vec<u8>, Response> {
    let fail = |e: String| error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot read trial image: {e}"));
    let img = image::open(path).map_err(|e| fail(e.to_string()))?.into_luma8();
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| fail(e.to_string()))?;
    Ok(out.into_inner())
}

async fn get_trial(State(study): State<Arc<Study>>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Response {
    let (trial, answered) = match locate(&study, &id, k) {
        Ok(t) => t,
        Err(r) => return r,
    };
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut sides = Vec::new();
    for side in [Side::Left, Side::Right] {
        match clean_png(side_path(&study, trial, side)) {
            Ok(png) => sides.push(b64.encode(png)),
            Err(r) => return r,
        }
    }
    let name = |s: &str| format!("/session/{id}/trial/{k}/image/{s}");
    Json(json!({
        "trial": k,
        "trial_count": study.trial_count(),
        "answered": answered,
        "left": { "png_base64": sides[0], "url": name("left") },
        "right": { "png_base64": sides[1], "url": name("right") },
    }))
    .into_response()
}

async fn get_image(
    State(study): State<Arc<Study>>,
    UrlPath((id, k, side)): UrlPath<(String, usize, String)>,
) -> Response {
    let side = match side.as_str() {
        "left" => Side::Left,
        "right" => Side::Right,
        _ => return error(StatusCode::NOT_FOUND, "unknown side"),
    };
    let trial = match locate(&study, &id, k) {
        Ok((t, _)) => t,
        Err(r) => return r,
    };
    match clean_png(side_path(&study, trial, side)) {
        Ok(png) => ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png).into_response(),
        Err(r) => r,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Choice {
    choice: Side,
}

async fn post_response(
    State(study): State<Arc<Study>>,
    UrlPath((id, k)): UrlPath<(String, usize)>,
    body: Bytes,
) -> Response {
    let choice = match serde_json::from_slice::<Choice>(&body) {
        Ok(c) => c.choice,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let mut inner = study.inner.lock().expect("study state lock");
    let inner = &mut *inner;
    let Some(session) = inner.sessions.get_mut(&id) else {
        return error(StatusCode::NOT_FOUND, "unknown session");
    };
    let Some(&trial) = session.trials.get(k) else {
        return error(StatusCode::NOT_FOUND, "unknown trial");
    };
    if session.answered[k] {
        return error(StatusCode::CONFLICT, format!("trial {k} already answered"));
    }
    let shown_left = if trial.original_left { Shown::Original } else { Shown::Reconstructed };
    let correct = (choice == Side::Left) == trial.original_left;
    let record = LogRecord::Response { session: id.clone(), trial: k, shown_left, choice, correct, timestamp: now() };
    if let Err(e) = append(&mut inner.log, &record) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot write log: {e}"));
    }
    session.answered[k] = true;
    let answered = session.answered.iter().filter(|a| **a).count();
    Json(json!({ "trial": k, "recorded": true, "answered": answered, "trial_count": session.trials.len() }))
        .into_response()
}

/// Reports on a finished session, including sessions from earlier runs sharing the log.
async fn get_report(State(study): State<Arc<Study>>, UrlPath(id): UrlPath<String>) -> Response {
    let records = {
        // hold the lock so no response is appended between the check and the read
        let _inner = study.inner.lock().expect("study state lock");
        match read_log(&study.config.results_path) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    };
    match report_from_log(&records, &id) {
        None => error(StatusCode::NOT_FOUND, "unknown session"),
        Some(r) if r.answered < r.trial_count => error(
            StatusCode::CONFLICT,
            format!("session incomplete: {} of {} trials answered", r.answered, r.trial_count),
        ),
        Some(report) => Json(report).into_response(),
    }
}

/// Serves the study until the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, study: Arc<Study>) -> std::io::Result<()> {
    axum::serve(listener, router(study))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placements_are_balanced() {
        let mut rng = Rng::new(5);
        for n in 0..40 {
            let bits = balanced_placements(n, &mut rng);
            let left = bits.iter().filter(|b| **b).count() as i64;
            assert_eq!(bits.len(), n);
            assert!((2 * left - n as i64).abs() <= 1);
        }
    }

    #[test]
    fn report_arithmetic() {
        let mut log =
            vec![LogRecord::Session { session: "s".into(), trial_count: 10, observer: None, timestamp: now() }];
        for k in 0..10 {
            log.push(LogRecord::Response {
                session: "s".into(),
                trial: k,
                shown_left: Shown::Original,
                choice: if k < 6 { Side::Left } else { Side::Right },
                correct: k < 6,
                timestamp: now(),
            });
        }
        let r = report_from_log(&log, "s").unwrap();
        assert_eq!((r.answered, r.correct, r.accuracy), (10, 6, Some(0.6)));
        assert!(report_from_log(&log, "other").is_none());
    }
}
