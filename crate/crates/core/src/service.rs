//! HTTP backend for annotation sessions.
//!
//! [`Service::handle`] maps a request to a response without touching the
//! network; [`serve`] and [`spawn`] put it behind a tiny_http listener.
//! Each session has one writer at a time. Readers take the latest
//! published snapshot, so they never wait for a running phase step.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::corpus::RationaleSpan;
use crate::correction::{DocReview, MissingRationale, RationaleVerdict, Verdict, VerdictSource};
use crate::error::{Error, Result};
use crate::session::{LoopConfig, Mode, Phase, Session, STATE_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    /// JSON body; empty for 204.
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, value: &Value) -> Self {
        Response {
            status,
            body: serde_json::to_vec(value).expect("json value serializes"),
        }
    }

    fn empty(status: u16) -> Self {
        Response {
            status,
            body: Vec::new(),
        }
    }

    fn error(status: u16, message: impl std::fmt::Display) -> Self {
        Response::json(status, &json!({ "error": message.to_string() }))
    }

    pub fn json_body(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

struct Slot {
    snapshot: RwLock<Arc<Session>>,
    writer: Mutex<()>,
    busy: AtomicBool,
    last_error: Mutex<Option<String>>,
}

impl Slot {
    fn new(session: Session) -> Self {
        Slot {
            snapshot: RwLock::new(Arc::new(session)),
            writer: Mutex::new(()),
            busy: AtomicBool::new(false),
            last_error: Mutex::new(None),
        }
    }

    fn current(&self) -> Arc<Session> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, session: Session) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(session);
    }
}

pub struct Service {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    config: LoopConfig,
    #[serde(default = "human")]
    mode: Mode,
}

fn human() -> Mode {
    Mode::Human
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkBody {
    spans: Vec<RationaleSpan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictItem {
    span: RationaleSpan,
    verdict: Verdict,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    #[serde(default)]
    verdicts: Vec<VerdictItem>,
    #[serde(default)]
    missing: Vec<RationaleSpan>,
}

fn status_for(e: &Error) -> u16 {
    match e {
        Error::NotFound(_) => 404,
        Error::Pending(_) | Error::Phase { .. } => 409,
        Error::InvalidSpan { .. } | Error::Validation(_) => 422,
        Error::Parse { .. } | Error::Json(_) => 400,
        _ => 500,
    }
}

fn error_response(e: &Error) -> Response {
    let mut body = json!({ "error": e.to_string() });
    match e {
        Error::InvalidSpan { span, reason, .. } => {
            body["span"] = json!(span);
            body["reason"] = json!(reason);
        }
        Error::Pending(ids) => body["pending"] = json!(ids),
        _ => {}
    }
    Response::json(status_for(e), &body)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> std::result::Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| Response::error(400, format!("invalid request body: {e}")))
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

impl Service {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Service {
            root,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>> {
        let mut sessions = self.sessions.lock().expect("session table lock");
        if let Some(slot) = sessions.get(id) {
            return Ok(slot.clone());
        }
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let dir = self.root.join(id);
        if !valid || !dir.join(STATE_FILE).exists() {
            return Err(Error::NotFound(format!("session {id}")));
        }
        let slot = Arc::new(Slot::new(Session::open(dir)?));
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    fn create(&self, body: &[u8]) -> Response {
        let value: Value = match parse_body(body) {
            Ok(v) => v,
            Err(r) => return r,
        };
        let wrapped = value.get("config").is_some();
        let parsed = if wrapped {
            serde_json::from_value::<CreateBody>(value)
        } else {
            serde_json::from_value::<LoopConfig>(value).map(|config| CreateBody {
                config,
                mode: Mode::Human,
            })
        };
        let CreateBody { mut config, mode } = match parsed {
            Ok(b) => b,
            Err(e) => return Response::json(400, &json!({ "error": "invalid config", "fields": [e.to_string()] })),
        };
        config.resolve_paths(&self.root);
        let errors = config.field_errors();
        if !errors.is_empty() {
            return Response::json(400, &json!({ "error": "invalid config", "fields": errors }));
        }
        let hash = config.hash();
        let mut sessions = self.sessions.lock().expect("session table lock");
        let mut n = sessions.len() + 1;
        let id = loop {
            let id = format!("s{n:04}-{}", &hash[..8]);
            if !sessions.contains_key(&id) && !self.root.join(&id).exists() {
                break id;
            }
            n += 1;
        };
        match Session::create(self.root.join(&id), &id, config, mode) {
            Ok(session) => {
                let phase = session.phase();
                sessions.insert(id.clone(), Arc::new(Slot::new(session)));
                Response::json(201, &json!({ "session_id": id, "phase": phase }))
            }
            Err(e @ (Error::Validation(_) | Error::Parse { .. })) => {
                Response::json(400, &json!({ "error": "invalid config", "fields": [e.to_string()] }))
            }
            Err(e) => error_response(&e),
        }
    }

    fn describe(&self, slot: &Slot) -> Value {
        let session = slot.current();
        json!({
            "state": session.state(),
            "busy": slot.busy.load(Ordering::SeqCst),
            "pending": session.pending(),
            "last_error": *slot.last_error.lock().expect("error lock"),
        })
    }

    fn next_task(&self, slot: &Slot) -> Response {
        if slot.busy.load(Ordering::SeqCst) {
            return Response::error(409, "training in progress");
        }
        let session = slot.current();
        match session.next_task() {
            Ok(Some(task)) => Response::json(200, &json!(task)),
            Ok(None) => Response::json(
                409,
                &json!({
                    "error": if session.phase() == Phase::Final { "session is final" } else { "phase advance required" },
                    "phase": session.phase(),
                    "pending": [],
                }),
            ),
            Err(e) => error_response(&e),
        }
    }

    /// Apply a mutation to a copy of the current snapshot and publish it.
    fn mutate(&self, slot: &Slot, f: impl FnOnce(&mut Session) -> Result<()>) -> Response {
        let _guard = slot.writer.lock().expect("writer lock");
        if slot.busy.load(Ordering::SeqCst) {
            return Response::error(409, "training in progress");
        }
        let mut session = (*slot.current()).clone();
        match f(&mut session) {
            Ok(()) => {
                slot.publish(session);
                Response::empty(204)
            }
            Err(e) => error_response(&e),
        }
    }

    fn advance(&self, slot: &Arc<Slot>) -> Response {
        let _guard = slot.writer.lock().expect("writer lock");
        if slot.busy.load(Ordering::SeqCst) {
            return Response::error(409, "training in progress");
        }
        let mut session = (*slot.current()).clone();
        if session.state().mode == Mode::Oracle {
            if let Err(e) = session.fill_from_oracle() {
                return error_response(&e);
            }
        }
        if session.phase() == Phase::Final {
            return Response::json(409, &json!({ "error": "session is final", "pending": [] }));
        }
        let pending = session.pending();
        if !pending.is_empty() {
            return error_response(&Error::Pending(pending));
        }
        slot.busy.store(true, Ordering::SeqCst);
        *slot.last_error.lock().expect("error lock") = None;
        let from = session.phase();
        let worker = slot.clone();
        thread::spawn(move || {
            let result = session.advance();
            let _guard = worker.writer.lock().expect("writer lock");
            match result {
                Ok(_) => worker.publish(session),
                Err(e) => *worker.last_error.lock().expect("error lock") = Some(e.to_string()),
            }
            worker.busy.store(false, Ordering::SeqCst);
        });
        Response::json(202, &json!({ "phase": from, "busy": true }))
    }

    fn mark(&self, slot: &Slot, doc_id: &str, body: &[u8]) -> Response {
        let body: MarkBody = match parse_body(body) {
            Ok(b) => b,
            Err(r) => return r,
        };
        self.mutate(slot, |s| s.mark(doc_id, &body.spans))
    }

    fn verdicts(&self, slot: &Slot, doc_id: &str, body: &[u8]) -> Response {
        let body: VerdictBody = match parse_body(body) {
            Ok(b) => b,
            Err(r) => return r,
        };
        let review = DocReview {
            verdicts: body
                .verdicts
                .into_iter()
                .map(|v| RationaleVerdict {
                    doc_id: doc_id.to_string(),
                    span: v.span,
                    verdict: v.verdict,
                    source: VerdictSource::Human,
                })
                .collect(),
            missing: body
                .missing
                .into_iter()
                .map(|span| MissingRationale {
                    doc_id: doc_id.to_string(),
                    span,
                })
                .collect(),
        };
        self.mutate(slot, |s| s.review(doc_id, review))
    }

    /// Route one request. `target` is the path with an optional query.
    pub fn handle(self: &Arc<Self>, method: &str, target: &str, body: &[u8]) -> Response {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        let parts: Vec<&str> = path.trim_matches('/').split('/').filter(|p| !p.is_empty()).collect();
        if method == "OPTIONS" {
            return Response::empty(204);
        }
        let with_slot = |id: &str, f: &dyn Fn(&Arc<Slot>) -> Response| match self.slot(id) {
            Ok(slot) => f(&slot),
            Err(e) => error_response(&e),
        };
        match (method, parts.as_slice()) {
            ("GET", ["spec"]) => Response::json(200, &openapi()),
            ("GET", ["sessions"]) => {
                let mut ids: Vec<String> = std::fs::read_dir(&self.root)
                    .map(|rd| {
                        rd.filter_map(|e| e.ok())
                            .filter(|e| e.path().join(STATE_FILE).exists())
                            .map(|e| e.file_name().to_string_lossy().into_owned())
                            .collect()
                    })
                    .unwrap_or_default();
                ids.sort();
                Response::json(200, &json!({ "sessions": ids }))
            }
            ("POST", ["sessions"]) => self.create(body),
            ("GET", ["sessions", id]) => with_slot(id, &|slot| Response::json(200, &self.describe(slot))),
            ("GET", ["sessions", id, "next-task"]) => with_slot(id, &|slot| self.next_task(slot)),
            ("GET", ["sessions", id, "metrics"]) => with_slot(id, &|slot| match slot.current().metrics() {
                Ok(report) => Response::json(200, &json!(report)),
                Err(e) => error_response(&e),
            }),
            ("POST", ["sessions", id, "advance"]) => with_slot(id, &|slot| self.advance(slot)),
            ("POST", ["sessions", sid, "documents", doc, "rationales"]) => {
                with_slot(sid, &|slot| self.mark(slot, doc, body))
            }
            ("POST", ["sessions", sid, "documents", doc, "verdicts"]) => {
                with_slot(sid, &|slot| self.verdicts(slot, doc, body))
            }
            ("POST", ["documents", doc, action @ ("rationales" | "verdicts")]) => match query_param(query, "session") {
                None => Response::error(400, "missing ?session= parameter"),
                Some(sid) => with_slot(sid, &|slot| {
                    if *action == "rationales" {
                        self.mark(slot, doc, body)
                    } else {
                        self.verdicts(slot, doc, body)
                    }
                }),
            },
            _ => Response::error(404, format!("no route for {method} {path}")),
        }
    }
}

/// OpenAPI description of the service.
pub fn openapi() -> Value {
    let span = json!({ "type": "array", "items": { "type": "integer" }, "minItems": 2, "maxItems": 2 });
    let session_param = json!({ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } });
    let doc_params = json!([
        { "name": "id", "in": "path", "required": true, "schema": { "type": "string" } },
        { "name": "session", "in": "query", "required": true, "schema": { "type": "string" } }
    ]);
    json!({
        "openapi": "3.0.3",
        "info": { "title": "rationale annotation service", "version": env!("CARGO_PKG_VERSION") },
        "components": { "schemas": { "Span": span } },
        "paths": {
            "/sessions": {
                "get": { "summary": "List sessions", "responses": { "200": { "description": "session ids" } } },
                "post": {
                    "summary": "Create a session from a loop config",
                    "requestBody": { "content": { "application/json": { "schema": {
                        "type": "object",
                        "properties": { "config": { "type": "object" }, "mode": { "enum": ["oracle", "human"] } }
                    } } } },
                    "responses": { "201": { "description": "created" }, "400": { "description": "invalid config with field errors" } }
                }
            },
            "/sessions/{id}": {
                "get": { "parameters": [session_param.clone()], "summary": "Session state, pending work and busy flag",
                         "responses": { "200": { "description": "state" }, "404": { "description": "unknown session" } } }
            },
            "/sessions/{id}/next-task": {
                "get": { "parameters": [session_param.clone()], "summary": "Next mark or review task",
                         "responses": { "200": { "description": "task" }, "404": { "description": "unknown session" },
                                        "409": { "description": "training in progress or phase advance required" } } }
            },
            "/sessions/{id}/advance": {
                "post": { "parameters": [session_param.clone()], "summary": "Start the step closing the current phase",
                          "responses": { "202": { "description": "started" }, "409": { "description": "pending work list" } } }
            },
            "/sessions/{id}/metrics": {
                "get": { "parameters": [session_param], "summary": "Accuracy report",
                         "responses": { "200": { "description": "report" } } }
            },
            "/documents/{id}/rationales": {
                "post": {
                    "parameters": doc_params.clone(),
                    "summary": "Replace the rationale marks of a document",
                    "requestBody": { "content": { "application/json": { "schema": {
                        "type": "object", "properties": { "spans": { "type": "array", "items": { "$ref": "#/components/schemas/Span" } } }
                    } } } },
                    "responses": { "204": { "description": "stored" }, "422": { "description": "violating span echoed" } }
                }
            },
            "/documents/{id}/verdicts": {
                "post": {
                    "parameters": doc_params,
                    "summary": "Replace the review of a document's model rationales",
                    "requestBody": { "content": { "application/json": { "schema": {
                        "type": "object",
                        "properties": {
                            "verdicts": { "type": "array", "items": { "type": "object", "properties": {
                                "span": { "$ref": "#/components/schemas/Span" },
                                "verdict": { "enum": ["confirmed", "false"] }
                            } } },
                            "missing": { "type": "array", "items": { "$ref": "#/components/schemas/Span" } }
                        }
                    } } } },
                    "responses": { "204": { "description": "stored" }, "422": { "description": "span not surfaced or not gold" } }
                }
            },
            "/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI JSON" } } } }
        }
    })
}

fn respond(service: &Arc<Service>, mut request: tiny_http::Request) {
    let mut body = Vec::new();
    let response = match request.as_reader().read_to_end(&mut body) {
        Ok(_) => service.handle(request.method().as_str(), request.url(), &body),
        Err(e) => Response::error(400, e),
    };
    let header = |k: &str, v: &str| tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("static header");
    let mut out = tiny_http::Response::from_data(response.body).with_status_code(response.status);
    out.add_header(header("Content-Type", "application/json"));
    out.add_header(header("Access-Control-Allow-Origin", "*"));
    out.add_header(header("Access-Control-Allow-Methods", "GET, POST, OPTIONS"));
    out.add_header(header("Access-Control-Allow-Headers", "Content-Type"));
    // a client that hung up is not our problem
    let _ = request.respond(out);
}

/// A running listener; dropping it stops accepting requests.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    workers: Vec<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
    }
}

/// Bind `addr` and serve on `threads` workers in the background.
pub fn spawn(root: impl Into<PathBuf>, addr: &str, threads: usize) -> Result<ServerHandle> {
    let service = Arc::new(Service::new(root)?);
    let server = tiny_http::Server::http(addr)
        .map_err(|e| Error::io(PathBuf::from(addr), std::io::Error::other(e.to_string())))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Validation(format!("{addr} is not an IP address")))?;
    let server = Arc::new(server);
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = server.clone();
            let service = service.clone();
            thread::spawn(move || {
                for request in server.incoming_requests() {
                    respond(&service, request);
                }
            })
        })
        .collect();
    Ok(ServerHandle {
        addr: bound,
        server,
        workers,
    })
}

/// Serve until the process is stopped.
pub fn serve(root: impl Into<PathBuf>, addr: &str, threads: usize) -> Result<()> {
    spawn(root, addr, threads)?.join();
    Ok(())
}
