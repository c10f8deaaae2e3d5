//! Request handlers.

use std::collections::{BTreeMap, VecDeque};
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{FromRequest, FromRequestParts, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::Next;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use futures::Stream;
use loom_core::branching::{adaptive_expand, fixed_interval_expand, generate_siblings, FixedInterval};
use loom_core::persistence;
use loom_core::tools::ToolError;
use loom_core::{BranchPolicy, Flag, GenerationParams, Mutation, NodeId, Scope, SearchScope, StoreError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::error::{ApiError, ApiResult};
use crate::events::{Event, Replay};
use crate::state::{AppState, JobSink, OpenDoc};

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct Body<T>(pub T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
pub struct P<T>(pub T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub struct Q<T>(pub T);

type St = State<Arc<AppState>>;

fn conflict_with_delta(doc: &OpenDoc, e: StoreError) -> ApiError {
    let nodes = match &e {
        StoreError::Conflict { nodes, .. } => nodes.clone(),
        StoreError::Document(_) => return e.into(),
    };
    let (snap, seq) = doc.store.versioned();
    let delta: BTreeMap<String, Value> =
        nodes.iter().map(|n| (n.to_string(), snap.node(*n).map_or(Value::Null, |node| json!(node)))).collect();
    let mut err: ApiError = e.into();
    err.body.details["delta"] = json!({ "seq": seq, "nodes": delta });
    err
}

fn apply(doc: &OpenDoc, mutation: Mutation, base_seq: Option<u64>) -> ApiResult<Json<Value>> {
    let c = doc.apply(mutation, base_seq, None).map_err(|e| conflict_with_delta(doc, e))?;
    Ok(Json(json!({ "seq": c.seq, "outcome": c.value, "touched": c.touched })))
}

pub async fn require_token(State(s): St, req: Request, next: Next) -> Response {
    if let Some(token) = &s.config.token {
        let bearer = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        // EventSource cannot send headers, so the stream also takes ?token=
        let query = req.uri().query().into_iter().flat_map(|q| q.split('&')).find_map(|kv| kv.strip_prefix("token="));
        if bearer != Some(token) && query != Some(token) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong token").into_response();
        }
    }
    next.run(req).await
}

// ---- documents

pub async fn list_docs(State(s): St) -> Json<Value> {
    let docs: Vec<Value> = s
        .docs()
        .iter()
        .map(|d| {
            let (doc, seq) = d.store.versioned();
            json!({ "id": d.id, "path": d.path, "seq": seq, "nodes": doc.len(), "dirty": doc.is_dirty() })
        })
        .collect();
    Json(json!(docs))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenRequest {
    id: Option<String>,
    prompt: Option<String>,
    path: Option<PathBuf>,
}

pub async fn open_doc(State(s): St, Body(req): Body<OpenRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    let (doc, created) = match (req.path, req.id) {
        (Some(path), None) if req.prompt.is_none() => {
            let path = if path.is_relative() { s.config.doc_dir.join(path) } else { path };
            (s.open_file(&path)?, false)
        }
        (None, Some(id)) => s.open_or_create(&id, req.prompt)?,
        _ => return Err(ApiError::bad_request("give either {id, prompt?} or {path}")),
    };
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(json!({ "id": doc.id, "seq": doc.store.seq(), "created": created }))))
}

pub async fn get_doc(State(s): St, P(id): P<String>) -> ApiResult<Json<Value>> {
    let doc = s.doc(&id)?;
    let (snap, seq) = doc.store.versioned();
    Ok(Json(json!({
        "id": id,
        "seq": seq,
        "dirty": snap.is_dirty(),
        "path": doc.path,
        "document": persistence::to_value(&snap),
    })))
}

pub async fn save_doc(State(s): St, P(id): P<String>) -> ApiResult<Json<Value>> {
    let doc = s.doc(&id)?;
    let d = doc.clone();
    let seq = tokio::task::spawn_blocking(move || d.save())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(json!({ "seq": seq, "path": doc.path })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    #[serde(default)]
    base_seq: Option<u64>,
    mutation: Mutation,
}

pub async fn post_mutation(State(s): St, P(id): P<String>, Body(env): Body<Envelope>) -> ApiResult<Json<Value>> {
    apply(&*s.doc(&id)?, env.mutation, env.base_seq)
}

// ---- nodes

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateNode {
    parent: NodeId,
    text: String,
    #[serde(default)]
    base_seq: Option<u64>,
}

pub async fn create_node(
    State(s): St,
    P(id): P<String>,
    Body(b): Body<CreateNode>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let out =
        apply(&*s.doc(&id)?, Mutation::CreateChild { parent: b.parent, text: b.text, gen_meta: None }, b.base_seq)?;
    Ok((StatusCode::CREATED, out))
}

pub async fn get_node(State(s): St, P((id, nid)): P<(String, NodeId)>) -> ApiResult<Json<Value>> {
    let (snap, seq) = s.doc(&id)?.store.versioned();
    let node = snap.node(nid)?;
    Ok(Json(json!({ "seq": seq, "node": node, "depth": snap.depth(nid)? })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchNode {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    flags: BTreeMap<Flag, bool>,
    #[serde(default)]
    base_seq: Option<u64>,
}

/// Text first, then flags, each as its own mutation.
pub async fn patch_node(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Body(b): Body<PatchNode>,
) -> ApiResult<Json<Value>> {
    let doc = s.doc(&id)?;
    let mut mutations: Vec<Mutation> = Vec::new();
    if let Some(text) = b.text {
        mutations.push(Mutation::SetText { node: nid, text });
    }
    mutations.extend(b.flags.into_iter().map(|(flag, on)| Mutation::SetFlag { node: nid, flag, on }));
    if mutations.is_empty() {
        return Err(ApiError::bad_request("nothing to change: give text and/or flags"));
    }
    let mut results = Vec::new();
    for m in mutations {
        match apply(&doc, m, b.base_seq) {
            Ok(Json(v)) => results.push(v),
            Err(mut e) if !results.is_empty() => {
                e.body.details["applied"] = json!(results);
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    let seq = results.last().map(|r| r["seq"].clone()).unwrap_or_default();
    Ok(Json(json!({ "seq": seq, "applied": results })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BaseOnly {
    #[serde(default)]
    base_seq: Option<u64>,
}

pub async fn delete_node(State(s): St, P((id, nid)): P<(String, NodeId)>, Q(q): Q<BaseOnly>) -> ApiResult<Json<Value>> {
    apply(&*s.doc(&id)?, Mutation::Delete { node: nid }, q.base_seq)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBody {
    offset: usize,
    #[serde(default)]
    base_seq: Option<u64>,
}

pub async fn split_node(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Body(b): Body<SplitBody>,
) -> ApiResult<Json<Value>> {
    apply(&*s.doc(&id)?, Mutation::Split { node: nid, offset: b.offset }, b.base_seq)
}

pub async fn merge_node(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Body(b): Body<BaseOnly>,
) -> ApiResult<Json<Value>> {
    apply(&*s.doc(&id)?, Mutation::Merge { node: nid }, b.base_seq)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReparentBody {
    #[serde(default)]
    add: Vec<NodeId>,
    #[serde(default)]
    remove: Vec<NodeId>,
    #[serde(default)]
    active: Option<NodeId>,
    #[serde(default)]
    base_seq: Option<u64>,
}

pub async fn reparent_node(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Body(b): Body<ReparentBody>,
) -> ApiResult<Json<Value>> {
    let m = Mutation::Reparent { node: nid, add: b.add, remove: b.remove, active: b.active };
    apply(&*s.doc(&id)?, m, b.base_seq)
}

pub async fn read_node(State(s): St, P((id, nid)): P<(String, NodeId)>) -> ApiResult<Response> {
    let (snap, seq) = s.doc(&id)?.store.versioned();
    let text = snap.read_view(nid)?;
    let mut resp = text.into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8"));
    resp.headers_mut().insert("x-loom-seq", HeaderValue::from(seq));
    Ok(resp)
}

#[derive(Deserialize)]
pub struct ContextQuery {
    budget: Option<usize>,
    memory_k: Option<usize>,
}

pub async fn node_context(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Q(q): Q<ContextQuery>,
) -> ApiResult<Json<Value>> {
    let doc = s.doc(&id)?;
    let model = s.model_for(&doc)?;
    let snap = doc.store.snapshot();
    let settings = snap.settings();
    let bundle = snap.build_context(
        nid,
        q.budget.unwrap_or(settings.context_budget_tokens),
        q.memory_k.unwrap_or(settings.memory_k),
        &*model,
    )?;
    Ok(Json(json!({ "rendered": bundle.render(), "bundle": bundle })))
}

// ---- generation jobs

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    #[serde(default = "one")]
    n: usize,
    #[serde(default)]
    params: GenerationParams,
}

fn one() -> usize {
    1
}

pub async fn generate(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Body(b): Body<GenerateBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let doc = s.doc(&id)?;
    if b.n == 0 {
        return Err(ApiError::bad_request("n must be >= 1"));
    }
    b.params.validate()?;
    let model = s.model_for(&doc)?;
    let context = doc.store.snapshot().default_context(nid, &*model)?.render();
    let status = s.spawn_job(doc, "generate", nid, move |d, job, cancel| {
        generate_siblings(&*model, &context, nid, b.n, &b.params, &mut JobSink { doc: d, job, cancel })
    });
    Ok((StatusCode::ACCEPTED, Json(json!(status))))
}

#[derive(Deserialize)]
pub struct ExpandBody {
    #[serde(flatten)]
    policy: BranchPolicy,
    /// Run the fixed-interval baseline instead of adaptive branching.
    #[serde(default)]
    fixed: Option<FixedInterval>,
}

pub async fn expand(
    State(s): St,
    P((id, nid)): P<(String, NodeId)>,
    Body(b): Body<ExpandBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let doc = s.doc(&id)?;
    let model = s.model_for(&doc)?;
    let context = doc.store.snapshot().default_context(nid, &*model)?.render();
    let status = match b.fixed {
        Some(shape) => {
            shape.validate()?;
            b.policy.params.validate()?;
            let params = b.policy.params;
            s.spawn_job(doc, "fixed", nid, move |d, job, cancel| {
                fixed_interval_expand(&*model, &context, nid, shape, &params, &mut JobSink { doc: d, job, cancel })
            })
        }
        None => {
            b.policy.validate()?;
            let policy = b.policy;
            s.spawn_job(doc, "expand", nid, move |d, job, cancel| {
                adaptive_expand(&*model, &context, nid, &policy, &mut JobSink { doc: d, job, cancel })
            })
        }
    };
    Ok((StatusCode::ACCEPTED, Json(json!(status))))
}

pub async fn list_jobs(State(s): St, P(id): P<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.doc(&id)?.jobs())))
}

pub async fn get_job(State(s): St, P((id, job)): P<(String, String)>) -> ApiResult<Json<Value>> {
    let status = s.doc(&id)?.job(&job).ok_or_else(|| ApiError::not_found(format!("no job {job:?}")))?;
    Ok(Json(json!(status)))
}

pub async fn cancel_job(State(s): St, P((id, job)): P<(String, String)>) -> ApiResult<(StatusCode, Json<Value>)> {
    let status = s.doc(&id)?.cancel_job(&job).ok_or_else(|| ApiError::not_found(format!("no job {job:?}")))?;
    Ok((StatusCode::ACCEPTED, Json(json!(status))))
}

// ---- navigation

#[derive(Deserialize)]
pub struct SearchQuery {
    q: String,
    #[serde(default)]
    scope: Option<String>,
    #[serde(default)]
    case: bool,
}

pub async fn search(State(s): St, P(id): P<String>, Q(q): Q<SearchQuery>) -> ApiResult<Json<Value>> {
    let (snap, seq) = s.doc(&id)?.store.versioned();
    let scope: SearchScope = match q.scope.as_deref() {
        None => SearchScope::All,
        Some(text) => text.parse().map_err(|e: String| ApiError::bad_request(e))?,
    };
    let matches = snap.search(&q.q, scope, q.case)?;
    Ok(Json(json!({ "seq": seq, "matches": matches })))
}

#[derive(Deserialize)]
pub struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    node: Option<NodeId>,
    #[serde(default)]
    chapters: bool,
}

pub async fn export(State(s): St, P(id): P<String>, Q(q): Q<ExportQuery>) -> ApiResult<Response> {
    let (snap, seq) = s.doc(&id)?.store.versioned();
    let (body, ctype) = match q.format.as_deref().unwrap_or("text") {
        "json" => (persistence::to_canonical_string(&snap), "application/json"),
        "text" => (snap.export_linear(q.node.unwrap_or(snap.root()), q.chapters)?, "text/plain; charset=utf-8"),
        other => return Err(ApiError::bad_request(format!("unknown export format {other:?}"))),
    };
    let mut resp = body.into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(ctype));
    resp.headers_mut().insert("x-loom-seq", HeaderValue::from(seq));
    Ok(resp)
}

// ---- memory and tools

pub async fn list_memory(State(s): St, P(id): P<String>) -> ApiResult<Json<Value>> {
    let snap = s.doc(&id)?.store.snapshot();
    Ok(Json(json!(snap.memory_entries())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryBody {
    text: String,
    #[serde(default)]
    keys: Option<Vec<String>>,
    #[serde(default)]
    scope: Scope,
    #[serde(default)]
    base_seq: Option<u64>,
}

pub async fn save_memory(
    State(s): St,
    P(id): P<String>,
    Body(b): Body<MemoryBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let out = apply(&*s.doc(&id)?, Mutation::SaveMemory { text: b.text, keys: b.keys, scope: b.scope }, b.base_seq)?;
    Ok((StatusCode::CREATED, out))
}

pub async fn list_tools(State(s): St, P(id): P<String>) -> ApiResult<Json<Value>> {
    let snap = s.doc(&id)?.store.snapshot();
    Ok(Json(json!(snap.templates())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolBody {
    node: NodeId,
    #[serde(default)]
    vars: BTreeMap<String, String>,
}

pub async fn run_tool(
    State(s): St,
    P((id, name)): P<(String, String)>,
    Body(b): Body<ToolBody>,
) -> ApiResult<Json<Value>> {
    let doc = s.doc(&id)?;
    let model = s.model_for(&doc)?;
    let snap = doc.store.snapshot();
    let (prepared, text) = tokio::task::spawn_blocking(move || {
        let prepared = snap.prepare_tool(&name, b.node, &b.vars, &*model)?;
        let text = prepared.execute(&*model)?;
        Ok::<_, ToolError>((prepared, text))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let provider = s.model_for(&doc)?.name();
    let mut result = json!({
        "prompt": prepared.prompt,
        "text": text,
        "output": prepared.template.output,
    });
    if let Some(m) = prepared.effect(&text, &provider) {
        let Json(applied) = apply(&doc, m, None)?;
        result["created"] = applied["outcome"]["created"].clone();
        result["seq"] = applied["seq"].clone();
    }
    Ok(Json(result))
}

// ---- events

#[derive(Deserialize)]
pub struct EventsQuery {
    since: Option<u64>,
}

fn to_sse(e: &Event) -> SseEvent {
    SseEvent::default()
        .id(e.id.to_string())
        .event(e.body.kind())
        .data(serde_json::to_string(e).expect("events serialize"))
}

struct Feed {
    backlog: VecDeque<Event>,
    rx: tokio::sync::broadcast::Receiver<Event>,
    last: u64,
    shutdown: tokio::sync::watch::Receiver<bool>,
}

/// Server-sent events after `since` (or the `Last-Event-ID` header), then
/// live events until the client disconnects or the server stops.
pub async fn events(
    State(s): St,
    P(id): P<String>,
    Q(q): Q<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let doc = s.doc(&id)?;
    let header_since = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse().ok());
    let since = q.since.or(header_since).unwrap_or(0);
    let (backlog, rx) = match doc.events.subscribe(since) {
        Replay::Events(backlog, rx) => (backlog, rx),
        Replay::Expired { oldest } => {
            return Err(ApiError::new(StatusCode::GONE, "events_expired", format!("oldest retained event is {oldest}"))
                .with_details(json!({ "oldest": oldest })))
        }
    };
    let feed = Feed { backlog: backlog.into(), rx, last: since, shutdown: s.shutdown_signal() };
    let stream = futures::stream::unfold(feed, |mut f| async move {
        if let Some(e) = f.backlog.pop_front() {
            f.last = e.id;
            return Some((Ok(to_sse(&e)), f));
        }
        loop {
            if *f.shutdown.borrow() {
                return None;
            }
            tokio::select! {
                r = f.rx.recv() => match r {
                    Ok(e) if e.id <= f.last => continue,
                    Ok(e) => {
                        f.last = e.id;
                        return Some((Ok(to_sse(&e)), f));
                    }
                    // a slow client is dropped and resumes with Last-Event-ID
                    Err(RecvError::Lagged(_)) | Err(RecvError::Closed) => return None,
                },
                _ = f.shutdown.changed() => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
