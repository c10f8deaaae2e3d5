//! One mutation script replayed through HTTP and through the library.

use loom_core::persistence;
use loom_core::provider::{ProviderConfig, TableModel, TableSpec};
use loom_core::{BranchPolicy, Document, Mutation, Scope};
use loom_service::ServiceConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::Server;

pub const SCRIPT_MUTATIONS: usize = 400;
const PROMPT: &str = "The keeper of the lighthouse ";

/// Both paths must end byte-equal and the event stream must carry every
/// committed mutation once, in sequence order.
pub fn check(seed: u64, random_mutation: impl Fn(&mut ChaCha8Rng, &Document) -> Mutation) -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ServiceConfig::new(dir.path());
    config.default_provider = Some(ProviderConfig::Table(TableSpec::m1()));
    config.autosave_every = None;
    let server = Server::start(config);
    let client = server.client();
    let r = client.post("/docs", &json!({ "id": "dual", "prompt": PROMPT }));
    if r.status != 201 {
        return Err(format!("create: {} {}", r.status, r.text));
    }

    let mut lib = Document::new(PROMPT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut committed: Vec<Mutation> = Vec::new();
    let mut rejected = 0;
    let mut script: Vec<Mutation> = vec![
        Mutation::CreateChapter { node: lib.root(), title: "Opening".into() },
        Mutation::SetBookmark { name: "start".into(), node: lib.root() },
        Mutation::AddNote { title: "tone".into(), body: "keep it quiet".into(), scope: Scope::Global },
        Mutation::SaveMemory { text: "The lighthouse keeper is named Mara".into(), keys: None, scope: Scope::Global },
    ];
    for i in 0..SCRIPT_MUTATIONS {
        let m = match script.pop() {
            Some(m) => m,
            None if i % 50 == 49 => Mutation::Tag { node: lib.root(), name: format!("t{i}") },
            None => random_mutation(&mut rng, &lib),
        };
        let lib_result = lib.apply(m.clone());
        let http = client.post("/doc/dual/mutations", &json!({ "mutation": m }));
        match (&lib_result, http.status) {
            (Ok(_), 200) => {
                let seq = http.json()["seq"].as_u64().unwrap_or(0) as usize;
                committed.push(m);
                if seq != committed.len() {
                    return Err(format!("sequence {seq} after {} commits", committed.len()));
                }
            }
            (Err(_), 404 | 409 | 422) => rejected += 1,
            (l, s) => return Err(format!("{m:?}: library {l:?}, http {s} {}", http.text)),
        }
    }

    // one generation job on each side
    let policy = BranchPolicy { total_node_budget: 12, ..BranchPolicy::default() };
    let target = lib.node_ids().last().expect("nodes");
    let report = lib.adaptive_expand(target, &policy, &TableModel::m1()).map_err(|e| e.to_string())?;
    let job = client.post(&format!("/doc/dual/node/{target}/expand"), &json!(policy));
    if job.status != 202 {
        return Err(format!("expand: {} {}", job.status, job.text));
    }
    let job_id = job.json()["id"].as_str().unwrap_or_default().to_owned();
    let status = client.wait_job("dual", &job_id);
    let http_created: Vec<Value> = status["report"]["created"].as_array().cloned().unwrap_or_default();
    if http_created.len() != report.created.len() {
        return Err(format!("job created {} nodes, library {}", http_created.len(), report.created.len()));
    }

    let exported = client.get("/doc/dual/export?format=json").text;
    let direct = persistence::to_canonical_string(&lib);
    if exported != direct {
        return Err("canonical serializations differ".into());
    }

    // the event stream, from the beginning
    let total = committed.len() + report.created.len();
    let events = client.events_until("/doc/dual/events?since=0", |evs| {
        evs.iter().filter(|e| e["type"] == "mutation").count() >= total
            && evs.iter().any(|e| e["type"] == "job_finished")
    });
    let mutations: Vec<&Value> = events.iter().filter(|e| e["type"] == "mutation").collect();
    for (i, e) in mutations.iter().enumerate() {
        if e["seq"].as_u64() != Some(i as u64 + 1) {
            return Err(format!("event {i} carries seq {}", e["seq"]));
        }
        if let Some(m) = committed.get(i) {
            let sent: Mutation = serde_json::from_value(e["mutation"].clone()).map_err(|e| e.to_string())?;
            if &sent != m {
                return Err(format!("event {i} carries {sent:?}, expected {m:?}"));
            }
        } else if e["job"] != json!(job_id) {
            return Err(format!("event {i} should come from {job_id}"));
        }
    }
    let ids: Vec<u64> = events.iter().filter_map(|e| e["id"].as_u64()).collect();
    if ids.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err("event ids are not consecutive".into());
    }
    let job_nodes: Vec<Value> = mutations[committed.len()..].iter().map(|e| e["outcome"]["created"].clone()).collect();
    if job_nodes != http_created {
        return Err("job events do not match the job report".into());
    }
    server.stop().map_err(|e| e.to_string())?;
    Ok(format!(
        "{} mutations ({rejected} rejected on both paths) and {} generated nodes: byte-equal, {} events in order",
        committed.len(),
        report.created.len(),
        events.len()
    ))
}
