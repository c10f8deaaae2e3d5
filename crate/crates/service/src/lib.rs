//! HTTP facade over open loom documents.
//!
//! Every route lives under `/api`. Mutations commit through one
//! [`loom_core::DocumentStore`] per document and are published on that
//! document's server-sent event stream in sequence order. Generation runs as
//! background jobs that commit each node as it is produced.

pub mod error;
pub mod events;
pub mod routes;
pub mod state;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;

pub use error::{ApiError, ErrorBody};
pub use events::{Event, EventBody};
pub use state::{AppState, JobState, JobStatus, OpenDoc, ServiceConfig};

/// How long shutdown waits for cancelled jobs to wind down.
const JOB_DRAIN: Duration = Duration::from_secs(5);

pub fn router(state: Arc<AppState>) -> Router {
    use routes::*;
    let api = Router::new()
        .route("/docs", get(list_docs).post(open_doc))
        .route("/doc/{id}", get(get_doc))
        .route("/doc/{id}/save", post(save_doc))
        .route("/doc/{id}/mutations", post(post_mutation))
        .route("/doc/{id}/nodes", post(create_node))
        .route("/doc/{id}/node/{nid}", get(get_node).patch(patch_node).delete(delete_node))
        .route("/doc/{id}/node/{nid}/split", post(split_node))
        .route("/doc/{id}/node/{nid}/merge", post(merge_node))
        .route("/doc/{id}/node/{nid}/reparent", post(reparent_node))
        .route("/doc/{id}/node/{nid}/read", get(read_node))
        .route("/doc/{id}/node/{nid}/context", get(node_context))
        .route("/doc/{id}/node/{nid}/generate", post(generate))
        .route("/doc/{id}/node/{nid}/expand", post(expand))
        .route("/doc/{id}/jobs", get(list_jobs))
        .route("/doc/{id}/jobs/{job}", get(get_job).delete(cancel_job))
        .route("/doc/{id}/search", get(search))
        .route("/doc/{id}/memory", get(list_memory).post(save_memory))
        .route("/doc/{id}/tools", get(list_tools))
        .route("/doc/{id}/tools/{name}/run", post(run_tool))
        .route("/doc/{id}/events", get(events))
        .route("/doc/{id}/export", get(export))
        .layer(axum::middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().nest("/api", api).with_state(state)
}

/// Serve until `shutdown` resolves, then cancel running jobs, save every
/// changed document and take a last snapshot.
pub async fn run(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let autosave = state.config.autosave_every.map(|every| {
        let s = state.clone();
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(every);
            ticker.tick().await;
            loop {
                ticker.tick().await;
                let s = s.clone();
                let _ = tokio::task::spawn_blocking(move || {
                    for d in s.docs() {
                        if let Err(e) = d.autosave_tick() {
                            tracing::warn!(doc = %d.id, "autosave failed: {e}");
                        }
                    }
                })
                .await;
            }
        })
    });
    let s = state.clone();
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async move {
            shutdown.await;
            s.begin_shutdown();
        })
        .await?;
    if let Some(task) = autosave {
        task.abort();
    }
    state.cancel_all_jobs();
    state.drain_jobs(JOB_DRAIN).await;
    let s = state.clone();
    let results = tokio::task::spawn_blocking(move || s.flush()).await.map_err(std::io::Error::other)?;
    for (id, result) in results {
        if let Err(e) = result {
            tracing::error!(doc = %id, "saving on shutdown failed: {e}");
        }
    }
    Ok(())
}
