//! Local JSON HTTP service over a tree directory.
//!
//! | method | path           | body / result                                      |
//! |--------|----------------|----------------------------------------------------|
//! | GET    | `/tree`        | manifest JSON, as on disk                           |
//! | POST   | `/branch`      | `{parent_id, condition, age_target, overrides?}` -> `{job_id, node_id}` |
//! | GET    | `/jobs/{id}`   | `{job_id, node_id, state, error?}`                  |
//! | GET    | `/image/{id}`  | PNG bytes                                           |
//! | GET    | `/conditions`  | condition keys                                      |
//! | DELETE | `/node/{id}`   | `{removed: [...]}`; 409 while a subtree job runs    |

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::oneshot;

use crate::manifest::MANIFEST_FILE;
use crate::tree::{BranchRequest, Runtime, Tree};
use crate::worker::Worker;
use crate::{Result, TreeError};

#[derive(Clone)]
struct App {
    tree: Arc<Tree>,
    worker: Arc<Worker>,
    conditions: Arc<Vec<String>>,
}

struct ApiError(TreeError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            TreeError::NotFound(_) | TreeError::JobNotFound(_) => StatusCode::NOT_FOUND,
            TreeError::Validation(_) => StatusCode::BAD_REQUEST,
            TreeError::ParentNotReady { .. } | TreeError::Busy(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<TreeError> for ApiError {
    fn from(e: TreeError) -> Self {
        ApiError(e)
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn get_tree(State(app): State<App>) -> ApiResult<Response> {
    let path = app.tree.dir().join(MANIFEST_FILE);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| TreeError::Io(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn post_branch(State(app): State<App>, Json(req): Json<BranchRequest>) -> ApiResult<Response> {
    let tree = app.tree.clone();
    let (job_id, node_id) = tokio::task::spawn_blocking(move || tree.enqueue_branch(&req))
        .await
        .map_err(|e| TreeError::Io(e.to_string()))??;
    app.worker.submit(node_id.clone());
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "node_id": node_id }))).into_response())
}

async fn get_job(State(app): State<App>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let m = app.tree.manifest();
    let n = m.by_job(&id).ok_or_else(|| TreeError::JobNotFound(id.clone()))?;
    let mut body = json!({ "job_id": id, "node_id": n.id, "state": n.job_state });
    if let Some(e) = &n.error {
        body["error"] = json!(e);
    }
    Ok(Json(body).into_response())
}

async fn get_image(State(app): State<App>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = app.tree.image_path(&id).ok_or_else(|| TreeError::NotFound(id.clone()))?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| TreeError::NotFound(id))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_conditions(State(app): State<App>) -> Json<Vec<String>> {
    Json(app.conditions.as_ref().clone())
}

async fn delete_node(State(app): State<App>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let tree = app.tree.clone();
    let removed = tokio::task::spawn_blocking(move || tree.delete_subtree(&id))
        .await
        .map_err(|e| TreeError::Io(e.to_string()))??;
    Ok(Json(json!({ "removed": removed })).into_response())
}

fn router(app: App) -> Router {
    Router::new()
        .route("/tree", get(get_tree))
        .route("/branch", post(post_branch))
        .route("/jobs/{id}", get(get_job))
        .route("/image/{id}", get(get_image))
        .route("/conditions", get(get_conditions))
        .route("/node/{id}", delete(delete_node))
        .with_state(app)
}

/// A running service. Dropping it stops the server and the worker.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    worker: Arc<Worker>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.worker.shutdown();
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Opens the tree at `dir`, re-queues its pending jobs and serves it on
/// `addr` (port 0 picks a free port). Fails if the port is taken.
pub fn serve(dir: &Path, addr: SocketAddr, runtime: Runtime) -> Result<ServiceHandle> {
    let listener = std::net::TcpListener::bind(addr).map_err(|e| TreeError::Bind {
        addr: addr.to_string(),
        reason: e.to_string(),
    })?;
    listener.set_nonblocking(true).map_err(|e| TreeError::Io(e.to_string()))?;
    let bound = listener.local_addr().map_err(|e| TreeError::Io(e.to_string()))?;

    let (tree, pending) = Tree::open(dir)?;
    let tree = Arc::new(tree);
    let conditions = Arc::new(runtime.catalog.keys());
    let worker = Arc::new(Worker::spawn(tree.clone(), Arc::new(runtime)));
    for id in pending {
        log::info!("re-queueing pending job for node {id}");
        worker.submit(id);
    }
    let app = App {
        tree,
        worker: worker.clone(),
        conditions,
    };
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| TreeError::Io(e.to_string()))?;
    let thread = std::thread::Builder::new()
        .name("amk-http".into())
        .spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("listener setup failed: {e}");
                        return;
                    }
                };
                let server = axum::serve(listener, router(app)).with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("server error: {e}");
                }
            });
        })
        .map_err(|e| TreeError::Io(e.to_string()))?;
    log::info!("serving {} on http://{bound}", dir.display());
    Ok(ServiceHandle {
        addr: bound,
        stop: Some(stop_tx),
        thread: Some(thread),
        worker,
    })
}
