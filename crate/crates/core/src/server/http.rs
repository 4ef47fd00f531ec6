//! axum mounting of [`ViceroyServer`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use super::{HttpReply, PageRequest, ViceroyServer};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 256 * 1024;

impl IntoResponse for HttpReply {
    fn into_response(self) -> Response {
        let mut headers = HeaderMap::new();
        for (name, value) in &self.headers {
            if let (Ok(n), Ok(v)) = (
                HeaderName::try_from(name.as_str()),
                HeaderValue::try_from(value.as_str()),
            ) {
                headers.append(n, v);
            }
        }
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, headers, self.body).into_response()
    }
}

pub fn router(server: Arc<ViceroyServer>) -> Router {
    let cfg = server.config().clone();
    Router::new()
        .route(&cfg.wrapper_endpoint, post(wrapper))
        .route(&cfg.vcr_endpoint, post(vcr))
        .fallback(page)
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(server)
}

async fn wrapper(State(s): State<Arc<ViceroyServer>>, body: Bytes) -> HttpReply {
    s.handle_wrapper_request(&body)
}

async fn vcr(State(s): State<Arc<ViceroyServer>>, body: Bytes) -> HttpReply {
    s.handle_vcr(&body)
}

async fn page(State(s): State<Arc<ViceroyServer>>, req: Request) -> HttpReply {
    let header_str = |name| {
        req.headers()
            .get(name)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string)
    };
    s.handle_page_request(&PageRequest {
        path: req.uri().path().to_string(),
        cookie_header: header_str(header::COOKIE),
        user_agent: header_str(header::USER_AGENT),
    })
}

/// Serves until the process ends.
pub async fn serve(server: Arc<ViceroyServer>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(server)).await
}

/// A server running on its own thread. Dropping the handle stops it.
pub struct RunningServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn origin(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background
/// thread with its own runtime.
pub fn spawn(server: Arc<ViceroyServer>, addr: SocketAddr) -> std::io::Result<RunningServer> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = match TcpListener::from_std(std_listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("listener: {e}");
                    return;
                }
            };
            let result = axum::serve(listener, router(server))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = result {
                log::error!("server stopped: {e}");
            }
        });
    });
    Ok(RunningServer {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
