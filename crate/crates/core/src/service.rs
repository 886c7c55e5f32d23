//! JSON-over-HTTP front end. Requests are handled concurrently; the model
//! runs on one worker thread fed by a bounded queue.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::codec::ImageTensor;
use crate::config::ServeConfig;
use crate::error::{Error, Result};
use crate::instruct::{Describer, Instruction};
use crate::metrics::psnr;
use crate::pipeline::{iterative_enhance, AttentionExport, EnhancementJob, ModelBundle};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhanceRequest {
    pub image_b64: String,
    pub instruction: String,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProxyStats {
    pub mean_luma: f64,
    pub std_luma: f64,
    /// PSNR of the output against the (cropped) input.
    pub psnr_vs_input: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IterationResponse {
    pub iteration: usize,
    pub image_b64: String,
    pub instruction_used: String,
    pub psnr_proxy_stats: ProxyStats,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnhanceResponse {
    pub job_id: String,
    pub iterations: Vec<IterationResponse>,
    pub seed: u64,
    pub steps: usize,
    pub checkpoint_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HeatmapResponse {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub heatmap_b64: String,
    /// Per-token relevance over the `height x width` grid; rows sum to 1.
    pub rows: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionResponse {
    pub job_id: String,
    pub iteration: usize,
    pub tokens: Vec<String>,
    pub maps: Vec<HeatmapResponse>,
}

const MAX_K: usize = 8;

struct Work {
    y: ImageTensor,
    instruction: Instruction,
    k: usize,
    seed: u64,
    steps: usize,
    reply: oneshot::Sender<Result<EnhancementJob>>,
}

struct StoredJob {
    width: usize,
    height: usize,
    attention: Vec<Option<AttentionExport>>,
}

struct AppState {
    checkpoint_hash: String,
    default_k: usize,
    default_steps: usize,
    max_steps: usize,
    max_side: usize,
    /// Spatial sizes must be multiples of this.
    align: usize,
    queue: SyncSender<Work>,
    describer: Arc<dyn Describer>,
    jobs: Mutex<HashMap<String, StoredJob>>,
    next_job: AtomicU64,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed body: {e}")))
}

fn decode_image(b64: &str) -> std::result::Result<ImageTensor, ApiError> {
    ImageTensor::from_png_b64(b64).map_err(|e| bad_request(format!("image_b64: {e}")))
}

/// Center-crop to at most `max_side` and to multiples of `align`.
fn fit_image(y: ImageTensor, max_side: usize, align: usize) -> std::result::Result<(ImageTensor, Option<String>), ApiError> {
    let side = |v: usize| v.min(max_side) / align * align;
    let (w, h) = (side(y.width()), side(y.height()));
    if w == 0 || h == 0 {
        return Err(bad_request(format!(
            "image {}x{} is smaller than the minimum side {align}",
            y.width(),
            y.height()
        )));
    }
    if (w, h) == (y.width(), y.height()) {
        return Ok((y, None));
    }
    let warning = format!("input {}x{} center-cropped to {w}x{h}", y.width(), y.height());
    Ok((y.center_crop(w, h).map_err(internal)?, Some(warning)))
}

fn std_luma(img: &ImageTensor) -> f64 {
    let l = img.luma();
    let n = l.len() as f64;
    let m = l.iter().map(|&v| v as f64).sum::<f64>() / n;
    (l.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_hash": s.checkpoint_hash }))
}

async fn instructions(State(s): State<Arc<AppState>>, body: Bytes) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Req {
        image_b64: String,
    }
    let req: Req = parse(&body)?;
    let y = decode_image(&req.image_b64)?;
    let (y, warning) = fit_image(y, s.max_side, 1)?;
    let describer = s.describer.clone();
    let ins = tokio::task::spawn_blocking(move || describer.describe(&y, &Instruction::manual("")))
        .await
        .map_err(internal)?
        .map_err(internal)?;
    let mut out = json!({ "instruction": ins.text, "source": ins.source, "facets": ins.facets });
    if let Some(w) = warning {
        out["warning"] = json!(w);
    }
    Ok(Json(out))
}

async fn enhance(State(s): State<Arc<AppState>>, body: Bytes) -> std::result::Result<Json<EnhanceResponse>, ApiError> {
    let req: EnhanceRequest = parse(&body)?;
    let k = req.k.unwrap_or(s.default_k);
    if !(1..=MAX_K).contains(&k) {
        return Err(bad_request(format!("k must be in 1..={MAX_K}")));
    }
    let steps = req.steps.unwrap_or(s.default_steps);
    if !(1..=s.max_steps).contains(&steps) {
        return Err(bad_request(format!("steps must be in 1..={}", s.max_steps)));
    }
    let seed = req.seed.unwrap_or(0);
    let (y, warning) = fit_image(decode_image(&req.image_b64)?, s.max_side, s.align)?;
    let (tx, rx) = oneshot::channel();
    let work = Work {
        y: y.clone(),
        instruction: Instruction::manual(req.instruction),
        k,
        seed,
        steps,
        reply: tx,
    };
    match s.queue.try_send(work) {
        Ok(()) => {}
        Err(TrySendError::Full(_)) => {
            return Err(ApiError(StatusCode::CONFLICT, "busy: enhancement queue is full".into()))
        }
        Err(TrySendError::Disconnected(_)) => return Err(internal("model worker stopped")),
    }
    let job = rx.await.map_err(|_| internal("model worker dropped the job"))?.map_err(internal)?;
    let mut iterations = Vec::with_capacity(job.iterations.len());
    for it in &job.iterations {
        iterations.push(IterationResponse {
            iteration: it.iteration,
            image_b64: it.image.to_png_b64().map_err(internal)?,
            instruction_used: it.instruction.text.clone(),
            psnr_proxy_stats: ProxyStats {
                mean_luma: it.image.mean_luma(),
                std_luma: std_luma(&it.image),
                psnr_vs_input: psnr(&it.image, &y).map_err(internal)?.db(),
            },
            warning: it.warning.clone(),
        });
    }
    let id = format!("job-{:06}", s.next_job.fetch_add(1, Ordering::SeqCst));
    s.jobs.lock().expect("job store").insert(
        id.clone(),
        StoredJob {
            width: job.width,
            height: job.height,
            attention: job.iterations.into_iter().map(|r| r.attention).collect(),
        },
    );
    Ok(Json(EnhanceResponse {
        job_id: id,
        iterations,
        seed,
        steps,
        checkpoint_hash: s.checkpoint_hash.clone(),
        warning,
    }))
}

async fn attention(
    State(s): State<Arc<AppState>>,
    Path((job_id, iteration)): Path<(String, usize)>,
) -> std::result::Result<Json<AttentionResponse>, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no iteration {iteration} for job {job_id}"));
    let (export, w, h) = {
        let jobs = s.jobs.lock().expect("job store");
        let job = jobs.get(&job_id).ok_or_else(not_found)?;
        let export = iteration
            .checked_sub(1)
            .and_then(|i| job.attention.get(i))
            .ok_or_else(not_found)?
            .clone()
            .ok_or_else(|| internal("attention was not recorded"))?;
        (export, job.width, job.height)
    };
    let maps = export
        .maps
        .into_iter()
        .map(|m| {
            Ok(HeatmapResponse {
                level: m.level,
                height: m.height,
                width: m.width,
                heatmap_b64: m.heatmap(w, h).to_png_b64().map_err(internal)?,
                rows: m.rows,
            })
        })
        .collect::<std::result::Result<_, ApiError>>()?;
    Ok(Json(AttentionResponse {
        job_id,
        iteration,
        tokens: export.tokens,
        maps,
    }))
}

/// Handle to a running service.
pub struct Server {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl Server {
    /// Bind `cfg.bind` and serve `bundle` until [`Server::stop`] or drop.
    pub fn start(bundle: ModelBundle, describer: Arc<dyn Describer>, cfg: &ServeConfig) -> Result<Self> {
        let listener = std::net::TcpListener::bind(&cfg.bind).map_err(|e| Error::io(&cfg.bind, e))?;
        listener.set_nonblocking(true).map_err(|e| Error::io(&cfg.bind, e))?;
        let addr = listener.local_addr().map_err(|e| Error::io(&cfg.bind, e))?;
        let app = router(bundle, describer, cfg)?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    /// Block until the server exits.
    pub fn wait(mut self) -> Result<()> {
        let t = self.thread.take().expect("server thread");
        t.join()
            .map_err(|_| Error::InvalidArgument("server thread panicked".into()))?
            .map_err(|e| Error::io("server", e))
    }

    pub fn stop(mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Routes over a model worker that owns `bundle`.
pub fn router(bundle: ModelBundle, describer: Arc<dyn Describer>, cfg: &ServeConfig) -> Result<Router> {
    bundle.latent_stats()?;
    let (tx, rx) = sync_channel::<Work>(cfg.queue_depth);
    let state = Arc::new(AppState {
        checkpoint_hash: bundle.checkpoint_hash(),
        default_k: bundle.config.sample.k,
        default_steps: bundle.config.sample.steps,
        max_steps: bundle.schedule.len(),
        max_side: cfg.max_side,
        align: bundle.config.codec.f << (bundle.config.unet.levels() - 1),
        queue: tx,
        describer: describer.clone(),
        jobs: Mutex::new(HashMap::new()),
        next_job: AtomicU64::new(1),
    });
    std::thread::spawn(move || {
        for w in rx {
            let out = iterative_enhance(&bundle, &w.y, &w.instruction, w.k, w.seed, w.steps, describer.as_ref());
            let _ = w.reply.send(out);
        }
    });
    Ok(Router::new()
        .route("/health", get(health))
        .route("/instructions", post(instructions))
        .route("/enhance", post(enhance))
        .route("/attention/{job_id}/{iteration}", get(attention))
        .with_state(state))
}
