//! `/api/v1` chat service. Sessions live in memory; each one serializes its
//! own turns and the model is shared read-only.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use modgpt::corpus::{dialogue_json, load_catalog, Dialogue, MemeCatalog, MemeGroup, MemeId, Speaker, Utterance, Vocab};
use modgpt::decoding::{respond, RespondConfig, Response as ModelResponse, SamplerConfig};
use modgpt::model::{Checkpoint, Model};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;

use crate::{CliError, CliResult, ServeArgs};

/// Splits `meme:<id> rest` into its parts. Anything else is plain text.
pub fn parse_utterance(s: &str) -> (Option<String>, Option<u32>) {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("meme:") {
        let (id, text) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        if let Ok(id) = id.parse() {
            let text = text.trim();
            return ((!text.is_empty()).then(|| text.to_string()), Some(id));
        }
    }
    ((!s.is_empty()).then(|| s.to_string()), None)
}

/// Builds a validated utterance from raw input, or an error kind and message.
pub fn make_utterance(
    vocab: &Vocab,
    catalog: &MemeCatalog,
    speaker: Speaker,
    text: Option<&str>,
    meme_id: Option<MemeId>,
) -> Result<Utterance, (&'static str, String)> {
    let text = text.map(|t| vocab.encode(t)).unwrap_or_default();
    if let Some(id) = meme_id {
        if !catalog.contains(id) {
            return Err(("dangling_meme", format!("meme id {id} not in catalog")));
        }
    }
    let u = Utterance {
        speaker,
        text,
        meme_id,
        emotion: None,
    };
    u.validate().map_err(|e| ("empty", e.to_string()))?;
    Ok(u)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RankedMeme {
    pub meme_id: MemeId,
    pub distance: f64,
}

/// Tag attention over the rendered sequence, one weight per token.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Attention {
    pub tokens: Vec<String>,
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TurnReply {
    pub speaker: u8,
    pub text: String,
    pub meme_id: Option<MemeId>,
    pub usage_prob: f64,
    pub ranked_memes: Vec<RankedMeme>,
    pub attention: Attention,
}

impl TurnReply {
    pub fn new(r: &ModelResponse, vocab: &Vocab) -> Self {
        let tokens = r
            .sequence
            .tokens
            .iter()
            .map(|&t| vocab.token(t).unwrap_or("[unk]").to_string())
            .collect();
        Self {
            speaker: r.speaker.number(),
            text: vocab.decode(&r.text),
            meme_id: r.meme_id,
            usage_prob: r.usage_prob,
            ranked_memes: r
                .ranked_memes
                .iter()
                .map(|&(meme_id, distance)| RankedMeme { meme_id, distance })
                .collect(),
            attention: Attention {
                tokens,
                weights: r.attention.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HistoryEntry {
    pub speaker: u8,
    pub text: String,
    pub meme_id: Option<MemeId>,
}

impl HistoryEntry {
    fn new(u: &Utterance, vocab: &Vocab) -> Self {
        Self {
            speaker: u.speaker.number(),
            text: vocab.decode(&u.text),
            meme_id: u.meme_id,
        }
    }
}

/// Per-session decoding settings. Turn `i` samples with seed `seed + i`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SessionConfig {
    pub seed: u64,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let r = RespondConfig::default();
        Self {
            seed: r.sampler.seed,
            top_p: r.sampler.top_p,
            temperature: r.sampler.temperature,
            max_new_tokens: r.sampler.max_new_tokens,
            threshold: r.threshold,
            top_k: r.top_k,
        }
    }
}

impl SessionConfig {
    fn respond_config(&self, turn: usize) -> RespondConfig {
        RespondConfig {
            sampler: SamplerConfig {
                top_p: self.top_p,
                temperature: self.temperature,
                max_new_tokens: self.max_new_tokens,
                seed: self.seed.wrapping_add(turn as u64),
            },
            threshold: self.threshold,
            top_k: self.top_k,
        }
    }

    fn validate(&self) -> Result<(), ApiError> {
        self.respond_config(0).sampler.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ApiError::unprocessable("invalid_argument", format!("threshold {} not in [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Optional fields for PATCH; absent ones keep their value.
#[derive(Clone, Debug, Default, Deserialize)]
pub struct ConfigPatch {
    pub seed: Option<u64>,
    pub top_p: Option<f64>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub threshold: Option<f64>,
    pub top_k: Option<usize>,
}

impl ConfigPatch {
    fn apply(&self, c: &mut SessionConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(seed, top_p, temperature, max_new_tokens, threshold, top_k);
    }
}

struct SessionState {
    history: Vec<Utterance>,
    config: SessionConfig,
    updated_at: u64,
}

struct Session {
    id: String,
    created_at: u64,
    state: Arc<Mutex<SessionState>>,
}

pub struct AppState {
    model: Arc<Model>,
    catalog: Arc<MemeCatalog>,
    vocab: Arc<Vocab>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(ckpt: Checkpoint, catalog: MemeCatalog) -> CliResult<Self> {
        if ckpt.model.config.meme_dim != catalog.feature_dim() {
            return Err(CliError::new(
                "shape",
                format!(
                    "catalog feature_dim {} does not match model meme_dim {}",
                    catalog.feature_dim(),
                    ckpt.model.config.meme_dim
                ),
            ));
        }
        Ok(Self {
            model: Arc::new(ckpt.model),
            catalog: Arc::new(catalog),
            vocab: Arc::new(ckpt.vocab),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Every session with at least two utterances as one JSONL dialogue line.
    pub async fn export_jsonl(&self) -> CliResult<String> {
        let sessions: Vec<Arc<Session>> = self.sessions.read().unwrap().values().cloned().collect();
        let mut out = String::new();
        for s in sessions {
            let st = s.state.lock().await;
            if let Ok(d) = Dialogue::new(st.history.clone()) {
                out.push_str(&dialogue_json(&d, &self.vocab)?);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))
    }

    fn unprocessable(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, kind, message)
    }
}

impl From<modgpt::Error> for ApiError {
    fn from(e: modgpt::Error) -> Self {
        let status = match e.kind() {
            "invalid_argument" | "empty" | "dangling_meme" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Serialize)]
struct SessionView {
    id: String,
    created_at: u64,
    updated_at: u64,
    config: SessionConfig,
    history: Vec<HistoryEntry>,
}

#[derive(Deserialize)]
pub struct MessageBody {
    pub text: Option<String>,
    pub meme_id: Option<MemeId>,
}

#[derive(Serialize)]
struct TurnView {
    turn: usize,
    user: HistoryEntry,
    reply: TurnReply,
}

#[derive(Serialize)]
struct MemeSummary {
    id: MemeId,
    group: MemeGroup,
    ocr: Option<String>,
    emotions: Vec<String>,
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn memes(State(app): State<Arc<AppState>>) -> Json<Vec<MemeSummary>> {
    Json(
        app.catalog
            .memes()
            .iter()
            .map(|m| MemeSummary {
                id: m.id,
                group: m.group,
                ocr: m.ocr_text.clone(),
                emotions: m.emotion_tags.clone(),
            })
            .collect(),
    )
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Option<Json<ConfigPatch>>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let mut config = SessionConfig::default();
    if let Some(Json(p)) = body {
        p.apply(&mut config);
    }
    config.validate()?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let t = now();
    let session = Session {
        id: id.clone(),
        created_at: t,
        state: Arc::new(Mutex::new(SessionState {
            history: Vec::new(),
            config: config.clone(),
            updated_at: t,
        })),
    };
    app.sessions.write().unwrap().insert(id.clone(), Arc::new(session));
    tracing::info!(session = %id, "created");
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id, "config": config }))))
}

fn busy() -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "busy", "session is handling another request")
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = app.session(&id)?;
    let st = s.state.try_lock().map_err(|_| busy())?;
    Ok(Json(SessionView {
        id: s.id.clone(),
        created_at: s.created_at,
        updated_at: st.updated_at,
        config: st.config.clone(),
        history: st.history.iter().map(|u| HistoryEntry::new(u, &app.vocab)).collect(),
    }))
}

async fn patch_config(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(p): Json<ConfigPatch>,
) -> ApiResult<Json<SessionConfig>> {
    let s = app.session(&id)?;
    let mut st = s.state.try_lock().map_err(|_| busy())?;
    let mut c = st.config.clone();
    p.apply(&mut c);
    c.validate()?;
    st.config = c.clone();
    st.updated_at = now();
    Ok(Json(c))
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    match app.sessions.write().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

async fn export_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = app.session(&id)?;
    let st = s.state.try_lock().map_err(|_| busy())?;
    let d = Dialogue::new(st.history.clone())?;
    let line = dialogue_json(&d, &app.vocab)? + "\n";
    Ok(([(header::CONTENT_TYPE, "application/jsonl")], line).into_response())
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> ApiResult<Json<TurnView>> {
    let s = app.session(&id)?;
    let mut st = s.state.clone().try_lock_owned().map_err(|_| busy())?;
    let speaker = st.history.last().map_or(Speaker::User1, |u| u.speaker.other());
    let user = make_utterance(&app.vocab, &app.catalog, speaker, body.text.as_deref(), body.meme_id)
        .map_err(|(kind, msg)| ApiError::unprocessable(kind, msg))?;

    let mut history = st.history.clone();
    history.push(user.clone());
    let turn = history.len() / 2;
    let cfg = st.config.respond_config(turn);
    let (model, catalog) = (app.model.clone(), app.catalog.clone());
    let resp = tokio::task::spawn_blocking(move || {
        let r = respond(&model, &catalog, &history, &cfg, None, &mut |_| {});
        (history, r)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let (mut history, resp) = resp;
    let resp = resp?;

    history.push(resp.utterance());
    st.history = history;
    st.updated_at = now();
    Ok(Json(TurnView {
        turn,
        user: HistoryEntry::new(&user, &app.vocab),
        reply: TurnReply::new(&resp, &app.vocab),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/memes", get(memes))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session).patch(patch_config))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/export", get(export_session));
    Router::new()
        .nest("/api/v1", api)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
}

pub fn run(a: &ServeArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let catalog = load_catalog(&a.catalog)?;
    let state = Arc::new(AppState::new(ckpt, catalog)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        tracing::info!("listening on http://{}/api/v1", listener.local_addr()?);
        axum::serve(listener, router(state.clone()))
            .with_graceful_shutdown(shutdown_signal())
            .await?;
        if let Some(path) = &a.sessions_out {
            persist(&state, path).await?;
        }
        Ok(())
    })
}

async fn persist(state: &AppState, path: &PathBuf) -> CliResult<()> {
    let text = state.export_jsonl().await?;
    std::fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    tracing::info!(path = %path.display(), "sessions written");
    Ok(())
}
