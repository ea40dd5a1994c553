use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use ctxkmp::pipeline::ModelFile;
use ctxkmp::rollout::{rollout, ContextSchedule, RolloutConfig};
use ctxkmp::{Strategy, TrainedModel};
use ctxkmp_service::{router, AppState, ServerMessage, ServiceConfig, StepFrame};
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use nalgebra::DVector;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn line(from: [f64; 2], to: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let s = 3.0 * t * t - 2.0 * t * t * t;
            [from[0] + (to[0] - from[0]) * s, from[1] + (to[1] - from[1]) * s]
        })
        .collect()
}

fn plain_corpus() -> Value {
    json!({
        "version": 1,
        "dims": {"context": 0, "position": 2},
        "demonstrations": [
            {"id": "a", "dt": 0.05, "positions": line([0.4, 0.3], [0.0, 0.0], 60), "contexts": null},
            {"id": "b", "dt": 0.05, "positions": line([0.4, 0.2], [0.0, 0.0], 60), "contexts": null},
        ]
    })
}

/// Two skills selected by a scalar context: context 0 ends at the origin, context 1 at (0.4, 0).
fn two_skill_corpus() -> Value {
    let a = line([0.2, 0.3], [0.0, 0.0], 60);
    let b = line([0.2, 0.3], [0.4, 0.0], 60);
    json!({
        "version": 1,
        "dims": {"context": 1, "position": 2},
        "demonstrations": [
            {"id": "left", "dt": 0.05, "positions": a, "contexts": vec![[0.0]; 60]},
            {"id": "right", "dt": 0.05, "positions": b, "contexts": vec![[1.0]; 60]},
        ]
    })
}

fn small_config() -> Value {
    json!({"C": 4, "N": 120})
}

fn app() -> (Arc<AppState>, axum::Router) {
    let state = AppState::new(ServiceConfig::default()).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn train(app: &axum::Router, corpus: Value) -> String {
    let (status, v) = call(app, "POST", "/train", Some(json!({"corpus": corpus, "config": small_config()}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn fetch_model(app: &axum::Router, id: &str) -> TrainedModel {
    let (status, v) = call(app, "GET", &format!("/models/{id}?full=true"), None).await;
    assert_eq!(status, StatusCode::OK);
    let file: ModelFile = serde_json::from_value(v["model"].clone()).unwrap();
    TrainedModel::from_file(file).unwrap()
}

#[tokio::test]
async fn health_is_ok() {
    let (_, app) = app();
    let (status, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn training_twice_gives_two_ids_with_identical_content() {
    let (_, app) = app();
    let body = json!({"corpus": plain_corpus(), "config": small_config()});
    let (s1, a) = call(&app, "POST", "/train", Some(body.clone())).await;
    let (s2, b) = call(&app, "POST", "/train", Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_ne!(a["id"], b["id"]);
    assert_eq!(a["hash"], b["hash"]);
    let (status, summary) = call(&app, "GET", &format!("/models/{}", a["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(summary["hash"], a["hash"]);
    assert_eq!(summary["config"]["C"], 4);
    assert_eq!(summary["references"], 120);
    assert!(summary.get("model").is_none());
}

#[tokio::test]
async fn training_errors_map_to_status_codes() {
    let (_, app) = app();
    // context dims disagree with the header
    let mut bad = two_skill_corpus();
    bad["demonstrations"][1]["contexts"] = json!(vec![[1.0, 2.0]; 60]);
    let (status, v) = call(&app, "POST", "/train", Some(json!({"corpus": bad}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["kind"], "dimension");

    // wrong type in the corpus
    let mut bad = plain_corpus();
    bad["demonstrations"][0]["dt"] = json!("fast");
    let (status, v) = call(&app, "POST", "/train", Some(json!({"corpus": bad}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["kind"], "schema");
    assert!(v["field"].as_str().unwrap().contains("dt"), "{v}");

    // unknown config key
    let (status, v) = call(&app, "POST", "/train", Some(json!({"corpus": plain_corpus(), "config": {"K_x": 1}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");

    // invalid config value
    let (status, _) = call(&app, "POST", "/train", Some(json!({"corpus": plain_corpus(), "config": {"pi_sp": 1.5}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // not JSON at all
    let req = Request::builder().method("POST").uri("/train").body(Body::from("{")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[test]
fn numerical_failures_report_their_stage() {
    let e = ctxkmp::Error::Stage {
        stage: "kmp",
        source: Box::new(ctxkmp::Error::Conditioning { matrix: "K".into(), jitter: 1e-4 }),
    };
    let api = ctxkmp_service::ApiError::from(e);
    assert_eq!(api.status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(api.stage, Some("kmp"));
    assert_eq!(api.kind, "numerical");
}

#[tokio::test]
async fn unknown_models_are_404() {
    let (_, app) = app();
    assert_eq!(call(&app, "GET", "/models/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/models/nope/field", Some(json!({}))).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn field_grid_and_errors() {
    let (_, app) = app();
    let id = train(&app, plain_corpus()).await;
    let uri = format!("/models/{id}/field");
    let (status, v) = call(&app, "POST", &uri, Some(json!({"nx": 20, "ny": 20}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 400);
    assert!(records.iter().all(|r| r["sigma_ep"].as_f64().unwrap() >= 0.0));

    let grid = json!({"x_min": 0.0, "x_max": 0.4, "y_min": 0.0, "y_max": 0.3, "nx": 2, "ny": 2});
    let (status, v) = call(&app, "POST", &uri, Some(json!({"grid": grid, "strategy": "kmp"}))).await;
    assert_eq!(status, StatusCode::OK);
    let xy: Vec<(f64, f64)> = v["records"].as_array().unwrap().iter().map(|r| (r["x"].as_f64().unwrap(), r["y"].as_f64().unwrap())).collect();
    assert_eq!(xy, vec![(0.0, 0.0), (0.4, 0.0), (0.0, 0.3), (0.4, 0.3)]);
    // cached answer is identical
    let (_, again) = call(&app, "POST", &uri, Some(json!({"grid": grid, "strategy": "kmp"}))).await;
    assert_eq!(v, again);

    let bad = json!({"x_min": 0.0, "x_max": 0.4, "y_min": 0.0, "y_max": 0.3, "nx": 1, "ny": 2});
    assert_eq!(call(&app, "POST", &uri, Some(json!({"grid": bad}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", &uri, Some(json!({"strategy": "fastest"}))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn field_depends_on_context() {
    let (_, app) = app();
    let id = train(&app, two_skill_corpus()).await;
    let uri = format!("/models/{id}/field");
    assert_eq!(call(&app, "POST", &uri, Some(json!({}))).await.0, StatusCode::BAD_REQUEST);
    let (s0, a) = call(&app, "POST", &uri, Some(json!({"context": [0.0], "nx": 5, "ny": 5}))).await;
    let (s1, b) = call(&app, "POST", &uri, Some(json!({"context": [1.0], "nx": 5, "ny": 5}))).await;
    assert_eq!((s0, s1), (StatusCode::OK, StatusCode::OK));
    assert_ne!(a["records"], b["records"]);
}

// ---------------------------------------------------------------------------
// Live rollouts

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn spawn_server(state: Arc<AppState>) -> std::net::SocketAddr {
    let (listener, addr) = ctxkmp_service::bind("127.0.0.1:0").await.unwrap();
    tokio::spawn(ctxkmp_service::serve(listener, state));
    addr
}

async fn connect(addr: std::net::SocketAddr, id: &str, query: &str) -> Ws {
    let url = format!("ws://{addr}/models/{id}/rollout?{query}");
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn next_message(ws: &mut Ws) -> ServerMessage {
    loop {
        match ws.next().await.expect("stream open").unwrap() {
            Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            Message::Close(_) => panic!("closed before done"),
            _ => continue,
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

fn offline_frames(model: &TrainedModel, x0: &[f64], schedule: ContextSchedule<f64>, strategy: Strategy) -> Vec<StepFrame> {
    let config = RolloutConfig { schedule, ..model.config.rollout_template(DVector::from_column_slice(x0)) };
    let r = rollout(&model.kmp, &model.goals, &model.fusion(), &config, strategy).unwrap();
    let n = r.trace.len();
    r.trace
        .iter()
        .enumerate()
        .map(|(i, t)| StepFrame::from_trace(t, if i + 1 == n { r.status } else { ctxkmp::RolloutStatus::Running }))
        .collect()
}

#[tokio::test]
async fn stream_without_messages_matches_offline_rollout() {
    let (state, app) = app();
    let id = train(&app, plain_corpus()).await;
    let model = fetch_model(&app, &id).await;
    let addr = spawn_server(state).await;
    let mut ws = connect(addr, &id, "x0=0.35,0.25&strategy=full&rate_hz=2000").await;
    let mut frames = Vec::new();
    let done = loop {
        match next_message(&mut ws).await {
            ServerMessage::Step(f) => frames.push(f),
            d @ ServerMessage::Done { .. } => break d,
            ServerMessage::Error { message } => panic!("{message}"),
        }
    };
    let ServerMessage::Done { steps, dropped_frames, success, .. } = done else { unreachable!() };
    assert_eq!(steps, frames.len() + dropped_frames);
    assert_eq!(dropped_frames, 0);
    assert!(success);
    assert_eq!(frames, offline_frames(&model, &[0.35, 0.25], ContextSchedule::None, Strategy::Full));
}

#[tokio::test]
async fn context_change_applies_at_the_next_step_and_replays_offline() {
    let (state, app) = app();
    let id = train(&app, two_skill_corpus()).await;
    let model = fetch_model(&app, &id).await;
    let addr = spawn_server(state).await;
    let mut ws = connect(addr, &id, "x0=0.2,0.3&context=0&lockstep=true").await;
    let k = 7;
    let mut frames = Vec::new();
    let done = loop {
        if frames.len() == k + 1 {
            // after step k has been observed
            send(&mut ws, json!({"type": "set_context", "context": [1.0]})).await;
        }
        if frames.len() == 3 {
            send(&mut ws, json!({"type": "set_context", "context": [1.0, 2.0]})).await;
            match next_message(&mut ws).await {
                ServerMessage::Error { .. } => {}
                other => panic!("expected in-band error, got {other:?}"),
            }
        }
        send(&mut ws, json!({"type": "step"})).await;
        match next_message(&mut ws).await {
            ServerMessage::Step(f) => frames.push(f),
            d @ ServerMessage::Done { .. } => break d,
            ServerMessage::Error { message } => panic!("{message}"),
        }
        if frames.last().unwrap().status != ctxkmp::RolloutStatus::Running {
            break next_message(&mut ws).await;
        }
    };
    assert!(frames.len() > k + 2);
    assert_eq!(frames[k].s[0], 0.0);
    assert_eq!(frames[k + 1].s[0], 1.0);
    let ServerMessage::Done { contexts, .. } = done else { panic!("no done message") };
    assert_eq!(contexts.len(), 2);
    assert_eq!((contexts[1].iteration, contexts[1].context.clone()), (k + 1, vec![1.0]));
    let schedule = ContextSchedule::Piecewise(contexts.iter().map(|c| (c.iteration, DVector::from_vec(c.context.clone()))).collect());
    assert_eq!(frames, offline_frames(&model, &[0.2, 0.3], schedule, Strategy::Full));
    // the trace heads for the second skill's goal
    assert_eq!(frames.last().unwrap().coefficients.goal_index, 1);
}

#[tokio::test]
async fn cancel_ends_the_session() {
    let (state, app) = app();
    let id = train(&app, plain_corpus()).await;
    let addr = spawn_server(state).await;
    let mut ws = connect(addr, &id, "x0=0.35,0.25&lockstep=true").await;
    send(&mut ws, json!({"type": "step"})).await;
    assert!(matches!(next_message(&mut ws).await, ServerMessage::Step(_)));
    send(&mut ws, json!({"type": "cancel"})).await;
    match next_message(&mut ws).await {
        ServerMessage::Done { status, steps, .. } => {
            assert_eq!(status, ctxkmp::RolloutStatus::Cancelled);
            assert_eq!(steps, 1);
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn concurrent_sessions_do_not_interfere() {
    let (state, app) = app();
    let id = train(&app, plain_corpus()).await;
    let model = fetch_model(&app, &id).await;
    let addr = spawn_server(state).await;
    let run = |q: &'static str| {
        let id = id.clone();
        async move {
            let mut ws = connect(addr, &id, q).await;
            let mut frames = Vec::new();
            loop {
                match next_message(&mut ws).await {
                    ServerMessage::Step(f) => frames.push(f),
                    ServerMessage::Done { .. } => return frames,
                    ServerMessage::Error { message } => panic!("{message}"),
                }
            }
        }
    };
    let (a, b) = tokio::join!(run("x0=0.35,0.25&rate_hz=1000"), run("x0=0.1,0.3&strategy=kmp&rate_hz=1000"));
    assert_eq!(a, offline_frames(&model, &[0.35, 0.25], ContextSchedule::None, Strategy::Full));
    assert_eq!(b, offline_frames(&model, &[0.1, 0.3], ContextSchedule::None, Strategy::Kmp));
}

#[tokio::test]
async fn rollout_request_validation() {
    let (state, app) = app();
    let id = train(&app, two_skill_corpus()).await;
    let addr = spawn_server(state).await;
    let status = |url: String| async move {
        match tokio_tungstenite::connect_async(url).await {
            Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => resp.status().as_u16(),
            Ok(_) => 101,
            Err(e) => panic!("{e}"),
        }
    };
    assert_eq!(status(format!("ws://{addr}/models/nope/rollout?x0=0,0")).await, 404);
    assert_eq!(status(format!("ws://{addr}/models/{id}/rollout?x0=0,0")).await, 400);
    assert_eq!(status(format!("ws://{addr}/models/{id}/rollout?x0=0,0&context=1,2")).await, 422);
    assert_eq!(status(format!("ws://{addr}/models/{id}/rollout?x0=0,0&context=1&strategy=x")).await, 400);
    assert_eq!(status(format!("ws://{addr}/models/{id}/rollout?x0=0,0&context=1")).await, 101);
}

#[tokio::test]
async fn evicted_models_reload_from_the_store_dir() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(ServiceConfig { capacity: 1, store_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() }).unwrap();
    let app = router(state.clone());
    let first = train(&app, plain_corpus()).await;
    let _second = train(&app, plain_corpus()).await;
    assert_eq!(state.models.lock().unwrap().len(), 1);
    let (status, _) = call(&app, "GET", &format!("/models/{first}"), None).await;
    assert_eq!(status, StatusCode::OK);

    let (_, memory_only) = {
        let s = AppState::new(ServiceConfig { capacity: 1, ..ServiceConfig::default() }).unwrap();
        (s.clone(), router(s))
    };
    let a = train(&memory_only, plain_corpus()).await;
    let _b = train(&memory_only, plain_corpus()).await;
    assert_eq!(call(&memory_only, "GET", &format!("/models/{a}"), None).await.0, StatusCode::NOT_FOUND);
}
