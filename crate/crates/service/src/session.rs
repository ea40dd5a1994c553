//! Live rollout sessions over a WebSocket.
//!
//! Open `GET /models/{id}/rollout?x0=..&context=..&strategy=..` with lists as
//! comma-separated numbers. Optional: `max_iters`, `rate_hz`, and
//! `lockstep=true` (one step per client `step` message instead of paced).
//!
//! The server emits `step` frames and a final `done` frame. The client may send
//! `set_context`, which applies from the next step on, `cancel`, and, in lockstep
//! mode, `step`.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::response::Response;
use ctxkmp::rollout::{RolloutStepper, TraceStep};
use ctxkmp::{RolloutStatus, Strategy};
use futures::{SinkExt, StreamExt};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::api::{lookup, parse_strategy};
use crate::error::ApiError;
use crate::store::StoredModel;
use crate::AppState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Step,
    SetContext { context: Vec<f64> },
    Cancel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub pi_kmp: f64,
    pub pi_sp: f64,
    pub pi_g: f64,
    pub k_max: f64,
    pub goal_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFrame {
    pub iteration: usize,
    /// Input `[c; x]` the action was evaluated at.
    pub s: Vec<f64>,
    pub action: Vec<f64>,
    pub coefficients: Coefficients,
    pub epistemic: f64,
    /// Session status after this step.
    pub status: RolloutStatus,
}

impl StepFrame {
    pub fn from_trace(step: &TraceStep<f64>, status: RolloutStatus) -> Self {
        let c = &step.coefficients;
        StepFrame {
            iteration: step.iteration,
            s: step.input.iter().copied().collect(),
            action: step.action.iter().copied().collect(),
            coefficients: Coefficients { pi_kmp: c.pi_kmp, pi_sp: c.pi_sp, pi_g: c.pi_g, k_max: c.k_max, goal_index: c.goal_index },
            epistemic: step.epistemic,
            status,
        }
    }
}

/// Context in force from `iteration` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextChange {
    pub iteration: usize,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Step(StepFrame),
    Done {
        status: RolloutStatus,
        success: bool,
        iterations: usize,
        /// Distance to the active goal; absent if no step was taken.
        terminal_distance: Option<f64>,
        /// Control steps taken, including ones whose frames were dropped.
        steps: usize,
        dropped_frames: usize,
        /// Context log, equivalent to a piecewise schedule.
        contexts: Vec<ContextChange>,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Deserialize)]
pub struct RolloutQuery {
    pub x0: String,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default)]
    pub lockstep: bool,
}

fn parse_list(name: &str, s: &str) -> Result<Vec<f64>, ApiError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| ApiError::bad_request(format!("`{name}` must be comma-separated finite numbers")))
        })
        .collect()
}

struct Session {
    model: Arc<StoredModel>,
    stepper: RolloutStepper<f64>,
    context: DVector<f64>,
    period: Option<Duration>,
}

pub async fn rollout(
    ws: WebSocketUpgrade,
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RolloutQuery>,
) -> Result<Response, ApiError> {
    let model = lookup(&state, &id)?;
    let strategy: Strategy = parse_strategy(q.strategy.as_deref())?;
    let m = &model.model;
    let x0 = DVector::from_vec(parse_list("x0", &q.x0)?);
    let context = match (&q.context, m.dims.context) {
        (Some(c), _) => DVector::from_vec(parse_list("context", c)?),
        (None, 0) => DVector::zeros(0),
        (None, c) => return Err(ApiError::bad_request(format!("model has {c} context inputs; `context` is required"))),
    };
    if context.len() != m.dims.context {
        return Err(ctxkmp::Error::DimensionMismatch(format!("context has {} values, model expects {}", context.len(), m.dims.context)).into());
    }
    let mut config = m.config.rollout_template(x0);
    config.schedule = ctxkmp::rollout::ContextSchedule::External;
    if let Some(n) = q.max_iters {
        config.max_iters = n;
    }
    let stepper = RolloutStepper::new(&m.kmp, &m.goals, &config, strategy)?;
    let rate = q.rate_hz.unwrap_or(state.config.rate_hz);
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(ApiError::bad_request("rate_hz must be positive"));
    }
    let period = (!q.lockstep).then(|| Duration::from_secs_f64(1.0 / rate));
    let buffer = state.config.frame_buffer;
    let session = Session { model, stepper, context, period };
    Ok(ws.on_upgrade(move |socket| run_session(socket, session, buffer)))
}

fn encode(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("serializable").into())
}

enum Control {
    Client(ClientMessage),
    Invalid(String),
    Closed,
}

async fn run_session(socket: WebSocket, mut session: Session, buffer: usize) {
    let (mut sink, mut stream) = socket.split();
    let (frames, mut frame_rx) = mpsc::channel::<Message>(buffer);
    let writer = tokio::spawn(async move {
        while let Some(msg) = frame_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let (ctl_tx, mut ctl_rx) = mpsc::unbounded_channel::<Control>();
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            let ctl = match msg {
                Message::Text(t) => match serde_json::from_str::<ClientMessage>(t.as_str()) {
                    Ok(m) => Control::Client(m),
                    Err(e) => Control::Invalid(format!("bad message: {e}")),
                },
                Message::Close(_) => break,
                _ => continue,
            };
            if ctl_tx.send(ctl).is_err() {
                return;
            }
        }
        let _ = ctl_tx.send(Control::Closed);
    });

    let m = &session.model.model;
    let params = m.fusion();
    let mut log = vec![ContextChange { iteration: 0, context: session.context.iter().copied().collect() }];
    let mut dropped = 0usize;
    let mut steps = 0usize;
    let mut ticker = session.period.map(|p| {
        let mut t = tokio::time::interval(p);
        t.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        t
    });
    'outer: while !session.stepper.status().is_terminal() {
        // Collect control messages up to the next step boundary.
        let paced = ticker.is_some();
        if let Some(t) = ticker.as_mut() {
            t.tick().await;
        }
        loop {
            let ctl = if paced {
                match ctl_rx.try_recv() {
                    Ok(c) => c,
                    Err(mpsc::error::TryRecvError::Empty) => break,
                    Err(mpsc::error::TryRecvError::Disconnected) => Control::Closed,
                }
            } else {
                ctl_rx.recv().await.unwrap_or(Control::Closed)
            };
            match ctl {
                Control::Client(ClientMessage::Step) => {
                    if session.period.is_none() {
                        break;
                    }
                }
                Control::Client(ClientMessage::SetContext { context }) => {
                    if context.len() != m.dims.context || context.iter().any(|v| !v.is_finite()) {
                        let message = format!("context must have {} finite values; keeping the previous one", m.dims.context);
                        if frames.send(encode(&ServerMessage::Error { message })).await.is_err() {
                            break 'outer;
                        }
                    } else {
                        session.context = DVector::from_vec(context);
                    }
                }
                Control::Client(ClientMessage::Cancel) | Control::Closed => {
                    session.stepper.cancel();
                    break 'outer;
                }
                Control::Invalid(message) => {
                    if frames.send(encode(&ServerMessage::Error { message })).await.is_err() {
                        break 'outer;
                    }
                }
            }
        }
        let iteration = session.stepper.iteration();
        let current: Vec<f64> = session.context.iter().copied().collect();
        if log.last().map(|c| &c.context) != Some(&current) {
            log.push(ContextChange { iteration, context: current });
        }
        let record = match session.stepper.step(&m.kmp, &m.goals, &params, &session.context) {
            Ok(r) => r,
            Err(e) => {
                let _ = frames.send(encode(&ServerMessage::Error { message: e.to_string() })).await;
                session.stepper.cancel();
                break;
            }
        };
        steps += 1;
        let frame = encode(&ServerMessage::Step(StepFrame::from_trace(&record, session.stepper.status())));
        match frames.try_send(frame) {
            Ok(()) => {}
            Err(mpsc::error::TrySendError::Full(_)) => dropped += 1,
            Err(mpsc::error::TrySendError::Closed(_)) => break,
        }
    }
    let status = session.stepper.status();
    let done = ServerMessage::Done {
        status,
        success: status == RolloutStatus::Succeeded,
        iterations: session.stepper.reported_iterations(),
        terminal_distance: Some(session.stepper.terminal_distance()).filter(|d| d.is_finite()),
        steps,
        dropped_frames: dropped,
        contexts: log,
    };
    let _ = frames.send(encode(&done)).await;
    drop(frames);
    let _ = writer.await;
    reader.abort();
}
