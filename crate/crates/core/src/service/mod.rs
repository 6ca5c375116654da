//! Session backend: a live simulator per session, keyframe recording and
//! asynchronous imitation runs, served over HTTP with a WebSocket event
//! stream. The wire protocol is described in `docs/protocol.md`.

mod http;
mod wire;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde_json::{json, Value};
use tokio::sync::watch;

use crate::actions::{ActionContinuous, LEN_MAX};
use crate::controllers::{imitate_with, Demonstration, Provenance, TraceEvent};
use crate::error::Error;
use crate::model::InverseDynamics;
use crate::registration::RegistrationParams;
use crate::sim::{crossing_count, RasterImage, RopeState, SimConfig, World};

pub use http::{router, serve};
pub use wire::{Ack, ActionBody, Event, EventType, ImitateBody, ReorderBody, RunStart, RunState, WireRaster};

pub const DEFAULT_BIND: &str = "127.0.0.1:8750";

/// Failure of a service call, mapped onto an HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    /// 404
    UnknownSession(String),
    /// 409
    Busy,
    /// 422
    Invalid { field: Option<String>, message: String },
    /// 503
    NoModel,
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::UnknownSession(_) => 404,
            ApiError::Busy => 409,
            ApiError::Invalid { .. } => 422,
            ApiError::NoModel => 503,
        }
    }

    pub fn body(&self) -> Value {
        let (code, message, field) = match self {
            ApiError::UnknownSession(id) => ("unknown_session", format!("no session `{id}`"), None),
            ApiError::Busy => ("busy", "an imitation run is in progress".to_string(), None),
            ApiError::Invalid { field, message } => ("invalid_payload", message.clone(), field.clone()),
            ApiError::NoModel => ("no_model", "the service was started without a model checkpoint".to_string(), None),
        };
        json!({ "error": { "code": code, "message": message, "field": field } })
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid { field: Some(field.to_string()), message: message.into() }
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

struct Keyframe {
    id: u64,
    raster: RasterImage,
    state: RopeState,
}

struct Inner {
    world: World,
    keyframes: Vec<Keyframe>,
    next_keyframe: u64,
    run: RunState,
    events: Vec<Event>,
    acked: u64,
    closed: bool,
}

pub struct Session {
    pub id: String,
    inner: Mutex<Inner>,
    /// Latest sequence number; bumped with every event.
    latest: watch::Sender<u64>,
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push(&self, inner: &mut Inner, kind: EventType, payload: Value) -> u64 {
        let seq = inner.events.last().map_or(1, |e| e.seq + 1);
        inner.events.push(Event { seq, kind, payload });
        self.latest.send_replace(seq);
        seq
    }

    fn push_state(&self, inner: &mut Inner, cause: &str) {
        let raster = inner.world.observe();
        let payload = wire::state_payload(&inner.world.state, &raster, inner.run, cause);
        self.push(inner, EventType::State, payload);
    }

    /// Events with `seq > after`.
    pub fn events_after(&self, after: u64) -> Vec<Event> {
        let inner = self.lock();
        let start = inner.events.partition_point(|e| e.seq <= after);
        inner.events[start..].to_vec()
    }

    pub fn acked(&self) -> u64 {
        self.lock().acked
    }

    pub fn ack(&self, seq: u64) {
        let mut inner = self.lock();
        inner.acked = inner.acked.max(seq);
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.latest.subscribe()
    }
}

/// Everything the service shares between sessions.
pub struct ServiceState {
    pub sim: SimConfig,
    pub registration: RegistrationParams,
    model: Option<Arc<dyn InverseDynamics>>,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    counter: AtomicU64,
}

impl ServiceState {
    pub fn new(sim: SimConfig, registration: RegistrationParams, model: Option<Arc<dyn InverseDynamics>>) -> crate::Result<Self> {
        sim.validate()?;
        registration.validate()?;
        Ok(Self { sim, registration, model, sessions: Mutex::new(HashMap::new()), counter: AtomicU64::new(0) })
    }

    fn sessions(&self) -> MutexGuard<'_, HashMap<String, Arc<Session>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions().get(id).cloned().ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self) -> Value {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("s{n}");
        let world = World::new(self.sim.clone()).expect("validated sim");
        let (latest, _) = watch::channel(0);
        let session = Arc::new(Session {
            id: id.clone(),
            inner: Mutex::new(Inner {
                world,
                keyframes: Vec::new(),
                next_keyframe: 0,
                run: RunState::Idle,
                events: Vec::new(),
                acked: 0,
                closed: false,
            }),
            latest,
        });
        {
            let mut inner = session.lock();
            session.push_state(&mut inner, "created");
        }
        self.sessions().insert(id.clone(), session);
        let mut body = self.state(&id).expect("just inserted");
        body["id"] = json!(id);
        body
    }

    pub fn delete_session(&self, id: &str) -> ApiResult<()> {
        let s = self.sessions().remove(id).ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
        s.lock().closed = true;
        s.latest.send_modify(|_| {});
        Ok(())
    }

    pub fn state(&self, id: &str) -> ApiResult<Value> {
        let s = self.session(id)?;
        let inner = s.lock();
        let raster = inner.world.observe();
        Ok(json!({
            "id": s.id,
            "nodes": inner.world.state.nodes,
            "raster": WireRaster::encode(&raster),
            "crossings": crossing_count(&inner.world.state),
            "run_state": inner.run,
            "keyframe_ids": inner.keyframes.iter().map(|k| k.id).collect::<Vec<_>>(),
            "seq": inner.events.last().map_or(0, |e| e.seq),
        }))
    }

    pub fn action(&self, id: &str, body: ActionBody) -> ApiResult<Value> {
        let s = self.session(id)?;
        if !body.pick.is_finite() {
            return Err(ApiError::invalid("pick", "pick must be finite"));
        }
        if !body.theta.is_finite() {
            return Err(ApiError::invalid("theta", "theta must be finite"));
        }
        if !(0.0..=LEN_MAX).contains(&body.length) {
            return Err(ApiError::invalid("length", format!("length must lie in [0, {LEN_MAX}] cm")));
        }
        let mut inner = s.lock();
        if inner.run != RunState::Idle {
            return Err(ApiError::Busy);
        }
        let a: ActionContinuous = body.into();
        inner.world.step(&a).map_err(|e| match e {
            Error::OutOfWorkspace { .. } => ApiError::invalid("pick", e.to_string()),
            other => ApiError::Invalid { field: None, message: other.to_string() },
        })?;
        s.push_state(&mut inner, "action");
        let raster = inner.world.observe();
        Ok(json!({
            "nodes": inner.world.state.nodes,
            "raster": WireRaster::encode(&raster),
            "crossings": crossing_count(&inner.world.state),
        }))
    }

    pub fn keyframe(&self, id: &str) -> ApiResult<Value> {
        let s = self.session(id)?;
        let mut inner = s.lock();
        if inner.run != RunState::Idle {
            return Err(ApiError::Busy);
        }
        let kid = inner.next_keyframe;
        inner.next_keyframe += 1;
        let raster = inner.world.observe();
        let state = inner.world.state.clone();
        inner.keyframes.push(Keyframe { id: kid, raster, state });
        Ok(json!({ "keyframe_id": kid, "count": inner.keyframes.len() }))
    }

    pub fn reset(&self, id: &str) -> ApiResult<Value> {
        let s = self.session(id)?;
        let mut inner = s.lock();
        if inner.run != RunState::Idle {
            return Err(ApiError::Busy);
        }
        inner.world.reset();
        s.push_state(&mut inner, "reset");
        drop(inner);
        self.state(id)
    }

    /// The recorded keyframes in the demonstration file format.
    pub fn demo(&self, id: &str) -> ApiResult<Demonstration> {
        let s = self.session(id)?;
        let inner = s.lock();
        Ok(Demonstration {
            keyframes: inner.keyframes.iter().map(|k| k.raster.clone()).collect(),
            states: Some(inner.keyframes.iter().map(|k| k.state.clone()).collect()),
            actions: None,
            provenance: Provenance::HumanUi { session: s.id.clone() },
        })
    }

    /// Keeps the listed keyframes in the listed order.
    pub fn reorder(&self, id: &str, body: &ReorderBody) -> ApiResult<Value> {
        let s = self.session(id)?;
        let mut inner = s.lock();
        if inner.run != RunState::Idle {
            return Err(ApiError::Busy);
        }
        let mut kept = Vec::with_capacity(body.order.len());
        let mut pool: Vec<Option<Keyframe>> = std::mem::take(&mut inner.keyframes).into_iter().map(Some).collect();
        let mut missing = None;
        for (i, kid) in body.order.iter().enumerate() {
            match pool.iter_mut().find(|k| k.as_ref().is_some_and(|k| k.id == *kid)).and_then(Option::take) {
                Some(k) => kept.push(k),
                None => {
                    missing = Some(i);
                    break;
                }
            }
        }
        if let Some(i) = missing {
            kept.extend(pool.into_iter().flatten());
            kept.sort_by_key(|k| k.id);
            inner.keyframes = kept;
            return Err(ApiError::invalid(&format!("order[{i}]"), "unknown or repeated keyframe id"));
        }
        inner.keyframes = kept;
        Ok(json!({ "keyframe_ids": inner.keyframes.iter().map(|k| k.id).collect::<Vec<_>>() }))
    }

    /// Starts an imitation run over the recorded keyframes on a worker
    /// thread. Progress arrives on the event stream.
    pub fn imitate(&self, id: &str, body: ImitateBody) -> ApiResult<Value> {
        let s = self.session(id)?;
        let model = self.model.clone().ok_or(ApiError::NoModel)?;
        let mut inner = s.lock();
        if inner.run != RunState::Idle {
            return Err(ApiError::Busy);
        }
        let demo = Demonstration {
            keyframes: inner.keyframes.iter().map(|k| k.raster.clone()).collect(),
            states: None,
            actions: None,
            provenance: Provenance::HumanUi { session: s.id.clone() },
        };
        demo.validate().map_err(|e| ApiError::Invalid { field: Some("keyframes".into()), message: e.to_string() })?;
        if body.start == RunStart::FirstKeyframe {
            inner.world.state = inner.keyframes[0].state.clone();
        }
        let steps = demo.len() - 1;
        inner.run = RunState::Imitating { step: 0, steps };
        s.push_state(&mut inner, "run_started");
        let mut world = inner.world.clone();
        drop(inner);

        let reg = self.registration.clone();
        let grid = model.discretization().grid;
        let session = s.clone();
        std::thread::spawn(move || {
            let result = imitate_with(model.as_ref(), &mut world, &demo, &reg, |ev| {
                let mut inner = session.lock();
                match ev {
                    TraceEvent::Prediction { step, output, pick_px, action } => {
                        let p = wire::prediction_payload(step, output, grid, pick_px, action);
                        session.push(&mut inner, EventType::Prediction, p);
                    }
                    TraceEvent::StepDone { step, state } => {
                        inner.world.state = state.clone();
                        inner.run = RunState::Imitating { step: step.step + 1, steps };
                        let p = json!({
                            "step": step.step,
                            "action": step.action,
                            "distance": step.distance,
                            "error": step.error,
                            "nodes": state.nodes,
                            "raster": WireRaster::encode(&step.post),
                            "crossings": crossing_count(state),
                        });
                        session.push(&mut inner, EventType::StepDone, p);
                    }
                }
            });
            let mut inner = session.lock();
            inner.run = RunState::Idle;
            let payload = match result {
                Ok(trace) => json!({
                    "steps": trace.steps.len(),
                    "distances": trace.steps.iter().map(|s| s.distance).collect::<Vec<_>>(),
                    "final_distance": trace.final_distance(),
                    "error": Value::Null,
                }),
                Err(e) => json!({ "steps": 0, "distances": [], "final_distance": Value::Null, "error": e.to_string() }),
            };
            session.push(&mut inner, EventType::RunDone, payload);
        });
        Ok(json!({ "steps": steps }))
    }
}

#[cfg(test)]
mod tests;
