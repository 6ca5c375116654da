use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::actions::ActionContinuous;
use crate::geom::Vec2;
use crate::model::InverseModelOutput;
use crate::sim::{crossing_count, RasterImage, RopeState};

/// Raster on the wire: one byte per pixel, row-major, `round(255·v)`.
/// Zero is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRaster {
    pub width: usize,
    pub height: usize,
    pub bytes: String,
}

impl WireRaster {
    pub fn encode(img: &RasterImage) -> Self {
        let raw: Vec<u8> = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { width: img.width, height: img.height, bytes: STANDARD.encode(raw) }
    }

    pub fn decode(&self) -> Option<Vec<u8>> {
        let raw = STANDARD.decode(&self.bytes).ok()?;
        (raw.len() == self.width * self.height).then_some(raw)
    }
}

/// Body of `POST /session/{id}/action`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBody {
    /// cm
    pub pick: Vec2,
    /// radians
    pub theta: f64,
    /// cm
    pub length: f64,
}

impl From<ActionBody> for ActionContinuous {
    fn from(b: ActionBody) -> Self {
        ActionContinuous { pick: b.pick, theta: crate::actions::wrap_angle(b.theta), length: b.length }
    }
}

/// Body of `POST /session/{id}/imitate`. Every field is optional.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStart {
    /// Restore the rope recorded with the first keyframe.
    #[default]
    FirstKeyframe,
    /// Start from the rope as it is now.
    Current,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImitateBody {
    pub start: RunStart,
}

/// Body of `PUT /session/{id}/demo`: the keyframe ids to keep, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderBody {
    pub order: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Imitating { step: usize, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    State,
    Prediction,
    StepDone,
    RunDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub payload: Value,
}

/// Client → server WebSocket message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub ack: u64,
}

pub(crate) fn state_payload(state: &RopeState, raster: &RasterImage, run: RunState, cause: &str) -> Value {
    json!({
        "cause": cause,
        "nodes": state.nodes,
        "raster": WireRaster::encode(raster),
        "crossings": crossing_count(state),
        "run_state": run,
    })
}

pub(crate) fn prediction_payload(
    step: usize,
    out: &InverseModelOutput,
    grid: usize,
    pick_px: Vec2,
    action: &ActionContinuous,
) -> Value {
    json!({
        "step": step,
        "grid": grid,
        "p_dist": out.p_dist,
        "theta_dist": out.theta_dist,
        "len_dist": out.len_dist,
        "cell": out.argmax_action.cell,
        "theta_bin": out.argmax_action.theta_bin,
        "len_bin": out.argmax_action.len_bin,
        "pick_px": pick_px,
        "action": action,
    })
}
