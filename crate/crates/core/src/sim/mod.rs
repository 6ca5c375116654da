//! Planar rope world.
//!
//! The rope is a chain of nodes joined by inextensible segments, with node 0
//! pinned to a clamp on the left edge of the table. Actions grab the node
//! nearest a pick point and drag it along a straight displacement; the rest of
//! the chain follows through position-based constraint projection. There is no
//! inertia by default (`damping = 1`), so a rope at rest stays at rest.
//!
//! Coordinates are centimetres with the y axis pointing down, matching raster
//! rows. The centimetre-to-pixel map is a uniform scale `raster_width / workspace.width`.

mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actions::ActionContinuous;
use crate::error::{Error, Result};
use crate::geom::{segments_cross, Vec2, Workspace};

pub use render::{render, rope_pixel_count, RasterImage};

/// Kinematic sub-steps per pick/drop move.
pub const SUBSTEPS: usize = 10;

/// Iterations of unpinned relaxation after the gripper releases the rope.
const SETTLE_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub node_count: usize,
    /// cm
    pub rest_segment_len: f64,
    pub workspace: Workspace,
    /// Clamp position in cm; must lie on the workspace boundary.
    pub anchor: Vec2,
    pub solver_iters: usize,
    /// Fraction of sub-step velocity removed between sub-steps. 1 is fully quasi-static.
    pub damping: f64,
    /// cm
    pub grasp_radius: f64,
    pub stroke_width_px: u32,
    pub raster_width: usize,
    pub raster_height: usize,
    /// Weight of the second-neighbour (bending) constraint.
    pub stiffness: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            node_count: 50,
            rest_segment_len: 0.8,
            workspace: Workspace {
                width: 64.0,
                height: 64.0,
            },
            anchor: Vec2::new(0.0, 32.0),
            solver_iters: 40,
            damping: 1.0,
            grasp_radius: 2.0,
            stroke_width_px: 2,
            raster_width: 64,
            raster_height: 64,
            stiffness: 0.1,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.node_count < 3 {
            return bad("node_count must be >= 3");
        }
        if !(self.rest_segment_len > 0.0) {
            return bad("rest_segment_len must be > 0");
        }
        if !(self.grasp_radius > 0.0) {
            return bad("grasp_radius must be > 0");
        }
        if self.raster_width < 32 || self.raster_height < 32 {
            return bad("raster dimensions must be >= 32");
        }
        if self.stroke_width_px == 0 {
            return bad("stroke_width_px must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return bad("damping must lie in [0, 1]");
        }
        if !(self.stiffness >= 0.0 && self.stiffness <= 1.0) {
            return bad("stiffness must lie in [0, 1]");
        }
        let ws = self.workspace;
        if !(ws.width > 0.0 && ws.height > 0.0) {
            return bad("workspace must have positive extent");
        }
        let sx = self.raster_width as f64 / ws.width;
        let sy = self.raster_height as f64 / ws.height;
        if ((sx - sy) / sx).abs() > 1e-9 {
            return bad("raster aspect ratio must match the workspace (uniform cm-to-pixel scale)");
        }
        if !ws.contains(self.anchor) {
            return bad("anchor must lie inside the workspace");
        }
        let end = self.anchor.x + (self.node_count - 1) as f64 * self.rest_segment_len;
        if end > ws.width {
            return bad("straight reset rope does not fit in the workspace");
        }
        Ok(())
    }

    /// Pixels per centimetre.
    pub fn px_per_cm(&self) -> f64 {
        self.raster_width as f64 / self.workspace.width
    }

    pub fn cm_to_px(&self, p: Vec2) -> Vec2 {
        p * self.px_per_cm()
    }

    pub fn px_to_cm(&self, p: Vec2) -> Vec2 {
        p * (1.0 / self.px_per_cm())
    }

    pub fn rope_length(&self) -> f64 {
        (self.node_count - 1) as f64 * self.rest_segment_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeState {
    pub nodes: Vec<Vec2>,
    pub clamp_index: usize,
}

impl RopeState {
    pub fn from_nodes(nodes: Vec<Vec2>) -> Self {
        Self {
            nodes,
            clamp_index: 0,
        }
    }

    /// Largest relative deviation of a segment length from `rest`.
    pub fn max_segment_residual(&self, rest: f64) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| ((w[1] - w[0]).norm() - rest).abs() / rest)
            .fold(0.0, f64::max)
    }

    pub fn translated(&self, d: Vec2) -> Self {
        Self {
            nodes: self.nodes.iter().map(|&p| p + d).collect(),
            clamp_index: self.clamp_index,
        }
    }

    /// Index of the node nearest `p`; ties resolve to the lowest index.
    pub fn nearest_node(&self, p: Vec2) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.dist_sq(p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn arc_length(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

/// Straight rope from the clamp along +x.
pub fn reset_rope(config: &SimConfig) -> RopeState {
    let nodes = (0..config.node_count)
        .map(|k| config.anchor + Vec2::new(k as f64 * config.rest_segment_len, 0.0))
        .collect();
    RopeState::from_nodes(nodes)
}

fn project_distance(nodes: &mut [Vec2], i: usize, j: usize, rest: f64, wi: f64, wj: f64, k: f64) {
    let w = wi + wj;
    if w == 0.0 {
        return;
    }
    let d = nodes[j] - nodes[i];
    let len = d.norm();
    if len < 1e-12 {
        return;
    }
    let corr = d * (k * (len - rest) / (len * w));
    nodes[i] += corr * wi;
    nodes[j] -= corr * wj;
}

fn relax(
    nodes: &mut [Vec2],
    inv_mass: &[f64],
    rest: f64,
    bend_rest: &[f64],
    stiffness: f64,
    ws: &Workspace,
) {
    let n = nodes.len();
    for i in 0..n - 1 {
        project_distance(nodes, i, i + 1, rest, inv_mass[i], inv_mass[i + 1], 1.0);
    }
    if stiffness > 0.0 {
        for i in 0..n - 2 {
            project_distance(
                nodes,
                i,
                i + 2,
                bend_rest[i],
                inv_mass[i],
                inv_mass[i + 2],
                stiffness,
            );
        }
    }
    for (p, &w) in nodes.iter_mut().zip(inv_mass) {
        if w > 0.0 {
            *p = ws.clamp(*p);
        }
    }
}

/// Point at distance `r` from `center` that lies inside the workspace and is
/// closest to `desired`. `center` must be inside the workspace.
fn place_on_circle(center: Vec2, r: f64, desired: Vec2, ws: &Workspace) -> Vec2 {
    if ws.contains(desired) {
        return desired;
    }
    let eps = 1e-9;
    let mut best: Option<(f64, Vec2)> = None;
    let mut consider = |p: Vec2| {
        if p.x >= -eps && p.x <= ws.width + eps && p.y >= -eps && p.y <= ws.height + eps {
            let p = ws.clamp(p);
            let d = p.dist_sq(desired);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, p));
            }
        }
    };
    for x in [0.0, ws.width] {
        let dx = x - center.x;
        let h = r * r - dx * dx;
        if h >= 0.0 {
            let s = h.sqrt();
            consider(Vec2::new(x, center.y - s));
            consider(Vec2::new(x, center.y + s));
        }
    }
    for y in [0.0, ws.height] {
        let dy = y - center.y;
        let h = r * r - dy * dy;
        if h >= 0.0 {
            let s = h.sqrt();
            consider(Vec2::new(center.x - s, y));
            consider(Vec2::new(center.x + s, y));
        }
    }
    best.map(|(_, p)| p).unwrap_or_else(|| ws.clamp(desired))
}

/// Walks the chain outward from the clamp, restoring exact segment lengths
/// while keeping every node inside the workspace.
fn enforce_lengths(nodes: &mut [Vec2], rest: f64, ws: &Workspace) {
    let mut prev_dir = Vec2::new(1.0, 0.0);
    for i in 1..nodes.len() {
        let d = nodes[i] - nodes[i - 1];
        let len = d.norm();
        let dir = if len > 1e-12 { d * (1.0 / len) } else { prev_dir };
        let desired = nodes[i - 1] + dir * rest;
        nodes[i] = place_on_circle(nodes[i - 1], rest, desired, ws);
        prev_dir = dir;
    }
}

/// Executes one pick/drop move and returns the relaxed rope.
pub fn apply_action(
    state: &RopeState,
    action: &ActionContinuous,
    config: &SimConfig,
) -> Result<RopeState> {
    let ws = &config.workspace;
    if !action.pick.is_finite() || !ws.contains(action.pick) {
        return Err(Error::OutOfWorkspace {
            x: action.pick.x,
            y: action.pick.y,
        });
    }
    let n = state.nodes.len();
    let rest = config.rest_segment_len;
    let grasped = state.nearest_node(action.pick);
    let displacement = Vec2::from_polar(action.length, action.theta);

    let mut nodes = state.nodes.clone();
    let clamp = nodes[0];
    let bend_rest: Vec<f64> = (0..n.saturating_sub(2))
        .map(|i| nodes[i].dist(nodes[i + 2]))
        .collect();

    let mut inv_mass = vec![1.0; n];
    inv_mass[0] = 0.0;
    inv_mass[grasped] = 0.0;

    let start = nodes[grasped];
    let carry = 1.0 - config.damping;
    let mut prev = nodes.clone();
    for s in 1..=SUBSTEPS {
        if carry > 0.0 {
            for i in 0..n {
                if inv_mass[i] > 0.0 {
                    let v = nodes[i] - prev[i];
                    prev[i] = nodes[i];
                    nodes[i] = ws.clamp(nodes[i] + v * carry);
                }
            }
        }
        if grasped != 0 {
            nodes[grasped] = ws.clamp(start + displacement * (s as f64 / SUBSTEPS as f64));
        }
        for _ in 0..config.solver_iters {
            relax(&mut nodes, &inv_mass, rest, &bend_rest, config.stiffness, ws);
        }
    }

    // Release: only the clamp stays pinned.
    inv_mass[grasped] = if grasped == 0 { 0.0 } else { 1.0 };
    for _ in 0..SETTLE_ITERS {
        relax(&mut nodes, &inv_mass, rest, &bend_rest, config.stiffness, ws);
    }
    nodes[0] = clamp;
    enforce_lengths(&mut nodes, rest, ws);

    Ok(RopeState {
        nodes,
        clamp_index: 0,
    })
}

/// Point drawn uniformly by arc length along the rope polyline.
pub fn sample_point_on_rope<R: Rng + ?Sized>(state: &RopeState, rng: &mut R) -> Vec2 {
    let lens: Vec<f64> = state.nodes.windows(2).map(|w| w[0].dist(w[1])).collect();
    let total: f64 = lens.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &l) in lens.iter().enumerate() {
        if u <= l || i == lens.len() - 1 {
            let t = if l > 0.0 { (u / l).min(1.0) } else { 0.0 };
            let (a, b) = (state.nodes[i], state.nodes[i + 1]);
            return a + (b - a) * t;
        }
        u -= l;
    }
    state.nodes[0]
}

/// Number of transverse self-intersections of the open polyline, ignoring
/// adjacent segments. Uses a sweep over segment x-extents.
pub fn crossing_count(state: &RopeState) -> usize {
    let segs: Vec<(usize, f64, f64)> = state
        .nodes
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i, w[0].x.min(w[1].x), w[0].x.max(w[1].x)))
        .collect();
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| segs[a].1.total_cmp(&segs[b].1).then(a.cmp(&b)));

    let mut active: Vec<usize> = Vec::new();
    let mut count = 0;
    for &s in &order {
        let (i, lo, _) = segs[s];
        active.retain(|&a| segs[a].2 >= lo);
        for &a in &active {
            let j = segs[a].0;
            if i.abs_diff(j) < 2 {
                continue;
            }
            let (p1, p2) = (state.nodes[i], state.nodes[i + 1]);
            let (p3, p4) = (state.nodes[j], state.nodes[j + 1]);
            if segments_cross(p1, p2, p3, p4) {
                count += 1;
            }
        }
        active.push(s);
    }
    count
}

/// A single rope world: configuration plus the live state.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SimConfig,
    pub state: RopeState,
}

impl World {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let state = reset_rope(&config);
        Ok(Self { config, state })
    }

    pub fn with_state(config: SimConfig, state: RopeState) -> Result<Self> {
        config.validate()?;
        if state.nodes.len() != config.node_count {
            return Err(Error::InvalidConfig(format!(
                "state has {} nodes, config expects {}",
                state.nodes.len(),
                config.node_count
            )));
        }
        Ok(Self { config, state })
    }

    pub fn reset(&mut self) {
        self.state = reset_rope(&self.config);
    }

    pub fn step(&mut self, action: &ActionContinuous) -> Result<()> {
        self.state = apply_action(&self.state, action, &self.config)?;
        Ok(())
    }

    pub fn observe(&self) -> RasterImage {
        render(&self.state, &self.config)
    }
}
