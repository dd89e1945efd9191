//! Rule guides steering the reverse diffusion: agent collision, map
//! collision and speed limits, their weighted sum and its gradient.
//!
//! Every guide is a non-negative penalty, zero exactly when the rule holds,
//! and weighted over time by a normalized exponential decay so earlier
//! violations dominate. Only moving agents (peak speed above
//! [`GuideConfig::moving_threshold`]) are penalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, VehicleDims};
use crate::map::{bbox_lattice, is_onroad, MapGrid};
use crate::scene::{Scene, StateTensor, THETA, V, X, Y};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideConfig {
    pub w_agent: f64,
    pub w_map: f64,
    pub w_speed: f64,
    /// Extra clearance added to the summed radii, meters.
    pub delta_buffer: f64,
    /// Temporal decay factor in (0, 1).
    pub gamma: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Side of the footprint sample lattice.
    pub grid_n: usize,
    /// Peak speed (m/s) above which an agent counts as moving.
    pub moving_threshold: f64,
    /// Finite-difference steps of the map term: meters, radians.
    pub fd_step_pos: f64,
    pub fd_step_theta: f64,
}

impl Default for GuideConfig {
    fn default() -> Self {
        GuideConfig {
            w_agent: 50.0,
            w_map: 1.0,
            w_speed: 1.0,
            delta_buffer: 1.0,
            gamma: 0.9,
            v_min: 0.5,
            v_max: 15.0,
            grid_n: 10,
            moving_threshold: 0.1,
            fd_step_pos: 0.05,
            fd_step_theta: 0.01,
        }
    }
}

impl GuideConfig {
    /// All weights zero.
    pub fn unguided() -> Self {
        GuideConfig {
            w_agent: 0.0,
            w_map: 0.0,
            w_speed: 0.0,
            ..GuideConfig::default()
        }
    }

    pub fn with_weights(w_agent: f64, w_map: f64, w_speed: f64) -> Self {
        GuideConfig {
            w_agent,
            w_map,
            w_speed,
            ..GuideConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_agent", self.w_agent),
            ("w_map", self.w_map),
            ("w_speed", self.w_speed),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min <= self.v_max) {
            return Err(Error::invalid("v_min must not exceed v_max"));
        }
        if !(self.delta_buffer.is_finite() && self.delta_buffer >= 0.0) {
            return Err(Error::invalid("delta_buffer must be >= 0"));
        }
        if self.grid_n < 2 {
            return Err(Error::invalid("grid_n must be >= 2"));
        }
        if !(self.fd_step_pos > 0.0 && self.fd_step_theta > 0.0) {
            return Err(Error::invalid("finite-difference steps must be positive"));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.w_agent == 0.0 && self.w_map == 0.0 && self.w_speed == 0.0
    }
}

/// `w(t) = γᵗ / Σₖ γᵏ` for `t = 1..=T`.
pub fn decay_weights(horizon: usize, gamma: f64) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::Empty("decay horizon"));
    }
    let raw: Vec<f64> = (1..=horizon).map(|t| gamma.powi(t as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|g| g / total).collect())
}

/// Per-guide penalties before weighting, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GuideBreakdown {
    pub agent: f64,
    pub map: f64,
    pub speed: f64,
    pub total: f64,
}

/// Borrowed view of a trajectory tensor with its per-agent attributes.
#[derive(Debug, Clone, Copy)]
pub struct Trajectories<'a> {
    pub states: &'a StateTensor,
    pub dims: &'a [VehicleDims],
    pub valid: &'a [bool],
}

impl<'a> Trajectories<'a> {
    pub fn of(scene: &'a Scene) -> Self {
        Trajectories {
            states: scene.states(),
            dims: scene.dims(),
            valid: scene.valid(),
        }
    }

    fn check(&self) -> Result<()> {
        let m = self.states.agents();
        if self.dims.len() != m || self.valid.len() != m {
            return Err(Error::shape(m, self.dims.len().min(self.valid.len())));
        }
        if self.states.steps() == 0 {
            return Err(Error::Empty("trajectory steps"));
        }
        Ok(())
    }
}

/// Valid agents whose peak |speed| exceeds the threshold.
pub fn moving_agents(traj: &Trajectories<'_>, threshold: f64) -> Vec<bool> {
    (0..traj.states.agents())
        .map(|i| {
            traj.valid[i]
                && (0..traj.states.steps()).any(|t| traj.states.get(t, i, V).abs() > threshold)
        })
        .collect()
}

fn agent_term(
    traj: &Trajectories<'_>,
    cfg: &GuideConfig,
    w: &[f64],
    moving: &[bool],
    mut grad: Option<&mut StateTensor>,
    scale: f64,
) -> f64 {
    let s = traj.states;
    let m = s.agents();
    let mut total = 0.0;
    for t in 0..s.steps() {
        for i in 0..m {
            if !moving[i] {
                continue;
            }
            for j in (i + 1)..m {
                if !moving[j] {
                    continue;
                }
                let d_safe = traj.dims[i].radius() + traj.dims[j].radius() + cfg.delta_buffer;
                let diff = s.position(t, i) - s.position(t, j);
                let d = diff.norm();
                if d >= d_safe {
                    continue;
                }
                // ordered pairs (i, j) and (j, i)
                total += 2.0 * w[t] * (1.0 - d / d_safe);
                if let Some(g) = grad.as_deref_mut() {
                    if d > 0.0 {
                        let k = scale * 2.0 * w[t] / (d_safe * d);
                        g.add(t, i, X, -k * diff.x);
                        g.add(t, i, Y, -k * diff.y);
                        g.add(t, j, X, k * diff.x);
                        g.add(t, j, Y, k * diff.y);
                    }
                }
            }
        }
    }
    total
}

fn speed_term(
    traj: &Trajectories<'_>,
    cfg: &GuideConfig,
    w: &[f64],
    moving: &[bool],
    mut grad: Option<&mut StateTensor>,
    scale: f64,
) -> f64 {
    let s = traj.states;
    let mut total = 0.0;
    for t in 0..s.steps() {
        for i in 0..s.agents() {
            if !moving[i] {
                continue;
            }
            let v = s.get(t, i, V);
            let (pen, sign) = if v > cfg.v_max {
                (v - cfg.v_max, 1.0)
            } else if v < cfg.v_min {
                (cfg.v_min - v, -1.0)
            } else {
                (0.0, 0.0)
            };
            total += w[t] * pen;
            if let Some(g) = grad.as_deref_mut() {
                if sign != 0.0 {
                    g.add(t, i, V, scale * w[t] * sign);
                }
            }
        }
    }
    total
}

/// Off-road lattice points of one straddling agent-timestep that lie within
/// a meter of the on-road set, with their per-point penalties.
struct Straddle {
    off_idx: Vec<usize>,
    terms: Vec<f64>,
}

/// `None` unless the footprint is partly on and partly off the road.
/// Per-point term: `max(1 − min_{p_on} ‖p_on − p_off‖, 0)`; points more
/// than a meter from the road add nothing rather than a negative amount.
fn classify(
    map: &MapGrid,
    center: Point2,
    heading: f64,
    dims: VehicleDims,
    n: usize,
    buf: &mut Vec<Point2>,
) -> Option<Straddle> {
    bbox_lattice(center, heading, dims.width(), dims.length(), n, buf);
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (k, p) in buf.iter().enumerate() {
        if is_onroad(map, *p) {
            on.push(*p);
        } else {
            off.push(k);
        }
    }
    if on.is_empty() || off.is_empty() {
        return None;
    }
    let mut st = Straddle {
        off_idx: Vec::new(),
        terms: Vec::new(),
    };
    for k in off {
        let nearest = on
            .iter()
            .map(|o| o.distance(buf[k]))
            .fold(f64::INFINITY, f64::min);
        if nearest < 1.0 {
            st.off_idx.push(k);
            st.terms.push(1.0 - nearest);
        }
    }
    Some(st)
}

fn map_term(
    traj: &Trajectories<'_>,
    map: &MapGrid,
    cfg: &GuideConfig,
    w: &[f64],
    moving: &[bool],
    mut grad: Option<&mut StateTensor>,
    scale: f64,
) -> f64 {
    let s = traj.states;
    let n = cfg.grid_n;
    let mut buf = Vec::with_capacity(n * n);
    let mut probe = Vec::with_capacity(n * n);
    let mut total = 0.0;
    for t in 0..s.steps() {
        for i in 0..s.agents() {
            if !moving[i] {
                continue;
            }
            let center = s.position(t, i);
            let heading = s.get(t, i, THETA);
            let dims = traj.dims[i];
            let Some(st) = classify(map, center, heading, dims, n, &mut buf) else {
                continue;
            };
            total += w[t] * st.terms.iter().sum::<f64>();
            if let Some(g) = grad.as_deref_mut() {
                // contributing points frozen at the base pose, each pulled
                // toward the nearest drivable cell
                let mut surrogate = |c: Point2, h: f64| {
                    bbox_lattice(c, h, dims.width(), dims.length(), n, &mut probe);
                    st.off_idx
                        .iter()
                        .map(|&k| map.distance_to_road(probe[k]))
                        .sum::<f64>()
                };
                let hp = cfg.fd_step_pos;
                let ht = cfg.fd_step_theta;
                let dx = (surrogate(center + Point2::new(hp, 0.0), heading)
                    - surrogate(center - Point2::new(hp, 0.0), heading))
                    / (2.0 * hp);
                let dy = (surrogate(center + Point2::new(0.0, hp), heading)
                    - surrogate(center - Point2::new(0.0, hp), heading))
                    / (2.0 * hp);
                let dth = (surrogate(center, heading + ht) - surrogate(center, heading - ht))
                    / (2.0 * ht);
                let k = scale * w[t];
                g.add(t, i, X, k * dx);
                g.add(t, i, Y, k * dy);
                g.add(t, i, THETA, k * dth);
            }
        }
    }
    total
}

/// Unweighted penalties and the weighted total on a raw tensor. The map
/// guide is skipped when `map` is `None` or its weight is zero.
pub fn evaluate(
    traj: &Trajectories<'_>,
    map: Option<&MapGrid>,
    cfg: &GuideConfig,
) -> Result<GuideBreakdown> {
    traj.check()?;
    let w = decay_weights(traj.states.steps(), cfg.gamma)?;
    let moving = moving_agents(traj, cfg.moving_threshold);
    let agent = agent_term(traj, cfg, &w, &moving, None, 0.0);
    let speed = speed_term(traj, cfg, &w, &moving, None, 0.0);
    let map_pen = match map {
        Some(m) if cfg.w_map != 0.0 => map_term(traj, m, cfg, &w, &moving, None, 0.0),
        _ => 0.0,
    };
    Ok(GuideBreakdown {
        agent,
        map: map_pen,
        speed,
        total: cfg.w_agent * agent + cfg.w_map * map_pen + cfg.w_speed * speed,
    })
}

/// Gradient of the weighted total with respect to every state entry.
/// Agent and speed terms are analytic; the map term uses central finite
/// differences on `(x, y, θ)`.
pub fn gradient(
    traj: &Trajectories<'_>,
    map: Option<&MapGrid>,
    cfg: &GuideConfig,
) -> Result<StateTensor> {
    traj.check()?;
    if !traj.states.is_finite() {
        return Err(Error::NonFinite("guide input states"));
    }
    let (steps, agents) = traj.states.shape();
    let mut grad = StateTensor::zeros(steps, agents);
    let w = decay_weights(steps, cfg.gamma)?;
    let moving = moving_agents(traj, cfg.moving_threshold);
    if cfg.w_agent != 0.0 {
        agent_term(traj, cfg, &w, &moving, Some(&mut grad), cfg.w_agent);
    }
    if cfg.w_speed != 0.0 {
        speed_term(traj, cfg, &w, &moving, Some(&mut grad), cfg.w_speed);
    }
    if let Some(m) = map {
        if cfg.w_map != 0.0 {
            map_term(traj, m, cfg, &w, &moving, Some(&mut grad), cfg.w_map);
        }
    }
    Ok(grad)
}

pub fn agent_collision_guide(scene: &Scene, cfg: &GuideConfig) -> f64 {
    let traj = Trajectories::of(scene);
    let w = decay_weights(scene.steps(), cfg.gamma).expect("scene has steps");
    let moving = moving_agents(&traj, cfg.moving_threshold);
    agent_term(&traj, cfg, &w, &moving, None, 0.0)
}

pub fn map_collision_guide(scene: &Scene, map: &MapGrid, cfg: &GuideConfig) -> f64 {
    let traj = Trajectories::of(scene);
    let w = decay_weights(scene.steps(), cfg.gamma).expect("scene has steps");
    let moving = moving_agents(&traj, cfg.moving_threshold);
    map_term(&traj, map, cfg, &w, &moving, None, 0.0)
}

pub fn speed_guide(scene: &Scene, cfg: &GuideConfig) -> f64 {
    let traj = Trajectories::of(scene);
    let w = decay_weights(scene.steps(), cfg.gamma).expect("scene has steps");
    let moving = moving_agents(&traj, cfg.moving_threshold);
    speed_term(&traj, cfg, &w, &moving, None, 0.0)
}

/// `w_agent·R_agent + w_map·R_map + w_speed·R_speed`.
pub fn total_guide(scene: &Scene, map: &MapGrid, cfg: &GuideConfig) -> f64 {
    evaluate(&Trajectories::of(scene), Some(map), cfg)
        .expect("scene invariants hold")
        .total
}

/// `∂𝒥/∂states`, shaped like the scene's state tensor.
pub fn guide_gradient(scene: &Scene, map: &MapGrid, cfg: &GuideConfig) -> Result<StateTensor> {
    gradient(&Trajectories::of(scene), Some(map), cfg)
}
