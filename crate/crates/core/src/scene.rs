//! Multi-agent trajectories: the raw `[T × M × 4]` state tensor and the
//! validated [`Scene`] built on top of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, AgentState, Point2, VehicleDims};

/// Number of state channels: x, y, v, theta.
pub const CHANNELS: usize = 4;

pub const X: usize = 0;
pub const Y: usize = 1;
pub const V: usize = 2;
pub const THETA: usize = 3;

/// Default step duration, 2 Hz.
pub const DEFAULT_DT: f64 = 0.5;

/// Dense `[steps][agents][channel]` tensor of raw state values. Unlike
/// [`Scene`] it carries no invariants, so intermediate diffusion samples
/// (negative speeds, unwrapped headings) are representable.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    steps: usize,
    agents: usize,
    data: Vec<f64>,
}

impl StateTensor {
    pub fn zeros(steps: usize, agents: usize) -> Self {
        StateTensor {
            steps,
            agents,
            data: vec![0.0; steps * agents * CHANNELS],
        }
    }

    pub fn from_vec(steps: usize, agents: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != steps * agents * CHANNELS {
            return Err(Error::shape(steps * agents * CHANNELS, data.len()));
        }
        Ok(StateTensor {
            steps,
            agents,
            data,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.steps, self.agents)
    }

    #[inline]
    pub fn index(&self, t: usize, i: usize, c: usize) -> usize {
        (t * self.agents + i) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize, c: usize) -> f64 {
        self.data[self.index(t, i, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, i: usize, c: usize, value: f64) {
        let k = self.index(t, i, c);
        self.data[k] = value;
    }

    #[inline]
    pub fn add(&mut self, t: usize, i: usize, c: usize, value: f64) {
        let k = self.index(t, i, c);
        self.data[k] += value;
    }

    pub fn position(&self, t: usize, i: usize) -> Point2 {
        Point2::new(self.get(t, i, X), self.get(t, i, Y))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `[steps × channels]` block of one agent, time-major.
    pub fn agent_block(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps * CHANNELS);
        for t in 0..self.steps {
            let k = self.index(t, i, 0);
            out.extend_from_slice(&self.data[k..k + CHANNELS]);
        }
        out
    }

    pub fn set_agent_block(&mut self, i: usize, block: &[f64]) {
        debug_assert_eq!(block.len(), self.steps * CHANNELS);
        for t in 0..self.steps {
            let k = self.index(t, i, 0);
            self.data[k..k + CHANNELS].copy_from_slice(&block[t * CHANNELS..(t + 1) * CHANNELS]);
        }
    }

    /// Reorders agents so that output agent `j` is input agent `perm[j]`.
    pub fn permute_agents(&self, perm: &[usize]) -> StateTensor {
        let mut out = StateTensor::zeros(self.steps, self.agents);
        for (j, &src) in perm.iter().enumerate() {
            out.set_agent_block(j, &self.agent_block(src));
        }
        out
    }

    pub fn check_same_shape(&self, other: &StateTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// A generated or recorded multi-agent scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    states: StateTensor,
    dims: Vec<VehicleDims>,
    valid: Vec<bool>,
    dt: f64,
    map_id: String,
}

impl Scene {
    /// Validates and canonicalizes `states`: headings are wrapped into
    /// `(-π, π]`. Negative speeds are rejected.
    pub fn new(
        mut states: StateTensor,
        dims: Vec<VehicleDims>,
        valid: Vec<bool>,
        dt: f64,
        map_id: impl Into<String>,
    ) -> Result<Self> {
        if states.steps() < 2 {
            return Err(Error::invalid(format!(
                "scene needs at least 2 steps, got {}",
                states.steps()
            )));
        }
        if states.agents() < 1 {
            return Err(Error::invalid("scene needs at least one agent"));
        }
        if dims.len() != states.agents() {
            return Err(Error::shape(states.agents(), dims.len()));
        }
        if valid.len() != states.agents() {
            return Err(Error::shape(states.agents(), valid.len()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if !states.is_finite() {
            return Err(Error::NonFinite("scene states"));
        }
        for t in 0..states.steps() {
            for i in 0..states.agents() {
                if states.get(t, i, V) < 0.0 {
                    return Err(Error::invalid(format!(
                        "negative speed at t={t}, agent={i}"
                    )));
                }
                let th = normalize_angle(states.get(t, i, THETA));
                states.set(t, i, THETA, th);
            }
        }
        Ok(Scene {
            states,
            dims,
            valid,
            dt,
            map_id: map_id.into(),
        })
    }

    /// Builds a scene from a raw sample: speeds are clamped at zero and
    /// headings wrapped.
    pub fn from_raw(
        mut states: StateTensor,
        dims: Vec<VehicleDims>,
        dt: f64,
        map_id: impl Into<String>,
    ) -> Result<Self> {
        for t in 0..states.steps() {
            for i in 0..states.agents() {
                let v = states.get(t, i, V);
                states.set(t, i, V, v.max(0.0));
            }
        }
        let m = states.agents();
        Scene::new(states, dims, vec![true; m], dt, map_id)
    }

    pub fn steps(&self) -> usize {
        self.states.steps()
    }

    pub fn agents(&self) -> usize {
        self.states.agents()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn map_id(&self) -> &str {
        &self.map_id
    }

    pub fn states(&self) -> &StateTensor {
        &self.states
    }

    pub fn dims(&self) -> &[VehicleDims] {
        &self.dims
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn state(&self, t: usize, i: usize) -> AgentState {
        let s = &self.states;
        AgentState::new(
            s.get(t, i, X),
            s.get(t, i, Y),
            s.get(t, i, V),
            s.get(t, i, THETA),
        )
        .expect("scene invariants hold")
    }

    pub fn positions(&self, i: usize) -> Vec<Point2> {
        (0..self.steps())
            .map(|t| self.states.position(t, i))
            .collect()
    }

    pub fn permute_agents(&self, perm: &[usize]) -> Scene {
        Scene {
            states: self.states.permute_agents(perm),
            dims: perm.iter().map(|&p| self.dims[p]).collect(),
            valid: perm.iter().map(|&p| self.valid[p]).collect(),
            dt: self.dt,
            map_id: self.map_id.clone(),
        }
    }

    pub fn with_map_id(mut self, map_id: impl Into<String>) -> Scene {
        self.map_id = map_id.into();
        self
    }
}

/// On-disk agent record inside a scene file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRecord {
    pub dims: VehicleDims,
    #[serde(default = "default_true")]
    pub valid: bool,
    pub states: Vec<[f64; 4]>,
}

fn default_true() -> bool {
    true
}

impl Scene {
    pub fn agent_records(&self) -> Vec<AgentRecord> {
        (0..self.agents())
            .map(|i| AgentRecord {
                dims: self.dims[i],
                valid: self.valid[i],
                states: (0..self.steps())
                    .map(|t| {
                        [
                            self.states.get(t, i, X),
                            self.states.get(t, i, Y),
                            self.states.get(t, i, V),
                            self.states.get(t, i, THETA),
                        ]
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn from_records(records: &[AgentRecord], dt: f64, map_id: &str) -> Result<Scene> {
        let m = records.len();
        if m == 0 {
            return Err(Error::Empty("agents"));
        }
        let steps = records[0].states.len();
        let mut states = StateTensor::zeros(steps, m);
        for (i, rec) in records.iter().enumerate() {
            if rec.states.len() != steps {
                return Err(Error::shape(steps, rec.states.len()));
            }
            for (t, s) in rec.states.iter().enumerate() {
                for (c, v) in s.iter().enumerate() {
                    states.set(t, i, c, *v);
                }
            }
        }
        Scene::new(
            states,
            records.iter().map(|r| r.dims).collect(),
            records.iter().map(|r| r.valid).collect(),
            dt,
            map_id,
        )
    }
}
