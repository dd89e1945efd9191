#![allow(dead_code)]

use egoscene::geometry::VehicleDims;
use egoscene::guides::{evaluate, gradient, GuideConfig, Trajectories};
use egoscene::scene::{Scene, StateTensor, CHANNELS, THETA, V, X, Y};
use rand::Rng;

pub struct RawScene {
    pub states: StateTensor,
    pub dims: Vec<VehicleDims>,
    pub valid: Vec<bool>,
}

impl RawScene {
    pub fn traj(&self) -> Trajectories<'_> {
        Trajectories {
            states: &self.states,
            dims: &self.dims,
            valid: &self.valid,
        }
    }

    pub fn scene(&self) -> Scene {
        Scene::new(
            self.states.clone(),
            self.dims.clone(),
            self.valid.clone(),
            0.5,
            "m",
        )
        .unwrap()
    }
}

/// Crowded agents with some speeds outside the default band, so both the
/// agent and the speed guide are active.
pub fn violating_scene(rng: &mut impl Rng) -> RawScene {
    let steps = rng.random_range(4..10);
    let agents = rng.random_range(2..6);
    let mut states = StateTensor::zeros(steps, agents);
    for i in 0..agents {
        let (x0, y0) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let th = rng.random_range(-3.0..3.0f64);
        for t in 0..steps {
            states.set(
                t,
                i,
                X,
                x0 + rng.random_range(-1.5..1.5) + 0.3 * t as f64 * th.cos(),
            );
            states.set(
                t,
                i,
                Y,
                y0 + rng.random_range(-1.5..1.5) + 0.3 * t as f64 * th.sin(),
            );
            states.set(t, i, V, rng.random_range(0.2..20.0));
            states.set(t, i, THETA, th + rng.random_range(-0.2..0.2));
        }
    }
    let dims = (0..agents)
        .map(|_| VehicleDims::new(rng.random_range(1.6..2.2), rng.random_range(3.5..5.0)).unwrap())
        .collect();
    RawScene {
        states,
        dims,
        valid: vec![true; agents],
    }
}

/// Centers closer than this are treated as coincident: the distance norm is
/// singular at 0 and its third derivative grows like 1/d², which swamps the
/// truncation error of a 1e-4 central difference.
pub const COINCIDENT_M: f64 = 0.25;

pub const REL_FLOOR: f64 = 1e-3;

/// Whether entry `(t, i, c)` sits within `margin` of a hinge corner or near
/// the singular point of a pair distance.
fn near_kink(s: &RawScene, cfg: &GuideConfig, t: usize, i: usize, c: usize, margin: f64) -> bool {
    let st = &s.states;
    if c == V {
        let v = st.get(t, i, V);
        return (v - cfg.v_min).abs() < margin || (v - cfg.v_max).abs() < margin;
    }
    if c == X || c == Y {
        for j in 0..st.agents() {
            if j == i {
                continue;
            }
            let d = st.position(t, i).distance(st.position(t, j));
            let d_safe = s.dims[i].radius() + s.dims[j].radius() + cfg.delta_buffer;
            if (d - d_safe).abs() < margin || d < COINCIDENT_M {
                return true;
            }
        }
    }
    false
}

/// Max relative error of the analytic agent + speed gradient against
/// central differences with step `h`, skipping entries within `margin` of a
/// hinge corner. Returns `(max_rel, entries_checked)`.
pub fn fd_gradient_error(s: &RawScene, cfg: &GuideConfig, h: f64, margin: f64) -> (f64, usize) {
    let grad = gradient(&s.traj(), None, cfg).unwrap();
    let (steps, agents) = s.states.shape();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in 0..steps {
        for i in 0..agents {
            for c in 0..CHANNELS {
                if near_kink(s, cfg, t, i, c, margin) {
                    continue;
                }
                let mut plus = s.states.clone();
                plus.add(t, i, c, h);
                let mut minus = s.states.clone();
                minus.add(t, i, c, -h);
                let f = |st: &StateTensor| {
                    let tr = Trajectories {
                        states: st,
                        dims: &s.dims,
                        valid: &s.valid,
                    };
                    evaluate(&tr, None, cfg).unwrap().total
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = grad.get(t, i, c);
                // Entries under the floor come from cancelling pair terms and
                // are compared absolutely: a central difference of a penalty
                // of size O(10) carries ~1e-10 of round-off at h = 1e-4.
                let scale = a.abs().max(fd.abs()).max(REL_FLOOR);
                worst = worst.max((a - fd).abs() / scale);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Random walk scene for ego selection: some agents crawl, some drive.
pub fn wandering_scene(rng: &mut impl Rng) -> Scene {
    let steps = rng.random_range(2..20);
    let agents = rng.random_range(1..8);
    let mut states = StateTensor::zeros(steps, agents);
    for i in 0..agents {
        let pace = if rng.random_bool(0.3) {
            0.05
        } else {
            rng.random_range(0.1..3.0)
        };
        let (mut x, mut y) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        for t in 0..steps {
            x += pace * rng.random_range(-1.0..1.0);
            y += pace * rng.random_range(-1.0..1.0);
            states.set(t, i, X, x);
            states.set(t, i, Y, y);
            states.set(t, i, V, pace);
            states.set(t, i, THETA, rng.random_range(-3.0..3.0));
        }
    }
    let valid = (0..agents).map(|_| rng.random_bool(0.9)).collect();
    let dims = vec![VehicleDims::new(1.9, 4.5).unwrap(); agents];
    Scene::new(states, dims, valid, 0.5, "m").unwrap()
}

/// Brute-force longest-path ego: sum of segment norms, first maximum wins.
pub fn longest_oracle(scene: &Scene) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..scene.agents() {
        if !scene.is_valid(i) {
            continue;
        }
        let mut len = 0.0;
        for t in 1..scene.steps() {
            let dx = scene.states().get(t, i, X) - scene.states().get(t - 1, i, X);
            let dy = scene.states().get(t, i, Y) - scene.states().get(t - 1, i, Y);
            len += (dx * dx + dy * dy).sqrt();
        }
        if len >= 1.0 && best.is_none_or(|(_, b)| len > b) {
            best = Some((i, len));
        }
    }
    best.map(|(i, _)| i)
}

/// Every file under `dir` keyed by its relative path.
pub fn dir_contents(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        root: &std::path::Path,
        dir: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
