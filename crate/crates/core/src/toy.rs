//! Procedural training data: lane-following kinematic rollouts on
//! generated road networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, VehicleDims};
use crate::map::{generate_layout, is_onroad, MapGrid, MapSpec, Road, RoadLayout};
use crate::scene::{Scene, StateTensor, THETA, V, X, Y};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub maps: usize,
    pub scenes_per_map: usize,
    /// Agents requested per scene; crowded scenes may end up with fewer.
    pub agents: usize,
    pub steps: usize,
    pub dt: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Probability that an agent is parked for the whole scene.
    pub stationary_prob: f64,
    /// Agents start within this distance of the scene center, meters.
    pub spawn_radius: f64,
    /// Center-distance clearance kept between agents beyond their radii.
    pub clearance: f64,
    pub map: MapSpec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            maps: 4,
            scenes_per_map: 32,
            agents: 6,
            steps: 40,
            dt: 0.5,
            min_speed: 2.0,
            max_speed: 9.0,
            stationary_prob: 0.15,
            spawn_radius: 30.0,
            clearance: 1.0,
            map: MapSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub scene: Scene,
    pub center: Point2,
    pub map_index: usize,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub maps: Vec<MapGrid>,
    pub layouts: Vec<RoadLayout>,
    pub scenes: Vec<ToyScene>,
}

/// Seed of the `i`-th map of a dataset.
pub fn map_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Passenger-car footprint.
pub fn sample_dims(rng: &mut impl Rng) -> VehicleDims {
    VehicleDims::new(rng.random_range(1.7..2.1), rng.random_range(3.8..5.2))
        .expect("positive ranges")
}

/// Random drivable point at least `inset` meters inside the map border;
/// falls back to the map center.
pub fn pick_center(map: &MapGrid, inset: f64, rng: &mut impl Rng) -> Point2 {
    let o = map.origin();
    let (w, h) = (map.width_m(), map.height_m());
    let ix = inset.min(0.45 * w);
    let iy = inset.min(0.45 * h);
    for _ in 0..2000 {
        let p = Point2::new(
            rng.random_range(o.x + ix..o.x + w - ix),
            rng.random_range(o.y + iy..o.y + h - iy),
        );
        if is_onroad(map, p) {
            return p;
        }
    }
    map.center()
}

struct Placed {
    positions: Vec<Point2>,
    radius: f64,
}

/// Drives along `road` from arc length `s0` in direction `dir`, keeping to
/// the right-hand lane. Returns `(x, y, v, θ)` per step.
fn rollout(
    road: &Road,
    lane_offset: f64,
    s0: f64,
    dir: f64,
    speeds: &[f64],
    dt: f64,
) -> Option<Vec<[f64; 4]>> {
    let len = road.segment.length();
    let mut s = s0;
    let mut out = Vec::with_capacity(speeds.len());
    for &v in speeds {
        if !(0.0..=len).contains(&s) {
            return None;
        }
        let u = s / len;
        let tangent = road.segment.tangent_at(u) * dir;
        let left = Point2::new(-tangent.y, tangent.x);
        let p = road.segment.point_at(u) - left * lane_offset;
        out.push([p.x, p.y, v, tangent.y.atan2(tangent.x)]);
        s += dir * v * dt;
    }
    Some(out)
}

fn speed_profile(cfg: &ToyConfig, rng: &mut impl Rng) -> Vec<f64> {
    if rng.random_bool(cfg.stationary_prob) {
        return vec![0.0; cfg.steps];
    }
    let v0 = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let accel = rng.random_range(-0.3..0.3);
    (0..cfg.steps)
        .map(|t| (v0 + accel * t as f64 * cfg.dt).clamp(0.5 * cfg.min_speed, cfg.max_speed))
        .collect()
}

fn inside(map: &MapGrid, p: Point2, margin: f64) -> bool {
    let o = map.origin();
    p.x >= o.x + margin
        && p.y >= o.y + margin
        && p.x <= o.x + map.width_m() - margin
        && p.y <= o.y + map.height_m() - margin
}

/// One scene of up to `cfg.agents` mutually clear agents around `center`.
pub fn sample_scene(
    map: &MapGrid,
    layout: &RoadLayout,
    center: Point2,
    cfg: &ToyConfig,
    rng: &mut impl Rng,
) -> Option<Scene> {
    let near: Vec<&Road> = layout
        .roads
        .iter()
        .filter(|r| r.segment.distance(center) < cfg.spawn_radius)
        .collect();
    if near.is_empty() {
        return None;
    }
    let mut placed: Vec<Placed> = Vec::new();
    let mut rows: Vec<(VehicleDims, Vec<[f64; 4]>)> = Vec::new();
    let mut tries = 0;
    // drawn once per agent slot: re-drawing it on every failed placement
    // would favor parked agents, which never run off their road
    let mut speeds = speed_profile(cfg, rng);
    while rows.len() < cfg.agents && tries < 40 * cfg.agents {
        tries += 1;
        let road = near[rng.random_range(0..near.len())];
        let dims = sample_dims(rng);
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lane = 0.25 * road.width;
        let s0 = rng.random_range(0.0..road.segment.length());
        if road
            .segment
            .point_at(s0 / road.segment.length())
            .distance(center)
            > cfg.spawn_radius
        {
            continue;
        }
        let Some(states) = rollout(road, lane, s0, dir, &speeds, cfg.dt) else {
            continue;
        };
        let positions: Vec<Point2> = states.iter().map(|s| Point2::new(s[0], s[1])).collect();
        if !positions.iter().all(|p| inside(map, *p, 3.0)) {
            continue;
        }
        let radius = dims.radius();
        let clear = placed.iter().all(|o| {
            let d_safe = radius + o.radius + cfg.clearance;
            positions
                .iter()
                .zip(&o.positions)
                .all(|(a, b)| a.distance(*b) >= d_safe)
        });
        if !clear {
            continue;
        }
        placed.push(Placed { positions, radius });
        rows.push((dims, states));
        speeds = speed_profile(cfg, rng);
    }
    if rows.len() < 2 {
        return None;
    }
    let mut states = StateTensor::zeros(cfg.steps, rows.len());
    for (i, (_, st)) in rows.iter().enumerate() {
        for (t, s) in st.iter().enumerate() {
            states.set(t, i, X, s[0]);
            states.set(t, i, Y, s[1]);
            states.set(t, i, V, s[2]);
            states.set(t, i, THETA, s[3]);
        }
    }
    let dims = rows.iter().map(|(d, _)| *d).collect();
    Scene::new(states, dims, vec![true; rows.len()], cfg.dt, map.map_id()).ok()
}

/// Builds `maps × scenes_per_map` scenes; deterministic in `seed`.
pub fn toy_dataset(seed: u64, cfg: &ToyConfig) -> Result<ToyDataset> {
    if cfg.maps == 0 || cfg.scenes_per_map == 0 {
        return Err(Error::Empty("toy dataset"));
    }
    if cfg.steps < 2 || cfg.agents < 2 {
        return Err(Error::invalid("toy scenes need >= 2 steps and >= 2 agents"));
    }
    if !(cfg.dt > 0.0 && cfg.min_speed > 0.0 && cfg.min_speed <= cfg.max_speed) {
        return Err(Error::invalid(
            "toy dt and speed bounds must be positive and ordered",
        ));
    }
    let built: Vec<Result<(MapGrid, RoadLayout, Vec<ToyScene>)>> = (0..cfg.maps)
        .into_par_iter()
        .map(|i| {
            let ms = map_seed(seed, i);
            let layout = generate_layout(ms, &cfg.map)?;
            let map = layout.rasterize(
                format!("map-{ms}"),
                cfg.map.resolution,
                cfg.map.origin(),
                cfg.map.rows(),
                cfg.map.cols(),
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(ms);
            rng.set_stream(7);
            let mut scenes = Vec::with_capacity(cfg.scenes_per_map);
            let mut attempts = 0;
            while scenes.len() < cfg.scenes_per_map {
                attempts += 1;
                if attempts > 50 * cfg.scenes_per_map {
                    return Err(Error::invalid(format!(
                        "could not place toy scenes on map {ms}"
                    )));
                }
                let center =
                    pick_center(&map, 0.25 * cfg.map.width_m.min(cfg.map.height_m), &mut rng);
                if let Some(scene) = sample_scene(&map, &layout, center, cfg, &mut rng) {
                    scenes.push(ToyScene {
                        scene,
                        center,
                        map_index: i,
                    });
                }
            }
            Ok((map, layout, scenes))
        })
        .collect();
    let mut out = ToyDataset {
        maps: Vec::new(),
        layouts: Vec::new(),
        scenes: Vec::new(),
    };
    for b in built {
        let (m, l, s) = b?;
        out.maps.push(m);
        out.layouts.push(l);
        out.scenes.extend(s);
    }
    Ok(out)
}
