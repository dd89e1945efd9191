//! Scenario-quality metrics, planning evaluation, and loss formulas.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, normalize_angle, OrientedBox, Point2, Pose, VehicleDims};
use crate::guides::GuideConfig;
use crate::map::{bbox_lattice, is_onroad, MapGrid};
use crate::scene::{Scene, THETA, V};

/// Violation fractions per constraint; 0 means full adherence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RuleScores {
    pub collision: f64,
    pub offroad: f64,
}

/// Fraction of valid agent-timesteps of one scene whose center is closer
/// than `d_safe` to another valid agent, and whose footprint lattice has any
/// off-road point.
pub fn scene_rule_violations(scene: &Scene, map: &MapGrid, cfg: &GuideConfig) -> RuleScores {
    let m = scene.agents();
    let s = scene.states();
    let mut total = 0usize;
    let mut coll = 0usize;
    let mut off = 0usize;
    let mut buf = Vec::with_capacity(cfg.grid_n * cfg.grid_n);
    for t in 0..scene.steps() {
        for i in 0..m {
            if !scene.is_valid(i) {
                continue;
            }
            total += 1;
            let p = s.position(t, i);
            let ri = scene.dims()[i].radius();
            let hit = (0..m).any(|j| {
                j != i
                    && scene.is_valid(j)
                    && p.distance(s.position(t, j))
                        < ri + scene.dims()[j].radius() + cfg.delta_buffer
            });
            if hit {
                coll += 1;
            }
            let d = scene.dims()[i];
            bbox_lattice(
                p,
                s.get(t, i, THETA),
                d.width(),
                d.length(),
                cfg.grid_n,
                &mut buf,
            );
            if buf.iter().any(|q| !is_onroad(map, *q)) {
                off += 1;
            }
        }
    }
    if total == 0 {
        return RuleScores::default();
    }
    RuleScores {
        collision: coll as f64 / total as f64,
        offroad: off as f64 / total as f64,
    }
}

/// Mean over scenes of the per-scene violation fractions. Each scene is
/// checked against the map in `maps` whose id it references.
pub fn rule_metric(scenes: &[Scene], maps: &[MapGrid], cfg: &GuideConfig) -> Result<RuleScores> {
    if scenes.is_empty() {
        return Err(Error::Empty("scene set"));
    }
    let mut acc = RuleScores::default();
    for sc in scenes {
        let map = maps
            .iter()
            .find(|m| m.map_id() == sc.map_id())
            .ok_or_else(|| Error::invalid(format!("no map with id {}", sc.map_id())))?;
        let r = scene_rule_violations(sc, map, cfg);
        acc.collision += r.collision;
        acc.offroad += r.offroad;
    }
    let n = scenes.len() as f64;
    Ok(RuleScores {
        collision: acc.collision / n,
        offroad: acc.offroad / n,
    })
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("wasserstein samples"));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// 1-Wasserstein distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein samples"));
    }
    let sa = sorted(a)?;
    let sb = sorted(b)?;
    if sa.len() == sb.len() {
        let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / sa.len() as f64);
    }
    // ∫₀¹ |F_a⁻¹(u) − F_b⁻¹(u)| du over the merged quantile breakpoints
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        total += (next - u) * (sa[i] - sb[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Per-agent and scene-level feature samples used by [`realism_metric`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSamples {
    pub features: BTreeMap<&'static str, Vec<f64>>,
}

pub const AGENT_FEATURES: [&str; 4] = ["speed", "lon_accel", "lat_accel", "jerk"];
pub const INTERACTION_FEATURES: [&str; 2] = ["nearest_distance", "nearest_rel_speed"];

/// Appends the features of `scene` to `out`. Accelerations use forward
/// differences; lateral acceleration is speed times yaw rate.
pub fn collect_features(scene: &Scene, out: &mut FeatureSamples) {
    let s = scene.states();
    let dt = scene.dt();
    let steps = scene.steps();
    let valid: Vec<usize> = (0..scene.agents()).filter(|i| scene.is_valid(*i)).collect();
    let mut push = |k: &'static str, v: f64| out.features.entry(k).or_default().push(v);
    for &i in &valid {
        let mut lon = Vec::with_capacity(steps);
        for t in 0..steps {
            push("speed", s.get(t, i, V));
            if t + 1 < steps {
                let a = (s.get(t + 1, i, V) - s.get(t, i, V)) / dt;
                let yaw = normalize_angle(s.get(t + 1, i, THETA) - s.get(t, i, THETA)) / dt;
                push("lon_accel", a);
                push("lat_accel", s.get(t, i, V) * yaw);
                lon.push(a);
            }
        }
        for w in lon.windows(2) {
            push("jerk", (w[1] - w[0]) / dt);
        }
    }
    if valid.len() < 2 {
        return;
    }
    for t in 0..steps {
        for &i in &valid {
            let p = s.position(t, i);
            let mut best = (f64::INFINITY, i);
            for &j in &valid {
                if j != i {
                    let d = p.distance(s.position(t, j));
                    if d < best.0 {
                        best = (d, j);
                    }
                }
            }
            push("nearest_distance", best.0);
            push(
                "nearest_rel_speed",
                (s.get(t, i, V) - s.get(t, best.1, V)).abs(),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismScores {
    pub real: f64,
    pub rel_real: f64,
    /// Wasserstein distance of every individual feature.
    pub components: BTreeMap<String, f64>,
}

/// `real`: mean Wasserstein distance over per-agent features; `rel_real`:
/// mean over scene-level interaction features. Features absent from either
/// set (e.g. no multi-agent scenes) are skipped.
pub fn realism_metric(gen: &[Scene], reference: &[Scene]) -> Result<RealismScores> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::Empty("realism scene set"));
    }
    let mut fg = FeatureSamples::default();
    let mut fr = FeatureSamples::default();
    gen.iter().for_each(|s| collect_features(s, &mut fg));
    reference.iter().for_each(|s| collect_features(s, &mut fr));
    let mut components = BTreeMap::new();
    let mut mean_over = |names: &[&'static str]| -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for name in names {
            if let (Some(a), Some(b)) = (fg.features.get(name), fr.features.get(name)) {
                let w = wasserstein_1d(a, b)?;
                components.insert(name.to_string(), w);
                sum += w;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    };
    let real = mean_over(&AGENT_FEATURES)?;
    let rel_real = mean_over(&INTERACTION_FEATURES)?;
    Ok(RealismScores {
        real,
        rel_real,
        components,
    })
}

pub const DEFAULT_HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

/// Index into a future trajectory (`traj[j]` at time `(j+1)·dt`) of the
/// step nearest horizon `h` seconds.
fn horizon_index(h: f64, dt: f64, len: usize) -> Result<usize> {
    let steps = (h / dt).round() as usize;
    if steps == 0 || steps > len {
        return Err(Error::invalid(format!(
            "horizon {h}s needs {steps} steps, trajectory has {len}"
        )));
    }
    Ok(steps - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonValues {
    /// `(horizon seconds, value)` in the order requested.
    pub at: Vec<(f64, f64)>,
    /// Mean of the per-horizon values.
    pub avg: f64,
}

impl HorizonValues {
    fn from_values(at: Vec<(f64, f64)>) -> Self {
        let avg = at.iter().map(|(_, v)| v).sum::<f64>() / at.len().max(1) as f64;
        HorizonValues { at, avg }
    }
}

/// Displacement error at the step nearest each horizon; `pred[j]` and
/// `gt[j]` are the positions `j+1` steps ahead.
pub fn planning_l2(
    pred: &[Point2],
    gt: &[Point2],
    dt: f64,
    horizons: &[f64],
) -> Result<HorizonValues> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let at = horizons
        .iter()
        .map(|&h| {
            let k = horizon_index(h, dt, pred.len())?;
            Ok((h, pred[k].distance(gt[k])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizonValues::from_values(at))
}

/// One planning evaluation sample: predicted ego poses, ego footprint, and
/// the other vehicles' boxes at each of the same future steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub pred: Vec<Pose>,
    pub ego_dims: VehicleDims,
    pub others: Vec<Vec<OrientedBox>>,
}

fn first_collision(sample: &PlanSample) -> Result<Option<usize>> {
    if sample.others.len() < sample.pred.len() {
        return Err(Error::shape(sample.pred.len(), sample.others.len()));
    }
    for (j, pose) in sample.pred.iter().enumerate() {
        let ego = OrientedBox::from_pose(*pose, sample.ego_dims);
        for b in &sample.others[j] {
            if box_iou(&ego, b)? > 0.0 {
                return Ok(Some(j));
            }
        }
    }
    Ok(None)
}

/// Fraction of samples whose ego box overlaps another box at or before
/// each horizon.
pub fn collision_rate(samples: &[PlanSample], dt: f64, horizons: &[f64]) -> Result<HorizonValues> {
    if samples.is_empty() {
        return Err(Error::Empty("planning samples"));
    }
    let firsts = samples
        .iter()
        .map(first_collision)
        .collect::<Result<Vec<_>>>()?;
    let shortest = samples.iter().map(|s| s.pred.len()).min().unwrap_or(0);
    let at = horizons
        .iter()
        .map(|&h| {
            let k = horizon_index(h, dt, shortest)?;
            let hits = firsts
                .iter()
                .filter(|f| matches!(f, Some(j) if *j <= k))
                .count();
            Ok((h, hits as f64 / samples.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizonValues::from_values(at))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLosses {
    pub jnll: f64,
    pub min_fde: f64,
    /// Candidate with the smallest mean squared displacement.
    pub best: usize,
}

/// Joint NLL of the best candidate under a unit-variance isotropic Gaussian
/// on its residuals, and the minimum squared final displacement. On an
/// exact match JNLL reduces to `−log p + T·log(2π)`.
pub fn motion_losses(
    candidates: &[Vec<Point2>],
    probs: &[f64],
    gt: &[Point2],
) -> Result<MotionLosses> {
    if candidates.is_empty() {
        return Err(Error::Empty("motion candidates"));
    }
    if probs.len() != candidates.len() {
        return Err(Error::shape(candidates.len(), probs.len()));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth trajectory"));
    }
    for c in candidates {
        if c.len() != gt.len() {
            return Err(Error::shape(gt.len(), c.len()));
        }
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid(
            "candidate probabilities must be finite and >= 0",
        ));
    }
    let sq: Vec<f64> = candidates
        .iter()
        .map(|c| {
            c.iter()
                .zip(gt)
                .map(|(a, b)| (*a - *b).dot(*a - *b))
                .sum::<f64>()
        })
        .collect();
    let best = sq
        .iter()
        .enumerate()
        .fold(0, |bi, (i, v)| if *v < sq[bi] { i } else { bi });
    let p = probs[best];
    if p <= 0.0 {
        return Err(Error::invalid(format!(
            "best candidate {best} has zero probability"
        )));
    }
    let t = gt.len() as f64;
    let jnll = -p.ln() + 0.5 * sq[best] + t * (2.0 * std::f64::consts::PI).ln();
    let last = gt.len() - 1;
    let min_fde = candidates
        .iter()
        .map(|c| {
            let d = c[last] - gt[last];
            d.dot(d)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(MotionLosses {
        jnll,
        min_fde,
        best,
    })
}

pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyLosses {
    pub dice: f64,
    pub bce: f64,
}

/// Dice loss averaged over frames and mean binary cross-entropy over all
/// cells. `pred` holds probabilities, `gt` holds 0/1 occupancy.
pub fn occupancy_losses(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<OccupancyLosses> {
    if pred.is_empty() {
        return Err(Error::Empty("occupancy frames"));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let mut dice = 0.0;
    let mut bce = 0.0;
    let mut cells = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::shape(g.len(), p.len()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("occupancy predictions must lie in [0, 1]"));
        }
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let sp: f64 = p.iter().sum();
        let sg: f64 = g.iter().sum();
        dice += 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
        for (a, b) in p.iter().zip(g) {
            let a = a.clamp(1e-12, 1.0 - 1e-12);
            bce -= b * a.ln() + (1.0 - b) * (1.0 - a).ln();
        }
        cells += p.len();
    }
    Ok(OccupancyLosses {
        dice: dice / pred.len() as f64,
        bce: bce / cells.max(1) as f64,
    })
}

pub const PLANNING_DELTAS: [f64; 3] = [0.0, 0.5, 1.0];
pub const PLANNING_LAMBDAS: [f64; 3] = [2.5, 1.0, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningLoss {
    /// Summed squared displacement over steps.
    pub imitation: f64,
    /// `Σ_δ λ_δ Σ_{i,t} IoU(ego box inflated by δ, other box)`.
    pub collision: f64,
    pub total: f64,
}

/// `Σ_{i,t} IoU` of the ego box inflated by `delta` against every other box.
pub fn collision_iou_sum(
    pred: &[Pose],
    ego_dims: VehicleDims,
    others: &[Vec<OrientedBox>],
    delta: f64,
) -> Result<f64> {
    if others.len() < pred.len() {
        return Err(Error::shape(pred.len(), others.len()));
    }
    let dims = ego_dims.inflated(delta)?;
    let mut sum = 0.0;
    for (pose, boxes) in pred.iter().zip(others) {
        let ego = OrientedBox::from_pose(*pose, dims);
        for b in boxes {
            sum += box_iou(&ego, b)?;
        }
    }
    Ok(sum)
}

pub fn planning_loss(
    pred: &[Pose],
    gt: &[Pose],
    ego_dims: VehicleDims,
    others: &[Vec<OrientedBox>],
    deltas: &[f64],
    lambdas: &[f64],
) -> Result<PlanningLoss> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    if deltas.len() != lambdas.len() {
        return Err(Error::shape(deltas.len(), lambdas.len()));
    }
    let imitation: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let d = a.position - b.position;
            d.dot(d)
        })
        .sum();
    let mut collision = 0.0;
    for (d, l) in deltas.iter().zip(lambdas) {
        collision += l * collision_iou_sum(pred, ego_dims, others, *d)?;
    }
    Ok(PlanningLoss {
        imitation,
        collision,
        total: imitation + collision,
    })
}

/// Mean squared elementwise difference.
pub fn feature_alignment_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("feature grid"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub rule: RuleScores,
    pub real: f64,
    pub rel_real: f64,
    pub realism_components: BTreeMap<String, f64>,
    /// Keys are horizons in seconds, e.g. `"1s"`, plus `"avg"`.
    pub l2_at: BTreeMap<String, f64>,
    pub collision_rate_at: BTreeMap<String, f64>,
    /// How the `"avg"` entries are formed.
    pub avg_convention: String,
    pub counts: BTreeMap<String, usize>,
}

impl MetricsReport {
    /// Flat `metric,value` rows in a fixed order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(out, "{k},{v}");
        };
        row("schema_version", self.schema_version.to_string());
        row("config_hash", self.config_hash.clone());
        row("seed", self.seed.to_string());
        row("rule.collision", self.rule.collision.to_string());
        row("rule.offroad", self.rule.offroad.to_string());
        row("real", self.real.to_string());
        row("rel_real", self.rel_real.to_string());
        for (k, v) in &self.realism_components {
            row(&format!("realism.{k}"), v.to_string());
        }
        for (k, v) in &self.l2_at {
            row(&format!("l2.{k}"), v.to_string());
        }
        for (k, v) in &self.collision_rate_at {
            row(&format!("collision_rate.{k}"), v.to_string());
        }
        for (k, v) in &self.counts {
            row(&format!("count.{k}"), v.to_string());
        }
        out
    }

    pub fn horizon_key(h: f64) -> String {
        format!("{h}s")
    }

    pub fn is_valid(&self) -> bool {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        finite_nonneg(self.rule.collision)
            && finite_nonneg(self.rule.offroad)
            && finite_nonneg(self.real)
            && finite_nonneg(self.rel_real)
            && self.l2_at.values().all(|v| finite_nonneg(*v))
            && self
                .collision_rate_at
                .values()
                .all(|v| (0.0..=1.0).contains(v))
    }
}
