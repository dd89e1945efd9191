//! Procedural road networks and their rasterization into a [`MapGrid`].

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, MapGrid};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Point2};

/// Parameters of the procedural road network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSpec {
    pub width_m: f64,
    pub height_m: f64,
    /// Meters per cell.
    pub resolution: f64,
    pub lane_width: f64,
    pub lanes_per_road: usize,
    pub num_roads: usize,
    /// Probability that a branch road starts with a curve.
    pub curved_fraction: f64,
    pub walkway_width: f64,
    pub crossings: bool,
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec {
            width_m: 240.0,
            height_m: 240.0,
            resolution: 0.25,
            lane_width: 3.5,
            lanes_per_road: 2,
            num_roads: 4,
            curved_fraction: 0.4,
            walkway_width: 2.0,
            crossings: true,
        }
    }
}

impl MapSpec {
    pub fn road_width(&self) -> f64 {
        self.lane_width * self.lanes_per_road as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.width_m) || !positive(self.height_m) {
            return Err(Error::invalid(format!(
                "map extent must be positive, got {}x{}",
                self.width_m, self.height_m
            )));
        }
        if !positive(self.resolution) {
            return Err(Error::invalid("map resolution must be positive"));
        }
        if !positive(self.lane_width) || self.lanes_per_road == 0 {
            return Err(Error::invalid("lane width and lane count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.curved_fraction) {
            return Err(Error::invalid("curved_fraction must lie in [0, 1]"));
        }
        if !(self.walkway_width.is_finite() && self.walkway_width >= 0.0) {
            return Err(Error::invalid("walkway width must be non-negative"));
        }
        Ok(())
    }

    pub fn origin(&self) -> Point2 {
        Point2::new(-0.5 * self.width_m, -0.5 * self.height_m)
    }

    pub fn rows(&self) -> usize {
        (self.height_m / self.resolution).round() as usize
    }

    pub fn cols(&self) -> usize {
        (self.width_m / self.resolution).round() as usize
    }
}

/// Road centerline piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoadSegment {
    Line {
        start: Point2,
        end: Point2,
    },
    /// Circular arc; positive `sweep` turns counterclockwise.
    Arc {
        center: Point2,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl RoadSegment {
    pub fn point_at(&self, s: f64) -> Point2 {
        match *self {
            RoadSegment::Line { start, end } => start + (end - start) * s,
            RoadSegment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let a = start_angle + sweep * s;
                center + Point2::new(a.cos(), a.sin()) * radius
            }
        }
    }

    /// Unit direction of travel at parameter `s`.
    pub fn tangent_at(&self, s: f64) -> Point2 {
        match *self {
            RoadSegment::Line { start, end } => {
                let d = end - start;
                d * (1.0 / d.norm())
            }
            RoadSegment::Arc {
                start_angle, sweep, ..
            } => {
                let a = start_angle + sweep * s;
                Point2::new(-a.sin(), a.cos()) * sweep.signum()
            }
        }
    }

    pub fn length(&self) -> f64 {
        match *self {
            RoadSegment::Line { start, end } => start.distance(end),
            RoadSegment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Signed curvature (1/m); zero for lines.
    pub fn curvature(&self) -> f64 {
        match *self {
            RoadSegment::Line { .. } => 0.0,
            RoadSegment::Arc { radius, sweep, .. } => sweep.signum() / radius,
        }
    }

    pub fn distance(&self, p: Point2) -> f64 {
        match *self {
            RoadSegment::Line { start, end } => {
                let d = end - start;
                let len2 = d.dot(d);
                let t = if len2 > 0.0 {
                    ((p - start).dot(d) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                p.distance(start + d * t)
            }
            RoadSegment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let rel = p - center;
                let phi = rel.y.atan2(rel.x);
                let within = if sweep >= 0.0 {
                    (phi - start_angle).rem_euclid(TAU) <= sweep
                } else {
                    (start_angle - phi).rem_euclid(TAU) <= -sweep
                };
                if within {
                    (rel.norm() - radius).abs()
                } else {
                    p.distance(self.point_at(0.0))
                        .min(p.distance(self.point_at(1.0)))
                }
            }
        }
    }

    /// Axis-aligned bounds `(min, max)` of the centerline.
    fn bounds(&self) -> (Point2, Point2) {
        let samples = match self {
            RoadSegment::Line { .. } => 2,
            RoadSegment::Arc { .. } => 65,
        };
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in 0..samples {
            let p = self.point_at(k as f64 / (samples - 1) as f64);
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        // chord sag between arc samples
        let sag = match *self {
            RoadSegment::Arc { radius, sweep, .. } => radius * (1.0 - (sweep / 128.0).cos()),
            _ => 0.0,
        };
        (lo - Point2::new(sag, sag), hi + Point2::new(sag, sag))
    }

    fn transformed(&self, rotation: f64, pivot: Point2, shift: Point2) -> RoadSegment {
        let move_pt = |p: Point2| pivot + (p - pivot).rotated(rotation) + shift;
        match *self {
            RoadSegment::Line { start, end } => RoadSegment::Line {
                start: move_pt(start),
                end: move_pt(end),
            },
            RoadSegment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => RoadSegment::Arc {
                center: move_pt(center),
                radius,
                start_angle: start_angle + rotation,
                sweep,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub segment: RoadSegment,
    pub width: f64,
}

/// Pedestrian crossing footprint, painted only where the road is drivable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub area: OrientedBox,
}

/// Vector description of a road network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoadLayout {
    pub roads: Vec<Road>,
    pub crossings: Vec<Crossing>,
    pub walkway_width: f64,
    /// Lane cells stop this far short of the road edge.
    pub lane_margin: f64,
}

impl RoadLayout {
    /// Rotates the whole layout by `rotation` about `pivot`, then shifts it.
    pub fn transformed(&self, rotation: f64, pivot: Point2, shift: Point2) -> RoadLayout {
        RoadLayout {
            roads: self
                .roads
                .iter()
                .map(|r| Road {
                    segment: r.segment.transformed(rotation, pivot, shift),
                    width: r.width,
                })
                .collect(),
            crossings: self
                .crossings
                .iter()
                .map(|c| Crossing {
                    area: OrientedBox::new(
                        pivot + (c.area.center - pivot).rotated(rotation) + shift,
                        c.area.width,
                        c.area.length,
                        c.area.heading + rotation,
                    ),
                })
                .collect(),
            walkway_width: self.walkway_width,
            lane_margin: self.lane_margin,
        }
    }

    /// Paints the layout onto a fresh grid.
    pub fn rasterize(
        &self,
        map_id: impl Into<String>,
        resolution: f64,
        origin: Point2,
        rows: usize,
        cols: usize,
    ) -> Result<MapGrid> {
        let mut g = MapGrid::empty(map_id, resolution, origin, rows, cols)?;
        let mut walk = vec![false; rows * cols];
        let drivable = Layer::DrivableArea.bit() | Layer::RoadSegment.bit();
        for road in &self.roads {
            let hw = 0.5 * road.width;
            let reach = hw + self.walkway_width;
            let (lo, hi) = road.segment.bounds();
            let Some((r0, r1, c0, c1)) = cell_range(&g, lo, hi, reach) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = road.segment.distance(g.cell_center(r, c));
                    let k = r * cols + c;
                    if d <= hw {
                        g.cells[k] |= drivable;
                        if d <= hw - self.lane_margin {
                            g.cells[k] |= Layer::Lane.bit();
                        }
                    } else if d <= reach {
                        walk[k] = true;
                    }
                }
            }
        }
        for (k, w) in walk.into_iter().enumerate() {
            if w && g.cells[k] & Layer::DrivableArea.bit() == 0 {
                g.cells[k] |= Layer::Walkway.bit();
            }
        }
        for crossing in &self.crossings {
            let corners = crossing.area.corners();
            let lo = corners
                .iter()
                .fold(Point2::new(f64::INFINITY, f64::INFINITY), |a, p| {
                    Point2::new(a.x.min(p.x), a.y.min(p.y))
                });
            let hi = corners
                .iter()
                .fold(Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
                    Point2::new(a.x.max(p.x), a.y.max(p.y))
                });
            let Some((r0, r1, c0, c1)) = cell_range(&g, lo, hi, 0.0) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let k = r * cols + c;
                    if g.cells[k] & Layer::DrivableArea.bit() != 0
                        && crossing.area.contains(g.cell_center(r, c))
                    {
                        g.cells[k] |= Layer::PedCrossing.bit();
                    }
                }
            }
        }
        Ok(g)
    }
}

fn cell_range(
    g: &MapGrid,
    lo: Point2,
    hi: Point2,
    pad: f64,
) -> Option<(usize, usize, usize, usize)> {
    let (rows, cols) = g.extent();
    if rows == 0 || cols == 0 {
        return None;
    }
    let res = g.resolution();
    let o = g.origin();
    let c0 = ((lo.x - pad - o.x) / res).floor().max(0.0);
    let r0 = ((lo.y - pad - o.y) / res).floor().max(0.0);
    let c1 = ((hi.x + pad - o.x) / res).ceil().min((cols - 1) as f64);
    let r1 = ((hi.y + pad - o.y) / res).ceil().min((rows - 1) as f64);
    if c0 > c1 || r0 > r1 {
        return None;
    }
    Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
}

/// Builds a connected road network: one horizontal trunk road, then
/// branches that each start on an existing centerline.
pub fn generate_layout(seed: u64, spec: &MapSpec) -> Result<RoadLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = spec.road_width();
    let half_w = 0.5 * spec.width_m;
    let half_h = 0.5 * spec.height_m;
    let far = spec.width_m + spec.height_m;
    let mut layout = RoadLayout {
        roads: Vec::new(),
        crossings: Vec::new(),
        walkway_width: spec.walkway_width,
        lane_margin: (0.15 * width).min(0.5),
    };
    if spec.num_roads == 0 {
        return Ok(layout);
    }
    let y0 = rng.random_range(-half_h / 6.0..=half_h / 6.0);
    layout.roads.push(Road {
        segment: RoadSegment::Line {
            start: Point2::new(-half_w - width, y0),
            end: Point2::new(half_w + width, y0),
        },
        width,
    });
    let inside = |p: Point2, inset: f64| p.x.abs() <= half_w - inset && p.y.abs() <= half_h - inset;
    while layout.roads.len() < spec.num_roads {
        let parent = layout.roads[rng.random_range(0..layout.roads.len())];
        let mut attach = None;
        for _ in 0..32 {
            let s = rng.random_range(0.1..0.9);
            let p = parent.segment.point_at(s);
            if inside(p, 0.1 * spec.width_m.min(spec.height_m)) {
                attach = Some((p, parent.segment.tangent_at(s)));
                break;
            }
        }
        let Some((start, tangent)) = attach else {
            // parent never enters the interior; fall back to the trunk
            let p = Point2::new(rng.random_range(-0.5..0.5) * half_w, y0);
            layout
                .roads
                .push(branch_line(p, Point2::new(0.0, 1.0), far, width));
            continue;
        };
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let jitter = rng.random_range(-0.25..0.25);
        let dir = tangent.rotated(side * FRAC_PI_2 + jitter);
        let curved = rng.random_bool(spec.curved_fraction);
        let radius = rng.random_range(25.0..60.0);
        let turn = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sweep = rng.random_range(FRAC_PI_4..FRAC_PI_2);
        if curved && inside(start, radius * 2.0 + width) {
            let normal = dir.rotated(turn * FRAC_PI_2);
            let center = start + normal * radius;
            let rel = start - center;
            let arc = RoadSegment::Arc {
                center,
                radius,
                start_angle: rel.y.atan2(rel.x),
                sweep: turn * sweep,
            };
            let end = arc.point_at(1.0);
            let end_dir = arc.tangent_at(1.0);
            layout.roads.push(Road {
                segment: arc,
                width,
            });
            if layout.roads.len() < spec.num_roads {
                layout.roads.push(branch_line(end, end_dir, far, width));
            }
        } else {
            layout.roads.push(branch_line(start, dir, far, width));
        }
        if spec.crossings {
            let offset = 0.5 * parent.width + 3.0;
            layout.crossings.push(Crossing {
                area: OrientedBox::new(start + dir * offset, width, 4.0, dir.y.atan2(dir.x)),
            });
        }
    }
    Ok(layout)
}

fn branch_line(start: Point2, dir: Point2, length: f64, width: f64) -> Road {
    Road {
        segment: RoadSegment::Line {
            start,
            end: start + dir * length,
        },
        width,
    }
}

/// Generates a deterministic procedural map for `seed`.
pub fn generate_map(seed: u64, spec: &MapSpec) -> Result<MapGrid> {
    let layout = generate_layout(seed, spec)?;
    layout.rasterize(
        format!("map-{seed}"),
        spec.resolution,
        spec.origin(),
        spec.rows(),
        spec.cols(),
    )
}
