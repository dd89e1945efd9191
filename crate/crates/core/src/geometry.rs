//! Planar geometry shared by every other module: agent states, the ego-frame
//! transform, oriented vehicle boxes and their overlap.
//!
//! Headings are measured counterclockwise from the +x axis and are kept in
//! `(-π, π]`. The ego frame places the ego at the origin with its heading
//! along +y, so a state with heading `π/2` makes the transform a pure
//! translation.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counterclockwise rotation about the origin.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// A position with a heading, used for planned ego poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Point2,
    pub heading: f64,
}

impl Pose {
    pub fn new(position: Point2, heading: f64) -> Self {
        Pose {
            position,
            heading: normalize_angle(heading),
        }
    }
}

/// One agent's pose and motion at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    x: f64,
    y: f64,
    v: f64,
    theta: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && v.is_finite() && theta.is_finite()) {
            return Err(Error::NonFinite("agent state"));
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("negative speed {v}")));
        }
        Ok(AgentState {
            x,
            y,
            v,
            theta: normalize_angle(theta),
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn v(&self) -> f64 {
        self.v
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose {
        Pose {
            position: self.position(),
            heading: self.theta,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }
}

/// Vehicle footprint. `length` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDims", into = "RawDims")]
pub struct VehicleDims {
    width: f64,
    length: f64,
}

#[derive(Serialize, Deserialize)]
struct RawDims {
    width: f64,
    length: f64,
}

impl TryFrom<RawDims> for VehicleDims {
    type Error = Error;
    fn try_from(raw: RawDims) -> Result<Self> {
        VehicleDims::new(raw.width, raw.length)
    }
}

impl From<VehicleDims> for RawDims {
    fn from(d: VehicleDims) -> Self {
        RawDims {
            width: d.width,
            length: d.length,
        }
    }
}

impl VehicleDims {
    pub fn new(width: f64, length: f64) -> Result<Self> {
        if !(width.is_finite() && length.is_finite()) || width <= 0.0 || length <= 0.0 {
            return Err(Error::InvalidDimensions { width, length });
        }
        Ok(VehicleDims { width, length })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Half the diagonal of the footprint rectangle.
    pub fn radius(&self) -> f64 {
        0.5 * self.width.hypot(self.length)
    }

    /// Grows both sides by `delta`.
    pub fn inflated(&self, delta: f64) -> Result<Self> {
        VehicleDims::new(self.width + delta, self.length + delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Point2,
    pub width: f64,
    pub length: f64,
    pub heading: f64,
}

impl OrientedBox {
    pub fn new(center: Point2, width: f64, length: f64, heading: f64) -> Self {
        OrientedBox {
            center,
            width,
            length,
            heading: normalize_angle(heading),
        }
    }

    pub fn from_pose(pose: Pose, dims: VehicleDims) -> Self {
        OrientedBox::new(pose.position, dims.width, dims.length, pose.heading)
    }

    /// Inverse of [`OrientedBox::corners`].
    pub fn from_corners(c: &[Point2; 4]) -> Self {
        let center = (c[0] + c[1] + c[2] + c[3]) * 0.25;
        let fwd = c[1] - c[0];
        let side = c[3] - c[0];
        OrientedBox::new(center, side.norm(), fwd.norm(), fwd.y.atan2(fwd.x))
    }

    pub fn area(&self) -> f64 {
        self.width * self.length
    }

    fn axes(&self) -> (Point2, Point2) {
        let (s, c) = self.heading.sin_cos();
        (Point2::new(c, s), Point2::new(-s, c))
    }

    /// Corners in counterclockwise order starting at the rear-right corner.
    pub fn corners(&self) -> [Point2; 4] {
        let (fwd, left) = self.axes();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            self.center + fwd * -hl + left * -hw,
            self.center + fwd * hl + left * -hw,
            self.center + fwd * hl + left * hw,
            self.center + fwd * -hl + left * hw,
        ]
    }

    /// Closed point-in-rectangle test.
    pub fn contains(&self, p: Point2) -> bool {
        let (fwd, left) = self.axes();
        let d = p - self.center;
        d.dot(fwd).abs() <= 0.5 * self.length && d.dot(left).abs() <= 0.5 * self.width
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width > 0.0 && self.length > 0.0 && self.center.is_finite())
    }
}

/// Maps a world point into the ego frame of `s`: the ego sits at the origin
/// and faces +y.
pub fn transform_to_ego(p: Point2, s: &AgentState) -> Result<Point2> {
    if !p.is_finite() {
        return Err(Error::NonFinite("point"));
    }
    Ok(to_ego_unchecked(p, s.position(), s.theta))
}

pub(crate) fn to_ego_unchecked(p: Point2, origin: Point2, theta: f64) -> Point2 {
    let (s, c) = theta.sin_cos();
    let dx = p.x - origin.x;
    let dy = p.y - origin.y;
    Point2::new(s * dx - c * dy, c * dx + s * dy)
}

/// Inverse of [`transform_to_ego`].
pub fn transform_from_ego(q: Point2, s: &AgentState) -> Result<Point2> {
    if !q.is_finite() {
        return Err(Error::NonFinite("point"));
    }
    Ok(from_ego_unchecked(q, s.position(), s.theta))
}

pub(crate) fn from_ego_unchecked(q: Point2, origin: Point2, theta: f64) -> Point2 {
    let (s, c) = theta.sin_cos();
    Point2::new(origin.x + s * q.x + c * q.y, origin.y - c * q.x + s * q.y)
}

/// Heading of `theta` relative to the ego heading, in `(-π, π]`.
pub fn transform_heading(theta: f64, s: &AgentState) -> f64 {
    normalize_angle(theta - s.theta)
}

pub fn box_corners(s: &AgentState, d: &VehicleDims) -> Result<[Point2; 4]> {
    let d = VehicleDims::new(d.width, d.length)?;
    Ok(OrientedBox::from_pose(s.pose(), d).corners())
}

/// Shoelace area; positive for counterclockwise polygons.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// Clips a convex polygon against a counterclockwise convex clip polygon.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    let mut input = Vec::with_capacity(8);
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        std::mem::swap(&mut input, &mut output);
        output.clear();
        let side = |p: Point2| edge.cross(p - a);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    p + (q - p) * t
}

/// Intersection area of two oriented boxes.
pub fn box_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let clipped = clip_convex(&a.corners(), &b.corners());
    polygon_area(&clipped).max(0.0)
}

/// Intersection-over-union by exact convex clipping.
pub fn box_iou(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::DegenerateBox);
    }
    // cheap reject on circumscribed circles
    let ra = 0.5 * a.width.hypot(a.length);
    let rb = 0.5 * b.width.hypot(b.length);
    if a.center.distance(b.center) > ra + rb {
        return Ok(0.0);
    }
    let inter = box_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Sum of Euclidean distances between consecutive points.
pub fn path_length(points: &[Point2]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("path"));
    }
    Ok(points.windows(2).map(|w| w[0].distance(w[1])).sum())
}
