//! Layered occupancy rasters.
//!
//! A [`MapGrid`] holds five boolean layers over one grid. Cell `(row, col)`
//! covers `origin + [col, col+1) × [row, row+1)` in units of `resolution`,
//! so row 0 is the southern edge. Point lookups floor `(p - origin) / res`.

mod io;
mod layout;
mod raster;

use std::sync::OnceLock;

pub use io::{load_map, read_pgm, render_scene_svg, save_map, write_pgm, write_raster_pgms};
pub use layout::{generate_layout, generate_map, Crossing, MapSpec, Road, RoadLayout, RoadSegment};
pub use raster::{
    crop_ego, rasterize_scene, Channel, CropConfig, CropOrientation, SceneRaster, CROP_SIZE_M,
};

use crate::error::{Error, Result};
use crate::geometry::{AgentState, Point2, VehicleDims};

/// The five map layers, in bit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    DrivableArea,
    RoadSegment,
    Lane,
    PedCrossing,
    Walkway,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::DrivableArea,
        Layer::RoadSegment,
        Layer::Lane,
        Layer::PedCrossing,
        Layer::Walkway,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::DrivableArea => "drivable_area",
            Layer::RoadSegment => "road_segment",
            Layer::Lane => "lane",
            Layer::PedCrossing => "ped_crossing",
            Layer::Walkway => "walkway",
        }
    }

    pub fn from_name(name: &str) -> Option<Layer> {
        Layer::ALL.into_iter().find(|l| l.name() == name)
    }

    #[inline]
    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

#[derive(Debug)]
pub struct MapGrid {
    map_id: String,
    resolution: f64,
    origin: Point2,
    rows: usize,
    cols: usize,
    /// One byte per cell, one bit per [`Layer`].
    cells: Vec<u8>,
    distance: OnceLock<Vec<f32>>,
}

impl Clone for MapGrid {
    fn clone(&self) -> Self {
        MapGrid {
            map_id: self.map_id.clone(),
            resolution: self.resolution,
            origin: self.origin,
            rows: self.rows,
            cols: self.cols,
            cells: self.cells.clone(),
            distance: OnceLock::new(),
        }
    }
}

impl PartialEq for MapGrid {
    fn eq(&self, other: &Self) -> bool {
        self.map_id == other.map_id
            && self.resolution == other.resolution
            && self.origin == other.origin
            && self.rows == other.rows
            && self.cols == other.cols
            && self.cells == other.cells
    }
}

impl MapGrid {
    pub fn empty(
        map_id: impl Into<String>,
        resolution: f64,
        origin: Point2,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::invalid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::NonFinite("map origin"));
        }
        Ok(MapGrid {
            map_id: map_id.into(),
            resolution,
            origin,
            rows,
            cols,
            cells: vec![0; rows * cols],
            distance: OnceLock::new(),
        })
    }

    pub(crate) fn from_cells(
        map_id: String,
        resolution: f64,
        origin: Point2,
        rows: usize,
        cols: usize,
        cells: Vec<u8>,
    ) -> Result<Self> {
        let mut g = MapGrid::empty(map_id, resolution, origin, rows, cols)?;
        if cells.len() != rows * cols {
            return Err(Error::shape(rows * cols, cells.len()));
        }
        g.cells = cells;
        Ok(g)
    }

    pub fn map_id(&self) -> &str {
        &self.map_id
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    /// `(rows, cols)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.resolution
    }

    pub fn center(&self) -> Point2 {
        self.origin + Point2::new(0.5 * self.width_m(), 0.5 * self.height_m())
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        self.origin
            + Point2::new(
                (col as f64 + 0.5) * self.resolution,
                (row as f64 + 0.5) * self.resolution,
            )
    }

    /// The cell containing `p`, if inside the grid.
    #[inline]
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let c = ((p.x - self.origin.x) / self.resolution).floor();
        let r = ((p.y - self.origin.y) / self.resolution).floor();
        if !(c >= 0.0 && r >= 0.0) {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        if r < self.rows && c < self.cols {
            Some((r, c))
        } else {
            None
        }
    }

    #[inline]
    pub fn bits(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.cols + col]
    }

    /// Layer bits at a world point; zero outside the grid.
    #[inline]
    pub fn bits_at(&self, p: Point2) -> u8 {
        match self.cell_of(p) {
            Some((r, c)) => self.bits(r, c),
            None => 0,
        }
    }

    pub fn get(&self, layer: Layer, row: usize, col: usize) -> bool {
        self.bits(row, col) & layer.bit() != 0
    }

    pub fn set(&mut self, layer: Layer, row: usize, col: usize, on: bool) {
        let k = row * self.cols + col;
        if on {
            self.cells[k] |= layer.bit();
        } else {
            self.cells[k] &= !layer.bit();
        }
        self.distance = OnceLock::new();
    }

    pub fn layer_at(&self, layer: Layer, p: Point2) -> bool {
        self.bits_at(p) & layer.bit() != 0
    }

    pub fn count(&self, layer: Layer) -> usize {
        self.cells.iter().filter(|b| **b & layer.bit() != 0).count()
    }

    /// Layer as a row-major boolean vector (row 0 = south).
    pub fn layer(&self, layer: Layer) -> Vec<bool> {
        self.cells.iter().map(|b| b & layer.bit() != 0).collect()
    }

    /// Distance in meters from `p` to the nearest drivable cell center,
    /// bilinearly interpolated; piecewise smooth in `p`. Huge (≥ 1e9 m)
    /// when the map has no drivable cells.
    pub fn distance_to_road(&self, p: Point2) -> f64 {
        let field = self.distance.get_or_init(|| self.compute_distance_field());
        if self.rows == 0 || self.cols == 0 {
            return f64::INFINITY;
        }
        let u = (p.x - self.origin.x) / self.resolution - 0.5;
        let v = (p.y - self.origin.y) / self.resolution - 0.5;
        let uc = u.clamp(0.0, (self.cols - 1) as f64);
        let vc = v.clamp(0.0, (self.rows - 1) as f64);
        let outside = ((u - uc).hypot(v - vc)) * self.resolution;
        let c0 = uc.floor() as usize;
        let r0 = vc.floor() as usize;
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let fu = uc - c0 as f64;
        let fv = vc - r0 as f64;
        let at = |r: usize, c: usize| field[r * self.cols + c] as f64;
        let d = (1.0 - fv) * ((1.0 - fu) * at(r0, c0) + fu * at(r0, c1))
            + fv * ((1.0 - fu) * at(r1, c0) + fu * at(r1, c1));
        d + outside
    }

    fn compute_distance_field(&self) -> Vec<f32> {
        let sq = edt_squared(&self.cells, self.rows, self.cols, Layer::DrivableArea.bit());
        sq.into_iter()
            .map(|d| (d.sqrt() * self.resolution) as f32)
            .collect()
    }
}

/// Exact squared Euclidean distance transform (in cells) to the nearest
/// cell whose bits intersect `mask`.
fn edt_squared(cells: &[u8], rows: usize, cols: usize, mask: u8) -> Vec<f64> {
    let inf = 1e20;
    let mut grid: Vec<f64> = cells
        .iter()
        .map(|b| if b & mask != 0 { 0.0 } else { inf })
        .collect();
    let n = rows.max(cols);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..cols {
        for r in 0..rows {
            f[r] = grid[r * cols + c];
        }
        edt_1d(&f[..rows], &mut d[..rows], &mut v, &mut z);
        for r in 0..rows {
            grid[r * cols + c] = d[r];
        }
    }
    for r in 0..rows {
        f[..cols].copy_from_slice(&grid[r * cols..(r + 1) * cols]);
        edt_1d(&f[..cols], &mut d[..cols], &mut v, &mut z);
        grid[r * cols..(r + 1) * cols].copy_from_slice(&d[..cols]);
    }
    grid
}

// Felzenszwalb & Huttenlocher lower envelope of parabolas.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Whether `p` falls in a drivable cell. Points outside the grid are off-road.
pub fn is_onroad(g: &MapGrid, p: Point2) -> bool {
    g.layer_at(Layer::DrivableArea, p)
}

/// `n × n` lattice spanning the vehicle footprint, corners included.
/// Ordered along the length first, then across the width.
pub fn sample_bbox_grid(s: &AgentState, d: &VehicleDims, n: usize) -> Result<Vec<Point2>> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "lattice side must be >= 2, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n * n);
    bbox_lattice(s.position(), s.theta(), d.width(), d.length(), n, &mut out);
    Ok(out)
}

pub(crate) fn bbox_lattice(
    center: Point2,
    heading: f64,
    width: f64,
    length: f64,
    n: usize,
    out: &mut Vec<Point2>,
) {
    out.clear();
    let (s, c) = heading.sin_cos();
    let fwd = Point2::new(c, s);
    let left = Point2::new(-s, c);
    let step = 1.0 / (n - 1) as f64;
    for j in 0..n {
        let lon = -0.5 * length + length * (j as f64 * step);
        for i in 0..n {
            let lat = -0.5 * width + width * (i as f64 * step);
            out.push(center + fwd * lon + left * lat);
        }
    }
}
