//! Scene rasters: map layers with vehicles painted on top.

use serde::{Deserialize, Serialize};

use super::{Layer, MapGrid};
use crate::error::{Error, Result};
use crate::geometry::{from_ego_unchecked, to_ego_unchecked, OrientedBox, Point2};
use crate::scene::Scene;

/// Side of the ego-centric crop window in meters.
pub const CROP_SIZE_M: f64 = 60.0;

/// Raster channels: the five map layers followed by the vehicle overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Map(Layer),
    Ego,
    Other,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::Map(Layer::DrivableArea),
        Channel::Map(Layer::RoadSegment),
        Channel::Map(Layer::Lane),
        Channel::Map(Layer::PedCrossing),
        Channel::Map(Layer::Walkway),
        Channel::Ego,
        Channel::Other,
    ];

    pub fn bit(self) -> u8 {
        match self {
            Channel::Map(l) => l.bit(),
            Channel::Ego => 1 << 5,
            Channel::Other => 1 << 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Map(l) => l.name(),
            Channel::Ego => "ego",
            Channel::Other => "other",
        }
    }
}

/// Bit-packed multi-channel image, row 0 at the top (north / ahead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRaster {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    /// One byte per pixel; bit `k` set when channel `k` is on.
    pub pixels: Vec<u8>,
}

impl SceneRaster {
    pub fn get(&self, channel: Channel, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] & channel.bit() != 0
    }

    pub fn count(&self, channel: Channel) -> usize {
        self.pixels
            .iter()
            .filter(|p| **p & channel.bit() != 0)
            .count()
    }

    /// 0/255 mask of one channel.
    pub fn channel_image(&self, channel: Channel) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| if p & channel.bit() != 0 { 255 } else { 0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropOrientation {
    /// Rotated so the ego heading points up.
    #[default]
    EgoUp,
    /// World-aligned, north up.
    AxisAligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub size_m: f64,
    pub meters_per_pixel: f64,
    pub orientation: CropOrientation,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            size_m: CROP_SIZE_M,
            meters_per_pixel: 0.25,
            orientation: CropOrientation::EgoUp,
        }
    }
}

impl CropConfig {
    pub fn side_pixels(&self) -> usize {
        (self.size_m / self.meters_per_pixel).ceil() as usize
    }
}

/// Pixel <-> world mapping of a raster view.
trait View {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// World point at the center of pixel `(row, col)`.
    fn pixel_to_world(&self, row: usize, col: usize) -> Point2;
    /// Fractional `(row, col)` pixel coordinates of a world point.
    fn world_to_pixel(&self, p: Point2) -> (f64, f64);
}

struct CropView {
    side: usize,
    mpp: f64,
    half: f64,
    center: Point2,
    theta: f64,
    rotate: bool,
}

impl View for CropView {
    fn width(&self) -> usize {
        self.side
    }
    fn height(&self) -> usize {
        self.side
    }
    fn pixel_to_world(&self, row: usize, col: usize) -> Point2 {
        let q = Point2::new(
            -self.half + (col as f64 + 0.5) * self.mpp,
            self.half - (row as f64 + 0.5) * self.mpp,
        );
        if self.rotate {
            from_ego_unchecked(q, self.center, self.theta)
        } else {
            self.center + q
        }
    }
    fn world_to_pixel(&self, p: Point2) -> (f64, f64) {
        let q = if self.rotate {
            to_ego_unchecked(p, self.center, self.theta)
        } else {
            p - self.center
        };
        (
            (self.half - q.y) / self.mpp - 0.5,
            (q.x + self.half) / self.mpp - 0.5,
        )
    }
}

struct GridView<'a> {
    grid: &'a MapGrid,
}

impl View for GridView<'_> {
    fn width(&self) -> usize {
        self.grid.extent().1
    }
    fn height(&self) -> usize {
        self.grid.extent().0
    }
    fn pixel_to_world(&self, row: usize, col: usize) -> Point2 {
        self.grid.cell_center(self.height() - 1 - row, col)
    }
    fn world_to_pixel(&self, p: Point2) -> (f64, f64) {
        let res = self.grid.resolution();
        let o = self.grid.origin();
        let col = (p.x - o.x) / res - 0.5;
        let grid_row = (p.y - o.y) / res - 0.5;
        ((self.height() - 1) as f64 - grid_row, col)
    }
}

fn render(
    view: &impl View,
    grid: &MapGrid,
    scene: &Scene,
    t: usize,
    ego: Option<usize>,
) -> SceneRaster {
    let (w, h) = (view.width(), view.height());
    let mut pixels = vec![0u8; w * h];
    for r in 0..h {
        for c in 0..w {
            pixels[r * w + c] = grid.bits_at(view.pixel_to_world(r, c));
        }
    }
    for i in 0..scene.agents() {
        if !scene.is_valid(i) {
            continue;
        }
        let bx = OrientedBox::from_pose(scene.state(t, i).pose(), scene.dims()[i]);
        let bit = if Some(i) == ego {
            Channel::Ego.bit()
        } else {
            Channel::Other.bit()
        };
        paint_box(view, &bx, bit, &mut pixels);
    }
    SceneRaster {
        width: w,
        height: h,
        meters_per_pixel: 0.0,
        pixels,
    }
}

fn paint_box(view: &impl View, bx: &OrientedBox, bit: u8, pixels: &mut [u8]) {
    let (w, h) = (view.width(), view.height());
    let mut rmin = f64::INFINITY;
    let mut rmax = f64::NEG_INFINITY;
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    for corner in bx.corners() {
        let (r, c) = view.world_to_pixel(corner);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    if rmax < 0.0 || cmax < 0.0 || rmin > (h as f64) || cmin > (w as f64) {
        return;
    }
    let r0 = rmin.floor().max(0.0) as usize;
    let c0 = cmin.floor().max(0.0) as usize;
    let r1 = (rmax.ceil() as usize).min(h.saturating_sub(1));
    let c1 = (cmax.ceil() as usize).min(w.saturating_sub(1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            if bx.contains(view.pixel_to_world(r, c)) {
                pixels[r * w + c] |= bit;
            }
        }
    }
}

fn check_t(scene: &Scene, t: usize) -> Result<()> {
    if t >= scene.steps() {
        return Err(Error::OutOfRange {
            what: "timestep",
            value: t as i64,
            range: format!("0..{}", scene.steps()),
        });
    }
    Ok(())
}

/// Square window of `cfg.size_m` centered on the ego at step `t`. The ego
/// is painted in the [`Channel::Ego`] channel, everyone else in
/// [`Channel::Other`]. Regions beyond the map are empty (off-road).
pub fn crop_ego(
    g: &MapGrid,
    scene: &Scene,
    ego: usize,
    t: usize,
    cfg: &CropConfig,
) -> Result<SceneRaster> {
    if ego >= scene.agents() {
        return Err(Error::OutOfRange {
            what: "ego index",
            value: ego as i64,
            range: format!("0..{}", scene.agents()),
        });
    }
    check_t(scene, t)?;
    if !(cfg.meters_per_pixel > 0.0 && cfg.size_m > 0.0) {
        return Err(Error::invalid("crop size and resolution must be positive"));
    }
    let s = scene.state(t, ego);
    let side = cfg.side_pixels();
    let view = CropView {
        side,
        mpp: cfg.meters_per_pixel,
        half: 0.5 * side as f64 * cfg.meters_per_pixel,
        center: s.position(),
        theta: s.theta(),
        rotate: cfg.orientation == CropOrientation::EgoUp,
    };
    let mut raster = render(&view, g, scene, t, Some(ego));
    raster.meters_per_pixel = cfg.meters_per_pixel;
    Ok(raster)
}

/// Whole-map raster at map resolution with every valid vehicle painted
/// in [`Channel::Other`].
pub fn rasterize_scene(g: &MapGrid, scene: &Scene, t: usize) -> Result<SceneRaster> {
    check_t(scene, t)?;
    let view = GridView { grid: g };
    let mut raster = render(&view, g, scene, t, None);
    raster.meters_per_pixel = g.resolution();
    Ok(raster)
}
