//! Map persistence (binary PGM per layer + JSON sidecar) and scene renders.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raster::{Channel, SceneRaster};
use super::{Layer, MapGrid};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Point2};
use crate::scene::Scene;
use crate::SCHEMA_VERSION;

/// Writes a binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape(width * height, data.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary (P5) 8-bit PGM as `(width, height, data)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Schema {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

#[derive(Debug, Serialize, Deserialize)]
struct MapSidecar {
    schema_version: u32,
    map_id: String,
    resolution: f64,
    origin: Point2,
    /// `[rows, cols]`
    extent: [usize; 2],
    layers: Vec<String>,
}

fn layer_path(dir: &Path, map_id: &str, layer: Layer) -> PathBuf {
    dir.join(format!("{map_id}_{}.pgm", layer.name()))
}

/// Writes `<map_id>.json` plus one `<map_id>_<layer>.pgm` per layer.
/// Image row 0 is the northern edge of the grid.
pub fn save_map(g: &MapGrid, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols) = g.extent();
    for layer in Layer::ALL {
        let mut img = vec![0u8; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if g.get(layer, r, c) {
                    img[(rows - 1 - r) * cols + c] = 255;
                }
            }
        }
        write_pgm(&layer_path(dir, g.map_id(), layer), cols, rows, &img)?;
    }
    let sidecar = MapSidecar {
        schema_version: SCHEMA_VERSION,
        map_id: g.map_id().to_string(),
        resolution: g.resolution(),
        origin: g.origin(),
        extent: [rows, cols],
        layers: Layer::ALL.iter().map(|l| l.name().to_string()).collect(),
    };
    let path = dir.join(format!("{}.json", g.map_id()));
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_map(dir: &Path, map_id: &str) -> Result<MapGrid> {
    let path = dir.join(format!("{map_id}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: MapSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    crate::check_schema(sidecar.schema_version, &path)?;
    let [rows, cols] = sidecar.extent;
    let mut cells = vec![0u8; rows * cols];
    for name in &sidecar.layers {
        let layer = Layer::from_name(name).ok_or_else(|| Error::Schema {
            path: path.clone(),
            msg: format!("unknown layer {name}"),
        })?;
        let lp = layer_path(dir, map_id, layer);
        let (w, h, img) = read_pgm(&lp)?;
        if (w, h) != (cols, rows) {
            return Err(Error::Schema {
                path: lp,
                msg: format!("layer is {w}x{h}, sidecar says {cols}x{rows}"),
            });
        }
        for r in 0..rows {
            for c in 0..cols {
                if img[(rows - 1 - r) * cols + c] != 0 {
                    cells[r * cols + c] |= layer.bit();
                }
            }
        }
    }
    MapGrid::from_cells(
        sidecar.map_id,
        sidecar.resolution,
        sidecar.origin,
        rows,
        cols,
        cells,
    )
}

/// One 0/255 PGM per raster channel, named `<stem>_<channel>.pgm`.
pub fn write_raster_pgms(raster: &SceneRaster, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for ch in Channel::ALL {
        let path = dir.join(format!("{stem}_{}.pgm", ch.name()));
        write_pgm(
            &path,
            raster.width,
            raster.height,
            &raster.channel_image(ch),
        )?;
        out.push(path);
    }
    Ok(out)
}

/// Vector render of a scene at step `t`: drivable area in gray, the ego in
/// white, other vehicles in orange, full trajectories as thin polylines.
pub fn render_scene_svg(g: &MapGrid, scene: &Scene, t: usize, ego: Option<usize>) -> String {
    let (rows, cols) = g.extent();
    let res = g.resolution();
    let o = g.origin();
    let (w, h) = (g.width_m(), g.height_m());
    // svg y grows downward; flip world y
    let sx = |p: Point2| p.x - o.x;
    let sy = |p: Point2| h - (p.y - o.y);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{w}" height="{h}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{w}" height="{h}" fill="#1e1e1e"/>"##);
    let _ = writeln!(svg, r##"<g fill="#6b6b6b" stroke="none">"##);
    for r in 0..rows {
        let mut c = 0;
        while c < cols {
            if g.get(Layer::DrivableArea, r, c) {
                let start = c;
                while c < cols && g.get(Layer::DrivableArea, r, c) {
                    c += 1;
                }
                let y = h - (r + 1) as f64 * res;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{}" height="{}"/>"#,
                    start as f64 * res,
                    y,
                    (c - start) as f64 * res,
                    res
                );
            } else {
                c += 1;
            }
        }
    }
    let _ = writeln!(svg, "</g>");
    for i in 0..scene.agents() {
        if !scene.is_valid(i) {
            continue;
        }
        let color = if Some(i) == ego { "#ffffff" } else { "#ff8c00" };
        let pts: Vec<String> = scene
            .positions(i)
            .iter()
            .map(|p| format!("{:.3},{:.3}", sx(*p), sy(*p)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="0.3" stroke-opacity="0.6"/>"#,
            pts.join(" ")
        );
        if t < scene.steps() {
            let bx = OrientedBox::from_pose(scene.state(t, i).pose(), scene.dims()[i]);
            let corners: Vec<String> = bx
                .corners()
                .iter()
                .map(|p| format!("{:.3},{:.3}", sx(*p), sy(*p)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" stroke="black" stroke-width="0.1"/>"#,
                corners.join(" ")
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
