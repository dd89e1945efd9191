//! Ego-centric training instances cut from generated scenes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    box_corners, path_length, transform_heading, transform_to_ego, Point2, VehicleDims,
};
use crate::map::{crop_ego, read_pgm, write_pgm, CropConfig, MapGrid, SceneRaster};
use crate::scene::Scene;
use crate::{Provenance, SCHEMA_VERSION};

/// Agents that travel less than this over the scene are never the ego.
pub const MIN_EGO_TRAVEL_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoRule {
    /// Longest path.
    #[default]
    Longest,
    /// Largest accumulated movement along the world x axis.
    Dynamic,
    /// Uniform among eligible agents.
    Random,
}

impl fmt::Display for EgoRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EgoRule::Longest => "longest",
            EgoRule::Dynamic => "dynamic",
            EgoRule::Random => "random",
        })
    }
}

impl FromStr for EgoRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "longest" => Ok(EgoRule::Longest),
            "dynamic" => Ok(EgoRule::Dynamic),
            "random" => Ok(EgoRule::Random),
            other => Err(Error::invalid(format!("unknown ego rule {other:?}"))),
        }
    }
}

fn argmax_first(scores: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores {
        // strict comparison keeps the lowest index on ties
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the ego among valid agents that travel at least
/// [`MIN_EGO_TRAVEL_M`]. `seed` only matters for [`EgoRule::Random`].
pub fn select_ego(scene: &Scene, rule: EgoRule, seed: u64) -> Option<usize> {
    let travel: Vec<(usize, f64)> = (0..scene.agents())
        .filter(|&i| scene.is_valid(i))
        .map(|i| (i, path_length(&scene.positions(i)).unwrap_or(0.0)))
        .filter(|&(_, len)| len >= MIN_EGO_TRAVEL_M)
        .collect();
    if travel.is_empty() {
        return None;
    }
    match rule {
        EgoRule::Longest => argmax_first(travel.into_iter()),
        EgoRule::Dynamic => argmax_first(travel.into_iter().map(|(i, _)| {
            let p = scene.positions(i);
            (i, p.windows(2).map(|w| (w[1].x - w[0].x).abs()).sum())
        })),
        EgoRule::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(travel[rng.random_range(0..travel.len())].0)
        }
    }
}

/// Future boxes of one non-ego vehicle, one corner quadruple per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtherVehicle {
    pub agent: usize,
    pub boxes: Vec<[Point2; 4]>,
}

/// One training sample in the ego frame at step `t` (0-based index into
/// the scene); the future window covers steps `t+1 ..= t+T_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoInstance {
    pub raster: SceneRaster,
    pub targets: Vec<Point2>,
    pub headings: Vec<f64>,
    pub other_boxes: Vec<OtherVehicle>,
    pub ego: usize,
    pub ego_dims: VehicleDims,
    pub t: usize,
}

impl EgoInstance {
    pub fn horizon(&self) -> usize {
        self.targets.len()
    }

    /// All corners of all other vehicles as one flat point set.
    pub fn flat_boxes(&self) -> Vec<Point2> {
        self.other_boxes
            .iter()
            .flat_map(|o| o.boxes.iter().flatten().copied())
            .collect()
    }
}

/// The `T − T_p` instances of `scene` seen from agent `ego`.
pub fn build_instances(
    scene: &Scene,
    map: &MapGrid,
    ego: usize,
    horizon: usize,
    crop: &CropConfig,
) -> Result<Vec<EgoInstance>> {
    if ego >= scene.agents() {
        return Err(Error::OutOfRange {
            what: "ego index",
            value: ego as i64,
            range: format!("0..{}", scene.agents()),
        });
    }
    let steps = scene.steps();
    if horizon == 0 || steps <= horizon {
        return Err(Error::invalid(format!(
            "need 0 < T_p < T, got T_p={horizon}, T={steps}"
        )));
    }
    let others: Vec<usize> = (0..scene.agents())
        .filter(|&i| i != ego && scene.is_valid(i))
        .collect();
    (0..steps - horizon)
        .into_par_iter()
        .map(|t| {
            let s = scene.state(t, ego);
            let future = t + 1..=t + horizon;
            let targets = future
                .clone()
                .map(|u| transform_to_ego(scene.state(u, ego).position(), &s))
                .collect::<Result<Vec<_>>>()?;
            let headings = future
                .clone()
                .map(|u| transform_heading(scene.state(u, ego).theta(), &s))
                .collect();
            let other_boxes = others
                .iter()
                .map(|&j| {
                    let boxes = future
                        .clone()
                        .map(|u| {
                            let c = box_corners(&scene.state(u, j), &scene.dims()[j])?;
                            let mut out = [Point2::ORIGIN; 4];
                            for (o, p) in out.iter_mut().zip(c) {
                                *o = transform_to_ego(p, &s)?;
                            }
                            Ok(out)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(OtherVehicle { agent: j, boxes })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EgoInstance {
                raster: crop_ego(map, scene, ego, t, crop)?,
                targets,
                headings,
                other_boxes,
                ego,
                ego_dims: scene.dims()[ego],
                t,
            })
        })
        .collect()
}

/// Keeps instances whose future window shows at least `min_agents`
/// vehicles, ego included.
pub fn filter_instances(instances: Vec<EgoInstance>, min_agents: usize) -> Vec<EgoInstance> {
    instances
        .into_iter()
        .filter(|inst| 1 + inst.other_boxes.len() >= min_agents)
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterRef {
    width: usize,
    height: usize,
    meters_per_pixel: f64,
    /// Bit-packed pixels, one bit per channel.
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    schema_version: u32,
    t: usize,
    ego: usize,
    ego_dims: VehicleDims,
    targets: Vec<Point2>,
    headings: Vec<f64>,
    other_boxes: Vec<OtherVehicle>,
    raster: RasterRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    #[serde(flatten)]
    provenance: Provenance,
    count: usize,
    instances: Vec<String>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `manifest.json` plus `inst_NNNNNN.json` / `.pgm` per instance
/// into `dir`. Returns the number of instance records written.
pub fn export_dataset(
    instances: &[EgoInstance],
    dir: &Path,
    provenance: &Provenance,
) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..instances.len())
        .map(|i| format!("inst_{i:06}"))
        .collect();
    instances
        .par_iter()
        .zip(&names)
        .map(|(inst, stem)| {
            let pgm = format!("{stem}.pgm");
            let r = &inst.raster;
            write_pgm(&dir.join(&pgm), r.width, r.height, &r.pixels)?;
            let rec = InstanceRecord {
                schema_version: SCHEMA_VERSION,
                t: inst.t,
                ego: inst.ego,
                ego_dims: inst.ego_dims,
                targets: inst.targets.clone(),
                headings: inst.headings.clone(),
                other_boxes: inst.other_boxes.clone(),
                raster: RasterRef {
                    width: r.width,
                    height: r.height,
                    meters_per_pixel: r.meters_per_pixel,
                    file: pgm,
                },
            };
            write_json(&dir.join(format!("{stem}.json")), &rec)
        })
        .collect::<Result<()>>()?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        provenance: provenance.clone(),
        count: instances.len(),
        instances: names.iter().map(|n| format!("{n}.json")).collect(),
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(instances.len())
}

/// Reads back a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<(Vec<EgoInstance>, Provenance)> {
    let mpath = dir.join(DATASET_MANIFEST);
    let manifest: DatasetManifest = read_json(&mpath)?;
    crate::check_schema(manifest.schema_version, &mpath)?;
    if manifest.count != manifest.instances.len() {
        return Err(Error::Schema {
            path: mpath,
            msg: format!(
                "count {} but {} instance files listed",
                manifest.count,
                manifest.instances.len()
            ),
        });
    }
    let instances = manifest
        .instances
        .par_iter()
        .map(|name| {
            let path: PathBuf = dir.join(name);
            let rec: InstanceRecord = read_json(&path)?;
            crate::check_schema(rec.schema_version, &path)?;
            let (w, h, pixels) = read_pgm(&dir.join(&rec.raster.file))?;
            if (w, h) != (rec.raster.width, rec.raster.height) {
                return Err(Error::Schema {
                    path,
                    msg: format!(
                        "raster is {w}x{h}, record says {}x{}",
                        rec.raster.width, rec.raster.height
                    ),
                });
            }
            if rec.targets.len() != rec.headings.len() {
                return Err(Error::Schema {
                    path,
                    msg: "targets and headings differ in length".into(),
                });
            }
            Ok(EgoInstance {
                raster: SceneRaster {
                    width: w,
                    height: h,
                    meters_per_pixel: rec.raster.meters_per_pixel,
                    pixels,
                },
                targets: rec.targets,
                headings: rec.headings,
                other_boxes: rec.other_boxes,
                ego: rec.ego,
                ego_dims: rec.ego_dims,
                t: rec.t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((instances, manifest.provenance))
}
