//! The train / generate / convert / eval stages as functions of a
//! [`RunConfig`], its seed and input files.
//!
//! Directory layout written by the stages:
//!
//! ```text
//! train/     checkpoint.bin  losses.csv  train_manifest.json
//! generate/  manifest.json  scene_00000.json ...  maps/  [svg/]
//! convert/   manifest.json  inst_000000.{json,pgm} ...  scenes.csv
//! eval/      metrics.json  metrics.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    condition_dim, encode_condition, generate_scene, train_denoiser, Denoiser, GenerationRequest,
    GuidanceConfig, ScheduleConfig, TrainConfig, TrainExample, VarianceSchedule,
};
use crate::ego::{
    build_instances, export_dataset, filter_instances, import_dataset, select_ego, EgoRule,
};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Point2, Pose};
use crate::guides::GuideConfig;
use crate::map::{
    generate_layout, load_map, render_scene_svg, save_map, write_raster_pgms, CropConfig, MapGrid,
    RoadLayout,
};
use crate::metrics::{
    collision_rate, planning_l2, realism_metric, rule_metric, MetricsReport, PlanSample,
    DEFAULT_HORIZONS,
};
use crate::scene::{AgentRecord, Scene};
use crate::toy::{map_seed, pick_center, sample_dims, sample_scene, toy_dataset, ToyConfig};
use crate::{Provenance, SCHEMA_VERSION};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSSES_FILE: &str = "losses.csv";
pub const TRAIN_MANIFEST: &str = "train_manifest.json";
pub const SCENE_MANIFEST: &str = "manifest.json";
pub const MAPS_DIR: &str = "maps";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONVERT_LOG: &str = "scenes.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Scenes per run.
    pub scenes: usize,
    /// Agents per generated scene.
    pub agents: usize,
    /// Also write an SVG per scene.
    pub render_svg: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            scenes: 100,
            agents: 6,
            render_svg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertConfig {
    /// Future horizon `T_p` in steps.
    pub horizon: usize,
    pub rule: EgoRule,
    /// Instances showing fewer vehicles (ego included) are dropped.
    pub min_agents: usize,
    pub crop: CropConfig,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            horizon: 6,
            rule: EgoRule::Longest,
            min_agents: 2,
            crop: CropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Planning horizons in seconds.
    pub horizons: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: DEFAULT_HORIZONS.to_vec(),
        }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides `train.seed`.
    pub seed: u64,
    /// Procedural maps and training scenes; `data.steps` is the scene
    /// length `T` and `data.dt` its step.
    pub data: ToyConfig,
    /// Frames in the map condition.
    pub history: usize,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub guides: GuideConfig,
    pub guidance: GuidanceConfig,
    pub generate: GenerateConfig,
    pub convert: ConvertConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: ToyConfig::default(),
            history: 1,
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            guides: GuideConfig::default(),
            guidance: GuidanceConfig::default(),
            generate: GenerateConfig::default(),
            convert: ConvertConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.data
            .map
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.guides
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        VarianceSchedule::from_config(&self.schedule).map_err(|e| Error::Config(e.to_string()))?;
        if self.history == 0 {
            return bad("history must be >= 1".into());
        }
        if self.data.steps < 2 || self.data.agents < 2 || self.data.maps == 0 {
            return bad("data needs >= 2 steps, >= 2 agents and >= 1 map".into());
        }
        if self.convert.horizon == 0 || self.convert.horizon >= self.data.steps {
            return bad(format!(
                "convert.horizon must be in 1..{}, got {}",
                self.data.steps, self.convert.horizon
            ));
        }
        if self.generate.agents == 0 {
            return bad("generate.agents must be >= 1".into());
        }
        if !(self.guidance.scale.is_finite() && self.guidance.max_shift >= 0.0) {
            return bad("guidance scale must be finite and max_shift >= 0".into());
        }
        if self
            .eval
            .horizons
            .iter()
            .any(|h| !(h.is_finite() && *h > 0.0))
        {
            return bad("eval horizons must be positive".into());
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Maps and layouts of a run, rebuilt from the seed.
pub fn build_maps(cfg: &RunConfig) -> Result<(Vec<MapGrid>, Vec<RoadLayout>)> {
    let spec = &cfg.data.map;
    let built = (0..cfg.data.maps)
        .into_par_iter()
        .map(|i| {
            let ms = map_seed(cfg.seed, i);
            let layout = generate_layout(ms, spec)?;
            let map = layout.rasterize(
                format!("map-{ms}"),
                spec.resolution,
                spec.origin(),
                spec.rows(),
                spec.cols(),
            )?;
            Ok((map, layout))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(built.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub examples: usize,
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: Option<String>,
}

/// Builds the procedural dataset, fits the denoiser and writes the
/// checkpoint, loss curve and a manifest into `out`. On divergence the
/// last good parameters are still written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    create_dir(out)?;
    let sched = VarianceSchedule::from_config(&cfg.schedule)?;
    let data = toy_dataset(cfg.seed, &cfg.data)?;
    let examples = data
        .scenes
        .iter()
        .map(|s| {
            Ok(TrainExample {
                scene: s.scene.clone(),
                center: s.center,
                cond: encode_condition(&data.maps[s.map_index], s.center, cfg.history)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    info!("training on {} scenes", examples.len());
    let run = train_denoiser(&examples, &sched, &cfg.train_config())?;

    let ckpt = out.join(CHECKPOINT_FILE);
    run.denoiser.save(&ckpt, &sched)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in run.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    let lpath = out.join(LOSSES_FILE);
    fs::write(&lpath, csv).map_err(|e| Error::io(&lpath, e))?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        provenance: cfg.provenance(),
        examples: examples.len(),
        steps_run: run.losses.len(),
        initial_loss: run.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
        diverged: run.diverged.clone(),
    };
    write_json(&out.join(TRAIN_MANIFEST), &summary)?;
    if let Some(why) = run.diverged {
        return Err(Error::Numeric(format!(
            "training diverged ({why}); last good checkpoint kept at {}",
            ckpt.display()
        )));
    }
    Ok(ckpt)
}

/// Loads a checkpoint and checks it was trained for `cfg`.
pub fn load_compatible(cfg: &RunConfig, checkpoint: &Path) -> Result<(Denoiser, VarianceSchedule)> {
    let (den, sched) = Denoiser::load(checkpoint)?;
    let arch = den.arch();
    let mut problems = Vec::new();
    if sched.config() != &cfg.schedule {
        problems.push("variance schedule".to_string());
    }
    if arch.steps != cfg.data.steps {
        problems.push(format!(
            "trajectory length {} vs {}",
            arch.steps, cfg.data.steps
        ));
    }
    if arch.cond_dim != condition_dim(cfg.history) {
        problems.push(format!(
            "condition size {} vs {}",
            arch.cond_dim,
            condition_dim(cfg.history)
        ));
    }
    if arch.hidden != cfg.train.hidden || arch.time_embed != cfg.train.time_embed {
        problems.push("network widths".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match config: {}",
            checkpoint.display(),
            problems.join(", ")
        )));
    }
    Ok((den, sched))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    /// Sampled from the guided diffusion model.
    Diffusion,
    /// Lane-following rollouts; serves as the reference distribution.
    Procedural,
}

/// On-disk form of one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub scene_seed: u64,
    pub source: SceneSource,
    pub guide_config: Option<GuideConfig>,
    pub guidance: Option<GuidanceConfig>,
    pub map_id: String,
    pub dt: f64,
    pub center: Point2,
    pub agents: Vec<AgentRecord>,
}

impl SceneFile {
    pub fn scene(&self) -> Result<Scene> {
        Scene::from_records(&self.agents, self.dt, &self.map_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub scene_seed: u64,
    pub map_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: u32,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub source: SceneSource,
    pub maps: Vec<String>,
    pub scenes: Vec<SceneEntry>,
}

/// Seed of the `j`-th scene of a run.
pub fn scene_seed(seed: u64, j: usize) -> u64 {
    // splitmix64 finalizer over (seed, j)
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((j as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Plan {
    map_index: usize,
    center: Point2,
    seed: u64,
    rng: ChaCha8Rng,
}

fn plan_scene(cfg: &RunConfig, maps: &[MapGrid], j: usize) -> Plan {
    let seed = scene_seed(cfg.seed, j);
    let map_index = j % maps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inset = 0.25 * cfg.data.map.width_m.min(cfg.data.map.height_m);
    let center = pick_center(&maps[map_index], inset, &mut rng);
    Plan {
        map_index,
        center,
        seed,
        rng,
    }
}

fn generate_one(
    cfg: &RunConfig,
    maps: &[MapGrid],
    layouts: &[RoadLayout],
    model: Option<&(Denoiser, VarianceSchedule)>,
    j: usize,
) -> Result<SceneFile> {
    let mut plan = plan_scene(cfg, maps, j);
    let map = &maps[plan.map_index];
    let (scene, source) = match model {
        Some((den, sched)) => {
            let dims = (0..cfg.generate.agents)
                .map(|_| sample_dims(&mut plan.rng))
                .collect();
            let req = GenerationRequest {
                dims,
                center: plan.center,
                dt: cfg.data.dt,
                history: cfg.history,
                seed: plan.seed,
            };
            let s = generate_scene(map, &req, &cfg.guides, &cfg.guidance, den, sched)?;
            (s, SceneSource::Diffusion)
        }
        None => {
            let toy = ToyConfig {
                agents: cfg.generate.agents.max(2),
                ..cfg.data.clone()
            };
            let layout = &layouts[plan.map_index];
            let mut found = None;
            for _ in 0..200 {
                if let Some(s) = sample_scene(map, layout, plan.center, &toy, &mut plan.rng) {
                    found = Some(s);
                    break;
                }
                let inset = 0.25 * cfg.data.map.width_m.min(cfg.data.map.height_m);
                plan.center = pick_center(map, inset, &mut plan.rng);
            }
            let s = found.ok_or_else(|| {
                Error::invalid(format!(
                    "could not place a reference scene on {}",
                    map.map_id()
                ))
            })?;
            (s, SceneSource::Procedural)
        }
    };
    let diffusion = source == SceneSource::Diffusion;
    Ok(SceneFile {
        schema_version: SCHEMA_VERSION,
        provenance: cfg.provenance(),
        scene_seed: plan.seed,
        source,
        guide_config: diffusion.then(|| cfg.guides.clone()),
        guidance: diffusion.then(|| cfg.guidance.clone()),
        map_id: map.map_id().to_string(),
        dt: scene.dt(),
        center: plan.center,
        agents: scene.agent_records(),
    })
}

pub fn scene_file_name(j: usize) -> String {
    format!("scene_{j:05}.json")
}

/// Samples `cfg.generate.scenes` scenes with the model in `checkpoint`, or
/// procedural reference scenes when `checkpoint` is `None`. Writes one JSON
/// per scene, the maps, a manifest and optional SVG renders.
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<SceneManifest> {
    cfg.validate()?;
    let model = checkpoint.map(|c| load_compatible(cfg, c)).transpose()?;
    let (maps, layouts) = build_maps(cfg)?;
    create_dir(out)?;
    let maps_dir = out.join(MAPS_DIR);
    for m in &maps {
        save_map(m, &maps_dir)?;
    }
    let files = (0..cfg.generate.scenes)
        .into_par_iter()
        .map(|j| generate_one(cfg, &maps, &layouts, model.as_ref(), j))
        .collect::<Result<Vec<_>>>()?;

    let svg_dir = out.join("svg");
    if cfg.generate.render_svg {
        create_dir(&svg_dir)?;
    }
    let mut entries = Vec::with_capacity(files.len());
    for (j, f) in files.iter().enumerate() {
        let name = scene_file_name(j);
        write_json(&out.join(&name), f)?;
        if cfg.generate.render_svg {
            let map = maps
                .iter()
                .find(|m| m.map_id() == f.map_id)
                .expect("own map");
            let scene = f.scene()?;
            let ego = select_ego(&scene, cfg.convert.rule, f.scene_seed);
            let path = svg_dir.join(format!("scene_{j:05}.svg"));
            let svg = render_scene_svg(map, &scene, 0, ego);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        }
        entries.push(SceneEntry {
            file: name,
            scene_seed: f.scene_seed,
            map_id: f.map_id.clone(),
        });
    }
    let manifest = SceneManifest {
        schema_version: SCHEMA_VERSION,
        provenance: cfg.provenance(),
        source: if model.is_some() {
            SceneSource::Diffusion
        } else {
            SceneSource::Procedural
        },
        maps: maps.iter().map(|m| m.map_id().to_string()).collect(),
        scenes: entries,
    };
    write_json(&out.join(SCENE_MANIFEST), &manifest)?;
    info!(
        "wrote {} scenes to {}",
        manifest.scenes.len(),
        out.display()
    );
    Ok(manifest)
}

/// Scenes of a generate directory in manifest order, with their maps.
#[derive(Debug, Clone)]
pub struct SceneSet {
    pub manifest: SceneManifest,
    pub files: Vec<SceneFile>,
    pub scenes: Vec<Scene>,
    pub maps: Vec<MapGrid>,
}

impl SceneSet {
    pub fn map_for(&self, scene: &Scene) -> Result<&MapGrid> {
        self.maps
            .iter()
            .find(|m| m.map_id() == scene.map_id())
            .ok_or_else(|| Error::invalid(format!("no map {} in scene set", scene.map_id())))
    }
}

pub fn load_scene_set(dir: &Path) -> Result<SceneSet> {
    let mpath = dir.join(SCENE_MANIFEST);
    let manifest: SceneManifest = read_json(&mpath)?;
    crate::check_schema(manifest.schema_version, &mpath)?;
    let files = manifest
        .scenes
        .par_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let f: SceneFile = read_json(&path)?;
            crate::check_schema(f.schema_version, &path)?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let scenes = files
        .iter()
        .map(SceneFile::scene)
        .collect::<Result<Vec<_>>>()?;
    let maps_dir = dir.join(MAPS_DIR);
    let maps = manifest
        .maps
        .iter()
        .map(|id| load_map(&maps_dir, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSet {
        manifest,
        files,
        scenes,
        maps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertRow {
    pub file: String,
    pub ego: Option<usize>,
    pub instances: usize,
    pub kept: usize,
}

/// Ego selection, instance construction, filtering and export for every
/// scene of a generate directory. Scenes without an eligible ego are
/// skipped and logged.
pub fn cmd_convert(cfg: &RunConfig, scenes_dir: &Path, out: &Path) -> Result<Vec<ConvertRow>> {
    cfg.validate()?;
    let set = load_scene_set(scenes_dir)?;
    let cc = &cfg.convert;
    let per_scene = set
        .scenes
        .par_iter()
        .zip(&set.manifest.scenes)
        .map(|(scene, entry)| {
            let Some(ego) = select_ego(scene, cc.rule, entry.scene_seed) else {
                return Ok((None, 0, Vec::new()));
            };
            let all = build_instances(scene, set.map_for(scene)?, ego, cc.horizon, &cc.crop)?;
            let n = all.len();
            Ok((Some(ego), n, filter_instances(all, cc.min_agents)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(per_scene.len());
    let mut instances = Vec::new();
    for ((ego, n, kept), entry) in per_scene.into_iter().zip(&set.manifest.scenes) {
        match ego {
            None => warn!("{}: no agent moves >= 1 m; skipped", entry.file),
            Some(e) => info!(
                "{}: ego {e}, {n} instances, {} kept",
                entry.file,
                kept.len()
            ),
        }
        rows.push(ConvertRow {
            file: entry.file.clone(),
            ego,
            instances: n,
            kept: kept.len(),
        });
        instances.extend(kept);
    }
    export_dataset(&instances, out, &cfg.provenance())?;
    let mut csv = String::from("scene,ego,instances,kept\n");
    for r in &rows {
        let ego = r.ego.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{ego},{},{}", r.file, r.instances, r.kept);
    }
    let path = out.join(CONVERT_LOG);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Planned ego poses for one dataset instance: ego-frame `[x, y, θ]`,
/// where `θ` is relative to the ego heading (0 = straight ahead, +y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPrediction {
    pub instance: usize,
    pub poses: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub dt: f64,
    pub predictions: Vec<PlanPrediction>,
}

/// Paths of instance-level planning predictions and the dataset they refer to.
#[derive(Debug, Clone, Copy)]
pub struct PlanInputs<'a> {
    pub dataset: &'a Path,
    pub predictions: &'a Path,
}

fn planning_metrics(
    inputs: PlanInputs<'_>,
    horizons: &[f64],
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>, usize)> {
    let (instances, _) = import_dataset(inputs.dataset)?;
    let pf: PredictionFile = read_json(inputs.predictions)?;
    crate::check_schema(pf.schema_version, inputs.predictions)?;
    if pf.predictions.is_empty() {
        return Err(Error::Empty("planning predictions"));
    }
    let mut l2_sums = vec![0.0; horizons.len()];
    let mut samples = Vec::with_capacity(pf.predictions.len());
    for p in &pf.predictions {
        let inst = instances.get(p.instance).ok_or_else(|| Error::OutOfRange {
            what: "prediction instance",
            value: p.instance as i64,
            range: format!("0..{}", instances.len()),
        })?;
        let pos: Vec<Point2> = p.poses.iter().map(|q| Point2::new(q[0], q[1])).collect();
        let l2 = planning_l2(&pos, &inst.targets, pf.dt, horizons)?;
        for (s, (_, v)) in l2_sums.iter_mut().zip(&l2.at) {
            *s += v;
        }
        let others = (0..inst.horizon())
            .map(|k| {
                inst.other_boxes
                    .iter()
                    .map(|o| OrientedBox::from_corners(&o.boxes[k]))
                    .collect()
            })
            .collect();
        samples.push(PlanSample {
            // the ego frame faces +y
            pred: p
                .poses
                .iter()
                .map(|q| Pose::new(Point2::new(q[0], q[1]), std::f64::consts::FRAC_PI_2 + q[2]))
                .collect(),
            ego_dims: inst.ego_dims,
            others,
        });
    }
    let n = pf.predictions.len() as f64;
    let mut l2_at = BTreeMap::new();
    for (h, s) in horizons.iter().zip(&l2_sums) {
        l2_at.insert(MetricsReport::horizon_key(*h), s / n);
    }
    l2_at.insert(
        "avg".into(),
        l2_sums.iter().sum::<f64>() / (n * horizons.len() as f64),
    );
    let cr = collision_rate(&samples, pf.dt, horizons)?;
    let mut cr_at: BTreeMap<String, f64> = cr
        .at
        .iter()
        .map(|(h, v)| (MetricsReport::horizon_key(*h), *v))
        .collect();
    cr_at.insert("avg".into(), cr.avg);
    Ok((l2_at, cr_at, samples.len()))
}

/// Scenario metrics of `gen_dir` against `ref_dir`, plus planning metrics
/// when predictions are supplied. Writes `metrics.json` and `metrics.csv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    gen_dir: &Path,
    ref_dir: &Path,
    plan: Option<PlanInputs<'_>>,
    out: &Path,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let gen = load_scene_set(gen_dir)?;
    let reference = load_scene_set(ref_dir)?;
    if gen.scenes.is_empty() || reference.scenes.is_empty() {
        return Err(Error::Empty("scene directory"));
    }
    let rule = rule_metric(&gen.scenes, &gen.maps, &cfg.guides)?;
    let realism = realism_metric(&gen.scenes, &reference.scenes)?;
    let mut counts = BTreeMap::new();
    counts.insert("gen_scenes".to_string(), gen.scenes.len());
    counts.insert("ref_scenes".to_string(), reference.scenes.len());
    let (l2_at, collision_rate_at) = match plan {
        Some(p) => {
            let (l2, cr, n) = planning_metrics(p, &cfg.eval.horizons)?;
            counts.insert("plan_samples".to_string(), n);
            (l2, cr)
        }
        None => (BTreeMap::new(), BTreeMap::new()),
    };
    let report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rule,
        real: realism.real,
        rel_real: realism.rel_real,
        realism_components: realism.components,
        l2_at,
        collision_rate_at,
        avg_convention: "mean_of_horizons".into(),
        counts,
    };
    if !report.is_valid() {
        return Err(Error::Numeric(
            "metrics report contains invalid values".into(),
        ));
    }
    create_dir(out)?;
    write_json(&out.join(METRICS_JSON), &report)?;
    let cpath = out.join(METRICS_CSV);
    fs::write(&cpath, report.to_csv()).map_err(|e| Error::io(&cpath, e))?;
    Ok(report)
}

/// Renders a generate directory (one SVG per scene at step `t`) or a
/// convert directory (one PGM per raster channel per instance).
pub fn cmd_render(cfg: &RunConfig, input: &Path, t: usize, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let manifest = input.join(SCENE_MANIFEST);
    let probe: serde_json::Value = read_json(&manifest)?;
    if probe.get("scenes").is_some() {
        let set = load_scene_set(input)?;
        for (scene, entry) in set.scenes.iter().zip(&set.manifest.scenes) {
            if t >= scene.steps() {
                return Err(Error::OutOfRange {
                    what: "render step",
                    value: t as i64,
                    range: format!("0..{}", scene.steps()),
                });
            }
            let ego = select_ego(scene, cfg.convert.rule, entry.scene_seed);
            let svg = render_scene_svg(set.map_for(scene)?, scene, t, ego);
            let path = out.join(entry.file.replace(".json", ".svg"));
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        }
        Ok(set.scenes.len())
    } else {
        let (instances, _) = import_dataset(input)?;
        for (i, inst) in instances.iter().enumerate() {
            write_raster_pgms(&inst.raster, out, &format!("inst_{i:06}"))?;
        }
        Ok(instances.len())
    }
}
