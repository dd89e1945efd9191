//! Conditional trajectory diffusion: variance schedule, closed-form forward
//! corruption, noise-prediction denoiser, and (guided) ancestral sampling.
//!
//! The model works on a normalized copy of the `[T × M × 4]` state tensor:
//! positions relative to a scene center, headings unwrapped along each
//! trajectory, every channel z-scored with statistics from the training set.

mod denoiser;
mod train;

use std::f64::consts::FRAC_PI_2;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use denoiser::{step_embedding, Denoiser, DenoiserArch};
pub use train::{train_denoiser, TrainConfig, TrainExample, TrainRun};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Point2, VehicleDims};
use crate::guides::{self, GuideConfig, Trajectories};
use crate::map::{Layer, MapGrid};
use crate::scene::{Scene, StateTensor, CHANNELS, THETA, X, Y};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Linear with both endpoints multiplied by `1000 / K`, so shorter
    /// chains still reach a near-Gaussian terminal marginal.
    ScaledLinear,
    /// Squared-cosine cumulative schedule; `beta_max` is ignored and betas
    /// are capped at 0.999.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            kind: ScheduleKind::ScaledLinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<VarianceSchedule> {
    VarianceSchedule::from_config(&ScheduleConfig {
        steps,
        beta_min,
        beta_max,
        kind,
    })
}

impl VarianceSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        let k = cfg.steps;
        if k == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(cfg.beta_min > 0.0 && cfg.beta_min <= cfg.beta_max && cfg.beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got {} and {}",
                cfg.beta_min, cfg.beta_max
            )));
        }
        let linear = |lo: f64, hi: f64| -> Vec<f64> {
            if k == 1 {
                return vec![lo];
            }
            (0..k)
                .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
                .collect()
        };
        let betas = match cfg.kind {
            ScheduleKind::Linear => linear(cfg.beta_min, cfg.beta_max),
            ScheduleKind::ScaledLinear => {
                let s = 1000.0 / k as f64;
                linear(cfg.beta_min * s, cfg.beta_max * s)
            }
            ScheduleKind::Cosine => {
                let off = 0.008;
                let f = |i: usize| {
                    let a = ((i as f64 / k as f64 + off) / (1.0 + off) * FRAC_PI_2).cos();
                    a * a
                };
                (1..=k)
                    .map(|i| (1.0 - f(i) / f(i - 1)).clamp(cfg.beta_min, 0.999))
                    .collect()
            }
        };
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("schedule produced betas outside (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("schedule betas must be non-decreasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(VarianceSchedule {
            config: cfg.clone(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of diffusion steps K.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_k`, 1-based.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// `ᾱ_k = Π_{j≤k} α_j`, 1-based.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                value: k as i64,
                range: format!("1..={}", self.steps()),
            });
        }
        Ok(())
    }
}

/// `τᵏ = √ᾱₖ·τ⁰ + √(1−ᾱₖ)·ε`.
pub fn forward_sample(
    tau0: &StateTensor,
    k: usize,
    noise: &StateTensor,
    sched: &VarianceSchedule,
) -> Result<StateTensor> {
    sched.check_step(k)?;
    tau0.check_same_shape(noise)?;
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = tau0
        .as_slice()
        .iter()
        .zip(noise.as_slice())
        .map(|(x, e)| a * x + b * e)
        .collect();
    StateTensor::from_vec(tau0.steps(), tau0.agents(), data)
}

/// Per-channel affine normalization of model-space states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    /// Z-score statistics over every entry of every tensor.
    pub fn fit(tensors: &[StateTensor]) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; CHANNELS];
        for t in tensors {
            for chunk in t.as_slice().chunks_exact(CHANNELS) {
                for c in 0..CHANNELS {
                    sum[c] += chunk[c];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("normalization data"));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut sq = [0.0; CHANNELS];
        for t in tensors {
            for chunk in t.as_slice().chunks_exact(CHANNELS) {
                for c in 0..CHANNELS {
                    sq[c] += (chunk[c] - mean[c]).powi(2);
                }
            }
        }
        let std = sq.map(|s| (s / n as f64).sqrt().max(1e-3));
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, x: &StateTensor) -> StateTensor {
        self.map(x, |c, v| (v - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, x: &StateTensor) -> StateTensor {
        self.map(x, |c, v| v * self.std[c] + self.mean[c])
    }

    fn map(&self, x: &StateTensor, f: impl Fn(usize, f64) -> f64) -> StateTensor {
        let data = x
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, v)| f(k % CHANNELS, *v))
            .collect();
        StateTensor::from_vec(x.steps(), x.agents(), data).expect("same shape")
    }
}

/// Scene states re-expressed around `center` with each heading track
/// unwrapped into a continuous angle.
pub fn to_model_space(scene: &Scene, center: Point2) -> StateTensor {
    let mut s = scene.states().clone();
    for i in 0..s.agents() {
        let mut prev = s.get(0, i, THETA);
        for t in 0..s.steps() {
            s.add(t, i, X, -center.x);
            s.add(t, i, Y, -center.y);
            if t > 0 {
                let raw = s.get(t, i, THETA);
                let unwrapped = prev + normalize_angle(raw - prev);
                s.set(t, i, THETA, unwrapped);
                prev = unwrapped;
            }
        }
    }
    s
}

/// Inverse of [`to_model_space`] up to heading wrap.
pub fn from_model_space(states: &StateTensor, center: Point2) -> StateTensor {
    let mut s = states.clone();
    for t in 0..s.steps() {
        for i in 0..s.agents() {
            s.add(t, i, X, center.x);
            s.add(t, i, Y, center.y);
        }
    }
    s
}

/// Side of the square condition window, meters.
pub const CONDITION_WINDOW_M: f64 = 60.0;
/// Pooled cells per window side.
pub const CONDITION_POOL: usize = 4;
const POOL_SUBSAMPLES: usize = 30;

/// Feature length produced by [`encode_condition`] for history `h`.
pub fn condition_dim(history: usize) -> usize {
    history * CONDITION_POOL * CONDITION_POOL * Layer::ALL.len()
}

/// Average-pools every map layer over a `4 × 4` grid covering an
/// axis-aligned 60 m window centered at `center`. The map is static, so the
/// `h` history frames repeat the same block. Block layout: layer-major, then
/// pooled row (south to north), then column (west to east).
pub fn encode_condition(map: &MapGrid, center: Point2, history: usize) -> Result<Vec<f64>> {
    if history == 0 {
        return Err(Error::invalid("history length must be >= 1"));
    }
    let cell = CONDITION_WINDOW_M / CONDITION_POOL as f64;
    let sub = cell / POOL_SUBSAMPLES as f64;
    let corner = center - Point2::new(0.5 * CONDITION_WINDOW_M, 0.5 * CONDITION_WINDOW_M);
    let layers = Layer::ALL.len();
    let per_cell = (POOL_SUBSAMPLES * POOL_SUBSAMPLES) as f64;
    let mut block = vec![0.0; layers * CONDITION_POOL * CONDITION_POOL];
    for pr in 0..CONDITION_POOL {
        for pc in 0..CONDITION_POOL {
            let mut counts = [0u32; 8];
            for sr in 0..POOL_SUBSAMPLES {
                for sc in 0..POOL_SUBSAMPLES {
                    let p = corner
                        + Point2::new(
                            pc as f64 * cell + (sc as f64 + 0.5) * sub,
                            pr as f64 * cell + (sr as f64 + 0.5) * sub,
                        );
                    let bits = map.bits_at(p);
                    for (li, layer) in Layer::ALL.iter().enumerate() {
                        if bits & layer.bit() != 0 {
                            counts[li] += 1;
                        }
                    }
                }
            }
            for li in 0..layers {
                block[(li * CONDITION_POOL + pr) * CONDITION_POOL + pc] =
                    counts[li] as f64 / per_cell;
            }
        }
    }
    let mut out = Vec::with_capacity(block.len() * history);
    for _ in 0..history {
        out.extend_from_slice(&block);
    }
    Ok(out)
}

/// Anything that predicts the noise in a normalized noised tensor.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &StateTensor, k: usize, cond: &[f64]) -> Result<StateTensor>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &StateTensor, k: usize, cond: &[f64]) -> Result<StateTensor> {
        self.check_input(x, cond)?;
        Ok(self.forward_traced(x, k, cond).0)
    }
}

/// One independent Gaussian stream per agent slot, so permuting agents
/// together with their streams permutes every draw identically.
#[derive(Debug, Clone)]
pub struct AgentNoise {
    streams: Vec<ChaCha8Rng>,
}

impl AgentNoise {
    pub fn new(seed: u64, agents: usize) -> Self {
        let streams = (0..agents)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        AgentNoise { streams }
    }

    /// Slot `j` of the result is slot `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        AgentNoise {
            streams: perm.iter().map(|&p| self.streams[p].clone()).collect(),
        }
    }

    pub fn agents(&self) -> usize {
        self.streams.len()
    }

    /// Standard-normal tensor; agent `i` draws its time-major block from
    /// stream `i`.
    pub fn draw(&mut self, steps: usize) -> StateTensor {
        let mut out = StateTensor::zeros(steps, self.streams.len());
        for (i, rng) in self.streams.iter_mut().enumerate() {
            let block: Vec<f64> = (0..steps * CHANNELS)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            out.set_agent_block(i, &block);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSign {
    /// `μ − α_g ∇R`: steps down the penalty.
    Descent,
    /// `μ + α_g ∇R`.
    Ascent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Multiplier on the variance-proportional step `α_g = scale·β_k`.
    pub scale: f64,
    pub sign: GuidanceSign,
    /// Per-entry cap on the normalized mean shift, in units of the step's
    /// noise std `√β_k`; 0 disables the cap.
    pub max_shift: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 1.0,
            sign: GuidanceSign::Descent,
            max_shift: 1.0,
        }
    }
}

/// What a guided step needs to evaluate the guides in world units.
#[derive(Debug, Clone, Copy)]
pub struct GuideContext<'a> {
    pub guides: &'a GuideConfig,
    pub guidance: &'a GuidanceConfig,
    pub map: Option<&'a MapGrid>,
    pub dims: &'a [VehicleDims],
    pub valid: &'a [bool],
    pub norm: &'a Normalizer,
    pub center: Point2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceStatus {
    Off,
    Applied,
    /// Gradient was non-finite; the unguided mean was used.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub states: StateTensor,
    pub guidance: GuidanceStatus,
}

/// `μ_φ = (τᵏ − βₖ/√(1−ᾱₖ)·ε̂) / √αₖ`.
fn posterior_mean(
    x: &StateTensor,
    k: usize,
    cond: &[f64],
    den: &dyn NoisePredictor,
    sched: &VarianceSchedule,
) -> Result<StateTensor> {
    let eps = den.predict(x, k, cond)?;
    x.check_same_shape(&eps)?;
    let coef = sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt();
    let inv = 1.0 / sched.alpha(k).sqrt();
    let data = x
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(xv, e)| (xv - coef * e) * inv)
        .collect();
    StateTensor::from_vec(x.steps(), x.agents(), data)
}

fn add_noise(
    mean: StateTensor,
    k: usize,
    sched: &VarianceSchedule,
    noise: &mut AgentNoise,
) -> Result<StateTensor> {
    if k == 1 {
        return Ok(mean);
    }
    if noise.agents() != mean.agents() {
        return Err(Error::shape(mean.agents(), noise.agents()));
    }
    let z = noise.draw(mean.steps());
    let sigma = sched.beta(k).sqrt();
    let data = mean
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .map(|(m, e)| m + sigma * e)
        .collect();
    StateTensor::from_vec(mean.steps(), mean.agents(), data)
}

/// One ancestral step `τᵏ → τᵏ⁻¹` with `Σ = βₖI`; the final step (`k = 1`)
/// returns the mean without noise.
pub fn reverse_step(
    x: &StateTensor,
    k: usize,
    cond: &[f64],
    den: &dyn NoisePredictor,
    sched: &VarianceSchedule,
    noise: &mut AgentNoise,
) -> Result<StateTensor> {
    sched.check_step(k)?;
    let mean = posterior_mean(x, k, cond, den, sched)?;
    add_noise(mean, k, sched, noise)
}

/// Like [`reverse_step`], but shifts the mean along the guide gradient
/// before sampling. With every guide weight zero no gradient is computed
/// and the result is bit-identical to the unguided step.
pub fn guided_reverse_step(
    x: &StateTensor,
    k: usize,
    cond: &[f64],
    den: &dyn NoisePredictor,
    sched: &VarianceSchedule,
    guide: &GuideContext<'_>,
    noise: &mut AgentNoise,
) -> Result<StepOutput> {
    sched.check_step(k)?;
    let mut mean = posterior_mean(x, k, cond, den, sched)?;
    let mut status = GuidanceStatus::Off;
    if !guide.guides.is_zero() {
        let world = from_model_space(&guide.norm.denormalize(&mean), guide.center);
        let traj = Trajectories {
            states: &world,
            dims: guide.dims,
            valid: guide.valid,
        };
        match guides::gradient(&traj, guide.map, guide.guides) {
            Ok(g) if g.is_finite() => {
                let sign = match guide.guidance.sign {
                    GuidanceSign::Descent => -1.0,
                    GuidanceSign::Ascent => 1.0,
                };
                let step = sign * guide.guidance.scale * sched.beta(k);
                let cap = if guide.guidance.max_shift > 0.0 {
                    guide.guidance.max_shift * sched.beta(k).sqrt()
                } else {
                    f64::INFINITY
                };
                for (idx, (m, gv)) in mean.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                    // chain rule through the normalization
                    *m += (step * gv * guide.norm.std[idx % CHANNELS]).clamp(-cap, cap);
                }
                status = GuidanceStatus::Applied;
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                warn!("guide gradient not finite at step {k}; using unguided mean");
                status = GuidanceStatus::Skipped;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(StepOutput {
        states: add_noise(mean, k, sched, noise)?,
        guidance: status,
    })
}

/// Runs the full chain from `τᴷ` drawn from `noise`, returning the
/// normalized endpoint.
pub fn sample_chain(
    steps: usize,
    cond: &[f64],
    den: &dyn NoisePredictor,
    sched: &VarianceSchedule,
    guide: &GuideContext<'_>,
    noise: &mut AgentNoise,
) -> Result<StateTensor> {
    let mut x = noise.draw(steps);
    for k in (1..=sched.steps()).rev() {
        x = guided_reverse_step(&x, k, cond, den, sched, guide, noise)?.states;
    }
    Ok(x)
}

/// Per-scene sampling inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub dims: Vec<VehicleDims>,
    /// World point the model-space origin maps to.
    pub center: Point2,
    pub dt: f64,
    pub history: usize,
    pub seed: u64,
}

/// Samples one scene on `map`. The trajectory length is the one the
/// denoiser was trained for; the agent count is `req.dims.len()`.
pub fn generate_scene(
    map: &MapGrid,
    req: &GenerationRequest,
    guides: &GuideConfig,
    guidance: &GuidanceConfig,
    den: &Denoiser,
    sched: &VarianceSchedule,
) -> Result<Scene> {
    let noise = AgentNoise::new(req.seed, req.dims.len());
    generate_scene_with_noise(map, req, guides, guidance, den, sched, noise)
}

pub fn generate_scene_with_noise(
    map: &MapGrid,
    req: &GenerationRequest,
    guides: &GuideConfig,
    guidance: &GuidanceConfig,
    den: &Denoiser,
    sched: &VarianceSchedule,
    mut noise: AgentNoise,
) -> Result<Scene> {
    let m = req.dims.len();
    if m == 0 {
        return Err(Error::Empty("agents"));
    }
    if noise.agents() != m {
        return Err(Error::shape(m, noise.agents()));
    }
    guides.validate()?;
    let cond = encode_condition(map, req.center, req.history)?;
    let valid = vec![true; m];
    let ctx = GuideContext {
        guides,
        guidance,
        map: Some(map),
        dims: &req.dims,
        valid: &valid,
        norm: den.normalizer(),
        center: req.center,
    };
    let x = sample_chain(den.arch().steps, &cond, den, sched, &ctx, &mut noise)?;
    if !x.is_finite() {
        return Err(Error::Numeric("sampled trajectories are not finite".into()));
    }
    let world = from_model_space(&den.normalizer().denormalize(&x), req.center);
    Scene::from_raw(world, req.dims.clone(), req.dt, map.map_id())
}
