//! Noise-prediction training loop.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::Adam;
use super::{forward_sample, to_model_space, Denoiser, DenoiserArch, Normalizer, VarianceSchedule};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scene::{Scene, StateTensor, CHANNELS};

/// One training scene with the world point its model space is centered on
/// and its condition feature.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub scene: Scene,
    pub center: Point2,
    pub cond: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero on a half cosine.
    pub lr: f64,
    pub hidden: usize,
    pub time_embed: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            hidden: 128,
            time_embed: 16,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Last parameters whose loss was finite.
    pub denoiser: Denoiser,
    /// Mean batch ε-MSE per optimizer step.
    pub losses: Vec<f64>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Key of an agent's clean trajectory; its noise draws depend only on this
/// key, the seed and the step, never on the agent's slot.
fn content_key(block: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in block {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn draw_noise(keys: &[u64], steps: usize, seed: u64, step: usize) -> StateTensor {
    let mut out = StateTensor::zeros(steps, keys.len());
    for (i, key) in keys.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(key ^ seed.rotate_left(29));
        rng.set_stream(step as u64);
        let block: Vec<f64> = (0..steps * CHANNELS)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        out.set_agent_block(i, &block);
    }
    out
}

/// Fits a fresh denoiser to `examples` by regressing the injected noise.
pub fn train_denoiser(
    examples: &[TrainExample],
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let first = examples.first().ok_or(Error::Empty("training dataset"))?;
    let steps = first.scene.steps();
    let cond_dim = first.cond.len();
    for ex in examples {
        if ex.scene.steps() != steps {
            return Err(Error::shape(steps, ex.scene.steps()));
        }
        if ex.cond.len() != cond_dim {
            return Err(Error::shape(cond_dim, ex.cond.len()));
        }
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::invalid("batch size and step count must be positive"));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }

    let model: Vec<StateTensor> = examples
        .iter()
        .map(|ex| to_model_space(&ex.scene, ex.center))
        .collect();
    let norm = Normalizer::fit(&model)?;
    // keyed before normalization: the fitted statistics depend on summation
    // order, so normalized blocks of a permuted dataset can differ in the
    // last bit
    let keys: Vec<Vec<u64>> = model
        .iter()
        .map(|t| {
            (0..t.agents())
                .map(|i| content_key(&t.agent_block(i)))
                .collect()
        })
        .collect();
    let clean: Vec<StateTensor> = model.iter().map(|t| norm.normalize(t)).collect();

    let arch = DenoiserArch {
        steps,
        hidden: cfg.hidden,
        time_embed: cfg.time_embed,
        cond_dim,
    };
    let mut den = Denoiser::init(arch, norm, cfg.seed)?;
    let n_params = den.params().len();
    let mut adam = Adam::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let k_max = sched.steps();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged = None;
    let batch = cfg.batch_size as f64;

    for step in 0..cfg.steps {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                (
                    rng.random_range(0..examples.len()),
                    rng.random_range(1..=k_max),
                )
            })
            .collect();
        let den_ref = &den;
        let results: Vec<Result<(f64, Vec<f64>)>> = picks
            .par_iter()
            .map(|&(idx, k)| {
                let x0 = &clean[idx];
                let eps = draw_noise(&keys[idx], steps, cfg.seed, step);
                let xk = forward_sample(x0, k, &eps, sched)?;
                let (out, trace) = den_ref.forward_traced(&xk, k, &examples[idx].cond);
                let n = out.as_slice().len() as f64;
                let diff: Vec<f64> = out
                    .as_slice()
                    .iter()
                    .zip(eps.as_slice())
                    .map(|(o, e)| o - e)
                    .collect();
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
                let d_out = StateTensor::from_vec(
                    steps,
                    x0.agents(),
                    diff.iter().map(|d| 2.0 * d / (n * batch)).collect(),
                )?;
                let mut grad = vec![0.0; n_params];
                den_ref.backward(&trace, &d_out, &mut grad);
                Ok((loss, grad))
            })
            .collect();
        // summed in batch order so the result does not depend on scheduling
        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l / batch;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = Some(format!("non-finite loss or gradient at step {step}"));
            break;
        }
        losses.push(loss);
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let before = den.params().to_vec();
        adam.step(den.params_mut(), &grad, lr);
        if den.params().iter().any(|p| !p.is_finite()) {
            den.params_mut().copy_from_slice(&before);
            diverged = Some(format!("parameters became non-finite at step {step}"));
            break;
        }
        if step % 100 == 0 {
            debug!("train step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
        info!("trained {} steps: loss {a:.4} -> {b:.4}", losses.len());
    }
    Ok(TrainRun {
        denoiser: den,
        losses,
        diverged,
    })
}
