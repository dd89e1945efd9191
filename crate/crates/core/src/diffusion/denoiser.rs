//! Permutation-equivariant noise-prediction network.
//!
//! Each agent's normalized `[T × 4]` block is encoded by shared weights,
//! agents exchange information through a mean-pooled context vector, and a
//! shared head emits the per-agent noise estimate. A learned, step-dependent
//! scalar skip `s(k)·x` lets the network express the near-identity maps
//! that dominate at high noise levels.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Normalizer, VarianceSchedule};
use crate::error::{Error, Result};
use crate::scene::{StateTensor, CHANNELS};
use crate::SCHEMA_VERSION;

const MAGIC: &[u8; 8] = b"EGODNZ01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    /// Trajectory length T the network was built for.
    pub steps: usize,
    pub hidden: usize,
    /// Width of the sinusoidal diffusion-step embedding (even).
    pub time_embed: usize,
    /// Length of the condition feature.
    pub cond_dim: usize,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 || self.hidden == 0 {
            return Err(Error::invalid("denoiser needs steps >= 2 and hidden > 0"));
        }
        if self.time_embed == 0 || !self.time_embed.is_multiple_of(2) {
            return Err(Error::invalid(
                "time embedding width must be even and positive",
            ));
        }
        Ok(())
    }

    pub(crate) fn input_dim(&self) -> usize {
        self.steps * CHANNELS
    }

    fn context_dim(&self) -> usize {
        self.time_embed + self.cond_dim
    }

    pub(crate) fn layout(&self) -> Layout {
        let d = self.input_dim();
        let h = self.hidden;
        let z = self.context_dim();
        let e = self.time_embed;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let w1 = take(h * d);
        let u1 = take(h * z);
        let b1 = take(h);
        let w2 = take(h * h);
        let v2 = take(h * h);
        let b2 = take(h);
        let w3 = take(d * h);
        let b3 = take(d);
        let skip = take(e + 1);
        Layout {
            d,
            h,
            z,
            e,
            w1,
            u1,
            b1,
            w2,
            v2,
            b2,
            w3,
            b3,
            skip,
            total: at,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    d: usize,
    h: usize,
    z: usize,
    e: usize,
    w1: usize,
    u1: usize,
    b1: usize,
    w2: usize,
    v2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    skip: usize,
    pub(crate) total: usize,
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for j in 0..half {
        let freq = (-(1000f64.ln()) * j as f64 / half as f64).exp();
        let a = k as f64 * freq;
        out[j] = a.sin();
        out[j + half] = a.cos();
    }
    out
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// `out += W x` for a row-major `rows × x.len()` matrix.
fn matvec_acc(w: &[f32], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| *a as f64 * b).sum::<f64>();
    }
}

/// `out += Wᵀ y` for a row-major `y.len() × out.len()` matrix.
fn matvec_t_acc(w: &[f32], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, yr) in y.iter().enumerate() {
        if *yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += *a as f64 * yr;
        }
    }
}

/// `G += y xᵀ`.
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, yr) in y.iter().enumerate() {
        if *yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (o, xv) in row.iter_mut().zip(x) {
            *o += yr * xv;
        }
    }
}

/// Activations kept for the backward pass.
pub(crate) struct Trace {
    z: Vec<f64>,
    emb: Vec<f64>,
    skip: f64,
    xs: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    h1: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    a2: Vec<Vec<f64>>,
    g2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: DenoiserArch,
    norm: Normalizer,
    params: Vec<f32>,
}

impl Denoiser {
    /// Fresh network with scaled-normal weights drawn from `seed`.
    pub fn init(arch: DenoiserArch, norm: Normalizer, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout();
        let mut params = vec![0f32; l.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |off: usize, rows: usize, cols: usize, gain: f64| {
            let dist = Normal::new(0.0, gain / (cols as f64).sqrt()).expect("finite std");
            for p in &mut params[off..off + rows * cols] {
                *p = dist.sample(&mut rng) as f32;
            }
        };
        fill(l.w1, l.h, l.d, 1.0);
        fill(l.u1, l.h, l.z, 1.0);
        fill(l.w2, l.h, l.h, 1.0);
        fill(l.v2, l.h, l.h, 1.0);
        fill(l.w3, l.d, l.h, 0.1);
        Ok(Denoiser { arch, norm, params })
    }

    pub fn from_parts(arch: DenoiserArch, norm: Normalizer, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::shape(arch.param_count(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters"));
        }
        Ok(Denoiser { arch, norm, params })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn check_input(&self, x: &StateTensor, cond: &[f64]) -> Result<()> {
        if x.steps() != self.arch.steps {
            return Err(Error::shape(self.arch.steps, x.steps()));
        }
        if x.agents() == 0 {
            return Err(Error::Empty("agents"));
        }
        if cond.len() != self.arch.cond_dim {
            return Err(Error::shape(self.arch.cond_dim, cond.len()));
        }
        Ok(())
    }

    pub(crate) fn forward_traced(
        &self,
        x: &StateTensor,
        k: usize,
        cond: &[f64],
    ) -> (StateTensor, Trace) {
        let l = self.arch.layout();
        let p = &self.params;
        let m = x.agents();
        let emb = step_embedding(k, l.e);
        let mut z = emb.clone();
        z.extend_from_slice(cond);
        let skip = p[l.skip + l.e] as f64
            + emb
                .iter()
                .zip(&p[l.skip..l.skip + l.e])
                .map(|(a, b)| a * *b as f64)
                .sum::<f64>();

        let mut uz: Vec<f64> = p[l.b1..l.b1 + l.h].iter().map(|v| *v as f64).collect();
        matvec_acc(&p[l.u1..l.u1 + l.h * l.z], &z, &mut uz);

        let xs: Vec<Vec<f64>> = (0..m).map(|i| x.agent_block(i)).collect();
        let mut a1 = Vec::with_capacity(m);
        let mut h1 = Vec::with_capacity(m);
        for xi in &xs {
            let mut a = uz.clone();
            matvec_acc(&p[l.w1..l.w1 + l.h * l.d], xi, &mut a);
            h1.push(a.iter().map(|v| silu(*v)).collect::<Vec<_>>());
            a1.push(a);
        }
        let mut ctx = vec![0.0; l.h];
        for hi in &h1 {
            for (c, v) in ctx.iter_mut().zip(hi) {
                *c += v;
            }
        }
        for c in &mut ctx {
            *c /= m as f64;
        }
        let mut vc: Vec<f64> = p[l.b2..l.b2 + l.h].iter().map(|v| *v as f64).collect();
        matvec_acc(&p[l.v2..l.v2 + l.h * l.h], &ctx, &mut vc);

        let mut out = StateTensor::zeros(x.steps(), m);
        let mut a2 = Vec::with_capacity(m);
        let mut g2 = Vec::with_capacity(m);
        for (i, hi) in h1.iter().enumerate() {
            let mut a = vc.clone();
            matvec_acc(&p[l.w2..l.w2 + l.h * l.h], hi, &mut a);
            let g: Vec<f64> = a.iter().map(|v| silu(*v)).collect();
            let mut o: Vec<f64> = p[l.b3..l.b3 + l.d]
                .iter()
                .zip(&xs[i])
                .map(|(b, xv)| *b as f64 + skip * xv)
                .collect();
            matvec_acc(&p[l.w3..l.w3 + l.d * l.h], &g, &mut o);
            out.set_agent_block(i, &o);
            a2.push(a);
            g2.push(g);
        }
        let trace = Trace {
            z,
            emb,
            skip,
            xs,
            a1,
            h1,
            ctx,
            a2,
            g2,
        };
        (out, trace)
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
    pub(crate) fn backward(&self, trace: &Trace, d_out: &StateTensor, grad: &mut [f64]) {
        let l = self.arch.layout();
        let p = &self.params;
        let m = trace.xs.len();
        let mut d_ctx = vec![0.0; l.h];
        let mut d_h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut d_skip = 0.0;
        for i in 0..m {
            let d_o = d_out.agent_block(i);
            d_skip += d_o
                .iter()
                .zip(&trace.xs[i])
                .map(|(a, b)| a * b)
                .sum::<f64>();
            outer_acc(&mut grad[l.w3..l.w3 + l.d * l.h], &d_o, &trace.g2[i]);
            for (g, v) in grad[l.b3..l.b3 + l.d].iter_mut().zip(&d_o) {
                *g += v;
            }
            let mut d_g = vec![0.0; l.h];
            matvec_t_acc(&p[l.w3..l.w3 + l.d * l.h], &d_o, &mut d_g);
            let d_a2: Vec<f64> = d_g
                .iter()
                .zip(&trace.a2[i])
                .map(|(g, a)| g * silu_grad(*a))
                .collect();
            outer_acc(&mut grad[l.w2..l.w2 + l.h * l.h], &d_a2, &trace.h1[i]);
            outer_acc(&mut grad[l.v2..l.v2 + l.h * l.h], &d_a2, &trace.ctx);
            for (g, v) in grad[l.b2..l.b2 + l.h].iter_mut().zip(&d_a2) {
                *g += v;
            }
            let mut dh = vec![0.0; l.h];
            matvec_t_acc(&p[l.w2..l.w2 + l.h * l.h], &d_a2, &mut dh);
            matvec_t_acc(&p[l.v2..l.v2 + l.h * l.h], &d_a2, &mut d_ctx);
            d_h.push(dh);
        }
        let mut d_a1_sum = vec![0.0; l.h];
        for i in 0..m {
            let d_a1: Vec<f64> = d_h[i]
                .iter()
                .zip(&d_ctx)
                .zip(&trace.a1[i])
                .map(|((dh, dc), a)| (dh + dc / m as f64) * silu_grad(*a))
                .collect();
            outer_acc(&mut grad[l.w1..l.w1 + l.h * l.d], &d_a1, &trace.xs[i]);
            for (s, v) in d_a1_sum.iter_mut().zip(&d_a1) {
                *s += v;
            }
        }
        outer_acc(&mut grad[l.u1..l.u1 + l.h * l.z], &d_a1_sum, &trace.z);
        for (g, v) in grad[l.b1..l.b1 + l.h].iter_mut().zip(&d_a1_sum) {
            *g += v;
        }
        for (g, e) in grad[l.skip..l.skip + l.e].iter_mut().zip(&trace.emb) {
            *g += d_skip * e;
        }
        grad[l.skip + l.e] += d_skip;
        debug_assert!(trace.skip.is_finite());
    }

    /// Writes the checkpoint: magic, little-endian `u32` header length, JSON
    /// header, then the parameters as little-endian `f32`.
    pub fn save(&self, path: &Path, schedule: &VarianceSchedule) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            arch: self.arch,
            norm: self.norm.clone(),
            schedule: schedule.config().clone(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 4 * self.params.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`Denoiser::save`], returning the
    /// network and the schedule it was trained with.
    pub fn load(path: &Path) -> Result<(Denoiser, VarianceSchedule)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Schema {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a denoiser checkpoint"));
        }
        let mut len = [0u8; 4];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 4]);
        let hlen = u32::from_le_bytes(len) as usize;
        let start = MAGIC.len() + 4;
        let json = bytes
            .get(start..start + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::json(path, e))?;
        crate::check_schema(header.schema_version, path)?;
        let body = &bytes[start + hlen..];
        if body.len() != 4 * header.param_count {
            return Err(bad("parameter block length does not match header"));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let den = Denoiser::from_parts(header.arch, header.norm, params)?;
        let sched = VarianceSchedule::from_config(&header.schedule)?;
        Ok((den, sched))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    arch: DenoiserArch,
    norm: Normalizer,
    schedule: super::ScheduleConfig,
    param_count: usize,
}

/// Adam with bias correction; moments kept in `f64`.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f32], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
}
