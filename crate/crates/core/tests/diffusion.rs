use egoscene::diffusion::{
    condition_dim, forward_sample, generate_scene, generate_scene_with_noise, guided_reverse_step,
    reverse_step, sample_chain, train_denoiser, AgentNoise, Denoiser, DenoiserArch,
    GenerationRequest, GuidanceConfig, GuidanceStatus, GuideContext, NoisePredictor, Normalizer,
    ScheduleConfig, TrainConfig, TrainExample, VarianceSchedule,
};
use egoscene::geometry::{Point2, VehicleDims};
use egoscene::guides::GuideConfig;
use egoscene::map::{generate_map, MapGrid, MapSpec};
use egoscene::scene::{Scene, StateTensor, CHANNELS, THETA, V, X, Y};
use egoscene::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn default_sched() -> VarianceSchedule {
    VarianceSchedule::from_config(&ScheduleConfig::default()).unwrap()
}

fn gaussian(steps: usize, agents: usize, rng: &mut impl Rng) -> StateTensor {
    let data = (0..steps * agents * CHANNELS)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    StateTensor::from_vec(steps, agents, data).unwrap()
}

/// Knows the clean sample, so its noise estimate is exact.
struct Oracle {
    tau0: StateTensor,
    sched: VarianceSchedule,
}

impl NoisePredictor for Oracle {
    fn predict(&self, x: &StateTensor, k: usize, _cond: &[f64]) -> Result<StateTensor> {
        let ab = self.sched.alpha_bar(k);
        let data = x
            .as_slice()
            .iter()
            .zip(self.tau0.as_slice())
            .map(|(xv, t0)| (xv - ab.sqrt() * t0) / (1.0 - ab).sqrt())
            .collect();
        StateTensor::from_vec(x.steps(), x.agents(), data)
    }
}

struct Zero;

impl NoisePredictor for Zero {
    fn predict(&self, x: &StateTensor, _k: usize, _cond: &[f64]) -> Result<StateTensor> {
        Ok(StateTensor::zeros(x.steps(), x.agents()))
    }
}

fn straight_scene(agents: &[(f64, f64, f64, f64)], steps: usize, dt: f64) -> Scene {
    let mut st = StateTensor::zeros(steps, agents.len());
    for (i, &(x, y, v, th)) in agents.iter().enumerate() {
        for t in 0..steps {
            let s = v * dt * t as f64;
            st.set(t, i, X, x + s * th.cos());
            st.set(t, i, Y, y + s * th.sin());
            st.set(t, i, V, v);
            st.set(t, i, THETA, th);
        }
    }
    let dims = vec![VehicleDims::new(1.9, 4.5).unwrap(); agents.len()];
    Scene::new(st, dims, vec![true; agents.len()], dt, "m").unwrap()
}

fn cv_dataset(n: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let agents: Vec<_> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                        rng.random_range(2.0..10.0),
                        rng.random_range(-3.0..3.0),
                    )
                })
                .collect();
            TrainExample {
                scene: straight_scene(&agents, 8, 0.5),
                center: Point2::ORIGIN,
                cond: vec![0.0; 4],
            }
        })
        .collect()
}

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        hidden: 32,
        time_embed: 8,
        ..TrainConfig::default()
    }
}

fn small_map() -> MapGrid {
    generate_map(
        3,
        &MapSpec {
            width_m: 160.0,
            height_m: 160.0,
            resolution: 0.5,
            ..MapSpec::default()
        },
    )
    .unwrap()
}

fn untrained(steps: usize, seed: u64) -> Denoiser {
    let arch = DenoiserArch {
        steps,
        hidden: 24,
        time_embed: 8,
        cond_dim: condition_dim(1),
    };
    let norm = Normalizer {
        mean: [0.0, 0.0, 5.0, 0.0],
        std: [15.0, 15.0, 3.0, 1.0],
    };
    Denoiser::init(arch, norm, seed).unwrap()
}

#[test]
fn forward_marginal_moments() {
    let sched = default_sched();
    let k = sched.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tau0 = StateTensor::from_vec(1, 2, vec![3.0, -1.5, 0.5, 8.0, -2.0, 0.0, 1.0, 4.0]).unwrap();
    let n = 10_000;
    let d = tau0.as_slice().len();
    let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..n {
        let eps = gaussian(1, 2, &mut rng);
        let x = forward_sample(&tau0, k, &eps, &sched).unwrap();
        for (j, v) in x.as_slice().iter().enumerate() {
            s1[j] += v;
            s2[j] += v * v;
        }
    }
    let ab = sched.alpha_bar(k);
    let var = 1.0 - ab;
    for j in 0..d {
        let mean = s1[j] / n as f64;
        let emp_var = s2[j] / n as f64 - mean * mean;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * tau0.as_slice()[j]).abs() < 3.0 * se_mean);
        assert!((emp_var - var).abs() < 3.0 * se_var);
    }
}

#[test]
fn iterated_chain_matches_closed_form() {
    let sched = default_sched();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = 2.5;
    let n = 100_000;
    for k in [1usize, 10, 50, 100] {
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = x0;
            for j in 1..=k {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = sched.alpha(j).sqrt() * x + sched.beta(j).sqrt() * e;
            }
            s1 += x;
            s2 += x * x;
        }
        let ab = sched.alpha_bar(k);
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let want_var = 1.0 - ab;
        assert!(
            (mean - ab.sqrt() * x0).abs() < 3.0 * (want_var / n as f64).sqrt(),
            "k={k}"
        );
        assert!(
            (var - want_var).abs() < 3.0 * want_var * (2.0 / n as f64).sqrt(),
            "k={k}"
        );
    }
}

#[test]
fn forward_sample_edge_cases() {
    let sched = default_sched();
    let tau0 = StateTensor::from_vec(1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let zero = StateTensor::zeros(1, 1);
    let x = forward_sample(&tau0, 40, &zero, &sched).unwrap();
    let a = sched.alpha_bar(40).sqrt();
    for (got, t0) in x.as_slice().iter().zip(tau0.as_slice()) {
        assert_eq!(*got, a * t0);
    }
    assert!(forward_sample(&tau0, 0, &zero, &sched).is_err());
    assert!(forward_sample(&tau0, 101, &zero, &sched).is_err());
    assert!(forward_sample(&tau0, 1, &StateTensor::zeros(2, 1), &sched).is_err());
}

#[test]
fn oracle_chain_recovers_the_memorized_sample() {
    let sched = default_sched();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tau0 = gaussian(8, 3, &mut rng);
    let oracle = Oracle {
        tau0: tau0.clone(),
        sched: sched.clone(),
    };
    let guides = GuideConfig::unguided();
    let guidance = GuidanceConfig::default();
    let norm = Normalizer::identity();
    let dims = vec![VehicleDims::new(2.0, 4.0).unwrap(); 3];
    let valid = vec![true; 3];
    let ctx = GuideContext {
        guides: &guides,
        guidance: &guidance,
        map: None,
        dims: &dims,
        valid: &valid,
        norm: &norm,
        center: Point2::ORIGIN,
    };
    let mut noise = AgentNoise::new(77, 3);
    let out = sample_chain(8, &[], &oracle, &sched, &ctx, &mut noise).unwrap();
    let mse: f64 = out
        .as_slice()
        .iter()
        .zip(tau0.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / out.as_slice().len() as f64;
    assert!(mse.sqrt() < 0.1, "rmse {}", mse.sqrt());
}

#[test]
fn final_step_is_noise_free_and_steps_are_reproducible() {
    let sched = default_sched();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(5, 2, &mut rng);
    let out = reverse_step(&x, 1, &[], &Zero, &sched, &mut AgentNoise::new(1, 2)).unwrap();
    let inv = 1.0 / sched.alpha(1).sqrt();
    for (o, v) in out.as_slice().iter().zip(x.as_slice()) {
        assert_eq!(*o, v * inv);
    }
    let a = reverse_step(&x, 30, &[], &Zero, &sched, &mut AgentNoise::new(8, 2)).unwrap();
    let b = reverse_step(&x, 30, &[], &Zero, &sched, &mut AgentNoise::new(8, 2)).unwrap();
    assert_eq!(a, b);
    assert!(reverse_step(&x, 0, &[], &Zero, &sched, &mut AgentNoise::new(8, 2)).is_err());
    assert!(reverse_step(&x, 101, &[], &Zero, &sched, &mut AgentNoise::new(8, 2)).is_err());
}

fn head_on() -> (StateTensor, Vec<VehicleDims>) {
    // two cars driving at each other along x, overlapping mid-horizon
    let steps = 6;
    let mut st = StateTensor::zeros(steps, 2);
    for t in 0..steps {
        let s = -5.0 + 2.0 * t as f64;
        st.set(t, 0, X, s);
        st.set(t, 0, Y, 0.2);
        st.set(t, 0, V, 4.0);
        st.set(t, 1, X, -s);
        st.set(t, 1, Y, -0.2);
        st.set(t, 1, V, 4.0);
        st.set(t, 1, THETA, std::f64::consts::PI);
    }
    (st, vec![VehicleDims::new(1.9, 4.5).unwrap(); 2])
}

#[test]
fn guidance_pushes_head_on_agents_apart() {
    let sched = default_sched();
    let (x, dims) = head_on();
    let valid = vec![true; 2];
    let norm = Normalizer::identity();
    let guidance = GuidanceConfig::default();
    let guided_cfg = GuideConfig::with_weights(50.0, 0.0, 0.0);
    let plain_cfg = GuideConfig::unguided();
    let ctx = |g| GuideContext {
        guides: g,
        guidance: &guidance,
        map: None,
        dims: &dims,
        valid: &valid,
        norm: &norm,
        center: Point2::ORIGIN,
    };
    // the zero predictor makes the mean a pure rescaling, so undo it first
    let k = 10;
    let scaled = StateTensor::from_vec(
        6,
        2,
        x.as_slice()
            .iter()
            .map(|v| v * sched.alpha(k).sqrt())
            .collect(),
    )
    .unwrap();
    let g = guided_reverse_step(
        &scaled,
        k,
        &[],
        &Zero,
        &sched,
        &ctx(&guided_cfg),
        &mut AgentNoise::new(3, 2),
    )
    .unwrap();
    let u = guided_reverse_step(
        &scaled,
        k,
        &[],
        &Zero,
        &sched,
        &ctx(&plain_cfg),
        &mut AgentNoise::new(3, 2),
    )
    .unwrap();
    assert_eq!(g.guidance, GuidanceStatus::Applied);
    assert_eq!(u.guidance, GuidanceStatus::Off);
    let d_safe = 2.0 * dims[0].radius() + 1.0;
    let mut violating = 0;
    for t in 0..6 {
        if x.position(t, 0).distance(x.position(t, 1)) < d_safe {
            violating += 1;
            let dg = g.states.position(t, 0).distance(g.states.position(t, 1));
            let du = u.states.position(t, 0).distance(u.states.position(t, 1));
            assert!(dg > du, "t={t}: {dg} vs {du}");
        }
    }
    assert!(violating >= 2);
}

#[test]
fn zero_weights_and_clean_scenes_leave_the_step_untouched() {
    let sched = default_sched();
    let (x, dims) = head_on();
    let valid = vec![true; 2];
    let norm = Normalizer::identity();
    let guidance = GuidanceConfig::default();
    for k in [1, 2, 57, 100] {
        let zero = GuideConfig::unguided();
        let ctx = GuideContext {
            guides: &zero,
            guidance: &guidance,
            map: None,
            dims: &dims,
            valid: &valid,
            norm: &norm,
            center: Point2::ORIGIN,
        };
        let g = guided_reverse_step(
            &x,
            k,
            &[],
            &Zero,
            &sched,
            &ctx,
            &mut AgentNoise::new(k as u64, 2),
        )
        .unwrap();
        let r = reverse_step(&x, k, &[], &Zero, &sched, &mut AgentNoise::new(k as u64, 2)).unwrap();
        assert_eq!(g.states.as_slice(), r.as_slice());
    }

    // far apart, in-band speeds: the penalty is flat, so the step is unchanged
    let far = straight_scene(&[(0.0, 0.0, 5.0, 0.0), (0.0, 80.0, 5.0, 0.0)], 6, 0.5);
    let cfg = GuideConfig::with_weights(50.0, 0.0, 1.0);
    let ctx = GuideContext {
        guides: &cfg,
        guidance: &guidance,
        map: None,
        dims: far.dims(),
        valid: far.valid(),
        norm: &norm,
        center: Point2::ORIGIN,
    };
    let k = 1;
    let scaled = StateTensor::from_vec(
        6,
        2,
        far.states()
            .as_slice()
            .iter()
            .map(|v| v * sched.alpha(k).sqrt())
            .collect(),
    )
    .unwrap();
    let g = guided_reverse_step(
        &scaled,
        k,
        &[],
        &Zero,
        &sched,
        &ctx,
        &mut AgentNoise::new(0, 2),
    )
    .unwrap();
    let r = reverse_step(&scaled, k, &[], &Zero, &sched, &mut AgentNoise::new(0, 2)).unwrap();
    assert_eq!(g.states.as_slice(), r.as_slice());
}

#[test]
fn constant_velocity_training_halves_the_loss() {
    let data = cv_dataset(32, 1);
    let run = train_denoiser(&data, &default_sched(), &small_train(400)).unwrap();
    assert!(run.diverged.is_none());
    let head: f64 = run.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = run.losses[run.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    let again = train_denoiser(&data, &default_sched(), &small_train(400)).unwrap();
    assert_eq!(run.losses, again.losses);
    assert_eq!(run.denoiser.params(), again.denoiser.params());
}

#[test]
fn single_sample_is_memorized() {
    let data = cv_dataset(1, 4);
    let cfg = TrainConfig {
        hidden: 64,
        lr: 3e-3,
        ..small_train(3000)
    };
    let run = train_denoiser(&data, &default_sched(), &cfg).unwrap();
    let tail: f64 = run.losses[run.losses.len() - 50..].iter().sum::<f64>() / 50.0;
    // predicting zero noise scores 1 on unit-variance targets
    assert!(tail < 0.1, "{tail}");
}

#[test]
fn permuted_agents_give_the_same_loss_curve() {
    let data = cv_dataset(12, 2);
    let perm = [2, 0, 1];
    let permuted: Vec<TrainExample> = data
        .iter()
        .map(|ex| TrainExample {
            scene: ex.scene.permute_agents(&perm),
            ..ex.clone()
        })
        .collect();
    let a = train_denoiser(&data, &default_sched(), &small_train(60)).unwrap();
    let b = train_denoiser(&permuted, &default_sched(), &small_train(60)).unwrap();
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn training_rejects_bad_input() {
    let sched = default_sched();
    assert!(train_denoiser(&[], &sched, &small_train(5)).is_err());
    let mut data = cv_dataset(2, 3);
    data[1].cond = vec![0.0; 5];
    assert!(train_denoiser(&data, &sched, &small_train(5)).is_err());
    let data = cv_dataset(2, 3);
    let bad = TrainConfig {
        lr: f64::NAN,
        ..small_train(5)
    };
    assert!(train_denoiser(&data, &sched, &bad).is_err());
}

fn request(m: usize, seed: u64) -> GenerationRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GenerationRequest {
        dims: (0..m)
            .map(|_| {
                VehicleDims::new(rng.random_range(1.7..2.1), rng.random_range(3.8..5.2)).unwrap()
            })
            .collect(),
        center: Point2::new(5.0, -3.0),
        dt: 0.5,
        history: 1,
        seed,
    }
}

#[test]
fn generation_is_deterministic_and_handles_one_agent() {
    let map = small_map();
    let den = untrained(6, 1);
    let sched = VarianceSchedule::from_config(&ScheduleConfig {
        steps: 50,
        ..ScheduleConfig::default()
    })
    .unwrap();
    let guides = GuideConfig::default();
    let guidance = GuidanceConfig::default();
    let a = generate_scene(&map, &request(4, 11), &guides, &guidance, &den, &sched).unwrap();
    let b = generate_scene(&map, &request(4, 11), &guides, &guidance, &den, &sched).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.steps(), a.agents()), (6, 4));
    assert_eq!(a.dims(), request(4, 11).dims.as_slice());
    let c = generate_scene(&map, &request(4, 12), &guides, &guidance, &den, &sched).unwrap();
    assert_ne!(a, c);
    let one = generate_scene(&map, &request(1, 5), &guides, &guidance, &den, &sched).unwrap();
    assert_eq!(one.agents(), 1);
    assert!(generate_scene(&map, &request(0, 5), &guides, &guidance, &den, &sched).is_err());
}

#[test]
fn generation_is_permutation_equivariant() {
    let map = small_map();
    let den = untrained(6, 2);
    let sched = VarianceSchedule::from_config(&ScheduleConfig {
        steps: 50,
        ..ScheduleConfig::default()
    })
    .unwrap();
    let guides = GuideConfig::default();
    let guidance = GuidanceConfig::default();
    let req = request(4, 21);
    let base = generate_scene(&map, &req, &guides, &guidance, &den, &sched).unwrap();
    let perm = [3, 1, 0, 2];
    let preq = GenerationRequest {
        dims: perm.iter().map(|&p| req.dims[p]).collect(),
        ..req.clone()
    };
    let noise = AgentNoise::new(req.seed, 4).permuted(&perm);
    let p =
        generate_scene_with_noise(&map, &preq, &guides, &guidance, &den, &sched, noise).unwrap();
    let want = base.permute_agents(&perm);
    assert_eq!(p.dims(), want.dims());
    for (x, y) in p.states().as_slice().iter().zip(want.states().as_slice()) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
    }
}
