mod common;

use std::time::Instant;

use chunk_lab::flow::{
    euler_step, flow_loss, flow_train_loss, initial_noise, one_step_denoise, one_step_denoise_var,
    pigdm_guided_step, rtc_sample_chunk, sample_batch, sample_chunk, soft_mask_weights, CommittedPrefix,
    FlowSampleConfig, GuidanceConfig, SampleCost, VelocityModel,
};
use chunk_lab::math::{grad_check, Tape, Tensor, Var};
use chunk_lab::net::{Head, PolicyParams};
use chunk_lab::{ActionChunk, Result};
use common::{random_tensor, randomized_params, small_config, tiny_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `v(x, τ) = c` everywhere.
struct ConstantField {
    c: Tensor,
}

impl VelocityModel for ConstantField {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.c.shape()[0], self.c.shape()[1])
    }

    fn velocity<'t>(&self, tape: &'t Tape, _obs: &Tensor, chunk: Var<'t>, _tau: &[f64]) -> Result<Var<'t>> {
        let b = chunk.shape()[0];
        tape.constant(self.c.clone()).expand_axis(0, b)
    }
}

/// `v(x, τ) = (a1 − x) / (1 − τ)`: the exact field of the straight path to `a1`.
struct TowardTarget {
    a1: Tensor,
}

impl VelocityModel for TowardTarget {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.a1.shape()[0], self.a1.shape()[1])
    }

    fn velocity<'t>(&self, tape: &'t Tape, _obs: &Tensor, chunk: Var<'t>, tau: &[f64]) -> Result<Var<'t>> {
        let b = chunk.shape()[0];
        tape.constant(self.a1.clone())
            .expand_axis(0, b)?
            .sub(&chunk)?
            .scale(1.0 / (1.0 - tau[0]))
    }
}

fn obs1() -> Tensor {
    Tensor::zeros(vec![6])
}

#[test]
fn zero_field_returns_clamped_noise() {
    let field = ConstantField { c: Tensor::zeros(vec![8, 2]) };
    let cfg = FlowSampleConfig { n: 5, seed: 42 };
    let out = sample_chunk(&field, &obs1(), &cfg).unwrap();
    let noise = initial_noise(42, 8, 2).map(|v| v.clamp(-1.0, 1.0));
    assert_eq!(out.data(), noise.data());
}

proptest! {
    #[test]
    fn euler_is_exact_on_constant_fields(n in 1usize..40, seed in 0u64..1000, c in -0.4f64..0.4) {
        let field = ConstantField { c: Tensor::full(vec![8, 2], c) };
        let noise = initial_noise(seed, 8, 2).map(|v| v * 0.1);
        let obs = Tensor::zeros(vec![1, 6]);
        let (out, _) = sample_batch(&field, &obs, &noise.reshape(vec![1, 8, 2]).unwrap(), n).unwrap();
        for (o, z) in out.data().iter().zip(noise.data()) {
            prop_assert!((o - (z + c).clamp(-1.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_mask_shape(h in 2usize..16, d in 0usize..8, s in 1usize..8, r in 0.05f64..1.0) {
        prop_assume!(d + s <= h);
        let w = soft_mask_weights(d, s, h, r).unwrap();
        prop_assert!(w.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(w[..d].iter().all(|&x| x == 1.0));
        prop_assert!(w[h - s..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let params = randomized_params(&small_config(Head::Velocity), 1);
    let a = sample_chunk(&params, &obs1(), &FlowSampleConfig { n: 5, seed: 3 }).unwrap();
    let b = sample_chunk(&params, &obs1(), &FlowSampleConfig { n: 5, seed: 3 }).unwrap();
    let c = sample_chunk(&params, &obs1(), &FlowSampleConfig { n: 5, seed: 4 }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn one_step_denoise_recovers_target_on_straight_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a1 = random_tensor(&mut rng, &[8, 2]);
    let a0 = random_tensor(&mut rng, &[8, 2]);
    let field = TowardTarget { a1: a1.clone() };
    let out = one_step_denoise(&field, &obs1(), &a0, 0.0).unwrap();
    for (x, y) in out.data().iter().zip(a1.data()) {
        assert!((x - y).abs() < 1e-15);
    }
    let zero = ConstantField { c: Tensor::zeros(vec![8, 2]) };
    assert_eq!(one_step_denoise(&zero, &obs1(), &a0, 0.3).unwrap().data(), a0.data());
    assert!(one_step_denoise(&zero, &obs1(), &a0, 1.0).is_err());
}

#[test]
fn one_step_denoise_vjp_matches_finite_differences() {
    let params = randomized_params(&small_config(Head::Velocity), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = random_tensor(&mut rng, &[1, 6]);
    let x = random_tensor(&mut rng, &[1, 8, 2]);
    for tau in [0.0, 0.3, 0.8] {
        let report = grad_check(|tape, x| one_step_denoise_var(&params, tape, &obs, x, tau), &x, 1e-5).unwrap();
        assert!(report.passed, "τ={tau}: {report:?}");
    }
}

#[test]
fn zero_mask_guided_step_is_plain_euler() {
    let params = randomized_params(&small_config(Head::Velocity), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obs = random_tensor(&mut rng, &[3, 6]);
    let a = random_tensor(&mut rng, &[3, 8, 2]);
    let y = random_tensor(&mut rng, &[3, 8, 2]);
    let mut c1 = SampleCost::default();
    let mut c2 = SampleCost::default();
    let plain = euler_step(&params, &obs, &a, 0.4, 5, &mut c1).unwrap();
    let guided = pigdm_guided_step(&params, &obs, &a, 0.4, &y, &[0.0; 8], 5.0, 5, &mut c2).unwrap();
    assert_eq!(plain, guided);
}

#[test]
fn rtc_without_prefix_matches_plain_sampler() {
    let params = randomized_params(&small_config(Head::Velocity), 7);
    let cfg = FlowSampleConfig { n: 5, seed: 11 };
    let plain = sample_chunk(&params, &obs1(), &cfg).unwrap();
    let prefix = CommittedPrefix { values: ActionChunk::zeros(8, 2), d: 0 };
    let (rtc, cost) = rtc_sample_chunk(&params, &obs1(), &prefix, &GuidanceConfig::new(0, 1), &cfg).unwrap();
    assert_eq!(plain, rtc);
    assert_eq!((cost.forwards, cost.vjps), (5, 5));
}

#[test]
fn guidance_pulls_prefix_toward_target() {
    // Constant field: f̂ has identity Jacobian, so the correction is the
    // weighted prefix error itself.
    let field = ConstantField { c: Tensor::full(vec![8, 2], 0.5) };
    let mut target = ActionChunk::zeros(8, 2);
    for t in 0..2 {
        target.row_mut(t).copy_from_slice(&[-0.5, -0.5]);
    }
    let prefix = CommittedPrefix { values: target, d: 2 };
    let cfg = FlowSampleConfig { n: 5, seed: 1 };
    let (guided, _) = rtc_sample_chunk(&field, &obs1(), &prefix, &GuidanceConfig::new(2, 2), &cfg).unwrap();
    let plain = sample_chunk(&field, &obs1(), &cfg).unwrap();
    let err = |c: &ActionChunk| (0..2).map(|t| c.row(t).iter().map(|v| (v + 0.5).abs()).sum::<f64>()).sum::<f64>();
    assert!(err(&guided) < err(&plain));
}

#[test]
fn invalid_guidance_configs_are_rejected() {
    assert!(GuidanceConfig::new(3, 2).validate(8).is_err());
    assert!(GuidanceConfig::new(4, 5).validate(8).is_err());
    let mut g = GuidanceConfig::new(1, 1);
    g.beta = 0.0;
    assert!(g.validate(8).is_err());
}

#[test]
fn perfect_velocity_oracle_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let clean = random_tensor(&mut rng, &[1, 8, 2]);
    let noise = random_tensor(&mut rng, &[1, 8, 2]);
    let field = ConstantField {
        c: clean.zip_map(&noise, |a, b| a - b).unwrap().reshape(vec![8, 2]).unwrap(),
    };
    let tape = Tape::new();
    let loss = flow_loss(&field, &tape, &Tensor::zeros(vec![1, 6]), &clean, &noise, &[0.37]).unwrap();
    assert_eq!(loss.value().item().unwrap(), 0.0);
}

#[test]
fn zero_head_loss_matches_monte_carlo_oracle() {
    // With v ≡ 0 the loss is mean((A¹ − A⁰)²); for data with unit second
    // moment its expectation is 2.
    let params = PolicyParams::init(&tiny_config(Head::Velocity), 0).unwrap();
    let clean = Tensor::new(vec![1, 4, 2], vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
    let obs = Tensor::zeros(vec![1, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 10_000;
    let losses: Vec<f64> = (0..draws)
        .map(|_| flow_train_loss(&params, &obs, &clean, &mut rng).unwrap().loss)
        .collect();
    let mean = losses.iter().sum::<f64>() / draws as f64;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    assert!((mean - 2.0).abs() < 4.0 * se, "mean {mean}, se {se}");
}

#[test]
fn guided_step_costs_about_two_plain_steps() {
    let params = randomized_params(&small_config(Head::Velocity), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let obs = random_tensor(&mut rng, &[16, 6]);
    let a = random_tensor(&mut rng, &[16, 8, 2]);
    let y = random_tensor(&mut rng, &[16, 8, 2]);
    let w = soft_mask_weights(2, 2, 8, 0.5).unwrap();
    let (mut plain, mut guided) = (SampleCost::default(), SampleCost::default());
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        euler_step(&params, &obs, &a, 0.4, 5, &mut plain).unwrap();
    }
    let plain_time = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    for _ in 0..reps {
        pigdm_guided_step(&params, &obs, &a, 0.4, &y, &w, 5.0, 5, &mut guided).unwrap();
    }
    let guided_time = t0.elapsed().as_secs_f64();
    let ratio = guided.ops.total_flops() as f64 / plain.ops.total_flops() as f64;
    assert!((1.5..=2.5).contains(&ratio), "flop ratio {ratio}");
    // wall time is noisy on shared machines; only a loose sanity bound here
    assert!(guided_time > plain_time, "guided {guided_time}s vs plain {plain_time}s");
}
