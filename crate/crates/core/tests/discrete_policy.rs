mod common;

use chunk_lab::discrete::{
    apply_random_mask, dequantize, discrete_loss_from_logits, discrete_rtc_sample, force_prefix, inpaint_init,
    mask_count, quantize, run_unmasking, sample_chunk_discrete, select_unmask, shift_carry_pattern,
    unmask_count_schedule, unmask_step, LogitsModel, Quantizer, UnmaskConfig, UnmaskJob,
};
use chunk_lab::math::{Tape, Tensor};
use chunk_lab::net::Head;
use chunk_lab::rng::{stream_for, Purpose};
use chunk_lab::{ActionChunk, TokenChunk};
use common::{randomized_params, small_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn obs() -> Tensor {
    Tensor::full(vec![6], 0.3)
}

fn greedy() -> UnmaskConfig {
    UnmaskConfig {
        decode_temp: 0.0,
        ..UnmaskConfig::default()
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, h: usize, a: usize, bins: u32) -> TokenChunk {
    TokenChunk::from_cells(h, a, (0..h * a).map(|_| Some(rng.gen_range(0..bins))).collect()).unwrap()
}

#[test]
fn quantization_round_trip_error_is_half_a_bin() {
    let q = Quantizer::new(512);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let values: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let chunk = ActionChunk::new(50_000, 2, values.clone()).unwrap();
    let back = dequantize(&quantize(&chunk, &q).unwrap(), &q).unwrap();
    let worst = values.iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 512.0 + 1e-12, "{worst}");
}

#[test]
fn bins_are_fixed_points() {
    let q = Quantizer::new(512);
    let cells = (0..512).map(Some).collect();
    let tokens = TokenChunk::from_cells(256, 2, cells).unwrap();
    assert_eq!(quantize(&dequantize(&tokens, &q).unwrap(), &q).unwrap(), tokens);
    let mut masked = tokens.clone();
    masked.set(3, None);
    assert!(dequantize(&masked, &q).is_err());
}

#[test]
fn random_mask_counts_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(&mut rng, 8, 2, 32);
    assert_eq!(apply_random_mask(&tokens, 0.0, &mut rng).unwrap().masked_count(), 16);
    assert_eq!(apply_random_mask(&tokens, 1.0, &mut rng).unwrap(), tokens);
    let expected = (std::f64::consts::FRAC_PI_4.cos() * 16.0).round() as usize;
    assert_eq!(mask_count(0.5, 16), expected);
    let mut total = 0;
    for _ in 0..10_000 {
        let m = apply_random_mask(&tokens, 0.5, &mut rng).unwrap();
        assert_eq!(m.masked_count(), expected);
        total += m.masked_count();
    }
    assert_eq!(total, 10_000 * expected);
}

#[test]
fn one_hot_logits_leave_only_quantization_residual() {
    let q = Quantizer::new(512);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clean = ActionChunk::new(8, 2, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let tokens = quantize(&clean, &q).unwrap();
    let mut logits = vec![-60.0; 16 * 512];
    for (i, c) in tokens.cells().iter().enumerate() {
        logits[i * 512 + c.unwrap() as usize] = 60.0;
    }
    let input = TokenChunk::masked(8, 2);
    let tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![1, 8, 2, 512], logits).unwrap());
    let (_, parts) = discrete_loss_from_logits(l, &[&input], &[&clean], &q).unwrap();
    assert!(parts.ce < 1e-40);
    let residual = clean
        .data()
        .iter()
        .zip(tokens.cells())
        .map(|(v, c)| (v - q.center(c.unwrap())).abs())
        .sum::<f64>()
        / 16.0;
    assert!((parts.l1 - residual).abs() < 1e-12);
    assert!(parts.l1 <= 1.0 / 512.0);
}

#[test]
fn uniform_logits_cost_log_bins() {
    let q = Quantizer::new(512);
    let clean = ActionChunk::new(8, 2, vec![0.25; 16]).unwrap();
    let mut input = quantize(&clean, &q).unwrap();
    for i in [0, 3, 9] {
        input.set(i, None);
    }
    let tape = Tape::new();
    let l = tape.constant(Tensor::zeros(vec![1, 8, 2, 512]));
    let (_, parts) = discrete_loss_from_logits(l, &[&input], &[&clean], &q).unwrap();
    assert!((parts.ce - 512f64.ln()).abs() < 1e-12);
    assert_eq!(parts.masked, 3);
    // the expected value of a uniform distribution over symmetric bins is 0
    assert!((parts.l1 - 0.25).abs() < 1e-12);
}

/// Fixed logits, independent of the input.
struct FixedLogits {
    h: usize,
    a: usize,
    bins: usize,
    logits: Vec<f64>,
}

impl LogitsModel for FixedLogits {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.h, self.a)
    }

    fn num_bins(&self) -> usize {
        self.bins
    }

    fn logits(&self, obs: &Tensor, tokens: &[&TokenChunk]) -> chunk_lab::Result<Tensor> {
        assert_eq!(obs.shape()[0], tokens.len());
        let data = tokens.iter().flat_map(|_| self.logits.iter().copied()).collect();
        Tensor::new(vec![tokens.len(), self.h, self.a, self.bins], data)
    }
}

#[test]
fn max_confidence_reveals_exactly_the_top_positions() {
    // Position i puts logit i on bin 1 and 0 elsewhere: confidence rises with i.
    let (h, a, bins) = (4, 2, 3);
    let mut logits = vec![0.0; h * a * bins];
    for p in 0..h * a {
        logits[p * bins + 1] = p as f64 * 0.5;
    }
    let state = TokenChunk::masked(h, a);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = FixedLogits { h, a, bins, logits: logits.clone() };
    let out = unmask_step(&model, &Tensor::zeros(vec![1]), &state, 3, &greedy(), &mut rng).unwrap();
    // position 0 has uniform logits; argmax ties go to bin 0
    let revealed: Vec<usize> = (0..8).filter(|&p| !out.is_masked(p)).collect();
    assert_eq!(revealed, vec![5, 6, 7]);
    assert!(revealed.iter().all(|&p| out.get(p) == Some(1)));
    assert_eq!(select_unmask(&logits, bins, &state, 0, &greedy(), &mut rng).unwrap(), state);
    let all = select_unmask(&logits, bins, &state, 8, &greedy(), &mut rng).unwrap();
    assert!(all.is_fully_unmasked());
    assert!(select_unmask(&logits, bins, &state, 9, &greedy(), &mut rng).is_err());
}

#[test]
fn sampling_from_scratch_unmasks_everything_once() {
    let params = randomized_params(&small_config(Head::Logits), 3);
    let cfg = UnmaskConfig::default();
    let a = sample_chunk_discrete(&params, &obs(), &cfg, 5).unwrap();
    let b = sample_chunk_discrete(&params, &obs(), &cfg, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.is_fully_unmasked());
    let q = Quantizer::new(32);
    assert!(dequantize(&a, &q).unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let job = UnmaskJob {
        state: TokenChunk::masked(8, 2),
        boundary: 0..8,
        rng: stream_for(5, Purpose::Unmask, &[]),
        trace: true,
    };
    let out = run_unmasking(&params, &Tensor::full(vec![1, 6], 0.3), vec![job], &cfg).unwrap();
    assert_eq!(out[0].newly_unmasked, 16);
    assert_eq!(out[0].rounds, 5);
    assert_eq!(out[0].trace.as_ref().unwrap().rounds.len(), 5);
}

#[test]
fn unmask_step_keeps_revealed_tokens() {
    let params = randomized_params(&small_config(Head::Logits), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = TokenChunk::masked(8, 2);
    state.set(0, Some(7));
    state.set(9, Some(30));
    let next = unmask_step(&params, &obs(), &state, 5, &UnmaskConfig::default(), &mut rng).unwrap();
    assert_eq!(next.get(0), Some(7));
    assert_eq!(next.get(9), Some(30));
    assert_eq!(next.masked_count(), 14 - 5);
}

fn prefix_chunk(rng: &mut ChaCha8Rng, d: usize) -> TokenChunk {
    let full = random_tokens(rng, 8, 2, 32);
    let mut p = TokenChunk::masked(8, 2);
    for t in 0..d {
        p.set_row(t, full.row(t));
    }
    p
}

#[test]
fn full_prefix_needs_no_rounds() {
    let params = randomized_params(&small_config(Head::Logits), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prefix = prefix_chunk(&mut rng, 8);
    let out = discrete_rtc_sample(&params, &obs(), &prefix, 8, 0, None, &UnmaskConfig::default(), 1).unwrap();
    assert_eq!(out.tokens, prefix);
    assert_eq!(out.rounds, 0);
}

#[test]
fn early_stop_token_bounds_hold() {
    let params = randomized_params(&small_config(Head::Logits), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..50 {
        let prefix = prefix_chunk(&mut rng, 2);
        let out = discrete_rtc_sample(&params, &obs(), &prefix, 2, 2, None, &UnmaskConfig::default(), seed).unwrap();
        assert!((4..=12).contains(&out.newly_unmasked), "{}", out.newly_unmasked);
        assert!(out.tokens.rows_unmasked(0..4));
        for t in 0..2 {
            assert_eq!(out.tokens.row(t), prefix.row(t));
        }
    }
}

#[test]
fn carry_must_agree_with_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prefix = prefix_chunk(&mut rng, 2);
    let cfg = UnmaskConfig {
        natural_carry: true,
        ..UnmaskConfig::default()
    };
    let mut carry = prefix.clone();
    carry.set(0, Some(prefix.get(0).unwrap() ^ 1));
    assert!(inpaint_init(&prefix, 2, Some(&carry), &cfg).is_err());
    assert_eq!(inpaint_init(&prefix, 2, Some(&prefix), &cfg).unwrap(), prefix);
    let hard = inpaint_init(&prefix, 2, Some(&carry), &UnmaskConfig::default()).unwrap();
    assert_eq!(hard, prefix);
}

#[test]
fn shifting_a_carry_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let full = random_tokens(&mut rng, 8, 2, 32);
    let new_prefix = TokenChunk::masked(8, 2);
    let shifted = shift_carry_pattern(&full, 2, &new_prefix, 0);
    assert!(shifted.rows_unmasked(0..6));
    assert_eq!(shifted.masked_count(), 4);

    // hand-built pattern, s = 2: cell (t, a) moves to (t − 2, a)
    let cells: Vec<Option<u32>> = (0..16).map(|i| (i % 3 != 1).then_some(i as u32)).collect();
    let carry = TokenChunk::from_cells(8, 2, cells.clone()).unwrap();
    let mut prefix = TokenChunk::masked(8, 2);
    prefix.set_row(0, &[Some(30), Some(31)]);
    let out = shift_carry_pattern(&carry, 2, &prefix, 1);
    assert_eq!(out.row(0), &[Some(30), Some(31)]);
    for t in 1..6 {
        for a in 0..2 {
            assert_eq!(out.cell(t, a), cells[(t + 2) * 2 + a]);
        }
    }
    assert!(!out.row_unmasked(6) && !out.row_unmasked(7));
    assert_eq!(out.row(6), &[None, None]);

    // fully masked beyond the prefix reproduces the hard-mask start
    let p = prefix_chunk(&mut rng, 2);
    let masked_carry = TokenChunk::masked(8, 2);
    let via_shift = shift_carry_pattern(&masked_carry, 2, &p, 2);
    assert_eq!(via_shift, inpaint_init(&p, 2, None, &UnmaskConfig::default()).unwrap());
}

#[test]
fn forcing_a_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clean = random_tokens(&mut rng, 8, 2, 32);
    let masked = TokenChunk::masked(8, 2);
    assert_eq!(force_prefix(&masked, &clean, 0), masked);
    let p4 = force_prefix(&masked, &clean, 4);
    assert!(p4.masked_count() <= (8 - 4) * 2);
    assert!(p4.rows_unmasked(0..4));
}

#[test]
fn fixed_steps_spends_k_smaller_rounds() {
    let params = randomized_params(&small_config(Head::Logits), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let prefix = prefix_chunk(&mut rng, 4);
    let cfg = UnmaskConfig {
        fixed_steps: true,
        early_stop: false,
        ..UnmaskConfig::default()
    };
    let out = discrete_rtc_sample(&params, &obs(), &prefix, 4, 4, None, &cfg, 3).unwrap();
    assert_eq!(out.rounds, 5);
    let rebudget = unmask_count_schedule(8, 5);
    let scratch = unmask_count_schedule(16, 5);
    assert!(rebudget.iter().zip(&scratch).all(|(r, s)| r <= s));
    assert!(rebudget.iter().sum::<usize>() < scratch.iter().sum::<usize>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedule_conserves_budget(t in 0usize..400, k in 1usize..12) {
        let counts = unmask_count_schedule(t, k);
        prop_assert_eq!(counts.len(), k);
        prop_assert_eq!(counts.iter().sum::<usize>(), t);
    }

    #[test]
    fn unmasking_is_monotone_and_prefix_exact(seed in 0u64..10_000, d in 0usize..5, temp in 0.0f64..2.0, choice in 0.0f64..1.0) {
        let params = randomized_params(&small_config(Head::Logits), seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = prefix_chunk(&mut rng, d);
        let s = d.max(1);
        let cfg = UnmaskConfig { decode_temp: temp, choice_temp: choice, ..UnmaskConfig::default() };
        let job = UnmaskJob {
            state: inpaint_init(&prefix, d, None, &cfg).unwrap(),
            boundary: d..d + s,
            rng: stream_for(seed, Purpose::Unmask, &[]),
            trace: true,
        };
        let out = run_unmasking(&params, &Tensor::full(vec![1, 6], 0.1), vec![job], &cfg).unwrap().remove(0);
        let trace = out.trace.unwrap();
        let mut prev = trace.initial.clone();
        for grid in &trace.rounds {
            for (r0, r1) in prev.iter().zip(grid) {
                for (a, b) in r0.iter().zip(r1) {
                    prop_assert!(b >= a);
                }
            }
            prev = grid.clone();
        }
        for t in 0..d {
            prop_assert_eq!(out.tokens.row(t), prefix.row(t));
        }
        prop_assert!(out.tokens.rows_unmasked(0..d + s));
    }

    #[test]
    fn early_stop_never_uses_more_rounds(seed in 0u64..10_000, d in 1usize..5) {
        let params = randomized_params(&small_config(Head::Logits), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = prefix_chunk(&mut rng, d);
        let on = UnmaskConfig::default();
        let off = UnmaskConfig { early_stop: false, ..on };
        let a = discrete_rtc_sample(&params, &obs(), &prefix, d, d, None, &on, seed).unwrap();
        let b = discrete_rtc_sample(&params, &obs(), &prefix, d, d, None, &off, seed).unwrap();
        prop_assert!(a.rounds <= b.rounds);
        prop_assert!(b.tokens.is_fully_unmasked());
    }
}
