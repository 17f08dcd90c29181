//! End-to-end acceptance checks A1-A12. Trained fixtures are cached under
//! the cargo target tmp dir, keyed by a hash of their config, so only the
//! first run pays for training.

mod common;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chunk_lab::bench::*;
use chunk_lab::discrete::{mask_ratio, unmask_count_schedule, Quantizer};
use chunk_lab::envs::{hex_digest, EnvConfig, EnvState};
use chunk_lab::executors::{commit_prefix, run_rollouts, ExecutorConfig, Executor, Method, Policy, RolloutSpec};
use chunk_lab::flow::{rtc_sample_chunk, sample_chunk, FlowSampleConfig, GuidanceConfig};
use chunk_lab::math::{grad_check, Tape, Tensor, Var};
use chunk_lab::net::{BoundParams, Head, PolicyParams};
use chunk_lab::TokenChunk;
use common::{randomized_params, random_tensor, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Fixture {
    cfg: RunConfig,
    dir: PathBuf,
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Dataset and both heads trained with the shipped config for `env`.
fn fixture(env: &str) -> Fixture {
    let cfg = RunConfig::load(Some(&configs_dir().join(format!("{env}.toml"))), &[]).unwrap();
    let key = &hex_digest(cfg.to_toml().as_bytes())[..16];
    let dir = cache_root().join(format!("{env}-{key}"));
    let done = |h| dir.join(checkpoint_file(h)).exists();
    if !(done(Head::Velocity) && done(Head::Logits)) {
        let data = cmd_collect(&cfg, &dir).unwrap().path;
        for head in [Head::Velocity, Head::Logits] {
            eprintln!("training {env} {head:?} fixture");
            cmd_train(&cfg, head, &data, &TrainStart::Scratch, None, &dir, |_| {}).unwrap();
        }
    }
    let cfg = RunConfig {
        eval: EvalSection {
            flow_checkpoint: Some(dir.join(checkpoint_file(Head::Velocity))),
            discrete_checkpoint: Some(dir.join(checkpoint_file(Head::Logits))),
            ..cfg.eval.clone()
        },
        ..cfg
    };
    Fixture { cfg, dir }
}

impl Fixture {
    fn policy(&self, head: Head) -> Policy {
        load_policy(&self.cfg, head).unwrap()
    }

    fn row(&self, method: Method, d: usize, trials: usize) -> MetricsRow {
        let policy = self.policy(head_for(method, &self.cfg));
        self.row_with(&policy, method, d, trials)
    }

    fn row_with(&self, policy: &Policy, method: Method, d: usize, trials: usize) -> MetricsRow {
        let exec = self.cfg.executor_config(method, d);
        let seed = self.cfg.eval.seeds[0];
        let spec = RolloutSpec {
            env: self.cfg.env.clone(),
            exec,
            seed,
            trials,
            timeline: false,
            trace_trials: 0,
        };
        MetricsRow::aggregate(method, d, exec.s, seed, &run_rollouts(policy, &spec).unwrap().trials)
    }
}

fn a1_gradients() -> Outcome {
    let mut worst = 0.0_f64;
    for head in [Head::Velocity, Head::Logits] {
        let cfg = tiny_config(head);
        for seed in 0..20 {
            let params = randomized_params(&cfg, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obs = random_tensor(&mut rng, &[2, cfg.obs_dim]);
            let chunk = random_tensor(&mut rng, &[2, cfg.chunk_len, cfg.action_dim]);
            let taus = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let tokens: Vec<TokenChunk> = (0..2)
                .map(|_| {
                    let cells = (0..cfg.chunk_len * cfg.action_dim)
                        .map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(0..cfg.num_bins as u32)))
                        .collect();
                    TokenChunk::from_cells(cfg.chunk_len, cfg.action_dim, cells).unwrap()
                })
                .collect();
            let refs: Vec<&TokenChunk> = tokens.iter().collect();
            let input = Input { obs: &obs, taus: &taus, tokens: &refs };
            if head == Head::Velocity {
                let r = grad_check(|t, x| input.forward(&params, params.bind(t, false), t, x), &chunk, 1e-5).unwrap();
                worst = worst.max(r.max_rel_error);
            }
            for name in params.names() {
                let r = grad_check(
                    |t, x| {
                        let c = t.constant(chunk.clone());
                        input.forward(&params, params.bind(t, false).with_var(name, x), t, c)
                    },
                    params.get(name).unwrap(),
                    1e-5,
                )
                .unwrap();
                worst = worst.max(r.max_rel_error);
            }
        }
    }
    ensure(worst < 1e-5, format!("worst relative error {worst:.2e} over 20 seeds x 2 heads"))
}

struct Input<'a> {
    obs: &'a Tensor,
    taus: &'a [f64],
    tokens: &'a [&'a TokenChunk],
}

impl Input<'_> {
    /// Full mixer forward for either head; `chunk` feeds the velocity head.
    fn forward<'t>(&self, p: &PolicyParams, b: BoundParams<'t>, tape: &'t Tape, chunk: Var<'t>) -> chunk_lab::Result<Var<'t>> {
        match p.config().head {
            Head::Velocity => p.velocity(&b, tape.constant(self.obs.clone()), chunk, self.taus),
            Head::Logits => p.logits(&b, tape.constant(self.obs.clone()), self.tokens),
        }
    }
}

fn a2_prefix_exactness(mt: &Fixture) -> Outcome {
    let policy = mt.policy(Head::Logits);
    let spec = RolloutSpec {
        env: mt.cfg.env.clone(),
        exec: mt.cfg.executor_config(Method::DiscreteRtc, 4),
        seed: 2,
        trials: 9,
        timeline: false,
        trace_trials: 0,
    };
    let r = run_rollouts(&policy, &spec).unwrap();
    let checks: usize = r.trials.iter().map(|t| t.stats.prefix_checks).sum();
    let exact: usize = r.trials.iter().map(|t| t.stats.prefix_exact).sum();
    ensure(checks >= 512 && exact == checks, format!("{exact}/{checks} inferences kept the committed prefix"))
}

/// Observation pairs four steps apart along expert rollouts.
fn observation_pairs(env: &EnvConfig, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut lane = 0;
    while out.len() < n {
        let mut st = EnvState::reset(env, lane);
        let mut obs = vec![st.observation()];
        for _ in 0..120 {
            let a = st.expert_action(env);
            st.step(env, a).unwrap();
            obs.push(st.observation());
        }
        for t in [40, 80, 120] {
            out.push((obs[t - 4].clone(), obs[t].clone()));
        }
        lane += 1;
    }
    out.truncate(n);
    out
}

fn a3_guidance(mt: &Fixture) -> Outcome {
    let params = mt.policy(Head::Velocity).params().clone();
    let (d, s) = (4, 4);
    let gcfg = GuidanceConfig {
        beta: 5.0,
        ..GuidanceConfig::new(d, s)
    };
    let mut wins = 0;
    let pairs = observation_pairs(&mt.cfg.env, 200);
    for (k, (before, now)) in pairs.iter().enumerate() {
        let prev_obs = Tensor::new(vec![before.len()], before.clone()).unwrap();
        let obs = Tensor::new(vec![now.len()], now.clone()).unwrap();
        let prev = sample_chunk(&params, &prev_obs, &FlowSampleConfig { n: 5, seed: k as u64 }).unwrap();
        let prefix = commit_prefix(&prev, d, s).unwrap();
        let scfg = FlowSampleConfig {
            n: 5,
            seed: 10_000 + k as u64,
        };
        let plain = sample_chunk(&params, &obs, &scfg).unwrap();
        let (guided, _) = rtc_sample_chunk(&params, &obs, &prefix, &gcfg, &scfg).unwrap();
        let err = |c: &chunk_lab::ActionChunk| -> f64 {
            c.data()[..d * 2].iter().zip(&prefix.values.data()[..d * 2]).map(|(x, y)| (x - y).powi(2)).sum()
        };
        if err(&guided) < err(&plain) {
            wins += 1;
        }
    }
    ensure(wins * 100 >= 95 * pairs.len(), format!("guided prefix error lower in {wins}/{} pairs", pairs.len()))
}

fn a4_budget(mt: &Fixture) -> Outcome {
    let (d, s, a, h) = (4, 4, 2, mt.cfg.policy.chunk_len);
    let mut carry = mt.policy(Head::Logits);
    if let Policy::Discrete(p) = &mut carry {
        p.unmask.natural_carry = true;
    }
    let spec = RolloutSpec {
        env: mt.cfg.env.clone(),
        exec: mt.cfg.executor_config(Method::DiscreteRtc, d),
        seed: 3,
        trials: 16,
        timeline: false,
        trace_trials: 0,
    };
    let r = run_rollouts(&carry, &spec).unwrap();
    let conserved = r.trials.iter().all(|t| t.stats.newly_unmasked + t.final_masked == t.stats.inferences * s * a);
    let n: usize = r.trials.iter().map(|t| t.stats.inferences).sum();
    let newly: usize = r.trials.iter().map(|t| t.stats.newly_unmasked).sum();

    let hard = mt.policy(Head::Logits);
    let r = run_rollouts(&hard, &RolloutSpec { trace_trials: 16, ..spec }).unwrap();
    let per_inference: Vec<usize> = r
        .traces
        .iter()
        .filter(|t| t.d == d)
        .map(|t| {
            let count = |g: &Vec<Vec<u8>>| g.iter().flatten().map(|&c| c as usize).sum::<usize>();
            t.rounds.last().map_or(0, count) - count(&t.initial)
        })
        .collect();
    let max_hard = per_inference.iter().copied().max().unwrap_or(0);
    ensure(
        conserved && max_hard <= (h - d) * a,
        format!(
            "carry: {:.3} tokens/inference (s*A = {}), conservation {}; hard mask max {max_hard} <= {}",
            newly as f64 / n as f64,
            s * a,
            if conserved { "exact" } else { "BROKEN" },
            (h - d) * a
        ),
    )
}

fn a5_cost(mt: &Fixture) -> Outcome {
    let flow = mt.row(Method::ContinuousRtc, 4, 2);
    let disc = mt.policy(Head::Logits);
    let rtc = mt.row_with(&disc, Method::DiscreteRtc, 4, 2);
    let scratch = mt.row_with(&disc, Method::NaiveAsync, 4, 2);
    let ratio = rtc.mean_rounds_per_inference / scratch.mean_rounds_per_inference;
    ensure(
        (1.5..=2.5).contains(&flow.mean_cost_ratio) && ratio <= 0.8,
        format!("guided/plain flow cost {:.3}; discrete rounds ratio {ratio:.3}", flow.mean_cost_ratio),
    )
}

fn a6_sync_failure(mt: &Fixture, rows: &[MetricsRow]) -> Outcome {
    let sync = mt.row(Method::Sync, 4, 512);
    let at = |m| rows.iter().find(|r| r.method == m && r.d == 4).unwrap().solve_rate;
    let (c, d) = (at(Method::ContinuousRtc), at(Method::DiscreteRtc));
    ensure(
        sync.solve_rate < 0.10 && c >= 0.6 && d >= 0.6,
        format!("sync {:.3}, continuous_rtc {c:.3}, discrete_rtc {d:.3}", sync.solve_rate),
    )
}

fn a7_discontinuity(fork: &Fixture, rows: &[MetricsRow]) -> Outcome {
    let naive = fork.row(Method::NaiveAsync, 4, 512);
    let mut ok = true;
    let mut msg = format!("naive {:.3} (jerk {:.3})", naive.solve_rate, naive.boundary_jerk);
    for m in [Method::ContinuousRtc, Method::DiscreteRtc] {
        let r = rows.iter().find(|r| r.method == m && r.d == 4).unwrap();
        ok &= r.solve_rate - naive.solve_rate >= 0.15;
        ok &= naive.solve_ci_high < r.solve_ci_low;
        ok &= naive.boundary_jerk > r.boundary_jerk;
        write!(msg, ", {} {:.3} (jerk {:.3})", m.name(), r.solve_rate, r.boundary_jerk).unwrap();
    }
    ensure(ok, msg)
}

/// ContinuousRTC and DiscreteRTC at d = 1..4, 512 trials each.
fn rtc_rows(f: &Fixture) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for d in 1..=4 {
        for m in [Method::ContinuousRtc, Method::DiscreteRtc] {
            rows.push(f.row(m, d, 512));
        }
    }
    rows
}

fn mean_solve(rows: &[MetricsRow], m: Method) -> f64 {
    let hits: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.solve_rate).collect();
    hits.iter().sum::<f64>() / hits.len() as f64
}

fn a8_discrete_vs_continuous(per_env: &[(&str, &[MetricsRow])]) -> Outcome {
    let mut ok = true;
    let mut msg = String::new();
    for (name, rows) in per_env {
        let (c, d) = (mean_solve(rows, Method::ContinuousRtc), mean_solve(rows, Method::DiscreteRtc));
        ok &= d >= c - 0.03;
        write!(msg, "{name}: discrete {d:.3} vs continuous {c:.3}; ").unwrap();
    }
    ensure(ok, msg.trim_end_matches("; ").to_string())
}

fn executed(policy: &Policy, cfg: &ExecutorConfig, env: &EnvConfig, lane: u64) -> Vec<Vec<f64>> {
    let mut st = EnvState::reset(env, lane);
    let mut ex = Executor::bootstrap(policy, cfg, &st.observation(), env.seed, lane).unwrap();
    let mut actions = Vec::new();
    for _ in 0..env.episode_len {
        let a = ex.step(policy, &st.observation()).unwrap().action;
        let done = st.step(env, [a[0], a[1]]).unwrap().done;
        actions.push(a);
        if done {
            break;
        }
    }
    actions
}

fn a9_degenerate(mt: &Fixture) -> Outcome {
    let env = EnvConfig {
        seed: 7,
        ..mt.cfg.env.clone()
    };
    let (flow, disc) = (mt.policy(Head::Velocity), mt.policy(Head::Logits));
    let mut flow_gap = 0.0_f64;
    let mut discrete_equal = true;
    for lane in 0..4 {
        let naive = executed(&flow, &mt.cfg.executor_config(Method::NaiveAsync, 0), &env, lane);
        let rtc = executed(&flow, &mt.cfg.executor_config(Method::ContinuousRtc, 0), &env, lane);
        if naive.len() != rtc.len() {
            flow_gap = f64::INFINITY;
        }
        for (x, y) in naive.iter().flatten().zip(rtc.iter().flatten()) {
            flow_gap = flow_gap.max((x - y).abs());
        }
        let naive = executed(&disc, &mt.cfg.executor_config(Method::NaiveAsync, 0), &env, lane);
        let rtc = executed(&disc, &mt.cfg.executor_config(Method::DiscreteRtc, 0), &env, lane);
        discrete_equal &= naive == rtc;
    }
    ensure(
        flow_gap <= 1e-12 && discrete_equal,
        format!("continuous max |diff| {flow_gap:.1e}; discrete identical: {discrete_equal}"),
    )
}

fn a10_schedules() -> Outcome {
    let schedule = unmask_count_schedule(16, 5);
    let q = Quantizer::new(512);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let worst = (0..100_000)
        .map(|_| {
            let a: f64 = rng.gen_range(-1.0..=1.0);
            (q.center(q.bin(a).unwrap()) - a).abs()
        })
        .fold(0.0, f64::max);
    let ends = (mask_ratio(0.0), mask_ratio(1.0));
    ensure(
        schedule == [1, 3, 3, 5, 4] && worst <= 1.0 / 512.0 + 1e-12 && ends == (1.0, 0.0),
        format!("schedule {schedule:?}, worst round trip {worst:.3e}, mask ratio ends {ends:?}"),
    )
}

fn a11_appendix(fork: &Fixture, base_rows: &[MetricsRow]) -> Outcome {
    let ft_cfg = RunConfig::from_toml_str(
        &fork.cfg.to_toml(),
        &[
            "train.logits.mode=\"prefix_finetune\"".into(),
            "train.logits.max_steps=1000".into(),
        ],
    )
    .unwrap();
    let ft_dir = fork.dir.join("prefix_finetune");
    let ck = ft_dir.join(checkpoint_file(Head::Logits));
    if !ck.exists() {
        eprintln!("prefix fine-tuning fork discrete fixture");
        let init = TrainStart::Init(fork.dir.join(checkpoint_file(Head::Logits)));
        cmd_train(&ft_cfg, Head::Logits, &fork.dir.join(DATASET_FILE), &init, None, &ft_dir, |_| {}).unwrap();
    }
    let tuned = RunConfig {
        eval: EvalSection {
            discrete_checkpoint: Some(ck),
            ..fork.cfg.eval.clone()
        },
        ..fork.cfg.clone()
    };
    let tuned_policy = load_policy(&tuned, Head::Logits).unwrap();
    let pooled = |rows: &[MetricsRow]| {
        let wins: f64 = rows.iter().map(|r| r.solve_rate * r.trials as f64).sum();
        let n: usize = rows.iter().map(|r| r.trials).sum();
        (wins.round() as usize, n)
    };
    let base: Vec<MetricsRow> = base_rows.iter().filter(|r| r.method == Method::DiscreteRtc).cloned().collect();
    let ft: Vec<MetricsRow> = (1..=4).map(|d| fork.row_with(&tuned_policy, Method::DiscreteRtc, d, 512)).collect();
    let (bw, bn) = pooled(&base);
    let (fw, fn_) = pooled(&ft);
    let (_, base_hi) = wilson_interval(bw, bn, Z95);
    let ft_rate = fw as f64 / fn_ as f64;

    let trace_cfg = RunConfig {
        trace: TraceSection {
            d: 2,
            inferences: 256,
            seed: 4,
        },
        ..fork.cfg.clone()
    };
    let (_, trace) = cmd_trace(&trace_cfg, &cache_root().join("trace")).unwrap();
    ensure(
        ft_rate <= base_hi && trace.respect_rate < 1.0,
        format!(
            "prefix fine-tuned {ft_rate:.3} vs base {:.3} (upper 95% {base_hi:.3}); boundary respected in {:.1}% of {} inferences",
            bw as f64 / bn as f64,
            100.0 * trace.respect_rate,
            trace.inferences
        ),
    )
}

fn a12_determinism(mt: &Fixture) -> Outcome {
    let cfg = RunConfig {
        eval: EvalSection {
            trials: 16,
            ..mt.cfg.eval.clone()
        },
        ..mt.cfg.clone()
    };
    let root = cache_root().join("a12");
    let (a, b) = (root.join("a"), root.join("b"));
    cmd_sweep(&cfg, &a, |_| {}).unwrap();
    cmd_sweep(&cfg, &b, |_| {}).unwrap();
    let (x, y) = (std::fs::read(a.join(SWEEP_FILE)).unwrap(), std::fs::read(b.join(SWEEP_FILE)).unwrap());
    ensure(x == y, format!("two sweeps, {} bytes each, identical: {}", x.len(), x == y))
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut record = |id: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let outcome = f();
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        let line = format!("{id} {tag} {msg} ({:.1}s)", t0.elapsed().as_secs_f64());
        println!("{line}");
        lines.push((outcome.is_ok(), line));
    };

    record("A1", &mut a1_gradients);
    record("A10", &mut a10_schedules);
    let mt = fixture("moving_target");
    let fork = fixture("fork");
    record("A2", &mut || a2_prefix_exactness(&mt));
    record("A3", &mut || a3_guidance(&mt));
    record("A4", &mut || a4_budget(&mt));
    record("A5", &mut || a5_cost(&mt));
    record("A9", &mut || a9_degenerate(&mt));
    let mt_rows = rtc_rows(&mt);
    let fork_rows = rtc_rows(&fork);
    record("A6", &mut || a6_sync_failure(&mt, &mt_rows));
    record("A7", &mut || a7_discontinuity(&fork, &fork_rows));
    record("A8", &mut || a8_discrete_vs_continuous(&[("moving_target", &mt_rows), ("fork", &fork_rows)]));
    record("A11", &mut || a11_appendix(&fork, &fork_rows));
    record("A12", &mut || a12_determinism(&mt));

    println!("\nacceptance summary");
    for (_, l) in &lines {
        println!("  {l}");
    }
    let failed: Vec<&String> = lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}
