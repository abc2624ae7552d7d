//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 and 10 are fast and asserted. Criteria 7-9 train ten agents
//! (about two hours on one core) and only run with `CNAV_ACCEPTANCE_FULL=1`;
//! their outcome is reported, not asserted, because it is an empirical result.

mod support {
    pub mod mask_toy;
}

#[path = "../../sim/tests/oracle/mod.rs"]
mod oracle;

use std::time::Instant;

use cnav_autodiff::{Tape, Tensor};
use cnav_core::cfs::sparsity;
use cnav_core::eval::run_suite;
use cnav_core::metrics::{self, AgentRecord, EpisodeRecord};
use cnav_core::trainer::Trainer;
use cnav_core::{gradcheck, checkpoint, Model, NetConfig, RunConfig};
use cnav_sim::{
    compute_reward, render_depth_at, AgentState, Background, Camera, ObstacleKind, ObstacleSpec, ScenarioSpec, Shape, Vec3,
    WorldConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 120.0;
const MASK_CASES: usize = 10_000;
const TOY_STEPS: usize = 5_000;
const TOY_SEEDS: u64 = 5;
const TOY_NEEDED: usize = 4;
const METRIC_TOL: f64 = 1e-12;
const METRIC_FUZZ: usize = 10_000;
const RENDER_SCENES: usize = 100;
const RENDER_TOL: f64 = 1e-3;
const FRAME_MS: f64 = 5.0;

const TRAIN_STEPS: usize = 40_000;
const TRAIN_HOURS: f64 = 2.0;
const EVAL_EPISODES: usize = 100;
const EVAL_SEED: u64 = 0xACCE57;
const SR_BAR: f64 = 80.0;
const SEEDS_NEEDED: usize = 2;
const PAIRED_SEEDS: u64 = 5;
/// Validation cadence for picking the reported snapshot; scenes differ from the held-out eval seed.
const VALIDATE_EVERY: usize = 2_500;
const VALIDATE_EPISODES: usize = 20;
const MASK_SAMPLE_EVERY: usize = 500;
/// Moving-average window over mask samples (5k steps).
const MASK_SMOOTH: usize = 10;
/// Largest tolerated drop of the smoothed zero fraction: one channel of 64.
const MASK_DROP_TOL: f64 = 1.0 / 64.0 + 1e-9;
const MASK_PLATEAU: f64 = 0.10;

/// Writes past the test harness capture so the report shows in plain `cargo test` output.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

fn report(id: usize, name: &str, pass: bool, detail: String) -> bool {
    say!("criterion {id:>2} {name:<28} {}  {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn criterion_1() -> bool {
    let t = Instant::now();
    let rows = gradcheck::run(1, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let ops = rows.iter().filter(|r| r.component.starts_with("op/")).count();
    let pass = rows.iter().all(|r| r.max_rel_err < GRAD_TOL) && secs < GRAD_SECONDS;
    report(
        1,
        "gradient battery",
        pass,
        format!("{} rows ({ops} ops), worst {:.2e} in {} < {GRAD_TOL:e}, {secs:.1} s < {GRAD_SECONDS} s", rows.len(), worst.max_rel_err, worst.component),
    )
}

fn gate(w: &[f64], eps: f64) -> Vec<f64> {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(Tensor::from_vec(w.to_vec()));
    let m = t.gate(x, eps).unwrap();
    t.data(m).to_vec()
}

fn criterion_2() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for _ in 0..MASK_CASES {
        let eps = 10f64.powf(rng.random_range(-10.0..-2.0));
        // Range, within the representable domain w^2/eps <= 1e12.
        let w = (rng.random_range(0.0..1e12) * eps).sqrt();
        let m = gate(&[w], eps)[0];
        if !(0.0..1.0).contains(&m) {
            failures.push(format!("range: w {w} eps {eps} -> {m}"));
        }
        // Exact zero iff relu zero.
        let u: f64 = match rng.random_range(0..3) {
            0 => 0.0,
            1 => -rng.random_range(1e-100..10.0),
            _ => rng.random_range(1e-100..10.0),
        };
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::from_vec(vec![u]));
        let r = t.relu(x).unwrap();
        let mz = t.gate(r, eps).unwrap();
        if (t.data(mz)[0] == 0.0) != (u <= 0.0) {
            failures.push(format!("zero: u {u}"));
        }
        // Near-binarity.
        let w = (rng.random_range(99.0..1e9) * eps).sqrt();
        if gate(&[w], eps)[0] < 0.99 {
            failures.push(format!("saturation: w {w} eps {eps}"));
        }
        // Strict monotonicity.
        let a = (rng.random_range(0.0..1e12) * eps).sqrt();
        let step = rng.random_range(1e-3..1.0);
        let b = if a == 0.0 { step * eps.sqrt() } else { a * (1.0 + step) };
        let m = gate(&[a, b], eps);
        if m[0] >= m[1] {
            failures.push(format!("monotone: {a} {b}"));
        }
    }
    let first = failures.first().cloned().unwrap_or_default();
    report(2, "CFS mask invariants", failures.is_empty(), format!("{MASK_CASES} cases x 4 properties, {} violations {first}", failures.len()))
}

fn criterion_3() -> bool {
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in 0..TOY_SEEDS {
        let r = support::mask_toy::recover(seed, TOY_STEPS);
        let pass = r.noise_mean < 0.1 && r.signal_mean > 0.9;
        ok += pass as usize;
        parts.push(format!("s{seed} noise {:.3} signal {:.3}", r.noise_mean, r.signal_mean));
    }
    report(3, "mask recovery toy", ok >= TOY_NEEDED, format!("{ok}/{TOY_SEEDS} seeds (need {TOY_NEEDED}) at {TOY_STEPS} steps: {}", parts.join(", ")))
}

fn agent_at(p: Vec3, goal: Vec3) -> AgentState {
    let mut a = AgentState::new(p, goal, 0.0);
    a.position = p;
    a
}

fn criterion_4() -> bool {
    let cfg = WorldConfig::default();
    let goal = Vec3::zeros();
    let prev = agent_at(Vec3::new(3.0, 0.0, 0.0), goal);
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let inside = agent_at(Vec3::new(0.0, 0.499, 0.0), goal);
    checks.push(("arrival just inside 0.5 m", compute_reward(&cfg, &prev, &inside, 10.0, false).goal, 5.0));
    let edge = agent_at(Vec3::new(0.0, 0.5, 0.0), goal);
    checks.push(("no arrival at exactly 0.5 m", compute_reward(&cfg, &prev, &edge, 10.0, false).goal, 3.0 - 0.5));
    let cur = agent_at(Vec3::new(2.0, 0.0, 0.0), goal);
    checks.push(("progress term", compute_reward(&cfg, &prev, &cur, 10.0, false).goal, 1.0));
    let away = agent_at(Vec3::new(4.0, 0.0, 0.0), goal);
    checks.push(("regress term", compute_reward(&cfg, &prev, &away, 10.0, false).goal, -1.0));
    checks.push(("clamp active", compute_reward(&cfg, &prev, &cur, 0.4, false).avoid, -0.5 * (1.0 - 0.4)));
    checks.push(("clamp at d_safe", compute_reward(&cfg, &prev, &cur, 1.0, false).avoid, 0.0));
    checks.push(("clamp beyond d_safe", compute_reward(&cfg, &prev, &cur, 7.0, false).avoid, 0.0));
    checks.push(("collision overrides clamp", compute_reward(&cfg, &prev, &cur, 0.1, true).avoid, -5.0));
    checks.push(("collision far from obstacles", compute_reward(&cfg, &prev, &cur, 9.0, true).avoid, -5.0));
    let r = compute_reward(&cfg, &prev, &cur, 0.4, false);
    checks.push(("total = goal + avoid", r.total(), 1.0 + -0.5 * (1.0 - 0.4)));
    let bad: Vec<_> = checks.iter().filter(|(_, got, want)| got != want).collect();
    report(4, "reward oracle", bad.is_empty(), format!("{} exact cases, mismatches {:?}", checks.len(), bad))
}

fn rec(success: bool, shortest: f64, path: f64) -> AgentRecord {
    AgentRecord { agent_id: 0, success, shortest, path_length: path, mean_speed: 1.0, outcome: String::new() }
}

fn criterion_5() -> bool {
    let eps = |agents| EpisodeRecord { scenario: "oracle".into(), seed: 0, agents };
    let ninety = vec![eps(vec![rec(true, 10.0, 12.5)]), eps(vec![rec(true, 10.0, 10.0)])];
    let spl90 = metrics::spl(&ninety, 1, 2).unwrap();
    let exact = (spl90 - 90.0).abs() < METRIC_TOL
        && (metrics::spl(&[eps(vec![rec(true, 7.0, 7.0)])], 1, 1).unwrap() - 100.0).abs() < METRIC_TOL
        && metrics::spl(&[eps(vec![rec(false, 7.0, 3.0)])], 1, 1).unwrap() == 0.0
        && (metrics::extra_distance(&[eps(vec![rec(true, 10.0, 12.5)])]).unwrap().0 - 2.5).abs() < METRIC_TOL;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..METRIC_FUZZ {
        let n = rng.random_range(1..5);
        let m = rng.random_range(1..20);
        let recs: Vec<EpisodeRecord> = (0..m)
            .map(|_| {
                eps((0..n)
                    .map(|_| {
                        let s = rng.random_bool(0.6);
                        let l = rng.random_range(0.5..20.0);
                        let p = if s { l + rng.random_range(0.0..30.0) } else { rng.random_range(0.0..30.0) };
                        rec(s, l, p)
                    })
                    .collect())
            })
            .collect();
        let sr = metrics::success_rate(&recs).unwrap();
        let spl = metrics::spl(&recs, n, m).unwrap();
        if !(0.0 <= spl && spl <= sr + METRIC_TOL && sr <= 100.0) {
            violations += 1;
        }
    }
    report(5, "metric oracles", exact && violations == 0, format!("90% case = {spl90:.15}, {METRIC_FUZZ} fuzzed sets, {violations} violations of 0 <= SPL <= SR"))
}

fn criterion_6() -> bool {
    let cfg = WorldConfig::default();
    let camera = Camera::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut render_secs = Vec::new();
    for _ in 0..RENDER_SCENES {
        let scene = oracle::random_scene(&mut rng, &cfg.bounds, cfg.agent_radius);
        let t = Instant::now();
        let img = render_depth_at(&cfg, &camera, &scene.shapes, &scene.others, &scene.origin, scene.yaw);
        render_secs.push(t.elapsed().as_secs_f64());
        let mut all = scene.shapes.clone();
        all.extend(scene.others.iter().map(|&c| Shape::Sphere { center: c, radius: cfg.agent_radius }));
        for i in 0..cfg.depth_h {
            for j in 0..cfg.depth_w {
                let d = oracle::pixel_dir(i, j, cfg.depth_h, cfg.depth_w, cfg.fov_h, cfg.fov_v, scene.yaw);
                let want = oracle::trace(&scene.origin, &d, &all, Some(&cfg.bounds), cfg.depth_range_max);
                worst = worst.max((img.get(i, j) as f64 - want).abs());
            }
        }
    }
    render_secs.sort_by(f64::total_cmp);
    let median_ms = render_secs[render_secs.len() / 2] * 1e3;
    let max_ms = render_secs.last().unwrap() * 1e3;
    report(
        6,
        "renderer vs ray march",
        worst < RENDER_TOL && max_ms < FRAME_MS,
        format!("{RENDER_SCENES} scenes, max error {worst:.2e} m < {RENDER_TOL:e}, frame median {median_ms:.3} ms, max {max_ms:.3} ms < {FRAME_MS} ms"),
    )
}

fn smoke_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.net = NetConfig { conv_channels: vec![4, 4, 4, 4], latent_dim: 8, actor_hidden: 16, critic_hidden: 16, ..NetConfig::default() };
    cfg.trainer.total_steps = 200;
    cfg.trainer.warmup_steps = 50;
    cfg.trainer.batch_size = 16;
    cfg.trainer.buffer_capacity = 1_000;
    cfg.trainer.log_every = 10;
    cfg.trainer.checkpoint_every = 100;
    cfg.trainer.eval_every = 100;
    cfg.trainer.eval_episodes = 2;
    cfg
}

fn criterion_10() -> bool {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<(Vec<u8>, Vec<u8>, String)> = dirs
        .iter()
        .map(|d| {
            let mut t = Trainer::new(smoke_config(10), Some(d.path())).unwrap();
            let s = t.run().unwrap();
            let ck = s.final_checkpoint.unwrap();
            let loaded = checkpoint::load(&ck).unwrap();
            let suite = vec![loaded.config.scenario.clone(), ScenarioSpec { background: Background::Forest, ..loaded.config.scenario.clone() }];
            let r = run_suite(&loaded.model, &loaded.config.world, &suite, 4, 3, true).unwrap();
            let eval = format!("{:?}{:?}{:?}", r.rows, r.episodes, r.trajectories);
            (std::fs::read(d.path().join("metrics.jsonl")).unwrap(), std::fs::read(ck).unwrap(), eval)
        })
        .collect();
    let train_same = outs[0].0 == outs[1].0 && outs[0].1 == outs[1].1;
    let eval_same = outs[0].2 == outs[1].2;

    let path = dirs[0].path().join("step_200.cnav");
    let bytes = std::fs::read(&path).unwrap();
    let l = checkpoint::load(&path).unwrap();
    let again = checkpoint::to_bytes(&l.config, &l.model, l.optimizers.as_ref(), l.state.as_ref()).unwrap();
    let mut t = Trainer::new(smoke_config(10), None).unwrap();
    t.run().unwrap();
    let tensors_same = t.model.store.iter().all(|(name, a)| {
        let b = l.model.store.get(l.model.store.id(name).unwrap());
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let round_trip = again == bytes && tensors_same;
    report(
        10,
        "determinism and persistence",
        train_same && eval_same && round_trip,
        format!("train logs+checkpoints identical {train_same}, eval identical {eval_same}, checkpoint round trip bit-exact {round_trip}"),
    )
}

#[test]
fn acceptance_fast() {
    let results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6(), criterion_10()];
    assert!(results.iter().all(|&p| p), "a fast acceptance criterion failed; see the report above");
}

fn protocol_config(seed: u64, cfs_enabled: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.net = NetConfig {
        conv_channels: vec![8, 8, 8, 8],
        latent_dim: 16,
        actor_hidden: 64,
        critic_hidden: 64,
        cfs_enabled,
        ..NetConfig::default()
    };
    cfg.trainer.total_steps = TRAIN_STEPS;
    cfg.trainer.batch_size = 64;
    cfg.trainer.eval_every = VALIDATE_EVERY;
    cfg.trainer.eval_episodes = VALIDATE_EPISODES;
    cfg
}

struct Run {
    seed: u64,
    model: Model<f32>,
    config: RunConfig,
    hours: f64,
    best_step: usize,
    zero_fraction: Vec<f64>,
}

fn train_run(seed: u64, cfs_enabled: bool) -> Run {
    let config = protocol_config(seed, cfs_enabled);
    let warmup = config.trainer.warmup_steps;
    let t0 = Instant::now();
    let mut t = Trainer::new(config.clone(), None).unwrap();
    let mut zero_fraction = Vec::new();
    while t.step < TRAIN_STEPS {
        t.step_once().unwrap();
        if cfs_enabled && t.step > warmup && t.step.is_multiple_of(MASK_SAMPLE_EVERY) {
            zero_fraction.push(sparsity(&t.model.mask_values().unwrap()[0]));
        }
    }
    let hours = t0.elapsed().as_secs_f64() / 3600.0;
    let best = t.best_eval().expect("validation ran");
    say!(
        "  trained seed {seed} {} in {:.2} h, train success {:.1}%, best validation {:.1}% at step {}",
        if cfs_enabled { "cfs" } else { "baseline" },
        hours,
        t.train_success_rate(),
        best.success_rate,
        best.step
    );
    let model = t.best_model().cloned().expect("snapshot taken");
    Run { seed, model, config, hours, best_step: best.step, zero_fraction }
}

fn success(run: &Run, spec: &ScenarioSpec) -> f64 {
    run_suite(&run.model, &run.config.world, std::slice::from_ref(spec), EVAL_EPISODES, EVAL_SEED, false).unwrap().rows[0].success_rate
}

fn smoothed(xs: &[f64], k: usize) -> Vec<f64> {
    if xs.len() < k {
        return Vec::new();
    }
    xs.windows(k).map(|w| w.iter().sum::<f64>() / k as f64).collect()
}

/// Non-decreasing within tolerance, and the last quarter settles above the plateau bar.
fn mask_trend(zf: &[f64]) -> (bool, f64, f64) {
    let s = smoothed(zf, MASK_SMOOTH);
    if s.is_empty() {
        return (false, 0.0, 0.0);
    }
    let mut peak = f64::NEG_INFINITY;
    let mut drop = 0.0f64;
    for &v in &s {
        peak = peak.max(v);
        drop = drop.max(peak - v);
    }
    let tail = &s[s.len() * 3 / 4..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    (drop <= MASK_DROP_TOL && plateau > MASK_PLATEAU, drop, plateau)
}

#[test]
fn acceptance_training() {
    if std::env::var("CNAV_ACCEPTANCE_FULL").as_deref() != Ok("1") {
        for (id, name) in [(7, "desk-scale training"), (8, "mask sparsity trend"), (9, "CFS vs baseline A/B")] {
            say!("criterion {id:>2} {name:<28} SKIP  set CNAV_ACCEPTANCE_FULL=1 to train ({} runs of {TRAIN_STEPS} steps)", 2 * PAIRED_SEEDS);
        }
        return;
    }
    let playground = protocol_config(0, true).scenario;
    let forest = ScenarioSpec { name: Some("forest".into()), background: Background::Forest, ..playground.clone() };
    let cubes = ScenarioSpec {
        name: Some("playground+4 cubes".into()),
        obstacles: vec![ObstacleSpec { kind: ObstacleKind::Cube, count: 4 }],
        ..playground.clone()
    };

    let mut sr7 = Vec::new();
    let mut trend = Vec::new();
    let mut ab = Vec::new();
    for seed in 0..PAIRED_SEEDS {
        let ours = train_run(seed, true);
        let base = train_run(seed, false);
        if seed < 3 {
            sr7.push((ours.seed, success(&ours, &playground), ours.hours, ours.best_step));
            trend.push((ours.seed, mask_trend(&ours.zero_fraction)));
            say!("  seed {seed} first-module zero fraction every {MASK_SAMPLE_EVERY} steps: {:?}", ours.zero_fraction);
        }
        let row = [success(&ours, &forest), success(&base, &forest), success(&ours, &cubes), success(&base, &cubes)];
        say!("  seed {seed} forest cfs {:.1} base {:.1}, cubes cfs {:.1} base {:.1}", row[0], row[1], row[2], row[3]);
        ab.push(row);
    }

    let ok7 = sr7.iter().filter(|(_, sr, h, _)| *sr >= SR_BAR && *h <= TRAIN_HOURS).count();
    let detail: Vec<String> =
        sr7.iter().map(|(s, sr, h, step)| format!("s{s} {sr:.1}% (snapshot at {step}) in {h:.2} h")).collect();
    report(
        7,
        "desk-scale training",
        ok7 >= SEEDS_NEEDED,
        format!("{ok7}/3 seeds >= {SR_BAR}% over {EVAL_EPISODES} episodes within {TRAIN_STEPS} steps (need {SEEDS_NEEDED}): {}", detail.join(", ")),
    );

    let ok8 = trend.iter().filter(|(_, (p, _, _))| *p).count();
    let detail: Vec<String> =
        trend.iter().map(|(s, (_, drop, plateau))| format!("s{s} max drop {drop:.3}, plateau {:.1}%", 100.0 * plateau)).collect();
    report(
        8,
        "mask sparsity trend",
        ok8 >= SEEDS_NEEDED,
        format!("{ok8}/3 seeds non-decreasing (drop <= {MASK_DROP_TOL:.3}) with plateau > {:.0}%: {}", 100.0 * MASK_PLATEAU, detail.join(", ")),
    );

    let n = ab.len() as f64;
    let mean = |k: usize| ab.iter().map(|r| r[k]).sum::<f64>() / n;
    let (f_ours, f_base, c_ours, c_base) = (mean(0), mean(1), mean(2), mean(3));
    report(
        9,
        "CFS vs baseline A/B",
        f_ours >= f_base && c_ours >= c_base,
        format!("{PAIRED_SEEDS} paired seeds, forest {f_ours:.1} vs {f_base:.1}, playground+4 cubes {c_ours:.1} vs {c_base:.1}"),
    );
}
