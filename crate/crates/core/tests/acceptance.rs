//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset
//! (`cargo test --test acceptance -- 4 9`). Failures are always printed; the
//! exit status is non-zero only with `TABB_ACCEPTANCE_STRICT` set, so cargo
//! still runs the remaining test targets.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabb_core::agents::{self, MetricsRecord};
use tabb_core::config::{desk_profile, Config, EvalMode, ReplayMode, Variant};
use tabb_core::datasets::{self, OfflineDataset, Tier};
use tabb_core::diagnostics;
use tabb_core::envs::{self, Family, ShiftKind};
use tabb_core::numerics::checkpoint::Checkpoint;
use tabb_core::numerics::loss::{expectile_loss, huber, huber_grad};
use tabb_core::numerics::mlp::{self, Activation, MlpSpec, ParamVector};
use tabb_core::pipeline::{self, Manifest, RunLayout};
use tabb_core::{tbm, Error};

type Criterion = (usize, &'static str, fn() -> Outcome);
type Corruption = (&'static str, Box<dyn FnOnce(&mut Vec<u8>)>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "loss-kernel identities", c2_losses),
        (3, "weight properties", c3_weights),
        (4, "exact DP oracle", c4_dp_oracle),
        (5, "bound verifier", c5_bound),
        (6, "mismatch tracks oracle error", c6_ranking),
        (7, "ablation direction", c7_ablation),
        (8, "zero-shift sanity", c8_zero_shift),
        (9, "determinism", c9_determinism),
        (10, "persistence", c10_persistence),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = match std::panic::catch_unwind(f) {
            Ok(o) => o,
            Err(_) => outcome(false, "panicked"),
        };
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {}: {} ({:.1}s) {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        if std::env::var_os("TABB_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=3usize);
        let spec = MlpSpec {
            input_dim: rng.random_range(1..=16),
            hidden: (1..depth).map(|_| rng.random_range(1..=16)).collect(),
            output_dim: rng.random_range(1..=16),
            activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh },
        };
        let mut params = ParamVector::glorot(&spec, &mut rng);
        for v in params.values.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..spec.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |o: &[f64]| -> f64 { o.iter().zip(&y).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum() };
        let (_, g) = mlp::grad(&spec, &params, &x, |o| (loss(o), o.iter().zip(&y).map(|(a, b)| a - b).collect())).unwrap();
        for i in 0..params.len() {
            let mut p = params.clone();
            p.values[i] = params.values[i] + h;
            let up = loss(&mlp::mlp_apply(&spec, &p, &x).unwrap());
            p.values[i] = params.values[i] - h;
            let down = loss(&mlp::mlp_apply(&spec, &p, &x).unwrap());
            worst = worst.max(rel_err((up - down) / (2.0 * h), g.values[i]));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst <= 1e-4 && secs < 60.0, format!("max rel err {worst:.2e} over 100 nets, {secs:.1}s"))
}

fn c2_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact = true;
    for _ in 0..1000 {
        let u: f64 = rng.random_range(-10.0..10.0);
        exact &= expectile_loss(u, 0.5).unwrap() == 0.5 * u * u;
    }
    let mut huber_ok = true;
    for _ in 0..1000 {
        let u: f64 = rng.random_range(-5.0..5.0);
        let d: f64 = rng.random_range(0.1..3.0);
        let closed = if u.abs() <= d { 0.5 * u * u } else { d * (u.abs() - 0.5 * d) };
        huber_ok &= (huber(u, d).unwrap() - closed).abs() <= 1e-12;
    }
    let mut gap: f64 = 0.0;
    for d in [0.1, 1.0, 2.5] {
        for s in [-1.0, 1.0] {
            let at = s * d;
            let eps = 1e-13;
            gap = gap.max((huber(at - eps, d).unwrap() - huber(at + eps, d).unwrap()).abs());
            gap = gap.max((huber_grad(at - eps, d).unwrap() - huber_grad(at + eps, d).unwrap()).abs());
        }
    }
    outcome(
        exact && huber_ok && gap <= 1e-12,
        format!("expectile(u,0.5)==0.5u^2: {exact}, huber closed form: {huber_ok}, jump at |u|=delta {gap:.1e}"),
    )
}

fn c3_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sum_err, mut shift_err): (f64, f64) = (0.0, 0.0);
    let mut positive = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..=256);
        let tau = rng.random_range(0.05..3.0);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let w = tbm::weights(&s, tau).unwrap().weights;
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        positive &= w.iter().all(|&x| x > 0.0);
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let w2 = tbm::weights(&shifted, tau).unwrap().weights;
        shift_err = shift_err.max(w.iter().zip(&w2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let hand = tbm::weights(&[0.0, 3f64.ln()], 1.0).unwrap().weights;
    let hand_err = (hand[0] - 0.75).abs().max((hand[1] - 0.25).abs());
    outcome(
        sum_err <= 1e-6 && positive && shift_err <= 1e-9 && hand_err <= 1e-12,
        format!("sum err {sum_err:.1e}, positive {positive}, shift err {shift_err:.1e}, hand case err {hand_err:.1e}"),
    )
}

fn c4_dp_oracle() -> Outcome {
    let cfg = desk_profile();
    let (_, env) = pipeline::envs_for(&cfg).unwrap();
    let dp = envs::exact_dp(&env, cfg.model.discount).unwrap();
    let residual = dp.residual(env.as_grid().unwrap());
    let refs = datasets::score_refs(&env).unwrap();
    let agent = pipeline::oracle_agent(&cfg, &env).unwrap();
    let r = agents::evaluate(&agent, &env, 200, 4, refs).unwrap();
    outcome(
        residual <= 1e-9 && (r.normalized_score - 100.0).abs() <= 2.0,
        format!("residual {residual:.1e}, oracle score {:.2} over 200 episodes", r.normalized_score),
    )
}

fn c5_bound() -> Outcome {
    let t = Instant::now();
    let mut cfg = desk_profile();
    cfg.run.diagnose_transitions = 2500;
    let (src, tar) = pipeline::build_data(&cfg).unwrap();
    let (models, _) = pipeline::train_representation(&cfg, 0, &src, &tar).unwrap();
    let d = pipeline::diagnose_models(&cfg, 0, &models, &src, &tar).unwrap();
    let b = &d.summary.bound;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        b.violations == 0 && b.total >= 2000 && secs < 300.0,
        format!(
            "{} violations / {} checked ({} terminal excluded), eps {:.3}, L {:.3}, worst margin {:.3}",
            b.violations, b.total, b.excluded, b.epsilon, b.lipschitz, b.worst_margin
        ),
    )
}

/// Settings for the ranking study on each family.
fn ranking_config(family: Family) -> Config {
    let mut cfg = desk_profile();
    match family {
        Family::GridSlip => {
            cfg.model.latent_state_dim = 32;
            cfg.model.latent_action_dim = 32;
            cfg.model.refinement_steps = 20_000;
        }
        Family::PointMass => {
            cfg.env.family = Family::PointMass;
            cfg.env.shift_level = 2.0;
            cfg.data.target_tier = Tier::Medium;
            cfg.model.latent_state_dim = 8;
            cfg.model.latent_action_dim = 8;
            cfg.model.refinement_steps = 10_000;
        }
    }
    cfg
}

fn c6_ranking() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for family in [Family::GridSlip, Family::PointMass] {
        let cfg = ranking_config(family);
        let (src, tar) = pipeline::build_data(&cfg).unwrap();
        let mut rhos = Vec::new();
        let mut curves: Vec<Vec<f64>> = Vec::new();
        for seed in 0..3 {
            let (models, _) = pipeline::train_representation(&cfg, seed, &src, &tar).unwrap();
            let d = pipeline::diagnose_models(&cfg, seed, &models, &src, &tar).unwrap();
            rhos.push(d.summary.spearman_tbm.unwrap_or(0.0));
            curves.push(d.summary.curve_tbm.clone());
        }
        let rho = rhos.iter().sum::<f64>() / 3.0;
        let mean: Vec<f64> = (0..curves[0].len()).map(|g| curves.iter().map(|c| c[g]).sum::<f64>() / 3.0).collect();
        let up = mean.windows(2).filter(|w| w[1] >= w[0]).count();
        pass &= rho >= 0.5 && up >= 7;
        detail.push(format!(
            "{family:?}: spearman {:.3} (seeds {:.3}/{:.3}/{:.3}), mean curve non-decreasing {up}/9",
            rho,
            rhos[0],
            rhos[1],
            rhos[2]
        ));
    }
    outcome(pass, detail.join("; "))
}

/// Trains `variants` on `seeds` with shared data and per-seed
/// representations; returns final normalized scores per variant.
fn final_scores(cfg: &Config, seeds: &[u64], variants: &[Variant]) -> Vec<Vec<f64>> {
    let (src, tar) = pipeline::build_data(cfg).unwrap();
    let (_, env) = pipeline::envs_for(cfg).unwrap();
    let mut out = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let (models, _) = pipeline::train_representation(cfg, seed, &src, &tar).unwrap();
        let cached = pipeline::cache(&models, &src, &tar).unwrap();
        for (k, &v) in variants.iter().enumerate() {
            let (_, trace) = pipeline::train_agent(cfg, seed, v, &models, &cached, &src, &tar, &env, |_| Ok(())).unwrap();
            out[k].push(trace.last().unwrap().normalized_score);
        }
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn fmt_scores(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join("/")
}

fn ablation_config() -> Config {
    let mut cfg = desk_profile();
    cfg.data.source_size = 50_000;
    cfg.data.target_size = 5_000;
    cfg.run.steps = 10_000;
    cfg.run.eval_every = 10_000;
    cfg.run.eval_mode = EvalMode::Exact;
    cfg
}

fn c7_ablation() -> Outcome {
    let t = Instant::now();
    let cfg = ablation_config();
    let s = final_scores(&cfg, &[0, 1, 2, 3, 4], &[Variant::Tabb, Variant::NoTbm, Variant::SrcActor]);
    let (tabb, no_tbm, src_actor) = (mean(&s[0]), mean(&s[1]), mean(&s[2]));
    let secs = t.elapsed().as_secs_f64();
    outcome(
        tabb - no_tbm >= 5.0 && tabb > src_actor && secs < 1800.0,
        format!(
            "tabb {tabb:.1} [{}], no_tbm {no_tbm:.1} [{}], src_actor {src_actor:.1} [{}], gap {:.1}",
            fmt_scores(&s[0]),
            fmt_scores(&s[1]),
            fmt_scores(&s[2]),
            tabb - no_tbm
        ),
    )
}

fn c8_zero_shift() -> Outcome {
    let mut cfg = desk_profile();
    cfg.env.shift_kind = ShiftKind::None;
    cfg.env.shift_level = 0.0;
    cfg.run.steps = 10_000;
    cfg.run.eval_every = 10_000;
    cfg.run.eval_mode = EvalMode::Exact;
    cfg.run.diagnose_transitions = 2_000;

    let (src, tar) = pipeline::build_data(&cfg).unwrap();
    let (_, env) = pipeline::envs_for(&cfg).unwrap();
    let (models, _) = pipeline::train_representation(&cfg, 0, &src, &tar).unwrap();
    let idx = diagnostics::probe_indices(src.len(), cfg.run.diagnose_transitions, 8);
    let run = diagnostics::oracle_bellman_error(&models.stack, &models.anchor, &env, &src, &idx, ReplayMode::Expected, 8).unwrap();
    let max_delta = run.records.iter().map(|r| r.oracle_delta).fold(0.0, f64::max);
    let d = pipeline::diagnose_models(&cfg, 0, &models, &src, &tar).unwrap();
    let c = &d.summary.curve_tbm;
    let spread = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - c.iter().cloned().fold(f64::INFINITY, f64::min);

    let s = final_scores(&cfg, &[0, 1, 2, 3, 4], &[Variant::Tabb, Variant::NoTbm]);
    let diff = (mean(&s[0]) - mean(&s[1])).abs();
    outcome(
        max_delta == 0.0 && spread <= 1e-9 && diff < 3.0,
        format!(
            "max oracle delta {max_delta:.1e} over {} rows, curve spread {spread:.1e}, tabb {:.1} [{}] vs no_tbm {:.1} [{}]",
            run.records.len(),
            mean(&s[0]),
            fmt_scores(&s[0]),
            mean(&s[1]),
            fmt_scores(&s[1])
        ),
    )
}

fn tiny_config(out: &Path) -> Config {
    let mut cfg = desk_profile();
    cfg.data.source_size = 2_000;
    cfg.data.target_size = 500;
    cfg.model.latent_pretraining_steps = 200;
    cfg.model.refinement_steps = 200;
    cfg.model.anchor_steps = 200;
    cfg.run.steps = 300;
    cfg.run.eval_every = 100;
    cfg.run.eval_episodes = 5;
    cfg.run.seeds = vec![0, 1];
    cfg.run.variants = vec![Variant::Tabb, Variant::NoTbm, Variant::SrcActor];
    cfg.run.workers = 2;
    cfg.run.out_dir = out.to_path_buf();
    cfg
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("a"));
    pipeline::gen_data(&cfg, false).unwrap();
    pipeline::train(&cfg, &cfg.run.variants, false).unwrap();
    let m = Manifest::load(&RunLayout::new(&cfg).manifest()).unwrap();
    let b = dir.path().join("b");
    pipeline::rerun(&m, Some(&b), false).unwrap();
    let la = RunLayout::new(&cfg);
    let mut cb = cfg.clone();
    cb.run.out_dir = b.clone();
    let lb = RunLayout::new(&cb);
    let mut identical = 0;
    let mut total = 0;
    for &seed in &cfg.run.seeds {
        for &v in &cfg.run.variants {
            total += 1;
            let ta = std::fs::read(la.metrics(seed, v)).unwrap();
            let tb = std::fs::read(lb.metrics(seed, v)).unwrap();
            let parsed: Vec<MetricsRecord> = agents::read_metrics(&la.metrics(seed, v)).unwrap();
            if ta == tb && !parsed.is_empty() {
                identical += 1;
            }
        }
    }
    outcome(identical == total, format!("{identical}/{total} metrics traces bit-identical after manifest rerun"))
}

fn corrupt(path: &Path, f: impl FnOnce(&mut Vec<u8>)) -> std::path::PathBuf {
    let mut bytes = std::fs::read(path).unwrap();
    f(&mut bytes);
    let out = path.with_extension("bad");
    std::fs::write(&out, bytes).unwrap();
    out
}

fn c10_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("run"));
    cfg.run.seeds = vec![0];
    cfg.run.variants = vec![Variant::Tabb];
    let (src, _) = pipeline::build_data(&cfg).unwrap();
    let dp = dir.path().join("src.tbds");
    src.save(&dp).unwrap();
    let back = OfflineDataset::load(&dp).unwrap();
    let data_ok = back == src;

    pipeline::gen_data(&cfg, false).unwrap();
    pipeline::train(&cfg, &cfg.run.variants, false).unwrap();
    let layout = RunLayout::new(&cfg);
    let cp = layout.agent(0, Variant::Tabb);
    let ck = Checkpoint::load(&cp).unwrap();
    let cp2 = dir.path().join("copy.ckpt");
    ck.save(&cp2).unwrap();
    let ck_ok = Checkpoint::load(&cp2).unwrap() == ck && std::fs::read(&cp).unwrap() == std::fs::read(&cp2).unwrap();

    let mut rejected = Vec::new();
    for (what, path) in [("dataset", dp.as_path()), ("checkpoint", cp.as_path())] {
        let load = |p: &Path| -> Result<(), Error> {
            if what == "dataset" {
                OfflineDataset::load(p).map(|_| ())
            } else {
                Checkpoint::load(p).map(|_| ())
            }
        };
        let n = std::fs::read(path).unwrap().len();
        let cases: [Corruption; 4] = [
            ("flip", Box::new(move |b: &mut Vec<u8>| b[n - 9] ^= 0x10)),
            ("truncate", Box::new(move |b: &mut Vec<u8>| b.truncate(n * 2 / 3))),
            ("magic", Box::new(|b: &mut Vec<u8>| b[0] = b'X')),
            ("empty", Box::new(|b: &mut Vec<u8>| b.clear())),
        ];
        for (case, f) in cases {
            let bad = corrupt(path, f);
            let ok = matches!(
                load(&bad),
                Err(Error::Checksum { .. } | Error::Truncated { .. } | Error::Format { .. } | Error::Version { .. })
            );
            rejected.push((format!("{what}/{case}"), ok));
        }
    }
    let all_rejected = rejected.iter().all(|r| r.1);
    let missed: Vec<&str> = rejected.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    outcome(
        data_ok && ck_ok && all_rejected,
        format!(
            "dataset round trip {data_ok}, checkpoint round trip {ck_ok}, {}/{} corruptions rejected{}",
            rejected.iter().filter(|r| r.1).count(),
            rejected.len(),
            if missed.is_empty() { String::new() } else { format!(" (missed {})", missed.join(",")) }
        ),
    )
}
