//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,9` restricts the run to those criteria (criteria 5, 7
//! and 8 reuse the reset-free runs of criterion 4). `ACCEPTANCE_KEEP=1` keeps
//! finished runs from a previous invocation instead of starting fresh.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lsr_core::game::Variant;
use lsr_core::harness::{load_config, run_experiment, run_hierarchy_task, run_seed, HrlSettings, HrlTask, RunConfig, SeedOutcome};
use lsr_core::hrl::{DqnAgent, HierarchyRun, SkillLibrary};
use lsr_core::nn::MlpParams;
use lsr_core::oracle::{random_gradient_checks, sup_distance, train_tabular_sac, TwoStateMdp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

struct Ctx {
    out: PathBuf,
    only: Option<BTreeSet<u32>>,
    reset_free: Option<ResetFree>,
}

struct ResetFree {
    lsr: Vec<SeedOutcome>,
    single: Vec<SeedOutcome>,
    r3l: Vec<SeedOutcome>,
    lsr_dir: PathBuf,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(ctx: &Ctx, file: &str) -> Result<RunConfig, String> {
    let mut cfg = load_config(&configs().join(file)).map_err(|e| e.to_string())?;
    cfg.out_dir = ctx.out.clone();
    Ok(cfg)
}

fn experiment(cfg: &RunConfig) -> Result<(PathBuf, Vec<SeedOutcome>), String> {
    let (root, outcomes) = run_experiment(cfg).map_err(|e| e.to_string())?;
    if outcomes.len() != cfg.seeds.len() {
        let failures = fs::read_to_string(root.join("failures.txt")).unwrap_or_default();
        return Err(format!("{}: {} of {} seeds failed: {failures}", cfg.name, cfg.seeds.len() - outcomes.len(), cfg.seeds.len()));
    }
    Ok((root, outcomes))
}

/// Median of four or more values where `None` counts as never.
fn median_iterations(values: &[Option<u64>]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.map_or(f64::INFINITY, |i| i as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_iter(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.0}")
    } else {
        "never".into()
    }
}

fn gradient_check(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = random_gradient_checks(100, 1e-6, &mut rng).map_err(|e| e.to_string())?;
    Ok((worst <= 1e-4, format!("100 nets, max relative error {worst:.2e} (limit 1e-4)")))
}

fn tabular_oracle(_: &mut Ctx) -> Verdict {
    let mdp = TwoStateMdp { gamma: 0.9, alpha: 0.1 };
    let oracle = mdp.squashed_gaussian_soft_q();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = train_tabular_sac(&mdp, 20_000, &mut rng).map_err(|e| e.to_string())?;
    let d = sup_distance(&q, &oracle);
    Ok((
        d <= 0.05,
        format!("SAC Q {q:.3?} vs soft value iteration {oracle:.3?}, sup distance {d:.4} (limit 0.05)"),
    ))
}

fn oracle_reset(ctx: &mut Ctx) -> Verdict {
    let cfg = config(ctx, "desk_oracle_reset.toml")?;
    let (_, outcomes) = experiment(&cfg)?;
    let firsts: Vec<Option<u64>> = outcomes.iter().map(|o| o.iterations_to(0.8)).collect();
    let best = outcomes.iter().flat_map(|o| o.rows.iter().filter_map(|r| r.eval_success)).fold(0.0, f64::max);
    let ok = firsts.iter().all(|f| f.is_some_and(|i| i <= 500));
    Ok((ok, format!("first >= 0.8 at {firsts:?} of {} episodes, best success {best:.2}", cfg.game.iterations)))
}

fn reset_free_runs(ctx: &mut Ctx) -> Result<&ResetFree, String> {
    if ctx.reset_free.is_none() {
        let mut lsr = config(ctx, "desk_lsr.toml")?;
        lsr.hrl = None;
        let single = config(ctx, "desk_single_adversary.toml")?;
        let r3l = config(ctx, "desk_r3l_perturb.toml")?;
        let (lsr_dir, lsr_out) = experiment(&lsr)?;
        let (_, single_out) = experiment(&single)?;
        let (_, r3l_out) = experiment(&r3l)?;
        ctx.reset_free = Some(ResetFree {
            lsr: lsr_out,
            single: single_out,
            r3l: r3l_out,
            lsr_dir,
        });
    }
    Ok(ctx.reset_free.as_ref().unwrap())
}

fn reset_free_learning(ctx: &mut Ctx) -> Verdict {
    let runs = reset_free_runs(ctx)?;
    let oracle_calls: u64 = runs.lsr.iter().map(|o| o.final_state.oracle_reset_count()).sum();
    let at = |outs: &[SeedOutcome], level: f64| median_iterations(&outs.iter().map(|o| o.iterations_to(level)).collect::<Vec<_>>());
    let lsr70 = at(&runs.lsr, 0.7);
    let mut worse = Vec::new();
    for step in 1..=10 {
        let level = step as f64 / 10.0;
        let (l, s, r) = (at(&runs.lsr, level), at(&runs.single, level), at(&runs.r3l, level));
        if l > s || l > r {
            worse.push(format!("{level:.1}: lsr {} single {} r3l {}", fmt_iter(l), fmt_iter(s), fmt_iter(r)));
        }
    }
    let reached = lsr70.is_finite() && lsr70 <= runs.lsr[0].final_state.cfg.iterations as f64;
    let ok = reached && oracle_calls == 0 && worse.is_empty();
    let per_seed: Vec<String> = runs.lsr.iter().map(|o| o.iterations_to(0.7).map_or("never".into(), |i| i.to_string())).collect();
    Ok((
        ok,
        format!(
            "lsr median iterations to 0.7 {} (per seed {}), oracle resets {oracle_calls}, single {} r3l {}; levels where lsr is slower: {}",
            fmt_iter(lsr70),
            per_seed.join("/"),
            fmt_iter(at(&runs.single, 0.7)),
            fmt_iter(at(&runs.r3l, 0.7)),
            if worse.is_empty() { "none".into() } else { worse.join(", ") }
        ),
    ))
}

fn last_eval(o: &SeedOutcome, f: fn(&lsr_core::game::MetricsRow) -> Option<f64>) -> f64 {
    o.rows.iter().rev().find_map(f).unwrap_or(f64::NAN)
}

fn skill_diversity(ctx: &mut Ctx) -> Verdict {
    let runs = reset_free_runs(ctx)?;
    let acc: Vec<f64> = runs.lsr.iter().map(|o| last_eval(o, |r| r.eval_disc_accuracy)).collect();
    let lsr_disp: Vec<f64> = runs.lsr.iter().map(|o| last_eval(o, |r| r.eval_dispersion)).collect();
    let single_disp: Vec<f64> = runs.single.iter().map(|o| last_eval(o, |r| r.eval_dispersion)).collect();
    let wider = runs
        .lsr
        .iter()
        .zip(&lsr_disp)
        .filter(|(o, d)| runs.single.iter().zip(&single_disp).any(|(s, sd)| s.seed == o.seed && *d > sd))
        .count();
    let med = median(&acc);
    Ok((
        med >= 0.8 && wider >= 3,
        format!(
            "held-out discriminator accuracy median {med:.2} (per seed {acc:.2?}, limit 0.8); dispersion lsr {lsr_disp:.2?} vs single {single_disp:.2?}, wider on {wider}/{} seeds",
            acc.len()
        ),
    ))
}

fn lambda_zero(ctx: &mut Ctx) -> Verdict {
    let base = config(ctx, "desk_lsr.toml")?;
    let mut lsr = base.clone();
    lsr.name = "lambda_zero_lsr".into();
    lsr.seeds = vec![5];
    lsr.game.lambda = 0.0;
    lsr.game.iterations = 60;
    lsr.eval_every = 20;
    let mut diayn = lsr.clone();
    diayn.name = "lambda_zero_diayn".into();
    diayn.game.variant = Variant::DiaynOnly;
    let a = run_seed(&lsr, 5).map_err(|e| e.to_string())?;
    let b = run_seed(&diayn, 5).map_err(|e| e.to_string())?;
    let mut same = true;
    for name in ["forward.lsra", "reset.lsra"] {
        let x = fs::read(a.dir.join("checkpoints").join(name)).map_err(|e| e.to_string())?;
        let y = fs::read(b.dir.join("checkpoints").join(name)).map_err(|e| e.to_string())?;
        same &= x == y;
    }
    Ok((same, format!("forward and reset checkpoints after {} iterations identical: {same}", lsr.game.iterations)))
}

fn conservation(ctx: &mut Ctx) -> Verdict {
    let dir = reset_free_runs(ctx)?.lsr_dir.clone();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    let mut seeds = 0;
    for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path().join("metrics.csv");
        if !path.exists() {
            continue;
        }
        seeds += 1;
        for r in lsr_core::harness::read_metrics(&path).map_err(|e| e.to_string())? {
            worst = worst.max((r.reset_reward_sum - (r.skill_reward_sum - r.lambda * r.forward_return)).abs());
            rows += 1;
        }
    }
    Ok((
        rows > 0 && worst <= 1e-12,
        format!("{rows} logged iterations over {seeds} seeds, max residual {worst:.1e} (limit 1e-12)"),
    ))
}

fn tail_mean(run: &HierarchyRun, n: usize) -> f64 {
    let tail: Vec<f64> = run.curve.iter().rev().take(n).map(|e| e.normalized_return).collect();
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn hierarchy(ctx: &mut Ctx) -> Verdict {
    let h = config(ctx, "desk_lsr_hrl.toml")?.hrl.unwrap_or_else(HrlSettings::default);
    let runs = reset_free_runs(ctx)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (task, need) in [(HrlTask::Waypoints, 0.8), (HrlTask::Maze, 0.5)] {
        let mut learned = Vec::new();
        let mut random = Vec::new();
        for o in &runs.lsr {
            let library = SkillLibrary::new(o.final_state.reset.clone(), h.dqn.deterministic_skills, h.renormalize).map_err(|e| e.to_string())?;
            let (run, baseline, _) = run_hierarchy_task(task, &library, &h, o.seed).map_err(|e| e.to_string())?;
            learned.push(tail_mean(&run, 20));
            random.push(baseline.as_ref().map_or(f64::NAN, |b| tail_mean(b, 20)));
        }
        let (ml, mr) = (median(&learned), median(&random));
        ok &= ml >= need && mr <= 0.3;
        lines.push(format!("{} {ml:.2} (need {need}) random {mr:.2} (limit 0.3)", task.name()));
    }
    Ok((ok, format!("median normalized return over last 20 of {} epochs: {}", h.dqn.epochs, lines.join("; "))))
}

fn double_dqn(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dqn = DqnAgent::new(1, 2, &[], &mut rng);
    let set = |net: &mut MlpParams, b: [f64; 2]| {
        let l = &mut net.layers_mut()[0];
        l.weight.iter_mut().for_each(|w| *w = 0.0);
        l.bias.copy_from_slice(&b);
    };
    set(&mut dqn.online, [1.0, 0.0]);
    set(&mut dqn.target, [2.0, 5.0]);
    let (r, gamma) = (1.0, 0.99);
    let y = dqn.double_dqn_target(r, &[0.0], false, gamma).map_err(|e| e.to_string())?;
    let double = r + gamma * 2.0;
    let vanilla = r + gamma * 5.0;
    let terminal = dqn.double_dqn_target(r, &[0.0], true, gamma).map_err(|e| e.to_string())?;
    Ok((
        (y - double).abs() < 1e-12 && terminal == r,
        format!("target {y:.4}, double {double:.4}, vanilla max {vanilla:.4}, terminal {terminal}"),
    ))
}

fn determinism(ctx: &mut Ctx) -> Verdict {
    let mut cfg = config(ctx, "desk_lsr.toml")?;
    cfg.game.iterations = 50;
    cfg.eval_every = 10;
    let mut texts = Vec::new();
    for name in ["repeat_a", "repeat_b"] {
        cfg.name = name.into();
        let o = run_seed(&cfg, 1).map_err(|e| e.to_string())?;
        texts.push(fs::read(o.dir.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    let same = texts[0] == texts[1];
    Ok((same, format!("two {}-iteration runs, metrics CSV of {} bytes, identical: {same}", cfg.game.iterations, texts[0].len())))
}

type Check = fn(&mut Ctx) -> Verdict;

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect::<BTreeSet<u32>>());
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if std::env::var("ACCEPTANCE_KEEP").is_err() && out.exists() {
        fs::remove_dir_all(&out).expect("clearing previous acceptance runs");
    }
    fs::create_dir_all(&out).expect("creating acceptance output directory");
    let mut ctx = Ctx { out, only, reset_free: None };

    let checks: [(u32, &str, Check); 10] = [
        (1, "finite-difference gradient check", gradient_check),
        (2, "two-state soft Q oracle", tabular_oracle),
        (3, "oracle-reset sanity", oracle_reset),
        (4, "reset-free learning and ordering", reset_free_learning),
        (5, "skill diversity", skill_diversity),
        (6, "lambda = 0 matches diayn_only", lambda_zero),
        (7, "coupling conservation", conservation),
        (8, "hierarchy over frozen skills", hierarchy),
        (9, "double DQN target", double_dqn),
        (10, "repeatable metrics", determinism),
    ];
    let mut passed = 0;
    let mut ran = 0;
    for (id, name, check) in checks {
        if ctx.only.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match check(&mut ctx) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        ran += 1;
        passed += usize::from(ok);
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} criteria passed");
}
