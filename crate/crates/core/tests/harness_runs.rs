use std::fs;
use std::path::Path;

use lsr_core::env::Maze;
use lsr_core::harness::{bootstrap_ci, config_from_pairs, parse_override, read_metrics, run_experiment, run_seed, RunConfig};
use lsr_core::plot::{emit_plots, learning_curve};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn tiny(dir: &Path, name: &str, extra: &str) -> RunConfig {
    let text = format!(
        "preset = \"desk\"\nname = \"{name}\"\nout_dir = {:?}\nseeds = [3]\nresume_every = 5\n\
         eval.every = 10\neval.skill_repeats = 1\n\
         game.iterations = 20\ngame.t_reset = 6\ngame.t_forward = 8\ngame.hidden = [8, 8]\n\
         game.disc_hidden = [8]\ngame.updates_per_phase = 2\ngame.batch_size = 8\ngame.disc_batch = 8\n{extra}",
        dir.display().to_string()
    );
    let pairs: Vec<_> = text.lines().map(|l| parse_override(l).unwrap()).collect();
    config_from_pairs(&pairs).unwrap()
}

fn metrics_text(cfg: &RunConfig, seed: u64) -> String {
    fs::read_to_string(cfg.out_dir.join(&cfg.name).join(format!("seed_{seed}")).join("metrics.csv")).unwrap()
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(tmp.path(), "a", "game.rnd = true\n");
    let b = tiny(tmp.path(), "b", "game.rnd = true\n");
    run_seed(&a, 3).unwrap();
    run_seed(&b, 3).unwrap();
    assert_eq!(metrics_text(&a, 3), metrics_text(&b, 3));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tiny(tmp.path(), "straight", "game.iterations = 24\n");
    run_seed(&straight, 3).unwrap();

    let mut split = tiny(tmp.path(), "split", "game.iterations = 12\n");
    run_seed(&split, 3).unwrap();
    split.game.iterations = 24;
    let out = run_seed(&split, 3).unwrap();
    assert_eq!(out.final_state.iteration, 24);
    assert_eq!(metrics_text(&straight, 3), metrics_text(&split, 3));
}

#[test]
fn resume_refuses_a_different_game() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "r", "game.iterations = 5\n");
    run_seed(&cfg, 3).unwrap();
    cfg.game.lambda = 0.25;
    assert!(run_seed(&cfg, 3).is_err());
}

#[test]
fn evaluation_cadence_does_not_touch_training() {
    let tmp = tempfile::tempdir().unwrap();
    let often = tiny(tmp.path(), "often", "eval.every = 1\n");
    let rare = tiny(tmp.path(), "rare", "eval.every = 1000\n");
    let a = run_seed(&often, 3).unwrap();
    let b = run_seed(&rare, 3).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        let mut x = x.clone();
        let mut y = y.clone();
        for r in [&mut x, &mut y] {
            r.eval_success = None;
            r.eval_final_distance = None;
            r.eval_disc_accuracy = None;
            r.eval_dispersion = None;
        }
        assert_eq!(x, y);
    }
    assert_eq!(a.rows.iter().filter(|r| r.eval_success.is_some()).count(), 20);
    assert_eq!(b.rows.iter().filter(|r| r.eval_success.is_some()).count(), 0);
}

#[test]
fn experiment_writes_outputs_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "full", "seeds = [0, 1]\n");
    cfg.game.iterations = 10;
    let (root, outcomes) = run_experiment(&cfg).unwrap();
    assert_eq!(outcomes.len(), 2);
    for name in ["config.toml", "curves.csv", "summary.csv", "failures.txt"] {
        assert!(root.join(name).exists(), "{name}");
    }
    for seed in ["seed_0", "seed_1"] {
        for name in ["metrics.csv", "timing.csv", "skills.csv", "state.bin", "checkpoints/forward.lsra", "checkpoints/reset.lsra"] {
            assert!(root.join(seed).join(name).exists(), "{seed}/{name}");
        }
        let rows = read_metrics(&root.join(seed).join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.oracle_resets == 0));
    }
    let again = lsr_core::harness::load_config(&root.join("config.toml")).unwrap();
    assert_eq!(again, cfg);

    let svgs = emit_plots(&root, Maze::medium(2.0).layout()).unwrap();
    assert_eq!(svgs.len(), 3);
    for p in svgs {
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"), "{}", p.display());
    }
}

#[test]
fn failing_seed_is_recorded_while_others_finish() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "partial", "seeds = [0, 1]\ngame.iterations = 4\n");
    let blocker = cfg.out_dir.join(&cfg.name).join("seed_1");
    fs::create_dir_all(blocker.parent().unwrap()).unwrap();
    fs::write(&blocker, "not a directory").unwrap();
    cfg.eval_every = 2;
    let (root, outcomes) = run_experiment(&cfg).unwrap();
    assert_eq!(outcomes.len(), 1);
    assert_eq!(outcomes[0].seed, 0);
    assert!(fs::read_to_string(root.join("failures.txt")).unwrap().contains("seed 1"));
}

#[test]
fn plot_input_without_columns_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("curves.csv");
    fs::write(&bad, "iteration,mean\n1,0.5\n").unwrap();
    let err = learning_curve(&bad, &tmp.path().join("out.svg")).unwrap_err().to_string();
    assert!(err.contains("curves.csv"), "{err}");
    assert!(err.contains("low") && err.contains("high"), "{err}");
}

#[test]
fn bootstrap_interval_covers_the_mean_near_nominal_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(2.0, 1.0).unwrap();
    let trials = 400;
    let mut covered = 0;
    for t in 0..trials {
        let sample: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let (_, lo, hi) = bootstrap_ci(&sample, 1000, 0.95, rng.random::<u64>() ^ t);
        if lo <= 2.0 && 2.0 <= hi {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    assert!((0.91..=0.98).contains(&rate), "coverage {rate}");
}
