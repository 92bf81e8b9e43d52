use lsr_core::env::{
    default_hazards, sample_initial_state, EnvState, Environment, Maze, PointMass, ResetContext, Waypoints, HAZARD_PENALTY,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn actions() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-3.0..3.0f64), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn point_mass_stays_in_bounds(x in -10.0..10.0f64, y in -10.0..10.0f64, acts in actions()) {
        let mut env = PointMass::new(EnvState::at(x, y));
        let spec = env.spec().clone();
        for a in acts {
            let r = env.step(&a).unwrap();
            let s = env.state();
            prop_assert!(s.position.iter().all(|p| p.abs() <= spec.half_width));
            prop_assert!(s.velocity[0].hypot(s.velocity[1]) <= spec.v_max + 1e-12);
            prop_assert!(r.reward.is_finite());
            if r.terminated {
                prop_assert!(env.in_hazard(s.position));
                prop_assert!(r.reward < HAZARD_PENALTY + 3.0);
                env.recover();
            } else {
                prop_assert!(r.reward >= 0.0);
            }
        }
    }

    #[test]
    fn dynamics_are_deterministic(x in -9.0..9.0f64, y in -9.0..9.0f64, acts in actions()) {
        let mut a = PointMass::new(EnvState::at(x, y));
        let mut b = a.clone();
        for act in acts {
            let ra = a.step(&act).unwrap();
            let rb = b.step(&act).unwrap();
            prop_assert_eq!(ra, rb);
            prop_assert_eq!(a.state(), b.state());
        }
    }

    #[test]
    fn maze_walls_are_impermeable(acts in actions()) {
        let mut maze = Maze::medium(2.0);
        for a in acts {
            let before = maze.state().position;
            maze.step(&a).unwrap();
            let after = maze.state().position;
            prop_assert!(!maze.layout().blocked(after));
            prop_assert!(!maze.layout().blocked([after[0], before[1]]));
        }
    }

    #[test]
    fn waypoint_progress_is_monotone(acts in actions()) {
        let mut env = Waypoints::new();
        let mut last = 0;
        for a in acts {
            env.step(&a).unwrap();
            prop_assert!(env.waypoint_index() >= last);
            last = env.waypoint_index();
        }
    }
}

#[test]
fn hazard_penalty_is_paid_once_per_entry() {
    let strip = default_hazards()[0];
    let mut env = PointMass::new(EnvState::at(0.5 * (strip.x0 + strip.x1), strip.y0 - 0.3));
    let mut penalties = 0;
    for _ in 0..10 {
        let r = env.step(&[0.0, 1.0]).unwrap();
        if r.terminated {
            penalties += 1;
            env.recover();
            break;
        }
    }
    assert_eq!(penalties, 1);
    assert_eq!(env.state().velocity, [0.0, 0.0]);
}

#[test]
fn reset_free_env_refuses_oracle_resets() {
    let mut env = PointMass::new(EnvState::at(1.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(env.oracle_reset(ResetContext::Evaluation, &mut rng).is_ok());
    env.lock_reset_free();
    assert!(env.oracle_reset(ResetContext::ResetFreeTraining, &mut rng).is_err());
    assert!(env.oracle_reset(ResetContext::Baseline, &mut rng).is_err());
    assert_eq!(env.oracle_reset_count(), 1);
}

#[test]
fn initial_states_lie_on_the_ring() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let s = sample_initial_state(&mut rng);
        let r = s.position[0].hypot(s.position[1]);
        assert!((3.0..=5.0).contains(&r), "{r}");
    }
}
