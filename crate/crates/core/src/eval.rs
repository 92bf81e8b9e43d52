//! Fixed evaluation protocol for the forward task and skill-library probes.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, Environment, PointMass, GOAL_THRESHOLD};
use crate::error::Result;
use crate::game::reset_state_dispersion;
use crate::sac::SacAgent;
use crate::skill::Discriminator;

/// The 15 frozen evaluation starts: radius 4 every 30 degrees, then radii
/// 3, 4 and 5 at angle 0.
pub fn eval_starts() -> Vec<EnvState> {
    let mut starts: Vec<EnvState> = (0..12)
        .map(|i| {
            let th = i as f64 * PI / 6.0;
            EnvState::at(4.0 * th.cos(), 4.0 * th.sin())
        })
        .collect();
    starts.extend([3.0, 4.0, 5.0].iter().map(|r| EnvState::at(*r, 0.0)));
    starts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub starts: Vec<EnvState>,
    pub threshold: f64,
    pub horizon: usize,
    pub deterministic: bool,
}

impl EvalProtocol {
    pub fn standard(horizon: usize) -> Self {
        Self {
            starts: eval_starts(),
            threshold: GOAL_THRESHOLD,
            horizon,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub final_distances: Vec<f64>,
}

/// Rolls the forward policy from every protocol start. Stochastic protocols
/// draw from `rng`; deterministic ones never touch it.
pub fn evaluate<R: Rng + ?Sized>(agent: &SacAgent, protocol: &EvalProtocol, rng: &mut R) -> Result<EvalResult> {
    let mut dists = Vec::with_capacity(protocol.starts.len());
    for start in &protocol.starts {
        let mut env = PointMass::new(*start);
        env.begin_segment();
        for _ in 0..protocol.horizon {
            let obs = env.observe();
            let action = if protocol.deterministic {
                agent.act_deterministic(&obs, None)?
            } else {
                agent.sample_action(&obs, None, rng)?.action
            };
            if env.step(&action)?.terminated {
                env.recover();
            }
        }
        let p = env.state().position;
        dists.push(p[0].hypot(p[1]));
    }
    let n = dists.len() as f64;
    Ok(EvalResult {
        success_rate: dists.iter().filter(|d| **d < protocol.threshold).count() as f64 / n,
        mean_final_distance: dists.iter().sum::<f64>() / n,
        final_distances: dists,
    })
}

/// Where each skill leaves the agent when started from each of `starts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProbe {
    /// `(start index, skill, final observation)`
    pub finals: Vec<(usize, usize, Vec<f64>)>,
    pub paths: Vec<(usize, usize, Vec<[f64; 2]>)>,
}

impl SkillProbe {
    pub fn final_positions(&self) -> Vec<[f64; 2]> {
        self.finals.iter().map(|(_, _, o)| [o[0], o[1]]).collect()
    }

    pub fn labeled(&self) -> Vec<(Vec<f64>, usize)> {
        self.finals.iter().map(|(_, z, o)| (o.clone(), *z)).collect()
    }

    /// Discriminator accuracy on the probe's final states.
    pub fn accuracy(&self, disc: &Discriminator) -> Result<f64> {
        disc.accuracy(&self.labeled())
    }

    /// Mean over starts of the dispersion among that start's skill endpoints,
    /// or the dispersion of all endpoints for a single start.
    pub fn dispersion(&self) -> Result<f64> {
        let mut by_start: Vec<Vec<[f64; 2]>> = Vec::new();
        for (s, _, o) in &self.finals {
            if by_start.len() <= *s {
                by_start.resize(s + 1, Vec::new());
            }
            by_start[*s].push([o[0], o[1]]);
        }
        let groups: Vec<&Vec<[f64; 2]>> = by_start.iter().filter(|g| g.len() >= 2).collect();
        if groups.is_empty() {
            return reset_state_dispersion(&self.final_positions());
        }
        let mut total = 0.0;
        for g in &groups {
            total += reset_state_dispersion(g)?;
        }
        Ok(total / groups.len() as f64)
    }
}

/// Runs every skill `repeats` times for `horizon` steps from each start.
pub fn probe_skills<R: Rng + ?Sized>(
    reset: &SacAgent,
    starts: &[EnvState],
    horizon: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<SkillProbe> {
    let mut probe = SkillProbe {
        finals: Vec::new(),
        paths: Vec::new(),
    };
    for (si, start) in starts.iter().enumerate() {
        for z in 0..reset.skill_dim().max(1) {
            let skill = (reset.skill_dim() > 0).then_some(z);
            for _ in 0..repeats {
                let mut env = PointMass::new(*start);
                let mut path = vec![start.position];
                for _ in 0..horizon {
                    let a = reset.sample_action(&env.observe(), skill, rng)?.action;
                    let step = env.step(&a)?;
                    path.push(env.state().position);
                    if step.terminated {
                        env.recover();
                        break;
                    }
                }
                probe.finals.push((si, z, env.observe()));
                probe.paths.push((si, z, path));
            }
        }
    }
    Ok(probe)
}
