//! Double-DQN meta-controller choosing among frozen reset skills.

use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, Environment, Maze, Waypoints, WAYPOINTS};
use crate::error::{Error, NnError, Result};
use crate::nn::{adam_step, polyak_update, Activation, AdamState, MlpParams};
use crate::sac::SacAgent;
use crate::skill::argmax;

/// Position coordinates zeroed, everything else untouched.
pub fn renormalize_obs(obs: &[f64]) -> Vec<f64> {
    let mut out = obs.to_vec();
    for v in out.iter_mut().take(2) {
        *v = 0.0;
    }
    out
}

/// A frozen skill-conditioned policy.
#[derive(Debug, Clone)]
pub struct SkillLibrary {
    agent: SacAgent,
    deterministic: bool,
    renormalize: bool,
    digest: u64,
}

fn agent_digest(agent: &SacAgent) -> u64 {
    let mut bytes = Vec::new();
    agent.write_checkpoint(&mut bytes).expect("writing to memory cannot fail");
    let mut h = std::collections::hash_map::DefaultHasher::new();
    bytes.hash(&mut h);
    h.finish()
}

impl SkillLibrary {
    pub fn new(agent: SacAgent, deterministic: bool, renormalize: bool) -> Result<Self> {
        if agent.skill_dim() == 0 {
            return Err(Error::Invalid("skill library needs a skill-conditioned agent".into()));
        }
        Ok(Self {
            digest: agent_digest(&agent),
            agent,
            deterministic,
            renormalize,
        })
    }

    pub fn num_skills(&self) -> usize {
        self.agent.skill_dim()
    }

    pub fn agent(&self) -> &SacAgent {
        &self.agent
    }

    /// Hash of the serialized skill parameters, fixed at construction.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Recomputes the hash from the current parameters.
    pub fn verify(&self) -> bool {
        agent_digest(&self.agent) == self.digest
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], z: usize, rng: &mut R) -> Result<Vec<f64>> {
        let input = if self.renormalize { renormalize_obs(obs) } else { obs.to_vec() };
        if self.deterministic {
            self.agent.act_deterministic(&input, Some(z))
        } else {
            Ok(self.agent.sample_action(&input, Some(z), rng)?.action)
        }
    }
}

/// High-level observation: absolute position scaled by the workspace half-width, then task progress.
pub fn meta_observation<E: Environment>(env: &E) -> Vec<f64> {
    let s = env.state();
    let hw = env.spec().half_width;
    let mut obs = vec![s.position[0] / hw, s.position[1] / hw];
    obs.extend(env.progress());
    obs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroTransition {
    pub obs: Vec<f64>,
    pub skill: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub steps: usize,
}

/// Downstream task. Episodes have no terminal state and always run the full
/// macro-step budget; a solved Waypoints task keeps paying at the last waypoint.
pub trait Downstream: Environment {}

impl Downstream for Waypoints {}

impl Downstream for Maze {}

/// Runs skill `z` for `h` low-level steps.
pub fn macro_step<E: Downstream, R: Rng + ?Sized>(
    env: &mut E,
    library: &SkillLibrary,
    z: usize,
    h: usize,
    rng: &mut R,
    path: Option<&mut Vec<[f64; 2]>>,
) -> Result<MacroTransition> {
    if z >= library.num_skills() {
        return Err(Error::SkillOutOfRange {
            skill: z,
            num_skills: library.num_skills(),
        });
    }
    let obs = meta_observation(env);
    let mut reward = 0.0;
    let mut steps = 0;
    let mut path = path;
    while steps < h {
        let a = library.act(&env.observe(), z, rng)?;
        let step = env.step(&a)?;
        reward += step.reward;
        steps += 1;
        if let Some(p) = path.as_deref_mut() {
            p.push(env.state().position);
        }
        if step.terminated {
            env.recover();
        }
    }
    Ok(MacroTransition {
        obs,
        skill: z,
        reward,
        next_obs: meta_observation(env),
        done: false,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub exploration_fraction: f64,
    pub tau: f64,
    /// Gradient steps taken every this many macro-steps.
    pub update_every: usize,
    pub epochs: usize,
    pub max_macro_steps: usize,
    pub horizon: usize,
    pub deterministic_skills: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            lr: 1e-3,
            gamma: 0.99,
            batch_size: 64,
            buffer_capacity: 100_000,
            eps_start: 1.0,
            eps_end: 0.0,
            exploration_fraction: 0.3,
            tau: 0.005,
            update_every: 1,
            epochs: 500,
            max_macro_steps: 30,
            horizon: 50,
            deterministic_skills: true,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("dqn: {m}")));
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.exploration_fraction) {
            return bad("exploration fraction must lie in [0, 1]");
        }
        if self.horizon == 0 || self.max_macro_steps == 0 || self.batch_size == 0 || self.update_every == 0 {
            return bad("horizon, macro-step budget, batch size and update cadence must be >= 1");
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over the first
    /// `exploration_fraction` of all macro-steps.
    pub fn epsilon(&self, step: usize) -> f64 {
        let total = (self.epochs * self.max_macro_steps) as f64 * self.exploration_fraction;
        if total <= 0.0 {
            return self.eps_end;
        }
        let frac = (step as f64 / total).min(1.0);
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnAgent {
    pub online: MlpParams,
    pub target: MlpParams,
    opt: AdamState,
    k: usize,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, k: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(k);
        let online = MlpParams::new(&sizes, Activation::Relu, rng);
        Self {
            opt: AdamState::new(&online),
            target: online.clone(),
            online,
            k,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.k
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.online.forward(obs)?)
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(obs)?))
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
        if rng.random::<f64>() < epsilon {
            Ok(rng.random_range(0..self.k))
        } else {
            self.greedy(obs)
        }
    }

    /// `r + gamma (1 - done) Q_target(s', argmax_z Q_online(s', z))`.
    pub fn double_dqn_target(&self, r: f64, next_obs: &[f64], done: bool, gamma: f64) -> Result<f64> {
        if done {
            return Ok(r);
        }
        let z = self.greedy(next_obs)?;
        Ok(r + gamma * self.target.forward(next_obs)?[z])
    }

    /// One Adam step on the squared Double-DQN error; returns the pre-step loss.
    pub fn update(&mut self, batch: &[&MacroTransition], gamma: f64, lr: f64, tau: f64) -> Result<f64> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Invalid("empty DQN batch".into()));
        }
        let dim = self.online.input_dim();
        let mut x = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        for t in batch {
            if t.obs.len() != dim || t.skill >= self.k {
                return Err(NnError::Shape("macro transition does not match the Q-network".into()).into());
            }
            x.extend_from_slice(&t.obs);
            y.push(self.double_dqn_target(t.reward, &t.next_obs, t.done, gamma)?);
        }
        let tape = self.online.forward_batch(&x, n)?;
        let mut upstream = vec![0.0; n * self.k];
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let err = tape.output()[i * self.k + t.skill] - y[i];
            loss += err * err / n as f64;
            upstream[i * self.k + t.skill] = 2.0 * err / n as f64;
        }
        let (grad, _) = self.online.backward_batch(&tape, &upstream)?;
        adam_step(&mut self.online, &mut self.opt, &grad, lr)?;
        polyak_update(&mut self.target, &self.online, tau)?;
        Ok(loss)
    }
}

/// Returns of the privileged solver and of uniformly random skill choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub solver: f64,
    pub random: f64,
}

impl References {
    pub fn normalize(&self, r: f64) -> f64 {
        (r - self.random) / (self.solver - self.random)
    }
}

/// Velocity-tracking controller toward `target`.
fn track(state: &EnvState, target: [f64; 2], gain: f64) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        let v_des = (gain * (target[i] - state.position[i])).clamp(-0.7, 0.7);
        a[i] = ((v_des - 0.9 * state.velocity[i]) / 0.1).clamp(-1.0, 1.0);
    }
    a
}

/// Hand-coded controller with privileged task knowledge.
pub trait Solver: Downstream {
    fn solver_action(&self, plan: &mut usize) -> [f64; 2];
}

impl Solver for Waypoints {
    fn solver_action(&self, _plan: &mut usize) -> [f64; 2] {
        let target = WAYPOINTS[self.waypoint_index()];
        track(&self.state(), target, 0.5)
    }
}

impl Solver for Maze {
    fn solver_action(&self, plan: &mut usize) -> [f64; 2] {
        let layout = self.layout();
        let path = layout.path_to_goal(layout.start_cell()).expect("maze goal is reachable");
        let s = self.state();
        while *plan + 1 < path.len() {
            let c = layout.cell_center(path[*plan].0, path[*plan].1);
            if (c[0] - s.position[0]).hypot(c[1] - s.position[1]) < 0.3 {
                *plan += 1;
            } else {
                break;
            }
        }
        let (r, c) = path[*plan];
        track(&s, layout.cell_center(r, c), 0.5)
    }
}

/// Return of the solver over the same low-level budget as one HRL episode.
pub fn solver_return<E: Solver>(proto: &E, budget: usize) -> Result<f64> {
    let mut env = proto.clone();
    let mut plan = 0;
    let mut total = 0.0;
    for _ in 0..budget {
        let a = env.solver_action(&mut plan);
        total += env.step(&a)?.reward;
    }
    Ok(total)
}

/// One HRL episode. `epsilon = 1` gives the random-skill baseline.
pub fn run_episode<E: Downstream, R: Rng + ?Sized>(
    proto: &E,
    library: &SkillLibrary,
    dqn: &DqnAgent,
    cfg: &DqnConfig,
    epsilon: f64,
    rng: &mut R,
    mut path: Option<&mut Vec<[f64; 2]>>,
) -> Result<(f64, Vec<MacroTransition>)> {
    let mut env = proto.clone();
    env.begin_segment();
    let mut total = 0.0;
    let mut transitions = Vec::with_capacity(cfg.max_macro_steps);
    if let Some(p) = path.as_deref_mut() {
        p.push(env.state().position);
    }
    for _ in 0..cfg.max_macro_steps {
        let z = dqn.act(&meta_observation(&env), epsilon, rng)?;
        let t = macro_step(&mut env, library, z, cfg.horizon, rng, path.as_deref_mut())?;
        total += t.reward;
        let done = t.done;
        transitions.push(t);
        if done {
            break;
        }
    }
    Ok((total, transitions))
}

/// Mean return of uniformly random skill selection.
pub fn random_return<E: Downstream, R: Rng + ?Sized>(
    proto: &E,
    library: &SkillLibrary,
    cfg: &DqnConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let dummy = DqnAgent::new(meta_observation(proto).len(), library.num_skills(), &[1], rng);
    let mut total = 0.0;
    for _ in 0..episodes {
        total += run_episode(proto, library, &dummy, cfg, 1.0, rng, None)?.0;
    }
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Return of the greedy policy after this epoch's updates.
    pub greedy_return: f64,
    pub normalized_return: f64,
    /// Normalized by the best greedy return seen so far in this run.
    pub best_normalized_return: f64,
    pub train_return: f64,
    pub epsilon: f64,
    pub q_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyRun {
    pub curve: Vec<EpochRecord>,
    pub best_path: Vec<[f64; 2]>,
    pub library_digest: u64,
}

/// Trains a meta-controller for `cfg.epochs` episodes. With `force_epsilon`
/// set, exploration is pinned to that value (1.0 reproduces the random-skill
/// baseline).
pub fn train_hierarchy<E: Downstream, R: Rng + ?Sized>(
    proto: &E,
    library: &SkillLibrary,
    cfg: &DqnConfig,
    refs: References,
    force_epsilon: Option<f64>,
    rng: &mut R,
) -> Result<HierarchyRun> {
    cfg.validate()?;
    let obs_dim = meta_observation(proto).len();
    let mut dqn = DqnAgent::new(obs_dim, library.num_skills(), &cfg.hidden, rng);
    let mut buffer: Vec<MacroTransition> = Vec::new();
    let mut cursor = 0;
    let mut macro_steps = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut best_path = Vec::new();
    for epoch in 0..cfg.epochs {
        let eps = force_epsilon.unwrap_or_else(|| cfg.epsilon(macro_steps));
        let (train_return, transitions) = run_episode(proto, library, &dqn, cfg, eps, rng, None)?;
        let mut q_loss = None;
        for t in transitions {
            if buffer.len() < cfg.buffer_capacity {
                buffer.push(t);
            } else {
                buffer[cursor] = t;
                cursor = (cursor + 1) % cfg.buffer_capacity;
            }
            macro_steps += 1;
            if macro_steps % cfg.update_every == 0 && buffer.len() >= cfg.batch_size {
                let batch: Vec<&MacroTransition> = (0..cfg.batch_size).map(|_| &buffer[rng.random_range(0..buffer.len())]).collect();
                q_loss = Some(dqn.update(&batch, cfg.gamma, cfg.lr, cfg.tau)?);
            }
        }
        let greedy_eps = force_epsilon.unwrap_or(0.0);
        let mut path = Vec::new();
        let (greedy_return, _) = run_episode(proto, library, &dqn, cfg, greedy_eps, rng, Some(&mut path))?;
        if greedy_return > best {
            best = greedy_return;
            best_path = path;
        }
        curve.push(EpochRecord {
            epoch,
            greedy_return,
            normalized_return: refs.normalize(greedy_return),
            best_normalized_return: 0.0,
            train_return,
            epsilon: eps,
            q_loss,
        });
    }
    for rec in &mut curve {
        rec.best_normalized_return = (rec.greedy_return - refs.random) / (best - refs.random);
    }
    if !library.verify() {
        return Err(Error::Invalid("skill library changed during hierarchical training".into()));
    }
    Ok(HierarchyRun {
        curve,
        best_path,
        library_digest: library.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sac::SacConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn library(k: usize) -> SkillLibrary {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SacConfig {
            hidden: vec![8],
            ..SacConfig::default()
        };
        SkillLibrary::new(SacAgent::new(4, 2, k, &cfg, &mut rng), true, true).unwrap()
    }

    #[test]
    fn renormalization() {
        let o = renormalize_obs(&[5.0, 3.0, 0.2, -0.1]);
        assert_eq!(o, vec![0.0, 0.0, 0.2, -0.1]);
        assert_eq!(renormalize_obs(&o), o);
    }

    #[test]
    fn macro_step_budget_and_repeatability() {
        let lib = library(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Waypoints::new();
        let mut b = Waypoints::new();
        let ta = macro_step(&mut a, &lib, 2, 7, &mut rng, None).unwrap();
        let tb = macro_step(&mut b, &lib, 2, 7, &mut rng, None).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(ta.steps, 7);
        assert!(macro_step(&mut a, &lib, 3, 7, &mut rng, None).is_err());
    }

    #[test]
    fn zero_action_skill_follows_drift() {
        let mut lib = library(2);
        for l in lib.agent.actor.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let mut env = Waypoints::new();
        env.place(EnvState {
            position: [1.0, 1.0],
            velocity: [0.5, 0.0],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        macro_step(&mut env, &lib, 0, 3, &mut rng, None).unwrap();
        let expected_x = 1.0 + 0.45 + 0.405 + 0.3645;
        assert!((env.state().position[0] - expected_x).abs() < 1e-12);
        assert_eq!(env.state().position[1], 1.0);
    }

    #[test]
    fn double_dqn_uses_online_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dqn = DqnAgent::new(1, 2, &[], &mut rng);
        let set = |net: &mut MlpParams, b: [f64; 2]| {
            let l = &mut net.layers_mut()[0];
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.copy_from_slice(&b);
        };
        set(&mut dqn.online, [1.0, 0.0]);
        set(&mut dqn.target, [2.0, 5.0]);
        let y = dqn.double_dqn_target(1.0, &[0.0], false, 0.99).unwrap();
        assert!((y - 2.98).abs() < 1e-12);
        assert_eq!(dqn.double_dqn_target(1.0, &[0.0], true, 0.99).unwrap(), 1.0);
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = DqnConfig {
            epochs: 10,
            max_macro_steps: 10,
            ..DqnConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(15) - 0.5).abs() < 1e-12);
        assert_eq!(cfg.epsilon(30), 0.0);
        assert_eq!(cfg.epsilon(99), 0.0);
    }

    #[test]
    fn solver_normalizes_to_one() {
        let w = Waypoints::new();
        let budget = 30 * 50;
        let s = solver_return(&w, budget).unwrap();
        let refs = References { solver: s, random: 0.0 };
        assert_eq!(refs.normalize(s), 1.0);
        let mut probe = w.clone();
        let mut plan = 0;
        for _ in 0..budget {
            let a = probe.solver_action(&mut plan);
            probe.step(&a).unwrap();
        }
        assert!(probe.solved());
        let m = Maze::medium(2.0);
        let mut env = m.clone();
        let mut plan = 0;
        for _ in 0..budget {
            let a = env.solver_action(&mut plan);
            env.step(&a).unwrap();
        }
        let p = env.state().position;
        let g = m.goal();
        assert!((p[0] - g[0]).hypot(p[1] - g[1]) < 0.5);
    }
}
