//! The reset game: a skill-conditioned reset policy moves the agent, the
//! forward policy then attempts the task from wherever it was left, and the
//! reset policy is paid for diversity and, at its last step, for the forward
//! policy's failure.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, PointMass, ResetContext, HAZARD_PENALTY};
use crate::error::{ConfigError, Error, Result};
use crate::nn::Activation;
use crate::rng::{stream, Stream};
use crate::sac::{LearningRates, ReplayBuffer, SacAgent, SacConfig, SacLosses, Transition, UpdateOutcome};
use crate::skill::{pseudo_reward, sample_skill, Discriminator, RndPair, SkillPrior, SkillRewardShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lsr,
    DiaynOnly,
    SingleAdversary,
    NoDiversity,
    OracleReset,
    R3lPerturb,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lsr,
        Variant::DiaynOnly,
        Variant::SingleAdversary,
        Variant::NoDiversity,
        Variant::OracleReset,
        Variant::R3lPerturb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lsr => "lsr",
            Variant::DiaynOnly => "diayn_only",
            Variant::SingleAdversary => "single_adversary",
            Variant::NoDiversity => "no_diversity",
            Variant::OracleReset => "oracle_reset",
            Variant::R3lPerturb => "r3l_perturb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the discriminator term enters the reset reward.
    pub fn uses_discriminator(self) -> bool {
        matches!(self, Variant::Lsr | Variant::DiaynOnly | Variant::SingleAdversary)
    }

    pub fn uses_game_reward(self) -> bool {
        !matches!(self, Variant::R3lPerturb | Variant::OracleReset)
    }

    pub fn reset_free(self) -> bool {
        self != Variant::OracleReset
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub t_reset: usize,
    pub t_forward: usize,
    pub gamma: f64,
    pub num_skills: usize,
    pub lr_forward: f64,
    pub lr_reset: f64,
    pub skill_reward_scale: f64,
    pub omit_entropy: bool,
    pub updates_per_phase: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub auto_alpha: bool,
    pub tau: f64,
    pub disc_hidden: Vec<usize>,
    pub disc_steps: usize,
    pub disc_batch: usize,
    pub disc_lr: f64,
    pub disc_xy_only: bool,
    pub disc_final_state_only: bool,
    pub disc_capacity: usize,
    pub rnd: bool,
    pub rnd_scale: f64,
    pub rnd_hidden: Vec<usize>,
    pub rnd_embed: usize,
    pub rnd_lr: f64,
    pub rnd_batch: usize,
    /// Number of recent reset final states used for the windowed dispersion.
    pub dispersion_window: usize,
    /// Feed agents positions and velocities divided by the workspace half-width and speed limit.
    pub normalize_obs: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Lsr,
            lambda: 0.5,
            t_reset: 200,
            t_forward: 200,
            gamma: 0.99,
            num_skills: 10,
            lr_forward: 1e-3,
            lr_reset: 2e-4,
            skill_reward_scale: 2.0,
            omit_entropy: false,
            updates_per_phase: 200,
            batch_size: 256,
            iterations: 7000,
            replay_capacity: 1_000_000,
            hidden: vec![256, 256],
            alpha: 0.1,
            auto_alpha: false,
            tau: 0.005,
            disc_hidden: vec![256, 256],
            disc_steps: 5,
            disc_batch: 256,
            disc_lr: 3e-4,
            disc_xy_only: false,
            disc_final_state_only: false,
            disc_capacity: 100_000,
            rnd: true,
            rnd_scale: 1.0,
            rnd_hidden: vec![64],
            rnd_embed: 64,
            rnd_lr: 1e-3,
            rnd_batch: 64,
            dispersion_window: 20,
            normalize_obs: true,
        }
    }
}

impl GameConfig {
    /// Settings sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            t_reset: 15,
            t_forward: 50,
            num_skills: 4,
            omit_entropy: true,
            updates_per_phase: 32,
            batch_size: 64,
            iterations: 2000,
            replay_capacity: 200_000,
            hidden: vec![64, 64],
            disc_hidden: vec![32],
            disc_steps: 20,
            disc_batch: 64,
            disc_lr: 3e-3,
            disc_xy_only: true,
            disc_capacity: 20_000,
            rnd: false,
            normalize_obs: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, m: &str| Err(ConfigError::invalid(format!("game.{k}"), m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and >= 0");
        }
        if self.t_reset == 0 {
            return bad("t_reset", "must be >= 1");
        }
        if self.t_forward == 0 {
            return bad("t_forward", "must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if self.num_skills == 0 {
            return bad("num_skills", "must be >= 1");
        }
        for (k, v) in [("lr_forward", self.lr_forward), ("lr_reset", self.lr_reset), ("disc_lr", self.disc_lr), ("rnd_lr", self.rnd_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, "must be > 0");
            }
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be > 0");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity", "must hold at least one batch");
        }
        if self.disc_batch == 0 {
            return bad("disc_batch", "must be >= 1");
        }
        if self.rnd_embed == 0 {
            return bad("rnd_embed", "must be >= 1");
        }
        if self.hidden.contains(&0) || self.disc_hidden.contains(&0) || self.rnd_hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1");
        }
        match self.variant {
            Variant::SingleAdversary if self.num_skills != 1 => bad("num_skills", "single_adversary requires exactly 1 skill"),
            Variant::R3lPerturb if self.num_skills != 1 => bad("num_skills", "r3l_perturb requires exactly 1 skill"),
            Variant::NoDiversity if self.num_skills < 2 => bad("num_skills", "no_diversity requires at least 2 skills"),
            Variant::DiaynOnly if self.lambda != 0.0 => bad("lambda", "diayn_only requires lambda = 0"),
            _ => Ok(()),
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            hidden: self.hidden.clone(),
            activation: Activation::Relu,
            gamma: self.gamma,
            tau: self.tau,
            alpha: self.alpha,
            auto_alpha: self.auto_alpha,
            target_entropy: None,
            ..SacConfig::default()
        }
    }

    fn skill_shape(&self) -> SkillRewardShape {
        SkillRewardShape {
            scale: self.skill_reward_scale,
            omit_entropy: self.omit_entropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reset,
    Forward,
}

/// One phase of play. `base_rewards` holds the per-step rewards before the
/// game reward is coupled in; `env_rewards` the raw task rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrajectory {
    pub phase: Phase,
    pub skill: Option<usize>,
    pub transitions: Vec<Transition>,
    pub base_rewards: Vec<f64>,
    pub env_rewards: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
    /// Raw environment observation after each step.
    pub observations: Vec<Vec<f64>>,
    pub terminated: bool,
}

impl PhaseTrajectory {
    fn new(phase: Phase, skill: Option<usize>, start: [f64; 2]) -> Self {
        Self {
            phase,
            skill,
            transitions: Vec::new(),
            base_rewards: Vec::new(),
            env_rewards: Vec::new(),
            positions: vec![start],
            observations: Vec::new(),
            terminated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn reward_sum(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// `sum_t gamma^t r_t` over the stored transition rewards.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted(self.transitions.iter().map(|t| t.reward), gamma)
    }

    /// Discounted task return, ignoring any exploration bonus.
    pub fn task_return(&self, gamma: f64) -> f64 {
        discounted(self.env_rewards.iter().copied(), gamma)
    }

    pub fn final_position(&self) -> [f64; 2] {
        *self.positions.last().expect("trajectory has a start position")
    }
}

pub fn discounted(rewards: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut w = 1.0;
    for r in rewards {
        g += w * r;
        w *= gamma;
    }
    g
}

/// Mean pairwise Euclidean distance.
pub fn reset_state_dispersion(states: &[[f64; 2]]) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::Invalid("dispersion needs at least two states".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            total += (states[i][0] - states[j][0]).hypot(states[i][1] - states[j][1]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Adds `-lambda * g` to the last reset reward and returns the amount added.
/// Empty trajectories are left alone.
pub fn couple_game_reward(reset: &mut PhaseTrajectory, g: f64, lambda: f64) -> f64 {
    match reset.transitions.last_mut() {
        Some(last) => {
            let game = -lambda * g;
            last.reward += game;
            last.done = false;
            game
        }
        None => 0.0,
    }
}

/// Named random streams of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRngs {
    pub env: ChaCha8Rng,
    pub actor: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub skill: ChaCha8Rng,
    pub disc: ChaCha8Rng,
}

impl GameRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            env: stream(seed, Stream::Env),
            actor: stream(seed, Stream::Actor),
            replay: stream(seed, Stream::Replay),
            skill: stream(seed, Stream::Skill),
            disc: stream(seed, Stream::Discriminator),
        }
    }
}

/// Per-iteration log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsRow {
    pub iteration: u64,
    pub variant: String,
    pub skill: usize,
    pub reset_len: usize,
    pub reset_terminated: bool,
    pub reset_return: f64,
    pub reset_reward_sum: f64,
    pub skill_reward_sum: f64,
    pub forward_len: usize,
    pub forward_terminated: bool,
    pub forward_return: f64,
    pub lambda: f64,
    pub game_reward: f64,
    pub reset_final_x: f64,
    pub reset_final_y: f64,
    pub forward_final_distance: f64,
    pub disc_loss: Option<f64>,
    pub discriminator_accuracy: Option<f64>,
    pub dispersion: Option<f64>,
    pub forward_critic_loss: Option<f64>,
    pub reset_critic_loss: Option<f64>,
    pub forward_entropy: Option<f64>,
    pub oracle_resets: u64,
    pub eval_success: Option<f64>,
    pub eval_final_distance: Option<f64>,
    pub eval_disc_accuracy: Option<f64>,
    pub eval_dispersion: Option<f64>,
}

/// Everything that evolves during a run. Serializable for exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameState {
    pub cfg: GameConfig,
    pub env: PointMass,
    pub forward: SacAgent,
    pub reset: SacAgent,
    pub forward_buffer: ReplayBuffer,
    pub reset_buffer: ReplayBuffer,
    pub prior: SkillPrior,
    pub disc: Discriminator,
    disc_data: VecDeque<(Vec<f64>, usize)>,
    pub rnd: Option<RndPair>,
    rnd_data: VecDeque<Vec<f64>>,
    recent_finals: VecDeque<[f64; 2]>,
    pub rngs: GameRngs,
    pub iteration: u64,
}

impl GameState {
    /// Builds all components from `seed`. The agent starts at rest at `start`.
    pub fn new(cfg: GameConfig, seed: u64, start: [f64; 2]) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream(seed, Stream::Init);
        let mut env = PointMass::new(crate::env::EnvState::at(start[0], start[1]));
        if cfg.variant.reset_free() {
            env.lock_reset_free();
        }
        let spec = env.spec().clone();
        let sac = cfg.sac_config();
        let scale = if cfg.normalize_obs {
            vec![1.0 / spec.half_width, 1.0 / spec.half_width, 1.0 / spec.v_max, 1.0 / spec.v_max]
        } else {
            vec![1.0; spec.obs_dim]
        };
        let forward = SacAgent::new(spec.obs_dim, spec.action_dim, 0, &sac, &mut init).with_obs_scale(scale.clone())?;
        let reset = SacAgent::new(spec.obs_dim, spec.action_dim, cfg.num_skills, &sac, &mut init).with_obs_scale(scale)?;
        let prior = SkillPrior::new(cfg.num_skills)?;
        let disc = Discriminator::new(spec.obs_dim, cfg.num_skills, &cfg.disc_hidden, cfg.disc_xy_only, &mut init)?;
        let rnd = if cfg.rnd || cfg.variant == Variant::R3lPerturb {
            Some(RndPair::new(spec.obs_dim, &cfg.rnd_hidden, cfg.rnd_embed, &mut init)?)
        } else {
            None
        };
        Ok(Self {
            forward_buffer: ReplayBuffer::new(cfg.replay_capacity),
            reset_buffer: ReplayBuffer::new(cfg.replay_capacity),
            disc_data: VecDeque::new(),
            rnd_data: VecDeque::new(),
            recent_finals: VecDeque::new(),
            rngs: GameRngs::new(seed),
            iteration: 0,
            cfg,
            env,
            forward,
            reset,
            prior,
            disc,
            rnd,
        })
    }

    pub fn oracle_reset_count(&self) -> u64 {
        self.env.oracle_reset_count()
    }

    fn rnd_bonus(&mut self, obs: &[f64], phase: Phase) -> Result<f64> {
        let on = self.cfg.rnd || (phase == Phase::Reset && self.cfg.variant == Variant::R3lPerturb);
        match &mut self.rnd {
            Some(rnd) if on => Ok(self.cfg.rnd_scale * rnd.bonus(obs)?),
            _ => Ok(0.0),
        }
    }

    /// Runs the reset policy for up to `t_reset` steps with skill `z`.
    pub fn run_reset_phase(&mut self, z: usize) -> Result<PhaseTrajectory> {
        let start = self.env.state().position;
        let mut traj = PhaseTrajectory::new(Phase::Reset, Some(z), start);
        let shape = self.cfg.skill_shape();
        for _ in 0..self.cfg.t_reset {
            let obs = self.env.observe();
            let input = self.reset.make_input(&obs, Some(z))?;
            let sample = self.reset.sample_from_input(&input, &mut self.rngs.actor)?;
            let step = self.env.step(&sample.action)?;
            let mut reward = match self.cfg.variant {
                Variant::R3lPerturb => 0.0,
                Variant::NoDiversity => 0.0,
                _ => pseudo_reward(&self.disc, &self.prior, sample.log_prob, &step.obs, z, shape)?,
            };
            reward += self.rnd_bonus(&step.obs, Phase::Reset)?;
            if step.terminated {
                reward += HAZARD_PENALTY;
            }
            traj.transitions.push(Transition {
                obs: input,
                action: sample.action,
                reward,
                next_obs: self.reset.make_input(&step.obs, Some(z))?,
                done: step.terminated,
                skill: Some(z),
            });
            traj.base_rewards.push(reward);
            traj.env_rewards.push(step.reward);
            traj.positions.push([step.obs[0], step.obs[1]]);
            traj.observations.push(step.obs.clone());
            if step.terminated {
                traj.terminated = true;
                self.env.recover();
                break;
            }
        }
        Ok(traj)
    }

    /// Runs the forward policy for up to `t_forward` steps from the current state.
    pub fn run_forward_phase(&mut self) -> Result<PhaseTrajectory> {
        self.env.begin_segment();
        let start = self.env.state().position;
        let mut traj = PhaseTrajectory::new(Phase::Forward, None, start);
        for _ in 0..self.cfg.t_forward {
            let obs = self.forward.make_input(&self.env.observe(), None)?;
            let sample = self.forward.sample_from_input(&obs, &mut self.rngs.actor)?;
            let step = self.env.step(&sample.action)?;
            let reward = step.reward + self.rnd_bonus(&step.obs, Phase::Forward)?;
            traj.transitions.push(Transition {
                obs,
                action: sample.action,
                reward,
                next_obs: self.forward.make_input(&step.obs, None)?,
                done: step.terminated,
                skill: None,
            });
            traj.base_rewards.push(reward);
            traj.env_rewards.push(step.reward);
            traj.positions.push([step.obs[0], step.obs[1]]);
            traj.observations.push(step.obs.clone());
            if step.terminated {
                traj.terminated = true;
                self.env.recover();
                break;
            }
        }
        Ok(traj)
    }

    fn push_bounded<T>(q: &mut VecDeque<T>, item: T, cap: usize) {
        if q.len() == cap {
            q.pop_front();
        }
        q.push_back(item);
    }

    fn sample_disc_batch(&mut self) -> Vec<(Vec<f64>, usize)> {
        use rand::Rng;
        let n = self.disc_data.len();
        (0..self.cfg.disc_batch)
            .map(|_| self.disc_data[self.rngs.disc.random_range(0..n)].clone())
            .collect()
    }

    fn sac_updates(agent: &mut SacAgent, buffer: &ReplayBuffer, cfg: &GameConfig, lr: f64, rng: &mut ChaCha8Rng) -> Result<Option<SacLosses>> {
        let mut last = None;
        for _ in 0..cfg.updates_per_phase {
            if let UpdateOutcome::Updated(l) = agent.update(buffer, cfg.batch_size, LearningRates::uniform(lr), rng)? {
                last = Some(l);
            }
        }
        Ok(last)
    }

    /// One full round of the game. Buffers are only touched once both phases
    /// have completed without error.
    pub fn game_iteration(&mut self) -> Result<MetricsRow> {
        let cfg = self.cfg.clone();
        let z = sample_skill(&self.prior, &mut self.rngs.skill);
        let mut reset_traj = if cfg.variant == Variant::OracleReset {
            let s = self.env.oracle_reset(ResetContext::Baseline, &mut self.rngs.env)?;
            PhaseTrajectory::new(Phase::Reset, Some(z), s.position)
        } else {
            self.run_reset_phase(z)?
        };
        let skill_reward_sum: f64 = reset_traj.base_rewards.iter().sum();
        let (forward_traj, g) = if reset_traj.terminated {
            (None, 0.0)
        } else {
            let f = self.run_forward_phase()?;
            let g = f.task_return(cfg.gamma);
            (Some(f), g)
        };
        let game_reward = if forward_traj.is_some() && cfg.variant.uses_game_reward() {
            couple_game_reward(&mut reset_traj, g, cfg.lambda)
        } else {
            0.0
        };

        let final_pos = reset_traj.final_position();
        if cfg.variant != Variant::OracleReset {
            Self::push_bounded(&mut self.recent_finals, final_pos, cfg.dispersion_window.max(2));
        }
        for t in &reset_traj.transitions {
            self.reset_buffer.push(t.clone());
        }
        if let Some(f) = &forward_traj {
            for t in &f.transitions {
                self.forward_buffer.push(t.clone());
            }
        }
        if cfg.variant.uses_discriminator() {
            let states: Vec<Vec<f64>> = if cfg.disc_final_state_only {
                reset_traj.observations.last().cloned().into_iter().collect()
            } else {
                reset_traj.observations.clone()
            };
            for s in states {
                Self::push_bounded(&mut self.disc_data, (s, z), cfg.disc_capacity);
            }
        }
        if self.rnd.is_some() {
            let fresh = reset_traj
                .observations
                .iter()
                .chain(forward_traj.iter().flat_map(|f| f.observations.iter()))
                .cloned();
            for o in fresh {
                Self::push_bounded(&mut self.rnd_data, o, cfg.rnd_batch.max(1) * 4);
            }
        }

        let reset_losses = if cfg.variant == Variant::OracleReset {
            None
        } else {
            Self::sac_updates(&mut self.reset, &self.reset_buffer, &cfg, cfg.lr_reset, &mut self.rngs.replay)?
        };
        let forward_losses = Self::sac_updates(&mut self.forward, &self.forward_buffer, &cfg, cfg.lr_forward, &mut self.rngs.replay)?;

        let mut disc_loss = None;
        let mut disc_acc = None;
        if cfg.variant.uses_discriminator() && !self.disc_data.is_empty() {
            for _ in 0..cfg.disc_steps {
                let batch = self.sample_disc_batch();
                disc_loss = Some(self.disc.update(&batch, cfg.disc_lr)?);
            }
            let recent: Vec<(Vec<f64>, usize)> = self.disc_data.iter().rev().take(cfg.disc_batch).cloned().collect();
            disc_acc = Some(self.disc.accuracy(&recent)?);
        }
        if let Some(rnd) = &mut self.rnd {
            if !self.rnd_data.is_empty() {
                let batch: Vec<Vec<f64>> = self.rnd_data.iter().rev().take(cfg.rnd_batch).cloned().collect();
                rnd.update(&batch, cfg.rnd_lr)?;
            }
        }

        self.iteration += 1;
        let dispersion = if self.recent_finals.len() >= 2 {
            Some(reset_state_dispersion(self.recent_finals.make_contiguous())?)
        } else {
            None
        };
        let (forward_len, forward_terminated, forward_final_distance) = match &forward_traj {
            Some(f) => {
                let p = f.final_position();
                (f.len(), f.terminated, p[0].hypot(p[1]))
            }
            None => (0, false, final_pos[0].hypot(final_pos[1])),
        };
        Ok(MetricsRow {
            iteration: self.iteration,
            variant: cfg.variant.name().to_string(),
            skill: z,
            reset_len: reset_traj.len(),
            reset_terminated: reset_traj.terminated,
            reset_return: reset_traj.discounted_return(cfg.gamma),
            reset_reward_sum: reset_traj.reward_sum(),
            skill_reward_sum,
            forward_len,
            forward_terminated,
            forward_return: g,
            lambda: if cfg.variant.uses_game_reward() { cfg.lambda } else { 0.0 },
            game_reward,
            reset_final_x: final_pos[0],
            reset_final_y: final_pos[1],
            forward_final_distance,
            disc_loss,
            discriminator_accuracy: disc_acc,
            dispersion,
            forward_critic_loss: forward_losses.map(|l| 0.5 * (l.critic1 + l.critic2)),
            reset_critic_loss: reset_losses.map(|l| 0.5 * (l.critic1 + l.critic2)),
            forward_entropy: forward_losses.map(|l| l.entropy),
            oracle_resets: self.env.oracle_reset_count(),
            ..MetricsRow::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant, k: usize) -> GameConfig {
        GameConfig {
            variant,
            num_skills: k,
            lambda: if variant == Variant::DiaynOnly { 0.0 } else { 0.5 },
            t_reset: 5,
            t_forward: 5,
            updates_per_phase: 2,
            batch_size: 8,
            hidden: vec![8],
            disc_hidden: vec![8],
            disc_batch: 8,
            rnd_hidden: vec![8],
            rnd_embed: 4,
            replay_capacity: 1000,
            ..GameConfig::default()
        }
    }

    #[test]
    fn discounted_closed_form() {
        assert_eq!(discounted([1.0, 1.0, 1.0], 0.5), 1.75);
    }

    #[test]
    fn coupling_adds_to_last_step() {
        let mut t = PhaseTrajectory::new(Phase::Reset, Some(0), [0.0, 0.0]);
        for r in [0.5, 0.25] {
            t.transitions.push(Transition {
                obs: vec![0.0],
                action: vec![0.0],
                reward: r,
                next_obs: vec![0.0],
                done: false,
                skill: Some(0),
            });
        }
        assert_eq!(couple_game_reward(&mut t, 2.0, 0.5), -1.0);
        assert_eq!(t.transitions[1].reward, -0.75);
        assert_eq!(t.transitions[0].reward, 0.5);
        let mut unchanged = t.clone();
        assert_eq!(couple_game_reward(&mut unchanged, 2.0, 0.0), 0.0);
        assert_eq!(unchanged.transitions[1].reward, -0.75);
        let mut empty = PhaseTrajectory::new(Phase::Reset, Some(0), [0.0, 0.0]);
        assert_eq!(couple_game_reward(&mut empty, 2.0, 0.5), 0.0);
    }

    #[test]
    fn dispersion_cases() {
        assert_eq!(reset_state_dispersion(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(reset_state_dispersion(&[[0.0, 0.0], [0.0, 4.0]]).unwrap(), 4.0);
        assert!(reset_state_dispersion(&[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn variant_constraints() {
        assert!(tiny(Variant::SingleAdversary, 4).validate().is_err());
        assert!(tiny(Variant::SingleAdversary, 1).validate().is_ok());
        assert!(tiny(Variant::NoDiversity, 1).validate().is_err());
        assert!(tiny(Variant::R3lPerturb, 2).validate().is_err());
        let mut d = tiny(Variant::DiaynOnly, 4);
        d.lambda = 0.5;
        assert!(d.validate().is_err());
        let mut neg = tiny(Variant::Lsr, 4);
        neg.lambda = -1.0;
        assert!(neg.validate().is_err());
        assert!(GameConfig::default().lr_reset < GameConfig::default().lr_forward);
    }

    #[test]
    fn hazard_in_reset_phase_skips_forward() {
        let mut g = GameState::new(tiny(Variant::Lsr, 4), 1, [8.0, 8.9]).unwrap();
        g.env.place(crate::env::EnvState {
            position: [8.0, 8.6],
            velocity: [0.0, 0.5],
        });
        let row = g.game_iteration().unwrap();
        assert!(row.reset_terminated);
        assert_eq!(row.forward_len, 0);
        assert_eq!(row.game_reward, 0.0);
        assert_eq!(g.env.state().velocity, [0.0, 0.0]);
    }

    #[test]
    fn phases_chain_and_rewards_conserve() {
        let mut g = GameState::new(tiny(Variant::Lsr, 4), 2, [3.0, 0.0]).unwrap();
        for _ in 0..5 {
            let before = g.env.state();
            let z = sample_skill(&g.prior, &mut g.rngs.skill);
            let r = g.run_reset_phase(z).unwrap();
            assert_eq!(r.positions[0], before.position);
            assert_eq!(r.transitions[0].obs, g.reset.make_input(&before.observation(), Some(z)).unwrap());
            let mid = g.env.state();
            assert_eq!(r.observations.last().unwrap(), &mid.observation());
            let f = g.run_forward_phase().unwrap();
            assert_eq!(f.transitions[0].obs, g.forward.make_input(&mid.observation(), None).unwrap());
        }
        for _ in 0..10 {
            let row = g.game_iteration().unwrap();
            let lhs = row.reset_reward_sum;
            let rhs = row.skill_reward_sum - row.lambda * row.forward_return;
            assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
            assert_eq!(row.oracle_resets, 0);
        }
    }

    #[test]
    fn oracle_variant_counts_resets() {
        let mut g = GameState::new(tiny(Variant::OracleReset, 4), 3, [3.0, 0.0]).unwrap();
        for _ in 0..3 {
            g.game_iteration().unwrap();
        }
        assert_eq!(g.oracle_reset_count(), 3);
        let mut lsr = GameState::new(tiny(Variant::Lsr, 4), 3, [3.0, 0.0]).unwrap();
        assert!(lsr.env.oracle_reset(ResetContext::Baseline, &mut lsr.rngs.env).is_err());
    }

    #[test]
    fn zero_lambda_matches_diayn() {
        let mut a = tiny(Variant::Lsr, 3);
        a.lambda = 0.0;
        let b = tiny(Variant::DiaynOnly, 3);
        let mut ga = GameState::new(a, 4, [3.0, 0.0]).unwrap();
        let mut gb = GameState::new(b, 4, [3.0, 0.0]).unwrap();
        for _ in 0..6 {
            ga.game_iteration().unwrap();
            gb.game_iteration().unwrap();
        }
        assert_eq!(ga.reset.actor, gb.reset.actor);
        assert_eq!(ga.forward.critic1, gb.forward.critic1);
        assert_eq!(ga.disc.net(), gb.disc.net());
    }
}
