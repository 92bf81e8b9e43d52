//! Soft actor-critic with a tanh-squashed Gaussian actor and twin critics.
//!
//! An agent may be conditioned on a categorical skill, in which case its
//! input is the observation followed by a one-hot skill code. Transitions in
//! the replay buffer always store the full agent input.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, NnError, Result};
use crate::nn::{
    adam_step, gaussian_tanh_logprob, polyak_update, Activation, AdamState, MlpParams, LOG_STD_MAX, LOG_STD_MIN,
    TANH_EPS,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LSRA";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub actor: f64,
    pub critic: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self { actor: lr, critic: lr }
    }
}

/// Leader/follower learning rates for the reset game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTimescale {
    pub forward: LearningRates,
    pub reset: LearningRates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimescaleWarning {
    EqualRates,
    LeaderFaster,
}

/// Configures the follower (forward) and leader (reset) learning rates. The
/// leader is expected to learn more slowly; any other ordering is allowed but
/// reported.
pub fn set_two_timescale(forward_lr: f64, reset_lr: f64) -> (TwoTimescale, Option<TimescaleWarning>) {
    let warning = if reset_lr == forward_lr {
        Some(TimescaleWarning::EqualRates)
    } else if reset_lr > forward_lr {
        Some(TimescaleWarning::LeaderFaster)
    } else {
        None
    };
    if let Some(w) = warning {
        warn!("two-timescale ordering violated ({w:?}): forward lr {forward_lr}, reset lr {reset_lr}");
    }
    (
        TwoTimescale {
            forward: LearningRates::uniform(forward_lr),
            reset: LearningRates::uniform(reset_lr),
        },
        warning,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub auto_alpha: bool,
    /// Defaults to `-action_dim` when tuning is on.
    pub target_entropy: Option<f64>,
    pub policy_output_scale: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.1,
            auto_alpha: false,
            target_entropy: None,
            policy_output_scale: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub skill: Option<usize>,
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::new(),
            capacity,
            cursor: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform draw with replacement over the filled region.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// One draw from the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub alpha: f64,
    /// Mean `-log pi` over the batch, a sample estimate of the policy entropy.
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Updated(SacLosses),
    Skipped { have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScalarAdam {
    m: f64,
    v: f64,
    t: u64,
}

impl ScalarAdam {
    fn step(&mut self, value: &mut f64, grad: f64, lr: f64) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * grad;
        self.v = b2 * self.v + (1.0 - b2) * grad * grad;
        let m_hat = self.m / (1.0 - b1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - b2.powi(self.t as i32));
        *value -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacAgent {
    obs_dim: usize,
    action_dim: usize,
    skill_dim: usize,
    /// Per-coordinate factor applied to observations before they reach the nets.
    obs_scale: Vec<f64>,
    pub actor: MlpParams,
    pub critic1: MlpParams,
    pub critic2: MlpParams,
    pub target1: MlpParams,
    pub target2: MlpParams,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    log_alpha: f64,
    alpha_opt: ScalarAdam,
    gamma: f64,
    tau: f64,
    auto_alpha: bool,
    target_entropy: f64,
}

/// Batched policy evaluation kept around for the actor gradient.
struct PolicyBatch {
    log_stds: Vec<f64>,
    clamped: Vec<bool>,
    noise: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_dim: usize, skill_dim: usize, cfg: &SacConfig, rng: &mut R) -> Self {
        let input = obs_dim + skill_dim;
        let sizes = |i: usize, o: usize| {
            let mut s = vec![i];
            s.extend(&cfg.hidden);
            s.push(o);
            s
        };
        let mut actor = MlpParams::new(&sizes(input, 2 * action_dim), cfg.activation, rng);
        actor.scale_output(cfg.policy_output_scale);
        let critic1 = MlpParams::new(&sizes(input + action_dim, 1), cfg.activation, rng);
        let critic2 = MlpParams::new(&sizes(input + action_dim, 1), cfg.activation, rng);
        Self {
            obs_dim,
            action_dim,
            skill_dim,
            obs_scale: vec![1.0; obs_dim],
            actor_opt: AdamState::new(&actor),
            critic1_opt: AdamState::new(&critic1),
            critic2_opt: AdamState::new(&critic2),
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_alpha: cfg.alpha.ln(),
            alpha_opt: ScalarAdam { m: 0.0, v: 0.0, t: 0 },
            gamma: cfg.gamma,
            tau: cfg.tau,
            auto_alpha: cfg.auto_alpha,
            target_entropy: cfg.target_entropy.unwrap_or(-(action_dim as f64)),
        }
    }

    pub fn with_obs_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.obs_dim || scale.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(Error::Invalid("observation scale must be finite, nonzero and match obs_dim".into()));
        }
        self.obs_scale = scale;
        Ok(self)
    }

    pub fn obs_scale(&self) -> &[f64] {
        &self.obs_scale
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn skill_dim(&self) -> usize {
        self.skill_dim
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.skill_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Observation with the one-hot skill appended.
    pub fn make_input(&self, obs: &[f64], skill: Option<usize>) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(NnError::Dim {
                layer: 0,
                expected: self.obs_dim,
                got: obs.len(),
            }
            .into());
        }
        let mut input: Vec<f64> = obs.iter().zip(&self.obs_scale).map(|(o, s)| o * s).collect();
        match (skill, self.skill_dim) {
            (None, 0) => {}
            (Some(z), k) if k > 0 => {
                if z >= k {
                    return Err(Error::SkillOutOfRange {
                        skill: z,
                        num_skills: k,
                    });
                }
                input.extend((0..k).map(|i| if i == z { 1.0 } else { 0.0 }));
            }
            (Some(_), _) => return Err(Error::Invalid("skill given to an unconditioned agent".into())),
            (None, _) => return Err(Error::Invalid("skill-conditioned agent needs a skill".into())),
        }
        Ok(input)
    }

    fn split_head(&self, out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let a = self.action_dim;
        let mean = out[..a].to_vec();
        let raw = &out[a..2 * a];
        let clamped = raw.iter().map(|r| !(LOG_STD_MIN..=LOG_STD_MAX).contains(r)).collect();
        let log_std = raw.iter().map(|r| r.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        (mean, log_std, clamped)
    }

    /// Mean and clamped log standard deviation of the pre-squash Gaussian.
    pub fn policy_params(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.actor.forward(input)?;
        let (mean, log_std, _) = self.split_head(&out);
        Ok((mean, log_std))
    }

    pub fn sample_from_input<R: Rng + ?Sized>(&self, input: &[f64], rng: &mut R) -> Result<PolicySample> {
        let (mean, log_std) = self.policy_params(input)?;
        let pre_tanh: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_prob = gaussian_tanh_logprob(&mean, &log_std, &pre_tanh);
        Ok(PolicySample {
            action: pre_tanh.iter().map(|u| u.tanh()).collect(),
            pre_tanh,
            log_prob,
        })
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], skill: Option<usize>, rng: &mut R) -> Result<PolicySample> {
        let input = self.make_input(obs, skill)?;
        self.sample_from_input(&input, rng)
    }

    /// Evaluation-mode action `tanh(mean)`.
    pub fn act_deterministic(&self, obs: &[f64], skill: Option<usize>) -> Result<Vec<f64>> {
        let input = self.make_input(obs, skill)?;
        let (mean, _) = self.policy_params(&input)?;
        Ok(mean.iter().map(|m| m.tanh()).collect())
    }

    fn critic_input(inputs: &[f64], actions: &[f64], n: usize, in_dim: usize, a_dim: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(n * (in_dim + a_dim));
        for i in 0..n {
            x.extend_from_slice(&inputs[i * in_dim..(i + 1) * in_dim]);
            x.extend_from_slice(&actions[i * a_dim..(i + 1) * a_dim]);
        }
        x
    }

    /// Online critic values `(Q1, Q2)` for one input/action pair.
    pub fn q_values(&self, input: &[f64], action: &[f64]) -> Result<(f64, f64)> {
        let mut x = input.to_vec();
        x.extend_from_slice(action);
        Ok((self.critic1.forward(&x)?[0], self.critic2.forward(&x)?[0]))
    }

    fn sample_policy_batch<R: Rng + ?Sized>(&self, inputs: &[f64], n: usize, rng: &mut R) -> Result<PolicyBatch> {
        let tape = self.actor.forward_batch(inputs, n)?;
        Ok(self.policy_from_output(tape.output(), rng))
    }

    fn policy_from_output<R: Rng + ?Sized>(&self, out: &[f64], rng: &mut R) -> PolicyBatch {
        let a = self.action_dim;
        let n = out.len() / (2 * a);
        let mut pb = PolicyBatch {
            log_stds: Vec::with_capacity(n * a),
            clamped: Vec::with_capacity(n * a),
            noise: Vec::with_capacity(n * a),
            actions: Vec::with_capacity(n * a),
            log_probs: Vec::with_capacity(n),
        };
        for row in out.chunks_exact(2 * a) {
            let (mean, log_std, clamped) = self.split_head(row);
            let noise: Vec<f64> = (0..a).map(|_| rng.sample(StandardNormal)).collect();
            let u: Vec<f64> = mean
                .iter()
                .zip(&log_std)
                .zip(&noise)
                .map(|((m, ls), e)| m + ls.exp() * e)
                .collect();
            pb.log_probs.push(gaussian_tanh_logprob(&mean, &log_std, &u));
            pb.actions.extend(u.iter().map(|v| v.tanh()));
            pb.log_stds.extend(log_std);
            pb.clamped.extend(clamped);
            pb.noise.extend(noise);
        }
        pb
    }

    fn stack(batch: &[&Transition], f: impl Fn(&Transition) -> &[f64]) -> Vec<f64> {
        batch.iter().flat_map(|t| f(t).iter().copied()).collect()
    }

    /// Soft Bellman targets `r + gamma (1 - done) (min Q_target(s', a') - alpha log pi(a'|s'))`
    /// with `a'` freshly sampled. Terminal transitions yield `r` exactly.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &[&Transition], rng: &mut R) -> Result<Vec<f64>> {
        let n = batch.len();
        let in_dim = self.input_dim();
        for t in batch {
            if t.obs.len() != in_dim || t.next_obs.len() != in_dim || t.action.len() != self.action_dim {
                return Err(NnError::Shape("transition does not match agent dimensions".into()).into());
            }
        }
        let next = Self::stack(batch, |t| &t.next_obs);
        let pb = self.sample_policy_batch(&next, n, rng)?;
        let x = Self::critic_input(&next, &pb.actions, n, in_dim, self.action_dim);
        let q1 = self.target1.forward_batch(&x, n)?;
        let q2 = self.target2.forward_batch(&x, n)?;
        let alpha = self.alpha();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.done {
                    t.reward
                } else {
                    let v = q1.output()[i].min(q2.output()[i]) - alpha * pb.log_probs[i];
                    t.reward + self.gamma * v
                }
            })
            .collect())
    }

    /// One SAC step from the buffer, or an explicit skip when it holds fewer
    /// than `batch_size` transitions.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        batch_size: usize,
        lrs: LearningRates,
        rng: &mut R,
    ) -> Result<UpdateOutcome> {
        if buffer.len() < batch_size || batch_size == 0 {
            return Ok(UpdateOutcome::Skipped {
                have: buffer.len(),
                need: batch_size.max(1),
            });
        }
        let batch = buffer.sample(batch_size, rng);
        self.update_on_batch(&batch, lrs, rng).map(UpdateOutcome::Updated)
    }

    /// Critic step, actor step, optional temperature step, then Polyak averaging.
    pub fn update_on_batch<R: Rng + ?Sized>(&mut self, batch: &[&Transition], lrs: LearningRates, rng: &mut R) -> Result<SacLosses> {
        let n = batch.len();
        let in_dim = self.input_dim();
        let a_dim = self.action_dim;
        let scale = 1.0 / n as f64;
        let targets = self.critic_targets(batch, rng)?;

        let obs = Self::stack(batch, |t| &t.obs);
        let acts = Self::stack(batch, |t| &t.action);
        let x = Self::critic_input(&obs, &acts, n, in_dim, a_dim);
        let mut critic_losses = [0.0; 2];
        for (k, (critic, opt)) in [
            (&mut self.critic1, &mut self.critic1_opt),
            (&mut self.critic2, &mut self.critic2_opt),
        ]
        .into_iter()
        .enumerate()
        {
            let tape = critic.forward_batch(&x, n)?;
            let mut upstream = vec![0.0; n];
            let mut loss = 0.0;
            for ((u, q), y) in upstream.iter_mut().zip(tape.output()).zip(&targets) {
                let err = q - y;
                loss += err * err * scale;
                *u = 2.0 * err * scale;
            }
            let (grad, _) = critic.backward_batch(&tape, &upstream)?;
            adam_step(critic, opt, &grad, lrs.critic)?;
            critic_losses[k] = loss;
        }

        let alpha = self.alpha();
        let actor_tape = self.actor.forward_batch(&obs, n)?;
        let pb = self.policy_from_output(actor_tape.output(), rng);
        let xa = Self::critic_input(&obs, &pb.actions, n, in_dim, a_dim);
        let t1 = self.critic1.forward_batch(&xa, n)?;
        let t2 = self.critic2.forward_batch(&xa, n)?;
        let mut up1 = vec![0.0; n];
        let mut up2 = vec![0.0; n];
        let mut actor_loss = 0.0;
        for i in 0..n {
            let (q1, q2) = (t1.output()[i], t2.output()[i]);
            if q1 <= q2 {
                up1[i] = 1.0;
            } else {
                up2[i] = 1.0;
            }
            actor_loss += (alpha * pb.log_probs[i] - q1.min(q2)) * scale;
        }
        let (_, dx1) = self.critic1.backward_batch(&t1, &up1)?;
        let (_, dx2) = self.critic2.backward_batch(&t2, &up2)?;
        let width = in_dim + a_dim;
        let mut actor_up = vec![0.0; n * 2 * a_dim];
        for i in 0..n {
            for j in 0..a_dim {
                let k = i * a_dim + j;
                let dq_da = dx1[i * width + in_dim + j] + dx2[i * width + in_dim + j];
                let t = pb.actions[k];
                let sech2 = 1.0 - t * t;
                let dcorr_du = 2.0 * t * sech2 / (sech2 + TANH_EPS);
                let dl_du = alpha * dcorr_du - dq_da * sech2;
                actor_up[i * 2 * a_dim + j] = dl_du * scale;
                if !pb.clamped[k] {
                    let sigma = pb.log_stds[k].exp();
                    actor_up[i * 2 * a_dim + a_dim + j] = (-alpha + dl_du * sigma * pb.noise[k]) * scale;
                }
            }
        }
        let (actor_grad, _) = self.actor.backward_batch(&actor_tape, &actor_up)?;
        adam_step(&mut self.actor, &mut self.actor_opt, &actor_grad, lrs.actor)?;

        let mean_logp = pb.log_probs.iter().sum::<f64>() * scale;
        if self.auto_alpha {
            let grad = -(mean_logp + self.target_entropy);
            self.alpha_opt.step(&mut self.log_alpha, grad, lrs.actor);
        }
        polyak_update(&mut self.target1, &self.critic1, self.tau)?;
        polyak_update(&mut self.target2, &self.critic2, self.tau)?;
        Ok(SacLosses {
            critic1: critic_losses[0],
            critic2: critic_losses[1],
            actor: actor_loss,
            alpha,
            entropy: -mean_logp,
        })
    }

    /// Monte-Carlo entropy estimate `-E[log pi]` averaged over `inputs` (row-major).
    pub fn entropy_estimate<R: Rng + ?Sized>(&self, inputs: &[f64], samples: usize, rng: &mut R) -> Result<f64> {
        let n = inputs.len() / self.input_dim();
        let mut total = 0.0;
        for _ in 0..samples {
            let pb = self.sample_policy_batch(inputs, n, rng)?;
            total -= pb.log_probs.iter().sum::<f64>();
        }
        Ok(total / (n * samples) as f64)
    }

    /// Writes a header (dims, alpha, gamma, observation scale) followed by actor, critics and
    /// target critics in the `LSRN` network format.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.obs_dim as u32)?;
        w.write_u32::<LittleEndian>(self.action_dim as u32)?;
        w.write_u32::<LittleEndian>(self.skill_dim as u32)?;
        w.write_f64::<LittleEndian>(self.alpha())?;
        w.write_f64::<LittleEndian>(self.gamma)?;
        for s in &self.obs_scale {
            w.write_f64::<LittleEndian>(*s)?;
        }
        for net in [&self.actor, &self.critic1, &self.critic2, &self.target1, &self.target2] {
            net.write_to(w)?;
        }
        Ok(())
    }

    /// Restores an agent written by [`SacAgent::write_checkpoint`]. Optimizer
    /// moments start fresh; `tau` and the temperature mode come from `cfg`.
    pub fn read_checkpoint<R: Read>(r: &mut R, cfg: &SacConfig) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Format("not an agent checkpoint".into()).into());
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Format(format!("unsupported agent checkpoint version {version}")).into());
        }
        let obs_dim = r.read_u32::<LittleEndian>()? as usize;
        let action_dim = r.read_u32::<LittleEndian>()? as usize;
        let skill_dim = r.read_u32::<LittleEndian>()? as usize;
        let alpha = r.read_f64::<LittleEndian>()?;
        let gamma = r.read_f64::<LittleEndian>()?;
        let obs_scale = (0..obs_dim).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        let actor = MlpParams::read_from(r)?;
        let critic1 = MlpParams::read_from(r)?;
        let critic2 = MlpParams::read_from(r)?;
        let target1 = MlpParams::read_from(r)?;
        let target2 = MlpParams::read_from(r)?;
        if actor.input_dim() != obs_dim + skill_dim || actor.output_dim() != 2 * action_dim {
            return Err(NnError::Shape("checkpoint actor does not match header".into()).into());
        }
        Ok(Self {
            obs_dim,
            action_dim,
            skill_dim,
            obs_scale,
            actor_opt: AdamState::new(&actor),
            critic1_opt: AdamState::new(&critic1),
            critic2_opt: AdamState::new(&critic2),
            actor,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha: alpha.ln(),
            alpha_opt: ScalarAdam { m: 0.0, v: 0.0, t: 0 },
            gamma,
            tau: cfg.tau,
            auto_alpha: cfg.auto_alpha,
            target_entropy: cfg.target_entropy.unwrap_or(-(action_dim as f64)),
        })
    }
}
