//! Independent reference computations: finite-difference gradients and a
//! brute-force soft value iteration on a two-state MDP.

use rand::Rng;

use crate::error::Result;
use crate::nn::{Activation, MlpParams, TANH_EPS};
use crate::sac::{LearningRates, ReplayBuffer, SacAgent, SacConfig, Transition};

/// Scalar probe loss `sum_i c_i * y_i` over a batch.
fn probe_loss(net: &MlpParams, x: &[f64], n: usize, c: &[f64]) -> Result<f64> {
    let tape = net.forward_batch(x, n)?;
    Ok(tape.output().iter().zip(c).map(|(y, c)| y * c).sum())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn param_mut(p: &mut MlpParams, layer: usize, which: usize, k: usize) -> &mut f64 {
    let l = &mut p.layers_mut()[layer];
    if which == 0 {
        &mut l.weight[k]
    } else {
        &mut l.bias[k]
    }
}

/// Largest relative error between backprop and central differences, over
/// every parameter and every input coordinate.
pub fn gradient_check(net: &MlpParams, x: &[f64], n: usize, c: &[f64], eps: f64) -> Result<f64> {
    let tape = net.forward_batch(x, n)?;
    let (grad, dx) = net.backward_batch(&tape, c)?;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for li in 0..net.layers().len() {
        for which in 0..2 {
            let len = if which == 0 { net.layers()[li].weight.len() } else { net.layers()[li].bias.len() };
            for k in 0..len {
                let orig = *param_mut(&mut probe, li, which, k);
                *param_mut(&mut probe, li, which, k) = orig + eps;
                let up = probe_loss(&probe, x, n, c)?;
                *param_mut(&mut probe, li, which, k) = orig - eps;
                let down = probe_loss(&probe, x, n, c)?;
                *param_mut(&mut probe, li, which, k) = orig;
                let numeric = (up - down) / (2.0 * eps);
                let g = &grad.layers[li];
                let analytic = if which == 0 { g.weight[k] } else { g.bias[k] };
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let up = probe_loss(net, &xp, n, c)?;
        xp[i] = x[i] - eps;
        let down = probe_loss(net, &xp, n, c)?;
        xp[i] = x[i];
        worst = worst.max(rel_err(dx[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Gradient check on `trials` random small tanh networks; returns the worst error.
pub fn random_gradient_checks<R: Rng + ?Sized>(trials: usize, eps: f64, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=4)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=5));
        }
        let net = MlpParams::new(&sizes, Activation::Tanh, rng);
        let n = rng.random_range(1..=3);
        let x: Vec<f64> = (0..n * sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..n * sizes[depth]).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(gradient_check(&net, &x, n, &c, eps)?);
    }
    Ok(worst)
}

/// Two states, one continuous action whose sign picks the discrete action.
/// Action 0 keeps the state, action 1 switches it. Reward is +1 for action 0
/// in s0 and for action 1 in s1.
#[derive(Debug, Clone, Copy)]
pub struct TwoStateMdp {
    pub gamma: f64,
    pub alpha: f64,
}

impl TwoStateMdp {
    pub fn discrete(action: f64) -> usize {
        usize::from(action >= 0.0)
    }

    pub fn reward(s: usize, a: usize) -> f64 {
        if s == a {
            1.0
        } else {
            0.0
        }
    }

    pub fn next(s: usize, a: usize) -> usize {
        if a == 0 {
            s
        } else {
            1 - s
        }
    }

    pub fn one_hot(s: usize) -> Vec<f64> {
        let mut v = vec![0.0; 2];
        v[s] = 1.0;
        v
    }

    /// Soft Q over unrestricted policies on the two discrete actions, with the
    /// entropy of a uniform density on each half of [-1, 1].
    pub fn unrestricted_soft_q(&self) -> [[f64; 2]; 2] {
        let mut q = [[0.0; 2]; 2];
        for _ in 0..2000 {
            let v: Vec<f64> = (0..2)
                .map(|s| self.alpha * ((q[s][0] / self.alpha).exp() + (q[s][1] / self.alpha).exp()).ln())
                .collect();
            for (s, row) in q.iter_mut().enumerate() {
                for (a, cell) in row.iter_mut().enumerate() {
                    *cell = Self::reward(s, a) + self.gamma * v[Self::next(s, a)];
                }
            }
        }
        q
    }

    /// Soft Q when the policy is restricted to tanh-squashed Gaussians, found by
    /// brute-force search over a `(mean, log std)` grid.
    pub fn squashed_gaussian_soft_q(&self) -> [[f64; 2]; 2] {
        let class = squashed_gaussian_grid();
        let mut q = [[0.0; 2]; 2];
        for _ in 0..400 {
            let v: Vec<f64> = (0..2)
                .map(|s| {
                    class
                        .iter()
                        .map(|(p0, h)| p0 * q[s][0] + (1.0 - p0) * q[s][1] + self.alpha * h)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            for (s, row) in q.iter_mut().enumerate() {
                for (a, cell) in row.iter_mut().enumerate() {
                    *cell = Self::reward(s, a) + self.gamma * v[Self::next(s, a)];
                }
            }
        }
        q
    }
}

fn normal_cdf(x: f64) -> f64 {
    let n = 4000;
    let lo = -12.0f64;
    if x <= lo {
        return 0.0;
    }
    let h = (x - lo) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut sum = 0.5 * (pdf(lo) + pdf(x));
    for i in 1..n {
        sum += pdf(lo + i as f64 * h);
    }
    sum * h
}

/// `(P(a < 0), differential entropy of a)` for each grid policy.
fn squashed_gaussian_grid() -> Vec<(f64, f64)> {
    let nodes = 161;
    let zs: Vec<f64> = (0..nodes).map(|i| -8.0 + 16.0 * i as f64 / (nodes - 1) as f64).collect();
    let dz = zs[1] - zs[0];
    let w: Vec<f64> = zs.iter().map(|z| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * dz).collect();
    let cdf: Vec<f64> = (0..=2400).map(|i| normal_cdf(-12.0 + i as f64 * 0.01)).collect();
    let phi = |x: f64| {
        let pos = ((x + 12.0) / 0.01).clamp(0.0, 2400.0);
        let i = (pos.floor() as usize).min(2399);
        let f = pos - i as f64;
        cdf[i] * (1.0 - f) + cdf[i + 1] * f
    };
    let mut out = Vec::new();
    for mi in 0..=240 {
        let mu = -3.0 + mi as f64 * 0.025;
        for si in 0..=200 {
            let log_std = -3.0 + si as f64 * 0.02;
            let sd = log_std.exp();
            let p0 = phi(-mu / sd);
            let jac: f64 = zs
                .iter()
                .zip(&w)
                .map(|(z, w)| {
                    let t = (mu + sd * z).tanh();
                    w * (1.0 - t * t + TANH_EPS).ln()
                })
                .sum();
            let h = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_std + jac;
            out.push((p0, h));
        }
    }
    out
}

/// Trains SAC on the two-state MDP from uniformly drawn states and returns the
/// mean critic estimate at actions -0.5 and 0.5 for each state.
pub fn train_tabular_sac<R: Rng + ?Sized>(mdp: &TwoStateMdp, steps: usize, rng: &mut R) -> Result<[[f64; 2]; 2]> {
    let cfg = SacConfig {
        hidden: vec![64, 64],
        gamma: mdp.gamma,
        alpha: mdp.alpha,
        ..SacConfig::default()
    };
    let mut agent = SacAgent::new(2, 1, 0, &cfg, rng);
    let mut buffer = ReplayBuffer::new(steps + 1);
    for step in 0..steps {
        let s = rng.random_range(0..2);
        let obs = TwoStateMdp::one_hot(s);
        let action = if step < 1000 {
            vec![rng.random_range(-1.0..1.0)]
        } else {
            agent.sample_action(&obs, None, rng)?.action
        };
        let a = TwoStateMdp::discrete(action[0]);
        buffer.push(Transition {
            obs,
            action,
            reward: TwoStateMdp::reward(s, a),
            next_obs: TwoStateMdp::one_hot(TwoStateMdp::next(s, a)),
            done: false,
            skill: None,
        });
        if step >= 256 {
            let lr = if step < steps * 3 / 4 { 1e-3 } else { 2e-4 };
            agent.update(&buffer, 256, LearningRates::uniform(lr), rng)?;
        }
    }
    let mut q = [[0.0; 2]; 2];
    for (s, row) in q.iter_mut().enumerate() {
        let input = agent.make_input(&TwoStateMdp::one_hot(s), None)?;
        for (a, cell) in row.iter_mut().enumerate() {
            let (q1, q2) = agent.q_values(&input, &[if a == 0 { -0.5 } else { 0.5 }])?;
            *cell = 0.5 * (q1 + q2);
        }
    }
    Ok(q)
}

pub fn sup_distance(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
