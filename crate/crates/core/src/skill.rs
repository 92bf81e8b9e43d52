//! Skill prior, skill discriminator, the diversity pseudo-reward and the RND
//! exploration bonus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, NnError, Result};
use crate::nn::{adam_step, log_softmax, Activation, AdamState, MlpParams};

/// Uniform categorical prior over `k` skills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillPrior {
    k: usize,
}

impl SkillPrior {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("skill prior needs at least one skill".into()));
        }
        Ok(Self { k })
    }

    pub fn num_skills(&self) -> usize {
        self.k
    }

    pub fn prob(&self, _z: usize) -> f64 {
        1.0 / self.k as f64
    }

    pub fn log_prob(&self, _z: usize) -> f64 {
        -(self.k as f64).ln()
    }
}

pub fn sample_skill<R: Rng + ?Sized>(prior: &SkillPrior, rng: &mut R) -> usize {
    if prior.k == 1 {
        0
    } else {
        rng.random_range(0..prior.k)
    }
}

/// Classifier `q(z | s)` over skills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    net: MlpParams,
    opt: AdamState,
    k: usize,
    obs_dim: usize,
    xy_only: bool,
}

impl Discriminator {
    /// With `xy_only` the classifier sees only the first two observation
    /// coordinates (the position).
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, k: usize, hidden: &[usize], xy_only: bool, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("discriminator needs at least one skill".into()));
        }
        if xy_only && obs_dim < 2 {
            return Err(Error::Invalid("xy-only discriminator needs a 2-d position".into()));
        }
        let input = if xy_only { 2 } else { obs_dim };
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(k);
        let net = MlpParams::new(&sizes, Activation::Relu, rng);
        Ok(Self {
            opt: AdamState::new(&net),
            net,
            k,
            obs_dim,
            xy_only,
        })
    }

    pub fn num_skills(&self) -> usize {
        self.k
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    fn features<'a>(&self, obs: &'a [f64]) -> Result<&'a [f64]> {
        if obs.len() != self.obs_dim {
            return Err(NnError::Dim {
                layer: 0,
                expected: self.obs_dim,
                got: obs.len(),
            }
            .into());
        }
        Ok(if self.xy_only { &obs[..2] } else { obs })
    }

    pub fn logits(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(self.features(obs)?)?)
    }

    pub fn log_probs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(obs)?)?)
    }

    pub fn predict(&self, obs: &[f64]) -> Result<usize> {
        let logits = self.logits(obs)?;
        Ok(argmax(&logits))
    }

    /// Fraction of `(obs, z)` pairs classified correctly.
    pub fn accuracy(&self, batch: &[(Vec<f64>, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (obs, z) in batch {
            if self.predict(obs)? == *z {
                hits += 1;
            }
        }
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Row-normalized `k x k` confusion matrix, `m[true][predicted]`.
    pub fn confusion(&self, batch: &[(Vec<f64>, usize)]) -> Result<Vec<Vec<f64>>> {
        let mut m = vec![vec![0.0; self.k]; self.k];
        for (obs, z) in batch {
            self.check_label(*z)?;
            m[*z][self.predict(obs)?] += 1.0;
        }
        for row in &mut m {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        Ok(m)
    }

    fn check_label(&self, z: usize) -> Result<()> {
        if z >= self.k {
            return Err(Error::SkillOutOfRange {
                skill: z,
                num_skills: self.k,
            });
        }
        Ok(())
    }

    /// Mean cross-entropy of the batch, before the Adam step taken on it.
    pub fn update(&mut self, batch: &[(Vec<f64>, usize)], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty discriminator batch".into()));
        }
        let mut x = Vec::with_capacity(batch.len() * self.net.input_dim());
        for (obs, z) in batch {
            self.check_label(*z)?;
            x.extend_from_slice(self.features(obs)?);
        }
        let n = batch.len();
        let tape = self.net.forward_batch(&x, n)?;
        let mut upstream = vec![0.0; n * self.k];
        let mut loss = 0.0;
        for (i, (row, (_, z))) in tape.output().chunks_exact(self.k).zip(batch).enumerate() {
            let lp = log_softmax(row)?;
            loss -= lp[*z] / n as f64;
            for (j, l) in lp.iter().enumerate() {
                let target = if j == *z { 1.0 } else { 0.0 };
                upstream[i * self.k + j] = (l.exp() - target) / n as f64;
            }
        }
        let (grad, _) = self.net.backward_batch(&tape, &upstream)?;
        adam_step(&mut self.net, &mut self.opt, &grad, lr)?;
        Ok(loss)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Shaping applied on top of the raw diversity reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillRewardShape {
    pub scale: f64,
    /// Drop the `-log pi` term.
    pub omit_entropy: bool,
}

impl Default for SkillRewardShape {
    fn default() -> Self {
        Self {
            scale: 1.0,
            omit_entropy: false,
        }
    }
}

/// `scale * (log q(z|s) - log p(z) - log pi(a|s,z))`.
pub fn pseudo_reward(
    disc: &Discriminator,
    prior: &SkillPrior,
    log_pi: f64,
    obs: &[f64],
    z: usize,
    shape: SkillRewardShape,
) -> Result<f64> {
    disc.check_label(z)?;
    if prior.num_skills() != disc.num_skills() {
        return Err(Error::Invalid("prior and discriminator disagree on the skill count".into()));
    }
    let log_q = disc.log_probs(obs)?[z];
    let entropy = if shape.omit_entropy { 0.0 } else { -log_pi };
    Ok(shape.scale * (log_q - prior.log_prob(z) + entropy))
}

/// Random network distillation: a frozen random target and a trained
/// predictor. The bonus is the squared prediction error divided by a running
/// standard deviation of that error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RndPair {
    target: MlpParams,
    predictor: MlpParams,
    opt: AdamState,
    count: u64,
    mean: f64,
    m2: f64,
}

const RND_STD_FLOOR: f64 = 1e-8;

impl RndPair {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], embed_dim: usize, rng: &mut R) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Invalid("RND embedding dimension must be at least 1".into()));
        }
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(embed_dim);
        let target = MlpParams::new(&sizes, Activation::Relu, rng);
        let predictor = MlpParams::new(&sizes, Activation::Relu, rng);
        Ok(Self {
            opt: AdamState::new(&predictor),
            target,
            predictor,
            count: 0,
            mean: 0.0,
            m2: 0.0,
        })
    }

    pub fn target(&self) -> &MlpParams {
        &self.target
    }

    pub fn predictor(&self) -> &MlpParams {
        &self.predictor
    }

    /// Replaces the predictor (and resets its optimizer).
    pub fn set_predictor(&mut self, predictor: MlpParams) -> Result<()> {
        if predictor.input_dim() != self.target.input_dim() || predictor.output_dim() != self.target.output_dim() {
            return Err(NnError::Shape("predictor must match the target network".into()).into());
        }
        self.opt = AdamState::new(&predictor);
        self.predictor = predictor;
        Ok(())
    }

    pub fn prediction_error(&self, obs: &[f64]) -> Result<f64> {
        let t = self.target.forward(obs)?;
        let p = self.predictor.forward(obs)?;
        Ok(t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn running_std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    /// Normalized bonus without touching the running statistics.
    pub fn peek_bonus(&self, obs: &[f64]) -> Result<f64> {
        let e = self.prediction_error(obs)?;
        Ok(if e == 0.0 { 0.0 } else { e / self.running_std().max(RND_STD_FLOOR) })
    }

    /// Normalized bonus; folds the raw error into the running statistics first.
    pub fn bonus(&mut self, obs: &[f64]) -> Result<f64> {
        let e = self.prediction_error(obs)?;
        self.count += 1;
        let delta = e - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (e - self.mean);
        Ok(if e == 0.0 { 0.0 } else { e / self.running_std().max(RND_STD_FLOOR) })
    }

    /// One Adam step on the mean squared prediction error; returns the pre-step loss.
    pub fn update(&mut self, batch: &[Vec<f64>], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty RND batch".into()));
        }
        let n = batch.len();
        let x: Vec<f64> = batch.iter().flat_map(|o| o.iter().copied()).collect();
        let target = self.target.forward_batch(&x, n)?;
        let tape = self.predictor.forward_batch(&x, n)?;
        let mut upstream = vec![0.0; tape.output().len()];
        let mut loss = 0.0;
        for ((u, p), t) in upstream.iter_mut().zip(tape.output()).zip(target.output()) {
            let d = p - t;
            loss += d * d / n as f64;
            *u = 2.0 * d / n as f64;
        }
        let (grad, _) = self.predictor.backward_batch(&tape, &upstream)?;
        adam_step(&mut self.predictor, &mut self.opt, &grad, lr)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_skill_prior_always_zero() {
        let p = SkillPrior::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_skill(&p, &mut rng) == 0));
        assert!(SkillPrior::new(0).is_err());
    }

    #[test]
    fn prior_frequencies_are_uniform() {
        let k = 10;
        let p = SkillPrior::new(k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[sample_skill(&p, &mut rng)] += 1;
        }
        let q = 1.0 / k as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() < 3.0 * sigma);
        }
    }

    fn peaked_discriminator(k: usize, z: usize) -> Discriminator {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Discriminator::new(4, k, &[], false, &mut rng).unwrap();
        let layer = &mut d.net.layers_mut()[0];
        layer.weight.iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = -1e3);
        layer.bias[z] = 1e3;
        d
    }

    #[test]
    fn pseudo_reward_closed_forms() {
        let prior = SkillPrior::new(10).unwrap();
        let d = peaked_discriminator(10, 3);
        let obs = [0.1, 0.2, 0.0, 0.0];
        let r = pseudo_reward(&d, &prior, 0.0, &obs, 3, SkillRewardShape::default()).unwrap();
        assert!((r - 10f64.ln()).abs() < 1e-9);

        let mut uniform = d.clone();
        uniform.net.layers_mut()[0].bias.iter_mut().for_each(|b| *b = 0.0);
        let r = pseudo_reward(&uniform, &prior, 0.7, &obs, 5, SkillRewardShape::default()).unwrap();
        assert!((r + 0.7).abs() < 1e-12);

        let scaled = SkillRewardShape {
            scale: 2.0,
            omit_entropy: false,
        };
        let r2 = pseudo_reward(&uniform, &prior, 0.7, &obs, 5, scaled).unwrap();
        assert!((r2 + 1.4).abs() < 1e-12);

        let omit = SkillRewardShape {
            scale: 1.0,
            omit_entropy: true,
        };
        let a = pseudo_reward(&d, &prior, 0.3, &obs, 1, omit).unwrap();
        let b = pseudo_reward(&d, &prior, -5.0, &obs, 1, omit).unwrap();
        assert_eq!(a, b);
        assert!(pseudo_reward(&d, &prior, 0.0, &obs, 10, omit).is_err());
    }

    #[test]
    fn untrained_discriminator_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Discriminator::new(4, 4, &[32, 32], false, &mut rng).unwrap();
        let batch: Vec<(Vec<f64>, usize)> = (0..256)
            .map(|i| ((0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 4))
            .collect();
        let loss = d.update(&batch, 1e-3).unwrap();
        assert!((loss - 4f64.ln()).abs() < 0.1, "{loss}");
        assert!(d.update(&[(vec![0.0; 4], 4)], 1e-3).is_err());
    }

    #[test]
    fn separable_skills_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Discriminator::new(4, 2, &[16], true, &mut rng).unwrap();
        let batch: Vec<(Vec<f64>, usize)> = (0..128)
            .map(|i| {
                let z = i % 2;
                let x = if z == 0 { -2.0 } else { 2.0 } + rng.random_range(-1.0..1.0);
                (vec![x, rng.random_range(-1.0..1.0), 5.0, -5.0], z)
            })
            .collect();
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = d.update(&batch, 1e-2).unwrap();
        }
        assert!(loss < 0.1, "{loss}");
        assert_eq!(d.accuracy(&batch).unwrap(), 1.0);
        let m = d.confusion(&batch).unwrap();
        assert_eq!(m[0][0], 1.0);
    }

    #[test]
    fn rnd_identical_nets_give_zero_bonus() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rnd = RndPair::new(4, &[16], 8, &mut rng).unwrap();
        rnd.set_predictor(rnd.target().clone()).unwrap();
        assert_eq!(rnd.bonus(&[1.0, 2.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(RndPair::new(4, &[16], 0, &mut rng).is_err());
    }

    #[test]
    fn rnd_bonus_decays_on_familiar_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rnd = RndPair::new(4, &[32], 16, &mut rng).unwrap();
        let frozen = rnd.target().clone();
        let obs = vec![1.0, -2.0, 0.3, 0.1];
        let others: Vec<Vec<f64>> = (0..16).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        for o in &others {
            rnd.bonus(o).unwrap();
        }
        let initial = rnd.bonus(&obs).unwrap();
        for _ in 0..300 {
            rnd.update(std::slice::from_ref(&obs), 1e-2).unwrap();
        }
        let after = rnd.bonus(&obs).unwrap();
        assert!(after < 0.1 * initial, "{after} vs {initial}");
        assert_eq!(rnd.target(), &frozen);
    }
}
