//! Optional exploration policy for online data collection, trained in
//! imagination on an information-gain reward: the KL between the
//! posterior and the prior over the stochastic model state.
//!
//! Inside imagination no real observation exists, so the reward needs a
//! stand-in for it. Two closures are provided: decode the imagined state
//! back to observation space and feed that to the posterior head
//! (`ImaginedDecode`), or skip imagination for the actor and train on
//! replayed real steps instead (`ReplayOnly`).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::substrate::nn::Mlp;
use crate::substrate::optim::{clip_grad_norm, ParamSet};
use crate::substrate::tape::{Tape, V};
use crate::substrate::tensor::Tensor;
use crate::world::{kl_categorical, kl_categorical_nodes, ModelState, StateNodes, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExploreRewardMode {
    /// Compute the information gain on imagined states by decoding them
    /// to observations and re-encoding through the posterior head.
    ImaginedDecode,
    /// Train the exploration actor-critic on replayed real steps where
    /// the true observation (and hence the true posterior) is available.
    ReplayOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExploreConfig {
    pub deter_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub action_low: f64,
    pub action_high: f64,
    pub entropy_coef: f64,
    pub reward_mode: ExploreRewardMode,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            deter_dim: 64,
            action_dim: 2,
            hidden: 128,
            layers: 2,
            gamma: 0.99,
            lambda: 0.95,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            grad_clip: 100.0,
            action_low: -1.0,
            action_high: 1.0,
            entropy_coef: 1e-3,
            reward_mode: ExploreRewardMode::ImaginedDecode,
        }
    }
}

/// Information-gain reward: KL between posterior and prior logits over
/// the grouped categorical state. Returns `[B, 1]`.
pub fn lbs_reward(
    posterior_logits: &Tensor,
    prior_logits: &Tensor,
    groups: usize,
    classes: usize,
) -> Tensor {
    kl_categorical(posterior_logits, prior_logits, groups, classes)
}

#[derive(Clone, Debug)]
pub struct ExploreTrainStats {
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

/// Unconditioned actor-critic over deterministic model states.
#[derive(Clone, Debug)]
pub struct ExplorationPolicy {
    pub cfg: ExploreConfig,
    pub actor: ParamSet,
    pub critic: ParamSet,
    actor_net: Mlp,
    critic_net: Mlp,
}

fn mlp_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(layers));
    dims.push(output);
    dims
}

impl ExplorationPolicy {
    pub fn new(cfg: ExploreConfig, rng: &mut impl Rng) -> Self {
        let actor_net = Mlp::new(
            "expl.actor",
            mlp_dims(cfg.deter_dim, cfg.hidden, cfg.layers, 2 * cfg.action_dim),
        );
        let critic_net = Mlp::new(
            "expl.critic",
            mlp_dims(cfg.deter_dim, cfg.hidden, cfg.layers, 1),
        );
        let mut actor = ParamSet::new();
        let mut critic = ParamSet::new();
        actor_net.init(&mut actor, rng);
        critic_net.init(&mut critic, rng);
        ExplorationPolicy {
            cfg,
            actor,
            critic,
            actor_net,
            critic_net,
        }
    }

    fn action_dist(&self, tape: &mut Tape, deter: V, train: bool) -> (V, V) {
        let out = self.actor_net.forward(tape, &self.actor, deter, train);
        let a = self.cfg.action_dim;
        let mean_raw = tape.slice_cols(out, 0, a);
        let std_raw = tape.slice_cols(out, a, 2 * a);
        // straight-through clamp instead of tanh: the mean stays inside
        // the box but the gradient never saturates at the box edge, so a
        // policy pinned to a wall can still be pushed back once the
        // intrinsic reward there is consumed
        let mean = tape.clamp_st(mean_raw, self.cfg.action_low, self.cfg.action_high);
        let sig = tape.sigmoid(std_raw);
        let sig = tape.scale(sig, 0.9);
        let std = tape.add_scalar(sig, 0.1);
        (mean, std)
    }

    pub fn act(
        &self,
        tape: &mut Tape,
        deter: V,
        rng: &mut (impl Rng + ?Sized),
        train: bool,
    ) -> V {
        let (mean, std) = self.action_dist(tape, deter, train);
        let batch = tape.value(mean).rows();
        let a = self.cfg.action_dim;
        let eps_data: Vec<f64> = (0..batch * a)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let eps = tape.constant(Tensor::matrix(batch, a, eps_data));
        let noise = tape.mul(std, eps);
        let pre = tape.add(mean, noise);
        tape.clamp_st(pre, self.cfg.action_low, self.cfg.action_high)
    }

    pub fn value(&self, tape: &mut Tape, deter: V, train: bool) -> V {
        self.critic_net.forward(tape, &self.critic, deter, train)
    }

    /// Imagination-phase update with the decoded-observation reward
    /// closure (`ImaginedDecode`).
    pub fn train_imagined(
        &mut self,
        wm: &WorldModel,
        start: &ModelState,
        rng: &mut impl Rng,
    ) -> Result<ExploreTrainStats> {
        let batch = start.batch();
        let horizon = wm.cfg.horizon;
        let cfg = self.cfg.clone();
        let mut tape = Tape::new();
        let start_nodes = StateNodes::constant(&mut tape, start);
        let this = &*self;
        let (states, _actions) = wm.imagine(
            &mut tape,
            start_nodes,
            |tape, s, r| this.act(tape, s.deter, r, true),
            horizon,
            rng,
            false,
        );

        // Information gain per imagined step: re-encode the decoded
        // observation through the posterior head; the prior logits are the
        // ones the state was sampled from.
        let mut rewards = Vec::with_capacity(horizon);
        for state in states.iter().skip(1) {
            let decoded = wm.decode(&mut tape, state, false);
            let post_logits = wm.posterior_logits(&mut tape, state.deter, decoded, false);
            let kl = kl_categorical_nodes(
                &mut tape,
                post_logits,
                state.logits,
                wm.cfg.groups,
                wm.cfg.classes,
            );
            rewards.push(kl);
        }

        // Standardize rewards across the update (off-tape statistics, so
        // differentiability is preserved); the raw information gain scale
        // shrinks toward zero as the model fits and would starve the
        // actor of signal.
        let flat: Vec<f64> = rewards
            .iter()
            .flat_map(|&r| tape.value(r).data.clone())
            .collect();
        let r_mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let r_var =
            flat.iter().map(|v| (v - r_mean) * (v - r_mean)).sum::<f64>() / flat.len() as f64;
        let r_scale = 1.0 / (r_var.sqrt() + 1e-6);
        let norm_rewards: Vec<V> = rewards
            .iter()
            .map(|&r| {
                let centered = tape.add_scalar(r, -r_mean);
                tape.scale(centered, r_scale)
            })
            .collect();

        let values: Vec<V> = states
            .iter()
            .map(|s| this.value(&mut tape, s.deter, false))
            .collect();
        let targets = crate::skills::lambda_return_nodes(
            &mut tape,
            &norm_rewards,
            &values,
            cfg.gamma,
            cfg.lambda,
        );

        let mut acc: Option<V> = None;
        for &g in &targets {
            let s = tape.sum_all(g);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
        let base_loss = tape.scale(acc.unwrap(), -1.0 / (horizon * batch) as f64);

        // Entropy bonus on the action distribution keeps the squashed
        // mean from pinning at the box boundary.
        let mut ent_acc: Option<V> = None;
        for state in states.iter().take(horizon) {
            let det = tape.detach(state.deter);
            let (_, std) = this.action_dist(&mut tape, det, true);
            let log_std = tape.log(std);
            let s = tape.sum_all(log_std);
            ent_acc = Some(match ent_acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
        let ent_mean = tape.scale(
            ent_acc.unwrap(),
            -cfg.entropy_coef / (horizon * batch * cfg.action_dim) as f64,
        );
        let actor_loss = tape.add(base_loss, ent_mean);
        let actor_loss_val = tape.value(actor_loss).item();
        let grads = tape.backward(actor_loss)?;
        let mut actor_grads = tape.param_grads(&self.actor, &grads);
        clip_grad_norm(&mut actor_grads, cfg.grad_clip);

        let target_vals: Vec<Tensor> = targets.iter().map(|&g| tape.value(g).clone()).collect();
        let mut crit_acc: Option<V> = None;
        for (t, target) in target_vals.iter().enumerate() {
            let det = tape.detach(states[t].deter);
            let pred = this.value(&mut tape, det, true);
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(pred, tgt);
            let sq = tape.square(diff);
            let s = tape.sum_all(sq);
            crit_acc = Some(match crit_acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
        let critic_loss = tape.scale(crit_acc.unwrap(), 1.0 / (horizon * batch) as f64);
        let critic_loss_val = tape.value(critic_loss).item();
        let cgrads = tape.backward(critic_loss)?;
        let mut critic_grads = tape.param_grads(&self.critic, &cgrads);
        clip_grad_norm(&mut critic_grads, cfg.grad_clip);

        let mean_reward = rewards
            .iter()
            .map(|&r| tape.value(r).data.iter().sum::<f64>())
            .sum::<f64>()
            / (horizon * batch) as f64;

        self.actor.adam_step(&actor_grads, cfg.actor_lr)?;
        self.critic.adam_step(&critic_grads, cfg.critic_lr)?;
        Ok(ExploreTrainStats {
            mean_reward,
            actor_loss: actor_loss_val,
            critic_loss: critic_loss_val,
        })
    }

    /// Replay-phase update (`ReplayOnly`): the information gain is
    /// computed on real steps, where the true posterior exists; the actor
    /// uses a score-function gradient because replayed actions cannot be
    /// reparameterized.
    pub fn train_on_replay(
        &mut self,
        wm: &WorldModel,
        obs: &[Tensor],
        actions: &[Tensor],
        rng: &mut impl Rng,
    ) -> Result<ExploreTrainStats> {
        let cfg = self.cfg.clone();
        let mut tape = Tape::new();
        let (_, states) = wm.elbo_loss(&mut tape, obs, actions, rng, false)?;
        let h = states.len() - 1;
        let batch = obs[0].rows();

        // Rewards for reaching states 1..=H under the real observations.
        let mut rewards = Vec::with_capacity(h);
        for state in states.iter().skip(1) {
            let prior_logits = wm.prior_logits(&mut tape, state.deter, false);
            let kl = kl_categorical_nodes(
                &mut tape,
                state.logits,
                prior_logits,
                wm.cfg.groups,
                wm.cfg.classes,
            );
            rewards.push(kl);
        }
        let values: Vec<V> = states
            .iter()
            .map(|s| {
                let det = tape.detach(s.deter);
                self.value(&mut tape, det, false)
            })
            .collect();
        let targets =
            crate::skills::lambda_return_nodes(&mut tape, &rewards, &values, cfg.gamma, cfg.lambda);
        let target_vals: Vec<Tensor> = targets.iter().map(|&g| tape.value(g).clone()).collect();

        // Score-function actor update with standardized advantage
        // baselines; raw advantages of near-zero-scale intrinsic rewards
        // would otherwise vanish against the log-prob magnitudes.
        let mut advantages: Vec<Tensor> = Vec::with_capacity(h);
        for t in 0..h {
            let mut adv = target_vals[t].clone();
            let baseline = tape.value(values[t]).clone();
            for (a, b) in adv.data.iter_mut().zip(&baseline.data) {
                *a -= b;
            }
            advantages.push(adv);
        }
        let flat: Vec<f64> = advantages.iter().flat_map(|a| a.data.clone()).collect();
        let mean_adv = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|v| (v - mean_adv) * (v - mean_adv)).sum::<f64>()
            / flat.len() as f64;
        let scale = 1.0 / (var.sqrt() + 1e-6);
        for adv in &mut advantages {
            for v in &mut adv.data {
                *v = ((*v - mean_adv) * scale).clamp(-3.0, 3.0);
            }
        }
        let mut acc: Option<V> = None;
        let mut mean_reward = 0.0;
        for t in 0..h {
            let det = tape.detach(states[t].deter);
            let (mean, std) = self.action_dist(&mut tape, det, true);
            let a_const = tape.constant(actions[t].clone());
            let diff = tape.sub(a_const, mean);
            let log_std = tape.log(std);
            let neg_log_std = tape.neg(log_std);
            let inv_std = tape.exp(neg_log_std);
            let z_raw = tape.mul(diff, inv_std);
            // bounded z-score: recorded actions are clamped to the box and
            // can sit many stddevs from the mean, which would blow up the
            // score-function term
            let z = tape.clamp_st(z_raw, -3.0, 3.0);
            let z2 = tape.square(z);
            let half_z2 = tape.scale(z2, 0.5);
            let per_dim = tape.sub(neg_log_std, half_z2);
            let logp = tape.sum_rows(per_dim); // [B, 1]
            let adv_const = tape.constant(advantages[t].clone());
            let weighted = tape.mul(logp, adv_const);
            let entropy = tape.sum_all(log_std);
            let bonus = tape.scale(entropy, cfg.entropy_coef / cfg.action_dim as f64);
            let s = tape.sum_all(weighted);
            let s = tape.add(s, bonus);
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s),
            });
            mean_reward += tape.value(rewards[t]).data.iter().sum::<f64>();
        }
        let actor_loss = tape.scale(acc.unwrap(), -1.0 / (h * batch) as f64);
        let actor_loss_val = tape.value(actor_loss).item();
        let grads = tape.backward(actor_loss)?;
        let mut actor_grads = tape.param_grads(&self.actor, &grads);
        clip_grad_norm(&mut actor_grads, cfg.grad_clip);

        let mut crit_acc: Option<V> = None;
        for (t, target) in target_vals.iter().enumerate() {
            let det = tape.detach(states[t].deter);
            let pred = self.value(&mut tape, det, true);
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(pred, tgt);
            let sq = tape.square(diff);
            let s = tape.sum_all(sq);
            crit_acc = Some(match crit_acc {
                None => s,
                Some(prev) => tape.add(prev, s),
            });
        }
        let critic_loss = tape.scale(crit_acc.unwrap(), 1.0 / (h * batch) as f64);
        let critic_loss_val = tape.value(critic_loss).item();
        let cgrads = tape.backward(critic_loss)?;
        let mut critic_grads = tape.param_grads(&self.critic, &cgrads);
        clip_grad_norm(&mut critic_grads, cfg.grad_clip);

        self.actor.adam_step(&actor_grads, cfg.actor_lr)?;
        self.critic.adam_step(&critic_grads, cfg.critic_lr)?;
        Ok(ExploreTrainStats {
            mean_reward: mean_reward / (h * batch) as f64,
            actor_loss: actor_loss_val,
            critic_loss: critic_loss_val,
        })
    }
}
