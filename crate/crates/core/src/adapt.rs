//! Fine-tuning layer: a meta-controller choosing among pretrained skills,
//! trained in imagination on predicted task rewards, plus the
//! reward-smoothing gate that keeps adaptation inert until the task has
//! actually produced a reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::SkillVq;
use crate::envs::PointMassEnv;
use crate::error::Result;
use crate::skills::{lambda_return_nodes, SkillPolicySet};
use crate::substrate::nn::Mlp;
use crate::substrate::optim::{clip_grad_norm, ParamSet};
use crate::substrate::{Tape, Tensor, V};
use crate::world::{ModelState, StateNodes, WorldModel};
use std::collections::BTreeMap;

/// Gate on predicted rewards: everything reads as exactly zero until the
/// real environment has produced a reward at or above `threshold` once.
/// Arming is monotone for the lifetime of the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardSmoother {
    pub threshold: f64,
    armed: bool,
}

impl Default for RewardSmoother {
    fn default() -> Self {
        RewardSmoother {
            threshold: 1e-4,
            armed: false,
        }
    }
}

impl RewardSmoother {
    pub fn new(threshold: f64) -> Self {
        RewardSmoother {
            threshold,
            armed: false,
        }
    }

    /// Feed a real environment reward; arms the gate once one reaches the
    /// threshold.
    pub fn observe(&mut self, real_reward: f64) {
        if real_reward >= self.threshold {
            self.armed = true;
        }
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    /// Identity once armed, exactly zero before.
    pub fn smooth(&self, predicted: f64) -> f64 {
        if self.armed {
            predicted
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaConfig {
    pub deter_dim: usize,
    pub num_skills: usize,
    pub hidden: usize,
    pub layers: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    /// Weight of the categorical entropy bonus on the skill distribution.
    pub entropy_coef: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            deter_dim: 64,
            num_skills: 16,
            hidden: 128,
            layers: 2,
            gamma: 0.99,
            lambda: 0.95,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            grad_clip: 100.0,
            entropy_coef: 1e-3,
        }
    }
}

fn mlp_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(layers));
    dims.push(output);
    dims
}

/// Policy over skill indices with its own critic.
#[derive(Clone, Debug)]
pub struct MetaController {
    pub cfg: MetaConfig,
    pub actor: ParamSet,
    pub critic: ParamSet,
    actor_net: Mlp,
    critic_net: Mlp,
}

/// Gradients for one meta-training step; applying them is separate so the
/// estimator can be averaged or inspected without touching parameters.
pub struct MetaGrads {
    pub meta_actor: BTreeMap<String, Tensor>,
    pub meta_critic: BTreeMap<String, Tensor>,
    pub skill_actor: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct MetaTrainStats {
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_entropy: f64,
    /// False when the smoother gate skipped the update entirely.
    pub updated: bool,
}

/// Sampling / argmax over an explicit probability vector; greedy breaks
/// ties toward the lowest index.
pub fn select_from_probs(probs: &[f64], mode: SelectMode, rng: &mut (impl Rng + ?Sized)) -> usize {
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

impl MetaController {
    pub fn new(cfg: MetaConfig, rng: &mut impl Rng) -> Self {
        let actor_net = Mlp::new(
            "meta.actor",
            mlp_dims(cfg.deter_dim, cfg.hidden, cfg.layers, cfg.num_skills),
        );
        let critic_net = Mlp::new(
            "meta.critic",
            mlp_dims(cfg.deter_dim, cfg.hidden, cfg.layers, 1),
        );
        let mut actor = ParamSet::new();
        actor_net.init(&mut actor, rng);
        let mut critic = ParamSet::new();
        critic_net.init(&mut critic, rng);
        MetaController {
            cfg,
            actor,
            critic,
            actor_net,
            critic_net,
        }
    }

    /// `[B, N]` skill probabilities at the given deterministic states.
    pub fn skill_probs(&self, tape: &mut Tape, deter: V, train: bool) -> V {
        let logits = self.actor_net.forward(tape, &self.actor, deter, train);
        tape.softmax(logits)
    }

    /// Skill probabilities at a single model state, off-tape.
    pub fn skill_probs_at(&self, state: &ModelState) -> Vec<f64> {
        let mut tape = Tape::new();
        let det = tape.constant(state.deter.clone());
        let probs = self.skill_probs(&mut tape, det, false);
        tape.value(probs).data.clone()
    }

    pub fn value(&self, tape: &mut Tape, deter: V, train: bool) -> V {
        self.critic_net.forward(tape, &self.critic, deter, train)
    }

    /// Picks a skill index for acting. While the smoother is unarmed the
    /// actor is ignored and skills are drawn uniformly (the caller holds
    /// the draw for the whole episode); once armed the actor distribution
    /// is sampled (training) or maximized (evaluation).
    pub fn select_skill(
        &self,
        state: &ModelState,
        smoother: &RewardSmoother,
        rng: &mut impl Rng,
        mode: SelectMode,
    ) -> usize {
        if !smoother.is_armed() {
            return rng.gen_range(0..self.cfg.num_skills);
        }
        let probs = self.skill_probs_at(state);
        select_from_probs(&probs, mode, rng)
    }

    /// Gradient estimate for one imagined batch.
    ///
    /// Skills are re-sampled from the actor at every imagined step; the
    /// meta-actor gets a score-function gradient against the critic
    /// baseline, skill actors get the pathwise gradient of the same
    /// returns, and the discrete choice feeds the skill-conditioning code
    /// through a straight-through estimator. `reward_override`, when set,
    /// replaces the world model's reward head (the per-step chosen skill
    /// indices are passed in); it exists for closed-form oracles.
    pub fn estimate_meta_grads(
        &self,
        wm: &WorldModel,
        vq: &SkillVq,
        skills: &SkillPolicySet,
        start: &ModelState,
        rng: &mut impl Rng,
        mut reward_override: Option<&mut dyn FnMut(&mut Tape, &StateNodes, &[usize]) -> V>,
    ) -> Result<(MetaGrads, MetaTrainStats)> {
        let cfg = self.cfg.clone();
        let horizon = wm.cfg.horizon;
        let batch = start.deter.rows();
        let mut tape = Tape::new();
        let start_nodes = StateNodes::constant(&mut tape, start);
        let code_matrix = tape.constant(vq.codebook.codes.clone());

        // probs node, straight-through one-hot value, chosen indices.
        let mut steps: Vec<(V, Tensor, Vec<usize>)> = Vec::with_capacity(horizon);
        let actor_net = &self.actor_net;
        let actor = &self.actor;
        let n = cfg.num_skills;
        let (states, _actions) = {
            let policy = |tape: &mut Tape, state: &StateNodes, rng: &mut dyn rand::RngCore| {
                let logits = actor_net.forward(tape, actor, state.deter, true);
                let probs = tape.softmax(logits);
                let pvals = tape.value(probs).clone();
                let mut chosen = Vec::with_capacity(batch);
                let mut hard = vec![0.0; batch * n];
                for r in 0..batch {
                    let row = &pvals.data[r * n..(r + 1) * n];
                    let z = select_from_probs(row, SelectMode::Sample, rng);
                    chosen.push(z);
                    hard[r * n + z] = 1.0;
                }
                let hard = Tensor::matrix(batch, n, hard);
                let st = tape.straight_through(probs, hard.clone());
                let code = tape.matmul(st, code_matrix);
                let action = skills.act(tape, state.deter, code, rng, true);
                steps.push((probs, hard, chosen));
                action
            };
            wm.imagine(&mut tape, start_nodes, policy, horizon, rng, false)
        };

        let mut rewards = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let r = match reward_override.as_mut() {
                Some(hook) => hook(&mut tape, &states[t], &steps[t - 1].2),
                None => wm.predict_reward(&mut tape, &states[t], false)?,
            };
            rewards.push(r);
        }
        // Frozen critic values for targets and baselines.
        let values: Vec<V> = states
            .iter()
            .map(|s| {
                let det = tape.detach(s.deter);
                self.value(&mut tape, det, false)
            })
            .collect();
        let targets = lambda_return_nodes(&mut tape, &rewards, &values, cfg.gamma, cfg.lambda);
        let target_vals: Vec<Tensor> = targets.iter().map(|&g| tape.value(g).clone()).collect();

        let mut score_acc: Option<V> = None;
        let mut path_acc: Option<V> = None;
        let mut ent_acc: Option<V> = None;
        let mut mean_reward = 0.0;
        for t in 0..horizon {
            let (probs, hard, _) = &steps[t];
            let lp = tape.log(*probs);
            let hard_const = tape.constant(hard.clone());
            let sel = tape.mul(lp, hard_const);
            let logp = tape.sum_rows(sel);
            let mut adv = target_vals[t].clone();
            let baseline = tape.value(values[t]).clone();
            for (a, b) in adv.data.iter_mut().zip(&baseline.data) {
                *a -= b;
            }
            let adv_const = tape.constant(adv);
            let weighted = tape.mul(logp, adv_const);
            let ws = tape.sum_all(weighted);
            score_acc = Some(match score_acc {
                None => ws,
                Some(prev) => tape.add(prev, ws),
            });
            let plp = tape.mul(*probs, lp);
            let neg_ent = tape.sum_all(plp);
            ent_acc = Some(match ent_acc {
                None => neg_ent,
                Some(prev) => tape.add(prev, neg_ent),
            });
            let g = tape.sum_all(targets[t]);
            path_acc = Some(match path_acc {
                None => g,
                Some(prev) => tape.add(prev, g),
            });
            mean_reward += tape.value(rewards[t]).data.iter().sum::<f64>();
        }
        let scale = -1.0 / (horizon * batch) as f64;
        let score_term = tape.scale(score_acc.unwrap(), scale);
        let path_term = tape.scale(path_acc.unwrap(), scale);
        // ent_acc holds sum(p log p) = -entropy; maximizing entropy means
        // adding +coef * sum(p log p) to the loss's negation, i.e. the
        // loss gets +coef * ent_acc * scale_sign handled here:
        let ent_term = tape.scale(ent_acc.unwrap(), cfg.entropy_coef / (horizon * batch) as f64);
        let partial = tape.add(score_term, path_term);
        let actor_loss = tape.add(partial, ent_term);
        let actor_loss_val = tape.value(actor_loss).item();
        let mean_entropy = -tape
            .value(ent_acc.unwrap())
            .item()
            / (horizon * batch) as f64;
        let grads = tape.backward(actor_loss)?;
        let mut meta_actor = tape.param_grads(&self.actor, &grads);
        let mut skill_actor = tape.param_grads(&skills.actor, &grads);
        clip_grad_norm(&mut meta_actor, cfg.grad_clip);
        clip_grad_norm(&mut skill_actor, skills.cfg.grad_clip);

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
        let critic_loss = tape.scale(crit_acc.unwrap(), 1.0 / (horizon * batch) as f64);
        let critic_loss_val = tape.value(critic_loss).item();
        let cgrads = tape.backward(critic_loss)?;
        let mut meta_critic = tape.param_grads(&self.critic, &cgrads);
        clip_grad_norm(&mut meta_critic, cfg.grad_clip);

        Ok((
            MetaGrads {
                meta_actor,
                meta_critic,
                skill_actor,
            },
            MetaTrainStats {
                mean_reward: mean_reward / (horizon * batch) as f64,
                actor_loss: actor_loss_val,
                critic_loss: critic_loss_val,
                mean_entropy,
                updated: true,
            },
        ))
    }

    pub fn apply_meta_grads(
        &mut self,
        skills: &mut SkillPolicySet,
        grads: &MetaGrads,
        adapt_skills: bool,
    ) -> Result<()> {
        self.actor.adam_step(&grads.meta_actor, self.cfg.actor_lr)?;
        self.critic.adam_step(&grads.meta_critic, self.cfg.critic_lr)?;
        if adapt_skills {
            skills.actor.adam_step(&grads.skill_actor, skills.cfg.actor_lr)?;
        }
        Ok(())
    }

    /// One fine-tuning update of meta actor/critic and (unless frozen) the
    /// skill actors, on imagined rollouts rewarded by the model's reward
    /// head. A no-op while the smoother is unarmed: no parameter changes
    /// at all.
    pub fn train_meta(
        &mut self,
        wm: &WorldModel,
        vq: &SkillVq,
        skills: &mut SkillPolicySet,
        smoother: &RewardSmoother,
        start: &ModelState,
        rng: &mut impl Rng,
        adapt_skills: bool,
    ) -> Result<MetaTrainStats> {
        if !smoother.is_armed() {
            return Ok(MetaTrainStats::default());
        }
        let (grads, stats) = self.estimate_meta_grads(wm, vq, skills, start, rng, None)?;
        self.apply_meta_grads(skills, &grads, adapt_skills)?;
        Ok(stats)
    }

    /// Same update driven by an explicit reward function instead of the
    /// reward head; used by closed-form oracles such as the skill bandit.
    pub fn train_meta_with_reward(
        &mut self,
        wm: &WorldModel,
        vq: &SkillVq,
        skills: &mut SkillPolicySet,
        start: &ModelState,
        rng: &mut impl Rng,
        reward: &mut dyn FnMut(&mut Tape, &StateNodes, &[usize]) -> V,
        adapt_skills: bool,
    ) -> Result<MetaTrainStats> {
        let (grads, stats) =
            self.estimate_meta_grads(wm, vq, skills, start, rng, Some(reward))?;
        self.apply_meta_grads(skills, &grads, adapt_skills)?;
        Ok(stats)
    }
}

/// Return statistics of running the (frozen) skills under the greedy
/// meta-controller in the real environment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalMetrics {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
    pub skill_histogram: Vec<usize>,
}

/// Runs `episodes` greedy episodes without touching any parameters; the
/// skill choice is re-evaluated every step through the model posterior.
pub fn zero_shot_eval(
    meta: &MetaController,
    skills: &SkillPolicySet,
    wm: &WorldModel,
    vq: &SkillVq,
    env: &mut PointMassEnv,
    episodes: usize,
    rng: &mut impl Rng,
) -> Result<EvalMetrics> {
    let mut total_return = 0.0;
    let mut successes = 0usize;
    let mut histogram = vec![0usize; meta.cfg.num_skills];
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut state = ModelState::initial(&wm.cfg, 1);
        let mut prev_action = vec![0.0; wm.cfg.action_dim];
        let mut ep_return = 0.0;
        loop {
            let mut tape = Tape::new();
            let prev = StateNodes::constant(&mut tape, &state);
            let a = tape.constant(Tensor::row(&prev_action));
            let o = tape.constant(Tensor::row(&obs));
            let next = wm.posterior_step(&mut tape, &prev, a, o, rng, false);
            state = next.to_state(&tape);
            let probs = {
                let det = tape.value(next.deter).clone();
                let mut ptape = Tape::new();
                let d = ptape.constant(det);
                let p = meta.skill_probs(&mut ptape, d, false);
                ptape.value(p).data.clone()
            };
            let z = select_from_probs(&probs, SelectMode::Greedy, rng);
            histogram[z] += 1;
            let code = tape.constant(Tensor::row(vq.codebook.code_row(z)));
            let act = skills.act_mean(&mut tape, next.deter, code, false);
            let av = tape.value(act).data.clone();
            let (next_obs, reward, done) = env.step([av[0], av[1]])?;
            ep_return += reward;
            obs = next_obs;
            prev_action = av;
            if done {
                break;
            }
        }
        total_return += ep_return;
        if ep_return > 0.0 {
            successes += 1;
        }
    }
    Ok(EvalMetrics {
        mean_return: if episodes > 0 {
            total_return / episodes as f64
        } else {
            0.0
        },
        success_rate: if episodes > 0 {
            successes as f64 / episodes as f64
        } else {
            0.0
        },
        episodes,
        skill_histogram: histogram,
    })
}
