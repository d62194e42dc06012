//! Skill-conditioned actor-critics trained entirely inside the learned
//! model. The skill reward is the sum of a particle entropy term (mean
//! distance to the K nearest neighbors in the imagined batch) and a code
//! consistency term (negative distance to the decoded skill code).

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codebook::{sample_skill_uniform, SkillVq};
use crate::error::{ChoreoError, Result};
use crate::substrate::nn::Mlp;
use crate::substrate::optim::{clip_grad_norm, ParamSet};
use crate::substrate::tape::{Tape, V};
use crate::substrate::tensor::Tensor;
use crate::world::{ModelState, StateNodes, WorldModel};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkillConfig {
    pub deter_dim: usize,
    pub code_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Neighbor count for the particle entropy reward.
    pub knn_k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub action_low: f64,
    pub action_high: f64,
}

impl Default for SkillConfig {
    fn default() -> Self {
        SkillConfig {
            deter_dim: 64,
            code_dim: 16,
            action_dim: 2,
            hidden: 128,
            layers: 2,
            knn_k: 30,
            gamma: 0.99,
            lambda: 0.95,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            grad_clip: 100.0,
            action_low: -1.0,
            action_high: 1.0,
        }
    }
}

/// Actor and critic parameters for the code-conditioned skill policies.
/// A single network pair serves every skill; the code vector is an input.
#[derive(Clone, Debug)]
pub struct SkillPolicySet {
    pub cfg: SkillConfig,
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

/// One imagined batch: `H+1` batched model states, `H` action tensors,
/// per-step rewards, and the skill index conditioning each batch row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImaginedTrajectory {
    pub states: Vec<ModelState>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Vec<f64>>,
    pub codes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SkillTrainStats {
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

impl SkillPolicySet {
    pub fn new(cfg: SkillConfig, rng: &mut impl Rng) -> Self {
        let input = cfg.deter_dim + cfg.code_dim;
        let actor_net = Mlp::new(
            "skill.actor",
            mlp_dims(input, cfg.hidden, cfg.layers, 2 * cfg.action_dim),
        );
        let critic_net = Mlp::new("skill.critic", mlp_dims(input, cfg.hidden, cfg.layers, 1));
        let mut actor = ParamSet::new();
        let mut critic = ParamSet::new();
        actor_net.init(&mut actor, rng);
        critic_net.init(&mut critic, rng);
        SkillPolicySet {
            cfg,
            actor,
            critic,
            actor_net,
            critic_net,
        }
    }

    /// Squashed mean and state-dependent stddev in `[0.1, 1.0]`.
    fn action_dist(&self, tape: &mut Tape, deter: V, code: V, train: bool) -> (V, V) {
        let joined = tape.concat_cols(deter, code);
        let out = self.actor_net.forward(tape, &self.actor, joined, train);
        let a = self.cfg.action_dim;
        let mean_raw = tape.slice_cols(out, 0, a);
        let std_raw = tape.slice_cols(out, a, 2 * a);
        let mid = 0.5 * (self.cfg.action_low + self.cfg.action_high);
        let half = 0.5 * (self.cfg.action_high - self.cfg.action_low);
        let squashed = tape.tanh(mean_raw);
        let scaled = tape.scale(squashed, half);
        let mean = tape.add_scalar(scaled, mid);
        let sig = tape.sigmoid(std_raw);
        let sig = tape.scale(sig, 0.9);
        let std = tape.add_scalar(sig, 0.1);
        (mean, std)
    }

    /// Reparameterized sample from the truncated action distribution:
    /// a = clamp(mean + std * eps) with a straight-through clamp so the
    /// pathwise gradient survives the boundary.
    pub fn act(
        &self,
        tape: &mut Tape,
        deter: V,
        code: V,
        rng: &mut (impl Rng + ?Sized),
        train: bool,
    ) -> V {
        let (mean, std) = self.action_dist(tape, deter, code, train);
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

    /// Distribution mean, used for deterministic evaluation.
    pub fn act_mean(&self, tape: &mut Tape, deter: V, code: V, train: bool) -> V {
        let (mean, _) = self.action_dist(tape, deter, code, train);
        mean
    }

    pub fn value(&self, tape: &mut Tape, deter: V, code: V, train: bool) -> V {
        let joined = tape.concat_cols(deter, code);
        self.critic_net.forward(tape, &self.critic, joined, train)
    }

    /// One imagination-phase update of actor and critic.
    ///
    /// Codes are drawn uniformly per batch row; the world model and the
    /// codebook are read-only here. `start` should hold posterior states
    /// from the current model training batch.
    pub fn train_skills(
        &mut self,
        wm: &WorldModel,
        vq: &SkillVq,
        start: &ModelState,
        rng: &mut impl Rng,
    ) -> Result<SkillTrainStats> {
        let batch = start.batch();
        let horizon = wm.cfg.horizon;
        let cfg = self.cfg.clone();
        let idxs: Vec<usize> = (0..batch)
            .map(|_| sample_skill_uniform(vq.codebook.n, rng))
            .collect();
        let mut code_data = Vec::with_capacity(batch * cfg.code_dim);
        for &i in &idxs {
            code_data.extend_from_slice(vq.codebook.code_row(i));
        }
        let code_rows = Tensor::matrix(batch, cfg.code_dim, code_data);

        let mut tape = Tape::new();
        let codes_v = tape.constant(code_rows);
        let decoded = vq.decode(&mut tape, codes_v, false);
        let start_nodes = StateNodes::constant(&mut tape, start);
        let policies = &*self;
        let (states, _actions) = wm.imagine(
            &mut tape,
            start_nodes,
            |tape, s, r| policies.act(tape, s.deter, codes_v, r, true),
            horizon,
            rng,
            false,
        );

        // Rewards for arriving in states 1..=H, on-tape so the actor's
        // pathwise gradient reaches them through the dynamics.
        let mut rewards = Vec::with_capacity(horizon);
        for state in states.iter().skip(1) {
            let ent = knn_entropy_nodes(&mut tape, state.deter, cfg.knn_k)?;
            let diff = tape.sub(state.deter, decoded);
            let dist = tape.norm_rows(diff);
            let code_term = tape.neg(dist);
            rewards.push(tape.add(ent, code_term));
        }

        // Critic bootstraps use frozen critic weights; gradient still
        // flows into the states themselves.
        let values: Vec<V> = states
            .iter()
            .map(|s| policies.value(&mut tape, s.deter, codes_v, false))
            .collect();
        let targets = lambda_return_nodes(&mut tape, &rewards, &values, cfg.gamma, cfg.lambda);

        let mut acc: Option<V> = None;
        for &g in &targets {
            let s = tape.sum_all(g);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
        let actor_loss = tape.scale(acc.unwrap(), -1.0 / (horizon * batch) as f64);
        let actor_loss_val = tape.value(actor_loss).item();
        let grads = tape.backward(actor_loss)?;
        let mut actor_grads = tape.param_grads(&self.actor, &grads);
        clip_grad_norm(&mut actor_grads, cfg.grad_clip);

        // Critic regression against stop-gradient targets on detached
        // states.
        let target_vals: Vec<Tensor> = targets.iter().map(|&g| tape.value(g).clone()).collect();
        let mut crit_acc: Option<V> = None;
        for (t, target) in target_vals.iter().enumerate() {
            let det = tape.detach(states[t].deter);
            let pred = policies.value(&mut tape, det, codes_v, true);
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
        Ok(SkillTrainStats {
            mean_reward,
            actor_loss: actor_loss_val,
            critic_loss: critic_loss_val,
        })
    }

    /// Imagine a batch of skill trajectories without updating anything;
    /// rewards are computed off-tape from the resulting states.
    pub fn rollout_skills(
        &self,
        wm: &WorldModel,
        vq: &SkillVq,
        start: &ModelState,
        rng: &mut impl Rng,
    ) -> Result<ImaginedTrajectory> {
        let batch = start.batch();
        let idxs: Vec<usize> = (0..batch)
            .map(|_| sample_skill_uniform(vq.codebook.n, rng))
            .collect();
        self.rollout_with_codes(wm, vq, start, &idxs, rng)
    }

    /// As `rollout_skills` but with caller-chosen skill indices (one per
    /// batch row).
    pub fn rollout_with_codes(
        &self,
        wm: &WorldModel,
        vq: &SkillVq,
        start: &ModelState,
        idxs: &[usize],
        rng: &mut impl Rng,
    ) -> Result<ImaginedTrajectory> {
        let batch = start.batch();
        if idxs.len() != batch {
            return Err(ChoreoError::contract("one skill index per batch row"));
        }
        let horizon = wm.cfg.horizon;
        let cfg = &self.cfg;
        let mut code_data = Vec::with_capacity(batch * cfg.code_dim);
        for &i in idxs {
            code_data.extend_from_slice(vq.codebook.code_row(i));
        }
        let code_rows = Tensor::matrix(batch, cfg.code_dim, code_data);
        let mut tape = Tape::new();
        let codes_v = tape.constant(code_rows);
        let decoded = vq.decode(&mut tape, codes_v, false);
        let start_nodes = StateNodes::constant(&mut tape, start);
        let (states, actions) = wm.imagine(
            &mut tape,
            start_nodes,
            |tape, s, r| self.act(tape, s.deter, codes_v, r, false),
            horizon,
            rng,
            false,
        );
        let decoded_vals = tape.value(decoded).clone();
        let mut rewards = Vec::with_capacity(horizon);
        for state in states.iter().skip(1) {
            let deter = tape.value(state.deter);
            let ent = knn_entropy_reward(deter, cfg.knn_k)?;
            let code = code_reward(deter, &decoded_vals);
            rewards.push(ent.iter().zip(&code).map(|(e, c)| e + c).collect());
        }
        Ok(ImaginedTrajectory {
            states: states.iter().map(|s| s.to_state(&tape)).collect(),
            actions: actions.iter().map(|&a| tape.value(a).clone()).collect(),
            rewards,
            codes: idxs.to_vec(),
        })
    }
}

/// Mean distance to the K nearest neighbors within the batch, excluding
/// self; rows of `states` are the particles.
pub fn knn_entropy_reward(states: &Tensor, k: usize) -> Result<Vec<f64>> {
    let ranks = knn_indices(states, k)?;
    let n = states.rows();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let xi = states.row_slice(i);
        let mut sum = 0.0;
        for rank in &ranks {
            let xj = states.row_slice(rank[i]);
            sum += dist(xi, xj);
        }
        out[i] = sum / k as f64;
    }
    Ok(out)
}

/// Negative distance from each state row to the matching decoded-code row.
pub fn code_reward(states: &Tensor, decoded: &Tensor) -> Vec<f64> {
    (0..states.rows())
        .map(|i| -dist(states.row_slice(i), decoded.row_slice(i)))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// For each neighbor rank `j < k`, the index of every row's rank-j
/// nearest neighbor. Ties break toward the lower row index.
fn knn_indices(states: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = states.rows();
    if n <= k {
        return Err(ChoreoError::contract(format!(
            "particle entropy needs more than k={k} states, got {n}"
        )));
    }
    let mut ranks = vec![vec![0usize; n]; k];
    for i in 0..n {
        let xi = states.row_slice(i);
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist(xi, states.row_slice(j)), j))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (rank, item) in d.iter().take(k).enumerate() {
            ranks[rank][i] = item.1;
        }
    }
    Ok(ranks)
}

/// On-tape particle entropy: neighbor indices are selected from current
/// values, then distances are recomputed differentiably. Returns `[n, 1]`.
pub fn knn_entropy_nodes(tape: &mut Tape, states: V, k: usize) -> Result<V> {
    let vals = tape.value(states).clone();
    let ranks = knn_indices(&vals, k)?;
    let mut acc: Option<V> = None;
    for rank in ranks {
        let nb = tape.gather_rows(states, Rc::new(rank));
        let diff = tape.sub(states, nb);
        let d = tape.norm_rows(diff);
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(a, d),
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / k as f64))
}

/// Mixed multi-step return targets:
/// `G_t = r_{t+1} + gamma * ((1 - lambda) v_{t+1} + lambda G_{t+1})`,
/// bootstrapped with the final value. `rewards` is `[H, B]`, `values` is
/// `[H+1, B]`; returns `[H, B]`.
pub fn lambda_returns(rewards: &Tensor, values: &Tensor, gamma: f64, lambda: f64) -> Tensor {
    let h = rewards.rows();
    let b = rewards.cols();
    assert_eq!(values.rows(), h + 1);
    assert_eq!(values.cols(), b);
    let mut out = vec![0.0; h * b];
    let mut next: Vec<f64> = values.row_slice(h).to_vec();
    for t in (0..h).rev() {
        for j in 0..b {
            let bootstrap = (1.0 - lambda) * values.row_slice(t + 1)[j] + lambda * next[j];
            out[t * b + j] = rewards.row_slice(t)[j] + gamma * bootstrap;
        }
        next = out[t * b..(t + 1) * b].to_vec();
    }
    Tensor::matrix(h, b, out)
}

/// On-tape version of `lambda_returns` over per-step `[B, 1]` nodes.
pub fn lambda_return_nodes(
    tape: &mut Tape,
    rewards: &[V],
    values: &[V],
    gamma: f64,
    lambda: f64,
) -> Vec<V> {
    let h = rewards.len();
    assert_eq!(values.len(), h + 1);
    let mut out = vec![values[h]; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let base = tape.scale(values[t + 1], 1.0 - lambda);
        let carry = tape.scale(next, lambda);
        let mix = tape.add(base, carry);
        let disc = tape.scale(mix, gamma);
        let g = tape.add(rewards[t], disc);
        out[t] = g;
        next = g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::VqConfig;
    use crate::substrate::gradcheck::{finite_diff_grads, max_rel_err};
    use crate::world::WorldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SkillConfig {
        SkillConfig {
            deter_dim: 8,
            code_dim: 4,
            action_dim: 2,
            hidden: 16,
            layers: 1,
            knn_k: 2,
            gamma: 0.99,
            lambda: 0.95,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            grad_clip: 100.0,
            action_low: -1.0,
            action_high: 1.0,
        }
    }

    #[test]
    fn knn_reward_matches_hand_example() {
        let states = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]);
        let r = knn_entropy_reward(&states, 1).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn identical_states_have_zero_entropy_reward() {
        let states = Tensor::matrix(4, 2, vec![0.5; 8]);
        let r = knn_entropy_reward(&states, 2).unwrap();
        assert_eq!(r, vec![0.0; 4]);
    }

    #[test]
    fn knn_reward_requires_more_states_than_neighbors() {
        let states = Tensor::matrix(3, 2, vec![0.0; 6]);
        assert!(matches!(
            knn_entropy_reward(&states, 3),
            Err(ChoreoError::Contract(_))
        ));
    }

    #[test]
    fn knn_reward_matches_min_extraction_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = 12;
            let d = 3;
            let k = 4;
            let states = Tensor::matrix(
                n,
                d,
                (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let got = knn_entropy_reward(&states, k).unwrap();
            for i in 0..n {
                // Repeatedly extract the minimum instead of sorting.
                let mut dists: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist(states.row_slice(i), states.row_slice(j)))
                    .collect();
                let mut sum = 0.0;
                for _ in 0..k {
                    let (pos, _) = dists
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap();
                    sum += dists.remove(pos);
                }
                assert!((got[i] - sum / k as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn on_tape_entropy_matches_plain_and_finite_differences() {
        // Well-separated points so a 1e-5 perturbation cannot reorder
        // neighbors.
        let pts = Tensor::matrix(
            5,
            2,
            vec![0.0, 0.0, 1.0, 0.2, -0.8, 0.9, 0.4, -1.1, 2.0, 2.0],
        );
        let mut set = ParamSet::new();
        set.insert("s", pts.clone());

        let mut tape = Tape::new();
        let sv = tape.param(&set, "s");
        let ent = knn_entropy_nodes(&mut tape, sv, 2).unwrap();
        let plain = knn_entropy_reward(&pts, 2).unwrap();
        for (i, &p) in plain.iter().enumerate() {
            assert!((tape.value(ent).data[i] - p).abs() < 1e-12);
        }
        let loss = tape.sum_all(ent);
        let grads = tape.backward(loss).unwrap();
        let auto = tape.param_grads(&set, &grads);
        let fd = finite_diff_grads(&set, 1e-5, |s| {
            let mut t = Tape::new();
            let v = t.param(s, "s");
            let e = knn_entropy_nodes(&mut t, v, 2).unwrap();
            let l = t.sum_all(e);
            t.value(l).item()
        });
        assert!(max_rel_err(&auto, &fd) < 1e-4);
    }

    #[test]
    fn code_reward_matches_norm_arithmetic() {
        let states = Tensor::matrix(2, 2, vec![3.0, 4.0, 0.5, -0.5]);
        let decoded = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, -0.5]);
        let r = code_reward(&states, &decoded);
        assert_eq!(r, vec![-5.0, 0.0]);
    }

    #[test]
    fn code_reward_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = [rng.gen_range(-2.0..2.0f64), rng.gen_range(-2.0..2.0)];
            let d = [rng.gen_range(-2.0..2.0f64), rng.gen_range(-2.0..2.0)];
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rot = |p: [f64; 2]| {
                [
                    theta.cos() * p[0] - theta.sin() * p[1],
                    theta.sin() * p[0] + theta.cos() * p[1],
                ]
            };
            let (sr, dr) = (rot(s), rot(d));
            let base = code_reward(
                &Tensor::matrix(1, 2, s.to_vec()),
                &Tensor::matrix(1, 2, d.to_vec()),
            )[0];
            let rotated = code_reward(
                &Tensor::matrix(1, 2, sr.to_vec()),
                &Tensor::matrix(1, 2, dr.to_vec()),
            )[0];
            assert!((base - rotated).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_zero_collapses_to_one_step_targets() {
        let rewards = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let values = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let g = lambda_returns(&rewards, &values, 0.9, 0.0);
        for t in 0..2 {
            for j in 0..2 {
                let expected = rewards.row_slice(t)[j] + 0.9 * values.row_slice(t + 1)[j];
                assert!((g.row_slice(t)[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn undiscounted_monte_carlo_case_sums_rewards_and_terminal_value() {
        let rewards = Tensor::matrix(2, 1, vec![1.0, 1.0]);
        let values = Tensor::matrix(3, 1, vec![0.0, 0.0, 3.0]);
        let g = lambda_returns(&rewards, &values, 1.0, 1.0);
        assert!((g.row_slice(0)[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_returns_match_recursive_oracle_and_tape_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, b) = (5, 3);
        let rewards = Tensor::matrix(h, b, (0..h * b).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let values =
            Tensor::matrix(h + 1, b, (0..(h + 1) * b).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (gamma, lambda) = (0.97, 0.8);
        let got = lambda_returns(&rewards, &values, gamma, lambda);

        fn oracle(t: usize, h: usize, r: &Tensor, v: &Tensor, j: usize, g: f64, l: f64) -> f64 {
            let next = if t + 1 < h {
                oracle(t + 1, h, r, v, j, g, l)
            } else {
                v.row_slice(h)[j]
            };
            r.row_slice(t)[j] + g * ((1.0 - l) * v.row_slice(t + 1)[j] + l * next)
        }
        for t in 0..h {
            for j in 0..b {
                let e = oracle(t, h, &rewards, &values, j, gamma, lambda);
                assert!((got.row_slice(t)[j] - e).abs() < 1e-12);
            }
        }

        let mut tape = Tape::new();
        let reward_nodes: Vec<V> = (0..h)
            .map(|t| tape.constant(Tensor::matrix(b, 1, rewards.row_slice(t).to_vec())))
            .collect();
        let value_nodes: Vec<V> = (0..=h)
            .map(|t| tape.constant(Tensor::matrix(b, 1, values.row_slice(t).to_vec())))
            .collect();
        let nodes = lambda_return_nodes(&mut tape, &reward_nodes, &value_nodes, gamma, lambda);
        for t in 0..h {
            for j in 0..b {
                assert!((tape.value(nodes[t]).data[j] - got.row_slice(t)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn action_samples_stay_inside_the_action_box() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = SkillPolicySet::new(cfg.clone(), &mut rng);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let det = tape.constant(Tensor::matrix(
                3,
                8,
                (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            ));
            let code = tape.constant(Tensor::matrix(
                3,
                4,
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
            let a = ps.act(&mut tape, det, code, &mut rng, false);
            for &v in &tape.value(a).data {
                assert!((cfg.action_low..=cfg.action_high).contains(&v));
            }
        }
    }

    #[test]
    fn actor_mean_moves_toward_the_higher_return_action() {
        let mut cfg = small_cfg();
        cfg.action_dim = 1;
        cfg.actor_lr = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = SkillPolicySet::new(cfg.clone(), &mut rng);
        let det_t = Tensor::matrix(1, 8, vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2, 0.1]);
        let code_t = Tensor::matrix(1, 4, vec![0.1, 0.5, -0.3, 0.2]);
        let mean_of = |ps: &SkillPolicySet| {
            let mut tape = Tape::new();
            let det = tape.constant(det_t.clone());
            let code = tape.constant(code_t.clone());
            let m = ps.act_mean(&mut tape, det, code, false);
            tape.value(m).item()
        };
        let before = mean_of(&ps);
        // Hand-set reward: the action value itself, so larger actions are
        // strictly better.
        for _ in 0..200 {
            let mut tape = Tape::new();
            let det = tape.constant(det_t.clone());
            let code = tape.constant(code_t.clone());
            let a = ps.act(&mut tape, det, code, &mut rng, true);
            let m = tape.mean_all(a);
            let loss = tape.neg(m);
            let grads = tape.backward(loss).unwrap();
            let mut g = tape.param_grads(&ps.actor, &grads);
            clip_grad_norm(&mut g, cfg.grad_clip);
            ps.actor.adam_step(&g, cfg.actor_lr).unwrap();
        }
        let after = mean_of(&ps);
        assert!(after > before + 0.3, "mean did not improve: {before} -> {after}");
    }

    #[test]
    fn critic_converges_to_the_geometric_series_value() {
        let mut cfg = small_cfg();
        cfg.gamma = 0.9;
        cfg.critic_lr = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = SkillPolicySet::new(cfg.clone(), &mut rng);
        let det_t = Tensor::matrix(2, 8, (0..16).map(|i| 0.1 * i as f64 - 0.8).collect());
        let code_t = Tensor::matrix(2, 4, vec![0.2, -0.1, 0.4, 0.0, -0.3, 0.5, 0.1, 0.2]);
        let c = 0.5;
        let h = 5;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let det = tape.constant(det_t.clone());
            let code = tape.constant(code_t.clone());
            let v = ps.value(&mut tape, det, code, false);
            let v_vals = tape.value(v).clone();
            // Self-loop dynamics: every step sees the same two states.
            let rewards = Tensor::matrix(h, 2, vec![c; h * 2]);
            let mut vdata = Vec::new();
            for _ in 0..=h {
                vdata.extend_from_slice(&v_vals.data);
            }
            let values = Tensor::matrix(h + 1, 2, vdata);
            let targets = lambda_returns(&rewards, &values, cfg.gamma, cfg.lambda);
            let mut target_mean = vec![0.0; 2];
            for t in 0..h {
                for j in 0..2 {
                    target_mean[j] += targets.row_slice(t)[j] / h as f64;
                }
            }
            let pred = ps.value(&mut tape, det, code, true);
            let tgt = tape.constant(Tensor::matrix(2, 1, target_mean));
            let diff = tape.sub(pred, tgt);
            let sq = tape.square(diff);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss).unwrap();
            let mut g = tape.param_grads(&ps.critic, &grads);
            clip_grad_norm(&mut g, cfg.grad_clip);
            ps.critic.adam_step(&g, cfg.critic_lr).unwrap();
        }
        let mut tape = Tape::new();
        let det = tape.constant(det_t);
        let code = tape.constant(code_t);
        let v = ps.value(&mut tape, det, code, false);
        let expected = c / (1.0 - cfg.gamma);
        for &val in &tape.value(v).data {
            assert!(
                (val - expected).abs() / expected < 0.05,
                "critic value {val} not within 5% of {expected}"
            );
        }
    }

    fn tiny_world_and_vq(rng: &mut ChaCha8Rng) -> (WorldModel, SkillVq) {
        let wcfg = WorldConfig {
            obs_dim: 3,
            action_dim: 2,
            deter_dim: 8,
            groups: 2,
            classes: 3,
            hidden: 8,
            layers: 1,
            learning_rate: 3e-4,
            grad_clip: 100.0,
            horizon: 3,
        };
        let wm = WorldModel::new(wcfg, rng);
        let vcfg = VqConfig {
            state_dim: 8,
            n_codes: 4,
            code_dim: 4,
            hidden: 8,
            layers: 1,
            ..VqConfig::default()
        };
        let vq = SkillVq::new(vcfg, rng);
        (wm, vq)
    }

    #[test]
    fn skill_training_never_mutates_the_world_model_or_codebook() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (wm, vq) = tiny_world_and_vq(&mut rng);
        let mut ps = SkillPolicySet::new(small_cfg(), &mut rng);
        let wm_before = serde_json::to_string(&wm.params).unwrap();
        let vq_before = serde_json::to_string(&(&vq.params, &vq.codebook)).unwrap();
        let actor_before = serde_json::to_string(&ps.actor).unwrap();
        let start = ModelState::initial(&wm.cfg, 6);
        for _ in 0..3 {
            ps.train_skills(&wm, &vq, &start, &mut rng).unwrap();
        }
        assert_eq!(serde_json::to_string(&wm.params).unwrap(), wm_before);
        assert_eq!(
            serde_json::to_string(&(&vq.params, &vq.codebook)).unwrap(),
            vq_before
        );
        assert_ne!(serde_json::to_string(&ps.actor).unwrap(), actor_before);
    }

    #[test]
    fn rewards_recompute_identically_from_serialized_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (wm, vq) = tiny_world_and_vq(&mut rng);
        let ps = SkillPolicySet::new(small_cfg(), &mut rng);
        let start = ModelState::initial(&wm.cfg, 6);
        let traj = ps.rollout_skills(&wm, &vq, &start, &mut rng).unwrap();
        let json = serde_json::to_string(&traj).unwrap();
        let loaded: ImaginedTrajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(loaded, traj);

        // Recompute both reward terms purely from the stored latents.
        let mut code_data = Vec::new();
        for &i in &loaded.codes {
            code_data.extend_from_slice(vq.codebook.code_row(i));
        }
        let mut tape = Tape::new();
        let codes_v = tape.constant(Tensor::matrix(loaded.codes.len(), 4, code_data));
        let decoded = vq.decode(&mut tape, codes_v, false);
        let decoded_vals = tape.value(decoded).clone();
        for (t, stored) in loaded.rewards.iter().enumerate() {
            let deter = &loaded.states[t + 1].deter;
            let ent = knn_entropy_reward(deter, ps.cfg.knn_k).unwrap();
            let code = code_reward(deter, &decoded_vals);
            for (j, &r) in stored.iter().enumerate() {
                assert!((r - (ent[j] + code[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_skills_reports_finite_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (wm, vq) = tiny_world_and_vq(&mut rng);
        let mut ps = SkillPolicySet::new(small_cfg(), &mut rng);
        let start = ModelState::initial(&wm.cfg, 6);
        let stats = ps.train_skills(&wm, &vq, &start, &mut rng).unwrap();
        assert!(stats.mean_reward.is_finite());
        assert!(stats.actor_loss.is_finite());
        assert!(stats.critic_loss.is_finite());
    }
}
