//! Latent dynamics model: posterior and prior over a
//! deterministic-plus-categorical model state, observation decoder, and a
//! reward head that only exists during fine-tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::substrate::nn::{linear, one_hot, Gru, Mlp};
use crate::substrate::optim::{clip_grad_norm, ParamSet};
use crate::substrate::tape::{Tape, V};
use crate::substrate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// GRU hidden size D_h.
    pub deter_dim: usize,
    /// Number of categorical groups G.
    pub groups: usize,
    /// Classes per group C.
    pub classes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Imagination horizon.
    pub horizon: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            obs_dim: 4,
            action_dim: 2,
            deter_dim: 64,
            groups: 8,
            classes: 8,
            hidden: 128,
            layers: 2,
            learning_rate: 3e-4,
            grad_clip: 100.0,
            horizon: 15,
        }
    }
}

impl WorldConfig {
    pub fn stoch_dim(&self) -> usize {
        self.groups * self.classes
    }
}

/// Latent model state for a batch of sequences: deterministic recurrent
/// rows plus a one-hot categorical sample and the logits it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub deter: Tensor,
    pub stoch: Tensor,
    pub logits: Tensor,
}

impl ModelState {
    pub fn batch(&self) -> usize {
        self.deter.rows()
    }

    /// Zero state for `batch` rows (uniform-logits, first-class one-hot is
    /// not used; stoch starts all-zero as there is no sample yet).
    pub fn initial(cfg: &WorldConfig, batch: usize) -> Self {
        ModelState {
            deter: Tensor::matrix(batch, cfg.deter_dim, vec![0.0; batch * cfg.deter_dim]),
            stoch: Tensor::matrix(batch, cfg.stoch_dim(), vec![0.0; batch * cfg.stoch_dim()]),
            logits: Tensor::matrix(batch, cfg.stoch_dim(), vec![0.0; batch * cfg.stoch_dim()]),
        }
    }

    /// Check the one-hot structure of the stochastic sample.
    pub fn stoch_is_one_hot(&self, cfg: &WorldConfig) -> bool {
        for r in 0..self.batch() {
            let row = self.stoch.row_slice(r);
            for g in 0..cfg.groups {
                let group = &row[g * cfg.classes..(g + 1) * cfg.classes];
                let ones = group.iter().filter(|&&v| v == 1.0).count();
                let zeros = group.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || zeros != cfg.classes - 1 {
                    return false;
                }
            }
        }
        true
    }
}

/// On-tape view of a model state.
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub deter: V,
    pub stoch: V,
    pub logits: V,
}

impl StateNodes {
    pub fn constant(tape: &mut Tape, state: &ModelState) -> Self {
        StateNodes {
            deter: tape.constant(state.deter.clone()),
            stoch: tape.constant(state.stoch.clone()),
            logits: tape.constant(state.logits.clone()),
        }
    }

    pub fn to_state(&self, tape: &Tape) -> ModelState {
        ModelState {
            deter: tape.value(self.deter).clone(),
            stoch: tape.value(self.stoch).clone(),
            logits: tape.value(self.logits).clone(),
        }
    }

    /// Features consumed by decoder and reward heads.
    pub fn features(&self, tape: &mut Tape) -> V {
        tape.concat_cols(self.deter, self.stoch)
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldConfig,
    pub params: ParamSet,
    obs_encoder: Mlp,
    post_head: Mlp,
    prior_head: Mlp,
    gru: Gru,
    decoder: Mlp,
    reward_head: Option<Mlp>,
}

fn mlp_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(layers));
    dims.push(output);
    dims
}

impl WorldModel {
    pub fn new(cfg: WorldConfig, rng: &mut impl Rng) -> Self {
        let stoch = cfg.stoch_dim();
        let obs_encoder = Mlp::new(
            "wm.obs_enc",
            mlp_dims(cfg.obs_dim, cfg.hidden, cfg.layers, cfg.hidden),
        );
        let post_head = Mlp::new(
            "wm.post",
            mlp_dims(cfg.deter_dim + cfg.hidden, cfg.hidden, cfg.layers, stoch),
        );
        let prior_head = Mlp::new(
            "wm.prior",
            mlp_dims(cfg.deter_dim, cfg.hidden, cfg.layers, stoch),
        );
        let gru = Gru::new("wm.gru", cfg.hidden, cfg.deter_dim);
        let decoder = Mlp::new(
            "wm.dec",
            mlp_dims(cfg.deter_dim + stoch, cfg.hidden, cfg.layers, cfg.obs_dim),
        );
        let mut params = ParamSet::new();
        obs_encoder.init(&mut params, rng);
        post_head.init(&mut params, rng);
        prior_head.init(&mut params, rng);
        gru.init(&mut params, rng);
        decoder.init(&mut params, rng);
        // embedding of (stoch, action) into the GRU input
        crate::substrate::nn::init_linear(&mut params, "wm.embed", stoch + cfg.action_dim, cfg.hidden, rng);
        WorldModel {
            cfg,
            params,
            obs_encoder,
            post_head,
            prior_head,
            gru,
            decoder,
            reward_head: None,
        }
    }

    pub fn has_reward_head(&self) -> bool {
        self.reward_head.is_some()
    }

    /// Create the reward predictor; fine-tuning only.
    pub fn enable_reward_head(&mut self, rng: &mut impl Rng) {
        if self.reward_head.is_some() {
            return;
        }
        let head = Mlp::new(
            "wm.reward",
            mlp_dims(
                self.cfg.deter_dim + self.cfg.stoch_dim(),
                self.cfg.hidden,
                self.cfg.layers,
                1,
            ),
        );
        head.init(&mut self.params, rng);
        self.reward_head = Some(head);
    }

    /// Shared deterministic recurrence: embed (prev stoch, prev action)
    /// and advance the GRU.
    fn deter_step(&self, tape: &mut Tape, prev: &StateNodes, prev_action: V, train: bool) -> V {
        let joined = tape.concat_cols(prev.stoch, prev_action);
        let emb_pre = linear(tape, &self.params, "wm.embed", joined, train);
        let emb = tape.tanh(emb_pre);
        self.gru.step(tape, &self.params, prev.deter, emb, train)
    }

    /// Straight-through categorical sample from `[B, G*C]` logits.
    fn sample_stoch(&self, tape: &mut Tape, logits: V, rng: &mut impl Rng) -> V {
        let batch = tape.value(logits).rows();
        let (g, c) = (self.cfg.groups, self.cfg.classes);
        let flat = tape.reshape(logits, vec![batch * g, c]);
        let probs = tape.softmax(flat);
        let prob_vals = tape.value(probs).clone();
        let mut picks = Vec::with_capacity(batch * g);
        for row in 0..batch * g {
            let p = prob_vals.row_slice(row);
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut cum = 0.0;
            let mut pick = c - 1;
            for (k, &pv) in p.iter().enumerate() {
                cum += pv;
                if u < cum {
                    pick = k;
                    break;
                }
            }
            picks.push(pick);
        }
        let hard = one_hot(&picks, c);
        let st = tape.straight_through(probs, hard);
        tape.reshape(st, vec![batch, g * c])
    }

    /// Posterior transition `q(s_t | s_{t-1}, a_{t-1}, x_t)`.
    pub fn posterior_step(
        &self,
        tape: &mut Tape,
        prev: &StateNodes,
        prev_action: V,
        obs: V,
        rng: &mut impl Rng,
        train: bool,
    ) -> StateNodes {
        let deter = self.deter_step(tape, prev, prev_action, train);
        let obs_emb = self.obs_encoder.forward(tape, &self.params, obs, train);
        let joined = tape.concat_cols(deter, obs_emb);
        let logits = self.post_head.forward(tape, &self.params, joined, train);
        let stoch = self.sample_stoch(tape, logits, rng);
        StateNodes { deter, stoch, logits }
    }

    /// Prior transition `p(s_t | s_{t-1}, a_{t-1})`.
    pub fn prior_step(
        &self,
        tape: &mut Tape,
        prev: &StateNodes,
        prev_action: V,
        rng: &mut impl Rng,
        train: bool,
    ) -> StateNodes {
        let deter = self.deter_step(tape, prev, prev_action, train);
        let logits = self.prior_head.forward(tape, &self.params, deter, train);
        let stoch = self.sample_stoch(tape, logits, rng);
        StateNodes { deter, stoch, logits }
    }

    /// Prior logits for an already-computed deterministic state.
    pub fn prior_logits(&self, tape: &mut Tape, deter: V, train: bool) -> V {
        self.prior_head.forward(tape, &self.params, deter, train)
    }

    /// Posterior logits for a deterministic state plus an observation.
    pub fn posterior_logits(&self, tape: &mut Tape, deter: V, obs: V, train: bool) -> V {
        let obs_emb = self.obs_encoder.forward(tape, &self.params, obs, train);
        let joined = tape.concat_cols(deter, obs_emb);
        self.post_head.forward(tape, &self.params, joined, train)
    }

    /// Decode model-state features back to observation space.
    pub fn decode(&self, tape: &mut Tape, state: &StateNodes, train: bool) -> V {
        let feats = tape.concat_cols(state.deter, state.stoch);
        self.decoder.forward(tape, &self.params, feats, train)
    }

    /// `[B, 1]` per-sample KL between grouped categorical distributions,
    /// on-tape.
    pub fn kl_nodes(&self, tape: &mut Tape, q_logits: V, p_logits: V) -> V {
        kl_categorical_nodes(tape, q_logits, p_logits, self.cfg.groups, self.cfg.classes)
    }

    /// Mean reward prediction per batch row; fine-tuning only.
    pub fn predict_reward(&self, tape: &mut Tape, state: &StateNodes, train: bool) -> Result<V> {
        let head = self.reward_head.as_ref().ok_or_else(|| {
            ChoreoError::contract(
                "predict_reward called before fine-tuning (reward head does not exist)",
            )
        })?;
        let feats = tape.concat_cols(state.deter, state.stoch);
        Ok(head.forward(tape, &self.params, feats, train))
    }

    /// ELBO over a `B x T` batch of (obs, action) sequences.
    ///
    /// Returns the scalar loss node and the posterior states at every
    /// step. `actions[t]` is the action taken after observing `obs[t]`;
    /// step `t` conditions on `actions[t-1]` (zeros at `t = 0`).
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        obs: &[Tensor],
        actions: &[Tensor],
        rng: &mut impl Rng,
        train: bool,
    ) -> Result<(V, Vec<StateNodes>)> {
        self.elbo_unroll(tape, obs, actions, rng, train, None)
    }

    /// Unroll with an optional replacement for the stochastic sampler.
    /// The hook receives the posterior logits and the step index and must
    /// return a `[B, G*C]` stochastic-state node.
    fn elbo_unroll(
        &self,
        tape: &mut Tape,
        obs: &[Tensor],
        actions: &[Tensor],
        rng: &mut impl Rng,
        train: bool,
        mut sampler: Option<&mut dyn FnMut(&mut Tape, V, usize) -> V>,
    ) -> Result<(V, Vec<StateNodes>)> {
        let t_len = obs.len();
        if t_len < 2 {
            return Err(ChoreoError::contract(format!(
                "elbo_loss needs at least 2 timesteps, got {t_len}"
            )));
        }
        if actions.len() != t_len {
            return Err(ChoreoError::contract(
                "elbo_loss obs/action length mismatch",
            ));
        }
        let batch = obs[0].rows();
        let init = ModelState::initial(&self.cfg, batch);
        let mut prev = StateNodes::constant(tape, &init);
        let zero_action = tape.constant(Tensor::matrix(
            batch,
            self.cfg.action_dim,
            vec![0.0; batch * self.cfg.action_dim],
        ));
        let mut states = Vec::with_capacity(t_len);
        let mut total: Option<V> = None;
        for t in 0..t_len {
            let prev_action = if t == 0 {
                zero_action
            } else {
                tape.constant(actions[t - 1].clone())
            };
            let obs_v = tape.constant(obs[t].clone());
            let deter = self.deter_step(tape, &prev, prev_action, train);
            let obs_emb = self.obs_encoder.forward(tape, &self.params, obs_v, train);
            let joined = tape.concat_cols(deter, obs_emb);
            let post_logits = self.post_head.forward(tape, &self.params, joined, train);
            let prior_logits = self.prior_head.forward(tape, &self.params, deter, train);
            let stoch = match sampler.as_deref_mut() {
                None => self.sample_stoch(tape, post_logits, rng),
                Some(f) => f(tape, post_logits, t),
            };
            let state = StateNodes {
                deter,
                stoch,
                logits: post_logits,
            };
            let kl = self.kl_nodes(tape, post_logits, prior_logits); // [B,1]
            let recon = self.decode(tape, &state, train);
            let err = tape.sub(recon, obs_v);
            let sq = tape.square(err);
            let sse = tape.sum_rows(sq); // [B,1]
            let half = tape.scale(sse, 0.5);
            let nll = tape.add_scalar(half, 0.5 * self.cfg.obs_dim as f64 * LN_2PI);
            let step_loss = tape.add(kl, nll);
            let step_sum = tape.sum_all(step_loss);
            total = Some(match total {
                None => step_sum,
                Some(acc) => tape.add(acc, step_sum),
            });
            states.push(state);
            prev = state;
        }
        let loss = tape.scale(total.unwrap(), 1.0 / (batch * t_len) as f64);
        Ok((loss, states))
    }

    /// One optimizer step on a replay batch; optionally regresses the
    /// reward head when rewards are provided (fine-tuning).
    pub fn train_batch(
        &mut self,
        obs: &[Tensor],
        actions: &[Tensor],
        rewards: Option<&[Tensor]>,
        rng: &mut impl Rng,
    ) -> Result<(f64, Vec<ModelState>)> {
        let mut tape = Tape::new();
        let (mut loss, states) = self.elbo_loss(&mut tape, obs, actions, rng, true)?;
        if let Some(rewards) = rewards {
            let mut reward_terms: Option<V> = None;
            for (t, state) in states.iter().enumerate() {
                let pred = self.predict_reward(&mut tape, state, true)?;
                let target = tape.constant(rewards[t].clone());
                let diff = tape.sub(pred, target);
                let sq = tape.square(diff);
                let s = tape.sum_all(sq);
                reward_terms = Some(match reward_terms {
                    None => s,
                    Some(acc) => tape.add(acc, s),
                });
            }
            let batch = obs[0].rows();
            let mean = tape.scale(reward_terms.unwrap(), 1.0 / (batch * obs.len()) as f64);
            loss = tape.add(loss, mean);
        }
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut grads = tape.param_grads(&self.params, &grads);
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.params.adam_step(&grads, self.cfg.learning_rate)?;
        let states = states.iter().map(|s| s.to_state(&tape)).collect();
        Ok((loss_val, states))
    }

    /// Roll the prior forward under a policy. The trajectory includes the
    /// start states, so its length is `horizon + 1`.
    pub fn imagine(
        &self,
        tape: &mut Tape,
        start: StateNodes,
        mut policy: impl FnMut(&mut Tape, &StateNodes, &mut dyn rand::RngCore) -> V,
        horizon: usize,
        rng: &mut impl Rng,
        train: bool,
    ) -> (Vec<StateNodes>, Vec<V>) {
        let mut states = vec![start];
        let mut actions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let cur = *states.last().unwrap();
            let action = policy(tape, &cur, rng);
            let next = self.prior_step(tape, &cur, action, rng, train);
            actions.push(action);
            states.push(next);
        }
        (states, actions)
    }
}

/// `[B, 1]` KL divergence between grouped categorical distributions given
/// as `[B, G*C]` logits, on-tape.
pub fn kl_categorical_nodes(tape: &mut Tape, q_logits: V, p_logits: V, groups: usize, classes: usize) -> V {
    let batch = tape.value(q_logits).rows();
    assert_eq!(tape.value(q_logits).shape, tape.value(p_logits).shape);
    let qf = tape.reshape(q_logits, vec![batch * groups, classes]);
    let pf = tape.reshape(p_logits, vec![batch * groups, classes]);
    let q = tape.softmax(qf);
    let p = tape.softmax(pf);
    let logq = tape.log(q);
    let logp = tape.log(p);
    let diff = tape.sub(logq, logp);
    let terms = tape.mul(q, diff);
    let per_group = tape.sum_rows(terms); // [B*G, 1]
    let grouped = tape.reshape(per_group, vec![batch, groups]);
    tape.sum_rows(grouped) // [B, 1]
}

/// Off-tape KL between grouped categorical logits; returns `[B, 1]`.
pub fn kl_categorical(q_logits: &Tensor, p_logits: &Tensor, groups: usize, classes: usize) -> Tensor {
    let mut tape = Tape::new();
    let q = tape.constant(q_logits.clone());
    let p = tape.constant(p_logits.clone());
    let kl = kl_categorical_nodes(&mut tape, q, p, groups, classes);
    tape.value(kl).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::gradcheck::{finite_diff_grads, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> WorldConfig {
        WorldConfig {
            obs_dim: 3,
            action_dim: 2,
            deter_dim: 8,
            groups: 2,
            classes: 3,
            hidden: 8,
            layers: 1,
            learning_rate: 3e-4,
            grad_clip: 100.0,
            horizon: 5,
        }
    }

    fn zero_params(set: &mut ParamSet) {
        let names: Vec<String> = set.names().cloned().collect();
        for name in names {
            for v in &mut set.get_mut(&name).data {
                *v = 0.0;
            }
        }
    }

    /// Row-wise softmax of `[B, G*C]` logits, grouped, returned as `[B*G, C]`.
    fn softmax_groups(logits: &Tensor, groups: usize, classes: usize) -> Tensor {
        let batch = logits.rows();
        let mut out = Vec::with_capacity(batch * groups * classes);
        for r in 0..batch {
            let row = logits.row_slice(r);
            for g in 0..groups {
                let group = &row[g * classes..(g + 1) * classes];
                let m = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = group.iter().map(|&v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / z));
            }
        }
        Tensor::matrix(batch * groups, classes, out)
    }

    fn random_batch(
        cfg: &WorldConfig,
        batch: usize,
        t_len: usize,
        rng: &mut impl Rng,
    ) -> (Vec<Tensor>, Vec<Tensor>) {
        let obs = (0..t_len)
            .map(|_| {
                Tensor::matrix(
                    batch,
                    cfg.obs_dim,
                    (0..batch * cfg.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let actions = (0..t_len)
            .map(|_| {
                Tensor::matrix(
                    batch,
                    cfg.action_dim,
                    (0..batch * cfg.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        (obs, actions)
    }

    #[test]
    fn posterior_step_is_deterministic_under_a_fixed_seed() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let init = ModelState::initial(&cfg, 2);
        let obs = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.8, 0.1, 0.0, -0.5]);
        let act = Tensor::matrix(2, 2, vec![0.5, -0.5, 0.2, 0.9]);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let prev = StateNodes::constant(&mut tape, &init);
            let o = tape.constant(obs.clone());
            let a = tape.constant(act.clone());
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let next = wm.posterior_step(&mut tape, &prev, a, o, &mut r, false);
            next.to_state(&tape)
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn uniform_logits_sample_each_class_at_expected_frequency() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        // 5000 rows x 2 groups = 10,000 categorical draws over 3 classes.
        let rows = 5000;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(rows, 6, vec![0.0; rows * 6]));
        let stoch = wm.sample_stoch(&mut tape, logits, &mut rng);
        let vals = tape.value(stoch);
        let mut counts = [0usize; 3];
        for r in 0..rows {
            let row = vals.row_slice(r);
            for g in 0..2 {
                for c in 0..3 {
                    if row[g * 3 + c] == 1.0 {
                        counts[c] += 1;
                    }
                }
            }
        }
        let n: f64 = 10_000.0;
        let p: f64 = 1.0 / 3.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for &count in &counts {
            assert!(
                (count as f64 - n * p).abs() <= 3.0 * sigma,
                "class count {count} outside 3 sigma of {}",
                n * p
            );
        }
        assert_eq!(counts.iter().sum::<usize>(), 10_000);
    }

    #[test]
    fn straight_through_sample_grads_equal_probability_grads_for_linear_loss() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let init = ModelState::initial(&cfg, 2);
        let obs = Tensor::matrix(2, 3, vec![0.4, -0.1, 0.6, -0.3, 0.2, 0.0]);
        let act = Tensor::matrix(2, 2, vec![0.1, -0.7, 0.8, 0.3]);
        let coef = Tensor::matrix(2, 6, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());

        // Hard path: loss = sum(coef * straight-through sample).
        let mut tape1 = Tape::new();
        let prev = StateNodes::constant(&mut tape1, &init);
        let o = tape1.constant(obs.clone());
        let a = tape1.constant(act.clone());
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let next = wm.posterior_step(&mut tape1, &prev, a, o, &mut r, true);
        let c1 = tape1.constant(coef.clone());
        let prod = tape1.mul(next.stoch, c1);
        let loss1 = tape1.sum_all(prod);
        let g1 = tape1.backward(loss1).unwrap();
        let g1 = tape1.param_grads(&wm.params, &g1);

        // Soft path: the sample is replaced by the probabilities.
        let mut tape2 = Tape::new();
        let prev = StateNodes::constant(&mut tape2, &init);
        let o = tape2.constant(obs.clone());
        let a = tape2.constant(act.clone());
        let deter = wm.deter_step(&mut tape2, &prev, a, true);
        let logits = wm.posterior_logits(&mut tape2, deter, o, true);
        let flat = tape2.reshape(logits, vec![4, 3]);
        let probs = tape2.softmax(flat);
        let soft = tape2.reshape(probs, vec![2, 6]);
        let c2 = tape2.constant(coef.clone());
        let prod = tape2.mul(soft, c2);
        let loss2 = tape2.sum_all(prod);
        let g2 = tape2.backward(loss2).unwrap();
        let g2 = tape2.param_grads(&wm.params, &g2);

        assert!(max_rel_err(&g1, &g2) < 1e-10);
    }

    #[test]
    fn prior_and_posterior_share_the_deterministic_recurrence() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let init = ModelState::initial(&cfg, 2);
        let obs = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.8, 0.1, 0.0, -0.5]);
        let act = Tensor::matrix(2, 2, vec![0.5, -0.5, 0.2, 0.9]);
        let mut tape = Tape::new();
        let prev = StateNodes::constant(&mut tape, &init);
        let o = tape.constant(obs);
        let a = tape.constant(act);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let post = wm.posterior_step(&mut tape, &prev, a, o, &mut r1, false);
        let prior = wm.prior_step(&mut tape, &prev, a, &mut r2, false);
        assert_eq!(tape.value(post.deter), tape.value(prior.deter));
    }

    #[test]
    fn kl_is_zero_when_distributions_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let kl = kl_categorical(&logits, &logits, 2, 4);
        for &v in &kl.data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_matches_closed_form_for_two_point_distributions() {
        // q = (0.5, 0.5), p = (0.25, 0.75).
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let p = Tensor::matrix(1, 2, vec![0.0, 3.0f64.ln()]);
        let kl = kl_categorical(&q, &p, 1, 2);
        let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((expected - 0.14384).abs() < 1e-4);
        assert!((kl.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_for_random_logit_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = Tensor::matrix(1, 8, (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let p = Tensor::matrix(1, 8, (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let kl = kl_categorical(&q, &p, 2, 4);
            assert!(kl.item() >= -1e-12);
        }
    }

    #[test]
    fn elbo_requires_at_least_two_steps() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let (obs, actions) = random_batch(&cfg, 2, 1, &mut rng);
        let mut tape = Tape::new();
        let err = wm.elbo_loss(&mut tape, &obs, &actions, &mut rng, false);
        assert!(matches!(err, Err(ChoreoError::Contract(_))));
    }

    #[test]
    fn elbo_with_zero_weights_equals_the_gaussian_constant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut wm = WorldModel::new(cfg.clone(), &mut rng);
        zero_params(&mut wm.params);
        // Zero observations reconstruct exactly; posterior and prior logits
        // are both all-zero so the KL vanishes.
        let obs: Vec<Tensor> = (0..3).map(|_| Tensor::matrix(2, 3, vec![0.0; 6])).collect();
        let actions: Vec<Tensor> = (0..3).map(|_| Tensor::matrix(2, 2, vec![0.0; 4])).collect();
        let mut tape = Tape::new();
        let (loss, _) = wm.elbo_loss(&mut tape, &obs, &actions, &mut rng, false).unwrap();
        let expected = 0.5 * cfg.obs_dim as f64 * LN_2PI;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradients_match_finite_differences_on_a_tiny_model() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let (obs, actions) = random_batch(&cfg, 2, 3, &mut rng);

        // Base run with the straight-through sampler; record per-step hard
        // samples and the probabilities they were drawn from.
        let mut tape = Tape::new();
        let mut base_rng = ChaCha8Rng::seed_from_u64(42);
        let (loss, states) = wm
            .elbo_loss(&mut tape, &obs, &actions, &mut base_rng, true)
            .unwrap();
        let base_loss = tape.value(loss).item();
        let offsets: Vec<Tensor> = states
            .iter()
            .map(|s| {
                let hard = tape.value(s.stoch);
                let probs = softmax_groups(tape.value(s.logits), cfg.groups, cfg.classes);
                let batch = hard.rows();
                let flat_hard = Tensor::matrix(
                    batch * cfg.groups,
                    cfg.classes,
                    hard.data.clone(),
                );
                let mut off = flat_hard.clone();
                for (o, p) in off.data.iter_mut().zip(&probs.data) {
                    *o -= p;
                }
                off
            })
            .collect();
        let grads = tape.backward(loss).unwrap();
        let auto = tape.param_grads(&wm.params, &grads);

        // Smooth surrogate: stoch(theta) = probs(theta) + frozen offset. At
        // the base parameters its value and gradient coincide with the
        // straight-through estimator, and it is differentiable, so central
        // differences apply.
        let surrogate = |set: &ParamSet| -> f64 {
            let mut model = wm.clone();
            model.params = set.clone();
            let mut t = Tape::new();
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            let offs = offsets.clone();
            let groups = cfg.groups;
            let classes = cfg.classes;
            let mut sampler = move |tape: &mut Tape, logits: V, step: usize| {
                let batch = tape.value(logits).rows();
                let flat = tape.reshape(logits, vec![batch * groups, classes]);
                let probs = tape.softmax(flat);
                let off = tape.constant(offs[step].clone());
                let shifted = tape.add(probs, off);
                tape.reshape(shifted, vec![batch, groups * classes])
            };
            let (l, _) = model
                .elbo_unroll(&mut t, &obs, &actions, &mut dummy, false, Some(&mut sampler))
                .unwrap();
            t.value(l).item()
        };
        assert!((surrogate(&wm.params) - base_loss).abs() < 1e-12);
        let fd = finite_diff_grads(&wm.params, 1e-5, surrogate);
        let err = max_rel_err(&auto, &fd);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn elbo_decreases_and_posterior_diverges_from_prior_on_linear_dynamics() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut wm = WorldModel::new(cfg.clone(), &mut rng);
        // x' = 0.9 x + 0.1 [a; a_mean; -a_mean-ish] with mild mixing.
        let gen = |rng: &mut ChaCha8Rng| {
            let (batch, t_len) = (4, 8);
            let mut xs = vec![vec![0.0f64; 3]; batch];
            for x in &mut xs {
                for v in x.iter_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
            let mut obs = Vec::new();
            let mut actions = Vec::new();
            for _ in 0..t_len {
                let mut o = Vec::new();
                for x in &xs {
                    o.extend_from_slice(x);
                }
                obs.push(Tensor::matrix(batch, 3, o));
                let mut a_flat = Vec::new();
                let mut acts = Vec::new();
                for _ in 0..batch {
                    let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    a_flat.extend_from_slice(&a);
                    acts.push(a);
                }
                actions.push(Tensor::matrix(batch, 2, a_flat));
                for (x, a) in xs.iter_mut().zip(&acts) {
                    let nx = [
                        0.9 * x[0] + 0.1 * a[0],
                        0.9 * x[1] + 0.1 * a[1],
                        0.9 * x[2] + 0.05 * (a[0] - a[1]),
                    ];
                    *x = nx.to_vec();
                }
            }
            (obs, actions)
        };
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (obs, actions) = gen(&mut rng);
            let (l, _) = wm.train_batch(&obs, &actions, None, &mut rng).unwrap();
            losses.push(l);
        }
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");

        // The observation must make the posterior informative relative to
        // the prior on trained weights.
        let (obs, actions) = gen(&mut rng);
        let mut tape = Tape::new();
        let (_, states) = wm.elbo_loss(&mut tape, &obs, &actions, &mut rng, false).unwrap();
        let mut total_kl = 0.0;
        let mut count = 0;
        for (t, s) in states.iter().enumerate().skip(1) {
            let _ = t;
            let prior_logits = wm.prior_logits(&mut tape, s.deter, false);
            let kl = wm.kl_nodes(&mut tape, s.logits, prior_logits);
            total_kl += tape.value(kl).data.iter().sum::<f64>();
            count += tape.value(kl).rows();
        }
        assert!(total_kl / count as f64 > 1e-4);
    }

    #[test]
    fn imagine_horizon_zero_returns_only_the_start_state() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let init = ModelState::initial(&cfg, 2);
        let mut tape = Tape::new();
        let start = StateNodes::constant(&mut tape, &init);
        let (states, actions) = wm.imagine(
            &mut tape,
            start,
            |tape, _s, _r| tape.constant(Tensor::matrix(2, 2, vec![0.0; 4])),
            0,
            &mut rng,
            false,
        );
        assert_eq!(states.len(), 1);
        assert!(actions.is_empty());
    }

    #[test]
    fn imagine_is_reproducible_and_keeps_one_hot_samples() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let init = ModelState::initial(&cfg, 3);
        let roll = |seed: u64, wm: &WorldModel| -> Vec<ModelState> {
            let mut tape = Tape::new();
            let start = StateNodes::constant(&mut tape, &init);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (states, _) = wm.imagine(
                &mut tape,
                start,
                |tape, _s, rng| {
                    let mut data = Vec::new();
                    for _ in 0..6 {
                        data.push(rng.gen_range(-1.0..1.0f64));
                    }
                    tape.constant(Tensor::matrix(3, 2, data))
                },
                5,
                &mut r,
                false,
            );
            states.iter().map(|s| s.to_state(&tape)).collect()
        };
        assert_eq!(roll(99, &wm), roll(99, &wm));
        for _ in 0..100 {
            let seed = rng.gen();
            let states = roll(seed, &wm);
            assert_eq!(states.len(), 6);
            for s in states.iter().skip(1) {
                assert!(s.stoch_is_one_hot(&cfg));
                assert!(s.deter.is_finite() && s.logits.is_finite());
            }
        }
    }

    #[test]
    fn predict_reward_is_refused_before_fine_tuning() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let wm = WorldModel::new(cfg.clone(), &mut rng);
        let init = ModelState::initial(&cfg, 1);
        let mut tape = Tape::new();
        let s = StateNodes::constant(&mut tape, &init);
        assert!(matches!(
            wm.predict_reward(&mut tape, &s, false),
            Err(ChoreoError::Contract(_))
        ));
    }

    #[test]
    fn reward_head_with_zero_weights_predicts_zero() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut wm = WorldModel::new(cfg.clone(), &mut rng);
        wm.enable_reward_head(&mut rng);
        zero_params(&mut wm.params);
        let init = ModelState::initial(&cfg, 2);
        let mut tape = Tape::new();
        let s = StateNodes::constant(&mut tape, &init);
        let pred = wm.predict_reward(&mut tape, &s, false).unwrap();
        assert_eq!(tape.value(pred).data, vec![0.0, 0.0]);
    }

    #[test]
    fn reward_head_fits_a_constant_reward() {
        let mut cfg = tiny_cfg();
        cfg.learning_rate = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut wm = WorldModel::new(cfg.clone(), &mut rng);
        wm.enable_reward_head(&mut rng);
        for _ in 0..1200 {
            let (obs, actions) = random_batch(&cfg, 2, 4, &mut rng);
            let rewards: Vec<Tensor> = (0..4).map(|_| Tensor::matrix(2, 1, vec![1.0, 1.0])).collect();
            wm.train_batch(&obs, &actions, Some(&rewards), &mut rng).unwrap();
        }
        let (obs, actions) = random_batch(&cfg, 8, 4, &mut rng);
        let mut tape = Tape::new();
        let (_, states) = wm.elbo_loss(&mut tape, &obs, &actions, &mut rng, false).unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for s in &states {
            let pred = wm.predict_reward(&mut tape, s, false).unwrap();
            sum += tape.value(pred).data.iter().sum::<f64>();
            count += tape.value(pred).data.len();
        }
        let mean = sum / count as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean prediction {mean} too far from 1.0");
    }

    #[test]
    fn pretraining_without_rewards_leaves_the_reward_head_untouched() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut wm = WorldModel::new(cfg.clone(), &mut rng);
        wm.enable_reward_head(&mut rng);
        let before: Vec<(String, Tensor)> = wm
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("wm.reward"))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let (obs, actions) = random_batch(&cfg, 2, 4, &mut rng);
        wm.train_batch(&obs, &actions, None, &mut rng).unwrap();
        for (name, old) in before {
            assert_eq!(wm.params.get(&name), &old, "{name} changed during pretraining");
        }
    }
}
