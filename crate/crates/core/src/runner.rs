//! Run orchestration: the collect/pretrain phase, the fine-tuning phase,
//! evaluation sweeps, and the codebook benchmark, with lockfiles,
//! versioned checkpoints, and crash-resumable run state.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::adapt::{
    zero_shot_eval, EvalMetrics, MetaConfig, MetaController, RewardSmoother, SelectMode,
};
use crate::codebook::{bench, SkillVq, VqConfig};
use crate::config::{RunConfig, RunMode};
use crate::envs::{
    load_offline_dataset, Episode, PointMassEnv, ReplayBuffer, POINT_MASS_ACTION_DIM,
    POINT_MASS_OBS_DIM,
};
use crate::error::{ChoreoError, Result};
use crate::explore::{ExploreConfig, ExploreRewardMode, ExplorationPolicy};
use crate::metrics::MetricsWriter;
use crate::skills::{SkillConfig, SkillPolicySet};
use crate::substrate::optim::ParamSet;
use crate::substrate::{Tape, Tensor};
use crate::world::{ModelState, StateNodes, WorldConfig, WorldModel};

pub const MODEL_CHECKPOINT_VERSION: u32 = 1;
/// Online runs persist resumable state every this many finished episodes.
const STATE_SAVE_EPISODES: usize = 10;
/// Offline runs persist state every this many gradient steps.
const STATE_SAVE_ROUNDS: usize = 500;

// ---------------------------------------------------------------------------
// Checkpoint files (version field first).

#[derive(Serialize, Deserialize)]
struct WorldCheckpoint {
    version: u32,
    cfg: WorldConfig,
    has_reward_head: bool,
    params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct VqCheckpoint {
    version: u32,
    cfg: VqConfig,
    params: ParamSet,
    codebook: crate::codebook::Codebook,
    batches_seen: u64,
}

#[derive(Serialize, Deserialize)]
struct ActorCriticCheckpoint<C> {
    version: u32,
    cfg: C,
    actor: ParamSet,
    critic: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct MetaCheckpoint {
    version: u32,
    cfg: MetaConfig,
    actor: ParamSet,
    critic: ParamSet,
    smoother: RewardSmoother,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)
        .map_err(|e| ChoreoError::Checkpoint(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let json = std::fs::read_to_string(path)?;
    serde_json::from_str(&json)
        .map_err(|e| ChoreoError::Checkpoint(format!("parse {}: {e}", path.display())))
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != MODEL_CHECKPOINT_VERSION {
        return Err(ChoreoError::Checkpoint(format!(
            "{what}: unsupported checkpoint version {version} (expected {MODEL_CHECKPOINT_VERSION})"
        )));
    }
    Ok(())
}

pub fn save_world(path: &Path, wm: &WorldModel) -> Result<()> {
    write_json(
        path,
        &WorldCheckpoint {
            version: MODEL_CHECKPOINT_VERSION,
            cfg: wm.cfg.clone(),
            has_reward_head: wm.has_reward_head(),
            params: wm.params.clone(),
        },
    )
}

pub fn load_world(path: &Path) -> Result<WorldModel> {
    let ck: WorldCheckpoint = read_json(path)?;
    check_version(ck.version, "world model")?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut wm = WorldModel::new(ck.cfg, &mut seed_rng);
    if ck.has_reward_head {
        wm.enable_reward_head(&mut seed_rng);
    }
    if wm.params.raw().keys().ne(ck.params.raw().keys()) {
        return Err(ChoreoError::Checkpoint(
            "world model: parameter names do not match the config shape".to_string(),
        ));
    }
    wm.params = ck.params;
    Ok(wm)
}

pub fn save_vq(path: &Path, vq: &SkillVq) -> Result<()> {
    write_json(
        path,
        &VqCheckpoint {
            version: MODEL_CHECKPOINT_VERSION,
            cfg: vq.cfg.clone(),
            params: vq.params.clone(),
            codebook: vq.codebook.clone(),
            batches_seen: vq.batches_seen,
        },
    )
}

pub fn load_vq(path: &Path) -> Result<SkillVq> {
    let ck: VqCheckpoint = read_json(path)?;
    check_version(ck.version, "codebook")?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut vq = SkillVq::new(ck.cfg, &mut seed_rng);
    vq.params = ck.params;
    vq.codebook = ck.codebook;
    vq.batches_seen = ck.batches_seen;
    Ok(vq)
}

pub fn save_skills(path: &Path, skills: &SkillPolicySet) -> Result<()> {
    write_json(
        path,
        &ActorCriticCheckpoint {
            version: MODEL_CHECKPOINT_VERSION,
            cfg: skills.cfg.clone(),
            actor: skills.actor.clone(),
            critic: skills.critic.clone(),
        },
    )
}

pub fn load_skills(path: &Path) -> Result<SkillPolicySet> {
    let ck: ActorCriticCheckpoint<SkillConfig> = read_json(path)?;
    check_version(ck.version, "skills")?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut skills = SkillPolicySet::new(ck.cfg, &mut seed_rng);
    skills.actor = ck.actor;
    skills.critic = ck.critic;
    Ok(skills)
}

pub fn save_explore(path: &Path, policy: &ExplorationPolicy) -> Result<()> {
    write_json(
        path,
        &ActorCriticCheckpoint {
            version: MODEL_CHECKPOINT_VERSION,
            cfg: policy.cfg.clone(),
            actor: policy.actor.clone(),
            critic: policy.critic.clone(),
        },
    )
}

pub fn load_explore(path: &Path) -> Result<ExplorationPolicy> {
    let ck: ActorCriticCheckpoint<ExploreConfig> = read_json(path)?;
    check_version(ck.version, "exploration")?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = ExplorationPolicy::new(ck.cfg, &mut seed_rng);
    policy.actor = ck.actor;
    policy.critic = ck.critic;
    Ok(policy)
}

pub fn save_meta(path: &Path, meta: &MetaController, smoother: &RewardSmoother) -> Result<()> {
    write_json(
        path,
        &MetaCheckpoint {
            version: MODEL_CHECKPOINT_VERSION,
            cfg: meta.cfg.clone(),
            actor: meta.actor.clone(),
            critic: meta.critic.clone(),
            smoother: smoother.clone(),
        },
    )
}

pub fn load_meta(path: &Path) -> Result<(MetaController, RewardSmoother)> {
    let ck: MetaCheckpoint = read_json(path)?;
    check_version(ck.version, "meta controller")?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut meta = MetaController::new(ck.cfg, &mut seed_rng);
    meta.actor = ck.actor;
    meta.critic = ck.critic;
    Ok((meta, ck.smoother))
}

// ---------------------------------------------------------------------------
// Output directory, lockfile, run state.

/// Exclusive ownership of an output directory for the duration of a run.
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn acquire_lock(dir: &Path) -> Result<LockGuard> {
    let path = dir.join(".lock");
    match std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
    {
        Ok(_) => Ok(LockGuard { path }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ChoreoError::contract(
            format!("output directory {} is locked by another run", dir.display()),
        )),
        Err(e) => Err(e.into()),
    }
}

/// Resumable phase progress: everything the training loop consumes that
/// is not already in a model checkpoint.
#[derive(Serialize, Deserialize)]
struct RunState {
    version: u32,
    phase: String,
    steps_done: usize,
    rng: ChaCha8Rng,
    episodes: Vec<Episode>,
    smoother: Option<RewardSmoother>,
    episode_returns: Vec<f64>,
}

/// Filenames inside an artifacts directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn world(&self) -> PathBuf {
        self.dir.join("world_model.json")
    }
    pub fn codebook(&self) -> PathBuf {
        self.dir.join("codebook.json")
    }
    pub fn skills(&self) -> PathBuf {
        self.dir.join("skills.json")
    }
    pub fn exploration(&self) -> PathBuf {
        self.dir.join("exploration.json")
    }
    pub fn meta(&self) -> PathBuf {
        self.dir.join("meta.json")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("run_state.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.cfg")
    }
}

// ---------------------------------------------------------------------------
// Config -> module configs.

pub fn world_cfg_from(cfg: &RunConfig) -> WorldConfig {
    WorldConfig {
        obs_dim: POINT_MASS_OBS_DIM,
        action_dim: POINT_MASS_ACTION_DIM,
        deter_dim: cfg.world_deter_dim,
        groups: cfg.world_groups,
        classes: cfg.world_classes,
        hidden: cfg.world_hidden,
        layers: cfg.world_layers,
        learning_rate: cfg.world_lr,
        grad_clip: cfg.world_grad_clip,
        horizon: cfg.world_horizon,
    }
}

pub fn vq_cfg_from(cfg: &RunConfig) -> VqConfig {
    VqConfig {
        state_dim: cfg.world_deter_dim,
        n_codes: cfg.codebook_n,
        code_dim: cfg.codebook_d_z,
        hidden: cfg.codebook_hidden,
        layers: cfg.codebook_layers,
        beta: cfg.codebook_beta,
        ema_decay: cfg.codebook_decay,
        resample_every: cfg.codebook_m,
        learning_rate: cfg.codebook_lr,
        grad_clip: 100.0,
    }
}

pub fn skill_cfg_from(cfg: &RunConfig) -> SkillConfig {
    SkillConfig {
        deter_dim: cfg.world_deter_dim,
        code_dim: cfg.codebook_d_z,
        action_dim: POINT_MASS_ACTION_DIM,
        hidden: cfg.skill_hidden,
        layers: cfg.skill_layers,
        knn_k: cfg.skill_knn_k,
        gamma: cfg.skill_gamma,
        lambda: cfg.skill_lambda,
        actor_lr: cfg.skill_actor_lr,
        critic_lr: cfg.skill_critic_lr,
        grad_clip: 100.0,
        action_low: -1.0,
        action_high: 1.0,
    }
}

pub fn explore_cfg_from(cfg: &RunConfig) -> ExploreConfig {
    ExploreConfig {
        deter_dim: cfg.world_deter_dim,
        action_dim: POINT_MASS_ACTION_DIM,
        hidden: cfg.skill_hidden,
        layers: cfg.skill_layers,
        entropy_coef: cfg.explore_entropy_coef,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        reward_mode: ExploreRewardMode::ReplayOnly,
        ..ExploreConfig::default()
    }
}

pub fn meta_cfg_from(cfg: &RunConfig) -> MetaConfig {
    MetaConfig {
        deter_dim: cfg.world_deter_dim,
        num_skills: cfg.codebook_n,
        hidden: cfg.meta_hidden,
        layers: cfg.meta_layers,
        gamma: cfg.skill_gamma,
        lambda: cfg.skill_lambda,
        actor_lr: cfg.meta_actor_lr,
        critic_lr: cfg.meta_critic_lr,
        grad_clip: 100.0,
        entropy_coef: cfg.meta_entropy_coef,
    }
}

pub fn env_from(cfg: &RunConfig) -> PointMassEnv {
    let mut env = PointMassEnv::new(cfg.env_start, cfg.env_goal);
    env.goal_radius = cfg.env_goal_radius;
    env.max_steps = cfg.env_max_steps;
    env
}

// ---------------------------------------------------------------------------
// Pretraining.

/// Stacks the deterministic vectors of every posterior state in a batch
/// into one `[T*B, deter]` matrix for the skill autoencoder.
fn stack_deters(states: &[ModelState]) -> Tensor {
    let deter = states[0].deter.cols();
    let rows: usize = states.iter().map(|s| s.deter.rows()).sum();
    let mut data = Vec::with_capacity(rows * deter);
    for s in states {
        data.extend_from_slice(&s.deter.data);
    }
    Tensor::matrix(rows, deter, data)
}

fn stack_field(states: &[ModelState], field: impl Fn(&ModelState) -> &Tensor) -> Tensor {
    let cols = field(&states[0]).cols();
    let rows: usize = states.iter().map(|s| field(s).rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for s in states {
        data.extend_from_slice(&field(s).data);
    }
    Tensor::matrix(rows, cols, data)
}

/// All `T*B` posterior states of a training batch as one flat batch;
/// imagination phases start from every replayed state, and the flat batch
/// is large enough for the K-NN particle reward.
pub fn stack_states(states: &[ModelState]) -> ModelState {
    ModelState {
        deter: stack_field(states, |s| &s.deter),
        stoch: stack_field(states, |s| &s.stoch),
        logits: stack_field(states, |s| &s.logits),
    }
}

struct PretrainModules {
    wm: WorldModel,
    vq: SkillVq,
    skills: SkillPolicySet,
    explore: Option<ExplorationPolicy>,
}

fn pretrain_round(
    m: &mut PretrainModules,
    batch: &crate::envs::Batch,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let (elbo, states) = m.wm.train_batch(&batch.obs, &batch.actions, None, rng)?;
    let deters = stack_deters(&states);
    let vq_loss = m.vq.train_batch(&deters, true, rng)?;
    let start = stack_states(&states);
    let sstats = m.skills.train_skills(&m.wm, &m.vq, &start, rng)?;
    if let Some(explore) = m.explore.as_mut() {
        match explore.cfg.reward_mode {
            ExploreRewardMode::ReplayOnly => {
                explore.train_on_replay(&m.wm, &batch.obs, &batch.actions, rng)?;
            }
            ExploreRewardMode::ImaginedDecode => {
                explore.train_imagined(&m.wm, states.last().unwrap(), rng)?;
            }
        }
    }
    Ok((elbo, vq_loss, sstats.mean_reward))
}

fn emit_round_metrics(
    metrics: &mut MetricsWriter,
    step: usize,
    phase: &str,
    elbo: f64,
    vq_loss: f64,
    skill_reward: f64,
) -> Result<()> {
    metrics.scalar(step as u64, phase, "elbo", elbo)?;
    metrics.scalar(step as u64, phase, "vq_loss", vq_loss)?;
    metrics.scalar(step as u64, phase, "skill_reward", skill_reward)?;
    Ok(())
}

/// One real-environment action chosen by the exploration policy (or
/// uniformly at random when exploration is disabled), tracking the model
/// posterior along the way.
fn collect_action(
    m: &PretrainModules,
    model_state: &mut ModelState,
    obs: &[f64],
    prev_action: &[f64],
    rng: &mut ChaCha8Rng,
) -> [f64; 2] {
    match m.explore.as_ref() {
        None => [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        Some(policy) => {
            let mut tape = Tape::new();
            let prev = StateNodes::constant(&mut tape, model_state);
            let a = tape.constant(Tensor::row(prev_action));
            let o = tape.constant(Tensor::row(obs));
            let next = m.wm.posterior_step(&mut tape, &prev, a, o, rng, false);
            let act = policy.act(&mut tape, next.deter, rng, false);
            *model_state = next.to_state(&tape);
            let v = tape.value(act);
            [v.data[0], v.data[1]]
        }
    }
}

/// Collect/pretrain phase. Resumes from `run_state.json` when present;
/// online budgets round up to the end of the episode in progress.
pub fn run_pretrain(cfg: &RunConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.out_dir);
    std::fs::create_dir_all(&art.dir)?;
    let _lock = acquire_lock(&art.dir)?;
    cfg.save(&art.config())?;
    let mut metrics = MetricsWriter::open(&art.metrics())?;

    // Fresh modules or checkpointed ones when resuming.
    let resuming = art.state().exists();
    let mut state: RunState = if resuming {
        let s: RunState = read_json(&art.state())?;
        check_version(s.version, "run state")?;
        if s.phase != "pretrain" {
            return Err(ChoreoError::contract(format!(
                "output directory holds `{}` state, not pretrain",
                s.phase
            )));
        }
        s
    } else {
        RunState {
            version: MODEL_CHECKPOINT_VERSION,
            phase: "pretrain".to_string(),
            steps_done: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            episodes: Vec::new(),
            smoother: None,
            episode_returns: Vec::new(),
        }
    };
    let mut modules = if resuming {
        PretrainModules {
            wm: load_world(&art.world())?,
            vq: load_vq(&art.codebook())?,
            skills: load_skills(&art.skills())?,
            explore: if cfg.mode == RunMode::Online && cfg.explore_enabled {
                Some(load_explore(&art.exploration())?)
            } else {
                None
            },
        }
    } else {
        let rng = &mut state.rng;
        PretrainModules {
            wm: WorldModel::new(world_cfg_from(cfg), rng),
            vq: SkillVq::new(vq_cfg_from(cfg), rng),
            skills: SkillPolicySet::new(skill_cfg_from(cfg), rng),
            explore: if cfg.mode == RunMode::Online && cfg.explore_enabled {
                Some(ExplorationPolicy::new(explore_cfg_from(cfg), rng))
            } else {
                None
            },
        }
    };

    let save_all = |art: &Artifacts, m: &PretrainModules, state: &RunState| -> Result<()> {
        save_world(&art.world(), &m.wm)?;
        save_vq(&art.codebook(), &m.vq)?;
        save_skills(&art.skills(), &m.skills)?;
        if let Some(e) = m.explore.as_ref() {
            save_explore(&art.exploration(), e)?;
        }
        write_json(&art.state(), state)?;
        Ok(())
    };

    match cfg.mode {
        RunMode::Offline => {
            let dataset = cfg.dataset.as_ref().unwrap();
            let data = load_offline_dataset(Path::new(dataset), cfg.replay_capacity)?;
            let mut round = state.steps_done;
            while round < cfg.pretrain_steps {
                let batch = data.sample_batch(cfg.batch_size, cfg.batch_length, &mut state.rng)?;
                let (elbo, vq_loss, skill_r) = pretrain_round(&mut modules, &batch, &mut state.rng)?;
                round += 1;
                if round % 10 == 0 || round == cfg.pretrain_steps {
                    emit_round_metrics(&mut metrics, round, "pretrain", elbo, vq_loss, skill_r)?;
                }
                if round % STATE_SAVE_ROUNDS == 0 {
                    state.steps_done = round;
                    save_all(&art, &modules, &state)?;
                }
            }
            state.steps_done = round;
        }
        RunMode::Online => {
            let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
            for ep in &state.episodes {
                buffer.add_episode(ep.clone())?;
            }
            let mut episodes_since_save = 0usize;
            while state.steps_done < cfg.pretrain_steps {
                let mut env = env_from(cfg);
                let mut obs = env.reset();
                let mut model_state = ModelState::initial(&modules.wm.cfg, 1);
                let mut prev_action = vec![0.0; POINT_MASS_ACTION_DIM];
                let mut ep_obs = vec![obs.clone()];
                let mut ep_act = Vec::new();
                let mut ep_rew = Vec::new();
                loop {
                    let action = collect_action(
                        &modules,
                        &mut model_state,
                        &obs,
                        &prev_action,
                        &mut state.rng,
                    );
                    // Reward-free phase: the real reward is never read.
                    let (next_obs, _, done) = env.step(action)?;
                    ep_obs.push(next_obs.clone());
                    ep_act.push(action.to_vec());
                    ep_rew.push(0.0);
                    obs = next_obs;
                    prev_action = action.to_vec();
                    state.steps_done += 1;
                    if state.steps_done % cfg.train_every == 0 {
                        match buffer.sample_batch(cfg.batch_size, cfg.batch_length, &mut state.rng)
                        {
                            Ok(batch) => {
                                let (elbo, vq_loss, skill_r) =
                                    pretrain_round(&mut modules, &batch, &mut state.rng)?;
                                if state.steps_done % (cfg.train_every * 10) == 0 {
                                    emit_round_metrics(
                                        &mut metrics,
                                        state.steps_done,
                                        "pretrain",
                                        elbo,
                                        vq_loss,
                                        skill_r,
                                    )?;
                                }
                            }
                            Err(ChoreoError::NotReady(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                    if done {
                        break;
                    }
                }
                let episode = Episode {
                    obs: ep_obs,
                    act: ep_act,
                    rew: ep_rew,
                };
                buffer.add_episode(episode.clone())?;
                state.episodes.push(episode);
                // Mirror the buffer's eviction so resume rebuilds the
                // same buffer.
                while state.episodes.len() > buffer.episodes.len() {
                    state.episodes.remove(0);
                }
                episodes_since_save += 1;
                if episodes_since_save >= STATE_SAVE_EPISODES {
                    episodes_since_save = 0;
                    save_all(&art, &modules, &state)?;
                }
            }
        }
    }
    save_all(&art, &modules, &state)?;
    Ok(art)
}

// ---------------------------------------------------------------------------
// Fine-tuning.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Per-episode returns in order.
    pub returns: Vec<f64>,
    /// Success rate over the final 20 episodes (or all, if fewer).
    pub final_success_rate: f64,
    pub steps: usize,
}

/// Supervised phase: resets the replay buffer, turns on the reward head,
/// and trains the meta-controller (and, unless frozen, the skill actors)
/// against predicted task rewards. Artifacts land in a subdirectory of
/// the pretraining run so frozen/adapted variants can share a pretrain.
pub fn run_finetune(
    cfg: &RunConfig,
    pretrain: &Artifacts,
    freeze_skills: bool,
) -> Result<(Artifacts, FinetuneReport)> {
    let sub = if freeze_skills {
        "finetune-frozen"
    } else {
        "finetune"
    };
    let art = Artifacts::new(pretrain.dir.join(sub));
    std::fs::create_dir_all(&art.dir)?;
    let _lock = acquire_lock(&art.dir)?;
    let mut metrics = MetricsWriter::open(&art.metrics())?;

    let resuming = art.state().exists();
    let mut state: RunState = if resuming {
        let s: RunState = read_json(&art.state())?;
        check_version(s.version, "run state")?;
        if s.phase != "finetune" {
            return Err(ChoreoError::contract(format!(
                "output directory holds `{}` state, not finetune",
                s.phase
            )));
        }
        s
    } else {
        RunState {
            version: MODEL_CHECKPOINT_VERSION,
            phase: "finetune".to_string(),
            steps_done: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
            episodes: Vec::new(),
            smoother: Some(RewardSmoother::new(cfg.smoother_threshold)),
            episode_returns: Vec::new(),
        }
    };

    let (mut wm, vq, mut skills, mut meta, mut smoother);
    if resuming {
        wm = load_world(&art.world())?;
        vq = load_vq(&art.codebook())?;
        skills = load_skills(&art.skills())?;
        let (m, s) = load_meta(&art.meta())?;
        meta = m;
        smoother = s;
    } else {
        wm = load_world(&pretrain.world())?;
        vq = load_vq(&pretrain.codebook())?;
        skills = load_skills(&pretrain.skills())?;
        wm.enable_reward_head(&mut state.rng);
        meta = MetaController::new(meta_cfg_from(cfg), &mut state.rng);
        smoother = state.smoother.clone().unwrap();
    }

    let save_all = |art: &Artifacts,
                    wm: &WorldModel,
                    vq: &SkillVq,
                    skills: &SkillPolicySet,
                    meta: &MetaController,
                    smoother: &RewardSmoother,
                    state: &RunState|
     -> Result<()> {
        save_world(&art.world(), wm)?;
        save_vq(&art.codebook(), vq)?;
        save_skills(&art.skills(), skills)?;
        save_meta(&art.meta(), meta, smoother)?;
        write_json(&art.state(), state)?;
        Ok(())
    };

    if cfg.finetune_steps == 0 {
        // Vacuous budget: artifacts equal the inputs, empty curve.
        save_all(&art, &wm, &vq, &skills, &meta, &smoother, &state)?;
        return Ok((
            art,
            FinetuneReport {
                returns: Vec::new(),
                final_success_rate: 0.0,
                steps: 0,
            },
        ));
    }

    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    for ep in &state.episodes {
        buffer.add_episode(ep.clone())?;
    }
    let mut episodes_since_save = 0usize;
    while state.steps_done < cfg.finetune_steps {
        let mut env = env_from(cfg);
        let mut obs = env.reset();
        let mut model_state = ModelState::initial(&wm.cfg, 1);
        let mut prev_action = vec![0.0; POINT_MASS_ACTION_DIM];
        let mut ep_obs = vec![obs.clone()];
        let mut ep_act = Vec::new();
        let mut ep_rew = Vec::new();
        let mut histogram = vec![0usize; meta.cfg.num_skills];
        // One skill is followed for the entire episode: uniform while
        // the smoother is unarmed, sampled from the meta-controller at
        // the first posterior state once armed. Per-step re-sampling
        // would blend skills and never commit long enough to reach a
        // distant goal.
        let mut held_skill: Option<usize> = None;
        loop {
            let mut tape = Tape::new();
            let prev = StateNodes::constant(&mut tape, &model_state);
            let a = tape.constant(Tensor::row(&prev_action));
            let o = tape.constant(Tensor::row(&obs));
            let next = wm.posterior_step(&mut tape, &prev, a, o, &mut state.rng, false);
            model_state = next.to_state(&tape);
            let z = match held_skill {
                Some(z) => z,
                None => {
                    let z = if smoother.is_armed() {
                        meta.select_skill(&model_state, &smoother, &mut state.rng, SelectMode::Sample)
                    } else {
                        state.rng.gen_range(0..meta.cfg.num_skills)
                    };
                    held_skill = Some(z);
                    z
                }
            };
            histogram[z] += 1;
            let code = tape.constant(Tensor::row(vq.codebook.code_row(z)));
            let act = skills.act(&mut tape, next.deter, code, &mut state.rng, false);
            let av = tape.value(act).data.clone();
            let (next_obs, reward, done) = env.step([av[0], av[1]])?;
            smoother.observe(reward);
            ep_obs.push(next_obs.clone());
            ep_act.push(av.clone());
            ep_rew.push(reward);
            obs = next_obs;
            prev_action = av;
            state.steps_done += 1;
            if state.steps_done % cfg.train_every == 0 {
                match buffer.sample_batch(cfg.batch_size, cfg.batch_length, &mut state.rng) {
                    Ok(batch) => {
                        let (elbo, states) = wm.train_batch(
                            &batch.obs,
                            &batch.actions,
                            Some(&batch.rewards),
                            &mut state.rng,
                        )?;
                        let meta_start = stack_states(&states);
                        let stats = meta.train_meta(
                            &wm,
                            &vq,
                            &mut skills,
                            &smoother,
                            &meta_start,
                            &mut state.rng,
                            !freeze_skills,
                        )?;
                        if state.steps_done % (cfg.train_every * 10) == 0 {
                            metrics.scalar(state.steps_done as u64, "finetune", "elbo", elbo)?;
                            metrics.scalar(
                                state.steps_done as u64,
                                "finetune",
                                "meta_reward",
                                stats.mean_reward,
                            )?;
                        }
                    }
                    Err(ChoreoError::NotReady(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if done {
                break;
            }
        }
        let ep_return: f64 = ep_rew.iter().sum();
        metrics.episode(
            state.steps_done as u64,
            "finetune",
            ep_return,
            ep_return > 0.0,
            histogram,
        )?;
        state.episode_returns.push(ep_return);
        let episode = Episode {
            obs: ep_obs,
            act: ep_act,
            rew: ep_rew,
        };
        buffer.add_episode(episode.clone())?;
        state.episodes.push(episode);
        while state.episodes.len() > buffer.episodes.len() {
            state.episodes.remove(0);
        }
        state.smoother = Some(smoother.clone());
        episodes_since_save += 1;
        if episodes_since_save >= STATE_SAVE_EPISODES {
            episodes_since_save = 0;
            save_all(&art, &wm, &vq, &skills, &meta, &smoother, &state)?;
        }
    }
    save_all(&art, &wm, &vq, &skills, &meta, &smoother, &state)?;
    let returns = state.episode_returns.clone();
    let tail = returns.len().min(20);
    let final_success_rate = if tail == 0 {
        0.0
    } else {
        returns[returns.len() - tail..]
            .iter()
            .filter(|&&r| r > 0.0)
            .count() as f64
            / tail as f64
    };
    Ok((
        art,
        FinetuneReport {
            returns,
            final_success_rate,
            steps: state.steps_done,
        },
    ))
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Fraction of evaluation episodes in which sweeping every pretrained
/// skill (one sampled rollout per code) reaches the sparse goal at
/// least once.
pub fn skill_sweep_success(
    wm: &WorldModel,
    vq: &SkillVq,
    skills: &SkillPolicySet,
    cfg: &RunConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut hits = 0usize;
    for _ in 0..episodes {
        let mut found = false;
        for z in 0..vq.codebook.n {
            let mut env = env_from(cfg);
            let mut obs = env.reset();
            let mut model_state = ModelState::initial(&wm.cfg, 1);
            let mut prev_action = vec![0.0; POINT_MASS_ACTION_DIM];
            loop {
                let mut tape = Tape::new();
                let prev = StateNodes::constant(&mut tape, &model_state);
                let a = tape.constant(Tensor::row(&prev_action));
                let o = tape.constant(Tensor::row(&obs));
                let next = wm.posterior_step(&mut tape, &prev, a, o, rng, false);
                model_state = next.to_state(&tape);
                let code = tape.constant(Tensor::row(vq.codebook.code_row(z)));
                let act = skills.act(&mut tape, next.deter, code, rng, false);
                let av = tape.value(act).data.clone();
                let (next_obs, reward, done) = env.step([av[0], av[1]])?;
                if reward > 0.0 {
                    found = true;
                }
                obs = next_obs;
                prev_action = av;
                if done || found {
                    break;
                }
            }
            if found {
                break;
            }
        }
        if found {
            hits += 1;
        }
    }
    Ok(hits as f64 / episodes.max(1) as f64)
}

///// Identical budget with uniformly random actions: same number of
/// rollouts per episode as there are skills.
pub fn random_sweep_success(cfg: &RunConfig, episodes: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut hits = 0usize;
    for _ in 0..episodes {
        let mut found = false;
        for _ in 0..cfg.codebook_n {
            let mut env = env_from(cfg);
            env.reset();
            loop {
                let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let (_, reward, done) = env.step(a)?;
                if reward > 0.0 {
                    found = true;
                }
                if done || found {
                    break;
                }
            }
            if found {
                break;
            }
        }
        if found {
            hits += 1;
        }
    }
    Ok(hits as f64 / episodes.max(1) as f64)
}

/// Greedy meta-controller evaluation on fine-tuned artifacts.
pub fn run_eval(cfg: &RunConfig, finetuned: &Artifacts) -> Result<EvalMetrics> {
    let wm = load_world(&finetuned.world())?;
    let vq = load_vq(&finetuned.codebook())?;
    let skills = load_skills(&finetuned.skills())?;
    let (meta, _) = load_meta(&finetuned.meta())?;
    let mut env = env_from(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xE7A1));
    zero_shot_eval(
        &meta,
        &skills,
        &wm,
        &vq,
        &mut env,
        cfg.eval_episodes,
        &mut rng,
    )
}

// ---------------------------------------------------------------------------
// Codebook benchmark and skill export.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookBenchReport {
    pub with_cr: bench::BenchReport,
    pub without_cr: bench::BenchReport,
}

/// Paired-seed comparison of VQ training with and without code
/// resampling on a synthetic Gaussian mixture.
pub fn run_codebook_bench(
    modes: usize,
    n_codes: usize,
    batches: u64,
    seed: u64,
) -> Result<CodebookBenchReport> {
    let base = bench::BenchConfig {
        modes,
        vq: VqConfig {
            n_codes,
            ..bench::BenchConfig::default().vq
        },
        batches,
        seed,
        with_resampling: true,
        ..bench::BenchConfig::default()
    };
    let with_cr = bench::run(&base)?;
    let without_cr = bench::run(&bench::BenchConfig {
        with_resampling: false,
        ..base
    })?;
    Ok(CodebookBenchReport { with_cr, without_cr })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillExport {
    pub codebook: crate::codebook::CodebookExport,
    /// One imagined greedy trajectory of observations decoded per skill
    /// is out of scope without an obs decoder on deter space; exported
    /// instead are per-skill imagined terminal deter states.
    pub terminal_deters: Vec<Vec<f64>>,
}

/// Exports the codebook plus one imagined rollout terminal state per
/// skill, as JSON.
pub fn export_skills(pretrain: &Artifacts, out: &Path) -> Result<()> {
    let wm = load_world(&pretrain.world())?;
    let vq = load_vq(&pretrain.codebook())?;
    let skills = load_skills(&pretrain.skills())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xe49);
    let start = ModelState::initial(&wm.cfg, vq.codebook.n);
    let idxs: Vec<usize> = (0..vq.codebook.n).collect();
    let traj = skills.rollout_with_codes(&wm, &vq, &start, &idxs, &mut rng)?;
    let last = traj.states.last().unwrap();
    let deter = last.deter.cols();
    let terminal_deters = (0..vq.codebook.n)
        .map(|i| last.deter.data[i * deter..(i + 1) * deter].to_vec())
        .collect();
    let export = SkillExport {
        codebook: crate::codebook::export_codebook(&vq.codebook, vq.cfg.resample_every),
        terminal_deters,
    };
    write_json(out, &export)
}
