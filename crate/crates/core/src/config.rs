//! Run configuration: defaults, flat `key=value` files with dotted
//! section keys, and command-line overrides. Precedence is
//! CLI > file > defaults, with the `CHOREO_SEED` environment variable
//! overriding the seed last.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    /// Offline dataset path; required when mode = offline.
    pub dataset: Option<String>,
    pub out_dir: String,
    /// Environment steps (online) or gradient steps (offline) for
    /// pretraining, and environment steps for fine-tuning.
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Train once every this many environment actions.
    pub train_every: usize,
    pub batch_size: usize,
    pub batch_length: usize,
    pub replay_capacity: usize,
    pub eval_episodes: usize,

    pub world_deter_dim: usize,
    pub world_groups: usize,
    pub world_classes: usize,
    pub world_hidden: usize,
    pub world_layers: usize,
    pub world_lr: f64,
    pub world_grad_clip: f64,
    pub world_horizon: usize,

    pub codebook_n: usize,
    pub codebook_d_z: usize,
    /// Resampling period M, in training batches.
    pub codebook_m: u32,
    pub codebook_beta: f64,
    pub codebook_decay: f64,
    pub codebook_hidden: usize,
    pub codebook_layers: usize,
    pub codebook_lr: f64,

    pub skill_gamma: f64,
    pub skill_lambda: f64,
    pub skill_actor_lr: f64,
    pub skill_critic_lr: f64,
    pub skill_hidden: usize,
    pub skill_layers: usize,
    pub skill_knn_k: usize,

    pub explore_enabled: bool,
    pub explore_entropy_coef: f64,

    pub meta_actor_lr: f64,
    pub meta_critic_lr: f64,
    pub meta_entropy_coef: f64,
    pub meta_hidden: usize,
    pub meta_layers: usize,

    pub smoother_threshold: f64,

    pub env_start: [f64; 2],
    pub env_goal: [f64; 2],
    pub env_goal_radius: f64,
    pub env_max_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: RunMode::Online,
            dataset: None,
            out_dir: "run".to_string(),
            pretrain_steps: 50_000,
            finetune_steps: 10_000,
            train_every: 10,
            batch_size: 16,
            batch_length: 16,
            replay_capacity: 100_000,
            eval_episodes: 20,
            world_deter_dim: 24,
            world_groups: 4,
            world_classes: 4,
            world_hidden: 48,
            world_layers: 1,
            world_lr: 1e-3,
            world_grad_clip: 100.0,
            world_horizon: 8,
            codebook_n: 8,
            codebook_d_z: 4,
            codebook_m: 200,
            codebook_beta: 0.25,
            codebook_decay: 0.99,
            codebook_hidden: 32,
            codebook_layers: 1,
            codebook_lr: 3e-4,
            skill_gamma: 0.99,
            skill_lambda: 0.95,
            skill_actor_lr: 8e-5,
            skill_critic_lr: 8e-5,
            skill_hidden: 48,
            skill_layers: 1,
            skill_knn_k: 30,
            explore_enabled: true,
            explore_entropy_coef: 1e-3,
            meta_actor_lr: 1e-3,
            meta_critic_lr: 1e-3,
            meta_entropy_coef: 1e-3,
            meta_hidden: 32,
            meta_layers: 1,
            smoother_threshold: 1e-4,
            env_start: [-0.6, -0.6],
            env_goal: [0.7, 0.7],
            env_goal_radius: 0.1,
            env_max_steps: 200,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        impl RunConfig {
            /// All keys in file order, with values rendered losslessly.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, render!(self.$field, $kind))),+]
            }

            /// Sets one dotted key from its string form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { self.$field = parse_value!(key, value, $kind); })+
                    _ => {
                        return Err(ChoreoError::Config(format!("unknown config key `{key}`")));
                    }
                }
                Ok(())
            }
        }
    };
}

macro_rules! render {
    ($v:expr, u64) => {
        $v.to_string()
    };
    ($v:expr, usize) => {
        $v.to_string()
    };
    ($v:expr, u32) => {
        $v.to_string()
    };
    ($v:expr, bool) => {
        $v.to_string()
    };
    ($v:expr, f64) => {
        // {:?} prints the shortest decimal that parses back exactly
        format!("{:?}", $v)
    };
    ($v:expr, mode) => {
        match $v {
            RunMode::Online => "online".to_string(),
            RunMode::Offline => "offline".to_string(),
        }
    };
    ($v:expr, opt_string) => {
        $v.clone().unwrap_or_default()
    };
    ($v:expr, string) => {
        $v.clone()
    };
    ($v:expr, pair) => {
        format!("{:?},{:?}", $v[0], $v[1])
    };
}

macro_rules! parse_value {
    ($key:expr, $value:expr, mode) => {
        match $value {
            "online" => RunMode::Online,
            "offline" => RunMode::Offline,
            other => {
                return Err(ChoreoError::Config(format!(
                    "key `{}`: expected online|offline, found `{other}`",
                    $key
                )))
            }
        }
    };
    ($key:expr, $value:expr, opt_string) => {
        if $value.is_empty() {
            None
        } else {
            Some($value.to_string())
        }
    };
    ($key:expr, $value:expr, string) => {
        $value.to_string()
    };
    ($key:expr, $value:expr, pair) => {{
        let parts: Vec<&str> = $value.split(',').collect();
        if parts.len() != 2 {
            return Err(ChoreoError::Config(format!(
                "key `{}`: expected two comma-separated numbers, found `{}`",
                $key, $value
            )));
        }
        let a = parse_num($key, parts[0].trim())?;
        let b = parse_num($key, parts[1].trim())?;
        [a, b]
    }};
    ($key:expr, $value:expr, $ty:ty) => {
        $value.parse::<$ty>().map_err(|e| {
            ChoreoError::Config(format!("key `{}`: cannot parse `{}`: {e}", $key, $value))
        })?
    };
}

fn parse_num(key: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| ChoreoError::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
}

config_keys! {
    "seed" => seed: u64,
    "mode" => mode: mode,
    "dataset" => dataset: opt_string,
    "out_dir" => out_dir: string,
    "pretrain.steps" => pretrain_steps: usize,
    "finetune.steps" => finetune_steps: usize,
    "train_every" => train_every: usize,
    "batch.size" => batch_size: usize,
    "batch.length" => batch_length: usize,
    "replay.capacity" => replay_capacity: usize,
    "eval.episodes" => eval_episodes: usize,
    "world.deter_dim" => world_deter_dim: usize,
    "world.groups" => world_groups: usize,
    "world.classes" => world_classes: usize,
    "world.hidden" => world_hidden: usize,
    "world.layers" => world_layers: usize,
    "world.lr" => world_lr: f64,
    "world.grad_clip" => world_grad_clip: f64,
    "world.horizon" => world_horizon: usize,
    "codebook.N" => codebook_n: usize,
    "codebook.d_z" => codebook_d_z: usize,
    "codebook.M" => codebook_m: u32,
    "codebook.beta" => codebook_beta: f64,
    "codebook.decay" => codebook_decay: f64,
    "codebook.hidden" => codebook_hidden: usize,
    "codebook.layers" => codebook_layers: usize,
    "codebook.lr" => codebook_lr: f64,
    "skill.gamma" => skill_gamma: f64,
    "skill.lambda" => skill_lambda: f64,
    "skill.actor_lr" => skill_actor_lr: f64,
    "skill.critic_lr" => skill_critic_lr: f64,
    "skill.hidden" => skill_hidden: usize,
    "skill.layers" => skill_layers: usize,
    "skill.knn_k" => skill_knn_k: usize,
    "explore.enabled" => explore_enabled: bool,
    "explore.entropy_coef" => explore_entropy_coef: f64,
    "meta.actor_lr" => meta_actor_lr: f64,
    "meta.critic_lr" => meta_critic_lr: f64,
    "meta.entropy_coef" => meta_entropy_coef: f64,
    "meta.hidden" => meta_hidden: usize,
    "meta.layers" => meta_layers: usize,
    "smoother.threshold" => smoother_threshold: f64,
    "env.start" => env_start: pair,
    "env.goal" => env_goal: pair,
    "env.goal_radius" => env_goal_radius: f64,
    "env.max_steps" => env_max_steps: usize,
}

impl RunConfig {
    /// Renders the config as a flat key=value file.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Applies a key=value file on top of `self`. Lines may be blank or
    /// start with `#`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ChoreoError::Config(format!(
                    "{}:{}: expected key=value, found `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Full precedence chain: defaults, then the optional file, then CLI
    /// `key=value` overrides, then `CHOREO_SEED`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        if let Ok(seed) = std::env::var("CHOREO_SEED") {
            cfg.seed = seed.parse().map_err(|e| {
                ChoreoError::Config(format!("CHOREO_SEED: cannot parse `{seed}`: {e}"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_n < 2 {
            return Err(ChoreoError::Config(format!(
                "codebook.N must be >= 2, got {}",
                self.codebook_n
            )));
        }
        if self.mode == RunMode::Offline && self.dataset.is_none() {
            return Err(ChoreoError::Config(
                "offline mode requires a dataset path".to_string(),
            ));
        }
        if self.train_every == 0 {
            return Err(ChoreoError::Config("train_every must be positive".to_string()));
        }
        if self.batch_length < 2 {
            return Err(ChoreoError::Config(
                "batch.length must be at least 2 (sequence model)".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_carry_the_pinned_values() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_every, 10);
        assert_eq!(cfg.codebook_m, 200);
        assert_eq!(cfg.smoother_threshold, 1e-4);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.batch_length, 16);
    }

    #[test]
    fn config_round_trips_losslessly_through_its_file_format() {
        let mut cfg = RunConfig::default();
        cfg.seed = 12345;
        cfg.mode = RunMode::Offline;
        cfg.dataset = Some("data/walk.jsonl".to_string());
        cfg.world_lr = 0.1 + 0.2; // not representable as a short decimal
        cfg.skill_lambda = 1.0 / 3.0;
        cfg.env_goal = [0.123456789123456, -0.9];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        cfg.save(&path).unwrap();
        let mut loaded = RunConfig::default();
        loaded.apply_file(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn precedence_is_cli_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed=7\nworld.hidden=64\n# comment\n\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[("world.hidden".to_string(), "96".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7); // from file
        assert_eq!(cfg.world_hidden, 96); // CLI beats file
        assert_eq!(cfg.train_every, 10); // default untouched
    }

    #[test]
    fn unknown_keys_and_bad_values_are_named_in_the_error() {
        let mut cfg = RunConfig::default();
        match cfg.set("wrld.hidden", "3") {
            Err(ChoreoError::Config(msg)) => assert!(msg.contains("wrld.hidden")),
            other => panic!("expected config error, got {other:?}"),
        }
        match cfg.set("world.hidden", "many") {
            Err(ChoreoError::Config(msg)) => {
                assert!(msg.contains("world.hidden") && msg.contains("many"))
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let mut cfg = RunConfig::default();
        cfg.codebook_n = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.mode = RunMode::Offline;
        assert!(cfg.validate().is_err());
        cfg.dataset = Some("d.jsonl".to_string());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn environment_seed_overrides_everything() {
        // Env vars are process-global: this is the only test touching
        // CHOREO_SEED, and other tests avoid `load` for that reason.
        std::env::set_var("CHOREO_SEED", "999");
        let cfg = RunConfig::load(None, &[("seed".to_string(), "5".to_string())]).unwrap();
        std::env::remove_var("CHOREO_SEED");
        assert_eq!(cfg.seed, 999);
    }
}
