// scratch probe for sizing the empirical acceptance runs; not shipped
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use choreo_core::config::RunConfig;
use choreo_core::envs::{Episode, PointMassEnv, ReplayBuffer};
use choreo_core::runner::{
    env_from, load_skills, load_vq, load_world, random_sweep_success, run_finetune, run_pretrain,
    skill_cfg_from, skill_sweep_success, stack_states, vq_cfg_from, world_cfg_from, Artifacts,
};
use choreo_core::skills::SkillPolicySet;
use choreo_core::codebook::{export_codebook, SkillVq};
use choreo_core::substrate::Tensor;
use choreo_core::world::{ModelState, WorldModel};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn stack_deters(states: &[ModelState]) -> Tensor {
    let deter = states[0].deter.cols();
    let rows: usize = states.iter().map(|s| s.deter.rows()).sum();
    let mut data = Vec::with_capacity(rows * deter);
    for s in states {
        data.extend_from_slice(&s.deter.data);
    }
    Tensor::matrix(rows, deter, data)
}

fn diversity(seed: u64, rounds: usize) {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wm = WorldModel::new(world_cfg_from(&cfg), &mut rng);
    let mut vq = SkillVq::new(vq_cfg_from(&cfg), &mut rng);
    let mut skills = SkillPolicySet::new(skill_cfg_from(&cfg), &mut rng);

    // random-walk data
    let mut buffer = ReplayBuffer::new(100_000);
    for _ in 0..40 {
        let mut env = PointMassEnv::new([-0.6, -0.6], [0.7, 0.7]);
        env.max_steps = 100;
        let mut obs = vec![env.reset()];
        let mut act = Vec::new();
        let mut rew = Vec::new();
        loop {
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (o, _, done) = env.step(a).unwrap();
            obs.push(o);
            act.push(a.to_vec());
            rew.push(0.0);
            if done {
                break;
            }
        }
        buffer.add_episode(Episode { obs, act, rew }).unwrap();
    }
    let mut last_state = None;
    for r in 0..rounds {
        let batch = buffer.sample_batch(16, 16, &mut rng).unwrap();
        let (elbo, states) = wm.train_batch(&batch.obs, &batch.actions, None, &mut rng).unwrap();
        let deters = stack_deters(&states);
        let vql = vq.train_batch(&deters, true, &mut rng).unwrap();
        let start = stack_states(&states);
        let st = skills.train_skills(&wm, &vq, &start, &mut rng).unwrap();
        if (r + 1) % 100 == 0 {
            println!(
                "round {}: elbo {:.3} vq {:.4} skill_r {:.3} active {:.2} ({:.0?})",
                r + 1,
                elbo,
                vql,
                st.mean_reward,
                vq.codebook.active_fraction(vq.cfg.resample_every),
                t0.elapsed()
            );
        }
        last_state = Some(states.last().unwrap().clone());
    }
    let _ = last_state;
    // evaluate: real-env rollouts per skill, terminal positions in env
    // space; two variants of the within-skill stochasticity source
    let export = export_codebook(&vq.codebook, vq.cfg.resample_every);
    let n = vq.codebook.n;
    let steps = 40;
    let roll = |z: usize, start: [f64; 2], sampled: bool, seed: u64| -> Vec<f64> {
        let mut env = PointMassEnv::new(start, [0.7, 0.7]);
        env.max_steps = steps + 1;
        let mut obs = env.reset();
        let mut state = ModelState::initial(&wm.cfg, 1);
        let mut prev_action = vec![0.0; 2];
        let mut rr = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let mut tape = choreo_core::substrate::Tape::new();
            let prev = choreo_core::world::StateNodes::constant(&mut tape, &state);
            let a = tape.constant(Tensor::row(&prev_action));
            let o = tape.constant(Tensor::row(&obs));
            let next = wm.posterior_step(&mut tape, &prev, a, o, &mut rr, false);
            state = next.to_state(&tape);
            let code = tape.constant(Tensor::row(vq.codebook.code_row(z)));
            let act = if sampled {
                skills.act(&mut tape, next.deter, code, &mut rr, false)
            } else {
                skills.act_mean(&mut tape, next.deter, code, false)
            };
            let av = tape.value(act).data.clone();
            let (no, _, done) = env
                .step([av[0].clamp(-1.0, 1.0), av[1].clamp(-1.0, 1.0)])
                .unwrap();
            obs = no;
            prev_action = av;
            if done {
                break;
            }
        }
        vec![env.pos[0], env.pos[1]]
    };
    let jitter: Vec<[f64; 2]> = vec![
        [0.0, 0.0],
        [0.05, 0.0],
        [-0.05, 0.0],
        [0.0, 0.05],
        [0.0, -0.05],
        [0.05, 0.05],
        [-0.05, -0.05],
        [0.05, -0.05],
    ];
    let mut pass = 0;
    let mut active_total = 0;
    for (label, sampled) in [("jitter+mean", false), ("fixed+sampled", true)] {
        let mut means: Vec<Vec<f64>> = Vec::new();
        let mut withins: Vec<f64> = Vec::new();
        for z in 0..n {
            let terms: Vec<Vec<f64>> = (0..8)
                .map(|j| {
                    let start = if sampled {
                        [-0.6, -0.6]
                    } else {
                        [-0.6 + jitter[j][0], -0.6 + jitter[j][1]]
                    };
                    roll(z, start, sampled, (z * 1000 + j) as u64)
                })
                .collect();
            let mean: Vec<f64> = (0..2)
                .map(|k| terms.iter().map(|t| t[k]).sum::<f64>() / terms.len() as f64)
                .collect();
            let within = terms.iter().map(|t| dist(t, &mean)).sum::<f64>() / terms.len() as f64;
            means.push(mean);
            withins.push(within);
        }
        pass = 0;
        active_total = 0;
        for z in 0..n {
            let across = means
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != z)
                .map(|(_, m)| dist(&means[z], m))
                .sum::<f64>()
                / (n - 1) as f64;
            let ratio = across / withins[z].max(1e-12);
            let active = export.active_mask[z];
            println!(
                "[{label}] skill {z}: mean ({:+.2},{:+.2}) across {:.4} within {:.4} ratio {:.2} active {active}",
                means[z][0], means[z][1], across, withins[z], ratio
            );
            if active {
                active_total += 1;
                if ratio >= 2.0 {
                    pass += 1;
                }
            }
        }
        println!("[{label}] seed {seed}: {pass}/{active_total} ratio >= 2");
    }
    println!(
        "seed {seed}: {pass}/{active_total} active skills with ratio >= 2 ({:.0?})",
        t0.elapsed()
    );
}

fn e2e(
    seed: u64,
    pretrain_steps: usize,
    finetune_steps: usize,
    env_max_steps: usize,
    n_codes: usize,
    explore: bool,
    pre_ms: usize,
) {
    let t0 = Instant::now();
    let dir = format!(
        "/tmp/probe-e2e-{seed}-{pretrain_steps}-{env_max_steps}-{n_codes}-{}-{pre_ms}",
        if explore { "x" } else { "r" }
    );
    let _ = std::fs::remove_dir_all(format!("{dir}/finetune"));
    let _ = std::fs::remove_dir_all(format!("{dir}/finetune-frozen"));
    // pretraining collects 50-step episodes; the task phase runs on its
    // own shorter horizon
    let cfg = RunConfig {
        seed,
        out_dir: dir.clone(),
        pretrain_steps,
        finetune_steps,
        env_max_steps,
        env_goal: [0.9, 0.9],
        env_goal_radius: 0.15,
        codebook_n: n_codes,
        explore_enabled: explore,
        ..RunConfig::default()
    };
    let cfg_pre = RunConfig {
        env_max_steps: pre_ms,
        ..cfg.clone()
    };
    let pre = run_pretrain(&cfg_pre).unwrap();
    println!("pretrain done ({:.0?})", t0.elapsed());
    let wm = load_world(&pre.world()).unwrap();
    let vq = load_vq(&pre.codebook()).unwrap();
    let skills = load_skills(&pre.skills()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let cfg_sweep = RunConfig {
        env_max_steps: 22,
        ..cfg.clone()
    };
    let sweep = skill_sweep_success(&wm, &vq, &skills, &cfg_sweep, 50, &mut rng).unwrap();
    let random = random_sweep_success(&cfg_sweep, 50, &mut rng).unwrap();
    println!(
        "seed {seed}: sweep {sweep:.2} random {random:.2} ({:.0?})",
        t0.elapsed()
    );
    if finetune_steps > 0 {
        let (_, adapted) = run_finetune(&cfg, &pre, false).unwrap();
        println!(
            "adapted: final success {:.2} over {} eps, mean final ret {:.3} ({:.0?})",
            adapted.final_success_rate,
            adapted.returns.len(),
            mean_tail(&adapted.returns),
            t0.elapsed()
        );
        let (_, frozen) = run_finetune(&cfg, &pre, true).unwrap();
        println!(
            "frozen:  final success {:.2}, mean final ret {:.3} ({:.0?})",
            frozen.final_success_rate,
            mean_tail(&frozen.returns),
            t0.elapsed()
        );
    }
}

fn divcheck(dir: &str) {
    let art = Artifacts::new(dir);
    let wm = load_world(&art.world()).unwrap();
    let vq = load_vq(&art.codebook()).unwrap();
    let skills = load_skills(&art.skills()).unwrap();
    let export = export_codebook(&vq.codebook, vq.cfg.resample_every);
    let n = vq.codebook.n;
    let steps = 40;
    let roll = |z: usize, sampled: bool, seed: u64| -> Vec<f64> {
        let mut env = PointMassEnv::new([-0.6, -0.6], [0.7, 0.7]);
        env.max_steps = steps + 1;
        let mut obs = env.reset();
        let mut state = ModelState::initial(&wm.cfg, 1);
        let mut prev_action = vec![0.0; 2];
        let mut rr = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let mut tape = choreo_core::substrate::Tape::new();
            let prev = choreo_core::world::StateNodes::constant(&mut tape, &state);
            let a = tape.constant(Tensor::row(&prev_action));
            let o = tape.constant(Tensor::row(&obs));
            let next = wm.posterior_step(&mut tape, &prev, a, o, &mut rr, false);
            state = next.to_state(&tape);
            let code = tape.constant(Tensor::row(vq.codebook.code_row(z)));
            let act = if sampled {
                skills.act(&mut tape, next.deter, code, &mut rr, false)
            } else {
                skills.act_mean(&mut tape, next.deter, code, false)
            };
            let av = tape.value(act).data.clone();
            let (no, _, done) = env
                .step([av[0].clamp(-1.0, 1.0), av[1].clamp(-1.0, 1.0)])
                .unwrap();
            obs = no;
            prev_action = av;
            if done {
                break;
            }
        }
        vec![env.pos[0], env.pos[1]]
    };
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut withins: Vec<f64> = Vec::new();
    for z in 0..n {
        let terms: Vec<Vec<f64>> = (0..8).map(|j| roll(z, true, (z * 1000 + j) as u64)).collect();
        let mean: Vec<f64> = (0..2)
            .map(|k| terms.iter().map(|t| t[k]).sum::<f64>() / terms.len() as f64)
            .collect();
        let within = terms.iter().map(|t| dist(t, &mean)).sum::<f64>() / terms.len() as f64;
        means.push(mean);
        withins.push(within);
    }
    let mut pass = 0;
    let mut active_total = 0;
    for z in 0..n {
        let across = means
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != z)
            .map(|(_, m)| dist(&means[z], m))
            .sum::<f64>()
            / (n - 1) as f64;
        let ratio = across / withins[z].max(1e-12);
        let active = export.active_mask[z];
        println!(
            "skill {z}: mean ({:+.2},{:+.2}) across {:.4} within {:.4} ratio {:.2} active {active}",
            means[z][0], means[z][1], across, withins[z], ratio
        );
        if active {
            active_total += 1;
            if ratio >= 2.0 {
                pass += 1;
            }
        }
    }
    println!("{dir}: {pass}/{active_total} ratio >= 2");
}

fn sweep(dir: &str, max_steps: usize, radius: f64, seed: u64, goal: [f64; 2]) {
    let art = Artifacts::new(dir);
    let wm = load_world(&art.world()).unwrap();
    let vq = load_vq(&art.codebook()).unwrap();
    let skills = load_skills(&art.skills()).unwrap();
    let cfg = RunConfig {
        env_max_steps: max_steps,
        env_goal_radius: radius,
        env_goal: goal,
        codebook_n: vq.codebook.n,
        ..RunConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = skill_sweep_success(&wm, &vq, &skills, &cfg, 50, &mut rng).unwrap();
    let r = random_sweep_success(&cfg, 50, &mut rng).unwrap();
    println!(
        "goal ({},{}) max_steps {max_steps} radius {radius}: sweep {s:.2} random {r:.2}",
        goal[0], goal[1]
    );
}

fn skillmap(dir: &str, max_steps: usize) {
    let art = Artifacts::new(dir);
    let wm = load_world(&art.world()).unwrap();
    let vq = load_vq(&art.codebook()).unwrap();
    let skills = load_skills(&art.skills()).unwrap();
    let cfg = RunConfig {
        env_max_steps: max_steps,
        ..RunConfig::default()
    };
    for z in 0..vq.codebook.n {
        let mut env = env_from(&cfg);
        let mut obs = env.reset();
        let mut state = ModelState::initial(&wm.cfg, 1);
        let mut prev_action = vec![0.0; 2];
        let mut rr = ChaCha8Rng::seed_from_u64(z as u64);
        let mut min_goal = f64::INFINITY;
        loop {
            let mut tape = choreo_core::substrate::Tape::new();
            let prev = choreo_core::world::StateNodes::constant(&mut tape, &state);
            let a = tape.constant(Tensor::row(&prev_action));
            let o = tape.constant(Tensor::row(&obs));
            let next = wm.posterior_step(&mut tape, &prev, a, o, &mut rr, false);
            state = next.to_state(&tape);
            let code = tape.constant(Tensor::row(vq.codebook.code_row(z)));
            let act = skills.act_mean(&mut tape, next.deter, code, false);
            let av = tape.value(act).data.clone();
            let (no, _, done) = env.step([av[0], av[1]]).unwrap();
            let dg = ((env.pos[0] - env.goal[0]).powi(2) + (env.pos[1] - env.goal[1]).powi(2)).sqrt();
            min_goal = min_goal.min(dg);
            obs = no;
            prev_action = av;
            if done {
                break;
            }
        }
        println!(
            "skill {z}: terminal ({:+.2},{:+.2}) min dist to goal {:.3}",
            env.pos[0], env.pos[1], min_goal
        );
    }
}

fn mean_tail(returns: &[f64]) -> f64 {
    let tail = returns.len().min(20);
    if tail == 0 {
        return 0.0;
    }
    returns[returns.len() - tail..].iter().sum::<f64>() / tail as f64
}

fn random_only(seed: u64) {
    for max_steps in [40, 60, 80, 100, 200] {
        let cfg = RunConfig {
            env_max_steps: max_steps,
            ..RunConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = env_from(&cfg);
        env.reset();
        let r = random_sweep_success(&cfg, 100, &mut rng).unwrap();
        println!("seed {seed}: max_steps {max_steps}: random sweep success {r:.2} over 100 episodes");
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args[1].as_str() {
        "diversity" => diversity(args[2].parse().unwrap(), args[3].parse().unwrap()),
        "e2e" => e2e(
            args[2].parse().unwrap(),
            args[3].parse().unwrap(),
            args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0),
            args.get(5).map(|s| s.parse().unwrap()).unwrap_or(50),
            args.get(6).map(|s| s.parse().unwrap()).unwrap_or(8),
            args.get(7).map(|s| s.parse().unwrap()).unwrap_or(true),
            args.get(8).map(|s| s.parse().unwrap()).unwrap_or(50),
        ),
        "random" => random_only(args[2].parse().unwrap()),
        "skillmap" => skillmap(&args[2], args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50)),
        "divcheck" => divcheck(&args[2]),
        "sweep" => sweep(
            &args[2],
            args[3].parse().unwrap(),
            args[4].parse().unwrap(),
            args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0),
            [
                args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.7),
                args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.7),
            ],
        ),
        other => panic!("unknown probe {other}"),
    }
    let _ = Artifacts::new("unused");
}
