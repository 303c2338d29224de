// Scratch probe for the adaptive-vs-non-adaptive directional comparison.
use atdpt::attackers::{attacker_token_width, AdaptiveAttacker};
use atdpt::dpt::victim_runner::{
    run_victim_bandit_round, train_adaptive_attacker, train_attacker_for_target,
};
use atdpt::dpt::{AttackPolicy, ClassicalVictim, EpisodeRngs};
use atdpt::envs::{EnvKind, Task};
use atdpt::harness::config::ExperimentConfig;
use atdpt::harness::eval::sample_task;
use atdpt::rng::{substream, tag};
use atdpt::transformer::{ModelParams, TransformerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let rounds_override: Option<usize> = args.get(2).map(|s| s.parse().unwrap());
    let skip_baseline = args.get(3).is_some();

    let mut cfg = ExperimentConfig::desk_scale(EnvKind::Bandit);
    cfg.num_tasks = 4;
    let attack = cfg.attack().unwrap();
    let mut task_rng = substream(cfg.seed, &[7, tag::TASK_SAMPLING]);
    let tasks: Vec<Task> =
        (0..cfg.num_tasks).map(|_| sample_task(&cfg, &mut task_rng)).collect();
    let rounds = rounds_override.unwrap_or(cfg.num_rounds);

    let eval = |policy_for: &mut dyn FnMut(usize) -> AttackPolicy| -> f64 {
        let mut sum = 0.0;
        let mut count = 0;
        for (i, task) in tasks.iter().enumerate() {
            for ep in 0..16u64 {
                let mut rngs = EpisodeRngs::new(cfg.seed, &[tag::QUERY, 77, i as u64, ep]);
                let mut policy = policy_for(i);
                let out = run_victim_bandit_round(
                    ClassicalVictim::ThompsonSampling,
                    task,
                    &mut policy,
                    &attack,
                    cfg.epsilon,
                    &mut rngs,
                )
                .unwrap();
                sum += out.clean_regret;
                count += 1;
            }
        }
        sum / count as f64
    };

    if !skip_baseline {
        let t0 = std::time::Instant::now();
        let non_adaptive = train_attacker_for_target(
            ClassicalVictim::ThompsonSampling,
            &tasks,
            rounds,
            &attack,
            cfg.attacker_lr,
            2024,
            cfg.tabular_episodes_per_round,
        )
        .unwrap();
        let na = eval(&mut |i| non_adaptive.policy_for(i));
        println!("non-adaptive regret {na:.2} ({:?})", t0.elapsed());
    }

    let width = attacker_token_width(&tasks[0]);
    let model_cfg = TransformerConfig::new(2, 2, 16, cfg.horizon, width, 2);
    let t0 = std::time::Instant::now();
    let per_task: Vec<AdaptiveAttacker> = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut init_rng = substream(2024, &[tag::MODEL_INIT, i as u64]);
            let adaptive = AdaptiveAttacker::new(ModelParams::init(model_cfg, &mut init_rng));
            train_adaptive_attacker(
                adaptive,
                ClassicalVictim::ThompsonSampling,
                std::slice::from_ref(task),
                rounds,
                &attack,
                lr,
                2024 ^ i as u64,
            )
            .unwrap()
        })
        .collect();
    let a = eval(&mut |i| AttackPolicy::Adaptive(Box::new(per_task[i].clone())));
    println!("adaptive regret (lr {lr}) {a:.2} ({:?})", t0.elapsed());
}
