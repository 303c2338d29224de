// Scratch probe for the recovery-shape criterion: reproduces the harness's
// at-dpt adversarial curves (both replications) with cached pretrained models
// so the loop rates can be iterated quickly.
use atdpt::dpt::{run_adversarial_training, RoundConfig};
use atdpt::envs::{EnvKind, Task};
use atdpt::harness::config::ExperimentConfig;
use atdpt::harness::eval::{pretrain_model, sample_task};
use atdpt::rng::{substream, tag};
use atdpt::transformer::{load_params, save_params};
use rand::Rng;
use std::path::Path;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::desk_scale(EnvKind::Bandit);
    if args.len() > 1 {
        cfg.adv_attacker_lr = args[1].parse().unwrap();
    }
    if args.len() > 2 {
        cfg.victim_lr = args[2].parse().unwrap();
    }
    println!("adv_attacker_lr {} victim_lr {}", cfg.adv_attacker_lr, cfg.victim_lr);

    let mut curves: Vec<Vec<f64>> = Vec::new();
    for rep in 0..2u64 {
        let mut task_rng = substream(cfg.seed, &[rep, tag::TASK_SAMPLING]);
        let tasks: Vec<Task> =
            (0..cfg.num_tasks).map(|_| sample_task(&cfg, &mut task_rng)).collect();
        let cache = format!("/tmp/bp_{rep}.bin");
        let model = if Path::new(&cache).exists() {
            load_params(Path::new(&cache), cfg.transformer()).unwrap()
        } else {
            let m = pretrain_model(&cfg, rep).unwrap();
            save_params(Path::new(&cache), &m).unwrap();
            m
        };
        let rc = RoundConfig {
            num_tasks: cfg.num_tasks,
            num_rounds: cfg.num_rounds,
            iterations_per_round: cfg.iterations_per_round,
            attack: cfg.attack().unwrap(),
            victim_lr: cfg.victim_lr,
            attacker_lr: cfg.adv_attacker_lr,
            freeze_victim: false,
        };
        let seed = substream(cfg.seed, &[rep, tag::ATTACKER_UPDATE]).gen::<u64>();
        let mut m = model.clone();
        let (_, curve) = run_adversarial_training(&mut m, &tasks, &rc, seed).unwrap();
        let vals: Vec<f64> = curve.iter().map(|r| r.mean_clean_regret).collect();
        println!("rep {rep}: {:?}", vals.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>());
        curves.push(vals);
    }
    let n = curves[0].len();
    let avg: Vec<f64> = (0..n).map(|r| mean(&[curves[0][r], curves[1][r]])).collect();
    let final3 = mean(&avg[n - 3..]);
    let peak = avg[..n - 3].iter().cloned().fold(f64::MIN, f64::max);
    println!(
        "rep-mean curve {:?}\nfinal3 {final3:.2} peak {peak:.2} ratio {:.3} (need <= 0.70)",
        avg.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
        final3 / peak
    );
}
