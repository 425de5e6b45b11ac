use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmha_core::mappo::{decide, AgentMemory, TaskConfig, TrainConfig, Trainer};
use rmha_core::policy_net::{Model, ModelConfig};
use rmha_core::rmha_comm::CommMode;
use rmha_core::EnvConfig;

/// Mean extrinsic return (summed over agents) of the sampled policy on a
/// fixed set of episodes.
fn mean_episode_return(model: &Model, task: TaskConfig, episodes: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut env = task.episode(EnvConfig::default(), &mut rng).unwrap();
        let mut memory = AgentMemory::new(model, task.agents);
        while !env.is_done() {
            let d = decide(model, &env, &memory, &mut rng, false, true).unwrap();
            total += env.step(&d.actions).unwrap().extrinsic_sum();
            memory.advance(&d.output);
        }
    }
    total / episodes as f64
}

#[test]
fn episode_reward_improves_on_small_maps() {
    let desk = TrainConfig::desk();
    let config = TrainConfig {
        total_steps: desk.steps_per_round() * 50,
        ..desk
    };
    let task = TaskConfig::empty(5, 2);
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let mut t = Trainer::new(config, EnvConfig::default(), task, ModelConfig::desk(CommMode::Rmha), CommMode::Rmha, seed).unwrap();
        t.run_round().unwrap();
        first += mean_episode_return(&t.model, task, 20) / 3.0;
        while !t.finished() {
            t.run_round().unwrap();
        }
        assert_eq!(t.round(), 50);
        last += mean_episode_return(&t.model, task, 20) / 3.0;
    }
    println!("mean episode reward {first:.2} after round 1, {last:.2} after round 50");
    assert!(last > first);
}
