use fedsig_core::dataset::{
    full_batch, partition_agents, Corpus, preprocess_all, split_train_test, synth_generate, ProcessedSignature, SynthConfig,
};
use fedsig_core::federated::{aggregate, local_training, run_federated, Agent, Contribution, FedConfig};
use fedsig_core::model::{self, ModelConfig, ModelParams};
use fedsig_core::optim::{sgd_step, OptimizerKind};

fn small_corpus(users: u32, seed: u64) -> Corpus {
    synth_generate(&SynthConfig {
        users,
        genuine_per_user: 4,
        forged_per_user: 4,
        min_length: 10,
        max_length: 16,
        length_limit: 16,
        seed,
    })
    .unwrap()
}

fn small_data(users: u32, seed: u64) -> Vec<ProcessedSignature> {
    preprocess_all(&small_corpus(users, seed), 16).unwrap()
}

fn shrunken_fed(agents: usize) -> FedConfig {
    FedConfig {
        agents,
        local_epochs: 1,
        iterations: 3,
        local_batch_size: 4,
        lr: 0.01,
        local_optimizer: OptimizerKind::Sgd,
        seed: 5,
        model: ModelConfig::shrunken(),
        ..FedConfig::default()
    }
}

fn max_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn single_agent_full_batch_matches_centralized_sgd() {
    let data = small_data(3, 1);
    let cfg = FedConfig {
        agents: 1,
        iterations: 50,
        local_batch_size: data.len(),
        ..shrunken_fed(1)
    };
    let run = run_federated(&cfg, &[Agent::new(0, data.clone()).unwrap()], None, &[]).unwrap();

    let batch = full_batch(&data).unwrap();
    let mut params = ModelParams::init(&cfg.model).unwrap();
    for _ in 0..50 {
        let step = model::loss_and_gradients(&params, &batch).unwrap();
        params = sgd_step(&params, &step.grads, cfg.lr).unwrap();
        params.set_running_stats(&step.running_stats).unwrap();
    }
    let diff = max_diff(&run.final_params, &params);
    assert!(diff < 1e-12, "max difference {diff:e}");
}

#[test]
fn zero_local_epochs_returns_the_global_model() {
    let data = small_data(2, 2);
    let agent = Agent::new(0, data).unwrap();
    let global = ModelParams::init(&ModelConfig::shrunken()).unwrap();
    let local = local_training(&agent, &global, 0, 4, 0.1, 3).unwrap();
    assert_eq!(local, global);
}

#[test]
fn one_full_batch_epoch_is_one_sgd_step() {
    let data = small_data(2, 3);
    let agent = Agent::new(0, data.clone()).unwrap();
    let global = ModelParams::init(&ModelConfig::shrunken()).unwrap();
    let local = local_training(&agent, &global, 1, data.len(), 0.05, 3).unwrap();
    let step = model::loss_and_gradients(&global, &full_batch(&data).unwrap()).unwrap();
    let mut expected = sgd_step(&global, &step.grads, 0.05).unwrap();
    expected.set_running_stats(&step.running_stats).unwrap();
    assert!(max_diff(&local, &expected) < 1e-13);
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let data = small_data(4, 4);
    let corpus = small_corpus(4, 4);
    let parts = partition_agents(&corpus, 2, 9).unwrap();
    let agents: Vec<Agent> = parts
        .iter()
        .enumerate()
        .map(|(i, c)| Agent::new(i, preprocess_all(c, 16).unwrap()).unwrap())
        .collect();
    let cfg = shrunken_fed(2);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_federated(&cfg, &agents, None, &data).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(
        serde_json::to_string(&a.history).unwrap(),
        serde_json::to_string(&b.history).unwrap()
    );
    assert_eq!(a.history.records.len(), 3);
}

#[test]
fn pretraining_is_used_only_when_ratio_is_positive() {
    let data = small_data(2, 6);
    let mut cfg = shrunken_fed(1);
    cfg.init_training.epochs = 2;
    cfg.init_training.batch_size = 8;
    let fresh = ModelParams::init(&cfg.model).unwrap();
    let agents = [Agent::new(0, data.clone()).unwrap()];
    let plain = run_federated(&FedConfig { iterations: 1, ..cfg.clone() }, &agents, Some(&data), &[]).unwrap();
    assert_eq!(plain.initial, fresh);
    cfg.init_ratio = 0.5;
    let pre = run_federated(&FedConfig { iterations: 1, ..cfg.clone() }, &agents, Some(&data), &[]).unwrap();
    assert_ne!(pre.initial, fresh);
    assert!(run_federated(&cfg, &agents, None, &[]).is_err());
}

// The coordinator only ever sees a contribution, which holds parameters and a
// sample count. This destructuring stops compiling if a field is added.
#[test]
fn contributions_carry_only_parameters_and_a_count() {
    let data = small_data(2, 7);
    let agent = Agent::new(0, data).unwrap();
    let global = ModelParams::init(&ModelConfig::shrunken()).unwrap();
    let (c, _losses) = agent.train_round(&global, &shrunken_fed(1).local_plan(), 1).unwrap();
    let Contribution { params, size } = c.clone();
    assert_eq!(size, agent.size());
    assert_eq!(params.config(), global.config());
    assert_eq!(aggregate(&[c]).unwrap(), params);
}

#[test]
fn agents_cover_every_training_user_once() {
    let corpus = synth_generate(&SynthConfig {
        users: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train, _) = split_train_test(&corpus, 4, 0).unwrap();
    let parts = partition_agents(&train, 3, 1).unwrap();
    let mut users: Vec<u32> = parts.iter().flat_map(|p| p.users()).collect();
    let sizes: Vec<usize> = parts.iter().map(|p| p.users().len()).collect();
    users.sort();
    assert_eq!(users, train.users());
    assert_eq!(sizes, vec![3, 2, 2]);
}
