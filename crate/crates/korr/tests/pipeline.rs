use korr::base::{train_base, BaseCheckpoint, BasePolicy, BasePolicyConfig};
use korr::dynamics::{DynamicsConfig, DynamicsModel};
use korr::env::{EnvConfig, RandomnessLevel};
use korr::eval::{evaluate, EvalSpec, PolicyStack};
use korr::ppo::{train, PpoConfig, TrainSetup, TrainSinks};
use korr::residual::{ResidualCheckpoint, ResidualConfig, ResidualMeta, ResidualMode, ResidualPolicy};

fn small_base() -> (BaseCheckpoint, BasePolicy) {
    let cfg = BasePolicyConfig {
        demo_count: 6,
        epochs: 2,
        hidden: vec![32, 32],
        ..BasePolicyConfig::default()
    };
    let spec = EvalSpec {
        episodes: 16,
        ..EvalSpec::default()
    };
    let (ck, _) = train_base(&EnvConfig::default(), &cfg, &spec).unwrap();
    let policy = ck.policy.clone();
    (ck, policy)
}

fn fresh(mode: ResidualMode, base: &BasePolicy) -> ResidualPolicy {
    ResidualPolicy::initialize(
        ResidualConfig {
            mode,
            hidden: vec![16, 16],
            ..ResidualConfig::default()
        },
        &DynamicsConfig {
            lift_dim: 8,
            lift_hidden: vec![16],
            nonlinear_width: 16,
            ..DynamicsConfig::default()
        },
        base.normalizer.clone(),
        3,
    )
    .unwrap()
}

fn short_run(base: &BasePolicy, mode: ResidualMode, bkp: bool) -> ResidualPolicy {
    let setup = TrainSetup {
        env: EnvConfig::at(RandomnessLevel::Med, false),
        base,
        ppo: PpoConfig {
            num_envs: 4,
            steps_per_env: 48,
            iterations: 3,
            minibatch_size: 64,
            eval_every: 0,
            bkp_rl_to_koopman: bkp,
            ..PpoConfig::default()
        },
        selection: EvalSpec {
            episodes: 8,
            ..EvalSpec::default()
        },
        seed: 9,
    };
    train(&setup, fresh(mode, base), &mut TrainSinks::default()).unwrap().final_policy
}

fn spec() -> EvalSpec {
    EvalSpec {
        level: RandomnessLevel::Med,
        disturb: true,
        episodes: 24,
        ..EvalSpec::default()
    }
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let (ck, base) = small_base();
    let dir = tempfile::tempdir().unwrap();
    let base_path = dir.path().join("base.ckpt");
    ck.save(&base_path).unwrap();
    let loaded = BaseCheckpoint::load(&base_path).unwrap();
    assert_eq!(loaded.policy, base);

    let policy = short_run(&base, ResidualMode::Korr, true);
    let res_path = dir.path().join("residual.ckpt");
    ResidualCheckpoint {
        policy: policy.clone(),
        meta: ResidualMeta {
            training_level: RandomnessLevel::Med,
            training_seed: 9,
            iteration: 3,
            bkp_rl_to_koopman: true,
            eval_success: None,
        },
    }
    .save(&res_path)
    .unwrap();
    let back = ResidualCheckpoint::load(&res_path).unwrap();
    assert_eq!(back.policy, policy);

    let env = EnvConfig::default();
    let a = evaluate(PolicyStack::Residual { base: &base, residual: &policy }, &env, &spec()).unwrap();
    let b = evaluate(
        PolicyStack::Residual {
            base: &loaded.policy,
            residual: &back.policy,
        },
        &env,
        &spec(),
    )
    .unwrap();
    assert_eq!(a.outcomes, b.outcomes);
    assert_eq!(a.lengths, b.lengths);
}

#[test]
fn training_moves_the_residual_away_from_zero() {
    let (_, base) = small_base();
    let start = fresh(ResidualMode::Resip, &base);
    let trained = short_run(&base, ResidualMode::Resip, true);
    assert_ne!(start.nets.actor, trained.nets.actor);
    assert_ne!(start.nets.critic, trained.nets.critic);
    assert_eq!(start.nets.logstd, trained.nets.logstd, "logstd is fixed unless learned");
}

#[test]
fn blocking_policy_gradients_changes_the_koopman_model() {
    let (_, base) = small_base();
    let with = short_run(&base, ResidualMode::Korr, true);
    let without = short_run(&base, ResidualMode::Korr, false);
    let (Some(DynamicsModel::Koopman(k1)), Some(DynamicsModel::Koopman(k2))) = (&with.dynamics, &without.dynamics) else {
        panic!("korr policies carry a Koopman model");
    };
    assert_ne!(k1.transition, k2.transition);
    let start = fresh(ResidualMode::Korr, &base);
    let Some(DynamicsModel::Koopman(k0)) = &start.dynamics else { unreachable!() };
    assert_ne!(k0.transition, k2.transition, "prediction loss alone still trains the operator");
}

#[test]
fn nonlinear_conditioning_mode_trains() {
    let (_, base) = small_base();
    let p = short_run(&base, ResidualMode::ResipNonlinDyn, true);
    assert!(matches!(p.dynamics, Some(DynamicsModel::Nonlinear(_))));
}
