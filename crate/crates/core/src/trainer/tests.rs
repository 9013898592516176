use super::*;
use crate::config::Variant;

fn tiny(variant: Variant) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.apply_text(
        "env.width = 10\nenv.height = 10\nenv.n_agents = 5\nenv.n_food = 4\nenv.view_radius = 1\n\
         env.horizon = 12\nenv.minimap_x = 2\nenv.minimap_y = 2\n\
         algo.q_hidden = 16\nalgo.intention_hidden = 8\nalgo.vae_hidden = 8\nalgo.intention_dim = 4\n\
         algo.cognition_dim = 4\nalgo.mixer_hidden = 8\nalgo.batch_size = 16\nalgo.buffer_capacity = 5000\n\
         algo.target_sync = 40\nalgo.episodes = 4\nalgo.learning_rate = 0.001\n",
    )
    .unwrap();
    let c = ablation_config(&c, variant);
    c.validate().unwrap();
    c
}

fn run(c: &ExperimentConfig) -> (Trainer, Vec<EpisodeOutput>) {
    let mut outs = Vec::new();
    let t = run_training(c, |_, o| {
        outs.push(o.clone());
        Ok(())
    })
    .unwrap();
    (t, outs)
}

#[test]
fn zero_episodes_is_an_empty_run() {
    let mut c = tiny(Variant::Full);
    c.algo.episodes = 0;
    let (t, outs) = run(&c);
    assert!(outs.is_empty());
    assert_eq!(t.env_steps(), 0);
}

#[test]
fn invalid_config_fails_before_any_episode() {
    let mut c = tiny(Variant::Full);
    c.algo.gamma = 2.0;
    let mut called = false;
    let res = run_training(&c, |_, _| {
        called = true;
        Ok(())
    });
    assert!(matches!(res, Err(Error::Config(_))));
    assert!(!called);
}

#[test]
fn horizon_one_gives_one_transition_per_agent() {
    let mut c = tiny(Variant::Full);
    c.env.horizon = 1;
    c.algo.episodes = 1;
    let (t, outs) = run(&c);
    assert_eq!(outs[0].metrics.steps, 1);
    assert_eq!(t.org_buffer().len(), 5);
    assert_eq!(t.step_buffer().len(), 1);
    assert_eq!(t.step_buffer().weight(), 5);
}

#[test]
fn same_seed_same_metrics() {
    let c = tiny(Variant::Full);
    let a: Vec<_> = run(&c).1.iter().map(|o| o.metrics.without_timing()).collect();
    let b: Vec<_> = run(&c).1.iter().map(|o| o.metrics.without_timing()).collect();
    assert_eq!(a, b);
    assert!(a.iter().any(|m| m.train_ticks > 0));
}

#[test]
fn different_seed_differs() {
    let c = tiny(Variant::Full);
    let mut d = c.clone();
    d.run.seed = 1;
    let a: Vec<_> = run(&c).1.iter().map(|o| o.metrics.total_reward).collect();
    let b: Vec<_> = run(&d).1.iter().map(|o| o.metrics.total_reward).collect();
    assert_ne!(a, b);
}

#[test]
fn every_pathway_runs_in_the_full_variant() {
    let (t, _) = run(&tiny(Variant::Full));
    let k = t.counts();
    assert!(k.org_actions > 0 && k.org_updates > 0 && k.structural_rewards > 0);
    assert!(k.team_loss_evals > 0 && k.consensus_loss_evals > 0 && k.intrinsic_team_rewards > 0);
    assert!(k.decision_updates > 0 && k.target_syncs > 0);
}

#[test]
fn variant_g_never_evaluates_consensus() {
    let (t, _) = run(&tiny(Variant::G));
    assert_eq!(t.counts().consensus_loss_evals, 0);
    assert!(t.counts().team_loss_evals > 0);
}

#[test]
fn variant_c_never_computes_structural_reward() {
    let (t, _) = run(&tiny(Variant::C));
    assert_eq!(t.counts().structural_rewards, 0);
    assert!(t.counts().org_updates > 0);
}

#[test]
fn variant_i_team_reward_is_member_sum() {
    let (t, _) = run(&tiny(Variant::I));
    assert_eq!(t.counts().intrinsic_team_rewards, 0);
    for r in t.step_buffer().iter() {
        let d = &r.decision;
        for (k, members) in d.teams.teams.iter().enumerate() {
            let hand: f64 = members.iter().map(|&i| d.rewards[i]).sum();
            assert_eq!(d.team_rewards[k], hand);
        }
    }
}

#[test]
fn variant_k3_lists_three_neighbors() {
    let (t, _) = run(&tiny(Variant::K3));
    let w = t.spec().observation_width();
    for tr in t.org_buffer().iter() {
        let block = &tr.obs[w..];
        assert_eq!(block.len(), 12);
        // the fourth entry of each rank block flags a filled rank
        assert!((0..3).all(|r| block[4 * r + 3] == 1.0), "{block:?}");
    }
}

#[test]
fn idqn_disables_coordination() {
    let (t, outs) = run(&tiny(Variant::Idqn));
    let k = t.counts();
    assert_eq!(k.org_actions + k.org_updates + k.team_loss_evals + k.consensus_loss_evals, 0);
    assert_eq!(k.mixing_loss_evals, 0);
    assert!(k.decision_updates > 0);
    assert!(outs.iter().all(|o| o.metrics.org_loss.is_none() && o.metrics.consensus_loss.is_none()));
}

#[test]
fn random_team_qmix_keeps_teams_and_mixes() {
    let (t, _) = run(&tiny(Variant::QmixRandom));
    let k = t.counts();
    assert_eq!(k.org_actions, 0);
    assert!(k.mixing_loss_evals > 0);
    for r in t.step_buffer().iter() {
        assert!(r.decision.teams.teams.iter().all(|m| m.len() <= 3));
    }
}

#[test]
fn external_reward_routed_once_per_buffer() {
    let c = tiny(Variant::C);
    let (t, outs) = run(&c);
    let total: f64 = outs.iter().map(|o| o.metrics.total_reward).sum();
    let org: f64 = t.org_buffer().iter().map(|tr| tr.reward).sum();
    let dec: f64 = t
        .step_buffer()
        .iter()
        .map(|r| (0..r.decision.n_agents()).filter(|&i| r.decision.alive[i]).map(|i| r.decision.rewards[i]).sum::<f64>())
        .sum();
    for v in [org, dec, t.routing().org_external, t.routing().decision_external] {
        assert!((v - total).abs() < 1e-9, "{v} vs {total}");
    }
}

#[test]
fn targets_move_only_at_syncs() {
    let c = tiny(Variant::Full);
    let mut t = Trainer::new(&c).unwrap();
    t.enable_target_audit();
    train_until(&mut t, 4, |_, _| Ok(())).unwrap();
    let a = t.target_audit().unwrap();
    assert!(a.checks > 0);
    assert!(t.counts().target_syncs > 0);
    assert_eq!(a.unsynced_changes, 0);
    assert_eq!(a.bad_syncs, 0);
}

#[test]
fn resume_matches_uninterrupted() {
    let mut c = tiny(Variant::Full);
    c.algo.episodes = 5;
    let straight: Vec<_> = run(&c).1.iter().map(|o| o.metrics.without_timing()).collect();
    let mut first = Trainer::new(&c).unwrap();
    train_until(&mut first, 2, |_, _| Ok(())).unwrap();
    let bytes = first.checkpoint_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint_bytes(&bytes).unwrap();
    let mut tail = Vec::new();
    train_until(&mut resumed, 5, |_, o| {
        tail.push(o.metrics.without_timing());
        Ok(())
    })
    .unwrap();
    assert_eq!(tail, straight[2..]);
}

#[test]
fn corrupt_checkpoint_is_format_error() {
    assert!(matches!(Trainer::from_checkpoint_bytes(b"nonsense"), Err(Error::Format(_))));
    let t = Trainer::new(&tiny(Variant::Full)).unwrap();
    let mut bytes = t.checkpoint_bytes().unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(Trainer::from_checkpoint_bytes(&bytes).is_err());
}

#[test]
fn evaluation_leaves_training_untouched() {
    let c = tiny(Variant::Full);
    let mut a = Trainer::new(&c).unwrap();
    let mut b = Trainer::new(&c).unwrap();
    let r1 = a.evaluate(7).unwrap();
    assert_eq!(r1, a.evaluate(7).unwrap());
    train_until(&mut a, 2, |_, _| Ok(())).unwrap();
    train_until(&mut b, 2, |_, _| Ok(())).unwrap();
    assert_eq!(a.counts(), b.counts());
    assert_eq!(a.decision_learner().online.fingerprint(), b.decision_learner().online.fingerprint());
}

#[test]
fn overflowing_rewards_abort_with_module_name() {
    let mut c = tiny(Variant::Full);
    c.set("env.reward.move", "1e300").unwrap();
    let err = run_training(&c, |_, _| Ok(())).err().unwrap();
    match err {
        Error::Numeric { module, .. } => assert!(!module.is_empty()),
        other => panic!("expected numeric abort, got {other}"),
    }
}

#[test]
fn dumps_and_traces_follow_flags() {
    let mut c = tiny(Variant::Full);
    c.algo.episodes = 1;
    let (_, outs) = run(&c);
    assert!(outs[0].intentions.is_none() && outs[0].team_traces.is_empty());
    c.run.dump_intentions = true;
    c.run.trace_teams = true;
    let (_, outs) = run(&c);
    let d = outs[0].intentions.as_ref().unwrap();
    let steps = outs[0].metrics.steps;
    assert_eq!(outs[0].team_traces.len(), steps);
    assert!(d.individual.iter().all(|r| r.values.len() == 4));
    let team_rows: usize = outs[0].team_traces.iter().map(|t| t.teams.len()).sum();
    assert_eq!(d.team.len(), team_rows);
}
