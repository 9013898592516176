//! Joint training of organization control, intention generators and the
//! decision module, plus baselines, ablations and metrics.

mod checkpoint;
mod metrics;
mod replay;
mod schedule;
mod variant;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_rows, Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::config::ExperimentConfig;
use crate::decision::{
    decision_losses_from, team_intrinsic_reward, DecisionBatch, DecisionConfig, DecisionLearner, DecisionStep,
};
use crate::env::{EnvSpec, GridEnv};
use crate::error::{Error, Result};
use crate::intention::{
    consensus_vae_loss, sample_triplets, team_generator_loss, team_spatiotemporal, team_spatiotemporal_labels,
    IndividualConfig, IndividualNet, TeamIntentionConfig, TeamIntentionNet, TeamLayout,
};
use crate::org::{
    build_team_graph, decode_org_action, find_teams, nearest_neighbors, org_observation, structural_reward,
    total_org_reward, AgentGraph, OrgLearner, OrgLearnerConfig, OrgTransition, TeamPartition, TeamTrace,
};
use crate::output::{IntentionDump, IntentionRow};

pub use checkpoint::{TrainState, CHECKPOINT_MAGIC};
pub use metrics::{avg_team_number, total_reward, EpisodeTrace, LossMean, MetricsRecord};
pub use replay::{ReplayBuffer, Weighted};
pub use schedule::EpsilonSchedule;
pub use variant::{ablation_config, DecisionInput, TeamReward, Teaming, VariantPlan};

/// One environment step as stored for the intention and decision updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub obs: Vec<Vec<f64>>,
    pub next_obs: Vec<Vec<f64>>,
    pub positions: Vec<(f64, f64)>,
    pub decision: DecisionStep,
}

impl Weighted for StepRecord {
    fn weight(&self) -> usize {
        self.decision.samples()
    }
}

impl Weighted for OrgTransition {
    fn weight(&self) -> usize {
        1
    }
}

/// How often each pathway ran. Ablations are checked against these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub org_actions: u64,
    pub org_updates: u64,
    pub structural_rewards: u64,
    pub team_intention_evals: u64,
    pub team_loss_evals: u64,
    pub individual_evals: u64,
    pub consensus_loss_evals: u64,
    pub intrinsic_team_rewards: u64,
    pub decision_updates: u64,
    pub mixing_loss_evals: u64,
    pub target_syncs: u64,
}

/// External reward pushed into each buffer, for routing checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardRouting {
    pub org_external: f64,
    pub decision_external: f64,
}

/// Target-network audit: fingerprints compared after every step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetAudit {
    pub checks: u64,
    /// Steps where a target changed without a sync.
    pub unsynced_changes: u64,
    /// Syncs after which a target differed from its online network.
    pub bad_syncs: u64,
    last: Option<(u64, u64)>,
}

#[derive(Clone, Debug)]
struct IntentionModels {
    team_cfg: TeamIntentionConfig,
    team_net: TeamIntentionNet,
    team_store: ParamStore,
    team_adam: Adam,
    individual_cfg: IndividualConfig,
    individual_net: IndividualNet,
    individual_store: ParamStore,
    individual_adam: Adam,
}

/// Per-step intention outputs for the living agents.
struct StepIntentions {
    /// One per team of the step partition.
    team: Vec<Vec<f64>>,
    /// Indexed by agent; empty for dead agents.
    individual: Vec<Vec<f64>>,
    cognition: Vec<Vec<f64>>,
}

/// Everything an episode produces besides parameter updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutput {
    pub metrics: MetricsRecord,
    pub team_traces: Vec<TeamTrace>,
    pub intentions: Option<IntentionDump>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Greedy,
}

/// Owns every learner, buffer and counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: ExperimentConfig,
    plan: VariantPlan,
    spec: EnvSpec,
    schedule: EpsilonSchedule,
    org: Option<OrgLearner>,
    intentions: Option<IntentionModels>,
    decision: DecisionLearner,
    org_buffer: ReplayBuffer<OrgTransition>,
    step_buffer: ReplayBuffer<StepRecord>,
    rng: ChaCha8Rng,
    episode: usize,
    env_steps: u64,
    samples: u64,
    next_tick: u64,
    next_sync: u64,
    counts: CallCounts,
    routing: RewardRouting,
    audit: Option<TargetAudit>,
}

fn finite(module: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(module, format!("loss is {value}")))
    }
}

impl Trainer {
    /// Validates `config` and initializes every network from `run.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.env_spec()?;
        let plan = VariantPlan::of(config);
        let a = &config.algo;
        let schedule = EpsilonSchedule::new(a.epsilon_episodes.clone(), a.epsilon_values.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
        let obs_width = spec.observation_width();
        let state_width = spec.state_width();

        let org = match plan.teaming {
            Teaming::Learned => Some(OrgLearner::new(
                obs_width,
                OrgLearnerConfig {
                    m: a.m,
                    hidden: a.q_hidden.clone(),
                    gamma: a.gamma,
                    learning_rate: a.learning_rate,
                    double_q: a.double_q,
                    dueling: a.dueling,
                },
                &mut rng,
            )?),
            _ => None,
        };
        let adam_cfg = AdamConfig {
            learning_rate: a.learning_rate,
            ..AdamConfig::default()
        };
        let intentions = if plan.intentions {
            let team_cfg = TeamIntentionConfig {
                obs_width,
                state_width,
                hidden: a.intention_hidden,
                dim: a.intention_dim,
                margin: a.margin,
                lambda_tg: a.lambda_tg,
                time_weight: a.time_weight,
            };
            let mut team_store = ParamStore::new();
            let team_net = TeamIntentionNet::new(&mut team_store, &team_cfg, &mut rng)?;
            let individual_cfg = IndividualConfig {
                obs_width,
                hidden: a.vae_hidden,
                cognition: a.cognition_dim,
                dim: a.intention_dim,
                team_dim: a.intention_dim,
            };
            let mut individual_store = ParamStore::new();
            let individual_net = IndividualNet::new(&mut individual_store, &individual_cfg, &mut rng)?;
            Some(IntentionModels {
                team_adam: Adam::new(&team_store, adam_cfg),
                individual_adam: Adam::new(&individual_store, adam_cfg),
                team_cfg,
                team_net,
                team_store,
                individual_cfg,
                individual_net,
                individual_store,
            })
        } else {
            None
        };
        let (input_width, feature_cols) = match plan.decision_input {
            DecisionInput::IntentionCognition | DecisionInput::TeamCognition => {
                (a.intention_dim + a.cognition_dim, a.intention_dim..a.intention_dim + a.cognition_dim)
            }
            DecisionInput::Observation => (obs_width, obs_width - 3..obs_width),
        };
        let decision = DecisionLearner::new(
            DecisionConfig {
                input_width,
                feature_cols,
                state_width,
                hidden: a.q_hidden.clone(),
                mixer_hidden: a.mixer_hidden,
                actions: spec.action_count(),
                gamma: a.gamma,
                learning_rate: a.learning_rate,
                lambda_qmix: a.lambda_qmix,
                double_q: a.double_q,
                dueling: a.dueling,
                mixing: plan.mixing,
            },
            &mut rng,
        )?;
        let tick_every = (a.batch_size / a.train_frequency) as u64;
        Ok(Self {
            config: config.clone(),
            plan,
            spec,
            schedule,
            org,
            intentions,
            decision,
            org_buffer: ReplayBuffer::new(a.buffer_capacity),
            step_buffer: ReplayBuffer::new(a.buffer_capacity),
            rng,
            episode: 0,
            env_steps: 0,
            samples: 0,
            next_tick: tick_every,
            next_sync: a.target_sync as u64,
            counts: CallCounts::default(),
            routing: RewardRouting::default(),
            audit: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn plan(&self) -> &VariantPlan {
        &self.plan
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Index of the next episode to run.
    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Agent samples collected so far; drives training and target syncs.
    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn counts(&self) -> &CallCounts {
        &self.counts
    }

    pub fn routing(&self) -> &RewardRouting {
        &self.routing
    }

    pub fn org_learner(&self) -> Option<&OrgLearner> {
        self.org.as_ref()
    }

    pub fn decision_learner(&self) -> &DecisionLearner {
        &self.decision
    }

    pub fn org_buffer(&self) -> &ReplayBuffer<OrgTransition> {
        &self.org_buffer
    }

    pub fn step_buffer(&self) -> &ReplayBuffer<StepRecord> {
        &self.step_buffer
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.at(self.episode)
    }

    /// Starts checking target fingerprints after every environment step.
    pub fn enable_target_audit(&mut self) {
        self.audit = Some(TargetAudit::default());
    }

    pub fn target_audit(&self) -> Option<&TargetAudit> {
        self.audit.as_ref()
    }

    fn target_fingerprints(&self) -> (u64, u64) {
        (
            self.org.as_ref().map_or(0, |o| o.target.fingerprint()),
            self.decision.target.fingerprint(),
        )
    }

    /// Runs one training episode and returns its outputs.
    pub fn train_episode(&mut self) -> Result<EpisodeOutput> {
        let out = self.run_episode(Mode::Train)?;
        self.episode += 1;
        Ok(out)
    }

    /// Total external reward of one greedy episode on `seed`. Nothing is
    /// learned and no counter moves.
    pub fn evaluate(&mut self, seed: u64) -> Result<f64> {
        let saved = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(seed));
        let counts = self.counts;
        let result = self.run_episode(Mode::Greedy);
        self.rng = saved;
        self.counts = counts;
        Ok(result?.metrics.total_reward)
    }

    fn random_partition(&mut self) -> TeamPartition {
        let n = self.spec.n_agents;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let size = self.config.algo.m + 1;
        let mut labels = vec![None; n];
        for (pos, &i) in order.iter().enumerate() {
            labels[i] = Some(pos / size);
        }
        TeamPartition::from_labels(&labels)
    }

    fn step_intentions(
        &mut self,
        mode: Mode,
        obs: &[Vec<f64>],
        state: &[f64],
        partition: &TeamPartition,
    ) -> Result<Option<StepIntentions>> {
        let Some(m) = &self.intentions else {
            return Ok(None);
        };
        let layout = TeamLayout::new(&[partition])?;
        let rows: Vec<&[f64]> = layout.rows.iter().map(|&(_, i)| obs[i].as_slice()).collect();
        let dim = m.individual_cfg.dim;
        let noise = match mode {
            Mode::Train => Tensor::from_shape_simple_fn((layout.n_rows(), dim), || self.rng.sample(StandardNormal)),
            Mode::Greedy => Tensor::zeros((layout.n_rows(), dim)),
        };
        let mut tape = Tape::new();
        let o = tape.constant(stack_rows(&rows, m.team_cfg.obs_width));
        let s = tape.row(state);
        let c = m.team_net.encode(&mut tape, &m.team_store, o, s, &layout)?;
        let c_value = tape.value(c).clone();
        let c_const = tape.constant(c_value.clone());
        let nv = tape.constant(noise);
        let (chi, it) = m
            .individual_net
            .forward(&mut tape, &m.individual_store, o, c_const, nv, &layout)?;
        let n = obs.len();
        let mut individual = vec![Vec::new(); n];
        let mut cognition = vec![Vec::new(); n];
        for (r, &(_, i)) in layout.rows.iter().enumerate() {
            individual[i] = tape.value(it.zeta).row(r).to_vec();
            cognition[i] = tape.value(chi).row(r).to_vec();
        }
        if mode == Mode::Train {
            self.counts.team_intention_evals += 1;
            self.counts.individual_evals += 1;
        }
        Ok(Some(StepIntentions {
            team: c_value.rows().into_iter().map(|r| r.to_vec()).collect(),
            individual,
            cognition,
        }))
    }

    fn decision_inputs(
        &self,
        obs: &[Vec<f64>],
        alive: &[bool],
        partition: &TeamPartition,
        it: Option<&StepIntentions>,
    ) -> Vec<Vec<f64>> {
        let width = self.decision.config.input_width;
        (0..obs.len())
            .map(|i| {
                if !alive[i] {
                    return vec![0.0; width];
                }
                match (self.plan.decision_input, it) {
                    (DecisionInput::Observation, _) => obs[i].clone(),
                    (DecisionInput::IntentionCognition, Some(it)) => {
                        [it.individual[i].as_slice(), it.cognition[i].as_slice()].concat()
                    }
                    (DecisionInput::TeamCognition, Some(it)) => {
                        let k = partition.team_of[i].expect("living agents have a team");
                        [it.team[k].as_slice(), it.cognition[i].as_slice()].concat()
                    }
                    _ => unreachable!("intention inputs without intention models"),
                }
            })
            .collect()
    }

    fn run_episode(&mut self, mode: Mode) -> Result<EpisodeOutput> {
        let started = Instant::now();
        let train = mode == Mode::Train;
        let epsilon = if train { self.schedule.at(self.episode) } else { 0.0 };
        let env_seed: u64 = self.rng.gen();
        let mut env = GridEnv::reset(self.spec.clone(), env_seed)?;
        let n = self.spec.n_agents;
        let m = self.config.algo.m;
        let alpha_u = if self.plan.structural_reward { self.config.algo.alpha_u } else { 0.0 };
        let fixed_teams = match self.plan.teaming {
            Teaming::RandomFixed => Some(self.random_partition()),
            Teaming::Singletons => Some(TeamPartition::singletons(n)),
            Teaming::Learned => None,
        };
        let trace_teams = train && self.config.run.trace_teams;
        let mut dump = (train && self.config.run.dump_intentions).then(|| IntentionDump::new(self.config.algo.intention_dim));

        let mut trace = EpisodeTrace::default();
        let mut team_traces = Vec::new();
        let mut losses = [LossMean::default(); 4];
        let mut ticks = 0;
        let mut skips = 0;
        let mut prev_graph: Option<AgentGraph> = None;
        let mut pending_org: Vec<Option<OrgTransition>> = vec![None; n];
        let mut pending_step: Option<StepRecord> = None;
        let mut obs = env.observe_all();

        loop {
            let t = env.state().t;
            let alive = env.state().alive_agents();
            let positions = env.normalized_positions();
            let state = env.global_state();

            // organization control
            let mut org_rows: Vec<(usize, Vec<f64>, usize)> = Vec::new();
            let (graph, partition) = match (&self.org, &fixed_teams) {
                (Some(org), _) => {
                    let neighbors = nearest_neighbors(&positions, Some(&alive), m);
                    let live: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
                    let rows: Vec<Vec<f64>> = live
                        .iter()
                        .map(|&i| org_observation(&obs[i], i, &positions, &neighbors[i], prev_graph.as_ref(), m))
                        .collect();
                    for (&i, row) in live.iter().zip(&rows) {
                        if let Some(mut p) = pending_org[i].take() {
                            p.next_obs = row.clone();
                            self.org_buffer.push(p)?;
                        }
                    }
                    let actions = org.act(&rows, epsilon, &mut self.rng)?;
                    let mut decisions = vec![Vec::new(); n];
                    for ((&i, row), &a) in live.iter().zip(rows).zip(&actions) {
                        let mut bits = decode_org_action(a, m)?;
                        bits.truncate(neighbors[i].len());
                        decisions[i] = bits;
                        org_rows.push((i, row, a));
                    }
                    if train {
                        self.counts.org_actions += 1;
                    }
                    let graph = build_team_graph(&decisions, &neighbors)?;
                    let partition = find_teams(&graph).restrict(&alive);
                    (graph, partition)
                }
                (None, Some(fixed)) => (AgentGraph::empty(n), fixed.restrict(&alive)),
                (None, None) => unreachable!("learned teaming without an organization learner"),
            };

            let intentions = self.step_intentions(mode, &obs, &state, &partition)?;
            let inputs = self.decision_inputs(&obs, &alive, &partition, intentions.as_ref());

            if let Some(mut p) = pending_step.take() {
                p.decision.next_inputs = inputs.clone();
                p.decision.next_alive = alive.clone();
                p.decision.next_teams = partition.clone();
                p.decision.next_state = state.clone();
                self.step_buffer.push(p)?;
            }

            if let (Some(d), Some(it)) = (dump.as_mut(), intentions.as_ref()) {
                let episode = self.episode;
                for i in (0..n).filter(|&i| alive[i]) {
                    d.individual.push(IntentionRow { episode, t, id: i, values: it.individual[i].clone() });
                }
                for (k, c) in it.team.iter().enumerate() {
                    d.team.push(IntentionRow { episode, t, id: k, values: c.clone() });
                }
            }
            if trace_teams {
                team_traces.push(TeamTrace::new(self.episode, t, &graph, &partition));
            }

            let actions = self.decision.act(&inputs, &alive, epsilon, &mut self.rng)?;
            let outcome = env.step(&actions)?;
            trace.rewards.push(outcome.rewards.clone());
            trace.team_counts.push(partition.team_count());
            self.env_steps += 1;

            if !train {
                prev_graph = Some(graph);
                obs = outcome.observations;
                if outcome.done {
                    break;
                }
                continue;
            }

            let next_alive = env.state().alive_agents();
            for (i, row, a) in org_rows {
                let r_u = match (&prev_graph, alpha_u != 0.0) {
                    (Some(before), true) => {
                        self.counts.structural_rewards += 1;
                        structural_reward(before, &graph, i)?
                    }
                    _ => 0.0,
                };
                let r_e = outcome.rewards[i];
                self.routing.org_external += r_e;
                let tr = OrgTransition {
                    next_obs: row.clone(),
                    obs: row,
                    action: a,
                    reward: total_org_reward(r_e, r_u, alpha_u),
                    done: outcome.done || !next_alive[i],
                };
                if tr.done {
                    self.org_buffer.push(tr)?;
                } else {
                    pending_org[i] = Some(tr);
                }
            }

            let team_rewards: Vec<f64> = match (self.plan.team_reward, intentions.as_ref()) {
                (TeamReward::Intrinsic, Some(it)) => {
                    self.counts.intrinsic_team_rewards += 1;
                    (0..it.team.len()).map(|k| team_intrinsic_reward(&it.team, k)).collect()
                }
                _ => partition
                    .teams
                    .iter()
                    .map(|members| members.iter().map(|&i| outcome.rewards[i]).sum())
                    .collect(),
            };
            let step_samples = alive.iter().filter(|&&a| a).count();
            for i in (0..n).filter(|&i| alive[i]) {
                self.routing.decision_external += outcome.rewards[i];
            }
            let record = StepRecord {
                t,
                obs: obs.clone(),
                next_obs: outcome.observations.clone(),
                positions,
                decision: DecisionStep {
                    inputs,
                    actions,
                    rewards: outcome.rewards.clone(),
                    alive: alive.clone(),
                    teams: partition.clone(),
                    team_rewards,
                    state,
                    next_inputs: vec![vec![0.0; self.decision.config.input_width]; n],
                    next_alive,
                    next_teams: partition,
                    next_state: outcome.global_state.clone(),
                    done: outcome.done,
                },
            };
            if outcome.done {
                self.step_buffer.push(record)?;
            } else {
                pending_step = Some(record);
            }

            self.samples += step_samples as u64;
            let tick_every = (self.config.algo.batch_size / self.config.algo.train_frequency) as u64;
            while self.samples >= self.next_tick {
                self.next_tick += tick_every;
                let (l, skipped) = self.train_tick()?;
                if l.iter().any(Option::is_some) {
                    ticks += 1;
                }
                for (acc, v) in losses.iter_mut().zip(l) {
                    if let Some(v) = v {
                        acc.push(v);
                    }
                }
                skips += skipped;
            }
            let mut synced = false;
            while self.samples >= self.next_sync {
                self.next_sync += self.config.algo.target_sync as u64;
                self.sync_targets()?;
                synced = true;
            }
            self.audit_targets(synced);

            prev_graph = Some(graph);
            obs = outcome.observations;
            if outcome.done {
                break;
            }
        }

        let metrics = MetricsRecord {
            episode: self.episode,
            total_reward: total_reward(&trace),
            avg_team_number: avg_team_number(&trace),
            steps: trace.team_counts.len(),
            epsilon,
            org_loss: losses[0].mean(),
            team_intention_loss: losses[1].mean(),
            consensus_loss: losses[2].mean(),
            decision_loss: losses[3].mean(),
            train_ticks: ticks,
            team_td_skips: skips,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        Ok(EpisodeOutput {
            metrics,
            team_traces,
            intentions: dump,
        })
    }
}

impl Trainer {
    /// One optimization of each enabled module, in the order organization,
    /// intentions, decision. Modules whose buffer holds less than a batch
    /// are skipped. Returns the four losses and the skipped team targets.
    fn train_tick(&mut self) -> Result<([Option<f64>; 4], usize)> {
        let batch = self.config.algo.batch_size;
        let mut out = [None; 4];
        if let Some(org) = self.org.as_mut() {
            if self.org_buffer.len() >= batch {
                let sample: Vec<OrgTransition> = self
                    .org_buffer
                    .sample(batch, &mut self.rng)?
                    .into_iter()
                    .cloned()
                    .collect();
                out[0] = Some(org.update(&sample)?);
                self.counts.org_updates += 1;
            }
        }
        if self.step_buffer.weight() < batch {
            return Ok((out, 0));
        }
        if self.intentions.is_some() {
            let (team, consensus) = self.train_intentions()?;
            out[1] = Some(team);
            out[2] = consensus;
        }
        let records: Vec<StepRecord> = self
            .step_buffer
            .sample_weight(batch, &mut self.rng)?
            .into_iter()
            .cloned()
            .collect();
        let (loss, prepared) = if self.intentions.is_some() {
            self.train_decision_end_to_end(&records)?
        } else {
            let steps: Vec<&DecisionStep> = records.iter().map(|r| &r.decision).collect();
            let prepared = self.decision.prepare(&steps)?;
            (self.decision.update(&prepared)?, prepared)
        };
        out[3] = Some(loss);
        self.counts.decision_updates += 1;
        if self.decision.config.mixing && self.decision.config.lambda_qmix != 0.0 && !prepared.team_targets.is_empty() {
            self.counts.mixing_loss_evals += 1;
        }
        Ok((out, prepared.skipped_teams))
    }

    /// Decision inputs of every `layout` row from the current intention
    /// networks. The team intention enters as a constant.
    fn intention_input_var(
        &self,
        tape: &mut Tape,
        obs: Tensor,
        states: Tensor,
        layout: &TeamLayout,
        noise: Tensor,
    ) -> Result<Var> {
        let m = self.intentions.as_ref().expect("intention models");
        let o = tape.constant(obs);
        let s = tape.constant(states);
        let c = m.team_net.encode(tape, &m.team_store, o, s, layout)?;
        let cv = tape.value(c).clone();
        let c = tape.constant(cv);
        let nv = tape.constant(noise);
        let (chi, it) = m.individual_net.forward(tape, &m.individual_store, o, c, nv, layout)?;
        match self.plan.decision_input {
            DecisionInput::TeamCognition => {
                let c_rows = tape.gather_rows(c, &layout.team_of_row)?;
                tape.concat_cols(&[c_rows, chi])
            }
            _ => tape.concat_cols(&[it.zeta, chi]),
        }
    }

    /// Recomputes stored inputs with the current intention networks and
    /// takes one step on the TD loss through both the decision network and
    /// the individual intention generator. Bootstrap inputs use the
    /// posterior mean.
    fn train_decision_end_to_end(&mut self, records: &[StepRecord]) -> Result<(f64, DecisionBatch)> {
        let width = self.spec.observation_width();
        let state_width = self.spec.state_width();
        let dim = self.config.algo.intention_dim;
        let n = self.spec.n_agents;
        let input_width = self.decision.config.input_width;
        let to_rows = |t: &Tensor, layout: &TeamLayout, s: usize| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; input_width]; n];
            for (r, &(step, i)) in layout.rows.iter().enumerate() {
                if step == s {
                    out[i] = t.row(r).to_vec();
                }
            }
            out
        };

        let partitions: Vec<&TeamPartition> = records.iter().map(|r| &r.decision.teams).collect();
        let layout = TeamLayout::new(&partitions)?;
        let obs = stack_rows(
            &layout.rows.iter().map(|&(s, i)| records[s].obs[i].as_slice()).collect::<Vec<_>>(),
            width,
        );
        let states = stack_rows(&records.iter().map(|r| r.decision.state.as_slice()).collect::<Vec<_>>(), state_width);
        let noise = Tensor::from_shape_simple_fn((layout.n_rows(), dim), || self.rng.sample(StandardNormal));
        let mut tape = Tape::new();
        let x = self.intention_input_var(&mut tape, obs, states, &layout, noise)?;
        let x_value = tape.value(x).clone();

        let live: Vec<usize> = (0..records.len()).filter(|&s| !records[s].decision.done).collect();
        let mut next_inputs = vec![vec![vec![0.0; input_width]; n]; records.len()];
        let next_partitions: Vec<&TeamPartition> = live.iter().map(|&s| &records[s].decision.next_teams).collect();
        let next_layout = TeamLayout::new(&next_partitions)?;
        if next_layout.n_rows() > 0 {
            let next_obs = stack_rows(
                &next_layout
                    .rows
                    .iter()
                    .map(|&(s, i)| records[live[s]].next_obs[i].as_slice())
                    .collect::<Vec<_>>(),
                width,
            );
            let next_states = stack_rows(
                &live.iter().map(|&s| records[s].decision.next_state.as_slice()).collect::<Vec<_>>(),
                state_width,
            );
            let mut next_tape = Tape::new();
            let zeros = Tensor::zeros((next_layout.n_rows(), dim));
            let nx = self.intention_input_var(&mut next_tape, next_obs, next_states, &next_layout, zeros)?;
            let nx = next_tape.value(nx);
            for (k, &s) in live.iter().enumerate() {
                next_inputs[s] = to_rows(nx, &next_layout, k);
            }
        }
        let steps: Vec<DecisionStep> = records
            .iter()
            .zip(next_inputs)
            .enumerate()
            .map(|(s, (r, next))| DecisionStep {
                inputs: to_rows(&x_value, &layout, s),
                next_inputs: next,
                ..r.decision.clone()
            })
            .collect();
        let prepared = self.decision.prepare(&steps.iter().collect::<Vec<_>>())?;

        let d = &mut self.decision;
        let parts = decision_losses_from(&d.net, &d.config, &mut tape, &d.online, &prepared, x)?;
        let value = finite("decision", tape.scalar(parts.total))?;
        let grads = tape.backward(parts.total)?;
        d.online.accumulate(&grads);
        d.adam.step(&mut d.online)?;
        let m = self.intentions.as_mut().expect("intention models");
        m.individual_store.accumulate(&grads);
        m.individual_adam.step(&mut m.individual_store)?;
        Ok((value, prepared))
    }

    fn train_intentions(&mut self) -> Result<(f64, Option<f64>)> {
        let batch = self.config.algo.batch_size;
        let horizon = self.spec.horizon;
        let records: Vec<&StepRecord> = self.step_buffer.sample_weight(batch, &mut self.rng)?;
        let m = self.intentions.as_mut().expect("intention models");
        let partitions: Vec<&TeamPartition> = records.iter().map(|r| &r.decision.teams).collect();
        let layout = TeamLayout::new(&partitions)?;
        let width = m.team_cfg.obs_width;
        let obs = stack_rows(
            &layout.rows.iter().map(|&(s, i)| records[s].obs[i].as_slice()).collect::<Vec<_>>(),
            width,
        );
        let next_obs = stack_rows(
            &layout
                .rows
                .iter()
                .map(|&(s, i)| records[s].next_obs[i].as_slice())
                .collect::<Vec<_>>(),
            width,
        );
        let states = stack_rows(
            &records.iter().map(|r| r.decision.state.as_slice()).collect::<Vec<_>>(),
            m.team_cfg.state_width,
        );
        let mut triplets = Vec::new();
        for (s, r) in records.iter().enumerate() {
            let features: Vec<[f64; 3]> = r
                .decision
                .teams
                .teams
                .iter()
                .map(|members| {
                    let pos: Vec<(f64, f64)> = members.iter().map(|&i| r.positions[i]).collect();
                    team_spatiotemporal(&pos, r.t, horizon)
                })
                .collect();
            let labels = team_spatiotemporal_labels(&features, m.team_cfg.time_weight);
            let base = layout.step_offset[s];
            triplets.extend(
                sample_triplets(&labels, &mut self.rng)
                    .into_iter()
                    .map(|(a, p, q)| (base + a, base + p, base + q)),
            );
        }

        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let o2 = tape.constant(next_obs);
        let sv = tape.constant(states.clone());
        let parts = team_generator_loss(&m.team_net, &mut tape, &m.team_store, o, o2, sv, &layout, &triplets, &m.team_cfg)?;
        let team_loss = finite("team intention", tape.scalar(parts.total))?;
        let grads = tape.backward(parts.total)?;
        m.team_store.accumulate(&grads);
        m.team_adam.step(&mut m.team_store)?;
        self.counts.team_loss_evals += 1;

        if !self.plan.consensus {
            return Ok((team_loss, None));
        }
        let dim = m.individual_cfg.dim;
        let noise = Tensor::from_shape_simple_fn((layout.n_rows(), dim), || self.rng.sample(StandardNormal));
        let mut tape = Tape::new();
        let o = tape.constant(obs);
        let sv = tape.constant(states);
        let c = m.team_net.encode(&mut tape, &m.team_store, o, sv, &layout)?;
        let c = tape.constant(tape.value(c).clone());
        let nv = tape.constant(noise);
        let (_, it) = m
            .individual_net
            .forward(&mut tape, &m.individual_store, o, c, nv, &layout)?;
        let parts = consensus_vae_loss(&mut tape, o, it.reconstruction, &it.posterior, &layout)?;
        let loss = finite("individual intention", tape.scalar(parts.total))?;
        let grads = tape.backward(parts.total)?;
        m.individual_store.accumulate(&grads);
        m.individual_adam.step(&mut m.individual_store)?;
        self.counts.consensus_loss_evals += 1;
        Ok((team_loss, Some(loss)))
    }

    fn sync_targets(&mut self) -> Result<()> {
        if let Some(org) = self.org.as_mut() {
            org.sync_target()?;
        }
        self.decision.sync_target()?;
        self.counts.target_syncs += 1;
        if let Some(audit) = self.audit.as_mut() {
            let org_ok = self
                .org
                .as_ref()
                .is_none_or(|o| o.target.fingerprint() == o.online.fingerprint());
            if !org_ok || self.decision.target.fingerprint() != self.decision.online.fingerprint() {
                audit.bad_syncs += 1;
            }
        }
        Ok(())
    }

    fn audit_targets(&mut self, synced: bool) {
        if self.audit.is_none() {
            return;
        }
        let now = self.target_fingerprints();
        let audit = self.audit.as_mut().expect("checked");
        audit.checks += 1;
        if let Some(last) = audit.last {
            if last != now && !synced {
                audit.unsynced_changes += 1;
            }
        }
        audit.last = Some(now);
    }
}

/// Trains until `trainer` has completed `until` episodes, handing every
/// episode's output to `on_episode` as it finishes.
pub fn train_until<F>(trainer: &mut Trainer, until: usize, mut on_episode: F) -> Result<()>
where
    F: FnMut(&Trainer, &EpisodeOutput) -> Result<()>,
{
    while trainer.episode() < until {
        let out = trainer.train_episode()?;
        log::info!(
            "episode {} reward {:.3} teams {:.2} eps {:.3}",
            out.metrics.episode,
            out.metrics.total_reward,
            out.metrics.avg_team_number,
            out.metrics.epsilon
        );
        on_episode(trainer, &out)?;
    }
    Ok(())
}

/// Full run of `algo.episodes` episodes from a fresh initialization.
pub fn run_training<F>(config: &ExperimentConfig, on_episode: F) -> Result<Trainer>
where
    F: FnMut(&Trainer, &EpisodeOutput) -> Result<()>,
{
    let mut trainer = Trainer::new(config)?;
    train_until(&mut trainer, config.algo.episodes, on_episode)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests;
