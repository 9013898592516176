//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, Event, Scenario};
use crate::error::{Error, Result};

/// Ablations and baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// No structural consistency reward.
    C,
    /// Team intention only: no consensus losses, local Q reads `c`.
    G,
    /// Team reward is the sum of member external rewards.
    I,
    K1,
    K2,
    K3,
    Idqn,
    QmixRandom,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::C,
        Variant::G,
        Variant::I,
        Variant::K1,
        Variant::K2,
        Variant::K3,
        Variant::Idqn,
        Variant::QmixRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::C => "C",
            Variant::G => "G",
            Variant::I => "I",
            Variant::K1 => "k1",
            Variant::K2 => "k2",
            Variant::K3 => "k3",
            Variant::Idqn => "idqn",
            Variant::QmixRandom => "qmix-rand",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant {s:?}; expected one of full, C, G, I, k1, k2, k3, idqn, qmix-rand"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    /// `None` keeps the scenario default.
    pub n_opponents: Option<usize>,
    pub n_food: Option<usize>,
    pub view_radius: usize,
    pub horizon: usize,
    pub minimap: (usize, usize),
    pub reward_overrides: BTreeMap<Event, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub m: usize,
    pub alpha_u: f64,
    pub margin: f64,
    pub lambda_tg: f64,
    pub lambda_qmix: f64,
    pub time_weight: f64,
    pub intention_dim: usize,
    pub cognition_dim: usize,
    pub intention_hidden: usize,
    pub vae_hidden: usize,
    pub q_hidden: Vec<usize>,
    pub mixer_hidden: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_frequency: usize,
    pub target_sync: usize,
    pub buffer_capacity: usize,
    pub episodes: usize,
    pub epsilon_episodes: Vec<usize>,
    pub epsilon_values: Vec<f64>,
    pub double_q: bool,
    pub dueling: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Episodes between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub dump_intentions: bool,
    pub trace_teams: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub algo: AlgoConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = EnvSpec::desk(Scenario::Pacmen);
        Self {
            env: EnvConfig {
                scenario: Scenario::Pacmen,
                width: desk.width,
                height: desk.height,
                n_agents: desk.n_agents,
                n_opponents: None,
                n_food: None,
                view_radius: desk.view_radius,
                horizon: 250,
                minimap: desk.minimap,
                reward_overrides: BTreeMap::new(),
            },
            algo: AlgoConfig {
                m: 2,
                alpha_u: -0.1,
                margin: 1.0,
                lambda_tg: 1.0,
                lambda_qmix: 1.0,
                time_weight: 1.0,
                intention_dim: 32,
                cognition_dim: 32,
                intention_hidden: 32,
                vae_hidden: 32,
                q_hidden: vec![256, 512],
                mixer_hidden: 64,
                gamma: 0.99,
                learning_rate: 1e-4,
                batch_size: 512,
                train_frequency: 4,
                target_sync: 1000,
                buffer_capacity: 50_000,
                episodes: 500,
                epsilon_episodes: vec![0, 200, 400],
                epsilon_values: vec![1.0, 0.2, 0.05],
                double_q: true,
                dueling: true,
            },
            run: RunConfig {
                variant: Variant::Full,
                seed: 0,
                checkpoint_every: 0,
                dump_intentions: false,
                trace_teams: false,
            },
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_optional(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "default" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn show_optional(v: Option<usize>) -> String {
    v.map_or_else(|| "default".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.env;
        let a = &mut self.algo;
        let r = &mut self.run;
        match key {
            "env.scenario" => e.scenario = v.parse()?,
            "env.width" => e.width = parse_num(key, v)?,
            "env.height" => e.height = parse_num(key, v)?,
            "env.n_agents" => e.n_agents = parse_num(key, v)?,
            "env.n_opponents" => e.n_opponents = parse_optional(key, v)?,
            "env.n_food" => e.n_food = parse_optional(key, v)?,
            "env.view_radius" => e.view_radius = parse_num(key, v)?,
            "env.horizon" => e.horizon = parse_num(key, v)?,
            "env.minimap_x" => e.minimap.0 = parse_num(key, v)?,
            "env.minimap_y" => e.minimap.1 = parse_num(key, v)?,
            "algo.m" => a.m = parse_num(key, v)?,
            "algo.alpha_u" => a.alpha_u = parse_num(key, v)?,
            "algo.margin" => a.margin = parse_num(key, v)?,
            "algo.lambda_tg" => a.lambda_tg = parse_num(key, v)?,
            "algo.lambda_qmix" => a.lambda_qmix = parse_num(key, v)?,
            "algo.time_weight" => a.time_weight = parse_num(key, v)?,
            "algo.intention_dim" => a.intention_dim = parse_num(key, v)?,
            "algo.cognition_dim" => a.cognition_dim = parse_num(key, v)?,
            "algo.intention_hidden" => a.intention_hidden = parse_num(key, v)?,
            "algo.vae_hidden" => a.vae_hidden = parse_num(key, v)?,
            "algo.q_hidden" => a.q_hidden = parse_list(key, v)?,
            "algo.mixer_hidden" => a.mixer_hidden = parse_num(key, v)?,
            "algo.gamma" => a.gamma = parse_num(key, v)?,
            "algo.learning_rate" => a.learning_rate = parse_num(key, v)?,
            "algo.batch_size" => a.batch_size = parse_num(key, v)?,
            "algo.train_frequency" => a.train_frequency = parse_num(key, v)?,
            "algo.target_sync" => a.target_sync = parse_num(key, v)?,
            "algo.buffer_capacity" => a.buffer_capacity = parse_num(key, v)?,
            "algo.episodes" => a.episodes = parse_num(key, v)?,
            "algo.epsilon_episodes" => a.epsilon_episodes = parse_list(key, v)?,
            "algo.epsilon_values" => a.epsilon_values = parse_list(key, v)?,
            "algo.double_q" => a.double_q = parse_bool(key, v)?,
            "algo.dueling" => a.dueling = parse_bool(key, v)?,
            "run.variant" => r.variant = v.parse()?,
            "run.seed" => r.seed = parse_num(key, v)?,
            "run.checkpoint_every" => r.checkpoint_every = parse_num(key, v)?,
            "run.dump_intentions" => r.dump_intentions = parse_bool(key, v)?,
            "run.trace_teams" => r.trace_teams = parse_bool(key, v)?,
            _ => match key.strip_prefix("env.reward.") {
                Some(ev) => {
                    let event = Event::from_key(ev)?;
                    e.reward_overrides.insert(event, parse_num(key, v)?);
                }
                None => return Err(Error::config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as those given on a command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order; parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let e = &self.env;
        let a = &self.algo;
        let r = &self.run;
        let mut lines = vec![
            ("env.scenario", e.scenario.to_string()),
            ("env.width", e.width.to_string()),
            ("env.height", e.height.to_string()),
            ("env.n_agents", e.n_agents.to_string()),
            ("env.n_opponents", show_optional(e.n_opponents)),
            ("env.n_food", show_optional(e.n_food)),
            ("env.view_radius", e.view_radius.to_string()),
            ("env.horizon", e.horizon.to_string()),
            ("env.minimap_x", e.minimap.0.to_string()),
            ("env.minimap_y", e.minimap.1.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<Vec<_>>();
        for (ev, v) in &e.reward_overrides {
            lines.push((format!("env.reward.{}", ev.key()), v.to_string()));
        }
        let rest = [
            ("algo.m", a.m.to_string()),
            ("algo.alpha_u", a.alpha_u.to_string()),
            ("algo.margin", a.margin.to_string()),
            ("algo.lambda_tg", a.lambda_tg.to_string()),
            ("algo.lambda_qmix", a.lambda_qmix.to_string()),
            ("algo.time_weight", a.time_weight.to_string()),
            ("algo.intention_dim", a.intention_dim.to_string()),
            ("algo.cognition_dim", a.cognition_dim.to_string()),
            ("algo.intention_hidden", a.intention_hidden.to_string()),
            ("algo.vae_hidden", a.vae_hidden.to_string()),
            ("algo.q_hidden", join(&a.q_hidden)),
            ("algo.mixer_hidden", a.mixer_hidden.to_string()),
            ("algo.gamma", a.gamma.to_string()),
            ("algo.learning_rate", a.learning_rate.to_string()),
            ("algo.batch_size", a.batch_size.to_string()),
            ("algo.train_frequency", a.train_frequency.to_string()),
            ("algo.target_sync", a.target_sync.to_string()),
            ("algo.buffer_capacity", a.buffer_capacity.to_string()),
            ("algo.episodes", a.episodes.to_string()),
            ("algo.epsilon_episodes", join(&a.epsilon_episodes)),
            ("algo.epsilon_values", join(&a.epsilon_values)),
            ("algo.double_q", a.double_q.to_string()),
            ("algo.dueling", a.dueling.to_string()),
            ("run.variant", r.variant.to_string()),
            ("run.seed", r.seed.to_string()),
            ("run.checkpoint_every", r.checkpoint_every.to_string()),
            ("run.dump_intentions", r.dump_intentions.to_string()),
            ("run.trace_teams", r.trace_teams.to_string()),
        ];
        lines.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Environment description implied by the scenario block.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let e = &self.env;
        let mut spec = EnvSpec::desk(e.scenario);
        spec.width = e.width;
        spec.height = e.height;
        spec.n_agents = e.n_agents;
        if let Some(n) = e.n_opponents {
            spec.n_opponents = n;
        }
        if let Some(n) = e.n_food {
            spec.n_food = n;
        }
        spec.view_radius = e.view_radius;
        spec.horizon = e.horizon;
        spec.minimap = e.minimap;
        for (&ev, &v) in &e.reward_overrides {
            spec.rewards
                .set(ev, v)
                .map_err(|_| Error::config(format!("env.reward.{}: not an event of {}", ev.key(), e.scenario)))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.algo;
        let bad = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        if !(0.0..=1.0).contains(&a.gamma) {
            return bad("algo.gamma", format!("{} outside [0, 1]", a.gamma));
        }
        if !(a.learning_rate > 0.0 && a.learning_rate <= 1.0) {
            return bad("algo.learning_rate", format!("{} outside (0, 1]", a.learning_rate));
        }
        if !(1..=8).contains(&a.m) {
            return bad("algo.m", format!("{} outside 1..=8", a.m));
        }
        for (key, v) in [("algo.margin", a.margin), ("algo.lambda_tg", a.lambda_tg), ("algo.lambda_qmix", a.lambda_qmix), ("algo.time_weight", a.time_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} must be finite and nonnegative"));
            }
        }
        if !a.alpha_u.is_finite() {
            return bad("algo.alpha_u", "must be finite".into());
        }
        for (key, v) in [
            ("algo.intention_dim", a.intention_dim),
            ("algo.cognition_dim", a.cognition_dim),
            ("algo.intention_hidden", a.intention_hidden),
            ("algo.vae_hidden", a.vae_hidden),
            ("algo.mixer_hidden", a.mixer_hidden),
            ("algo.batch_size", a.batch_size),
            ("algo.train_frequency", a.train_frequency),
            ("algo.target_sync", a.target_sync),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if a.q_hidden.is_empty() || a.q_hidden.contains(&0) {
            return bad("algo.q_hidden", "needs at least one nonzero layer".into());
        }
        if a.train_frequency > a.batch_size {
            return bad("algo.train_frequency", "cannot exceed the batch size".into());
        }
        if a.buffer_capacity < a.batch_size {
            return bad("algo.buffer_capacity", format!("{} is smaller than the batch", a.buffer_capacity));
        }
        if a.epsilon_episodes.is_empty() || a.epsilon_episodes.len() != a.epsilon_values.len() {
            return bad("algo.epsilon_values", "needs one value per breakpoint".into());
        }
        if a.epsilon_episodes[0] != 0 || a.epsilon_episodes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("algo.epsilon_episodes", "must start at 0 and strictly increase".into());
        }
        if a.epsilon_values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("algo.epsilon_values", "values must lie in [0, 1]".into());
        }
        self.env_spec()?;
        Ok(())
    }
}
