use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Pacmen,
    Pursuit,
    Block,
    Battle,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Pacmen,
        Scenario::Pursuit,
        Scenario::Block,
        Scenario::Battle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Pacmen => "pacmen",
            Scenario::Pursuit => "pursuit",
            Scenario::Block => "block",
            Scenario::Battle => "battle",
        }
    }

    /// Events that carry a reward in this scenario, with their default values.
    pub fn default_rewards(self) -> RewardTable {
        use Event::*;
        let entries: &[(Event, f64)] = match self {
            Scenario::Pacmen => &[(Move, -0.01), (AttackFood, 0.5), (AttackBlank, -0.1), (EatFood, 5.0)],
            Scenario::Block => &[
                (Move, 0.0),
                (AttackBlank, -0.2),
                (AttackOpponent, -0.2),
                (Killed, -1.0),
                (EatFood, 5.0),
            ],
            Scenario::Pursuit => &[
                (Move, 0.0),
                (AttackOpponent, -0.2),
                (KillOpponent, 1.0),
                (Killed, -1.0),
                (AttackBlank, -0.2),
            ],
            Scenario::Battle => &[
                (Move, -0.005),
                (AttackOpponent, 5.0),
                (Killed, -0.1),
                (AttackBlank, -0.1),
            ],
        };
        RewardTable {
            entries: entries.iter().copied().collect(),
        }
    }

    /// Number of discrete actions of a controlled agent.
    pub fn action_count(self) -> usize {
        match self {
            Scenario::Block => 9,
            _ => 8,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}")))
    }
}

/// Reward-bearing occurrences produced by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Move,
    AttackBlank,
    AttackFood,
    EatFood,
    AttackOpponent,
    KillOpponent,
    Killed,
}

impl Event {
    pub const ALL: [Event; 7] = [
        Event::Move,
        Event::AttackBlank,
        Event::AttackFood,
        Event::EatFood,
        Event::AttackOpponent,
        Event::KillOpponent,
        Event::Killed,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Event::Move => "move",
            Event::AttackBlank => "attack_blank",
            Event::AttackFood => "attack_food",
            Event::EatFood => "eat_food",
            Event::AttackOpponent => "attack_opponent",
            Event::KillOpponent => "kill_opponent",
            Event::Killed => "killed",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Event::ALL
            .into_iter()
            .find(|e| e.key() == key)
            .ok_or_else(|| Error::config(format!("unknown event {key:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    entries: BTreeMap<Event, f64>,
}

impl RewardTable {
    pub fn get(&self, event: Event) -> Option<f64> {
        self.entries.get(&event).copied()
    }

    /// Overrides an existing entry; events outside the scenario are rejected.
    pub fn set(&mut self, event: Event, value: f64) -> Result<()> {
        match self.entries.get_mut(&event) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(Error::config(format!(
                "event {} has no reward in this scenario",
                event.key()
            ))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Event, f64)> + '_ {
        self.entries.iter().map(|(e, v)| (*e, *v))
    }
}

/// Static description of one environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub scenario: Scenario,
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    pub n_opponents: usize,
    pub n_food: usize,
    pub view_radius: usize,
    pub horizon: usize,
    pub rewards: RewardTable,
    pub agent_hp: i32,
    pub opponent_hp: i32,
    pub food_hp: i32,
    pub agent_damage: i32,
    pub opponent_damage: i32,
    /// Unit moves an opponent may make per step.
    pub opponent_speed: usize,
    /// Minimap resolution (blocks along x, blocks along y).
    pub minimap: (usize, usize),
}

impl EnvSpec {
    /// Desk-scale defaults: a 20x20 map with 12 controlled agents.
    pub fn desk(scenario: Scenario) -> Self {
        let n = 12;
        let (n_opponents, n_food, opponent_hp, opponent_speed) = match scenario {
            Scenario::Pacmen => (0, 12, 1, 1),
            Scenario::Pursuit => (12, 0, 2, 2),
            Scenario::Block => (6, 12, 1, 2),
            Scenario::Battle => (12, 0, 10, 1),
        };
        let agent_hp = match scenario {
            Scenario::Block => 1000,
            _ => 10,
        };
        let (agent_damage, opponent_damage) = match scenario {
            Scenario::Battle => (2, 2),
            _ => (1, 1),
        };
        Self {
            scenario,
            width: 20,
            height: 20,
            n_agents: n,
            n_opponents,
            n_food,
            view_radius: 3,
            horizon: 250,
            rewards: scenario.default_rewards(),
            agent_hp,
            opponent_hp,
            food_hp: 1,
            agent_damage,
            opponent_damage,
            opponent_speed,
            minimap: (4, 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.width * self.height;
        if self.width < 2 || self.height < 2 {
            return Err(Error::config("map must be at least 2x2"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.n_agents == 0 {
            return Err(Error::config("at least one agent is required"));
        }
        if self.n_agents + self.n_opponents + self.n_food > cells {
            return Err(Error::config(format!(
                "{} entities do not fit on a {}x{} map",
                self.n_agents + self.n_opponents + self.n_food,
                self.width,
                self.height
            )));
        }
        if self.minimap.0 == 0 || self.minimap.1 == 0 {
            return Err(Error::config("minimap resolution must be positive"));
        }
        if self.minimap.0 > self.width || self.minimap.1 > self.height {
            return Err(Error::config("minimap finer than the map"));
        }
        if self.agent_hp <= 0 || self.opponent_hp <= 0 || self.food_hp <= 0 {
            return Err(Error::config("hit points must be positive"));
        }
        if self.agent_damage <= 0 || self.opponent_damage <= 0 {
            return Err(Error::config("damage must be positive"));
        }
        for e in [Event::Move, Event::AttackBlank] {
            if self.rewards.get(e).is_none() {
                return Err(Error::config(format!(
                    "reward table misses {} for {}",
                    e.key(),
                    self.scenario
                )));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.view_radius + 1
    }

    /// Width of a per-agent observation vector.
    pub fn observation_width(&self) -> usize {
        4 * self.window() * self.window() + 3
    }

    /// Width of the global state vector.
    pub fn state_width(&self) -> usize {
        3 * self.minimap.0 * self.minimap.1 + 1
    }

    pub fn action_count(&self) -> usize {
        self.scenario.action_count()
    }
}

/// Exact table lookup of the reward an event carries.
pub fn reward_for_event(spec: &EnvSpec, event: Event) -> Result<f64> {
    spec.rewards.get(event).ok_or_else(|| {
        Error::config(format!(
            "event {} is not defined for {}",
            event.key(),
            spec.scenario
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        let battle = EnvSpec::desk(Scenario::Battle);
        assert_eq!(reward_for_event(&battle, Event::Move).unwrap(), -0.005);
        let block = EnvSpec::desk(Scenario::Block);
        assert_eq!(reward_for_event(&block, Event::EatFood).unwrap(), 5.0);
        let pursuit = EnvSpec::desk(Scenario::Pursuit);
        assert_eq!(reward_for_event(&pursuit, Event::AttackBlank).unwrap(), -0.2);
    }

    #[test]
    fn unknown_event_is_config_error() {
        let pacmen = EnvSpec::desk(Scenario::Pacmen);
        assert!(matches!(
            reward_for_event(&pacmen, Event::KillOpponent),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overcrowded_map_is_rejected() {
        let mut s = EnvSpec::desk(Scenario::Pursuit);
        s.width = 4;
        s.height = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn override_only_existing_events() {
        let mut t = Scenario::Pacmen.default_rewards();
        t.set(Event::Move, -0.02).unwrap();
        assert_eq!(t.get(Event::Move), Some(-0.02));
        assert!(t.set(Event::Killed, 1.0).is_err());
    }
}
