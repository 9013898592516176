use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{reward_for_event, EnvSpec, Event, Scenario};
use crate::error::{Error, Result};

pub type Pos = (i32, i32);

const DIRS: [Pos; 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub pos: Pos,
    pub hp: i32,
    pub alive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Agent,
    Opponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub side: Side,
    pub index: usize,
    pub event: Event,
    pub reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Stay,
    Move(usize),
    Attack(usize),
}

impl Action {
    pub fn decode(scenario: Scenario, id: usize) -> Option<Action> {
        match id {
            0..=3 => Some(Action::Move(id)),
            4..=7 => Some(Action::Attack(id - 4)),
            8 if scenario == Scenario::Block => Some(Action::Stay),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Cell {
    Empty,
    Agent(usize),
    Opponent(usize),
    Food(usize),
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub agents: Vec<Entity>,
    pub opponents: Vec<Entity>,
    pub food: Vec<Entity>,
    grid: Vec<Cell>,
    width: usize,
    height: usize,
}

impl EnvState {
    fn idx(&self, p: Pos) -> usize {
        p.1 as usize * self.width + p.0 as usize
    }

    fn in_bounds(&self, p: Pos) -> bool {
        p.0 >= 0 && p.1 >= 0 && (p.0 as usize) < self.width && (p.1 as usize) < self.height
    }

    fn cell(&self, p: Pos) -> Cell {
        self.grid[self.idx(p)]
    }

    fn set(&mut self, p: Pos, c: Cell) {
        let i = self.idx(p);
        self.grid[i] = c;
    }

    pub fn alive_agents(&self) -> Vec<bool> {
        self.agents.iter().map(|a| a.alive).collect()
    }

    pub fn remaining_food(&self) -> usize {
        self.food.iter().filter(|f| f.alive).count()
    }

    pub fn living_opponents(&self) -> usize {
        self.opponents.iter().filter(|o| o.alive).count()
    }

    pub fn living_agents(&self) -> usize {
        self.agents.iter().filter(|a| a.alive).count()
    }

    /// Builds a state from explicit positions (scripted scenarios and tests).
    pub fn from_layout(
        spec: &EnvSpec,
        agents: &[Pos],
        opponents: &[Pos],
        food: &[Pos],
    ) -> Result<Self> {
        let mut st = EnvState {
            t: 0,
            agents: Vec::new(),
            opponents: Vec::new(),
            food: Vec::new(),
            grid: vec![Cell::Empty; spec.width * spec.height],
            width: spec.width,
            height: spec.height,
        };
        let place = |st: &mut EnvState, p: Pos, c: Cell| -> Result<()> {
            if !st.in_bounds(p) {
                return Err(Error::config(format!("position {p:?} is off the map")));
            }
            if st.cell(p) != Cell::Empty {
                return Err(Error::config(format!("position {p:?} is occupied twice")));
            }
            st.set(p, c);
            Ok(())
        };
        for (i, &p) in agents.iter().enumerate() {
            place(&mut st, p, Cell::Agent(i))?;
            st.agents.push(Entity {
                pos: p,
                hp: spec.agent_hp,
                alive: true,
            });
        }
        for (i, &p) in opponents.iter().enumerate() {
            place(&mut st, p, Cell::Opponent(i))?;
            st.opponents.push(Entity {
                pos: p,
                hp: spec.opponent_hp,
                alive: true,
            });
        }
        for (i, &p) in food.iter().enumerate() {
            place(&mut st, p, Cell::Food(i))?;
            st.food.push(Entity {
                pos: p,
                hp: spec.food_hp,
                alive: true,
            });
        }
        Ok(st)
    }
}

/// What one call to [`GridEnv::step`] produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub opponent_rewards: Vec<f64>,
    pub events: Vec<EventRecord>,
    pub observations: Vec<Vec<f64>>,
    pub global_state: Vec<f64>,
    pub done: bool,
}

/// Deterministic multi-agent gridworld. Randomness is used only for the
/// initial layout.
#[derive(Clone, Debug)]
pub struct GridEnv {
    spec: EnvSpec,
    state: EnvState,
}

fn cells_in(x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<Pos> {
    let mut v = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            v.push((x as i32, y as i32));
        }
    }
    v
}

fn dist2(a: Pos, b: Pos) -> i64 {
    let dx = (a.0 - b.0) as i64;
    let dy = (a.1 - b.1) as i64;
    dx * dx + dy * dy
}

impl GridEnv {
    /// Fresh episode; the layout depends only on `(spec, seed)`.
    pub fn reset(spec: EnvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (spec.width, spec.height);
        let mut taken = vec![false; w * h];
        let mut pick = |pool: Vec<Pos>, count: usize, what: &str, rng: &mut ChaCha8Rng| -> Result<Vec<Pos>> {
            let mut free: Vec<Pos> = pool
                .into_iter()
                .filter(|p| !taken[p.1 as usize * w + p.0 as usize])
                .collect();
            if free.len() < count {
                return Err(Error::config(format!(
                    "cannot place {count} {what}: only {} free cells in the spawn region",
                    free.len()
                )));
            }
            free.shuffle(rng);
            free.truncate(count);
            for p in &free {
                taken[p.1 as usize * w + p.0 as usize] = true;
            }
            Ok(free)
        };
        let all = cells_in(0, w, 0, h);
        let (agents, opponents, food) = match spec.scenario {
            Scenario::Pacmen => {
                let side = ((spec.n_agents as f64).sqrt().ceil() as usize + 2).min(w.min(h));
                let (x0, y0) = ((w - side) / 2, (h - side) / 2);
                let agents = pick(cells_in(x0, x0 + side, y0, y0 + side), spec.n_agents, "agents", &mut rng)?;
                let (rw, rh) = ((w / 4).max(1), (h / 4).max(1));
                let rooms = [
                    cells_in(0, rw, 0, rh),
                    cells_in(w - rw, w, 0, rh),
                    cells_in(0, rw, h - rh, h),
                    cells_in(w - rw, w, h - rh, h),
                ];
                let mut food = Vec::new();
                for r in 0..4 {
                    let count = spec.n_food / 4 + usize::from(r < spec.n_food % 4);
                    food.extend(pick(rooms[r].clone(), count, "dots", &mut rng)?);
                }
                (agents, Vec::new(), food)
            }
            Scenario::Pursuit => {
                let agents = pick(all.clone(), spec.n_agents, "predators", &mut rng)?;
                let prey = pick(all, spec.n_opponents, "prey", &mut rng)?;
                (agents, prey, Vec::new())
            }
            Scenario::Block => {
                let side = (w / 4).max(1);
                let food = pick(cells_in(0, side, 0, h), spec.n_food, "food", &mut rng)?;
                let agents = pick(cells_in(side, w, 0, h), spec.n_agents, "blockers", &mut rng)?;
                let blockees = pick(cells_in(w / 2, w, 0, h), spec.n_opponents, "blockees", &mut rng)?;
                (agents, blockees, food)
            }
            Scenario::Battle => {
                let agents = pick(cells_in(0, w / 2, 0, h), spec.n_agents, "agents", &mut rng)?;
                let enemies = pick(cells_in(w / 2, w, 0, h), spec.n_opponents, "enemies", &mut rng)?;
                (agents, enemies, Vec::new())
            }
        };
        let state = EnvState::from_layout(&spec, &agents, &opponents, &food)?;
        Ok(Self { spec, state })
    }

    pub fn from_state(spec: EnvSpec, state: EnvState) -> Result<Self> {
        spec.validate()?;
        if state.width != spec.width || state.height != spec.height {
            return Err(Error::config("state does not match the map size"));
        }
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.spec.horizon || self.terminal()
    }

    fn terminal(&self) -> bool {
        let st = &self.state;
        match self.spec.scenario {
            Scenario::Pacmen | Scenario::Block => !st.food.is_empty() && st.remaining_food() == 0,
            Scenario::Pursuit => !st.opponents.is_empty() && st.living_opponents() == 0,
            Scenario::Battle => {
                st.living_agents() == 0 || (!st.opponents.is_empty() && st.living_opponents() == 0)
            }
        }
    }

    fn emit(&self, out: &mut StepOutcome, side: Side, index: usize, event: Event) {
        if let Ok(reward) = reward_for_event(&self.spec, event) {
            match side {
                Side::Agent => out.rewards[index] += reward,
                Side::Opponent => out.opponent_rewards[index] += reward,
            }
            out.events.push(EventRecord {
                side,
                index,
                event,
                reward,
            });
        }
    }

    /// Advances one step. `actions` has one entry per agent; entries of dead
    /// agents are ignored.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::usage("step called on a finished episode"));
        }
        if actions.len() != self.spec.n_agents {
            return Err(Error::usage(format!(
                "expected {} actions, got {}",
                self.spec.n_agents,
                actions.len()
            )));
        }
        let mut decoded = Vec::with_capacity(actions.len());
        for (i, &a) in actions.iter().enumerate() {
            match Action::decode(self.spec.scenario, a) {
                Some(act) => decoded.push(act),
                None if !self.state.agents[i].alive => decoded.push(Action::Stay),
                None => {
                    return Err(Error::usage(format!(
                        "agent {i}: action {a} outside 0..{}",
                        self.spec.action_count()
                    )))
                }
            }
        }
        let mut out = StepOutcome {
            rewards: vec![0.0; self.spec.n_agents],
            opponent_rewards: vec![0.0; self.state.opponents.len()],
            events: Vec::new(),
            observations: Vec::new(),
            global_state: Vec::new(),
            done: false,
        };
        for (i, act) in decoded.into_iter().enumerate() {
            if self.state.agents[i].alive {
                self.agent_act(i, act, &mut out);
            }
        }
        for j in 0..self.state.opponents.len() {
            if self.state.opponents[j].alive {
                self.opponent_act(j, &mut out);
            }
        }
        self.state.t += 1;
        out.done = self.is_done();
        out.observations = self.observe_all();
        out.global_state = self.global_state();
        Ok(out)
    }

    fn agent_act(&mut self, i: usize, act: Action, out: &mut StepOutcome) {
        let pos = self.state.agents[i].pos;
        match act {
            Action::Stay => self.emit(out, Side::Agent, i, Event::Move),
            Action::Move(d) => {
                let target = (pos.0 + DIRS[d].0, pos.1 + DIRS[d].1);
                self.emit(out, Side::Agent, i, Event::Move);
                if !self.state.in_bounds(target) {
                    return;
                }
                match self.state.cell(target) {
                    Cell::Empty => self.relocate_agent(i, target),
                    Cell::Food(f) if self.spec.scenario == Scenario::Block => {
                        self.consume_food(f);
                        self.relocate_agent(i, target);
                        self.emit(out, Side::Agent, i, Event::EatFood);
                    }
                    _ => {}
                }
            }
            Action::Attack(d) => {
                let target = (pos.0 + DIRS[d].0, pos.1 + DIRS[d].1);
                let cell = if self.state.in_bounds(target) {
                    self.state.cell(target)
                } else {
                    Cell::Empty
                };
                match cell {
                    Cell::Food(f) if self.spec.scenario == Scenario::Pacmen => {
                        self.emit(out, Side::Agent, i, Event::AttackFood);
                        self.state.food[f].hp -= self.spec.agent_damage;
                        if self.state.food[f].hp <= 0 {
                            self.consume_food(f);
                            self.emit(out, Side::Agent, i, Event::EatFood);
                        }
                    }
                    Cell::Opponent(j) => {
                        self.emit(out, Side::Agent, i, Event::AttackOpponent);
                        self.state.opponents[j].hp -= self.spec.agent_damage;
                        if self.state.opponents[j].hp <= 0 {
                            self.state.opponents[j].alive = false;
                            self.state.set(target, Cell::Empty);
                            self.emit(out, Side::Agent, i, Event::KillOpponent);
                            self.emit(out, Side::Opponent, j, Event::Killed);
                        }
                    }
                    _ => self.emit(out, Side::Agent, i, Event::AttackBlank),
                }
            }
        }
    }

    fn relocate_agent(&mut self, i: usize, target: Pos) {
        let from = self.state.agents[i].pos;
        self.state.set(from, Cell::Empty);
        self.state.set(target, Cell::Agent(i));
        self.state.agents[i].pos = target;
    }

    fn relocate_opponent(&mut self, j: usize, target: Pos) {
        let from = self.state.opponents[j].pos;
        self.state.set(from, Cell::Empty);
        self.state.set(target, Cell::Opponent(j));
        self.state.opponents[j].pos = target;
    }

    fn consume_food(&mut self, f: usize) {
        let p = self.state.food[f].pos;
        self.state.food[f].alive = false;
        self.state.food[f].hp = 0;
        self.state.set(p, Cell::Empty);
    }

    fn nearest(from: Pos, targets: impl Iterator<Item = Pos>) -> Option<Pos> {
        targets.min_by_key(|&t| dist2(from, t))
    }

    fn opponent_act(&mut self, j: usize, out: &mut StepOutcome) {
        match self.spec.scenario {
            Scenario::Pacmen => {}
            Scenario::Pursuit => {
                for _ in 0..self.spec.opponent_speed {
                    let pos = self.state.opponents[j].pos;
                    let threats: Vec<Pos> = self.living_agent_positions();
                    let score = |p: Pos| threats.iter().map(|&t| dist2(p, t)).min().unwrap_or(0);
                    let mut best = (score(pos), pos);
                    for d in DIRS {
                        let t = (pos.0 + d.0, pos.1 + d.1);
                        if self.state.in_bounds(t) && self.state.cell(t) == Cell::Empty {
                            let s = score(t);
                            if s > best.0 {
                                best = (s, t);
                            }
                        }
                    }
                    if best.1 != pos {
                        self.relocate_opponent(j, best.1);
                    }
                }
            }
            Scenario::Block => {
                for _ in 0..self.spec.opponent_speed {
                    let pos = self.state.opponents[j].pos;
                    let Some(goal) = Self::nearest(
                        pos,
                        self.state.food.iter().filter(|f| f.alive).map(|f| f.pos),
                    ) else {
                        break;
                    };
                    let mut best = (dist2(pos, goal), pos);
                    for d in DIRS {
                        let t = (pos.0 + d.0, pos.1 + d.1);
                        if !self.state.in_bounds(t) {
                            continue;
                        }
                        let free = matches!(self.state.cell(t), Cell::Empty | Cell::Food(_));
                        if free && dist2(t, goal) < best.0 {
                            best = (dist2(t, goal), t);
                        }
                    }
                    if best.1 == pos {
                        break;
                    }
                    if let Cell::Food(f) = self.state.cell(best.1) {
                        self.consume_food(f);
                        self.emit(out, Side::Opponent, j, Event::EatFood);
                    }
                    self.relocate_opponent(j, best.1);
                }
            }
            Scenario::Battle => {
                let pos = self.state.opponents[j].pos;
                let adjacent = (0..self.state.agents.len())
                    .filter(|&i| {
                        let a = &self.state.agents[i];
                        a.alive && (a.pos.0 - pos.0).abs() <= 1 && (a.pos.1 - pos.1).abs() <= 1
                    })
                    .min_by_key(|&i| (dist2(pos, self.state.agents[i].pos), i));
                if let Some(i) = adjacent {
                    self.emit(out, Side::Opponent, j, Event::AttackOpponent);
                    self.state.agents[i].hp -= self.spec.opponent_damage;
                    if self.state.agents[i].hp <= 0 {
                        let p = self.state.agents[i].pos;
                        self.state.agents[i].alive = false;
                        self.state.set(p, Cell::Empty);
                        self.emit(out, Side::Opponent, j, Event::KillOpponent);
                        self.emit(out, Side::Agent, i, Event::Killed);
                    }
                    return;
                }
                let Some(goal) = Self::nearest(pos, self.living_agent_positions().into_iter()) else {
                    return;
                };
                // one of the 12 cells within Manhattan distance 2
                let mut best = (dist2(pos, goal), pos);
                for dy in -2i32..=2 {
                    for dx in -2i32..=2 {
                        let md = dx.abs() + dy.abs();
                        if md == 0 || md > 2 {
                            continue;
                        }
                        let t = (pos.0 + dx, pos.1 + dy);
                        if self.state.in_bounds(t)
                            && self.state.cell(t) == Cell::Empty
                            && dist2(t, goal) < best.0
                        {
                            best = (dist2(t, goal), t);
                        }
                    }
                }
                if best.1 != pos {
                    self.relocate_opponent(j, best.1);
                }
            }
        }
    }

    fn living_agent_positions(&self) -> Vec<Pos> {
        self.state
            .agents
            .iter()
            .filter(|a| a.alive)
            .map(|a| a.pos)
            .collect()
    }

    /// Local view of agent `i`: wall, ally, opponent and food channels over
    /// the square window, then normalized position and HP fraction.
    pub fn observe(&self, i: usize) -> Result<Vec<f64>> {
        let agent = self
            .state
            .agents
            .get(i)
            .ok_or_else(|| Error::usage(format!("no agent {i}")))?;
        if !agent.alive {
            return Err(Error::usage(format!("agent {i} is dead")));
        }
        let r = self.spec.view_radius as i32;
        let win = self.spec.window();
        let plane = win * win;
        let mut obs = vec![0.0; self.spec.observation_width()];
        for dy in -r..=r {
            for dx in -r..=r {
                let k = ((dy + r) as usize) * win + (dx + r) as usize;
                let p = (agent.pos.0 + dx, agent.pos.1 + dy);
                if !self.state.in_bounds(p) {
                    obs[k] = 1.0;
                    continue;
                }
                match self.state.cell(p) {
                    Cell::Agent(o) if o != i => obs[plane + k] = 1.0,
                    Cell::Opponent(_) => obs[2 * plane + k] = 1.0,
                    Cell::Food(_) => obs[3 * plane + k] = 1.0,
                    _ => {}
                }
            }
        }
        let base = 4 * plane;
        obs[base] = agent.pos.0 as f64 / (self.spec.width - 1) as f64;
        obs[base + 1] = agent.pos.1 as f64 / (self.spec.height - 1) as f64;
        obs[base + 2] = agent.hp as f64 / self.spec.agent_hp as f64;
        Ok(obs)
    }

    /// Observations of all agents; dead agents get an all-zero vector.
    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.spec.n_agents)
            .map(|i| {
                self.observe(i)
                    .unwrap_or_else(|_| vec![0.0; self.spec.observation_width()])
            })
            .collect()
    }

    /// Block-averaged occupancy per entity type plus normalized time.
    pub fn global_state(&self) -> Vec<f64> {
        let (bx, by) = self.spec.minimap;
        let bw = self.spec.width.div_ceil(bx);
        let bh = self.spec.height.div_ceil(by);
        let area = (bw * bh) as f64;
        let cells = bx * by;
        let mut s = vec![0.0; self.spec.state_width()];
        let mut add = |channel: usize, p: Pos| {
            let cx = (p.0 as usize / bw).min(bx - 1);
            let cy = (p.1 as usize / bh).min(by - 1);
            s[channel * cells + cy * bx + cx] += 1.0 / area;
        };
        for a in self.state.agents.iter().filter(|a| a.alive) {
            add(0, a.pos);
        }
        for o in self.state.opponents.iter().filter(|o| o.alive) {
            add(1, o.pos);
        }
        for f in self.state.food.iter().filter(|f| f.alive) {
            add(2, f.pos);
        }
        s[3 * cells] = self.state.t as f64 / self.spec.horizon as f64;
        s
    }

    /// Agent positions scaled to `[0, 1]`.
    pub fn normalized_positions(&self) -> Vec<(f64, f64)> {
        self.state
            .agents
            .iter()
            .map(|a| {
                (
                    a.pos.0 as f64 / (self.spec.width - 1) as f64,
                    a.pos.1 as f64 / (self.spec.height - 1) as f64,
                )
            })
            .collect()
    }
}
