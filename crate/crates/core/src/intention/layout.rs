use crate::error::{Error, Result};
use crate::org::TeamPartition;

/// Row bookkeeping for a batch of steps, each split into teams.
///
/// Rows are the living agents of every step, step-major and by agent id.
/// Teams are numbered globally across steps in the same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeamLayout {
    /// `(step, agent)` of each row.
    pub rows: Vec<(usize, usize)>,
    pub team_of_row: Vec<usize>,
    /// Rows of each team.
    pub members: Vec<Vec<usize>>,
    /// Step each team belongs to.
    pub team_step: Vec<usize>,
    /// Global index of the first team of each step.
    pub step_offset: Vec<usize>,
}

impl TeamLayout {
    pub fn new(partitions: &[&TeamPartition]) -> Result<Self> {
        let mut layout = TeamLayout {
            rows: Vec::new(),
            team_of_row: Vec::new(),
            members: Vec::new(),
            team_step: Vec::new(),
            step_offset: Vec::new(),
        };
        for (s, p) in partitions.iter().enumerate() {
            let base = layout.members.len();
            layout.step_offset.push(base);
            for _ in &p.teams {
                layout.members.push(Vec::new());
                layout.team_step.push(s);
            }
            for (agent, team) in p.team_of.iter().enumerate() {
                if let Some(k) = *team {
                    if k >= p.teams.len() {
                        return Err(Error::usage(format!("agent {agent} in unknown team {k}")));
                    }
                    let row = layout.rows.len();
                    layout.rows.push((s, agent));
                    layout.team_of_row.push(base + k);
                    layout.members[base + k].push(row);
                }
            }
        }
        if let Some(k) = layout.members.iter().position(|m| m.is_empty()) {
            return Err(Error::usage(format!("team {k} has no members")));
        }
        Ok(layout)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_teams(&self) -> usize {
        self.members.len()
    }

    pub fn team_size(&self, k: usize) -> usize {
        self.members[k].len()
    }

    /// Teams of step `s` as a global index range.
    pub fn teams_of_step(&self, s: usize) -> std::ops::Range<usize> {
        let start = self.step_offset[s];
        let end = self.step_offset.get(s + 1).copied().unwrap_or(self.members.len());
        start..end
    }

    pub fn n_steps(&self) -> usize {
        self.step_offset.len()
    }
}
