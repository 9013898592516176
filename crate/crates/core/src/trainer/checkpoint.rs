use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CallCounts, ReplayBuffer, RewardRouting, StepRecord, Trainer};
use crate::autodiff::{Adam, AdamState, ParamStore, TensorRecord};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::org::OrgTransition;

/// First line of every checkpoint file; the version follows the name.
pub const CHECKPOINT_MAGIC: &[u8] = b"ROCHICO-CKPT 1\n";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetState {
    online: Vec<TensorRecord>,
    target: Option<Vec<TensorRecord>>,
    adam: AdamState,
}

impl NetState {
    fn capture(online: &ParamStore, target: Option<&ParamStore>, adam: &Adam) -> Self {
        Self {
            online: online.to_records(),
            target: target.map(ParamStore::to_records),
            adam: adam.state(),
        }
    }

    fn apply(&self, online: &mut ParamStore, target: Option<&mut ParamStore>, adam: &mut Adam) -> Result<()> {
        online.load_records(&self.online)?;
        match (target, &self.target) {
            (Some(t), Some(r)) => t.load_records(r)?,
            (None, None) => {}
            _ => return Err(Error::Format("checkpoint target layout mismatch".into())),
        }
        *adam = Adam::restore(online, &self.adam)?;
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
/// Checkpoints are taken between episodes, so no environment state is kept.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub config_text: String,
    pub episode: usize,
    pub env_steps: u64,
    pub samples: u64,
    next_tick: u64,
    next_sync: u64,
    rng: ChaCha8Rng,
    pub counts: CallCounts,
    pub routing: RewardRouting,
    org: Option<NetState>,
    team: Option<NetState>,
    individual: Option<NetState>,
    decision: NetState,
    org_buffer: ReplayBuffer<OrgTransition>,
    step_buffer: ReplayBuffer<StepRecord>,
}

impl Trainer {
    pub fn state(&self) -> TrainState {
        TrainState {
            config_text: self.config.to_text(),
            episode: self.episode,
            env_steps: self.env_steps,
            samples: self.samples,
            next_tick: self.next_tick,
            next_sync: self.next_sync,
            rng: self.rng.clone(),
            counts: self.counts,
            routing: self.routing,
            org: self
                .org
                .as_ref()
                .map(|o| NetState::capture(&o.online, Some(&o.target), &o.adam)),
            team: self
                .intentions
                .as_ref()
                .map(|m| NetState::capture(&m.team_store, None, &m.team_adam)),
            individual: self
                .intentions
                .as_ref()
                .map(|m| NetState::capture(&m.individual_store, None, &m.individual_adam)),
            decision: NetState::capture(&self.decision.online, Some(&self.decision.target), &self.decision.adam),
            org_buffer: self.org_buffer.clone(),
            step_buffer: self.step_buffer.clone(),
        }
    }

    /// Rebuilds a trainer from a saved state; the embedded config is used.
    pub fn from_state(state: TrainState) -> Result<Self> {
        let config = ExperimentConfig::parse(&state.config_text)?;
        let mut t = Trainer::new(&config)?;
        match (t.org.as_mut(), &state.org) {
            (Some(o), Some(s)) => s.apply(&mut o.online, Some(&mut o.target), &mut o.adam)?,
            (None, None) => {}
            _ => return Err(Error::Format("checkpoint organization layout mismatch".into())),
        }
        match (t.intentions.as_mut(), &state.team, &state.individual) {
            (Some(m), Some(ts), Some(is)) => {
                ts.apply(&mut m.team_store, None, &mut m.team_adam)?;
                is.apply(&mut m.individual_store, None, &mut m.individual_adam)?;
            }
            (None, None, None) => {}
            _ => return Err(Error::Format("checkpoint intention layout mismatch".into())),
        }
        let d = &mut t.decision;
        state.decision.apply(&mut d.online, Some(&mut d.target), &mut d.adam)?;
        t.episode = state.episode;
        t.env_steps = state.env_steps;
        t.samples = state.samples;
        t.next_tick = state.next_tick;
        t.next_sync = state.next_sync;
        t.rng = state.rng;
        t.counts = state.counts;
        t.routing = state.routing;
        t.org_buffer = state.org_buffer;
        t.step_buffer = state.step_buffer;
        Ok(t)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        bincode::serialize_into(&mut out, &self.state()).map_err(|e| Error::Format(e.to_string()))?;
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::Format("not a checkpoint of a supported version".into()))?;
        let state: TrainState = bincode::deserialize(body).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_state(state)
    }

    /// Writes to a sibling temporary file first so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
