//! The competitive multi-agent NCA world.
//!
//! A world holds an `H x W x C` grid of cell states (replicated `B` times),
//! a per-agent aliveness mask, and one small neural network per agent. Each
//! step every agent proposes a state delta wherever it has a live cell in the
//! 3x3 neighborhood, the background environment proposes normalized uniform
//! noise, and the proposals compete through attack/defense cosine scores.
//! The softmax of those scores blends the proposals and decides who stays
//! alive at each cell.

mod frame;
mod net;
mod world;

use petri_grad::GradError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frame::{Frame, Trajectory};
pub use net::AgentNet;
pub use world::{
    aliveness_loss_from_mass, contribution_weights, SegmentGradients, StepDiagnostics, StepNoise,
    World,
};

/// Share a contribution weight must exceed for an agent to stay alive.
pub const ALIVE_THRESHOLD: f32 = 0.4;
/// Guard inside the log-aliveness loss.
pub const LOSS_EPS: f32 = 1e-8;
/// Added to each vector norm in the competition cosines.
pub const COSINE_EPS: f32 = 1e-8;
/// Cell states are clipped to `[-STATE_BOUND, STATE_BOUND]`.
pub const STATE_BOUND: f32 = 1.0;

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("{agents} seed patches of side {side} cannot be placed disjointly on a {height}x{width} grid")]
    PatchesDoNotFit {
        agents: usize,
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("world is unhealthy: {0}")]
    Unhealthy(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, SubstrateError>;

/// Partition of the per-cell channels into attack, defense and hidden blocks,
/// laid out in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelLayout {
    pub attack: usize,
    pub defense: usize,
    pub hidden: usize,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self {
            attack: 4,
            defense: 4,
            hidden: 8,
        }
    }
}

impl ChannelLayout {
    pub fn new(attack: usize, defense: usize, hidden: usize) -> Self {
        Self {
            attack,
            defense,
            hidden,
        }
    }

    pub fn total(&self) -> usize {
        self.attack + self.defense + self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack == 0 || self.defense == 0 || self.hidden == 0 {
            return Err(SubstrateError::Config(format!(
                "every channel block needs at least one channel: {self:?}"
            )));
        }
        // Attack of one entity is compared against defense of another.
        if self.attack != self.defense {
            return Err(SubstrateError::Config(format!(
                "attack ({}) and defense ({}) blocks must have equal width",
                self.attack, self.defense
            )));
        }
        Ok(())
    }
}

/// Per-world learning hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub steps_per_update: u32,
    pub softmax_temp: f64,
    pub per_hid_upd: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            steps_per_update: 4,
            softmax_temp: 1.0,
            per_hid_upd: 1.0,
        }
    }
}

/// Static shape of a world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub agents: usize,
    pub layout: ChannelLayout,
    pub hidden_width: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            agents: 3,
            layout: ChannelLayout::default(),
            hidden_width: 64,
        }
    }
}

impl WorldConfig {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.layout.total()
    }

    /// Entities competing at a cell: the environment plus every agent.
    pub fn entities(&self) -> usize {
        self.agents + 1
    }

    /// Side of the square seed patch each agent starts from.
    pub fn patch_side(&self) -> usize {
        (self.height.min(self.width) / 8).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.agents == 0 {
            return Err(SubstrateError::Config(
                "at least one agent is required".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(SubstrateError::Config("grid must be non-empty".into()));
        }
        if self.hidden_width == 0 {
            return Err(SubstrateError::Config(
                "hidden width must be positive".into(),
            ));
        }
        Ok(())
    }
}
