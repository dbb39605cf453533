//! Masked discrete diffusion with Feynman-Kac correctors.
//!
//! The crate simulates the forward masking process and its time reversal
//! on sequences over a finite vocabulary, corrects the reverse process so
//! that it samples annealed, product, geometric-average or reward-tilted
//! targets, and weights particles so that sequential Monte Carlo recovers
//! those targets exactly. Small instances can be checked against exact
//! enumeration, and an Ising testbed exercises temperature annealing.

pub mod correctors;
pub mod denoiser;
pub mod error;
pub mod ising;
pub mod oracle;
pub mod process;
pub mod rng;
pub mod schedule;
pub mod smc;
pub mod state;

pub use correctors::{BetaSchedule, CorrectedStep, RewardFn, SeparableReward, TargetSpec};
pub use denoiser::{Denoiser, DenoiserOutput, TabularDataDistribution, TabularDenoiser};
pub use error::{Error, Result};
pub use oracle::JointDistribution;
pub use process::{PositionTable, RatioTable, ReverseRates, StepMode};
pub use schedule::{MaskingSchedule, ScheduleKind};
pub use smc::{ResampleScheme, ResampleTrigger, ResamplingPolicy, SmcConfig, WeightedEnsemble};
pub use state::{SequenceState, StateSpace, Token, Vocabulary};
