//! Policy-gradient reinforcement learning with dropout that stays
//! consistent between rollout and update.
//!
//! The crate is layered bottom-up: a reverse-mode [`autodiff`] tape, the
//! mask-recording [`dropout`] layer, MLP and GPT policies in [`nets`], toy
//! [`envs`], trajectory collection in [`rollout`], the A2C/PPO updates in
//! [`algos`] and the experiment driver in [`harness`].

pub mod algos;
pub mod autodiff;
pub mod dropout;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nets;
pub mod rollout;
pub mod seeding;

pub use algos::{Algorithm, Learner, MaskPolicy, Optimizer, UpdateConfig, UpdateReport};
pub use autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
pub use dropout::{ConsistentDropout, DropoutMask, MaskBundle, MaskRouter};
pub use envs::{Env, EnvKind, EnvSpec, EnvStep};
pub use error::{Error, Result};
pub use harness::{run_experiment, MetricsRecord, RunConfig};
pub use nets::{
    Action, ActionDistribution, ActionSpace, Actor, ActorSpec, Arch, Critic, CriticSpec, GptConfig, MaskSource,
};
pub use rollout::{Collector, TrajectoryBuffer, Transition};
pub use seeding::{stream, Stream, StreamRng};
