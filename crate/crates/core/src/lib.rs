//! Personalized accessibility scanning engine.
//!
//! A person's mobility capabilities and preferences live in a versioned
//! [`domain::UserModel`]. A scan segments an image of a built environment,
//! asks a multimodal chat model which tasks the environment supports, breaks
//! those tasks into subtasks and motion primitives, then asks for located
//! accessibility concerns per task in parallel. Near-duplicate concerns are
//! merged by embedding similarity. Human feedback on concerns flows back into
//! the user model, and the [`analysis`] module aggregates concern corpora.
//!
//! External model services sit behind the traits in [`providers`]; scripted
//! substitutes make every operation reproducible offline.

pub mod analysis;
pub mod clock;
pub mod digest;
pub mod domain;
pub mod elicitation;
pub mod merge;
pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod store;

pub use clock::{Clock, FixedClock, SystemClock};
