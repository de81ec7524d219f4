//! Reward-guided image captioning at desk scale.
//!
//! A toy contrastive dual encoder scores image/caption agreement (CLIP-S),
//! its text tower is finetuned with synthetic negatives to add a grammar
//! score, and a small transformer captioner is trained with maximum
//! likelihood and then self-critical REINFORCE against those rewards.

pub mod captioner;
pub mod checkpoint;
pub mod data_io;
pub mod dual_encoder;
pub mod error;
pub mod metrics;
pub mod rl_trainer;
pub mod seed;
pub mod tensor;
pub mod textproc;

pub use error::{Error, Result};
