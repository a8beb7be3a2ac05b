//! Multi-turn retrieval-augmented agent infrastructure.
//!
//! The crate is organized around one loop: a policy emits tagged actions
//! (`<search>`, `<region>`/`<bbox>`, `<answer>`), an environment answers with
//! image observations, and finished trajectories are scored with a composite
//! reward (retrieval efficiency, answer correctness, pattern consistency)
//! that feeds a group-relative policy-gradient trainer.
//!
//! Modules:
//! - [`trajectory`] — tasks, turns, trajectories, batch metrics, persistence
//! - [`actions`] — the tagged action grammar: parsing and rendering
//! - [`perception`] — encoder-budget sizing, coordinate mapping, crop/re-encode
//! - [`retrieval`] — simulated corpus retriever and remote search client
//! - [`reward`] — DCG/NDCG retrieval reward, pattern reward, judge-based
//!   outcome reward, weighted combination
//! - [`rollout`] — the interaction loop driving a policy through the
//!   environment, plus group sampling
//! - [`grpo`] — group-relative advantages, clipped surrogate loss with token
//!   masking and KL regularization, toy policy/environment, training loop
//! - [`expert`] — multi-expert trajectory synthesis and dataset balancing
//!
//! Group rollouts and batch scoring fan out with rayon when the default
//! `parallel` feature is enabled; disabling it yields a fully sequential
//! build with identical results.

pub mod actions;
pub mod chat;
pub mod expert;
pub mod grpo;
pub mod perception;
pub mod retrieval;
pub mod reward;
pub mod rollout;
pub mod trajectory;
