//! Octopus: one-command hardware onboarding.
//!
//! The crate turns a (real or simulated) hardware bus into a live MCP tool
//! endpoint through a five-stage pipeline — probe, identify, interface,
//! serve, deploy — and keeps it alive with a watch/heal/perceive daemon.
//! Every stage is parameterized by a markdown spec document rendered into a
//! prompt for a pluggable coding-agent port, so the whole lifecycle runs
//! deterministically offline against the scripted stub agent.
//!
//! Module map:
//!
//! - [`specs`] — stage spec documents and prompt rendering
//! - [`platform`] — host detection, enumerator execution/replay, parsers,
//!   inventory merge
//! - [`identify`] — capability lookup (local db first, agent fallback),
//!   confidence scoring, tool cap
//! - [`toolgen`] — tool schemas, handler plans, manifest assembly
//! - [`mcpserve`] — the generic JSON-RPC/SSE server runtime executing plans
//! - [`deploy`] — dependency checks, launch, health verification
//! - [`daemon`] — the living backend: watch, heal, perceive
//! - [`agentport`] — the coding-agent boundary (stub + remote client)
//! - [`simbus`] — simulated servo/camera/GPIO bus with fault injection
//! - [`pipeline`] — the `up` orchestration tying the stages together

pub mod agentport;
pub mod daemon;
pub mod deploy;
pub mod events;
pub mod fixtures;
pub mod hashing;
pub mod identify;
pub mod mcpserve;
pub mod pipeline;
pub mod platform;
pub mod simbus;
pub mod specs;
pub mod toolgen;

#[cfg(test)]
pub(crate) mod testutil;
