//! Multi-view multi-label feature selection guided by semantic scores.
//!
//! The pipeline scores the semantic relevance of feature, view and label
//! descriptions ([`semantic`]), combines those scores with mutual
//! information and label co-occurrence ([`stats`]) into a typed graph
//! ([`graph`]), learns per-feature importance with a relation-aware graph
//! attention network ([`gat`]), ranks features ([`select`]) and evaluates
//! the selections with ML-kNN ([`eval`]). [`pipeline`] ties the stages
//! together for the command-line front end.

pub mod dataset;
pub mod eval;
pub mod gat;
pub mod graph;
pub mod pipeline;
pub mod select;
pub mod semantic;
pub mod stats;
