//! Human-in-the-loop moderation for shared 3D-printing designs.
//!
//! An online classifier scores each design ("thing") from its text, images and
//! mesh geometry. Moderators review the predictions, annotate what the model
//! missed or got wrong, and those annotations fine-tune the model and move
//! per-audience flagging thresholds. Every state change is recorded in a
//! hash-chained audit log that can be replayed from genesis.
//!
//! | module | what it holds |
//! |---|---|
//! | [`corpus`] | documents, media, seed-set sampling |
//! | [`mesh`] | STL parsing, part counting, silhouettes |
//! | [`features`] | text/image feature extraction and fusion |
//! | [`classifier`] | per-category logistic model, attribution, localization |
//! | [`moderation`] | review queue, decisions, disagreements, thresholds, audit log |
//! | [`consent`] | scan-consent visibility gate |
//! | [`service`] | the wired system, HTTP API, persistence |
//! | [`simulation`] | synthetic corpus and moderator populations |

pub mod classifier;
pub mod consent;
pub mod corpus;
pub mod features;
pub mod hexfloat;
pub mod mesh;
pub mod metrics;
pub mod moderation;
pub mod service;
pub mod simulation;
