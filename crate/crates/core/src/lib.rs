//! Batch toolkit for robocall campaign analysis: clustering call audio
//! embeddings into campaigns, comparing campaigns across vantage points, and
//! caller-ID, callback-number and SIP-timing analytics.

pub mod callback;
pub mod callerid;
pub mod campaign_match;
pub mod cluster;
pub mod cluster_eval;
pub mod model;
pub mod points;
pub mod preprocess;
pub mod signals;
pub mod synth;
