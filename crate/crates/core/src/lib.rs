//! Page-aware slide-time labels, multi-dimensional attribution and
//! author-level lifetime value for short-video feed ranking.
//!
//! The crate is organised bottom-up: [`datamodel`] holds impressions and
//! sessions, [`synthgen`] simulates feeds with planted effects, the label
//! modules ([`pdq`], [`attribution`], [`author_ltv`]) derive training
//! targets, [`predictor`] trains a multi-head model on them, and
//! [`metrics`] and [`fusion_eval`] score the result.

pub mod attribution;
pub mod author_ltv;
pub mod datamodel;
pub mod fusion_eval;
pub mod metrics;
pub mod pdq;
pub mod predictor;
pub mod synthgen;
