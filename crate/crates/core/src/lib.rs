//! Influenza-like-illness nowcasting from short text messages.
//!
//! Messages are bucketed into Saturday-ending weeks, a boolean keyword query
//! yields a weekly matching fraction, and a logit-logit regression maps that
//! fraction onto the reference ILI rate. A bag-of-words classifier can
//! down-weight gate matches that are not self-reports, and the simulation
//! module measures how each estimator degrades when spurious messages flood
//! the stream.

pub mod classify;
pub mod cli;
pub mod corpus;
pub mod nowcast;
pub mod query;
pub mod regress;
pub mod simulate;
pub mod synth;
