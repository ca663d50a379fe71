//! GPU cluster scheduling: trace handling, a discrete-event simulator,
//! classic priority policies and a learned scheduler with a placement
//! optimizer.

pub mod agent;
pub mod allocator;
pub mod cli;
pub mod cluster;
pub mod features;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod policies;
pub mod sim;
pub mod trace;
