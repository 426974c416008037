//! Two-timescale relay network optimization under mobility.
//!
//! Fading and path-loss channel models, the relay network utility problem,
//! the online primal-dual solver with compensation, reference oracles,
//! stability analysis and the experiment driver.

pub mod analysis;
pub mod channel;
pub mod experiment;
pub mod network;
pub mod oracle;
pub mod solver;
