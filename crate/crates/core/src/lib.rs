//! Simulation substrate for decentralized federated learning on edge nodes.
//!
//! Layers, bottom up: [`idspace`] identifier arithmetic, [`overlay`] the
//! zone-aware routing overlay, [`forest`] per-application dataflow trees,
//! [`game`] congestion-game next-hop selection, [`netsim`] the
//! discrete-event network model and [`harness`] scenarios and metrics.

pub mod forest;
pub mod game;
pub mod harness;
pub mod idspace;
pub mod netsim;
pub mod overlay;
