//! Compositional symbolic safety-controller synthesis with overlapping
//! subsystems.

pub mod abstraction;
pub mod bench;
pub mod composition;
pub mod decomposition;
pub mod dynamics;
pub mod geometry;
pub mod persist;
pub mod simulation;
pub mod synthesis;
