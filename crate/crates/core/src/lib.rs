//! Thermodynamically consistent potentials learned from trajectory data.

pub mod diffcore;
pub mod evaluate;
pub mod networks;
pub mod pipeline;
pub mod potentials;
pub mod preprocess;
pub mod residuals;
pub mod simulate;
pub mod train;
