pub mod bench;
pub mod diffusion;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod numerics;
pub mod spatial;
pub mod temporal;
