pub mod device;
pub mod error;
pub mod series;
pub mod special;
pub mod spectral;
pub mod rf;
pub mod noise;
pub mod chain;
pub mod control;
pub mod langevin;
pub mod scenario;
