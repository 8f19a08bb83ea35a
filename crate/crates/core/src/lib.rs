pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod expansion;
pub mod fairness;
pub mod federation;
pub mod fixtures;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod verify;
