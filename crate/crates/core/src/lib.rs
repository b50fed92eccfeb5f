pub mod data;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod synthetic;
