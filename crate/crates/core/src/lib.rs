pub mod control;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod grid;
pub mod hji;
mod optim;
pub mod planner;
mod scheme;
pub mod sim;

pub use error::{Error, Result};
